use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{iteration_rng, train_step, Augmentation, Moment, Sample, TrainConfig, TrainState};
use crate::error::{io_err, json_err, Error, Result};
use crate::lightfield::DType;
use crate::losses::LossReport;
use crate::model::{load_checkpoint_for, save_checkpoint};
use crate::synthgen::DatasetManifest;

pub const LOG_NAME: &str = "train.log.jsonl";
const STATE_PARAMS: &str = "state.lfck";
const STATE_MOMENTS: &str = "state.lfas";
const FINAL_NAME: &str = "final.lfck";
const MOMENTS_MAGIC: &[u8; 4] = b"LFAS";

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: usize,
    pub global: f64,
    pub local: f64,
    pub tv: f64,
    pub sr: f64,
    pub total: f64,
    pub stage: u8,
    pub scenes: Vec<usize>,
    pub augment: Vec<Augmentation>,
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    config: TrainConfig,
}

#[derive(Debug)]
pub struct FitOutcome {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub state: TrainState,
}

/// A training run bound to a corpus and an output directory.
pub struct Trainer {
    config: TrainConfig,
    out_dir: PathBuf,
    samples: Vec<Sample>,
    state: TrainState,
    log: File,
}

impl Trainer {
    /// Loads the training scenes and prepares `out_dir`. With `resume`, the
    /// last saved state in `out_dir` is restored and the log is cut back to
    /// it; otherwise training starts from scratch.
    pub fn new(config: &TrainConfig, corpus: &Path, out_dir: &Path, resume: bool) -> Result<Self> {
        config.validate()?;
        let manifest = DatasetManifest::load(corpus)?;
        let corpus_dir = if corpus.is_file() {
            corpus.parent().unwrap_or(Path::new(".")).to_path_buf()
        } else {
            corpus.to_path_buf()
        };
        if manifest.views != config.net.views {
            return Err(Error::Config(format!(
                "corpus has {0}x{0} views, the network expects {1}x{1}",
                manifest.views, config.net.views
            )));
        }
        if config.holdout >= manifest.scenes.len() {
            return Err(Error::Config(format!(
                "holdout {} leaves no training scenes out of {}",
                config.holdout,
                manifest.scenes.len()
            )));
        }
        let [h, w] = config.crop.unwrap_or(manifest.lr_hw);
        config.net.check_extent(h, w)?;
        let samples = (0..manifest.scenes.len() - config.holdout)
            .map(|i| Sample::from_scene(&manifest.load_scene(&corpus_dir, i)?))
            .collect::<Result<Vec<_>>>()?;

        fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
        let log_path = out_dir.join(LOG_NAME);
        let state_exists = out_dir.join(STATE_PARAMS).is_file();
        let state = if resume && state_exists {
            let state = load_state(out_dir, config)?;
            let (_, mut records) = read_log(&log_path)?;
            records.retain(|r| r.iter <= state.iteration);
            write_log(&log_path, config, &records)?;
            let mut state = state;
            state.history = records.iter().map(record_report).collect();
            state
        } else {
            write_log(&log_path, config, &[])?;
            TrainState::new(config)?
        };
        let log = OpenOptions::new()
            .append(true)
            .open(&log_path)
            .map_err(io_err(&log_path))?;
        Ok(Self {
            config: config.clone(),
            out_dir: out_dir.to_path_buf(),
            samples,
            state,
            log,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    /// Trains until `iteration` iterations are complete (capped at
    /// `total_iters`).
    pub fn run_until(&mut self, iteration: usize) -> Result<()> {
        let target = iteration.min(self.config.total_iters);
        while self.state.iteration < target {
            let next = self.state.iteration + 1;
            let mut rng = iteration_rng(self.config.seed, next);
            let mut batch = Vec::with_capacity(self.config.batch_size);
            let mut scenes = Vec::new();
            let mut augment = Vec::new();
            for _ in 0..self.config.batch_size {
                let i = rng.gen_range(0..self.samples.len());
                let a = super::draw_augmentation(
                    &self.samples[i],
                    self.config.gamma_range,
                    self.config.crop,
                    &mut rng,
                )?;
                batch.push(a.apply(&self.samples[i])?);
                scenes.push(i);
                augment.push(a);
            }
            let stage = self.state.stage(&self.config);
            let r = train_step(&mut self.state, &self.config, &batch)?;
            let record = LogRecord {
                iter: next,
                global: r.global,
                local: r.local,
                tv: r.tv,
                sr: r.sr,
                total: r.total,
                stage,
                scenes,
                augment,
            };
            let path = self.out_dir.join(LOG_NAME);
            let line = serde_json::to_string(&record).map_err(json_err(&path))?;
            writeln!(self.log, "{line}").map_err(io_err(&path))?;
            let every = self.config.checkpoint_every;
            if every > 0 && next % every == 0 {
                let ckpt = self.out_dir.join(format!("ckpt_{next:06}.lfck"));
                save_checkpoint(&self.state.params, &ckpt, DType::F64)?;
                save_state(&self.state, &self.out_dir)?;
            }
        }
        Ok(())
    }

    /// Writes the final checkpoint and the resumable state.
    pub fn finish(self) -> Result<FitOutcome> {
        let checkpoint = self.out_dir.join(FINAL_NAME);
        save_checkpoint(&self.state.params, &checkpoint, DType::F64)?;
        save_state(&self.state, &self.out_dir)?;
        Ok(FitOutcome {
            checkpoint,
            log: self.out_dir.join(LOG_NAME),
            state: self.state,
        })
    }
}

/// Runs both stages to `total_iters` and writes `final.lfck`.
pub fn fit(config: &TrainConfig, corpus: &Path, out_dir: &Path) -> Result<FitOutcome> {
    let mut t = Trainer::new(config, corpus, out_dir, false)?;
    t.run_until(config.total_iters)?;
    t.finish()
}

fn record_report(r: &LogRecord) -> LossReport {
    LossReport {
        global: r.global,
        local: r.local,
        tv: r.tv,
        sr: r.sr,
        pixel: 0.0,
        total: r.total,
    }
}

fn write_log(path: &Path, config: &TrainConfig, records: &[LogRecord]) -> Result<()> {
    let mut text = serde_json::to_string(&LogHeader {
        config: config.clone(),
    })
    .map_err(json_err(path))?;
    text.push('\n');
    for r in records {
        text.push_str(&serde_json::to_string(r).map_err(json_err(path))?);
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

/// Reads a training log: the configuration header and every record.
pub fn read_log(path: &Path) -> Result<(TrainConfig, Vec<LogRecord>)> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(file).lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format {
            path: path.to_path_buf(),
            detail: "empty log".into(),
        })?
        .map_err(io_err(path))?;
    let header: LogHeader = serde_json::from_str(&header).map_err(json_err(path))?;
    let mut records = Vec::new();
    for line in lines {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(serde_json::from_str(&line).map_err(json_err(path))?);
    }
    Ok((header.config, records))
}

/// Saves parameters (`state.lfck`) and Adam moments (`state.lfas`).
pub fn save_state(state: &TrainState, dir: &Path) -> Result<()> {
    save_checkpoint(&state.params, dir.join(STATE_PARAMS), DType::F64)?;
    let mut out = Vec::new();
    out.extend_from_slice(MOMENTS_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&state.params.config().fingerprint().to_le_bytes());
    out.extend_from_slice(&(state.iteration as u64).to_le_bytes());
    out.extend_from_slice(&(state.moments.len() as u32).to_le_bytes());
    for m in &state.moments {
        out.extend_from_slice(&m.step.to_le_bytes());
        out.extend_from_slice(&(m.m.len() as u64).to_le_bytes());
        out.extend_from_slice(&m.m.to_f64_le_bytes());
        out.extend_from_slice(&m.v.to_f64_le_bytes());
    }
    let path = dir.join(STATE_MOMENTS);
    fs::write(&path, out).map_err(io_err(&path))
}

/// Restores the state saved by [`save_state`] for `config`.
pub fn load_state(dir: &Path, config: &TrainConfig) -> Result<TrainState> {
    let params = load_checkpoint_for(dir.join(STATE_PARAMS), &config.net)?;
    let path = dir.join(STATE_MOMENTS);
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    let short = |need: usize| Error::Length {
        path: path.clone(),
        expected: need,
        found: bytes.len(),
    };
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| short(pos + n))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != MOMENTS_MAGIC {
        return Err(Error::Format {
            path: path.clone(),
            detail: "magic is not \"LFAS\"".into(),
        });
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes(s.try_into().expect("4 bytes"));
    let u64_at = |s: &[u8]| u64::from_le_bytes(s.try_into().expect("8 bytes"));
    let version = u32_at(take(4)?);
    let fingerprint = u64_at(take(8)?);
    if version != 1 || fingerprint != config.net.fingerprint() {
        return Err(Error::Format {
            path: path.clone(),
            detail: "optimizer state belongs to a different network".into(),
        });
    }
    let iteration = u64_at(take(8)?) as usize;
    let count = u32_at(take(4)?) as usize;
    if count != params.tensors().len() {
        return Err(Error::Format {
            path: path.clone(),
            detail: format!(
                "{count} moment entries for {} parameters",
                params.tensors().len()
            ),
        });
    }
    let mut moments = Vec::with_capacity(count);
    for t in params.tensors() {
        let step = u64_at(take(8)?);
        let len = u64_at(take(8)?) as usize;
        if len != t.len() {
            return Err(Error::Format {
                path: path.clone(),
                detail: format!("moment of length {len} for a parameter of {}", t.len()),
            });
        }
        let m = Tensor::from_f64_le_bytes(t.shape(), take(8 * len)?)?;
        let v = Tensor::from_f64_le_bytes(t.shape(), take(8 * len)?)?;
        moments.push(Moment { m, v, step });
    }
    if pos != bytes.len() {
        return Err(Error::Length {
            path: path.clone(),
            expected: pos,
            found: bytes.len(),
        });
    }
    Ok(TrainState {
        iteration,
        params,
        moments,
        history: Vec::new(),
    })
}
