//! `lfsr`: corpus generation, training, synthesis and light-field tools.
//!
//! Machine-readable results go to stdout as one JSON object; progress and
//! notes go to stderr. Exit status is 0 on success, 2 for usage and
//! validation errors and 3 when training or inference hits a non-finite
//! value.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use diffcore::Tensor;
use lfsr::lfops::{flow_mosaic, AppearanceFlowField};
use lfsr::lightfield::{
    self, luminance, read_png, write_png, Format, LightField, Metrics, PackedField,
};
use lfsr::model::load_checkpoint;
use lfsr::synthgen::{make_dataset, manifest_path};
use lfsr::trainer::{TrainConfig, Trainer};
use lfsr::{Error, Result};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(
    name = "lfsr",
    version,
    about = "Single-image light-field synthesis and super-resolution"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus of layered scenes.
    GenData(GenData),
    /// Train a network on a corpus.
    Train(Train),
    /// Synthesize a high-resolution light field from one image.
    Synthesize(Synthesize),
    /// Shift-and-average refocusing of a light field to a PNG.
    Refocus(Refocus),
    /// Horizontal epipolar-plane image of a light field to a PNG.
    Epi(Epi),
    /// PSNR and SSIM of a predicted field, center view excluded.
    Eval(Eval),
    /// Color-wheel rendering of an appearance flow to a PNG.
    FlowVis(FlowVis),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    scenes: usize,
    /// Low-resolution extent as HxW.
    #[arg(long, value_parser = parse_size)]
    size: [usize; 2],
    #[arg(long)]
    views: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Train {
    /// JSON training config; the desk preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from the state saved in the output directory.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct Synthesize {
    #[arg(long)]
    ckpt: PathBuf,
    /// Input PNG; color images are converted to luminance.
    #[arg(long)]
    image: PathBuf,
    /// Output `.lf4` file.
    #[arg(long)]
    out: PathBuf,
    /// Run the network a second time for four-times resolution.
    #[arg(long)]
    x4: bool,
}

#[derive(Args)]
struct Refocus {
    /// Light field as `.lf4` or a directory of view PNGs.
    #[arg(long)]
    lf: PathBuf,
    #[arg(long, allow_hyphen_values = true)]
    slope: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Epi {
    #[arg(long)]
    lf: PathBuf,
    #[arg(long)]
    row: usize,
    /// Angular row of the views to slice; the center row by default.
    #[arg(long)]
    v: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct Eval {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
}

#[derive(Args)]
struct FlowVis {
    /// Packed flow field (`.flow.gt.lf4`, two channels).
    #[arg(long, conflicts_with_all = ["ckpt", "image"], required_unless_present = "ckpt")]
    flow: Option<PathBuf>,
    /// Checkpoint whose predicted flow for `--image` is rendered.
    #[arg(long, requires = "image")]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    image: Option<PathBuf>,
    /// Magnitude mapped to full saturation; the largest vector by default.
    #[arg(long)]
    max_mag: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

fn parse_size(s: &str) -> std::result::Result<[usize; 2], String> {
    let (h, w) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let dim = |t: &str| {
        t.trim()
            .parse::<usize>()
            .ok()
            .filter(|&v| v > 0)
            .ok_or_else(|| format!("{t:?} is not a positive integer"))
    };
    Ok([dim(h)?, dim(w)?])
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Synthesize(a) => synthesize(a),
        Command::Refocus(a) => refocus(a),
        Command::Epi(a) => epi(a),
        Command::Eval(a) => eval(a),
        Command::FlowVis(a) => flow_vis(a),
    };
    match result {
        Ok(v) => {
            println!("{v}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFiniteLoss { .. } | Error::NonFiniteTerm { .. } => 3,
        Error::Numeric(diffcore::Error::NonFinite { .. }) => 3,
        _ => 2,
    }
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Argument(format!(
            "{what} {} does not exist",
            path.display()
        )))
    }
}

fn load_field(path: &Path) -> Result<LightField> {
    require(path, "light field")?;
    let format = if path.is_dir() {
        Format::SaiGrid
    } else {
        Format::Packed
    };
    lightfield::load(path, format)
}

fn gen_data(a: GenData) -> Result<Value> {
    if a.views % 2 == 0 {
        return Err(Error::Argument(format!(
            "views must be odd, got {}",
            a.views
        )));
    }
    if a.scenes == 0 {
        return Err(Error::Argument("scenes must be at least 1".into()));
    }
    let manifest = make_dataset(a.scenes, a.size, a.views, a.seed, &a.out)?;
    Ok(json!({
        "manifest": manifest_path(&a.out),
        "scenes": manifest.scenes.len(),
        "views": manifest.views,
        "lr_hw": manifest.lr_hw,
        "hr_hw": manifest.hr_hw,
    }))
}

fn train(a: Train) -> Result<Value> {
    require(&a.corpus, "corpus")?;
    let config = match &a.config {
        Some(path) => {
            require(path, "config")?;
            TrainConfig::load(path)?
        }
        None => TrainConfig::desk(),
    };
    let mut trainer = Trainer::new(&config, &a.corpus, &a.out, a.resume)?;
    let start = trainer.state().iteration;
    let step = (config.total_iters / 20).max(1);
    while trainer.state().iteration < config.total_iters {
        let next = (trainer.state().iteration + step).min(config.total_iters);
        trainer.run_until(next)?;
        if let Some(r) = trainer.state().history.last() {
            eprintln!(
                "iteration {next}/{}: total loss {:.5}",
                config.total_iters, r.total
            );
        }
    }
    let outcome = trainer.finish()?;
    Ok(json!({
        "checkpoint": outcome.checkpoint,
        "log": outcome.log,
        "start_iteration": start,
        "iterations": outcome.state.iteration,
        "final_loss": outcome.state.history.last().map(|r| r.total),
    }))
}

/// Reads a PNG as the network input, converting color to luminance.
fn input_image(path: &Path) -> Result<Tensor> {
    require(path, "image")?;
    let img = read_png(path)?;
    if img.shape()[2] == 1 {
        return Ok(img);
    }
    eprintln!(
        "note: {} has {} channels; using its luminance",
        path.display(),
        img.shape()[2]
    );
    luminance(&img)
}

fn check_extent(img: &Tensor, config: &lfsr::model::NetConfig) -> Result<()> {
    let (h, w) = (img.shape()[0], img.shape()[1]);
    config.check_extent(h, w).map_err(|_| {
        let m = 1usize << config.depth;
        Error::Shape(format!(
            "image is {h}x{w} but the checkpoint network takes {}x{} (any extent divisible by {m})",
            config.input_hw[0], config.input_hw[1]
        ))
    })
}

fn synthesize(a: Synthesize) -> Result<Value> {
    require(&a.ckpt, "checkpoint")?;
    let img = input_image(&a.image)?;
    let params = load_checkpoint(&a.ckpt)?;
    check_extent(&img, params.config())?;
    let lf = if a.x4 {
        params.synth_hr_x4(&img)?
    } else {
        params.infer(&img)?.lf_hr
    };
    lightfield::save(&lf, &a.out, Format::Packed)?;
    Ok(json!({
        "out": a.out,
        "views": lf.views(),
        "height": lf.height(),
        "width": lf.width(),
        "channels": lf.channels(),
    }))
}

fn refocus(a: Refocus) -> Result<Value> {
    let lf = load_field(&a.lf)?;
    let img = lf.refocus(a.slope)?;
    write_png(&img, &a.out)?;
    Ok(json!({ "out": a.out, "slope": a.slope }))
}

fn epi(a: Epi) -> Result<Value> {
    let lf = load_field(&a.lf)?;
    let v = a.v.unwrap_or(lf.center_index().0);
    let img = lf.epi(a.row, v)?;
    write_png(&img, &a.out)?;
    Ok(json!({ "out": a.out, "row": a.row, "v": v, "shape": img.shape() }))
}

fn eval(a: Eval) -> Result<Value> {
    let pred = load_field(&a.pred)?;
    let truth = load_field(&a.truth)?;
    if !pred.same_shape(&truth) {
        return Err(Error::Shape(format!(
            "prediction is {:?} but truth is {:?}",
            pred.to_stack().shape(),
            truth.to_stack().shape()
        )));
    }
    let m = Metrics::fields(&pred, &truth)?;
    Ok(json!({ "psnr_db": m.psnr_db, "ssim": m.ssim }))
}

fn flow_vis(a: FlowVis) -> Result<Value> {
    let flow = match (&a.flow, &a.ckpt, &a.image) {
        (Some(path), _, _) => {
            require(path, "flow")?;
            AppearanceFlowField::from_packed(PackedField::read(path)?)?
        }
        (None, Some(ckpt), Some(image)) => {
            require(ckpt, "checkpoint")?;
            let img = input_image(image)?;
            let params = load_checkpoint(ckpt)?;
            check_extent(&img, params.config())?;
            params.forward_angular(&img)?.0
        }
        _ => {
            return Err(Error::Argument(
                "give --flow, or --ckpt with --image".into(),
            ))
        }
    };
    if let Some(m) = a.max_mag {
        if !(m.is_finite() && m > 0.0) {
            return Err(Error::Argument(format!(
                "max-mag must be positive, got {m}"
            )));
        }
    }
    let peak = flow
        .data()
        .chunks_exact(2)
        .map(|p| p[0].hypot(p[1]))
        .fold(0.0, f64::max);
    let img = flow_mosaic(&flow, a.max_mag)?;
    write_png(&img, &a.out)?;
    Ok(json!({
        "out": a.out,
        "views": flow.views(),
        "max_magnitude": peak,
        "scale": a.max_mag.unwrap_or(peak),
    }))
}
