//! On-disk synthetic corpora.
//!
//! Each scene is stored as a high-resolution field (`*.hr.lf4`, twice the
//! requested extent), its 2x2 box-filtered low-resolution field
//! (`*.lr.lf4`), and low-resolution ground-truth sidecars: visible disparity
//! (`*.disp.gt.lf4`, C = 1), the pure parallax flow `-d * Δu`
//! (`*.flow.gt.lf4`, C = 2; add `eta * Δu` for the flow after shifting) and
//! the occlusion mask (`*.occ.gt.lf4`, C = 1, 1 where the pixel has no
//! reliable correspondence in the center view).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{box_downsample, generate, random_scene, SceneSpec};
use crate::error::{io_err, json_err, Error, Result};
use crate::lfops::AppearanceFlowField;
use crate::lightfield::{DType, LightField, PackedField};

/// Disparity range (low-resolution pixels per view) of generated corpora.
pub const DISPARITY_RANGE: (f64, f64) = (-1.5, 1.5);

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneEntry {
    pub name: String,
    pub seed: u64,
    pub lr: String,
    pub hr: String,
    pub disparity: String,
    pub flow: String,
    pub occlusion: String,
    pub disparity_range: [f64; 2],
    pub spec: SceneSpec,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub views: usize,
    pub lr_hw: [usize; 2],
    pub hr_hw: [usize; 2],
    pub seed: u64,
    pub disparity_range: [f64; 2],
    pub scenes: Vec<SceneEntry>,
}

/// One scene loaded back from a corpus.
#[derive(Clone, Debug)]
pub struct Scene {
    pub lr: LightField,
    pub hr: LightField,
    pub disparity: PackedField,
    pub parallax_flow: AppearanceFlowField,
    pub occlusion: PackedField,
}

impl Scene {
    /// Ground-truth flow after shifting by `eta`: `(eta - d) * Δu`.
    pub fn ideal_flow(&self, eta: f64) -> Result<AppearanceFlowField> {
        let shift = AppearanceFlowField::from_fn(
            self.parallax_flow.views(),
            self.parallax_flow.height(),
            self.parallax_flow.width(),
            |o, _, _| (eta * o.dh as f64, eta * o.dv as f64),
        )?;
        let data = self
            .parallax_flow
            .data()
            .iter()
            .zip(shift.data())
            .map(|(a, b)| a + b)
            .collect();
        AppearanceFlowField::new(
            self.parallax_flow.views(),
            self.parallax_flow.height(),
            self.parallax_flow.width(),
            data,
        )
    }
}

/// Seed of scene `i` in a corpus generated from `seed`.
pub fn scene_seed(seed: u64, i: usize) -> u64 {
    // splitmix64 step
    let mut z = seed.wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Writes `n_scenes` scenes with `hw` low-resolution extent and `views x
/// views` views into `out_dir`, returning the manifest (also written as
/// `manifest.json`).
pub fn make_dataset(
    n_scenes: usize,
    hw: [usize; 2],
    views: usize,
    seed: u64,
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    make_dataset_in_range(n_scenes, hw, views, seed, DISPARITY_RANGE, out_dir)
}

pub fn make_dataset_in_range(
    n_scenes: usize,
    hw: [usize; 2],
    views: usize,
    seed: u64,
    range: (f64, f64),
    out_dir: impl AsRef<Path>,
) -> Result<DatasetManifest> {
    let dir = out_dir.as_ref();
    if n_scenes == 0 {
        return Err(Error::Argument("a corpus needs at least one scene".into()));
    }
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut scenes = Vec::with_capacity(n_scenes);
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for i in 0..n_scenes {
        let s = scene_seed(seed, i);
        let spec = random_scene(hw, views, s, range);
        let name = format!("scene_{i:03}");
        let entry = write_scene(&spec, &name, dir)?;
        lo = lo.min(entry.disparity_range[0]);
        hi = hi.max(entry.disparity_range[1]);
        scenes.push(entry);
    }
    let manifest = DatasetManifest {
        version: 1,
        views,
        lr_hw: hw,
        hr_hw: [2 * hw[0], 2 * hw[1]],
        seed,
        disparity_range: [lo, hi],
        scenes,
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&path))?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

fn write_scene(spec: &SceneSpec, name: &str, dir: &Path) -> Result<SceneEntry> {
    let (hr, _) = spec.render(2)?;
    let lr = box_downsample(&hr)?;
    let gt = generate(spec)?;
    let (u, h, w) = (spec.views, spec.hw[0], spec.hw[1]);
    let entry = SceneEntry {
        name: name.to_string(),
        seed: spec.seed,
        lr: format!("{name}.lr.lf4"),
        hr: format!("{name}.hr.lf4"),
        disparity: format!("{name}.disp.gt.lf4"),
        flow: format!("{name}.flow.gt.lf4"),
        occlusion: format!("{name}.occ.gt.lf4"),
        disparity_range: spec
            .layers
            .iter()
            .fold([f64::INFINITY, f64::NEG_INFINITY], |r, l| {
                [r[0].min(l.disparity), r[1].max(l.disparity)]
            }),
        spec: spec.clone(),
    };
    PackedField::from_light_field(&lr).write(dir.join(&entry.lr), DType::F64)?;
    PackedField::from_light_field(&hr).write(dir.join(&entry.hr), DType::F64)?;
    PackedField::new(u, u, h, w, 1, gt.disparity.clone())?
        .write(dir.join(&entry.disparity), DType::F64)?;
    gt.ideal_flow(0.0)
        .to_packed()
        .write(dir.join(&entry.flow), DType::F64)?;
    let occ = gt
        .valid
        .iter()
        .map(|&v| if v { 0.0 } else { 1.0 })
        .collect();
    PackedField::new(u, u, h, w, 1, occ)?.write(dir.join(&entry.occlusion), DType::F64)?;
    Ok(entry)
}

impl DatasetManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = manifest_path(dir.as_ref());
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        serde_json::from_str(&text).map_err(json_err(&path))
    }

    pub fn load_scene(&self, dir: impl AsRef<Path>, i: usize) -> Result<Scene> {
        let dir = dir.as_ref();
        let e = self
            .scenes
            .get(i)
            .ok_or_else(|| Error::Argument(format!("scene {i} out of range")))?;
        Ok(Scene {
            lr: crate::lightfield::load(dir.join(&e.lr), crate::lightfield::Format::Packed)?,
            hr: crate::lightfield::load(dir.join(&e.hr), crate::lightfield::Format::Packed)?,
            disparity: PackedField::read(dir.join(&e.disparity))?,
            parallax_flow: AppearanceFlowField::from_packed(PackedField::read(dir.join(&e.flow))?)?,
            occlusion: PackedField::read(dir.join(&e.occlusion))?,
        })
    }
}

/// `dir/manifest.json`, or `dir` itself when it already names a file.
pub fn manifest_path(dir: &Path) -> PathBuf {
    if dir.is_file() {
        dir.to_path_buf()
    } else {
        dir.join(MANIFEST_NAME)
    }
}
