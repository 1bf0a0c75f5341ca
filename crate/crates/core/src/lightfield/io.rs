//! Light-field persistence: the packed `.lf4` binary and the SAI-grid
//! directory of PNG views.

use std::fs;
use std::path::{Path, PathBuf};

use diffcore::Tensor;
use serde::{Deserialize, Serialize};

use super::LightField;
use crate::error::{io_err, json_err, Error, Result};

const MAGIC: &[u8; 4] = b"LF4D";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 7 * 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Format {
    /// Single `.lf4` file.
    Packed,
    /// Directory of `view_{v}_{u}.png` files plus `manifest.json`.
    SaiGrid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    fn code(self) -> u32 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Raw contents of a `.lf4` file. Unlike [`LightField`] the payload is not
/// range-checked, so the same container carries flows and disparities.
#[derive(Clone, Debug, PartialEq)]
pub struct PackedField {
    pub views_v: usize,
    pub views_h: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl PackedField {
    pub fn new(
        views_v: usize,
        views_h: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        let n = views_v * views_h * height * width * channels;
        if n != data.len() {
            return Err(Error::Shape(format!(
                "packed field {views_v}x{views_h}x{height}x{width}x{channels} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            views_v,
            views_h,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_light_field(lf: &LightField) -> Self {
        Self {
            views_v: lf.views(),
            views_h: lf.views(),
            height: lf.height(),
            width: lf.width(),
            channels: lf.channels(),
            data: lf.data().to_vec(),
        }
    }

    pub fn into_light_field(self) -> Result<LightField> {
        if self.views_v != self.views_h {
            return Err(Error::Shape(format!(
                "light fields need a square angular grid, got {}x{}",
                self.views_v, self.views_h
            )));
        }
        LightField::new(
            self.views_v,
            self.height,
            self.width,
            self.channels,
            self.data,
        )
    }

    pub fn to_bytes(&self, dtype: DType) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.data.len() * dtype.width());
        out.extend_from_slice(MAGIC);
        for field in [
            VERSION,
            self.views_v as u32,
            self.views_h as u32,
            self.height as u32,
            self.width as u32,
            self.channels as u32,
            dtype.code(),
        ] {
            out.extend_from_slice(&field.to_le_bytes());
        }
        match dtype {
            DType::F32 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            DType::F64 => self
                .data
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        out
    }

    /// Parses a `.lf4` byte stream; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let fmt = |detail: String| Error::Format {
            path: path.to_path_buf(),
            detail,
        };
        if bytes.len() < HEADER_LEN {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(fmt(format!(
                "magic is {:?}, expected \"LF4D\"",
                &bytes[..4]
            )));
        }
        let field = |i: usize| {
            let o = 4 + 4 * i;
            u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4-byte slice")) as usize
        };
        let version = field(0);
        if version != VERSION as usize {
            return Err(fmt(format!("version {version} is not supported")));
        }
        let (views_v, views_h, height, width, channels) =
            (field(1), field(2), field(3), field(4), field(5));
        let dtype = match field(6) {
            0 => DType::F32,
            1 => DType::F64,
            other => return Err(fmt(format!("dtype code {other} is not 0 (f32) or 1 (f64)"))),
        };
        for (name, v) in [
            ("U_v", views_v),
            ("U_h", views_h),
            ("H", height),
            ("W", width),
            ("C", channels),
        ] {
            if v == 0 {
                return Err(fmt(format!("header field {name} is zero")));
            }
        }
        let n = views_v * views_h * height * width * channels;
        let payload = &bytes[HEADER_LEN..];
        let expected = n * dtype.width();
        if payload.len() != expected {
            return Err(Error::Length {
                path: path.to_path_buf(),
                expected: HEADER_LEN + expected,
                found: bytes.len(),
            });
        }
        let data = match dtype {
            DType::F32 => payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64)
                .collect(),
            DType::F64 => payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect(),
        };
        Self::new(views_v, views_h, height, width, channels, data)
    }

    pub fn write(&self, path: impl AsRef<Path>, dtype: DType) -> Result<()> {
        let path = ensure_parent(path.as_ref())?;
        fs::write(&path, self.to_bytes(dtype)).map_err(io_err(&path))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes, path)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct GridManifest {
    #[serde(rename = "U")]
    views: usize,
    #[serde(rename = "H")]
    height: usize,
    #[serde(rename = "W")]
    width: usize,
    #[serde(rename = "C")]
    channels: usize,
}

pub fn view_file_name(v: usize, u: usize) -> String {
    format!("view_{v}_{u}.png")
}

pub fn load(path: impl AsRef<Path>, format: Format) -> Result<LightField> {
    let path = path.as_ref();
    match format {
        Format::Packed => PackedField::read(path)?.into_light_field(),
        Format::SaiGrid => load_grid(path),
    }
}

/// Writes `lf`; packed files use 64-bit samples so reloading is bit-exact.
pub fn save(lf: &LightField, path: impl AsRef<Path>, format: Format) -> Result<()> {
    let path = path.as_ref();
    match format {
        Format::Packed => PackedField::from_light_field(lf).write(path, DType::F64),
        Format::SaiGrid => save_grid(lf, path),
    }
}

fn save_grid(lf: &LightField, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest = GridManifest {
        views: lf.views(),
        height: lf.height(),
        width: lf.width(),
        channels: lf.channels(),
    };
    let mpath = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).map_err(json_err(&mpath))?;
    fs::write(&mpath, text).map_err(io_err(&mpath))?;
    for v in 0..lf.views() {
        for u in 0..lf.views() {
            write_png(&lf.view(v, u)?, dir.join(view_file_name(v, u)))?;
        }
    }
    Ok(())
}

fn load_grid(dir: &Path) -> Result<LightField> {
    let mpath = dir.join("manifest.json");
    let text = fs::read_to_string(&mpath).map_err(io_err(&mpath))?;
    let m: GridManifest = serde_json::from_str(&text).map_err(json_err(&mpath))?;
    let mut data = Vec::with_capacity(m.views * m.views * m.height * m.width * m.channels);
    for v in 0..m.views {
        for u in 0..m.views {
            let name = view_file_name(v, u);
            let p = dir.join(&name);
            if !p.is_file() {
                return Err(Error::MissingView {
                    dir: dir.to_path_buf(),
                    name: name.trim_end_matches(".png").to_string(),
                });
            }
            let img = read_png(&p)?;
            if img.shape() != [m.height, m.width, m.channels] {
                return Err(Error::Format {
                    path: p,
                    detail: format!(
                        "view is {:?} but manifest declares [{}, {}, {}]",
                        img.shape(),
                        m.height,
                        m.width,
                        m.channels
                    ),
                });
            }
            data.extend_from_slice(img.data());
        }
    }
    LightField::new(m.views, m.height, m.width, m.channels, data)
}

/// 8-bit quantization with ties rounded to even.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round_ties_even() as u8
}

/// Writes an `[H, W, 1]` or `[H, W, 3]` image with samples in `[0, 1]` as an
/// 8-bit PNG.
pub fn write_png(image: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = &ensure_parent(path.as_ref())?;
    let (h, w, c) = super::image_dims(image)?;
    let bytes: Vec<u8> = image.data().iter().map(|&v| quantize(v)).collect();
    let color = match c {
        1 => image::ExtendedColorType::L8,
        3 => image::ExtendedColorType::Rgb8,
        _ => {
            return Err(Error::Shape(format!(
                "PNG output needs 1 or 3 channels, got {c}"
            )))
        }
    };
    image::save_buffer(path, &bytes, w as u32, h as u32, color).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a PNG as an `[H, W, C]` tensor in `[0, 1]`; grayscale images keep one
/// channel, everything else is read as RGB.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (c, raw) = match img.color().channel_count() {
        1 | 2 => (1, img.into_luma8().into_raw()),
        _ => (3, img.into_rgb8().into_raw()),
    };
    Ok(Tensor::new(
        vec![h, w, c],
        raw.into_iter().map(|b| b as f64 / 255.0).collect(),
    )?)
}

/// Luminance of an `[H, W, 3]` image using ITU-R BT.601 weights; one-channel
/// images are returned unchanged.
pub fn luminance(image: &Tensor) -> Result<Tensor> {
    let (h, w, c) = super::image_dims(image)?;
    match c {
        1 => Ok(image.clone()),
        3 => Ok(Tensor::new(
            vec![h, w, 1],
            image
                .data()
                .chunks_exact(3)
                .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
                .collect(),
        )?),
        _ => Err(Error::Shape(format!(
            "cannot take luminance of {c} channels"
        ))),
    }
}

pub(crate) fn ensure_parent(path: &Path) -> Result<PathBuf> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    Ok(path.to_path_buf())
}
