//! Unaligned two-domain image data: folder ingestion, preprocessing, batch
//! sampling and procedural toy domains.
//!
//! There is deliberately no API that returns an X image together with a
//! particular Y image; the two domains are sampled independently.

pub mod toy;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, DynamicImage, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use toy::{synth_toy_domains, ToyTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    X,
    Y,
}

impl Domain {
    pub fn dir_name(self) -> &'static str {
        match self {
            Domain::X => "domainX",
            Domain::Y => "domainY",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreprocessSpec {
    /// Side of the central square crop; `None` crops the largest centered square.
    pub crop: Option<u32>,
    /// Side after resizing.
    pub resolution: u32,
    /// Random horizontal flips in `next_batch`.
    pub flip: bool,
}

impl PreprocessSpec {
    pub fn new(resolution: u32) -> Self {
        Self {
            crop: None,
            resolution,
            flip: false,
        }
    }

    /// Center crop, resize, map to `[-1, 1]`, CHW layout.
    pub fn apply(&self, img: &DynamicImage) -> std::result::Result<Vec<f32>, String> {
        let (w, h) = (img.width(), img.height());
        let side = match self.crop {
            Some(c) if c > w.min(h) => {
                return Err(format!("crop {c} exceeds source size {w}x{h}"));
            }
            Some(c) => c,
            None => w.min(h),
        };
        let x0 = (w - side) / 2;
        let y0 = (h - side) / 2;
        let cropped = img.crop_imm(x0, y0, side, side);
        let r = self.resolution;
        let resized = if side == r {
            cropped
        } else {
            cropped.resize_exact(r, r, FilterType::Triangle)
        };
        Ok(rgb_to_signed_chw(&resized.to_rgb8()))
    }
}

pub fn rgb_to_signed_chw(img: &RgbImage) -> Vec<f32> {
    let (w, h) = img.dimensions();
    let plane = (w * h) as usize;
    let mut out = vec![0f32; 3 * plane];
    for (x, y, p) in img.enumerate_pixels() {
        let i = (y * w + x) as usize;
        for c in 0..3 {
            out[c * plane + i] = p[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// `[N, 3, H, W]` in `[-1, 1]` to 8-bit images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t
        .to_dtype(candle_core::DType::F32)?
        .flatten_all()?
        .to_vec1::<f32>()?;
    let plane = h * w;
    Ok((0..n)
        .map(|k| {
            let base = k * 3 * plane;
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                let px = |c: usize| {
                    let v = (data[base + c * plane + i] + 1.0) * 127.5;
                    v.round().clamp(0.0, 255.0) as u8
                };
                image::Rgb([px(0), px(1), px(2)])
            })
        })
        .collect())
}

fn is_image_file(p: &Path) -> bool {
    matches!(
        p.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("png" | "jpg" | "jpeg" | "bmp")
    )
}

/// Sorted image files of a directory (non-recursive).
pub fn list_images(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let path = e.map_err(|e| Error::io(dir, e))?.path();
        if path.is_file() && is_image_file(&path) {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

pub fn decode(path: &Path, spec: &PreprocessSpec) -> Result<Vec<f32>> {
    let img = image::open(path).map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    spec.apply(&img).map_err(|msg| Error::Decode {
        path: path.to_path_buf(),
        msg,
    })
}

#[derive(Clone, Debug)]
enum Items {
    Files(Vec<PathBuf>),
    Memory(Arc<Vec<Vec<f32>>>),
}

/// One image domain. Immutable after construction.
#[derive(Clone, Debug)]
pub struct DomainDataset {
    pub domain: Domain,
    spec: PreprocessSpec,
    items: Items,
    strict: bool,
}

/// Lists a folder of images. A handful of files spread over the listing are
/// decoded up front; the rest are checked lazily.
pub fn load_domain(
    path: &Path,
    domain: Domain,
    spec: PreprocessSpec,
    strict: bool,
) -> Result<DomainDataset> {
    let files = list_images(path)?;
    if files.is_empty() {
        return Err(Error::Data(format!("{} contains no images", path.display())));
    }
    let probes = files.len().min(8);
    let mut ok = 0;
    for k in 0..probes {
        let f = &files[k * files.len() / probes];
        match decode(f, &spec) {
            Ok(_) => ok += 1,
            Err(e) if strict => return Err(e),
            Err(e) => log::warn!("{e}"),
        }
    }
    if ok == 0 {
        return Err(Error::Data(format!(
            "none of the sampled images in {} could be decoded",
            path.display()
        )));
    }
    Ok(DomainDataset {
        domain,
        spec,
        items: Items::Files(files),
        strict,
    })
}

impl DomainDataset {
    /// In-memory dataset of CHW `[-1, 1]` images.
    pub fn from_images(domain: Domain, resolution: u32, images: Vec<Vec<f32>>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Data("dataset must contain at least one image".into()));
        }
        let expect = 3 * (resolution * resolution) as usize;
        if let Some(bad) = images.iter().position(|i| i.len() != expect) {
            return Err(Error::Shape(format!(
                "image {bad} has {} values, expected {expect}",
                images[bad].len()
            )));
        }
        Ok(Self {
            domain,
            spec: PreprocessSpec::new(resolution),
            items: Items::Memory(Arc::new(images)),
            strict: true,
        })
    }

    pub fn len(&self) -> usize {
        match &self.items {
            Items::Files(f) => f.len(),
            Items::Memory(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn resolution(&self) -> u32 {
        self.spec.resolution
    }

    pub fn spec(&self) -> &PreprocessSpec {
        &self.spec
    }

    pub fn with_flip(mut self, flip: bool) -> Self {
        self.spec.flip = flip;
        self
    }

    pub fn files(&self) -> Option<&[PathBuf]> {
        match &self.items {
            Items::Files(f) => Some(f),
            Items::Memory(_) => None,
        }
    }

    /// Image `i`; `Ok(None)` when it cannot be decoded in lenient mode.
    pub fn get(&self, i: usize) -> Result<Option<Vec<f32>>> {
        match &self.items {
            Items::Memory(m) => Ok(Some(m[i].clone())),
            Items::Files(f) => match decode(&f[i], &self.spec) {
                Ok(v) => Ok(Some(v)),
                Err(e) if self.strict => Err(e),
                Err(e) => {
                    log::warn!("skipping: {e}");
                    Ok(None)
                }
            },
        }
    }

    fn side(&self) -> usize {
        self.spec.resolution as usize
    }

    /// `n` images drawn uniformly with replacement.
    pub fn next_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::Data("batch size must be at least 1".into()));
        }
        let w = self.side();
        let mut data = Vec::with_capacity(n * 3 * w * w);
        let mut filled = 0;
        let mut failures = 0;
        while filled < n {
            let i = rng.random_range(0..self.len());
            let Some(mut img) = self.get(i)? else {
                failures += 1;
                if failures > 4 * self.len() + n {
                    return Err(Error::Data("too many undecodable images".into()));
                }
                continue;
            };
            if self.spec.flip && rng.random_bool(0.5) {
                flip_horizontal(&mut img, w);
            }
            data.extend_from_slice(&img);
            filled += 1;
        }
        Ok(Tensor::from_vec(data, (n, 3, w, w), &Device::Cpu)?)
    }

    /// Images `indices` in order (undecodable entries skipped in lenient mode).
    pub fn tensor_of(&self, indices: &[usize]) -> Result<Tensor> {
        let w = self.side();
        let mut data = Vec::with_capacity(indices.len() * 3 * w * w);
        let mut count = 0;
        for &i in indices {
            if let Some(img) = self.get(i)? {
                data.extend_from_slice(&img);
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::Data("no decodable images selected".into()));
        }
        Ok(Tensor::from_vec(data, (count, 3, w, w), &Device::Cpu)?)
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        let all: Vec<usize> = (0..self.len()).collect();
        self.tensor_of(&all)
    }

    /// Writes `<root>/domainX|domainY/NNNNN.png`.
    pub fn write_to(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(self.domain.dir_name());
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let w = self.side();
        for i in 0..self.len() {
            let Some(img) = self.get(i)? else { continue };
            let t = Tensor::from_vec(img, (1, 3, w, w), &Device::Cpu)?;
            let path = dir.join(format!("{i:05}.png"));
            tensor_to_images(&t)?[0]
                .save(&path)
                .map_err(|e| Error::Decode {
                    path: path.clone(),
                    msg: e.to_string(),
                })?;
        }
        Ok(dir)
    }
}

fn flip_horizontal(img: &mut [f32], w: usize) {
    for row in img.chunks_mut(w) {
        row.reverse();
    }
}
