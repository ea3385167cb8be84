//! Procedural desk-scale domains.
//!
//! `shapes`: domain X holds filled squares, domain Y filled circles, both on
//! smooth textured backgrounds. `tint`: random scenes with a warm cast (X) or
//! a cool cast (Y). The two domains are drawn from independent random
//! streams, so no image has a counterpart in the other domain.

use std::f32::consts::PI;
use std::str::FromStr;

use candle_core::{Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Domain, DomainDataset};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToyTask {
    Shapes,
    Tint,
}

impl FromStr for ToyTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shapes" => Ok(ToyTask::Shapes),
            "tint" => Ok(ToyTask::Tint),
            other => Err(Error::config(
                "data.toy_task",
                format!("unknown toy task `{other}` (expected `shapes` or `tint`)"),
            )),
        }
    }
}

pub const TOY_RESOLUTIONS: [u32; 3] = [16, 32, 64];
pub const MIN_TOY_COUNT: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Circle,
    Triangle,
    Ring,
    Cross,
    Diamond,
}

impl ShapeKind {
    /// Classes used by the trunk pretraining task.
    pub const ALL: [ShapeKind; 6] = [
        ShapeKind::Square,
        ShapeKind::Circle,
        ShapeKind::Triangle,
        ShapeKind::Ring,
        ShapeKind::Cross,
        ShapeKind::Diamond,
    ];

    /// Membership of `(dx, dy)`, offsets from the center in units of the
    /// half-size.
    fn contains(self, dx: f32, dy: f32) -> bool {
        let (ax, ay) = (dx.abs(), dy.abs());
        match self {
            ShapeKind::Square => ax <= 1.0 && ay <= 1.0,
            ShapeKind::Circle => dx * dx + dy * dy <= 1.0,
            ShapeKind::Triangle => dy <= 1.0 && dy >= -1.0 && ax <= (dy + 1.0) / 2.0,
            ShapeKind::Ring => {
                let r2 = dx * dx + dy * dy;
                (0.3..=1.0).contains(&r2)
            }
            ShapeKind::Cross => (ax <= 0.3 && ay <= 1.0) || (ay <= 0.3 && ax <= 1.0),
            ShapeKind::Diamond => ax + ay <= 1.0,
        }
    }
}

struct Background {
    base: [f32; 3],
    slope: [f32; 2],
    waves: [(f32, f32, f32, [f32; 3]); 2],
}

impl Background {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        let mut base = [0f32; 3];
        for b in &mut base {
            *b = rng.random_range(0.25..0.75);
        }
        let wave = |rng: &mut ChaCha8Rng| {
            let fx = rng.random_range(0.5..2.0f32) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let fy = rng.random_range(0.5..2.0f32);
            let phase = rng.random_range(0.0..2.0 * PI);
            let mut amp = [0f32; 3];
            for a in &mut amp {
                *a = rng.random_range(0.02..0.08);
            }
            (fx, fy, phase, amp)
        };
        let waves = [wave(rng), wave(rng)];
        let slope = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
        Self { base, slope, waves }
    }

    fn at(&self, u: f32, v: f32, c: usize) -> f32 {
        let mut val = self.base[c] + self.slope[0] * (u - 0.5) + self.slope[1] * (v - 0.5);
        for (fx, fy, phase, amp) in &self.waves {
            val += amp[c] * (2.0 * PI * (fx * u + fy * v) + phase).sin();
        }
        val
    }

    fn luminance(&self) -> f32 {
        0.299 * self.base[0] + 0.587 * self.base[1] + 0.114 * self.base[2]
    }
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> [f32; 3] {
    let i = (h * 6.0).floor();
    let f = h * 6.0 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    match (i as i32).rem_euclid(6) {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// A shape colour that stands out from the background.
fn contrasting_color(rng: &mut ChaCha8Rng, bg: &Background) -> [f32; 3] {
    let bg_l = bg.luminance();
    let mut best = [0f32; 3];
    for _ in 0..16 {
        let c = hsv_to_rgb(
            rng.random_range(0.0..1.0),
            rng.random_range(0.6..1.0),
            rng.random_range(0.3..1.0),
        );
        let l = 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2];
        best = c;
        if (l - bg_l).abs() >= 0.2 {
            break;
        }
    }
    best
}

struct Placed {
    kind: ShapeKind,
    cx: f32,
    cy: f32,
    half: f32,
    color: [f32; 3],
}

/// RGB image in `[0, 1]`, CHW.
fn render(res: u32, bg: &Background, shapes: &[Placed]) -> Vec<f32> {
    const SS: usize = 4;
    let r = res as usize;
    let plane = r * r;
    let mut out = vec![0f32; 3 * plane];
    for y in 0..r {
        for x in 0..r {
            let u = (x as f32 + 0.5) / r as f32;
            let v = (y as f32 + 0.5) / r as f32;
            let mut px = [bg.at(u, v, 0), bg.at(u, v, 1), bg.at(u, v, 2)];
            for s in shapes {
                let mut cover = 0usize;
                for sy in 0..SS {
                    for sx in 0..SS {
                        let fx = x as f32 + (sx as f32 + 0.5) / SS as f32;
                        let fy = y as f32 + (sy as f32 + 0.5) / SS as f32;
                        if s.kind.contains((fx - s.cx) / s.half, (fy - s.cy) / s.half) {
                            cover += 1;
                        }
                    }
                }
                let a = cover as f32 / (SS * SS) as f32;
                for c in 0..3 {
                    px[c] = px[c] * (1.0 - a) + s.color[c] * a;
                }
            }
            for c in 0..3 {
                out[c * plane + y * r + x] = px[c].clamp(0.0, 1.0);
            }
        }
    }
    out
}

fn place(rng: &mut ChaCha8Rng, res: u32, kind: ShapeKind, size: (f32, f32), bg: &Background) -> Placed {
    let r = res as f32;
    let half = rng.random_range(size.0..size.1) * r / 2.0;
    let margin = half + 1.0;
    let cx = rng.random_range(margin..(r - margin).max(margin + 1e-3));
    let cy = rng.random_range(margin..(r - margin).max(margin + 1e-3));
    Placed {
        kind,
        cx,
        cy,
        half,
        color: contrasting_color(rng, bg),
    }
}

fn to_signed(mut img: Vec<f32>) -> Vec<f32> {
    for v in &mut img {
        *v = *v * 2.0 - 1.0;
    }
    img
}

fn single_shape_image(rng: &mut ChaCha8Rng, res: u32, kind: ShapeKind) -> Vec<f32> {
    let bg = Background::sample(rng);
    let shape = place(rng, res, kind, (0.4, 0.6), &bg);
    to_signed(render(res, &bg, &[shape]))
}

fn tinted_scene(rng: &mut ChaCha8Rng, res: u32, warm: bool) -> Vec<f32> {
    let bg = Background::sample(rng);
    let n = rng.random_range(1..=3);
    let shapes: Vec<Placed> = (0..n)
        .map(|_| {
            let kind = [ShapeKind::Square, ShapeKind::Circle, ShapeKind::Triangle][rng.random_range(0..3)];
            place(rng, res, kind, (0.2, 0.4), &bg)
        })
        .collect();
    let mut img = render(res, &bg, &shapes);
    let plane = (res * res) as usize;
    let (boost, damp) = if warm { (0, 2) } else { (2, 0) };
    for i in 0..plane {
        img[boost * plane + i] = img[boost * plane + i] * 0.8 + 0.2;
        img[damp * plane + i] *= 0.8;
    }
    to_signed(img)
}

fn stream(seed: u64, domain: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(domain + 1);
    rng
}

/// Two unaligned procedural domains of `count` images each.
pub fn synth_toy_domains(
    task: ToyTask,
    count: usize,
    resolution: u32,
    seed: u64,
) -> Result<(DomainDataset, DomainDataset)> {
    if !TOY_RESOLUTIONS.contains(&resolution) {
        return Err(Error::config(
            "data.resolution",
            format!("toy resolution must be one of {TOY_RESOLUTIONS:?}, got {resolution}"),
        ));
    }
    if count < MIN_TOY_COUNT {
        return Err(Error::config(
            "data.toy_count",
            format!("toy domains need at least {MIN_TOY_COUNT} images, got {count}"),
        ));
    }
    let make = |domain: Domain| -> Vec<Vec<f32>> {
        let mut rng = stream(seed, domain as u64);
        (0..count)
            .map(|_| match (task, domain) {
                (ToyTask::Shapes, Domain::X) => single_shape_image(&mut rng, resolution, ShapeKind::Square),
                (ToyTask::Shapes, Domain::Y) => single_shape_image(&mut rng, resolution, ShapeKind::Circle),
                (ToyTask::Tint, Domain::X) => tinted_scene(&mut rng, resolution, true),
                (ToyTask::Tint, Domain::Y) => tinted_scene(&mut rng, resolution, false),
            })
            .collect()
    };
    Ok((
        DomainDataset::from_images(Domain::X, resolution, make(Domain::X))?,
        DomainDataset::from_images(Domain::Y, resolution, make(Domain::Y))?,
    ))
}

/// Labeled batch for the shape-classification pretraining task:
/// `[n, 3, r, r]` images and class indices into [`ShapeKind::ALL`].
pub fn shape_classification_batch(
    rng: &mut ChaCha8Rng,
    n: usize,
    resolution: u32,
) -> Result<(Tensor, Vec<u32>)> {
    let r = resolution as usize;
    let mut data = Vec::with_capacity(n * 3 * r * r);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = rng.random_range(0..ShapeKind::ALL.len());
        data.extend(single_shape_image(rng, resolution, ShapeKind::ALL[class]));
        labels.push(class as u32);
    }
    Ok((Tensor::from_vec(data, (n, 3, r, r), &Device::Cpu)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_resolution() {
        let (x, y) = synth_toy_domains(ToyTask::Shapes, 100, 16, 0).unwrap();
        assert_eq!((x.len(), y.len()), (100, 100));
        assert_eq!(x.resolution(), 16);
        assert_eq!(x.domain, Domain::X);
    }

    #[test]
    fn deterministic_under_seed() {
        let a = synth_toy_domains(ToyTask::Tint, 100, 16, 5).unwrap().0;
        let b = synth_toy_domains(ToyTask::Tint, 100, 16, 5).unwrap().0;
        assert_eq!(a.get(42).unwrap(), b.get(42).unwrap());
    }

    #[test]
    fn domains_use_independent_streams() {
        let (x, y) = synth_toy_domains(ToyTask::Tint, 100, 16, 5).unwrap();
        assert_ne!(x.get(0).unwrap(), y.get(0).unwrap());
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(synth_toy_domains(ToyTask::Shapes, 99, 32, 0).is_err());
        assert!(synth_toy_domains(ToyTask::Shapes, 100, 48, 0).is_err());
        assert!("stripes".parse::<ToyTask>().is_err());
    }

    #[test]
    fn values_in_signed_range() {
        let (x, _) = synth_toy_domains(ToyTask::Shapes, 100, 32, 1).unwrap();
        let t = x.to_tensor().unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(t.iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn square_and_circle_differ_only_near_corners() {
        // circle of the same half-size covers pi/4 of the square
        let n = 400;
        let (mut sq, mut ci) = (0, 0);
        for y in 0..n {
            for x in 0..n {
                let dx = (x as f32 + 0.5) / n as f32 * 2.0 - 1.0;
                let dy = (y as f32 + 0.5) / n as f32 * 2.0 - 1.0;
                sq += ShapeKind::Square.contains(dx, dy) as usize;
                ci += ShapeKind::Circle.contains(dx, dy) as usize;
            }
        }
        let ratio = ci as f32 / sq as f32;
        assert!((ratio - PI / 4.0).abs() < 0.01);
    }
}
