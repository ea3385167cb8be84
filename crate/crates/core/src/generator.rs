//! Fully convolutional image-to-image generator: a 7x7 stem, strided
//! downsampling, residual blocks at the bottleneck, nearest-neighbour
//! upsampling and a tanh output in `[-1, 1]`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, HasParams, Init, InstanceNorm, NamedParams, Track};

/// Smallest bottleneck side accepted at build time.
pub const MIN_BOTTLENECK: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Number of stride-2 downsamplings (mirrored by upsamplings).
    pub downsamplings: usize,
    pub res_blocks: usize,
    /// Stem width; doubles at every downsampling.
    pub width: usize,
    #[serde(default = "default_norm")]
    pub norm: NormKind,
}

fn default_norm() -> NormKind {
    NormKind::Instance
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            downsamplings: 2,
            res_blocks: 9,
            width: 64,
            norm: NormKind::Instance,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvNorm {
    conv: Conv2d,
    norm: Option<InstanceNorm>,
}

impl ConvNorm {
    fn new(init: &mut Init, c_in: usize, c_out: usize, k: usize, stride: usize, norm: NormKind) -> Result<Self> {
        let conv = Conv2d::init(init, c_in, c_out, k, stride, Some(0.02))?;
        let norm = match norm {
            NormKind::Instance => Some(InstanceNorm::init(init, c_out)?),
            NormKind::None => None,
        };
        Ok(Self { conv, norm })
    }

    fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let h = self.conv.forward(x, track)?;
        match &self.norm {
            Some(n) => n.forward(&h, track),
            None => Ok(h),
        }
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            conv: self.conv.to_dtype(dtype)?,
            norm: self.norm.as_ref().map(|n| n.to_dtype(dtype)).transpose()?,
        })
    }
}

impl HasParams for ConvNorm {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv.collect_params(&nn::join(prefix, "conv"), out);
        if let Some(n) = &self.norm {
            n.collect_params(&nn::join(prefix, "norm"), out);
        }
    }
}

#[derive(Clone, Debug)]
struct ResBlock {
    a: ConvNorm,
    b: ConvNorm,
}

impl ResBlock {
    fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let h = self.a.forward(x, track)?.relu()?;
        let h = self.b.forward(&h, track)?;
        Ok((x + h)?)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    cfg: GeneratorConfig,
    stem: ConvNorm,
    downs: Vec<ConvNorm>,
    res: Vec<ResBlock>,
    ups: Vec<ConvNorm>,
    out: Conv2d,
}

impl Generator {
    /// Builds for square inputs of side `resolution`.
    pub fn build(cfg: &GeneratorConfig, resolution: u32, seed: u64) -> Result<Self> {
        let m = cfg.downsamplings;
        if cfg.width == 0 {
            return Err(Error::config("generator.width", "must be positive"));
        }
        if m >= 16 || resolution % (1 << m) != 0 || (resolution >> m) < MIN_BOTTLENECK {
            return Err(Error::config(
                "generator.downsamplings",
                format!(
                    "{m} downsamplings leave a bottleneck below {MIN_BOTTLENECK}px (or do not divide) at resolution {resolution}"
                ),
            ));
        }
        let mut init = Init::new(seed);
        let w = cfg.width;
        let stem = ConvNorm::new(&mut init, 3, w, 7, 1, cfg.norm)?;
        let downs = (0..m)
            .map(|i| ConvNorm::new(&mut init, w << i, w << (i + 1), 3, 2, cfg.norm))
            .collect::<Result<Vec<_>>>()?;
        let wb = w << m;
        let res = (0..cfg.res_blocks)
            .map(|_| {
                Ok(ResBlock {
                    a: ConvNorm::new(&mut init, wb, wb, 3, 1, cfg.norm)?,
                    b: ConvNorm::new(&mut init, wb, wb, 3, 1, cfg.norm)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let ups = (0..m)
            .rev()
            .map(|i| ConvNorm::new(&mut init, w << (i + 1), w << i, 3, 1, cfg.norm))
            .collect::<Result<Vec<_>>>()?;
        let out = Conv2d::init(&mut init, w, 3, 7, 1, Some(0.02))?;
        Ok(Self {
            cfg: cfg.clone(),
            stem,
            downs,
            res,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// Maps a `[N, 3, H, W]` batch in `[-1, 1]` to the same shape and range.
    pub fn translate(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let dims = x.dims();
        let f = 1usize << self.cfg.downsamplings;
        if dims.len() != 4 || dims[1] != 3 || dims[2] % f != 0 || dims[3] % f != 0 {
            return Err(Error::Shape(format!(
                "generator expects [N, 3, H, W] with H, W divisible by {f}, got {dims:?}"
            )));
        }
        let mut h = self.stem.forward(x, track)?.relu()?;
        for d in &self.downs {
            h = d.forward(&h, track)?.relu()?;
        }
        for r in &self.res {
            h = r.forward(&h, track)?;
        }
        for u in &self.ups {
            h = u.forward(&nn::upsample2x(&h)?, track)?.relu()?;
        }
        Ok(self.out.forward(&h, track)?.tanh()?)
    }

    /// Receptive field, in input pixels, of one bottleneck unit after the
    /// residual trunk.
    pub fn receptive_field(&self) -> usize {
        receptive_field(self.cfg.downsamplings, self.cfg.res_blocks)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let conv = |v: &[ConvNorm]| v.iter().map(|c| c.to_dtype(dtype)).collect::<Result<Vec<_>>>();
        Ok(Self {
            cfg: self.cfg.clone(),
            stem: self.stem.to_dtype(dtype)?,
            downs: conv(&self.downs)?,
            res: self
                .res
                .iter()
                .map(|r| {
                    Ok(ResBlock {
                        a: r.a.to_dtype(dtype)?,
                        b: r.b.to_dtype(dtype)?,
                    })
                })
                .collect::<Result<_>>()?,
            ups: conv(&self.ups)?,
            out: self.out.to_dtype(dtype)?,
        })
    }
}

/// Receptive field of the bottleneck for `m` downsamplings and `n` residual
/// blocks.
pub fn receptive_field(m: usize, n: usize) -> usize {
    let mut rf = 7;
    let mut jump = 1;
    for _ in 0..m {
        rf += 2 * jump;
        jump *= 2;
    }
    rf + 4 * n * jump
}

impl HasParams for Generator {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.stem.collect_params(&nn::join(prefix, "stem"), out);
        for (i, d) in self.downs.iter().enumerate() {
            d.collect_params(&nn::join(prefix, &format!("down{i}")), out);
        }
        for (i, r) in self.res.iter().enumerate() {
            r.a.collect_params(&nn::join(prefix, &format!("res{i}.a")), out);
            r.b.collect_params(&nn::join(prefix, &format!("res{i}.b")), out);
        }
        for (i, u) in self.ups.iter().enumerate() {
            u.collect_params(&nn::join(prefix, &format!("up{i}")), out);
        }
        self.out.collect_params(&nn::join(prefix, "out"), out);
    }
}
