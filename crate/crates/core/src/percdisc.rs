//! Perceptual discriminator: learnable combiners stacked over the frozen
//! feature pyramid, a whole-image head and optional per-location patch heads.
//!
//! ```text
//! fused[1] = features[1]
//! fused[i] = stack[combiner(fused[i-1]), features[i]]      i = 2..K
//! log D    = log main(fused[K]) + sum over patch heads and locations of log patch
//! ```

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, HasParams, Init, Linear, NamedParams, Track};
use crate::refnet::{BlockPartition, FeaturePyramid, ReferenceNet};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const MAX_COMBINER_WIDTH: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscMode {
    /// Frozen pretrained trunk.
    Perceptual,
    /// Same topology, trunk randomly initialized and trained.
    Plain,
    /// Frozen randomly initialized trunk.
    RandomTrunk,
}

/// Architecture knobs on top of the trunk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    /// K, number of trunk blocks.
    pub blocks: usize,
    /// Output widths of the K - 1 combiners; empty selects `min(2 * in, 512)`.
    /// A zero width disables that combiner.
    pub combiner_widths: Vec<usize>,
    /// 1-based levels whose fused representation feeds a patch head.
    pub patch_levels: Vec<usize>,
    pub head_width: usize,
    pub patch_width: usize,
    /// Probability clamp used before logs.
    pub epsilon: f64,
}

impl Default for DiscriminatorArch {
    fn default() -> Self {
        Self {
            blocks: 5,
            combiner_widths: Vec::new(),
            patch_levels: Vec::new(),
            head_width: 64,
            patch_width: 64,
            epsilon: 1e-7,
        }
    }
}

/// Combiner: conv3x3, leaky, conv3x3, leaky, mean-pool by 2.
#[derive(Clone, Debug)]
pub struct CombinerBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

impl CombinerBlock {
    pub fn new(init: &mut Init, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::init(init, c_in, c_out, 3, 1, None)?,
            conv2: Conv2d::init(init, c_out, c_out, 3, 1, None)?,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv2.out_channels()
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let h = nn::leaky_relu(&self.conv1.forward(x, track)?, LEAKY_SLOPE)?;
        let h = nn::leaky_relu(&self.conv2.forward(&h, track)?, LEAKY_SLOPE)?;
        Ok(h.avg_pool2d(2)?)
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            conv1: self.conv1.to_dtype(dtype)?,
            conv2: self.conv2.to_dtype(dtype)?,
        })
    }
}

impl HasParams for CombinerBlock {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv1.collect_params(&nn::join(prefix, "conv1"), out);
        self.conv2.collect_params(&nn::join(prefix, "conv2"), out);
    }
}

/// One fusion step: `stack[combiner(prev), f]` along channels. With no combiner the
/// result is `f` itself.
pub fn combine(
    h_prev: &Tensor,
    f: &Tensor,
    c: Option<&CombinerBlock>,
    level: usize,
    track: Track,
) -> Result<Tensor> {
    let Some(c) = c else {
        return Ok(f.clone());
    };
    let ch = c.forward(h_prev, track)?;
    let (a, b) = (ch.dims(), f.dims());
    if a[0] != b[0] || a[2..] != b[2..] {
        return Err(Error::Shape(format!(
            "level {level}: combiner output {a:?} does not match features {b:?}"
        )));
    }
    Ok(Tensor::cat(&[&ch, f], 1)?)
}

/// Whole-image head: conv, leaky, strided conv, leaky, global mean, linear.
#[derive(Clone, Debug)]
pub struct MainHead {
    conv1: Conv2d,
    conv2: Conv2d,
    fc: Linear,
}

impl MainHead {
    fn new(init: &mut Init, c_in: usize, width: usize) -> Result<Self> {
        Ok(Self {
            conv1: Conv2d::init(init, c_in, width, 3, 1, None)?,
            conv2: Conv2d::init(init, width, width, 3, 2, None)?,
            fc: Linear::init(init, width, 1, 0.02)?,
        })
    }

    /// Raw score per sample, `[N]`.
    pub fn forward(&self, h: &Tensor, track: Track) -> Result<Tensor> {
        let x = nn::leaky_relu(&self.conv1.forward(h, track)?, LEAKY_SLOPE)?;
        let x = nn::leaky_relu(&self.conv2.forward(&x, track)?, LEAKY_SLOPE)?;
        Ok(self.fc.forward(&nn::global_mean(&x)?, track)?.squeeze(1)?)
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            conv1: self.conv1.to_dtype(dtype)?,
            conv2: self.conv2.to_dtype(dtype)?,
            fc: self.fc.to_dtype(dtype)?,
        })
    }
}

impl HasParams for MainHead {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv1.collect_params(&nn::join(prefix, "conv1"), out);
        self.conv2.collect_params(&nn::join(prefix, "conv2"), out);
        self.fc.collect_params(&nn::join(prefix, "fc"), out);
    }
}

/// Patch head: conv3x3 + leaky, then a 1x1 projection to one score per location.
#[derive(Clone, Debug)]
pub struct PatchHead {
    pub level: usize,
    conv: Conv2d,
    proj: Conv2d,
}

impl PatchHead {
    fn new(init: &mut Init, level: usize, c_in: usize, width: usize) -> Result<Self> {
        Ok(Self {
            level,
            conv: Conv2d::init(init, c_in, width, 3, 1, None)?,
            proj: Conv2d::init(init, width, 1, 1, 1, Some(0.02))?,
        })
    }

    /// Raw score map, `[N, H, W]` at the level's resolution.
    pub fn forward(&self, h: &Tensor, track: Track) -> Result<Tensor> {
        let x = nn::leaky_relu(&self.conv.forward(h, track)?, LEAKY_SLOPE)?;
        Ok(self.proj.forward(&x, track)?.squeeze(1)?)
    }

    fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            level: self.level,
            conv: self.conv.to_dtype(dtype)?,
            proj: self.proj.to_dtype(dtype)?,
        })
    }
}

impl HasParams for PatchHead {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        self.conv.collect_params(&nn::join(prefix, "conv"), out);
        self.proj.collect_params(&nn::join(prefix, "proj"), out);
    }
}

/// Raw scores of one discriminator pass plus the derived probabilities.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// `[N]` pre-squash main-head scores.
    pub main_score: Tensor,
    /// `(level, [N, H, W])` pre-squash patch scores.
    pub patch_scores: Vec<(usize, Tensor)>,
    pub epsilon: f64,
}

impl DiscriminatorOutput {
    pub fn new(main_score: Tensor, patch_scores: Vec<(usize, Tensor)>, epsilon: f64) -> Self {
        Self {
            main_score,
            patch_scores,
            epsilon,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.main_score.dims()[0]
    }

    /// `log p` (`real = true`) or `log (1 - p)` of a score tensor, with `p`
    /// clamped to `[eps, 1 - eps]`.
    pub fn log_prob(&self, scores: &Tensor, real: bool) -> Result<Tensor> {
        let s = if real { scores.clone() } else { scores.neg()? };
        let lo = self.epsilon.ln();
        let hi = (-self.epsilon).ln_1p();
        Ok(nn::log_sigmoid(&s)?.clamp(lo, hi)?)
    }

    /// Clamped main-head probability, `[N]`.
    pub fn main_prob(&self) -> Result<Tensor> {
        Ok(self.log_prob(&self.main_score, true)?.exp()?)
    }

    /// Clamped patch probability maps.
    pub fn patch_probs(&self) -> Result<Vec<(usize, Tensor)>> {
        self.patch_scores
            .iter()
            .map(|(l, s)| Ok((*l, self.log_prob(s, true)?.exp()?)))
            .collect()
    }

    /// Multi-scale log-probability: main-head log-probability plus the sum of every patch
    /// log-probability, `[N]`.
    pub fn log_d(&self) -> Result<Tensor> {
        let mut acc = self.log_prob(&self.main_score, true)?;
        for (_, s) in &self.patch_scores {
            acc = (acc + self.log_prob(s, true)?.sum((1, 2))?)?;
        }
        Ok(acc)
    }

    /// Per-sample loss aggregate: main log-term plus, for each patch head, the
    /// mean of its location log-terms. `real = false` uses `log(1 - p)`.
    pub fn aggregate_log_prob(&self, real: bool) -> Result<Tensor> {
        let mut acc = self.log_prob(&self.main_score, real)?;
        for (_, s) in &self.patch_scores {
            acc = (acc + self.log_prob(s, real)?.mean((1, 2))?)?;
        }
        Ok(acc)
    }

    /// Raw score tensors of every head, main first.
    pub fn heads(&self) -> Vec<&Tensor> {
        std::iter::once(&self.main_score)
            .chain(self.patch_scores.iter().map(|(_, s)| s))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct PerceptualDiscriminator {
    pub mode: DiscMode,
    trunk: ReferenceNet,
    partition: BlockPartition,
    combiners: Vec<Option<CombinerBlock>>,
    main: MainHead,
    patches: Vec<PatchHead>,
    epsilon: f64,
}

impl PerceptualDiscriminator {
    /// Wires combiners and heads over `trunk`. The trunk is frozen for the
    /// perceptual and random-trunk modes and made trainable for the plain
    /// mode.
    pub fn build(
        arch: &DiscriminatorArch,
        mode: DiscMode,
        trunk: ReferenceNet,
        seed: u64,
    ) -> Result<Self> {
        let k = arch.blocks;
        if let Some(&bad) = arch.patch_levels.iter().find(|&&l| l == 0 || l > k) {
            return Err(Error::config(
                "discriminator.patch_levels",
                format!("level {bad} is outside [1, {k}]"),
            ));
        }
        if !arch.combiner_widths.is_empty() && arch.combiner_widths.len() != k.saturating_sub(1) {
            return Err(Error::config(
                "discriminator.combiner_widths",
                format!(
                    "expected {} widths (K - 1), got {}",
                    k.saturating_sub(1),
                    arch.combiner_widths.len()
                ),
            ));
        }
        if !(arch.epsilon > 0.0 && arch.epsilon < 0.5) {
            return Err(Error::config("discriminator.epsilon", "must lie in (0, 0.5)"));
        }
        let trunk = match mode {
            DiscMode::Plain => trunk.trainable()?,
            DiscMode::Perceptual | DiscMode::RandomTrunk => trunk.frozen(),
        };
        let partition = trunk.default_partition(k)?;
        if partition.downsampling()[1..].iter().any(|&d| d != 2) {
            return Err(Error::Shape("every trunk block after the first must halve".into()));
        }
        let feat_ch = partition.channels();
        let mut init = Init::new(seed);
        let mut combiners = Vec::with_capacity(k.saturating_sub(1));
        let mut h_ch = vec![feat_ch[0]];
        for i in 1..k {
            let c_in = h_ch[i - 1];
            let width = match arch.combiner_widths.get(i - 1) {
                Some(&w) => w,
                None => (2 * c_in).min(MAX_COMBINER_WIDTH),
            };
            if width == 0 {
                combiners.push(None);
                h_ch.push(feat_ch[i]);
            } else {
                combiners.push(Some(CombinerBlock::new(&mut init, c_in, width)?));
                h_ch.push(width + feat_ch[i]);
            }
        }
        let main = MainHead::new(&mut init, h_ch[k - 1], arch.head_width)?;
        let mut levels = arch.patch_levels.clone();
        levels.sort_unstable();
        levels.dedup();
        let patches = levels
            .into_iter()
            .map(|l| PatchHead::new(&mut init, l, h_ch[l - 1], arch.patch_width))
            .collect::<Result<_>>()?;
        Ok(Self {
            mode,
            trunk,
            partition,
            combiners,
            main,
            patches,
            epsilon: arch.epsilon,
        })
    }

    pub fn trunk(&self) -> &ReferenceNet {
        &self.trunk
    }

    pub fn partition(&self) -> &BlockPartition {
        &self.partition
    }

    pub fn combiner_count(&self) -> usize {
        self.combiners.iter().filter(|c| c.is_some()).count()
    }

    pub fn patch_levels(&self) -> Vec<usize> {
        self.patches.iter().map(|p| p.level).collect()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Trunk statistics for an image batch in `[-1, 1]`.
    pub fn features(&self, batch: &Tensor, track: Track) -> Result<FeaturePyramid> {
        let x = self.trunk.normalization().apply_to_signed(batch)?;
        self.trunk.extract_features(&self.partition, &x, track)
    }

    /// Fused representations, one per level, for an image batch in `[-1, 1]`.
    pub fn representations(&self, batch: &Tensor, track: Track) -> Result<Vec<Tensor>> {
        let pyr = self.features(batch, track)?;
        let mut hs: Vec<Tensor> = Vec::with_capacity(pyr.levels.len());
        hs.push(pyr.levels[0].clone());
        for i in 1..pyr.levels.len() {
            let h = combine(&hs[i - 1], &pyr.levels[i], self.combiners[i - 1].as_ref(), i + 1, track)?;
            hs.push(h);
        }
        Ok(hs)
    }

    /// Scores an image batch in `[-1, 1]`. The trunk normalization is applied
    /// here and nowhere else.
    pub fn discriminate(&self, batch: &Tensor, track: Track) -> Result<DiscriminatorOutput> {
        let hs = self.representations(batch, track)?;
        let main = self.main.forward(hs.last().expect("K >= 1"), track)?;
        let patch_scores = self
            .patches
            .iter()
            .map(|p| Ok((p.level, p.forward(&hs[p.level - 1], track)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(DiscriminatorOutput::new(main, patch_scores, self.epsilon))
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            mode: self.mode,
            trunk: self.trunk.to_dtype(dtype)?,
            partition: self.partition.clone(),
            combiners: self
                .combiners
                .iter()
                .map(|c| c.as_ref().map(|c| c.to_dtype(dtype)).transpose())
                .collect::<Result<_>>()?,
            main: self.main.to_dtype(dtype)?,
            patches: self
                .patches
                .iter()
                .map(|p| p.to_dtype(dtype))
                .collect::<Result<_>>()?,
            epsilon: self.epsilon,
        })
    }

    /// Parameters of the trunk only.
    pub fn trunk_params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.trunk.collect_params("trunk", &mut out);
        out
    }

    /// Parameters other than the trunk (combiners and heads).
    pub fn head_params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.collect_learnable(&mut out);
        out
    }

    fn collect_learnable(&self, out: &mut NamedParams) {
        for (i, c) in self.combiners.iter().enumerate() {
            if let Some(c) = c {
                c.collect_params(&format!("combiner{}", i + 1), out);
            }
        }
        self.main.collect_params("main", out);
        for p in &self.patches {
            p.collect_params(&format!("patch{}", p.level), out);
        }
    }
}

impl HasParams for PerceptualDiscriminator {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        let mut local = self.trunk_params();
        self.collect_learnable(&mut local);
        out.extend(local.into_iter().map(|(n, p)| (nn::join(prefix, &n), p)));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refnet::{ArchDescriptor, LayerSpec};
    use candle_core::Device;

    fn trunk() -> ReferenceNet {
        let desc = ArchDescriptor::new(
            "t",
            vec![
                LayerSpec::conv(3, 4, 3),
                LayerSpec::Relu,
                LayerSpec::max_pool(),
                LayerSpec::conv(4, 8, 3),
                LayerSpec::Relu,
                LayerSpec::max_pool(),
                LayerSpec::conv(8, 8, 3),
                LayerSpec::Relu,
            ],
        )
        .unwrap();
        ReferenceNet::random(&desc, 1, false).unwrap()
    }

    fn arch(k: usize) -> DiscriminatorArch {
        DiscriminatorArch {
            blocks: k,
            head_width: 8,
            patch_width: 8,
            ..Default::default()
        }
    }

    #[test]
    fn chance_level_log_d() {
        let dev = Device::Cpu;
        let out = DiscriminatorOutput::new(
            Tensor::zeros(1, DType::F32, &dev).unwrap(),
            vec![(1, Tensor::zeros((1, 2, 2), DType::F32, &dev).unwrap())],
            1e-7,
        );
        let v = out.log_d().unwrap().to_vec1::<f32>().unwrap()[0];
        assert!((v as f64 - 5.0 * 0.5f64.ln()).abs() < 1e-5);
        assert!((v + 3.4657).abs() < 1e-4);
    }

    #[test]
    fn main_only_log_d_is_log_p() {
        let s = Tensor::new(&[1.3f32], &Device::Cpu).unwrap();
        let out = DiscriminatorOutput::new(s, vec![], 1e-7);
        let p = 1.0 / (1.0 + (-1.3f64).exp());
        let v = out.log_d().unwrap().to_vec1::<f32>().unwrap()[0] as f64;
        assert!((v - p.ln()).abs() < 1e-6);
    }

    #[test]
    fn probabilities_stay_inside_the_clamp() {
        let s = Tensor::new(&[-1e4f32, 1e4], &Device::Cpu).unwrap();
        let out = DiscriminatorOutput::new(s, vec![], 1e-7);
        let p = out.main_prob().unwrap().to_vec1::<f32>().unwrap();
        assert!(p[0] > 0.0 && p[1] < 1.0);
        assert!(out.log_d().unwrap().to_vec1::<f32>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn channel_concat_arithmetic() {
        let mut init = Init::new(0);
        let c = CombinerBlock::new(&mut init, 8, 64).unwrap();
        let h = Tensor::zeros((1, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let f = Tensor::zeros((1, 128, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let out = combine(&h, &f, Some(&c), 2, Track::Params).unwrap();
        assert_eq!(out.dims(), &[1, 192, 8, 8]);
    }

    #[test]
    fn disabled_combiner_passes_features_through() {
        let h = Tensor::zeros((1, 8, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let f = Tensor::ones((1, 5, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let out = combine(&h, &f, None, 2, Track::Params).unwrap();
        assert_eq!(out.dims(), f.dims());
    }

    #[test]
    fn combiner_spatial_mismatch_names_level() {
        let mut init = Init::new(0);
        let c = CombinerBlock::new(&mut init, 4, 4).unwrap();
        let h = Tensor::zeros((1, 4, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let f = Tensor::zeros((1, 4, 4, 4), DType::F32, &Device::Cpu).unwrap();
        match combine(&h, &f, Some(&c), 3, Track::Params) {
            Err(Error::Shape(msg)) => assert!(msg.contains("level 3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn patch_level_out_of_range_is_config_error() {
        let mut a = arch(3);
        a.patch_levels = vec![4];
        assert!(matches!(
            PerceptualDiscriminator::build(&a, DiscMode::Perceptual, trunk(), 0),
            Err(Error::Config { .. })
        ));
        a.patch_levels = vec![0];
        assert!(PerceptualDiscriminator::build(&a, DiscMode::Perceptual, trunk(), 0).is_err());
    }

    #[test]
    fn modes_control_trunk_trainability() {
        let a = arch(3);
        let d = PerceptualDiscriminator::build(&a, DiscMode::Perceptual, trunk(), 0).unwrap();
        assert!(d.trunk_params().iter().all(|(_, p)| !p.is_trainable()));
        assert!(d.head_params().iter().all(|(_, p)| p.is_trainable()));
        let plain = PerceptualDiscriminator::build(&a, DiscMode::Plain, trunk(), 0).unwrap();
        assert!(plain.named_params().iter().all(|(_, p)| p.is_trainable()));
    }

    #[test]
    fn default_widths_double_and_cap() {
        let a = arch(3);
        let d = PerceptualDiscriminator::build(&a, DiscMode::Perceptual, trunk(), 0).unwrap();
        let x = Tensor::zeros((2, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        let hs = d.representations(&x, Track::Params).unwrap();
        // h1 = 4ch; c1 -> 8, h2 = 8 + 8; c2 -> 32, h3 = 32 + 8
        let ch: Vec<usize> = hs.iter().map(|h| h.dims()[1]).collect();
        assert_eq!(ch, vec![4, 16, 40]);
        let sz: Vec<usize> = hs.iter().map(|h| h.dims()[3]).collect();
        assert_eq!(sz, vec![16, 8, 4]);
    }
}
