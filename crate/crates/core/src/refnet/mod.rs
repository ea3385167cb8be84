//! Frozen reference trunk: weight loading, pool/rectifier surgery, block
//! partitioning and feature-pyramid extraction.

mod arch;
pub mod pretrain;

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

pub use arch::{ArchDescriptor, LayerSpec};

use crate::error::{Error, Result};
use crate::nn::{self, Conv2d, HasParams, Init, NamedParams, Param, Track};

/// Slope used for rectifiers after surgery.
pub const SURGERY_SLOPE: f64 = 0.2;

/// Per-channel input statistics the trunk was pretrained with. Inputs in
/// `[0, 1]` are mapped to `(x - mean) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Default for Normalization {
    /// ILSVRC classification statistics.
    fn default() -> Self {
        Self {
            mean: vec![0.485, 0.456, 0.406],
            scale: vec![0.229, 0.224, 0.225],
        }
    }
}

impl Normalization {
    /// Maps generator-range images (`[-1, 1]`) to trunk input statistics.
    pub fn apply_to_signed(&self, x: &Tensor) -> Result<Tensor> {
        let c = self.mean.len();
        let dev = x.device();
        let mean = Tensor::from_vec(self.mean.clone(), (1, c, 1, 1), dev)?.to_dtype(x.dtype())?;
        let scale = Tensor::from_vec(self.scale.clone(), (1, c, 1, 1), dev)?.to_dtype(x.dtype())?;
        let x01 = ((x + 1.0)? * 0.5)?;
        Ok(x01.broadcast_sub(&mean)?.broadcast_div(&scale)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Replacement {
    pub index: usize,
    pub from: String,
    pub to: String,
}

/// Sidecar of a weights container: key shapes, input statistics and the
/// surgery record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub source: String,
    #[serde(default)]
    pub surgery: bool,
    #[serde(default)]
    pub replacements: Vec<Replacement>,
    pub normalization: Normalization,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// `trunk.safetensors` -> `trunk.manifest.json`.
pub fn manifest_path(weights_path: &Path) -> PathBuf {
    weights_path.with_extension("manifest.json")
}

#[derive(Clone, Debug)]
pub struct ReferenceNet {
    desc: ArchDescriptor,
    convs: Vec<Option<Conv2d>>,
    normalization: Normalization,
    surgery: bool,
    replacements: Vec<Replacement>,
}

/// Loads a trunk from a name-keyed container plus its manifest. All
/// parameters come back frozen.
pub fn load_reference_weights(weights_path: &Path, desc: &ArchDescriptor) -> Result<ReferenceNet> {
    let mpath = manifest_path(weights_path);
    let manifest: WeightsManifest = {
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        serde_json::from_str(&text)?
    };
    if manifest.normalization.mean.len() != desc.input_channels()
        || manifest.normalization.scale.len() != desc.input_channels()
    {
        return Err(Error::Shape(format!(
            "normalization statistics have {} entries, trunk expects {} channels",
            manifest.normalization.mean.len(),
            desc.input_channels()
        )));
    }
    let bytes = std::fs::read(weights_path).map_err(|e| Error::io(weights_path, e))?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
    let mut convs = Vec::with_capacity(desc.layers.len());
    for (idx, layer) in desc.layers.iter().enumerate() {
        let LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
        } = *layer
        else {
            convs.push(None);
            continue;
        };
        let prefix = desc.param_prefix(idx);
        let w = fetch(&tensors, &format!("{prefix}.weight"), &[out_channels, in_channels, kernel, kernel])?;
        let b = fetch(&tensors, &format!("{prefix}.bias"), &[out_channels])?;
        convs.push(Some(Conv2d::new(
            Param::frozen(w),
            Some(Param::frozen(b)),
            stride,
            padding,
        )));
    }
    let net = ReferenceNet {
        desc: desc.clone(),
        convs,
        normalization: manifest.normalization,
        surgery: false,
        replacements: Vec::new(),
    };
    if !manifest.surgery {
        return Ok(net);
    }
    // A container prepared with surgery may be paired with either the
    // original or the already modified descriptor.
    let untouched = desc
        .layers
        .iter()
        .any(|l| matches!(l, LayerSpec::MaxPool { .. } | LayerSpec::Relu));
    if untouched {
        net.apply_surgery()
    } else {
        Ok(net.with_surgery_record(manifest.replacements))
    }
}

fn fetch(tensors: &HashMap<String, Tensor>, key: &str, shape: &[usize]) -> Result<Tensor> {
    let t = tensors
        .get(key)
        .ok_or_else(|| Error::MissingKey(key.to_string()))?;
    if t.dims() != shape {
        return Err(Error::ShapeMismatch {
            name: key.to_string(),
            expected: shape.to_vec(),
            found: t.dims().to_vec(),
        });
    }
    Ok(t.to_dtype(DType::F32)?)
}

impl ReferenceNet {
    /// Trunk with fixed-seed He-initialized weights. `trainable = false`
    /// gives the frozen random-feature control; `true` gives the plain
    /// baseline trunk.
    pub fn random(desc: &ArchDescriptor, seed: u64, trainable: bool) -> Result<Self> {
        let mut init = Init::new(seed);
        let mut convs = Vec::with_capacity(desc.layers.len());
        for layer in &desc.layers {
            let LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } = *layer
            else {
                convs.push(None);
                continue;
            };
            let mut c = Conv2d::init(&mut init, in_channels, out_channels, kernel, stride, None)?;
            c.padding = padding;
            if !trainable {
                c.weight = c.weight.freeze();
                c.bias = c.bias.map(|b| b.freeze());
            }
            convs.push(Some(c));
        }
        Ok(Self {
            desc: desc.clone(),
            convs,
            normalization: Normalization::default(),
            surgery: false,
            replacements: Vec::new(),
        })
    }

    /// Builds a net from explicit parameters (all frozen).
    pub fn from_params(
        desc: &ArchDescriptor,
        params: &HashMap<String, Tensor>,
        normalization: Normalization,
    ) -> Result<Self> {
        let mut convs = Vec::with_capacity(desc.layers.len());
        for (idx, layer) in desc.layers.iter().enumerate() {
            let LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } = *layer
            else {
                convs.push(None);
                continue;
            };
            let prefix = desc.param_prefix(idx);
            let w = fetch(params, &format!("{prefix}.weight"), &[out_channels, in_channels, kernel, kernel])?;
            let b = fetch(params, &format!("{prefix}.bias"), &[out_channels])?;
            convs.push(Some(Conv2d::new(Param::frozen(w), Some(Param::frozen(b)), stride, padding)));
        }
        Ok(Self {
            desc: desc.clone(),
            convs,
            normalization,
            surgery: false,
            replacements: Vec::new(),
        })
    }

    /// Marks a net whose descriptor already carries the surgery.
    pub fn with_surgery_record(mut self, replacements: Vec<Replacement>) -> Self {
        self.surgery = true;
        self.replacements = replacements;
        self
    }

    pub fn desc(&self) -> &ArchDescriptor {
        &self.desc
    }

    pub fn normalization(&self) -> &Normalization {
        &self.normalization
    }

    pub fn set_normalization(&mut self, n: Normalization) {
        self.normalization = n;
    }

    pub fn is_surgically_modified(&self) -> bool {
        self.surgery
    }

    pub fn replacements(&self) -> &[Replacement] {
        &self.replacements
    }

    pub fn conv_layer_count(&self) -> usize {
        self.convs.iter().filter(|c| c.is_some()).count()
    }

    pub fn is_frozen(&self) -> bool {
        self.named_params().iter().all(|(_, p)| !p.is_trainable())
    }

    /// Mean-pools instead of max-pools and leaky rectifiers (slope 0.2)
    /// instead of rectifiers. Conv parameters are shared untouched.
    pub fn apply_surgery(&self) -> Result<Self> {
        if self.surgery {
            return Err(Error::SurgeryApplied);
        }
        let mut layers = self.desc.layers.clone();
        let mut replacements = Vec::new();
        for (index, layer) in layers.iter_mut().enumerate() {
            let replaced = match *layer {
                LayerSpec::MaxPool { kernel, stride } => LayerSpec::AvgPool { kernel, stride },
                LayerSpec::Relu => LayerSpec::LeakyRelu {
                    slope: SURGERY_SLOPE,
                },
                _ => continue,
            };
            replacements.push(Replacement {
                index,
                from: layer.kind().into(),
                to: replaced.kind().into(),
            });
            *layer = replaced;
        }
        Ok(Self {
            desc: ArchDescriptor {
                source: self.desc.source.clone(),
                layers,
            },
            convs: self.convs.clone(),
            normalization: self.normalization.clone(),
            surgery: true,
            replacements,
        })
    }

    pub fn manifest(&self) -> WeightsManifest {
        WeightsManifest {
            source: self.desc.source.clone(),
            surgery: self.surgery,
            replacements: self.replacements.clone(),
            normalization: self.normalization.clone(),
            tensors: self
                .named_params()
                .into_iter()
                .map(|(n, p)| (n, p.value().dims().to_vec()))
                .collect(),
        }
    }

    /// Writes the weights container and its manifest sidecar.
    pub fn save(&self, weights_path: &Path) -> Result<()> {
        let params = self.named_params();
        let tensors: Vec<(String, Tensor)> = params
            .into_iter()
            .map(|(n, p)| (n, p.value().clone()))
            .collect();
        safetensors::serialize_to_file(tensors, None, weights_path)?;
        let mpath = manifest_path(weights_path);
        let text = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
        Ok(())
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let convs = self
            .convs
            .iter()
            .map(|c| c.as_ref().map(|c| c.to_dtype(dtype)).transpose())
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            ..self.clone()
        })
    }

    /// Splits the chain into blocks starting at `boundaries`.
    pub fn partition(&self, boundaries: &[usize]) -> Result<BlockPartition> {
        BlockPartition::new(&self.desc, boundaries)
    }

    /// Blocks split right before each of the first `k - 1` halving layers.
    pub fn default_partition(&self, k: usize) -> Result<BlockPartition> {
        let halving = self.desc.halving_indices();
        if k == 0 || k - 1 > halving.len() {
            return Err(Error::config(
                "discriminator.blocks",
                format!(
                    "trunk `{}` supports 1..={} blocks, requested {k}",
                    self.desc.source,
                    halving.len() + 1
                ),
            ));
        }
        let mut b = vec![0];
        b.extend_from_slice(&halving[..k - 1]);
        self.partition(&b)
    }

    fn forward_layers(&self, range: std::ops::Range<usize>, x: &Tensor, track: Track) -> Result<Tensor> {
        let mut h = x.clone();
        for idx in range {
            h = match self.desc.layers[idx] {
                LayerSpec::Conv { .. } => self.convs[idx]
                    .as_ref()
                    .expect("conv slot populated")
                    .forward(&h, track)?,
                LayerSpec::Relu => h.relu()?,
                LayerSpec::LeakyRelu { slope } => nn::leaky_relu(&h, slope)?,
                LayerSpec::MaxPool { kernel, stride } => {
                    h.max_pool2d_with_stride(kernel, stride)?
                }
                LayerSpec::AvgPool { kernel, stride } => {
                    h.avg_pool2d_with_stride(kernel, stride)?
                }
            };
        }
        Ok(h)
    }

    /// Runs the whole chain.
    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        self.forward_layers(0..self.desc.layers.len(), x, track)
    }

    /// Copy with every parameter frozen.
    pub fn frozen(&self) -> Self {
        let convs = self
            .convs
            .iter()
            .map(|c| {
                c.as_ref().map(|c| Conv2d {
                    weight: c.weight.freeze(),
                    bias: c.bias.as_ref().map(Param::freeze),
                    ..c.clone()
                })
            })
            .collect();
        Self {
            convs,
            ..self.clone()
        }
    }

    /// Copy with every parameter trainable (fresh variables).
    pub fn trainable(&self) -> Result<Self> {
        let convs = self
            .convs
            .iter()
            .map(|c| {
                c.as_ref()
                    .map(|c| -> Result<Conv2d> {
                        Ok(Conv2d {
                            weight: Param::trainable(c.weight.value().clone())?,
                            bias: c
                                .bias
                                .as_ref()
                                .map(|b| Param::trainable(b.value().clone()))
                                .transpose()?,
                            ..c.clone()
                        })
                    })
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            convs,
            ..self.clone()
        })
    }

    /// Output of every block, each block consuming the previous one's output.
    /// The batch must already be in trunk normalization.
    pub fn extract_features(
        &self,
        part: &BlockPartition,
        batch: &Tensor,
        track: Track,
    ) -> Result<FeaturePyramid> {
        let (_, c, h, w) = batch.dims4()?;
        if c != self.desc.input_channels() {
            return Err(Error::Shape(format!(
                "trunk expects {} input channels, got {c}",
                self.desc.input_channels()
            )));
        }
        let div = 1usize << (part.len() - 1);
        if h % div != 0 || w % div != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {div} (2^(K-1) with K = {})",
                part.len()
            )));
        }
        let mut levels = Vec::with_capacity(part.len());
        let mut cur = batch.clone();
        for (i, block) in part.blocks.iter().enumerate() {
            for idx in block.start..block.end {
                cur = self.forward_layers(idx..idx + 1, &cur, track)?;
                nn::ensure_finite(&cur, || format!("feature block {i} (layer {idx})"))?;
            }
            levels.push(cur.clone());
        }
        Ok(FeaturePyramid { levels })
    }
}

impl HasParams for ReferenceNet {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        for (idx, c) in self.convs.iter().enumerate() {
            if let Some(c) = c {
                c.collect_params(&nn::join(prefix, &self.desc.param_prefix(idx)), out);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    pub out_channels: usize,
    pub downsample: usize,
}

/// K contiguous blocks covering a prefix of the chain.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockPartition {
    pub blocks: Vec<Block>,
}

impl BlockPartition {
    pub fn new(desc: &ArchDescriptor, boundaries: &[usize]) -> Result<Self> {
        let n = desc.layers.len();
        if boundaries.is_empty() {
            return Err(Error::Partition {
                index: 0,
                msg: "at least one block is required".into(),
            });
        }
        if boundaries[0] != 0 {
            return Err(Error::Partition {
                index: 0,
                msg: format!("first block must start at layer 0, found {}", boundaries[0]),
            });
        }
        for (i, w) in boundaries.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(Error::Partition {
                    index: i + 1,
                    msg: "boundaries must be strictly increasing".into(),
                });
            }
        }
        for (i, &b) in boundaries.iter().enumerate().skip(1) {
            if b >= n || !desc.layers[b].is_halving() {
                return Err(Error::Partition {
                    index: i,
                    msg: format!("layer {b} is not a spatial-halving layer"),
                });
            }
        }
        let last_start = *boundaries.last().unwrap();
        let last_end = (last_start + 1..n)
            .find(|&j| desc.layers[j].is_halving())
            .unwrap_or(n);
        let mut blocks = Vec::with_capacity(boundaries.len());
        for (i, &start) in boundaries.iter().enumerate() {
            let end = boundaries.get(i + 1).copied().unwrap_or(last_end);
            let interior_from = if i == 0 { start } else { start + 1 };
            if let Some(j) = (interior_from..end).find(|&j| desc.layers[j].is_halving()) {
                return Err(Error::Partition {
                    index: i,
                    msg: format!("block {i} contains an interior halving layer at {j}"),
                });
            }
            blocks.push(Block {
                start,
                end,
                out_channels: desc.channels_before(end),
                downsample: if i == 0 { 1 } else { 2 },
            });
        }
        Ok(Self { blocks })
    }

    /// K.
    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.out_channels).collect()
    }

    pub fn downsampling(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.downsample).collect()
    }

    /// Spatial sizes `W_1..W_K` for an input of side `w`.
    pub fn spatial_sizes(&self, w: usize) -> Vec<usize> {
        let mut cur = w;
        self.blocks
            .iter()
            .map(|b| {
                cur /= b.downsample;
                cur
            })
            .collect()
    }
}

/// Perceptual statistics `f_1 .. f_K`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn spatial_sizes(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.dims()[3]).collect()
    }

    pub fn channels(&self) -> Vec<usize> {
        self.levels.iter().map(|t| t.dims()[1]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_desc() -> ArchDescriptor {
        ArchDescriptor::new(
            "tiny",
            vec![
                LayerSpec::conv(3, 4, 3),
                LayerSpec::Relu,
                LayerSpec::conv(4, 4, 3),
                LayerSpec::Relu,
                LayerSpec::max_pool(),
                LayerSpec::conv(4, 8, 3),
                LayerSpec::Relu,
            ],
        )
        .unwrap()
    }

    #[test]
    fn mean_pool_after_surgery() {
        let x = Tensor::new(&[[[[1.0f32, 2.0], [3.0, 4.0]]]], &Device::Cpu).unwrap();
        assert_eq!(
            x.max_pool2d_with_stride(2, 2).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            vec![4.0]
        );
        let desc = ArchDescriptor::new(
            "pool",
            vec![LayerSpec::conv(1, 1, 1), LayerSpec::max_pool()],
        )
        .unwrap();
        let mut params = HashMap::new();
        params.insert("block0.layer0.weight".into(), Tensor::ones((1, 1, 1, 1), DType::F32, &Device::Cpu).unwrap());
        params.insert("block0.layer0.bias".into(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        let net = ReferenceNet::from_params(&desc, &params, Normalization { mean: vec![0.0], scale: vec![1.0] }).unwrap();
        let before = net.forward_layers(0..2, &x, Track::Params).unwrap();
        let after = net.apply_surgery().unwrap().forward_layers(0..2, &x, Track::Params).unwrap();
        assert_eq!(before.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![4.0]);
        assert_eq!(after.flatten_all().unwrap().to_vec1::<f32>().unwrap(), vec![2.5]);
    }

    #[test]
    fn leaky_rectifier_after_surgery() {
        let desc = ArchDescriptor::new("r", vec![LayerSpec::conv(1, 1, 1), LayerSpec::Relu]).unwrap();
        let mut params = HashMap::new();
        params.insert("block0.layer0.weight".into(), Tensor::ones((1, 1, 1, 1), DType::F32, &Device::Cpu).unwrap());
        params.insert("block0.layer0.bias".into(), Tensor::zeros(1, DType::F32, &Device::Cpu).unwrap());
        let net = ReferenceNet::from_params(&desc, &params, Normalization { mean: vec![0.0], scale: vec![1.0] }).unwrap();
        let x = Tensor::new(&[[[[-1.0f32]]]], &Device::Cpu).unwrap();
        let v = |n: &ReferenceNet| n.forward_layers(0..2, &x, Track::Params).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap()[0];
        assert_eq!(v(&net), 0.0);
        assert!((v(&net.apply_surgery().unwrap()) + 0.2).abs() < 1e-7);
    }

    #[test]
    fn surgery_twice_is_rejected() {
        let net = ReferenceNet::random(&tiny_desc(), 0, false).unwrap();
        let once = net.apply_surgery().unwrap();
        assert!(matches!(once.apply_surgery(), Err(Error::SurgeryApplied)));
    }

    #[test]
    fn surgery_keeps_conv_weights() {
        let net = ReferenceNet::random(&tiny_desc(), 3, false).unwrap();
        let after = net.apply_surgery().unwrap();
        assert_eq!(
            nn::params_checksum(&net.named_params()).unwrap(),
            nn::params_checksum(&after.named_params()).unwrap()
        );
        assert_eq!(after.replacements().len(), 4);
    }

    #[test]
    fn vgg19_partition_before_pools() {
        let desc = ArchDescriptor::vgg19();
        // independent walk: block boundaries are the pool positions
        let pools: Vec<usize> = desc
            .layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l, LayerSpec::MaxPool { .. }))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(pools, vec![4, 9, 18, 27, 36]);
        let part = BlockPartition::new(&desc, &[0, 4, 9, 18, 27]).unwrap();
        assert_eq!(part.len(), 5);
        assert_eq!(part.downsampling(), vec![1, 2, 2, 2, 2]);
        assert_eq!(part.channels(), vec![64, 128, 256, 512, 512]);
        assert_eq!(part.blocks[4].end, 36);
    }

    #[test]
    fn boundary_mid_conv_pair_is_rejected() {
        let desc = ArchDescriptor::vgg19();
        match BlockPartition::new(&desc, &[0, 2]) {
            Err(Error::Partition { index, .. }) => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn skipping_a_pool_is_rejected() {
        let desc = ArchDescriptor::vgg19();
        assert!(matches!(
            BlockPartition::new(&desc, &[0, 9]),
            Err(Error::Partition { index: 0, .. })
        ));
    }

    #[test]
    fn single_block_partition() {
        let desc = ArchDescriptor::new(
            "two-conv",
            vec![LayerSpec::conv(3, 4, 3), LayerSpec::Relu, LayerSpec::conv(4, 4, 3)],
        )
        .unwrap();
        let part = BlockPartition::new(&desc, &[0]).unwrap();
        assert_eq!(part.len(), 1);
        assert_eq!(part.blocks[0].end, 3);
    }

    #[test]
    fn indivisible_input_is_a_shape_error() {
        let net = ReferenceNet::random(&tiny_desc(), 0, false).unwrap();
        let part = net.default_partition(2).unwrap();
        let x = Tensor::zeros((1, 3, 9, 9), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            net.extract_features(&part, &x, Track::Params),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn non_finite_activation_names_block() {
        let net = ReferenceNet::random(&tiny_desc(), 0, false).unwrap();
        let part = net.default_partition(2).unwrap();
        let x = Tensor::full(f32::MAX, (1, 3, 8, 8), &Device::Cpu).unwrap();
        match net.extract_features(&part, &x, Track::Params) {
            Err(Error::NonFinite(what)) => assert!(what.contains("block 0")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
