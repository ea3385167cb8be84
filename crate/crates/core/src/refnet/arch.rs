//! Chain architecture descriptors and their line-oriented text format.
//!
//! ```text
//! # comment
//! source vgg19-ilsvrc
//! conv in=3 out=64 kernel=3 stride=1 pad=1
//! relu
//! maxpool kernel=2 stride=2
//! leaky_relu slope=0.2
//! avgpool kernel=2 stride=2
//! ```

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    LeakyRelu {
        slope: f64,
    },
    MaxPool {
        kernel: usize,
        stride: usize,
    },
    AvgPool {
        kernel: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            padding: kernel / 2,
        }
    }

    pub fn max_pool() -> Self {
        LayerSpec::MaxPool {
            kernel: 2,
            stride: 2,
        }
    }

    /// Layers that halve the spatial size.
    pub fn is_halving(&self) -> bool {
        match *self {
            LayerSpec::Conv { stride, .. } => stride == 2,
            LayerSpec::MaxPool { .. } | LayerSpec::AvgPool { .. } => true,
            LayerSpec::Relu | LayerSpec::LeakyRelu { .. } => false,
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, LayerSpec::Conv { .. })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Relu => "relu",
            LayerSpec::LeakyRelu { .. } => "leaky_relu",
            LayerSpec::MaxPool { .. } => "maxpool",
            LayerSpec::AvgPool { .. } => "avgpool",
        }
    }

    fn to_line(self) -> String {
        match self {
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => format!(
                "conv in={in_channels} out={out_channels} kernel={kernel} stride={stride} pad={padding}"
            ),
            LayerSpec::Relu => "relu".into(),
            LayerSpec::LeakyRelu { slope } => format!("leaky_relu slope={slope}"),
            LayerSpec::MaxPool { kernel, stride } => {
                format!("maxpool kernel={kernel} stride={stride}")
            }
            LayerSpec::AvgPool { kernel, stride } => {
                format!("avgpool kernel={kernel} stride={stride}")
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub source: String,
    pub layers: Vec<LayerSpec>,
}

impl ArchDescriptor {
    /// Builds a descriptor and checks the chain rules. Errors report the
    /// 1-based layer ordinal as the line.
    pub fn new(source: impl Into<String>, layers: Vec<LayerSpec>) -> Result<Self> {
        let desc = Self {
            source: source.into(),
            layers,
        };
        desc.validate(|i| i + 1)?;
        Ok(desc)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut source = String::new();
        let mut layers = Vec::new();
        let mut lines = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let head = tokens.next().unwrap_or_default();
            let err = |msg: String| Error::Arch { line: line_no, msg };
            if head == "source" {
                let rest: Vec<&str> = tokens.filter(|t| *t != "=").collect();
                if rest.is_empty() {
                    return Err(err("`source` needs an identifier".into()));
                }
                source = rest.join(" ");
                continue;
            }
            let mut kv = std::collections::BTreeMap::new();
            for tok in tokens {
                let (k, v) = tok
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, found `{tok}`")))?;
                kv.insert(k.to_string(), v.to_string());
            }
            let take_usize = |kv: &mut std::collections::BTreeMap<String, String>,
                              key: &str,
                              default: Option<usize>|
             -> Result<usize> {
                match kv.remove(key) {
                    Some(v) => v
                        .parse()
                        .map_err(|_| err(format!("`{key}` must be a non-negative integer, found `{v}`"))),
                    None => default.ok_or_else(|| err(format!("missing `{key}`"))),
                }
            };
            let layer = match head {
                "conv" => {
                    let in_channels = take_usize(&mut kv, "in", None)?;
                    let out_channels = take_usize(&mut kv, "out", None)?;
                    let kernel = take_usize(&mut kv, "kernel", None)?;
                    let stride = take_usize(&mut kv, "stride", Some(1))?;
                    let padding = take_usize(&mut kv, "pad", Some(kernel / 2))?;
                    LayerSpec::Conv {
                        in_channels,
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    }
                }
                "relu" => LayerSpec::Relu,
                "leaky_relu" => {
                    let slope = match kv.remove("slope") {
                        Some(v) => v
                            .parse()
                            .map_err(|_| err(format!("`slope` must be a number, found `{v}`")))?,
                        None => 0.2,
                    };
                    LayerSpec::LeakyRelu { slope }
                }
                "maxpool" | "avgpool" => {
                    let kernel = take_usize(&mut kv, "kernel", Some(2))?;
                    let stride = take_usize(&mut kv, "stride", Some(kernel))?;
                    if head == "maxpool" {
                        LayerSpec::MaxPool { kernel, stride }
                    } else {
                        LayerSpec::AvgPool { kernel, stride }
                    }
                }
                other => return Err(err(format!("unknown layer type `{other}`"))),
            };
            if let Some(k) = kv.keys().next() {
                return Err(err(format!("unexpected field `{k}` for `{head}`")));
            }
            layers.push(layer);
            lines.push(line_no);
        }
        if source.is_empty() {
            source = "unnamed".into();
        }
        let desc = Self { source, layers };
        desc.validate(|i| lines.get(i).copied().unwrap_or(0))?;
        Ok(desc)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("source {}\n", self.source);
        for l in &self.layers {
            let _ = writeln!(s, "{}", l.to_line());
        }
        s
    }

    fn validate(&self, line_of: impl Fn(usize) -> usize) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::Arch {
                line: 0,
                msg: "descriptor has no layers".into(),
            });
        }
        let mut channels: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let err = |msg: String| Error::Arch {
                line: line_of(i),
                msg,
            };
            match *layer {
                LayerSpec::Conv {
                    in_channels,
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if let Some(c) = channels {
                        if c != in_channels {
                            return Err(err(format!(
                                "conv expects {in_channels} input channels but the chain carries {c}"
                            )));
                        }
                    }
                    if in_channels == 0 || out_channels == 0 || kernel == 0 {
                        return Err(err("conv sizes must be positive".into()));
                    }
                    if kernel % 2 == 0 {
                        return Err(err("conv kernel must be odd".into()));
                    }
                    if stride != 1 && stride != 2 {
                        return Err(err(format!("conv stride must be 1 or 2, found {stride}")));
                    }
                    channels = Some(out_channels);
                }
                LayerSpec::MaxPool { kernel, stride } | LayerSpec::AvgPool { kernel, stride } => {
                    if kernel != 2 || stride != 2 {
                        return Err(err(format!(
                            "pooling must use window 2 and stride 2, found window {kernel} stride {stride}"
                        )));
                    }
                }
                LayerSpec::LeakyRelu { slope } => {
                    if !(slope.is_finite() && (0.0..1.0).contains(&slope)) {
                        return Err(err(format!("leaky slope must be in [0, 1), found {slope}")));
                    }
                }
                LayerSpec::Relu => {}
            }
        }
        if channels.is_none() {
            return Err(Error::Arch {
                line: line_of(0),
                msg: "descriptor has no conv layer".into(),
            });
        }
        Ok(())
    }

    pub fn input_channels(&self) -> usize {
        self.layers
            .iter()
            .find_map(|l| match l {
                LayerSpec::Conv { in_channels, .. } => Some(*in_channels),
                _ => None,
            })
            .unwrap_or(3)
    }

    /// Output channels of the chain up to (excluding) layer `end`.
    pub fn channels_before(&self, end: usize) -> usize {
        self.layers[..end]
            .iter()
            .rev()
            .find_map(|l| match l {
                LayerSpec::Conv { out_channels, .. } => Some(*out_channels),
                _ => None,
            })
            .unwrap_or_else(|| self.input_channels())
    }

    pub fn conv_count(&self) -> usize {
        self.layers.iter().filter(|l| l.is_conv()).count()
    }

    /// Indices of all spatial-halving layers.
    pub fn halving_indices(&self) -> Vec<usize> {
        (0..self.layers.len())
            .filter(|&i| self.layers[i].is_halving())
            .collect()
    }

    /// Weight-container key prefix `block{s}.layer{j}` for layer `idx`: `s`
    /// counts halving layers up to and including `idx`, `j` is the position
    /// inside that stage (a stage starts at its halving layer).
    pub fn param_prefix(&self, idx: usize) -> String {
        let mut stage = 0;
        let mut start = 0;
        for (i, l) in self.layers[..=idx].iter().enumerate() {
            if l.is_halving() && i > 0 {
                stage += 1;
                start = i;
            }
        }
        format!("block{stage}.layer{}", idx - start)
    }

    /// The 16-conv VGG-19 feature trunk (ILSVRC layout, including the last
    /// pool).
    pub fn vgg19() -> Self {
        let mut layers = Vec::new();
        let mut c_in = 3;
        for (stage, (width, convs)) in [(64, 2), (128, 2), (256, 4), (512, 4), (512, 4)]
            .into_iter()
            .enumerate()
        {
            if stage > 0 {
                layers.push(LayerSpec::max_pool());
            }
            for _ in 0..convs {
                layers.push(LayerSpec::conv(c_in, width, 3));
                layers.push(LayerSpec::Relu);
                c_in = width;
            }
        }
        layers.push(LayerSpec::max_pool());
        Self::new("vgg19-ilsvrc", layers).expect("static descriptor is valid")
    }
}
