//! Small layer toolkit on top of `candle-core`.
//!
//! Every learnable tensor is a [`Param`], which is either frozen (a plain
//! tensor, never seen by an optimizer and never receiving a gradient) or
//! trainable (a [`Var`]). Forward passes take a [`Track`] flag so a model can
//! be evaluated with its own parameters detached while gradients still reach
//! its input; the trainer uses that to keep generator and discriminator
//! updates from touching each other's parameters.

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::im2col::{Geometry, Im2Col};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    /// Trainable parameters are part of the autograd graph.
    Params,
    /// Trainable parameters are detached; only inputs carry gradients.
    InputOnly,
}

#[derive(Clone, Debug)]
pub enum Param {
    Frozen(Tensor),
    Trainable(Var),
}

impl Param {
    pub fn frozen(t: Tensor) -> Self {
        Param::Frozen(t.detach())
    }

    pub fn trainable(t: Tensor) -> Result<Self> {
        Ok(Param::Trainable(Var::from_tensor(&t)?))
    }

    pub fn tensor(&self, track: Track) -> Tensor {
        match (self, track) {
            (Param::Frozen(t), _) => t.clone(),
            (Param::Trainable(v), Track::Params) => v.as_tensor().clone(),
            (Param::Trainable(v), Track::InputOnly) => v.as_tensor().detach(),
        }
    }

    pub fn value(&self) -> &Tensor {
        match self {
            Param::Frozen(t) => t,
            Param::Trainable(v) => v.as_tensor(),
        }
    }

    pub fn var(&self) -> Option<&Var> {
        match self {
            Param::Frozen(_) => None,
            Param::Trainable(v) => Some(v),
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, Param::Trainable(_))
    }

    /// Overwrites the parameter value in place (checkpoint restore).
    pub fn assign(&mut self, value: &Tensor) -> Result<()> {
        match self {
            Param::Frozen(t) => *t = value.detach(),
            Param::Trainable(v) => v.set(value)?,
        }
        Ok(())
    }

    /// Same parameter with a different storage dtype; trainability is kept.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let t = self.value().to_dtype(dtype)?;
        match self {
            Param::Frozen(_) => Ok(Param::frozen(t)),
            Param::Trainable(_) => Param::trainable(t),
        }
    }

    pub fn freeze(&self) -> Self {
        Param::frozen(self.value().clone())
    }
}

/// Named parameter list, in a stable order.
pub type NamedParams = Vec<(String, Param)>;

/// Anything that owns parameters.
pub trait HasParams {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams);

    fn named_params(&self) -> NamedParams {
        let mut out = Vec::new();
        self.collect_params("", &mut out);
        out
    }

    fn trainable_vars(&self) -> Vec<(String, Var)> {
        self.named_params()
            .into_iter()
            .filter_map(|(n, p)| p.var().cloned().map(|v| (n, v)))
            .collect()
    }

    fn trainable_count(&self) -> usize {
        self.named_params()
            .iter()
            .filter(|(_, p)| p.is_trainable())
            .map(|(_, p)| p.value().elem_count())
            .sum()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Seeded parameter initializer. All random initialization in the crate goes
/// through here so that equal seeds give bit-identical models.
pub struct Init {
    rng: ChaCha8Rng,
    dtype: DType,
    device: Device,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype: DType::F32,
            device: Device::Cpu,
        }
    }

    pub fn with_dtype(mut self, dtype: DType) -> Self {
        self.dtype = dtype;
        self
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn normal(&mut self, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut self.rng);
                z * std
            })
            .collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn uniform(&mut self, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| self.rng.random_range(-bound..bound))
            .collect();
        Ok(Tensor::from_vec(data, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    pub fn constant(&self, shape: &[usize], value: f64) -> Result<Tensor> {
        Ok(Tensor::full(value, shape, &self.device)?.to_dtype(self.dtype)?)
    }

    /// He-normal for a conv kernel `[out, in, k, k]` feeding a (leaky) rectifier.
    pub fn he_conv(&mut self, shape: &[usize]) -> Result<Tensor> {
        let fan_in: usize = shape[1..].iter().product();
        self.normal(shape, (2.0 / fan_in.max(1) as f64).sqrt())
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Param, bias: Option<Param>, stride: usize, padding: usize) -> Self {
        Self {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// Trainable conv with `N(0, std)` weights and zero bias; `std = None`
    /// selects He initialization.
    pub fn init(
        init: &mut Init,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        std: Option<f64>,
    ) -> Result<Self> {
        let shape = [c_out, c_in, kernel, kernel];
        let w = match std {
            Some(s) => init.normal(&shape, s)?,
            None => init.he_conv(&shape)?,
        };
        let b = init.constant(&[c_out], 0.0)?;
        Ok(Self::new(
            Param::trainable(w)?,
            Some(Param::trainable(b)?),
            stride,
            kernel / 2,
        ))
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value().dims()[1]
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value().dims()[0]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value().dims()[2]
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let w = self.weight.tensor(track);
        let y = conv2d(x, &w, self.padding, self.stride)?;
        match &self.bias {
            Some(b) => {
                let b = b.tensor(track).reshape((1, (), 1, 1))?;
                Ok(y.broadcast_add(&b)?)
            }
            None => Ok(y),
        }
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: self.weight.to_dtype(dtype)?,
            bias: self.bias.as_ref().map(|b| b.to_dtype(dtype)).transpose()?,
            stride: self.stride,
            padding: self.padding,
        })
    }
}

impl HasParams for Conv2d {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.clone()));
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Param,
}

impl Linear {
    pub fn init(init: &mut Init, d_in: usize, d_out: usize, std: f64) -> Result<Self> {
        Ok(Self {
            weight: Param::trainable(init.normal(&[d_out, d_in], std)?)?,
            bias: Param::trainable(init.constant(&[d_out], 0.0)?)?,
        })
    }

    pub fn zeros(init: &Init, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self {
            weight: Param::trainable(init.constant(&[d_out, d_in], 0.0)?)?,
            bias: Param::trainable(init.constant(&[d_out], 0.0)?)?,
        })
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let w = self.weight.tensor(track);
        let b = self.bias.tensor(track);
        Ok(x.matmul(&w.t()?)?.broadcast_add(&b)?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            weight: self.weight.to_dtype(dtype)?,
            bias: self.bias.to_dtype(dtype)?,
        })
    }
}

impl HasParams for Linear {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "weight"), self.weight.clone()));
        out.push((join(prefix, "bias"), self.bias.clone()));
    }
}

/// Per-sample, per-channel normalization over the spatial dimensions with a
/// learned affine transform.
#[derive(Clone, Debug)]
pub struct InstanceNorm {
    pub gamma: Param,
    pub beta: Param,
    pub eps: f64,
}

impl InstanceNorm {
    pub fn init(init: &Init, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Param::trainable(init.constant(&[channels], 1.0)?)?,
            beta: Param::trainable(init.constant(&[channels], 0.0)?)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered
            .sqr()?
            .mean_keepdim(D::Minus1)?
            .mean_keepdim(D::Minus2)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        let g = self.gamma.tensor(track).reshape((1, (), 1, 1))?;
        let b = self.beta.tensor(track).reshape((1, (), 1, 1))?;
        Ok(normed.broadcast_mul(&g)?.broadcast_add(&b)?)
    }

    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        Ok(Self {
            gamma: self.gamma.to_dtype(dtype)?,
            beta: self.beta.to_dtype(dtype)?,
            eps: self.eps,
        })
    }
}

impl HasParams for InstanceNorm {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        out.push((join(prefix, "gamma"), self.gamma.clone()));
        out.push((join(prefix, "beta"), self.beta.clone()));
    }
}

/// Cross-correlation with zero padding, written as a patch matrix times the
/// kernel matrix.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (n, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c {
        return Err(Error::Shape(format!(
            "conv expects {ci} input channels, got {c} ({:?})",
            x.dims()
        )));
    }
    if h + 2 * padding < kh || wd + 2 * padding < kw || stride == 0 {
        return Err(Error::Shape(format!("input {:?} too small for kernel {kh}x{kw}", x.dims())));
    }
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (wd + 2 * padding - kw) / stride + 1;
    if kh == 1 && kw == 1 && stride == 1 && padding == 0 {
        let y = w.reshape((co, c))?.broadcast_matmul(&x.reshape((n, c, h * wd))?)?;
        return Ok(y.reshape((n, co, h, wd))?);
    }
    let geom = Geometry {
        c,
        h,
        w: wd,
        kh,
        kw,
        stride,
        pad: padding,
    };
    let cols = x.contiguous()?.apply_op1(Im2Col(geom))?;
    let y = w.reshape((co, c * kh * kw))?.broadcast_matmul(&cols)?;
    Ok(y.reshape((n, co, ho, wo))?)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    Ok(x.reshape((n, c, h, 1, w, 1))?
        .broadcast_as((n, c, h, 2, w, 2))?
        .reshape((n, c, 2 * h, 2 * w))?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// `log(1 + exp(z))` without overflow.
pub fn softplus(z: &Tensor) -> Result<Tensor> {
    let tail = (z.abs()?.neg()?.exp()? + 1.0)?.log()?;
    Ok((z.relu()? + tail)?)
}

/// `log sigmoid(s)`.
pub fn log_sigmoid(s: &Tensor) -> Result<Tensor> {
    Ok(softplus(&s.neg()?)?.neg()?)
}

pub fn log_softmax(logits: &Tensor) -> Result<Tensor> {
    let max = logits.max_keepdim(D::Minus1)?.detach();
    let shifted = logits.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// One-hot rows `[n, classes]` in the dtype of `like`.
pub fn one_hot(labels: &[u32], classes: usize, like: &Tensor) -> Result<Tensor> {
    let mut data = vec![0f32; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l as usize] = 1.0;
    }
    Ok(Tensor::from_vec(data, (labels.len(), classes), like.device())?.to_dtype(like.dtype())?)
}

/// Mean negative log-likelihood of `labels` under softmax `logits`.
pub fn cross_entropy(logits: &Tensor, labels: &[u32]) -> Result<Tensor> {
    let (_, classes) = logits.dims2()?;
    let logp = log_softmax(logits)?;
    let picked = (logp * one_hot(labels, classes, logits)?)?.sum(D::Minus1)?;
    Ok(picked.mean_all()?.neg()?)
}

/// Spatial mean over the last two dims: `[N, C, H, W] -> [N, C]`.
pub fn global_mean(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

/// Scalar tensor value as f64.
pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Errors with [`Error::NonFinite`] if `t` holds a NaN or infinity.
pub fn ensure_finite(t: &Tensor, what: impl FnOnce() -> String) -> Result<()> {
    let s = scalar(&t.sum_all()?)?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// Raw-bytes hash of a tensor, used for bit-identity checks.
pub fn tensor_digest(hasher: &mut Sha256, t: &Tensor) -> Result<()> {
    hasher.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
    let flat = t.flatten_all()?;
    match t.dtype() {
        DType::F64 => {
            for v in flat.to_vec1::<f64>()? {
                hasher.update(v.to_le_bytes());
            }
        }
        _ => {
            for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                hasher.update(v.to_le_bytes());
            }
        }
    }
    Ok(())
}

/// Hex digest over a set of named parameters (names included).
pub fn params_checksum(params: &[(String, Param)]) -> Result<String> {
    let mut h = Sha256::new();
    for (name, p) in params {
        h.update(name.as_bytes());
        tensor_digest(&mut h, p.value())?;
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_matches_backend_kernel() {
        let mut init = Init::new(3);
        for &(c, co, hw, k, stride, pad) in &[
            (3, 5, 9, 3, 1, 1),
            (2, 4, 8, 3, 2, 1),
            (2, 3, 7, 3, 2, 1),
            (3, 2, 8, 7, 1, 3),
            (4, 1, 5, 1, 1, 0),
            (2, 2, 6, 2, 2, 0),
        ] {
            let x = init.normal(&[2, c, hw, hw], 1.0).unwrap();
            let w = init.normal(&[co, c, k, k], 1.0).unwrap();
            let a = conv2d(&x, &w, pad, stride).unwrap();
            let b = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            assert_eq!(a.dims(), b.dims());
            let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
            assert!(d < 1e-4, "{c} {co} {hw} {k} {stride}: {d}");
        }
    }

    #[test]
    fn upsample_matches_backend() {
        let x = Init::new(1).normal(&[1, 2, 3, 4], 1.0).unwrap();
        let a = upsample2x(&x).unwrap();
        let b = x.upsample_nearest2d(6, 8).unwrap();
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn leaky_relu_matches_definition() {
        let x = Tensor::new(&[-1.0f32, 0.0, 2.0], &Device::Cpu).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(y, vec![-0.2, 0.0, 2.0]);
    }

    #[test]
    fn log_sigmoid_is_stable_at_extremes() {
        let x = Tensor::new(&[-200.0f32, 0.0, 200.0], &Device::Cpu).unwrap();
        let y = log_sigmoid(&x).unwrap().to_vec1::<f32>().unwrap();
        assert!((y[0] + 200.0).abs() < 1e-3);
        assert!((y[1] + std::f32::consts::LN_2).abs() < 1e-6);
        assert!(y[2].abs() < 1e-6);
    }

    #[test]
    fn detached_params_receive_no_gradient() {
        let mut init = Init::new(0);
        let conv = Conv2d::init(&mut init, 2, 3, 3, 1, Some(0.1)).unwrap();
        let x = Var::from_tensor(&init.normal(&[1, 2, 4, 4], 1.0).unwrap()).unwrap();
        let y = conv.forward(x.as_tensor(), Track::InputOnly).unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(grads.get(x.as_tensor()).is_some());
        assert!(grads.get(conv.weight.value()).is_none());
    }

    #[test]
    fn equal_seeds_give_equal_tensors() {
        let a = Init::new(7).normal(&[3, 4], 1.0).unwrap();
        let b = Init::new(7).normal(&[3, 4], 1.0).unwrap();
        let d = (a - b).unwrap().abs().unwrap().sum_all().unwrap();
        assert_eq!(scalar(&d).unwrap(), 0.0);
    }

    #[test]
    fn instance_norm_standardizes_each_map() {
        let init = Init::new(0);
        let norm = InstanceNorm::init(&init, 2).unwrap();
        let x = Init::new(3).normal(&[2, 2, 5, 5], 3.0).unwrap();
        let y = norm.forward(&x, Track::Params).unwrap();
        let m = global_mean(&y).unwrap().abs().unwrap().max_all().unwrap();
        assert!(scalar(&m).unwrap() < 1e-5);
    }
}
