//! Evaluation: classifier two-sample test between real and translated
//! images, target-class log-loss under a pretrained attribute classifier,
//! metric export and input/output montages.

use std::collections::HashMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use candle_core::{DType, Device, Tensor, D};
use image::RgbImage;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::EvalSection;
use crate::data::toy::{synth_toy_domains, ToyTask};
use crate::data::tensor_to_images;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{self, Conv2d, HasParams, Init, Linear, NamedParams, Param, Track};
use crate::optim::{Adam, AdamConfig};

const LEAKY_SLOPE: f64 = 0.2;
const META_KEY: &str = "attribute_classifier";

/// Three conv stages (`w`, `2w`, `4w` channels, the first two followed by
/// 2x average pooling), global max pooling and a zero-initialized linear
/// head. The zero head makes an untrained classifier predict uniformly.
#[derive(Clone, Debug)]
pub struct SmallConvNet {
    stages: Vec<Conv2d>,
    head: Linear,
    classes: usize,
}

impl SmallConvNet {
    pub fn new(width: usize, classes: usize, seed: u64) -> Result<Self> {
        if width == 0 || classes < 2 {
            return Err(Error::config("eval", "classifier needs width > 0 and at least two classes"));
        }
        let mut init = Init::new(seed);
        let stages = [(3, width), (width, 2 * width), (2 * width, 4 * width)]
            .into_iter()
            .map(|(i, o)| Conv2d::init(&mut init, i, o, 3, 1, None))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::zeros(&init, 4 * width, classes)?;
        Ok(Self { stages, head, classes })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn width(&self) -> usize {
        self.stages[0].out_channels()
    }

    pub fn logits(&self, x: &Tensor, track: Track) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.stages.iter().enumerate() {
            h = nn::leaky_relu(&conv.forward(&h, track)?, LEAKY_SLOPE)?;
            if i + 1 < self.stages.len() {
                h = h.avg_pool2d(2)?;
            }
        }
        // max over locations: the evidence is a local pattern anywhere in
        // the image, which spatial averaging dilutes
        let pooled = h.max(D::Minus1)?.max(D::Minus1)?;
        self.head.forward(&pooled, track)
    }

    /// Log-probabilities `[N, classes]` without building a graph, in
    /// batches of `batch`.
    pub fn log_probs(&self, x: &Tensor, batch: usize) -> Result<Tensor> {
        let n = x.dim(0)?;
        let mut parts = Vec::new();
        let mut start = 0;
        while start < n {
            let len = batch.min(n - start);
            let logits = self.logits(&x.narrow(0, start, len)?.detach(), Track::InputOnly)?;
            parts.push(nn::log_softmax(&logits)?.detach());
            start += len;
        }
        Ok(Tensor::cat(&parts, 0)?)
    }

    /// Minibatch Adam on softmax cross-entropy, reshuffling every epoch.
    pub fn fit(&mut self, x: &Tensor, labels: &[u32], opts: &FitOptions) -> Result<()> {
        let n = x.dim(0)?;
        if n != labels.len() || n == 0 {
            return Err(Error::Data(format!("{n} images but {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= self.classes) {
            return Err(Error::Data(format!("label {bad} outside {} classes", self.classes)));
        }
        let mut opt = Adam::new(
            self.trainable_vars(),
            AdamConfig {
                lr: opts.lr,
                beta1: 0.9,
                ..Default::default()
            },
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut order: Vec<u32> = (0..n as u32).collect();
        for _ in 0..opts.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch_size.max(1)) {
                let idx = Tensor::new(chunk, x.device())?;
                let bx = x.index_select(&idx, 0)?;
                let by: Vec<u32> = chunk.iter().map(|&i| labels[i as usize]).collect();
                let loss = nn::cross_entropy(&self.logits(&bx, Track::Params)?, &by)?;
                opt.step(&loss.backward()?)?;
            }
        }
        Ok(())
    }

    fn load(&mut self, tensors: &HashMap<String, Tensor>) -> Result<()> {
        for (name, mut p) in self.named_params() {
            let t = tensors.get(&name).ok_or_else(|| Error::MissingKey(name.clone()))?;
            if t.dims() != p.value().dims() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: p.value().dims().to_vec(),
                    found: t.dims().to_vec(),
                });
            }
            p.assign(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }
}

impl HasParams for SmallConvNet {
    fn collect_params(&self, prefix: &str, out: &mut NamedParams) {
        for (i, c) in self.stages.iter().enumerate() {
            c.collect_params(&nn::join(prefix, &format!("stage{i}")), out);
        }
        self.head.collect_params(&nn::join(prefix, "head"), out);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

/// Pinned two-sample classifier setup. Hashed into every result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2STConfig {
    pub min_per_side: usize,
    pub epochs: usize,
    pub width: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for C2STConfig {
    fn default() -> Self {
        Self::from_eval(&EvalSection::default())
    }
}

impl C2STConfig {
    pub fn from_eval(e: &EvalSection) -> Self {
        Self {
            min_per_side: e.c2st_min_per_side,
            epochs: e.c2st_epochs,
            width: e.c2st_width,
            batch_size: e.c2st_batch_size,
            lr: e.c2st_lr,
            seed: e.c2st_seed,
        }
    }

    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("plain struct serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct C2STResult {
    /// Hold-out cross-entropy in nats. Higher means harder to tell apart.
    pub log_loss: f64,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub config_hash: String,
}

impl C2STResult {
    pub fn record(&self, config_hash: &str) -> MetricRecord {
        MetricRecord::new("c2st", self.log_loss, config_hash).with_details(serde_json::json!({
            "accuracy": self.accuracy,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "classifier_hash": self.config_hash,
        }))
    }
}

fn shuffled_halves(n: usize, rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>) {
    let mut idx: Vec<u32> = (0..n as u32).collect();
    idx.shuffle(rng);
    let test = idx.split_off(n / 2);
    (idx, test)
}

/// Trains a fresh real-vs-fake classifier on half of each set and reports
/// its cross-entropy on the other half.
pub fn c2st(real: &Tensor, fake: &Tensor, cfg: &C2STConfig) -> Result<C2STResult> {
    let (nr, nf) = (real.dim(0)?, fake.dim(0)?);
    if nr < cfg.min_per_side || nf < cfg.min_per_side {
        return Err(Error::Data(format!(
            "two-sample test needs at least {} images per side, got {nr} real and {nf} generated",
            cfg.min_per_side
        )));
    }
    if real.dims()[1..] != fake.dims()[1..] {
        return Err(Error::Shape(format!(
            "real {:?} and generated {:?} images differ in shape",
            real.dims(),
            fake.dims()
        )));
    }
    let real = real.to_dtype(DType::F32)?;
    let fake = fake.to_dtype(DType::F32)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (r_train, r_test) = shuffled_halves(nr, &mut rng);
    let (f_train, f_test) = shuffled_halves(nf, &mut rng);
    let pick = |t: &Tensor, idx: &[u32]| -> Result<Tensor> {
        Ok(t.index_select(&Tensor::new(idx, &Device::Cpu)?, 0)?)
    };
    let labelled = |r: &[u32], f: &[u32]| -> Result<(Tensor, Vec<u32>)> {
        let x = Tensor::cat(&[pick(&real, r)?, pick(&fake, f)?], 0)?;
        let y = std::iter::repeat_n(1, r.len()).chain(std::iter::repeat_n(0, f.len())).collect();
        Ok((x, y))
    };
    let (x_train, y_train) = labelled(&r_train, &f_train)?;
    let (x_test, y_test) = labelled(&r_test, &f_test)?;

    let mut net = SmallConvNet::new(cfg.width, 2, cfg.seed)?;
    net.fit(
        &x_train,
        &y_train,
        &FitOptions {
            epochs: cfg.epochs,
            batch_size: cfg.batch_size,
            lr: cfg.lr,
            seed: cfg.seed.wrapping_add(1),
        },
    )?;
    let logp = net.log_probs(&x_test, 256)?;
    let (log_loss, accuracy) = score(&logp, &y_test)?;
    Ok(C2STResult {
        log_loss,
        accuracy,
        n_train: y_train.len(),
        n_test: y_test.len(),
        config_hash: cfg.hash(),
    })
}

/// Mean negative log-likelihood and argmax accuracy of `labels`.
fn score(logp: &Tensor, labels: &[u32]) -> Result<(f64, f64)> {
    let rows = logp.to_dtype(DType::F64)?.to_vec2::<f64>()?;
    let mut nll = 0.0;
    let mut correct = 0usize;
    for (row, &l) in rows.iter().zip(labels) {
        nll -= row[l as usize];
        let best = row
            .iter()
            .enumerate()
            .fold(0, |b, (i, v)| if *v > row[b] { i } else { b });
        correct += (best == l as usize) as usize;
    }
    let n = labels.len() as f64;
    Ok((nll / n, correct as f64 / n))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeScore {
    /// Mean `-ln p(target | image)`.
    pub mean_nll: f64,
    pub count: usize,
}

impl AttributeScore {
    pub fn record(&self, config_hash: &str) -> MetricRecord {
        MetricRecord::new("attr", self.mean_nll, config_hash)
            .with_details(serde_json::json!({ "count": self.count }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct AttributeMeta {
    width: usize,
    resolution: u32,
    labels: Vec<String>,
}

/// A frozen image classifier over named classes.
#[derive(Clone, Debug)]
pub struct AttributeClassifier {
    net: SmallConvNet,
    meta: AttributeMeta,
}

impl AttributeClassifier {
    /// Untrained classifier; predicts every class with equal probability.
    pub fn untrained(width: usize, resolution: u32, labels: Vec<String>, seed: u64) -> Result<Self> {
        let net = SmallConvNet::new(width, labels.len(), seed)?;
        Ok(Self {
            net,
            meta: AttributeMeta {
                width,
                resolution,
                labels,
            },
        })
    }

    pub fn labels(&self) -> &[String] {
        &self.meta.labels
    }

    pub fn resolution(&self) -> u32 {
        self.meta.resolution
    }

    pub fn class_id(&self, label: &str) -> Option<u32> {
        self.meta.labels.iter().position(|l| l == label).map(|i| i as u32)
    }

    pub fn log_probs(&self, images: &Tensor) -> Result<Tensor> {
        self.net.log_probs(&images.to_dtype(DType::F32)?, 256)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor)> = self
            .net
            .named_params()
            .into_iter()
            .map(|(n, p)| (n, p.value().clone()))
            .collect();
        let md: HashMap<String, String> = [(META_KEY.to_string(), serde_json::to_string(&self.meta)?)].into();
        safetensors::serialize_to_file(tensors, Some(md), path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, st) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let raw = st
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: not an attribute classifier", path.display())))?;
        let meta: AttributeMeta = serde_json::from_str(raw)?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)?;
        let mut clf = Self::untrained(meta.width, meta.resolution, meta.labels.clone(), 0)?;
        clf.net.load(&tensors)?;
        clf.net = clf.net.frozen();
        Ok(clf)
    }
}

impl SmallConvNet {
    fn frozen(&self) -> Self {
        let freeze = |c: &Conv2d| Conv2d::new(c.weight.freeze(), c.bias.as_ref().map(Param::freeze), c.stride, c.padding);
        Self {
            stages: self.stages.iter().map(freeze).collect(),
            head: Linear {
                weight: self.head.weight.freeze(),
                bias: self.head.bias.freeze(),
            },
            classes: self.classes,
        }
    }
}

/// Settings for the helper that trains a domain classifier on toy data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttrTrainConfig {
    pub task: ToyTask,
    pub count: usize,
    pub resolution: u32,
    pub width: usize,
    pub fit: FitOptions,
}

impl Default for AttrTrainConfig {
    fn default() -> Self {
        Self {
            task: ToyTask::Shapes,
            count: 1000,
            resolution: 32,
            width: 16,
            fit: FitOptions {
                epochs: 5,
                batch_size: 32,
                lr: 3e-3,
                seed: 0,
            },
        }
    }
}

/// Trains a two-class (`x` = 0, `y` = 1) classifier on freshly drawn toy
/// domains and returns it with its accuracy on an independent draw.
pub fn train_attribute_classifier(cfg: &AttrTrainConfig) -> Result<(AttributeClassifier, f64)> {
    let seed = cfg.fit.seed;
    let labelled = |seed: u64, count: usize| -> Result<(Tensor, Vec<u32>)> {
        let (x, y) = synth_toy_domains(cfg.task, count, cfg.resolution, seed)?;
        let images = Tensor::cat(&[x.to_tensor()?, y.to_tensor()?], 0)?;
        let labels = std::iter::repeat_n(0, x.len()).chain(std::iter::repeat_n(1, y.len())).collect();
        Ok((images, labels))
    };
    let (train_x, train_y) = labelled(seed ^ 0xa77_0001, cfg.count)?;
    let mut clf = AttributeClassifier::untrained(cfg.width, cfg.resolution, vec!["x".into(), "y".into()], seed)?;
    clf.net.fit(&train_x, &train_y, &cfg.fit)?;
    clf.net = clf.net.frozen();
    let (test_x, test_y) = labelled(seed ^ 0xa77_0002, 200)?;
    let (_, acc) = score(&clf.log_probs(&test_x)?, &test_y)?;
    Ok((clf, acc))
}

/// Mean negative log-likelihood of class `target` over `images`.
pub fn attribute_logloss(clf: &AttributeClassifier, images: &Tensor, target: u32) -> Result<AttributeScore> {
    if target as usize >= clf.labels().len() {
        return Err(Error::config(
            "eval.attr_target",
            format!("class {target} unknown to a classifier over {:?}", clf.labels()),
        ));
    }
    let n = images.dim(0)?;
    if n == 0 {
        return Err(Error::Data("no images to score".into()));
    }
    let labels = vec![target; n];
    let (mean_nll, _) = score(&clf.log_probs(images)?, &labels)?;
    Ok(AttributeScore { mean_nll, count: n })
}

/// Runs `g` over `images` in batches without tracking gradients.
pub fn translate_all(g: &Generator, images: &Tensor, batch: usize) -> Result<Tensor> {
    let n = images.dim(0)?;
    let mut parts = Vec::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        parts.push(g.translate(&images.narrow(0, start, len)?, Track::InputOnly)?.detach());
        start += len;
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// One exported metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub name: String,
    pub value: f64,
    pub config_hash: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub details: serde_json::Value,
}

impl MetricRecord {
    pub fn new(name: &str, value: f64, config_hash: &str) -> Self {
        let timestamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Self {
            name: name.to_string(),
            value,
            config_hash: config_hash.to_string(),
            timestamp,
            details: serde_json::Value::Null,
        }
    }

    pub fn with_details(mut self, details: serde_json::Value) -> Self {
        self.details = details;
        self
    }
}

/// Writes one JSON record per line.
pub fn export_metrics(records: &[MetricRecord], path: &Path) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Inputs on the top row, outputs below, one column per pair.
pub fn montage(inputs: &Tensor, outputs: &Tensor) -> Result<RgbImage> {
    if inputs.dims() != outputs.dims() {
        return Err(Error::Shape(format!(
            "montage rows differ: {:?} vs {:?}",
            inputs.dims(),
            outputs.dims()
        )));
    }
    let top = tensor_to_images(inputs)?;
    let bottom = tensor_to_images(outputs)?;
    let (w, h) = top.first().map(|i| i.dimensions()).unwrap_or((0, 0));
    let mut grid = RgbImage::new(w * top.len() as u32, h * 2);
    for (i, (a, b)) in top.iter().zip(&bottom).enumerate() {
        let x = i as i64 * w as i64;
        image::imageops::replace(&mut grid, a, x, 0);
        image::imageops::replace(&mut grid, b, x, h as i64);
    }
    Ok(grid)
}

pub fn save_montage(inputs: &Tensor, outputs: &Tensor, path: &Path) -> Result<()> {
    montage(inputs, outputs)?
        .save(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(n: usize, seed: u64) -> Tensor {
        let mut init = Init::new(seed);
        init.uniform(&[n, 3, 16, 16], 1.0).unwrap()
    }

    #[test]
    fn untrained_classifier_is_uniform() {
        let clf = AttributeClassifier::untrained(4, 16, vec!["a".into(), "b".into(), "c".into()], 3).unwrap();
        let s = attribute_logloss(&clf, &noise(5, 1), 2).unwrap();
        assert!((s.mean_nll - 3f64.ln()).abs() < 1e-6);
        assert_eq!(s.count, 5);
    }

    #[test]
    fn unknown_class_rejected() {
        let clf = AttributeClassifier::untrained(4, 16, vec!["a".into(), "b".into()], 3).unwrap();
        assert!(matches!(
            attribute_logloss(&clf, &noise(2, 1), 2),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn c2st_rejects_small_sets() {
        let cfg = C2STConfig {
            min_per_side: 10,
            ..Default::default()
        };
        assert!(matches!(c2st(&noise(9, 0), &noise(10, 1), &cfg), Err(Error::Data(_))));
    }

    #[test]
    fn config_hash_tracks_settings() {
        let a = C2STConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.epochs += 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn montage_layout() {
        let x = noise(8, 0).upsample_nearest2d(32, 32).unwrap();
        let m = montage(&x, &x).unwrap();
        assert_eq!(m.dimensions(), (8 * 32, 2 * 32));
    }

    #[test]
    fn metrics_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        export_metrics(&[], &path).unwrap();
        assert!(read_metrics(&path).unwrap().is_empty());
        let r = C2STResult {
            log_loss: 0.5,
            accuracy: 0.7,
            n_train: 4,
            n_test: 4,
            config_hash: "c".into(),
        };
        let recs = vec![r.record("h"), r.record("h")];
        export_metrics(&recs, &path).unwrap();
        assert_eq!(read_metrics(&path).unwrap(), recs);
    }
}
