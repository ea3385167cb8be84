//! Stand-in for an ILSVRC-pretrained trunk at toy scale: a small VGG-style
//! chain trained to classify procedural shapes.

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ArchDescriptor, LayerSpec, Normalization, ReferenceNet};
use crate::data::toy::{shape_classification_batch, ShapeKind};
use crate::error::Result;
use crate::nn::{self, HasParams, Init, Linear, Track};
use crate::optim::{Adam, AdamConfig};

/// Three-stage chain: conv(16) | pool conv(32) | pool conv(64), rectifiers
/// after every conv, max-pooling between stages.
pub fn toy_trunk_arch() -> ArchDescriptor {
    ArchDescriptor::new(
        "toy-vgg-shapes",
        vec![
            LayerSpec::conv(3, 16, 3),
            LayerSpec::Relu,
            LayerSpec::max_pool(),
            LayerSpec::conv(16, 32, 3),
            LayerSpec::Relu,
            LayerSpec::max_pool(),
            LayerSpec::conv(32, 64, 3),
            LayerSpec::Relu,
        ],
    )
    .expect("static descriptor is valid")
}

#[derive(Clone, Debug)]
pub struct TrunkPretrainConfig {
    pub resolution: u32,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TrunkPretrainConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            steps: 600,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

pub struct PretrainedTrunk {
    pub net: ReferenceNet,
    pub holdout_accuracy: f64,
}

fn channel_stats(batch: &Tensor) -> Result<Normalization> {
    // batch is in [-1, 1]; statistics are taken in [0, 1]
    let x01 = ((batch + 1.0)? * 0.5)?;
    let mean = x01.mean_keepdim(0)?.mean_keepdim(2)?.mean_keepdim(3)?;
    let var = x01.broadcast_sub(&mean)?.sqr()?.mean(0)?.mean(1)?.mean(1)?;
    Ok(Normalization {
        mean: mean.flatten_all()?.to_vec1::<f32>()?,
        scale: var.sqrt()?.to_vec1::<f32>()?,
    })
}

/// Trains `arch` plus a linear probe on the shape classes and returns the
/// frozen trunk (probe discarded) with its input statistics.
pub fn pretrain_trunk(arch: &ArchDescriptor, cfg: &TrunkPretrainConfig) -> Result<PretrainedTrunk> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (sample, _) = shape_classification_batch(&mut rng, 256, cfg.resolution)?;
    let mut net = ReferenceNet::random(arch, cfg.seed, true)?;
    net.set_normalization(channel_stats(&sample)?);

    let classes = ShapeKind::ALL.len();
    let mut init = Init::new(cfg.seed.wrapping_add(1));
    let probe = Linear::init(&mut init, arch.channels_before(arch.layers.len()), classes, 0.01)?;
    let mut vars = net.trainable_vars();
    vars.extend(probe.named_params().into_iter().filter_map(|(n, p)| {
        p.var().cloned().map(|v| (format!("probe.{n}"), v))
    }));
    let mut opt = Adam::new(
        vars,
        AdamConfig {
            lr: cfg.lr,
            beta1: 0.9,
            ..Default::default()
        },
    )?;
    let logits_of = |net: &ReferenceNet, x: &Tensor, track: Track| -> Result<Tensor> {
        let x = net.normalization().apply_to_signed(x)?;
        let h = nn::global_mean(&net.forward(&x, track)?)?;
        probe.forward(&h, track)
    };
    for step in 0..cfg.steps {
        let (x, y) = shape_classification_batch(&mut rng, cfg.batch_size, cfg.resolution)?;
        let loss = nn::cross_entropy(&logits_of(&net, &x, Track::Params)?, &y)?;
        if step % 100 == 0 {
            log::debug!("trunk pretrain step {step}: loss {:.4}", nn::scalar(&loss)?);
        }
        opt.step(&loss.backward()?)?;
    }

    let mut eval_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let (x, y) = shape_classification_batch(&mut eval_rng, 512, cfg.resolution)?;
    let pred = logits_of(&net, &x, Track::InputOnly)?
        .argmax(1)?
        .to_dtype(DType::U32)?
        .to_vec1::<u32>()?;
    let correct = pred.iter().zip(&y).filter(|(a, b)| a == b).count();
    net = net.frozen();
    Ok(PretrainedTrunk {
        net,
        holdout_accuracy: correct as f64 / y.len() as f64,
    })
}
