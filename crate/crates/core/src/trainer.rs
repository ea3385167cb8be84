//! Generator pretraining and alternating adversarial training in single and
//! cycle modes.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, CheckpointDir};
use crate::config::{Config, TrainMode};
use crate::data::toy::{synth_toy_domains, ToyTask};
use crate::data::{load_domain, Domain, DomainDataset, PreprocessSpec};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{self, HasParams, NamedParams, Track};
use crate::objectives::{self, LossReport};
use crate::optim::Adam;
use crate::percdisc::{DiscMode, PerceptualDiscriminator};
use crate::refnet::ArchDescriptor;
use crate::refnet::pretrain::{pretrain_trunk, toy_trunk_arch, TrunkPretrainConfig};
use crate::refnet::{load_reference_weights, ReferenceNet};

/// Running-average smoothing for reported losses.
const EMA: f64 = 0.02;

/// Deterministic child seed for a named component.
pub fn sub_seed(seed: u64, tag: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(tag.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Batch sampler state for one step; independent of anything sampled
/// before, so resumed runs see the same batches.
pub fn batch_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(seed, "batches"));
    rng.set_stream(step);
    rng
}

pub fn builtin_arch(name: &str) -> Result<ArchDescriptor> {
    match name {
        "toy-vgg-shapes" => Ok(toy_trunk_arch()),
        "vgg19" => Ok(ArchDescriptor::vgg19()),
        other => Err(Error::config(
            "discriminator.trunk",
            format!("unknown built-in trunk `{other}` (toy-vgg-shapes | vgg19)"),
        )),
    }
}

/// The trunk requested by the discriminator section, surgery applied if
/// configured.
pub fn resolve_trunk(cfg: &Config) -> Result<ReferenceNet> {
    let d = &cfg.discriminator;
    let desc = if d.trunk_arch.is_empty() {
        builtin_arch(&d.trunk)?
    } else {
        ArchDescriptor::from_file(Path::new(&d.trunk_arch))?
    };
    let seed = sub_seed(cfg.train.seed, "trunk");
    let net = if !d.trunk_weights.is_empty() {
        if d.mode != DiscMode::Perceptual {
            log::warn!("discriminator.trunk_weights ignored in {:?} mode", d.mode);
            ReferenceNet::random(&desc, seed, false)?
        } else {
            load_reference_weights(Path::new(&d.trunk_weights), &desc)?
        }
    } else {
        match d.mode {
            DiscMode::Perceptual if desc.source == "toy-vgg-shapes" => {
                let pre = pretrain_trunk(
                    &desc,
                    &TrunkPretrainConfig {
                        resolution: cfg.data.resolution,
                        steps: d.trunk_pretrain_steps,
                        seed,
                        ..Default::default()
                    },
                )?;
                log::info!("toy trunk hold-out accuracy {:.3}", pre.holdout_accuracy);
                pre.net
            }
            DiscMode::Perceptual => {
                return Err(Error::config(
                    "discriminator.trunk_weights",
                    format!("perceptual mode with trunk `{}` needs prepared weights", desc.source),
                ))
            }
            DiscMode::Plain | DiscMode::RandomTrunk => ReferenceNet::random(&desc, seed, false)?,
        }
    };
    if d.surgery && !net.is_surgically_modified() {
        net.apply_surgery()
    } else {
        Ok(net)
    }
}

/// Unaligned source (X) and target (Y) image sets.
#[derive(Clone, Debug)]
pub struct Domains {
    pub x: DomainDataset,
    pub y: DomainDataset,
}

impl Domains {
    pub fn load(cfg: &Config) -> Result<Self> {
        let d = &cfg.data;
        let (x, y) = match cfg.data_root() {
            Some(root) => {
                let mut spec = PreprocessSpec::new(d.resolution);
                spec.crop = (d.crop > 0).then_some(d.crop);
                spec.flip = d.flip;
                (
                    load_domain(&root.join(Domain::X.dir_name()), Domain::X, spec.clone(), d.strict)?,
                    load_domain(&root.join(Domain::Y.dir_name()), Domain::Y, spec, d.strict)?,
                )
            }
            None => {
                let task: ToyTask = d.toy_task.parse()?;
                let (x, y) = synth_toy_domains(task, d.toy_count, d.resolution, d.toy_seed)?;
                (x.with_flip(d.flip), y.with_flip(d.flip))
            }
        };
        Ok(Self { x, y })
    }

    /// `n` images drawn uniformly from the union of both domains.
    pub fn union_batch<R: Rng>(&self, n: usize, rng: &mut R) -> Result<Tensor> {
        let (lx, ly) = (self.x.len(), self.y.len());
        let mut parts = Vec::with_capacity(n);
        for _ in 0..n {
            let j = rng.random_range(0..lx + ly);
            parts.push(if j < lx {
                self.x.tensor_of(&[j])?
            } else {
                self.y.tensor_of(&[j - lx])?
            });
        }
        Ok(Tensor::cat(&parts, 0)?)
    }
}

fn vars_of(prefix: &str, params: NamedParams) -> Vec<(String, Var)> {
    params
        .into_iter()
        .filter_map(|(n, p)| p.var().cloned().map(|v| (nn::join(prefix, &n), v)))
        .collect()
}

pub struct TrainState {
    pub config: Config,
    /// Global counter: pretraining steps first, then adversarial steps.
    pub step: u64,
    /// Forward generator `X -> Y`.
    pub g_xy: Generator,
    /// Backward generator `Y -> X` (cycle mode).
    pub g_yx: Option<Generator>,
    /// Discriminator on the target domain.
    pub d_y: PerceptualDiscriminator,
    /// Discriminator on the source domain (cycle mode).
    pub d_x: Option<PerceptualDiscriminator>,
    pub opt_pre: Adam,
    pub opt_g: Adam,
    pub opt_d: Adam,
    pub running: BTreeMap<String, f64>,
}

impl TrainState {
    pub fn new(cfg: &Config, trunk: &ReferenceNet) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let res = cfg.data.resolution;
        let gcfg = cfg.generator.net();
        let arch = cfg.discriminator.arch();
        let mode = cfg.discriminator.mode;
        let cycle = cfg.train.mode == TrainMode::Cycle;
        let g_xy = Generator::build(&gcfg, res, sub_seed(seed, "g_xy"))?;
        let d_y = PerceptualDiscriminator::build(&arch, mode, trunk.clone(), sub_seed(seed, "d_y"))?;
        let (g_yx, d_x) = if cycle {
            (
                Some(Generator::build(&gcfg, res, sub_seed(seed, "g_yx"))?),
                Some(PerceptualDiscriminator::build(&arch, mode, trunk.clone(), sub_seed(seed, "d_x"))?),
            )
        } else {
            (None, None)
        };
        let mut state = Self {
            config: cfg.clone(),
            step: 0,
            g_xy,
            g_yx,
            d_y,
            d_x,
            opt_pre: Adam::new(Vec::new(), cfg.train.pretrain_adam())?,
            opt_g: Adam::new(Vec::new(), cfg.train.adam())?,
            opt_d: Adam::new(Vec::new(), cfg.train.adam())?,
            running: BTreeMap::new(),
        };
        let g_vars = vars_of("", state.generator_params());
        state.opt_pre = Adam::new(g_vars.clone(), cfg.train.pretrain_adam())?;
        state.opt_g = Adam::new(g_vars, cfg.train.adam())?;
        state.opt_d = Adam::new(vars_of("", state.discriminator_params()), cfg.train.adam())?;
        log::info!(
            "generator params {}, discriminator trainable params {}",
            state.g_xy.trainable_count(),
            state.d_y.trainable_count()
        );
        Ok(state)
    }

    pub fn is_cycle(&self) -> bool {
        self.g_yx.is_some()
    }

    pub fn generators(&self) -> Vec<(&'static str, &Generator)> {
        let mut v = vec![("g_xy", &self.g_xy)];
        if let Some(g) = &self.g_yx {
            v.push(("g_yx", g));
        }
        v
    }

    pub fn discriminators(&self) -> Vec<(&'static str, &PerceptualDiscriminator)> {
        let mut v = vec![("d_y", &self.d_y)];
        if let Some(d) = &self.d_x {
            v.push(("d_x", d));
        }
        v
    }

    /// Every generator parameter, keyed `g_xy.*` / `g_yx.*`.
    pub fn generator_params(&self) -> NamedParams {
        let mut out = Vec::new();
        for (name, g) in self.generators() {
            g.collect_params(name, &mut out);
        }
        out
    }

    /// Every discriminator parameter, keyed `d_y.*` / `d_x.*` (trunks
    /// included, frozen or not).
    pub fn discriminator_params(&self) -> NamedParams {
        let mut out = Vec::new();
        for (name, d) in self.discriminators() {
            d.collect_params(name, &mut out);
        }
        out
    }

    /// The shared trunk of the target-domain discriminator.
    pub fn trunk(&self) -> &ReferenceNet {
        self.d_y.trunk()
    }

    pub fn trunk_checksum(&self) -> Result<String> {
        nn::params_checksum(&self.trunk().named_params())
    }

    fn update_running(&mut self, report: &LossReport) {
        let mut put = |k: &str, v: f64| {
            self.running
                .entry(k.to_string())
                .and_modify(|r| *r += EMA * (v - *r))
                .or_insert(v);
        };
        for (k, v) in &report.components {
            put(k, *v);
        }
        put("total_G", report.total_g);
        put("total_D", report.total_d);
    }
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::NonFinite(term) => Error::Divergence {
            step,
            term,
            last_checkpoint: None,
        },
        other => other,
    }
}

/// One autoencoder step for every generator on a union batch.
fn pretrain_step(state: &mut TrainState, data: &Domains) -> Result<f64> {
    let cfg = &state.config.train;
    let mut rng = batch_rng(cfg.seed, state.step);
    let mut total: Option<Tensor> = None;
    for (name, g) in state.generators() {
        let x = data.union_batch(cfg.pretrain_batch_size, &mut rng)?;
        let term = objectives::reconstruction_loss(&x, &g.translate(&x, Track::Params)?)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFinite(format!("recon({name})")),
                other => other,
            })?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    let total = total.expect("at least one generator");
    let grads = total.backward()?;
    state.opt_pre.step(&grads)?;
    Ok(nn::scalar(&total)? / state.generators().len() as f64)
}

/// Autoencoder pretraining of every generator on the union of both domains
/// until the counter reaches the configured pretraining length. Returns the
/// running-average reconstruction loss.
pub fn pretrain_generator(
    state: &mut TrainState,
    data: &Domains,
    mut on_step: impl FnMut(&TrainState, f64) -> Result<()>,
) -> Result<f64> {
    let target = state.config.train.pretrain_steps as u64;
    if target == 0 {
        return Err(Error::config("train.pretrain_steps", "pretraining needs at least one step"));
    }
    while state.step < target {
        let loss = pretrain_step(state, data).map_err(|e| diverged(state.step, e))?;
        let mut r = LossReport::new(state.config.lambda_id(), state.config.losses.lambda_cyc);
        r.add("recon", loss)?;
        state.update_running(&r);
        state.step += 1;
        on_step(state, loss)?;
    }
    Ok(state.running.get("recon").copied().unwrap_or(f64::NAN))
}

/// Gradients of the discriminator objective. Generator outputs are detached.
pub fn discriminator_grads(state: &TrainState, bx: &Tensor, by: &Tensor) -> Result<(GradStore, f64)> {
    let f = state.config.formulation();
    let fake_y = state.g_xy.translate(bx, Track::InputOnly)?.detach();
    let mut loss = objectives::adv_discriminator_loss(
        &state.d_y.discriminate(by, Track::Params)?,
        &state.d_y.discriminate(&fake_y, Track::Params)?,
        &f,
    )?;
    if let (Some(g_yx), Some(d_x)) = (&state.g_yx, &state.d_x) {
        let fake_x = g_yx.translate(by, Track::InputOnly)?.detach();
        let l = objectives::adv_discriminator_loss(
            &d_x.discriminate(bx, Track::Params)?,
            &d_x.discriminate(&fake_x, Track::Params)?,
            &f,
        )?;
        loss = (loss + l)?;
    }
    let value = nn::scalar(&loss)?;
    Ok((loss.backward()?, value))
}

/// Gradients of the generator objective with discriminators held fixed.
/// Fills the generator-side components of `report`.
pub fn generator_grads(
    state: &TrainState,
    bx: &Tensor,
    by: &Tensor,
    report: &mut LossReport,
) -> Result<GradStore> {
    let f = state.config.formulation();
    let lambda_id = state.config.lambda_id();
    let lambda_cyc = state.config.losses.lambda_cyc;
    let mut terms: Vec<(&str, Tensor)> = Vec::new();

    let fake_y = state.g_xy.translate(bx, Track::Params)?;
    terms.push((
        "adv_G",
        objectives::adv_generator_loss(&state.d_y.discriminate(&fake_y, Track::InputOnly)?, &f)?,
    ));
    if lambda_id > 0.0 {
        let gy = state.g_xy.translate(by, Track::Params)?;
        terms.push(("identity", objectives::identity_loss(by, &gy, lambda_id)?));
    } else {
        report.add("identity", 0.0)?;
    }
    if let (Some(g_yx), Some(d_x)) = (&state.g_yx, &state.d_x) {
        let fake_x = g_yx.translate(by, Track::Params)?;
        terms.push(("adv_G", objectives::adv_generator_loss(&d_x.discriminate(&fake_x, Track::InputOnly)?, &f)?));
        if lambda_id > 0.0 {
            let gx = g_yx.translate(bx, Track::Params)?;
            terms.push(("identity", objectives::identity_loss(bx, &gx, lambda_id)?));
        }
        if lambda_cyc > 0.0 {
            let x_cyc = g_yx.translate(&fake_y, Track::Params)?;
            let y_cyc = state.g_xy.translate(&fake_x, Track::Params)?;
            terms.push(("cycle_fwd", objectives::cycle_loss(bx, &x_cyc, lambda_cyc)?));
            terms.push(("cycle_bwd", objectives::cycle_loss(by, &y_cyc, lambda_cyc)?));
        } else {
            report.add("cycle_fwd", 0.0)?;
            report.add("cycle_bwd", 0.0)?;
        }
    }
    let mut total: Option<Tensor> = None;
    for (name, t) in terms {
        report.add(name, nn::scalar(&t)?)?;
        total = Some(match total {
            Some(acc) => (acc + t)?,
            None => t,
        });
    }
    Ok(total.expect("adversarial term present").backward()?)
}

fn adversarial_step(state: &mut TrainState, bx: &Tensor, by: &Tensor) -> Result<LossReport> {
    let step = state.step;
    let mut report = LossReport::new(state.config.lambda_id(), state.config.losses.lambda_cyc);
    let (d_grads, d_loss) = discriminator_grads(state, bx, by).map_err(|e| diverged(step, e))?;
    report.add("adv_D", d_loss).map_err(|e| diverged(step, e))?;
    state.opt_d.step(&d_grads)?;
    drop(d_grads);
    let g_grads = generator_grads(state, bx, by, &mut report).map_err(|e| diverged(step, e))?;
    state.opt_g.step(&g_grads)?;
    state.update_running(&report);
    state.step += 1;
    Ok(report)
}

/// One discriminator update then one generator update (adversarial plus
/// identity terms).
pub fn train_step_single(state: &mut TrainState, bx: &Tensor, by: &Tensor) -> Result<LossReport> {
    if state.is_cycle() {
        return Err(Error::config("train.mode", "state was built for cycle mode"));
    }
    adversarial_step(state, bx, by)
}

/// Both discriminators, then both generators with adversarial, cycle and
/// identity terms.
pub fn train_step_cycle(state: &mut TrainState, bx: &Tensor, by: &Tensor) -> Result<LossReport> {
    if !state.is_cycle() {
        return Err(Error::config("train.mode", "state was built for single mode"));
    }
    adversarial_step(state, bx, by)
}

/// Samples the step's batches and runs the configured step kind.
pub fn train_step(state: &mut TrainState, data: &Domains) -> Result<LossReport> {
    let mut rng = batch_rng(state.config.train.seed, state.step);
    let n = state.config.train.batch_size;
    let bx = data.x.next_batch(n, &mut rng)?;
    let by = data.y.next_batch(n, &mut rng)?;
    match state.config.train.mode {
        TrainMode::Single => train_step_single(state, &bx, &by),
        TrainMode::Cycle => train_step_cycle(state, &bx, &by),
    }
}

/// One JSON line for the log stream.
pub fn log_record(phase: &str, step: u64, report: &LossReport) -> serde_json::Value {
    let mut rec = json!({ "phase": phase, "step": step });
    let obj = rec.as_object_mut().expect("object");
    for (k, v) in &report.components {
        obj.insert(k.clone(), json!(v));
    }
    if phase == "adversarial" {
        obj.insert("total_G".into(), json!(report.total_g));
        obj.insert("total_D".into(), json!(report.total_d));
    }
    rec
}

/// Drives pretraining and adversarial training with checkpoints under
/// `out_dir/checkpoints` and a `log.jsonl` stream.
pub struct Runner {
    pub state: TrainState,
    pub data: Domains,
    pub dir: CheckpointDir,
    log: std::io::BufWriter<std::fs::File>,
    last_checkpoint: Option<PathBuf>,
}

impl Runner {
    pub fn new(state: TrainState, data: Domains, out_dir: &Path) -> Result<Self> {
        let dir = CheckpointDir::create(&out_dir.join("checkpoints"))?;
        let log_path = out_dir.join("log.jsonl");
        let file = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let last_checkpoint = dir.latest()?;
        Ok(Self {
            state,
            data,
            dir,
            log: std::io::BufWriter::new(file),
            last_checkpoint,
        })
    }

    fn write_log(&mut self, rec: serde_json::Value) -> Result<()> {
        let path = self.dir.root().to_path_buf();
        writeln!(self.log, "{rec}").map_err(|e| Error::io(&path, e))?;
        self.log.flush().map_err(|e| Error::io(&path, e))
    }

    fn with_checkpoint(&self, e: Error) -> Error {
        match e {
            Error::Divergence { step, term, .. } => Error::Divergence {
                step,
                term,
                last_checkpoint: self.last_checkpoint.clone(),
            },
            other => other,
        }
    }

    pub fn checkpoint(&mut self) -> Result<PathBuf> {
        let p = self.dir.save(&self.state)?;
        self.last_checkpoint = Some(p.clone());
        Ok(p)
    }

    /// Runs whatever remains of pretraining and adversarial training.
    pub fn run(&mut self) -> Result<()> {
        let t = self.state.config.train.clone();
        let pre = t.pretrain_steps as u64;
        let log_every = t.log_every.max(1) as u64;
        while self.state.step < pre {
            let loss = match pretrain_step(&mut self.state, &self.data) {
                Ok(l) => l,
                Err(e) => return Err(self.with_checkpoint(diverged(self.state.step, e))),
            };
            let mut r = LossReport::new(self.state.config.lambda_id(), self.state.config.losses.lambda_cyc);
            r.add("recon", loss)?;
            self.state.update_running(&r);
            self.state.step += 1;
            if self.state.step % log_every == 0 || self.state.step == pre {
                self.write_log(log_record("pretrain", self.state.step, &r))?;
            }
        }
        let end = pre + t.steps as u64;
        while self.state.step < end {
            let report = match train_step(&mut self.state, &self.data) {
                Ok(r) => r,
                Err(e) => return Err(self.with_checkpoint(e)),
            };
            let adv = self.state.step - pre;
            if adv % log_every == 0 || self.state.step == end {
                self.write_log(log_record("adversarial", self.state.step, &report))?;
            }
            if t.checkpoint_every > 0 && adv % t.checkpoint_every as u64 == 0 && self.state.step < end {
                self.checkpoint()?;
            }
        }
        self.checkpoint()?;
        Ok(())
    }
}

/// Builds (or resumes) a run and trains it to completion.
pub fn run_training(cfg: &Config, out_dir: &Path, resume: Option<&Path>, allow_config_change: bool) -> Result<TrainState> {
    let data = Domains::load(cfg)?;
    let state = match resume {
        Some(p) => checkpoint::load_checkpoint(p, cfg, allow_config_change)?,
        None => TrainState::new(cfg, &resolve_trunk(cfg)?)?,
    };
    let mut runner = Runner::new(state, data, out_dir)?;
    runner.run()?;
    Ok(runner.state)
}
