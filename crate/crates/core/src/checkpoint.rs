//! Name-keyed checkpoint containers and the step-numbered checkpoint
//! directory.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::config::{Config, TrainMode};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::nn::{self, HasParams, NamedParams};
use crate::refnet::ArchDescriptor;
use crate::refnet::{ReferenceNet, WeightsManifest};
use crate::trainer::{sub_seed, TrainState};

const META_KEY: &str = "checkpoint";

/// Everything stored next to the tensors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub config_hash: String,
    pub version: String,
    pub config: String,
    pub trunk_checksum: String,
    pub trunk_arch: String,
    pub trunk_manifest: WeightsManifest,
    pub adam_steps: HashMap<String, u64>,
    pub running: std::collections::BTreeMap<String, f64>,
}

/// Tensors plus metadata of one checkpoint file.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: HashMap<String, Tensor>,
}

impl Checkpoint {
    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, st_meta) = safetensors::SafeTensors::read_metadata(&bytes)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        let raw = st_meta
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint(format!("{}: no checkpoint metadata", path.display())))?;
        let meta: CheckpointMeta = serde_json::from_str(raw)
            .map_err(|e| Error::Checkpoint(format!("{}: bad metadata: {e}", path.display())))?;
        let tensors = candle_core::safetensors::load_buffer(&bytes, &Device::Cpu)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        Ok(Self { meta, tensors })
    }

    pub fn config(&self) -> Result<Config> {
        Config::from_toml(&self.meta.config)
    }

    /// Tensors under `prefix.` with the prefix stripped.
    pub fn scoped(&self, prefix: &str) -> HashMap<String, Tensor> {
        let p = format!("{prefix}.");
        self.tensors
            .iter()
            .filter_map(|(k, v)| k.strip_prefix(&p).map(|s| (s.to_string(), v.clone())))
            .collect()
    }

    /// The frozen trunk stored in the checkpoint, verified against its
    /// recorded checksum.
    pub fn trunk(&self) -> Result<ReferenceNet> {
        let desc = ArchDescriptor::parse(&self.meta.trunk_arch)?;
        let m = &self.meta.trunk_manifest;
        let mut net = ReferenceNet::from_params(&desc, &self.scoped("trunk"), m.normalization.clone())?;
        if m.surgery {
            net = net.with_surgery_record(m.replacements.clone());
        }
        let sum = nn::params_checksum(&net.named_params())?;
        if sum != self.meta.trunk_checksum {
            return Err(Error::Checkpoint("stored trunk does not match its checksum".into()));
        }
        Ok(net)
    }
}

fn assign_all(params: NamedParams, tensors: &HashMap<String, Tensor>) -> Result<()> {
    for (name, mut p) in params {
        if !p.is_trainable() {
            continue;
        }
        let t = tensors
            .get(&name)
            .ok_or_else(|| Error::MissingKey(name.clone()))?;
        if t.dims() != p.value().dims() {
            return Err(Error::ShapeMismatch {
                name,
                expected: p.value().dims().to_vec(),
                found: t.dims().to_vec(),
            });
        }
        p.assign(t)?;
    }
    Ok(())
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    for (n, p) in state.generator_params().into_iter().chain(state.discriminator_params()) {
        if p.is_trainable() {
            tensors.push((n, p.value().clone()));
        }
    }
    let trunk = state.trunk().frozen();
    for (n, p) in trunk.named_params() {
        tensors.push((nn::join("trunk", &n), p.value().clone()));
    }
    for (group, opt) in [("opt_pre", &state.opt_pre), ("opt_g", &state.opt_g), ("opt_d", &state.opt_d)] {
        for (n, t) in opt.state_tensors() {
            tensors.push((nn::join(group, &n), t));
        }
    }
    let meta = CheckpointMeta {
        step: state.step,
        config_hash: state.config.hash(),
        version: crate::VERSION.to_string(),
        config: state.config.to_toml(),
        trunk_checksum: nn::params_checksum(&trunk.named_params())?,
        trunk_arch: trunk.desc().to_text(),
        trunk_manifest: trunk.manifest(),
        adam_steps: [
            ("opt_pre".to_string(), state.opt_pre.steps()),
            ("opt_g".to_string(), state.opt_g.steps()),
            ("opt_d".to_string(), state.opt_d.steps()),
        ]
        .into_iter()
        .collect(),
        running: state.running.clone(),
    };
    let md: HashMap<String, String> = [(META_KEY.to_string(), serde_json::to_string(&meta)?)].into();
    // write-then-rename so a crash never leaves a truncated container
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(md), &tmp)?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Restores a training state. The stored config hash must equal
/// `cfg.hash()` unless `allow_config_change` is set, in which case `cfg`
/// wins and parameters must still fit it.
pub fn load_checkpoint(path: &Path, cfg: &Config, allow_config_change: bool) -> Result<TrainState> {
    let ck = Checkpoint::read(path)?;
    if ck.meta.config_hash != cfg.hash() && !allow_config_change {
        return Err(Error::Checkpoint(format!(
            "config hash {} differs from checkpoint {}; pass the override flag to load anyway",
            &cfg.hash()[..12],
            &ck.meta.config_hash[..12.min(ck.meta.config_hash.len())]
        )));
    }
    restore(&ck, cfg)
}

fn restore(ck: &Checkpoint, cfg: &Config) -> Result<TrainState> {
    let trunk = ck.trunk()?;
    let mut state = TrainState::new(cfg, &trunk)?;
    assign_all(state.generator_params(), &ck.tensors)?;
    assign_all(state.discriminator_params(), &ck.tensors)?;
    let steps = |k: &str| ck.meta.adam_steps.get(k).copied().unwrap_or(0);
    for (group, opt) in [
        ("opt_pre", &mut state.opt_pre),
        ("opt_g", &mut state.opt_g),
        ("opt_d", &mut state.opt_d),
    ] {
        let scoped = ck.scoped(group);
        opt.load_state(steps(group), |k| scoped.get(k).cloned())?;
    }
    state.step = ck.meta.step;
    state.running = ck.meta.running.clone();
    Ok(state)
}

/// Generators of a checkpoint with the config they were trained under.
pub struct GeneratorSet {
    pub config: Config,
    pub step: u64,
    pub g_xy: Generator,
    pub g_yx: Option<Generator>,
}

/// Loads only the generators, without rebuilding trunk or discriminators.
pub fn load_generators(path: &Path) -> Result<GeneratorSet> {
    let ck = Checkpoint::read(path)?;
    let cfg = ck.config()?;
    let seed = cfg.train.seed;
    let build = |tag: &str| -> Result<Generator> {
        let g = Generator::build(&cfg.generator.net(), cfg.data.resolution, sub_seed(seed, tag))?;
        let mut named = Vec::new();
        g.collect_params(tag, &mut named);
        assign_all(named, &ck.tensors)?;
        Ok(g)
    };
    let g_xy = build("g_xy")?;
    let g_yx = match cfg.train.mode {
        TrainMode::Cycle => Some(build("g_yx")?),
        TrainMode::Single => None,
    };
    Ok(GeneratorSet {
        step: ck.meta.step,
        config: cfg,
        g_xy,
        g_yx,
    })
}

/// `step_NNNNNN.safetensors` files plus a `latest` pointer.
#[derive(Clone, Debug)]
pub struct CheckpointDir {
    root: PathBuf,
}

impl CheckpointDir {
    pub fn create(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        Ok(Self { root: root.to_path_buf() })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn step_path(&self, step: u64) -> PathBuf {
        self.root.join(format!("step_{step:06}.safetensors"))
    }

    pub fn save(&self, state: &TrainState) -> Result<PathBuf> {
        let path = self.step_path(state.step);
        save_checkpoint(state, &path)?;
        let name = path.file_name().expect("file name").to_string_lossy().to_string();
        let ptr = self.root.join("latest");
        std::fs::write(&ptr, format!("{name}\n")).map_err(|e| Error::io(&ptr, e))?;
        Ok(path)
    }

    /// Path named by `latest`, if any.
    pub fn latest(&self) -> Result<Option<PathBuf>> {
        let ptr = self.root.join("latest");
        match std::fs::read_to_string(&ptr) {
            Ok(s) => Ok(Some(self.root.join(s.trim()))),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::io(&ptr, e)),
        }
    }
}

/// Accepts a checkpoint file, a checkpoint directory or a run directory.
pub fn resolve_checkpoint_path(p: &Path) -> Result<PathBuf> {
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    for dir in [p.to_path_buf(), p.join("checkpoints")] {
        if dir.join("latest").is_file() {
            if let Some(l) = (CheckpointDir { root: dir }).latest()? {
                return Ok(l);
            }
        }
    }
    Err(Error::Checkpoint(format!("no checkpoint found at {}", p.display())))
}
