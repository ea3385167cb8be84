//! Run configuration: one TOML file with `[data] [generator] [discriminator]
//! [losses] [train] [eval]` sections plus `section.key=value` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::toy::ToyTask;
use crate::error::{Error, Result};
use crate::generator::{GeneratorConfig, NormKind};
use crate::objectives::{AdversarialFormulation, AdversarialKind};
use crate::optim::AdamConfig;
use crate::percdisc::{DiscMode, DiscriminatorArch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `domainX/` and `domainY/`; empty selects the toy task.
    pub root: String,
    pub toy_task: String,
    pub toy_count: usize,
    pub toy_seed: u64,
    pub resolution: u32,
    /// Center crop before resizing; 0 disables.
    pub crop: u32,
    pub flip: bool,
    pub strict: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            root: String::new(),
            toy_task: "shapes".into(),
            toy_count: 2000,
            toy_seed: 0,
            resolution: 32,
            crop: 0,
            flip: false,
            strict: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorSection {
    pub downsamplings: usize,
    pub res_blocks: usize,
    pub width: usize,
    pub norm: NormKind,
}

impl Default for GeneratorSection {
    fn default() -> Self {
        let g = GeneratorConfig::default();
        Self {
            downsamplings: g.downsamplings,
            res_blocks: g.res_blocks,
            width: g.width,
            norm: g.norm,
        }
    }
}

impl GeneratorSection {
    pub fn net(&self) -> GeneratorConfig {
        GeneratorConfig {
            downsamplings: self.downsamplings,
            res_blocks: self.res_blocks,
            width: self.width,
            norm: self.norm,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorSection {
    pub mode: DiscMode,
    /// Built-in trunk (`toy-vgg-shapes` or `vgg19`) used when
    /// `trunk_weights` is empty.
    pub trunk: String,
    /// Prepared trunk container; its manifest sits next to it.
    pub trunk_weights: String,
    /// Architecture file for `trunk_weights`; empty uses the built-in `trunk`.
    pub trunk_arch: String,
    /// Apply pool/rectifier surgery when loading.
    pub surgery: bool,
    /// Steps of the built-in toy trunk pretraining when no weights are given.
    pub trunk_pretrain_steps: usize,
    pub blocks: usize,
    pub combiner_widths: Vec<usize>,
    pub patch_levels: Vec<usize>,
    pub head_width: usize,
    pub patch_width: usize,
    pub epsilon: f64,
}

impl Default for DiscriminatorSection {
    fn default() -> Self {
        let a = DiscriminatorArch::default();
        Self {
            mode: DiscMode::Perceptual,
            trunk: "toy-vgg-shapes".into(),
            trunk_weights: String::new(),
            trunk_arch: String::new(),
            surgery: true,
            trunk_pretrain_steps: 600,
            blocks: 3,
            combiner_widths: a.combiner_widths,
            patch_levels: a.patch_levels,
            head_width: a.head_width,
            patch_width: a.patch_width,
            epsilon: a.epsilon,
        }
    }
}

impl DiscriminatorSection {
    pub fn arch(&self) -> DiscriminatorArch {
        DiscriminatorArch {
            blocks: self.blocks,
            combiner_widths: self.combiner_widths.clone(),
            patch_levels: self.patch_levels.clone(),
            head_width: self.head_width,
            patch_width: self.patch_width,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossesSection {
    #[serde(default = "default_adv")]
    pub adversarial: AdversarialKind,
    /// Required; no default is materialized.
    #[serde(default)]
    pub lambda_id: Option<f64>,
    #[serde(default = "default_lambda_cyc")]
    pub lambda_cyc: f64,
}

fn default_adv() -> AdversarialKind {
    AdversarialKind::NonSaturating
}

fn default_lambda_cyc() -> f64 {
    10.0
}

impl Default for LossesSection {
    fn default() -> Self {
        Self {
            adversarial: default_adv(),
            lambda_id: None,
            lambda_cyc: default_lambda_cyc(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// One generator and one discriminator, identity loss.
    Single,
    /// Two generators, two discriminators, cycle and identity losses.
    Cycle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub pretrain_lr: f64,
    pub batch_size: usize,
    pub pretrain_batch_size: usize,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub seed: u64,
    pub log_every: usize,
    /// 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Cycle,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            pretrain_lr: 1e-3,
            batch_size: 1,
            pretrain_batch_size: 4,
            pretrain_steps: 2000,
            steps: 5000,
            seed: 0,
            log_every: 50,
            checkpoint_every: 1000,
        }
    }
}

impl TrainSection {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            ..Default::default()
        }
    }

    pub fn pretrain_adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.pretrain_lr,
            beta1: 0.9,
            beta2: self.beta2,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub c2st_min_per_side: usize,
    pub c2st_epochs: usize,
    pub c2st_width: usize,
    pub c2st_batch_size: usize,
    pub c2st_lr: f64,
    pub c2st_seed: u64,
    /// Images per side used by the evaluation command.
    pub samples: usize,
    /// Attribute classifier container; empty means none trained yet.
    pub attr_classifier: String,
    /// Class id treated as the translation target.
    pub attr_target: u32,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            c2st_min_per_side: 200,
            c2st_epochs: 10,
            c2st_width: 16,
            c2st_batch_size: 32,
            c2st_lr: 1e-3,
            c2st_seed: 0,
            samples: 500,
            attr_classifier: String::new(),
            attr_target: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub data: DataConfig,
    pub generator: GeneratorSection,
    pub discriminator: DiscriminatorSection,
    pub losses: LossesSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl Config {
    /// Parses TOML, applies `section.key=value` overrides in order and
    /// validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text)
            .map_err(|e| Error::config("<file>", e.to_string()))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Config = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| Error::config(&field_of(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        let lid = self
            .losses
            .lambda_id
            .ok_or_else(|| Error::config("losses.lambda_id", "required field is missing"))?;
        if !(lid >= 0.0 && lid.is_finite()) {
            return Err(Error::config("losses.lambda_id", "must be finite and >= 0"));
        }
        if !(self.losses.lambda_cyc >= 0.0 && self.losses.lambda_cyc.is_finite()) {
            return Err(Error::config("losses.lambda_cyc", "must be finite and >= 0"));
        }
        if self.data.root.is_empty() {
            self.data.toy_task.parse::<ToyTask>()?;
        }
        let res = self.data.resolution;
        if res == 0 {
            return Err(Error::config("data.resolution", "must be positive"));
        }
        let m = self.generator.downsamplings as u32;
        let k = self.discriminator.blocks.saturating_sub(1) as u32;
        let need = 1u32 << m.max(k).min(16);
        if res % need != 0 {
            return Err(Error::config(
                "data.resolution",
                format!("{res} is not divisible by {need} (2^max(M, K-1))"),
            ));
        }
        if self.data.crop != 0 && self.data.crop < res {
            log::warn!("data.crop {} is smaller than data.resolution {res}; images are upsampled", self.data.crop);
        }
        if self.discriminator.blocks == 0 {
            return Err(Error::config("discriminator.blocks", "must be >= 1"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if self.train.pretrain_batch_size == 0 {
            return Err(Error::config("train.pretrain_batch_size", "must be >= 1"));
        }
        for (field, v) in [("train.lr", self.train.lr), ("train.pretrain_lr", self.train.pretrain_lr)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(field, "must be positive"));
            }
        }
        for (field, v) in [("train.beta1", self.train.beta1), ("train.beta2", self.train.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(field, "must lie in [0, 1)"));
            }
        }
        if self.eval.c2st_epochs == 0 {
            return Err(Error::config("eval.c2st_epochs", "must be >= 1"));
        }
        Ok(())
    }

    pub fn lambda_id(&self) -> f64 {
        self.losses.lambda_id.unwrap_or(0.0)
    }

    pub fn formulation(&self) -> AdversarialFormulation {
        AdversarialFormulation::new(self.losses.adversarial)
    }

    /// Fully materialized TOML; the canonical form that is hashed.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    /// Hex sha256 of the canonical TOML.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn data_root(&self) -> Option<PathBuf> {
        (!self.data.root.is_empty()).then(|| PathBuf::from(&self.data.root))
    }
}

fn field_of(e: &toml::de::Error) -> String {
    // serde reports e.g. "unknown field `x`" or "missing field `y`" along
    // with the enclosing key path in the message.
    let msg = e.message();
    msg.split('`').nth(1).unwrap_or("<file>").to_string()
}

/// `section.key=value`; the value is parsed as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(doc: &mut toml::Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let (section, key) = path
        .split_once('.')
        .ok_or_else(|| Error::config(path, "override key must be section.key"))?;
    let value = parse_literal(raw.trim());
    let table = doc
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match table {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(Error::config(section, "is not a section")),
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    let wrapped = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&wrapped) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = "[losses]\nlambda_id = 5.0\n";

    #[test]
    fn missing_lambda_id_names_field() {
        match Config::from_toml("[train]\nsteps = 3\n") {
            Err(Error::Config { field, .. }) => assert_eq!(field, "losses.lambda_id"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn defaults_materialize_and_round_trip() {
        let c = Config::from_toml(MINIMAL).unwrap();
        assert_eq!(c.lambda_id(), 5.0);
        let again = Config::from_toml(&c.to_toml()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn overrides_apply_and_change_hash() {
        let base = Config::from_toml(MINIMAL).unwrap();
        let c = Config::from_toml_with_overrides(
            MINIMAL,
            &["train.mode=single".into(), "losses.lambda_id=10".into(), "data.root=some/dir".into()],
        )
        .unwrap();
        assert_eq!(c.train.mode, TrainMode::Single);
        assert_eq!(c.lambda_id(), 10.0);
        assert_eq!(c.data.root, "some/dir");
        assert_ne!(base.hash(), c.hash());
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(matches!(
            Config::from_toml("[losses]\nlambda_id = 1.0\n[train]\nstepz = 3\n"),
            Err(Error::Config { .. })
        ));
    }

    #[test]
    fn resolution_divisibility_checked() {
        let r = Config::from_toml_with_overrides(MINIMAL, &["data.resolution=30".into()]);
        match r {
            Err(Error::Config { field, .. }) => assert_eq!(field, "data.resolution"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_toy_task_rejected() {
        assert!(Config::from_toml_with_overrides(MINIMAL, &["data.toy_task=stripes".into()]).is_err());
    }
}
