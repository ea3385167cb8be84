//! Scalar training objectives. Every function returns a minimization
//! penalty as a rank-0 tensor that still carries its autograd graph.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn;
use crate::percdisc::DiscriminatorOutput;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialKind {
    NonSaturating,
    LeastSquares,
}

impl FromStr for AdversarialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(Self::NonSaturating),
            "least_squares" => Ok(Self::LeastSquares),
            other => Err(Error::config(
                "losses.adversarial",
                format!("unknown formulation `{other}` (non_saturating | least_squares)"),
            )),
        }
    }
}

impl fmt::Display for AdversarialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::NonSaturating => "non_saturating",
            Self::LeastSquares => "least_squares",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialFormulation {
    pub kind: AdversarialKind,
    /// Least-squares target for fakes in the discriminator update.
    pub fake_target: f64,
    /// Least-squares target for reals in the discriminator update.
    pub real_target: f64,
    /// Least-squares target the generator pushes fakes towards.
    pub gen_target: f64,
}

impl AdversarialFormulation {
    pub fn new(kind: AdversarialKind) -> Self {
        Self {
            kind,
            fake_target: 0.0,
            real_target: 1.0,
            gen_target: 1.0,
        }
    }
}

fn checked(t: Tensor, what: &str) -> Result<Tensor> {
    nn::ensure_finite(&t, || what.to_string())?;
    Ok(t)
}

/// Mean over heads of `0.5 * mean((s - target)^2)`.
fn least_squares(out: &DiscriminatorOutput, target: f64) -> Result<Tensor> {
    let heads = out.heads();
    let n = heads.len() as f64;
    let mut acc: Option<Tensor> = None;
    for s in heads {
        let term = (s - target)?.sqr()?.mean_all()?;
        acc = Some(match acc {
            Some(a) => (a + term)?,
            None => term,
        });
    }
    Ok((acc.expect("main head always present") * (0.5 / n))?)
}

pub fn adv_discriminator_loss(
    out_real: &DiscriminatorOutput,
    out_fake: &DiscriminatorOutput,
    f: &AdversarialFormulation,
) -> Result<Tensor> {
    let loss = match f.kind {
        AdversarialKind::NonSaturating => {
            let real = out_real.aggregate_log_prob(true)?.mean_all()?;
            let fake = out_fake.aggregate_log_prob(false)?.mean_all()?;
            (real + fake)?.neg()?
        }
        AdversarialKind::LeastSquares => {
            (least_squares(out_real, f.real_target)? + least_squares(out_fake, f.fake_target)?)?
        }
    };
    checked(loss, "adv_D")
}

pub fn adv_generator_loss(out_fake: &DiscriminatorOutput, f: &AdversarialFormulation) -> Result<Tensor> {
    let loss = match f.kind {
        AdversarialKind::NonSaturating => out_fake.aggregate_log_prob(true)?.mean_all()?.neg()?,
        AdversarialKind::LeastSquares => least_squares(out_fake, f.gen_target)?,
    };
    checked(loss, "adv_G")
}

/// Mean absolute difference over every element.
pub fn l1_mean(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "L1 operands differ in shape: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok((a - b)?.abs()?.mean_all()?)
}

pub fn identity_loss(y: &Tensor, gy: &Tensor, lambda_id: f64) -> Result<Tensor> {
    checked((l1_mean(y, gy)? * lambda_id)?, "identity")
}

pub fn cycle_loss(x: &Tensor, x_cycled: &Tensor, lambda_cyc: f64) -> Result<Tensor> {
    checked((l1_mean(x, x_cycled)? * lambda_cyc)?, "cycle")
}

pub fn reconstruction_loss(x: &Tensor, gx: &Tensor) -> Result<Tensor> {
    checked(l1_mean(x, gx)?, "recon")
}

/// Per-step loss values. Components are stored already weighted, so the
/// totals are plain sums.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub components: BTreeMap<String, f64>,
    pub total_g: f64,
    pub total_d: f64,
    pub lambda_id: f64,
    pub lambda_cyc: f64,
}

pub const GENERATOR_TERMS: [&str; 4] = ["adv_G", "identity", "cycle_fwd", "cycle_bwd"];
pub const DISCRIMINATOR_TERMS: [&str; 1] = ["adv_D"];

impl LossReport {
    pub fn new(lambda_id: f64, lambda_cyc: f64) -> Self {
        Self {
            lambda_id,
            lambda_cyc,
            ..Default::default()
        }
    }

    /// Adds `value` to component `name`; non-finite values are rejected.
    pub fn add(&mut self, name: &str, value: f64) -> Result<()> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        *self.components.entry(name.to_string()).or_insert(0.0) += value;
        self.recompute();
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    fn sum_of(&self, names: &[&str]) -> f64 {
        names.iter().filter_map(|n| self.get(n)).sum()
    }

    fn recompute(&mut self) {
        self.total_g = self.sum_of(&GENERATOR_TERMS);
        self.total_d = self.sum_of(&DISCRIMINATOR_TERMS);
    }

    /// Name of the first non-finite entry, if any.
    pub fn first_non_finite(&self) -> Option<String> {
        self.components
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.clone())
            .or_else(|| (!self.total_g.is_finite()).then(|| "total_G".into()))
            .or_else(|| (!self.total_d.is_finite()).then(|| "total_D".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};

    fn out(main: &[f32]) -> DiscriminatorOutput {
        DiscriminatorOutput::new(Tensor::new(main, &Device::Cpu).unwrap(), vec![], 1e-7)
    }

    fn logit(p: f64) -> f32 {
        (p / (1.0 - p)).ln() as f32
    }

    fn val(t: Tensor) -> f64 {
        nn::scalar(&t).unwrap()
    }

    fn full(v: f32) -> Tensor {
        Tensor::full(v, (2, 3, 4, 4), &Device::Cpu).unwrap()
    }

    #[test]
    fn chance_discriminator() {
        let f = AdversarialFormulation::new(AdversarialKind::NonSaturating);
        let l = val(adv_discriminator_loss(&out(&[0.0]), &out(&[0.0]), &f).unwrap());
        assert!((l - 2.0 * 2f64.ln()).abs() < 1e-6);
        let g = val(adv_generator_loss(&out(&[0.0]), &f).unwrap());
        assert!((g - 2f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn perfect_discriminator_is_near_zero() {
        let f = AdversarialFormulation::new(AdversarialKind::NonSaturating);
        let l = val(adv_discriminator_loss(&out(&[1e3]), &out(&[-1e3]), &f).unwrap());
        assert!(l.abs() < 1e-5, "{l}");
        assert!(val(adv_generator_loss(&out(&[1e3]), &f).unwrap()).abs() < 1e-5);
    }

    #[test]
    fn least_squares_targets() {
        let f = AdversarialFormulation::new(AdversarialKind::LeastSquares);
        assert_eq!(val(adv_discriminator_loss(&out(&[1.0]), &out(&[0.0]), &f).unwrap()), 0.0);
        assert_eq!(val(adv_generator_loss(&out(&[1.0]), &f).unwrap()), 0.0);
        let g = val(adv_generator_loss(&out(&[0.0]), &f).unwrap());
        assert!((g - 0.5).abs() < 1e-7);
    }

    #[test]
    fn least_squares_averages_heads() {
        let dev = Device::Cpu;
        let o = DiscriminatorOutput::new(
            Tensor::new(&[0f32], &dev).unwrap(),
            vec![(1, Tensor::ones((1, 2, 2), DType::F32, &dev).unwrap())],
            1e-7,
        );
        let f = AdversarialFormulation::new(AdversarialKind::LeastSquares);
        // heads: 0.5 * 1 and 0.5 * 0, averaged
        assert!((val(adv_generator_loss(&o, &f).unwrap()) - 0.25).abs() < 1e-7);
    }

    #[test]
    fn generator_loss_decreases_in_d_fake() {
        let f = AdversarialFormulation::new(AdversarialKind::NonSaturating);
        let mut prev = f64::INFINITY;
        for i in 1..20 {
            let p = i as f64 / 20.0;
            let l = val(adv_generator_loss(&out(&[logit(p)]), &f).unwrap());
            assert!(l < prev);
            prev = l;
        }
    }

    #[test]
    fn l1_examples() {
        assert!((val(identity_loss(&full(0.0), &full(0.5), 1.0).unwrap()) - 0.5).abs() < 1e-7);
        assert_eq!(val(identity_loss(&full(0.3), &full(0.9), 0.0).unwrap()), 0.0);
        assert!((val(cycle_loss(&full(-1.0), &full(1.0), 10.0).unwrap()) - 20.0).abs() < 1e-5);
        assert_eq!(val(reconstruction_loss(&full(1.0), &full(1.0)).unwrap()), 0.0);
        assert!((val(reconstruction_loss(&full(1.0), &full(0.0)).unwrap()) - 1.0).abs() < 1e-7);
    }

    #[test]
    fn l1_shape_mismatch() {
        let a = Tensor::zeros((1, 3, 4, 4), DType::F32, &Device::Cpu).unwrap();
        let b = Tensor::zeros((1, 3, 4, 2), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(identity_loss(&a, &b, 1.0), Err(Error::Shape(_))));
    }

    #[test]
    fn non_finite_is_numeric_error() {
        let f = AdversarialFormulation::new(AdversarialKind::LeastSquares);
        assert!(matches!(
            adv_generator_loss(&out(&[f32::NAN]), &f),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn report_totals() {
        let mut r = LossReport::new(5.0, 10.0);
        r.add("adv_G", 0.7).unwrap();
        r.add("identity", 0.2).unwrap();
        r.add("cycle_fwd", 0.1).unwrap();
        r.add("adv_D", 1.3).unwrap();
        r.add("recon", 9.0).unwrap();
        assert!((r.total_g - 1.0).abs() < 1e-12);
        assert!((r.total_d - 1.3).abs() < 1e-12);
        assert!(r.add("cycle_bwd", f64::NAN).is_err());
    }

    #[test]
    fn parse_kind() {
        assert_eq!("least_squares".parse::<AdversarialKind>().unwrap(), AdversarialKind::LeastSquares);
        assert!("wgan".parse::<AdversarialKind>().is_err());
    }
}
