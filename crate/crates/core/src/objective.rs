//! Conditional adversarial losses and the λ-weighted L1 term.

use std::fmt::Write as _;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

pub const DEFAULT_LAMBDA: f64 = 100.0;

/// Generator adversarial term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdversarialForm {
    /// Minimize `−log D(x, G(x))`.
    #[default]
    NonSaturating,
    /// Minimize `log(1 − D(x, G(x)))`, the literal min-max form.
    Saturating,
}

impl std::str::FromStr for AdversarialForm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "non_saturating" => Ok(Self::NonSaturating),
            "saturating" => Ok(Self::Saturating),
            other => Err(Error::Config(format!("unknown adversarial form {other:?}"))),
        }
    }
}

impl std::fmt::Display for AdversarialForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::NonSaturating => "non_saturating",
            Self::Saturating => "saturating",
        })
    }
}

fn clamped_log(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    tape.log(c)
}

fn one_minus(tape: &mut Tape, p: Var) -> Result<Var> {
    let neg = tape.scale(p, -1.0)?;
    tape.add_scalar(neg, 1.0)
}

fn check_probs(tape: &Tape, op: &'static str, vars: &[Var]) -> Result<()> {
    let shape = tape.value(vars[0]).shape();
    if shape.len() != 1 {
        return Err(Error::shape(op, format!("expected one probability per sample, got shape {shape:?}")));
    }
    for v in &vars[1..] {
        if tape.value(*v).shape() != shape {
            return Err(Error::shape(op, format!("{:?} vs {shape:?}", tape.value(*v).shape())));
        }
    }
    Ok(())
}

/// Discriminator loss: sample mean of `−[log D(x,y) + log(1 − D(x,G(x)))] / 2`.
pub fn adversarial_loss_d(tape: &mut Tape, d_real: Var, d_fake: Var) -> Result<Var> {
    check_probs(tape, "adversarial_loss_d", &[d_real, d_fake])?;
    let log_real = clamped_log(tape, d_real)?;
    let not_fake = one_minus(tape, d_fake)?;
    let log_not_fake = clamped_log(tape, not_fake)?;
    let both = tape.add(log_real, log_not_fake)?;
    let m = tape.mean(both)?;
    tape.scale(m, -0.5)
}

/// Generator adversarial loss over `D(x, G(x))`.
pub fn adversarial_loss_g(tape: &mut Tape, d_fake: Var, form: AdversarialForm) -> Result<Var> {
    check_probs(tape, "adversarial_loss_g", &[d_fake])?;
    match form {
        AdversarialForm::NonSaturating => {
            let l = clamped_log(tape, d_fake)?;
            let m = tape.mean(l)?;
            tape.scale(m, -1.0)
        }
        AdversarialForm::Saturating => {
            let not_fake = one_minus(tape, d_fake)?;
            let l = clamped_log(tape, not_fake)?;
            tape.mean(l)
        }
    }
}

/// Mean absolute difference over all elements.
pub fn l1_loss(tape: &mut Tape, y: Var, g: Var) -> Result<Var> {
    let d = tape.sub(y, g)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Tape handles of the generator objective's terms.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub adversarial: Var,
    pub l1: Var,
    pub total: Var,
}

/// `adversarial_loss_g(d_fake) + λ·l1_loss(y, g)`.
pub fn generator_objective(
    tape: &mut Tape,
    d_fake: Var,
    y: Var,
    g: Var,
    lambda: f64,
    form: AdversarialForm,
) -> Result<GeneratorLoss> {
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be a non-negative finite number, got {lambda}")));
    }
    let adversarial = adversarial_loss_g(tape, d_fake, form)?;
    let l1 = l1_loss(tape, y, g)?;
    let weighted = tape.scale(l1, lambda)?;
    let total = tape.add(adversarial, weighted)?;
    Ok(GeneratorLoss { adversarial, l1, total })
}

/// Loss scalars of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub d_loss: f64,
    pub g_adv: f64,
    pub g_l1: f64,
    pub g_total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "iter,d_loss,g_adv,g_l1,g_total";

    pub fn csv_row(&self, iter: usize) -> String {
        let mut s = String::new();
        write!(s, "{iter},{},{},{},{}", self.d_loss, self.g_adv, self.g_l1, self.g_total).unwrap();
        s
    }

    /// First non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [("d_loss", self.d_loss), ("g_adv", self.g_adv), ("g_l1", self.g_l1), ("g_total", self.g_total)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k)
    }
}
