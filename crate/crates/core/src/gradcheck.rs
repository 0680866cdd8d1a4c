//! Finite-difference gradient checks.
//!
//! The numerical side only ever evaluates forward passes on fresh tapes
//! built from constants, so it shares no code with the reverse pass it
//! validates.
//!
//! Error metric: for each checked entry with analytic value `a` and central
//! difference `n`, `|a − n| / max(|a|, |n|, floor)`. The floor is the larger
//! of 1e-3 times the largest gradient magnitude seen for that input and
//! 1e-6·max(1, |f|), which sits well above the round-off of a central
//! difference of `f` at this step. It keeps gradients that are exactly zero
//! (e.g. a bias feeding a batch norm) from turning noise into huge ratios.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Activation, Tape, Var};
use crate::error::Result;
use crate::nn::{
    build_discriminator, build_generator, build_residual_unit, discriminator_forward, generator_forward, Binding,
    DiscriminatorConfig, GeneratorConfig, Network,
};
use crate::objective::{adversarial_loss_d, adversarial_loss_g, generator_objective, l1_loss, AdversarialForm};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_err: f64,
    pub entries: usize,
    /// Input index and flat entry of the largest error.
    pub worst_at: (usize, usize),
    pub passed: bool,
}

impl std::fmt::Display for CheckResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<40} max rel err {:.3e} over {} entries",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_err,
            self.entries
        )
    }
}

type Forward<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var> + 'a;

fn eval(f: &Forward<'_>, inputs: &[Tensor]) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).data()[0])
}

/// Compares reverse-mode gradients of the scalar `f(inputs)` against central
/// differences. At most `max_entries` entries per input are checked, drawn
/// from `rng`; `skip` lists inputs that are held constant.
pub fn check_gradients(
    name: &str,
    inputs: &[Tensor],
    skip: &[usize],
    f: &Forward<'_>,
    max_entries: usize,
    rng: &mut impl Rng,
) -> Result<CheckResult> {
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.clone();
            t.requires_grad = !skip.contains(&i);
            tape.leaf(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let f0 = tape.value(out).data()[0];
    tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut worst_at = (0, 0);
    let mut entries = 0;
    let mut probe = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        if skip.contains(&i) {
            continue;
        }
        let numel = inputs[i].numel();
        let zeros = vec![0.0; numel];
        let analytic = tape.grad(*var).unwrap_or(&zeros).to_vec();
        let picks: Vec<usize> =
            if numel <= max_entries { (0..numel).collect() } else { sample(rng, numel, max_entries).into_vec() };
        let mut pairs = Vec::with_capacity(picks.len());
        for &k in &picks {
            let orig = inputs[i].data()[k];
            probe[i].data_mut()[k] = orig + STEP;
            let plus = eval(f, &probe)?;
            probe[i].data_mut()[k] = orig - STEP;
            let minus = eval(f, &probe)?;
            probe[i].data_mut()[k] = orig;
            pairs.push((k, analytic[k], (plus - minus) / (2.0 * STEP)));
        }
        let scale = pairs.iter().map(|(_, a, n)| a.abs().max(n.abs())).fold(0.0, f64::max);
        let floor = (1e-3 * scale).max(1e-6 * f0.abs().max(1.0));
        for (k, a, n) in pairs {
            let err = (a - n).abs() / a.abs().max(n.abs()).max(floor);
            if err > worst {
                worst = err;
                worst_at = (i, k);
            }
        }
        entries += picks.len();
    }
    Ok(CheckResult { name: name.to_string(), max_rel_err: worst, entries, worst_at, passed: worst <= TOLERANCE })
}

/// Random weights for a weighted sum, which avoids the symmetric zero
/// gradients a plain sum has after normalization layers.
fn weighted_sum(tape: &mut Tape, x: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.reshape(tape.value(x).shape())?)?;
    let p = tape.mul(x, w)?;
    tape.sum(p)
}

fn away_from_zero(mut t: Tensor, margin: f64) -> Tensor {
    for v in t.data_mut() {
        if v.abs() < margin {
            *v = if *v < 0.0 { -margin } else { margin };
        }
    }
    t
}

fn binding_for(net: &Network, vars: &[Var]) -> Binding {
    Binding::from_pairs(net.params.names().map(str::to_string).zip(vars.iter().copied()))
}

fn params_of(net: &Network) -> Vec<Tensor> {
    net.params.iter().map(|(_, t)| t.clone()).collect()
}

/// Toy generator used by the composed checks: 16×16, two stages.
pub fn toy_generator_config() -> GeneratorConfig {
    GeneratorConfig { depth: 2, base_channels: 4, side: 16, ..GeneratorConfig::default() }
}

pub fn toy_discriminator_config() -> DiscriminatorConfig {
    DiscriminatorConfig { depth: 2, base_channels: 4, side: 16, ..DiscriminatorConfig::default() }
}

/// Runs every check; results are deterministic in `seed`.
pub fn run_suite(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut results = Vec::new();
    let per = 24;

    for (stride, pad, k) in [(1, 0, 3), (2, 1, 3), (2, 1, 4), (1, 2, 2)] {
        let x = Tensor::randn(&[2, 2, 6, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, k, k], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone())?, t.constant(w.clone())?, t.constant(b.clone())?);
            let o = t.conv2d(xv, wv, bv, stride, pad)?;
            Tensor::randn(t.value(o).shape(), 1.0, &mut rng)
        };
        let f = move |t: &mut Tape, v: &[Var]| {
            let o = t.conv2d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(t, o, &probe)
        };
        results.push(check_gradients(&format!("conv2d s{stride} p{pad} k{k}"), &[x, w, b], &[], &f, per, &mut rng)?);
    }

    for (stride, pad, k) in [(1, 0, 3), (2, 1, 4), (2, 0, 2)] {
        let x = Tensor::randn(&[2, 3, 4, 3], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, k, k], 0.5, &mut rng);
        let b = Tensor::randn(&[2], 0.5, &mut rng);
        let probe = {
            let mut t = Tape::new();
            let (xv, wv, bv) = (t.constant(x.clone())?, t.constant(w.clone())?, t.constant(b.clone())?);
            let o = t.conv_transpose2d(xv, wv, bv, stride, pad)?;
            Tensor::randn(t.value(o).shape(), 1.0, &mut rng)
        };
        let f = move |t: &mut Tape, v: &[Var]| {
            let o = t.conv_transpose2d(v[0], v[1], v[2], stride, pad)?;
            weighted_sum(t, o, &probe)
        };
        results.push(check_gradients(
            &format!("conv_transpose2d s{stride} p{pad} k{k}"),
            &[x, w, b],
            &[],
            &f,
            per,
            &mut rng,
        )?);
    }

    {
        let x = Tensor::randn(&[3, 2, 3, 3], 1.5, &mut rng);
        let gamma = Tensor::uniform(&[2], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[2], 0.5, &mut rng);
        let probe = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
        let p2 = probe.clone();
        let f = move |t: &mut Tape, v: &[Var]| {
            let (o, _) = t.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            weighted_sum(t, o, &p2)
        };
        results.push(check_gradients(
            "batch_norm train",
            &[x.clone(), gamma.clone(), beta.clone()],
            &[],
            &f,
            per,
            &mut rng,
        )?);
        let f = move |t: &mut Tape, v: &[Var]| {
            let o = t.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.2], &[1.7, 0.6], 1e-5)?;
            weighted_sum(t, o, &probe)
        };
        results.push(check_gradients("batch_norm eval", &[x, gamma, beta], &[], &f, per, &mut rng)?);
    }

    for kind in [Activation::LeakyRelu(0.2), Activation::Relu, Activation::Tanh, Activation::Sigmoid] {
        let x = away_from_zero(Tensor::uniform(&[32], -3.0, 3.0, &mut rng), 1e-2);
        let f = move |t: &mut Tape, v: &[Var]| {
            let o = t.activation(v[0], kind)?;
            t.sum(o)
        };
        results.push(check_gradients(&format!("activation {kind:?}"), &[x], &[], &f, per, &mut rng)?);
    }

    {
        let real = Tensor::uniform(&[4], 0.05, 0.95, &mut rng);
        let fake = Tensor::uniform(&[4], 0.05, 0.95, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| adversarial_loss_d(t, v[0], v[1]);
        results.push(check_gradients("adversarial_loss_d", &[real, fake.clone()], &[], &f, per, &mut rng)?);
        for form in [AdversarialForm::NonSaturating, AdversarialForm::Saturating] {
            let f = move |t: &mut Tape, v: &[Var]| adversarial_loss_g(t, v[0], form);
            results.push(check_gradients(
                &format!("adversarial_loss_g {form}"),
                std::slice::from_ref(&fake),
                &[],
                &f,
                per,
                &mut rng,
            )?);
        }
        let y = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let g = Tensor::uniform(&[1, 1, 4, 4], -1.0, 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| l1_loss(t, v[0], v[1]);
        results.push(check_gradients("l1_loss", &[y.clone(), g.clone()], &[], &f, per, &mut rng)?);
        let f = |t: &mut Tape, v: &[Var]| {
            Ok(generator_objective(t, v[0], v[1], v[2], 100.0, AdversarialForm::NonSaturating)?.total)
        };
        let d = Tensor::uniform(&[1], 0.1, 0.9, &mut rng);
        results.push(check_gradients("generator_objective", &[d, y, g], &[], &f, per, &mut rng)?);
    }

    {
        // conv2d -> batch_norm -> leaky_relu -> sum
        let x = Tensor::randn(&[2, 2, 5, 5], 1.0, &mut rng);
        let w = Tensor::randn(&[3, 2, 3, 3], 0.5, &mut rng);
        let b = Tensor::randn(&[3], 0.5, &mut rng);
        let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut rng);
        let beta = Tensor::randn(&[3], 0.5, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| {
            let c = t.conv2d(v[0], v[1], v[2], 1, 1)?;
            let (n, _) = t.batch_norm_train(c, v[3], v[4], 1e-5)?;
            let a = t.leaky_relu(n, 0.2)?;
            t.sum(a)
        };
        results.push(check_gradients("conv2d>batch_norm>leaky_relu", &[x, w, b, gamma, beta], &[], &f, per, &mut rng)?);
    }

    {
        let unit = build_residual_unit(4, Activation::LeakyRelu(0.2), rng.random())?;
        let mut inputs = vec![Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng)];
        inputs.extend(params_of(&unit));
        let probe = Tensor::randn(&[2, 4, 4, 4], 1.0, &mut rng);
        let f = |t: &mut Tape, v: &[Var]| {
            let mut net = unit.clone();
            let bind = binding_for(&net, &v[1..]);
            let o = net.forward(t, &bind, v[0])?;
            weighted_sum(t, o, &probe)
        };
        results.push(check_gradients("residual_bottleneck", &inputs, &[], &f, per, &mut rng)?);
    }

    let gcfg = toy_generator_config();
    let dcfg = toy_discriminator_config();
    let gen = build_generator(&gcfg, rng.random())?;
    let disc = build_discriminator(&dcfg, rng.random())?;
    let x = Tensor::uniform(&[1, 3, 16, 16], -1.0, 1.0, &mut rng);
    let y =
        Tensor::new(&[1, 1, 16, 16], (0..256).map(|_| if rng.random::<f64>() < 0.2 { 1.0 } else { -1.0 }).collect())?;
    let n_g = gen.params.len();

    {
        let mut inputs = vec![x.clone()];
        inputs.extend(params_of(&gen));
        let f = |t: &mut Tape, v: &[Var]| {
            let mut g = gen.clone();
            let bind = binding_for(&g, &v[1..]);
            let o = generator_forward(&mut g, t, &bind, v[0])?;
            t.sum(o)
        };
        results.push(check_gradients("generator 16x16 sum(G(x))", &inputs, &[], &f, 6, &mut rng)?);
    }

    {
        // full generator objective through D, w.r.t. the generator only
        let mut inputs = vec![x.clone(), y.clone()];
        inputs.extend(params_of(&gen));
        inputs.extend(params_of(&disc));
        let skip: Vec<usize> = std::iter::once(1).chain(2 + n_g..inputs.len()).collect();
        let f = |t: &mut Tape, v: &[Var]| {
            let (mut g, mut d) = (gen.clone(), disc.clone());
            let gb = binding_for(&g, &v[2..2 + n_g]);
            let db = binding_for(&d, &v[2 + n_g..]);
            let fake = generator_forward(&mut g, t, &gb, v[0])?;
            let p = discriminator_forward(&mut d, t, &db, v[0], fake)?;
            Ok(generator_objective(t, p, v[1], fake, 100.0, AdversarialForm::NonSaturating)?.total)
        };
        results.push(check_gradients("generator objective via D (16x16)", &inputs, &skip, &f, 6, &mut rng)?);
    }

    {
        // discriminator loss w.r.t. D parameters, generated map held fixed
        let fake = Tensor::uniform(&[1, 1, 16, 16], -1.0, 1.0, &mut rng);
        let mut inputs = vec![x, y, fake];
        inputs.extend(params_of(&disc));
        let f = |t: &mut Tape, v: &[Var]| {
            let (mut d1, mut d2) = (disc.clone(), disc.clone());
            let b = binding_for(&d1, &v[3..]);
            let real = discriminator_forward(&mut d1, t, &b, v[0], v[1])?;
            let fake = discriminator_forward(&mut d2, t, &b, v[0], v[2])?;
            adversarial_loss_d(t, real, fake)
        };
        results.push(check_gradients("discriminator loss (16x16)", &inputs, &[0, 1, 2], &f, 8, &mut rng)?);
    }

    Ok(results)
}
