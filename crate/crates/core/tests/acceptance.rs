//! End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any criterion fails. Criteria 7 and 8 train the desk
//! configuration twice, so expect several minutes on one core.

use std::fs;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vesselgan::datapipe::{gen_phantom, PhantomConfig, Plane, SamplePair};
use vesselgan::gradcheck::{run_suite, TOLERANCE};
use vesselgan::metrics::{binarize, confusion, evaluate_set, scores, ConfusionCounts, EvalItem, ScoreSet};
use vesselgan::nn::{build_generator, build_residual_unit, generator_forward_traced, GeneratorConfig, Probe};
use vesselgan::trainer::{
    discriminator_step, generator_step, load_generator, segment, stack_batch, train, GeneratorPass, StepSettings,
    TrainConfig, Trainer,
};
use vesselgan::{Activation, ParamStore, Tape, Tensor};

mod common;
use common::{closed_form_generator_params, conv2d_grid_error, conv_transpose_grid_error, run_generator, unit_forward};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = run_suite(7).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let worst = results.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    let mut detail = format!(
        "{} checks, worst rel err {worst:.2e} (limit {TOLERANCE:e}), {:.1} s (limit 60 s)",
        results.len(),
        elapsed.as_secs_f64()
    );
    if !failed.is_empty() {
        detail.push_str(&format!(", failed: {}", failed.join(", ")));
    }
    check(failed.is_empty() && elapsed < Duration::from_secs(60), detail)
}

fn conv_oracles() -> Outcome {
    let direct = conv2d_grid_error(11);
    let transpose = conv_transpose_grid_error(12);
    check(
        direct <= 1e-10 && transpose <= 1e-10,
        format!("conv2d max err {direct:.2e}, conv_transpose2d max err {transpose:.2e} (limit 1e-10)"),
    )
}

fn plane(h: usize, w: usize, data: &[f64]) -> Plane {
    Plane::new(h, w, data.to_vec()).unwrap()
}

fn close(a: Option<f64>, b: f64) -> bool {
    a.is_some_and(|a| (a - b).abs() <= 1e-12)
}

fn metrics_fixtures() -> Outcome {
    let c = |tp, tn, fp, fn_| ConfusionCounts { tp, tn, fp, fn_ };
    let mut failures = Vec::new();

    let s = scores(&c(8, 88, 2, 2));
    let hand = close(s.precision, 0.8)
        && close(s.sensitivity, 0.8)
        && close(s.f_measure, 0.8)
        && close(s.accuracy, 0.96)
        && close(s.specificity, 88.0 / 90.0)
        && s.recall == s.sensitivity;
    if !hand {
        failures.push(format!("8/88/2/2 gave {s:?}"));
    }

    let s = scores(&c(2, 0, 0, 2));
    if s.sensitivity != Some(0.5) || s.specificity.is_some() {
        failures.push(format!("tp=2 fn=2 gave {s:?}"));
    }
    let perfect = scores(&c(1, 1, 0, 0));
    let ones = [perfect.accuracy, perfect.sensitivity, perfect.specificity, perfect.precision, perfect.f_measure];
    if ones.iter().any(|v| *v != Some(1.0)) {
        failures.push(format!("perfect counts gave {perfect:?}"));
    }
    if scores(&c(0, 0, 0, 0)) != ScoreSet::default() {
        failures.push("empty counts are not all undefined".into());
    }

    let pred = plane(2, 2, &[1.0, 0.0, 0.0, 1.0]);
    let gt = plane(2, 2, &[1.0, 1.0, 0.0, 0.0]);
    if confusion(&pred, &gt, None).ok() != Some(c(1, 1, 1, 1)) {
        failures.push("2x2 confusion".into());
    }

    let gt = plane(2, 4, &[1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 0.0]);
    let p = plane(2, 4, &[0.9, 0.8, 0.1, 0.3, 0.7, 0.6, 0.5, 0.2]);
    let mask = plane(2, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let masked = confusion(&binarize(&p, 0.5, Some(&mask)), &gt, Some(&mask)).unwrap();
    // kept pixels 0,1,5,6,7: gt 1,0,1,1,0 against pred 1,1,1,1,0
    if masked != c(3, 1, 1, 0) {
        failures.push(format!("mask restriction gave {masked:?}"));
    }

    let a_gt = plane(1, 4, &[1.0, 1.0, 0.0, 0.0]);
    let a_p = plane(1, 4, &[0.9, 0.1, 0.7, 0.2]);
    let b_gt = plane(1, 6, &[1.0, 1.0, 1.0, 0.0, 0.0, 0.0]);
    let b_p = plane(1, 6, &[0.8, 0.6, 0.5, 0.0, 0.3, 0.49]);
    let items = [
        EvalItem { id: "a", prob: &a_p, gt: &a_gt, mask: None },
        EvalItem { id: "b", prob: &b_p, gt: &b_gt, mask: None },
    ];
    let r = evaluate_set(&items, 0.5).unwrap();
    if r.micro.counts != c(4, 4, 1, 1) || !close(r.micro.scores.accuracy, 0.8) || !close(r.macro_avg.accuracy, 0.75) {
        failures.push(format!("micro/macro aggregation gave {:?} / {:?}", r.micro, r.macro_avg));
    }
    check(failures.is_empty(), if failures.is_empty() { "all fixtures exact".into() } else { failures.join("; ") })
}

fn architecture_contracts() -> Outcome {
    let cfg = GeneratorConfig { side: 64, depth: 4, base_channels: 32, ..GeneratorConfig::default() };
    let mut failures = Vec::new();
    let mut net = build_generator(&cfg, 1).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::uniform(&[1, 3, 64, 64], -1.0, 1.0, &mut rng);
    let out = run_generator(&mut net, &x);
    if out.shape() != [1, 1, 64, 64] || out.min() < -1.0 || out.max() > 1.0 {
        failures.push(format!("output shape {:?} range [{}, {}]", out.shape(), out.min(), out.max()));
    }

    let mut unit = build_residual_unit(8, Activation::LeakyRelu(0.2), 7).map_err(|e| e.to_string())?;
    for name in ["unit.restore.weight", "unit.restore.bias", "unit.bn2.beta"] {
        unit.params.get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let z = Tensor::randn(&[2, 8, 5, 6], 1.0, &mut rng);
    if unit_forward(&mut unit, &z).data() != z.data() {
        failures.push("zeroed residual branch is not an exact pass-through".into());
    }

    let trace = |net: &mut vesselgan::nn::Network, probe: Probe| {
        let mut tape = Tape::new();
        let bind = net.bind(&mut tape, false).unwrap();
        let xv = tape.constant(x.clone()).unwrap();
        let t = generator_forward_traced(net, &mut tape, &bind, xv, probe).unwrap();
        tape.value(t.output).clone()
    };
    let base = trace(&mut net, Probe::default());
    let mut sensitivities = Vec::new();
    for k in 0..cfg.depth {
        let d = trace(&mut net, Probe { zero_skip: Some(k) }).max_abs_diff(&base);
        if d <= 0.0 {
            failures.push(format!("skip {k} has no effect"));
        }
        sensitivities.push(format!("{d:.1e}"));
    }

    let expected = closed_form_generator_params(&cfg);
    let table: usize = net.layers().iter().map(|l| l.params).sum();
    if net.param_count() != expected || table != expected {
        failures.push(format!("param count {} / table {table} / closed form {expected}", net.param_count()));
    }
    let detail = format!(
        "1x3x64x64 -> {:?} in [{:.3}, {:.3}], skip sensitivities [{}], {expected} parameters",
        out.shape(),
        out.min(),
        out.max(),
        sensitivities.join(", ")
    );
    check(failures.is_empty(), if failures.is_empty() { detail } else { failures.join("; ") })
}

fn snapshot(p: &ParamStore) -> Vec<u64> {
    p.iter().flat_map(|(_, t)| t.data().iter().map(|v| v.to_bits())).collect()
}

fn desk_phantoms(seeds: std::ops::Range<u64>) -> Vec<SamplePair> {
    let cfg = PhantomConfig::default();
    seeds.map(|s| gen_phantom(s, 64, &cfg).unwrap()).collect()
}

fn optimizer_partition() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(TrainConfig { out_dir: dir.path().into(), ..TrainConfig::default() })
        .map_err(|e| e.to_string())?;
    let settings = StepSettings::from(&t.config);
    let data = desk_phantoms(0..100);
    let mut violations = 0;
    let mut stalled = 0;
    for pair in &data {
        let (x, y) = stack_batch(std::slice::from_ref(pair)).unwrap();
        let pass = GeneratorPass::run(&mut t.generator, &x).unwrap();
        let g0 = snapshot(&t.generator.params);
        let d0 = snapshot(&t.discriminator.params);
        discriminator_step(&mut t.discriminator, &mut t.opt_d, &x, &y, pass.fake()).unwrap();
        let d1 = snapshot(&t.discriminator.params);
        violations += usize::from(snapshot(&t.generator.params) != g0);
        stalled += usize::from(d1 == d0);
        generator_step(pass, &mut t.generator, &mut t.discriminator, &mut t.opt_g, &y, &settings).unwrap();
        violations += usize::from(snapshot(&t.discriminator.params) != d1);
        stalled += usize::from(snapshot(&t.generator.params) == g0);
    }
    check(
        violations == 0 && stalled == 0,
        format!("100 steps: {violations} cross-network writes, {stalled} updates that changed nothing"),
    )
}

fn determinism() -> Outcome {
    let data = desk_phantoms(0..8);
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { epochs: 2, seed: 17, out_dir: dir.path().into(), ..TrainConfig::default() };
        let out = train(&cfg, &data).unwrap();
        [out.loss_csv, out.generator_ckpt, out.discriminator_ckpt].map(|p| fs::read(p).unwrap())
    };
    let (a, b) = (run(), run());
    let same = a.iter().zip(&b).map(|(x, y)| x == y).collect::<Vec<_>>();
    check(
        same.iter().all(|&s| s),
        format!("16 steps twice: losses.csv {}, generator.ckpt {}, discriminator.ckpt {}", same[0], same[1], same[2]),
    )
}

struct DeskRun {
    micro: ScoreSet,
    l1: f64,
    steps: usize,
    elapsed: Duration,
}

fn desk_run(lambda: f64, train_set: &[SamplePair], held_out: &[SamplePair]) -> Result<DeskRun, String> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { lambda, max_steps: Some(2000), out_dir: dir.path().into(), ..TrainConfig::default() };
    let start = Instant::now();
    let out = train(&cfg, train_set).map_err(|e| e.to_string())?;
    let mut gen = load_generator(&out.generator_ckpt).map_err(|e| e.to_string())?;
    let probs: Vec<Plane> =
        held_out.iter().map(|p| segment(&mut gen, &p.image)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let l1 = probs
        .iter()
        .zip(held_out)
        .map(|(p, t)| p.data.iter().zip(&t.label.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.data.len() as f64)
        .sum::<f64>()
        / held_out.len() as f64;
    let items: Vec<EvalItem> = held_out
        .iter()
        .zip(&probs)
        .map(|(t, p)| EvalItem { id: &t.id, prob: p, gt: &t.label, mask: t.mask.as_ref() })
        .collect();
    let micro = evaluate_set(&items, 0.5).map_err(|e| e.to_string())?.micro.scores;
    Ok(DeskRun { micro, l1, steps: out.steps, elapsed })
}

fn desk_scale(run: &Result<DeskRun, String>) -> Outcome {
    let r = run.as_ref().map_err(Clone::clone)?;
    let f = r.micro.f_measure.unwrap_or(0.0);
    let se = r.micro.sensitivity.unwrap_or(0.0);
    check(
        f >= 0.70 && se >= 0.70 && r.steps <= 2000 && r.elapsed <= Duration::from_secs(30 * 60),
        format!(
            "{} steps, held-out micro F {f:.4} SE {se:.4} AC {:.4} at 0.5 (limits 0.70), {:.0} s (limit 1800 s)",
            r.steps,
            r.micro.accuracy.unwrap_or(0.0),
            r.elapsed.as_secs_f64()
        ),
    )
}

fn lambda_ablation(with: &Result<DeskRun, String>, without: &Result<DeskRun, String>) -> Outcome {
    let (a, b) = (with.as_ref().map_err(Clone::clone)?, without.as_ref().map_err(Clone::clone)?);
    check(
        a.l1 < b.l1 && a.steps == b.steps,
        format!("held-out L1 after {} steps: lambda=100 {:.4}, lambda=0 {:.4}", a.steps, a.l1, b.l1),
    )
}

fn main() -> ExitCode {
    let mut outcomes: Vec<(u32, &str, Outcome)> = Vec::new();
    let mut report = |n: u32, name: &'static str, o: Outcome| {
        match &o {
            Ok(d) => println!("criterion {n} PASS {name}: {d}"),
            Err(d) => println!("criterion {n} FAIL {name}: {d}"),
        }
        outcomes.push((n, name, o));
    };
    report(1, "gradient suite", gradient_suite());
    report(2, "oracle equivalence", conv_oracles());
    report(3, "metrics exactness", metrics_fixtures());
    report(4, "architecture contracts", architecture_contracts());
    report(5, "optimizer partition", optimizer_partition());
    report(6, "determinism", determinism());

    let train_set = desk_phantoms(0..200);
    let held_out = desk_phantoms(1000..1020);
    let with = desk_run(100.0, &train_set, &held_out);
    report(7, "desk-scale end-to-end", desk_scale(&with));
    let without = desk_run(0.0, &train_set, &held_out);
    report(8, "lambda ablation", lambda_ablation(&with, &without));

    let failed = outcomes.iter().filter(|(_, _, o)| o.is_err()).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
