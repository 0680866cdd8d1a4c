//! Alternating adversarial training, checkpoints and inference.
//!
//! Each step updates the discriminator on a real and a generated pair, then
//! updates the generator against the freshly updated discriminator. The two
//! networks have separate parameter stores and optimizer states, so a step
//! on one can never touch the other's parameters.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autograd::{Tape, Var};
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::datapipe::{augment, from_model_range_in_place, AugmentPolicy, Plane, RgbImage, SamplePair};
use crate::error::{Error, Result};
use crate::nn::{
    build_discriminator, build_generator, discriminator_forward, generator_forward, Architecture, Binding,
    DiscriminatorConfig, GeneratorConfig, Mode, Network,
};
use crate::objective::{adversarial_loss_d, generator_objective, AdversarialForm, LossReport};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const LOSS_CSV: &str = "losses.csv";
pub const GENERATOR_CKPT: &str = "generator.ckpt";
pub const DISCRIMINATOR_CKPT: &str = "discriminator.ckpt";
const GENERATOR_META: &str = "meta.generator";
const DISCRIMINATOR_META: &str = "meta.discriminator";

/// Environment variable capping the data-preparation worker count.
pub const THREADS_ENV: &str = "VESSELGAN_THREADS";

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Stops after this many steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch: usize,
    pub lambda: f64,
    pub leak: f64,
    pub seed: u64,
    pub side: usize,
    pub depth: usize,
    pub base_channels: usize,
    pub disc_depth: usize,
    pub disc_base_channels: usize,
    pub adversarial: AdversarialForm,
    pub d_steps: usize,
    pub g_steps: usize,
    /// Epochs between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
    pub augment: bool,
    pub rotation_deg: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub translation_frac: f64,
    pub intensity_scale_min: f64,
    pub intensity_scale_max: f64,
    pub intensity_shift_min: f64,
    pub intensity_shift_max: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let aug = AugmentPolicy::default();
        let (g, d) = (GeneratorConfig::default(), DiscriminatorConfig::default());
        Self {
            epochs: 800,
            max_steps: None,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
            batch: 1,
            lambda: 100.0,
            leak: 0.2,
            seed: 0,
            side: g.side,
            depth: g.depth,
            base_channels: g.base_channels,
            disc_depth: d.depth,
            disc_base_channels: d.base_channels,
            adversarial: AdversarialForm::NonSaturating,
            d_steps: 1,
            g_steps: 1,
            checkpoint_every: 0,
            out_dir: PathBuf::from("run"),
            augment: true,
            rotation_deg: aug.max_rotation_deg,
            hflip_prob: aug.hflip_prob,
            vflip_prob: aug.vflip_prob,
            translation_frac: aug.max_translation_frac,
            intensity_scale_min: aug.scale_range.0,
            intensity_scale_max: aug.scale_range.1,
            intensity_shift_min: aug.shift_range.0,
            intensity_shift_max: aug.shift_range.1,
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value.parse().map_err(|e| Error::Config(format!("{key} = {value:?}: {e}")))
}

impl TrainConfig {
    /// Sets one field from its textual form. Keys are the field names.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key.trim() {
            "epochs" => self.epochs = parse_value(key, v)?,
            "max_steps" => {
                self.max_steps = match v {
                    "" | "none" => None,
                    _ => Some(parse_value(key, v)?),
                }
            }
            "lr" => self.lr = parse_value(key, v)?,
            "beta1" => self.beta1 = parse_value(key, v)?,
            "beta2" => self.beta2 = parse_value(key, v)?,
            "eps" => self.eps = parse_value(key, v)?,
            "batch" => self.batch = parse_value(key, v)?,
            "lambda" => self.lambda = parse_value(key, v)?,
            "leak" => self.leak = parse_value(key, v)?,
            "seed" => self.seed = parse_value(key, v)?,
            "side" => self.side = parse_value(key, v)?,
            "depth" => self.depth = parse_value(key, v)?,
            "base_channels" => self.base_channels = parse_value(key, v)?,
            "disc_depth" => self.disc_depth = parse_value(key, v)?,
            "disc_base_channels" => self.disc_base_channels = parse_value(key, v)?,
            "adversarial" => self.adversarial = parse_value(key, v)?,
            "d_steps" => self.d_steps = parse_value(key, v)?,
            "g_steps" => self.g_steps = parse_value(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "augment" => self.augment = parse_value(key, v)?,
            "rotation_deg" => self.rotation_deg = parse_value(key, v)?,
            "hflip_prob" => self.hflip_prob = parse_value(key, v)?,
            "vflip_prob" => self.vflip_prob = parse_value(key, v)?,
            "translation_frac" => self.translation_frac = parse_value(key, v)?,
            "intensity_scale_min" => self.intensity_scale_min = parse_value(key, v)?,
            "intensity_scale_max" => self.intensity_scale_max = parse_value(key, v)?,
            "intensity_shift_min" => self.intensity_shift_min = parse_value(key, v)?,
            "intensity_shift_max" => self.intensity_shift_max = parse_value(key, v)?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Parses flat `key = value` text over the defaults. Blank lines and
    /// lines starting with `#` are ignored.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            cfg.set(k, v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be positive".into());
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive when set".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be finite and non-negative, got {}", self.lr));
        }
        for (k, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{k} must lie in [0,1), got {b}"));
            }
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.batch == 0 || self.d_steps == 0 || self.g_steps == 0 {
            return bad("batch, d_steps and g_steps must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        self.generator_config().validate()?;
        self.discriminator_config().validate()?;
        self.augment_policy().validate()
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            depth: self.depth,
            base_channels: self.base_channels,
            side: self.side,
            leak: self.leak,
            ..GeneratorConfig::default()
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            depth: self.disc_depth,
            base_channels: self.disc_base_channels,
            side: self.side,
            leak: self.leak,
            ..DiscriminatorConfig::default()
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        if !self.augment {
            return AugmentPolicy::none();
        }
        AugmentPolicy {
            rotation: self.rotation_deg > 0.0,
            max_rotation_deg: self.rotation_deg,
            hflip: self.hflip_prob > 0.0,
            hflip_prob: self.hflip_prob,
            vflip: self.vflip_prob > 0.0,
            vflip_prob: self.vflip_prob,
            translation: self.translation_frac > 0.0,
            max_translation_frac: self.translation_frac,
            intensity: (
                self.intensity_scale_min,
                self.intensity_scale_max,
                self.intensity_shift_min,
                self.intensity_shift_max,
            ) != (1.0, 1.0, 0.0, 0.0),
            scale_range: (self.intensity_scale_min, self.intensity_scale_max),
            shift_range: (self.intensity_shift_min, self.intensity_shift_max),
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The resolved configuration in the same `key = value` form `parse` reads.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let max_steps = self.max_steps.map_or("none".to_string(), |n| n.to_string());
        let rows: [(&str, String); 29] = [
            ("epochs", self.epochs.to_string()),
            ("max_steps", max_steps),
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("eps", self.eps.to_string()),
            ("batch", self.batch.to_string()),
            ("lambda", self.lambda.to_string()),
            ("leak", self.leak.to_string()),
            ("seed", self.seed.to_string()),
            ("side", self.side.to_string()),
            ("depth", self.depth.to_string()),
            ("base_channels", self.base_channels.to_string()),
            ("disc_depth", self.disc_depth.to_string()),
            ("disc_base_channels", self.disc_base_channels.to_string()),
            ("adversarial", self.adversarial.to_string()),
            ("d_steps", self.d_steps.to_string()),
            ("g_steps", self.g_steps.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
            ("augment", self.augment.to_string()),
            ("rotation_deg", self.rotation_deg.to_string()),
            ("hflip_prob", self.hflip_prob.to_string()),
            ("vflip_prob", self.vflip_prob.to_string()),
            ("translation_frac", self.translation_frac.to_string()),
            ("intensity_scale_min", self.intensity_scale_min.to_string()),
            ("intensity_scale_max", self.intensity_scale_max.to_string()),
            ("intensity_shift_min", self.intensity_shift_min.to_string()),
            ("intensity_shift_max", self.intensity_shift_max.to_string()),
        ];
        for (k, v) in rows {
            writeln!(f, "{k} = {v}")?;
        }
        Ok(())
    }
}

/// Adam settings and moment state for one network.
#[derive(Clone, Debug)]
pub struct Optimizer {
    pub config: AdamConfig,
    pub state: AdamState,
}

impl Optimizer {
    pub fn new(net: &Network, config: AdamConfig) -> Self {
        Self { config, state: AdamState::for_params(&net.params) }
    }

    fn step(&mut self, net: &mut Network) -> Result<()> {
        adam_step(&mut net.params, &mut self.state, &self.config)
    }
}

/// Loss weighting and update ratio used by every step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSettings {
    pub lambda: f64,
    pub adversarial: AdversarialForm,
    pub d_steps: usize,
    pub g_steps: usize,
}

impl From<&TrainConfig> for StepSettings {
    fn from(cfg: &TrainConfig) -> Self {
        Self { lambda: cfg.lambda, adversarial: cfg.adversarial, d_steps: cfg.d_steps, g_steps: cfg.g_steps }
    }
}

/// Generator forward on its own tape, kept for the generator update.
pub struct GeneratorPass {
    tape: Tape,
    binding: Binding,
    x: Var,
    fake: Var,
}

impl GeneratorPass {
    pub fn run(gen: &mut Network, x: &Tensor) -> Result<Self> {
        let mut tape = Tape::new();
        let binding = gen.bind(&mut tape, true)?;
        let xv = tape.constant(x.clone())?;
        let fake = generator_forward(gen, &mut tape, &binding, xv)?;
        Ok(Self { tape, binding, x: xv, fake })
    }

    /// The generated map `G(x)`.
    pub fn fake(&self) -> &Tensor {
        self.tape.value(self.fake)
    }
}

/// One Adam step on the discriminator for the real pair `(x, y)` and the
/// generated pair `(x, fake)`. Returns the discriminator loss.
pub fn discriminator_step(
    disc: &mut Network,
    opt_d: &mut Optimizer,
    x: &Tensor,
    y: &Tensor,
    fake: &Tensor,
) -> Result<f64> {
    let mut tape = Tape::new();
    let bind = disc.bind(&mut tape, true)?;
    let xv = tape.constant(x.clone())?;
    let yv = tape.constant(y.clone())?;
    // generated map enters as a constant: no gradient reaches G
    let fv = tape.constant(fake.clone())?;
    let real = discriminator_forward(disc, &mut tape, &bind, xv, yv)?;
    let faked = discriminator_forward(disc, &mut tape, &bind, xv, fv)?;
    let loss = adversarial_loss_d(&mut tape, real, faked)?;
    let value = tape.value(loss).data()[0];
    check_finite("d_loss", value)?;
    tape.backward(loss)?;
    disc.zero_grad();
    disc.absorb_grads(&tape, &bind)?;
    opt_d.step(disc)?;
    Ok(value)
}

/// One Adam step on the generator through a fresh discriminator forward
/// whose parameters are held constant. Fills the generator terms of a
/// report.
pub fn generator_step(
    pass: GeneratorPass,
    gen: &mut Network,
    disc: &mut Network,
    opt_g: &mut Optimizer,
    y: &Tensor,
    settings: &StepSettings,
) -> Result<LossReport> {
    let GeneratorPass { mut tape, binding, x, fake } = pass;
    let d_bind = disc.bind(&mut tape, false)?;
    let yv = tape.constant(y.clone())?;
    let p = discriminator_forward(disc, &mut tape, &d_bind, x, fake)?;
    let loss = generator_objective(&mut tape, p, yv, fake, settings.lambda, settings.adversarial)?;
    let report = LossReport {
        d_loss: 0.0,
        g_adv: tape.value(loss.adversarial).data()[0],
        g_l1: tape.value(loss.l1).data()[0],
        g_total: tape.value(loss.total).data()[0],
    };
    if let Some(term) = report.non_finite_term() {
        return Err(Error::NonFinite { op: term.to_string() });
    }
    tape.backward(loss.total)?;
    gen.zero_grad();
    gen.absorb_grads(&tape, &binding)?;
    opt_g.step(gen)?;
    Ok(report)
}

/// `d_steps` discriminator updates followed by `g_steps` generator updates
/// on a model-range batch (`x` is `[N,3,H,W]`, `y` is `[N,1,H,W]`). The
/// reported losses are those of the last update of each network.
pub fn train_step_tensors(
    x: &Tensor,
    y: &Tensor,
    gen: &mut Network,
    disc: &mut Network,
    opt_g: &mut Optimizer,
    opt_d: &mut Optimizer,
    settings: &StepSettings,
) -> Result<LossReport> {
    if settings.lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be non-negative, got {}", settings.lambda)));
    }
    let pass = GeneratorPass::run(gen, x)?;
    let mut d_loss = 0.0;
    for _ in 0..settings.d_steps {
        d_loss = discriminator_step(disc, opt_d, x, y, pass.fake())?;
    }
    let mut report = generator_step(pass, gen, disc, opt_g, y, settings)?;
    for _ in 1..settings.g_steps {
        let pass = GeneratorPass::run(gen, x)?;
        report = generator_step(pass, gen, disc, opt_g, y, settings)?;
    }
    report.d_loss = d_loss;
    Ok(report)
}

fn check_finite(term: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op: term.to_string() })
    }
}

/// [`train_step_tensors`] on a single pair.
pub fn train_step(
    pair: &SamplePair,
    gen: &mut Network,
    disc: &mut Network,
    opt_g: &mut Optimizer,
    opt_d: &mut Optimizer,
    settings: &StepSettings,
) -> Result<LossReport> {
    let (x, y) = pair.model_tensors()?;
    train_step_tensors(&x, &y, gen, disc, opt_g, opt_d, settings)
}

/// Stacks pairs of equal size into `[N,3,H,W]` and `[N,1,H,W]` tensors.
pub fn stack_batch(pairs: &[SamplePair]) -> Result<(Tensor, Tensor)> {
    let Some(first) = pairs.first() else {
        return Err(Error::Config("empty batch".into()));
    };
    let (h, w) = first.image.dims();
    let mut xs = Vec::with_capacity(pairs.len() * 3 * h * w);
    let mut ys = Vec::with_capacity(pairs.len() * h * w);
    for p in pairs {
        if p.image.dims() != (h, w) {
            return Err(Error::shape(
                "stack_batch",
                format!("{} is {:?}, batch is {:?}", p.id, p.image.dims(), (h, w)),
            ));
        }
        let (x, y) = p.model_tensors()?;
        xs.extend_from_slice(x.data());
        ys.extend_from_slice(y.data());
    }
    Ok((Tensor::new(&[pairs.len(), 3, h, w], xs)?, Tensor::new(&[pairs.len(), 1, h, w], ys)?))
}

/// Generator and discriminator built from a config, with their optimizers.
pub struct Trainer {
    pub config: TrainConfig,
    pub generator: Network,
    pub discriminator: Network,
    pub opt_g: Optimizer,
    pub opt_d: Optimizer,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = build_generator(&config.generator_config(), derive_seed(config.seed, &[1]))?;
        let discriminator = build_discriminator(&config.discriminator_config(), derive_seed(config.seed, &[2]))?;
        let adam = config.adam_config();
        let opt_g = Optimizer::new(&generator, adam);
        let opt_d = Optimizer::new(&discriminator, adam);
        Ok(Self { config, generator, discriminator, opt_g, opt_d })
    }

    pub fn step(&mut self, x: &Tensor, y: &Tensor) -> Result<LossReport> {
        let settings = StepSettings::from(&self.config);
        train_step_tensors(
            x,
            y,
            &mut self.generator,
            &mut self.discriminator,
            &mut self.opt_g,
            &mut self.opt_d,
            &settings,
        )
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_generator(&dir.join(GENERATOR_CKPT), &self.generator)?;
        save_discriminator(&dir.join(DISCRIMINATOR_CKPT), &self.discriminator)
    }
}

/// SplitMix64 finalizer, used to derive independent seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for a sub-stream of `seed` identified by `path`.
pub fn derive_seed(seed: u64, path: &[u64]) -> u64 {
    path.iter().fold(mix(seed), |acc, &p| mix(acc ^ mix(p)))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub steps: usize,
    pub epochs_run: usize,
    pub losses: Vec<LossReport>,
    pub loss_csv: PathBuf,
    pub generator_ckpt: PathBuf,
    pub discriminator_ckpt: PathBuf,
}

fn worker_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?;
        builder = builder.num_threads(n.max(1));
    }
    builder.build().map_err(|e| Error::Config(format!("worker pool: {e}")))
}

/// Augmented training pairs for steps `[start, end)` of one epoch. Each
/// sample draws from its own seed, so results do not depend on the number
/// of workers.
fn prepare(
    pool: &rayon::ThreadPool,
    dataset: &[SamplePair],
    order: &[usize],
    policy: &AugmentPolicy,
    seed: u64,
    epoch: usize,
    range: std::ops::Range<usize>,
) -> Vec<SamplePair> {
    pool.install(|| {
        range
            .into_par_iter()
            .map(|pos| {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &[3, epoch as u64, pos as u64]));
                augment(&dataset[order[pos]], policy, &mut rng)
            })
            .collect()
    })
}

/// Trains from scratch on `dataset`, writing the loss CSV and checkpoints
/// into `cfg.out_dir`. An epoch visits every pair once in a seeded shuffled
/// order, `batch` pairs per step; every pair is freshly augmented.
pub fn train(cfg: &TrainConfig, dataset: &[SamplePair]) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let multiple = 1usize << cfg.depth;
    for p in dataset {
        p.validate()?;
    }
    let padded: Vec<SamplePair>;
    let dataset = if dataset.iter().all(|p| p.image.dims() == padded_dims(p.image.dims(), multiple)) {
        dataset
    } else {
        padded = dataset.iter().map(|p| reflect_pad_pair(p, multiple)).collect();
        &padded
    };
    let mut trainer = Trainer::new(cfg.clone())?;
    let policy = cfg.augment_policy();
    let pool = worker_pool()?;

    let dir = &cfg.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let loss_csv = dir.join(LOSS_CSV);
    let file = File::create(&loss_csv).map_err(|e| Error::io(&loss_csv, e))?;
    let mut log = BufWriter::new(file);
    let io = |e| Error::io(&loss_csv, e);
    writeln!(log, "{}", LossReport::CSV_HEADER).map_err(io)?;

    let steps_per_epoch = dataset.len().div_ceil(cfg.batch);
    let mut losses = Vec::new();
    let mut epochs_run = 0;
    let chunk = 32 * cfg.batch;
    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[4, epoch as u64])));
        let mut start = 0;
        while start < order.len() {
            let end = (start + chunk).min(order.len());
            let prepared = prepare(&pool, dataset, &order, &policy, cfg.seed, epoch, start..end);
            for batch in prepared.chunks(cfg.batch) {
                if cfg.max_steps.is_some_and(|m| losses.len() >= m) {
                    break 'epochs;
                }
                let (x, y) = stack_batch(batch)?;
                let report = trainer.step(&x, &y)?;
                writeln!(log, "{}", report.csv_row(losses.len())).map_err(io)?;
                losses.push(report);
            }
            start = end;
        }
        epochs_run = epoch + 1;
        if cfg.checkpoint_every > 0 && epochs_run % cfg.checkpoint_every == 0 {
            log.flush().map_err(io)?;
            trainer.save(dir)?;
        }
    }
    debug_assert!(losses.len() <= cfg.epochs * steps_per_epoch);
    log.flush().map_err(io)?;
    trainer.save(dir)?;
    Ok(TrainOutcome {
        steps: losses.len(),
        epochs_run,
        losses,
        loss_csv,
        generator_ckpt: dir.join(GENERATOR_CKPT),
        discriminator_ckpt: dir.join(DISCRIMINATOR_CKPT),
    })
}

fn meta(values: &[f64]) -> Tensor {
    Tensor::new(&[values.len()], values.to_vec()).expect("1-d shape matches length")
}

fn save_with_meta(path: &Path, net: &Network, key: &str, m: Tensor) -> Result<()> {
    save_checkpoint(path, net.state_tensors().chain(std::iter::once((key, &m))))
}

/// Writes a generator's state plus its architecture knobs.
pub fn save_generator(path: &Path, net: &Network) -> Result<()> {
    let Architecture::Generator(c) = &net.arch else {
        return Err(Error::Checkpoint("not a generator".into()));
    };
    let m = meta(&[
        c.input_channels as f64,
        c.output_channels as f64,
        c.depth as f64,
        c.base_channels as f64,
        c.side as f64,
        c.leak,
    ]);
    save_with_meta(path, net, GENERATOR_META, m)
}

pub fn save_discriminator(path: &Path, net: &Network) -> Result<()> {
    let Architecture::Discriminator(c) = &net.arch else {
        return Err(Error::Checkpoint("not a discriminator".into()));
    };
    let m = meta(&[
        c.x_channels as f64,
        c.y_channels as f64,
        c.depth as f64,
        c.base_channels as f64,
        c.side as f64,
        c.leak,
    ]);
    save_with_meta(path, net, DISCRIMINATOR_META, m)
}

fn meta_fields(store: &ParamStore, key: &str, path: &Path) -> Result<Vec<f64>> {
    let t = store.get(key).map_err(|_| Error::Checkpoint(format!("{}: no {key} record", path.display())))?;
    if t.numel() != 6 {
        return Err(Error::Checkpoint(format!("{}: {key} has {} values, expected 6", path.display(), t.numel())));
    }
    Ok(t.data().to_vec())
}

/// Rebuilds a generator from a checkpoint, in eval mode.
pub fn load_generator(path: &Path) -> Result<Network> {
    let store = load_checkpoint(path)?;
    let m = meta_fields(&store, GENERATOR_META, path)?;
    let cfg = GeneratorConfig {
        input_channels: m[0] as usize,
        output_channels: m[1] as usize,
        depth: m[2] as usize,
        base_channels: m[3] as usize,
        side: m[4] as usize,
        leak: m[5],
    };
    let mut net = build_generator(&cfg, 0)?;
    net.load_state(&store)?;
    net.set_mode(Mode::Eval);
    Ok(net)
}

pub fn load_discriminator(path: &Path) -> Result<Network> {
    let store = load_checkpoint(path)?;
    let m = meta_fields(&store, DISCRIMINATOR_META, path)?;
    let cfg = DiscriminatorConfig {
        x_channels: m[0] as usize,
        y_channels: m[1] as usize,
        depth: m[2] as usize,
        base_channels: m[3] as usize,
        side: m[4] as usize,
        leak: m[5],
    };
    let mut net = build_discriminator(&cfg, 0)?;
    net.load_state(&store)?;
    net.set_mode(Mode::Eval);
    Ok(net)
}

/// Mirror index into `0..n` without repeating the edge sample.
fn reflect(mut i: usize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    i %= period;
    if i < n {
        i
    } else {
        period - i
    }
}

fn padded_dims((h, w): (usize, usize), multiple: usize) -> (usize, usize) {
    (h.div_ceil(multiple) * multiple, w.div_ceil(multiple) * multiple)
}

fn reflect_pad_plane(plane: &Plane, multiple: usize) -> Plane {
    let (h, w) = plane.dims();
    let (ph, pw) = padded_dims((h, w), multiple);
    let mut out = Plane::filled(ph, pw, 0.0);
    for y in 0..ph {
        for x in 0..pw {
            out.set(y, x, plane.at(reflect(y, h), reflect(x, w)));
        }
    }
    out
}

/// Reflect-pads image, label and mask alike, as [`reflect_pad`] does for
/// inference, so training accepts any image size.
pub fn reflect_pad_pair(pair: &SamplePair, multiple: usize) -> SamplePair {
    SamplePair {
        id: pair.id.clone(),
        image: reflect_pad(&pair.image, multiple),
        label: reflect_pad_plane(&pair.label, multiple),
        mask: pair.mask.as_ref().map(|m| reflect_pad_plane(m, multiple)),
    }
}

/// Pads bottom and right by reflection up to multiples of `multiple`.
pub fn reflect_pad(image: &RgbImage, multiple: usize) -> RgbImage {
    let (h, w) = image.dims();
    let (ph, pw) = padded_dims((h, w), multiple);
    if (ph, pw) == (h, w) {
        return image.clone();
    }
    let mut out = RgbImage::filled(ph, pw, 0.0);
    for y in 0..ph {
        for x in 0..pw {
            out.set_pixel(y, x, image.pixel(reflect(y, h), reflect(x, w)));
        }
    }
    out
}

/// Vessel probability map in `[0,1]` with the image's size. The generator
/// runs in eval mode; images whose sides are not multiples of `2^depth`
/// are reflect-padded and the output cropped back.
pub fn segment(gen: &mut Network, image: &RgbImage) -> Result<Plane> {
    let Architecture::Generator(cfg) = &gen.arch else {
        return Err(Error::Config("segment needs a generator".into()));
    };
    let (h, w) = image.dims();
    let padded = reflect_pad(image, 1 << cfg.depth);
    let mut x = padded.to_tensor();
    crate::datapipe::to_model_range_in_place(x.data_mut())?;

    let previous = gen.mode;
    gen.set_mode(Mode::Eval);
    let mut tape = Tape::new();
    let out = gen.bind(&mut tape, false).and_then(|bind| {
        let xv = tape.constant(x)?;
        generator_forward(gen, &mut tape, &bind, xv)
    });
    gen.set_mode(previous);
    let out = tape.value(out?);
    let (_, c, _, pw) = out.dims4("segment")?;
    if c != 1 {
        return Err(Error::shape("segment", format!("generator emits {c} channels, expected 1")));
    }
    let mut data = Vec::with_capacity(h * w);
    for y in 0..h {
        data.extend_from_slice(&out.data()[y * pw..y * pw + w]);
    }
    from_model_range_in_place(&mut data)?;
    Plane::new(h, w, data)
}

/// Loads a generator checkpoint and segments `image`.
pub fn segment_checkpoint(path: &Path, image: &RgbImage) -> Result<Plane> {
    let mut gen = load_generator(path)?;
    segment(&mut gen, image)
}
