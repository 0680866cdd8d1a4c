use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand};
use vesselgan::datapipe::{
    gen_phantom, load_manifest, read_image, read_plane, read_plane_f32, write_manifest, write_plane_f32,
    write_plane_pgm, write_rgb, ManifestRow, PhantomConfig, Plane,
};
use vesselgan::gradcheck::run_suite;
use vesselgan::metrics::{evaluate_set, sweep_thresholds, write_reports_csv, EvalItem};
use vesselgan::trainer::{load_generator, segment, train, TrainConfig, THREADS_ENV};

#[derive(Parser)]
#[command(name = "vesselgan", version, about = "Conditional-GAN retinal vessel segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic image/label/mask triples and a manifest.
    Phantom {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        side: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a generator/discriminator pair from a manifest.
    Train {
        /// key = value file; keys left out keep their defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        /// Overrides `out_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write probability maps (PGM plus a raw f32 sidecar) for one image or a manifest.
    Segment {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        image: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score probability maps against a manifest's labels.
    Eval {
        /// Directory holding `<id>.f32` sidecars or `<id>.pgm`/`<id>.png` maps.
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        /// Evaluate every threshold from 0.05 to 0.95 instead of one.
        #[arg(long)]
        sweep: bool,
        /// CSV destination, `<pred>/eval.csv` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Score every pixel even when the manifest lists a field-of-view mask.
        #[arg(long)]
        ignore_mask: bool,
    },
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            eprint!("{text}");
            if !text.contains("Usage:") {
                eprintln!("\n{}", Cli::command().render_usage());
            }
            return ExitCode::from(2);
        }
    };
    match run(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            // core errors already fold their source into the message
            let mut msg = String::new();
            for cause in e.chain().map(|c| c.to_string()) {
                if !msg.contains(&cause) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&cause);
                }
            }
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}

fn print_config(pairs: &[(&str, String)]) {
    for (k, v) in pairs {
        println!("{k} = {v}");
    }
    println!("{THREADS_ENV} = {}", std::env::var(THREADS_ENV).unwrap_or_else(|_| "unset".into()));
}

fn shown(p: &Path) -> String {
    p.display().to_string()
}

fn run(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Phantom { seed, count, side, out } => {
            print_config(&[
                ("command", "phantom".into()),
                ("seed", seed.to_string()),
                ("count", count.to_string()),
                ("side", side.to_string()),
                ("out", shown(&out)),
            ]);
            phantoms(seed, count, side, &out)?;
        }
        Command::Train { config, manifest, out } => {
            let mut cfg = match &config {
                Some(path) => TrainConfig::load(path)?,
                None => TrainConfig::default(),
            };
            if let Some(out) = out {
                cfg.out_dir = out;
            }
            print_config(&[
                ("command", "train".into()),
                ("config", config.as_deref().map_or("defaults".into(), shown)),
                ("manifest", shown(&manifest)),
            ]);
            print!("{cfg}");
            let data = load_manifest(&manifest)?;
            let outcome = train(&cfg, &data)?;
            println!(
                "trained {} steps over {} epochs; wrote {}, {} and {}",
                outcome.steps,
                outcome.epochs_run,
                shown(&outcome.loss_csv),
                shown(&outcome.generator_ckpt),
                shown(&outcome.discriminator_ckpt)
            );
        }
        Command::Segment { ckpt, image, manifest, out } => {
            print_config(&[
                ("command", "segment".into()),
                ("ckpt", shown(&ckpt)),
                ("image", image.as_deref().map_or("-".into(), shown)),
                ("manifest", manifest.as_deref().map_or("-".into(), shown)),
                ("out", shown(&out)),
            ]);
            let inputs = match (image, manifest) {
                (Some(path), _) => {
                    let id = path.file_stem().context("image path has no file name")?.to_string_lossy().into_owned();
                    vec![(id, read_image(&path)?)]
                }
                (None, Some(m)) => load_manifest(&m)?.into_iter().map(|p| (p.id, p.image)).collect(),
                (None, None) => bail!("one of --image or --manifest is required"),
            };
            let mut gen = load_generator(&ckpt)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (id, img) in &inputs {
                let prob = segment(&mut gen, img).with_context(|| format!("segmenting {id}"))?;
                write_plane_pgm(&out.join(format!("{id}.pgm")), &prob)?;
                write_plane_f32(&out.join(format!("{id}.f32")), &prob)?;
            }
            println!("wrote {} probability maps to {}", inputs.len(), out.display());
        }
        Command::Eval { pred, manifest, threshold, sweep, out, ignore_mask } => {
            let out = out.unwrap_or_else(|| pred.join("eval.csv"));
            print_config(&[
                ("command", "eval".into()),
                ("pred", shown(&pred)),
                ("manifest", shown(&manifest)),
                ("threshold", if sweep { "sweep".into() } else { threshold.to_string() }),
                ("region", if ignore_mask { "whole image" } else { "mask when listed" }.into()),
                ("out", shown(&out)),
            ]);
            evaluate(&pred, &manifest, threshold, sweep, ignore_mask, &out)?;
        }
        Command::Gradcheck { seed } => {
            print_config(&[("command", "gradcheck".into()), ("seed", seed.to_string())]);
            let results = run_suite(seed)?;
            for r in &results {
                println!("{r}");
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            println!("{} checks, {failed} failed", results.len());
            return Ok(failed == 0);
        }
    }
    Ok(true)
}

fn phantoms(seed: u64, count: usize, side: usize, out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let cfg = PhantomConfig::default();
    let mut rows = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let pair = gen_phantom(seed + i, side, &cfg)?;
        let row = ManifestRow {
            image: format!("{}.ppm", pair.id),
            label: format!("{}_label.pgm", pair.id),
            mask: Some(format!("{}_mask.pgm", pair.id)),
            id: pair.id.clone(),
        };
        write_rgb(&out.join(&row.image), &pair.image)?;
        write_plane_pgm(&out.join(&row.label), &pair.label)?;
        if let (Some(m), Some(name)) = (&pair.mask, &row.mask) {
            write_plane_pgm(&out.join(name), m)?;
        }
        rows.push(row);
    }
    write_manifest(&out.join("manifest.csv"), &rows)?;
    println!("wrote {count} phantoms to {}", out.display());
    Ok(())
}

fn prediction(pred: &Path, id: &str, dims: (usize, usize)) -> Result<Plane> {
    let sidecar = pred.join(format!("{id}.f32"));
    if sidecar.is_file() {
        return Ok(read_plane_f32(&sidecar, dims.0, dims.1)?);
    }
    for ext in ["pgm", "png"] {
        let path = pred.join(format!("{id}.{ext}"));
        if path.is_file() {
            return Ok(read_plane(&path)?);
        }
    }
    bail!("no prediction for {id} in {}", pred.display())
}

fn evaluate(pred: &Path, manifest: &Path, threshold: f64, sweep: bool, ignore_mask: bool, out: &Path) -> Result<()> {
    let mut pairs = load_manifest(manifest)?;
    if ignore_mask {
        pairs.iter_mut().for_each(|p| p.mask = None);
    }
    let probs = pairs.iter().map(|p| prediction(pred, &p.id, p.label.dims())).collect::<Result<Vec<_>>>()?;
    let items: Vec<EvalItem> = pairs
        .iter()
        .zip(&probs)
        .map(|(p, prob)| EvalItem { id: &p.id, prob, gt: &p.label, mask: p.mask.as_ref() })
        .collect();
    let thresholds = if sweep { sweep_thresholds() } else { vec![threshold] };
    let reports = thresholds.iter().map(|&t| evaluate_set(&items, t)).collect::<Result<Vec<_>, _>>()?;
    let file = fs::File::create(out).with_context(|| format!("creating {}", out.display()))?;
    write_reports_csv(std::io::BufWriter::new(file), &reports).with_context(|| format!("writing {}", out.display()))?;
    let fmt = |v: Option<f64>| v.map_or("undefined".into(), |v| format!("{v:.4}"));
    for r in &reports {
        let s = &r.micro.scores;
        println!(
            "threshold {}: micro accuracy {} sensitivity {} specificity {} f_measure {}",
            r.threshold,
            fmt(s.accuracy),
            fmt(s.sensitivity),
            fmt(s.specificity),
            fmt(s.f_measure)
        );
    }
    Ok(())
}
