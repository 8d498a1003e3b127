//! The `tauflow` command line.
//!
//! Every failure is reported as one line on stderr, `error[<kind>]: <message>`,
//! with exit code 2 for usage errors and 1 for everything else.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::accounting::CostReport;
use crate::checkpoint;
use crate::config::ModelConfig;
use crate::data::{self, holdout, load_dir, pnm, Sample};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::metrics::BinaryMask;
use crate::model::TauFlowNet;
use crate::tensor::{kernels, Tensor};
use crate::train::{evaluate, train};

#[derive(Parser, Debug)]
#[command(name = "tauflow", version, about = "Complexity-adaptive segmentation with liquid time-constant dynamics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a directory of images.
    Eval(EvalArgs),
    /// Compare autodiff against finite differences.
    Gradcheck {
        #[arg(long)]
        module: Option<String>,
        /// Finite-difference step.
        #[arg(long, default_value_t = gradcheck::DEFAULT_STEP)]
        eps: f64,
    },
    /// Print parameter counts and FLOPs.
    Cost {
        #[arg(long, default_value = "default")]
        config: String,
        /// Report a single active-group count.
        #[arg(long)]
        groups: Option<usize>,
        /// Input resolution used for FLOPs.
        #[arg(long, default_value_t = 224)]
        size: usize,
        #[arg(long)]
        json: bool,
    },
    /// Write synthetic `<id>.ppm` / `<id>_mask.pgm` pairs.
    Synth {
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 224)]
        size: usize,
    },
    /// Segment one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Config file, or `default` / `reduced`.
    #[arg(long, default_value = "default")]
    config: String,
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    /// Train on N generated samples instead of a directory.
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long)]
    out: PathBuf,
    /// Metric log; defaults to the checkpoint path with a `.tsv` extension.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Fraction of samples held out for validation.
    #[arg(long, default_value_t = 0.2)]
    val_fraction: f64,
    /// Validate on the training samples (no hold-out).
    #[arg(long)]
    val_on_train: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, conflicts_with = "synth", required_unless_present = "synth")]
    data: Option<PathBuf>,
    #[arg(long)]
    synth: Option<usize>,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn kind(e: &Error) -> &'static str {
    match e {
        Error::Tensor(_) => "tensor",
        Error::Config(_) => "config",
        Error::Io { .. } => "io",
        Error::Format { .. } => "format",
        Error::Checkpoint { .. } => "checkpoint",
        Error::NonFiniteLoss { .. } => "non_finite_loss",
        Error::Invalid(_) => "invalid",
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Runs the CLI on `argv` (including the program name) and returns the exit code.
pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {}", one_line(first));
            return 2;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", kind(&e), one_line(&e.to_string()));
            1
        }
    }
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Gradcheck { module, eps } => run_gradcheck(module.as_deref(), eps),
        Command::Cost { config, groups, size, json } => run_cost(&config, groups, size, json),
        Command::Synth { n, seed, out, size } => run_synth(n, seed, &out, size),
        Command::Infer { ckpt, image, out } => run_infer(&ckpt, &image, &out),
    }
}

fn samples_from(data: Option<&Path>, synth: Option<usize>, seed: u64, size: usize) -> Result<Vec<Sample>> {
    match (data, synth) {
        (Some(dir), _) => load_dir(dir, size),
        (None, Some(n)) if n > 0 => Ok(data::generate_synthetic(n, seed, size, size)),
        _ => Err(Error::Invalid("need --data DIR or --synth N with N > 0".into())),
    }
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut cfg = ModelConfig::load(&a.config)?;
    if let Some(e) = a.epochs {
        cfg.train.max_epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.train.seed = s;
    }
    cfg.validate()?;
    let samples = samples_from(a.data.as_deref(), a.synth, cfg.train.seed, cfg.input_size)?;
    let (train_set, val_set) = if a.val_on_train || samples.len() < 2 {
        (samples.clone(), samples)
    } else {
        if !(a.val_fraction > 0.0 && a.val_fraction < 1.0) {
            return Err(Error::Invalid(format!("--val-fraction {} must be in (0, 1)", a.val_fraction)));
        }
        let n_val = ((samples.len() as f64 * a.val_fraction).round() as usize).clamp(1, samples.len() - 1);
        let split = holdout(samples.len(), n_val, cfg.train.seed)?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
        (pick(&split.train), pick(&split.val))
    };
    let log = a.log.unwrap_or_else(|| a.out.with_extension("tsv"));
    let (net, store) = TauFlowNet::build::<f32>(&cfg, cfg.train.seed)?;
    println!(
        "training on {} samples, validating on {}, {} parameters",
        train_set.len(),
        val_set.len(),
        store.element_count()
    );
    let out = train(&net, store, &train_set, &val_set, Some(&log))?;
    for (i, l) in out.step_losses.iter().take(5).enumerate() {
        println!("step {i} loss {l:.9}");
    }
    checkpoint::save(&a.out, &cfg, &out.best_params)?;
    println!(
        "best val_dice {:.6} at epoch {} of {}; checkpoint {}; log {}",
        out.best_dice,
        out.best_epoch,
        out.epochs_run,
        a.out.display(),
        log.display()
    );
    Ok(())
}

fn run_eval(a: EvalArgs) -> Result<()> {
    let (net, store) = checkpoint::load(&a.ckpt)?.into_model()?;
    let samples = samples_from(a.data.as_deref(), a.synth, a.seed, net.cfg.input_size)?;
    let (summary, rows) = evaluate(&net, &store, &samples, net.cfg.train.batch_size)?;
    for r in &rows {
        println!("sample {}\tdice {:.6}\tiou {:.6}\thd95 {:.4}\tgroups {}", r.id, r.dice, r.iou, r.hd95, r.groups);
    }
    println!("dice {:.6}\tiou {:.6}\thd95 {:.4}\tn {}", summary.dice, summary.iou, summary.hd95, summary.count);
    Ok(())
}

fn run_gradcheck(module: Option<&str>, step: f64) -> Result<()> {
    let results = gradcheck::run(module, step)?;
    let mut failed = Vec::new();
    for r in &results {
        let verdict = if r.passed() { "ok" } else { "FAIL" };
        println!("{:<10} max_rel_error {:.3e}  checked {:>5}  {:.2}s  {verdict}", r.module, r.max_rel_error, r.checked, r.seconds);
        if !r.passed() {
            failed.push(r.module);
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Invalid(format!(
            "gradient check above {:e} for {}",
            gradcheck::TOLERANCE,
            failed.join(", ")
        )))
    }
}

fn run_cost(config: &str, groups: Option<usize>, size: usize, json: bool) -> Result<()> {
    let cfg = ModelConfig::load(config)?;
    if size == 0 || !size.is_multiple_of(4) {
        return Err(Error::Invalid(format!("--size {size} must be a positive multiple of 4")));
    }
    let report = CostReport::new(&cfg, size)?;
    if let Some(g) = groups {
        let f = report
            .flops_at(g)
            .ok_or_else(|| Error::Invalid(format!("--groups {g} outside 1..={}", cfg.max_groups)))?;
        println!("params_total {}\tflops G={g} {f}", report.params_total);
    } else if json {
        println!("{}", report.to_json());
    } else {
        print!("{}", report.table());
    }
    Ok(())
}

fn run_synth(n: usize, seed: u64, out: &Path, size: usize) -> Result<()> {
    if n == 0 || size == 0 {
        return Err(Error::Invalid("--n and --size must be positive".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for i in 0..n as u64 {
        data::save_sample(out, &data::synthetic_sample(seed, i, size, size))?;
    }
    println!("wrote {n} samples to {}", out.display());
    Ok(())
}

fn run_infer(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let (net, store) = checkpoint::load(ckpt)?.into_model()?;
    let raw = pnm::read(image)?;
    if raw.channels != 3 {
        return Err(Error::Format { path: image.into(), reason: "expected a P6 colour image".into() });
    }
    let (h, w) = (raw.height, raw.width);
    let planes = Tensor::from_fn(&[1, 3, h, w], |idx| {
        let (c, p) = (idx / (h * w), idx % (h * w));
        raw.pixels[p * 3 + c] as f32 / 255.0
    });
    let s = net.cfg.input_size;
    let input = kernels::bilinear_resize(&planes, s, s)?;
    let (probs, plan) = net.predict(&store, &input)?;
    let probs = kernels::bilinear_resize(&probs, h, w)?;
    let mask = BinaryMask::from_tensor(&probs)?;
    let pixels = mask.cells().iter().map(|&on| if on { 255 } else { 0 }).collect();
    pnm::write(out, &pnm::RawImage { width: w, height: h, channels: 1, pixels })?;
    println!(
        "image {}\tgroups {}\tcomplexity {:.4}\tforeground {:.4}\tmask {}",
        image.display(),
        plan.per_image_groups[0],
        plan.scores[0],
        mask.count() as f64 / (h * w) as f64,
        out.display()
    );
    Ok(())
}
