//! `esr-forge`: simulate, train, super-resolve and verify from the shell.
//!
//! Exit codes: 0 success, 1 failed validation or check, 2 usage error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use esr_forge_core::bie::ScaleMode;
use esr_forge_core::eval::{evaluate, render_frame};
use esr_forge_core::event::{frame_sequence, parse_event_file, write_event_file};
use esr_forge_core::model::{load_checkpoint, save_checkpoint, Checkpoint, ModelConfig, ModelState, Variant};
use esr_forge_core::pipeline::{load_samples, super_resolve_stream};
use esr_forge_core::sim::{make_pair, SceneConfig};
use esr_forge_core::train::{write_loss_csv, TrainConfig, Trainer};
use esr_forge_core::verify::{gradient_suite, selftest, GRAD_TOLERANCE};
use esr_forge_core::kv::KeyValues;

const THREADS_ENV: &str = "ESR_FORGE_THREADS";

#[derive(Parser)]
#[command(name = "esr-forge", version, about = "Event-stream super-resolution toolkit")]
struct Cli {
    /// Worker threads for per-sample gradients (overridden by ESR_FORGE_THREADS).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize an aligned LR/HR event-stream pair from a scene file.
    Simulate(SimulateArgs),
    /// Train a model on `<name>.lr.events` / `<name>.hr.events` pairs.
    Train(TrainArgs),
    /// Super-resolve an event file with a trained checkpoint.
    Sr(SrArgs),
    /// Compare a checkpoint against bicubic upsampling.
    Eval(EvalArgs),
    /// Write count frames of an event file as PPM images.
    Render(RenderArgs),
    /// Run the 64-bit gradient suite.
    Gradcheck(GradcheckArgs),
    /// Run every invariant family.
    Selftest,
}

#[derive(Args)]
struct SimulateArgs {
    /// Scene description (key=value).
    #[arg(long)]
    scene: PathBuf,
    /// Upscaling factor; overrides `scale` in the scene file.
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    out_lr: PathBuf,
    #[arg(long)]
    out_hr: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of paired event files.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 4)]
    scale: usize,
    #[arg(long, default_value = "full")]
    variant: Variant,
    #[arg(long, default_value_t = 128)]
    c: usize,
    #[arg(long, default_value_t = 5)]
    n: usize,
    #[arg(long, default_value_t = 128)]
    m: usize,
    /// Frames per training sequence.
    #[arg(long, default_value_t = 9)]
    t: usize,
    /// Total iterations (a resumed run stops at the same count).
    #[arg(long, default_value_t = 1000)]
    iters: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output checkpoint.
    #[arg(long)]
    ckpt: PathBuf,
    /// Loss trace CSV; defaults to `<ckpt>.loss.csv`.
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    /// Frame length in microseconds.
    #[arg(long, default_value_t = 10_000)]
    window_us: u64,
    /// Training settings file (key=value); flags above take precedence
    /// for seed, iterations and window.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    no_augment: bool,
    /// Disable recurrent interaction state.
    #[arg(long)]
    no_carry: bool,
    #[arg(long, default_value = "eq2")]
    scale_mode: ScaleMode,
    /// Continue from this checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Also write the checkpoint every K iterations.
    #[arg(long)]
    checkpoint_every: Option<u64>,
}

#[derive(Args)]
struct SrArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    window_us: u64,
    /// Frames per recurrent chunk; defaults to the checkpoint's window.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    window_us: u64,
    #[arg(long)]
    t: Option<usize>,
    /// Also write the report as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct RenderArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    window_us: u64,
    /// Number of frames; defaults to enough to cover the stream.
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Number of seeds, starting at 0.
    #[arg(long, default_value_t = 5)]
    seeds: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("error: {THREADS_ENV}={v} is not a positive integer");
                return ExitCode::from(2);
            }
        },
        Err(_) => cli.threads.max(1),
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a, threads),
        Command::Sr(a) => sr(a),
        Command::Eval(a) => eval(a),
        Command::Render(a) => render(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest => run_selftest(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).with_context(|| format!("cannot write {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scene = SceneConfig::parse(&read_text(&a.scene)?).with_context(|| format!("scene {}", a.scene.display()))?;
    let scale = a.scale.unwrap_or(scene.scale);
    let (lr, hr) = make_pair(&scene.spec, scale, scene.params)?;
    write_file(&a.out_lr, write_event_file(&lr))?;
    write_file(&a.out_hr, write_event_file(&hr))?;
    info!(
        "wrote {} LR events ({}x{}) and {} HR events ({}x{})",
        lr.len(),
        lr.width(),
        lr.height(),
        hr.len(),
        hr.width(),
        hr.height()
    );
    Ok(())
}

fn train(a: TrainArgs, threads: usize) -> Result<()> {
    let mut tc = match &a.config {
        Some(path) => TrainConfig::from_kv(&KeyValues::parse(&read_text(path)?)?)?,
        None => TrainConfig::default(),
    };
    tc.seed = a.seed;
    tc.max_iters = a.iters;
    tc.window = a.t;
    tc.threads = threads;
    if let Some(b) = a.batch {
        tc.batch_size = b;
    }
    if let Some(lr) = a.lr {
        tc.lr0 = lr;
    }
    if a.no_augment {
        tc.augment = false;
    }
    tc.validate()?;

    let samples = load_samples(&a.data, a.window_us, a.t)?;
    if samples.is_empty() {
        bail!("no training data in {}", a.data.display());
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let ckpt: Checkpoint<f32> = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
            if ckpt.model.config().scale != samples[0].scale() {
                bail!(
                    "checkpoint scale {} does not match data scale {}",
                    ckpt.model.config().scale,
                    samples[0].scale()
                );
            }
            Trainer::resume(ckpt, tc.clone(), samples)?
        }
        None => {
            if samples[0].scale() != a.scale {
                bail!("data has scale {}, --scale is {}", samples[0].scale(), a.scale);
            }
            let config = ModelConfig {
                channels: a.c,
                blocks: a.n,
                structures: a.m,
                scale: a.scale,
                window: a.t,
                variant: a.variant,
                carry_state: !a.no_carry,
                scale_mode: a.scale_mode,
                seed: a.seed,
            };
            Trainer::new(ModelState::new(config)?, tc.clone(), samples)?
        }
    };
    info!(
        "training {} ({} parameters) from iteration {} to {}",
        trainer.model().config().variant,
        trainer.model().count_params(),
        trainer.iteration(),
        tc.max_iters
    );
    let every = a.checkpoint_every.unwrap_or(0);
    let log_every = (tc.max_iters / 20).max(1);
    let records = trainer.run(|rec, t| {
        if rec.iter % log_every == 0 || rec.iter == 1 {
            info!("iter {} lr {:.3e} loss {:.6}", rec.iter, rec.lr, rec.loss);
        }
        if every > 0 && rec.iter % every == 0 {
            save_checkpoint(&a.ckpt, &t.checkpoint())?;
        }
        Ok(())
    })?;
    save_checkpoint(&a.ckpt, &trainer.checkpoint())?;
    let csv_path = a.loss_csv.unwrap_or_else(|| {
        let mut p = a.ckpt.clone().into_os_string();
        p.push(".loss.csv");
        PathBuf::from(p)
    });
    let mut csv = Vec::new();
    write_loss_csv(&mut csv, &records)?;
    write_file(&csv_path, csv)?;
    info!("wrote {} and {}", a.ckpt.display(), csv_path.display());
    Ok(())
}

fn sr(a: SrArgs) -> Result<()> {
    let ckpt: Checkpoint<f32> = load_checkpoint(&a.ckpt).with_context(|| format!("checkpoint {}", a.ckpt.display()))?;
    let stream = parse_event_file(&read_text(&a.input)?).with_context(|| format!("events {}", a.input.display()))?;
    if let Some((w, h)) = ckpt.lr_size {
        if (w as u32, h as u32) != (stream.width(), stream.height()) {
            bail!(
                "checkpoint was trained on {w}x{h} input, {} is {}x{}",
                a.input.display(),
                stream.width(),
                stream.height()
            );
        }
    }
    let t = a.t.unwrap_or(ckpt.model.config().window);
    let out = super_resolve_stream(&ckpt.model, &stream, a.window_us, t)?;
    write_file(&a.out, write_event_file(&out.stream))?;
    info!(
        "wrote {} events ({}x{}) from {} frames",
        out.stream.len(),
        out.stream.width(),
        out.stream.height(),
        out.frames.len()
    );
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let ckpt: Checkpoint<f32> = load_checkpoint(&a.ckpt).with_context(|| format!("checkpoint {}", a.ckpt.display()))?;
    let t = a.t.unwrap_or(ckpt.model.config().window);
    let samples = load_samples(&a.data, a.window_us, t)?;
    if samples.is_empty() {
        bail!("no evaluation data in {}", a.data.display());
    }
    let report = evaluate(&ckpt.model, &samples)?;
    print!("{}", report.table());
    if let Some(path) = &a.csv {
        write_file(path, report.to_csv())?;
    }
    Ok(())
}

fn render(a: RenderArgs) -> Result<()> {
    let stream = parse_event_file(&read_text(&a.input)?).with_context(|| format!("events {}", a.input.display()))?;
    if a.window_us == 0 {
        bail!("--window-us must be at least 1");
    }
    let count = a.frames.unwrap_or_else(|| match (stream.first_timestamp(), stream.last_timestamp()) {
        (Some(t0), Some(t1)) => ((t1 - t0) / a.window_us + 1) as usize,
        _ => 1,
    });
    let frames = frame_sequence(&stream, a.window_us, count)?;
    fs::create_dir_all(&a.out_dir).with_context(|| format!("cannot create {}", a.out_dir.display()))?;
    for (i, f) in frames.iter().enumerate() {
        let path = a.out_dir.join(format!("frame_{i:04}.ppm"));
        render_frame(f, &path).with_context(|| format!("cannot write {}", path.display()))?;
    }
    info!("wrote {} frames to {}", frames.len(), a.out_dir.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<()> {
    if a.seeds == 0 {
        bail!("--seeds must be at least 1");
    }
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let report = gradient_suite(&seeds)?;
    for c in &report.cases {
        println!(
            "{:<4} {:<32} seed {:<3} coords {:<6} max rel err {:.3e}",
            if c.max_rel_err <= GRAD_TOLERANCE { "ok" } else { "FAIL" },
            c.name,
            c.seed,
            c.coords,
            c.max_rel_err
        );
    }
    println!(
        "max rel err {:.3e} (tolerance {:.0e}) over {} cases in {:.1}s",
        report.max_rel_err(),
        GRAD_TOLERANCE,
        report.cases.len(),
        report.elapsed.as_secs_f64()
    );
    match report.first_failure() {
        None => Ok(()),
        Some(c) => Err(anyhow!(
            "gradient check `{}` (seed {}) failed: rel err {:.3e} at {:?}",
            c.name,
            c.seed,
            c.max_rel_err,
            c.worst
        )),
    }
}

fn run_selftest() -> Result<()> {
    let outcomes = selftest();
    for o in &outcomes {
        match &o.failure {
            None => println!("PASS {}", o.name),
            Some(msg) => println!("FAIL {}: {msg}", o.name),
        }
    }
    match outcomes.iter().find(|o| !o.passed()) {
        None => Ok(()),
        Some(o) => Err(anyhow!("{}: {}", o.name, o.failure.as_deref().unwrap_or(""))),
    }
}
