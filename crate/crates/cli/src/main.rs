//! `dynstaf`: dataset generation, training, evaluation, verification suites
//! and attention benchmarks.
//!
//! Exit codes: 0 success, 1 failed verification or runtime failure, 2 usage,
//! configuration, or input error. `DYNSTAF_THREADS` caps the worker count.

mod config;
mod manifest;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dynstaf::bench::{bench_attention, plot_series, rows_to_csv, BenchOptions};
use dynstaf::eval::{evaluate_checkpoint, DEFAULT_SCORE_THRESHOLD};
use dynstaf::model::{build_model, save_checkpoint, train, Sample};
use dynstaf::nca::AttentionConfig;
use dynstaf::synthlidar::dataset::{generate_dataset, list_scenes, read_scene, DatasetSpec};
use dynstaf::synthlidar::{RenderConfig, SceneConfig, DEFAULT_SWEEPS};
use dynstaf::verify::{gradient_suite, oracle_suite};

use config::RunConfig;
use manifest::RunRecord;

pub const THREADS_ENV: &str = "DYNSTAF_THREADS";

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, configuration, or input files (exit 2).
    Usage(String),
    /// A verification suite failed (exit 1).
    Verification(String),
    /// Anything else that stopped the run (exit 1).
    Runtime(String),
}

impl CliError {
    fn io(path: &Path, e: std::io::Error) -> Self {
        CliError::Usage(format!("{}: {e}", path.display()))
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Verification(_) | CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "error: {m}"),
            CliError::Verification(m) => write!(f, "verification failed: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
        }
    }
}

impl From<dynstaf::Error> for CliError {
    fn from(e: dynstaf::Error) -> Self {
        use dynstaf::Error as E;
        match e {
            E::Config(_) | E::Input(_) | E::Format(_) | E::Io { .. } | E::Json { .. } | E::Dimension(_) | E::Param(_) => {
                CliError::Usage(e.to_string())
            }
            E::Verification(_) => CliError::Verification(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("`{s}` is not HxW"))?;
    let h = h.trim().parse().map_err(|_| format!("bad height in `{s}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width in `{s}`"))?;
    Ok((h, w))
}

#[derive(Parser, Debug)]
#[command(name = "dynstaf", version, about = "Dual-pathway LiDAR BEV fusion: data, training, evaluation, verification")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a synthetic multi-sweep dataset.
    Gen {
        #[arg(long, default_value_t = 10)]
        scenes: usize,
        #[arg(long, default_value_t = 5)]
        objects: usize,
        #[arg(long, default_value_t = DEFAULT_SWEEPS)]
        sweeps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Object placement radius, meters.
        #[arg(long, default_value_t = 12.0)]
        extent: f32,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write a checkpoint and a JSON-lines log.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (or ground-truth echo stub) on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = DEFAULT_SCORE_THRESHOLD)]
        score_threshold: f32,
        #[arg(long, default_value = "eval_out")]
        out: PathBuf,
    },
    /// Finite-difference gradient checks of every stage.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1e-2)]
        tol: f32,
        #[arg(long, default_value = "gradcheck_out")]
        out: PathBuf,
    },
    /// Windowed attention against the masked-global oracle.
    Oracle {
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 3, 5, 7])]
        k: Vec<usize>,
        #[arg(long, value_delimiter = ',', value_parser = parse_size, default_values = ["8x8", "16x16", "32x32"])]
        sizes: Vec<(usize, usize)>,
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 8])]
        heads: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        tol: f64,
        #[arg(long, default_value = "oracle_out")]
        out: PathBuf,
    },
    /// Time windowed versus masked-global attention.
    Bench {
        #[arg(long, value_delimiter = ',', value_parser = parse_size, default_values = ["16x16", "32x32", "64x64"])]
        sizes: Vec<(usize, usize)>,
        #[arg(long, default_value_t = 7)]
        k: usize,
        #[arg(long, default_value_t = 8)]
        heads: usize,
        /// Query/key and value width (all heads).
        #[arg(long, default_value_t = 64)]
        dim: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        /// Workers for the timed kernels; more than 1 times the parallel path.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "bench_out")]
        out: PathBuf,
    },
}

impl Cmd {
    fn name(&self) -> &'static str {
        match self {
            Cmd::Gen { .. } => "gen",
            Cmd::Train { .. } => "train",
            Cmd::Eval { .. } => "eval",
            Cmd::Gradcheck { .. } => "gradcheck",
            Cmd::Oracle { .. } => "oracle",
            Cmd::Bench { .. } => "bench",
        }
    }

    fn out_dir(&self) -> &Path {
        match self {
            Cmd::Gen { out, .. }
            | Cmd::Train { out, .. }
            | Cmd::Eval { out, .. }
            | Cmd::Gradcheck { out, .. }
            | Cmd::Oracle { out, .. }
            | Cmd::Bench { out, .. } => out,
        }
    }
}

fn write_file(rec: &mut RunRecord, path: &Path, contents: &[u8]) -> CliResult {
    fs::write(path, contents).map_err(|e| CliError::io(path, e))?;
    rec.output(path);
    Ok(())
}

fn to_json<T: serde::Serialize>(v: &T) -> CliResult<Vec<u8>> {
    serde_json::to_vec_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}

fn load_samples(data: &Path) -> CliResult<Vec<Sample>> {
    let dirs = list_scenes(data)?;
    if dirs.is_empty() {
        return Err(CliError::Usage(format!("{}: no scenes", data.display())));
    }
    dirs.iter().map(|d| Ok(Sample::from_scene(&read_scene(d)?))).collect()
}

fn run(cmd: &Cmd, rec: &mut RunRecord) -> CliResult {
    let out = cmd.out_dir();
    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    match cmd {
        Cmd::Gen { scenes, objects, sweeps, seed, extent, out } => {
            rec.seed = Some(*seed);
            let spec = DatasetSpec {
                scenes: *scenes,
                objects: *objects,
                sweeps: *sweeps,
                seed: *seed,
                scene: SceneConfig {
                    extent: *extent,
                    ..SceneConfig::default()
                },
                render: RenderConfig {
                    ground_radius: extent.max(RenderConfig::default().ground_radius),
                    ..RenderConfig::default()
                },
            };
            for dir in generate_dataset(out, &spec)? {
                rec.output(&dir);
            }
            write_file(rec, &out.join("dataset.json"), &to_json(&spec)?)?;
            println!("wrote {scenes} scenes to {}", out.display());
        }
        Cmd::Train { config, data, steps, out } => {
            rec.config = Some(config.clone());
            let run_cfg = RunConfig::load(config)?;
            rec.seed = Some(run_cfg.seed);
            let cfg = run_cfg.model_config()?;
            let samples = load_samples(data)?;
            let mut params = build_model(&cfg, run_cfg.seed)?;
            let log_path = out.join("train_log.jsonl");
            let mut log = BufWriter::new(File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
            let opts = run_cfg.train_options(*steps);
            let trace = train(&mut params, &samples, &cfg, &opts, |entry| {
                let line = serde_json::to_string(entry).map_err(|e| dynstaf::Error::Internal(e.to_string()))?;
                writeln!(log, "{line}").map_err(|e| dynstaf::Error::Internal(format!("{}: {e}", log_path.display())))
            })?;
            log.flush().map_err(|e| CliError::io(&log_path, e))?;
            rec.output(&log_path);
            let ckpt = out.join("checkpoint");
            save_checkpoint(&ckpt, &params, &cfg, *steps)?;
            rec.output(&ckpt);
            if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
                println!("trained {steps} steps: loss {:.4} -> {:.4}", first.total, last.total);
            }
        }
        Cmd::Eval { ckpt, data, score_threshold, out } => {
            let report = evaluate_checkpoint(ckpt, data, *score_threshold)?;
            write_file(rec, &out.join("report.json"), &to_json(&report)?)?;
            write_file(rec, &out.join("report.csv"), report.to_csv()?.as_bytes())?;
            let ate = report.ate.map_or_else(|| "n/a".into(), |a| format!("{a:.4} m"));
            println!("mAP {:.4}  ATE {ate}  ({} scenes)", report.map_mean, report.frames);
        }
        Cmd::Gradcheck { config, tol, out } => {
            rec.config = Some(config.clone());
            let run_cfg = RunConfig::load(config)?;
            rec.seed = Some(run_cfg.seed);
            let cfg = run_cfg.model_config()?;
            let report = gradient_suite(&cfg, *tol, run_cfg.seed)?;
            write_file(rec, &out.join("gradcheck.json"), &to_json(&report)?)?;
            for s in &report.stages {
                println!(
                    "{:<11} {} checked {:>4} skipped {:>4} max rel {:.2e}",
                    s.stage,
                    if s.passed { "PASS" } else { "FAIL" },
                    s.checked,
                    s.skipped,
                    s.max_rel_error
                );
            }
            if !report.passed {
                return Err(CliError::Verification(format!("gradient suite at tol {tol}")));
            }
        }
        Cmd::Oracle { k, sizes, heads, seeds, tol, out } => {
            let seeds: Vec<u64> = (0..*seeds).collect();
            let report = oracle_suite(k, sizes, heads, &seeds, *tol)?;
            write_file(rec, &out.join("oracle.json"), &to_json(&report)?)?;
            println!(
                "{} cases, max |windowed - oracle| = {:.3e} (tol {tol:e})",
                report.cases.len(),
                report.max_abs_diff
            );
            if !report.passed {
                return Err(CliError::Verification(format!("oracle max diff {:e}", report.max_abs_diff)));
            }
        }
        Cmd::Bench { sizes, k, heads, dim, repeats, threads, seed, out } => {
            rec.seed = Some(*seed);
            let cfg = AttentionConfig::new(*k, *heads, *dim);
            let opts = BenchOptions {
                repeats: *repeats,
                threads: *threads,
                seed: *seed,
                ..BenchOptions::default()
            };
            let rows = bench_attention(sizes, &cfg, &opts)?;
            write_file(rec, &out.join("bench.csv"), rows_to_csv(&rows)?.as_bytes())?;
            write_file(rec, &out.join("bench_plot.dat"), plot_series(&rows).as_bytes())?;
            for r in &rows {
                println!("{:?} n={} median {} ns", r.implementation, r.n, r.median_ns);
            }
        }
    }
    Ok(())
}

fn configure_threads() -> CliResult {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV}={v} is not a positive integer")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("{e}");
        return ExitCode::from(e.exit_code());
    }
    let mut rec = RunRecord::start(cli.command.name());
    let result = run(&cli.command, &mut rec);
    let code = result.as_ref().err().map_or(0, CliError::exit_code);
    if let Err(e) = &result {
        eprintln!("{e}");
    }
    // the manifest is written even for failed runs
    if let Err(e) = rec.finish(cli.command.out_dir(), code as i32) {
        eprintln!("{e}");
        return ExitCode::from(code.max(1));
    }
    ExitCode::from(code)
}
