//! `deepdive`: data generation, training, evaluation, verification and
//! latent export.
//!
//! Exit codes: 0 success, 1 failed check or runtime failure, 2 usage error
//! (bad flags, unreadable inputs, invalid configuration).

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Parser, Subcommand, ValueEnum};
use deepdive::config::{load_config, RunConfig};
use deepdive::data::{gen_electricity_like, gen_gait_like, Splits, TimeSeriesFrame};
use deepdive::exec::Execution;
use deepdive::experiment;
use deepdive::metrics::{aggregate, export_latent, format_table, RunResult};
use deepdive::model::{checkpoint, DeepDive};
use deepdive::training::Variant;
use deepdive::verification::run_suite;

#[derive(Parser)]
#[command(name = "deepdive", version, about = "Disentangled VAE for time-series reconstruction and forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Electricity,
    Gait,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Val,
    Test,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to <out>/data.csv.
    GenData {
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, default_value_t = 8)]
        l: usize,
        #[arg(long, default_value_t = 20_000)]
        t: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Train one run per (variant, seed) and write checkpoint, log and metrics.
    Train {
        /// Config file; defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Comma-separated variants; defaults to the config variant.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        /// Run the (variant, seed) grid one run at a time.
        #[arg(long)]
        sequential: bool,
    },
    /// Score a checkpoint on the test split and write <out>/metrics.json.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the verification suite and write one report per check to <out>/verify/.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
        #[arg(long)]
        sequential: bool,
    },
    /// Write per-sample latent summaries with labels to <out>/latent.csv.
    ExportLatent {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
}

enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
    Checks(usize),
}

type Outcome = Result<(), Failure>;

fn usage<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Usage(e.into())
}

fn run_err<E: Into<anyhow::Error>>(e: E) -> Failure {
    Failure::Run(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData { kind, l, t, seed, out } => gen_data(kind, l, t, seed, &out),
        Command::Train { config, data, out, seeds, variants, sequential } => {
            train(config.as_deref(), &data, &out, seeds, variants, exec(sequential))
        }
        Command::Eval { config, data, checkpoint, out } => eval(config.as_deref(), &data, &checkpoint, &out),
        Command::Verify { seed, out, sequential } => verify(seed, &out, exec(sequential)),
        Command::ExportLatent { config, data, checkpoint, out, split } => {
            export(config.as_deref(), &data, &checkpoint, &out, split)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `deepdive --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
        Err(Failure::Checks(n)) => {
            eprintln!("{n} check(s) failed");
            ExitCode::from(1)
        }
    }
}

fn exec(sequential: bool) -> Execution {
    if sequential {
        Execution::Sequential
    } else {
        Execution::Parallel
    }
}

fn create_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(usage)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).map_err(run_err)?;
    text.push('\n');
    fs::write(path, text)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(run_err)
}

fn gen_data(kind: Kind, l: usize, t: usize, seed: u64, out: &Path) -> Outcome {
    let frame = match kind {
        Kind::Electricity => gen_electricity_like(l, t, seed),
        Kind::Gait => gen_gait_like(l, t, seed),
    }
    .map_err(usage)?;
    create_dir(out)?;
    let path = out.join("data.csv");
    let file = fs::File::create(&path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(run_err)?;
    let mut w = BufWriter::new(file);
    frame.write_csv(&mut w).map_err(run_err)?;
    w.flush().map_err(run_err)?;
    println!("wrote {} rows x {} channels to {}", frame.len(), frame.num_channels(), path.display());
    Ok(())
}

fn read_config(path: Option<&Path>) -> Result<RunConfig, Failure> {
    match path {
        Some(p) => load_config(p)
            .with_context(|| format!("config {}", p.display()))
            .map_err(usage),
        None => Ok(RunConfig::default()),
    }
}

fn read_data(path: &Path) -> Result<TimeSeriesFrame, Failure> {
    let file = fs::File::open(path)
        .with_context(|| format!("cannot open dataset {}", path.display()))
        .map_err(usage)?;
    TimeSeriesFrame::read_csv(BufReader::new(file), None)
        .with_context(|| format!("dataset {}", path.display()))
        .map_err(usage)
}

/// Config, dataset and normalized splits, checking the label columns cover
/// the configured marginal dimensions.
fn load_inputs(config: Option<&Path>, data: &Path) -> Result<(RunConfig, Splits), Failure> {
    let cfg = read_config(config)?;
    let frame = read_data(data)?;
    if frame.num_channels() != cfg.latent.l {
        return Err(usage(anyhow!(
            "dataset has {} channels but the config expects l = {}",
            frame.num_channels(),
            cfg.latent.l
        )));
    }
    if frame.labels.len() < cfg.latent.n2 {
        return Err(usage(anyhow!(
            "dataset has {} label columns but the config expects n2 = {}",
            frame.labels.len(),
            cfg.latent.n2
        )));
    }
    for (i, (&seen, &k)) in frame.classes.iter().zip(&cfg.latent.classes).enumerate() {
        if seen > k {
            return Err(usage(anyhow!("label_{} reaches class {seen} but the config allows {k}", i + 1)));
        }
    }
    let splits = experiment::prepare(&frame, &cfg).map_err(usage)?;
    Ok((cfg, splits))
}

#[derive(serde::Serialize)]
struct TrainReport {
    runs: Vec<RunResult>,
    aggregate: Vec<deepdive::metrics::AggregateRow>,
}

fn train(config: Option<&Path>, data: &Path, out: &Path, seeds: Vec<u64>, variants: Vec<Variant>, exec: Execution) -> Outcome {
    let (cfg, splits) = load_inputs(config, data)?;
    let seeds = if seeds.is_empty() { vec![cfg.train.seed] } else { seeds };
    let variants = if variants.is_empty() { vec![cfg.train.variant] } else { variants };
    let mut distinct = seeds.clone();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() != seeds.len() {
        return Err(usage(anyhow!("seeds must be distinct")));
    }
    let grid: Vec<(Variant, u64)> = variants.iter().flat_map(|&v| seeds.iter().map(move |&s| (v, s))).collect();
    for &(v, s) in &grid {
        experiment::run_config(&cfg, v, s)
            .with_context(|| format!("variant {v}"))
            .map_err(usage)?;
    }
    create_dir(out)?;
    let single = grid.len() == 1;
    let dirs: Vec<PathBuf> = grid
        .iter()
        .map(|(v, s)| if single { out.to_path_buf() } else { out.join(format!("{v}_seed{s}")) })
        .collect();
    for d in &dirs {
        create_dir(d)?;
    }
    let results = exec.map(grid.len(), |i| {
        let (v, s) = grid[i];
        experiment::run(&cfg, &splits, v, s, Some(&dirs[i])).map(|(_, r)| r)
    });
    let mut runs = Vec::with_capacity(results.len());
    for ((v, s), (r, dir)) in grid.iter().zip(results.into_iter().zip(&dirs)) {
        let r = r.with_context(|| format!("variant {v}, seed {s}")).map_err(run_err)?;
        if !single {
            write_json(&dir.join("metrics.json"), &r)?;
        }
        runs.push(r);
    }
    let agg = aggregate(&runs).map_err(run_err)?;
    print!("{}", format_table(&agg));
    write_json(&out.join("metrics.json"), &TrainReport { runs, aggregate: agg })
}

fn load_checkpoint(path: &Path) -> Result<(DeepDive, Variant, u64), Failure> {
    let (model, meta) = checkpoint::load(path)
        .with_context(|| format!("checkpoint {}", path.display()))
        .map_err(usage)?;
    let variant = match meta.get("variant") {
        Some(v) => v.parse().map_err(|e: String| usage(anyhow!(e)))?,
        None => Variant::Deepdive,
    };
    let seed = meta.get("seed").and_then(|s| s.parse().ok()).unwrap_or(0);
    Ok((model, variant, seed))
}

fn eval(config: Option<&Path>, data: &Path, ckpt: &Path, out: &Path) -> Outcome {
    let (cfg, splits) = load_inputs(config, data)?;
    let (model, variant, seed) = load_checkpoint(ckpt)?;
    let mut train = cfg.train.clone();
    train.variant = variant;
    train.seed = seed;
    let result = experiment::score(&model, &splits, &train).map_err(run_err)?;
    create_dir(out)?;
    println!(
        "{variant} seed {seed}: rrse_recon {:.4}, rrse_forecast {:.4}, mig {}",
        result.rrse_recon,
        result.rrse_forecast,
        result.mig.map_or("-".to_string(), |m| format!("{m:.4}"))
    );
    write_json(&out.join("metrics.json"), &result)
}

/// File stem for a report name: alphanumerics kept, runs of anything else
/// collapsed to `_`.
fn file_stem(name: &str) -> String {
    let mut s = String::new();
    for c in name.chars() {
        if c.is_ascii_alphanumeric() || c == '-' {
            s.push(c);
        } else if !s.ends_with('_') {
            s.push('_');
        }
    }
    s.trim_matches('_').to_string()
}

fn verify(seed: u64, out: &Path, exec: Execution) -> Outcome {
    let reports = run_suite(seed, exec).map_err(run_err)?;
    let dir = out.join("verify");
    create_dir(&dir)?;
    let mut failed = 0;
    for r in &reports {
        write_json(&dir.join(format!("{}.json", file_stem(&r.name))), r)?;
        println!("{} {} (gap {:.3e}, tol {:.3e})", if r.pass { "PASS" } else { "FAIL" }, r.name, r.gap, r.tolerance);
        failed += usize::from(!r.pass);
    }
    println!("{}/{} checks passed", reports.len() - failed, reports.len());
    if failed > 0 {
        Err(Failure::Checks(failed))
    } else {
        Ok(())
    }
}

fn export(config: Option<&Path>, data: &Path, ckpt: &Path, out: &Path, split: Split) -> Outcome {
    let (_, splits) = load_inputs(config, data)?;
    let (model, _, _) = load_checkpoint(ckpt)?;
    let set = match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    };
    let table = export_latent(&model, set, 256).map_err(run_err)?;
    create_dir(out)?;
    let path = out.join("latent.csv");
    let file = fs::File::create(&path)
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(run_err)?;
    let mut w = BufWriter::new(file);
    table.write_csv(&mut w).map_err(run_err)?;
    w.flush().map_err(run_err)?;
    println!("wrote {} rows to {}", table.y_agg.len(), path.display());
    Ok(())
}
