use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::{Command as Process, ExitCode};

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use multitrain::checkpoint::{self, AnyTensor};
use multitrain::config::{RunConfig, TrainMode};
use multitrain::data::{Split, Suite};
use multitrain::gradcheck;
use multitrain::losses::top_projection_pairs;
use multitrain::trainer::{alias_agreement, report_csv, report_rows, Evaluation, Manifest, TrainState};

const MODES: &str = "\
Training modes (--set train.mode=NAME):
  mode                             informative  projection loss  projection add  sigma weighting
  full                             yes          yes              yes             yes
  vanilla                          no           no               no              no
  no-informative                   no           yes              yes             yes
  no-informative-no-projection-add no           yes (branches)   no              yes
  no-projection-loss               yes          no               no              yes

Exit codes: 0 ok, 1 usage, 2 verification failure, 3 numeric failure.";

#[derive(Parser)]
#[command(name = "multitrain", version, about = "Multi-dataset training on synthetic motion clips", after_help = MODES)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; every key has a default.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=10`. Repeatable.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for `--set train.seed=N`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Replace existing outputs.
    #[arg(long, global = true)]
    force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write metrics, checkpoints and a report.
    Train {
        /// Continue from a checkpoint written under the same config.
        #[arg(long, value_name = "CHECKPOINT")]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
    },
    /// Run the 64-bit finite-difference gradient suite.
    Gradcheck {
        /// Use one threshold for every component instead of the defaults.
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Train every mode for each seed and compare them.
    Ablate {
        /// Parallel worker processes.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Show the largest learned cross-dataset projection weights.
    InspectProjections {
        #[arg(long, value_name = "CHECKPOINT")]
        checkpoint: PathBuf,
        /// Source and target dataset, by name or id: `kin:mit`.
        #[arg(long, value_name = "I:K")]
        pair: String,
        /// Rows to show; defaults to `report.top_n`.
        #[arg(long)]
        top: Option<usize>,
    },
    /// Write rendered clips as an MTTN file plus a JSON index.
    DumpDataset {
        #[arg(long, value_enum, default_value_t = SplitArg::All)]
        split: SplitArg,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn splits(self) -> Vec<Split> {
        match self {
            SplitArg::Train => vec![Split::Train],
            SplitArg::Test => vec![Split::Test],
            SplitArg::All => vec![Split::Train, Split::Test],
        }
    }
}

/// A check ran and failed.
#[derive(Debug)]
struct VerificationFailed(String);

impl fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<VerificationFailed>() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<multitrain::Error>() {
            if e.is_numeric() {
                return 3;
            }
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Train { resume } => {
            let config = load_config(c, None)?;
            let out = c.out.clone().unwrap_or_else(|| default_run_dir(&config));
            let eval = train_run(&config, &out, c.force, resume.as_deref(), true)?;
            print_eval(&eval);
            Ok(())
        }
        Command::Eval { checkpoint, split } => cmd_eval(c, checkpoint, *split),
        Command::Gradcheck { threshold } => cmd_gradcheck(c, *threshold),
        Command::Ablate { jobs } => cmd_ablate(c, *jobs),
        Command::InspectProjections { checkpoint, pair, top } => cmd_inspect(c, checkpoint, pair, *top),
        Command::DumpDataset { split } => cmd_dump(c, *split),
    }
}

/// Reads `--config` (or `fallback`) and applies `--set` and `--seed`.
fn load_config(c: &Common, fallback: Option<&Path>) -> Result<RunConfig> {
    let mut overrides = c.set.clone();
    if let Some(seed) = c.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    let path = c.config.as_deref().or(fallback);
    Ok(match path {
        Some(p) => RunConfig::load(p, &overrides).with_context(|| format!("loading {}", p.display()))?,
        None => RunConfig::parse("", &overrides)?,
    })
}

fn default_run_dir(config: &RunConfig) -> PathBuf {
    PathBuf::from("runs").join(format!("{}-s{}", config.train.mode.name(), config.train.seed))
}

fn is_output(name: &str) -> bool {
    matches!(
        name,
        "metrics.ndjson" | "report.csv" | "resolved_config.cfg" | "dataset.mttn" | "index.json"
    ) || (name.starts_with("checkpoint_") && (name.ends_with(".mttn") || name.ends_with(".json")))
        || (name.starts_with("projections_") && name.ends_with(".csv"))
}

/// Creates `dir`, refusing to touch earlier outputs unless `force` is set,
/// in which case those outputs are removed.
fn prepare_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() {
        let mut existing = Vec::new();
        for entry in fs::read_dir(dir)? {
            let entry = entry?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if is_output(&name) {
                existing.push(entry.path());
            }
        }
        if !existing.is_empty() {
            if !force {
                bail!(
                    "{} already holds run outputs; pass --force to replace them",
                    dir.display()
                );
            }
            for p in existing {
                fs::remove_file(&p).with_context(|| format!("removing {}", p.display()))?;
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn new_file(path: &Path) -> Result<BufWriter<File>> {
    let f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_eval_records(out: &mut impl Write, step: usize, eval: &Evaluation) -> Result<()> {
    for d in &eval.datasets {
        let rec = json!({"step": step, "dataset": d.dataset, "top1": d.top1, "top5": d.top5});
        writeln!(out, "{rec}")?;
    }
    Ok(())
}

fn write_report(path: &Path, rows: &[String]) -> Result<()> {
    let mut f = new_file(path)?;
    f.write_all(report_csv(rows).as_bytes())?;
    f.flush()?;
    Ok(())
}

/// Trains `config` into `out`; returns the final test evaluation.
fn train_run(config: &RunConfig, out: &Path, force: bool, resume: Option<&Path>, verbose: bool) -> Result<Evaluation> {
    let suite = config.suite()?;
    let mut state = match resume {
        Some(p) => {
            TrainState::load(config.clone(), &suite, p).with_context(|| format!("resuming from {}", p.display()))?
        }
        None => TrainState::new(config.clone(), &suite)?,
    };
    prepare_dir(out, force)?;
    fs::write(out.join("resolved_config.cfg"), config.resolved())?;
    let mut metrics = new_file(&out.join("metrics.ndjson"))?;
    let t = &config.train;
    let log_every = (t.steps / 20).max(1);
    while !state.done() {
        let rec = state.train_step(&suite)?;
        writeln!(metrics, "{}", serde_json::to_string(&rec)?)?;
        let done = rec.step + 1;
        if verbose && (done % log_every == 0 || done == t.steps) {
            eprintln!("step {done}/{} loss {:.4} lr {:.2e}", t.steps, rec.loss.total, rec.lr);
        }
        if t.checkpoint_every > 0 && done % t.checkpoint_every == 0 && done < t.steps {
            state.save(out)?;
        }
        if t.eval_every > 0 && done % t.eval_every == 0 && done < t.steps {
            let eval = state.evaluate(&suite, Split::Test)?;
            write_eval_records(&mut metrics, done, &eval)?;
        }
    }
    metrics.flush()?;
    let eval = state.evaluate(&suite, Split::Test)?;
    write_eval_records(&mut metrics, state.step, &eval)?;
    metrics.flush()?;
    state.save(out)?;
    write_report(&out.join("report.csv"), &report_rows(config, &eval))?;
    Ok(eval)
}

fn print_eval(eval: &Evaluation) {
    println!("{:<12} {:>7} {:>7} {:>6}", "dataset", "top1", "top5", "clips");
    for d in &eval.datasets {
        println!("{:<12} {:>7.4} {:>7.4} {:>6}", d.dataset, d.top1, d.top5, d.clips);
    }
    println!("mean top1 {:.4}", eval.mean_top1());
}

/// Loads parameters from `path` for evaluation-type commands. The config
/// comes from `--config` or the `resolved_config.cfg` beside the checkpoint.
fn load_checkpoint(c: &Common, path: &Path) -> Result<(RunConfig, Suite, TrainState)> {
    let sibling = path
        .parent()
        .map(|d| d.join("resolved_config.cfg"))
        .filter(|p| p.exists());
    let config = load_config(c, sibling.as_deref())?;
    let suite = config.suite()?;
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(path.with_extension("json"))
            .with_context(|| format!("reading manifest of {}", path.display()))?,
    )?;
    let expect = format!("{:016x}", config.hash());
    if manifest.config_hash != expect {
        eprintln!(
            "warning: checkpoint was written under config {}, evaluating with {expect}",
            manifest.config_hash
        );
    }
    let entries = checkpoint::load(path).with_context(|| format!("reading {}", path.display()))?;
    let mut state = TrainState::new(config.clone(), &suite)?;
    state.restore(&entries, manifest.step)?;
    Ok((config, suite, state))
}

fn cmd_eval(c: &Common, path: &Path, split: SplitArg) -> Result<()> {
    let (config, suite, state) = load_checkpoint(c, path)?;
    let split = match split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
        SplitArg::All => bail!("eval takes --split train or --split test"),
    };
    let eval = state.evaluate(&suite, split)?;
    print_eval(&eval);
    if let Some(out) = &c.out {
        prepare_dir(out, c.force)?;
        let mut cfg = config;
        cfg.train.steps = state.step;
        write_report(&out.join("report.csv"), &report_rows(&cfg, &eval))?;
    }
    Ok(())
}

fn cmd_gradcheck(c: &Common, threshold: Option<f64>) -> Result<()> {
    load_config(c, None)?;
    let start = std::time::Instant::now();
    let results = gradcheck::run_suite(threshold)?;
    println!("{:<32} {:>12} {:>10}  result", "component", "max rel err", "threshold");
    for r in &results {
        println!(
            "{:<32} {:>12.3e} {:>10.1e}  {}",
            r.component,
            r.error,
            r.threshold,
            if r.passed { "pass" } else { "FAIL" }
        );
    }
    println!("{} components in {:.1}s", results.len(), start.elapsed().as_secs_f64());
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.component.as_str())
        .collect();
    if !failed.is_empty() {
        return Err(VerificationFailed(format!("gradient check failed: {}", failed.join(", "))).into());
    }
    Ok(())
}

fn read_report_rows(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

fn cmd_ablate(c: &Common, jobs: usize) -> Result<()> {
    let base = load_config(c, None)?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("runs/ablate"));
    prepare_dir(&out, c.force)?;
    let base_path = out.join("resolved_config.cfg");
    fs::write(&base_path, base.resolved())?;
    let seeds = match c.seed {
        Some(s) => vec![s],
        None => base.report.ablate_seeds.clone(),
    };
    let runs: Vec<(TrainMode, u64, PathBuf)> = seeds
        .iter()
        .flat_map(|&s| TrainMode::ALL.iter().map(move |&m| (m, s)))
        .map(|(m, s)| (m, s, out.join(format!("{}-s{s}", m.name()))))
        .collect();
    let mut rows = vec![Vec::new(); runs.len()];
    if jobs <= 1 {
        for (i, (mode, seed, dir)) in runs.iter().enumerate() {
            let mut cfg = base.clone();
            cfg.train.mode = *mode;
            cfg.train.seed = *seed;
            eprintln!("== {} seed {seed}", mode.name());
            let eval = train_run(&cfg, dir, c.force, None, false)?;
            rows[i] = report_rows(&cfg, &eval);
        }
    } else {
        let exe = std::env::current_exe()?;
        let mut pending: Vec<usize> = (0..runs.len()).rev().collect();
        let mut active = Vec::new();
        while !pending.is_empty() || !active.is_empty() {
            while active.len() < jobs {
                let Some(i) = pending.pop() else { break };
                let (mode, seed, dir) = &runs[i];
                let mut cmd = Process::new(&exe);
                cmd.arg("train")
                    .arg("--config")
                    .arg(&base_path)
                    .arg("--set")
                    .arg(format!("train.mode={}", mode.name()))
                    .arg("--seed")
                    .arg(seed.to_string())
                    .arg("--out")
                    .arg(dir);
                if c.force {
                    cmd.arg("--force");
                }
                eprintln!("== {} seed {seed} (worker)", mode.name());
                active.push((i, cmd.stdout(std::process::Stdio::null()).spawn()?));
            }
            let (i, mut child) = active.remove(0);
            let status = child.wait()?;
            if !status.success() {
                let (mode, seed, _) = &runs[i];
                bail!("worker for {} seed {seed} failed with {status}", mode.name());
            }
            rows[i] = read_report_rows(&runs[i].2.join("report.csv"))?;
        }
    }
    let rows: Vec<String> = rows.into_iter().flatten().collect();
    write_report(&out.join("report.csv"), &rows)?;
    println!("{:<34} {:>10}", "mode", "mean top1");
    for mode in TrainMode::ALL {
        let vals: Vec<f64> = rows
            .iter()
            .filter(|r| r.split(',').next() == Some(mode.name()))
            .filter_map(|r| r.split(',').nth(2)?.parse().ok())
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len().max(1) as f64;
        println!("{:<34} {:>10.4}", mode.name(), mean);
    }
    Ok(())
}

fn dataset_index(suite: &Suite, token: &str) -> Result<usize> {
    if let Ok(id) = token.parse::<usize>() {
        return Ok(suite.registry.get(id)?.id);
    }
    Ok(suite.registry.by_name(token)?.id)
}

fn cmd_inspect(c: &Common, path: &Path, pair: &str, top: Option<usize>) -> Result<()> {
    let (config, suite, state) = load_checkpoint(c, path)?;
    let (a, b) = pair
        .split_once(':')
        .ok_or_else(|| anyhow!("--pair expects SOURCE:TARGET, got `{pair}`"))?;
    let (src, dst) = (dataset_index(&suite, a)?, dataset_index(&suite, b)?);
    let s = suite.registry.get(src)?;
    let d = suite.registry.get(dst)?;
    let cells = s.classes() * d.classes();
    let mut n = top.unwrap_or(config.report.top_n);
    if n == 0 {
        bail!("--top must be at least 1");
    }
    if n > cells {
        eprintln!(
            "warning: --top {n} exceeds the {cells} entries of {}:{}; showing {cells}",
            s.name, d.name
        );
        n = cells;
    }
    let model = &state.model;
    let pairs = top_projection_pairs(
        &model.store,
        &model.arch.bank,
        src,
        dst,
        n,
        &s.class_names,
        &d.class_names,
    )?;
    println!(
        "{:>4}  {:<20} {:<20} {:>10}",
        "rank", "source class", "target class", "weight"
    );
    let mut csv = String::from("rank,source,target,weight\n");
    for (i, p) in pairs.iter().enumerate() {
        println!("{:>4}  {:<20} {:<20} {:>10.5}", i + 1, p.source, p.target, p.weight);
        csv.push_str(&format!("{},{},{},{}\n", i + 1, p.source, p.target, p.weight));
    }
    let here = alias_agreement(model, &suite.alias, Some((src, dst)))?;
    let all = alias_agreement(model, &suite.alias, None)?;
    if here.total > 0 {
        println!(
            "alias agreement {}:{} {}/{} = {:.3}",
            s.name,
            d.name,
            here.matched,
            here.total,
            here.rate()
        );
    } else {
        println!("alias agreement {}:{} n/a (no mapped classes)", s.name, d.name);
    }
    println!(
        "alias agreement overall {}/{} = {:.3}",
        all.matched,
        all.total,
        all.rate()
    );
    if let Some(out) = &c.out {
        fs::create_dir_all(out)?;
        let file = out.join(format!("projections_{}_{}.csv", s.name, d.name));
        if file.exists() && !c.force {
            bail!("{} exists; pass --force to replace it", file.display());
        }
        fs::write(&file, csv)?;
    }
    Ok(())
}

fn cmd_dump(c: &Common, split: SplitArg) -> Result<()> {
    let config = load_config(c, None)?;
    let suite = config.suite()?;
    let out = c.out.clone().unwrap_or_else(|| PathBuf::from("dataset"));
    prepare_dir(&out, c.force)?;
    let mut entries = Vec::new();
    let mut samples = BTreeMap::new();
    for spec in suite.registry.iter() {
        for sp in split.splits() {
            for sample in suite.split_range(spec.id, sp)? {
                let clip = suite.clip::<f32>(spec.id, sample)?;
                let key = format!("{}/{sample}", spec.name);
                samples.insert(
                    key.clone(),
                    json!({
                        "dataset": spec.name,
                        "dataset_id": spec.id,
                        "class": clip.label,
                        "class_name": spec.class_names[clip.label],
                        "concept": suite.concepts[clip.concept].name,
                        "split": sp,
                    }),
                );
                entries.push((key, AnyTensor::from(clip.tensor)));
            }
        }
    }
    checkpoint::save(&out.join("dataset.mttn"), &entries)?;
    let datasets: Vec<_> = suite
        .registry
        .iter()
        .map(|d| json!({"id": d.id, "name": d.name, "classes": d.class_names, "train": d.train, "test": d.test}))
        .collect();
    let index = json!({
        "clip_shape": suite.clip_shape,
        "datasets": datasets,
        "alias": suite.alias.entries,
        "samples": samples,
    });
    fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    println!("wrote {} clips to {}", entries.len(), out.display());
    Ok(())
}
