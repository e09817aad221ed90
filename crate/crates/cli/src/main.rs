//! `fedclip`: synthesize feature suites, train adapters, evaluate
//! checkpoints, and aggregate reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};

use fedclip_core::data::{generate_synthetic_suite, inspect_feature_file, write_atomic, write_feature_file};
use fedclip_core::evaluation::{
    evaluate_adapter, render_table, reports_to_csv, reports_to_json, run_experiment, EvalReport,
    MultiSeedReport,
};
use fedclip_core::federation::{Checkpoint, LedgerSummary, TrainedModels};
use fedclip_core::{Algorithm, Error, ErrorKind, RunConfig, SynthSpec};

#[derive(Parser)]
#[command(name = "fedclip", version, about = "Federated attention-adapter training on frozen features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic domain-shifted suite as FCF1 files.
    Synth(SynthArgs),
    /// Train from a run configuration.
    Train(TrainArgs),
    /// Re-evaluate a saved adapter.
    Eval(EvalArgs),
    /// Aggregate per-seed report files into CSV/JSON means.
    Report(ReportArgs),
    /// Print the header of an FCF1 file.
    Inspect { file: PathBuf },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    domains: usize,
    #[arg(long, default_value_t = 200)]
    per_domain: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.5)]
    shift: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(short, long)]
    output: PathBuf,
}

/// Overrides for values in the configuration file.
#[derive(Args, Default)]
struct Overrides {
    /// Repeat to train several algorithms in one invocation.
    #[arg(short, long = "algorithm")]
    algorithms: Vec<Algorithm>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    local_epochs: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    scale: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    target: Option<PathBuf>,
    #[arg(long)]
    task: Option<String>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> fedclip_core::Result<()> {
        let t = &mut cfg.train;
        if let Some(&a) = self.algorithms.first() {
            t.algorithm = a;
        }
        macro_rules! set {
            ($($field:ident => $dst:expr),*) => {
                $(if let Some(v) = self.$field.clone() { $dst = v; })*
            };
        }
        set!(lr => t.lr, batch_size => t.batch_size, local_epochs => t.local_epochs,
             rounds => t.rounds, scale => t.scale, mu => t.mu, seeds => cfg.seeds);
        if self.workers.is_some() {
            t.workers = self.workers;
        }
        if self.dim.is_some() {
            cfg.dim = self.dim;
        }
        if self.target.is_some() {
            cfg.target = self.target.clone();
        }
        if self.task.is_some() {
            cfg.task = self.task.clone();
        }
        cfg.validate()
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(short, long)]
    config: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Training seed of the checkpoint; fixes the test splits.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct ReportArgs {
    /// Per-seed JSON reports written by `train`.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Report(a) => report(a),
        Command::Inspect { file } => inspect(&file),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}");
            eprintln!("error: {}", msg.split_whitespace().collect::<Vec<_>>().join(" "));
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<Error>())
        .map_or(ErrorKind::Config, Error::kind);
    match kind {
        ErrorKind::Config => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn synth(a: SynthArgs) -> anyhow::Result<()> {
    let suite = generate_synthetic_suite(&SynthSpec {
        n_domains: a.domains,
        n_per_domain: a.per_domain,
        dim: a.dim,
        n_classes: a.classes,
        shift: a.shift,
        seed: a.seed,
    })?;
    create_dir(&a.output)?;
    for ds in &suite {
        let path = a.output.join(format!("{}.fcf", ds.domain_name));
        write_feature_file(ds, &path).with_context(|| format!("writing {}", path.display()))?;
        println!("{}", path.display());
    }
    Ok(())
}

fn inspect(path: &Path) -> anyhow::Result<()> {
    let h = inspect_feature_file(path).with_context(|| format!("reading {}", path.display()))?;
    println!("file     {}", path.display());
    println!("version  {}", h.version);
    println!("domain   {}", h.domain_name);
    println!("d        {}", h.dim);
    println!("C        {}", h.num_classes);
    println!("N        {}", h.num_samples);
    println!("classes  {}", h.class_names.join(", "));
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir)
        .map_err(Error::from)
        .with_context(|| format!("creating {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("serialisable");
    s.push('\n');
    s
}

fn load_config(path: &Path, overrides: &Overrides) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    overrides.apply(&mut cfg)?;
    Ok(cfg)
}

fn ledger_lines(l: &LedgerSummary) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "ledger: adapter {} parameters, {} rounds", l.parameter_count, l.rounds);
    let _ = writeln!(
        s,
        "  bytes/round {} (up + down), total up {} down {}",
        l.bytes_per_round, l.total_uploaded_bytes, l.total_downloaded_bytes
    );
    let _ = writeln!(
        s,
        "  compression ratio {:.1}x vs a {:.2e}-parameter full model",
        l.compression_ratio, l.reference_full_model_params as f64
    );
    s
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&a.config, &a.overrides)?;
    if let Some(dir) = a.output_dir {
        cfg.output_dir = dir;
    }
    let algorithms = if a.overrides.algorithms.is_empty() {
        vec![cfg.train.algorithm]
    } else {
        a.overrides.algorithms.clone()
    };
    let (clients, target) = cfg.load_datasets()?;
    let mut reports = Vec::new();
    for alg in algorithms {
        let mut cfg = cfg.clone();
        cfg.train.algorithm = alg;
        for w in cfg.train.warnings() {
            eprintln!("warning: {w}");
        }
        let hash = cfg.config_hash();
        let exp = run_experiment(&cfg, &clients, target.as_ref())?;
        let dir = cfg.output_dir.join(alg.as_str());
        create_dir(&dir)?;
        for (run, eval) in exp.runs.iter().zip(&exp.report.runs) {
            let stem = format!("seed{}", run.seed);
            write_text(&dir.join(format!("{stem}.json")), &to_json(eval))?;
            write_text(&dir.join(format!("history-{stem}.json")), &to_json(&run.history))?;
            let save = |adapter: &fedclip_core::AdapterParams, round: usize, name: String| {
                let ck = Checkpoint {
                    round: round as u32,
                    config_hash: hash,
                    adapter: adapter.clone(),
                };
                let path = dir.join(name);
                ck.write(&path).with_context(|| format!("writing {}", path.display()))
            };
            match &run.models {
                TrainedModels::ZeroShot => {}
                TrainedModels::Shared(p) => save(p, run.selected_rounds[0], format!("{stem}.fck"))?,
                TrainedModels::PerClient(ps) => {
                    for (i, (p, &r)) in ps.iter().zip(&run.selected_rounds).enumerate() {
                        save(p, r, format!("{stem}-client{i}.fck"))?;
                    }
                }
            }
        }
        let one = std::slice::from_ref(&exp.report);
        write_text(&dir.join("report.csv"), &reports_to_csv(one))?;
        write_text(&dir.join("report.json"), &reports_to_json(one))?;
        print!("{}", render_table(&exp.report));
        if let Some(first) = exp.report.runs.first() {
            print!("{}", ledger_lines(&first.ledger));
        }
        println!();
        reports.push(exp.report);
    }
    if reports.len() > 1 {
        write_text(&cfg.output_dir.join("summary.csv"), &reports_to_csv(&reports))?;
        write_text(&cfg.output_dir.join("summary.json"), &reports_to_json(&reports))?;
    }
    println!("results in {}", cfg.output_dir.display());
    Ok(())
}

fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(&a.config, &a.overrides)?;
    let ck = Checkpoint::read(&a.checkpoint).with_context(|| format!("reading {}", a.checkpoint.display()))?;
    if ck.config_hash != cfg.config_hash() {
        eprintln!("warning: checkpoint was written under a different configuration");
    }
    let (clients, target) = cfg.load_datasets()?;
    let task = cfg.task_name(target.as_ref());
    let report = evaluate_adapter(
        &ck.adapter,
        ck.round as usize,
        &cfg.train,
        a.seed,
        &task,
        &clients,
        target.as_ref(),
    )?;
    print!("{}", render_table(&MultiSeedReport::from_runs(vec![report])?));
    Ok(())
}

fn report(a: ReportArgs) -> anyhow::Result<()> {
    let mut groups: BTreeMap<(String, String), Vec<EvalReport>> = BTreeMap::new();
    for path in &a.inputs {
        let text = std::fs::read_to_string(path)
            .map_err(Error::from)
            .with_context(|| format!("reading {}", path.display()))?;
        let r: EvalReport = serde_json::from_str(&text)
            .map_err(|e| Error::Validation(e.to_string()))
            .with_context(|| format!("parsing {}", path.display()))?;
        groups.entry((r.task.clone(), r.algorithm.clone())).or_default().push(r);
    }
    let mut reports = Vec::new();
    for (_, mut runs) in groups {
        runs.sort_by_key(|r| r.seed);
        if let Some(w) = runs.windows(2).find(|w| w[0].seed == w[1].seed) {
            return Err(anyhow!(Error::Validation(format!(
                "seed {} of {}/{} given twice",
                w[0].seed, w[0].task, w[0].algorithm
            ))));
        }
        reports.push(MultiSeedReport::from_runs(runs)?);
    }
    for r in &reports {
        print!("{}", render_table(r));
    }
    match a.output_dir {
        Some(dir) => {
            create_dir(&dir)?;
            write_text(&dir.join("report.csv"), &reports_to_csv(&reports))?;
            write_text(&dir.join("report.json"), &reports_to_json(&reports))?;
        }
        None => print!("{}", reports_to_csv(&reports)),
    }
    Ok(())
}
