//! The `relfuse` command line.

use std::fs;
use std::io::{self, Write};
use std::net::TcpListener;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::backends::serve;
use crate::config::{BackendConfig, Overrides, RunConfig};
use crate::decode::{EnsembleSession, StopConditions};
use crate::error::{Error, Result};
use crate::fusion::{EnsembleConfig, MainPolicy};
use crate::harness::toy::{build_toy_world, ToyWorldConfig};
use crate::harness::{
    ablate_normalization, build_members, consistency_gap, evaluate, evaluate_individual, relative_matrices,
    select_main_model, sweep_anchor_count, sweep_eta, sweep_steps, EvalItem, ModelEntry, ReportRow, RunReport,
};
use crate::relspace::{nn_distance_histogram, EmbeddingTable};
use crate::vocab::{display_surface, AnchorStrategy, Vocabulary};

#[derive(Debug, Parser)]
#[command(name = "relfuse", version, about = "Ensemble decoding across models with different vocabularies")]
pub struct Cli {
    #[command(flatten)]
    pub flags: Flags,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Default, Args)]
pub struct Flags {
    /// Run configuration (JSON).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<String>,
    #[arg(long, global = true, value_name = "FLOAT")]
    pub eta: Option<f64>,
    #[arg(long, global = true, value_name = "INT")]
    pub steps: Option<usize>,
    /// `full` or `sample:K`.
    #[arg(long, global = true)]
    pub anchors: Option<String>,
    /// `auto` or a model index.
    #[arg(long, global = true)]
    pub main: Option<String>,
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_name = "TEXT")]
    pub prompt: Option<String>,
    #[arg(long, global = true, value_name = "INT")]
    pub max_tokens: Option<usize>,
    /// Evaluation (test split) dataset, JSON lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub dataset: Option<String>,
    /// Validate the configuration and print the plan without running.
    #[arg(long, global = true)]
    pub dry_run: bool,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Write each model's relative matrix and the anchor manifest.
    BuildRelspace,
    /// Generate from `--prompt` with the ensemble.
    Decode,
    /// Evaluate individual models and the ensemble on dev and test.
    Eval {
        #[arg(long, value_enum)]
        sweep: Option<EvalSweep>,
    },
    /// Dev-set sweep of one hyperparameter.
    Sweep {
        #[arg(value_enum)]
        kind: SweepKind,
    },
    /// Compare raw and row-normalized relative matrices.
    AblateNorm,
    /// Relative-space diagnostics.
    Inspect {
        #[arg(value_enum)]
        what: InspectKind,
    },
    /// Serve one configured model over the wire protocol.
    ServeBackend {
        #[arg(long)]
        model: String,
        /// Listen on this address instead of standard input/output.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Write a seeded toy world and a configuration for it.
    MakeToy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalSweep {
    Eta,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepKind {
    Eta,
    Anchors,
    Steps,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InspectKind {
    Consistency,
    NnHist,
}

impl Command {
    fn label(&self) -> String {
        match self {
            Command::BuildRelspace => "build-relspace".into(),
            Command::Decode => "decode".into(),
            Command::Eval { sweep: None } => "eval".into(),
            Command::Eval { sweep: Some(_) } => "eval --sweep eta".into(),
            Command::Sweep { kind } => format!("sweep {}", kind.to_possible_value().unwrap().get_name()),
            Command::AblateNorm => "ablate-norm".into(),
            Command::Inspect { what } => format!("inspect {}", what.to_possible_value().unwrap().get_name()),
            Command::ServeBackend { model, .. } => format!("serve-backend --model {model}"),
            Command::MakeToy => "make-toy".into(),
        }
    }
}

/// Process exit status for a failed run.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_numeric() {
        3
    } else if matches!(err, Error::Config(_) | Error::Argument(_)) {
        1
    } else {
        2
    }
}

/// Parses `args` and runs; returns the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Command::MakeToy = cli.command {
        return make_toy(&cli.flags);
    }
    let path = cli
        .flags
        .config
        .as_ref()
        .ok_or_else(|| Error::config("--config is required"))?;
    let mut cfg = RunConfig::load(path)?;
    cfg.apply(&overrides(&cli.flags));
    cfg.validate()?;
    if matches!(cli.command, Command::Decode) && cli.flags.prompt.is_none() {
        return Err(Error::argument("decode needs --prompt"));
    }
    if cli.flags.dry_run {
        print!("{}", plan(&cli.command, &cfg));
        return Ok(());
    }
    match &cli.command {
        Command::BuildRelspace => build_relspace(&cfg),
        Command::Decode => decode(&cfg, cli.flags.prompt.as_deref().unwrap_or_default()),
        Command::Eval { sweep } => eval(&cfg, sweep.is_some()),
        Command::Sweep { kind } => sweep(&cfg, *kind),
        Command::AblateNorm => ablate(&cfg),
        Command::Inspect { what } => inspect(&cfg, *what),
        Command::ServeBackend { model, listen } => serve_backend(&cfg, model, listen.as_deref()),
        Command::MakeToy => unreachable!("handled above"),
    }
}

fn overrides(f: &Flags) -> Overrides {
    Overrides {
        out: f.out.clone(),
        eta: f.eta,
        steps: f.steps,
        anchors: f.anchors.clone(),
        main: f.main.clone(),
        seed: f.seed,
        max_tokens: f.max_tokens,
        dataset: f.dataset.clone(),
    }
}

fn plan(command: &Command, cfg: &RunConfig) -> String {
    let mut out = String::new();
    let mut line = |s: String| {
        out.push_str(&s);
        out.push('\n');
    };
    line(format!("command: {}", command.label()));
    line(format!("models: {}", cfg.models.len()));
    for (i, m) in cfg.models.iter().enumerate() {
        let kind = match &m.backend {
            BackendConfig::Ngram { order, delta, .. } => format!("ngram order={order} delta={delta}"),
            BackendConfig::Table { .. } => "table".to_string(),
            BackendConfig::Remote { transport, .. } => format!("remote {transport:?}").to_lowercase(),
        };
        line(format!("  [{i}] {} ({kind})", m.name));
    }
    line(format!("anchors: {} (normalize: {})", cfg.anchors, cfg.normalize));
    line(format!(
        "fusion: eta={} steps={} prob_floor={:e} early_stop_loss={:e}",
        cfg.fusion.eta, cfg.fusion.steps, cfg.fusion.prob_floor, cfg.fusion.early_stop_loss
    ));
    line(format!(
        "main: {}",
        match &cfg.main {
            crate::config::MainSetting::Index(i) => i.to_string(),
            crate::config::MainSetting::Name(s) => s.clone(),
        }
    ));
    line(format!(
        "datasets: dev={} test={}",
        cfg.datasets.dev.as_deref().unwrap_or("-"),
        cfg.datasets.test.as_deref().unwrap_or("-")
    ));
    line(format!("seed: {}", cfg.seed()));
    line(format!("out: {}", cfg.out_dir().display()));
    out
}

fn make_toy(flags: &Flags) -> Result<()> {
    let dir = PathBuf::from(flags.out.clone().unwrap_or_else(|| "toy".to_string()));
    let world_cfg = ToyWorldConfig::standard(flags.seed.unwrap_or(7));
    if flags.dry_run {
        println!("command: make-toy");
        println!("seed: {}", world_cfg.seed);
        println!("out: {}", dir.display());
        return Ok(());
    }
    let world = build_toy_world(&world_cfg)?;
    let path = crate::config::write_toy_setup(&world, &dir)?;
    println!("{}", path.display());
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out_dir();
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

struct Setup {
    models: Vec<ModelEntry>,
    ensemble: EnsembleConfig,
    strategy: AnchorStrategy,
    stop: StopConditions,
    dev: Option<Vec<EvalItem>>,
    test: Option<Vec<EvalItem>>,
}

fn setup(cfg: &RunConfig) -> Result<Setup> {
    Ok(Setup {
        models: cfg.load_models()?,
        ensemble: cfg.ensemble_config()?,
        strategy: cfg.anchor_strategy()?,
        stop: cfg.stop_conditions(),
        dev: cfg.dev_items()?,
        test: cfg.test_items()?,
    })
}

impl Setup {
    fn main_index(&self, members: &[crate::decode::EnsembleMember]) -> Result<usize> {
        match self.ensemble.main_policy {
            MainPolicy::Fixed(i) => Ok(i),
            MainPolicy::AutoDev => match &self.dev {
                Some(dev) if !dev.is_empty() => {
                    let (i, scores) = select_main_model(members, &self.ensemble, &self.stop, dev)?;
                    log::info!("main model: `{}` (dev accuracies {scores:?})", self.models[i].name());
                    Ok(i)
                }
                _ => {
                    log::warn!("no dev set to choose a main model; using model 0");
                    Ok(0)
                }
            },
        }
    }

    fn splits(&self) -> Vec<(&'static str, &[EvalItem])> {
        [("dev", &self.dev), ("test", &self.test)]
            .into_iter()
            .filter_map(|(name, items)| items.as_deref().map(|i| (name, i)))
            .collect()
    }

    fn dev(&self) -> Result<&[EvalItem]> {
        self.dev
            .as_deref()
            .ok_or_else(|| Error::config("datasets.dev is required for sweeps"))
    }
}

fn ensemble_row(condition: &str, split: &str, model: &str, accuracy: f64, cfg: &EnsembleConfig, anchors: String, seed: u64) -> ReportRow {
    ReportRow {
        condition: condition.to_string(),
        split: split.to_string(),
        model: model.to_string(),
        accuracy,
        eta: Some(cfg.eta),
        steps: Some(cfg.steps),
        anchors: Some(anchors),
        seed,
    }
}

/// Individual accuracy of every model on the given splits.
fn individual_rows(
    report: &mut RunReport,
    s: &Setup,
    members: &[crate::decode::EnsembleMember],
    splits: &[(&str, &[EvalItem])],
    seed: u64,
) -> Result<()> {
    for (split, items) in splits {
        for (i, m) in s.models.iter().enumerate() {
            let acc = evaluate_individual(members, i, &s.ensemble, &s.stop, items)?.accuracy;
            report.individual(split, m.name(), acc, seed);
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct AnchorManifest<'a> {
    strategy: String,
    normalized: bool,
    models: Vec<&'a str>,
    anchors: Vec<String>,
    per_model_ids: &'a [Vec<u32>],
}

fn build_relspace(cfg: &RunConfig) -> Result<()> {
    let vocabs = (0..cfg.models.len())
        .map(|i| cfg.load_vocab(i))
        .collect::<Result<Vec<_>>>()?;
    let tables = cfg
        .models
        .iter()
        .map(|m| EmbeddingTable::load(cfg.resolve(&m.embeddings)))
        .collect::<Result<Vec<_>>>()?;
    let v: Vec<&Vocabulary> = vocabs.iter().map(|v| v.as_ref()).collect();
    let t: Vec<&EmbeddingTable> = tables.iter().collect();
    let strategy = cfg.anchor_strategy()?;
    let (anchors, matrices) = relative_matrices(&v, &t, strategy, cfg.normalize)?;
    let dir = out_dir(cfg)?.join("relspace");
    fs::create_dir_all(&dir)?;
    for (m, matrix) in cfg.models.iter().zip(&matrices) {
        matrix.save(dir.join(format!("{}.dpr", m.name)))?;
    }
    let manifest = AnchorManifest {
        strategy: strategy.to_string(),
        normalized: cfg.normalize,
        models: cfg.models.iter().map(|m| m.name.as_str()).collect(),
        anchors: anchors.anchors().iter().map(|a| display_surface(a)).collect(),
        per_model_ids: anchors.per_model_ids(),
    };
    fs::write(dir.join("anchors.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    log::info!("{} anchors, {} matrices written to {}", anchors.len(), matrices.len(), dir.display());
    Ok(())
}

fn decode(cfg: &RunConfig, prompt: &str) -> Result<()> {
    let s = setup(cfg)?;
    let (_, members) = build_members(&s.models, s.strategy, cfg.normalize)?;
    let main = s.main_index(&members)?;
    let mut session = EnsembleSession::new(members, main, s.ensemble.clone(), s.stop.clone())?;
    let generation = session.generate(prompt)?;
    generation.trace.save_jsonl(out_dir(cfg)?.join("trace.jsonl"))?;
    let mut stdout = io::stdout().lock();
    writeln!(stdout, "{}", generation.text)?;
    Ok(())
}

fn eval(cfg: &RunConfig, sweep_first: bool) -> Result<()> {
    let mut s = setup(cfg)?;
    let seed = cfg.seed();
    let (_, members) = build_members(&s.models, s.strategy, cfg.normalize)?;
    let main = s.main_index(&members)?;
    let dir = out_dir(cfg)?;
    if sweep_first {
        let dev = s.dev()?;
        let result = sweep_eta(&members, main, &s.ensemble, &s.stop, dev, &cfg.sweeps.eta)?;
        let mut sweep_report = RunReport::default();
        individual_rows(&mut sweep_report, &s, &members, &[("dev", dev)], seed)?;
        for p in &result.points {
            let c = s.ensemble.clone().with_eta(p.value);
            let row = ensemble_row("eta_sweep", "dev", s.models[main].name(), p.accuracy, &c, s.strategy.to_string(), seed);
            sweep_report.push(row);
        }
        sweep_report.save_csv(dir.join("sweep_eta.csv"))?;
        log::info!("best eta on dev: {:.2}", result.best);
        s.ensemble.eta = result.best;
    }
    let mut report = RunReport::default();
    let splits = s.splits();
    if splits.is_empty() {
        return Err(Error::config("eval needs datasets.dev or datasets.test"));
    }
    individual_rows(&mut report, &s, &members, &splits, seed)?;
    for (split, items) in &splits {
        let acc = evaluate(&members, main, &s.ensemble, &s.stop, items)?.accuracy;
        report.push(ensemble_row("ensemble", split, s.models[main].name(), acc, &s.ensemble, s.strategy.to_string(), seed));
    }
    report.save_csv(dir.join("report.csv"))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn sweep(cfg: &RunConfig, kind: SweepKind) -> Result<()> {
    let s = setup(cfg)?;
    let seed = cfg.seed();
    let dev = s.dev()?;
    let (_, members) = build_members(&s.models, s.strategy, cfg.normalize)?;
    let main = s.main_index(&members)?;
    let main_name = s.models[main].name();
    let mut report = RunReport::default();
    individual_rows(&mut report, &s, &members, &[("dev", dev)], seed)?;
    let file = match kind {
        SweepKind::Eta => {
            let result = sweep_eta(&members, main, &s.ensemble, &s.stop, dev, &cfg.sweeps.eta)?;
            for p in &result.points {
                let c = s.ensemble.clone().with_eta(p.value);
                report.push(ensemble_row("eta_sweep", "dev", main_name, p.accuracy, &c, s.strategy.to_string(), seed));
            }
            "sweep_eta.csv"
        }
        SweepKind::Anchors => {
            let points = sweep_anchor_count(
                &s.models,
                main,
                &s.ensemble,
                &s.stop,
                dev,
                &cfg.sweeps.anchor_counts,
                seed,
                cfg.normalize,
            )?;
            for p in &points {
                report.push(ensemble_row("anchor_sweep", "dev", main_name, p.accuracy, &s.ensemble, p.value.to_string(), seed));
            }
            "sweep_anchors.csv"
        }
        SweepKind::Steps => {
            let points = sweep_steps(&members, main, &s.ensemble, &s.stop, dev, &cfg.sweeps.steps)?;
            for p in &points {
                let c = s.ensemble.clone().with_steps(p.value);
                report.push(ensemble_row("steps_sweep", "dev", main_name, p.accuracy, &c, s.strategy.to_string(), seed));
            }
            "sweep_steps.csv"
        }
    };
    report.save_csv(out_dir(cfg)?.join(file))?;
    print!("{}", report.to_csv());
    Ok(())
}

fn ablate(cfg: &RunConfig) -> Result<()> {
    let s = setup(cfg)?;
    let seed = cfg.seed();
    let (_, members) = build_members(&s.models, s.strategy, true)?;
    let main = s.main_index(&members)?;
    let splits = s.splits();
    if splits.is_empty() {
        return Err(Error::config("ablate-norm needs datasets.dev or datasets.test"));
    }
    let mut report = RunReport::default();
    individual_rows(&mut report, &s, &members, &splits, seed)?;
    let name = s.models[main].name();
    for (split, items) in &splits {
        let a = ablate_normalization(&s.models, s.strategy, main, &s.ensemble, &s.stop, items)?;
        report.push(ensemble_row("raw", split, name, a.raw, &s.ensemble, s.strategy.to_string(), seed));
        report.push(ensemble_row("normalized", split, name, a.normalized, &s.ensemble, s.strategy.to_string(), seed));
    }
    report.save_csv(out_dir(cfg)?.join("ablate_norm.csv"))?;
    print!("{}", report.to_csv());
    Ok(())
}

const CONSISTENCY_PAIRS: usize = 1000;

fn inspect(cfg: &RunConfig, what: InspectKind) -> Result<()> {
    let mut stdout = io::stdout().lock();
    match what {
        InspectKind::Consistency => {
            let models = cfg.load_models()?;
            writeln!(stdout, "model_a,model_b,shared,mean,baseline,gap")?;
            for i in 0..models.len() {
                for j in i + 1..models.len() {
                    let g = consistency_gap(&models[i], &models[j], CONSISTENCY_PAIRS, cfg.seed())?;
                    writeln!(
                        stdout,
                        "{},{},{},{:.6},{:.6},{:.6}",
                        models[i].name(),
                        models[j].name(),
                        g.shared,
                        g.mean,
                        g.baseline,
                        g.gap()
                    )?;
                }
            }
        }
        InspectKind::NnHist => {
            let edges: Vec<f64> = (0..=20).map(|k| -1.0 + k as f64 / 10.0).collect();
            writeln!(stdout, "model,lower,upper,count")?;
            for m in &cfg.models {
                let table = EmbeddingTable::load(cfg.resolve(&m.embeddings))?;
                let h = nn_distance_histogram(&table, &edges)?;
                for (k, count) in h.counts.iter().enumerate() {
                    writeln!(stdout, "{},{:.1},{:.1},{count}", m.name, edges[k], edges[k + 1])?;
                }
                log::info!(
                    "`{}`: {:.1}% of tokens have nearest-neighbour cosine below 0.3 ({} zero rows skipped)",
                    m.name,
                    100.0 * h.fraction_below(0.3),
                    h.flagged
                );
            }
        }
    }
    Ok(())
}

fn serve_backend(cfg: &RunConfig, name: &str, listen: Option<&str>) -> Result<()> {
    let index = cfg.model_index(name)?;
    if matches!(cfg.models[index].backend, BackendConfig::Remote { .. }) {
        return Err(Error::config(format!("model `{name}` is itself remote")));
    }
    let backend = cfg.load_backend(index)?;
    match listen {
        None => {
            let stdin = io::stdin().lock();
            serve(backend.as_ref(), stdin, io::stdout().lock())
        }
        Some(addr) => {
            let listener = TcpListener::bind(addr)?;
            println!("{}", listener.local_addr()?);
            io::stdout().flush()?;
            for stream in listener.incoming() {
                let stream = stream?;
                let reader = io::BufReader::new(stream.try_clone()?);
                if let Err(e) = serve(backend.as_ref(), reader, stream) {
                    log::warn!("connection ended with error: {e}");
                }
            }
            Ok(())
        }
    }
}

