//! `genatt` experiment driver: prepare, train, eval, check, bench.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use genatt::bench::{run_bench, BenchConfig};
use genatt::checks::{run_checks, CheckOptions};
use genatt::config::ExperimentConfig;
use genatt::data::synthetic::{generate, SyntheticSpec};
use genatt::data::{filter_min_interactions, leave_one_out_split, load_interactions, split_manifest, InteractionLog};
use genatt::evaluation::{evaluate, EvalConfig, ModelScorer, OracleScorer, PopularityScorer, RandomScorer, Scorer};
use genatt::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use genatt::tensor::RngStream;
use genatt::training::{fit, write_train_log};
use genatt::Error;

const INTERACTIONS: &str = "interactions.tsv";
const CATEGORIES: &str = "categories.tsv";
const SPLIT: &str = "split.json";
const STATS: &str = "stats.json";
const CHECKPOINT: &str = "checkpoint";
const TRAIN_LOG: &str = "train_log.csv";
const BENCH: &str = "bench.csv";
const CHECKS: &str = "checks.json";

#[derive(Parser)]
#[command(
    name = "genatt",
    version,
    about = "Generative attention for sequential recommendation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load, filter and split an interaction log.
    Prepare(PrepareArgs),
    /// Train a model on prepared data.
    Train(TrainArgs),
    /// Compute the metric table for a checkpoint or a baseline.
    Eval(EvalArgs),
    /// Run the property-check suite.
    Check(CheckArgs),
    /// Time training epochs across sequence lengths and diffusion steps.
    Bench(BenchArgs),
}

#[derive(Args)]
struct Common {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::from_file(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.set)?;
        cfg.out = Some(self.out.clone());
        Ok(cfg)
    }
}

#[derive(Args)]
struct PrepareArgs {
    #[command(flatten)]
    common: Common,
    /// Tab-separated `user  item  [timestamp]` file.
    #[arg(long, conflicts_with = "synthetic")]
    interactions: Option<PathBuf>,
    /// Tab-separated `item  category[,category...]` file.
    #[arg(long, requires = "interactions")]
    categories: Option<PathBuf>,
    /// Generate the toy corpus instead, e.g. `users=500 items=200 cats=10 seed=1`.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    synthetic: Option<Vec<String>>,
    /// Drop users and items with fewer interactions than this.
    #[arg(long)]
    min_interactions: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    /// Directory written by `prepare`.
    #[arg(long)]
    data: Option<PathBuf>,
    #[command(flatten)]
    model: ModelFlags,
}

/// Flags that win over both the config file and `--set`.
#[derive(Args, Default)]
struct ModelFlags {
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Diffusion steps.
    #[arg(long = "T", visible_alias = "steps")]
    steps: Option<usize>,
    #[arg(long)]
    beta_start: Option<f64>,
    #[arg(long)]
    beta_end: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    d_h: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    eval_seed: Option<u64>,
    #[arg(long)]
    eval_average: Option<usize>,
}

impl ModelFlags {
    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        let pairs: [(&str, Option<String>); 18] = [
            ("mode", self.mode.clone()),
            ("seed", self.seed.map(|v| v.to_string())),
            ("steps", self.steps.map(|v| v.to_string())),
            ("beta_start", self.beta_start.map(|v| v.to_string())),
            ("beta_end", self.beta_end.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("d", self.d.map(|v| v.to_string())),
            ("n", self.n.map(|v| v.to_string())),
            ("d_h", self.d_h.map(|v| v.to_string())),
            ("layers", self.layers.map(|v| v.to_string())),
            ("heads", self.heads.map(|v| v.to_string())),
            ("dropout", self.dropout.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| v.to_string())),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("max_epochs", self.max_epochs.map(|v| v.to_string())),
            ("patience", self.patience.map(|v| v.to_string())),
            ("eval_seed", self.eval_seed.map(|v| v.to_string())),
            ("eval_average", self.eval_average.map(|v| v.to_string())),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScorerKind {
    Model,
    Popularity,
    Random,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitKind {
    Test,
    Valid,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint written by `train` (required for `--scorer model`).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "model")]
    scorer: ScorerKind,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitKind,
    #[arg(long)]
    eval_seed: Option<u64>,
    /// Stochastic forward passes averaged per user.
    #[arg(long)]
    eval_average: Option<usize>,
    /// Use the VAE posterior mean instead of a sample.
    #[arg(long)]
    collapse: bool,
    /// Keep already-seen items among the candidates.
    #[arg(long)]
    include_history: bool,
    /// Sequence length for baseline scorers (no checkpoint).
    #[arg(long)]
    n: Option<usize>,
}

#[derive(Args)]
struct CheckArgs {
    #[arg(long)]
    out: PathBuf,
    /// Run only the named check (repeatable).
    #[arg(long, value_name = "NAME")]
    only: Vec<String>,
    /// Corrupt a gradient to exercise the failure path.
    #[arg(long)]
    inject_fault: bool,
    /// List the check names and exit.
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Time on a generated corpus instead of prepared data.
    #[arg(long, num_args = 0.., value_name = "KEY=VALUE")]
    synthetic: Option<Vec<String>>,
    /// Comma-separated sequence lengths.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Comma-separated diffusion step counts.
    #[arg(long = "T-values", value_delimiter = ',')]
    steps: Option<Vec<usize>>,
    /// Sequence length used for the step sweep.
    #[arg(long)]
    steps_len: Option<usize>,
    #[arg(long)]
    d: Option<usize>,
    /// Number of users timed.
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    repeats: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

fn create_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_prepared(dir: &Path) -> Result<InteractionLog> {
    let cats = dir.join(CATEGORIES);
    let cats = cats.exists().then_some(cats);
    Ok(load_interactions(&dir.join(INTERACTIONS), cats.as_deref())?)
}

fn data_dir(flag: &Option<PathBuf>, cfg: &mut ExperimentConfig) -> Result<PathBuf> {
    if let Some(d) = flag {
        cfg.data = Some(d.clone());
    }
    match &cfg.data {
        Some(d) => Ok(d.clone()),
        None => Err(Error::Config("no data directory (use --data or data = ...)".into()).into()),
    }
}

fn cmd_prepare(args: PrepareArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(k) = args.min_interactions {
        cfg.min_interactions = k;
    }
    if let Some(p) = &args.interactions {
        cfg.interactions = Some(p.clone());
    }
    if let Some(p) = &args.categories {
        cfg.categories = Some(p.clone());
    }
    cfg.validate()?;
    let raw = match (&args.synthetic, &cfg.interactions) {
        (Some(tokens), _) => generate(&SyntheticSpec::parse(tokens)?)?,
        (None, Some(path)) => load_interactions(path, cfg.categories.as_deref())?,
        (None, None) => bail!(Error::Config("need --interactions FILE or --synthetic".into())),
    };
    let log = filter_min_interactions(&raw, cfg.min_interactions)?;
    let split = leave_one_out_split(&log, cfg.n);
    let out = &args.common.out;
    create_out(out)?;
    log.write_interactions(&out.join(INTERACTIONS))?;
    log.write_categories(&out.join(CATEGORIES))?;
    write(
        &out.join(SPLIT),
        serde_json::to_string_pretty(&split_manifest(&log, &split))? + "\n",
    )?;
    let stats = log.stats();
    write(&out.join(STATS), serde_json::to_string_pretty(&stats)? + "\n")?;
    cfg.write_resolved(out)?;
    log::info!(
        "prepared {} users, {} items, {} interactions (density {:.5})",
        stats.users,
        stats.items,
        stats.interactions,
        stats.density
    );
    Ok(())
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    args.model.apply(&mut cfg)?;
    let data = data_dir(&args.data, &mut cfg)?;
    cfg.validate()?;
    let log = load_prepared(&data)?;
    let mc = cfg.model_config(log.num_items());
    mc.validate()?;
    let split = leave_one_out_split(&log, mc.n);
    let out = &args.common.out;
    create_out(out)?;
    cfg.write_resolved(out)?;
    let model = Model::<f64>::init(mc)?;
    let result = fit(model, &split, &cfg.train_config(), |e| {
        log::info!(
            "epoch {:>3}  rec {:.5}  gen {:.5}  val NDCG@20 {:.5}  ({:.2}s)",
            e.epoch,
            e.rec_loss,
            e.gen_loss,
            e.val_ndcg20,
            e.seconds
        );
    })?;
    write_train_log(&out.join(TRAIN_LOG), &result.log)?;
    save_checkpoint(&result.best, &out.join(CHECKPOINT))?;
    log::info!(
        "best epoch {} of {}{}",
        result.best_epoch,
        result.log.len(),
        if result.stopped_early { " (early stop)" } else { "" }
    );
    Ok(())
}

fn adopt_model(cfg: &mut ExperimentConfig, m: &ModelConfig) {
    cfg.mode = m.mode;
    cfg.d = m.d;
    cfg.n = m.n;
    cfg.layers = m.layers;
    cfg.heads = m.heads;
    cfg.d_h = Some(m.d_h);
    cfg.steps = Some(m.steps);
    cfg.beta_start = m.beta_start;
    cfg.beta_end = m.beta_end;
    cfg.gamma = m.gamma;
    cfg.dropout = m.dropout;
    cfg.diffusion_hidden = Some(m.diffusion_hidden);
    cfg.seed = m.seed;
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut cfg = args.common.load()?;
    if let Some(s) = args.eval_seed {
        cfg.eval_seed = s;
    }
    if let Some(a) = args.eval_average {
        cfg.eval_average = a;
    }
    if let Some(n) = args.n {
        cfg.n = n;
    }
    let data = data_dir(&args.data, &mut cfg)?;
    cfg.validate()?;
    let log = load_prepared(&data)?;
    let model = match (args.scorer, &args.checkpoint) {
        (ScorerKind::Model, None) => bail!(Error::Config("--scorer model needs --checkpoint".into())),
        (ScorerKind::Model, Some(p)) => {
            let model = load_checkpoint::<f64>(p)?;
            if model.config.num_items != log.num_items() {
                bail!(Error::Schema(format!(
                    "checkpoint has {} items but {} holds {}",
                    model.config.num_items,
                    data.display(),
                    log.num_items()
                )));
            }
            adopt_model(&mut cfg, &model.config);
            Some(model)
        }
        _ => None,
    };
    let split = leave_one_out_split(&log, cfg.n);
    let examples = match args.split {
        SplitKind::Test => &split.test,
        SplitKind::Valid => &split.valid,
    };
    let num_items = log.num_items();
    let mut scorer: Box<dyn Scorer> = match (args.scorer, &model) {
        (ScorerKind::Model, Some(m)) => {
            let mut s = ModelScorer::new(m, cfg.eval_seed);
            s.average = cfg.eval_average;
            s.collapse = args.collapse;
            Box::new(s)
        }
        (ScorerKind::Popularity, _) => Box::new(PopularityScorer::from_train(&split.train, num_items)),
        (ScorerKind::Random, _) => Box::new(RandomScorer {
            num_items,
            rng: RngStream::new(cfg.eval_seed),
        }),
        (ScorerKind::Oracle, _) => Box::new(OracleScorer { num_items }),
        (ScorerKind::Model, None) => unreachable!(),
    };
    let eval_cfg = EvalConfig {
        exclude_history: !args.include_history,
        ..EvalConfig::default()
    };
    let table = evaluate(
        scorer.as_mut(),
        examples,
        &log.categories,
        log.num_categories(),
        &eval_cfg,
    )?;
    let out = &args.common.out;
    create_out(out)?;
    cfg.write_resolved(out)?;
    table.write(out)?;
    for row in &table.rows {
        match row.n {
            Some(n) => log::info!("{}@{n} = {:.4}", row.metric, row.value),
            None => log::info!("{} = {:.4}", row.metric, row.value),
        }
    }
    Ok(())
}

fn cmd_check(args: CheckArgs) -> Result<ExitCode> {
    if args.list {
        for name in genatt::checks::CHECK_NAMES {
            println!("{name}");
        }
        return Ok(ExitCode::SUCCESS);
    }
    let opts = CheckOptions {
        inject_gradient_fault: args.inject_fault,
    };
    let report = run_checks(&args.only, &opts)?;
    create_out(&args.out)?;
    let cfg = ExperimentConfig {
        out: Some(args.out.clone()),
        ..ExperimentConfig::default()
    };
    cfg.write_resolved(&args.out)?;
    report.write(&args.out.join(CHECKS))?;
    for r in &report.results {
        println!(
            "{} {:<28} {:>7.3}s  {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.seconds,
            r.detail
        );
    }
    if report.passed {
        return Ok(ExitCode::SUCCESS);
    }
    let failed: Vec<&str> = report.failures().map(|r| r.name.as_str()).collect();
    eprintln!("error: failed checks: {}", failed.join(", "));
    Ok(ExitCode::FAILURE)
}

fn cmd_bench(args: BenchArgs) -> Result<ExitCode> {
    let mut cfg = args.common.load()?;
    if let Some(d) = &args.data {
        cfg.data = Some(d.clone());
    }
    cfg.validate()?;
    let log = match (&args.synthetic, &cfg.data) {
        (Some(tokens), _) => filter_min_interactions(&generate(&SyntheticSpec::parse(tokens)?)?, cfg.min_interactions)?,
        (None, Some(dir)) => load_prepared(dir)?,
        (None, None) => bail!(Error::Config("need --data DIR or --synthetic".into())),
    };
    let mut bc = BenchConfig::default();
    if let Some(v) = args.lengths {
        bc.lengths = v;
    }
    if let Some(v) = args.steps {
        bc.steps = v;
    }
    if let Some(v) = args.steps_len {
        bc.steps_len = v;
    }
    if let Some(v) = args.d {
        bc.d = v;
    }
    if let Some(v) = args.users {
        bc.users = v;
    }
    if let Some(v) = args.batch_size {
        bc.batch_size = v;
    }
    if let Some(v) = args.repeats {
        bc.repeats = v;
    }
    if let Some(v) = args.seed {
        bc.seed = v;
    }
    let report = run_bench(&log, &bc)?;
    let out = &args.common.out;
    create_out(out)?;
    cfg.write_resolved(out)?;
    report.write(&out.join(BENCH))?;
    print!("{}", report.to_csv());
    if !report.steps_monotone() {
        eprintln!("error: diffusion epoch time is not non-decreasing in T");
        return Ok(ExitCode::FAILURE);
    }
    Ok(ExitCode::SUCCESS)
}

/// The error chain, skipping causes already spelled out by their parent.
fn render(err: &anyhow::Error) -> String {
    let mut msg = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !msg.contains(&text) {
            if !msg.is_empty() {
                msg.push_str(": ");
            }
            msg.push_str(&text);
        }
    }
    msg
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => cmd_prepare(a).map(|_| ExitCode::SUCCESS),
        Command::Train(a) => cmd_train(a).map(|_| ExitCode::SUCCESS),
        Command::Eval(a) => cmd_eval(a).map(|_| ExitCode::SUCCESS),
        Command::Check(a) => cmd_check(a),
        Command::Bench(a) => cmd_bench(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", render(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
