//! `jdbp`: generate data, train, fine-tune and evaluate joint bidding and
//! pricing policies from one config file.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};

use jdbp_core::checkpoint::Checkpoint;
use jdbp_core::config::{parse_config, Config};
use jdbp_core::eval::{
    ablation_flags, ablation_suite, ablation_table, evaluate, read_rows, summarize, write_report,
    AblationCheckpoints, EvalReport, PolicyKind, PolicySpec, ABLATION_LABELS, ROWS_FILE,
};
use jdbp_core::model::{ModelConfig, RtgVariant};
use jdbp_core::oracle::{random_instance, verify_theorem1, MAX_ITEMS};
use jdbp_core::pipeline::{finetune_checkpoint, run_experiment, train_checkpoint, Progress};
use jdbp_core::training::TrainConfig;
use jdbp_core::trajgen::{dataset_seeds, generate_dataset, Dataset};
use jdbp_core::Error;

const PUBLISHED_DEFAULTS: &str = "\
Defaults (change them in the config file):
  train.lr = 1e-4 (published default)
  train.batch_size = 32 (published default)
  train.weight_decay = 1e-4 (published default)
  train.lambda_b = train.lambda_p = 1 (published default)
  dpo.beta = 0.15 (published default)
  dpo.epochs = 3 (published default)
  dpo.lr = 1e-5 (published default)
  preference pool drops steps with less than 0.5 future value (published default)

Exit codes: 0 success, 1 usage or config error, 2 verification failure, 3 I/O error.";

#[derive(Debug, Parser)]
#[command(name = "jdbp", version, about = "Joint bidding and pricing laboratory", after_help = PUBLISHED_DEFAULTS)]
struct Cli {
    /// TOML config; absent keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides gen.seed_base, train.seed and dpo.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Overrides paths.out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    /// Memoryless bidding return, with GCA.
    Stage1,
    /// History-aware bidding return, with GCA.
    HisRtg,
    /// Memoryless bidding return, without GCA.
    NoGca,
}

impl Variant {
    fn label(self) -> &'static str {
        match self {
            Variant::Stage1 => "stage1",
            Variant::HisRtg => "his_rtg",
            Variant::NoGca => "no_gca",
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Roll out the base controllers and write the training dataset.
    Gen,
    /// Train a stage-1 checkpoint on the generated dataset.
    Train {
        #[arg(long, value_enum, default_value = "stage1")]
        variant: Variant,
    },
    /// Preference fine-tune the pricing stream of a stage-1 checkpoint.
    Dpo {
        /// Defaults to `<out>/checkpoints/stage1.ckpt`.
        #[arg(long)]
        from: Option<PathBuf>,
    },
    /// Evaluate checkpoints next to the PID baseline.
    Eval {
        /// Checkpoint to evaluate; repeatable. Labelled by file stem.
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
    },
    /// Compare the PID baseline and the four model variants.
    Ablate {
        /// Generate, train and fine-tune everything first instead of loading
        /// existing checkpoints.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Check the joint/bid-only reduction on random small instances.
    OracleVerify {
        #[arg(long, default_value_t = 200)]
        instances: u64,
        #[arg(long, default_value_t = 12)]
        max_items: usize,
    },
    /// Rebuild summaries and tables from evaluation rows.
    Report {
        /// Report directory; defaults to every directory under
        /// `<out>/reports`.
        #[arg(long)]
        dir: Option<PathBuf>,
    },
}

struct Ctx {
    config: Config,
    quiet: bool,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn checkpoint_path(&self, label: &str) -> PathBuf {
        self.config.paths.checkpoints().join(format!("{label}.ckpt"))
    }
}

/// Errors raised before any subcommand work starts.
#[derive(Debug)]
struct ConfigFailure(Error);

impl std::fmt::Display for ConfigFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}

impl std::error::Error for ConfigFailure {}

fn load_config(cli: &Cli) -> Result<Config, ConfigFailure> {
    let mut config = match &cli.config {
        Some(path) => parse_config(path).map_err(ConfigFailure)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        config.gen.seed_base = seed;
        config.train.seed = seed;
        config.dpo.seed = seed;
    }
    if let Some(out) = &cli.out {
        config.paths.out = out.clone();
    }
    config.validate().map_err(ConfigFailure)?;
    Ok(config)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigFailure>().is_some() {
        return 1;
    }
    match err.downcast_ref::<Error>() {
        Some(Error::Io { .. } | Error::Checkpoint(_) | Error::ShapeMismatch { .. } | Error::Parse { .. }) => 3,
        _ => 1,
    }
}

fn load_dataset(ctx: &Ctx) -> anyhow::Result<Dataset> {
    let dir = ctx.config.paths.data();
    Dataset::load(&dir)
        .with_context(|| format!("loading the dataset from {} (run `jdbp gen` first)", dir.display()))
}

/// Loads a checkpoint under the configured model shape. The GCA switch is
/// taken from the file, since the ablation variants differ in it.
fn load_checkpoint(path: &Path, model: &ModelConfig) -> anyhow::Result<Checkpoint> {
    let stored = Checkpoint::load(path, None)?;
    let expected = ModelConfig {
        use_gca: stored.model.config.use_gca,
        ..model.clone()
    };
    if stored.model.config == expected {
        return Ok(stored);
    }
    Ok(Checkpoint::load(path, Some(&expected))?)
}

fn write_csv<T: serde::Serialize>(path: &Path, items: &[T]) -> anyhow::Result<()> {
    let io = |e: csv::Error| Error::io(path, e.into());
    let mut w = csv::Writer::from_path(path).map_err(io)?;
    for item in items {
        w.serialize(item).map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn create_dir(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}

fn gen(ctx: &Ctx) -> anyhow::Result<()> {
    let c = &ctx.config;
    ctx.log(format!("generating {} episodes", c.gen.episodes));
    let seeds = dataset_seeds(c.gen.seed_base, c.gen.episodes);
    let dataset = generate_dataset(&c.env, &c.controllers, &seeds, c.workers())?;
    let dir = c.paths.data();
    dataset.save(&dir)?;
    let m = &dataset.manifest;
    ctx.log(format!(
        "{} records, {} in the preference pool ({} zero-advantage and {} low-value dropped) -> {}",
        m.stage1_records,
        m.dpo_records,
        m.dropped_zero_advantage,
        m.dropped_low_future_value,
        dir.display()
    ));
    Ok(())
}

fn train(ctx: &Ctx, variant: Variant) -> anyhow::Result<()> {
    let c = &ctx.config;
    let dataset = load_dataset(ctx)?;
    let model = ModelConfig {
        use_gca: c.model.use_gca && variant != Variant::NoGca,
        ..c.model.clone()
    };
    let train = TrainConfig {
        rtg: if variant == Variant::HisRtg {
            RtgVariant::Historical
        } else {
            RtgVariant::Memoryless
        },
        ..c.train.clone()
    };
    let label = variant.label();
    let (ckpt, outcome) = train_checkpoint(&dataset, &model, &train, |e| {
        ctx.log(format!(
            "{label} epoch {:>3} loss {:.6} grad norm {:.4}",
            e.epoch, e.mean_loss, e.grad_norm
        ))
    })?;
    if let Some(reason) = &outcome.aborted {
        ctx.log(format!("training stopped early: {reason}; keeping the best epoch"));
    }
    let dir = c.paths.checkpoints();
    create_dir(&dir)?;
    let path = ctx.checkpoint_path(label);
    ckpt.save(&path)?;
    write_csv(&dir.join(format!("{label}_loss.csv")), &outcome.curve)?;
    ctx.log(format!("best loss {:.6} -> {}", outcome.best_loss, path.display()));
    Ok(())
}

fn dpo(ctx: &Ctx, from: Option<PathBuf>) -> anyhow::Result<()> {
    let c = &ctx.config;
    let dataset = load_dataset(ctx)?;
    let from = from.unwrap_or_else(|| ctx.checkpoint_path("stage1"));
    let stage1 = load_checkpoint(&from, &c.model)?;
    let outcome = finetune_checkpoint(&dataset, &stage1, c)?;
    ctx.log(format!("initial gap to preferred {:.6}", outcome.initial_gap_to_preferred));
    for e in &outcome.curve {
        ctx.log(format!(
            "dpo epoch {} loss {:.6} gap {:.6}",
            e.epoch, e.mean_loss, e.mean_gap_to_preferred
        ));
    }
    let dir = c.paths.checkpoints();
    create_dir(&dir)?;
    let path = ctx.checkpoint_path("full");
    outcome.checkpoint.save(&path)?;
    write_csv(&dir.join("full_dpo.csv"), &outcome.curve)?;
    ctx.log(format!("-> {}", path.display()));
    Ok(())
}

fn finish_report(ctx: &Ctx, name: &str, report: &EvalReport, with_flags: bool) -> anyhow::Result<()> {
    let flags = if with_flags {
        Some(ablation_flags(&report.summaries)?)
    } else {
        None
    };
    let dir = ctx.config.paths.reports().join(name);
    write_report(report, flags.as_ref(), &dir)?;
    if !ctx.quiet {
        print!("{}", ablation_table(&report.summaries, flags.as_ref()));
    }
    ctx.log(format!("-> {}", dir.display()));
    Ok(())
}

fn eval(ctx: &Ctx, paths: &[PathBuf]) -> anyhow::Result<()> {
    let c = &ctx.config;
    let mut specs = vec![PolicySpec::new("pid", PolicyKind::Pid)];
    for path in paths {
        let label = path
            .file_stem()
            .map_or_else(|| path.display().to_string(), |s| s.to_string_lossy().into_owned());
        let ckpt = load_checkpoint(path, &c.model)?;
        specs.push(PolicySpec::new(label, PolicyKind::Model(Box::new(ckpt))));
    }
    let report = evaluate(&specs, &c.env, &c.controllers, &c.eval, &c.eval.seeds())?;
    finish_report(ctx, "eval", &report, false)
}

fn ablate(ctx: &Ctx, from_scratch: bool) -> anyhow::Result<()> {
    let c = &ctx.config;
    let result = if from_scratch {
        let exp = run_experiment(c, |p| match p {
            Progress::Stage(s) => ctx.log(s),
            Progress::Epoch(label, e) => ctx.log(format!("{label} epoch {:>3} loss {:.6}", e.epoch, e.mean_loss)),
        })?;
        exp.dataset.save(&c.paths.data())?;
        create_dir(&c.paths.checkpoints())?;
        let k = &exp.checkpoints;
        for (label, ckpt) in [("stage1", &k.stage1), ("full", &k.full), ("his_rtg", &k.his_rtg), ("no_gca", &k.no_gca)] {
            ckpt.save(&ctx.checkpoint_path(label))?;
        }
        exp.ablation
    } else {
        let load = |label: &str| load_checkpoint(&ctx.checkpoint_path(label), &c.model);
        let ckpts = AblationCheckpoints {
            full: load("full")?,
            stage1: load("stage1")?,
            his_rtg: load("his_rtg")?,
            no_gca: load("no_gca")?,
        };
        ablation_suite(&c.env, &c.controllers, &c.eval, &c.eval.seeds(), &ckpts)?
    };
    finish_report(ctx, "ablation", &result.report, true)
}

fn oracle_verify(ctx: &Ctx, instances: u64, max_items: usize) -> anyhow::Result<bool> {
    if max_items == 0 || max_items > MAX_ITEMS {
        return Err(Error::Usage(format!("--max-items must lie in 1..={MAX_ITEMS}")).into());
    }
    let seed = ctx.config.gen.seed_base;
    let mut failures = 0;
    for i in 0..instances {
        let n = 1 + (i as usize % max_items);
        let instance = random_instance(seed, i, n);
        let report = verify_theorem1(&instance)?;
        if !report.all() {
            failures += 1;
            ctx.log(format!("instance {i} (n = {n}) failed: {report:?}"));
        }
    }
    println!("{} of {instances} instances verified", instances - failures);
    Ok(failures == 0)
}

fn report(ctx: &Ctx, dir: Option<PathBuf>) -> anyhow::Result<()> {
    let dirs = match dir {
        Some(d) => vec![d],
        None => {
            let root = ctx.config.paths.reports();
            let mut dirs: Vec<PathBuf> = fs::read_dir(&root)
                .map_err(|e| Error::io(&root, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join(ROWS_FILE).is_file())
                .collect();
            dirs.sort();
            dirs
        }
    };
    for dir in dirs {
        let rows = read_rows(&dir.join(ROWS_FILE))?;
        let summaries = summarize(&rows);
        let has_all = ABLATION_LABELS.iter().all(|l| summaries.iter().any(|s| s.policy == *l));
        let flags = if has_all {
            Some(ablation_flags(&summaries)?)
        } else {
            None
        };
        let report = EvalReport { rows, summaries };
        write_report(&report, flags.as_ref(), &dir)?;
        println!("{}", dir.display());
        print!("{}", ablation_table(&report.summaries, flags.as_ref()));
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let ctx = Ctx {
        config: load_config(&cli)?,
        quiet: cli.quiet,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(ctx.config.workers())
        .build_global()
        .ok();
    match cli.command {
        Command::Gen => gen(&ctx)?,
        Command::Train { variant } => train(&ctx, variant)?,
        Command::Dpo { from } => dpo(&ctx, from)?,
        Command::Eval { checkpoints } => eval(&ctx, &checkpoints)?,
        Command::Ablate { from_scratch } => ablate(&ctx, from_scratch)?,
        Command::OracleVerify { instances, max_items } => {
            if !oracle_verify(&ctx, instances, max_items)? {
                return Ok(ExitCode::from(2));
            }
        }
        Command::Report { dir } => report(&ctx, dir)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
