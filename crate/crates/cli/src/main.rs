use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use vmask::audit::audit_config;
use vmask::checkpoint::Checkpoint;
use vmask::config::{Mode, RunConfig};
use vmask::metrics::write_attacks;
use vmask::run::{attack_model, prepare_data, run_with_data, sweep_budget, write_outputs, write_sweep};
use vmask::transport::Backend;

/// `println!` that tolerates a closed stdout, e.g. when piped into `head`.
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

#[derive(Parser)]
#[command(
    name = "vmask",
    version,
    about = "Vertical federated learning with secret-shared layer masking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write metrics, attacks and checkpoints.
    Train(TrainArgs),
    /// Run the model-completion attack against a saved bottom model.
    Attack(AttackArgs),
    /// Attack freshly initialized bottom models.
    BaselineScratch(CommonArgs),
    /// Check whether masked layers can be solved for from their inputs.
    CheckSecurity {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Exit successfully even if some layer is reconstructible.
        #[arg(long)]
        allow_insecure: bool,
    },
    /// Train once per privacy budget on the same seed.
    SweepBudget {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated, in descending order.
        #[arg(long, value_delimiter = ',', default_value = "0.6,0.5,0.4,0.3,0.2")]
        budgets: Vec<f64>,
    },
}

/// Flags that override values from the config file.
#[derive(Args)]
struct CommonArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    transport: Option<String>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    budget: Option<f64>,
    /// Attack the attacker view after every epoch.
    #[arg(long)]
    attack_every_epoch: bool,
    /// Write test-set embeddings of the final model.
    #[arg(long)]
    embeddings: bool,
}

#[derive(Args)]
struct AttackArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    labels_per_class: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = load_config(self.config.as_deref())?;
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.sigma {
            cfg.sigma = v;
        }
        if let Some(t) = &self.transport {
            cfg.transport = match t.as_str() {
                "inprocess" | "in-process" => Backend::InProcess,
                "tcp" => Backend::Tcp,
                other => bail!("unknown transport {other:?}"),
            };
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        Ok(cfg)
    }
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("vmask-out"))
}

fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if let Some(m) = &args.mode {
        cfg.mode = m.parse::<Mode>()?;
    }
    if let Some(b) = args.budget {
        cfg.budget = b;
    }
    cfg.attack.every_epoch |= args.attack_every_epoch;
    cfg.write_embeddings |= args.embeddings;
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let outcome = run_with_data(&cfg, &data)?;
    let dir = out_dir(&cfg);
    write_outputs(&outcome, &data, &dir).with_context(|| format!("writing outputs to {}", dir.display()))?;
    say!(
        "mode {} seed {}: best test accuracy {:.4} (epoch {}), final {:.4}, mask ratio {:.4}",
        cfg.mode,
        cfg.seed,
        outcome.best_test_accuracy,
        outcome.best_epoch,
        outcome.final_test_accuracy,
        outcome.mask_ratio
    );
    for a in &outcome.attacks {
        say!("attack party {} on {}: {:.4}", a.party, a.target, a.best);
    }
    say!("outputs in {}", dir.display());
    Ok(())
}

fn attack(args: AttackArgs) -> Result<()> {
    let ck = Checkpoint::load(&args.checkpoint).with_context(|| format!("loading {}", args.checkpoint.display()))?;
    let mut cfg = ck.config.clone();
    if let Some(m) = args.labels_per_class {
        cfg.attack.m_per_class = m;
    }
    if let Some(e) = args.epochs {
        cfg.attack.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.attack.lr = lr;
    }
    cfg.validate()?;
    let data = prepare_data(&cfg)?;
    let record = attack_model(
        &cfg,
        &data,
        ck.party,
        &ck.model,
        &format!("checkpoint-epoch-{}", ck.epoch),
    )?;
    say!(
        "attack accuracy {:.4} (party {}, {} labels per class)",
        record.best,
        ck.party,
        record.m_per_class
    );
    if let Some(dir) = args.out {
        std::fs::create_dir_all(&dir)?;
        write_attacks(&dir.join("attack.csv"), &[record])?;
    }
    Ok(())
}

fn baseline(args: CommonArgs) -> Result<()> {
    let mut cfg = args.resolve()?;
    cfg.mode = Mode::ScratchBaseline;
    let data = prepare_data(&cfg)?;
    let outcome = run_with_data(&cfg, &data)?;
    for a in &outcome.attacks {
        say!("scratch attack party {}: {:.4}", a.party, a.best);
    }
    if let Some(dir) = &cfg.out_dir {
        write_outputs(&outcome, &data, dir)?;
    }
    Ok(())
}

fn check_security(config: Option<PathBuf>, allow_insecure: bool) -> Result<ExitCode> {
    let cfg = load_config(config.as_deref())?;
    let data = prepare_data(&cfg)?;
    let report = audit_config(&cfg, data.feature_dim())?;
    say!("{report}");
    if !report.is_secure() && !allow_insecure {
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(common: CommonArgs, budgets: Vec<f64>) -> Result<()> {
    let cfg = common.resolve()?;
    let rows = sweep_budget(&cfg, &budgets)?;
    say!("budget,attack_best,attack_final,main_accuracy,mask_ratio");
    for r in &rows {
        say!(
            "{},{},{},{},{}",
            r.budget,
            r.attack_best,
            r.attack_final,
            r.main_accuracy,
            r.mask_ratio
        );
    }
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)?;
    write_sweep(&dir.join("sweep.csv"), &rows)?;
    Ok(())
}

fn main() -> Result<ExitCode> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train(a) => train(a)?,
        Command::Attack(a) => attack(a)?,
        Command::BaselineScratch(a) => baseline(a)?,
        Command::CheckSecurity { config, allow_insecure } => return check_security(config, allow_insecure),
        Command::SweepBudget { common, budgets } => sweep(common, budgets)?,
    }
    Ok(ExitCode::SUCCESS)
}
