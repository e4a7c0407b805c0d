use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use gaternet::analyze::{write_reports, GateLog, DEFAULT_HISTOGRAM_BINS};
use gaternet::config::RunConfig;
use gaternet::model::GaterNet;
use gaternet::train::{evaluate, run_phase, write_metrics_csv, Checkpoint, EvalTarget, Phase, PhaseInputs};
use gaternet::Error;

#[derive(Parser)]
#[command(name = "gaternet", version, about = "Train and inspect gated CNNs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum PhaseArg {
    PretrainBackbone,
    PretrainGater,
    Joint,
}

impl From<PhaseArg> for Phase {
    fn from(p: PhaseArg) -> Self {
        match p {
            PhaseArg::PretrainBackbone => Phase::PretrainBackbone,
            PhaseArg::PretrainGater => Phase::PretrainGater,
            PhaseArg::Joint => Phase::Joint,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run one training phase.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum)]
        phase: PhaseArg,
        /// Continue from a checkpoint of the same phase.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Pre-trained backbone for the joint phase
        /// [default: <out>/pretrain-backbone.ckpt].
        #[arg(long)]
        backbone_ckpt: Option<PathBuf>,
        /// Pre-trained gater for the joint phase
        /// [default: <out>/pretrain-gater.ckpt].
        #[arg(long)]
        gater_ckpt: Option<PathBuf>,
        /// Run the joint phase without pre-trained networks.
        #[arg(long)]
        from_scratch: bool,
        /// Override the training seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory (overrides the config and GATERNET_OUTPUT_DIR).
        #[arg(long, env = "GATERNET_OUTPUT_DIR")]
        out: Option<PathBuf>,
    },
    /// Score a checkpoint on the evaluation split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Write the binary gate vector of every eval sample here.
        #[arg(long)]
        dump_gates: Option<PathBuf>,
    },
    /// Gate taxonomy, histograms and PCA of a gate log, as CSV files.
    Analyze {
        #[arg(long)]
        gatelog: PathBuf,
        #[arg(long, env = "GATERNET_OUTPUT_DIR")]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        pca_k: usize,
        #[arg(long, default_value_t = DEFAULT_HISTOGRAM_BINS)]
        bins: usize,
    },
    /// Print the parameter counts of the configured model as JSON.
    Params {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error("{0}")]
    Usage(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) | CliError::Core(Error::Config(_)) => 2,
            CliError::Core(Error::MissingPrerequisite(_)) => 3,
            CliError::Core(Error::Io { .. } | Error::Format { .. }) => 4,
            CliError::Core(Error::SpecHashMismatch { .. }) => 5,
            CliError::Core(_) => 1,
        }
    }
}

fn to_json<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serializable")
}

fn load_if_exists(path: &Path) -> Result<Option<Checkpoint>, CliError> {
    if path.exists() {
        Ok(Some(Checkpoint::load(path)?))
    } else {
        Ok(None)
    }
}

#[allow(clippy::too_many_arguments)]
fn train(
    config: &Path,
    phase: Phase,
    resume: Option<PathBuf>,
    backbone_ckpt: Option<PathBuf>,
    gater_ckpt: Option<PathBuf>,
    from_scratch: bool,
    seed: Option<u64>,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.train.seed = s;
    }
    let out = out.unwrap_or_else(|| cfg.output_dir.clone());
    let (train_set, eval_set) = cfg.load_data()?;
    let resume = resume.map(Checkpoint::load).transpose()?;
    let (backbone, gater) = if phase == Phase::Joint && resume.is_none() && !from_scratch {
        let bb = backbone_ckpt.unwrap_or_else(|| out.join("pretrain-backbone.ckpt"));
        let gt = gater_ckpt.unwrap_or_else(|| out.join("pretrain-gater.ckpt"));
        let (b, g) = (load_if_exists(&bb)?, load_if_exists(&gt)?);
        if b.is_none() || g.is_none() {
            let missing: Vec<String> = [(&b, &bb), (&g, &gt)]
                .iter()
                .filter(|(c, _)| c.is_none())
                .map(|(_, p)| p.display().to_string())
                .collect();
            return Err(Error::MissingPrerequisite(format!(
                "joint training needs pre-trained checkpoints; not found: {}. Run the pretrain-backbone and pretrain-gater phases first, or pass --from-scratch",
                missing.join(", ")
            ))
            .into());
        }
        (b, g)
    } else {
        (None, None)
    };
    let ckpt_path = out.join(format!("{phase}.ckpt"));
    let metrics_path = out.join(format!("{phase}_metrics.csv"));
    let mut save_epoch = |_: &gaternet::train::EpochMetrics, ck: &Checkpoint| -> gaternet::Result<()> {
        ck.save(&ckpt_path)?;
        write_metrics_csv(&metrics_path, &ck.meta.metrics)
    };
    let result = run_phase(
        phase,
        &cfg.model,
        &cfg.train,
        &train_set,
        &eval_set,
        PhaseInputs {
            resume: resume.as_ref(),
            backbone: backbone.as_ref(),
            gater: gater.as_ref(),
            from_scratch,
            augment: cfg.augment,
            on_epoch: Some(&mut save_epoch),
        },
    )?;
    result.checkpoint.save(&ckpt_path)?;
    write_metrics_csv(&metrics_path, &result.metrics)?;
    if let Some(last) = result.metrics.last() {
        println!("{}", to_json(last));
    }
    info!("wrote {} and {}", ckpt_path.display(), metrics_path.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct EvalSummary {
    phase: Phase,
    epoch: usize,
    accuracy: f64,
    loss: f64,
    mean_gate_activation: Option<f64>,
    samples: usize,
}

fn eval(config: &Path, ckpt: &Path, dump_gates: Option<PathBuf>) -> Result<(), CliError> {
    let cfg = RunConfig::load(config)?;
    let ck = Checkpoint::load(ckpt)?;
    let mut net = GaterNet::new(cfg.model.clone(), ck.meta.seed)?;
    ck.restore(&mut net, None, ck.meta.phase.trainable())?;
    let (_, eval_set) = cfg.load_data()?;
    let target = EvalTarget::for_phase(ck.meta.phase);
    if dump_gates.is_some() && (target != EvalTarget::Full || net.num_gates() == 0) {
        return Err(CliError::Usage("--dump-gates needs a joint checkpoint of a gated model".into()));
    }
    let report = evaluate(&net, &eval_set, target, cfg.train.batch_size.max(64), dump_gates.is_some())?;
    if let (Some(path), Some(log)) = (&dump_gates, &report.gate_log) {
        log.write(path)?;
        info!("wrote {} gate vectors to {}", log.num_samples(), path.display());
    }
    println!(
        "{}",
        to_json(&EvalSummary {
            phase: ck.meta.phase,
            epoch: ck.meta.epoch,
            accuracy: report.accuracy,
            loss: report.loss,
            mean_gate_activation: report.mean_gate_activation,
            samples: eval_set.len(),
        })
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train {
            config,
            phase,
            resume,
            backbone_ckpt,
            gater_ckpt,
            from_scratch,
            seed,
            out,
        } => train(&config, phase.into(), resume, backbone_ckpt, gater_ckpt, from_scratch, seed, out),
        Command::Eval { config, ckpt, dump_gates } => eval(&config, &ckpt, dump_gates),
        Command::Analyze {
            gatelog,
            out,
            pca_k,
            bins,
        } => {
            let log = GateLog::read(&gatelog)?;
            let summary = write_reports(&log, &out, pca_k, bins)?;
            println!("{}", to_json(&summary));
            Ok(())
        }
        Command::Params { config } => {
            let cfg = RunConfig::load(config)?;
            let net = GaterNet::new(cfg.model, cfg.train.seed)?;
            println!("{}", to_json(&net.param_count()));
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
