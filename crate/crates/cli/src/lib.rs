//! Command-line driver: dataset synthesis, codec pretraining, fine-tuning,
//! evaluation, gradient checks and the ablation matrix.
//!
//! Every command resolves its flags into a [`RunConfig`] and writes it as
//! `resolved-config.json` next to its outputs. Passing that file back with
//! `--config` repeats the run exactly.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use dsrpgo_core::checkpoint::{fingerprint, Checkpoint, CheckpointError};
use dsrpgo_core::checks::run_suite;
use dsrpgo_core::codecs::{PseiConfig, PssiConfig};
use dsrpgo_core::data::{synth_dataset, DataError, ProteinDataset, Split, SynthSpec};
use dsrpgo_core::metrics::{davies_bouldin, label_set_clusters, EvalReport, MetricError};
use dsrpgo_core::model::{Ablation, Branch, ModelError};
use dsrpgo_core::nn::{Ctx, ParamStore};
use dsrpgo_core::tensor::{Tensor, TensorError};
use dsrpgo_core::trainer::{
    load_model, model_params, CodecKind, FinetuneConfig, Finetuner, PretrainConfig, Pretrainer, Schedule, TrainError,
};

pub const CONFIG_FILE: &str = "resolved-config.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("gradient check failed: {0}")]
    GradCheck(String),
    #[error("{0}")]
    Divergence(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    /// 0 success, 1 validation, 2 numerical divergence, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::GradCheck(_) => 1,
            CliError::Divergence(_) => 2,
            CliError::Io(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Divergence { .. } | TrainError::NanGradient(_) => CliError::Divergence(e.to_string()),
            TrainError::Checkpoint(c) => c.into(),
            other => CliError::Validation(other.to_string()),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Validation(e.to_string())
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Validation(e.to_string())
    }
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

#[derive(Debug, Parser)]
#[command(
    name = "dsrpgo",
    version,
    about = "Multimodal protein function prediction toolkit",
    args_conflicts_with_subcommands = true
)]
pub struct Cli {
    /// Replay a resolved-config.json written by an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory of a replay; defaults to the directory holding the config.
    #[arg(long, requires = "config")]
    pub out: Option<PathBuf>,
    /// Omit timestamps from emitted headers so outputs compare bitwise.
    #[arg(long, global = true)]
    pub no_timestamp: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic clustered dataset.
    Synth(SynthArgs),
    /// Pretrain both codecs by reconstruction.
    Pretrain(PretrainArgs),
    /// Fine-tune the full model on the train split.
    Finetune(FinetuneArgs),
    /// Score a model checkpoint on the test split.
    Eval(EvalArgs),
    /// Compare analytic gradients with central differences.
    Gradcheck(GradcheckArgs),
    /// Run the ablation matrix and tabulate the results.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 64)]
    pub proteins: usize,
    #[arg(long, default_value_t = 8)]
    pub terms: usize,
    #[arg(long, default_value_t = 8)]
    pub clusters: usize,
    #[arg(long, default_value_t = 0.3)]
    pub noise: f64,
    #[arg(long, default_value_t = 24)]
    pub attr_width: usize,
    #[arg(long, default_value_t = 32)]
    pub seq_width: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Train, valid and test fractions.
    #[arg(long, value_delimiter = ',', default_values_t = [0.8, 0.1, 0.1])]
    pub split: Vec<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Allow writing into a non-empty directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default)]
pub struct ScheduleArgs {
    /// Total epochs, split evenly between the two stages.
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
    #[arg(long)]
    pub stage1_lr: Option<f64>,
    #[arg(long)]
    pub stage2_epochs: Option<usize>,
    #[arg(long)]
    pub stage2_lr: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ScheduleArgs {
    fn resolve(&self, mut s: Schedule) -> Schedule {
        if let Some(n) = self.epochs {
            s.stage1_epochs = n / 2;
            s.stage2_epochs = n - n / 2;
        }
        s.stage1_epochs = self.stage1_epochs.unwrap_or(s.stage1_epochs);
        s.stage2_epochs = self.stage2_epochs.unwrap_or(s.stage2_epochs);
        s.stage1_lr = self.stage1_lr.unwrap_or(s.stage1_lr);
        s.stage2_lr = self.stage2_lr.unwrap_or(s.stage2_lr);
        s.dropout = self.dropout.unwrap_or(s.dropout);
        s.batch_size = self.batch_size.or(s.batch_size);
        s.weight_decay = self.weight_decay.unwrap_or(s.weight_decay);
        s.max_grad_norm = self.max_grad_norm.or(s.max_grad_norm);
        s.seed = self.seed;
        s
    }
}

#[derive(Debug, Args, Default)]
pub struct CodecArgs {
    /// Latent width D of both encoders.
    #[arg(long)]
    pub latent: Option<usize>,
    /// Width of each BiMamba or attention token.
    #[arg(long)]
    pub token_width: Option<usize>,
    /// SSM state size of the spatial codec.
    #[arg(long)]
    pub state: Option<usize>,
    #[arg(long)]
    pub conv_width: Option<usize>,
    /// Attention heads of the sequence codec.
    #[arg(long)]
    pub codec_heads: Option<usize>,
    /// Attention blocks of the sequence codec.
    #[arg(long)]
    pub codec_blocks: Option<usize>,
}

impl CodecArgs {
    fn apply(&self, pssi: &mut PssiConfig, psei: &mut PseiConfig) {
        if let Some(v) = self.latent {
            pssi.latent = v;
            psei.latent = v;
        }
        if let Some(v) = self.token_width {
            pssi.token_width = v;
            psei.token_width = v;
        }
        pssi.state = self.state.unwrap_or(pssi.state);
        pssi.conv_width = self.conv_width.unwrap_or(pssi.conv_width);
        psei.heads = self.codec_heads.unwrap_or(psei.heads);
        psei.blocks = self.codec_blocks.unwrap_or(psei.blocks);
    }
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub codec: CodecArgs,
    /// Also save the training state every N epochs (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    /// Continue from the checkpoints already in the output directory.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BranchArg {
    Both,
    MslOnly,
    MilOnly,
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    #[command(flatten)]
    pub codec: CodecArgs,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub msl_blocks: Option<usize>,
    #[arg(long)]
    pub expert_hidden: Option<usize>,
    #[arg(long)]
    pub expert_width: Option<usize>,
    #[arg(long)]
    pub predictor_hidden: Option<usize>,
    /// DSM selection threshold t; defaults to 1/V.
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub gamma_pos: Option<f64>,
    #[arg(long)]
    pub gamma_neg: Option<f64>,
    #[arg(long, value_enum)]
    pub branch: Option<BranchArg>,
    #[arg(long)]
    pub no_binm: bool,
    #[arg(long)]
    pub no_dsm: bool,
    /// Drop the spatial (PPI and attribute) inputs.
    #[arg(long)]
    pub no_spatial: bool,
    /// Drop the sequence input.
    #[arg(long)]
    pub no_sequence: bool,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding pssi.ckpt and psei.ckpt.
    #[arg(long, required_unless_present = "no_pretrained", conflicts_with = "no_pretrained")]
    pub pretrained: Option<PathBuf>,
    /// Train every parameter from its random initialization.
    #[arg(long)]
    pub no_pretrained: bool,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model checkpoint written by finetune.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Score the test split with its own labels (an oracle baseline).
    #[arg(long)]
    pub labels_as_scores: bool,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run only the named checks.
    #[arg(long)]
    pub only: Vec<String>,
    /// Append a check whose backward rule is deliberately wrong.
    #[arg(long)]
    pub inject_fault: bool,
    /// Also write gradcheck.tsv and the resolved config here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory holding pssi.ckpt and psei.ckpt; pretrains in-process when absent.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Pretraining epochs when no checkpoints are given.
    #[arg(long, default_value_t = 200)]
    pub pretrain_epochs: usize,
    #[command(flatten)]
    pub schedule: ScheduleArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Run only these configurations, e.g. `w/o-DSM` or `MSLB`.
    #[arg(long)]
    pub only: Vec<String>,
    /// Fmax level used for the epochs-to-target column.
    #[arg(long, default_value_t = 0.95)]
    pub target_fmax: f64,
    #[arg(long)]
    pub force: bool,
}

/// Fully resolved parameters of one command; serialized next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum RunConfig {
    Synth {
        spec: SynthSpec,
    },
    Pretrain {
        data: PathBuf,
        pssi: PretrainConfig,
        psei: PretrainConfig,
        checkpoint_every: usize,
    },
    Finetune {
        data: PathBuf,
        pretrained: Option<PathBuf>,
        finetune: FinetuneConfig,
        checkpoint_every: usize,
    },
    Eval {
        data: PathBuf,
        model: PathBuf,
        labels_as_scores: bool,
    },
    Gradcheck {
        seed: u64,
        only: Vec<String>,
        inject_fault: bool,
    },
    Ablate {
        data: PathBuf,
        pretrained: Option<PathBuf>,
        pretrain: Schedule,
        finetune: FinetuneConfig,
        only: Vec<String>,
        target_fmax: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedConfig {
    pub no_timestamp: bool,
    pub run: RunConfig,
}

impl ResolvedConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    fn seed(&self) -> u64 {
        match &self.run {
            RunConfig::Synth { spec } => spec.seed,
            RunConfig::Pretrain { pssi, .. } => pssi.schedule.seed,
            RunConfig::Finetune { finetune, .. } | RunConfig::Ablate { finetune, .. } => finetune.schedule.seed,
            RunConfig::Eval { .. } => 0,
            RunConfig::Gradcheck { seed, .. } => *seed,
        }
    }

    fn name(&self) -> &'static str {
        match &self.run {
            RunConfig::Synth { .. } => "synth",
            RunConfig::Pretrain { .. } => "pretrain",
            RunConfig::Finetune { .. } => "finetune",
            RunConfig::Eval { .. } => "eval",
            RunConfig::Gradcheck { .. } => "gradcheck",
            RunConfig::Ablate { .. } => "ablate",
        }
    }

    /// `#` comment lines identifying the run that produced a table.
    pub fn provenance(&self) -> String {
        let mut s = format!(
            "# dsrpgo {} {}\n# fingerprint\t{}\n# seed\t{}\n",
            self.name(),
            env!("CARGO_PKG_VERSION"),
            fingerprint(&self.run),
            self.seed()
        );
        if !self.no_timestamp {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            s += &format!("# timestamp\t{secs}\n");
        }
        s
    }
}

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn write(path: &Path, content: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, content).map_err(|e| io_err(path, e))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::path::absolute(p).map_err(|e| io_err(p, e))
}

/// Creates `dir`, refusing a non-empty one unless `force` is set.
fn prepare_out(dir: &Path, force: bool) -> Result<()> {
    if let Ok(mut entries) = fs::read_dir(dir) {
        if entries.next().is_some() && !force {
            return Err(CliError::Validation(format!("{} is not empty; pass --force to overwrite", dir.display())));
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn load_dataset(path: &Path) -> Result<ProteinDataset> {
    Ok(ProteinDataset::load(path)?)
}

fn ablation_of(m: &ModelArgs) -> Ablation {
    Ablation {
        branch: match m.branch {
            None | Some(BranchArg::Both) => Branch::Both,
            Some(BranchArg::MslOnly) => Branch::MslOnly,
            Some(BranchArg::MilOnly) => Branch::MilOnly,
        },
        use_binm: !m.no_binm,
        use_dsm: !m.no_dsm,
        use_spatial: !m.no_spatial,
        use_sequence: !m.no_sequence,
    }
}

fn codec_configs(dir: &Path) -> Result<(PretrainConfig, PretrainConfig)> {
    let pssi: PretrainConfig = Checkpoint::load(&dir.join("pssi.ckpt"))?.config()?;
    let psei: PretrainConfig = Checkpoint::load(&dir.join("psei.ckpt"))?.config()?;
    Ok((pssi, psei))
}

/// Model config from flags; codec widths follow the pretrained checkpoints
/// unless overridden.
fn resolve_finetune(
    ds: &ProteinDataset,
    schedule: &ScheduleArgs,
    m: &ModelArgs,
    pretrained: Option<&Path>,
) -> Result<FinetuneConfig> {
    let mut cfg = FinetuneConfig::for_dataset(ds, schedule.resolve(Schedule::finetune_default()));
    if let Some(dir) = pretrained {
        let (pssi, psei) = codec_configs(dir)?;
        cfg.model.pssi = pssi.pssi;
        cfg.model.psei = psei.psei;
        cfg.model.pssi.dropout = cfg.schedule.dropout;
        cfg.model.psei.dropout = cfg.schedule.dropout;
    }
    let mc = &mut cfg.model;
    m.codec.apply(&mut mc.pssi, &mut mc.psei);
    mc.heads = m.heads.unwrap_or(mc.heads);
    mc.msl_blocks = m.msl_blocks.unwrap_or(mc.msl_blocks);
    mc.expert_hidden = m.expert_hidden.unwrap_or(mc.expert_hidden);
    mc.expert_width = m.expert_width.unwrap_or(mc.expert_width);
    mc.predictor_hidden = m.predictor_hidden.unwrap_or(mc.predictor_hidden);
    mc.threshold = m.threshold.or(mc.threshold);
    mc.gamma_pos = m.gamma_pos.unwrap_or(mc.gamma_pos);
    mc.gamma_neg = m.gamma_neg.unwrap_or(mc.gamma_neg);
    mc.ablation = ablation_of(m);
    mc.validate()?;
    cfg.schedule.validate()?;
    Ok(cfg)
}

/// Turns parsed flags into a resolved config, the output directory and the
/// operational switches that do not affect outputs.
pub fn resolve(cmd: &Command, no_timestamp: bool) -> Result<(ResolvedConfig, Option<PathBuf>, Switches)> {
    let sw = |force, resume| Switches { force, resume };
    let (run, out, switches) = match cmd {
        Command::Synth(a) => {
            let split: [f64; 3] =
                a.split.clone().try_into().map_err(|_| CliError::Validation("--split takes three fractions".into()))?;
            let spec = SynthSpec {
                proteins: a.proteins,
                terms: a.terms,
                clusters: a.clusters,
                attr_width: a.attr_width,
                seq_width: a.seq_width,
                noise: a.noise,
                seed: a.seed,
                split,
            };
            spec.validate()?;
            (RunConfig::Synth { spec }, Some(a.out.clone()), sw(a.force, false))
        }
        Command::Pretrain(a) => {
            let ds = load_dataset(&a.data)?;
            let schedule = a.schedule.resolve(Schedule::pretrain_default());
            schedule.validate()?;
            let mut pssi = PretrainConfig::for_dataset(CodecKind::Pssi, &ds, schedule.clone());
            a.codec.apply(&mut pssi.pssi, &mut pssi.psei);
            let psei = PretrainConfig { kind: CodecKind::Psei, ..pssi.clone() };
            let run =
                RunConfig::Pretrain { data: absolute(&a.data)?, pssi, psei, checkpoint_every: a.checkpoint_every };
            (run, Some(a.out.clone()), sw(a.force, a.resume))
        }
        Command::Finetune(a) => {
            let ds = load_dataset(&a.data)?;
            let pretrained = a.pretrained.as_deref().map(absolute).transpose()?;
            let finetune = resolve_finetune(&ds, &a.schedule, &a.model, pretrained.as_deref())?;
            let run = RunConfig::Finetune {
                data: absolute(&a.data)?,
                pretrained,
                finetune,
                checkpoint_every: a.checkpoint_every,
            };
            (run, Some(a.out.clone()), sw(a.force, a.resume))
        }
        Command::Eval(a) => {
            let run = RunConfig::Eval {
                data: absolute(&a.data)?,
                model: absolute(&a.model)?,
                labels_as_scores: a.labels_as_scores,
            };
            (run, Some(a.out.clone()), sw(a.force, false))
        }
        Command::Gradcheck(a) => {
            let run = RunConfig::Gradcheck { seed: a.seed, only: a.only.clone(), inject_fault: a.inject_fault };
            (run, a.out.clone(), sw(a.force, false))
        }
        Command::Ablate(a) => {
            let ds = load_dataset(&a.data)?;
            let pretrained = a.pretrained.as_deref().map(absolute).transpose()?;
            let finetune = resolve_finetune(&ds, &a.schedule, &a.model, pretrained.as_deref())?;
            let pretrain = Schedule {
                stage1_epochs: a.pretrain_epochs / 2,
                stage2_epochs: a.pretrain_epochs - a.pretrain_epochs / 2,
                seed: a.schedule.seed,
                ..Schedule::pretrain_default()
            };
            let only = a.only.iter().map(|o| Toggle::parse(o).map(|t| t.label().to_string())).collect::<Result<_>>()?;
            let run = RunConfig::Ablate {
                data: absolute(&a.data)?,
                pretrained,
                pretrain,
                finetune,
                only,
                target_fmax: a.target_fmax,
            };
            (run, Some(a.out.clone()), sw(a.force, false))
        }
    };
    Ok((ResolvedConfig { no_timestamp, run }, out, switches))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Switches {
    pub force: bool,
    pub resume: bool,
}

/// Entry point shared by the binary and the tests.
pub fn run(cli: Cli) -> Result<()> {
    if let Some(path) = &cli.config {
        let mut cfg = ResolvedConfig::load(path)?;
        cfg.no_timestamp |= cli.no_timestamp;
        let out = match &cli.out {
            Some(o) => o.clone(),
            None => path.parent().map_or_else(|| PathBuf::from("."), Path::to_path_buf),
        };
        let replay_in_place = cli.out.is_none();
        return execute(&cfg, Some(&out), Switches { force: replay_in_place, resume: false });
    }
    let cmd =
        cli.command.as_ref().ok_or_else(|| CliError::Validation("a subcommand or --config is required".into()))?;
    let (cfg, out, switches) = resolve(cmd, cli.no_timestamp)?;
    execute(&cfg, out.as_deref(), switches)
}

/// Runs a resolved config, writing outputs and the config itself to `out`.
pub fn execute(cfg: &ResolvedConfig, out: Option<&Path>, sw: Switches) -> Result<()> {
    if let Some(dir) = out {
        if !sw.resume {
            prepare_out(dir, sw.force)?;
        }
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        let json = serde_json::to_string_pretty(cfg).expect("configs serialize") + "\n";
        write(&dir.join(CONFIG_FILE), json)?;
    }
    match &cfg.run {
        RunConfig::Synth { spec } => cmd_synth(spec, out.expect("synth has an output")),
        RunConfig::Pretrain { data, pssi, psei, checkpoint_every } => {
            let ds = load_dataset(data)?;
            let dir = out.expect("pretrain has an output");
            for c in [pssi, psei] {
                cmd_pretrain(cfg, &ds, c, *checkpoint_every, sw.resume, dir)?;
            }
            Ok(())
        }
        RunConfig::Finetune { data, pretrained, finetune, checkpoint_every } => {
            let ds = load_dataset(data)?;
            cmd_finetune(
                cfg,
                &ds,
                pretrained.as_deref(),
                finetune,
                *checkpoint_every,
                sw.resume,
                out.expect("finetune has an output"),
            )
        }
        RunConfig::Eval { data, model, labels_as_scores } => {
            cmd_eval(&load_dataset(data)?, model, *labels_as_scores, out.expect("eval has an output"))
        }
        RunConfig::Gradcheck { seed, only, inject_fault } => cmd_gradcheck(cfg, *seed, only, *inject_fault, out),
        RunConfig::Ablate { data, pretrained, pretrain, finetune, only, target_fmax } => {
            let ds = load_dataset(data)?;
            cmd_ablate(
                cfg,
                &ds,
                pretrained.as_deref(),
                pretrain,
                finetune,
                only,
                *target_fmax,
                out.expect("ablate has an output"),
            )
        }
    }
}

fn cmd_synth(spec: &SynthSpec, out: &Path) -> Result<()> {
    let ds = synth_dataset(spec)?;
    ds.save(out)?;
    let count = |s| ds.indices(s).len();
    println!(
        "wrote {} proteins, {} terms, {} clusters to {} (train {}, valid {}, test {})",
        ds.len(),
        ds.terms(),
        spec.clusters,
        out.display(),
        count(Split::Train),
        count(Split::Valid),
        count(Split::Test)
    );
    Ok(())
}

fn cmd_pretrain(
    cfg: &ResolvedConfig,
    ds: &ProteinDataset,
    pc: &PretrainConfig,
    every: usize,
    resume: bool,
    out: &Path,
) -> Result<()> {
    let name = pc.kind.name();
    let ckpt_path = out.join(format!("{name}.ckpt"));
    let mut p = if resume && ckpt_path.exists() {
        Pretrainer::resume(ds, &Checkpoint::load(&ckpt_path)?)?
    } else {
        Pretrainer::new(ds, pc.clone())?
    };
    if p.cfg != *pc {
        return Err(CliError::Validation(format!("{} was written by a different configuration", ckpt_path.display())));
    }
    while !p.done() {
        p.step_epoch()?;
        if every > 0 && p.state.epoch % every == 0 {
            p.checkpoint().save(&ckpt_path)?;
        }
    }
    p.checkpoint().save(&ckpt_path)?;
    let mut tsv = cfg.provenance();
    tsv += &format!("# initial_eval_loss\t{:.10e}\nepoch\tlr\ttrain_loss\teval_loss\n", p.initial_loss);
    for r in &p.curve {
        tsv += &format!("{}\t{:e}\t{:.10e}\t{:.10e}\n", r.epoch, r.lr, r.train_loss, r.eval_loss);
    }
    write(&out.join(format!("{name}_curve.tsv")), tsv)?;
    let last = p.curve.last().map_or(p.initial_loss, |r| r.eval_loss);
    println!("{name}: {} epochs, loss {:.4} -> {:.4}", p.curve.len(), p.initial_loss, last);
    Ok(())
}

fn pretrained_stores(dir: &Path) -> Result<(ParamStore, ParamStore)> {
    let pssi = Checkpoint::load(&dir.join("pssi.ckpt"))?;
    pssi.expect_kind("pssi")?;
    let psei = Checkpoint::load(&dir.join("psei.ckpt"))?;
    psei.expect_kind("psei")?;
    Ok((model_params(&pssi), model_params(&psei)))
}

const METRIC_COLUMNS: [&str; 5] = ["fmax", "m-aupr", "M-aupr", "f1", "acc"];

fn metric_cells(m: Option<&dsrpgo_core::trainer::MetricRow>) -> String {
    match m {
        Some(m) => format!("{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}", m.fmax, m.m_aupr, m.macro_aupr, m.f1, m.acc),
        None => ["NA"; 5].join("\t"),
    }
}

fn cmd_finetune(
    cfg: &ResolvedConfig,
    ds: &ProteinDataset,
    pretrained: Option<&Path>,
    fc: &FinetuneConfig,
    every: usize,
    resume: bool,
    out: &Path,
) -> Result<()> {
    let last_path = out.join("last.ckpt");
    let mut f = if resume && last_path.exists() {
        Finetuner::resume(ds, &Checkpoint::load(&last_path)?)?
    } else {
        let stores = pretrained.map(pretrained_stores).transpose()?;
        Finetuner::new(ds, fc.clone(), stores.as_ref().map(|(a, b)| (a, b)))?
    };
    if f.cfg != *fc {
        return Err(CliError::Validation(format!("{} was written by a different configuration", last_path.display())));
    }
    while !f.done() {
        f.step_epoch()?;
        if every > 0 && f.state.epoch % every == 0 {
            f.checkpoint().save(&last_path)?;
        }
    }
    f.checkpoint().save(&last_path)?;
    f.best_checkpoint().save(&out.join("model.ckpt"))?;
    let mut tsv = cfg.provenance();
    tsv += &format!("# loaded_groups\t{}\n# fresh_groups\t{}\n", f.manifest.loaded.len(), f.manifest.fresh.len());
    tsv += "epoch\tlr\tloss";
    for c in METRIC_COLUMNS {
        tsv += &format!("\t{c}");
    }
    for c in METRIC_COLUMNS {
        tsv += &format!("\ttrain_{c}");
    }
    tsv += "\n";
    for r in &f.curve {
        tsv += &format!(
            "{}\t{:e}\t{:.10e}\t{}\t{}\n",
            r.epoch,
            r.lr,
            r.loss,
            metric_cells(r.valid.as_ref()),
            metric_cells(Some(&r.train))
        );
    }
    write(&out.join("metrics.tsv"), tsv)?;
    let last = f.curve.last();
    println!(
        "finetune: {} epochs, best epoch {:?}, final train fmax {}",
        f.curve.len(),
        f.best_epoch,
        last.map_or("NA".into(), |r| format!("{:.4}", r.train.fmax))
    );
    Ok(())
}

fn flatten_rows(t: &Tensor) -> Result<Tensor> {
    let rows = t.shape()[0];
    Ok(t.reshaped(vec![rows, t.numel() / rows])?)
}

/// Davies-Bouldin scores of the raw inputs, both branch embeddings and the
/// DSM embedding over every labeled protein, clustered by label set.
pub fn embedding_db_scores(
    model: &dsrpgo_core::model::Dsrpgo,
    store: &ParamStore,
    ds: &ProteinDataset,
) -> Result<Vec<(String, f64)>> {
    let rows: Vec<usize> = (0..ds.len()).filter(|&i| ds.has_labels[i]).collect();
    let clusters = label_set_clusters(&ds.labels_for(&rows));
    let x = ds.inputs(&rows);
    let mut cx = Ctx::eval(store);
    let o = model.forward(&mut cx, &x)?;
    let mut named = vec![
        ("o_PPI".to_string(), x.ppi.clone()),
        ("o_Attribute".to_string(), x.attributes.clone()),
        ("o_Sequence".to_string(), x.sequence.clone()),
    ];
    for (name, v) in [("MSL", o.msl), ("MIL", o.mil)] {
        if let Some(v) = v {
            named.push((name.to_string(), flatten_rows(cx.value(v))?));
        }
    }
    named.push(("DSM".to_string(), cx.value(o.fused).clone()));
    named.into_par_iter().map(|(n, e)| Ok((n, davies_bouldin(&e, &clusters)?))).collect()
}

fn cmd_eval(ds: &ProteinDataset, model_path: &Path, labels_as_scores: bool, out: &Path) -> Result<()> {
    let rows = ds.indices(Split::Test);
    if rows.is_empty() {
        return Err(CliError::Validation("the dataset has no test split".into()));
    }
    let ckpt = Checkpoint::load(model_path)?;
    let (model, store) = load_model(&ckpt)?;
    let labels = ds.labels_for(&rows);
    let scores = if labels_as_scores { labels.clone() } else { model.predict(&store, &ds.inputs(&rows))? };
    let mut report = EvalReport::compute(&scores, &labels)?;
    for (name, v) in embedding_db_scores(&model, &store, ds)? {
        report.db_scores.insert(name, v);
    }
    write(&out.join("report.txt"), report.to_text())?;
    write(&out.join("report.json"), serde_json::to_string_pretty(&report).expect("reports serialize") + "\n")?;
    print!("{}", report.to_text());
    Ok(())
}

fn cmd_gradcheck(
    cfg: &ResolvedConfig,
    seed: u64,
    only: &[String],
    inject_fault: bool,
    out: Option<&Path>,
) -> Result<()> {
    let filter = (!only.is_empty()).then_some(only);
    let report = run_suite(seed, filter, inject_fault)?;
    if report.rows.is_empty() {
        return Err(CliError::Validation(format!("no check matches {only:?}")));
    }
    let tsv = cfg.provenance() + &report.to_tsv();
    print!("{tsv}");
    if let Some(dir) = out {
        write(&dir.join("gradcheck.tsv"), &tsv)?;
    }
    if report.passed() {
        Ok(())
    } else {
        let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
        Err(CliError::GradCheck(failed.join(", ")))
    }
}

/// The eight configurations of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Toggle {
    Mslb,
    Milb,
    Full,
    NoBinm,
    NoDsm,
    NoSpatial,
    NoSequence,
    NoPretrain,
}

impl Toggle {
    pub const ALL: [Toggle; 8] = [
        Toggle::Mslb,
        Toggle::Milb,
        Toggle::Full,
        Toggle::NoBinm,
        Toggle::NoDsm,
        Toggle::NoSpatial,
        Toggle::NoSequence,
        Toggle::NoPretrain,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Toggle::Mslb => "MSLB",
            Toggle::Milb => "MILB",
            Toggle::Full => "MSLB+MILB",
            Toggle::NoBinm => "w/o-BInM",
            Toggle::NoDsm => "w/o-DSM",
            Toggle::NoSpatial => "w/o-SP-F",
            Toggle::NoSequence => "w/o-SE-F",
            Toggle::NoPretrain => "w/o-pretrain",
        }
    }

    /// Accepts labels case-insensitively, with spaces or dashes.
    pub fn parse(s: &str) -> Result<Self> {
        let norm = |x: &str| x.to_ascii_lowercase().replace([' ', '_'], "-");
        Self::ALL.into_iter().find(|t| norm(t.label()) == norm(s)).ok_or_else(|| {
            CliError::Validation(format!(
                "unknown ablation {s:?}; expected one of {}",
                Self::ALL.map(Toggle::label).join(", ")
            ))
        })
    }

    fn apply(self, base: &FinetuneConfig) -> FinetuneConfig {
        let mut c = base.clone();
        let a = &mut c.model.ablation;
        *a = Ablation::default();
        match self {
            Toggle::Mslb => a.branch = Branch::MslOnly,
            Toggle::Milb => a.branch = Branch::MilOnly,
            Toggle::Full | Toggle::NoPretrain => {}
            Toggle::NoBinm => a.use_binm = false,
            Toggle::NoDsm => a.use_dsm = false,
            Toggle::NoSpatial => a.use_spatial = false,
            Toggle::NoSequence => a.use_sequence = false,
        }
        c
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    cfg: &ResolvedConfig,
    ds: &ProteinDataset,
    pretrained: Option<&Path>,
    pretrain: &Schedule,
    base: &FinetuneConfig,
    only: &[String],
    target: f64,
    out: &Path,
) -> Result<()> {
    let toggles: Vec<Toggle> = if only.is_empty() {
        Toggle::ALL.to_vec()
    } else {
        only.iter().map(|o| Toggle::parse(o)).collect::<Result<_>>()?
    };
    let stores = match pretrained {
        Some(dir) => pretrained_stores(dir)?,
        None => {
            let mut pc = PretrainConfig::for_dataset(CodecKind::Pssi, ds, pretrain.clone());
            pc.pssi = PssiConfig { dropout: pretrain.dropout, ..base.model.pssi.clone() };
            pc.psei = PseiConfig { dropout: pretrain.dropout, ..base.model.psei.clone() };
            let run = |kind| -> Result<ParamStore> {
                let mut p = Pretrainer::new(ds, PretrainConfig { kind, ..pc.clone() })?;
                p.run()?;
                Ok(p.state.params)
            };
            (run(CodecKind::Pssi)?, run(CodecKind::Psei)?)
        }
    };
    let rows: Vec<(Toggle, Finetuner<'_>)> = toggles
        .par_iter()
        .map(|&t| {
            let fc = t.apply(base);
            let pre = (t != Toggle::NoPretrain).then_some((&stores.0, &stores.1));
            let mut f = Finetuner::new(ds, fc, pre)?;
            f.run()?;
            Ok((t, f))
        })
        .collect::<Result<_>>()?;
    let test_rows = ds.indices(Split::Test);
    let mut tsv = cfg.provenance();
    tsv += "# metric columns are on the test split\nconfiguration";
    for c in METRIC_COLUMNS {
        tsv += &format!("\t{c}");
    }
    tsv += &format!("\ttrain_fmax\tbest_epoch\tepochs_to_{target}\n");
    for (t, f) in &rows {
        let test = dsrpgo_core::trainer::split_metrics(&f.model, &f.best, ds, &test_rows)?;
        let train_fmax = f.curve.last().map_or(f64::NAN, |r| r.train.fmax);
        let reach = f.epochs_to(target).map_or("NA".into(), |e| e.to_string());
        let best = f.best_epoch.map_or("NA".into(), |e| e.to_string());
        tsv += &format!("{}\t{}\t{train_fmax:.6}\t{best}\t{reach}\n", t.label(), metric_cells(test.as_ref()));
    }
    write(&out.join("ablation.tsv"), &tsv)?;
    print!("{tsv}");
    Ok(())
}

/// Caps rayon's worker count from `DSRPGO_THREADS`.
pub fn configure_threads() -> Result<()> {
    let Ok(v) = std::env::var("DSRPGO_THREADS") else { return Ok(()) };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Validation(format!("DSRPGO_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Validation(e.to_string()))
}
