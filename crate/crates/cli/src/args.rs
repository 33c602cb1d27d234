use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use lapyr::models::Ordering;
use lapyr::training::{Phase, PhaseConfig};

use crate::UsageError;

#[derive(Debug, Parser)]
#[command(name = "lapyr", version, about = "Laplacian-pyramid tone mapping and denoising")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Enhance one image with a trained checkpoint.
    Enhance(EnhanceArgs),
    /// Train a checkpoint on a manifest or on synthetic scenes.
    Train(TrainArgs),
    /// Score image pairs and write a metric report.
    Eval(EvalArgs),
    /// Write the pyramid levels of an image for inspection.
    Decompose(DecomposeArgs),
    /// Parameter and multiply-accumulate counts of a checkpoint.
    Stats(StatsArgs),
    /// Train both orderings on the same data and seeds and report both.
    Compare(CompareArgs),
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to the ordering stored in the checkpoint.
    #[arg(long)]
    pub order: Option<Ordering>,
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long, default_value_t = lapyr::pipeline::PATCH_SIZE)]
    pub patch_size: usize,
    /// Write 16-bit samples instead of 8-bit.
    #[arg(long)]
    pub sixteen_bit: bool,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DataSource {
    /// `input<TAB>merged<TAB>final` per line.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Number of generated scenes, seeded by `--seed`.
    #[arg(long)]
    pub synthetic: Option<usize>,
}

#[derive(Debug, Args)]
pub struct Schedule {
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub phases: Vec<u8>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epochs per phase: one value for all phases or one per phase.
    #[arg(long, value_delimiter = ',')]
    pub epochs: Vec<usize>,
    /// Learning rate per phase, same layout as `--epochs`.
    #[arg(long, value_delimiter = ',')]
    pub lr: Vec<f64>,
    /// Batch size per phase, same layout as `--epochs`.
    #[arg(long, value_delimiter = ',')]
    pub batch: Vec<usize>,
}

impl Schedule {
    pub fn phase_configs(&self) -> Result<Vec<PhaseConfig>, UsageError> {
        let n = self.phases.len();
        let pick = |name: &str, len: usize, i: usize| -> Result<Option<usize>, UsageError> {
            match len {
                0 => Ok(None),
                1 => Ok(Some(0)),
                l if l == n => Ok(Some(i)),
                l => Err(UsageError(format!(
                    "--{name} has {l} values for {n} phases"
                ))),
            }
        };
        let mut out = Vec::with_capacity(n);
        for (i, &p) in self.phases.iter().enumerate() {
            let phase = Phase::from_number(p)
                .ok_or_else(|| UsageError(format!("unknown phase {p} (expected 1, 2 or 3)")))?;
            let mut c = PhaseConfig::default_for(phase);
            if let Some(k) = pick("epochs", self.epochs.len(), i)? {
                c.epochs = self.epochs[k];
            }
            if let Some(k) = pick("lr", self.lr.len(), i)? {
                c.learning_rate = self.lr[k];
            }
            if let Some(k) = pick("batch", self.batch.len(), i)? {
                c.batch_size = self.batch[k];
            }
            c.validate().map_err(|e| UsageError(e.to_string()))?;
            out.push(c);
        }
        Ok(out)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataSource,
    #[command(flatten)]
    pub schedule: Schedule,
    #[arg(long)]
    pub out: PathBuf,
    /// Start from this checkpoint instead of fresh weights.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long)]
    pub order: Option<Ordering>,
    /// Loss history CSV; defaults to the checkpoint path with `.loss.csv`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `candidate<TAB>target[<TAB>hdr_reference]` per line, or a training
    /// manifest (`input<TAB>merged<TAB>final`) together with `--checkpoint`.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Enhance the first column with this checkpoint before scoring.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub order: Option<Ordering>,
    #[arg(long)]
    pub report: PathBuf,
    /// Requested LPIPS; only prints a note.
    #[arg(long)]
    pub lpips: bool,
}

#[derive(Debug, Args)]
pub struct DecomposeArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub outdir: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub data: DataSource,
    #[command(flatten)]
    pub schedule: Schedule,
    /// Held-out synthetic scenes (with `--synthetic`).
    #[arg(long, default_value_t = 8)]
    pub held_out: usize,
    /// Held-out manifest (with `--manifest`).
    #[arg(long)]
    pub held_out_manifest: Option<PathBuf>,
    #[arg(long)]
    pub report: PathBuf,
    /// Directory for both trained checkpoints and loss histories.
    #[arg(long)]
    pub outdir: Option<PathBuf>,
}
