//! Command-line and config-file arguments.
//!
//! Every subcommand's flags are optional so that a value can come from the
//! flag, then from the matching table of the `--config` file, then from the
//! built-in default.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

pub const OUTPUT_ENV: &str = "DIDMDN_OUTPUT_DIR";
pub const DEFAULT_OUTPUT: &str = "didmdn-out";

#[derive(Parser, Debug)]
#[command(name = "didmdn", version, about = "Density-aware single-image rain removal")]
pub struct Cli {
    /// TOML file with one table per subcommand, e.g. [train-derainer]
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthesize a labelled rainy dataset from clean images
    Synth(SynthArgs),
    /// Train the rain-density classifier (three stages)
    TrainClassifier(TrainClassifierArgs),
    /// Train the de-raining network with ground-truth density labels
    TrainDerainer(TrainDerainerArgs),
    /// Remove rain from an image or every record of a manifest
    Derain(DerainArgs),
    /// Score de-rained outputs against the clean images of a manifest
    Evaluate(EvaluateArgs),
    /// Train and compare the four ablation variants under one budget
    Ablate(AblateArgs),
}

/// Fills unset fields of `self` from `file`.
macro_rules! merge_options {
    ($self:ident, $file:ident; $($field:ident),*) => {
        $( if $self.$field.is_none() { $self.$field = $file.$field.take(); } )*
    };
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct SynthArgs {
    /// Directory of clean images
    #[arg(long, value_name = "PATH")]
    pub clean_dir: Option<PathBuf>,
    /// Generate this many procedural clean scenes and use them instead of --clean-dir [default: 0]
    #[arg(long, value_name = "INT")]
    pub procedural_clean: Option<usize>,
    /// Side length of procedural scenes in pixels [default: 80]
    #[arg(long, value_name = "INT")]
    pub size: Option<usize>,
    /// Samples per density label [default: 4]
    #[arg(long, value_name = "INT")]
    pub per_label: Option<usize>,
    /// Random seed [default: 0]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Output directory [default: $DIDMDN_OUTPUT_DIR or didmdn-out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl SynthArgs {
    pub fn merge(&mut self, mut file: SynthArgs) {
        merge_options!(self, file; clean_dir, procedural_clean, size, per_label, seed);
        self.out = resolve_out(self.out.take(), file.out);
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainClassifierArgs {
    /// Training manifest written by `synth`
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Model size: toy or standard [default: toy]
    #[arg(long, value_name = "PRESET")]
    pub preset: Option<String>,
    /// Random seed [default: 0]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Steps of residual-extractor training on heavy samples [default: 600]
    #[arg(long, value_name = "INT")]
    pub residual_steps: Option<usize>,
    /// Steps of head training with the extractor frozen [default: 3000]
    #[arg(long, value_name = "INT")]
    pub head_steps: Option<usize>,
    /// Steps of joint training [default: 300]
    #[arg(long, value_name = "INT")]
    pub joint_steps: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long, value_name = "FLOAT")]
    pub lr: Option<f64>,
    /// Decoupled weight decay [default: 0.0001]
    #[arg(long, value_name = "FLOAT")]
    pub weight_decay: Option<f64>,
    /// Square crop side for the residual stage [default: 32]
    #[arg(long, value_name = "INT")]
    pub crop: Option<usize>,
    /// Output directory [default: $DIDMDN_OUTPUT_DIR or didmdn-out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl TrainClassifierArgs {
    pub fn merge(&mut self, mut file: TrainClassifierArgs) {
        merge_options!(self, file; manifest, preset, seed, residual_steps, head_steps, joint_steps, lr, weight_decay, crop);
        self.out = resolve_out(self.out.take(), file.out);
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct TrainDerainerArgs {
    /// Training manifest written by `synth`
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Model size: toy or standard [default: toy]
    #[arg(long, value_name = "PRESET")]
    pub preset: Option<String>,
    /// Network variant: DID-MDN, Multi-no-label, Single or Yang-Multi [default: DID-MDN]
    #[arg(long, value_name = "VARIANT")]
    pub variant: Option<String>,
    /// Random seed [default: 0]
    #[arg(long, value_name = "INT")]
    pub seed: Option<u64>,
    /// Training epochs [default: 80]
    #[arg(long, value_name = "INT")]
    pub epochs: Option<usize>,
    /// Cap on optimizer steps [default: none]
    #[arg(long, value_name = "INT")]
    pub max_steps: Option<usize>,
    /// Mini-batch size [default: 1]
    #[arg(long, value_name = "INT")]
    pub batch_size: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long, value_name = "FLOAT")]
    pub lr: Option<f64>,
    /// Epoch at which the learning rate is divided by 10 [default: 20]
    #[arg(long, value_name = "INT")]
    pub lr_drop_epoch: Option<usize>,
    /// Decoupled weight decay [default: 0.0001]
    #[arg(long, value_name = "FLOAT")]
    pub weight_decay: Option<f64>,
    /// Weight of the feature loss [default: 1]
    #[arg(long, value_name = "FLOAT")]
    pub lambda_f: Option<f64>,
    /// Square training crop side; 0 trains on full frames [default: 64]
    #[arg(long, value_name = "INT")]
    pub crop: Option<usize>,
    /// Label map encoding: scalar or one-hot [default: scalar]
    #[arg(long, value_name = "ENCODING")]
    pub label_encoding: Option<String>,
    /// Write a checkpoint every this many steps; 0 writes only the final one [default: 0]
    #[arg(long, value_name = "INT")]
    pub checkpoint_every: Option<usize>,
    /// Continue from this checkpoint [default: none]
    #[arg(long, value_name = "PATH")]
    pub resume: Option<PathBuf>,
    /// Output directory [default: $DIDMDN_OUTPUT_DIR or didmdn-out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl TrainDerainerArgs {
    pub fn merge(&mut self, mut file: TrainDerainerArgs) {
        merge_options!(self, file; manifest, preset, variant, seed, epochs, max_steps, batch_size, lr, lr_drop_epoch,
            weight_decay, lambda_f, crop, label_encoding, checkpoint_every, resume);
        self.out = resolve_out(self.out.take(), file.out);
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct DerainArgs {
    /// De-rainer checkpoint
    #[arg(long, value_name = "PATH")]
    pub checkpoint: Option<PathBuf>,
    /// Classifier checkpoint, used when --label is absent
    #[arg(long, value_name = "PATH")]
    pub classifier: Option<PathBuf>,
    /// Density label override: light, medium or heavy (skips the classifier) [default: predicted]
    #[arg(long, value_name = "LABEL")]
    pub label: Option<String>,
    /// Single rainy image
    #[arg(long, value_name = "PATH")]
    pub input: Option<PathBuf>,
    /// Manifest whose rainy images are processed; outputs are named <id>.png
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Also write the estimated residual as <id>_residual.png [default: false]
    #[arg(long)]
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub dump_residual: bool,
    /// Output directory [default: $DIDMDN_OUTPUT_DIR or didmdn-out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl DerainArgs {
    pub fn merge(&mut self, mut file: DerainArgs) {
        merge_options!(self, file; checkpoint, classifier, label, input, manifest);
        self.dump_residual |= file.dump_residual;
        self.out = resolve_out(self.out.take(), file.out);
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct EvaluateArgs {
    /// Manifest with the clean references
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Directory holding <id>.png outputs
    #[arg(long, value_name = "PATH")]
    pub outputs: Option<PathBuf>,
    /// Output directory for metrics.csv [default: $DIDMDN_OUTPUT_DIR or didmdn-out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl EvaluateArgs {
    pub fn merge(&mut self, mut file: EvaluateArgs) {
        merge_options!(self, file; manifest, outputs);
        self.out = resolve_out(self.out.take(), file.out);
    }
}

#[derive(Args, Debug, Default, Clone, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct AblateArgs {
    /// Training manifest
    #[arg(long, value_name = "PATH")]
    pub manifest: Option<PathBuf>,
    /// Held-out manifest; without it every fifth record is held out [default: none]
    #[arg(long, value_name = "PATH")]
    pub test_manifest: Option<PathBuf>,
    /// Comma-separated seeds, one run per variant and seed [default: 1,2,3]
    #[arg(long, value_name = "INT,...", value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    /// Model size: toy or standard [default: toy]
    #[arg(long, value_name = "PRESET")]
    pub preset: Option<String>,
    /// Optimizer steps per run [default: 2000]
    #[arg(long, value_name = "INT")]
    pub max_steps: Option<usize>,
    /// Square training crop side [default: 32]
    #[arg(long, value_name = "INT")]
    pub crop: Option<usize>,
    /// Initial learning rate [default: 0.001]
    #[arg(long, value_name = "FLOAT")]
    pub lr: Option<f64>,
    /// Output directory [default: $DIDMDN_OUTPUT_DIR or didmdn-out]
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

impl AblateArgs {
    pub fn merge(&mut self, mut file: AblateArgs) {
        merge_options!(self, file; manifest, test_manifest, seeds, preset, max_steps, crop, lr);
        self.out = resolve_out(self.out.take(), file.out);
    }
}

/// Flag, then environment, then config file, then the default.
fn resolve_out(flag: Option<PathBuf>, file: Option<PathBuf>) -> Option<PathBuf> {
    flag.or_else(|| std::env::var_os(OUTPUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or(file)
        .or_else(|| Some(PathBuf::from(DEFAULT_OUTPUT)))
}

/// Layout of the `--config` file.
#[derive(Debug, Default, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct ConfigFile {
    pub synth: SynthArgs,
    pub train_classifier: TrainClassifierArgs,
    pub train_derainer: TrainDerainerArgs,
    pub derain: DerainArgs,
    pub evaluate: EvaluateArgs,
    pub ablate: AblateArgs,
}
