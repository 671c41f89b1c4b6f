use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::info;
use serde::Serialize;

use didmdn::classifier::Classifier;
use didmdn::derainer::{Derainer, DerainerConfig, Variant};
use didmdn::netblocks::LabelEncoding;
use didmdn::raingen::{self, Dataset, DatasetManifest, MANIFEST_FILE};
use didmdn::trainer::{
    self, AblationConfig, Checkpoint, ClassifierTrainConfig, DerainTrainConfig, OptimConfig, RunOptions, CONFIG_KEY,
};
use didmdn::{imageio, metrics, DensityLabel, Error};

use crate::args::{AblateArgs, DerainArgs, EvaluateArgs, SynthArgs, TrainClassifierArgs, TrainDerainerArgs};

pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CmdResult = Result<(), Failure>;

fn required<T>(v: Option<T>, flag: &str) -> Result<T, Failure> {
    v.ok_or_else(|| Failure::Usage(format!("missing required --{flag}")))
}

fn usage<T: std::str::FromStr<Err = Error>>(text: &str) -> Result<T, Failure> {
    text.parse().map_err(|e: Error| Failure::Usage(e.to_string()))
}

/// Writes the fully resolved arguments to `<out>/resolved_config.toml`.
fn echo_config<T: Serialize>(out: &Path, section: &str, args: &T) -> CmdResult {
    let mut table = toml::Table::new();
    table.insert(section.to_string(), toml::Value::try_from(args).expect("arguments serialize"));
    let path = out.join("resolved_config.toml");
    std::fs::create_dir_all(out).map_err(|e| Error::write(out, e))?;
    std::fs::write(&path, toml::to_string(&table).expect("table serializes")).map_err(|e| Error::write(&path, e))?;
    Ok(())
}

#[derive(Clone, Copy)]
enum Preset {
    Toy,
    Standard,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        match s {
            "toy" => Ok(Preset::Toy),
            "standard" => Ok(Preset::Standard),
            _ => Err(Error::InvalidArgument(format!("unknown preset `{s}` (expected toy or standard)"))),
        }
    }
}

fn derainer_preset(p: Preset) -> DerainerConfig {
    match p {
        Preset::Toy => DerainerConfig::toy(),
        Preset::Standard => DerainerConfig::default(),
    }
}

fn label_encoding(s: &str) -> Result<LabelEncoding, Failure> {
    match s {
        "scalar" => Ok(LabelEncoding::Scalar),
        "one-hot" => Ok(LabelEncoding::OneHot),
        _ => Err(Failure::Usage(format!("unknown label encoding `{s}` (expected scalar or one-hot)"))),
    }
}

fn square_crop(side: usize) -> Option<(usize, usize)> {
    (side > 0).then_some((side, side))
}

pub fn synth(mut a: SynthArgs) -> CmdResult {
    let out = a.out.clone().unwrap();
    let per_label = *a.per_label.get_or_insert(4);
    let seed = *a.seed.get_or_insert(0);
    let size = *a.size.get_or_insert(80);
    let procedural = *a.procedural_clean.get_or_insert(0);
    let clean_dir = if procedural > 0 {
        let dir = out.join("backgrounds");
        raingen::write_procedural_backgrounds(&dir, procedural, seed, size, size)?;
        dir
    } else {
        required(a.clean_dir.clone(), "clean-dir (or --procedural-clean)")?
    };
    let manifest = raingen::build_dataset(&clean_dir, per_label, seed, &out)?;
    echo_config(&out, "synth", &a)?;
    println!("wrote {} records to {}", manifest.records.len(), out.join(MANIFEST_FILE).display());
    Ok(())
}

pub fn train_classifier(mut a: TrainClassifierArgs) -> CmdResult {
    let out = a.out.clone().unwrap();
    let manifest = required(a.manifest.clone(), "manifest")?;
    let preset: Preset = usage(a.preset.get_or_insert_with(|| "toy".into()))?;
    let seed = *a.seed.get_or_insert(0);
    let data = Dataset::load(&manifest)?;
    let first = data.samples.first().ok_or_else(|| Error::EmptyManifest(manifest.display().to_string()))?;
    let (_, _, h, w) = first.clean.dims4();
    let defaults = ClassifierTrainConfig::default();
    let mut model = match preset {
        Preset::Toy => didmdn::classifier::ClassifierConfig::toy(),
        Preset::Standard => didmdn::classifier::ClassifierConfig::default(),
    };
    model.input_size = (h, w);
    let cfg = ClassifierTrainConfig {
        model,
        optim: OptimConfig {
            lr0: *a.lr.get_or_insert(defaults.optim.lr0),
            weight_decay: *a.weight_decay.get_or_insert(defaults.optim.weight_decay),
            crop: square_crop(*a.crop.get_or_insert(32)),
            ..OptimConfig::default()
        },
        residual_steps: *a.residual_steps.get_or_insert(defaults.residual_steps),
        head_steps: *a.head_steps.get_or_insert(defaults.head_steps),
        joint_steps: *a.joint_steps.get_or_insert(defaults.joint_steps),
        joint_lr_scale: defaults.joint_lr_scale,
    };
    echo_config(&out, "train-classifier", &a)?;
    let outcome = trainer::train_classifier(&data.samples, &cfg, seed, Some(&out))?;
    let clf = Classifier::new(cfg.model.clone())?;
    let acc = trainer::classifier_accuracy(&clf, &outcome.checkpoint.model_params, &data.samples)?;
    println!(
        "classifier trained: {} steps, training accuracy {:.1}%, checkpoint {}",
        outcome.checkpoint.step,
        100.0 * acc,
        out.join("checkpoint.bin").display()
    );
    Ok(())
}

pub fn train_derainer(mut a: TrainDerainerArgs) -> CmdResult {
    let out = a.out.clone().unwrap();
    let manifest = required(a.manifest.clone(), "manifest")?;
    let preset: Preset = usage(a.preset.get_or_insert_with(|| "toy".into()))?;
    let variant: Variant = usage(a.variant.get_or_insert_with(|| Variant::DidMdn.name().into()))?;
    let encoding = label_encoding(a.label_encoding.get_or_insert_with(|| "scalar".into()))?;
    let seed = *a.seed.get_or_insert(0);
    let defaults = OptimConfig::default();
    let mut model = derainer_preset(preset).with_variant(variant);
    model.lambda_f = *a.lambda_f.get_or_insert(model.lambda_f);
    model.label_encoding = encoding;
    let cfg = DerainTrainConfig {
        model,
        optim: OptimConfig {
            lr0: *a.lr.get_or_insert(defaults.lr0),
            lr_drop_epoch: *a.lr_drop_epoch.get_or_insert(defaults.lr_drop_epoch),
            weight_decay: *a.weight_decay.get_or_insert(defaults.weight_decay),
            batch_size: *a.batch_size.get_or_insert(defaults.batch_size),
            epochs: *a.epochs.get_or_insert(defaults.epochs),
            max_steps: a.max_steps,
            crop: square_crop(*a.crop.get_or_insert(64)),
            ..defaults
        },
    };
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let checkpoint_every = *a.checkpoint_every.get_or_insert(0);
    echo_config(&out, "train-derainer", &a)?;
    let data = Dataset::load(&manifest)?;
    let opts = RunOptions { out_dir: Some(out.clone()), resume, stop_after: None, checkpoint_every };
    let outcome = trainer::train_derainer(&data.samples, &cfg, seed, &opts)?;
    if let Some(last) = outcome.curve.last() {
        println!("step {}: total loss {:.5}", last.step + 1, last.total);
    }
    println!("checkpoint {}", out.join("checkpoint.bin").display());
    Ok(())
}

fn load_trained(path: Option<&Path>, what: &str) -> Result<Checkpoint, Failure> {
    let path = path.ok_or_else(|| Error::UntrainedModel(format!("no {what} checkpoint given")))?;
    if !path.is_file() {
        return Err(Error::UntrainedModel(format!("{what} checkpoint {} not found", path.display())).into());
    }
    Ok(Checkpoint::load(path)?)
}

fn stored_config<T: serde::de::DeserializeOwned>(ck: &Checkpoint, kind: &str) -> Result<T, Failure> {
    if ck.meta.get("kind").map(String::as_str) != Some(kind) {
        return Err(Error::ConfigMismatch(format!("expected a {kind} checkpoint")).into());
    }
    let text = ck.meta.get(CONFIG_KEY).ok_or_else(|| Error::CorruptCheckpoint("no stored configuration".into()))?;
    toml::from_str(text).map_err(|e| Failure::Runtime(Error::CorruptCheckpoint(format!("stored configuration: {e}"))))
}

pub fn derain(a: DerainArgs) -> CmdResult {
    let out = a.out.clone().unwrap();
    let inputs: Vec<(String, PathBuf)> = match (&a.input, &a.manifest) {
        (Some(p), None) => {
            let id = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "output".into());
            vec![(id, p.clone())]
        }
        (None, Some(m)) => {
            let manifest = DatasetManifest::read(m)?;
            let root = m.parent().unwrap_or(Path::new("."));
            manifest.records.iter().map(|r| (r.id.clone(), root.join(&r.rainy_path))).collect()
        }
        _ => return Err(Failure::Usage("give exactly one of --input or --manifest".into())),
    };
    let label_override: Option<DensityLabel> = a.label.as_deref().map(usage).transpose()?;

    let ck = load_trained(a.checkpoint.as_deref(), "de-rainer")?;
    let cfg: DerainTrainConfig = stored_config(&ck, "derainer")?;
    let model = Derainer::new(cfg.model)?;
    let classifier = match label_override {
        Some(_) => None,
        None => {
            let cck = load_trained(a.classifier.as_deref(), "classifier (or pass --label)")?;
            let ccfg: ClassifierTrainConfig = stored_config(&cck, "classifier")?;
            Some((Classifier::new(ccfg.model)?, cck.model_params))
        }
    };
    echo_config(&out, "derain", &a)?;

    let mut report = String::from("id,label,source\n");
    for (id, path) in inputs {
        let y = imageio::load_tensor(&path)?;
        let (label, source) = match (label_override, &classifier) {
            (Some(l), _) => (l, "override"),
            (None, Some((clf, params))) => (clf.predict_density(params, &y)?, "predicted"),
            (None, None) => unreachable!("classifier loaded when no override"),
        };
        let result = model.forward(&ck.model_params, &y, label)?;
        imageio::save_tensor(&out.join(format!("{id}.png")), &result.image())?;
        if a.dump_residual {
            imageio::save_tensor(&out.join(format!("{id}_residual.png")), &result.residual.clamp(0.0, 1.0))?;
        }
        println!("{id}: density {label} ({source})");
        let _ = writeln!(report, "{id},{label},{source}");
    }
    let path = out.join("density.csv");
    std::fs::write(&path, report).map_err(|e| Error::write(&path, e))?;
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> CmdResult {
    let out = a.out.clone().unwrap();
    let manifest_path = required(a.manifest.clone(), "manifest")?;
    let outputs = required(a.outputs.clone(), "outputs")?;
    let manifest = DatasetManifest::read(&manifest_path)?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let report = metrics::evaluate_dataset(&manifest, root, &outputs)?;
    echo_config(&out, "evaluate", &a)?;
    let path = out.join("metrics.csv");
    std::fs::write(&path, report.to_csv()).map_err(|e| Error::write(&path, e))?;
    println!(
        "{} images: PSNR {} dB, SSIM {:.4}",
        report.n_images,
        metrics::format_db(report.psnr_db),
        report.ssim
    );
    Ok(())
}

pub fn ablate(mut a: AblateArgs) -> CmdResult {
    let out = a.out.clone().unwrap();
    let manifest = required(a.manifest.clone(), "manifest")?;
    let preset: Preset = usage(a.preset.get_or_insert_with(|| "toy".into()))?;
    let seeds = a.seeds.get_or_insert_with(|| vec![1, 2, 3]).clone();
    let defaults = OptimConfig::default();
    let cfg = AblationConfig {
        base: DerainTrainConfig {
            model: derainer_preset(preset),
            optim: OptimConfig {
                lr0: *a.lr.get_or_insert(defaults.lr0),
                max_steps: Some(*a.max_steps.get_or_insert(2000)),
                crop: square_crop(*a.crop.get_or_insert(32)),
                ..defaults
            },
        },
        seeds,
        variants: Variant::ALL.to_vec(),
    };
    let data = Dataset::load(&manifest)?;
    let (train, test) = match &a.test_manifest {
        Some(t) => (data.samples, Dataset::load(t)?.samples),
        None => {
            let (test, train): (Vec<_>, Vec<_>) = data.samples.into_iter().enumerate().partition(|(i, _)| i % 5 == 4);
            (train.into_iter().map(|p| p.1).collect(), test.into_iter().map(|p| p.1).collect())
        }
    };
    echo_config(&out, "ablate", &a)?;
    info!("ablation: {} train / {} test pairs", train.len(), test.len());
    let (report, _) = trainer::run_ablation(&train, &test, &cfg)?;
    let csv = report.to_csv();
    let path = out.join("ablation.csv");
    std::fs::write(&path, &csv).map_err(|e| Error::write(&path, e))?;
    print!("{csv}");
    Ok(())
}
