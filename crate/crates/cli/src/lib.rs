//! Command-line driver for the defect synthesis pipeline.
//!
//! Exit codes: 0 success, 1 invalid invocation or configuration, 2 failure
//! while running.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use anyhow::{anyhow, bail, Context};
use clap::{CommandFactory, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::json;

use defectgan_core::controlmap::{AttributeControlMap, ControlRegion};
use defectgan_core::datamodel::{Category, DatasetManifest, LabelVector, Source, Split};
use defectgan_core::evaluation::{
    compute_stats, frechet_distance, generate_corpus, ideal_split_fid, CategorySampler, CorpusOptions,
    PixelPcaEmbedder,
};
use defectgan_core::inspector::{mix_training_data, train_inspector, InspectorConfig, LabeledImages};
use defectgan_core::toy::{make_toy_dataset, ToyDefectSpec};
use defectgan_core::trainer::{latest_checkpoint, read_checkpoint_manifest, TrainConfig, TrainData, Trainer};

use config::{resolve, with_seed, Overrides};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_FAILED: i32 = 2;

#[derive(Parser, Debug)]
#[command(name = "defectgan", version, about = "Defect synthesis, evaluation and inspection pipeline")]
#[command(after_help = "Any config key can be overridden with `--<key> <value>`, e.g. `train --n_critic 5`.")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(clap::Args, Debug, Clone)]
pub struct Common {
    /// JSON file overlaid on the preset defaults
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Render the synthetic toy defect dataset
    MakeToyData {
        #[command(flatten)]
        common: Common,
    },
    /// Train the defect generator and critic
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset root holding index.csv or train.csv
        #[arg(long)]
        data: Option<PathBuf>,
        /// desk, micro or full
        #[arg(long, default_value = "desk")]
        preset: String,
        /// Continue from a checkpoint directory
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Synthesize a defect corpus from a checkpoint
    Generate {
        #[command(flatten)]
        common: Common,
        /// Checkpoint directory, or a run directory to take the latest checkpoint from
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root supplying the normal images
        #[arg(long)]
        data: PathBuf,
        /// Control map archive applied to every sample
        #[arg(long, conflicts_with = "boxes")]
        control_map: Option<PathBuf>,
        /// `category:x0,y0,x1,y1`, repeatable
        #[arg(long = "box", id = "boxes")]
        boxes: Vec<String>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        with_restorations: bool,
    },
    /// Fréchet distance between a real dataset and a generated corpus
    EvalFid {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        fake: PathBuf,
    },
    /// Train the defect classifier, optionally on real plus generated data
    TrainInspector {
        #[command(flatten)]
        common: Common,
        /// Real dataset root with train and val splits
        #[arg(long)]
        data: PathBuf,
        /// Generated corpus root
        #[arg(long)]
        synthetic: Option<PathBuf>,
    },
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::MakeToyData { common }
            | Command::Train { common, .. }
            | Command::Generate { common, .. }
            | Command::EvalFid { common, .. }
            | Command::TrainInspector { common, .. } => common,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Command::MakeToyData { .. } => "make-toy-data",
            Command::Train { .. } => "train",
            Command::Generate { .. } => "generate",
            Command::EvalFid { .. } => "eval-fid",
            Command::TrainInspector { .. } => "train-inspector",
        }
    }
}

/// Settings for `generate` not covered by dedicated flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateConfig {
    pub count: usize,
    pub with_restorations: bool,
    /// A category name, `random` for a uniform single category, or unset to
    /// follow the defect labels of the dataset.
    pub category: Option<String>,
    pub seed: u64,
}

impl Default for GenerateConfig {
    fn default() -> Self {
        GenerateConfig { count: 200, with_restorations: false, category: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub embedder: String,
    pub k: usize,
    pub resolution: usize,
    pub image_size: usize,
    /// Compare defect images only: real records with a defect label against
    /// synthetic records.
    pub defects_only: bool,
    pub split: Split,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            embedder: "pixel-pca".into(),
            k: 16,
            resolution: 16,
            image_size: 32,
            defects_only: true,
            split: Split::Train,
            seed: 0,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FidReport {
    pub embedder: String,
    pub k: usize,
    pub n_real: usize,
    pub n_fake: usize,
    pub fid: f64,
    pub seed: u64,
    /// Same metric between two random halves of the real set.
    pub ideal_split_fid: Option<f64>,
}

#[derive(Debug)]
enum Failure {
    Invalid(anyhow::Error),
    Runtime(anyhow::Error),
}

trait Stage<T> {
    fn invalid(self) -> Result<T, Failure>;
    fn runtime(self) -> Result<T, Failure>;
}

impl<T, E: Into<anyhow::Error>> Stage<T> for Result<T, E> {
    fn invalid(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Invalid(e.into()))
    }
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(|e| Failure::Runtime(e.into()))
    }
}

/// Runs one invocation (`args[0]` is the program name) and returns the exit code.
pub fn run(args: Vec<String>) -> i32 {
    let (args, overrides) = match split_overrides(&args) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_INVALID;
        }
    };
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_INVALID,
            };
        }
    };
    match execute(&cli.command, &overrides) {
        Ok(()) => EXIT_OK,
        Err(Failure::Invalid(e)) => {
            eprintln!("error: {e:#}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_FAILED
        }
    }
}

/// Pulls `--key value` / `--key=value` pairs that are not flags of the chosen
/// subcommand out of `args`. Dashes in keys are read as underscores.
fn split_overrides(args: &[String]) -> anyhow::Result<(Vec<String>, Overrides)> {
    let cmd = Cli::command();
    let Some(sub) = args.get(1).and_then(|name| cmd.find_subcommand(name)) else {
        return Ok((args.to_vec(), Vec::new()));
    };
    let known: Vec<String> = sub
        .get_arguments()
        .filter_map(|a| a.get_long().map(str::to_string))
        .chain(["help".to_string()])
        .collect();
    let mut kept = args[..2].to_vec();
    let mut overrides = Vec::new();
    let mut rest = args[2..].iter();
    while let Some(tok) = rest.next() {
        let Some(flag) = tok.strip_prefix("--") else {
            kept.push(tok.clone());
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        if known.iter().any(|k| k == name) {
            kept.push(tok.clone());
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => rest.next().cloned().ok_or_else(|| anyhow!("override --{name} needs a value"))?,
        };
        overrides.push((name.replace('-', "_"), value));
    }
    Ok((kept, overrides))
}

fn execute(cmd: &Command, overrides: &Overrides) -> Result<(), Failure> {
    let common = cmd.common();
    let file = common.config.as_deref();
    let mut artifacts: BTreeMap<&str, serde_json::Value> = BTreeMap::new();
    let config_json: serde_json::Value;
    let seed: u64;
    fs::create_dir_all(&common.out)
        .with_context(|| format!("creating {}", common.out.display()))
        .runtime()?;

    match cmd {
        Command::MakeToyData { .. } => {
            let spec = resolve(&ToyDefectSpec::default(), file, overrides).invalid()?;
            let spec = with_seed(spec, common.seed).invalid()?;
            spec.validate().invalid()?;
            let ds = make_toy_dataset(&spec, &common.out).runtime()?;
            info!("wrote {} images to {}", ds.all.records.len(), common.out.display());
            artifacts.insert("index", json!(common.out.join("index.csv")));
            artifacts.insert("images", json!(ds.all.records.len()));
            seed = spec.seed;
            config_json = json!(spec);
        }
        Command::Train { data, preset, resume, .. } => {
            let base = match (resume, preset.as_str()) {
                (Some(ckpt), _) => read_checkpoint_manifest(ckpt).invalid()?.config,
                (None, "desk") => TrainConfig::desk(),
                (None, "micro") => TrainConfig::micro(),
                (None, "full") => TrainConfig::full(),
                (None, other) => return Err(Failure::Invalid(anyhow!("unknown preset '{other}'"))),
            };
            let cfg = with_seed(resolve(&base, file, overrides).invalid()?, common.seed).invalid()?;
            cfg.validate().invalid()?;
            if resume.is_some() && (TrainConfig { iterations: base.iterations, ..cfg.clone() }) != base {
                return Err(Failure::Invalid(anyhow!("only `iterations` may change when resuming")));
            }
            let data = data.as_ref().ok_or_else(|| anyhow!("--data is required")).invalid()?;
            let (manifest, _) = DatasetManifest::load(data, Split::Train).invalid()?;
            let train_data = TrainData::from_manifest(&manifest, cfg.image_size).invalid()?;
            let mut trainer = match resume {
                Some(ckpt) => Trainer::resume(ckpt, Some(cfg.iterations)).runtime()?,
                None => Trainer::new(cfg.clone()).invalid()?,
            };
            let history = trainer.train(&train_data, &common.out).runtime()?;
            info!("finished {} updates", history.len());
            artifacts.insert("log", json!(common.out.join("train_log.jsonl")));
            artifacts.insert("checkpoint", json!(latest_checkpoint(&common.out)));
            seed = cfg.seed;
            config_json = json!(cfg);
        }
        Command::Generate { checkpoint, data, control_map, boxes, count, with_restorations, .. } => {
            let mut cfg = with_seed(resolve(&GenerateConfig::default(), file, overrides).invalid()?, common.seed)
                .invalid()?;
            if let Some(n) = count {
                cfg.count = *n;
            }
            cfg.with_restorations |= with_restorations;
            let ckpt = if checkpoint.join("manifest.json").is_file() {
                checkpoint.clone()
            } else {
                latest_checkpoint(checkpoint)
                    .ok_or_else(|| anyhow!("no checkpoint found under {}", checkpoint.display()))
                    .invalid()?
            };
            let size = read_checkpoint_manifest(&ckpt).invalid()?.config.image_size;
            let control = match (control_map, boxes.is_empty()) {
                (Some(p), _) => Some(AttributeControlMap::load(p).invalid()?),
                (None, false) => {
                    let regions: Vec<ControlRegion> =
                        boxes.iter().map(|b| ControlRegion::parse_box(b)).collect::<Result<_, _>>().invalid()?;
                    Some(AttributeControlMap::paint_regions(&regions, size, size).invalid()?)
                }
                (None, true) => None,
            };
            let (normals, _) = DatasetManifest::load(data, Split::Train).invalid()?;
            let sampler = sampler_for(cfg.category.as_deref(), &normals).invalid()?;
            let options = CorpusOptions {
                count: cfg.count,
                sampler,
                control,
                with_restorations: cfg.with_restorations,
                seed: cfg.seed,
            };
            let corpus = generate_corpus(&ckpt, &normals, &options, &common.out).runtime()?;
            artifacts.insert("checkpoint", json!(ckpt));
            artifacts.insert("index", json!(common.out.join("index.csv")));
            artifacts.insert("synthetic", json!(corpus.count_source(Source::Synthetic)));
            artifacts.insert("restored", json!(corpus.count_source(Source::Restored)));
            seed = cfg.seed;
            config_json = json!(cfg);
        }
        Command::EvalFid { real, fake, .. } => {
            let cfg = with_seed(resolve(&EvalConfig::default(), file, overrides).invalid()?, common.seed).invalid()?;
            if cfg.embedder != "pixel-pca" {
                return Err(Failure::Invalid(anyhow!("embedder '{}' is not available (have: pixel-pca)", cfg.embedder)));
            }
            let (mut real_m, _) = DatasetManifest::load(real, cfg.split).invalid()?;
            let (mut fake_m, _) = DatasetManifest::load(fake, Split::Train).invalid()?;
            if cfg.defects_only {
                real_m.records.retain(|r| !r.label.is_normal());
                fake_m.records.retain(|r| r.source == Source::Synthetic);
            }
            let size = cfg.image_size as u32;
            let real_imgs = real_m.load_images(size).runtime()?;
            let fake_imgs = fake_m.load_images(size).runtime()?;
            let embed = PixelPcaEmbedder::fit(&real_imgs, cfg.k, cfg.resolution).invalid()?;
            let fid = frechet_distance(
                &compute_stats(&real_imgs, &embed).invalid()?,
                &compute_stats(&fake_imgs, &embed).invalid()?,
            )
            .runtime()?;
            let baseline = ideal_split_fid(&real_imgs, &embed, cfg.seed).ok();
            let report = FidReport {
                embedder: defectgan_core::evaluation::Embedder::id(&embed),
                k: cfg.k,
                n_real: real_imgs.len(),
                n_fake: fake_imgs.len(),
                fid,
                seed: cfg.seed,
                ideal_split_fid: baseline,
            };
            let text = serde_json::to_string_pretty(&report).runtime()?;
            println!("{text}");
            let path = common.out.join("fid_report.json");
            fs::write(&path, text).runtime()?;
            artifacts.insert("report", json!(path));
            seed = cfg.seed;
            config_json = json!(cfg);
        }
        Command::TrainInspector { data, synthetic, .. } => {
            let cfg = with_seed(resolve(&InspectorConfig::desk(), file, overrides).invalid()?, common.seed)
                .invalid()?;
            cfg.validate().invalid()?;
            let (train, _) = DatasetManifest::load(data, Split::Train).invalid()?;
            let (val, _) = DatasetManifest::load(data, Split::Val).invalid()?;
            let generated = match synthetic {
                Some(dir) => Some(DatasetManifest::load(dir, Split::Train).invalid()?.0),
                None => None,
            };
            let mixed = mix_training_data(&train, generated.as_ref()).invalid()?;
            let val_images = LabeledImages::from_manifest(&val, cfg.image_size).runtime()?;
            let run = train_inspector(&cfg, &mixed, &val_images, Some(&common.out)).runtime()?;
            info!("best validation accuracy {:.2}% at epoch {}", run.best_accuracy, run.best_epoch);
            artifacts.insert("metrics", json!(common.out.join("metrics.jsonl")));
            artifacts.insert("best", json!(common.out.join("best")));
            artifacts.insert("best_accuracy", json!(run.best_accuracy));
            artifacts.insert("best_epoch", json!(run.best_epoch));
            artifacts.insert("source_head_used", json!(run.source_head_used));
            seed = cfg.seed;
            config_json = json!(cfg);
        }
    }

    let manifest = json!({
        "command": cmd.name(),
        "version": env!("CARGO_PKG_VERSION"),
        "config": config_json,
        "seed": seed,
        "artifacts": artifacts,
        "created_at": chrono::Utc::now().to_rfc3339(),
    });
    let path = common.out.join("run_manifest.json");
    fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
        .with_context(|| format!("writing {}", path.display()))
        .runtime()
}

fn sampler_for(category: Option<&str>, data: &DatasetManifest) -> anyhow::Result<CategorySampler> {
    Ok(match category {
        Some("random") => CategorySampler::UniformSingle,
        Some(name) => match Category::parse(name) {
            Some(c) => CategorySampler::Fixed(LabelVector::one_hot(c)),
            None => bail!("unknown category '{name}'"),
        },
        None => {
            let labels: Vec<LabelVector> =
                data.records.iter().map(|r| r.label).filter(|l| !l.is_normal()).collect();
            if labels.is_empty() {
                CategorySampler::UniformSingle
            } else {
                CategorySampler::Empirical(labels)
            }
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_separated() {
        let (kept, o) =
            split_overrides(&s(&["defectgan", "train", "--out", "r", "--n_critic", "3", "--lr-start=0.1"])).unwrap();
        assert_eq!(kept, s(&["defectgan", "train", "--out", "r"]));
        assert_eq!(o, vec![("n_critic".into(), "3".into()), ("lr_start".into(), "0.1".into())]);
    }

    #[test]
    fn missing_override_value() {
        assert!(split_overrides(&s(&["defectgan", "train", "--n_critic"])).is_err());
    }
}
