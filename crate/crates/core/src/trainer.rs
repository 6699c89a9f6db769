//! Two-cycle adversarial training with a fixed critic/generator schedule.
//!
//! Update `u` (zero-based) is a generator step when `(u + 1) % (n_critic + 1) == 0`
//! and a critic step otherwise. Every random draw of update `u` is keyed by
//! `(seed, u)`, so a run resumed from a checkpoint replays exactly.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use defectgan_autograd::{Tensor, Var};
use log::{error, info};
use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::controlmap::AttributeControlMap;
use crate::datamodel::{DatasetManifest, ImagePatch, LabelVector, CATEGORY_NAMES};
use crate::discriminator::{Critic, Discriminator, DiscriminatorConfig};
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig, Noise};
use crate::nn::Bound;
use crate::objectives::{
    classification_loss, gradient_penalty, reconstruction_loss, sd_cycle_loss, sd_region_loss, total_losses,
    LossComponents, LossReport, LossWeights,
};
use crate::optim::{Adam, AdamConfig};
use crate::seed;

/// Flat training configuration; field names double as config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub n_critic: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub lr_start: f64,
    pub lr_end: f64,
    pub image_size: usize,
    pub seed: u64,
    /// Spatial & categorical control through modulated normalization.
    pub scc: bool,
    /// Adaptive noise injection.
    pub ani: bool,
    /// Layer-wise composition.
    pub lwc: bool,
    /// Spatial constraint losses on the blend maps.
    pub sc: bool,
    /// Updates between checkpoints; 0 writes only the final one.
    pub checkpoint_every: usize,
    pub g_conv_dim: usize,
    pub g_res_blocks: usize,
    pub spade_hidden: usize,
    pub d_conv_dim: usize,
    pub d_stages: usize,
    pub lambda_cls_r: f64,
    pub lambda_cls_f: f64,
    pub lambda_rec: f64,
    pub lambda_sd_cyc: f64,
    pub lambda_sd_con: f64,
    pub lambda_gp: f64,
}

impl TrainConfig {
    /// Full-scale settings.
    pub fn full() -> Self {
        TrainConfig {
            iterations: 500_000,
            batch_size: 4,
            n_critic: 5,
            beta1: 0.5,
            beta2: 0.999,
            lr_start: 2e-4,
            lr_end: 1e-6,
            image_size: 128,
            seed: 0,
            scc: true,
            ani: true,
            lwc: true,
            sc: true,
            checkpoint_every: 10_000,
            g_conv_dim: 64,
            g_res_blocks: 6,
            spade_hidden: 64,
            d_conv_dim: 64,
            d_stages: 6,
            lambda_cls_r: 2.0,
            lambda_cls_f: 5.0,
            lambda_rec: 5.0,
            lambda_sd_cyc: 5.0,
            lambda_sd_con: 1.0,
            lambda_gp: 10.0,
        }
    }

    /// Width-reduced networks at 32×32 for single-CPU runs.
    pub fn desk() -> Self {
        TrainConfig {
            iterations: 2_000,
            image_size: 32,
            checkpoint_every: 500,
            g_conv_dim: 8,
            g_res_blocks: 2,
            spade_hidden: 8,
            d_conv_dim: 16,
            d_stages: 4,
            ..TrainConfig::full()
        }
    }

    /// 8×8 images and width-4 networks for numerical checks.
    pub fn micro() -> Self {
        TrainConfig {
            iterations: 12,
            batch_size: 2,
            image_size: 8,
            checkpoint_every: 0,
            g_conv_dim: 4,
            g_res_blocks: 1,
            spade_hidden: 4,
            d_conv_dim: 4,
            d_stages: 2,
            ..TrainConfig::full()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_critic < 1 {
            return Err(Error::Invalid(format!("n_critic must be >= 1 (got {})", self.n_critic)));
        }
        if self.iterations == 0 {
            return Err(Error::Invalid("iterations must be > 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be > 0".into()));
        }
        if !(self.lr_end <= self.lr_start && self.lr_end >= 0.0) {
            return Err(Error::Invalid(format!(
                "learning rates must satisfy 0 <= lr_end <= lr_start (got {} and {})",
                self.lr_end, self.lr_start
            )));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Invalid("Adam betas must lie in [0, 1)".into()));
        }
        self.weights().validate()?;
        self.generator_config().validate()?;
        self.discriminator_config().validate()
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            cls_r: self.lambda_cls_r,
            cls_f: self.lambda_cls_f,
            rec: self.lambda_rec,
            sd_cyc: self.lambda_sd_cyc,
            sd_con: self.lambda_sd_con,
            gp: self.lambda_gp,
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            image_size: self.image_size,
            conv_dim: self.g_conv_dim,
            res_blocks: self.g_res_blocks,
            spade_hidden: self.spade_hidden,
            spade: self.scc,
            noise: self.ani,
            composition: self.lwc,
        }
    }

    pub fn discriminator_config(&self) -> DiscriminatorConfig {
        DiscriminatorConfig { image_size: self.image_size, conv_dim: self.d_conv_dim, stages: self.d_stages }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, ..AdamConfig::default() }
    }

    /// Spatial terms apply only with composition enabled.
    pub fn spatial_terms(&self) -> bool {
        self.lwc && self.sc
    }
}

/// Learning rate for update `iteration`: linear from `lr_start` at 0 to
/// `lr_end` at the final update, held there afterwards.
pub fn lr_schedule(iteration: usize, config: &TrainConfig) -> f64 {
    if config.iterations <= 1 {
        return config.lr_start;
    }
    let last = (config.iterations - 1) as f64;
    let t = (iteration as f64 / last).min(1.0);
    config.lr_start * (1.0 - t) + config.lr_end * t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    D,
    G,
}

pub fn step_kind(iteration: usize, n_critic: usize) -> StepKind {
    if (iteration + 1) % (n_critic + 1) == 0 {
        StepKind::G
    } else {
        StepKind::D
    }
}

/// One line of `train_log.jsonl`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub step: StepKind,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Images held in memory as tensors, split by class partition.
#[derive(Debug, Clone)]
pub struct TrainData {
    pub normals: Vec<Tensor>,
    pub defects: Vec<Tensor>,
    pub defect_labels: Vec<LabelVector>,
}

impl TrainData {
    pub fn from_patches(normals: &[ImagePatch], defects: &[(ImagePatch, LabelVector)]) -> Result<Self> {
        if normals.is_empty() || defects.is_empty() {
            return Err(Error::Invalid(format!(
                "training needs normal and defect samples (got {} normal, {} defect)",
                normals.len(),
                defects.len()
            )));
        }
        Ok(TrainData {
            normals: normals.iter().map(ImagePatch::to_tensor).collect(),
            defects: defects.iter().map(|(p, _)| p.to_tensor()).collect(),
            defect_labels: defects.iter().map(|(_, l)| *l).collect(),
        })
    }

    pub fn from_manifest(manifest: &DatasetManifest, image_size: usize) -> Result<Self> {
        let images = manifest.load_images(image_size as u32)?;
        let mut normals = Vec::new();
        let mut defects = Vec::new();
        for (r, img) in manifest.records.iter().zip(images) {
            if r.label.is_normal() {
                normals.push(img);
            } else {
                defects.push((img, r.label));
            }
        }
        TrainData::from_patches(&normals, &defects)
    }
}

/// A sampled pair of batches and the labels used to condition them.
#[derive(Debug, Clone)]
pub struct CycleBatch {
    pub normals: Tensor,
    pub defects: Tensor,
    /// True labels of `defects`.
    pub defect_labels: Vec<LabelVector>,
    /// Defacement targets for `normals`: a permutation of `defect_labels`.
    pub targets: Vec<LabelVector>,
}

impl CycleBatch {
    pub fn sample(data: &TrainData, batch_size: usize, seed: u64, iteration: usize) -> Self {
        let mut rng = seed::rng(seed, &[seed::STREAM_BATCH, iteration as u64]);
        let mut pick = |len: usize| -> Vec<usize> {
            if len >= batch_size {
                index::sample(&mut rng, len, batch_size).into_vec()
            } else {
                (0..batch_size).map(|_| rand::Rng::random_range(&mut rng, 0..len)).collect()
            }
        };
        let ni = pick(data.normals.len());
        let di = pick(data.defects.len());
        let normals = Tensor::stack_batch(&ni.iter().map(|&i| data.normals[i].clone()).collect::<Vec<_>>());
        let defects = Tensor::stack_batch(&di.iter().map(|&i| data.defects[i].clone()).collect::<Vec<_>>());
        let defect_labels: Vec<LabelVector> = di.iter().map(|&i| data.defect_labels[i]).collect();
        let mut targets = defect_labels.clone();
        targets.shuffle(&mut rng);
        CycleBatch { normals, defects, defect_labels, targets }
    }
}

/// Uniform control maps for a batch of labels.
///
/// Panics if a map is not spatially constant; training never sees spatial maps.
pub fn uniform_maps(labels: &[LabelVector], size: usize) -> Tensor {
    let maps: Vec<Tensor> = labels
        .iter()
        .map(|l| {
            let a = AttributeControlMap::repeat_label(l, size, size);
            assert!(a.is_spatially_constant(), "training control map is not uniform");
            a.to_tensor()
        })
        .collect();
    Tensor::stack_batch(&maps)
}

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub iteration: usize,
    pub config: TrainConfig,
    pub categories: Vec<String>,
    pub seed: u64,
}

pub struct Trainer {
    config: TrainConfig,
    generator: Generator,
    discriminator: Discriminator,
    g_opt: Adam,
    d_opt: Adam,
    iteration: usize,
    /// Where non-finite diagnostics are written.
    diagnostics_dir: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let generator = Generator::new(config.generator_config(), config.seed)?;
        let discriminator = Discriminator::new(config.discriminator_config(), config.seed)?;
        let g_opt = Adam::new(config.adam(), generator.params());
        let d_opt = Adam::new(config.adam(), discriminator.params());
        Ok(Trainer { config, generator, discriminator, g_opt, d_opt, iteration: 0, diagnostics_dir: None })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_mut(&mut self) -> &mut Generator {
        &mut self.generator
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn discriminator_mut(&mut self) -> &mut Discriminator {
        &mut self.discriminator
    }

    /// Number of updates completed.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn set_diagnostics_dir(&mut self, dir: impl Into<PathBuf>) {
        self.diagnostics_dir = Some(dir.into());
    }

    fn noise(&self, iteration: usize, call: u64) -> Noise {
        Noise::Seeded(seed::derive(self.config.seed, &[seed::STREAM_NOISE, iteration as u64, call]))
    }

    /// Critic losses on a batch with both networks as given. Returns the
    /// differentiable critic total and the component values.
    pub fn critic_objective(&self, batch: &CycleBatch, g: &Bound, d: &Bound, iteration: usize) -> Result<(Var, LossComponents)> {
        let size = self.config.image_size;
        let w = self.config.weights();
        let n = Var::constant(batch.normals.clone());
        let dreal = Var::constant(batch.defects.clone());
        let a_target = uniform_maps(&batch.targets, size);
        let fake_d = Var::constant(self.generator.deface(g, &n, &a_target, self.noise(iteration, 0))?.image.value().clone());
        let fake_n = Var::constant(self.generator.restore(g, &dreal, self.noise(iteration, 1))?.image.value().clone());

        let critic = self.discriminator.critic(d);
        let real_d = critic.forward(&dreal);
        let real_n = critic.forward(&n);
        let adv_defect = critic.score(&fake_d).mean().sub(&real_d.src.mean());
        let adv_normal = critic.score(&fake_n).mean().sub(&real_n.src.mean());
        let adv_d = adv_defect.add(&adv_normal).scale(0.5);

        let gp_seed = seed::derive(self.config.seed, &[seed::STREAM_GP, iteration as u64]);
        let gp_defect = gradient_penalty(&critic, dreal.value(), fake_d.value(), gp_seed);
        let gp_normal = gradient_penalty(&critic, n.value(), fake_n.value(), seed::mix(gp_seed));
        let gp = gp_defect.add(&gp_normal).scale(0.5);

        let normal_labels = vec![LabelVector::normal(); batch.normals.shape()[0]];
        let cls_defect = classification_loss(&real_d.cls, &LabelVector::batch_tensor(&batch.defect_labels));
        let cls_normal = classification_loss(&real_n.cls, &LabelVector::batch_tensor(&normal_labels));
        let cls_r = cls_defect.add(&cls_normal).scale(0.5);

        let total = adv_d.add(&gp.scale(w.gp)).add(&cls_r.scale(w.cls_r));
        let c = LossComponents {
            adv_d: Some(adv_d.value().item()),
            gp: Some(gp.value().item()),
            cls_r: Some(cls_r.value().item()),
            ..Default::default()
        };
        Ok((total, c))
    }

    /// Generator losses over both translation cycles.
    pub fn generator_objective(&self, batch: &CycleBatch, g: &Bound, d: &Bound, iteration: usize) -> Result<(Var, LossComponents)> {
        let size = self.config.image_size;
        let w = self.config.weights();
        let gen = &self.generator;
        let n = Var::constant(batch.normals.clone());
        let dreal = Var::constant(batch.defects.clone());
        let a_target = uniform_maps(&batch.targets, size);
        let a_orig = uniform_maps(&batch.defect_labels, size);

        // n -> d -> n̂
        let defaced = gen.deface(g, &n, &a_target, self.noise(iteration, 0))?;
        let restored = gen.restore(g, &defaced.image, self.noise(iteration, 1))?;
        // d -> n̂' -> d̂, re-defaced with the defect's own label
        let repaired = gen.restore(g, &dreal, self.noise(iteration, 2))?;
        let redefaced = gen.deface(g, &repaired.image, &a_orig, self.noise(iteration, 3))?;

        let critic = self.discriminator.critic(d);
        let out_d = critic.forward(&defaced.image);
        let out_n = critic.forward(&repaired.image);
        let adv_g = out_d.src.mean().add(&out_n.src.mean()).scale(-0.5);
        let normal_labels = vec![LabelVector::normal(); batch.defects.shape()[0]];
        let cls_f = classification_loss(&out_d.cls, &LabelVector::batch_tensor(&batch.targets))
            .add(&classification_loss(&out_n.cls, &LabelVector::batch_tensor(&normal_labels)))
            .scale(0.5);
        let rec = reconstruction_loss(&n, &restored.image)
            .add(&reconstruction_loss(&dreal, &redefaced.image))
            .scale(0.5);

        let mut total = adv_g.add(&cls_f.scale(w.cls_f)).add(&rec.scale(w.rec));
        let mut c = LossComponents {
            adv_g: Some(adv_g.value().item()),
            cls_f: Some(cls_f.value().item()),
            rec: Some(rec.value().item()),
            ..Default::default()
        };
        if self.config.spatial_terms() {
            let maps = [&defaced.map, &restored.map, &redefaced.map, &repaired.map];
            let [Some(m_d), Some(m_r), Some(m_d2), Some(m_r2)] = maps else {
                unreachable!("composition enabled implies blend maps");
            };
            let sd_cyc = sd_cycle_loss(m_d, m_r).add(&sd_cycle_loss(m_d2, m_r2)).scale(0.5);
            let sd_con = sd_region_loss(m_d, m_r).add(&sd_region_loss(m_d2, m_r2)).scale(0.5);
            total = total.add(&sd_cyc.scale(w.sd_cyc)).add(&sd_con.scale(w.sd_con));
            c.sd_cyc = Some(sd_cyc.value().item());
            c.sd_con = Some(sd_con.value().item());
        }
        Ok((total, c))
    }

    /// One critic update on `batch`. Generator parameters are untouched.
    pub fn train_step_d(&mut self, batch: &CycleBatch) -> Result<LossReport> {
        let it = self.iteration;
        let g = self.generator.bind(false);
        let d = self.discriminator.bind(true);
        let (total, c) = self.critic_objective(batch, &g, &d, it)?;
        let report = self.finish(it, &c)?;
        let grads = d.gradients(&total);
        self.check_grads(it, &grads, &report)?;
        let lr = lr_schedule(it, &self.config);
        self.d_opt.step(self.discriminator.params_mut(), &grads, lr);
        self.iteration += 1;
        Ok(report)
    }

    /// One generator update on `batch`. Critic parameters are untouched.
    pub fn train_step_g(&mut self, batch: &CycleBatch) -> Result<LossReport> {
        let it = self.iteration;
        let g = self.generator.bind(true);
        let d = self.discriminator.bind(false);
        let (total, c) = self.generator_objective(batch, &g, &d, it)?;
        let report = self.finish(it, &c)?;
        let grads = g.gradients(&total);
        self.check_grads(it, &grads, &report)?;
        let lr = lr_schedule(it, &self.config);
        self.g_opt.step(self.generator.params_mut(), &grads, lr);
        self.iteration += 1;
        Ok(report)
    }

    fn finish(&self, it: usize, c: &LossComponents) -> Result<LossReport> {
        total_losses(c, &self.config.weights()).inspect_err(|e| {
            self.dump_diagnostic(it, &format!("{e}"), &serde_json::to_value(c).unwrap_or_default());
        })
    }

    fn check_grads(&self, it: usize, grads: &[Tensor], report: &LossReport) -> Result<()> {
        if grads.iter().all(Tensor::all_finite) {
            return Ok(());
        }
        self.dump_diagnostic(it, "gradient non-finite", &serde_json::to_value(report).unwrap_or_default());
        Err(Error::NonFinite { term: "gradient".into() })
    }

    fn dump_diagnostic(&self, it: usize, reason: &str, detail: &serde_json::Value) {
        error!("update {it}: {reason}");
        let Some(dir) = &self.diagnostics_dir else { return };
        let dump = serde_json::json!({
            "iteration": it,
            "reason": reason,
            "components": detail,
            "generator_checksum": self.generator.params().checksum(),
            "discriminator_checksum": self.discriminator.params().checksum(),
        });
        let path = dir.join(format!("diagnostic_{it}.json"));
        if let Err(e) = fs::write(&path, serde_json::to_vec_pretty(&dump).unwrap_or_default()) {
            error!("could not write {}: {e}", path.display());
        }
    }

    /// Runs the next scheduled update.
    pub fn step(&mut self, data: &TrainData) -> Result<StepRecord> {
        let it = self.iteration;
        let batch = CycleBatch::sample(data, self.config.batch_size, self.config.seed, it);
        let lr = lr_schedule(it, &self.config);
        let kind = step_kind(it, self.config.n_critic);
        let report = match kind {
            StepKind::D => self.train_step_d(&batch)?,
            StepKind::G => self.train_step_g(&batch)?,
        };
        Ok(StepRecord { iteration: it, step: kind, lr, report })
    }

    /// Runs until `config.iterations` updates are done, appending to
    /// `out/train_log.jsonl` and writing checkpoints under `out`.
    pub fn train(&mut self, data: &TrainData, out: &Path) -> Result<Vec<StepRecord>> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        if self.diagnostics_dir.is_none() {
            self.diagnostics_dir = Some(out.to_path_buf());
        }
        let log_path = out.join("train_log.jsonl");
        let mut log = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        let mut history = Vec::new();
        while self.iteration < self.config.iterations {
            let rec = self.step(data)?;
            let line = serde_json::to_string(&rec).expect("record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io(&log_path, e))?;
            history.push(rec);
            let done = self.iteration;
            let every = self.config.checkpoint_every;
            if (every > 0 && done % every == 0) || done == self.config.iterations {
                let dir = self.save_checkpoint(out)?;
                info!("update {done}: checkpoint {}", dir.display());
            }
        }
        Ok(history)
    }

    /// Writes `out/ckpt_<iteration>/`.
    pub fn save_checkpoint(&self, out: &Path) -> Result<PathBuf> {
        let dir = out.join(format!("ckpt_{}", self.iteration));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.generator.params().save(&dir.join("generator.bin"))?;
        self.discriminator.params().save(&dir.join("discriminator.bin"))?;
        self.g_opt.save(&dir.join("adam_generator.bin"))?;
        self.d_opt.save(&dir.join("adam_discriminator.bin"))?;
        let manifest = CheckpointManifest {
            format_version: CHECKPOINT_FORMAT,
            iteration: self.iteration,
            config: self.config.clone(),
            categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
            seed: self.config.seed,
        };
        let path = dir.join("manifest.json");
        fs::write(&path, serde_json::to_vec_pretty(&manifest).expect("manifest serializes"))
            .map_err(|e| Error::io(&path, e))?;
        Ok(dir)
    }

    /// Restores full training state. `iterations` may be raised to continue a run.
    pub fn resume(dir: &Path, iterations: Option<usize>) -> Result<Self> {
        let manifest = read_checkpoint_manifest(dir)?;
        let mut config = manifest.config;
        if let Some(n) = iterations {
            config.iterations = n;
        }
        let mut t = Trainer::new(config)?;
        t.generator.params_mut().load_into(&dir.join("generator.bin"))?;
        t.discriminator.params_mut().load_into(&dir.join("discriminator.bin"))?;
        t.g_opt.load_into(&dir.join("adam_generator.bin"))?;
        t.d_opt.load_into(&dir.join("adam_discriminator.bin"))?;
        t.iteration = manifest.iteration;
        Ok(t)
    }
}

pub fn read_checkpoint_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let path = dir.join("manifest.json");
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let m: CheckpointManifest = serde_json::from_slice(&bytes).map_err(|e| Error::json(&path, e))?;
    if m.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Invalid(format!("{}: unsupported checkpoint format {}", path.display(), m.format_version)));
    }
    if m.categories != CATEGORY_NAMES {
        return Err(Error::Invalid(format!("{}: category list differs from this build", path.display())));
    }
    Ok(m)
}

/// Loads only the generator of a checkpoint.
pub fn load_generator(dir: &Path) -> Result<(Generator, CheckpointManifest)> {
    let manifest = read_checkpoint_manifest(dir)?;
    let mut g = Generator::new(manifest.config.generator_config(), manifest.config.seed)?;
    g.params_mut().load_into(&dir.join("generator.bin"))?;
    Ok((g, manifest))
}

/// Most recent `ckpt_<n>/` under `run_dir`.
pub fn latest_checkpoint(run_dir: &Path) -> Option<PathBuf> {
    fs::read_dir(run_dir)
        .ok()?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let n: usize = name.strip_prefix("ckpt_")?.parse().ok()?;
            Some((n, e.path()))
        })
        .max_by_key(|(n, _)| *n)
        .map(|(_, p)| p)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints_and_midpoint() {
        let c = TrainConfig { iterations: 101, ..TrainConfig::full() };
        assert_eq!(lr_schedule(0, &c), 2e-4);
        assert_eq!(lr_schedule(100, &c), 1e-6);
        assert!((lr_schedule(50, &c) - (2e-4 + 1e-6) / 2.0).abs() < 1e-18);
        assert_eq!(lr_schedule(500, &c), 1e-6);
    }

    #[test]
    fn schedule_counts() {
        let g = (0..12).filter(|&u| step_kind(u, 5) == StepKind::G).count();
        assert_eq!(g, 2);
        for start in 0..30 {
            let g = (start..start + 6).filter(|&u| step_kind(u, 5) == StepKind::G).count();
            assert_eq!(g, 1);
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig { n_critic: 0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig { lr_end: 1.0, ..TrainConfig::desk() }.validate().is_err());
        assert!(TrainConfig::desk().validate().is_ok());
        assert!(TrainConfig::full().validate().is_ok());
        assert!(TrainConfig::micro().validate().is_ok());
    }

    #[test]
    fn empty_partition_is_fatal() {
        let p = ImagePatch::filled(8, 8, 0.0);
        assert!(TrainData::from_patches(&[], &[(p.clone(), LabelVector::normal())]).is_err());
        assert!(TrainData::from_patches(&[p], &[]).is_err());
    }
}
