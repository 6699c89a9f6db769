//! Multi-label defect classifier trained on real plus generated data, with a
//! real-vs-generated source head attached through gradient reversal.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use defectgan_autograd::{Tensor, Var};
use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datamodel::{DatasetManifest, ImagePatch, LabelVector, Source, NUM_CATEGORIES};
use crate::error::{Error, Result};
use crate::nn::{instance_norm, Bound, Conv2d, Linear, ParamId, ParamStore, IN_EPS};
use crate::objectives::classification_loss;
use crate::optim::Sgd;
use crate::seed;

pub const SMALL_CNN: &str = "small-cnn";

/// Identity on the forward pass; scales the gradient by `−λ` on the way back.
pub fn grl(x: &Var, lambda: f64) -> Var {
    x.reverse_grad(lambda)
}

/// Reversal strength over training progress `p` in [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrlSchedule {
    Constant,
    /// `λ · (2 / (1 + e^{−10p}) − 1)`.
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InspectorConfig {
    pub backbone: String,
    pub image_size: usize,
    pub width: usize,
    pub source_hidden: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lambda_grl: f64,
    pub grl_schedule: GrlSchedule,
    /// Attach the source head at all. Off gives a plain classifier.
    pub source_head: bool,
    /// Fraction of each batch drawn from generated records; `None` samples
    /// uniformly over the mixed set.
    pub synthetic_fraction: Option<f64>,
    pub seed: u64,
}

impl Default for InspectorConfig {
    fn default() -> Self {
        InspectorConfig::desk()
    }
}

impl InspectorConfig {
    /// Training settings used at full scale. The backbone names a pretrained
    /// network that has to be supplied through [`Backbone`] integration.
    pub fn full() -> Self {
        InspectorConfig {
            backbone: "resnet34".into(),
            image_size: 224,
            epochs: 100,
            ..InspectorConfig::desk()
        }
    }

    pub fn desk() -> Self {
        InspectorConfig {
            backbone: SMALL_CNN.into(),
            image_size: 32,
            width: 16,
            source_hidden: 32,
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 16,
            epochs: 60,
            lambda_grl: 1.0,
            grl_schedule: GrlSchedule::Constant,
            source_head: true,
            synthetic_fraction: None,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be > 0, got {}", self.lr));
        }
        if !(self.lambda_grl >= 0.0 && self.lambda_grl.is_finite()) {
            return bad(format!("lambda_grl must be >= 0, got {}", self.lambda_grl));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.batch_size == 0 || self.epochs == 0 || self.width == 0 || self.source_hidden == 0 {
            return bad("batch_size, epochs, width and source_hidden must be positive".into());
        }
        if self.image_size < 8 || self.image_size % 8 != 0 {
            return bad(format!("image_size must be a positive multiple of 8, got {}", self.image_size));
        }
        if let Some(f) = self.synthetic_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("synthetic_fraction must be in [0, 1], got {f}"));
            }
        }
        if self.backbone != SMALL_CNN {
            return bad(format!("backbone '{}' is not available in this build (have: {SMALL_CNN})", self.backbone));
        }
        Ok(())
    }

    pub fn lambda_at(&self, progress: f64) -> f64 {
        match self.grl_schedule {
            GrlSchedule::Constant => self.lambda_grl,
            GrlSchedule::Ramp => self.lambda_grl * (2.0 / (1.0 + (-10.0 * progress).exp()) - 1.0),
        }
    }
}

/// A training record with its image path resolved against its manifest root.
#[derive(Debug, Clone, PartialEq)]
pub struct MixedRecord {
    pub path: PathBuf,
    pub label: LabelVector,
    pub source: Source,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixedDataset {
    pub records: Vec<MixedRecord>,
    /// Generated records were merged in.
    pub augmented: bool,
}

impl MixedDataset {
    pub fn count(&self, source: Source) -> usize {
        self.records.iter().filter(|r| r.source == source).count()
    }

    fn has_generated(&self) -> bool {
        self.records.iter().any(|r| r.source != Source::Real)
    }

    fn has_real(&self) -> bool {
        self.records.iter().any(|r| r.source == Source::Real)
    }
}

/// Concatenates a real manifest with an optional generated one, keeping each
/// record's source tag. Paths that occur more than once are an error.
pub fn mix_training_data(real: &DatasetManifest, generated: Option<&DatasetManifest>) -> Result<MixedDataset> {
    let mut records: Vec<MixedRecord> = Vec::new();
    let mut push = |m: &DatasetManifest| {
        for r in &m.records {
            records.push(MixedRecord { path: m.image_path(r), label: r.label, source: r.source });
        }
    };
    push(real);
    if let Some(g) = generated {
        if g.categories != real.categories {
            return Err(Error::Invalid(format!(
                "category mismatch: real {:?} vs generated {:?}",
                real.categories, g.categories
            )));
        }
        push(g);
    }
    let mut seen: BTreeMap<PathBuf, usize> = BTreeMap::new();
    for r in &records {
        let key = fs::canonicalize(&r.path).unwrap_or_else(|_| r.path.clone());
        *seen.entry(key).or_default() += 1;
    }
    let dups: Vec<String> = seen
        .into_iter()
        .filter(|(_, n)| *n > 1)
        .map(|(p, _)| p.display().to_string())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Invalid(format!("duplicate records: {}", dups.join(", "))));
    }
    Ok(MixedDataset { records, augmented: generated.is_some() })
}

/// Percentage of samples whose whole thresholded prediction (`p ≥ threshold`)
/// equals the target. Zero for an empty set.
pub fn exact_match_accuracy(predictions: &[[f64; NUM_CATEGORIES]], targets: &[LabelVector], threshold: f64) -> f64 {
    assert_eq!(predictions.len(), targets.len(), "one prediction per target");
    if targets.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(targets)
        .filter(|(p, t)| p.iter().zip(t.bits()).all(|(&v, b)| (v >= threshold) == b))
        .count();
    100.0 * hits as f64 / targets.len() as f64
}

/// Feature extractor interface: `[N, 3, S, S]` images to `[N, feature_dim]`.
pub trait Backbone {
    fn feature_dim(&self) -> usize;
    fn features(&self, b: &Bound, x: &Var) -> Var;
}

/// Four convolutions (the last three stride 2) followed by global average pooling.
#[derive(Debug, Clone)]
pub struct SmallCnn {
    convs: Vec<Conv2d>,
    /// Per-channel scale and shift after each per-sample layer norm.
    norms: Vec<(ParamId, ParamId)>,
    dim: usize,
}

impl SmallCnn {
    fn new(store: &mut ParamStore, rng: &mut rand_chacha::ChaCha8Rng, width: usize) -> Self {
        let mut convs = vec![Conv2d::new(store, rng, "backbone.0", 3, width, 3, 1, 1, false)];
        let mut c = width;
        for i in 1..4 {
            convs.push(Conv2d::new(store, rng, &format!("backbone.{i}"), c, 2 * c, 4, 2, 1, false));
            c *= 2;
        }
        let norms = (0..4)
            .map(|i| {
                let ch = width << i;
                (
                    store.add(format!("backbone.{i}.norm.gamma"), Tensor::ones(&[1, ch, 1, 1])),
                    store.add(format!("backbone.{i}.norm.beta"), Tensor::zeros(&[1, ch, 1, 1])),
                )
            })
            .collect();
        SmallCnn { convs, norms, dim: c }
    }
}

/// Normalizes each sample over all of its channels and positions.
fn layer_norm(x: &Var) -> Var {
    let s = x.shape().to_vec();
    instance_norm(&x.reshape(&[s[0], 1, s[1], s[2] * s[3]]), IN_EPS).reshape(&s)
}

impl Backbone for SmallCnn {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, b: &Bound, x: &Var) -> Var {
        let h = self.convs.iter().zip(&self.norms).fold(x.clone(), |h, (conv, (g, beta))| {
            layer_norm(&conv.forward(b, &h)).mul(b.var(*g)).add(b.var(*beta)).relu()
        });
        h.mean_axes_keepdim(&[2, 3]).reshape(&[x.shape()[0], self.dim])
    }
}

#[derive(Debug, Clone)]
pub struct Inspector {
    config: InspectorConfig,
    params: ParamStore,
    backbone: SmallCnn,
    cls: Linear,
    src_hidden: Linear,
    src_out: Linear,
}

/// Per-batch losses; `src` is absent when the source head is off.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub cls: f64,
    pub src: Option<f64>,
}

impl Inspector {
    /// Backbone and category head draw from one stream and the source head
    /// from another, so enabling the source head leaves the rest unchanged.
    pub fn new(config: InspectorConfig) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let mut rng = seed::rng(config.seed, &[seed::STREAM_INIT_INSPECTOR]);
        let backbone = SmallCnn::new(&mut params, &mut rng, config.width);
        let cls = Linear::new(&mut params, &mut rng, "head.cls", backbone.dim, NUM_CATEGORIES);
        let mut src_rng = seed::rng(config.seed, &[seed::STREAM_INIT_SRC]);
        let src_hidden = Linear::new(&mut params, &mut src_rng, "head.src.0", backbone.dim, config.source_hidden);
        let src_out = Linear::new(&mut params, &mut src_rng, "head.src.1", config.source_hidden, 1);
        Ok(Inspector { config, params, backbone, cls, src_hidden, src_out })
    }

    pub fn config(&self) -> &InspectorConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Category logits `[N, C]` and source logits `[N, 1]`.
    pub fn forward(&self, b: &Bound, x: &Var, lambda: f64) -> (Var, Var) {
        let f = self.backbone.features(b, x);
        let cls = self.cls.forward(b, &f);
        let src = self.src_out.forward(b, &self.src_hidden.forward(b, &grl(&f, lambda)).relu());
        (cls, src)
    }

    /// Per-class probabilities.
    pub fn predict(&self, images: &[ImagePatch]) -> Vec<[f64; NUM_CATEGORIES]> {
        let b = self.params.bind(false);
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(64) {
            let x = Var::constant(ImagePatch::batch_tensor(chunk));
            let f = self.backbone.features(&b, &x);
            let p = self.cls.forward(&b, &f).sigmoid();
            for row in p.value().data().chunks(NUM_CATEGORIES) {
                out.push(row.try_into().expect("row of C probabilities"));
            }
        }
        out
    }

    /// One SGD step. `sources` is 1 for generated samples; `None` skips the
    /// source loss.
    pub fn train_step(
        &mut self,
        opt: &mut Sgd,
        images: &[ImagePatch],
        labels: &[LabelVector],
        sources: Option<&[f64]>,
        lambda: f64,
    ) -> Result<StepLosses> {
        let b = self.params.bind(true);
        let x = Var::constant(ImagePatch::batch_tensor(images));
        let (cls, src) = self.forward(&b, &x, lambda);
        let cls_loss = classification_loss(&cls, &LabelVector::batch_tensor(labels));
        let (total, src_loss) = match sources {
            Some(s) => {
                let l = classification_loss(&src, &Tensor::new(&[s.len(), 1], s.to_vec()));
                (cls_loss.add(&l), Some(l.value().item()))
            }
            None => (cls_loss.clone(), None),
        };
        let losses = StepLosses { cls: cls_loss.value().item(), src: src_loss };
        if !losses.cls.is_finite() || losses.src.is_some_and(|v| !v.is_finite()) {
            return Err(Error::NonFinite { term: "inspector loss".into() });
        }
        let grads = b.gradients(&total);
        opt.step(&mut self.params, &grads, self.config.lr);
        Ok(losses)
    }

    /// Writes `inspector.bin` and `inspector.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("inspector.bin"))?;
        let json = serde_json::to_string_pretty(&self.config).map_err(|e| Error::json(dir, e))?;
        let p = dir.join("inspector.json");
        fs::write(&p, json).map_err(|e| Error::io(&p, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let p = dir.join("inspector.json");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let config: InspectorConfig = serde_json::from_str(&text).map_err(|e| Error::json(&p, e))?;
        let mut model = Inspector::new(config)?;
        model.params.load_into(&dir.join("inspector.bin"))?;
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub cls_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub src_loss: Option<f64>,
    pub lambda_grl: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct InspectorRun {
    /// Parameters from the epoch with the best validation accuracy
    /// (earliest on ties).
    pub best: Inspector,
    pub best_epoch: usize,
    pub best_accuracy: f64,
    pub history: Vec<EpochMetrics>,
    /// Whether the source head took part in training.
    pub source_head_used: bool,
}

/// Validation images with their targets.
pub struct LabeledImages {
    pub images: Vec<ImagePatch>,
    pub labels: Vec<LabelVector>,
}

impl LabeledImages {
    pub fn from_manifest(m: &DatasetManifest, size: usize) -> Result<Self> {
        Ok(LabeledImages {
            images: m.load_images(size as u32)?,
            labels: m.records.iter().map(|r| r.label).collect(),
        })
    }
}

/// Trains on `data`, selecting the epoch with the best validation exact-match
/// accuracy. With `out`, writes `metrics.jsonl` and `best/` there.
pub fn train_inspector(
    config: &InspectorConfig,
    data: &MixedDataset,
    val: &LabeledImages,
    out: Option<&Path>,
) -> Result<InspectorRun> {
    config.validate()?;
    if data.records.is_empty() {
        return Err(Error::Invalid("inspector training data is empty".into()));
    }
    if val.images.is_empty() {
        return Err(Error::Invalid("inspector validation set is empty".into()));
    }
    let mut use_source = config.source_head;
    if use_source && config.lambda_grl > 0.0 && !(data.has_real() && data.has_generated()) {
        warn!("training data has a single source; source head disabled");
        use_source = false;
    }
    let images: Vec<ImagePatch> = data
        .records
        .par_iter()
        .map(|r| ImagePatch::load(&r.path, Some(config.image_size as u32)))
        .collect::<Result<_>>()?;
    let labels: Vec<LabelVector> = data.records.iter().map(|r| r.label).collect();
    let sources: Vec<f64> = data.records.iter().map(|r| f64::from(u8::from(r.source != Source::Real))).collect();

    let mut model = Inspector::new(config.clone())?;
    let mut opt = Sgd::new(config.momentum, model.params());
    let mut metrics_file = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("metrics.jsonl");
            Some((fs::File::create(&p).map_err(|e| Error::io(&p, e))?, p))
        }
        None => None,
    };

    let n = images.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = (steps_per_epoch * config.epochs).max(1);
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, Inspector)> = None;
    for epoch in 0..config.epochs {
        let mut rng = seed::rng(config.seed, &[seed::STREAM_SHUFFLE, epoch as u64]);
        let batches = epoch_batches(&mut rng, &sources, config, steps_per_epoch);
        let (mut cls_sum, mut src_sum) = (0.0, 0.0);
        let mut lambda = config.lambda_at(0.0);
        for (s, idx) in batches.iter().enumerate() {
            let progress = (epoch * steps_per_epoch + s) as f64 / total_steps as f64;
            lambda = config.lambda_at(progress);
            let xb: Vec<ImagePatch> = idx.iter().map(|&i| images[i].clone()).collect();
            let lb: Vec<LabelVector> = idx.iter().map(|&i| labels[i]).collect();
            let sb: Vec<f64> = idx.iter().map(|&i| sources[i]).collect();
            let l = model.train_step(&mut opt, &xb, &lb, use_source.then_some(&sb[..]), lambda)?;
            cls_sum += l.cls;
            src_sum += l.src.unwrap_or(0.0);
        }
        let acc = exact_match_accuracy(&model.predict(&val.images), &val.labels, 0.5);
        let m = EpochMetrics {
            epoch,
            cls_loss: cls_sum / batches.len() as f64,
            src_loss: use_source.then(|| src_sum / batches.len() as f64),
            lambda_grl: if use_source { lambda } else { 0.0 },
            val_accuracy: acc,
        };
        info!("inspector epoch {epoch}: cls {:.4} val acc {acc:.2}%", m.cls_loss);
        if let Some((f, p)) = metrics_file.as_mut() {
            let line = serde_json::to_string(&m).map_err(|e| Error::json(&*p, e))?;
            writeln!(f, "{line}").map_err(|e| Error::io(&*p, e))?;
        }
        if best.as_ref().is_none_or(|(a, _, _)| acc > *a) {
            best = Some((acc, epoch, model.clone()));
        }
        history.push(m);
    }
    let (best_accuracy, best_epoch, best) = best.expect("at least one epoch");
    if let Some(dir) = out {
        best.save(&dir.join("best"))?;
    }
    Ok(InspectorRun { best, best_epoch, best_accuracy, history, source_head_used: use_source })
}

/// Index batches for one epoch: a shuffled pass over the data, or with a
/// synthetic fraction, batches drawn with that share of generated records.
fn epoch_batches(
    rng: &mut rand_chacha::ChaCha8Rng,
    sources: &[f64],
    config: &InspectorConfig,
    steps: usize,
) -> Vec<Vec<usize>> {
    let real: Vec<usize> = (0..sources.len()).filter(|&i| sources[i] == 0.0).collect();
    let generated: Vec<usize> = (0..sources.len()).filter(|&i| sources[i] != 0.0).collect();
    match config.synthetic_fraction {
        Some(f) if !real.is_empty() && !generated.is_empty() => {
            let k = (f * config.batch_size as f64).round() as usize;
            (0..steps)
                .map(|_| {
                    let mut b: Vec<usize> =
                        (0..k).map(|_| generated[rng.random_range(0..generated.len())]).collect();
                    b.extend((k..config.batch_size).map(|_| real[rng.random_range(0..real.len())]));
                    b
                })
                .collect()
        }
        _ => {
            let mut order: Vec<usize> = (0..sources.len()).collect();
            order.shuffle(rng);
            order.chunks(config.batch_size).map(<[usize]>::to_vec).collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_examples() {
        let t = [LabelVector::normal(), LabelVector::one_hot(crate::datamodel::Category::Crack)];
        let mut p = [[0.0; NUM_CATEGORIES]; 2];
        p[0][5] = 0.9;
        p[1][0] = 0.5;
        assert_eq!(exact_match_accuracy(&p, &t, 0.5), 100.0);
        p[1][2] = 0.7;
        assert_eq!(exact_match_accuracy(&p, &t, 0.5), 50.0);
        p.swap(0, 1);
        let t2 = [t[1], t[0]];
        assert_eq!(exact_match_accuracy(&p, &t2, 0.5), 50.0);
    }

    #[test]
    fn grl_examples() {
        let x = Var::leaf(Tensor::new(&[2], vec![0.3, -7.25]));
        let y = grl(&x, 1.0);
        assert_eq!(y.value().data(), x.value().data());
        let up = Tensor::new(&[2], vec![1.0, -2.0]);
        let g = defectgan_autograd::grad(&y.mul_const(&up).sum(), &[x.clone()], false);
        assert_eq!(g[0].value().data(), &[-1.0, 2.0]);
        let g0 = defectgan_autograd::grad(&grl(&x, 0.0).mul_const(&up).sum(), &[x], false);
        assert!(g0[0].value().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn config_validation() {
        assert!(InspectorConfig::desk().validate().is_ok());
        assert!(InspectorConfig { lr: 0.0, ..InspectorConfig::desk() }.validate().is_err());
        assert!(InspectorConfig { lambda_grl: -1.0, ..InspectorConfig::desk() }.validate().is_err());
        assert!(InspectorConfig::full().validate().is_err());
    }

    #[test]
    fn ramp_schedule_endpoints() {
        let c = InspectorConfig { grl_schedule: GrlSchedule::Ramp, ..InspectorConfig::desk() };
        assert_eq!(c.lambda_at(0.0), 0.0);
        assert!((c.lambda_at(1.0) - 1.0).abs() < 1e-4);
    }
}
