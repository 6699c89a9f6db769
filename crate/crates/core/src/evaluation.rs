//! Fréchet distance between embedded image sets, the real/real split
//! baseline, and bulk corpus generation from a trained generator.

use std::fs;
use std::path::{Path, PathBuf};

use defectgan_autograd::{Tensor, Var};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::controlmap::AttributeControlMap;
use crate::datamodel::{Category, DatasetManifest, ImagePatch, LabelVector, SampleRecord, Source, Split, INDEX_FILE};
use crate::error::{Error, Result};
use crate::generator::Noise;
use crate::seed;
use crate::trainer::load_generator;

/// Relative size of a negative eigenvalue tolerated as round-off.
pub const EIGEN_CLIP_TOLERANCE: f64 = 1e-6;

/// Maps an image to a fixed-length feature vector.
pub trait Embedder: Sync {
    fn id(&self) -> String;
    fn dim(&self) -> usize;
    fn embed(&self, patch: &ImagePatch) -> Vec<f64>;
}

/// Sample mean and unbiased covariance of a set of embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub mean: Vec<f64>,
    /// Row-major `k × k`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl GaussianStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn from_vectors(vectors: &[Vec<f64>]) -> Result<Self> {
        let k = vectors.first().map_or(0, Vec::len);
        let mut acc = StatsAccumulator::new(k);
        for v in vectors {
            acc.push(v)?;
        }
        acc.finish()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let k = self.dim();
        DMatrix::from_row_slice(k, k, &self.covariance)
    }
}

/// Streaming mean / scatter accumulator. Two accumulators merge with the
/// pairwise update, so partial results over shards can be combined in any order.
#[derive(Debug, Clone)]
pub struct StatsAccumulator {
    count: usize,
    mean: Vec<f64>,
    scatter: Vec<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        StatsAccumulator { count: 0, mean: vec![0.0; dim], scatter: vec![0.0; dim * dim] }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        let k = self.mean.len();
        if x.len() != k {
            return Err(Error::Shape(format!("embedding length {} != {k}", x.len())));
        }
        self.count += 1;
        let n = self.count as f64;
        let delta: Vec<f64> = x.iter().zip(&self.mean).map(|(a, m)| a - m).collect();
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d / n;
        }
        for i in 0..k {
            let di = delta[i];
            for j in 0..k {
                self.scatter[i * k + j] += di * (x[j] - self.mean[j]);
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        let k = self.mean.len();
        if other.mean.len() != k {
            return Err(Error::Shape(format!("cannot merge dims {} and {k}", other.mean.len())));
        }
        if other.count == 0 {
            return Ok(());
        }
        if self.count == 0 {
            *self = other.clone();
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta: Vec<f64> = other.mean.iter().zip(&self.mean).map(|(b, a)| b - a).collect();
        for i in 0..k {
            for j in 0..k {
                self.scatter[i * k + j] += other.scatter[i * k + j] + delta[i] * delta[j] * na * nb / n;
            }
        }
        for (m, d) in self.mean.iter_mut().zip(&delta) {
            *m += d * nb / n;
        }
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<GaussianStats> {
        if self.count < 2 {
            return Err(Error::Invalid(format!("statistics need at least 2 samples, got {}", self.count)));
        }
        let k = self.mean.len();
        let denom = (self.count - 1) as f64;
        let mut covariance = vec![0.0; k * k];
        for i in 0..k {
            for j in 0..k {
                // symmetrize away round-off from the streaming update
                covariance[i * k + j] = 0.5 * (self.scatter[i * k + j] + self.scatter[j * k + i]) / denom;
            }
        }
        Ok(GaussianStats { mean: self.mean.clone(), covariance, count: self.count })
    }
}

/// Embeds every image (in parallel) and accumulates stats in input order.
pub fn compute_stats(images: &[ImagePatch], embed: &dyn Embedder) -> Result<GaussianStats> {
    if images.len() < 2 {
        return Err(Error::Invalid(format!("statistics need at least 2 images, got {}", images.len())));
    }
    let vectors: Vec<Vec<f64>> = images.par_iter().map(|p| embed.embed(p)).collect();
    let mut acc = StatsAccumulator::new(embed.dim());
    for v in &vectors {
        acc.push(v)?;
    }
    acc.finish()
}

/// Eigen-decomposes a symmetric matrix, clipping negative eigenvalues that
/// are within tolerance of zero.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::try_new(sym, f64::EPSILON, 10_000)
        .ok_or_else(|| Error::Numerical(format!("{what}: eigendecomposition did not converge")))?;
    let scale = eig.eigenvalues.iter().fold(1.0f64, |s, v| s.max(v.abs()));
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            if *v < -EIGEN_CLIP_TOLERANCE * scale {
                return Err(Error::Numerical(format!("{what}: eigenvalue {v:e} is not positive semidefinite")));
            }
            *v = 0.0;
        }
    }
    Ok(eig)
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2 (Σa Σb)^{1/2})`.
///
/// The trace of the square root of `Σa Σb` equals that of the symmetric
/// `Σa^{1/2} Σb Σa^{1/2}`, whose eigenvalues are taken directly.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    let k = a.dim();
    if b.dim() != k {
        return Err(Error::Shape(format!("stats dimensions differ: {k} vs {}", b.dim())));
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ea = psd_eigen(sa.clone(), "covariance")?;
    let root_a = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = &root_a * &sb * &root_a;
    let ei = psd_eigen(inner, "covariance product")?;
    let tr_sqrt: f64 = ei.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let fid = mean_term + sa.trace() + sb.trace() - 2.0 * tr_sqrt;
    Ok(fid.max(0.0))
}

/// FID between two image sets under one embedder.
pub fn fid_between(a: &[ImagePatch], b: &[ImagePatch], embed: &dyn Embedder) -> Result<f64> {
    frechet_distance(&compute_stats(a, embed)?, &compute_stats(b, embed)?)
}

/// Reference value of an ideal synthesizer: the FID between two random
/// halves of the real defect set.
pub fn ideal_split_fid(defect_images: &[ImagePatch], embed: &dyn Embedder, seed: u64) -> Result<f64> {
    if defect_images.len() < 4 {
        return Err(Error::Invalid(format!(
            "split baseline needs at least 4 images, got {}",
            defect_images.len()
        )));
    }
    let mut order: Vec<usize> = (0..defect_images.len()).collect();
    order.shuffle(&mut seed::rng(seed, &[seed::STREAM_SHUFFLE, 0]));
    let half = order.len() / 2;
    let pick = |idx: &[usize]| idx.iter().map(|&i| defect_images[i].clone()).collect::<Vec<_>>();
    fid_between(&pick(&order[..half]), &pick(&order[half..]), embed)
}

/// Raw pixels, box-downsampled to `resolution`, projected on the top
/// principal components of a reference set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PixelPcaEmbedder {
    pub resolution: usize,
    pub center: Vec<f64>,
    /// `k` rows of unit length in pixel space.
    pub components: Vec<Vec<f64>>,
}

impl PixelPcaEmbedder {
    /// Fits `k` components on `reference` via the Gram matrix, which is
    /// cheaper than the pixel covariance when images are fewer than pixels.
    pub fn fit(reference: &[ImagePatch], k: usize, resolution: usize) -> Result<Self> {
        let n = reference.len();
        if n < 2 {
            return Err(Error::Invalid("PCA needs at least 2 reference images".into()));
        }
        if k == 0 || k >= n {
            return Err(Error::Invalid(format!("PCA dimension {k} must be in 1..{n}")));
        }
        if resolution == 0 {
            return Err(Error::Invalid("PCA resolution must be positive".into()));
        }
        let rows: Vec<Vec<f64>> = reference.par_iter().map(|p| downsample(p, resolution)).collect();
        let d = rows[0].len();
        let mut center = vec![0.0; d];
        for r in &rows {
            for (c, v) in center.iter_mut().zip(r) {
                *c += v / n as f64;
            }
        }
        let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - center[j]);
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::try_new(gram, f64::EPSILON, 10_000)
            .ok_or_else(|| Error::Numerical("PCA eigendecomposition did not converge".into()))?;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(k);
        for &i in order.iter().take(k) {
            let lambda = eig.eigenvalues[i];
            if lambda <= 1e-12 {
                return Err(Error::Invalid(format!(
                    "reference set spans fewer than {k} directions; lower the embedding dimension"
                )));
            }
            let u: DVector<f64> = x.transpose() * eig.eigenvectors.column(i) / lambda.sqrt();
            let mut v: Vec<f64> = u.iter().copied().collect();
            // sign convention: largest-magnitude entry positive
            let big = v.iter().copied().fold(0.0f64, |m, e| if e.abs() > m.abs() { e } else { m });
            if big < 0.0 {
                v.iter_mut().for_each(|e| *e = -*e);
            }
            components.push(v);
        }
        Ok(PixelPcaEmbedder { resolution, center, components })
    }
}

impl Embedder for PixelPcaEmbedder {
    fn id(&self) -> String {
        format!("pixel-pca-{}x{}-k{}", self.resolution, self.resolution, self.components.len())
    }

    fn dim(&self) -> usize {
        self.components.len()
    }

    fn embed(&self, patch: &ImagePatch) -> Vec<f64> {
        let x = downsample(patch, self.resolution);
        self.components
            .iter()
            .map(|c| c.iter().zip(x.iter().zip(&self.center)).map(|(w, (v, m))| w * (v - m)).sum())
            .collect()
    }
}

/// Area-averages a patch to `r × r` (CHW order). Each output cell averages the
/// source pixels whose index maps onto it.
fn downsample(p: &ImagePatch, r: usize) -> Vec<f64> {
    let (h, w) = (p.height(), p.width());
    let mut out = vec![0.0; 3 * r * r];
    let mut counts = vec![0usize; r * r];
    for y in 0..h {
        let oy = y * r / h;
        for x in 0..w {
            let ox = x * r / w;
            counts[oy * r + ox] += 1;
            for c in 0..3 {
                out[(c * r + oy) * r + ox] += p.get(y, x, c);
            }
        }
    }
    for c in 0..3 {
        for i in 0..r * r {
            out[c * r * r + i] /= counts[i].max(1) as f64;
        }
    }
    out
}

/// How defacement targets are chosen for generated samples.
#[derive(Debug, Clone, PartialEq)]
pub enum CategorySampler {
    /// Every sample uses this label.
    Fixed(LabelVector),
    /// A single defect category drawn uniformly.
    UniformSingle,
    /// Draw uniformly from a list of labels (e.g. the real defect labels).
    Empirical(Vec<LabelVector>),
}

impl CategorySampler {
    fn draw(&self, rng: &mut impl Rng) -> LabelVector {
        match self {
            CategorySampler::Fixed(l) => *l,
            CategorySampler::UniformSingle => {
                LabelVector::one_hot(Category::DEFECTS[rng.random_range(0..Category::DEFECTS.len())])
            }
            CategorySampler::Empirical(ls) => ls[rng.random_range(0..ls.len())],
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusOptions {
    pub count: usize,
    pub sampler: CategorySampler,
    /// Spatial map applied to every sample instead of a uniform label map.
    pub control: Option<AttributeControlMap>,
    pub with_restorations: bool,
    pub seed: u64,
}

/// Generator calls are batched in groups of this size.
const CORPUS_BATCH: usize = 16;

/// Defaces random normal images from `normals` with a checkpointed generator,
/// writing `synthetic/NNNNN.png` (and `restored/NNNNN.png`) plus an index under
/// `out`.
pub fn generate_corpus(
    checkpoint: &Path,
    normals: &DatasetManifest,
    options: &CorpusOptions,
    out: &Path,
) -> Result<DatasetManifest> {
    let (generator, manifest) = load_generator(checkpoint)?;
    let size = generator.config().image_size;
    if manifest.config.image_size != size {
        return Err(Error::Invalid("checkpoint manifest and generator disagree on image size".into()));
    }
    if let CategorySampler::Empirical(ls) = &options.sampler {
        if ls.is_empty() {
            return Err(Error::Invalid("empirical category sampler has no labels".into()));
        }
    }
    if let Some(map) = &options.control {
        if map.height() != size || map.width() != size {
            return Err(Error::Shape(format!(
                "control map is {}x{}, checkpoint expects {size}x{size}",
                map.height(),
                map.width()
            )));
        }
    }
    let pool: Vec<&SampleRecord> = normals.records.iter().filter(|r| r.label.is_normal()).collect();
    if pool.is_empty() {
        return Err(Error::Invalid("normal pool is empty".into()));
    }

    for dir in ["synthetic", "restored"] {
        let d = out.join(dir);
        if dir == "synthetic" || options.with_restorations {
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
    }

    let g = generator.bind(false);
    let mut synthetic = Vec::with_capacity(options.count);
    let mut restored = Vec::new();
    for start in (0..options.count).step_by(CORPUS_BATCH) {
        let end = (start + CORPUS_BATCH).min(options.count);
        let mut inputs = Vec::new();
        let mut maps = Vec::new();
        let mut labels = Vec::new();
        for i in start..end {
            let mut rng = seed::rng(options.seed, &[seed::STREAM_CORPUS, i as u64]);
            let src = pool[rng.random_range(0..pool.len())];
            inputs.push(ImagePatch::load(&normals.image_path(src), Some(size as u32))?);
            let (map, label) = match &options.control {
                Some(m) => (m.clone(), m.implied_label()?),
                None => {
                    let l = options.sampler.draw(&mut rng);
                    (AttributeControlMap::repeat_label(&l, size, size), l)
                }
            };
            maps.push(map);
            labels.push(label);
        }
        let batch_seed = seed::derive(options.seed, &[seed::STREAM_CORPUS, u64::MAX, start as u64]);
        let x = Var::constant(ImagePatch::batch_tensor(&inputs));
        let a = AttributeControlMap::batch_tensor(&maps);
        let fake = generator.deface(&g, &x, &a, Noise::Seeded(batch_seed))?.image;
        let fake_t: Tensor = fake.value().clone();
        for (j, label) in labels.into_iter().enumerate() {
            let i = start + j;
            let path = PathBuf::from("synthetic").join(format!("{i:05}.png"));
            ImagePatch::from_tensor(&fake_t, j)?.save_png(&out.join(&path))?;
            synthetic.push(SampleRecord { path, label, source: Source::Synthetic });
        }
        if options.with_restorations {
            let back = generator.restore(&g, &Var::constant(fake_t), Noise::Seeded(seed::mix(batch_seed)))?.image;
            for j in 0..end - start {
                let i = start + j;
                let path = PathBuf::from("restored").join(format!("{i:05}.png"));
                ImagePatch::from_tensor(back.value(), j)?.save_png(&out.join(&path))?;
                restored.push(SampleRecord { path, label: LabelVector::normal(), source: Source::Restored });
            }
        }
    }
    synthetic.extend(restored);
    let corpus = DatasetManifest::new(out, Split::Train, synthetic);
    corpus.write_index(&out.join(INDEX_FILE))?;
    Ok(corpus)
}
