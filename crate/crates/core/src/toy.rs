//! Procedural stand-in dataset: textured concrete-like backgrounds with
//! category-specific marks. Masks are written for diagnostics only.

use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, RgbImage};
use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    write_index, Category, DatasetManifest, LabelVector, SampleRecord, Source, Split,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDefectSpec {
    pub image_size: u32,
    pub noise_octaves: u32,
    /// Lattice cells across the image at the coarsest octave.
    pub noise_cells: u32,
    pub noise_amplitude: f64,
    pub base_color: [u8; 3],
    pub crack_polylines: u32,
    pub crack_width: u32,
    /// Blob radius range as a fraction of the image size.
    pub blob_radius: (f64, f64),
    pub patch_brightness: f64,
    pub samples_per_class: u32,
    pub seed: u64,
    /// Fractions of each class assigned to the validation and test splits.
    pub val_fraction: f64,
    pub test_fraction: f64,
}

impl Default for ToyDefectSpec {
    fn default() -> Self {
        ToyDefectSpec {
            image_size: 32,
            noise_octaves: 3,
            noise_cells: 4,
            noise_amplitude: 0.12,
            base_color: [150, 146, 138],
            crack_polylines: 1,
            crack_width: 1,
            blob_radius: (0.15, 0.28),
            patch_brightness: 0.55,
            samples_per_class: 50,
            seed: 0,
            val_fraction: 0.15,
            test_fraction: 0.15,
        }
    }
}

impl ToyDefectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Invalid(format!("toy image size {} is below 16", self.image_size)));
        }
        if self.samples_per_class < 1 {
            return Err(Error::Invalid("samples per class must be at least 1".into()));
        }
        let (lo, hi) = self.blob_radius;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Invalid(format!("blob radius range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 0.5")));
        }
        if self.noise_octaves == 0 || self.noise_cells == 0 {
            return Err(Error::Invalid("noise octaves and cells must be positive".into()));
        }
        let split = self.val_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&split) || self.val_fraction < 0.0 || self.test_fraction < 0.0 {
            return Err(Error::Invalid("split fractions must be non-negative and sum below 1".into()));
        }
        Ok(())
    }

    /// Largest crack width kept on the canvas.
    pub fn max_crack_width(&self) -> u32 {
        (self.image_size / 8).max(1)
    }
}

/// Result of [`make_toy_dataset`]: the full index plus per-split manifests.
#[derive(Debug, Clone)]
pub struct ToyDataset {
    pub all: DatasetManifest,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub test: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Renders the dataset under `out`, writing `images/<class>/<seed>_<i>.png`,
/// `masks/<class>/<seed>_<i>.png`, `index.csv` and `train/val/test.csv`.
pub fn make_toy_dataset(spec: &ToyDefectSpec, out: &Path) -> Result<ToyDataset> {
    spec.validate()?;
    let mut spec = spec.clone();
    let mut warnings = Vec::new();
    if spec.crack_width > spec.max_crack_width() {
        let msg = format!(
            "crack width {} exceeds {} for {}px images; clamped",
            spec.crack_width,
            spec.max_crack_width(),
            spec.image_size
        );
        warn!("{msg}");
        warnings.push(msg);
        spec.crack_width = spec.max_crack_width();
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let jobs: Vec<(Category, u32)> = Category::ALL
        .iter()
        .flat_map(|&c| (0..spec.samples_per_class).map(move |i| (c, i)))
        .collect();
    use rayon::prelude::*;
    let rendered: Vec<Result<SampleRecord>> = jobs
        .par_iter()
        .map(|&(cat, i)| {
            let (img, mask) = render_sample(&spec, cat, i);
            let name = format!("{}_{}.png", spec.seed, i);
            let rel = PathBuf::from("images").join(cat.name()).join(&name);
            save(&out.join(&rel), |p| img.save(p))?;
            save(&out.join("masks").join(cat.name()).join(&name), |p| mask.save(p))?;
            Ok(SampleRecord { path: rel, label: LabelVector::one_hot(cat), source: Source::Real })
        })
        .collect();
    let records = rendered.into_iter().collect::<Result<Vec<_>>>()?;

    let n = spec.samples_per_class as usize;
    let n_test = (n as f64 * spec.test_fraction).round() as usize;
    let n_val = (n as f64 * spec.val_fraction).round() as usize;
    let (mut train, mut val, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for class in records.chunks(n) {
        for (i, r) in class.iter().enumerate() {
            if i < n_test {
                test.push(r.clone());
            } else if i < n_test + n_val {
                val.push(r.clone());
            } else {
                train.push(r.clone());
            }
        }
    }
    write_index(&out.join(crate::datamodel::INDEX_FILE), &records)?;
    write_index(&out.join("train.csv"), &train)?;
    write_index(&out.join("val.csv"), &val)?;
    write_index(&out.join("test.csv"), &test)?;
    Ok(ToyDataset {
        all: DatasetManifest::new(out, Split::Train, records),
        train: DatasetManifest::new(out, Split::Train, train),
        val: DatasetManifest::new(out, Split::Val, val),
        test: DatasetManifest::new(out, Split::Test, test),
        warnings,
    })
}

fn save(path: &Path, write: impl FnOnce(&Path) -> image::ImageResult<()>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write(path).map_err(|e| Error::image(path, e))
}

/// Renders one sample and its defect mask (255 where marks were drawn).
pub fn render_sample(spec: &ToyDefectSpec, cat: Category, index: u32) -> (RgbImage, GrayImage) {
    let mut rng = seed::rng(spec.seed, &[cat.index() as u64, index as u64]);
    let s = spec.image_size as usize;
    let mut canvas = Canvas::background(spec, &mut rng);
    let mut mask = vec![false; s * s];
    match cat {
        Category::Normal => {}
        Category::Crack => {
            for _ in 0..spec.crack_polylines.max(1) {
                let pts = polyline(&mut rng, s);
                canvas.stroke(&pts, spec.crack_width as f64, &mut mask, |_, c| c.map(|v| v * 0.25));
            }
        }
        Category::Spallation => {
            let blob = Blob::random(&mut rng, spec);
            canvas.fill(&blob, &mut mask, |r, c| {
                let t = 0.45 + 0.15 * r;
                c.map(|v| v * t)
            });
        }
        Category::Efflorescence => {
            let blob = Blob::random(&mut rng, spec);
            let b = spec.patch_brightness;
            canvas.fill(&blob, &mut mask, |r, c| c.map(|v| v + (1.0 - v) * b * (1.0 - 0.5 * r)));
        }
        Category::ExposedBars => {
            let horizontal = rng.random_bool(0.5);
            let lo = s / 4;
            let span = s / 2;
            let first = lo + rng.random_range(0..=s / 8);
            let gap = (s / 5).max(3);
            for k in 0..2 {
                let off = (first + k * gap).min(s - 2) as f64;
                let a = (lo + rng.random_range(0..=s / 8)) as f64;
                let b = (a + span as f64).min((s - 2) as f64);
                let pts = if horizontal { vec![(a, off), (b, off)] } else { vec![(off, a), (off, b)] };
                let w = (s as f64 / 16.0).max(1.0);
                canvas.stroke(&pts, w, &mut mask, |_, _| [0.35, 0.2, 0.15]);
            }
        }
        Category::Corrosion => {
            let blob = Blob::random(&mut rng, spec);
            canvas.fill(&blob, &mut mask, |r, c| {
                let rust = [0.62, 0.32, 0.12];
                let t = 0.85 - 0.3 * r;
                [0, 1, 2].map(|i| c[i] * (1.0 - t) + rust[i] * t)
            });
        }
    }
    let img = canvas.to_image();
    let mask = GrayImage::from_fn(s as u32, s as u32, |x, y| {
        Luma([if mask[y as usize * s + x as usize] { 255 } else { 0 }])
    });
    (img, mask)
}

/// RGB canvas with channel values in [0, 1].
struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn background(spec: &ToyDefectSpec, rng: &mut ChaCha8Rng) -> Canvas {
        let s = spec.image_size as usize;
        let noise = value_noise(rng, s, spec.noise_cells as usize, spec.noise_octaves);
        let tint: [f64; 3] = [0, 1, 2].map(|_| rng.random_range(-0.04..0.04));
        let base = spec.base_color.map(|v| v as f64 / 255.0);
        let px = noise
            .iter()
            .map(|&n| [0, 1, 2].map(|c| (base[c] + tint[c] + spec.noise_amplitude * n).clamp(0.0, 1.0)))
            .collect();
        Canvas { size: s, px }
    }

    /// Paints every pixel whose centre lies within `width / 2` of the polyline.
    /// `paint` receives the normalized distance to the centre line.
    fn stroke(
        &mut self,
        pts: &[(f64, f64)],
        width: f64,
        mask: &mut [bool],
        paint: impl Fn(f64, [f64; 3]) -> [f64; 3],
    ) {
        let half = (width / 2.0).max(0.5);
        self.paint_where(mask, |x, y| {
            let d = pts
                .windows(2)
                .map(|w| segment_distance((x, y), w[0], w[1]))
                .fold(f64::INFINITY, f64::min);
            (d <= half).then(|| d / half)
        }, paint);
    }

    fn fill(&mut self, blob: &Blob, mask: &mut [bool], paint: impl Fn(f64, [f64; 3]) -> [f64; 3]) {
        self.paint_where(mask, |x, y| blob.radial(x, y), paint);
    }

    /// Applies `paint` where `inside` returns a value, skipping a 1-pixel border
    /// so marks never touch the canvas edge.
    fn paint_where(
        &mut self,
        mask: &mut [bool],
        inside: impl Fn(f64, f64) -> Option<f64>,
        paint: impl Fn(f64, [f64; 3]) -> [f64; 3],
    ) {
        let s = self.size;
        for y in 1..s - 1 {
            for x in 1..s - 1 {
                if let Some(r) = inside(x as f64 + 0.5, y as f64 + 0.5) {
                    let i = y * s + x;
                    self.px[i] = paint(r, self.px[i]).map(|v| v.clamp(0.0, 1.0));
                    mask[i] = true;
                }
            }
        }
    }

    fn to_image(&self) -> RgbImage {
        let s = self.size as u32;
        RgbImage::from_fn(s, s, |x, y| {
            let p = self.px[(y * s + x) as usize];
            image::Rgb(p.map(|v| (v * 255.0).round() as u8))
        })
    }
}

/// Irregular star-shaped region: radius modulated by a few harmonics.
struct Blob {
    cx: f64,
    cy: f64,
    radius: f64,
    harmonics: [(f64, f64); 3],
}

impl Blob {
    fn random(rng: &mut ChaCha8Rng, spec: &ToyDefectSpec) -> Blob {
        let s = spec.image_size as f64;
        let radius = s * rng.random_range(spec.blob_radius.0..=spec.blob_radius.1);
        let margin = radius.min(s / 2.0 - 1.0);
        let cx = rng.random_range(margin..=s - margin);
        let cy = rng.random_range(margin..=s - margin);
        let harmonics = [2.0, 3.0, 5.0].map(|k| (rng.random_range(0.0..0.18) / k * 2.0, rng.random_range(0.0..std::f64::consts::TAU)));
        Blob { cx, cy, radius, harmonics }
    }

    /// Normalized radial position in [0, 1] when inside.
    fn radial(&self, x: f64, y: f64) -> Option<f64> {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let theta = dy.atan2(dx);
        let wobble: f64 = self
            .harmonics
            .iter()
            .enumerate()
            .map(|(i, (amp, phase))| amp * ((i as f64 + 2.0) * theta + phase).sin())
            .sum();
        let r = self.radius * (1.0 + wobble);
        let d = (dx * dx + dy * dy).sqrt();
        (d <= r).then(|| d / r)
    }
}

fn polyline(rng: &mut ChaCha8Rng, s: usize) -> Vec<(f64, f64)> {
    let sf = s as f64;
    let steps = 4;
    let (mut x, mut y) = (rng.random_range(0.15 * sf..0.85 * sf), rng.random_range(0.1 * sf..0.3 * sf));
    let heading: f64 = rng.random_range(0.3..2.8);
    let len = sf * 0.6 / steps as f64;
    let mut pts = vec![(x, y)];
    for _ in 0..steps {
        let h = heading + rng.random_range(-0.6..0.6);
        x = (x + len * h.cos()).clamp(1.0, sf - 1.0);
        y = (y + len * h.sin()).clamp(1.0, sf - 1.0);
        pts.push((x, y));
    }
    pts
}

fn segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 == 0.0 { 0.0 } else { (((p.0 - a.0) * vx + (p.1 - a.1) * vy) / len2).clamp(0.0, 1.0) };
    let (qx, qy) = (a.0 + t * vx - p.0, a.1 + t * vy - p.1);
    (qx * qx + qy * qy).sqrt()
}

/// Multi-octave value noise in roughly [-1, 1].
fn value_noise(rng: &mut ChaCha8Rng, s: usize, cells: usize, octaves: u32) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    let mut amp = 1.0;
    let mut total = 0.0;
    for o in 0..octaves {
        let n = cells << o;
        let lattice: Vec<f64> = (0..(n + 1) * (n + 1)).map(|_| rng.random_range(-1.0..1.0)).collect();
        for y in 0..s {
            for x in 0..s {
                let fx = (x as f64 + 0.5) / s as f64 * n as f64;
                let fy = (y as f64 + 0.5) / s as f64 * n as f64;
                let (ix, iy) = ((fx as usize).min(n - 1), (fy as usize).min(n - 1));
                let (tx, ty) = (smooth(fx - ix as f64), smooth(fy - iy as f64));
                let at = |i: usize, j: usize| lattice[j * (n + 1) + i];
                let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
                let bot = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
                out[y * s + x] += amp * (top * (1.0 - ty) + bot * ty);
            }
        }
        total += amp;
        amp *= 0.5;
    }
    out.iter_mut().for_each(|v| *v /= total);
    out
}

fn smooth(t: f64) -> f64 {
    t * t * (3.0 - 2.0 * t)
}
