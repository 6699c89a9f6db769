//! Image patches, label vectors, dataset manifests and the CSV index format.
//!
//! Index files are UTF-8 CSV with a header row: `relative_path,labels` and an
//! optional third `source` column (`real`, `synthetic` or `restored`; `real`
//! when absent). Labels are a `|`-separated subset of the six category names.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use defectgan_autograd::Tensor;
use image::imageops::FilterType;
use image::RgbImage;
use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

pub const NUM_CATEGORIES: usize = 6;

/// Channel index of the normal category.
pub const NORMAL: usize = 5;

pub const CATEGORY_NAMES: [&str; NUM_CATEGORIES] =
    ["crack", "spallation", "efflorescence", "exposed_bars", "corrosion", "normal"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Crack,
    Spallation,
    Efflorescence,
    ExposedBars,
    Corrosion,
    Normal,
}

impl Category {
    pub const ALL: [Category; NUM_CATEGORIES] = [
        Category::Crack,
        Category::Spallation,
        Category::Efflorescence,
        Category::ExposedBars,
        Category::Corrosion,
        Category::Normal,
    ];

    pub const DEFECTS: [Category; NUM_CATEGORIES - 1] = [
        Category::Crack,
        Category::Spallation,
        Category::Efflorescence,
        Category::ExposedBars,
        Category::Corrosion,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        CATEGORY_NAMES[self.index()]
    }

    pub fn from_index(i: usize) -> Option<Category> {
        Category::ALL.get(i).copied()
    }

    /// Case-insensitive; spaces, dashes and underscores are interchangeable
    /// (`"Exposed bars"` parses).
    pub fn parse(name: &str) -> Option<Category> {
        let key: String = name
            .trim()
            .chars()
            .map(|c| if c == ' ' || c == '-' { '_' } else { c.to_ascii_lowercase() })
            .collect();
        match key.as_str() {
            "crack" => Some(Category::Crack),
            "spallation" => Some(Category::Spallation),
            "efflorescence" => Some(Category::Efflorescence),
            "exposed_bars" | "exposedbars" => Some(Category::ExposedBars),
            "corrosion" | "corrosion_stain" => Some(Category::Corrosion),
            "normal" | "background" => Some(Category::Normal),
            _ => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Multi-hot category vector in the fixed category order.
///
/// Invariants: at least one bit set; the normal bit excludes every defect bit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabelVector([bool; NUM_CATEGORIES]);

impl LabelVector {
    pub fn new(bits: [bool; NUM_CATEGORIES]) -> Result<Self> {
        if !bits.iter().any(|&b| b) {
            return Err(Error::Invalid("label vector has no category set".into()));
        }
        if bits[NORMAL] && bits[..NORMAL].iter().any(|&b| b) {
            return Err(Error::Invalid("label combines normal with a defect category".into()));
        }
        Ok(LabelVector(bits))
    }

    pub fn from_categories(cats: &[Category]) -> Result<Self> {
        let mut bits = [false; NUM_CATEGORIES];
        for c in cats {
            bits[c.index()] = true;
        }
        LabelVector::new(bits)
    }

    pub fn one_hot(cat: Category) -> Self {
        let mut bits = [false; NUM_CATEGORIES];
        bits[cat.index()] = true;
        LabelVector(bits)
    }

    pub fn normal() -> Self {
        LabelVector::one_hot(Category::Normal)
    }

    pub fn is_normal(&self) -> bool {
        self.0[NORMAL]
    }

    pub fn bits(&self) -> [bool; NUM_CATEGORIES] {
        self.0
    }

    pub fn contains(&self, cat: Category) -> bool {
        self.0[cat.index()]
    }

    pub fn to_f64(&self) -> [f64; NUM_CATEGORIES] {
        self.0.map(|b| if b { 1.0 } else { 0.0 })
    }

    pub fn categories(&self) -> Vec<Category> {
        Category::ALL.iter().copied().filter(|c| self.contains(*c)).collect()
    }

    /// Parses `"crack|corrosion"`; commas are accepted as separators too.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cats = Vec::new();
        for part in text.split(['|', ',', ';']).map(str::trim).filter(|s| !s.is_empty()) {
            let cat = Category::parse(part)
                .ok_or_else(|| Error::Invalid(format!("unknown category '{part}'")))?;
            cats.push(cat);
        }
        LabelVector::from_categories(&cats)
    }

    /// `[N, C]` tensor of 0/1 targets.
    pub fn batch_tensor(labels: &[LabelVector]) -> Tensor {
        let data = labels.iter().flat_map(|l| l.to_f64()).collect();
        Tensor::new(&[labels.len(), NUM_CATEGORIES], data)
    }
}

impl fmt::Display for LabelVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = self.categories().iter().map(|c| c.name()).collect();
        f.write_str(&names.join("|"))
    }
}

/// Maps an 8-bit intensity onto [-1, 1].
pub fn normalize(v: u8) -> f64 {
    v as f64 / 127.5 - 1.0
}

/// Inverse of [`normalize`] with rounding and saturation.
pub fn denormalize(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// An RGB image with values in [-1, 1], stored channel-major (CHW).
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePatch {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ImagePatch {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(Error::Shape(format!(
                "patch {height}x{width} needs {} values, got {}",
                3 * height * width,
                data.len()
            )));
        }
        let patch = ImagePatch { height, width, data };
        patch.validate()?;
        Ok(patch)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        ImagePatch { height, width, data: vec![value; 3 * height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(v) = self.data.iter().find(|v| !v.is_finite() || v.abs() > 1.0) {
            return Err(Error::Invalid(format!("pixel value {v} outside [-1, 1]")));
        }
        Ok(())
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut data = vec![0.0; 3 * h * w];
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[(c * h + y as usize) * w + x as usize] = normalize(px[c]);
            }
        }
        ImagePatch { height: h, width: w, data }
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            image::Rgb([0, 1, 2].map(|c| denormalize(self.get(y as usize, x as usize, c))))
        })
    }

    /// `[1, 3, H, W]` tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, 3, self.height, self.width], self.data.clone())
    }

    /// Reads batch item `index` of an `[N, 3, H, W]` tensor, clamping to [-1, 1].
    pub fn from_tensor(t: &Tensor, index: usize) -> Result<Self> {
        let s = t.shape();
        if s.len() != 4 || s[1] != 3 || index >= s[0] {
            return Err(Error::Shape(format!("cannot read patch {index} from tensor {s:?}")));
        }
        let per = 3 * s[2] * s[3];
        let data = t.data()[index * per..(index + 1) * per]
            .iter()
            .map(|v| v.clamp(-1.0, 1.0))
            .collect();
        ImagePatch::new(s[2], s[3], data)
    }

    pub fn batch_tensor(patches: &[ImagePatch]) -> Tensor {
        let t: Vec<Tensor> = patches.iter().map(ImagePatch::to_tensor).collect();
        Tensor::stack_batch(&t)
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> ImagePatch {
        let mut data = Vec::with_capacity(3 * size * size);
        for c in 0..3 {
            for y in y0..y0 + size {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + size]);
            }
        }
        ImagePatch { height: size, width: size, data }
    }

    /// Decodes a PNG/JPEG file, resizing to `size`×`size` when given.
    pub fn load(path: &Path, size: Option<u32>) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::image(path, e))?.to_rgb8();
        let img = match size {
            Some(s) if img.width() != s || img.height() != s => {
                image::imageops::resize(&img, s, s, FilterType::Triangle)
            }
            _ => img,
        };
        let patch = ImagePatch::from_rgb8(&img);
        patch.validate()?;
        Ok(patch)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        self.to_rgb8().save(path).map_err(|e| Error::image(path, e))
    }
}

/// Draws `count` square crops with origins uniform over valid positions.
pub fn crop_normal_patches(
    full: &ImagePatch,
    image_name: &str,
    patch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<ImagePatch>> {
    if full.height < patch_size || full.width < patch_size || patch_size == 0 {
        return Err(Error::Invalid(format!(
            "image '{image_name}' is {}x{}, smaller than patch size {patch_size}",
            full.height, full.width
        )));
    }
    let mut rng = seed::rng(seed, &[]);
    Ok((0..count)
        .map(|_| {
            let y = rng.random_range(0..=full.height - patch_size);
            let x = rng.random_range(0..=full.width - patch_size);
            full.crop(y, x, patch_size)
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    Real,
    Synthetic,
    Restored,
}

impl Source {
    pub fn name(self) -> &'static str {
        match self {
            Source::Real => "real",
            Source::Synthetic => "synthetic",
            Source::Restored => "restored",
        }
    }

    pub fn parse(s: &str) -> Option<Source> {
        match s.trim().to_ascii_lowercase().as_str() {
            "real" | "" => Some(Source::Real),
            "synthetic" => Some(Source::Synthetic),
            "restored" => Some(Source::Restored),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleRecord {
    /// Path relative to the manifest root.
    pub path: PathBuf,
    pub label: LabelVector,
    pub source: Source,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// A row that could not be turned into a record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RowWarning {
    /// 1-based line number in the index file, header included.
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub split: Split,
    pub categories: Vec<String>,
    pub records: Vec<SampleRecord>,
}

pub const INDEX_FILE: &str = "index.csv";

impl DatasetManifest {
    pub fn new(root: impl Into<PathBuf>, split: Split, records: Vec<SampleRecord>) -> Self {
        DatasetManifest {
            root: root.into(),
            split,
            categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
            records,
        }
    }

    /// Index file for a split: `<split>.csv` when present, else `index.csv`.
    pub fn index_path(root: &Path, split: Split) -> PathBuf {
        let per_split = root.join(format!("{}.csv", split.name()));
        if per_split.is_file() {
            per_split
        } else {
            root.join(INDEX_FILE)
        }
    }

    /// Loads the index for `split` under `root`. Malformed rows and rows whose
    /// image is missing are skipped and returned as warnings.
    pub fn load(root: &Path, split: Split) -> Result<(DatasetManifest, Vec<RowWarning>)> {
        if !root.is_dir() {
            return Err(Error::io(
                root,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset root not found"),
            ));
        }
        let index = DatasetManifest::index_path(root, split);
        let mut reader = csv::ReaderBuilder::new()
            .flexible(true)
            .has_headers(true)
            .from_path(&index)
            .map_err(|source| Error::Csv { path: index.clone(), source })?;
        let has_source = reader
            .headers()
            .map(|h| h.iter().any(|f| f.trim() == "source"))
            .unwrap_or(false);

        let mut records = Vec::new();
        let mut warnings = Vec::new();
        for (i, row) in reader.records().enumerate() {
            let line = i + 2;
            let parsed = row
                .map_err(|e| e.to_string())
                .and_then(|row| parse_row(root, &row, has_source));
            match parsed {
                Ok(r) => records.push(r),
                Err(reason) => warnings.push(RowWarning { line, reason }),
            }
        }
        if !warnings.is_empty() {
            warn!(
                "{}: skipped {} malformed row(s), first at line {}: {}",
                index.display(),
                warnings.len(),
                warnings[0].line,
                warnings[0].reason
            );
        }
        Ok((DatasetManifest::new(root, split, records), warnings))
    }

    pub fn write_index(&self, path: &Path) -> Result<()> {
        write_index(path, &self.records)
    }

    pub fn image_path(&self, record: &SampleRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn count_source(&self, source: Source) -> usize {
        self.records.iter().filter(|r| r.source == source).count()
    }

    /// Loads every record's image at `size`×`size`.
    pub fn load_images(&self, size: u32) -> Result<Vec<ImagePatch>> {
        use rayon::prelude::*;
        self.records
            .par_iter()
            .map(|r| ImagePatch::load(&self.image_path(r), Some(size)))
            .collect()
    }
}

fn parse_row(
    root: &Path,
    row: &csv::StringRecord,
    has_source: bool,
) -> std::result::Result<SampleRecord, String> {
    let fields: Vec<&str> = row.iter().collect();
    if fields.len() < 2 || fields[0].trim().is_empty() {
        return Err(format!("expected `path,labels`, got {} field(s)", fields.len()));
    }
    let (label_fields, source) = if has_source && fields.len() >= 3 {
        let last = fields[fields.len() - 1];
        let source = Source::parse(last).ok_or_else(|| format!("unknown source '{last}'"))?;
        (&fields[1..fields.len() - 1], source)
    } else {
        (&fields[1..], Source::Real)
    };
    let label = LabelVector::parse(&label_fields.join("|")).map_err(|e| e.to_string())?;
    let path = PathBuf::from(fields[0].trim());
    if !root.join(&path).is_file() {
        return Err(format!("image '{}' does not exist", path.display()));
    }
    Ok(SampleRecord { path, label, source })
}

/// Writes `relative_path,labels,source`.
pub fn write_index(path: &Path, records: &[SampleRecord]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let csv_err = |source| Error::Csv { path: path.to_path_buf(), source };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(["relative_path", "labels", "source"]).map_err(csv_err)?;
    for r in records {
        let p = r.path.to_string_lossy().replace('\\', "/");
        w.write_record([p.as_str(), &r.label.to_string(), r.source.name()])
            .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_from_comma_string() {
        let l = LabelVector::parse("crack,corrosion").unwrap();
        assert_eq!(l.to_f64(), [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(l.to_string(), "crack|corrosion");
    }

    #[test]
    fn label_invariants() {
        assert!(LabelVector::new([false; 6]).is_err());
        assert!(LabelVector::parse("normal|crack").is_err());
        assert!(LabelVector::parse("rust").is_err());
        assert!(LabelVector::parse("Exposed bars").unwrap().contains(Category::ExposedBars));
    }

    #[test]
    fn normalize_endpoints() {
        assert_eq!(normalize(0), -1.0);
        assert_eq!(normalize(255), 1.0);
        assert_eq!(127.5 / 127.5 - 1.0, 0.0);
    }

    #[test]
    fn normalize_roundtrip_exhaustive() {
        let worst = (0..=255u8)
            .map(|v| (denormalize(normalize(v)) as f64 - v as f64).abs() / 255.0)
            .fold(0.0, f64::max);
        assert!(worst <= 1.0 / 255.0);
        assert_eq!(worst, 0.0);
    }

    #[test]
    fn crop_shapes_and_determinism() {
        let full = ImagePatch::new(256, 256, (0..3 * 256 * 256).map(|i| ((i % 97) as f64 / 48.5) - 1.0).collect()).unwrap();
        let a = crop_normal_patches(&full, "full.png", 128, 4, 7).unwrap();
        assert_eq!(a.len(), 4);
        assert!(a.iter().all(|p| p.height() == 128 && p.width() == 128));
        let b = crop_normal_patches(&full, "full.png", 128, 4, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn crop_too_small_names_image() {
        let small = ImagePatch::filled(100, 100, 0.0);
        let err = crop_normal_patches(&small, "tiny.jpg", 128, 1, 0).unwrap_err();
        assert!(err.to_string().contains("tiny.jpg"));
    }

    #[test]
    fn patch_rejects_out_of_range() {
        assert!(ImagePatch::new(1, 1, vec![0.0, 1.5, 0.0]).is_err());
        assert!(ImagePatch::new(1, 1, vec![0.0, f64::NAN, 0.0]).is_err());
        assert!(ImagePatch::new(1, 2, vec![0.0; 3]).is_err());
    }
}
