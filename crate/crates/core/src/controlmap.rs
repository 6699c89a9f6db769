//! Attribute control maps: per-pixel, per-category conditioning in [0, 1].
//!
//! Archive format: a zip holding `manifest.json` and one 16-bit grayscale PNG
//! per category channel (`channel_<k>.png`, value = round(v · 65535)).

use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use defectgan_autograd::Tensor;
use image::{ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datamodel::{Category, LabelVector, CATEGORY_NAMES, NUM_CATEGORIES};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlMode {
    Uniform,
    Spatial,
}

/// Channel-major `C×H×W` conditioning values.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributeControlMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    mode: ControlMode,
}

/// Half-open pixel box: columns `x0..x1`, rows `y0..y1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxRegion {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BoxRegion {
    pub fn full(height: usize, width: usize) -> Self {
        BoxRegion { x0: 0, y0: 0, x1: width, y1: height }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RegionShape {
    Box(BoxRegion),
    /// Row-major `H×W` binary mask.
    Mask(Vec<bool>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlRegion {
    pub category: usize,
    pub shape: RegionShape,
    pub intensity: f64,
}

impl ControlRegion {
    pub fn boxed(category: Category, b: BoxRegion) -> Self {
        ControlRegion { category: category.index(), shape: RegionShape::Box(b), intensity: 1.0 }
    }

    /// Parses `crack:10,10,40,40`.
    pub fn parse_box(text: &str) -> Result<Self> {
        let (name, coords) = text
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("box '{text}' is not category:x0,y0,x1,y1")))?;
        let cat = Category::parse(name)
            .ok_or_else(|| Error::Invalid(format!("unknown category '{name}' in box '{text}'")))?;
        let nums: Vec<usize> = coords
            .split(',')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Invalid(format!("box '{text}': {e}")))?;
        match nums[..] {
            [x0, y0, x1, y1] => Ok(ControlRegion::boxed(cat, BoxRegion { x0, y0, x1, y1 })),
            _ => Err(Error::Invalid(format!("box '{text}' needs four coordinates"))),
        }
    }

    fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.category >= NUM_CATEGORIES {
            return Err(Error::Invalid(format!("category index {} out of range", self.category)));
        }
        if !(self.intensity > 0.0 && self.intensity <= 1.0) {
            return Err(Error::Invalid(format!("intensity {} outside (0, 1]", self.intensity)));
        }
        match &self.shape {
            RegionShape::Box(b) => {
                if b.x0 >= b.x1 || b.y0 >= b.y1 || b.x1 > width || b.y1 > height {
                    return Err(Error::Invalid(format!(
                        "box ({},{},{},{}) is empty or outside the {width}x{height} image",
                        b.x0, b.y0, b.x1, b.y1
                    )));
                }
            }
            RegionShape::Mask(m) => {
                if m.len() != height * width {
                    return Err(Error::Shape(format!(
                        "region mask has {} pixels, image has {}",
                        m.len(),
                        height * width
                    )));
                }
            }
        }
        Ok(())
    }

    fn covers(&self, x: usize, y: usize, width: usize) -> bool {
        match &self.shape {
            RegionShape::Box(b) => b.contains(x, y),
            RegionShape::Mask(m) => m[y * width + x],
        }
    }
}

impl AttributeControlMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>, mode: ControlMode) -> Result<Self> {
        if values.len() != NUM_CATEGORIES * height * width {
            return Err(Error::Shape(format!(
                "control map {height}x{width}x{NUM_CATEGORIES} needs {} values, got {}",
                NUM_CATEGORIES * height * width,
                values.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Invalid(format!("control value {v} outside [0, 1]")));
        }
        let map = AttributeControlMap { height, width, values, mode };
        if mode == ControlMode::Uniform && !map.is_spatially_constant() {
            return Err(Error::Invalid("uniform control map varies across pixels".into()));
        }
        Ok(map)
    }

    /// Every pixel carries the label vector.
    pub fn repeat_label(label: &LabelVector, height: usize, width: usize) -> Self {
        let per = height * width;
        let values = label.to_f64().iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect();
        AttributeControlMap { height, width, values, mode: ControlMode::Uniform }
    }

    /// The map used for the restoration direction.
    pub fn restoration(height: usize, width: usize) -> Self {
        AttributeControlMap::repeat_label(&LabelVector::normal(), height, width)
    }

    /// Each channel holds its regions' intensity (max over overlaps), zero elsewhere.
    /// All regions are validated before anything is painted.
    pub fn paint_regions(regions: &[ControlRegion], height: usize, width: usize) -> Result<Self> {
        for r in regions {
            r.validate(height, width)?;
        }
        let per = height * width;
        let mut values = vec![0.0f64; NUM_CATEGORIES * per];
        for r in regions {
            let plane = &mut values[r.category * per..(r.category + 1) * per];
            for y in 0..height {
                for x in 0..width {
                    if r.covers(x, y, width) {
                        let v = &mut plane[y * width + x];
                        *v = v.max(r.intensity);
                    }
                }
            }
        }
        Ok(AttributeControlMap { height, width, values, mode: ControlMode::Spatial })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn mode(&self) -> ControlMode {
        self.mode
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let per = self.height * self.width;
        &self.values[c * per..(c + 1) * per]
    }

    pub fn is_spatially_constant(&self) -> bool {
        self.max_spatial_variance() == 0.0
    }

    /// Largest per-channel population variance over pixels.
    pub fn max_spatial_variance(&self) -> f64 {
        (0..NUM_CATEGORIES)
            .map(|c| {
                let ch = self.channel(c);
                let mean = ch.iter().sum::<f64>() / ch.len() as f64;
                ch.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / ch.len() as f64
            })
            .fold(0.0, f64::max)
    }

    /// Label implied by the channels that are nonzero anywhere.
    pub fn implied_label(&self) -> Result<LabelVector> {
        let bits = std::array::from_fn(|c| self.channel(c).iter().any(|&v| v > 0.0));
        LabelVector::new(bits)
    }

    /// `[1, C, H, W]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, NUM_CATEGORIES, self.height, self.width], self.values.clone())
    }

    pub fn batch_tensor(maps: &[AttributeControlMap]) -> Tensor {
        let t: Vec<Tensor> = maps.iter().map(AttributeControlMap::to_tensor).collect();
        Tensor::stack_batch(&t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut channels = Vec::with_capacity(NUM_CATEGORIES);
        let mut pngs = Vec::with_capacity(NUM_CATEGORIES);
        for c in 0..NUM_CATEGORIES {
            let data: Vec<u16> =
                self.channel(c).iter().map(|v| (v * 65535.0).round() as u16).collect();
            let img: ImageBuffer<Luma<u16>, Vec<u16>> =
                ImageBuffer::from_raw(self.width as u32, self.height as u32, data)
                    .expect("channel buffer size matches dimensions");
            let mut png = Vec::new();
            img.write_to(&mut Cursor::new(&mut png), ImageFormat::Png)
                .map_err(|e| Error::image("<control map>", e))?;
            let file = format!("channel_{c}.png");
            channels.push(ChannelEntry {
                name: CATEGORY_NAMES[c].to_string(),
                file: file.clone(),
                sha256: hex::encode(Sha256::digest(&png)),
            });
            pngs.push((file, png));
        }
        let manifest = ArchiveManifest {
            format_version: ARCHIVE_VERSION,
            height: self.height,
            width: self.width,
            categories: CATEGORY_NAMES.iter().map(|s| s.to_string()).collect(),
            mode: self.mode,
            channels,
        };
        let zip_err = |source| Error::Zip { path: "<control map>".into(), source };
        let mut zip = zip::ZipWriter::new(Cursor::new(Vec::new()));
        let opts = zip::write::SimpleFileOptions::default()
            .compression_method(zip::CompressionMethod::Deflated);
        zip.start_file("manifest.json", opts).map_err(zip_err)?;
        let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        zip.write_all(&json).map_err(|e| Error::io("<control map>", e))?;
        for (file, png) in pngs {
            zip.start_file(file, opts).map_err(zip_err)?;
            zip.write_all(&png).map_err(|e| Error::io("<control map>", e))?;
        }
        Ok(zip.finish().map_err(zip_err)?.into_inner())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut zip = zip::ZipArchive::new(Cursor::new(bytes)).map_err(|e| {
            Error::Shape(format!("control-map archive is truncated or unreadable ({e})"))
        })?;
        let manifest: ArchiveManifest = {
            let raw = read_entry(&mut zip, "manifest.json")?;
            serde_json::from_slice(&raw)
                .map_err(|e| Error::Invalid(format!("control-map manifest: {e}")))?
        };
        if manifest.categories.len() != NUM_CATEGORIES
            || manifest.channels.len() != NUM_CATEGORIES
        {
            return Err(Error::Shape(format!(
                "control map lists {} categories and {} channels, expected {NUM_CATEGORIES}",
                manifest.categories.len(),
                manifest.channels.len()
            )));
        }
        let (h, w) = (manifest.height, manifest.width);
        let mut values = Vec::with_capacity(NUM_CATEGORIES * h * w);
        for entry in &manifest.channels {
            let png = read_entry(&mut zip, &entry.file)?;
            let digest = hex::encode(Sha256::digest(&png));
            if digest != entry.sha256 {
                return Err(Error::Checksum(format!("channel '{}' digest differs", entry.name)));
            }
            let img = image::load_from_memory_with_format(&png, ImageFormat::Png)
                .map_err(|e| Error::Shape(format!("channel '{}' undecodable: {e}", entry.name)))?
                .into_luma16();
            if img.width() as usize != w || img.height() as usize != h {
                return Err(Error::Shape(format!(
                    "channel '{}' is {}x{}, manifest says {w}x{h}",
                    entry.name,
                    img.width(),
                    img.height()
                )));
            }
            values.extend(img.into_raw().into_iter().map(|v| v as f64 / 65535.0));
        }
        AttributeControlMap::new(h, w, values, manifest.mode)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        AttributeControlMap::from_bytes(&bytes)
    }
}

const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ArchiveManifest {
    format_version: u32,
    height: usize,
    width: usize,
    categories: Vec<String>,
    mode: ControlMode,
    channels: Vec<ChannelEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ChannelEntry {
    name: String,
    file: String,
    sha256: String,
}

fn read_entry(zip: &mut zip::ZipArchive<Cursor<&[u8]>>, name: &str) -> Result<Vec<u8>> {
    let mut f = zip
        .by_name(name)
        .map_err(|e| Error::Shape(format!("control-map entry '{name}' missing ({e})")))?;
    let mut buf = Vec::new();
    f.read_to_end(&mut buf)
        .map_err(|e| Error::Shape(format!("control-map entry '{name}' truncated ({e})")))?;
    Ok(buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn repeat_label_fills_every_pixel() {
        let c = LabelVector::one_hot(Category::Spallation);
        let a = AttributeControlMap::repeat_label(&c, 4, 4);
        for y in 0..4 {
            for x in 0..4 {
                let px: Vec<f64> = (0..6).map(|k| a.get(y, x, k)).collect();
                assert_eq!(px, c.to_f64());
            }
        }
        assert_eq!(a.mode(), ControlMode::Uniform);
        let one = AttributeControlMap::repeat_label(&c, 1, 1);
        assert_eq!(one.values(), &c.to_f64());
    }

    #[test]
    fn restoration_is_normal_repeat() {
        let r = AttributeControlMap::restoration(128, 128);
        assert_eq!(r, AttributeControlMap::repeat_label(&LabelVector::normal(), 128, 128));
        assert!(r.channel(5).iter().all(|&v| v == 1.0));
        assert_eq!(r.values()[..5 * 128 * 128].iter().sum::<f64>(), 0.0);
    }

    #[test]
    fn full_box_equals_repeat() {
        let k = Category::Efflorescence;
        let painted = AttributeControlMap::paint_regions(
            &[ControlRegion::boxed(k, BoxRegion::full(8, 6))],
            8,
            6,
        )
        .unwrap();
        assert_eq!(painted.values(), AttributeControlMap::repeat_label(&LabelVector::one_hot(k), 8, 6).values());
    }

    #[test]
    fn disjoint_and_overlapping_boxes() {
        let b1 = BoxRegion { x0: 0, y0: 0, x1: 3, y1: 3 };
        let b2 = BoxRegion { x0: 5, y0: 5, x1: 8, y1: 8 };
        let a = AttributeControlMap::paint_regions(
            &[ControlRegion::boxed(Category::Crack, b1), ControlRegion::boxed(Category::Corrosion, b2)],
            8,
            8,
        )
        .unwrap();
        for y in 0..8 {
            for x in 0..8 {
                assert_eq!(a.get(y, x, 0) > 0.0, b1.contains(x, y));
                assert_eq!(a.get(y, x, 4) > 0.0, b2.contains(x, y));
            }
        }
        let lo = ControlRegion { intensity: 0.4, ..ControlRegion::boxed(Category::Crack, BoxRegion { x0: 0, y0: 0, x1: 5, y1: 5 }) };
        let hi = ControlRegion { intensity: 0.9, ..ControlRegion::boxed(Category::Crack, BoxRegion { x0: 3, y0: 3, x1: 8, y1: 8 }) };
        let a = AttributeControlMap::paint_regions(&[lo, hi], 8, 8).unwrap();
        assert_eq!(a.get(4, 4, 0), 0.9);
        assert_eq!(a.get(0, 0, 0), 0.4);
    }

    #[test]
    fn out_of_bounds_box_rejected() {
        let r = ControlRegion::boxed(Category::Crack, BoxRegion { x0: 0, y0: 0, x1: 9, y1: 4 });
        assert!(AttributeControlMap::paint_regions(&[r], 8, 8).is_err());
    }

    #[test]
    fn parse_box_flag() {
        let r = ControlRegion::parse_box("crack:10,10,40,40").unwrap();
        assert_eq!(r.category, 0);
        assert_eq!(r.shape, RegionShape::Box(BoxRegion { x0: 10, y0: 10, x1: 40, y1: 40 }));
        assert!(ControlRegion::parse_box("crack:1,2,3").is_err());
        assert!(ControlRegion::parse_box("mold:1,2,3,4").is_err());
    }

    #[test]
    fn archive_roundtrip_and_mode() {
        let a = AttributeControlMap::repeat_label(&LabelVector::one_hot(Category::Crack), 5, 7);
        let b = AttributeControlMap::from_bytes(&a.to_bytes().unwrap()).unwrap();
        assert_eq!(b.mode(), ControlMode::Uniform);
        assert_eq!(a, b);
    }

    #[test]
    fn truncated_archive_is_shape_error() {
        let a = AttributeControlMap::restoration(4, 4);
        let bytes = a.to_bytes().unwrap();
        let err = AttributeControlMap::from_bytes(&bytes[..bytes.len() / 2]).unwrap_err();
        assert!(matches!(err, Error::Shape(_)), "{err}");
    }
}
