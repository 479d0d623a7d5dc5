//! Dataset types and IO: images, binary ground-truth masks, the CSV
//! manifest, and a synthetic generator whose masks are exact by
//! construction.
//!
//! On disk a dataset is a directory holding `manifest.csv` (header
//! `id,image_path,mask_path,label,split`, paths relative to the manifest),
//! a `classes.txt` sidecar naming the classes, and the referenced 8-bit
//! PNGs (RGB images; grayscale masks with foreground 255).

mod shapes;
mod synth;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use shapes::SHAPE_FAMILIES;
pub use synth::{generate_synthetic_dataset, SynthConfig};

/// An RGB image with values in `[0,1]`, stored channels-first (`[3,H,W]`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    data: Tensor<f32>,
}

impl Image {
    /// Wraps a `[3,H,W]` tensor, enforcing the `[0,1]` pixel-range
    /// invariant.
    pub fn from_chw(data: Tensor<f32>) -> Result<Self> {
        let shape = data.shape();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(
                "image",
                format!("expected [3,H,W], got {shape:?}"),
            ));
        }
        if !data
            .data()
            .iter()
            .all(|v| v.is_finite() && (0.0..=1.0).contains(v))
        {
            return Err(Error::shape("image", "pixel values must lie in [0,1]".into()));
        }
        Ok(Self { data })
    }

    /// Reinterprets a single-image batch `[1,3,H,W]` as an image.
    pub fn from_batch(batch: &Tensor<f32>) -> Result<Self> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[0] != 1 {
            return Err(Error::shape(
                "image",
                format!("expected [1,3,H,W], got {shape:?}"),
            ));
        }
        Self::from_chw(batch.reshaped(shape[1..].to_vec())?)
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// The underlying `[3,H,W]` tensor.
    pub fn tensor(&self) -> &Tensor<f32> {
        &self.data
    }

    /// A `[1,3,H,W]` copy for model input.
    pub fn to_batch(&self) -> Tensor<f32> {
        self.data
            .reshaped(vec![1, 3, self.height(), self.width()])
            .expect("batch reshape preserves length")
    }

    pub fn get(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data.data()[(channel * self.height() + y) * self.width() + x]
    }

    /// Mean value per channel, the fill color LIME uses for dropped
    /// segments.
    pub fn mean_color(&self) -> [f32; 3] {
        let plane = self.height() * self.width();
        let mut means = [0.0f32; 3];
        for (c, mean) in means.iter_mut().enumerate() {
            let sum: f64 = self.data.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| v as f64)
                .sum();
            *mean = (sum / plane as f64) as f32;
        }
        means
    }

    /// Interleaved 8-bit RGB rows, quantized as `round(v * 255)`.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let (h, w) = (self.height(), self.width());
        let plane = h * w;
        let data = self.data.data();
        let mut out = Vec::with_capacity(plane * 3);
        for i in 0..plane {
            for c in 0..3 {
                out.push((data[c * plane + i] * 255.0).round() as u8);
            }
        }
        out
    }

    /// Builds an image from interleaved 8-bit RGB rows via `v / 255`.
    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != height * width * 3 {
            return Err(Error::shape(
                "image",
                format!(
                    "{}x{width} RGB needs {} bytes, got {}",
                    height,
                    height * width * 3,
                    bytes.len()
                ),
            ));
        }
        let plane = height * width;
        let mut data = vec![0.0f32; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[c * plane + i] = bytes[i * 3 + c] as f32 / 255.0;
            }
        }
        Self::from_chw(Tensor::new(vec![3, height, width], data)?)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let buf = image::RgbImage::from_raw(self.width() as u32, self.height() as u32, self.to_rgb8())
            .expect("buffer length matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .to_rgb8();
        Self::from_rgb8(img.height() as usize, img.width() as usize, img.as_raw())
    }
}

/// Binary per-pixel ground truth for explanations: true marks the region
/// responsible for the label. Never empty, never full-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthMask {
    height: usize,
    width: usize,
    values: Vec<bool>,
}

impl GroundTruthMask {
    pub fn new(height: usize, width: usize, values: Vec<bool>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::shape(
                "mask",
                format!("{height}x{width} mask needs {} values, got {}", height * width, values.len()),
            ));
        }
        let fg = values.iter().filter(|&&v| v).count();
        if fg == 0 || fg == values.len() {
            return Err(Error::shape(
                "mask",
                format!("foreground covers {fg}/{} pixels; must be neither empty nor full-frame", values.len()),
            ));
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[bool] {
        &self.values
    }

    pub fn foreground_fraction(&self) -> f64 {
        self.values.iter().filter(|&&v| v).count() as f64 / self.values.len() as f64
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes: Vec<u8> = self.values.iter().map(|&v| if v { 255 } else { 0 }).collect();
        let buf = image::GrayImage::from_raw(self.width as u32, self.height as u32, bytes)
            .expect("buffer length matches dimensions");
        buf.save(path)?;
        Ok(())
    }

    /// Loads a grayscale PNG, thresholding `value >= 128` to foreground.
    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .to_luma8();
        let values = img.as_raw().iter().map(|&v| v >= 128).collect();
        Self::new(img.height() as usize, img.width() as usize, values)
    }
}

/// One dataset row: an image, its exact ground-truth mask, and the label.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub mask: GroundTruthMask,
    pub label: usize,
}

impl Sample {
    pub fn new(id: String, image: Image, mask: GroundTruthMask, label: usize) -> Result<Self> {
        if image.height() != mask.height() || image.width() != mask.width() {
            return Err(Error::Dataset {
                id,
                detail: format!(
                    "image is {}x{} but mask is {}x{}",
                    image.height(),
                    image.width(),
                    mask.height(),
                    mask.width()
                ),
            });
        }
        Ok(Self {
            id,
            image,
            mask,
            label,
        })
    }
}

/// Train/test split tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split tag '{other}' (expected 'train' or 'test')"
            ))),
        }
    }
}

/// One manifest row; paths are relative to the manifest's directory.
#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub id: String,
    pub image_path: String,
    pub mask_path: String,
    pub label: usize,
    pub split: Split,
}

const MANIFEST_HEADER: [&str; 5] = ["id", "image_path", "mask_path", "label", "split"];

/// The dataset index: entries in stable order plus class names.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    root: PathBuf,
    pub entries: Vec<ManifestEntry>,
    pub class_names: Vec<String>,
}

impl DatasetManifest {
    /// Number of classes; labels are validated dense in `[0, K)`.
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The directory that entry paths are relative to.
    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Entries carrying `tag`, in manifest order.
    pub fn split(&self, tag: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == tag).collect()
    }

    /// Reads and validates one entry's image and mask.
    pub fn load_sample(&self, entry: &ManifestEntry) -> Result<Sample> {
        let with_id = |e: Error| Error::Dataset {
            id: entry.id.clone(),
            detail: e.to_string(),
        };
        let image = Image::load_png(&self.root.join(&entry.image_path)).map_err(with_id)?;
        let mask = GroundTruthMask::load_png(&self.root.join(&entry.mask_path)).map_err(with_id)?;
        Sample::new(entry.id.clone(), image, mask, entry.label)
    }

    /// Loads every entry of a split, in manifest order.
    pub fn load_split(&self, tag: Split) -> Result<Vec<Sample>> {
        self.split(tag).into_iter().map(|e| self.load_sample(e)).collect()
    }

    /// Writes `manifest.csv` and `classes.txt` into the manifest root.
    pub fn save(&self) -> Result<()> {
        let path = self.root.join("manifest.csv");
        let mut w = csv::Writer::from_path(&path).map_err(Error::Csv)?;
        w.write_record(MANIFEST_HEADER)?;
        for e in &self.entries {
            w.write_record([
                e.id.as_str(),
                e.image_path.as_str(),
                e.mask_path.as_str(),
                &e.label.to_string(),
                &e.split.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;

        let classes = self.class_names.join("\n") + "\n";
        std::fs::write(self.root.join("classes.txt"), classes)
            .map_err(|e| Error::io(&self.root.join("classes.txt"), e))?;
        Ok(())
    }

    /// Reads a manifest, validating the header, the split tags, and that
    /// labels are dense in `[0, K)`.
    pub fn load(path: &Path) -> Result<Self> {
        let root = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        let mut reader = csv::Reader::from_path(path).map_err(Error::Csv)?;
        let header = reader.headers()?.clone();
        if header.iter().ne(MANIFEST_HEADER) {
            return Err(Error::Config(format!(
                "manifest header must be {:?}, found {:?}",
                MANIFEST_HEADER.join(","),
                header.iter().collect::<Vec<_>>().join(",")
            )));
        }
        let mut entries = Vec::new();
        for record in reader.records() {
            let record = record?;
            let field = |i: usize| record.get(i).unwrap_or_default().to_string();
            let id = field(0);
            let label: usize = field(3).parse().map_err(|_| Error::Dataset {
                id: id.clone(),
                detail: format!("label '{}' is not a non-negative integer", field(3)),
            })?;
            let split: Split = field(4).parse().map_err(|e: Error| Error::Dataset {
                id: id.clone(),
                detail: e.to_string(),
            })?;
            entries.push(ManifestEntry {
                id,
                image_path: field(1),
                mask_path: field(2),
                label,
                split,
            });
        }
        if entries.is_empty() {
            return Err(Error::Config("manifest has no entries".into()));
        }

        let num_classes = entries.iter().map(|e| e.label).max().unwrap_or(0) + 1;
        for k in 0..num_classes {
            if !entries.iter().any(|e| e.label == k) {
                return Err(Error::Config(format!(
                    "labels are not dense: class {k} has no samples (max label {})",
                    num_classes - 1
                )));
            }
        }

        let class_names = match std::fs::read_to_string(root.join("classes.txt")) {
            Ok(text) => {
                let names: Vec<String> = text.lines().map(str::to_string).collect();
                if names.len() != num_classes {
                    return Err(Error::Config(format!(
                        "classes.txt names {} classes but labels span {num_classes}",
                        names.len()
                    )));
                }
                names
            }
            Err(_) => (0..num_classes).map(|k| format!("class_{k}")).collect(),
        };

        Ok(Self {
            root,
            entries,
            class_names,
        })
    }

    pub(crate) fn with_root(
        root: PathBuf,
        entries: Vec<ManifestEntry>,
        class_names: Vec<String>,
    ) -> Self {
        Self {
            root,
            entries,
            class_names,
        }
    }
}
