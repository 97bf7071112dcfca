//! Image pairs, dataset splits and model-input preparation.

mod cvusa;
mod persist;
mod polar;
mod synthetic;

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use image::imageops::FilterType;
use image::{ImageBuffer, Rgb};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub use cvusa::load_cvusa_style;
pub use persist::{load_dataset, save_dataset, ManifestEntry, MANIFEST_FILE};
pub use polar::{polar_transform, polar_transform_f64, PolarMap};
pub use synthetic::{generate_synthetic, SyntheticSpec};

/// Per-channel standardization applied at model input.
pub const CHANNEL_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// An RGB image with values in `[0, 1]`, stored row-major as `H × W × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Data(format!("image must be non-empty, got {height}×{width}")));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Data(format!(
                "{height}×{width}×3 image needs {} values, got {}",
                height * width * 3,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, data }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(f(y, x));
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * 3 + c]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Squared Euclidean distance in pixel space; images must share a size.
    pub fn sq_distance(&self, other: &Image) -> f64 {
        debug_assert_eq!((self.height, self.width), (other.height, other.width));
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = (*a - *b) as f64;
                d * d
            })
            .sum()
    }

    pub fn to_rgb8(&self) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
        let raw = self
            .data
            .iter()
            .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        ImageBuffer::from_raw(self.width as u32, self.height as u32, raw).unwrap()
    }

    pub fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Self {
        Self {
            height: img.height() as usize,
            width: img.width() as usize,
            data: img.as_raw().iter().map(|&v| v as f32 / 255.0).collect(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if img.width() == 0 || img.height() == 0 {
            return Err(Error::Image {
                path: path.to_path_buf(),
                message: "image is empty".into(),
            });
        }
        Ok(Self::from_rgb8(&img.to_rgb8()))
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save(path).map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    /// Bilinear (triangle-filter) resize.
    pub fn resized(&self, height: usize, width: usize) -> Image {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        let buf: ImageBuffer<Rgb<f32>, Vec<f32>> =
            ImageBuffer::from_raw(self.width as u32, self.height as u32, self.data.clone()).unwrap();
        let out = image::imageops::resize(&buf, width as u32, height as u32, FilterType::Triangle);
        Image {
            height,
            width,
            data: out.into_raw(),
        }
    }
}

/// Where an image's pixels come from.
#[derive(Clone, Debug)]
pub enum ImageSource {
    Memory(Arc<Image>),
    File(PathBuf),
}

impl ImageSource {
    pub fn load(&self) -> Result<Arc<Image>> {
        match self {
            ImageSource::Memory(img) => Ok(img.clone()),
            ImageSource::File(path) => Image::load(path).map(Arc::new),
        }
    }
}

impl From<Image> for ImageSource {
    fn from(img: Image) -> Self {
        ImageSource::Memory(Arc::new(img))
    }
}

/// A ground panorama and its geo-matched aerial image.
#[derive(Clone, Debug)]
pub struct ImagePair {
    pub id: String,
    pub ground: ImageSource,
    pub aerial: ImageSource,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitRole {
    Train,
    Test,
}

/// An ordered list of pairs with unique ids.
#[derive(Clone, Debug)]
pub struct DatasetSplit {
    pairs: Vec<ImagePair>,
    role: SplitRole,
}

impl DatasetSplit {
    pub fn new(pairs: Vec<ImagePair>, role: SplitRole) -> Result<Self> {
        let mut seen = HashSet::with_capacity(pairs.len());
        for p in &pairs {
            if !seen.insert(p.id.as_str()) {
                return Err(Error::Data(format!("duplicate pair id `{}`", p.id)));
            }
        }
        Ok(Self { pairs, role })
    }

    pub fn pairs(&self) -> &[ImagePair] {
        &self.pairs
    }

    pub fn role(&self) -> SplitRole {
        self.role
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn with_role(mut self, role: SplitRole) -> Self {
        self.role = role;
        self
    }

    /// Errors if any id appears in both splits.
    pub fn check_disjoint(&self, other: &DatasetSplit) -> Result<()> {
        let ids: HashSet<&str> = self.pairs.iter().map(|p| p.id.as_str()).collect();
        match other.pairs.iter().find(|p| ids.contains(p.id.as_str())) {
            Some(p) => Err(Error::Data(format!("pair id `{}` appears in both splits", p.id))),
            None => Ok(()),
        }
    }
}

/// Standardized `3 × H × W` model inputs for one pair.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedPair {
    pub ground: Vec<f64>,
    pub aerial: Vec<f64>,
}

/// Interleaved `h × w × 3` samples to standardized channel-major planes.
fn standardize(h: usize, w: usize, pixels: impl Fn(usize) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; 3 * h * w];
    for c in 0..3 {
        for y in 0..h {
            for x in 0..w {
                out[(c * h + y) * w + x] = (pixels((y * w + x) * 3 + c) - CHANNEL_MEAN[c]) / CHANNEL_STD[c];
            }
        }
    }
    out
}

fn standardize_image(img: &Image) -> Vec<f64> {
    standardize(img.height(), img.width(), |i| img.data()[i] as f64)
}

/// Brings a ground image to the configured input resolution.
pub fn prepare_ground(img: &Image, cfg: &ModelConfig) -> Vec<f64> {
    let [h, w] = cfg.ground_input;
    standardize_image(&img.resized(h, w))
}

/// Polar-transforms (or resizes) an aerial image to the configured input resolution.
pub fn prepare_aerial(img: &Image, cfg: &ModelConfig) -> Result<Vec<f64>> {
    let [h, w] = cfg.aerial_input;
    if cfg.polar_transform {
        let polar = polar_transform_f64(img, h, w)?;
        Ok(standardize(h, w, |i| polar[i]))
    } else {
        Ok(standardize_image(&img.resized(h, w)))
    }
}

pub fn prepare_pair(pair: &ImagePair, cfg: &ModelConfig) -> Result<PreparedPair> {
    let ground = pair.ground.load()?;
    let aerial = pair.aerial.load()?;
    Ok(PreparedPair {
        ground: prepare_ground(&ground, cfg),
        aerial: prepare_aerial(&aerial, cfg)?,
    })
}
