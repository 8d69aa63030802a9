//! CT volume to model input: slice selection, resampling, cropping and
//! intensity windowing.

use std::fmt;

use thiserror::Error;

use crate::mha::{to_hounsfield, MhaError, Volume};

pub const MIN_TARGET: usize = 8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PreprocessError {
    #[error("invalid preprocessing config: {0}")]
    Config(String),
    #[error("slice index {index} is out of range for depth {depth}")]
    SliceBounds { index: usize, depth: usize },
    #[error("expected a 2-D or 3-D volume, got DimSize {0:?}")]
    NotVolume(Vec<usize>),
    #[error("image {height}×{width} is too small to interpolate")]
    TooSmall { height: usize, width: usize },
    #[error("crop leaves a {height}×{width} window, below the {MIN_TARGET}×{MIN_TARGET} minimum")]
    DegenerateCrop { height: usize, width: usize },
    #[error("{0}")]
    Mha(#[from] MhaError),
    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<PreprocessError>,
    },
}

/// A row-major single-channel image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image2d {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f32>,
}

impl Image2d {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Self {
        assert_eq!(pixels.len(), height * width, "pixel count must equal height × width");
        Self { height, width, pixels }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        let pixels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, pixels }
    }

    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SlicePolicy {
    MiddleAxial,
    Index(usize),
    MaxMeanIntensity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CropPolicy {
    None,
    CenterFraction(f64),
}

impl fmt::Display for SlicePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MiddleAxial => write!(f, "middle"),
            Self::Index(i) => write!(f, "index:{i}"),
            Self::MaxMeanIntensity => write!(f, "max-mean"),
        }
    }
}

impl std::str::FromStr for SlicePolicy {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "middle" => Ok(Self::MiddleAxial),
            "max-mean" => Ok(Self::MaxMeanIntensity),
            _ => s
                .strip_prefix("index:")
                .and_then(|i| i.parse().ok())
                .map(Self::Index)
                .ok_or_else(|| PreprocessError::Config(format!("unknown slice policy {s:?} (middle, index:N, max-mean)"))),
        }
    }
}

impl fmt::Display for CropPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::None => write!(f, "none"),
            Self::CenterFraction(x) => write!(f, "center:{x}"),
        }
    }
}

impl std::str::FromStr for CropPolicy {
    type Err = PreprocessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            return Ok(Self::None);
        }
        s.strip_prefix("center:")
            .and_then(|f| f.parse().ok())
            .map(Self::CenterFraction)
            .ok_or_else(|| PreprocessError::Config(format!("unknown crop policy {s:?} (none, center:F)")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// `(lo, hi)` in Hounsfield units.
    pub clip_window: (f32, f32),
    pub crop: CropPolicy,
    pub slice: SlicePolicy,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 224,
            clip_window: (-1000.0, 400.0),
            crop: CropPolicy::None,
            slice: SlicePolicy::MiddleAxial,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        let (lo, hi) = self.clip_window;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(PreprocessError::Config(format!("clip window needs lo < hi, got ({lo}, {hi})")));
        }
        if self.target_size < MIN_TARGET {
            return Err(PreprocessError::Config(format!(
                "target size {} is below {MIN_TARGET}",
                self.target_size
            )));
        }
        if let CropPolicy::CenterFraction(f) = self.crop {
            if !(f > 0.0 && f <= 1.0) {
                return Err(PreprocessError::Config(format!("crop fraction must be in (0, 1], got {f}")));
            }
        }
        Ok(())
    }

    /// Stable one-line rendering, used for provenance and cache keys.
    pub fn describe(&self) -> String {
        format!(
            "target={} window={},{} crop={} slice={}",
            self.target_size, self.clip_window.0, self.clip_window.1, self.crop, self.slice
        )
    }
}

/// A model-ready image and the settings that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedImage {
    pub image: Image2d,
    pub source_patient_id: String,
    pub provenance: PreprocessConfig,
}

/// Extracts one axial (z) slice as a `y`×`x` image of raw voxel values.
pub fn select_slice(volume: &Volume, policy: SlicePolicy) -> Result<Image2d, PreprocessError> {
    let (w, h, depth) = volume
        .extent3()
        .ok_or_else(|| PreprocessError::NotVolume(volume.header.dim_size.clone()))?;
    let plane = w * h;
    let slice = |z: usize| {
        Image2d::new(h, w, (z * plane..(z + 1) * plane).map(|i| volume.voxels.get_f64(i) as f32).collect())
    };
    let index = match policy {
        SlicePolicy::MiddleAxial => depth / 2,
        SlicePolicy::Index(i) if i < depth => i,
        SlicePolicy::Index(index) => return Err(PreprocessError::SliceBounds { index, depth }),
        SlicePolicy::MaxMeanIntensity => {
            let mut best = (0, f64::NEG_INFINITY);
            for z in 0..depth {
                let mean = (z * plane..(z + 1) * plane).map(|i| volume.voxels.get_f64(i)).sum::<f64>() / plane as f64;
                if mean > best.1 {
                    best = (z, mean);
                }
            }
            best.0
        }
    };
    Ok(slice(index))
}

/// Bilinear resampling to `target`×`target` with corner pixels aligned.
pub fn resample(image: &Image2d, target: usize) -> Result<Image2d, PreprocessError> {
    let (h, w) = (image.height, image.width);
    if h < 2 || w < 2 || target < 2 {
        return Err(PreprocessError::TooSmall { height: h, width: w });
    }
    let coords = |n: usize| -> Vec<(usize, usize, f64)> {
        (0..target)
            .map(|i| {
                let s = (i * (n - 1)) as f64 / (target - 1) as f64;
                let i0 = (s.floor() as usize).min(n - 1);
                let i1 = (i0 + 1).min(n - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = coords(h);
    let xs = coords(w);
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
    let px = |y: usize, x: usize| image.pixels[y * w + x] as f64;
    let mut out = Vec::with_capacity(target * target);
    for &(y0, y1, ty) in &ys {
        for &(x0, x1, tx) in &xs {
            let top = lerp(px(y0, x0), px(y0, x1), tx);
            let bottom = lerp(px(y1, x0), px(y1, x1), tx);
            out.push(lerp(top, bottom, ty) as f32);
        }
    }
    Ok(Image2d::new(target, target, out))
}

pub fn crop(image: &Image2d, policy: CropPolicy) -> Result<Image2d, PreprocessError> {
    let CropPolicy::CenterFraction(f) = policy else {
        return Ok(image.clone());
    };
    let ch = (f * image.height as f64).floor() as usize;
    let cw = (f * image.width as f64).floor() as usize;
    if ch < MIN_TARGET || cw < MIN_TARGET {
        return Err(PreprocessError::DegenerateCrop { height: ch, width: cw });
    }
    let oy = (image.height - ch) / 2;
    let ox = (image.width - cw) / 2;
    Ok(Image2d::from_fn(ch, cw, |y, x| image.at(oy + y, ox + x)))
}

/// `x ↦ (clamp(x, lo, hi) − lo) / (hi − lo)`.
pub fn clip_normalize(image: &Image2d, lo: f32, hi: f32) -> Image2d {
    let span = hi - lo;
    let pixels = image
        .pixels
        .iter()
        .map(|&x| ((x.clamp(lo, hi) - lo) / span).clamp(0.0, 1.0))
        .collect();
    Image2d::new(image.height, image.width, pixels)
}

fn stage<T>(name: &'static str, r: Result<T, PreprocessError>) -> Result<T, PreprocessError> {
    r.map_err(|e| PreprocessError::Stage {
        stage: name,
        source: Box::new(e),
    })
}

/// Runs the full pipeline on one volume.
pub fn preprocess(
    volume: &Volume,
    patient_id: &str,
    config: &PreprocessConfig,
) -> Result<ProcessedImage, PreprocessError> {
    stage("config", config.validate())?;
    let hu = stage("hounsfield", to_hounsfield(volume).map_err(PreprocessError::from))?;
    let slice = stage("select_slice", select_slice(&hu, config.slice))?;
    let resampled = stage("resample", resample(&slice, config.target_size))?;
    let cropped = stage("crop", crop(&resampled, config.crop))?;
    let sized = if cropped.height != config.target_size || cropped.width != config.target_size {
        stage("resample", resample(&cropped, config.target_size))?
    } else {
        cropped
    };
    let (lo, hi) = config.clip_window;
    Ok(ProcessedImage {
        image: clip_normalize(&sized, lo, hi),
        source_patient_id: patient_id.to_string(),
        provenance: *config,
    })
}
