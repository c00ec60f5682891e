//! Samples, sparse-point sampling, synthetic scenes, augmentation and file
//! formats.

mod augment;
pub mod io;
mod synth;

pub use augment::{augment, AugmentOptions, AugmentParams, DropWindow};
pub use synth::{synthesize_scene, Material, Primitive, Scene, SYNTH_FOV_DEG};

use std::path::PathBuf;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sparsefuse_tensor::Tensor;

use crate::depth::DepthMap;
use crate::error::{CoreError, Result};
use crate::geometry::{read_point_file, CameraIntrinsics, PointCloud};

/// One RGB image with dense ground truth and a sparse point set.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// Planar `3 x H x W`, values in `[0, 1]`.
    pub rgb: Vec<f64>,
    pub gt: DepthMap,
    pub cloud: PointCloud,
    pub intrinsics: CameraIntrinsics,
}

impl Sample {
    pub fn height(&self) -> usize {
        self.gt.height()
    }

    pub fn width(&self) -> usize {
        self.gt.width()
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.rgb.len() != 3 * h * w {
            return Err(CoreError::invalid(format!(
                "{}: rgb has {} values for a {h}x{w} image",
                self.id,
                self.rgb.len()
            )));
        }
        if self.intrinsics.width != w || self.intrinsics.height != h {
            return Err(CoreError::invalid(format!(
                "{}: intrinsics are for {}x{}, image is {h}x{w}",
                self.id, self.intrinsics.width, self.intrinsics.height
            )));
        }
        self.intrinsics.validate()?;
        if let Some(v) = self.rgb.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(CoreError::invalid(format!(
                "{}: rgb value {v} outside [0, 1]",
                self.id
            )));
        }
        if self.gt.valid_count() == 0 {
            return Err(CoreError::invalid(format!(
                "{}: no valid ground truth",
                self.id
            )));
        }
        Ok(())
    }

    pub fn rgb_tensor(&self) -> Tensor<f64> {
        Tensor::new(&[3, self.height(), self.width()], self.rgb.clone()).expect("validated size")
    }

    /// Mean of the three channels per pixel.
    pub fn luminance(&self) -> Vec<f64> {
        let n = self.height() * self.width();
        (0..n)
            .map(|i| (self.rgb[i] + self.rgb[n + i] + self.rgb[2 * n + i]) / 3.0)
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    /// Uniform over valid pixels without replacement.
    Random,
    /// Importance sampling by image-gradient magnitude.
    FeatureLike,
    /// Points read from a file in the point format.
    External(PathBuf),
}

impl Pattern {
    pub fn name(&self) -> &str {
        match self {
            Pattern::Random => "random",
            Pattern::FeatureLike => "feature-like",
            Pattern::External(_) => "external",
        }
    }

    /// `random`, `feature-like`, or a point-file path.
    pub fn parse(s: &str) -> Self {
        match s {
            "random" => Pattern::Random,
            "feature-like" | "feature" => Pattern::FeatureLike,
            path => Pattern::External(PathBuf::from(path)),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplingSpec {
    pub pattern: Pattern,
    pub count: usize,
    pub seed: u64,
    /// Standard deviation of multiplicative depth noise (0.1 = 10%).
    pub noise: f64,
}

impl SamplingSpec {
    pub fn new(pattern: Pattern, count: usize, seed: u64) -> Self {
        Self {
            pattern,
            count,
            seed,
            noise: 0.0,
        }
    }
}

/// Floor added to gradient weights so flat regions stay reachable.
const FEATURE_FLOOR: f64 = 1e-6;

/// Central-difference gradient magnitude of a single-channel image.
pub fn gradient_magnitude(img: &[f64], h: usize, w: usize) -> Vec<f64> {
    let at = |r: usize, c: usize| img[r * w + c];
    (0..h * w)
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) / 2.0;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) / 2.0;
            (gx * gx + gy * gy).sqrt()
        })
        .collect()
}

/// Draws `spec.count` valid pixels of `sample.gt` and back-projects them.
/// Depth noise moves points along their pixel ray, so each still projects to
/// the pixel it was drawn from.
pub fn sample_points(sample: &Sample, spec: &SamplingSpec) -> Result<PointCloud> {
    if let Pattern::External(path) = &spec.pattern {
        return read_point_file(path);
    }
    let (h, w) = (sample.height(), sample.width());
    let valid: Vec<usize> = (0..h * w).filter(|&i| sample.gt.mask()[i]).collect();
    if spec.count > valid.len() {
        return Err(CoreError::invalid(format!(
            "cannot sample {} points from {} valid pixels",
            spec.count,
            valid.len()
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(CoreError::invalid(format!(
            "depth noise {} must be non-negative",
            spec.noise
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut picked: Vec<usize> = match spec.pattern {
        Pattern::Random => index::sample(&mut rng, valid.len(), spec.count)
            .into_iter()
            .map(|i| valid[i])
            .collect(),
        Pattern::FeatureLike => {
            let grad = gradient_magnitude(&sample.luminance(), h, w);
            valid
                .choose_multiple_weighted(&mut rng, spec.count, |&i| grad[i] + FEATURE_FLOOR)
                .map_err(|e| CoreError::invalid(format!("feature-like sampling: {e}")))?
                .copied()
                .collect()
        }
        Pattern::External(_) => unreachable!(),
    };
    picked.sort_unstable();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let k = &sample.intrinsics;
    let pts = picked
        .into_iter()
        .map(|i| {
            let z = sample.gt.values()[i];
            let z = if spec.noise > 0.0 {
                (z * (1.0 + spec.noise * noise.sample(&mut rng))).max(1e-3 * z)
            } else {
                z
            };
            k.back_project((i % w) as f64, (i / w) as f64, z)
        })
        .collect();
    PointCloud::new(pts)
}
