//! Training-time augmentation: rotation, horizontal flip, window dropping
//! and brightness/contrast jitter.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{sample_points, Pattern, Sample, SamplingSpec};
use crate::depth::DepthMap;
use crate::error::Result;
use crate::geometry::PointCloud;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentOptions {
    pub max_rotation_deg: f64,
    pub flip_prob: f64,
    pub drop_prob: f64,
    /// Upper bound on the dropped window's share of the image area.
    pub max_drop_area: f64,
    /// Brightness and contrast factors are drawn from `[1 - jitter, 1 + jitter]`.
    pub jitter: f64,
    /// Pattern used to re-sample points after a rotation.
    pub resample: Pattern,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        Self {
            max_rotation_deg: 5.0,
            flip_prob: 0.5,
            drop_prob: 0.5,
            max_drop_area: 0.25,
            jitter: 0.1,
            resample: Pattern::Random,
        }
    }
}

/// Rectangle `[row, row + height) x [col, col + width)` zeroed in the rgb.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropWindow {
    pub row: usize,
    pub col: usize,
    pub height: usize,
    pub width: usize,
}

/// Concrete augmentation drawn from a seed.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentParams {
    pub angle_deg: f64,
    pub flip: bool,
    pub drop: Option<DropWindow>,
    pub brightness: f64,
    pub contrast: f64,
    /// Seed for re-sampling points after a rotation.
    pub resample_seed: u64,
}

impl AugmentParams {
    pub fn identity() -> Self {
        Self {
            angle_deg: 0.0,
            flip: false,
            drop: None,
            brightness: 1.0,
            contrast: 1.0,
            resample_seed: 0,
        }
    }

    pub fn draw(seed: u64, height: usize, width: usize, opts: &AugmentOptions) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let angle_deg = if opts.max_rotation_deg > 0.0 {
            rng.random_range(-opts.max_rotation_deg..=opts.max_rotation_deg)
        } else {
            0.0
        };
        let flip = rng.random_bool(opts.flip_prob.clamp(0.0, 1.0));
        let drop = if rng.random_bool(opts.drop_prob.clamp(0.0, 1.0)) && opts.max_drop_area > 0.0 {
            // Side fractions whose product stays within the area bound.
            let side = opts.max_drop_area.min(1.0).sqrt();
            let fh = rng.random_range(0.2 * side..=side);
            let fw = rng.random_range(0.2 * side..=side);
            let dh = ((fh * height as f64).floor() as usize).max(1);
            let dw = ((fw * width as f64).floor() as usize).max(1);
            Some(DropWindow {
                row: rng.random_range(0..=height - dh),
                col: rng.random_range(0..=width - dw),
                height: dh,
                width: dw,
            })
        } else {
            None
        };
        let j = opts.jitter.clamp(0.0, 0.99);
        let (brightness, contrast) = if j > 0.0 {
            (
                rng.random_range(1.0 - j..=1.0 + j),
                rng.random_range(1.0 - j..=1.0 + j),
            )
        } else {
            (1.0, 1.0)
        };
        Self {
            angle_deg,
            flip,
            drop,
            brightness,
            contrast,
            resample_seed: rng.random(),
        }
    }
}

/// Bilinear sample of one plane at continuous `(y, x)`; `None` outside.
fn bilinear(plane: &[f64], h: usize, w: usize, y: f64, x: f64) -> Option<f64> {
    if !(y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64) {
        return None;
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |r: usize, c: usize| plane[r * w + c];
    Some(
        at(y0, x0) * (1.0 - fy) * (1.0 - fx)
            + at(y0, x1) * (1.0 - fy) * fx
            + at(y1, x0) * fy * (1.0 - fx)
            + at(y1, x1) * fy * fx,
    )
}

/// Rotates rgb (bilinear) and depth (nearest) about the principal point.
/// Pixels whose source falls outside the image become black and invalid.
fn rotate(sample: &Sample, angle_deg: f64) -> (Vec<f64>, DepthMap) {
    let (h, w) = (sample.height(), sample.width());
    let (cx, cy) = (sample.intrinsics.cx, sample.intrinsics.cy);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mut rgb = vec![0.0; 3 * h * w];
    let mut depth = vec![0.0; h * w];
    let mut mask = vec![false; h * w];
    for r in 0..h {
        for col in 0..w {
            let (dx, dy) = (col as f64 - cx, r as f64 - cy);
            // Inverse rotation gives the source location.
            let sx = c * dx + s * dy + cx;
            let sy = -s * dx + c * dy + cy;
            let i = r * w + col;
            let inside = (0..3).all(|ch| {
                let plane = &sample.rgb[ch * h * w..(ch + 1) * h * w];
                match bilinear(plane, h, w, sy, sx) {
                    Some(v) => {
                        rgb[ch * h * w + i] = v;
                        true
                    }
                    None => false,
                }
            });
            if !inside {
                continue;
            }
            let (nr, nc) = (sy.round() as usize, sx.round() as usize);
            if sample.gt.is_valid(nr, nc) {
                depth[i] = sample.gt.at(nr, nc);
                mask[i] = true;
            }
        }
    }
    (
        rgb,
        DepthMap::new(h, w, depth, mask).expect("copied valid depths"),
    )
}

fn flip_plane(plane: &mut [f64], w: usize) {
    for row in plane.chunks_mut(w) {
        row.reverse();
    }
}

/// Draws parameters from `seed` and applies them.
pub fn augment(sample: &Sample, seed: u64, opts: &AugmentOptions) -> Result<Sample> {
    AugmentParams::draw(seed, sample.height(), sample.width(), opts).apply(sample, opts)
}

impl AugmentParams {
    /// Applies the augmentation jointly to rgb and depth. Color changes touch rgb
    /// only. Flips mirror the points; rotations re-sample them from the rotated
    /// depth.
    pub fn apply(&self, sample: &Sample, opts: &AugmentOptions) -> Result<Sample> {
        let params = self;
        let (h, w) = (sample.height(), sample.width());
        let mut out = sample.clone();
        if params.angle_deg != 0.0 {
            let (rgb, gt) = rotate(sample, params.angle_deg);
            out.rgb = rgb;
            out.gt = gt;
        }
        if params.flip {
            for ch in 0..3 {
                flip_plane(&mut out.rgb[ch * h * w..(ch + 1) * h * w], w);
            }
            let mut depth = out.gt.values().to_vec();
            let mut mask: Vec<f64> = out
                .gt
                .mask()
                .iter()
                .map(|&m| if m { 1.0 } else { 0.0 })
                .collect();
            flip_plane(&mut depth, w);
            flip_plane(&mut mask, w);
            out.gt = DepthMap::new(h, w, depth, mask.iter().map(|&m| m > 0.5).collect())?;
        }
        if params.angle_deg != 0.0 {
            let count = sample.cloud.len().min(out.gt.valid_count());
            let spec = SamplingSpec::new(opts.resample.clone(), count, params.resample_seed);
            out.cloud = if count == 0 {
                PointCloud::empty()
            } else {
                sample_points(&out, &spec)?
            };
        } else if params.flip {
            let k = &sample.intrinsics;
            let shift = (w as f64 - 1.0 - 2.0 * k.cx) / k.fx;
            out.cloud = sample.cloud.map(|p| [shift * p[2] - p[0], p[1], p[2]]);
        }
        if let Some(win) = params.drop {
            for ch in 0..3 {
                for r in win.row..(win.row + win.height).min(h) {
                    let base = ch * h * w + r * w;
                    out.rgb[base + win.col..base + (win.col + win.width).min(w)].fill(0.0);
                }
            }
        }
        if params.brightness != 1.0 || params.contrast != 1.0 {
            let mean = out.rgb.iter().sum::<f64>() / out.rgb.len() as f64;
            for v in out.rgb.iter_mut() {
                *v = (((*v - mean) * params.contrast + mean) * params.brightness).clamp(0.0, 1.0);
            }
        }
        Ok(out)
    }
}
