//! Procedural scenes: a background plane plus textured rectangles and
//! spheres, ray cast through a pinhole camera.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::Sample;
use crate::depth::DepthMap;
use crate::geometry::{CameraIntrinsics, PointCloud};

/// Horizontal field of view of synthetic cameras, in degrees.
pub const SYNTH_FOV_DEG: f64 = 60.0;

#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Infinite plane `normal . p = offset` (normal has a positive z component).
    Plane {
        normal: [f64; 3],
        offset: f64,
    },
    /// Rectangle centered at `center` spanned by unit axes `u`, `v` with
    /// half extents `half`.
    Rect {
        center: [f64; 3],
        u: [f64; 3],
        v: [f64; 3],
        half: [f64; 2],
    },
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn unit(a: [f64; 3]) -> [f64; 3] {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

impl Primitive {
    /// Depth `z` where the ray `z * dir` (with `dir.z = 1`) first hits the
    /// primitive in front of the camera, plus surface coordinates for texturing.
    pub fn intersect(&self, dir: [f64; 3]) -> Option<(f64, [f64; 2], [f64; 3])> {
        match *self {
            Primitive::Plane { normal, offset } => {
                let d = dot(normal, dir);
                if d.abs() < 1e-12 {
                    return None;
                }
                let z = offset / d;
                let p = [dir[0] * z, dir[1] * z, z];
                (z > 0.0).then_some((z, [p[0], p[1] + p[2]], normal))
            }
            Primitive::Rect { center, u, v, half } => {
                let n = cross(u, v);
                let d = dot(n, dir);
                if d.abs() < 1e-12 {
                    return None;
                }
                let z = dot(n, center) / d;
                let p = [dir[0] * z, dir[1] * z, z];
                let rel = [p[0] - center[0], p[1] - center[1], p[2] - center[2]];
                let (a, b) = (dot(rel, u), dot(rel, v));
                (z > 0.0 && a.abs() <= half[0] && b.abs() <= half[1]).then_some((z, [a, b], n))
            }
            Primitive::Sphere { center, radius } => {
                // |z dir - c|^2 = r^2
                let a = dot(dir, dir);
                let b = dot(dir, center);
                let c = dot(center, center) - radius * radius;
                let disc = b * b - a * c;
                if disc < 0.0 {
                    return None;
                }
                let z = (b - disc.sqrt()) / a;
                if z <= 0.0 {
                    return None;
                }
                let p = [dir[0] * z, dir[1] * z, z];
                let n = unit([p[0] - center[0], p[1] - center[1], p[2] - center[2]]);
                let uv = [n[0].atan2(-n[2]) * radius, n[1].asin() * radius];
                Some((z, uv, n))
            }
        }
    }
}

/// Surface appearance: base color, pattern color, pattern frequency and kind.
#[derive(Clone, Debug, PartialEq)]
pub struct Material {
    pub base: [f64; 3],
    pub accent: [f64; 3],
    pub frequency: f64,
    pub checker: bool,
}

impl Material {
    fn shade(&self, uv: [f64; 2], normal: [f64; 3]) -> [f64; 3] {
        let s = if self.checker {
            ((uv[0] * self.frequency).floor() + (uv[1] * self.frequency).floor()).rem_euclid(2.0)
        } else {
            0.5 + 0.5 * (uv[0] * self.frequency * std::f64::consts::TAU).sin()
        };
        let light = unit([-0.4, -0.6, -1.0]);
        let lambert = 0.55 + 0.45 * dot(normal, light).abs();
        let mut out = [0.0; 3];
        for ch in 0..3 {
            out[ch] = ((self.base[ch] * (1.0 - s) + self.accent[ch] * s) * lambert).clamp(0.0, 1.0);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub intrinsics: CameraIntrinsics,
    /// The background plane comes first.
    pub objects: Vec<(Primitive, Material)>,
}

impl Scene {
    pub fn random(seed: u64, height: usize, width: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let intrinsics = CameraIntrinsics::centered(width, height, SYNTH_FOV_DEG);
        let material = |rng: &mut ChaCha8Rng| Material {
            base: [rng.random(), rng.random(), rng.random()],
            accent: [rng.random(), rng.random(), rng.random()],
            frequency: rng.random_range(0.8..4.0),
            checker: rng.random_bool(0.5),
        };
        // A slanted backdrop between roughly 5 and 10 units away.
        let normal = unit([
            rng.random_range(-0.25..0.25),
            rng.random_range(-0.35..0.05),
            1.0,
        ]);
        let offset = rng.random_range(5.5..7.5) * normal[2];
        let mut objects = vec![(Primitive::Plane { normal, offset }, material(&mut rng))];
        let extra = rng.random_range(2..=7);
        for _ in 0..extra {
            let z = rng.random_range(1.5..5.5);
            let spread = 0.45 * z;
            let center = [
                rng.random_range(-spread..spread),
                rng.random_range(-spread..spread) * 0.8,
                z,
            ];
            let prim = if rng.random_bool(0.5) {
                Primitive::Sphere {
                    center,
                    radius: rng.random_range(0.25..0.8) * z.sqrt().min(1.5),
                }
            } else {
                let n = unit([
                    rng.random_range(-0.6..0.6),
                    rng.random_range(-0.6..0.6),
                    -1.0,
                ]);
                let u = unit(cross([0.0, 1.0, 0.0], n));
                let v = cross(n, u);
                Primitive::Rect {
                    center,
                    u,
                    v,
                    half: [rng.random_range(0.3..1.0), rng.random_range(0.3..1.0)],
                }
            };
            objects.push((prim, material(&mut rng)));
        }
        Self {
            intrinsics,
            objects,
        }
    }

    /// Nearest hit through a pixel center: `(depth, object index, color)`.
    pub fn trace(&self, row: usize, col: usize) -> Option<(f64, usize, [f64; 3])> {
        let k = &self.intrinsics;
        let dir = [(col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0];
        let mut best: Option<(f64, usize, [f64; 3])> = None;
        for (i, (prim, mat)) in self.objects.iter().enumerate() {
            if let Some((z, uv, n)) = prim.intersect(dir) {
                if best.is_none_or(|(bz, _, _)| z < bz) {
                    best = Some((z, i, mat.shade(uv, n)));
                }
            }
        }
        best
    }

    pub fn render(&self, id: String) -> Sample {
        let (h, w) = (self.intrinsics.height, self.intrinsics.width);
        let mut rgb = vec![0.0; 3 * h * w];
        let mut depth = vec![0.0; h * w];
        for r in 0..h {
            for c in 0..w {
                if let Some((z, _, color)) = self.trace(r, c) {
                    depth[r * w + c] = z;
                    for ch in 0..3 {
                        rgb[ch * h * w + r * w + c] = color[ch];
                    }
                }
            }
        }
        Sample {
            id,
            rgb,
            gt: DepthMap::from_values(h, w, depth).expect("finite depths"),
            cloud: PointCloud::empty(),
            intrinsics: self.intrinsics,
        }
    }
}

/// Deterministic random scene with dense ground truth and no points.
pub fn synthesize_scene(seed: u64, height: usize, width: usize) -> Sample {
    Scene::random(seed, height, width).render(format!("synth-{seed}"))
}
