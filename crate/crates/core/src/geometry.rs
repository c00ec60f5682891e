//! Point clouds, pinhole projection, unit-sphere normalization and
//! nearest-neighbor search.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{CoreError, Result};

/// `N` 3D points in camera coordinates; `z` is depth along the optical axis.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn new(points: Vec<[f64; 3]>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(CoreError::invalid(format!(
                "point {i} has a non-finite coordinate"
            )));
        }
        Ok(Self { points })
    }

    pub fn empty() -> Self {
        Self { points: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    pub fn get(&self, i: usize) -> [f64; 3] {
        self.points[i]
    }

    /// The points at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            points: indices.iter().map(|&i| self.points[i]).collect(),
        }
    }

    pub fn map(&self, f: impl Fn([f64; 3]) -> [f64; 3]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    /// A camera with the principal point at the image center and the given
    /// horizontal field of view.
    pub fn centered(width: usize, height: usize, fov_x_deg: f64) -> Self {
        let f = (width as f64 / 2.0) / (fov_x_deg.to_radians() / 2.0).tan();
        Self {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.cx >= 0.0
            && self.cy >= 0.0
            && self.cx < self.width as f64
            && self.cy < self.height as f64;
        if !ok || !(self.fx.is_finite() && self.fy.is_finite()) {
            return Err(CoreError::invalid(format!(
                "invalid camera intrinsics {self:?}"
            )));
        }
        Ok(())
    }

    /// Continuous pixel coordinates `(u, v)` of a camera-frame point.
    pub fn project(&self, p: [f64; 3]) -> (f64, f64) {
        (
            self.fx * p[0] / p[2] + self.cx,
            self.fy * p[1] / p[2] + self.cy,
        )
    }

    /// The camera-frame point at depth `z` seen through pixel `(u, v)`.
    pub fn back_project(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z]
    }

    /// Rescaled for an image downsampled by `factor`.
    pub fn scaled(&self, factor: usize) -> Self {
        let s = factor as f64;
        Self {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: (self.cx + 0.5) / s - 0.5,
            cy: (self.cy + 0.5) / s - 0.5,
            width: self.width / factor,
            height: self.height / factor,
        }
    }
}

/// Image-sized grid holding depth where a point projects; zero elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseDepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    mask: Vec<bool>,
    /// Occupied cells in row-major order.
    indices: Vec<(usize, usize)>,
    /// Source point id for each entry of `indices`.
    point_index: Vec<usize>,
}

impl SparseDepthMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            depth: vec![0.0; height * width],
            mask: vec![false; height * width],
            indices: Vec::new(),
            point_index: Vec::new(),
        }
    }

    /// Builds a map from per-cell `(depth, source point)` winners.
    fn from_cells(height: usize, width: usize, cells: &[Option<(f64, usize)>]) -> Self {
        let mut m = Self::empty(height, width);
        for (flat, cell) in cells.iter().enumerate() {
            if let Some((d, src)) = *cell {
                m.depth[flat] = d;
                m.mask[flat] = true;
                m.indices.push((flat / width, flat % width));
                m.point_index.push(src);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> &[f64] {
        &self.depth
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn indices(&self) -> &[(usize, usize)] {
        &self.indices
    }

    pub fn point_index(&self) -> &[usize] {
        &self.point_index
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.depth[row * self.width + col]
    }

    /// The same map with every stored depth multiplied by `factor`.
    pub fn scale_depth(&self, factor: f64) -> Self {
        let mut m = self.clone();
        m.depth.iter_mut().for_each(|d| *d *= factor);
        m
    }
}

/// Outcome of [`project_points`].
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub map: SparseDepthMap,
    /// Points that were not projected: outside the image, or rejected.
    pub dropped: usize,
    /// Ids of points rejected for a non-positive depth (also counted in `dropped`).
    pub rejected: Vec<usize>,
    /// Points that landed on an occupied pixel behind a nearer point.
    pub evicted: usize,
}

/// Projects every point to its nearest pixel; the nearest point wins each pixel.
pub fn project_points(pc: &PointCloud, k: &CameraIntrinsics) -> Projection {
    let (h, w) = (k.height, k.width);
    let mut cells: Vec<Option<(f64, usize)>> = vec![None; h * w];
    let mut dropped = 0;
    let mut rejected = Vec::new();
    let mut evicted = 0;
    for (i, &p) in pc.points().iter().enumerate() {
        if !(p[2] > 0.0) {
            rejected.push(i);
            dropped += 1;
            continue;
        }
        let (u, v) = k.project(p);
        let (col, row) = (u.round(), v.round());
        if !(col >= 0.0 && row >= 0.0 && col < w as f64 && row < h as f64) {
            dropped += 1;
            continue;
        }
        let flat = row as usize * w + col as usize;
        match cells[flat] {
            Some((z, _)) if z <= p[2] => evicted += 1,
            Some(_) => {
                evicted += 1;
                cells[flat] = Some((p[2], i));
            }
            None => cells[flat] = Some((p[2], i)),
        }
    }
    Projection {
        map: SparseDepthMap::from_cells(h, w, &cells),
        dropped,
        rejected,
        evicted,
    }
}

/// Maps occupied cells to `(row / factor, col / factor)`; the smaller depth
/// wins collisions.
pub fn rescale_indices(sparse: &SparseDepthMap, factor: usize) -> Result<SparseDepthMap> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(CoreError::invalid(format!(
            "rescale factor {factor} is not a power of two"
        )));
    }
    if !sparse.height.is_multiple_of(factor) || !sparse.width.is_multiple_of(factor) {
        return Err(CoreError::invalid(format!(
            "factor {factor} does not divide {}x{}",
            sparse.height, sparse.width
        )));
    }
    let (h, w) = (sparse.height / factor, sparse.width / factor);
    let mut cells: Vec<Option<(f64, usize)>> = vec![None; h * w];
    for (&(r, c), &src) in sparse.indices.iter().zip(&sparse.point_index) {
        let d = sparse.at(r, c);
        let flat = (r / factor) * w + c / factor;
        match cells[flat] {
            Some((z, s)) if z < d || (z == d && s < src) => {}
            _ => cells[flat] = Some((d, src)),
        }
    }
    Ok(SparseDepthMap::from_cells(h, w, &cells))
}

/// Similarity transform taking a cloud to the unit sphere.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormalizationTransform {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl NormalizationTransform {
    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        [
            (p[0] - self.centroid[0]) / self.scale,
            (p[1] - self.centroid[1]) / self.scale,
            (p[2] - self.centroid[2]) / self.scale,
        ]
    }

    pub fn invert(&self, p: [f64; 3]) -> [f64; 3] {
        [
            p[0] * self.scale + self.centroid[0],
            p[1] * self.scale + self.centroid[1],
            p[2] * self.scale + self.centroid[2],
        ]
    }
}

/// Centers the cloud at its centroid and scales the farthest point to norm 1.
/// A cloud whose points all coincide keeps scale 1.
pub fn normalize_unit_sphere(pc: &PointCloud) -> Result<(PointCloud, NormalizationTransform)> {
    if pc.is_empty() {
        return Err(CoreError::Empty("point cloud"));
    }
    let n = pc.len() as f64;
    let mut c = [0.0; 3];
    for p in pc.points() {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in &mut c {
        *v /= n;
    }
    let radius = pc
        .points()
        .iter()
        .map(|p| norm([p[0] - c[0], p[1] - c[1], p[2] - c[2]]))
        .fold(0.0, f64::max);
    let t = NormalizationTransform {
        centroid: c,
        scale: if radius > 0.0 { radius } else { 1.0 },
    };
    Ok((pc.map(|p| t.apply(p)), t))
}

pub(crate) fn norm(p: [f64; 3]) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

fn dist2(a: [f64; 3], b: [f64; 3]) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// For every point, the ids of its `k` nearest points (Euclidean).
///
/// Row `i` starts with `i` itself; the remaining entries are ordered by
/// distance, ties going to the lower index.
pub fn knn(pc: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = pc.len();
    if k == 0 || k > n {
        return Err(CoreError::invalid(format!("knn: k = {k} outside 1..={n}")));
    }
    Ok(knn_rows(pc, k))
}

/// [`knn`] that tolerates `k > N` by repeating each row's last neighbor.
pub fn knn_padded(pc: &PointCloud, k: usize) -> Result<Vec<Vec<usize>>> {
    let n = pc.len();
    if k == 0 || n == 0 {
        return Err(CoreError::invalid(format!("knn: k = {k} with {n} points")));
    }
    let mut rows = knn_rows(pc, k.min(n));
    for row in &mut rows {
        let last = *row.last().expect("non-empty row");
        row.resize(k, last);
    }
    Ok(rows)
}

fn knn_rows(pc: &PointCloud, k: usize) -> Vec<Vec<usize>> {
    let pts = pc.points();
    let n = pts.len();
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    (0..n)
        .map(|i| {
            cand.clear();
            cand.extend(
                (0..n)
                    .filter(|&j| j != i)
                    .map(|j| (dist2(pts[i], pts[j]), j)),
            );
            let take = k - 1;
            let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
            if take > 0 && take < cand.len() {
                cand.select_nth_unstable_by(take - 1, key);
                cand.truncate(take);
            }
            cand.sort_unstable_by(key);
            std::iter::once(i)
                .chain(cand.iter().take(take).map(|c| c.1))
                .collect()
        })
        .collect()
}

/// Parses the plain-text point format: one `x y z` triple per line, `#`
/// starting a comment line, blank lines ignored.
pub fn parse_points(text: &str, source_name: &str) -> Result<PointCloud> {
    let mut pts = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let err = |msg: String| CoreError::Parse {
            source_name: source_name.to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = t.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 values, found {}", fields.len())));
        }
        let mut p = [0.0; 3];
        for (slot, f) in p.iter_mut().zip(&fields) {
            *slot = f.parse::<f64>().map_err(|e| err(format!("'{f}': {e}")))?;
            if !slot.is_finite() {
                return Err(err(format!("non-finite value '{f}'")));
            }
        }
        pts.push(p);
    }
    PointCloud::new(pts)
}

/// Serializes points using the shortest decimal form that reads back exactly.
pub fn format_points(pc: &PointCloud) -> String {
    let mut s = String::from("# x y z\n");
    for p in pc.points() {
        let _ = writeln!(s, "{:e} {:e} {:e}", p[0], p[1], p[2]);
    }
    s
}

pub fn read_point_file(path: impl AsRef<Path>) -> Result<PointCloud> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_points(&text, &path.display().to_string())
}

pub fn write_point_file(path: impl AsRef<Path>, pc: &PointCloud) -> Result<()> {
    std::fs::write(path, format_points(pc))?;
    Ok(())
}
