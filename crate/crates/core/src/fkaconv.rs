//! Feature-kernel alignment convolution on irregular point sets.
//!
//! Each point gathers its `k` nearest neighbors. A small per-neighbor
//! perceptron maps the neighbor's normalized offset to a soft assignment over
//! the `K` kernel elements; the assigned features are then contracted with a
//! `K x C_in x C_out` kernel, exactly as a grid convolution would contract a
//! `3 x 3` patch.

use rand::Rng;
use sparsefuse_tensor::{BoundParams, Graph, ParamId, ParamStore, Scalar, Tensor, Var};

use crate::error::{CoreError, Result};
use crate::geometry::{knn_padded, norm, PointCloud};
use crate::layers::{he_uniform, Dense};

/// Hidden width of the alignment perceptron.
pub const ALIGN_HIDDEN: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Neighborhood {
    pub center: usize,
    pub neighbors: Vec<usize>,
    /// `(neighbor - center) / max neighbor distance`, one row per neighbor.
    pub rel_coords: Vec<[f64; 3]>,
}

/// One neighborhood per point using padded k-nearest neighbors.
pub fn build_neighborhoods(pc: &PointCloud, k: usize) -> Result<Vec<Neighborhood>> {
    if pc.is_empty() {
        return Err(CoreError::Empty("point cloud"));
    }
    let rows = knn_padded(pc, k)?;
    Ok(rows
        .into_iter()
        .enumerate()
        .map(|(i, neighbors)| {
            let c = pc.get(i);
            let offsets: Vec<[f64; 3]> = neighbors
                .iter()
                .map(|&j| {
                    let p = pc.get(j);
                    [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
                })
                .collect();
            let radius = offsets.iter().map(|&o| norm(o)).fold(0.0, f64::max);
            let s = if radius > 0.0 { radius } else { 1.0 };
            Neighborhood {
                center: i,
                neighbors,
                rel_coords: offsets
                    .iter()
                    .map(|o| [o[0] / s, o[1] / s, o[2] / s])
                    .collect(),
            }
        })
        .collect())
}

/// Flattened neighborhoods of one cloud, cached per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodSet {
    pub n: usize,
    pub k: usize,
    /// `n * k` neighbor ids, row-major by center.
    pub neighbors: Vec<usize>,
    /// `n * k * 3` relative coordinates.
    pub rel_coords: Vec<f64>,
}

impl NeighborhoodSet {
    pub fn build(pc: &PointCloud, k: usize) -> Result<Self> {
        Ok(Self::from_neighborhoods(&build_neighborhoods(pc, k)?, k))
    }

    pub fn from_neighborhoods(hoods: &[Neighborhood], k: usize) -> Self {
        Self {
            n: hoods.len(),
            k,
            neighbors: hoods
                .iter()
                .flat_map(|h| h.neighbors.iter().copied())
                .collect(),
            rel_coords: hoods
                .iter()
                .flat_map(|h| h.rel_coords.iter().flat_map(|r| r.iter().copied()))
                .collect(),
        }
    }

    /// The relative coordinates as an `(n*k) x 3` graph constant.
    pub fn rel_coords_var<T: Scalar>(&self, g: &mut Graph<T>) -> Var {
        let t = Tensor::from_fn(&[self.n * self.k, 3], |i| T::of(self.rel_coords[i]));
        g.constant(t)
    }
}

/// Learned parameters of one alignment convolution layer.
#[derive(Clone, Debug)]
pub struct FkaParams {
    /// `K x C_in x C_out`.
    pub kernel: ParamId,
    pub align_hidden: Dense,
    pub align_out: Dense,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_elems: usize,
}

impl FkaParams {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_elems: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if kernel_elems == 0 || c_in == 0 || c_out == 0 {
            return Err(CoreError::config(format!(
                "{name}: kernel elements and channels must be positive"
            )));
        }
        let kernel = store.register(
            format!("{name}.kernel"),
            he_uniform(&[kernel_elems, c_in, c_out], c_in * kernel_elems, rng),
        )?;
        let align_hidden = Dense::register(store, &format!("{name}.align1"), 3, ALIGN_HIDDEN, rng)?;
        let align_out = Dense::register(
            store,
            &format!("{name}.align2"),
            ALIGN_HIDDEN,
            kernel_elems,
            rng,
        )?;
        Ok(Self {
            kernel,
            align_hidden,
            align_out,
            c_in,
            c_out,
            kernel_elems,
        })
    }

    pub fn param_count(c_in: usize, c_out: usize, kernel_elems: usize) -> usize {
        kernel_elems * c_in * c_out
            + Dense::param_count(3, ALIGN_HIDDEN)
            + Dense::param_count(ALIGN_HIDDEN, kernel_elems)
    }

    /// Soft assignment `(n*k) x K` of each neighbor to the kernel elements.
    pub fn align<T: Scalar>(&self, g: &mut Graph<T>, p: &BoundParams, rel: Var) -> Result<Var> {
        let h = self.align_hidden.forward(g, p, rel)?;
        let h = g.relu(h);
        let logits = self.align_out.forward(g, p, h)?;
        Ok(g.softmax_last(logits)?)
    }

    /// `features` is `C_in x N`; returns `C_out x N`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        features: Var,
        hoods: &NeighborhoodSet,
        rel: Var,
    ) -> Result<Var> {
        let m = self.align(g, p, rel)?;
        apply_alignment(g, features, hoods, m, p.var(self.kernel))
    }
}

/// The aligned weighted sum:
/// `out[:, i] = sum_K (sum_j M[i, j, K] * features[:, n(i)_j]) . kernel[K]`.
///
/// `alignment` is `(N*k) x K`, `kernel` is `K x C_in x C_out`.
pub fn apply_alignment<T: Scalar>(
    g: &mut Graph<T>,
    features: Var,
    hoods: &NeighborhoodSet,
    alignment: Var,
    kernel: Var,
) -> Result<Var> {
    let fs = g.shape(features).to_vec();
    let ks = g.shape(kernel).to_vec();
    let (n, k) = (hoods.n, hoods.k);
    if fs.len() != 2 || fs[1] != n {
        return Err(CoreError::invalid(format!(
            "fkaconv: features {fs:?} for {n} points"
        )));
    }
    if ks.len() != 3 || ks[1] != fs[0] {
        return Err(CoreError::invalid(format!(
            "fkaconv: kernel {ks:?} for {} input channels",
            fs[0]
        )));
    }
    let (kk, c_in, c_out) = (ks[0], ks[1], ks[2]);
    if g.shape(alignment) != [n * k, kk] {
        return Err(CoreError::invalid(format!(
            "fkaconv: alignment {:?}, expected [{}, {kk}]",
            g.shape(alignment),
            n * k
        )));
    }
    let rows = g.transpose_last2(features)?;
    let gathered = g.gather_rows(rows, &hoods.neighbors)?;
    let gathered = g.reshape(gathered, &[n, k, c_in])?;
    let m = g.reshape(alignment, &[n, k, kk])?;
    let mt = g.transpose_last2(m)?;
    let aligned = g.bmm(mt, gathered)?;
    let aligned = g.reshape(aligned, &[n, kk * c_in])?;
    let w = g.reshape(kernel, &[kk * c_in, c_out])?;
    let out = g.matmul(aligned, w)?;
    Ok(g.transpose_last2(out)?)
}

/// Two alignment convolutions with a ReLU between; `C x N` in and out.
#[derive(Clone, Debug)]
pub struct FkaBlock {
    pub first: FkaParams,
    pub second: FkaParams,
}

impl FkaBlock {
    pub fn register<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        kernel_elems: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            first: FkaParams::register(
                store,
                &format!("{name}.fka1"),
                channels,
                channels,
                kernel_elems,
                rng,
            )?,
            second: FkaParams::register(
                store,
                &format!("{name}.fka2"),
                channels,
                channels,
                kernel_elems,
                rng,
            )?,
        })
    }

    pub fn param_count(channels: usize, kernel_elems: usize) -> usize {
        2 * FkaParams::param_count(channels, channels, kernel_elems)
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        p: &BoundParams,
        features: Var,
        hoods: &NeighborhoodSet,
    ) -> Result<Var> {
        let rel = hoods.rel_coords_var(g);
        let h = self.first.forward(g, p, features, hoods, rel)?;
        let h = g.relu(h);
        self.second.forward(g, p, h, hoods, rel)
    }
}
