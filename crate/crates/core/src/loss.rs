//! Multi-scale training objective.
//!
//! Per scale the composite is `l_log + mu * l_grad + theta * l_norm`, and the
//! total weighs scale `i` (0 = finest) by `gamma[i]`. Predictions are `1 x h x w`
//! graph values; targets are constant [`DepthMap`]s.

use sparsefuse_tensor::{Graph, Scalar, Tensor, Var};

use crate::depth::DepthMap;
use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    /// Per-scale weights, finest first.
    pub gamma: Vec<f64>,
    pub mu: f64,
    pub theta: f64,
    pub alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            gamma: vec![1.0, 0.75, 0.5, 0.25, 0.125],
            mu: 1.0,
            theta: 1.0,
            alpha: 0.5,
        }
    }
}

impl LossWeights {
    /// Default weights truncated (or extended by halving) to `scales` entries.
    pub fn for_scales(scales: usize) -> Self {
        let mut w = Self::default();
        while w.gamma.len() < scales {
            let last = *w.gamma.last().expect("non-empty");
            w.gamma.push(last / 2.0);
        }
        w.gamma.truncate(scales);
        w
    }

    pub fn validate(&self) -> Result<()> {
        let all = self
            .gamma
            .iter()
            .chain([&self.mu, &self.theta, &self.alpha]);
        if self.gamma.is_empty() || all.into_iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(CoreError::config(
                "loss weights must be positive and finite",
            ));
        }
        Ok(())
    }
}

fn check_shape<T: Scalar>(g: &Graph<T>, pred: Var, gt: &DepthMap, what: &str) -> Result<()> {
    let s = g.shape(pred);
    if s != [1, gt.height(), gt.width()] {
        return Err(CoreError::invalid(format!(
            "{what}: prediction {s:?} against target {}x{}",
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

fn constant<T: Scalar>(
    g: &mut Graph<T>,
    h: usize,
    w: usize,
    f: impl Fn(usize, usize) -> f64,
) -> Var {
    g.constant(Tensor::from_fn(&[1, h, w], |i| T::of(f(i / w, i % w))))
}

/// Masked sum of `x` divided by the mask count.
fn masked_mean<T: Scalar>(g: &mut Graph<T>, x: Var, mask: Var, count: usize) -> Result<Var> {
    let m = g.mul(x, mask)?;
    let s = g.sum(m);
    Ok(g.scale(s, 1.0 / count as f64))
}

/// Mean over valid pixels of `ln(|p - g| + alpha) - ln(alpha)`.
pub fn l_log<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &DepthMap, alpha: f64) -> Result<Var> {
    check_shape(g, pred, gt, "l_log")?;
    let count = gt.valid_count();
    if count == 0 {
        return Err(CoreError::Empty("l_log mask"));
    }
    let (h, w) = (gt.height(), gt.width());
    let target = constant(g, h, w, |r, c| gt.at(r, c));
    let mask = constant(g, h, w, |r, c| if gt.is_valid(r, c) { 1.0 } else { 0.0 });
    let d = g.sub(pred, target)?;
    let d = g.abs(d);
    let d = g.add_scalar(d, alpha);
    let l = g.log(d)?;
    let l = g.add_scalar(l, -alpha.ln());
    masked_mean(g, l, mask, count)
}

/// Forward differences of `x` along `axis` (1 = rows, 2 = columns) over the
/// region `[0, h - dh) x [0, w - dw)` shared by both axes when `both` is set.
fn forward_diff<T: Scalar>(g: &mut Graph<T>, x: Var, axis: usize, both: bool) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (h, w) = (s[1], s[2]);
    let (hi, lo) = (
        g.narrow(x, axis, 1, s[axis] - 1)?,
        g.narrow(x, axis, 0, s[axis] - 1)?,
    );
    let d = g.sub(hi, lo)?;
    if !both {
        return Ok(d);
    }
    let d = if axis == 1 {
        g.narrow(d, 2, 0, w - 1)?
    } else {
        d
    };
    Ok(if axis == 2 {
        g.narrow(d, 1, 0, h - 1)?
    } else {
        d
    })
}

/// Pooled mean of `|forward difference of (pred - gt)|` over both axes,
/// counting only pairs whose two pixels are valid.
pub fn l_grad<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &DepthMap) -> Result<Var> {
    check_shape(g, pred, gt, "l_grad")?;
    let (h, w) = (gt.height(), gt.width());
    let target = constant(g, h, w, |r, c| gt.at(r, c));
    let e = g.sub(pred, target)?;
    let mut terms = Vec::new();
    let mut count = 0;
    for (axis, dh, dw) in [(2usize, 0usize, 1usize), (1, 1, 0)] {
        if h <= dh || w <= dw {
            continue;
        }
        let valid = |r: usize, c: usize| gt.is_valid(r, c) && gt.is_valid(r + dh, c + dw);
        let n = (0..h - dh)
            .flat_map(|r| (0..w - dw).map(move |c| (r, c)))
            .filter(|&(r, c)| valid(r, c))
            .count();
        if n == 0 {
            continue;
        }
        count += n;
        let d = forward_diff(g, e, axis, false)?;
        let d = g.abs(d);
        let mask = constant(
            g,
            h - dh,
            w - dw,
            |r, c| if valid(r, c) { 1.0 } else { 0.0 },
        );
        let m = g.mul(d, mask)?;
        terms.push(g.sum(m));
    }
    if count == 0 {
        return Err(CoreError::Empty("l_grad valid pairs"));
    }
    let mut total = terms[0];
    for t in &terms[1..] {
        total = g.add(total, *t)?;
    }
    Ok(g.scale(total, 1.0 / count as f64))
}

/// Mean of `1 - <n_pred, n_gt>` with `n = normalize(-dx, -dy, 1)`, over
/// pixels whose right and lower neighbors are valid too.
pub fn l_norm<T: Scalar>(g: &mut Graph<T>, pred: Var, gt: &DepthMap) -> Result<Var> {
    check_shape(g, pred, gt, "l_norm")?;
    let (h, w) = (gt.height(), gt.width());
    let valid =
        |r: usize, c: usize| gt.is_valid(r, c) && gt.is_valid(r, c + 1) && gt.is_valid(r + 1, c);
    let count = if h < 2 || w < 2 {
        0
    } else {
        (0..h - 1)
            .flat_map(|r| (0..w - 1).map(move |c| (r, c)))
            .filter(|&(r, c)| valid(r, c))
            .count()
    };
    if count == 0 {
        return Err(CoreError::Empty("l_norm mask"));
    }
    let gdx = |r: usize, c: usize| gt.at(r, c + 1) - gt.at(r, c);
    let gdy = |r: usize, c: usize| gt.at(r + 1, c) - gt.at(r, c);
    let (hh, ww) = (h - 1, w - 1);
    let gx = constant(g, hh, ww, gdx);
    let gy = constant(g, hh, ww, gdy);
    let gnorm = constant(g, hh, ww, |r, c| {
        (gdx(r, c).powi(2) + gdy(r, c).powi(2) + 1.0).sqrt()
    });
    let mask = constant(g, hh, ww, |r, c| if valid(r, c) { 1.0 } else { 0.0 });

    let px = forward_diff(g, pred, 2, true)?;
    let py = forward_diff(g, pred, 1, true)?;
    let a = g.mul(px, gx)?;
    let b = g.mul(py, gy)?;
    let dot = g.add(a, b)?;
    let dot = g.add_scalar(dot, 1.0);
    let sx = g.square(px);
    let sy = g.square(py);
    let sq = g.add(sx, sy)?;
    let sq = g.add_scalar(sq, 1.0);
    let pnorm = g.sqrt(sq)?;
    let denom = g.mul(pnorm, gnorm)?;
    let cos = g.div(dot, denom)?;
    let term = g.scale(cos, -1.0);
    let term = g.add_scalar(term, 1.0);
    masked_mean(g, term, mask, count)
}

/// `l_log + mu * l_grad + theta * l_norm` at one scale.
pub fn composite<T: Scalar>(
    g: &mut Graph<T>,
    pred: Var,
    gt: &DepthMap,
    weights: &LossWeights,
) -> Result<Var> {
    let a = l_log(g, pred, gt, weights.alpha)?;
    let b = l_grad(g, pred, gt)?;
    let c = l_norm(g, pred, gt)?;
    let b = g.scale(b, weights.mu);
    let c = g.scale(c, weights.theta);
    let s = g.add(a, b)?;
    Ok(g.add(s, c)?)
}

/// `sum_i gamma[i] * composites[i]`.
pub fn combine_scales<T: Scalar>(
    g: &mut Graph<T>,
    composites: &[Var],
    weights: &LossWeights,
) -> Result<Var> {
    if composites.len() != weights.gamma.len() || composites.is_empty() {
        return Err(CoreError::invalid(format!(
            "{} scales against {} loss weights",
            composites.len(),
            weights.gamma.len()
        )));
    }
    let mut total = g.scale(composites[0], weights.gamma[0]);
    for (c, &gamma) in composites.iter().zip(&weights.gamma).skip(1) {
        let t = g.scale(*c, gamma);
        total = g.add(total, t)?;
    }
    Ok(total)
}

/// The full objective over per-scale predictions and a target pyramid, both
/// finest first.
pub fn total_loss<T: Scalar>(
    g: &mut Graph<T>,
    per_scale: &[Var],
    pyramid: &[DepthMap],
    weights: &LossWeights,
) -> Result<Var> {
    weights.validate()?;
    if per_scale.len() != pyramid.len() || per_scale.len() != weights.gamma.len() {
        return Err(CoreError::invalid(format!(
            "{} predictions, {} targets, {} loss weights",
            per_scale.len(),
            pyramid.len(),
            weights.gamma.len()
        )));
    }
    let comps = per_scale
        .iter()
        .zip(pyramid)
        .map(|(&p, t)| composite(g, p, t, weights))
        .collect::<Result<Vec<_>>>()?;
    combine_scales(g, &comps, weights)
}
