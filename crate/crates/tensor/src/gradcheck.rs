//! Central finite-difference verification of analytic gradients.
//!
//! Checks run in `f64` regardless of the precision used for training.

use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Finite-difference step.
    pub eps: f64,
    /// Maximum admissible relative error.
    pub tol: f64,
    /// Lower bound of the relative-error denominator, so gradients that are
    /// numerically zero are compared in absolute terms.
    pub floor: f64,
    /// Check at most this many coordinates per input (evenly strided).
    pub max_coords: Option<usize>,
    /// Negative-control hook: perturbs the analytic gradient by 10%.
    pub corrupt: bool,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tol: 1e-3,
            floor: 1e-4,
            max_coords: None,
            corrupt: false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// `(input, flat index)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<28} {} max_rel_err={:.3e} (tol {:.1e}, {} coords",
            self.name,
            if self.passed { "PASS" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.checked
        )?;
        if let Some((i, j)) = self.worst {
            write!(
                f,
                ", worst input {i}[{j}] analytic={:.6e} numeric={:.6e}",
                self.worst_analytic, self.worst_numeric
            )?;
        }
        write!(f, ")")
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_value(&g, out)
}

fn scalar_value(g: &Graph<f64>, v: Var) -> Result<f64> {
    let t = g.value(v);
    if t.numel() != 1 {
        return Err(TensorError::invalid(
            "grad_check",
            format!("function must return a scalar, got shape {:?}", t.shape()),
        ));
    }
    Ok(t.item())
}

fn coords(n: usize, max: Option<usize>) -> Vec<usize> {
    match max {
        Some(m) if m < n && m > 0 => {
            let stride = n as f64 / m as f64;
            (0..m).map(|i| ((i as f64 + 0.5) * stride) as usize).collect()
        }
        _ => (0..n).collect(),
    }
}

/// Compares the analytic gradient of scalar `f` with central differences
/// `(f(x+eps) - f(x-eps)) / (2 eps)` for every (or a strided subset of the)
/// coordinates of every input.
pub fn grad_check<F>(
    name: &str,
    f: F,
    inputs: &[Tensor<f64>],
    opts: &GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out)?;

    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
        tol: opts.tol,
        passed: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads
            .get(*v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()));
        for j in coords(inputs[i].numel(), opts.max_coords) {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + opts.eps;
            let plus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig - opts.eps;
            let minus = evaluate(&f, &work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * opts.eps);
            let mut a = analytic.data()[j];
            if opts.corrupt {
                a = a * 1.1 + 1e-2;
            }
            let err = relative_error(a, numeric, opts.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = err;
                report.worst = Some((i, j));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_err <= opts.tol && report.max_rel_err.is_finite();
    Ok(report)
}
