//! Depth evaluation metrics and their serialization.

use std::fmt::Write as _;

use crate::error::{CoreError, Result};

/// Predictions are clamped to this floor before inversion.
pub const PRED_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricReport {
    pub rel: f64,
    pub rmse: f64,
    pub mae: f64,
    pub irmse: f64,
    pub imae: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
}

/// Compares `pred` against `gt` where `mask` is set. Sums run in index order.
pub fn evaluate(pred: &[f64], gt: &[f64], mask: &[bool]) -> Result<MetricReport> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(CoreError::invalid(format!(
            "evaluate: {} predictions, {} targets, {} mask entries",
            pred.len(),
            gt.len(),
            mask.len()
        )));
    }
    let mut acc = [0.0f64; 8];
    let mut n = 0usize;
    for i in (0..gt.len()).filter(|&i| mask[i]) {
        let (p, g) = (pred[i], gt[i]);
        if !(g > 0.0 && g.is_finite() && p.is_finite()) {
            return Err(CoreError::invalid(format!(
                "evaluate: pred {p}, gt {g} at {i}"
            )));
        }
        let d = p - g;
        let pi = 1.0 / p.max(PRED_FLOOR);
        let gi = 1.0 / g;
        let ratio = (p / g).max(g / p);
        acc[0] += d.abs() / g;
        acc[1] += d * d;
        acc[2] += d.abs();
        acc[3] += (pi - gi) * (pi - gi);
        acc[4] += (pi - gi).abs();
        for (j, t) in [1.25, 1.25f64.powi(2), 1.25f64.powi(3)].iter().enumerate() {
            if ratio < *t {
                acc[5 + j] += 1.0;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(CoreError::Empty("evaluation mask"));
    }
    let m = n as f64;
    Ok(MetricReport {
        rel: acc[0] / m,
        rmse: (acc[1] / m).sqrt(),
        mae: acc[2] / m,
        irmse: (acc[3] / m).sqrt(),
        imae: acc[4] / m,
        delta1: acc[5] / m,
        delta2: acc[6] / m,
        delta3: acc[7] / m,
        pixel_count: n,
    })
}

/// Six significant digits in scientific notation.
pub fn fmt6(v: f64) -> String {
    format!("{v:.5e}")
}

impl MetricReport {
    pub const FIELDS: [&'static str; 9] = [
        "rel",
        "rmse",
        "mae",
        "irmse",
        "imae",
        "delta1",
        "delta2",
        "delta3",
        "pixel_count",
    ];

    fn values(&self) -> [f64; 8] {
        [
            self.rel,
            self.rmse,
            self.mae,
            self.irmse,
            self.imae,
            self.delta1,
            self.delta2,
            self.delta3,
        ]
    }

    /// One `key = value` line per metric.
    pub fn to_key_values(&self) -> String {
        let mut s = String::new();
        for (k, v) in Self::FIELDS.iter().zip(self.values()) {
            let _ = writeln!(s, "{k} = {}", fmt6(v));
        }
        let _ = writeln!(s, "pixel_count = {}", self.pixel_count);
        s
    }

    pub fn from_key_values(text: &str, source_name: &str) -> Result<Self> {
        let mut vals = [None::<f64>; 9];
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |msg: String| CoreError::Parse {
                source_name: source_name.to_string(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| parse_err("expected key = value".into()))?;
            let slot = Self::FIELDS
                .iter()
                .position(|f| *f == k.trim())
                .ok_or_else(|| parse_err(format!("unknown metric {:?}", k.trim())))?;
            let v: f64 = v
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("bad number {:?}", v.trim())))?;
            vals[slot] = Some(v);
        }
        let get = |i: usize| {
            vals[i].ok_or_else(|| CoreError::Parse {
                source_name: source_name.to_string(),
                line: 0,
                msg: format!("missing {}", Self::FIELDS[i]),
            })
        };
        Ok(Self {
            rel: get(0)?,
            rmse: get(1)?,
            mae: get(2)?,
            irmse: get(3)?,
            imae: get(4)?,
            delta1: get(5)?,
            delta2: get(6)?,
            delta3: get(7)?,
            pixel_count: get(8)? as usize,
        })
    }

    pub fn csv_header() -> String {
        Self::FIELDS.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.values().iter().map(|v| fmt6(*v)).collect();
        cols.push(self.pixel_count.to_string());
        cols.join(",")
    }

    /// Pixel-weighted mean of per-image reports.
    pub fn pooled(reports: &[MetricReport]) -> Result<MetricReport> {
        let total: usize = reports.iter().map(|r| r.pixel_count).sum();
        if total == 0 {
            return Err(CoreError::Empty("metric reports"));
        }
        let mut mean = [0.0; 8];
        let mut sq = [0.0; 2];
        for r in reports {
            let w = r.pixel_count as f64 / total as f64;
            for (m, v) in mean.iter_mut().zip(r.values()) {
                *m += w * v;
            }
            sq[0] += w * r.rmse * r.rmse;
            sq[1] += w * r.irmse * r.irmse;
        }
        Ok(MetricReport {
            rel: mean[0],
            rmse: sq[0].sqrt(),
            mae: mean[2],
            irmse: sq[1].sqrt(),
            imae: mean[4],
            delta1: mean[5],
            delta2: mean[6],
            delta3: mean[7],
            pixel_count: total,
        })
    }
}

/// One row of a sparsity sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub points: usize,
    pub pattern: String,
    pub seed: u64,
    pub report: MetricReport,
}

/// Evaluates `predict(sample_index, count, seed)` over `samples` inputs for
/// every count. Each row uses seed `base_seed + row index` so rows are
/// reproducible on their own.
pub fn sweep<F>(
    counts: &[usize],
    pattern: &str,
    samples: usize,
    base_seed: u64,
    mut predict: F,
) -> Result<Vec<SweepRow>>
where
    F: FnMut(usize, usize, u64) -> Result<(Vec<f64>, Vec<f64>, Vec<bool>)>,
{
    let mut rows = Vec::with_capacity(counts.len());
    for (row, &count) in counts.iter().enumerate() {
        let seed = base_seed + row as u64;
        let mut reports = Vec::with_capacity(samples);
        for i in 0..samples {
            let (p, g, m) = predict(i, count, seed)?;
            reports.push(evaluate(&p, &g, &m)?);
        }
        rows.push(SweepRow {
            points: count,
            pattern: pattern.to_string(),
            seed,
            report: MetricReport::pooled(&reports)?,
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = format!("points,pattern,seed,{}\n", MetricReport::csv_header());
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{}",
            r.points,
            r.pattern,
            r.seed,
            r.report.csv_row()
        );
    }
    s
}
