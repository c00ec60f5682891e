//! Dense depth maps with a validity mask.

use crate::error::{CoreError, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
    mask: Vec<bool>,
}

impl DepthMap {
    /// Valid entries must be finite and positive; invalid ones are stored as 0.
    pub fn new(height: usize, width: usize, values: Vec<f64>, mask: Vec<bool>) -> Result<Self> {
        if values.len() != height * width || mask.len() != height * width {
            return Err(CoreError::invalid(format!(
                "depth map {height}x{width} with {} values and {} mask entries",
                values.len(),
                mask.len()
            )));
        }
        let mut values = values;
        for (i, (v, &m)) in values.iter_mut().zip(&mask).enumerate() {
            if m {
                if !(v.is_finite() && *v > 0.0) {
                    return Err(CoreError::invalid(format!(
                        "valid depth {v} at {i} is not positive"
                    )));
                }
            } else {
                *v = 0.0;
            }
        }
        Ok(Self {
            height,
            width,
            values,
            mask,
        })
    }

    /// Positive finite entries are valid, everything else is missing.
    pub fn from_values(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let mask = values.iter().map(|v| v.is_finite() && *v > 0.0).collect();
        Self::new(height, width, values, mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn is_valid(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.width + col]
    }

    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            values: self.values.iter().map(|v| v * factor).collect(),
            ..self.clone()
        }
    }

    /// 2x2 average over the valid entries of each window; a window without
    /// valid entries is invalid.
    pub fn pool2(&self) -> Result<Self> {
        if !self.height.is_multiple_of(2) || !self.width.is_multiple_of(2) {
            return Err(CoreError::invalid(format!(
                "cannot halve {}x{} depth map",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / 2, self.width / 2);
        let mut values = vec![0.0; h * w];
        let mut mask = vec![false; h * w];
        for r in 0..h {
            for c in 0..w {
                let (mut sum, mut n) = (0.0, 0);
                for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let (rr, cc) = (2 * r + dr, 2 * c + dc);
                    if self.is_valid(rr, cc) {
                        sum += self.at(rr, cc);
                        n += 1;
                    }
                }
                if n > 0 {
                    values[r * w + c] = sum / n as f64;
                    mask[r * w + c] = true;
                }
            }
        }
        Ok(Self {
            height: h,
            width: w,
            values,
            mask,
        })
    }

    /// `levels` maps, full resolution first.
    pub fn pyramid(&self, levels: usize) -> Result<Vec<Self>> {
        let mut out = vec![self.clone()];
        for _ in 1..levels {
            let next = out.last().expect("non-empty").pool2()?;
            out.push(next);
        }
        Ok(out)
    }
}
