//! Static renderings: colorized maps, line profiles and point overlays.

use std::fmt::Write as _;

/// Stops of a perceptually ordered dark-to-bright palette.
const PALETTE: [[f64; 3]; 5] = [
    [68.0, 1.0, 84.0],
    [59.0, 82.0, 139.0],
    [33.0, 145.0, 140.0],
    [94.0, 201.0, 98.0],
    [253.0, 231.0, 37.0],
];

/// Palette color of `t` in `[0, 1]`, as planar-ready unit floats.
pub fn colormap(t: f64) -> [f64; 3] {
    let t = if t.is_finite() { t.clamp(0.0, 1.0) } else { 0.0 };
    let x = t * (PALETTE.len() - 1) as f64;
    let i = (x.floor() as usize).min(PALETTE.len() - 2);
    let f = x - i as f64;
    let mut out = [0.0; 3];
    for ch in 0..3 {
        out[ch] = (PALETTE[i][ch] * (1.0 - f) + PALETTE[i + 1][ch] * f) / 255.0;
    }
    out
}

/// Planar rgb of `values` mapped through the palette over `[lo, hi]`.
pub fn colorize(values: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let n = values.len();
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut rgb = vec![0.0; 3 * n];
    for (i, &v) in values.iter().enumerate() {
        let c = colormap((v - lo) / span);
        for ch in 0..3 {
            rgb[ch * n + i] = c[ch];
        }
    }
    rgb
}

/// Finite minimum and maximum, or `(0, 1)` when nothing is finite.
pub fn finite_range(values: &[f64]) -> (f64, f64) {
    let (lo, hi) = values
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if lo.is_finite() {
        (lo, hi)
    } else {
        (0.0, 1.0)
    }
}

/// Pixels on the segment from `a` to `b` (inclusive), one per step along the
/// longer axis.
pub fn line_pixels(a: (usize, usize), b: (usize, usize)) -> Vec<(usize, usize)> {
    let (dr, dc) = (b.0 as f64 - a.0 as f64, b.1 as f64 - a.1 as f64);
    let steps = dr.abs().max(dc.abs()) as usize;
    if steps == 0 {
        return vec![a];
    }
    (0..=steps)
        .map(|s| {
            let t = s as f64 / steps as f64;
            (
                (a.0 as f64 + t * dr).round() as usize,
                (a.1 as f64 + t * dc).round() as usize,
            )
        })
        .collect()
}

/// CSV of depth (and confidence) sampled along a segment.
pub fn profile_csv(
    pixels: &[(usize, usize)],
    width: usize,
    depth: &[f64],
    confidence: Option<&[f64]>,
) -> String {
    let mut s = String::from("index,row,col,depth,confidence\n");
    for (k, &(r, c)) in pixels.iter().enumerate() {
        let i = r * width + c;
        let conf = confidence.map(|v| format!("{:.6e}", v[i])).unwrap_or_default();
        let _ = writeln!(s, "{k},{r},{c},{:.6e},{conf}", depth[i]);
    }
    s
}

/// The image darkened to half brightness with each point's pixel in red.
pub fn point_overlay(rgb: &[f64], width: usize, pixels: &[(usize, usize)]) -> Vec<f64> {
    let n = rgb.len() / 3;
    let mut out: Vec<f64> = rgb.iter().map(|v| 0.5 * v).collect();
    for &(r, c) in pixels {
        let i = r * width + c;
        out[i] = 1.0;
        out[n + i] = 0.0;
        out[2 * n + i] = 0.0;
    }
    out
}
