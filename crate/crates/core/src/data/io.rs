//! Image, depth-map and manifest file formats.
//!
//! - RGB: 8-bit PNG (gray, gray+alpha, rgb or rgba on input; rgb on output).
//! - Depth PNG: 16-bit grayscale, `depth = value * scale` where `scale` is read
//!   from a sidecar file `<path>.scale`; value 0 marks a missing pixel.
//! - Float map: `Pf\n<width> <height>\n<scale>\n` followed by 32-bit floats,
//!   rows bottom-up. A negative scale means little-endian. Non-positive or
//!   non-finite values mark missing pixels.
//! - Manifest: one `rgb depth [points]` triple per line, paths relative to
//!   the manifest. An optional `intrinsics = fx fy cx cy` line applies to the
//!   entries after it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use super::{Sample, SYNTH_FOV_DEG};
use crate::depth::DepthMap;
use crate::error::{CoreError, Result};
use crate::geometry::{read_point_file, CameraIntrinsics, PointCloud};

fn png_err(path: &Path, e: impl std::fmt::Display) -> CoreError {
    CoreError::Image(format!("{}: {e}", path.display()))
}

/// Planar rgb in `[0, 1]` plus `(height, width)`.
pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    let path = path.as_ref();
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => return Err(png_err(path, format!("unsupported color type {other:?}"))),
    };
    let mut rgb = vec![0.0; 3 * h * w];
    for r in 0..h {
        let line = &buf[r * info.line_size..];
        for c in 0..w {
            let px = &line[c * stride..];
            for ch in 0..3 {
                let v = if stride < 3 { px[0] } else { px[ch] };
                rgb[ch * h * w + r * w + c] = v as f64 / 255.0;
            }
        }
    }
    Ok((rgb, h, w))
}

/// Writes planar rgb in `[0, 1]`, rounded to 8 bits.
pub fn write_rgb_png(path: impl AsRef<Path>, rgb: &[f64], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    if rgb.len() != 3 * height * width {
        return Err(CoreError::invalid(format!(
            "rgb has {} values for a {height}x{width} image",
            rgb.len()
        )));
    }
    let n = height * width;
    let mut bytes = Vec::with_capacity(3 * n);
    for i in 0..n {
        for ch in 0..3 {
            bytes.push((rgb[ch * n + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Writes any single-channel 8-bit image (used for renderings).
pub fn write_gray_png(path: impl AsRef<Path>, values: &[u8], height: usize, width: usize) -> Result<()> {
    let path = path.as_ref();
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(values).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))
}

/// Sidecar holding the depth PNG scale factor.
pub fn scale_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}

fn read_scale(path: &Path) -> Result<f64> {
    let side = scale_path(path);
    let text = std::fs::read_to_string(&side)?;
    let name = side.display().to_string();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let value = line.strip_prefix("scale").map(|r| r.trim_start().trim_start_matches('=')).unwrap_or(line);
        let parsed: f64 = value.trim().parse().map_err(|_| CoreError::Parse {
            source_name: name.clone(),
            line: i + 1,
            msg: format!("bad scale {value:?}"),
        })?;
        if !(parsed > 0.0 && parsed.is_finite()) {
            return Err(CoreError::Parse {
                source_name: name,
                line: i + 1,
                msg: format!("scale {parsed} must be positive"),
            });
        }
        return Ok(parsed);
    }
    Err(CoreError::Parse {
        source_name: name,
        line: 0,
        msg: "no scale".into(),
    })
}

/// Reads a 16-bit depth PNG and its sidecar scale.
pub fn read_depth_png(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    let scale = read_scale(path)?;
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(png_err(
            path,
            format!("expected 16-bit grayscale, got {:?} {:?}", info.bit_depth, info.color_type),
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let mut values = Vec::with_capacity(h * w);
    let mut mask = Vec::with_capacity(h * w);
    for r in 0..h {
        let line = &buf[r * info.line_size..];
        for c in 0..w {
            let v = u16::from_be_bytes([line[2 * c], line[2 * c + 1]]);
            values.push(v as f64 * scale);
            mask.push(v > 0);
        }
    }
    DepthMap::new(h, w, values, mask)
}

/// Writes `depth / scale` rounded to 16 bits plus the sidecar scale file.
pub fn write_depth_png(path: impl AsRef<Path>, depth: &DepthMap, scale: f64) -> Result<()> {
    let path = path.as_ref();
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(CoreError::invalid(format!("depth scale {scale} must be positive")));
    }
    let mut bytes = Vec::with_capacity(2 * depth.values().len());
    for (i, (&v, &m)) in depth.values().iter().zip(depth.mask()).enumerate() {
        let q = if m { (v / scale).round() } else { 0.0 };
        if !(0.0..=65535.0).contains(&q) || (m && q == 0.0) {
            return Err(CoreError::invalid(format!(
                "depth {v} at {i} does not fit 16 bits with scale {scale}"
            )));
        }
        bytes.extend_from_slice(&(q as u16).to_be_bytes());
    }
    let mut enc = png::Encoder::new(
        BufWriter::new(File::create(path)?),
        depth.width() as u32,
        depth.height() as u32,
    );
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(&bytes).map_err(|e| png_err(path, e))?;
    writer.finish().map_err(|e| png_err(path, e))?;
    std::fs::write(scale_path(path), format!("scale = {scale}\n"))?;
    Ok(())
}

/// Encodes a depth map as a little-endian float map. Missing pixels are
/// written as 0.
pub fn encode_float_map(depth: &DepthMap) -> Vec<u8> {
    let (h, w) = (depth.height(), depth.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    for r in (0..h).rev() {
        for c in 0..w {
            let v = if depth.is_valid(r, c) { depth.at(r, c) as f32 } else { 0.0 };
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses a float map; errors carry the byte offset of the problem.
pub fn decode_float_map(bytes: &[u8], source_name: &str) -> Result<DepthMap> {
    let err = |offset: usize, msg: String| CoreError::Format {
        source_name: source_name.to_string(),
        offset,
        msg,
    };
    // Header lines: magic, size, scale.
    let mut pos = 0;
    let mut next_line = |what: &str| -> Result<(usize, &str)> {
        let start = pos;
        let end = bytes[start..]
            .iter()
            .position(|&b| b == b'\n')
            .map(|i| start + i)
            .ok_or_else(|| err(start, format!("unterminated {what}")))?;
        pos = end + 1;
        let text = std::str::from_utf8(&bytes[start..end]).map_err(|_| err(start, format!("{what} is not text")))?;
        Ok((start, text.trim()))
    };
    let (off, magic) = next_line("magic")?;
    if magic != "Pf" {
        return Err(err(off, format!("expected magic \"Pf\", found {magic:?}")));
    }
    let (off, dims) = next_line("size line")?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    let parse_dim = |s: &str| s.parse::<usize>().ok().filter(|&v| v > 0);
    let (w, h) = match parts.as_slice() {
        [a, b] => match (parse_dim(a), parse_dim(b)) {
            (Some(w), Some(h)) => (w, h),
            _ => return Err(err(off, format!("bad size {dims:?}"))),
        },
        _ => return Err(err(off, format!("expected \"width height\", found {dims:?}"))),
    };
    let (off, scale_text) = next_line("scale line")?;
    let scale: f64 = scale_text
        .parse()
        .ok()
        .filter(|s: &f64| *s != 0.0 && s.is_finite())
        .ok_or_else(|| err(off, format!("bad scale {scale_text:?}")))?;
    let little = scale < 0.0;
    let data = &bytes[pos..];
    let need = 4 * w * h;
    if data.len() != need {
        return Err(err(
            pos + data.len().min(need),
            format!("expected {need} data bytes, found {}", data.len()),
        ));
    }
    let mut values = vec![0.0; w * h];
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (r, c) = (h - 1 - k / w, k % w);
        values[r * w + c] = v as f64;
    }
    let mask = values.iter().map(|v| *v > 0.0 && v.is_finite()).collect();
    let values = values.into_iter().map(|v| if v > 0.0 && v.is_finite() { v } else { 0.0 }).collect();
    DepthMap::new(h, w, values, mask)
}

pub fn read_float_map(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    decode_float_map(&std::fs::read(path)?, &path.display().to_string())
}

pub fn write_float_map(path: impl AsRef<Path>, depth: &DepthMap) -> Result<()> {
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&encode_float_map(depth))?;
    f.flush()?;
    Ok(())
}

/// Dispatches on extension: `.pfm` is a float map, anything else a depth PNG.
pub fn read_depth(path: impl AsRef<Path>) -> Result<DepthMap> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("pfm") => read_float_map(path),
        _ => read_depth_png(path),
    }
}

/// Loads one sample. Without intrinsics, a centered camera with the
/// synthetic field of view is assumed.
pub fn load_sample(
    rgb_path: &Path,
    depth_path: &Path,
    points_path: Option<&Path>,
    intrinsics: Option<[f64; 4]>,
) -> Result<Sample> {
    let (rgb, h, w) = read_rgb_png(rgb_path)?;
    let gt = read_depth(depth_path)?;
    if (gt.height(), gt.width()) != (h, w) {
        return Err(CoreError::invalid(format!(
            "{} is {h}x{w} but {} is {}x{}",
            rgb_path.display(),
            depth_path.display(),
            gt.height(),
            gt.width()
        )));
    }
    let intrinsics = match intrinsics {
        Some([fx, fy, cx, cy]) => CameraIntrinsics::new(fx, fy, cx, cy, w, h)?,
        None => CameraIntrinsics::centered(w, h, SYNTH_FOV_DEG),
    };
    let cloud = match points_path {
        Some(p) => read_point_file(p)?,
        None => PointCloud::empty(),
    };
    let id = rgb_path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let sample = Sample {
        id,
        rgb,
        gt,
        cloud,
        intrinsics,
    };
    sample.validate()?;
    Ok(sample)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub points: Option<PathBuf>,
    pub intrinsics: Option<[f64; 4]>,
}

impl ManifestEntry {
    pub fn load(&self) -> Result<Sample> {
        load_sample(&self.rgb, &self.depth, self.points.as_deref(), self.intrinsics)
    }
}

/// Parses manifest text; relative paths are joined onto `base`.
pub fn parse_manifest(text: &str, base: &Path, source_name: &str) -> Result<Vec<ManifestEntry>> {
    let mut intrinsics = None;
    let mut out = Vec::new();
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
        if let Some(rest) = line.strip_prefix("intrinsics") {
            let rest = rest.trim_start().strip_prefix('=').ok_or_else(|| parse_err("expected intrinsics = fx fy cx cy".into()))?;
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(format!("bad number {t:?}"))))
                .collect::<Result<_>>()?;
            let arr: [f64; 4] = vals
                .try_into()
                .map_err(|v: Vec<f64>| parse_err(format!("expected 4 intrinsics, found {}", v.len())))?;
            intrinsics = Some(arr);
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if !(2..=3).contains(&parts.len()) {
            return Err(parse_err(format!("expected 2 or 3 paths, found {}", parts.len())));
        }
        out.push(ManifestEntry {
            rgb: base.join(parts[0]),
            depth: base.join(parts[1]),
            points: parts.get(2).map(|p| base.join(p)),
            intrinsics,
        });
    }
    Ok(out)
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, base, &path.display().to_string())
}

/// Writes `samples` as rgb png, float map and point file triples under
/// `dir`, plus a manifest listing them. Returns the manifest path.
pub fn write_dataset(dir: &Path, samples: &[Sample]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = String::new();
    let mut last_k: Option<[f64; 4]> = None;
    for s in samples {
        let k = [s.intrinsics.fx, s.intrinsics.fy, s.intrinsics.cx, s.intrinsics.cy];
        if last_k != Some(k) {
            manifest.push_str(&format!("intrinsics = {} {} {} {}\n", k[0], k[1], k[2], k[3]));
            last_k = Some(k);
        }
        let rgb = format!("{}.png", s.id);
        let depth = format!("{}.pfm", s.id);
        write_rgb_png(dir.join(&rgb), &s.rgb, s.height(), s.width())?;
        write_float_map(dir.join(&depth), &s.gt)?;
        if s.cloud.is_empty() {
            manifest.push_str(&format!("{rgb} {depth}\n"));
        } else {
            let pts = format!("{}.xyz", s.id);
            crate::geometry::write_point_file(dir.join(&pts), &s.cloud)?;
            manifest.push_str(&format!("{rgb} {depth} {pts}\n"));
        }
    }
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest)?;
    Ok(path)
}
