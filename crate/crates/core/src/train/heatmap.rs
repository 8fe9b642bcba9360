//! Attention heatmaps: per-patch scores on the slide's patch grid, min-max
//! normalized, Gaussian smoothed, written as 8-bit PGM plus a CSV of the raw
//! scores.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    /// Row-major gray levels.
    pub pixels: Vec<u8>,
    /// Normalized and smoothed field before quantization.
    pub field: Vec<f64>,
}

impl Heatmap {
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

/// Normalized 1-D Gaussian weights over `[-ceil(3 sigma), ceil(3 sigma)]`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let w: Vec<f64> = (-radius..=radius)
        .map(|x| (-((x * x) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Separable convolution with edge clamping.
pub fn gaussian_blur(field: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            tmp[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * field[y * width + clamp(x as i64 + i as i64 - r, width)])
                .sum();
        }
    }
    let mut out = vec![0.0; field.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = k
                .iter()
                .enumerate()
                .map(|(i, w)| w * tmp[clamp(y as i64 + i as i64 - r, height) * width + x])
                .sum();
        }
    }
    out
}

fn validate(positions: &[(u32, u32)], scores: &[f64]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Export("slide has no patches".into()));
    }
    if positions.len() != scores.len() {
        return Err(Error::Export(format!("{} positions for {} scores", positions.len(), scores.len())));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Export(format!("score {i} is not finite")));
    }
    Ok(())
}

/// Rasterizes `scores` at grid `positions` (row, col) over the bounding box
/// of the positions. A constant score field normalizes to 1.
pub fn render(positions: &[(u32, u32)], scores: &[f64], sigma: f64) -> Result<Heatmap> {
    validate(positions, scores)?;
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::Export(format!("sigma must be non-negative, got {sigma}")));
    }
    let r0 = positions.iter().map(|p| p.0).min().expect("non-empty");
    let c0 = positions.iter().map(|p| p.1).min().expect("non-empty");
    let height = (positions.iter().map(|p| p.0).max().expect("non-empty") - r0) as usize + 1;
    let width = (positions.iter().map(|p| p.1).max().expect("non-empty") - c0) as usize + 1;
    let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut field = vec![0.0; width * height];
    for (&(r, c), &s) in positions.iter().zip(scores) {
        let v = if hi > lo { (s - lo) / (hi - lo) } else { 1.0 };
        field[(r - r0) as usize * width + (c - c0) as usize] = v;
    }
    let field = gaussian_blur(&field, width, height, sigma);
    let pixels = field.iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect();
    Ok(Heatmap {
        width,
        height,
        pixels,
        field,
    })
}

pub fn scores_csv(patch_ids: &[u32], positions: &[(u32, u32)], scores: &[f64]) -> String {
    let mut out = String::from("patch_id,row,col,score\n");
    for ((id, (r, c)), s) in patch_ids.iter().zip(positions).zip(scores) {
        let _ = writeln!(out, "{id},{r},{c},{s}");
    }
    out
}

/// The `ceil(0.1 N)` highest-scoring patch ids, by score then id.
pub fn top_decile(patch_ids: &[u32], scores: &[f64]) -> Vec<u32> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(patch_ids[a].cmp(&patch_ids[b])));
    let k = (scores.len() as f64 * 0.1).ceil() as usize;
    order.into_iter().take(k).map(|i| patch_ids[i]).collect()
}

/// Writes `<stem>.pgm` and `<stem>.csv` and returns the top-decile ids.
pub fn heatmap_export(dir: &Path, stem: &str, patch_ids: &[u32], positions: &[(u32, u32)], scores: &[f64], sigma: f64) -> Result<Vec<u32>> {
    if patch_ids.len() != scores.len() {
        return Err(Error::Export(format!("{} ids for {} scores", patch_ids.len(), scores.len())));
    }
    let map = render(positions, scores, sigma)?;
    fs::write(dir.join(format!("{stem}.pgm")), map.to_pgm())?;
    fs::write(dir.join(format!("{stem}.csv")), scores_csv(patch_ids, positions, scores))?;
    Ok(top_decile(patch_ids, scores))
}
