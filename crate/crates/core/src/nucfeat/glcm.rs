//! Gray-level co-occurrence matrices and Haralick-style summaries.

use super::{FeatureError, GrayTile};

pub const TEXTURE_LEN: usize = 5;
pub const DEFAULT_LEVELS: usize = 8;
/// (row, col) offsets at distance 1: 0°, 90°, 45°, 135°.
pub const DEFAULT_OFFSETS: [(i32, i32); 4] = [(0, 1), (1, 0), (1, 1), (1, -1)];

/// Symmetric, normalized co-occurrence matrix (`levels x levels`, row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct Glcm {
    levels: usize,
    probs: Vec<f64>,
}

impl Glcm {
    /// Builds a matrix from raw probabilities (used by tests and callers that
    /// already have one).
    pub fn from_probs(levels: usize, probs: Vec<f64>) -> Self {
        assert_eq!(probs.len(), levels * levels);
        Self { levels, probs }
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.levels + j]
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

/// Uniform quantization of 0..=255 into `levels` bins.
pub fn quantize(value: u8, levels: usize) -> usize {
    value as usize * levels / 256
}

pub fn glcm(tile: &GrayTile, levels: usize, offsets: &[(i32, i32)]) -> Result<Glcm, FeatureError> {
    let (h, w) = (tile.height as i64, tile.width as i64);
    if h < 2 || w < 2 || levels < 2 || offsets.is_empty() {
        return Err(FeatureError::TileTooSmall {
            nucleus: None,
            width: tile.width,
            height: tile.height,
        });
    }
    let q: Vec<usize> = tile.pixels.iter().map(|&v| quantize(v, levels)).collect();
    let mut counts = vec![0u64; levels * levels];
    for &(dr, dc) in offsets {
        let (dr, dc) = (dr as i64, dc as i64);
        if dr.abs() >= h || dc.abs() >= w {
            return Err(FeatureError::TileTooSmall {
                nucleus: None,
                width: tile.width,
                height: tile.height,
            });
        }
        for r in 0.max(-dr)..h.min(h - dr) {
            for c in 0.max(-dc)..w.min(w - dc) {
                let a = q[(r * w + c) as usize];
                let b = q[((r + dr) * w + c + dc) as usize];
                counts[a * levels + b] += 1;
                counts[b * levels + a] += 1;
            }
        }
    }
    let total: u64 = counts.iter().sum();
    let probs = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(Glcm { levels, probs })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TextureStats {
    pub contrast: f64,
    pub energy: f64,
    pub homogeneity: f64,
    pub correlation: f64,
    pub entropy: f64,
}

impl TextureStats {
    pub fn to_array(&self) -> [f64; TEXTURE_LEN] {
        [self.contrast, self.energy, self.homogeneity, self.correlation, self.entropy]
    }
}

pub fn glcm_stats(p: &Glcm) -> TextureStats {
    let l = p.levels();
    let (mut contrast, mut energy, mut homogeneity, mut entropy) = (0.0, 0.0, 0.0, 0.0);
    let (mut mu_i, mut mu_j) = (0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = p.get(i, j);
            let d = i as f64 - j as f64;
            contrast += v * d * d;
            energy += v * v;
            homogeneity += v / (1.0 + d.abs());
            if v > 0.0 {
                entropy -= v * v.ln();
            }
            mu_i += i as f64 * v;
            mu_j += j as f64 * v;
        }
    }
    let (mut var_i, mut var_j, mut cov) = (0.0, 0.0, 0.0);
    for i in 0..l {
        for j in 0..l {
            let v = p.get(i, j);
            let (di, dj) = (i as f64 - mu_i, j as f64 - mu_j);
            var_i += v * di * di;
            var_j += v * dj * dj;
            cov += v * di * dj;
        }
    }
    let (sd_i, sd_j) = (var_i.sqrt(), var_j.sqrt());
    let correlation = if sd_i > 1e-12 && sd_j > 1e-12 { cov / (sd_i * sd_j) } else { 0.0 };
    TextureStats {
        contrast,
        energy,
        homogeneity,
        correlation,
        entropy,
    }
}
