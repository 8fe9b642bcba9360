//! Handcrafted per-nucleus features: shape, co-occurrence texture,
//! neighborhood topology and a class one-hot, 20 values in a fixed order.

pub mod glcm;
pub mod morphology;
pub mod topology;

pub use glcm::{glcm, glcm_stats, quantize, Glcm, TextureStats, DEFAULT_LEVELS, DEFAULT_OFFSETS, TEXTURE_LEN};
pub use morphology::{convex_hull, morphology_features, perimeter, signed_area, Morphology, MORPHOLOGY_LEN};
pub use topology::{centroid_distance_um, topology_features, DEFAULT_RADIUS_UM, TOPOLOGY_LEN};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Pixel pitch of the 1024 px patches.
pub const MICRONS_PER_PIXEL: f64 = 0.549;
pub const NUMERIC_LEN: usize = MORPHOLOGY_LEN + TEXTURE_LEN + TOPOLOGY_LEN;
pub const ONEHOT_LEN: usize = 4;
pub const FEATURE_LEN: usize = NUMERIC_LEN + ONEHOT_LEN;

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FeatureError {
    #[error("nucleus {nucleus:?}: contour has zero area")]
    DegeneratePolygon { nucleus: Option<u32> },
    #[error("nucleus {nucleus:?}: contour needs at least 3 vertices, got {vertices}")]
    TooFewVertices { nucleus: Option<u32>, vertices: usize },
    #[error("nucleus {nucleus:?}: {width}x{height} tile is too small for the co-occurrence offsets")]
    TileTooSmall {
        nucleus: Option<u32>,
        width: usize,
        height: usize,
    },
    #[error("nucleus {nucleus}: necrosis nuclei are excluded from feature extraction")]
    FilteredClass { nucleus: u32 },
    #[error("nucleus {nucleus} is not part of the given context")]
    NotInContext { nucleus: u32 },
}

impl FeatureError {
    fn for_nucleus(self, id: u32) -> Self {
        match self {
            FeatureError::DegeneratePolygon { .. } => FeatureError::DegeneratePolygon { nucleus: Some(id) },
            FeatureError::TooFewVertices { vertices, .. } => FeatureError::TooFewVertices {
                nucleus: Some(id),
                vertices,
            },
            FeatureError::TileTooSmall { width, height, .. } => FeatureError::TileTooSmall {
                nucleus: Some(id),
                width,
                height,
            },
            other => other,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NucleusClass {
    Tumor,
    Inflammatory,
    Stroma,
    Necrosis,
    Epithelial,
}

impl NucleusClass {
    pub const ALL: [NucleusClass; 5] = [
        NucleusClass::Tumor,
        NucleusClass::Inflammatory,
        NucleusClass::Stroma,
        NucleusClass::Necrosis,
        NucleusClass::Epithelial,
    ];
    /// Classes that take part in feature extraction, in one-hot order.
    pub const KEPT: [NucleusClass; 4] = [
        NucleusClass::Tumor,
        NucleusClass::Inflammatory,
        NucleusClass::Stroma,
        NucleusClass::Epithelial,
    ];

    pub fn code(self) -> u8 {
        match self {
            NucleusClass::Tumor => 0,
            NucleusClass::Inflammatory => 1,
            NucleusClass::Stroma => 2,
            NucleusClass::Necrosis => 3,
            NucleusClass::Epithelial => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get(code as usize).copied()
    }

    /// Position in the one-hot block; `None` for necrosis.
    pub fn onehot_index(self) -> Option<usize> {
        Self::KEPT.iter().position(|&c| c == self)
    }
}

/// Grayscale raster over a nucleus bounding box, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayTile {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Nucleus {
    pub id: u32,
    /// Pixel coordinates inside the patch.
    pub centroid: Point,
    /// Closed polygon, counter-clockwise, pixel coordinates.
    pub contour: Vec<Point>,
    pub class: NucleusClass,
    pub tile: GrayTile,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub glcm_levels: usize,
    pub glcm_offsets: Vec<(i32, i32)>,
    pub topology_radius_um: f64,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            glcm_levels: DEFAULT_LEVELS,
            glcm_offsets: DEFAULT_OFFSETS.to_vec(),
            topology_radius_um: DEFAULT_RADIUS_UM,
        }
    }
}

/// Unstandardized 20-value feature row of one nucleus.
///
/// `neighbors` is the set topology is measured against; it may contain
/// `nucleus` itself.
pub fn raw_features(nucleus: &Nucleus, neighbors: &[Nucleus], cfg: &FeatureConfig) -> Result<[f64; FEATURE_LEN], FeatureError> {
    let onehot_at = nucleus
        .class
        .onehot_index()
        .ok_or(FeatureError::FilteredClass { nucleus: nucleus.id })?;
    let morph = morphology_features(&nucleus.contour).map_err(|e| e.for_nucleus(nucleus.id))?;
    let p = glcm(&nucleus.tile, cfg.glcm_levels, &cfg.glcm_offsets).map_err(|e| e.for_nucleus(nucleus.id))?;
    let texture = glcm_stats(&p);
    let topo = topology_features(nucleus, neighbors, cfg.topology_radius_um);

    let mut row = [0.0; FEATURE_LEN];
    row[..MORPHOLOGY_LEN].copy_from_slice(&morph.to_array());
    row[MORPHOLOGY_LEN..MORPHOLOGY_LEN + TEXTURE_LEN].copy_from_slice(&texture.to_array());
    row[MORPHOLOGY_LEN + TEXTURE_LEN..NUMERIC_LEN].copy_from_slice(&topo);
    row[NUMERIC_LEN + onehot_at] = 1.0;
    Ok(row)
}

/// Feature rows of one patch: `kept[i]` is the index into the patch's nucleus
/// list of row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchFeatures {
    pub kept: Vec<usize>,
    pub rows: Vec<[f64; FEATURE_LEN]>,
}

/// Features for every non-necrosis nucleus of a slide, with the 16 numeric
/// columns z-scored over the whole slide (constant columns become 0).
///
/// Topology is measured within each patch among the kept nuclei.
pub fn slide_features(patches: &[&[Nucleus]], cfg: &FeatureConfig) -> Result<Vec<PatchFeatures>, FeatureError> {
    let mut out = Vec::with_capacity(patches.len());
    for nuclei in patches {
        let kept_nuclei: Vec<Nucleus> = nuclei
            .iter()
            .filter(|n| n.class != NucleusClass::Necrosis)
            .cloned()
            .collect();
        let kept: Vec<usize> = nuclei
            .iter()
            .enumerate()
            .filter(|(_, n)| n.class != NucleusClass::Necrosis)
            .map(|(i, _)| i)
            .collect();
        let rows = kept_nuclei
            .iter()
            .map(|n| raw_features(n, &kept_nuclei, cfg))
            .collect::<Result<Vec<_>, _>>()?;
        out.push(PatchFeatures { kept, rows });
    }
    standardize(&mut out);
    Ok(out)
}

fn standardize(patches: &mut [PatchFeatures]) {
    let count = patches.iter().map(|p| p.rows.len()).sum::<usize>();
    if count == 0 {
        return;
    }
    for col in 0..NUMERIC_LEN {
        let values = || patches.iter().flat_map(|p| p.rows.iter().map(move |r| r[col]));
        let mean = values().sum::<f64>() / count as f64;
        let var = values().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let sd = var.sqrt();
        // relative threshold so columns that are constant up to rounding also map to 0
        let constant = sd <= 1e-12 * mean.abs().max(1.0);
        for p in patches.iter_mut() {
            for r in &mut p.rows {
                r[col] = if constant { 0.0 } else { (r[col] - mean) / sd };
            }
        }
    }
}

/// Standardized feature row of `nucleus` within `context` (the nuclei of one
/// slide, treated as a single neighborhood).
pub fn nucleus_feature_vector(nucleus: &Nucleus, context: &[Nucleus], cfg: &FeatureConfig) -> Result<[f64; FEATURE_LEN], FeatureError> {
    if nucleus.class == NucleusClass::Necrosis {
        return Err(FeatureError::FilteredClass { nucleus: nucleus.id });
    }
    let features = slide_features(&[context], cfg)?;
    let patch = &features[0];
    patch
        .kept
        .iter()
        .position(|&i| context[i].id == nucleus.id)
        .map(|row| patch.rows[row])
        .ok_or(FeatureError::NotInContext { nucleus: nucleus.id })
}
