//! Turns slide records into model inputs: embedding matrices plus the
//! normalized propagation matrix and node features of every cell graph.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{CellGraph, DEFAULT_K, DEFAULT_THRESHOLD_PX};
use crate::model::SlideInput;
use crate::nucfeat::{slide_features, FeatureConfig, Nucleus};
use crate::synth::{Cohort, SlideRecord};
use crate::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepConfig {
    pub features: FeatureConfig,
    pub k: usize,
    pub threshold_px: f64,
}

impl Default for PrepConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            k: DEFAULT_K,
            threshold_px: DEFAULT_THRESHOLD_PX,
        }
    }
}

impl PrepConfig {
    pub fn validate(&self) -> Result<()> {
        let f = &self.features;
        if !(2..=256).contains(&f.glcm_levels) {
            return Err(Error::Config(format!("glcm_levels {} outside 2..=256", f.glcm_levels)));
        }
        if f.glcm_offsets.is_empty() || f.glcm_offsets.contains(&(0, 0)) {
            return Err(Error::Config("glcm_offsets must be non-empty and non-zero".into()));
        }
        if !(f.topology_radius_um.is_finite() && f.topology_radius_um > 0.0) {
            return Err(Error::Config(format!("topology_radius_um must be positive, got {}", f.topology_radius_um)));
        }
        if self.k == 0 {
            return Err(Error::Config("k must be positive".into()));
        }
        if !(self.threshold_px.is_finite() && self.threshold_px > 0.0) {
            return Err(Error::Config(format!("threshold_px must be positive, got {}", self.threshold_px)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSlide {
    pub slide_id: u32,
    pub label: usize,
    pub input: SlideInput,
    pub patch_ids: Vec<u32>,
    pub positions: Vec<(u32, u32)>,
}

pub fn prepare_slide(slide: &SlideRecord, d: usize, cfg: &PrepConfig) -> Result<PreparedSlide> {
    let n = slide.patches.len();
    if n == 0 {
        return Err(Error::EmptySlide);
    }
    let rows = |pick: fn(&crate::synth::PatchRecord) -> &Vec<f64>| -> Result<Tensor> {
        let data: Vec<f64> = slide.patches.iter().flat_map(|p| pick(p).iter().copied()).collect();
        if data.len() != n * d {
            return Err(Error::Model(format!("slide {} embeddings do not have width {d}", slide.slide_id)));
        }
        Ok(Tensor::matrix(n, d, data)?)
    };
    let macro_ = rows(|p| &p.macro_)?;
    let meso = rows(|p| &p.meso)?;

    let nuclei: Vec<&[Nucleus]> = slide.patches.iter().map(|p| p.nuclei.as_slice()).collect();
    let features = slide_features(&nuclei, &cfg.features)?;
    let graphs = slide
        .patches
        .iter()
        .zip(features)
        .map(|(patch, f)| {
            let centroids = f.kept.iter().map(|&i| patch.nuclei[i].centroid).collect();
            Ok(CellGraph::build(centroids, f.rows, cfg.k, cfg.threshold_px)?.encoder_inputs())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreparedSlide {
        slide_id: slide.slide_id,
        label: slide.label,
        input: SlideInput { macro_, meso, graphs },
        patch_ids: slide.patches.iter().map(|p| p.patch_id).collect(),
        positions: slide.patches.iter().map(|p| (p.row, p.col)).collect(),
    })
}

pub fn prepare_cohort(cohort: &Cohort, cfg: &PrepConfig) -> Result<Vec<PreparedSlide>> {
    cohort.slides.par_iter().map(|s| prepare_slide(s, cohort.d, cfg)).collect()
}
