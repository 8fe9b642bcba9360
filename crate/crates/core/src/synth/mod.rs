//! Synthetic cohorts with planted class signals in the patch embeddings and
//! in the nucleus population (composition and spatial clustering).

mod format;

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::nucfeat::{GrayTile, Nucleus, NucleusClass, Point, ONEHOT_LEN};
use crate::{Error, Result};
pub use format::{encoded_len, read_cohort, read_cohort_bytes, write_cohort, write_cohort_bytes, FORMAT_VERSION, MAGIC};

/// Side length of a patch in pixels; centroids stay inside it.
pub const PATCH_EXTENT_PX: f64 = 1024.0;
/// Largest tile side the generator produces.
pub const MAX_TILE_SIDE: usize = 32;
/// Vertex counts of generated contours lie in this inclusive range.
pub const CONTOUR_VERTICES: (usize, usize) = (16, 24);
const CENTROID_MARGIN_PX: f64 = 24.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

impl CountRange {
    pub fn new(min: usize, max: usize) -> Self {
        Self { min, max }
    }

    fn sample(&self, rng: &mut impl Rng) -> usize {
        rng.gen_range(self.min..=self.max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub classes: usize,
    pub slides_per_class: usize,
    pub patches_per_slide: CountRange,
    pub nuclei_per_patch: CountRange,
    /// Embedding width.
    pub d: usize,
    /// Per class, proportions of tumor, inflammatory, stroma, epithelial
    /// among non-necrotic nuclei.
    pub compositions: Vec<[f64; ONEHOT_LEN]>,
    /// Fraction of nuclei drawn as necrosis before the class simplex.
    pub necrosis_rate: f64,
    /// Length of the class mean shift in the macro embedding.
    pub macro_shift: f64,
    /// Length of the class mean shift in the meso embedding.
    pub meso_shift: f64,
    /// Weight of the embedding component driven by the patch's nucleus
    /// composition.
    pub composition_coupling: f64,
    /// Per-coordinate std of independent patch noise.
    pub patch_noise: f64,
    /// Per-coordinate std of noise shared by all patches of a slide.
    pub slide_noise: f64,
    /// Mean number of Poisson cluster centers per patch (at least one is used).
    pub clusters_per_patch: f64,
    /// Std in pixels of nucleus offsets around a cluster center.
    pub cluster_sigma_px: f64,
    /// Relative change of the cluster std across classes: class `c` uses
    /// `cluster_sigma_px * (1 + cluster_contrast * (c / (C - 1) - 0.5))`.
    pub cluster_contrast: f64,
    pub seed: u64,
}

impl CohortSpec {
    /// Planted signal in both channels; the meso view carries a weaker
    /// class shift than the macro view.
    pub fn planted(classes: usize, slides_per_class: usize, seed: u64) -> Self {
        let base: [[f64; ONEHOT_LEN]; 3] = [
            [0.55, 0.15, 0.15, 0.15],
            [0.15, 0.55, 0.15, 0.15],
            [0.15, 0.15, 0.55, 0.15],
        ];
        Self {
            classes,
            slides_per_class,
            patches_per_slide: CountRange::new(4, 8),
            nuclei_per_patch: CountRange::new(12, 30),
            d: 64,
            compositions: (0..classes).map(|c| base[c % base.len()]).collect(),
            necrosis_rate: 0.05,
            macro_shift: 0.25,
            meso_shift: 0.1,
            composition_coupling: 0.125,
            patch_noise: 0.25,
            slide_noise: 0.075,
            clusters_per_patch: 3.0,
            cluster_sigma_px: 45.0,
            cluster_contrast: 0.4,
            seed,
        }
    }

    /// Same generator with every class-dependent quantity made equal.
    pub fn null(classes: usize, slides_per_class: usize, seed: u64) -> Self {
        let mut spec = Self::planted(classes, slides_per_class, seed);
        spec.compositions = vec![[0.25; ONEHOT_LEN]; classes];
        spec.macro_shift = 0.0;
        spec.meso_shift = 0.0;
        spec.cluster_contrast = 0.0;
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Spec(msg));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.slides_per_class == 0 {
            return bad("slides_per_class must be positive".into());
        }
        if self.d == 0 {
            return bad("embedding width d must be positive".into());
        }
        for (name, r) in [("patches_per_slide", self.patches_per_slide), ("nuclei_per_patch", self.nuclei_per_patch)] {
            if r.min > r.max {
                return bad(format!("{name} range {}..={} is empty", r.min, r.max));
            }
        }
        if self.patches_per_slide.min == 0 {
            return bad("slides need at least one patch".into());
        }
        if self.nuclei_per_patch.max > u32::MAX as usize {
            return bad("nuclei_per_patch too large".into());
        }
        if self.compositions.len() != self.classes {
            return bad(format!(
                "{} composition simplices for {} classes",
                self.compositions.len(),
                self.classes
            ));
        }
        for (c, q) in self.compositions.iter().enumerate() {
            if q.iter().any(|&p| !(0.0..=1.0).contains(&p)) || (q.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return bad(format!("composition of class {c} is not a probability simplex: {q:?}"));
            }
        }
        if !(0.0..1.0).contains(&self.necrosis_rate) {
            return bad(format!("necrosis_rate {} outside [0, 1)", self.necrosis_rate));
        }
        let nonneg = [
            ("macro_shift", self.macro_shift),
            ("meso_shift", self.meso_shift),
            ("composition_coupling", self.composition_coupling),
            ("patch_noise", self.patch_noise),
            ("slide_noise", self.slide_noise),
            ("clusters_per_patch", self.clusters_per_patch),
        ];
        if let Some((name, v)) = nonneg.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return bad(format!("{name} must be finite and non-negative, got {v}"));
        }
        if !(self.cluster_sigma_px.is_finite() && self.cluster_sigma_px > 0.0) {
            return bad(format!("cluster_sigma_px must be positive, got {}", self.cluster_sigma_px));
        }
        if !(self.cluster_contrast.is_finite() && self.cluster_contrast.abs() < 2.0) {
            return bad(format!("cluster_contrast must lie in (-2, 2), got {}", self.cluster_contrast));
        }
        Ok(())
    }

    pub fn slide_count(&self) -> usize {
        self.classes * self.slides_per_class
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex(&Sha256::digest(json))
    }

    /// Upper bound on the encoded cohort size in bytes.
    pub fn max_file_size(&self) -> u64 {
        let nucleus = format::nucleus_len(CONTOUR_VERTICES.1, MAX_TILE_SIDE, MAX_TILE_SIDE) as u64;
        let patch = format::patch_len(self.d, 0) as u64 + self.nuclei_per_patch.max as u64 * nucleus;
        let slide = format::slide_overhead() as u64 + self.patches_per_slide.max as u64 * patch;
        format::HEADER_LEN as u64 + self.slide_count() as u64 * slide
    }

    fn cluster_sigma(&self, label: usize) -> f64 {
        let t = label as f64 / (self.classes - 1) as f64 - 0.5;
        self.cluster_sigma_px * (1.0 + self.cluster_contrast * t)
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchRecord {
    pub patch_id: u32,
    pub row: u32,
    pub col: u32,
    pub macro_: Vec<f64>,
    pub meso: Vec<f64>,
    pub nuclei: Vec<Nucleus>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideRecord {
    pub slide_id: u32,
    pub label: usize,
    pub patches: Vec<PatchRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub d: usize,
    pub classes: usize,
    pub slides: Vec<SlideRecord>,
}

impl Cohort {
    pub fn labels(&self) -> Vec<usize> {
        self.slides.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for s in &self.slides {
            counts[s.label] += 1;
        }
        counts
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortManifest {
    pub seed: u64,
    pub spec: CohortSpec,
    pub spec_hash: String,
    pub class_counts: Vec<usize>,
    pub format_version: u32,
}

/// Class directions and the composition loading are fixed per master seed so
/// that every slide of a cohort shares them.
struct Directions {
    class: Vec<Vec<f64>>,
    composition: [Vec<f64>; ONEHOT_LEN],
}

impl Directions {
    fn new(spec: &CohortSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(u64::MAX);
        let unit = |rng: &mut ChaCha8Rng| {
            let v: Vec<f64> = (0..spec.d).map(|_| StandardNormal.sample(rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm).collect::<Vec<f64>>()
        };
        let class = (0..spec.classes).map(|_| unit(&mut rng)).collect();
        let composition = std::array::from_fn(|_| unit(&mut rng));
        Self { class, composition }
    }
}

/// Seed of slide `index` under master seed `master`.
pub fn slide_seed(master: u64, index: usize) -> u64 {
    crate::rng::derive_seed(master, index as u64)
}

pub fn gen_slide(spec: &CohortSpec, label: usize, seed: u64) -> Result<SlideRecord> {
    spec.validate()?;
    if label >= spec.classes {
        return Err(Error::Spec(format!("label {label} out of range for {} classes", spec.classes)));
    }
    Ok(gen_slide_with(spec, &Directions::new(spec), label, seed, 0))
}

fn gen_slide_with(spec: &CohortSpec, dirs: &Directions, label: usize, seed: u64, slide_id: u32) -> SlideRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.patches_per_slide.sample(&mut rng);
    let side = (n as f64).sqrt().ceil() as usize + 1;
    let mut cells: Vec<usize> = (0..side * side).collect();
    // partial Fisher-Yates: first n cells become the patch positions
    for i in 0..n {
        let j = rng.gen_range(i..cells.len());
        cells.swap(i, j);
    }
    let slide_offset: Vec<f64> = normal_vec(&mut rng, spec.d, spec.slide_noise);
    let patches = (0..n)
        .map(|p| {
            let cell = cells[p];
            gen_patch(spec, dirs, label, &slide_offset, &mut rng, p as u32, (cell / side) as u32, (cell % side) as u32)
        })
        .collect();
    SlideRecord {
        slide_id,
        label,
        patches,
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, len: usize, std: f64) -> Vec<f64> {
    (0..len)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            std * z
        })
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn gen_patch(spec: &CohortSpec, dirs: &Directions, label: usize, slide_offset: &[f64], rng: &mut ChaCha8Rng, patch_id: u32, row: u32, col: u32) -> PatchRecord {
    let count = spec.nuclei_per_patch.sample(rng);
    let centers = cluster_centers(spec, rng);
    let sigma = spec.cluster_sigma(label);
    let spread = Normal::new(0.0, sigma).expect("positive sigma");
    let lo = CENTROID_MARGIN_PX;
    let hi = PATCH_EXTENT_PX - CENTROID_MARGIN_PX;
    let mut nuclei = Vec::with_capacity(count);
    let mut kept_counts = [0usize; ONEHOT_LEN];
    for id in 0..count {
        let c = centers[rng.gen_range(0..centers.len())];
        let centroid = [
            (c[0] + spread.sample(rng)).clamp(lo, hi),
            (c[1] + spread.sample(rng)).clamp(lo, hi),
        ];
        let class = draw_class(spec, label, rng);
        if let Some(i) = class.onehot_index() {
            kept_counts[i] += 1;
        }
        nuclei.push(gen_nucleus(id as u32, centroid, class, rng));
    }

    let kept: usize = kept_counts.iter().sum();
    let mut composition = vec![0.0; spec.d];
    if kept > 0 {
        for (k, dir) in dirs.composition.iter().enumerate() {
            let w = spec.composition_coupling * (kept_counts[k] as f64 / kept as f64 - 1.0 / ONEHOT_LEN as f64);
            for (acc, v) in composition.iter_mut().zip(dir) {
                *acc += w * v;
            }
        }
    }
    let class_dir = &dirs.class[label];
    let embed = |shift: f64, rng: &mut ChaCha8Rng| -> Vec<f64> {
        (0..spec.d)
            .map(|i| {
                let z: f64 = StandardNormal.sample(rng);
                shift * class_dir[i] + composition[i] + slide_offset[i] + spec.patch_noise * z
            })
            .collect()
    };
    let macro_ = embed(spec.macro_shift, rng);
    let meso = embed(spec.meso_shift, rng);
    PatchRecord {
        patch_id,
        row,
        col,
        macro_,
        meso,
        nuclei,
    }
}

fn cluster_centers(spec: &CohortSpec, rng: &mut ChaCha8Rng) -> Vec<Point> {
    let k = if spec.clusters_per_patch > 0.0 {
        let draw: f64 = Poisson::new(spec.clusters_per_patch).expect("positive mean").sample(rng);
        (draw as usize).max(1)
    } else {
        1
    };
    let lo = CENTROID_MARGIN_PX;
    let hi = PATCH_EXTENT_PX - CENTROID_MARGIN_PX;
    (0..k).map(|_| [rng.gen_range(lo..hi), rng.gen_range(lo..hi)]).collect()
}

fn draw_class(spec: &CohortSpec, label: usize, rng: &mut ChaCha8Rng) -> NucleusClass {
    if rng.gen::<f64>() < spec.necrosis_rate {
        return NucleusClass::Necrosis;
    }
    let u: f64 = rng.gen();
    let q = &spec.compositions[label];
    let mut acc = 0.0;
    for (i, &p) in q.iter().enumerate() {
        acc += p;
        if u < acc {
            return NucleusClass::KEPT[i];
        }
    }
    // rounding can leave u just above the last partial sum
    let last = q.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    NucleusClass::KEPT[last]
}

/// Semi-axes in pixels and tile texture parameters per nucleus class.
struct Shape {
    axes: (f64, f64),
    base: f64,
    noise: f64,
    stripes: f64,
}

fn shape_of(class: NucleusClass) -> Shape {
    match class {
        NucleusClass::Tumor => Shape {
            axes: (9.0, 7.0),
            base: 85.0,
            noise: 30.0,
            stripes: 0.0,
        },
        NucleusClass::Inflammatory => Shape {
            axes: (4.5, 4.0),
            base: 50.0,
            noise: 8.0,
            stripes: 0.0,
        },
        NucleusClass::Stroma => Shape {
            axes: (11.0, 3.0),
            base: 165.0,
            noise: 10.0,
            stripes: 40.0,
        },
        NucleusClass::Epithelial => Shape {
            axes: (6.5, 5.0),
            base: 120.0,
            noise: 45.0,
            stripes: 0.0,
        },
        NucleusClass::Necrosis => Shape {
            axes: (7.0, 6.0),
            base: 210.0,
            noise: 20.0,
            stripes: 0.0,
        },
    }
}

fn gen_nucleus(id: u32, centroid: Point, class: NucleusClass, rng: &mut ChaCha8Rng) -> Nucleus {
    let shape = shape_of(class);
    let jitter = |rng: &mut ChaCha8Rng| rng.gen_range(0.85..1.15);
    let a = shape.axes.0 * jitter(rng);
    let b = shape.axes.1 * jitter(rng);
    let theta = rng.gen_range(0.0..TAU);
    let (sin, cos) = theta.sin_cos();
    let m = rng.gen_range(CONTOUR_VERTICES.0..=CONTOUR_VERTICES.1);
    // star polygon: strictly increasing angles and positive radii keep it simple
    let contour = (0..m)
        .map(|i| {
            let t = TAU * i as f64 / m as f64;
            let r = rng.gen_range(0.9..1.1);
            let (x, y) = (a * r * t.cos(), b * r * t.sin());
            [centroid[0] + x * cos - y * sin, centroid[1] + x * sin + y * cos]
        })
        .collect();

    let side = ((2.0 * a.max(b)).ceil() as usize + 4).clamp(4, MAX_TILE_SIDE);
    let mut pixels = Vec::with_capacity(side * side);
    for y in 0..side {
        for x in 0..side {
            let stripe = if shape.stripes > 0.0 && (x + y) % 4 < 2 { shape.stripes } else { 0.0 };
            let z: f64 = StandardNormal.sample(rng);
            pixels.push((shape.base + stripe + shape.noise * z).round().clamp(0.0, 255.0) as u8);
        }
    }
    Nucleus {
        id,
        centroid,
        contour,
        class,
        tile: GrayTile {
            width: side,
            height: side,
            pixels,
        },
    }
}

/// Balanced cohort: slide `i` has label `i mod C` and seed
/// [`slide_seed`]`(spec.seed, i)`.
pub fn gen_cohort(spec: &CohortSpec) -> Result<(Cohort, CohortManifest)> {
    spec.validate()?;
    let dirs = Directions::new(spec);
    let slides: Vec<SlideRecord> = (0..spec.slide_count())
        .into_par_iter()
        .map(|i| gen_slide_with(spec, &dirs, i % spec.classes, slide_seed(spec.seed, i), i as u32))
        .collect();
    let cohort = Cohort {
        d: spec.d,
        classes: spec.classes,
        slides,
    };
    let manifest = CohortManifest {
        seed: spec.seed,
        spec: spec.clone(),
        spec_hash: spec.hash(),
        class_counts: cohort.class_counts(),
        format_version: FORMAT_VERSION,
    };
    Ok((cohort, manifest))
}
