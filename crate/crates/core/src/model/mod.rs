//! Slide-level classifier assembled from the FoV alignment block, the cell
//! graph encoder, the geometry-guided fusion block and the attention-MIL
//! baseline, selected by [`AblationFlags`].

pub mod gpgf;
pub mod hfa;
pub mod mil;
pub mod params;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cellgraph::{micro_geometry_feature, GcnWeights, GraphInputs, DEFAULT_GCN_HIDDEN};
use crate::nucfeat::FEATURE_LEN;
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};
pub use params::{Bound, Initializer, ParamStore};

/// Which model components are active. `use_gpgf` requires `use_geometry`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawFlags", into = "RawFlags")]
pub struct AblationFlags {
    use_hfa: bool,
    use_geometry: bool,
    use_gpgf: bool,
}

#[derive(Serialize, Deserialize)]
struct RawFlags {
    use_hfa: bool,
    use_geometry: bool,
    use_gpgf: bool,
}

impl TryFrom<RawFlags> for AblationFlags {
    type Error = Error;
    fn try_from(r: RawFlags) -> Result<Self> {
        Self::new(r.use_hfa, r.use_geometry, r.use_gpgf)
    }
}

impl From<AblationFlags> for RawFlags {
    fn from(f: AblationFlags) -> Self {
        Self {
            use_hfa: f.use_hfa,
            use_geometry: f.use_geometry,
            use_gpgf: f.use_gpgf,
        }
    }
}

impl AblationFlags {
    pub const LETTERS: [char; 6] = ['A', 'B', 'C', 'D', 'E', 'F'];

    pub fn new(use_hfa: bool, use_geometry: bool, use_gpgf: bool) -> Result<Self> {
        if use_gpgf && !use_geometry {
            return Err(Error::Config("geometry-guided fusion requires the geometry feature".into()));
        }
        Ok(Self {
            use_hfa,
            use_geometry,
            use_gpgf,
        })
    }

    pub fn full() -> Self {
        Self::from_letter('F').expect("valid letter")
    }

    pub fn from_letter(c: char) -> Option<Self> {
        let (h, g, f) = match c.to_ascii_uppercase() {
            'A' => (false, false, false),
            'B' => (true, false, false),
            'C' => (false, true, false),
            'D' => (true, true, false),
            'E' => (false, true, true),
            'F' => (true, true, true),
            _ => return None,
        };
        Some(Self {
            use_hfa: h,
            use_geometry: g,
            use_gpgf: f,
        })
    }

    pub fn letter(&self) -> char {
        match (self.use_hfa, self.use_geometry, self.use_gpgf) {
            (false, false, _) => 'A',
            (true, false, _) => 'B',
            (false, true, false) => 'C',
            (true, true, false) => 'D',
            (false, true, true) => 'E',
            (true, true, true) => 'F',
        }
    }

    pub fn use_hfa(&self) -> bool {
        self.use_hfa
    }

    pub fn use_geometry(&self) -> bool {
        self.use_geometry
    }

    pub fn use_gpgf(&self) -> bool {
        self.use_gpgf
    }
}

impl Default for AblationFlags {
    fn default() -> Self {
        Self::full()
    }
}

impl fmt::Display for AblationFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.letter())
    }
}

/// Parses a model letter `A`..`F`, or a comma list drawn from `hfa`,
/// `geometry`, `gpgf` (`none` for the empty set).
impl FromStr for AblationFlags {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let mut chars = s.chars();
        if let (Some(c), None) = (chars.next(), chars.next()) {
            return Self::from_letter(c).ok_or_else(|| Error::Usage(format!("unknown model letter {c:?}")));
        }
        let (mut h, mut g, mut f) = (false, false, false);
        if !s.eq_ignore_ascii_case("none") {
            for part in s.split(',').map(str::trim) {
                match part.to_ascii_lowercase().as_str() {
                    "hfa" => h = true,
                    "geometry" | "geo" => g = true,
                    "gpgf" => f = true,
                    other => return Err(Error::Usage(format!("unknown ablation component {other:?}"))),
                }
            }
        }
        Self::new(h, g, f).map_err(|e| Error::Usage(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub classes: usize,
    pub heads: usize,
    pub gcn_hidden: usize,
    pub token_hidden: usize,
    pub channel_hidden: usize,
    pub ffn_hidden: usize,
    pub attn_hidden: usize,
    pub flags: AblationFlags,
}

impl ModelConfig {
    pub fn new(d: usize, classes: usize, flags: AblationFlags) -> Self {
        Self {
            d,
            classes,
            heads: 4,
            gcn_hidden: DEFAULT_GCN_HIDDEN,
            token_hidden: 8,
            channel_hidden: d,
            ffn_hidden: 2 * d,
            attn_hidden: (d / 2).max(1),
            flags,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("heads", self.heads),
            ("gcn_hidden", self.gcn_hidden),
            ("token_hidden", self.token_hidden),
            ("channel_hidden", self.channel_hidden),
            ("ffn_hidden", self.ffn_hidden),
            ("attn_hidden", self.attn_hidden),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.flags.use_gpgf && self.d % self.heads != 0 {
            return Err(Error::Config(format!("d = {} is not divisible by {} heads", self.d, self.heads)));
        }
        Ok(())
    }

    /// Width of each MIL instance: the FoV vector, plus the geometry vector
    /// when it is enabled.
    fn mil_input(&self) -> usize {
        if self.flags.use_geometry {
            2 * self.d
        } else {
            self.d
        }
    }
}

/// Fresh parameters for `cfg`; only the active components get parameters.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut init = Initializer {
        store: &mut store,
        rng: &mut rng,
    };
    let d = cfg.d;
    if cfg.flags.use_hfa {
        hfa::init(&mut init, d, cfg.token_hidden, cfg.channel_hidden)?;
    }
    if cfg.flags.use_geometry {
        init.linear("gcn", FEATURE_LEN, cfg.gcn_hidden)?;
        init.linear("gcn.proj", cfg.gcn_hidden, d)?;
        init.vector("gcn.placeholder", d, 1.0 / (d as f64).sqrt())?;
    }
    if cfg.flags.use_gpgf {
        gpgf::init(&mut init, d, cfg.classes, cfg.ffn_hidden)?;
    } else {
        mil::init(&mut init, cfg.mil_input(), d, cfg.attn_hidden, cfg.classes)?;
    }
    Ok(store)
}

/// Model-ready tensors for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideInput {
    /// `N x d`
    pub macro_: Tensor,
    /// `N x d`
    pub meso: Tensor,
    /// One entry per patch; `None` for patches without kept nuclei. Empty
    /// when the geometry pathway is not needed.
    pub graphs: Vec<Option<GraphInputs>>,
}

impl SlideInput {
    pub fn patch_count(&self) -> usize {
        self.macro_.rows()
    }
}

pub struct SlideForward<'g> {
    /// `1 x C`
    pub logits: Var<'g>,
    /// One attention score per patch, used for heatmaps.
    pub patch_scores: Vec<f64>,
    /// Patches whose geometry vector came from the placeholder.
    pub empty_graphs: usize,
}

pub fn slide_forward<'g>(graph: &'g Graph, cfg: &ModelConfig, p: &Bound<'g, '_>, input: &SlideInput) -> Result<SlideForward<'g>> {
    let n = input.patch_count();
    if input.meso.shape() != input.macro_.shape() || input.macro_.cols() != cfg.d {
        return Err(Error::Model(format!(
            "slide embeddings {:?} / {:?} do not match width {}",
            input.macro_.shape(),
            input.meso.shape(),
            cfg.d
        )));
    }
    let meso = graph.constant(input.meso.clone());
    let fov = if cfg.flags.use_hfa {
        hfa::hfa_forward(graph, p, graph.constant(input.macro_.clone()), meso)?
    } else {
        meso
    };

    let mut empty_graphs = 0;
    let geo = if cfg.flags.use_geometry {
        if input.graphs.len() != n {
            return Err(Error::Model(format!("{} cell graphs for {n} patches", input.graphs.len())));
        }
        let w = GcnWeights {
            weight: p.get("gcn.w")?,
            bias: p.get("gcn.b")?,
            proj_weight: p.get("gcn.proj.w")?,
            proj_bias: p.get("gcn.proj.b")?,
            placeholder: p.get("gcn.placeholder")?,
        };
        let mut rows = Vec::with_capacity(n);
        for g in &input.graphs {
            let (row, flagged) = micro_geometry_feature(graph, g.as_ref(), &w)?;
            empty_graphs += usize::from(flagged);
            rows.push(row);
        }
        Some(graph.concat_rows(&rows)?)
    } else {
        None
    };

    let (logits, patch_scores) = match geo {
        Some(geo) if cfg.flags.use_gpgf => {
            let fused = gpgf::gpgf_fuse(graph, p, cfg.heads, fov, geo)?.fused;
            let out = gpgf::trans_classify(graph, p, cfg.heads, fused)?;
            (out.logits, gpgf::received_attention(&out.attention, n))
        }
        geo => {
            let instances = match geo {
                Some(geo) => graph.concat_cols(&[fov, geo])?,
                None => fov,
            };
            let out = mil::mil_forward(p, instances)?;
            (out.logits, out.attention.into_data())
        }
    };
    Ok(SlideForward {
        logits,
        patch_scores,
        empty_graphs,
    })
}

/// Inference-only result for one slide.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub patch_scores: Vec<f64>,
}

pub fn predict(cfg: &ModelConfig, store: &ParamStore, input: &SlideInput) -> Result<Prediction> {
    let graph = Graph::new();
    let p = store.bind(&graph);
    let out = slide_forward(&graph, cfg, &p, input)?;
    let logits = out.logits.value().data().to_vec();
    Ok(Prediction {
        logits,
        patch_scores: out.patch_scores,
    })
}
