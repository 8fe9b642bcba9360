//! Nucleus graphs: thresholded k-nearest-neighbor edges, binary adjacency
//! and the one-layer GCN encoder that turns a graph into a per-patch vector.

use std::collections::HashMap;

use crate::nucfeat::{Point, FEATURE_LEN};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

pub const DEFAULT_K: usize = 8;
pub const DEFAULT_THRESHOLD_PX: f64 = 100.0;
pub const DEFAULT_GCN_HIDDEN: usize = 32;

/// Directed edges `(i, j)`: `j` is among the `k` nearest other nodes of `i`
/// and strictly closer than `threshold_px`. Ties in distance go to the
/// smaller node id. Output is sorted by source, then by (distance, id).
pub fn knn_edges(centroids: &[Point], k: usize, threshold_px: f64) -> Vec<(usize, usize)> {
    if centroids.is_empty() || k == 0 || !(threshold_px > 0.0) {
        return Vec::new();
    }
    // bucket grid with cell size = threshold, so candidates lie in the 3x3 block
    let cell = |p: &Point| ((p[0] / threshold_px).floor() as i64, (p[1] / threshold_px).floor() as i64);
    let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
    for (i, p) in centroids.iter().enumerate() {
        buckets.entry(cell(p)).or_default().push(i);
    }
    let t2 = threshold_px * threshold_px;
    let mut edges = Vec::new();
    let mut candidates: Vec<(f64, usize)> = Vec::new();
    for (i, p) in centroids.iter().enumerate() {
        candidates.clear();
        let (cx, cy) = cell(p);
        for gx in cx - 1..=cx + 1 {
            for gy in cy - 1..=cy + 1 {
                let Some(members) = buckets.get(&(gx, gy)) else {
                    continue;
                };
                for &j in members {
                    if j == i {
                        continue;
                    }
                    let q = centroids[j];
                    let d2 = (p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2);
                    if d2 < t2 {
                        candidates.push((d2, j));
                    }
                }
            }
        }
        candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        edges.extend(candidates.iter().take(k).map(|&(_, j)| (i, j)));
    }
    edges
}

/// Dense binary adjacency, row-major `n x n`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adjacency {
    n: usize,
    bits: Vec<u8>,
}

impl Adjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn get(&self, i: usize, j: usize) -> u8 {
        self.bits[i * self.n + j]
    }

    pub fn row_sum(&self, i: usize) -> usize {
        self.bits[i * self.n..(i + 1) * self.n].iter().map(|&b| b as usize).sum()
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        (self.n > 0).then(|| {
            Tensor::matrix(self.n, self.n, self.bits.iter().map(|&b| b as f64).collect()).expect("n x n")
        })
    }

    /// `D^-1/2 (A | A^T | I) D^-1/2`, the symmetric GCN propagation matrix.
    pub fn normalized(&self) -> Option<Tensor> {
        let n = self.n;
        if n == 0 {
            return None;
        }
        let mut sym = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                if i == j || self.get(i, j) == 1 || self.get(j, i) == 1 {
                    sym[i * n + j] = 1.0;
                }
            }
        }
        // self-loops keep every degree >= 1
        let inv_sqrt: Vec<f64> = (0..n)
            .map(|i| 1.0 / sym[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
            .collect();
        for i in 0..n {
            for j in 0..n {
                sym[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
            }
        }
        Some(Tensor::matrix(n, n, sym).expect("n x n"))
    }
}

pub fn adjacency(edges: &[(usize, usize)], n: usize) -> Result<Adjacency> {
    let mut bits = vec![0u8; n * n];
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(Error::Graph(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        bits[i * n + j] = 1;
    }
    Ok(Adjacency { n, bits })
}

/// Nucleus graph of one patch.
#[derive(Debug, Clone, PartialEq)]
pub struct CellGraph {
    /// Feature rows, one per node.
    pub features: Vec<[f64; FEATURE_LEN]>,
    pub centroids: Vec<Point>,
    pub edges: Vec<(usize, usize)>,
    pub adjacency: Adjacency,
    pub k: usize,
    pub threshold_px: f64,
}

impl CellGraph {
    pub fn build(centroids: Vec<Point>, features: Vec<[f64; FEATURE_LEN]>, k: usize, threshold_px: f64) -> Result<Self> {
        if centroids.len() != features.len() {
            return Err(Error::Graph(format!(
                "{} centroids but {} feature rows",
                centroids.len(),
                features.len()
            )));
        }
        let edges = knn_edges(&centroids, k, threshold_px);
        let adjacency = adjacency(&edges, centroids.len())?;
        Ok(Self {
            features,
            centroids,
            edges,
            adjacency,
            k,
            threshold_px,
        })
    }

    pub fn node_count(&self) -> usize {
        self.features.len()
    }

    pub fn feature_tensor(&self) -> Option<Tensor> {
        (!self.features.is_empty()).then(|| {
            Tensor::matrix(self.features.len(), FEATURE_LEN, self.features.concat()).expect("n x 20")
        })
    }

    /// Plain tensors the encoder consumes; `None` for an empty graph.
    pub fn encoder_inputs(&self) -> Option<GraphInputs> {
        Some(GraphInputs {
            propagation: self.adjacency.normalized()?,
            features: self.feature_tensor()?,
        })
    }
}

/// Precomputed normalized adjacency and node features of a non-empty graph.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphInputs {
    pub propagation: Tensor,
    pub features: Tensor,
}

/// Trainable weights of the graph encoder.
#[derive(Clone, Copy)]
pub struct GcnWeights<'g> {
    /// `20 x hidden`
    pub weight: Var<'g>,
    /// `1 x hidden`
    pub bias: Var<'g>,
    /// `hidden x d`
    pub proj_weight: Var<'g>,
    /// `1 x d`
    pub proj_bias: Var<'g>,
    /// `1 x d`, used for patches without nuclei
    pub placeholder: Var<'g>,
}

/// `ReLU(P X W + b)` with `P` the normalized propagation matrix.
pub fn gcn_forward<'g>(propagation: Var<'g>, features: Var<'g>, weight: Var<'g>, bias: Var<'g>) -> Result<Var<'g>> {
    let xw = features.matmul(&weight)?;
    Ok(propagation.matmul(&xw)?.add_row(&bias)?.relu()?)
}

/// Per-patch geometry vector: mean-pooled GCN embeddings, projected to `d`.
/// Empty graphs yield the learned placeholder and `true` for the flag.
pub fn micro_geometry_feature<'g>(graph: &'g Graph, inputs: Option<&GraphInputs>, w: &GcnWeights<'g>) -> Result<(Var<'g>, bool)> {
    let Some(inputs) = inputs else {
        return Ok((w.placeholder, true));
    };
    let p = graph.constant(inputs.propagation.clone());
    let x = graph.constant(inputs.features.clone());
    let h = gcn_forward(p, x, w.weight, w.bias)?;
    let pooled = h.mean_rows()?;
    Ok((pooled.matmul(&w.proj_weight)?.add_row(&w.proj_bias)?, false))
}
