//! Finite-difference checks of every differentiable operation, the graph
//! encoder, every model variant and the end-to-end slide loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::cellgraph::{gcn_forward, CellGraph};
use crate::model::{init_params, slide_forward, AblationFlags, Bound, ModelConfig, SlideInput};
use crate::nucfeat::FEATURE_LEN;
use crate::tensor::{grad_check_many, GradCheckReport, Graph, Tensor, Var};
use crate::{Error, Result};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteCase {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

impl SuiteCase {
    fn from_report(name: &str, r: GradCheckReport) -> Self {
        Self {
            name: name.to_string(),
            entries: r.entries,
            max_rel_error: r.max_rel_error,
            passed: r.passed,
        }
    }
}

struct Draw(ChaCha8Rng);

impl Draw {
    fn uniform(&mut self, r: usize, c: usize, lo: f64, hi: f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| self.0.gen_range(lo..hi)).collect()).expect("shape")
    }

    fn normal(&mut self, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| self.0.sample(StandardNormal)).collect()).expect("shape")
    }

    /// Standard normal entries redrawn until at least 0.05 away from zero,
    /// the kink of relu.
    fn off_zero(&mut self, r: usize, c: usize) -> Tensor {
        let data = (0..r * c)
            .map(|_| loop {
                let v: f64 = self.0.sample(StandardNormal);
                if v.abs() >= 0.05 {
                    break v;
                }
            })
            .collect();
        Tensor::matrix(r, c, data).expect("shape")
    }

    /// `|z| + 0.1` for standard normal `z`, inside the domain of log.
    fn positive(&mut self, r: usize, c: usize) -> Tensor {
        self.normal(r, c).map(|v| v.abs() + 0.1)
    }
}

/// `sum(out * w)` with a fixed random weight so that every output entry
/// contributes with a distinct coefficient.
fn project<'g>(g: &'g Graph, out: Var<'g>, seed: u64) -> Result<Var<'g>> {
    let shape = out.shape();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    Ok(out.mul(&g.constant(w))?.sum()?)
}

type OpFn = for<'g> fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>;

fn op_cases(d: &mut Draw) -> Vec<(&'static str, OpFn, Vec<Tensor>)> {
    let a = d.normal(3, 4);
    let b = d.normal(3, 4);
    vec![
        ("matmul", |g, v| project(g, v[0].matmul(&v[1])?, 1), vec![a.clone(), d.normal(4, 2)]),
        ("add", |g, v| project(g, v[0].add(&v[1])?, 2), vec![a.clone(), b.clone()]),
        ("sub", |g, v| project(g, v[0].sub(&v[1])?, 3), vec![a.clone(), b.clone()]),
        ("mul", |g, v| project(g, v[0].mul(&v[1])?, 4), vec![a.clone(), b.clone()]),
        ("add_row", |g, v| project(g, v[0].add_row(&v[1])?, 5), vec![a.clone(), d.normal(1, 4)]),
        ("mul_col", |g, v| project(g, v[0].mul_col(&v[1])?, 6), vec![a.clone(), d.normal(3, 1)]),
        ("scale", |g, v| project(g, v[0].scale(-1.7)?, 7), vec![a.clone()]),
        ("add_scalar", |g, v| project(g, v[0].add_scalar(0.3)?.mul(&v[0])?, 8), vec![a.clone()]),
        ("one_minus", |g, v| project(g, v[0].one_minus()?.mul(&v[0])?, 9), vec![a.clone()]),
        ("relu", |g, v| project(g, v[0].relu()?, 10), vec![d.off_zero(3, 4)]),
        ("gelu", |g, v| project(g, v[0].gelu()?, 11), vec![d.normal(3, 4)]),
        ("sigmoid", |g, v| project(g, v[0].sigmoid()?, 12), vec![d.normal(3, 4)]),
        ("tanh", |g, v| project(g, v[0].tanh()?, 13), vec![d.normal(3, 4)]),
        ("exp", |g, v| project(g, v[0].exp()?, 14), vec![a.clone()]),
        ("log", |g, v| project(g, v[0].log()?, 15), vec![d.positive(3, 4)]),
        ("softmax_rows", |g, v| project(g, v[0].softmax(1)?, 16), vec![d.normal(3, 4)]),
        ("softmax_cols", |g, v| project(g, v[0].softmax(0)?, 17), vec![d.normal(3, 4)]),
        (
            "layernorm",
            |g, v| project(g, v[0].layernorm(&v[1], &v[2], 1e-5)?, 18),
            vec![d.normal(3, 5), d.normal(1, 5), d.normal(1, 5)],
        ),
        ("transpose", |g, v| project(g, v[0].transpose()?, 19), vec![a.clone()]),
        ("reshape", |g, v| project(g, v[0].reshape(&[2, 6])?, 20), vec![a.clone()]),
        ("slice_rows", |g, v| project(g, v[0].slice_rows(1, 3)?, 21), vec![a.clone()]),
        ("slice_cols", |g, v| project(g, v[0].slice_cols(1, 3)?, 22), vec![a.clone()]),
        ("concat_rows", |g, v| project(g, g.concat_rows(&[v[0], v[1]])?, 23), vec![a.clone(), d.normal(2, 4)]),
        ("concat_cols", |g, v| project(g, g.concat_cols(&[v[0], v[1]])?, 24), vec![a.clone(), d.normal(3, 2)]),
        ("sum", |_, v| Ok(v[0].mul(&v[0])?.sum()?), vec![a.clone()]),
        ("mean", |_, v| Ok(v[0].mul(&v[0])?.mean()?), vec![a.clone()]),
        ("mean_rows", |g, v| project(g, v[0].mean_rows()?, 25), vec![a.clone()]),
        ("cross_entropy", |_, v| Ok(v[0].cross_entropy(2)?), vec![d.normal(1, 4)]),
    ]
}

fn random_graph(d: &mut Draw, count: usize) -> Result<CellGraph> {
    let centroids = (0..count).map(|_| [d.0.gen_range(0.0..150.0), d.0.gen_range(0.0..150.0)]).collect();
    let features = (0..count).map(|_| std::array::from_fn(|_| d.0.gen_range(-1.5..1.5))).collect();
    CellGraph::build(centroids, features, 8, 100.0)
}

/// Slide with `n` patches of width `d`; the first patch has no nuclei, the
/// others at most `max_nuclei`.
pub fn random_slide(rng: &mut ChaCha8Rng, n: usize, d: usize, max_nuclei: usize) -> Result<SlideInput> {
    let mut draw = Draw(rng.clone());
    let macro_ = draw.uniform(n, d, -1.0, 1.0);
    let meso = draw.uniform(n, d, -1.0, 1.0);
    let graphs = (0..n)
        .map(|i| {
            let count = if i == 0 { 0 } else { draw.0.gen_range(1..=max_nuclei) };
            Ok(random_graph(&mut draw, count)?.encoder_inputs())
        })
        .collect::<Result<_>>()?;
    *rng = draw.0;
    Ok(SlideInput { macro_, meso, graphs })
}

fn model_case(name: &str, cfg: &ModelConfig, input: &SlideInput, label: usize, seed: u64) -> Result<SuiteCase> {
    let store = init_params(cfg, seed)?;
    let r = grad_check_many(
        |g, v| {
            let p = Bound::from_vars(&store, v.to_vec())?;
            slide_forward(g, cfg, &p, input)?.logits.cross_entropy(label).map_err(Error::from)
        },
        store.tensors(),
        STEP,
        TOLERANCE,
    )?;
    Ok(SuiteCase::from_report(name, r))
}

/// Runs every case. Model cases use `d = 8` and two patches with at most
/// 30 nuclei, one of them empty.
pub fn run(seed: u64) -> Result<Vec<SuiteCase>> {
    let mut draw = Draw(ChaCha8Rng::seed_from_u64(seed));
    let mut cases = Vec::new();
    for (name, f, inputs) in op_cases(&mut draw) {
        let r = grad_check_many(f, &inputs, STEP, TOLERANCE)?;
        cases.push(SuiteCase::from_report(name, r));
    }

    let graph = random_graph(&mut draw, 25)?;
    let gi = graph.encoder_inputs().ok_or_else(|| Error::Graph("encoder case has no nodes".into()))?;
    let prop = gi.propagation.clone();
    let r = grad_check_many(
        move |g, v| project(g, gcn_forward(g.constant(prop.clone()), v[0], v[1], v[2])?.relu()?, 26),
        &[gi.features.clone(), draw.uniform(FEATURE_LEN, 5, -0.5, 0.5), draw.uniform(1, 5, 0.2, 0.5)],
        STEP,
        TOLERANCE,
    )?;
    cases.push(SuiteCase::from_report("gcn_layer", r));

    let d = 8;
    let mut rng = draw.0;
    let input = random_slide(&mut rng, 2, d, 30)?;
    for letter in AblationFlags::LETTERS {
        let flags = AblationFlags::from_letter(letter).expect("known letter");
        let cfg = ModelConfig {
            gcn_hidden: 6,
            ..ModelConfig::new(d, 3, flags)
        };
        let name = if flags == AblationFlags::full() {
            "pipeline_full".to_string()
        } else {
            format!("pipeline_{letter}")
        };
        cases.push(model_case(&name, &cfg, &input, 2, seed.wrapping_add(letter as u64))?);
    }
    Ok(cases)
}

pub fn table(cases: &[SuiteCase]) -> String {
    let mut out = format!("{:<16} {:>8} {:>12}  result\n", "case", "entries", "max_rel_err");
    for c in cases {
        out += &format!(
            "{:<16} {:>8} {:>12.3e}  {}\n",
            c.name,
            c.entries,
            c.max_rel_error,
            if c.passed { "pass" } else { "FAIL" }
        );
    }
    out
}
