//! Hierarchical field-of-view alignment: an MLP-Mixer over the two FoV
//! tokens of each patch followed by gated attention pooling of two branch
//! MLPs.
//!
//! Per patch the token matrix is `f_c = [f_macro; f_meso]` (2 x d). With
//! `Θ = GELU ∘ LayerNorm` (normalizing each token over its channels):
//!
//! ```text
//! Z1 = f_c^T + (Θ(f_c)^T W1 + b1) W2          token mixing, d x 2
//! Z  = Z1^T  + (Θ(Z1^T) W3 + b3) W4           channel mixing, 2 x d
//! u_i = Φ_i(Z),  α_i = sigmoid(u_i)           Φ = Linear-ReLU-Linear-LayerNorm
//! f_FoV = Linear(mean_tokens(α_1 ⊙ u_1 + α_2 ⊙ u_2))
//! ```
//!
//! All functions here take a whole slide at once (`N` patches) and act on
//! each patch independently, so batching never changes a patch's result.

use super::params::{layernorm, linear, Bound, Initializer};
use crate::tensor::{Graph, Var};
use crate::{Error, Result};

pub const TOKENS: usize = 2;

pub fn init(init: &mut Initializer<'_>, d: usize, token_hidden: usize, channel_hidden: usize) -> Result<()> {
    init.layernorm("hfa.tok.ln", d)?;
    init.matrix("hfa.tok.w1", TOKENS, token_hidden)?;
    init.vector("hfa.tok.b1", token_hidden, 1.0 / (TOKENS as f64).sqrt())?;
    init.matrix("hfa.tok.w2", token_hidden, TOKENS)?;
    init.layernorm("hfa.ch.ln", d)?;
    init.matrix("hfa.ch.w3", d, channel_hidden)?;
    init.vector("hfa.ch.b3", channel_hidden, 1.0 / (d as f64).sqrt())?;
    init.matrix("hfa.ch.w4", channel_hidden, d)?;
    for branch in ["hfa.phi1", "hfa.phi2"] {
        init.linear(&format!("{branch}.fc1"), d, d)?;
        init.linear(&format!("{branch}.fc2"), d, d)?;
        init.layernorm(&format!("{branch}.ln"), d)?;
    }
    init.linear("hfa.out", d, d)
}

fn theta<'g>(p: &Bound<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
    Ok(layernorm(p, prefix, x)?.gelu()?)
}

/// Mixer over `N` patches. Returns `(macro', meso')`, each `N x d`: row `n`
/// of the pair is the transposed `Z` of patch `n`.
pub fn mixer_forward<'g>(graph: &'g Graph, p: &Bound<'g, '_>, macro_: Var<'g>, meso: Var<'g>) -> Result<(Var<'g>, Var<'g>)> {
    let shape = macro_.shape();
    if shape.len() != 2 || shape != meso.shape() {
        return Err(Error::Model(format!(
            "mixer expects two equal N x d token rows, got {:?} and {:?}",
            shape,
            meso.shape()
        )));
    }
    let (n, d) = (shape[0], shape[1]);

    // token mixing: every (patch, channel) pair is one row of length 2
    let tm = theta(p, "hfa.tok.ln", macro_)?.reshape(&[n * d, 1])?;
    let ts = theta(p, "hfa.tok.ln", meso)?.reshape(&[n * d, 1])?;
    let tokens = graph.concat_cols(&[tm, ts])?;
    let mixed = tokens
        .matmul(&p.get("hfa.tok.w1")?)?
        .add_row(&p.get("hfa.tok.b1")?)?
        .matmul(&p.get("hfa.tok.w2")?)?;
    let m1 = macro_.add(&mixed.slice_cols(0, 1)?.reshape(&[n, d])?)?;
    let s1 = meso.add(&mixed.slice_cols(1, 2)?.reshape(&[n, d])?)?;

    // channel mixing over the stacked 2N x d token rows
    let z1 = graph.concat_rows(&[m1, s1])?;
    let ch = theta(p, "hfa.ch.ln", z1)?
        .matmul(&p.get("hfa.ch.w3")?)?
        .add_row(&p.get("hfa.ch.b3")?)?
        .matmul(&p.get("hfa.ch.w4")?)?;
    let z = z1.add(&ch)?;
    Ok((z.slice_rows(0, n)?, z.slice_rows(n, 2 * n)?))
}

fn phi<'g>(p: &Bound<'g, '_>, branch: &str, x: Var<'g>) -> Result<Var<'g>> {
    let h = linear(p, &format!("{branch}.fc1"), x)?.relu()?;
    let h = linear(p, &format!("{branch}.fc2"), h)?;
    layernorm(p, &format!("{branch}.ln"), h)
}

/// Gated attention pooling; returns the pooled `N x d` rows and the two gate
/// matrices (each `2N x d`, macro rows first).
pub struct GapOutput<'g> {
    pub pooled: Var<'g>,
    pub gates: [Var<'g>; 2],
}

pub fn gap_forward<'g>(graph: &'g Graph, p: &Bound<'g, '_>, macro_: Var<'g>, meso: Var<'g>) -> Result<GapOutput<'g>> {
    let n = macro_.shape()[0];
    let z = graph.concat_rows(&[macro_, meso])?;
    let u1 = phi(p, "hfa.phi1", z)?;
    let u2 = phi(p, "hfa.phi2", z)?;
    let a1 = u1.sigmoid()?;
    let a2 = u2.sigmoid()?;
    let combined = a1.mul(&u1)?.add(&a2.mul(&u2)?)?;
    let pooled = combined
        .slice_rows(0, n)?
        .add(&combined.slice_rows(n, 2 * n)?)?
        .scale(0.5)?;
    Ok(GapOutput {
        pooled,
        gates: [a1, a2],
    })
}

/// `f_FoV` for every patch (`N x d`).
pub fn hfa_forward<'g>(graph: &'g Graph, p: &Bound<'g, '_>, macro_: Var<'g>, meso: Var<'g>) -> Result<Var<'g>> {
    let (zm, zs) = mixer_forward(graph, p, macro_, meso)?;
    let gap = gap_forward(graph, p, zm, zs)?;
    linear(p, "hfa.out", gap.pooled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use crate::tensor::{grad_check_many, kernels, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init(&mut Initializer { store: &mut store, rng: &mut rng }, d, 3, 5).unwrap();
        store
    }

    fn randomize(store: &mut ParamStore, rng: &mut ChaCha8Rng, scale: f64) {
        for t in store.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_prefix(store: &mut ParamStore, prefix: &str) {
        let names: Vec<String> = store.names().iter().filter(|n| n.starts_with(prefix)).cloned().collect();
        for n in names {
            store.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }

    #[test]
    fn zero_mixing_weights_are_identity() {
        let mut s = store(6, 1);
        for name in ["hfa.tok.w1", "hfa.tok.b1", "hfa.tok.w2", "hfa.ch.w3", "hfa.ch.b3", "hfa.ch.w4"] {
            s.get_mut(name).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (m, e) = (random(&mut rng, 3, 6), random(&mut rng, 3, 6));
        let g = Graph::new();
        let p = s.bind(&g);
        let (zm, zs) = mixer_forward(&g, &p, g.constant(m.clone()), g.constant(e.clone())).unwrap();
        assert_eq!(*zm.value(), m);
        assert_eq!(*zs.value(), e);
    }

    /// Literal per-patch evaluation with explicit transposes and loops.
    fn mixer_oracle(s: &ParamStore, fc: [&[f64]; 2]) -> [Vec<f64>; 2] {
        let d = fc[0].len();
        let ln = |x: &[f64], prefix: &str| -> Vec<f64> {
            let g = s.get(&format!("{prefix}.g")).unwrap();
            let b = s.get(&format!("{prefix}.b")).unwrap();
            let t = kernels::layernorm(&Tensor::row(x.to_vec()).unwrap(), g, b, kernels::LAYERNORM_EPS).unwrap();
            t.data().iter().map(|&v| kernels::Unary::Gelu.apply(v)).collect()
        };
        let w1 = s.get("hfa.tok.w1").unwrap();
        let b1 = s.get("hfa.tok.b1").unwrap();
        let w2 = s.get("hfa.tok.w2").unwrap();
        let th = w1.cols();
        // fc^T is d x 2; Θ normalizes each token (column) over channels
        let theta_cols = [ln(fc[0], "hfa.tok.ln"), ln(fc[1], "hfa.tok.ln")];
        let mut z1t = vec![vec![0.0; d]; 2]; // stored as Z1^T (2 x d)
        for c in 0..d {
            let mut hidden = vec![0.0; th];
            for (j, h) in hidden.iter_mut().enumerate() {
                *h = theta_cols[0][c] * w1.get(0, j) + theta_cols[1][c] * w1.get(1, j) + b1.get(0, j);
            }
            for t in 0..2 {
                let upd: f64 = (0..th).map(|j| hidden[j] * w2.get(j, t)).sum();
                z1t[t][c] = fc[t][c] + upd;
            }
        }
        let w3 = s.get("hfa.ch.w3").unwrap();
        let b3 = s.get("hfa.ch.b3").unwrap();
        let w4 = s.get("hfa.ch.w4").unwrap();
        let ch = w3.cols();
        let mut z = [vec![0.0; d], vec![0.0; d]];
        for t in 0..2 {
            let th_row = ln(&z1t[t], "hfa.ch.ln");
            let hidden: Vec<f64> = (0..ch)
                .map(|j| (0..d).map(|c| th_row[c] * w3.get(c, j)).sum::<f64>() + b3.get(0, j))
                .collect();
            for c in 0..d {
                z[t][c] = z1t[t][c] + (0..ch).map(|j| hidden[j] * w4.get(j, c)).sum::<f64>();
            }
        }
        z
    }

    #[test]
    fn mixer_matches_literal_oracle() {
        let mut s = store(3, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        randomize(&mut s, &mut rng, 0.3);
        let (m, e) = (random(&mut rng, 2, 3), random(&mut rng, 2, 3));
        let g = Graph::new();
        let p = s.bind(&g);
        let (zm, zs) = mixer_forward(&g, &p, g.constant(m.clone()), g.constant(e.clone())).unwrap();
        for patch in 0..2 {
            let want = mixer_oracle(&s, [m.row_slice(patch), e.row_slice(patch)]);
            for c in 0..3 {
                assert!((zm.value().get(patch, c) - want[0][c]).abs() < 1e-12);
                assert!((zs.value().get(patch, c) - want[1][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mixer_shape_mismatch_is_a_model_error() {
        let s = store(4, 0);
        let g = Graph::new();
        let p = s.bind(&g);
        let r = mixer_forward(&g, &p, g.constant(Tensor::zeros(&[2, 4])), g.constant(Tensor::zeros(&[3, 4])));
        assert!(matches!(r, Err(Error::Model(_))));
    }

    #[test]
    fn zero_branches_give_zero_output_with_half_gates() {
        let mut s = store(4, 6);
        zero_prefix(&mut s, "hfa.phi1.fc");
        zero_prefix(&mut s, "hfa.phi2.fc");
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::new();
        let p = s.bind(&g);
        let out = gap_forward(&g, &p, g.constant(random(&mut rng, 2, 4)), g.constant(random(&mut rng, 2, 4))).unwrap();
        assert!(out.pooled.value().data().iter().all(|&v| v == 0.0));
        for gate in out.gates {
            assert!(gate.value().data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn saturated_gates_sum_branches() {
        let mut s = store(4, 8);
        for b in ["hfa.phi1.ln.b", "hfa.phi2.ln.b"] {
            s.get_mut(b).unwrap().data_mut().iter_mut().for_each(|v| *v = 60.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (m, e) = (random(&mut rng, 1, 4), random(&mut rng, 1, 4));
        let g = Graph::new();
        let p = s.bind(&g);
        let out = gap_forward(&g, &p, g.constant(m.clone()), g.constant(e.clone())).unwrap();
        let z = g.concat_rows(&[g.constant(m), g.constant(e)]).unwrap();
        let u1 = phi(&p, "hfa.phi1", z).unwrap().value();
        let u2 = phi(&p, "hfa.phi2", z).unwrap().value();
        for c in 0..4 {
            let want = 0.5 * ((u1.get(0, c) + u2.get(0, c)) + (u1.get(1, c) + u2.get(1, c)));
            assert!((out.pooled.value().get(0, c) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn gap_matches_formula_and_gates_are_open_interval() {
        let mut s = store(5, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        randomize(&mut s, &mut rng, 0.5);
        let (m, e) = (random(&mut rng, 2, 5), random(&mut rng, 2, 5));
        let g = Graph::new();
        let p = s.bind(&g);
        let out = gap_forward(&g, &p, g.constant(m.clone()), g.constant(e.clone())).unwrap();

        let branch = |prefix: &str, x: &[f64]| -> Vec<f64> {
            let w1 = s.get(&format!("{prefix}.fc1.w")).unwrap();
            let b1 = s.get(&format!("{prefix}.fc1.b")).unwrap();
            let w2 = s.get(&format!("{prefix}.fc2.w")).unwrap();
            let b2 = s.get(&format!("{prefix}.fc2.b")).unwrap();
            let h: Vec<f64> = (0..5).map(|j| ((0..5).map(|c| x[c] * w1.get(c, j)).sum::<f64>() + b1.get(0, j)).max(0.0)).collect();
            let o: Vec<f64> = (0..5).map(|j| (0..5).map(|c| h[c] * w2.get(c, j)).sum::<f64>() + b2.get(0, j)).collect();
            kernels::layernorm(
                &Tensor::row(o).unwrap(),
                s.get(&format!("{prefix}.ln.g")).unwrap(),
                s.get(&format!("{prefix}.ln.b")).unwrap(),
                kernels::LAYERNORM_EPS,
            )
            .unwrap()
            .into_data()
        };
        for patch in 0..2 {
            let mut acc = vec![0.0; 5];
            for tok in [m.row_slice(patch), e.row_slice(patch)] {
                let (u1, u2) = (branch("hfa.phi1", tok), branch("hfa.phi2", tok));
                for c in 0..5 {
                    acc[c] += 0.5 * (kernels::sigmoid(u1[c]) * u1[c] + kernels::sigmoid(u2[c]) * u2[c]);
                }
            }
            for c in 0..5 {
                assert!((out.pooled.value().get(patch, c) - acc[c]).abs() < 1e-12);
            }
        }
        for gate in out.gates {
            assert!(gate.value().data().iter().all(|&a| a > 0.0 && a < 1.0));
        }
    }

    #[test]
    fn bias_passthrough_and_equal_tokens() {
        let mut s = store(4, 12);
        let names: Vec<String> = s.names().iter().filter(|n| !n.ends_with(".g") && *n != "hfa.out.b").cloned().collect();
        for n in names {
            s.get_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let g = Graph::new();
        let p = s.bind(&g);
        let zero = g.constant(Tensor::zeros(&[1, 4]));
        let f = hfa_forward(&g, &p, zero, zero).unwrap();
        assert_eq!(f.value().data(), s.get("hfa.out.b").unwrap().data());

        let s = store(4, 13);
        let t = Tensor::row(vec![0.3, -0.1, 0.8, 0.2]).unwrap();
        let run = || {
            let g = Graph::new();
            let p = s.bind(&g);
            hfa_forward(&g, &p, g.constant(t.clone()), g.constant(t.clone())).unwrap().value().data().to_vec()
        };
        let a = run();
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, run());
    }

    #[test]
    fn batched_equals_individual() {
        let s = store(6, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (m, e) = (random(&mut rng, 4, 6), random(&mut rng, 4, 6));
        let g = Graph::new();
        let p = s.bind(&g);
        let batched = hfa_forward(&g, &p, g.constant(m.clone()), g.constant(e.clone())).unwrap().value();
        for patch in 0..4 {
            let single = hfa_forward(
                &g,
                &p,
                g.constant(Tensor::row(m.row_slice(patch).to_vec()).unwrap()),
                g.constant(Tensor::row(e.row_slice(patch).to_vec()).unwrap()),
            )
            .unwrap()
            .value();
            assert_eq!(single.data(), batched.row_slice(patch));
        }
    }

    #[test]
    fn mixer_gradient_passes_finite_differences() {
        let mut s = store(8, 18);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        randomize(&mut s, &mut rng, 0.4);
        let mut inputs = vec![random(&mut rng, 1, 8), random(&mut rng, 1, 8)];
        inputs.extend(s.tensors().iter().cloned());
        let r = grad_check_many(
            |g, v| {
                let p = Bound::from_vars(&s, v[2..].to_vec())?;
                let (zm, zs) = mixer_forward(g, &p, v[0], v[1])?;
                zm.sum()?.add(&zs.sum()?).map_err(Error::from)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn full_gradient_passes_finite_differences() {
        let d = 8;
        let mut s = store(d, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        randomize(&mut s, &mut rng, 0.4);
        let (m, e) = (random(&mut rng, 2, d), random(&mut rng, 2, d));
        let mut inputs = vec![m, e];
        inputs.extend(s.tensors().iter().cloned());
        let r = grad_check_many(
            |g, v| {
                let p = Bound::from_vars(&s, v[2..].to_vec())?;
                hfa_forward(g, &p, v[0], v[1])?.mean().map_err(Error::from)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
