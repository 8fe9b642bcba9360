//! Geometry-guided fusion of the per-patch FoV and micro-geometry sequences:
//! gated self/cross multi-head attention per modality, one pre-norm
//! transformer layer over the joined sequence, mean pooling and a linear
//! classifier.

use super::params::{layernorm, linear, Bound, Initializer};
use crate::tensor::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Modality prefixes; each owns one attention block used by both its self
/// and its cross branch.
pub const FOV: &str = "gpgf.fov";
pub const GEO: &str = "gpgf.geo";

pub fn init_mha(init: &mut Initializer<'_>, prefix: &str, d: usize) -> Result<()> {
    for proj in ["q", "k", "v", "o"] {
        init.linear(&format!("{prefix}.{proj}"), d, d)?;
    }
    Ok(())
}

pub fn init(init: &mut Initializer<'_>, d: usize, classes: usize, ffn_hidden: usize) -> Result<()> {
    init_mha(init, &format!("{FOV}.mha"), d)?;
    init_mha(init, &format!("{GEO}.mha"), d)?;
    init.linear("gpgf.geo_to_fov", d, d)?;
    init.linear("gpgf.fov_to_geo", d, d)?;
    init.linear(&format!("{FOV}.gate"), 2 * d, 1)?;
    init.linear(&format!("{GEO}.gate"), 2 * d, 1)?;
    init.layernorm("trans.ln1", d)?;
    init_mha(init, "trans.mha", d)?;
    init.layernorm("trans.ln2", d)?;
    init.linear("trans.ffn1", d, ffn_hidden)?;
    init.linear("trans.ffn2", ffn_hidden, d)?;
    init.linear("trans.cls", d, classes)
}

pub struct MhaOutput<'g> {
    pub output: Var<'g>,
    /// One `N_q x N_k` row-stochastic matrix per head.
    pub attention: Vec<Var<'g>>,
}

/// Scaled dot-product attention with `heads` heads of width `d / heads`.
pub fn mha<'g>(graph: &'g Graph, p: &Bound<'g, '_>, prefix: &str, heads: usize, q: Var<'g>, k: Var<'g>, v: Var<'g>) -> Result<MhaOutput<'g>> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(Error::Model("attention inputs must be matrices".into()));
    }
    let d = qs[1];
    if ks[1] != d || vs[1] != d || ks[0] != vs[0] {
        return Err(Error::Model(format!(
            "attention shapes q {qs:?}, k {ks:?}, v {vs:?} do not agree"
        )));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::Model(format!("width {d} is not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let qp = linear(p, &format!("{prefix}.q"), q)?;
    let kp = linear(p, &format!("{prefix}.k"), k)?;
    let vp = linear(p, &format!("{prefix}.v"), v)?;
    let mut outs = Vec::with_capacity(heads);
    let mut attention = Vec::with_capacity(heads);
    for h in 0..heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let qh = qp.slice_cols(lo, hi)?;
        let kh = kp.slice_cols(lo, hi)?;
        let vh = vp.slice_cols(lo, hi)?;
        let a = qh.matmul(&kh.transpose()?)?.scale(scale)?.softmax(1)?;
        outs.push(a.matmul(&vh)?);
        attention.push(a);
    }
    let joined = if heads == 1 { outs[0] } else { graph.concat_cols(&outs)? };
    Ok(MhaOutput {
        output: linear(p, &format!("{prefix}.o"), joined)?,
        attention,
    })
}

pub struct FuseOutput<'g> {
    /// `2N x d`, FoV tokens first.
    pub fused: Var<'g>,
    /// `N x 1` gate columns for the FoV and geometry modalities.
    pub gates: [Var<'g>; 2],
}

fn gated<'g>(graph: &'g Graph, p: &Bound<'g, '_>, prefix: &str, own: Var<'g>, other: Var<'g>, heads: usize) -> Result<(Var<'g>, Var<'g>)> {
    let attn = format!("{prefix}.mha");
    let selfy = mha(graph, p, &attn, heads, own, own, own)?.output;
    let cross = mha(graph, p, &attn, heads, other, own, own)?.output;
    let alpha = linear(p, &format!("{prefix}.gate"), graph.concat_cols(&[selfy, cross])?)?.sigmoid()?;
    let out = selfy.mul_col(&alpha)?.add(&cross.mul_col(&alpha.one_minus()?)?)?;
    Ok((out, alpha))
}

pub fn gpgf_fuse<'g>(graph: &'g Graph, p: &Bound<'g, '_>, heads: usize, fov: Var<'g>, geo: Var<'g>) -> Result<FuseOutput<'g>> {
    let (fs, gs) = (fov.shape(), geo.shape());
    if fs.len() != 2 || fs != gs {
        return Err(Error::Model(format!(
            "fusion needs equal N x d sequences, got {fs:?} and {gs:?}"
        )));
    }
    let g2f = linear(p, "gpgf.geo_to_fov", geo)?;
    let f2g = linear(p, "gpgf.fov_to_geo", fov)?;
    let (fov_out, fov_gate) = gated(graph, p, FOV, fov, g2f, heads)?;
    let (geo_out, geo_gate) = gated(graph, p, GEO, geo, f2g, heads)?;
    Ok(FuseOutput {
        fused: graph.concat_rows(&[fov_out, geo_out])?,
        gates: [fov_gate, geo_gate],
    })
}

pub struct ClassifyOutput<'g> {
    pub logits: Var<'g>,
    /// Head-averaged attention of the transformer layer (`T x T`).
    pub attention: Tensor,
}

/// Pre-norm transformer layer, mean pooling over tokens, linear classifier.
pub fn trans_classify<'g>(graph: &'g Graph, p: &Bound<'g, '_>, heads: usize, tokens: Var<'g>) -> Result<ClassifyOutput<'g>> {
    let x = tokens;
    let n1 = layernorm(p, "trans.ln1", x)?;
    let att = mha(graph, p, "trans.mha", heads, n1, n1, n1)?;
    let x = x.add(&att.output)?;
    let n2 = layernorm(p, "trans.ln2", x)?;
    let ff = linear(p, "trans.ffn2", linear(p, "trans.ffn1", n2)?.gelu()?)?;
    let x = x.add(&ff)?;
    let logits = linear(p, "trans.cls", x.mean_rows()?)?;
    Ok(ClassifyOutput {
        logits,
        attention: head_average(&att.attention),
    })
}

pub(crate) fn head_average(heads: &[Var<'_>]) -> Tensor {
    let mut acc = (*heads[0].value()).clone();
    for h in &heads[1..] {
        for (a, b) in acc.data_mut().iter_mut().zip(h.value().data()) {
            *a += b;
        }
    }
    let inv = 1.0 / heads.len() as f64;
    acc.map(|v| v * inv)
}

/// Per-patch heatmap score: attention received by each of the first `n`
/// tokens, averaged over query rows.
pub fn received_attention(attention: &Tensor, n: usize) -> Vec<f64> {
    let rows = attention.rows();
    (0..n)
        .map(|j| (0..rows).map(|i| attention.get(i, j)).sum::<f64>() / rows as f64)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use crate::tensor::grad_check_many;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn store(d: usize, classes: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init(&mut Initializer { store: &mut store, rng: &mut rng }, d, classes, 2 * d).unwrap();
        store
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn affine(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
        let mut y = x.matmul(w).unwrap();
        for r in 0..y.rows() {
            for c in 0..y.cols() {
                y.data_mut()[r * w.cols() + c] += b.get(0, c);
            }
        }
        y
    }

    /// One head at a time with plain loops.
    fn mha_oracle(s: &ParamStore, prefix: &str, heads: usize, q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
        let get = |n: &str| s.get(&format!("{prefix}.{n}")).unwrap();
        let qp = affine(q, get("q.w"), get("q.b"));
        let kp = affine(k, get("k.w"), get("k.b"));
        let vp = affine(v, get("v.w"), get("v.b"));
        let d = q.cols();
        let dh = d / heads;
        let mut cat = vec![0.0; q.rows() * d];
        for h in 0..heads {
            for i in 0..q.rows() {
                let scores: Vec<f64> = (0..k.rows())
                    .map(|j| (0..dh).map(|c| qp.get(i, h * dh + c) * kp.get(j, h * dh + c)).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for c in 0..dh {
                    cat[i * d + h * dh + c] = (0..k.rows()).map(|j| e[j] / z * vp.get(j, h * dh + c)).sum();
                }
            }
        }
        affine(&Tensor::matrix(q.rows(), d, cat).unwrap(), get("o.w"), get("o.b"))
    }

    #[test]
    fn single_key_has_unit_weight() {
        let s = store(4, 2, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (q, kv) = (random(&mut rng, 3, 4), random(&mut rng, 1, 4));
        let g = Graph::new();
        let p = s.bind(&g);
        let out = mha(&g, &p, "trans.mha", 2, g.constant(q), g.constant(kv.clone()), g.constant(kv.clone())).unwrap();
        for a in &out.attention {
            assert!(a.value().data().iter().all(|&w| w == 1.0));
        }
        let vp = affine(&kv, s.get("trans.mha.v.w").unwrap(), s.get("trans.mha.v.b").unwrap());
        let want = affine(&vp, s.get("trans.mha.o.w").unwrap(), s.get("trans.mha.o.b").unwrap());
        for r in 0..3 {
            for c in 0..4 {
                assert!((out.output.value().get(r, c) - want.get(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn duplicate_keys_share_weight() {
        let s = store(4, 2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random(&mut rng, 2, 4);
        let row = random(&mut rng, 1, 4);
        let kv = Tensor::from_rows(&[row.data().to_vec(), row.data().to_vec(), row.data().to_vec()]).unwrap();
        let g = Graph::new();
        let p = s.bind(&g);
        let out = mha(&g, &p, "trans.mha", 2, g.constant(q), g.constant(kv.clone()), g.constant(kv)).unwrap();
        for a in &out.attention {
            for &w in a.value().data() {
                assert!((w - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        let s = store(4, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (q, k, v) = (random(&mut rng, 3, 4), random(&mut rng, 3, 4), random(&mut rng, 3, 4));
        let g = Graph::new();
        let p = s.bind(&g);
        let out = mha(&g, &p, "trans.mha", 2, g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone())).unwrap();
        let want = mha_oracle(&s, "trans.mha", 2, &q, &k, &v);
        assert!(out.output.value().max_abs_diff(&want) < 1e-12);
        for a in &out.attention {
            for r in 0..3 {
                assert!((a.value().row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn indivisible_width_is_a_model_error() {
        let s = store(4, 2, 0);
        let g = Graph::new();
        let p = s.bind(&g);
        let x = g.constant(Tensor::zeros(&[2, 4]));
        assert!(matches!(mha(&g, &p, "trans.mha", 3, x, x, x), Err(Error::Model(_))));
        let y = g.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(mha(&g, &p, "trans.mha", 2, x, y, y), Err(Error::Model(_))));
    }

    fn fuse_values(s: &ParamStore, fov: &Tensor, geo: &Tensor) -> (Tensor, [Tensor; 2]) {
        let g = Graph::new();
        let p = s.bind(&g);
        let out = gpgf_fuse(&g, &p, 2, g.constant(fov.clone()), g.constant(geo.clone())).unwrap();
        let gates = [(*out.gates[0].value()).clone(), (*out.gates[1].value()).clone()];
        ((*out.fused.value()).clone(), gates)
    }

    #[test]
    fn saturated_gates_select_one_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (fov, geo) = (random(&mut rng, 2, 4), random(&mut rng, 2, 4));
        let base = store(4, 2, 8);
        let g2f = affine(&geo, base.get("gpgf.geo_to_fov.w").unwrap(), base.get("gpgf.geo_to_fov.b").unwrap());
        let f2g = affine(&fov, base.get("gpgf.fov_to_geo.w").unwrap(), base.get("gpgf.fov_to_geo.b").unwrap());
        let self_f = mha_oracle(&base, "gpgf.fov.mha", 2, &fov, &fov, &fov);
        let cross_f = mha_oracle(&base, "gpgf.fov.mha", 2, &g2f, &fov, &fov);
        let self_g = mha_oracle(&base, "gpgf.geo.mha", 2, &geo, &geo, &geo);
        let cross_g = mha_oracle(&base, "gpgf.geo.mha", 2, &f2g, &geo, &geo);
        for (bias, (wf, wg)) in [(1e3, (&self_f, &self_g)), (-1e3, (&cross_f, &cross_g))] {
            let mut s = base.clone();
            for gate in ["gpgf.fov.gate", "gpgf.geo.gate"] {
                s.get_mut(&format!("{gate}.w")).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
                s.get_mut(&format!("{gate}.b")).unwrap().data_mut()[0] = bias;
            }
            let (fused, _) = fuse_values(&s, &fov, &geo);
            for r in 0..2 {
                for c in 0..4 {
                    assert!((fused.get(r, c) - wf.get(r, c)).abs() < 1e-12);
                    assert!((fused.get(2 + r, c) - wg.get(r, c)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn fusion_matches_stepwise_recomputation() {
        let s = store(4, 2, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (fov, geo) = (random(&mut rng, 2, 4), random(&mut rng, 2, 4));
        let (fused, gates) = fuse_values(&s, &fov, &geo);
        let branch = |prefix: &str, own: &Tensor, other_proj: &str, other: &Tensor| -> (Vec<f64>, Vec<f64>) {
            let q = affine(other, s.get(&format!("{other_proj}.w")).unwrap(), s.get(&format!("{other_proj}.b")).unwrap());
            let sf = mha_oracle(&s, &format!("{prefix}.mha"), 2, own, own, own);
            let cr = mha_oracle(&s, &format!("{prefix}.mha"), 2, &q, own, own);
            let w = s.get(&format!("{prefix}.gate.w")).unwrap();
            let b = s.get(&format!("{prefix}.gate.b")).unwrap().data()[0];
            let mut out = Vec::new();
            let mut alphas = Vec::new();
            for r in 0..2 {
                let z: f64 = (0..4).map(|c| sf.get(r, c) * w.data()[c] + cr.get(r, c) * w.data()[4 + c]).sum::<f64>() + b;
                let a = 1.0 / (1.0 + (-z).exp());
                alphas.push(a);
                out.extend((0..4).map(|c| a * sf.get(r, c) + (1.0 - a) * cr.get(r, c)));
            }
            (out, alphas)
        };
        let (f_out, f_alpha) = branch(FOV, &fov, "gpgf.geo_to_fov", &geo);
        let (g_out, g_alpha) = branch(GEO, &geo, "gpgf.fov_to_geo", &fov);
        let want: Vec<f64> = f_out.into_iter().chain(g_out).collect();
        for (a, b) in fused.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
        for (got, want) in gates.iter().zip([f_alpha, g_alpha]) {
            for (a, b) in got.data().iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
                assert!(*a > 0.0 && *a < 1.0);
            }
        }
    }

    #[test]
    fn unequal_sequences_are_rejected() {
        let s = store(4, 2, 0);
        let g = Graph::new();
        let p = s.bind(&g);
        let r = gpgf_fuse(&g, &p, 2, g.constant(Tensor::zeros(&[2, 4])), g.constant(Tensor::zeros(&[3, 4])));
        assert!(matches!(r, Err(Error::Model(_))));
    }

    fn classify(s: &ParamStore, tokens: &Tensor) -> (Tensor, Tensor) {
        let g = Graph::new();
        let p = s.bind(&g);
        let out = trans_classify(&g, &p, 4, g.constant(tokens.clone())).unwrap();
        ((*out.logits.value()).clone(), out.attention)
    }

    #[test]
    fn token_permutation_keeps_logits() {
        let s = store(8, 3, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, 6, 8);
        let base = classify(&s, &x).0;
        let perm = [3, 0, 5, 1, 4, 2];
        let rows: Vec<Vec<f64>> = perm.iter().map(|&r| x.row_slice(r).to_vec()).collect();
        let permuted = classify(&s, &Tensor::from_rows(&rows).unwrap()).0;
        assert!(base.max_abs_diff(&permuted) < 1e-10);
    }

    #[test]
    fn zero_input_gives_constant_logits() {
        let s = store(8, 3, 13);
        let a = classify(&s, &Tensor::zeros(&[2, 8])).0;
        let b = classify(&s, &Tensor::zeros(&[10, 8])).0;
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn attention_rows_are_stochastic_and_scores_cover_patches() {
        let s = store(8, 3, 14);
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let (_, attention) = classify(&s, &random(&mut rng, 6, 8));
        for r in 0..6 {
            assert!((attention.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let scores = received_attention(&attention, 3);
        assert_eq!(scores.len(), 3);
        assert!(scores.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn fuse_and_classify_gradient() {
        let (d, c) = (8, 3);
        let mut s = store(d, c, 16);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for t in s.tensors_mut() {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        let mut inputs = vec![random(&mut rng, 3, d), random(&mut rng, 3, d)];
        inputs.extend(s.tensors().iter().cloned());
        let r = grad_check_many(
            |g, v| {
                let p = Bound::from_vars(&s, v[2..].to_vec())?;
                let fused = gpgf_fuse(g, &p, 4, v[0], v[1])?.fused;
                let out = trans_classify(g, &p, 4, fused)?;
                out.logits.cross_entropy(1).map_err(Error::from)
            },
            &inputs,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }
}
