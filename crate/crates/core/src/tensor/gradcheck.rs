use super::{Graph, Result, Tensor, TensorError, Var};

/// Below this magnitude the relative error is measured against the floor
/// instead, so gradients that are zero up to rounding do not divide by ~0.
const DENOM_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over entries of `|auto - numeric| / max(|auto|, |numeric|, 1e-6)`
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat element index) of the worst entry
    pub worst: (usize, usize),
    pub entries: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences with step `h`.
pub fn grad_check<F, E>(f: F, x: &Tensor, h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> std::result::Result<Var<'g>, E>,
    E: From<TensorError>,
{
    grad_check_many(|g, vars| f(g, vars[0]), std::slice::from_ref(x), h, tol)
}

/// [`grad_check`] over several inputs at once; every input is a
/// differentiable leaf.
pub fn grad_check_many<F, E>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> std::result::Result<GradCheckReport, E>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> std::result::Result<Var<'g>, E>,
    E: From<TensorError>,
{
    let eval = |values: &[Tensor]| -> std::result::Result<f64, E> {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        Ok(scalar_of(&out)?)
    };

    let analytic: Vec<Tensor> = {
        let g = Graph::new();
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&g, &vars)?;
        g.backward(out)?;
        vars.iter()
            .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(v.value().shape())))
            .collect()
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: (0, 0),
        entries: 0,
        tol,
        passed: true,
    };
    for (which, grad) in analytic.iter().enumerate() {
        for idx in 0..grad.numel() {
            let orig = work[which].data()[idx];
            work[which].data_mut()[idx] = orig + h;
            let plus = eval(&work)?;
            work[which].data_mut()[idx] = orig - h;
            let minus = eval(&work)?;
            work[which].data_mut()[idx] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let auto = grad.data()[idx];
            let abs = (auto - numeric).abs();
            let rel = abs / auto.abs().max(numeric.abs()).max(DENOM_FLOOR);
            report.entries += 1;
            report.max_abs_error = report.max_abs_error.max(abs);
            if rel > report.max_rel_error || rel.is_nan() {
                report.max_rel_error = rel;
                report.worst = (which, idx);
            }
        }
    }
    report.passed = report.max_rel_error < tol;
    Ok(report)
}

fn scalar_of(v: &Var<'_>) -> Result<f64> {
    let value = v.value();
    if value.numel() != 1 {
        return Err(TensorError::Usage(format!(
            "grad_check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels::LAYERNORM_EPS;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| StandardNormal.sample(rng)).collect()).unwrap()
    }

    #[test]
    fn sum_is_exact_on_dyadic_inputs() {
        let x = Tensor::row(vec![0.5, -1.25, 3.0, 0.125]).unwrap();
        let r = grad_check(|_, x| x.sum(), &x, 2f64.powi(-10), 1e-12).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert!(r.passed);
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = normal(&mut rng, &[3, 4]);
        let b = normal(&mut rng, &[4, 2]);
        let row = normal(&mut rng, &[1, 4]);
        let col = normal(&mut rng, &[3, 1]);
        let pos = a.map(|v| v.abs() + 0.5);
        let h = 1e-5;
        let tol = 1e-4;

        macro_rules! check {
            ($name:expr, [$($t:expr),*], |$g:ident, $v:ident| $body:expr) => {{
                let r = grad_check_many(|$g, $v| $body, &[$($t.clone()),*], h, tol).unwrap();
                assert!(r.passed, "{}: {:?}", $name, r);
            }};
        }
        check!("matmul", [a, b], |_g, v| v[0].matmul(&v[1])?.sum());
        check!("add", [a, a], |_g, v| v[0].add(&v[1])?.mul(&v[0])?.sum());
        check!("sub", [a, a], |_g, v| v[0].sub(&v[1].scale(2.0)?)?.mul(&v[0])?.sum());
        check!("add_row", [a, row], |_g, v| v[0].add_row(&v[1])?.gelu()?.sum());
        check!("mul_col", [a, col], |_g, v| v[0].mul_col(&v[1])?.tanh()?.sum());
        check!("relu", [a], |_g, v| v[0].relu()?.mul(&v[0])?.sum());
        check!("gelu", [a], |_g, v| v[0].gelu()?.mul(&v[0])?.sum());
        check!("sigmoid", [a], |_g, v| v[0].sigmoid()?.mul(&v[0])?.sum());
        check!("exp", [a], |_g, v| v[0].exp()?.sum());
        check!("log", [pos], |_g, v| v[0].log()?.mul(&v[0])?.sum());
        check!("softmax1", [a], |_g, v| v[0].softmax(1)?.mul(&v[0])?.sum());
        check!("softmax0", [a], |_g, v| v[0].softmax(0)?.mul(&v[0])?.sum());
        check!("layernorm", [a, row, row], |_g, v| {
            v[0].layernorm(&v[1], &v[2], LAYERNORM_EPS)?.mul(&v[0])?.sum()
        });
        check!("transpose", [a, b], |_g, v| v[0].transpose()?.transpose()?.matmul(&v[1])?.tanh()?.sum());
        check!("reshape", [a, b], |_g, v| v[0].reshape(&[4, 3])?.tanh()?.mul(&v[0].reshape(&[4, 3])?)?.sum());
        check!("concat", [a, b], |g, v| {
            let rows = g.concat_rows(&[v[0], v[1].transpose()?])?;
            let cols = g.concat_cols(&[v[0], v[0].scale(3.0)?])?;
            rows.tanh()?.sum()?.add(&cols.sigmoid()?.sum()?)
        });
        check!("slices", [a], |_g, v| {
            let r = v[0].slice_rows(1, 3)?.tanh()?.sum()?;
            let c = v[0].slice_cols(1, 2)?.exp()?.sum()?;
            r.add(&c)
        });
        check!("mean_rows", [a], |_g, v| v[0].mean_rows()?.tanh()?.sum());
        check!("mean", [a], |_g, v| v[0].tanh()?.mean());
        check!("cross_entropy", [row], |_g, v| v[0].cross_entropy(2));
        check!("one_minus", [col], |_g, v| v[0].sigmoid()?.one_minus()?.log()?.sum());
    }

    #[test]
    fn composite_mlp_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = normal(&mut rng, &[5, 4]);
        let w1 = normal(&mut rng, &[4, 6]);
        let b1 = normal(&mut rng, &[1, 6]);
        let w2 = normal(&mut rng, &[6, 3]);
        let r = grad_check_many(
            |_g, v| {
                let h = v[0].matmul(&v[1])?.add_row(&v[2])?.gelu()?;
                h.matmul(&v[3])?.mean_rows()?.cross_entropy(1)
            },
            &[x, w1, b1, w2],
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.entries, 20 + 24 + 6 + 18);
    }
}
