//! Central-difference gradient checking.

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Relative errors use `max(|analytic|, |numeric|, REL_FLOOR)` as denominator
/// so that vanishing gradients are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub tol: f64,
    /// Elements whose relative error exceeds `tol`.
    pub flagged: Vec<Mismatch>,
    pub non_finite: bool,
    pub error: Option<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.non_finite && self.flagged.is_empty() && self.max_rel_err <= self.tol
    }

    fn failed(tol: f64, msg: String) -> Self {
        Self {
            max_rel_err: f64::INFINITY,
            checked: 0,
            tol,
            flagged: Vec::new(),
            non_finite: false,
            error: Some(msg),
        }
    }
}

/// Checks `f` against central differences with respect to its single input.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, Var) -> Result<Var>,
{
    grad_check_inputs(|g, vs| f(g, vs[0]), std::slice::from_ref(x), h, tol, None)
}

/// Checks `f` with respect to every tensor in `xs`.
///
/// Non-scalar outputs are contracted with fixed weights in [0.5, 1.5] so every
/// output direction contributes. When `probes` is set, at most that many
/// evenly spaced elements per input are perturbed.
pub fn grad_check_inputs<F>(f: F, xs: &[Tensor<f64>], h: f64, tol: f64, probes: Option<usize>) -> GradCheckReport
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<f64>], grad: bool| -> Result<(Vec<f64>, Vec<Option<Tensor<f64>>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), grad)).collect();
        let y = f(&mut g, &vars)?;
        let out = g.value(y).data().to_vec();
        let mut grads = Vec::new();
        if grad {
            let w = g.constant(Tensor::new(g.shape(y), projection(out.len()))?);
            let p = g.mul(y, w)?;
            let l = g.sum(p);
            g.backward(l)?;
            grads = vars.iter().map(|&v| g.grad(v)).collect();
        }
        Ok((out, grads))
    };

    let (y0, grads) = match eval(xs, true) {
        Ok(r) => r,
        Err(e) => return GradCheckReport::failed(tol, e.to_string()),
    };
    let weights = projection(y0.len());
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        tol,
        flagged: Vec::new(),
        non_finite: y0.iter().any(|v| !v.is_finite()),
        error: None,
    };
    if report.non_finite {
        return report;
    }

    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for (input, x) in xs.iter().enumerate() {
        let analytic = grads[input].as_ref().map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
        let n = x.numel();
        let step = probes.map_or(1, |p| (n / p.max(1)).max(1));
        for e in (0..n).step_by(step) {
            let orig = x.data()[e];
            let (plus, minus) = (orig + h, orig - h);
            work[input].data_mut()[e] = plus;
            let yp = eval(&work, false);
            work[input].data_mut()[e] = minus;
            let ym = eval(&work, false);
            work[input].data_mut()[e] = orig;
            let (yp, ym) = match (yp, ym) {
                (Ok(a), Ok(b)) => (a.0, b.0),
                (Err(err), _) | (_, Err(err)) => {
                    report.error = Some(err.to_string());
                    return report;
                }
            };
            let dx = plus - minus;
            let numeric: f64 = weights
                .iter()
                .zip(yp.iter().zip(&ym))
                .map(|(w, (a, b))| w * ((a - b) / dx))
                .sum();
            if !numeric.is_finite() {
                report.non_finite = true;
            }
            let a = analytic[e];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            report.max_rel_err = report.max_rel_err.max(rel);
            if rel > tol || !numeric.is_finite() {
                report.flagged.push(Mismatch {
                    input,
                    element: e,
                    analytic: a,
                    numeric,
                    rel_err: rel,
                });
            }
        }
    }
    report
}

fn projection(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    // Deterministic low-discrepancy weights in [0.5, 1.5].
    (0..n).map(|i| 0.5 + ((i as f64 + 1.0) * 0.618_033_988_749_895).fract()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn identity_has_zero_error() {
        let r = grad_check(|_, x| Ok(x), &random(&[5], 1), 1e-4, 1e-4);
        assert!(r.passed());
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn softmax_of_matmul() {
        let a = random(&[4, 4], 2);
        let b = random(&[4, 4], 3);
        let r = grad_check_inputs(
            |g, v| {
                let m = g.matmul(v[0], v[1])?;
                g.softmax(m, 1)
            },
            &[a, b],
            1e-4,
            1e-4,
            None,
        );
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn composed_graph() {
        let x = random(&[2, 3], 4);
        let r = grad_check(
            |g, x| {
                let s = g.sigmoid(x);
                let t = g.tanh(x);
                let p = g.mul(s, t)?;
                let q = g.permute(p, &[1, 0])?;
                let e = g.exp(q);
                let sq = g.square(e);
                let r = g.reshape(sq, &[6])?;
                let sl = g.slice(r, 0, 1, 4)?;
                Ok(g.mean(sl))
            },
            &x,
            1e-4,
            1e-4,
        );
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn nan_is_a_failure() {
        let x = Tensor::from_f64(&[2], &[-1.0, 1.0]).unwrap();
        let r = grad_check(|g, x| Ok(g.sqrt(x)), &x, 1e-4, 1e-4);
        assert!(!r.passed());
        assert!(r.non_finite);
    }

    #[test]
    fn wrong_backward_is_caught() {
        let x = random(&[4], 9);
        let r = grad_check(
            |g, x| {
                // y = x² with a deliberately wrong derivative of x.
                Ok(g.unary(x, |v| v * v, |v, _| v))
            },
            &x,
            1e-4,
            1e-4,
        );
        assert!(!r.passed());
        assert_eq!(r.flagged.len(), 4);
    }
}
