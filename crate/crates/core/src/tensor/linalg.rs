use super::{Float, Graph, Tensor, Var};
use crate::error::{shape_err, Result};

impl<T: Float> Graph<T> {
    /// Matrix product over the last two axes.
    ///
    /// `a` is `[.., M, K]`; `b` is either `[K, N]` (shared by every leading
    /// index of `a`) or `[.., K, N]` with leading axes equal to `a`'s.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let shared = sb.len() == 2;
        if !shared && sa[..sa.len() - 2] != sb[..sb.len() - 2] {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);

        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let mut out = vec![T::zero(); batch * m * n];
        if shared {
            // Fold the batch into the row dimension.
            T::gemm(batch * m, k, n, ad, (k as isize, 1), bd, (n as isize, 1), T::zero(), &mut out, n);
        } else {
            for i in 0..batch {
                T::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    (k as isize, 1),
                    &bd[i * k * n..],
                    (n as isize, 1),
                    T::zero(),
                    &mut out[i * m * n..],
                    n,
                );
            }
        }
        let value = Tensor::from_parts(out_shape, out);
        Ok(self.record(
            value,
            &[a, b],
            Box::new(move |ctx| {
                let (ad, bd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad);
                let ga = ctx.needs[0].then(|| {
                    // dA = dC · Bᵀ
                    let mut ga = vec![T::zero(); ad.len()];
                    if shared {
                        T::gemm(batch * m, n, k, gd, (n as isize, 1), bd, (1, n as isize), T::zero(), &mut ga, k);
                    } else {
                        for i in 0..batch {
                            T::gemm(
                                m,
                                n,
                                k,
                                &gd[i * m * n..],
                                (n as isize, 1),
                                &bd[i * k * n..],
                                (1, n as isize),
                                T::zero(),
                                &mut ga[i * m * k..],
                                k,
                            );
                        }
                    }
                    ga
                });
                let gb = ctx.needs[1].then(|| {
                    // dB = Aᵀ · dC
                    let mut gb = vec![T::zero(); bd.len()];
                    if shared {
                        T::gemm(k, batch * m, n, ad, (1, k as isize), gd, (n as isize, 1), T::zero(), &mut gb, n);
                    } else {
                        for i in 0..batch {
                            T::gemm(
                                k,
                                m,
                                n,
                                &ad[i * m * k..],
                                (1, k as isize),
                                &gd[i * m * n..],
                                (n as isize, 1),
                                T::zero(),
                                &mut gb[i * k * n..],
                                n,
                            );
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn triple_loop(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn forced_arithmetic() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::from_f64(&[2, 1], &[3.0, 4.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[11.0]);
        assert_eq!(g.shape(c), &[1, 1]);
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::from_f64(&[3, 4], &data).unwrap());
        let i = g.constant(Tensor::from_f64(&[4, 4], &eye).unwrap());
        let c = g.matmul(a, i).unwrap();
        assert_eq!(g.value(c).data(), &data[..]);
    }

    #[test]
    fn matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let a: Vec<f64> = (0..12).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..8).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let mut g = Graph::<f64>::new();
            let va = g.constant(Tensor::from_f64(&[3, 4], &a).unwrap());
            let vb = g.constant(Tensor::from_f64(&[4, 2], &b).unwrap());
            let c = g.matmul(va, vb).unwrap();
            let want = triple_loop(&a, &b, 3, 4, 2);
            for (x, y) in g.value(c).data().iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn batched_matches_per_batch_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<f64> = (0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::from_f64(&[2, 3, 4], &a).unwrap());
        let vb = g.constant(Tensor::from_f64(&[2, 4, 5], &b).unwrap());
        let c = g.matmul(va, vb).unwrap();
        for i in 0..2 {
            let want = triple_loop(&a[i * 12..(i + 1) * 12], &b[i * 20..(i + 1) * 20], 3, 4, 5);
            for (x, y) in g.value(c).data()[i * 15..(i + 1) * 15].iter().zip(&want) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn inner_dimension_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        assert!(g.matmul(a, b).is_err());
    }
}
