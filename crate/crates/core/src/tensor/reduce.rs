use super::{cast, split_axis, Float, Graph, Tensor, Var};
use crate::error::{Error, Result};

impl<T: Float> Graph<T> {
    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let n = self.value(x).numel();
        self.record(
            Tensor::scalar(s),
            &[x],
            Box::new(move |ctx| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let idx = |j: usize| base + j * inner;
                let mut mx = T::neg_infinity();
                for j in 0..len {
                    mx = mx.max(xd[idx(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xd[idx(j)] - mx).exp();
                    out[idx(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    out[idx(j)] /= total;
                }
            }
        }
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let g = ctx.grad;
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for j in 0..len {
                            let k = base + j * inner;
                            dot += g[k] * y[k];
                        }
                        for j in 0..len {
                            let k = base + j * inner;
                            gx[k] = y[k] * (g[k] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Mean of binary cross-entropy between `sigmoid(logits)` and fixed targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let xs = self.value(logits);
        if xs.shape() != targets.shape() {
            return Err(crate::error::shape_err("bce_with_logits", xs.shape(), targets.shape()));
        }
        let n = xs.numel();
        let total: T = xs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &t)| x.max(T::zero()) - x * t + (T::one() + (-x.abs()).exp()).ln())
            .sum();
        let inv_n: T = cast(1.0 / n as f64);
        let t = targets.data().to_vec();
        Ok(self.record(
            Tensor::scalar(total * inv_n),
            &[logits],
            Box::new(move |ctx| {
                let g = ctx.grad[0] * inv_n;
                let gx = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(&t)
                    .map(|(&x, &t)| g * (super::elementwise::sigmoid(x) - t))
                    .collect();
                vec![Some(gx)]
            }),
        ))
    }
}
