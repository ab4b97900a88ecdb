use super::{check_shape, split_axis, strides, Float, Graph, Tensor, Var};
use crate::error::{shape_err, Error, Result};

impl<T: Float> Graph<T> {
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape)?;
        Ok(self.record(value, &[x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())])))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("bad permutation {perm:?}"),
            });
        }
        let map = permute_index_map(&shape, perm);
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let xd = self.value(x).data();
        let out = map.iter().map(|&src| xd[src]).collect();
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); ctx.grad.len()];
                for (o, &src) in map.iter().enumerate() {
                    gx[src] = ctx.grad[o];
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: first.len(),
            });
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let ok = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let extents: Vec<usize> = xs.iter().map(|&v| self.shape(v)[axis]).collect();
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &e) in xs.iter().zip(&extents) {
                let d = self.value(v).data();
                out.extend_from_slice(&d[o * e * inner..(o + 1) * e * inner]);
            }
        }
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            xs,
            Box::new(move |ctx| {
                let mut grads: Vec<Vec<T>> = extents.iter().map(|&e| Vec::with_capacity(outer * e * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gi, &e) in grads.iter_mut().zip(&extents) {
                        gi.extend_from_slice(&ctx.grad[pos..pos + e * inner]);
                        pos += e * inner;
                    }
                }
                grads.into_iter().zip(&ctx.needs).map(|(g, &n)| n.then_some(g)).collect()
            }),
        ))
    }

    /// `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::AxisOutOfRange {
                axis,
                rank: shape.len(),
            });
        }
        if len == 0 || start + len > shape[axis] {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("slice {start}..{} out of range on axis {axis}", start + len),
            });
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        Ok(self.record(
            Tensor::from_parts(out_shape, out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); outer * ext * inner];
                for o in 0..outer {
                    let base = o * ext * inner + start * inner;
                    gx[base..base + len * inner].copy_from_slice(&ctx.grad[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`. Backward scatters with accumulation.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        check_shape(shape)?;
        let n = self.value(x).numel();
        if shape.iter().product::<usize>() != index.len() || index.iter().any(|&i| i >= n) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: "gather index does not fit".into(),
            });
        }
        let xd = self.value(x).data();
        let out = index.iter().map(|&i| xd[i]).collect();
        Ok(self.record(
            Tensor::from_parts(shape.to_vec(), out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); n];
                for (&i, &g) in index.iter().zip(ctx.grad) {
                    gx[i] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// For each output position of a permutation, the flat source index in the input.
pub(crate) fn permute_index_map(shape: &[usize], perm: &[usize]) -> Vec<usize> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = shape.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; shape.len()];
    let mut src = 0usize;
    for _ in 0..n {
        map.push(src);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            src -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    map
}
