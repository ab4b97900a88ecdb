//! Max pooling, nearest-neighbour upsampling and channel shuffle.

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

fn nchw(g: &Graph<impl Float>, x: Var, op: &'static str) -> Result<[usize; 4]> {
    g.shape(x).try_into().map_err(|_| Error::InvalidShape {
        shape: g.shape(x).to_vec(),
        reason: format!("{op} expects [N, C, H, W]"),
    })
}

impl<T: Float> Graph<T> {
    /// k×k max pooling with implicit -inf padding.
    pub fn max_pool2d(&mut self, x: Var, k: usize, stride: usize, padding: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self, x, "max_pool2d")?;
        if k == 0 || stride == 0 || h + 2 * padding < k || w + 2 * padding < k || 2 * padding > k {
            return Err(Error::InvalidShape {
                shape: vec![n, c, h, w],
                reason: format!("max_pool2d k={k} s={stride} p={padding}"),
            });
        }
        let ho = (h + 2 * padding - k) / stride + 1;
        let wo = (w + 2 * padding - k) / stride + 1;
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * ho * wo);
        let mut arg = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..ho {
                let y0 = (oy * stride).saturating_sub(padding);
                let y1 = (oy * stride + k - padding).min(h);
                for ox in 0..wo {
                    let x0 = (ox * stride).saturating_sub(padding);
                    let x1 = (ox * stride + k - padding).min(w);
                    let mut best = base + y0 * w + x0;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let i = base + iy * w + ix;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    arg.push(best);
                    out.push(xd[best]);
                }
            }
        }
        let numel = xd.len();
        Ok(self.record(
            Tensor::from_parts(vec![n, c, ho, wo], out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); numel];
                for (&i, &g) in arg.iter().zip(ctx.grad) {
                    gx[i] += g;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Doubles H and W by replication.
    pub fn upsample_nearest2(&mut self, x: Var) -> Result<Var> {
        let [n, c, h, w] = nchw(self, x, "upsample")?;
        let (h2, w2) = (2 * h, 2 * w);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(xd.len() * 4);
        for plane in xd.chunks(h * w) {
            for oy in 0..h2 {
                let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
                for &v in row {
                    out.push(v);
                    out.push(v);
                }
            }
        }
        Ok(self.record(
            Tensor::from_parts(vec![n, c, h2, w2], out),
            &[x],
            Box::new(move |ctx| {
                let mut gx = vec![T::zero(); n * c * h * w];
                for (p, gp) in ctx.grad.chunks(h2 * w2).enumerate() {
                    let dst = &mut gx[p * h * w..(p + 1) * h * w];
                    for oy in 0..h2 {
                        for ox in 0..w2 {
                            dst[(oy / 2) * w + ox / 2] += gp[oy * w2 + ox];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Views channels as (groups, C/groups), transposes, and flattens back.
    pub fn channel_shuffle(&mut self, x: Var, groups: usize) -> Result<Var> {
        let [n, c, h, w] = nchw(self, x, "channel_shuffle")?;
        if groups == 0 || c % groups != 0 {
            return Err(Error::Config(format!("channel_shuffle: {c} channels not divisible by {groups} groups")));
        }
        if groups == 1 {
            return Ok(x);
        }
        let per = c / groups;
        let hw = h * w;
        let mut index = Vec::with_capacity(n * c * hw);
        for b in 0..n {
            for j in 0..per {
                for gi in 0..groups {
                    let src = (b * c + gi * per + j) * hw;
                    index.extend(src..src + hw);
                }
            }
        }
        self.gather(x, index, &[n, c, h, w])
    }
}

/// Output channel order of [`Graph::channel_shuffle`].
pub fn shuffle_order(c: usize, groups: usize) -> Vec<usize> {
    let per = c / groups;
    (0..per).flat_map(|j| (0..groups).map(move |gi| gi * per + j)).collect()
}
