//! Batch normalization over (N, H, W) per channel and layer normalization over
//! the last axis, each as a single fused graph op.

use crate::error::{shape_err, Result};
use crate::tensor::{cast, split_axis, Float, Graph, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.03;
pub const LN_EPS: f64 = 1e-5;

/// Per-channel batch statistics of a training pass.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Biased (population) variance, the one used for normalization.
    pub var: Vec<T>,
    /// Elements per channel.
    pub count: usize,
}

impl<T: Float> BatchStats<T> {
    /// Running-stat update with momentum, using the unbiased variance.
    pub fn blend(&self, run_mean: &[T], run_var: &[T], momentum: f64) -> (Vec<T>, Vec<T>) {
        let m: T = cast(momentum);
        let keep = T::one() - m;
        let unbias: T = if self.count > 1 {
            cast(self.count as f64 / (self.count - 1) as f64)
        } else {
            T::one()
        };
        let mean = run_mean.iter().zip(&self.mean).map(|(&r, &b)| keep * r + m * b).collect();
        let var = run_var.iter().zip(&self.var).map(|(&r, &b)| keep * r + m * b * unbias).collect();
        (mean, var)
    }
}

fn check_affine(g: &Graph<impl Float>, what: &'static str, gamma: Var, beta: Var, c: usize) -> Result<()> {
    for v in [gamma, beta] {
        if g.value(v).numel() != c {
            return Err(shape_err(what, &[c], g.shape(v)));
        }
    }
    Ok(())
}

impl<T: Float> Graph<T> {
    /// Training-mode batch norm on `[N, C, ...]`; returns the output and the batch statistics.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", &shape, &[]));
        }
        let (n, c, inner) = split_axis(&shape, 1);
        check_affine(self, "batch_norm", gamma, beta, c)?;
        let m = n * inner;
        let xd = self.value(x).data();
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        let inv_m: T = cast(1.0 / m as f64);
        for (i, chunk) in xd.chunks(inner).enumerate() {
            mean[i % c] += chunk.iter().copied().sum::<T>();
        }
        mean.iter_mut().for_each(|v| *v *= inv_m);
        for (i, chunk) in xd.chunks(inner).enumerate() {
            let mu = mean[i % c];
            var[i % c] += chunk.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>();
        }
        var.iter_mut().for_each(|v| *v *= inv_m);
        let eps: T = cast(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (gd, bd) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for (i, chunk) in xd.chunks(inner).enumerate() {
            let ch = i % c;
            for &v in chunk {
                let h = (v - mean[ch]) * inv_std[ch];
                xhat.push(h);
                out.push(gd[ch] * h + bd[ch]);
            }
        }
        let stats = BatchStats {
            mean,
            var,
            count: m,
        };
        let y = self.record(
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let gd = ctx.inputs[1].data();
                let mut sum_g = vec![T::zero(); c];
                let mut sum_gx = vec![T::zero(); c];
                for (i, (gc, hc)) in ctx.grad.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (&gv, &h) in gc.iter().zip(hc) {
                        sum_g[ch] += gv;
                        sum_gx[ch] += gv * h;
                    }
                }
                let dx = ctx.needs[0].then(|| {
                    let mut dx = Vec::with_capacity(ctx.grad.len());
                    for (i, (gc, hc)) in ctx.grad.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                        let ch = i % c;
                        let k = gd[ch] * inv_std[ch] * inv_m;
                        let mf: T = cast(m as f64);
                        for (&gv, &h) in gc.iter().zip(hc) {
                            dx.push(k * (mf * gv - sum_g[ch] - h * sum_gx[ch]));
                        }
                    }
                    dx
                });
                vec![dx, ctx.needs[1].then_some(sum_gx), ctx.needs[2].then_some(sum_g)]
            }),
        );
        Ok((y, stats))
    }

    /// Inference-mode batch norm with fixed statistics.
    pub fn batch_norm_eval(&mut self, x: Var, gamma: Var, beta: Var, mean: &[T], var: &[T], eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(shape_err("batch_norm", &shape, &[]));
        }
        let (_, c, inner) = split_axis(&shape, 1);
        check_affine(self, "batch_norm", gamma, beta, c)?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err("batch_norm stats", &[c], &[mean.len()]));
        }
        let eps: T = cast(eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mean = mean.to_vec();
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(xd.len());
        for (i, chunk) in xd.chunks(inner).enumerate() {
            let ch = i % c;
            let (s, mu, b) = (gd[ch] * inv_std[ch], mean[ch], bd[ch]);
            out.extend(chunk.iter().map(|&v| s * (v - mu) + b));
        }
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let (xd, gd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let mut dx = ctx.needs[0].then(|| Vec::with_capacity(xd.len()));
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                for (i, (gc, xc)) in ctx.grad.chunks(inner).zip(xd.chunks(inner)).enumerate() {
                    let ch = i % c;
                    for (&gv, &v) in gc.iter().zip(xc) {
                        dg[ch] += gv * (v - mean[ch]) * inv_std[ch];
                        db[ch] += gv;
                    }
                    if let Some(dx) = dx.as_mut() {
                        let s = gd[ch] * inv_std[ch];
                        dx.extend(gc.iter().map(|&gv| gv * s));
                    }
                }
                vec![dx, ctx.needs[1].then_some(dg), ctx.needs[2].then_some(db)]
            }),
        ))
    }

    /// Layer norm over the last axis with per-feature affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().expect("rank >= 1");
        check_affine(self, "layer_norm", gamma, beta, d)?;
        let eps: T = cast(eps);
        let inv_d: T = cast(1.0 / d as f64);
        let (xd, gd, bd) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xd.len() / d;
        let mut xhat = Vec::with_capacity(xd.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(gd[j] * h + bd[j]);
            }
        }
        Ok(self.record(
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let gd = ctx.inputs[1].data();
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let mut dx = ctx.needs[0].then(|| Vec::with_capacity(ctx.grad.len()));
                let mut gh = vec![T::zero(); d];
                for ((gr, hr), &is) in ctx.grad.chunks(d).zip(xhat.chunks(d)).zip(&inv_std) {
                    let (mut s1, mut s2) = (T::zero(), T::zero());
                    for j in 0..d {
                        dg[j] += gr[j] * hr[j];
                        db[j] += gr[j];
                        gh[j] = gr[j] * gd[j];
                        s1 += gh[j];
                        s2 += gh[j] * hr[j];
                    }
                    if let Some(dx) = dx.as_mut() {
                        let (m1, m2) = (s1 * inv_d, s2 * inv_d);
                        dx.extend((0..d).map(|j| is * (gh[j] - m1 - hr[j] * m2)));
                    }
                }
                vec![dx, ctx.needs[1].then_some(dg), ctx.needs[2].then_some(db)]
            }),
        ))
    }
}
