//! 2-D convolution: im2col + GEMM for dense and grouped kernels, a direct
//! kernel for depthwise filters.

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            groups,
        }
    }

    pub fn out_len(&self, len: usize, k: usize) -> Option<usize> {
        let padded = len + 2 * self.padding;
        (padded >= k).then(|| (padded - k) / self.stride + 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    co: usize,
    cg: usize,
    k: usize,
    ho: usize,
    wo: usize,
    s: usize,
    p: usize,
    groups: usize,
}

impl Dims {
    fn cog(&self) -> usize {
        self.co / self.groups
    }

    fn kc(&self) -> usize {
        self.cg * self.k * self.k
    }

    fn depthwise(&self) -> bool {
        self.groups == self.c && self.co == self.c && self.cg == 1
    }

    fn pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

/// Output positions `o` in `0..out` whose input index `o*s + off - p` lies in `0..len`.
#[inline]
fn valid_range(off: usize, p: usize, s: usize, len: usize, out: usize) -> (usize, usize) {
    let lo = if p > off { (p - off).div_ceil(s) } else { 0 };
    let hi = if len + p > off {
        ((len + p - off - 1) / s + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn im2col<T: Float>(x: &[T], d: &Dims, col: &mut [T]) {
    let (hw_o, k) = (d.ho * d.wo, d.k);
    for c in 0..d.cg {
        let plane = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, d.p, d.s, d.h, d.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, d.p, d.s, d.w, d.wo);
                let row = &mut col[((c * k + ky) * k + kx) * hw_o..][..hw_o];
                row.fill(T::zero());
                for oy in oy_lo..oy_hi {
                    let iy = oy * d.s + ky - d.p;
                    let src = &plane[iy * d.w..];
                    let dst = &mut row[oy * d.wo..];
                    for ox in ox_lo..ox_hi {
                        dst[ox] = src[ox * d.s + kx - d.p];
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(col: &[T], d: &Dims, dx: &mut [T]) {
    let (hw_o, k) = (d.ho * d.wo, d.k);
    for c in 0..d.cg {
        let plane = &mut dx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, d.p, d.s, d.h, d.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, d.p, d.s, d.w, d.wo);
                let row = &col[((c * k + ky) * k + kx) * hw_o..][..hw_o];
                for oy in oy_lo..oy_hi {
                    let iy = oy * d.s + ky - d.p;
                    for ox in ox_lo..ox_hi {
                        plane[iy * d.w + ox * d.s + kx - d.p] += row[oy * d.wo + ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Float>(x: &[T], w: &[T], d: &Dims, out: &mut [T]) {
    let (k, hw, hw_o) = (d.k, d.h * d.w, d.ho * d.wo);
    for nc in 0..d.n * d.c {
        let c = nc % d.c;
        let plane = &x[nc * hw..(nc + 1) * hw];
        let dst = &mut out[nc * hw_o..(nc + 1) * hw_o];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, d.p, d.s, d.h, d.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, d.p, d.s, d.w, d.wo);
                let wv = w[(c * k + ky) * k + kx];
                for oy in oy_lo..oy_hi {
                    let src = &plane[(oy * d.s + ky - d.p) * d.w..];
                    let row = &mut dst[oy * d.wo..];
                    for ox in ox_lo..ox_hi {
                        row[ox] += wv * src[ox * d.s + kx - d.p];
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Float>(x: &[T], w: &[T], g: &[T], d: &Dims, dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
    let (k, hw, hw_o) = (d.k, d.h * d.w, d.ho * d.wo);
    let mut dx = dx;
    let mut dw = dw;
    for nc in 0..d.n * d.c {
        let c = nc % d.c;
        let plane = &x[nc * hw..(nc + 1) * hw];
        let gp = &g[nc * hw_o..(nc + 1) * hw_o];
        for ky in 0..k {
            let (oy_lo, oy_hi) = valid_range(ky, d.p, d.s, d.h, d.ho);
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(kx, d.p, d.s, d.w, d.wo);
                let widx = (c * k + ky) * k + kx;
                let wv = w[widx];
                let mut acc = T::zero();
                for oy in oy_lo..oy_hi {
                    let iy = oy * d.s + ky - d.p;
                    for ox in ox_lo..ox_hi {
                        let ix = ox * d.s + kx - d.p;
                        let gv = gp[oy * d.wo + ox];
                        acc += gv * plane[iy * d.w + ix];
                        if let Some(dx) = dx.as_deref_mut() {
                            dx[nc * hw + iy * d.w + ix] += wv * gv;
                        }
                    }
                }
                if let Some(dw) = dw.as_deref_mut() {
                    dw[widx] += acc;
                }
            }
        }
    }
}

impl<T: Float> Graph<T> {
    /// `x: [N, C, H, W]`, `weight: [C_out, C/groups, k, k]`, optional `bias: [C_out]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sw[2] != sw[3] || geom.stride == 0 || geom.groups == 0 {
            return Err(crate::error::shape_err("conv2d", &sx, &sw));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (co, cg, k) = (sw[0], sw[1], sw[2]);
        if c % geom.groups != 0 || co % geom.groups != 0 || c / geom.groups != cg {
            return Err(Error::Config(format!(
                "conv2d: {c} input channels, weight {sw:?} and {} groups disagree",
                geom.groups
            )));
        }
        let (Some(ho), Some(wo)) = (geom.out_len(h, k), geom.out_len(w, k)) else {
            return Err(crate::error::shape_err("conv2d", &sx, &sw));
        };
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(crate::error::shape_err("conv2d bias", &[co], self.shape(b)));
            }
        }
        let d = Dims {
            n,
            c,
            h,
            w,
            co,
            cg,
            k,
            ho,
            wo,
            s: geom.stride,
            p: geom.padding,
            groups: geom.groups,
        };
        let out = conv_forward(self.value(x).data(), self.value(weight).data(), bias.map(|b| self.value(b).data()), &d);
        let value = Tensor::from_parts(vec![n, co, ho, wo], out);
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        Ok(self.record(
            value,
            &inputs,
            Box::new(move |ctx| {
                let (xd, wd) = (ctx.inputs[0].data(), ctx.inputs[1].data());
                let (dx, dw) = conv_backward(xd, wd, ctx.grad, &d, ctx.needs[0], ctx.needs[1]);
                let mut grads = vec![dx, dw];
                if ctx.inputs.len() == 3 {
                    grads.push(ctx.needs[2].then(|| {
                        let hw = d.ho * d.wo;
                        let mut db = vec![T::zero(); d.co];
                        for (i, chunk) in ctx.grad.chunks(hw).enumerate() {
                            db[i % d.co] += chunk.iter().copied().sum();
                        }
                        db
                    }));
                }
                grads
            }),
        ))
    }
}

fn conv_forward<T: Float>(x: &[T], w: &[T], bias: Option<&[T]>, d: &Dims) -> Vec<T> {
    let hw_o = d.ho * d.wo;
    let mut out = vec![T::zero(); d.n * d.co * hw_o];
    if d.depthwise() {
        depthwise_forward(x, w, d, &mut out);
    } else {
        let (cog, kc) = (d.cog(), d.kc());
        let mut col = if d.pointwise() { Vec::new() } else { vec![T::zero(); kc * hw_o] };
        for b in 0..d.n {
            for gi in 0..d.groups {
                let xs = &x[(b * d.c + gi * d.cg) * d.h * d.w..];
                let src: &[T] = if d.pointwise() {
                    xs
                } else {
                    im2col(xs, d, &mut col);
                    &col
                };
                T::gemm(
                    cog,
                    kc,
                    hw_o,
                    &w[gi * cog * kc..],
                    (kc as isize, 1),
                    src,
                    (hw_o as isize, 1),
                    T::zero(),
                    &mut out[(b * d.co + gi * cog) * hw_o..],
                    hw_o,
                );
            }
        }
    }
    if let Some(bias) = bias {
        for (i, chunk) in out.chunks_mut(hw_o).enumerate() {
            let bv = bias[i % d.co];
            chunk.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

fn conv_backward<T: Float>(x: &[T], w: &[T], g: &[T], d: &Dims, need_x: bool, need_w: bool) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    if d.depthwise() {
        depthwise_backward(x, w, g, d, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw);
    }
    let (hw, hw_o, cog, kc) = (d.h * d.w, d.ho * d.wo, d.cog(), d.kc());
    let mut col = if d.pointwise() { Vec::new() } else { vec![T::zero(); kc * hw_o] };
    let mut dcol = if d.pointwise() || !need_x { Vec::new() } else { vec![T::zero(); kc * hw_o] };
    for b in 0..d.n {
        for gi in 0..d.groups {
            let x_off = (b * d.c + gi * d.cg) * hw;
            let gy = &g[(b * d.co + gi * cog) * hw_o..];
            let wg = &w[gi * cog * kc..];
            if let Some(dw) = dw.as_mut() {
                let src: &[T] = if d.pointwise() {
                    &x[x_off..]
                } else {
                    im2col(&x[x_off..], d, &mut col);
                    &col
                };
                // dW_g += dY_g · colᵀ
                T::gemm(
                    cog,
                    hw_o,
                    kc,
                    gy,
                    (hw_o as isize, 1),
                    src,
                    (1, hw_o as isize),
                    T::one(),
                    &mut dw[gi * cog * kc..],
                    kc,
                );
            }
            if let Some(dx) = dx.as_mut() {
                // dcol = W_gᵀ · dY_g
                if d.pointwise() {
                    T::gemm(kc, cog, hw_o, wg, (1, kc as isize), gy, (hw_o as isize, 1), T::one(), &mut dx[x_off..], hw_o);
                } else {
                    T::gemm(kc, cog, hw_o, wg, (1, kc as isize), gy, (hw_o as isize, 1), T::zero(), &mut dcol, hw_o);
                    col2im(&dcol, d, &mut dx[x_off..]);
                }
            }
        }
    }
    (dx, dw)
}
