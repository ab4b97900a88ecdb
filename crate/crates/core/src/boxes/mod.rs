//! Axis-aligned boxes, IoU and the overlap-based regression losses.

mod dual;
mod oracle;

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

pub use dual::{Dual, Scalar};
pub use oracle::rasterized_iou;

use crate::error::{Error, Result};
use crate::tensor::{cast, Float, Graph, Tensor, Var};

/// Guard on the center distance in the angle term.
pub const SIOU_EPS: f64 = 1e-9;
/// Exponent of the shape cost.
pub const SIOU_THETA: i32 = 4;
/// Guard in the aspect-ratio weight.
pub const CIOU_EPS: f64 = 1e-9;

/// Center-form box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox<S = f64> {
    pub cx: S,
    pub cy: S,
    pub w: S,
    pub h: S,
}

impl<S: Scalar> BBox<S> {
    pub fn new(cx: S, cy: S, w: S, h: S) -> Self {
        Self { cx, cy, w, h }
    }

    pub fn from_corners(x1: S, y1: S, x2: S, y2: S) -> Self {
        let half = S::lit(0.5);
        Self::new((x1 + x2) * half, (y1 + y2) * half, x2 - x1, y2 - y1)
    }

    /// (x1, y1, x2, y2).
    pub fn corners(&self) -> (S, S, S, S) {
        let (hw, hh) = (self.w * S::lit(0.5), self.h * S::lit(0.5));
        (self.cx - hw, self.cy - hh, self.cx + hw, self.cy + hh)
    }

    pub fn area(&self) -> S {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let (w, h) = (self.w.val(), self.h.val());
        if !(w >= 0.0 && h >= 0.0) || ![self.cx.val(), self.cy.val()].iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidBox(format!("w={w} h={h}")));
        }
        Ok(())
    }
}

impl BBox<f64> {
    pub fn scaled(&self, k: f64) -> Self {
        Self::new(self.cx * k, self.cy * k, self.w * k, self.h * k)
    }

    pub fn shifted(&self, dx: f64, dy: f64) -> Self {
        Self::new(self.cx + dx, self.cy + dy, self.w, self.h)
    }

    fn dual(&self) -> BBox<Dual> {
        BBox::new(Dual::var(self.cx, 0), Dual::var(self.cy, 1), Dual::var(self.w, 2), Dual::var(self.h, 3))
    }

    fn lift(&self) -> BBox<Dual> {
        BBox::new(Dual::lit(self.cx), Dual::lit(self.cy), Dual::lit(self.w), Dual::lit(self.h))
    }
}

/// Overlap, union and enclosure geometry of a box pair.
#[derive(Debug, Clone, Copy)]
pub struct PairGeometry<S> {
    pub inter: S,
    pub union: S,
    pub iou: S,
    /// Enclosing box width and height.
    pub cw: S,
    pub ch: S,
    /// Squared center distance.
    pub rho2: S,
    /// Squared enclosure diagonal.
    pub diag2: S,
}

impl<S: Scalar> PairGeometry<S> {
    pub fn new(a: &BBox<S>, b: &BBox<S>) -> Self {
        let zero = S::lit(0.0);
        let (ax1, ay1, ax2, ay2) = a.corners();
        let (bx1, by1, bx2, by2) = b.corners();
        let iw = (ax2.min(bx2) - ax1.max(bx1)).max(zero);
        let ih = (ay2.min(by2) - ay1.max(by1)).max(zero);
        let inter = iw * ih;
        let union = a.area() + b.area() - inter;
        let iou = if union.val() > 0.0 { inter / union } else { zero };
        let cw = ax2.max(bx2) - ax1.min(bx1);
        let ch = ay2.max(by2) - ay1.min(by1);
        let rho2 = (a.cx - b.cx).square() + (a.cy - b.cy).square();
        Self {
            inter,
            union,
            iou,
            cw,
            ch,
            rho2,
            diag2: cw.square() + ch.square(),
        }
    }
}

/// `|A ∩ B| / |A ∪ B|`, or 0 when the union is empty.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    PairGeometry::new(a, b).iou
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BoxKind {
    Iou,
    Giou,
    Diou,
    Ciou,
    Eiou,
    Siou,
}

impl BoxKind {
    pub const ALL: [BoxKind; 6] = [BoxKind::Iou, BoxKind::Giou, BoxKind::Diou, BoxKind::Ciou, BoxKind::Eiou, BoxKind::Siou];
}

impl fmt::Display for BoxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoxKind::Iou => "iou",
            BoxKind::Giou => "giou",
            BoxKind::Diou => "diou",
            BoxKind::Ciou => "ciou",
            BoxKind::Eiou => "eiou",
            BoxKind::Siou => "siou",
        })
    }
}

impl FromStr for BoxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BoxKind::ALL
            .into_iter()
            .find(|k| k.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown box loss {s:?}")))
    }
}

/// Options of the loss family that have more than one reading.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LossOptions {
    /// Use unsquared normalized center offsets in the distance cost.
    pub siou_unsquared_distance: bool,
}

fn safe_div<S: Scalar>(a: S, b: S) -> S {
    if b.val() > 0.0 {
        a / b
    } else {
        S::lit(0.0)
    }
}

/// Loss of `pred` against `gt`. Zero for identical boxes.
pub fn box_loss<S: Scalar>(kind: BoxKind, pred: &BBox<S>, gt: &BBox<S>, opts: LossOptions) -> S {
    let one = S::lit(1.0);
    let g = PairGeometry::new(pred, gt);
    let base = one - g.iou;
    match kind {
        BoxKind::Iou => base,
        BoxKind::Giou => {
            let c = g.cw * g.ch;
            base + safe_div(c - g.union, c)
        }
        BoxKind::Diou => base + safe_div(g.rho2, g.diag2),
        BoxKind::Ciou => {
            let eps = S::lit(CIOU_EPS);
            let k = S::lit(4.0 / (PI * PI));
            let v = k * (safe_div(gt.w, gt.h).atan() - safe_div(pred.w, pred.h).atan()).square();
            let alpha = v / (base + v + eps);
            base + safe_div(g.rho2, g.diag2) + alpha * v
        }
        BoxKind::Eiou => {
            base + safe_div(g.rho2, g.diag2)
                + safe_div((pred.w - gt.w).square(), g.cw.square())
                + safe_div((pred.h - gt.h).square(), g.ch.square())
        }
        BoxKind::Siou => {
            let (dx, dy) = (gt.cx - pred.cx, gt.cy - pred.cy);
            let sigma = (dx.square() + dy.square()).sqrt();
            // Sine of the angle between the center offset and the x axis.
            let x = (dy.abs() / (sigma + S::lit(SIOU_EPS))).min(one);
            let s = (x.asin() - S::lit(PI / 4.0)).sin();
            let lambda = one - S::lit(2.0) * s.square();
            let gamma = S::lit(2.0) - lambda;
            let (rx, ry) = if opts.siou_unsquared_distance {
                (safe_div(dx.abs(), g.cw), safe_div(dy.abs(), g.ch))
            } else {
                (safe_div(dx, g.cw).square(), safe_div(dy, g.ch).square())
            };
            let distance = (one - (-gamma * rx).exp()) + (one - (-gamma * ry).exp());
            let ww = safe_div((pred.w - gt.w).abs(), pred.w.max(gt.w));
            let wh = safe_div((pred.h - gt.h).abs(), pred.h.max(gt.h));
            let pow = |t: S| (0..SIOU_THETA).fold(one, |acc, _| acc * t);
            let shape = pow(one - (-ww).exp()) + pow(one - (-wh).exp());
            base + (distance + shape) * S::lit(0.5)
        }
    }
}

/// Loss and its gradient with respect to the prediction's (cx, cy, w, h).
pub fn box_loss_grad(kind: BoxKind, pred: &BBox, gt: &BBox, opts: LossOptions) -> (f64, [f64; 4]) {
    let l = box_loss(kind, &pred.dual(), &gt.lift(), opts);
    (l.v, l.d)
}

impl<T: Float> Graph<T> {
    /// Per-row loss of predicted boxes `[n, 4]` (cx, cy, w, h) against fixed targets.
    pub fn box_loss(&mut self, pred: Var, targets: &[BBox], kind: BoxKind, opts: LossOptions) -> Result<Var> {
        let s = self.shape(pred).to_vec();
        if s.len() != 2 || s[1] != 4 || s[0] != targets.len() {
            return Err(crate::error::shape_err("box_loss", &s, &[targets.len(), 4]));
        }
        let pd = self.value(pred).to_f64();
        let mut out = Vec::with_capacity(targets.len());
        let mut grads = Vec::with_capacity(4 * targets.len());
        for (row, gt) in pd.chunks(4).zip(targets) {
            let p = BBox::new(row[0], row[1], row[2], row[3]);
            p.validate()?;
            let (l, d) = box_loss_grad(kind, &p, gt, opts);
            out.push(cast::<T>(l));
            grads.extend(d.map(cast::<T>));
        }
        Ok(self.record(
            Tensor::from_parts(vec![targets.len()], out),
            &[pred],
            Box::new(move |ctx| {
                let g = grads.chunks(4).zip(ctx.grad).flat_map(|(d, &gv)| d.iter().map(move |&x| x * gv)).collect();
                vec![Some(g)]
            }),
        ))
    }
}
