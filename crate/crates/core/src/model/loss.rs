//! Composite detection loss: target assignment by anchor shape ratio, a box
//! overlap term on matched cells, objectness over every cell and class BCE.

use crate::boxes::{iou, BBox, BoxKind, LossOptions};
use crate::error::{Error, Result};
use crate::model::head::{outputs_per_anchor, AnchorSet, ANCHORS_PER_LEVEL, STRIDES};
use crate::tensor::{Float, Graph, Tensor, Var};

/// A ground-truth box in input pixels on image `image` of the batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub image: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    pub kind: BoxKind,
    pub opts: LossOptions,
    pub box_gain: f64,
    pub obj_gain: f64,
    pub cls_gain: f64,
    /// Objectness weight per level, finest first.
    pub balance: [f64; 3],
    /// Largest allowed max(r, 1/r) between target and anchor sides.
    pub anchor_t: f64,
    /// Objectness target is the (detached) IoU of the matched prediction
    /// instead of 1. Off for finite-difference checks, where the detached
    /// target would move with the perturbation.
    pub iou_obj_target: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            kind: BoxKind::Siou,
            opts: LossOptions::default(),
            box_gain: 0.05,
            obj_gain: 1.0,
            cls_gain: 0.5,
            balance: [4.0, 1.0, 0.4],
            anchor_t: 4.0,
            iou_obj_target: true,
        }
    }
}

/// One target placed on one cell of one anchor of a level. The box is in
/// grid units relative to the cell's top-left corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Assignment {
    pub image: usize,
    pub anchor: usize,
    pub cell: (usize, usize),
    pub class_id: usize,
    pub tbox: BBox,
}

/// Matches targets to a `h × w` level: every anchor within the shape ratio
/// takes the target's own cell plus the two nearest neighbour cells.
pub fn assign(targets: &[Target], anchors: &[(f64, f64); 3], stride: usize, h: usize, w: usize, anchor_t: f64) -> Vec<Assignment> {
    let s = stride as f64;
    let mut out = Vec::new();
    for t in targets {
        let (gx, gy, gw, gh) = (t.bbox.cx / s, t.bbox.cy / s, t.bbox.w / s, t.bbox.h / s);
        for (a, &(aw, ah)) in anchors.iter().enumerate() {
            let (rw, rh) = (gw / (aw / s), gh / (ah / s));
            if rw.max(1.0 / rw).max(rh.max(1.0 / rh)) >= anchor_t {
                continue;
            }
            let mut offsets = vec![(0.0, 0.0)];
            let (fx, fy) = (gx.fract(), gy.fract());
            if fx < 0.5 && gx > 1.0 {
                offsets.push((-0.5, 0.0));
            }
            if fy < 0.5 && gy > 1.0 {
                offsets.push((0.0, -0.5));
            }
            if fx > 0.5 && (w as f64 - gx) > 1.0 {
                offsets.push((0.5, 0.0));
            }
            if fy > 0.5 && (h as f64 - gy) > 1.0 {
                offsets.push((0.0, 0.5));
            }
            for (ox, oy) in offsets {
                let cx = ((gx + ox).floor().max(0.0) as usize).min(w - 1);
                let cy = ((gy + oy).floor().max(0.0) as usize).min(h - 1);
                out.push(Assignment {
                    image: t.image,
                    anchor: a,
                    cell: (cx, cy),
                    class_id: t.class_id,
                    tbox: BBox::new(gx - cx as f64, gy - cy as f64, gw, gh),
                });
            }
        }
    }
    out
}

/// Total loss and its gain-weighted components.
pub struct LossOutput {
    pub total: Var,
    pub box_term: f64,
    pub obj_term: f64,
    pub cls_term: f64,
}

fn head_index(shape: &[usize], no: usize, b: usize, a: usize, k: usize, y: usize, x: usize) -> usize {
    ((b * shape[1] + a * no + k) * shape[2] + y) * shape[3] + x
}

/// Loss over raw head maps. Targets must lie inside the input frame.
pub fn training_loss<T: Float>(
    g: &mut Graph<T>,
    heads: &[Var],
    targets: &[Target],
    anchors: &AnchorSet,
    nc: usize,
    cfg: &LossConfig,
) -> Result<LossOutput> {
    if heads.len() != STRIDES.len() {
        return Err(Error::Config(format!("loss expects {} head maps, got {}", STRIDES.len(), heads.len())));
    }
    let no = outputs_per_anchor(nc);
    let batch = g.shape(heads[0])[0];
    if let Some(t) = targets.iter().find(|t| t.image >= batch || t.class_id >= nc) {
        return Err(Error::Config(format!("target {t:?} outside batch of {batch} or {nc} classes")));
    }
    let mut box_parts = Vec::new();
    let mut obj_parts = Vec::new();
    let mut cls_parts = Vec::new();
    for (level, &head) in heads.iter().enumerate() {
        let shape = g.shape(head).to_vec();
        let shape = &shape[..];
        if shape.len() != 4 || shape[0] != batch || shape[1] != ANCHORS_PER_LEVEL * no {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("head level {level} with {nc} classes"),
            });
        }
        let (h, w) = (shape[2], shape[3]);
        let stride = STRIDES[level];
        let grid_anchors: Vec<(f64, f64)> = anchors.levels[level].iter().map(|&(aw, ah)| (aw / stride as f64, ah / stride as f64)).collect();
        let matches = assign(targets, &anchors.levels[level], stride, h, w, cfg.anchor_t);
        let mut obj_target = vec![T::zero(); batch * ANCHORS_PER_LEVEL * h * w];

        if !matches.is_empty() {
            let m = matches.len();
            let idx: Vec<usize> = matches
                .iter()
                .flat_map(|a| (0..4).map(move |k| head_index(shape, no, a.image, a.anchor, k, a.cell.1, a.cell.0)))
                .collect();
            let raw = g.gather(head, idx, &[m, 4])?;
            let s = g.sigmoid(raw);
            let s = g.scale(s, 2.0);
            let xy = g.slice(s, 1, 0, 2)?;
            let xy = g.add_scalar(xy, -0.5);
            let wh = g.slice(s, 1, 2, 2)?;
            let wh = g.square(wh);
            let anchor_wh: Vec<f64> = matches.iter().flat_map(|a| [grid_anchors[a.anchor].0, grid_anchors[a.anchor].1]).collect();
            let anchor_wh = g.constant(Tensor::from_f64(&[m, 2], &anchor_wh)?);
            let wh = g.mul(wh, anchor_wh)?;
            let pbox = g.concat(&[xy, wh], 1)?;
            let tboxes: Vec<BBox> = matches.iter().map(|a| a.tbox).collect();
            let l = g.box_loss(pbox, &tboxes, cfg.kind, cfg.opts)?;
            box_parts.push(g.mean(l));

            let pv = g.value(pbox).to_f64();
            for (a, p) in matches.iter().zip(pv.chunks(4)) {
                let target = if cfg.iou_obj_target {
                    iou(&BBox::new(p[0], p[1], p[2], p[3]), &a.tbox).max(0.0)
                } else {
                    1.0
                };
                obj_target[((a.image * ANCHORS_PER_LEVEL + a.anchor) * h + a.cell.1) * w + a.cell.0] = T::from_f64_lossy(target);
            }

            let idx: Vec<usize> = matches
                .iter()
                .flat_map(|a| (0..nc).map(move |k| head_index(shape, no, a.image, a.anchor, 5 + k, a.cell.1, a.cell.0)))
                .collect();
            let logits = g.gather(head, idx, &[m, nc])?;
            let mut onehot = vec![T::zero(); m * nc];
            for (i, a) in matches.iter().enumerate() {
                onehot[i * nc + a.class_id] = T::one();
            }
            let l = g.bce_with_logits(logits, &Tensor::new(&[m, nc], onehot)?)?;
            cls_parts.push(l);
        }

        let mut idx = Vec::with_capacity(obj_target.len());
        for b in 0..batch {
            for a in 0..ANCHORS_PER_LEVEL {
                for y in 0..h {
                    for x in 0..w {
                        idx.push(head_index(shape, no, b, a, 4, y, x));
                    }
                }
            }
        }
        let obj = g.gather(head, idx, &[obj_target.len()])?;
        let l = g.bce_with_logits(obj, &Tensor::new(&[obj_target.len()], obj_target)?)?;
        obj_parts.push(g.scale(l, cfg.balance[level]));
    }

    let mut weighted = Vec::new();
    let mut values = [0.0; 3];
    for (i, (parts, gain)) in [(box_parts, cfg.box_gain), (obj_parts, cfg.obj_gain), (cls_parts, cfg.cls_gain)].into_iter().enumerate() {
        let Some(&first) = parts.first() else { continue };
        let mut acc = first;
        for &p in &parts[1..] {
            acc = g.add(acc, p)?;
        }
        let term = g.scale(acc, gain);
        values[i] = g.value(term).item().to_f64().unwrap_or(f64::NAN);
        weighted.push(term);
    }
    let mut total = weighted[0];
    for &t in &weighted[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossOutput {
        total,
        box_term: values[0],
        obj_term: values[1],
        cls_term: values[2],
    })
}
