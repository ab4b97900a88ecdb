//! Anchors, the per-level 1×1 prediction convs and box decoding.
//!
//! Head maps are laid out `[N, A * (5 + nc), H, W]`; channel `a * no + k`
//! holds field `k` of anchor `a` where k = 0..4 box, 4 objectness, 5.. classes.

use rand::Rng;

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::nn::cost::ConvSpec;
use crate::nn::{ConvBnAct, LayerCost, ParamStore};
use crate::tensor::{Float, Graph, Tensor, Var};

pub const STRIDES: [usize; 3] = [8, 16, 32];
pub const ANCHORS_PER_LEVEL: usize = 3;
/// Reference input size the default anchors were tuned for.
pub const ANCHOR_REF_SIZE: f64 = 640.0;

const DEFAULT_ANCHORS: [[(f64, f64); 3]; 3] = [
    [(10.0, 13.0), (16.0, 30.0), (33.0, 23.0)],
    [(30.0, 61.0), (62.0, 45.0), (59.0, 119.0)],
    [(116.0, 90.0), (156.0, 198.0), (373.0, 326.0)],
];

/// Three anchors (w, h) in input pixels per level, ordered by stride.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    pub levels: [[(f64, f64); 3]; 3],
}

impl AnchorSet {
    /// Defaults rescaled for an `img`-pixel input.
    pub fn for_input(img: usize) -> Self {
        let k = img as f64 / ANCHOR_REF_SIZE;
        Self {
            levels: DEFAULT_ANCHORS.map(|l| l.map(|(w, h)| (w * k, h * k))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for l in &self.levels {
            if l.iter().any(|&(w, h)| !(w > 0.0 && h > 0.0)) {
                return Err(Error::Config(format!("anchor sizes must be positive: {l:?}")));
            }
            if l.windows(2).any(|p| p[0].0 * p[0].1 > p[1].0 * p[1].1) {
                return Err(Error::Config(format!("anchors not sorted by area: {l:?}")));
            }
        }
        Ok(())
    }
}

/// One decoded prediction; the box is in input pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

/// The three prediction convs.
#[derive(Debug, Clone)]
pub struct Detect {
    pub nc: usize,
    pub anchors: AnchorSet,
    convs: Vec<ConvBnAct>,
}

pub fn outputs_per_anchor(nc: usize) -> usize {
    5 + nc
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

impl Detect {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: [usize; 3],
        nc: usize,
        anchors: AnchorSet,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if nc == 0 {
            return Err(Error::Config("need at least one class".into()));
        }
        anchors.validate()?;
        let no = outputs_per_anchor(nc);
        let mut convs = Vec::new();
        for (i, (&c, &s)) in in_channels.iter().zip(&STRIDES).enumerate() {
            let conv = ConvBnAct::new(store, &format!("{name}.m.{i}"), ConvSpec::plain(c, ANCHORS_PER_LEVEL * no, 1), rng)?;
            // Prior: about 8 objects per 640² image and a near-uniform class split.
            let cells = (ANCHOR_REF_SIZE / s as f64).powi(2);
            let b = store.value_mut(conv.bias.expect("head conv has a bias")).data_mut();
            for a in 0..ANCHORS_PER_LEVEL {
                b[a * no + 4] += T::from_f64_lossy((8.0 / cells).ln());
                for k in 5..no {
                    b[a * no + k] += T::from_f64_lossy((0.6 / (nc as f64 - 0.99)).ln());
                }
            }
            convs.push(conv);
        }
        Ok(Self { nc, anchors, convs })
    }

    pub fn forward<T: Float>(&self, g: &mut Graph<T>, store: &ParamStore<T>, xs: &[Var]) -> Result<Vec<Var>> {
        if xs.len() != self.convs.len() {
            return Err(Error::Config(format!("head expects {} levels, got {}", self.convs.len(), xs.len())));
        }
        xs.iter().zip(&self.convs).map(|(&x, c)| c.forward(g, store, x)).collect()
    }

    pub fn costs(&self, hw: &[(usize, usize)]) -> Vec<LayerCost> {
        self.convs.iter().zip(hw).map(|(c, &(h, w))| c.cost(h, w).0).collect()
    }

    /// Decodes raw head maps into per-image candidate detections with
    /// confidence at least `conf_thresh`, clamped to the `img_h × img_w` frame.
    pub fn decode<T: Float>(&self, maps: &[Tensor<T>], img_h: usize, img_w: usize, conf_thresh: f64) -> Result<Vec<Vec<Detection>>> {
        let no = outputs_per_anchor(self.nc);
        let n = maps.first().map_or(0, |m| m.shape()[0]);
        let mut out = vec![Vec::new(); n];
        for (level, map) in maps.iter().enumerate() {
            let s = map.shape();
            let stride = STRIDES[level];
            if s.len() != 4 || s[0] != n || s[1] != ANCHORS_PER_LEVEL * no || s[2] * stride != img_h || s[3] * stride != img_w {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: format!("head level {level} for a {img_h}×{img_w} input"),
                });
            }
            let (h, w) = (s[2], s[3]);
            let d = map.data();
            let at = |b: usize, c: usize, y: usize, x: usize| d[((b * s[1] + c) * h + y) * w + x].to_f64().unwrap_or(f64::NAN);
            for (b, dets) in out.iter_mut().enumerate() {
                for (a, &anchor) in self.anchors.levels[level].iter().enumerate() {
                    for y in 0..h {
                        for x in 0..w {
                            let c0 = a * no;
                            let obj = sigmoid(at(b, c0 + 4, y, x));
                            let (class_id, cls) = (0..self.nc)
                                .map(|k| (k, sigmoid(at(b, c0 + 5 + k, y, x))))
                                .fold((0, f64::NEG_INFINITY), |best, c| if c.1 > best.1 { c } else { best });
                            let confidence = obj * cls;
                            if confidence < conf_thresh || !confidence.is_finite() {
                                continue;
                            }
                            let raw = [at(b, c0, y, x), at(b, c0 + 1, y, x), at(b, c0 + 2, y, x), at(b, c0 + 3, y, x)];
                            let bbox = decode_box(raw, anchor, stride, (x, y));
                            dets.push(Detection {
                                bbox: clamp_box(&bbox, img_w as f64, img_h as f64),
                                class_id,
                                confidence,
                            });
                        }
                    }
                }
            }
        }
        Ok(out)
    }
}

/// Cell-relative transform: center offset in (-0.5, 1.5) cells, size in (0, 4) anchors.
pub fn decode_box(raw: [f64; 4], anchor: (f64, f64), stride: usize, cell: (usize, usize)) -> BBox {
    let s = stride as f64;
    let [sx, sy, sw, sh] = raw.map(sigmoid);
    BBox::new(
        (sx * 2.0 - 0.5 + cell.0 as f64) * s,
        (sy * 2.0 - 0.5 + cell.1 as f64) * s,
        (sw * 2.0).powi(2) * anchor.0,
        (sh * 2.0).powi(2) * anchor.1,
    )
}

/// Inverse of [`decode_box`]; `None` when the box is out of reach of that cell and anchor.
pub fn encode_box(bbox: &BBox, anchor: (f64, f64), stride: usize, cell: (usize, usize)) -> Option<[f64; 4]> {
    let s = stride as f64;
    let px = (bbox.cx / s - cell.0 as f64 + 0.5) / 2.0;
    let py = (bbox.cy / s - cell.1 as f64 + 0.5) / 2.0;
    let pw = (bbox.w / anchor.0).sqrt() / 2.0;
    let ph = (bbox.h / anchor.1).sqrt() / 2.0;
    let p = [px, py, pw, ph];
    p.iter().all(|&v| v > 0.0 && v < 1.0).then(|| p.map(logit))
}

pub fn clamp_box(b: &BBox, w: f64, h: f64) -> BBox {
    let (x1, y1, x2, y2) = b.corners();
    BBox::from_corners(x1.clamp(0.0, w), y1.clamp(0.0, h), x2.clamp(0.0, w), y2.clamp(0.0, h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn head(nc: usize) -> (ParamStore<f64>, Detect) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let d = Detect::new(&mut store, "head", [4, 4, 4], nc, AnchorSet::for_input(64), &mut rng).unwrap();
        (store, d)
    }

    fn zero_maps(nc: usize, img: usize) -> Vec<Tensor<f64>> {
        STRIDES.iter().map(|s| Tensor::zeros(&[1, 3 * (5 + nc), img / s, img / s])).collect()
    }

    #[test]
    fn default_anchors_are_valid_and_scale() {
        let a = AnchorSet::for_input(448);
        a.validate().unwrap();
        assert!((a.levels[0][0].0 - 7.0).abs() < 1e-12);
        assert!((a.levels[2][2].1 - 326.0 * 0.7).abs() < 1e-9);
    }

    #[test]
    fn zero_logits_decode_to_cell_centers() {
        let (_, d) = head(2);
        let dets = d.decode(&zero_maps(2, 64), 64, 64, 0.0).unwrap();
        assert_eq!(dets[0].len(), 3 * (64 + 16 + 4));
        for det in &dets[0] {
            assert!((det.confidence - 0.25).abs() < 1e-12);
            assert_eq!(det.class_id, 0);
        }
        // First P3 cell, first anchor: centered in cell (0, 0) of stride 8.
        let b = decode_box([0.0; 4], (10.0, 13.0), 8, (0, 0));
        assert_eq!((b.cx, b.cy, b.w, b.h), (4.0, 4.0, 10.0, 13.0));
    }

    #[test]
    fn decoded_boxes_stay_in_frame() {
        let (_, d) = head(2);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let maps: Vec<Tensor<f64>> = zero_maps(2, 64)
            .into_iter()
            .map(|m| {
                let d = (0..m.numel()).map(|_| rng.gen_range(-8.0..8.0)).collect();
                Tensor::new(m.shape(), d).unwrap()
            })
            .collect();
        for det in &d.decode(&maps, 64, 64, 0.0).unwrap()[0] {
            let (x1, y1, x2, y2) = det.bbox.corners();
            assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 64.0 && y2 <= 64.0);
            assert!((0.0..=1.0).contains(&det.confidence));
        }
    }

    #[test]
    fn encode_decode_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let cell = (rng.gen_range(0..10), rng.gen_range(0..10));
            let stride = 16;
            let anchor = (rng.gen_range(5.0..60.0), rng.gen_range(5.0..60.0));
            let gt = BBox::new(
                (cell.0 as f64 + rng.gen_range(-0.4..1.4)) * 16.0,
                (cell.1 as f64 + rng.gen_range(-0.4..1.4)) * 16.0,
                anchor.0 * rng.gen_range(0.3..3.5),
                anchor.1 * rng.gen_range(0.3..3.5),
            );
            let raw = encode_box(&gt, anchor, stride, cell).unwrap();
            let b = decode_box(raw, anchor, stride, cell);
            for (u, v) in [(b.cx, gt.cx), (b.cy, gt.cy), (b.w, gt.w), (b.h, gt.h)] {
                assert!((u - v).abs() <= 1.0, "{u} vs {v}");
            }
        }
        assert!(encode_box(&BBox::new(100.0, 0.0, 5.0, 5.0), (5.0, 5.0), 8, (0, 0)).is_none());
    }

    #[test]
    fn decode_rejects_bad_geometry() {
        let (_, d) = head(2);
        assert!(d.decode(&zero_maps(2, 64), 96, 64, 0.0).is_err());
        assert!(d.decode(&zero_maps(3, 64), 64, 64, 0.0).is_err());
    }

    #[test]
    fn bias_prior_lowers_initial_objectness() {
        let (store, d) = head(2);
        let b = store.value(d.convs[0].bias.unwrap()).data();
        assert!(b[4] < -5.0 && b[7 + 4] < -5.0);
        assert!(b[5].abs() < 1.1);
    }
}
