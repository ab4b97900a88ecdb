//! Aspect-preserving resize onto a square gray canvas.

use crate::boxes::BBox;
use crate::tensor::Tensor;

/// Canvas fill, 114/255 gray.
pub const PAD_VALUE: f32 = 114.0 / 255.0;

/// Maps source pixel coordinates onto the canvas and back.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub size: usize,
}

impl Letterbox {
    pub fn new(src_w: usize, src_h: usize, size: usize) -> Self {
        let r = (size as f64 / src_w as f64).min(size as f64 / src_h as f64);
        let nw = ((src_w as f64 * r).round() as usize).clamp(1, size);
        let nh = ((src_h as f64 * r).round() as usize).clamp(1, size);
        Self {
            scale_x: nw as f64 / src_w as f64,
            scale_y: nh as f64 / src_h as f64,
            pad_x: ((size - nw) / 2) as f64,
            pad_y: ((size - nh) / 2) as f64,
            size,
        }
    }

    pub fn forward(&self, b: &BBox) -> BBox {
        BBox::new(b.cx * self.scale_x + self.pad_x, b.cy * self.scale_y + self.pad_y, b.w * self.scale_x, b.h * self.scale_y)
    }

    pub fn inverse(&self, b: &BBox) -> BBox {
        BBox::new((b.cx - self.pad_x) / self.scale_x, (b.cy - self.pad_y) / self.scale_y, b.w / self.scale_x, b.h / self.scale_y)
    }
}

/// Bilinear resize (pixel-center aligned) of a `[C, H, W]` image.
pub fn resize(img: &Tensor<f32>, out_h: usize, out_w: usize) -> Tensor<f32> {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = img.data();
    let (ry, rx) = (h as f64 / out_h as f64, w as f64 / out_w as f64);
    let axis = |o: usize, r: f64, n: usize| {
        let p = ((o as f64 + 0.5) * r - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = p.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, (p - i0 as f64) as f32)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, rx, w)).collect();
    let mut out = vec![0.0f32; c * out_h * out_w];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, ry, h);
        for ch in 0..c {
            let plane = &d[ch * h * w..(ch + 1) * h * w];
            for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out[(ch * out_h + y) * out_w + x] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Tensor::new(&[c, out_h, out_w], out).expect("resize shape")
}

/// Resizes `img` to fit `size × size` and centers it on a gray canvas.
pub fn letterbox(img: &Tensor<f32>, size: usize) -> (Tensor<f32>, Letterbox) {
    let s = img.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let lb = Letterbox::new(w, h, size);
    let nw = (w as f64 * lb.scale_x).round() as usize;
    let nh = (h as f64 * lb.scale_y).round() as usize;
    let small = if (nh, nw) == (h, w) { img.clone() } else { resize(img, nh, nw) };
    let mut out = vec![PAD_VALUE; c * size * size];
    let (px, py) = (lb.pad_x as usize, lb.pad_y as usize);
    for ch in 0..c {
        for y in 0..nh {
            let src = &small.data()[(ch * nh + y) * nw..(ch * nh + y + 1) * nw];
            let at = (ch * size + y + py) * size + px;
            out[at..at + nw].copy_from_slice(src);
        }
    }
    (Tensor::new(&[c, size, size], out).expect("letterbox shape"), lb)
}

/// Mirrors a `[C, H, W]` image left to right.
pub fn hflip(img: &Tensor<f32>) -> Tensor<f32> {
    let s = img.shape();
    let w = s[2];
    let mut out = img.clone();
    for row in out.data_mut().chunks_mut(w) {
        row.reverse();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor<f32> {
        Tensor::new(&[c, h, w], (0..c * h * w).map(|i| (i % 97) as f32 / 97.0).collect()).unwrap()
    }

    #[test]
    fn square_input_is_a_pure_resize() {
        let img = ramp(3, 20, 20);
        let (out, lb) = letterbox(&img, 40);
        assert_eq!((lb.pad_x, lb.pad_y), (0.0, 0.0));
        assert_eq!(lb.scale_x, 2.0);
        assert!(out.data().iter().all(|&v| v != PAD_VALUE || img.data().contains(&v)));
        let (same, _) = letterbox(&img, 20);
        assert_eq!(same, img);
    }

    #[test]
    fn wide_input_pads_a_quarter_top_and_bottom() {
        let img = Tensor::full(&[3, 50, 100], 1.0);
        let (out, lb) = letterbox(&img, 448);
        assert_eq!(lb.pad_y, 112.0);
        assert_eq!(lb.pad_x, 0.0);
        let d = out.data();
        let at = |y: usize, x: usize| d[y * 448 + x];
        assert_eq!(at(111, 10), PAD_VALUE);
        assert_eq!(at(112, 10), 1.0);
        assert_eq!(at(335, 10), 1.0);
        assert_eq!(at(336, 10), PAD_VALUE);
    }

    #[test]
    fn box_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            let (w, h) = (rng.gen_range(1..900), rng.gen_range(1..900));
            let lb = Letterbox::new(w, h, 448);
            let b = BBox::new(rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64), rng.gen_range(0.0..w as f64), rng.gen_range(0.0..h as f64));
            let r = lb.inverse(&lb.forward(&b));
            for (u, v) in [(r.cx, b.cx), (r.cy, b.cy), (r.w, b.w), (r.h, b.h)] {
                assert!((u - v).abs() <= 1e-6 * v.abs().max(1.0));
            }
        }
    }

    #[test]
    fn flip_twice_is_identity() {
        let img = ramp(3, 4, 5);
        assert_eq!(hflip(&hflip(&img)), img);
        assert_eq!(hflip(&img).data()[0], img.data()[4]);
    }
}
