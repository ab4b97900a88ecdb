//! Synthetic fire scenes: warm flickering flame blobs (class 0) and gray
//! translucent smoke ellipses (class 1) over smooth colored backgrounds.

use std::f64::consts::PI;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::data::labels::{self, LabelRecord};
use crate::data::ppm;
use crate::error::Result;
use crate::tensor::Tensor;

pub const FLAME: usize = 0;
pub const SMOKE: usize = 1;
pub const MAX_OBJECTS: usize = 3;
const SMOKE_ALPHA: f32 = 0.7;
const FLICKER: f64 = 0.15;

/// One rendered object: its class, pixel mask (row-major) and tight box.
#[derive(Debug, Clone)]
pub struct SynthObject {
    pub class_id: usize,
    pub mask: Vec<bool>,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub image: Tensor<f32>,
    pub objects: Vec<SynthObject>,
}

impl Scene {
    pub fn labels(&self) -> Vec<LabelRecord> {
        let s = self.image.shape();
        self.objects.iter().map(|o| LabelRecord::from_pixels(o.class_id, &o.bbox, s[2], s[1])).collect()
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

/// Renders scene `index` of the stream for `seed`.
pub fn render(seed: u64, index: u64, w: usize, h: usize) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index);
    let mut px = vec![[0.0f32; 3]; w * h];

    // Background: a vertical two-color gradient in muted cool/earthy tones plus light noise.
    let top: [f32; 3] = [rng.gen_range(0.05..0.35), rng.gen_range(0.1..0.45), rng.gen_range(0.15..0.55)];
    let bottom: [f32; 3] = [rng.gen_range(0.05..0.3), rng.gen_range(0.1..0.35), rng.gen_range(0.05..0.3)];
    for y in 0..h {
        let row = lerp3(top, bottom, y as f32 / h.max(2) as f32);
        for x in 0..w {
            px[y * w + x] = row.map(|v| (v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0));
        }
    }

    let side = w.min(h) as f64;
    let count = rng.gen_range(1..=MAX_OBJECTS);
    let mut placed: Vec<(f64, f64, f64, f64)> = Vec::new();
    let mut objects = Vec::new();
    for _ in 0..count {
        let class_id = if rng.gen_bool(0.5) { FLAME } else { SMOKE };
        // Semi-axes; flames are taller than wide, smoke wider than tall.
        let major = rng.gen_range(0.09..0.22) * side;
        let minor = major * rng.gen_range(0.55..0.9);
        let (rx, ry) = if class_id == FLAME { (minor, major) } else { (major, minor) };
        let reach = 1.0 + FLICKER;
        let (ex, ey) = (rx * reach, ry * reach);
        let spot = (0..30).find_map(|_| {
            let cx = rng.gen_range(ex..(w as f64 - ex).max(ex + 1.0));
            let cy = rng.gen_range(ey..(h as f64 - ey).max(ey + 1.0));
            let free = placed
                .iter()
                .all(|&(ox, oy, oex, oey)| (cx - ox).abs() > ex + oex + 2.0 || (cy - oy).abs() > ey + oey + 2.0);
            free.then_some((cx, cy))
        });
        let Some((cx, cy)) = spot else { continue };
        placed.push((cx, cy, ex, ey));
        let phase: [f64; 2] = [rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..2.0 * PI)];
        let gray: f32 = rng.gen_range(0.55..0.85);
        let mut mask = vec![false; w * h];
        let (mut x1, mut y1, mut x2, mut y2) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = ((x as f64 + 0.5 - cx) / rx, (y as f64 + 0.5 - cy) / ry);
                let r = (dx * dx + dy * dy).sqrt();
                let limit = if class_id == FLAME {
                    let th = dy.atan2(dx);
                    1.0 + FLICKER * (0.65 * (5.0 * th + phase[0]).sin() + 0.35 * (9.0 * th + phase[1]).sin())
                } else {
                    1.0
                };
                if r >= limit {
                    continue;
                }
                let t = (r / limit) as f32;
                let p = &mut px[y * w + x];
                *p = if class_id == FLAME {
                    if t < 0.45 {
                        lerp3([1.0, 0.98, 0.75], [1.0, 0.8, 0.15], t / 0.45)
                    } else {
                        lerp3([1.0, 0.8, 0.15], [0.85, 0.2, 0.03], (t - 0.45) / 0.55)
                    }
                } else {
                    p.map(|v| v * (1.0 - SMOKE_ALPHA) + gray * SMOKE_ALPHA)
                };
                mask[y * w + x] = true;
                (x1, y1, x2, y2) = (x1.min(x), y1.min(y), x2.max(x + 1), y2.max(y + 1));
            }
        }
        if x1 == usize::MAX {
            continue;
        }
        objects.push(SynthObject {
            class_id,
            mask,
            bbox: BBox::from_corners(x1 as f64, y1 as f64, x2 as f64, y2 as f64),
        });
    }

    let mut data = vec![0.0f32; 3 * w * h];
    for (i, p) in px.iter().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = p[c];
        }
    }
    Scene {
        image: Tensor::new(&[3, h, w], data).expect("scene shape"),
        objects,
    }
}

pub fn stem(index: usize) -> String {
    format!("synth_{index:05}")
}

/// Writes `n` scenes as `<out>/images/*.ppm` and `<out>/labels/*.txt`.
pub fn generate(n: usize, seed: u64, out: &Path, w: usize, h: usize) -> Result<()> {
    let (images, label_dir) = (out.join("images"), out.join("labels"));
    std::fs::create_dir_all(&images)?;
    std::fs::create_dir_all(&label_dir)?;
    for i in 0..n {
        let scene = render(seed, i as u64, w, h);
        let s = stem(i);
        ppm::write(&images.join(format!("{s}.ppm")), &scene.image)?;
        std::fs::write(label_dir.join(format!("{s}.txt")), labels::format(&scene.labels()))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boxes_tightly_cover_blobs() {
        for i in 0..40 {
            let sc = render(7, i, 96, 80);
            assert!(!sc.objects.is_empty());
            for o in &sc.objects {
                let (x1, y1, x2, y2) = o.bbox.corners();
                let mut inside = 0;
                for (k, &m) in o.mask.iter().enumerate() {
                    if m {
                        let (x, y) = ((k % 96) as f64, (k / 96) as f64);
                        assert!(x >= x1 && x + 1.0 <= x2 && y >= y1 && y + 1.0 <= y2);
                        inside += 1;
                    }
                }
                let coverage = inside as f64 / o.bbox.area();
                assert!(coverage >= 0.6, "coverage {coverage}");
                assert!(x1 >= 0.0 && y1 >= 0.0 && x2 <= 96.0 && y2 <= 80.0);
            }
            assert!(sc.image.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn both_classes_appear() {
        let classes: Vec<usize> = (0..20).flat_map(|i| render(1, i, 64, 64).objects.into_iter().map(|o| o.class_id)).collect();
        assert!(classes.contains(&FLAME) && classes.contains(&SMOKE));
    }

    #[test]
    fn generation_is_deterministic() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        generate(10, 3, a.path(), 48, 32).unwrap();
        generate(10, 3, b.path(), 48, 32).unwrap();
        for sub in ["images", "labels"] {
            let mut names: Vec<_> = std::fs::read_dir(a.path().join(sub)).unwrap().map(|e| e.unwrap().file_name()).collect();
            names.sort();
            assert_eq!(names.len(), 10);
            for n in names {
                assert_eq!(std::fs::read(a.path().join(sub).join(&n)).unwrap(), std::fs::read(b.path().join(sub).join(&n)).unwrap());
            }
        }
        for i in 0..10 {
            let l = labels::read(&a.path().join("labels").join(format!("{}.txt", stem(i))), 2).unwrap();
            assert!(!l.is_empty());
        }
    }
}
