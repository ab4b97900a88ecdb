use super::BBox;

/// IoU by counting the centers of an `n × n` grid of cells laid over the
/// enclosure of both boxes.
pub fn rasterized_iou(a: &BBox, b: &BBox, n: usize) -> f64 {
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let (x0, y0) = (ax1.min(bx1), ay1.min(by1));
    let (sx, sy) = ((ax2.max(bx2) - x0) / n as f64, (ay2.max(by2) - y0) / n as f64);
    if !(sx > 0.0 && sy > 0.0) {
        return 0.0;
    }
    let cover = |lo: f64, hi: f64, origin: f64, step: f64| -> Vec<bool> {
        (0..n)
            .map(|i| {
                let c = origin + (i as f64 + 0.5) * step;
                c >= lo && c <= hi
            })
            .collect()
    };
    let (a_cols, b_cols) = (cover(ax1, ax2, x0, sx), cover(bx1, bx2, x0, sx));
    let (a_rows, b_rows) = (cover(ay1, ay2, y0, sy), cover(by1, by2, y0, sy));
    let (mut inter, mut union) = (0u64, 0u64);
    for (&ar, &br) in a_rows.iter().zip(&b_rows) {
        for (&ac, &bc) in a_cols.iter().zip(&b_cols) {
            let (ia, ib) = (ar & ac, br & bc);
            inter += (ia & ib) as u64;
            union += (ia | ib) as u64;
        }
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_nested() {
        let a = BBox::from_corners(0.1, 0.2, 0.7, 0.9);
        assert_eq!(rasterized_iou(&a, &a, 200), 1.0);
        let inner = BBox::from_corners(0.25, 0.25, 0.75, 0.75);
        let outer = BBox::from_corners(0.0, 0.0, 1.0, 1.0);
        assert!((rasterized_iou(&inner, &outer, 1000) - 0.25).abs() < 2e-3);
    }

    #[test]
    fn overlapping_squares() {
        let a = BBox::from_corners(0.0, 0.0, 2.0, 2.0);
        let b = BBox::from_corners(1.0, 1.0, 3.0, 3.0);
        assert!((rasterized_iou(&a, &b, 1000) - 1.0 / 7.0).abs() < 2e-3);
    }
}
