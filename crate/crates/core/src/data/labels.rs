//! Normalized `class cx cy w h` label files.

use std::fmt::Write as _;
use std::path::Path;

use crate::boxes::BBox;
use crate::error::{Error, Result};

/// One labeled box with all coordinates normalized to the frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelRecord {
    pub class_id: usize,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl LabelRecord {
    /// Box in pixels of a `width × height` frame.
    pub fn to_pixels(&self, width: usize, height: usize) -> BBox {
        let (fw, fh) = (width as f64, height as f64);
        BBox::new(self.cx * fw, self.cy * fh, self.w * fw, self.h * fh)
    }

    pub fn from_pixels(class_id: usize, b: &BBox, width: usize, height: usize) -> Self {
        let (fw, fh) = (width as f64, height as f64);
        Self {
            class_id,
            cx: b.cx / fw,
            cy: b.cy / fh,
            w: b.w / fw,
            h: b.h / fh,
        }
    }
}

/// Parses label text; `source` only labels error messages.
pub fn parse(text: &str, nc: usize, source: &str) -> Result<Vec<LabelRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |msg: String| Error::Label {
            path: source.to_string(),
            line: i + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.is_empty() {
            continue;
        }
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, got {}", fields.len())));
        }
        let class_id: usize = fields[0].parse().map_err(|_| err(format!("bad class id {:?}", fields[0])))?;
        if class_id >= nc {
            return Err(err(format!("class {class_id} outside 0..{nc}")));
        }
        let mut v = [0.0; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f.parse().map_err(|_| err(format!("non-numeric value {f:?}")))?;
            if !(0.0..=1.0).contains(slot) {
                return Err(err(format!("value {slot} outside [0, 1]")));
            }
        }
        let [cx, cy, w, h] = v;
        out.push(LabelRecord { class_id, cx, cy, w, h });
    }
    Ok(out)
}

pub fn read(path: &Path, nc: usize) -> Result<Vec<LabelRecord>> {
    parse(&std::fs::read_to_string(path)?, nc, &path.display().to_string())
}

pub fn format(labels: &[LabelRecord]) -> String {
    let mut s = String::new();
    for l in labels {
        let _ = writeln!(s, "{} {:.6} {:.6} {:.6} {:.6}", l.class_id, l.cx, l.cy, l.w, l.h);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_box() {
        let l = parse("0 0.5 0.5 0.2 0.2\n", 2, "t").unwrap();
        assert_eq!(l, vec![LabelRecord { class_id: 0, cx: 0.5, cy: 0.5, w: 0.2, h: 0.2 }]);
    }

    #[test]
    fn empty_and_blank_lines() {
        assert!(parse("", 2, "t").unwrap().is_empty());
        assert_eq!(parse("\n  \n1 0.1 0.2 0.3 0.4\n\n", 2, "t").unwrap().len(), 1);
    }

    #[test]
    fn errors_carry_line_numbers() {
        let e = parse("1 0.5 0.5 1.5 0.2", 2, "a.txt").unwrap_err();
        assert!(matches!(e, Error::Label { line: 1, .. }), "{e}");
        let e = parse("0 0.5 0.5 0.1 0.1\n0 0.5 x 0.1 0.1", 2, "a.txt").unwrap_err();
        assert!(matches!(e, Error::Label { line: 2, .. }));
        assert!(parse("2 0.5 0.5 0.1 0.1", 2, "a.txt").is_err());
        assert!(parse("0 0.5 0.5 0.1", 2, "a.txt").is_err());
    }

    #[test]
    fn format_parses_back() {
        let l = vec![LabelRecord { class_id: 1, cx: 0.25, cy: 0.5, w: 0.125, h: 0.75 }];
        assert_eq!(parse(&format(&l), 2, "t").unwrap(), l);
    }
}
