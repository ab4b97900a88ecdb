//! Binary PPM (P6, maxval 255) to and from `[3, H, W]` tensors in [0, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reads one header token, skipping whitespace and `#` comments.
fn token(buf: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < buf.len() && buf[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < buf.len() && buf[*pos] == b'#' {
            while *pos < buf.len() && buf[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < buf.len() && !buf[*pos].is_ascii_whitespace() && buf[*pos] != b'#' {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("header ends early".into()));
    }
    Ok(String::from_utf8_lossy(&buf[start..*pos]).into_owned())
}

fn number(buf: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let t = token(buf, pos)?;
    t.parse().map_err(|_| Error::Image(format!("bad {what} {t:?}")))
}

pub fn decode(buf: &[u8]) -> Result<Tensor<f32>> {
    let mut pos = 0;
    let magic = token(buf, &mut pos).map_err(|_| Error::ImageMagic(String::new()))?;
    if magic != "P6" {
        return Err(Error::ImageMagic(magic));
    }
    let w = number(buf, &mut pos, "width")? as usize;
    let h = number(buf, &mut pos, "height")? as usize;
    let maxval = number(buf, &mut pos, "maxval")?;
    if maxval != 255 {
        return Err(Error::ImageMaxval(maxval));
    }
    if w == 0 || h == 0 {
        return Err(Error::Image(format!("empty {w}×{h} image")));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let want = 3 * w * h;
    let raster = buf.get(pos..).unwrap_or(&[]);
    if raster.len() < want {
        return Err(Error::ImageTruncated { got: raster.len(), want });
    }
    let mut data = vec![0.0f32; want];
    for (i, px) in raster[..want].chunks(3).enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px[c] as f32 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

/// Quantizes to 8 bits; values are clamped to [0, 1].
pub fn encode(img: &Tensor<f32>) -> Result<Vec<u8>> {
    let &[3, h, w] = img.shape() else {
        return Err(Error::Image(format!("expected [3, H, W], got {:?}", img.shape())));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = img.data();
    for i in 0..w * h {
        for c in 0..3 {
            out.push((d[c * w * h + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok(out)
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    decode(&std::fs::read(path)?).map_err(|e| match e {
        Error::Image(m) => Error::Image(format!("{}: {m}", path.display())),
        e => e,
    })
}

pub fn write(path: &Path, img: &Tensor<f32>) -> Result<()> {
    std::fs::write(path, encode(img)?)?;
    Ok(())
}
