//! Binary PPM (P6) encoding and image grids.

use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Black border between grid tiles, in pixels.
pub const GUTTER: usize = 2;

/// `round(clamp((v + 1) / 2, 0, 1) * 255)`.
pub fn to_byte(v: f64) -> u8 {
    let u = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    // NaN clamps to NaN; map it to black.
    if u.is_nan() {
        0
    } else {
        (u * 255.0).round() as u8
    }
}

/// Encodes one `(1, c, h, w)` or `(c, h, w)` image with values in [-1, 1].
/// One channel is replicated to grey RGB; three channels map to RGB.
pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match image.shape() {
        &[1, c, h, w] | &[c, h, w] => (c, h, w),
        s => return Err(shape_err!("PPM needs one (c, h, w) image, got {s:?}")),
    };
    if c != 1 && c != 3 {
        return Err(shape_err!("PPM needs 1 or 3 channels, got {c}"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    let p = h * w;
    out.reserve(3 * p);
    for i in 0..p {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            out.push(to_byte(d[src * p + i]));
        }
    }
    Ok(out)
}

/// Decodes a P6 file produced by [`encode`] back to RGB bytes and size.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut fields = vec![];
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Contract("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Contract(format!("bad PPM header field {s:?}")))
    };
    if fields[0] != "P6" || parse(&fields[3])? != 255 {
        return Err(Error::Contract("not an 8-bit P6 image".into()));
    }
    let (w, h) = (parse(&fields[1])?, parse(&fields[2])?);
    let body = bytes.get(pos..).unwrap_or_default();
    if body.len() != 3 * w * h {
        return Err(Error::Contract(format!("PPM body has {} bytes, expected {}", body.len(), 3 * w * h)));
    }
    Ok((w, h, body.to_vec()))
}

/// Tiles a batch `(n, c, h, w)` row-major into `ceil(sqrt(n))` columns
/// with black gutters between tiles; empty cells stay black.
pub fn grid(images: &Tensor) -> Result<Tensor> {
    let n = images.dims4()?.0;
    if n == 0 {
        return Err(shape_err!("grid of zero images"));
    }
    let cols = (1..=n).find(|k| k * k >= n).unwrap_or(n);
    grid_with_columns(images, cols)
}

pub fn grid_with_columns(images: &Tensor, cols: usize) -> Result<Tensor> {
    let (n, c, h, w) = images.dims4()?;
    if n == 0 || cols == 0 {
        return Err(shape_err!("grid needs at least one image and one column"));
    }
    let rows = n.div_ceil(cols);
    let gh = rows * h + (rows - 1) * GUTTER;
    let gw = cols * w + (cols - 1) * GUTTER;
    let mut out = Tensor::full(&[1, c, gh, gw], -1.0);
    let d = out.data_mut();
    for i in 0..n {
        let (oy, ox) = ((i / cols) * (h + GUTTER), (i % cols) * (w + GUTTER));
        let src = images.outer_slice(i);
        for ch in 0..c {
            for y in 0..h {
                let from = &src[(ch * h + y) * w..(ch * h + y + 1) * w];
                let at = (ch * gh + oy + y) * gw + ox;
                d[at..at + w].copy_from_slice(from);
            }
        }
    }
    Ok(out)
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn write_grid(path: &Path, images: &Tensor) -> Result<()> {
    write(path, &grid(images)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(to_byte(0.0), 128);
        assert_eq!(to_byte(-3.0), 0);
        assert_eq!(to_byte(7.0), 255);
        assert_eq!(to_byte(f64::NAN), 0);
    }

    #[test]
    fn grey_is_replicated() {
        let img = Tensor::new(vec![1, 1, 1, 2], vec![-1.0, 1.0]).unwrap();
        let bytes = encode(&img).unwrap();
        assert_eq!(&bytes[..11], b"P6\n2 1\n255\n");
        assert_eq!(&bytes[11..], &[0, 0, 0, 255, 255, 255]);
        let (w, h, body) = decode(&bytes).unwrap();
        assert_eq!((w, h), (2, 1));
        assert_eq!(body, vec![0, 0, 0, 255, 255, 255]);
    }

    #[test]
    fn rgb_channels_map_directly() {
        let img = Tensor::new(vec![3, 1, 1], vec![1.0, -1.0, 0.0]).unwrap();
        assert_eq!(&encode(&img).unwrap()[11..], &[255, 0, 128]);
        assert!(encode(&Tensor::zeros(&[2, 1, 1])).is_err());
    }

    #[test]
    fn grid_layout() {
        let imgs = Tensor::full(&[3, 1, 2, 2], 1.0);
        let g = grid(&imgs).unwrap();
        // Two columns, two rows, 2-px gutters.
        assert_eq!(g.shape(), &[1, 1, 6, 6]);
        let d = g.data();
        assert_eq!(d[0], 1.0);
        assert_eq!(d[2], -1.0);
        assert_eq!(d[4], 1.0);
        assert_eq!(d[4 * 6], 1.0);
        assert_eq!(d[4 * 6 + 4], -1.0);
    }
}
