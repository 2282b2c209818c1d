//! Binary PPM (`P6`, maxval 255) encoding of `[3, H, W]` images in `[0, 1]`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn quantize_channel(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn encode(image: &Tensor) -> Result<Vec<u8>> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::InvalidShape(format!("PPM needs [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    let d = image.data();
    for i in 0..h * w {
        for c in 0..3 {
            out.push(quantize_channel(d[c * h * w + i]));
        }
    }
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("PPM", "truncated header"));
    }
    Ok(&bytes[start..*pos])
}

fn header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::format("PPM", "bad header number"))
}

/// Header fields `(width, height, maxval)` and the decoded image.
pub fn decode(bytes: &[u8]) -> Result<(usize, usize, usize, Tensor)> {
    let mut pos = 0;
    if next_token(bytes, &mut pos)? != b"P6" {
        return Err(Error::format("PPM", "magic is not P6"));
    }
    let w = header_number(bytes, &mut pos)?;
    let h = header_number(bytes, &mut pos)?;
    let maxval = header_number(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::format("PPM", format!("maxval {maxval} unsupported")));
    }
    pos += 1;
    let body = bytes
        .get(pos..pos + 3 * w * h)
        .ok_or_else(|| Error::format("PPM", "truncated pixel data"))?;
    let mut data = vec![0.0; 3 * w * h];
    for i in 0..w * h {
        for c in 0..3 {
            data[c * h * w + i] = body[3 * i + c] as f64 / 255.0;
        }
    }
    Ok((w, h, maxval, Tensor::new(vec![3, h, w], data)?))
}

pub fn write(path: &Path, image: &Tensor) -> Result<()> {
    fs::write(path, encode(image)?)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor> {
    Ok(decode(&fs::read(path)?)?.3)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn round_trip_is_8bit_quantization() {
        let mut rng = Rng::new(1);
        let img = Tensor::uniform(&[3, 4, 5], 0.0, 1.0, &mut rng);
        let bytes = encode(&img).unwrap();
        assert!(bytes.starts_with(b"P6\n5 4\n255\n"));
        let (w, h, maxval, back) = decode(&bytes).unwrap();
        assert_eq!((w, h, maxval), (5, 4, 255));
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(decode(b"P3\n1 1\n255\n").is_err());
        assert!(decode(b"P6\n2 2\n255\n\x00\x00").is_err());
        assert!(encode(&Tensor::zeros(&[1, 2, 2])).is_err());
    }
}
