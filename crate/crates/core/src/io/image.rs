//! Binary PGM (`P5`) and PPM (`P6`) images with maxval 255.
//!
//! Pixels map to `[0, 1]` as `v/255`. Writing clamps to `[0, 1]` and rounds
//! `255·x` half away from zero.

use std::path::Path;

use super::IoError;
use crate::tensor::Tensor;

struct Header {
    channels: usize,
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(b: &[u8]) -> Result<Header, IoError> {
    let channels = match b.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(IoError::Format("expected P5 or P6 magic".into())),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in fields.iter_mut() {
        // whitespace and comments
        loop {
            match b.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while b.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(IoError::Format("truncated header".into())),
            }
        }
        let start = pos;
        while b.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(IoError::Format(format!("expected a number at byte {start}")));
        }
        *f = std::str::from_utf8(&b[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| IoError::Format("header number out of range".into()))?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if !b.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(IoError::Format("missing whitespace after maxval".into()));
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(IoError::Unsupported(format!("maxval {maxval} (only 255)")));
    }
    if width == 0 || height == 0 {
        return Err(IoError::Format("zero image dimension".into()));
    }
    Ok(Header {
        channels,
        width,
        height,
        data_start: pos + 1,
    })
}

/// Decodes to a tensor of shape `[H, W, C]` with `C` = 1 or 3.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor, IoError> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * h.channels;
    let raster = &bytes[h.data_start.min(bytes.len())..];
    if raster.len() < n {
        return Err(IoError::Format(format!("raster has {} bytes, expected {n}", raster.len())));
    }
    let data = raster[..n].iter().map(|&v| v as f64 / 255.0).collect();
    Tensor::new(vec![h.height, h.width, h.channels], data).map_err(|e| IoError::Format(e.to_string()))
}

fn quantize(v: f64) -> u8 {
    // NaN maps to 0
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0).round() as u8
}

/// Encodes `[H, W]`, `[H, W, 1]` (P5) or `[H, W, 3]` (P6).
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>, IoError> {
    let (h, w, c) = match *x.shape() {
        [h, w] => (h, w, 1),
        [h, w, c] => (h, w, c),
        _ => return Err(IoError::Unsupported(format!("image tensor of shape {:?}", x.shape()))),
    };
    let magic = match c {
        1 => "P5",
        3 => "P6",
        _ => return Err(IoError::Unsupported(format!("{c} channels"))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    out.extend(x.data().iter().map(|&v| quantize(v)));
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Tensor, IoError> {
    decode_image(&std::fs::read(path)?)
}

pub fn write_image(path: &Path, x: &Tensor) -> Result<(), IoError> {
    std::fs::write(path, encode_image(x)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_image_and_pixel_value() {
        let mut b = b"P5\n3 2\n255\n".to_vec();
        b.extend([0u8; 6]);
        assert_eq!(decode_image(&b).unwrap(), Tensor::zeros(vec![2, 3, 1]));
        let mut b = b"P5 1 1 255\n".to_vec();
        b.push(128);
        assert_eq!(decode_image(&b).unwrap().data()[0], 128.0 / 255.0);
    }

    #[test]
    fn comments_and_errors() {
        let mut b = b"P6\n# made by hand\n1 1\n# another\n255\n".to_vec();
        b.extend([1, 2, 3]);
        assert_eq!(decode_image(&b).unwrap().shape(), &[1, 1, 3]);
        assert!(matches!(decode_image(b"P5\n1 1\n65535\n\0\0"), Err(IoError::Unsupported(_))));
        assert!(matches!(decode_image(b"P2\n1 1\n255\n0"), Err(IoError::Format(_))));
        assert!(matches!(decode_image(b"P5\n2 2\n255\n\0"), Err(IoError::Format(_))));
        assert!(matches!(decode_image(b"P5\n2"), Err(IoError::Format(_))));
    }

    #[test]
    fn write_rounds_and_clamps() {
        let x = Tensor::new(vec![1, 4, 1], vec![-0.2, 1.7, 0.5 / 255.0, 2.5 / 255.0]).unwrap();
        let b = encode_image(&x).unwrap();
        assert_eq!(&b[b.len() - 4..], &[0, 255, 1, 3]);
    }

    proptest! {
        #[test]
        fn write_of_read_is_byte_identical(w in 1usize..6, h in 1usize..6, rgb in any::<bool>(), seed in any::<u64>()) {
            let c = if rgb { 3 } else { 1 };
            let mut rng = crate::rng::NoiseRng::new(seed, 0);
            let mut file = format!("{}\n{w} {h}\n255\n", if rgb { "P6" } else { "P5" }).into_bytes();
            file.extend((0..w * h * c).map(|_| (rng.next_u64() & 0xff) as u8));
            let x = decode_image(&file).unwrap();
            prop_assert_eq!(&encode_image(&x).unwrap(), &file);
            prop_assert_eq!(decode_image(&encode_image(&x).unwrap()).unwrap(), x);
        }
    }
}
