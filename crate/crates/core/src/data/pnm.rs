//! Binary PPM (P6) images and PGM (P5) masks, 8-bit only.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Decoded 8-bit raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub pixels: Vec<u8>,
}

/// Parses a P5 or P6 file held in memory. `path` is only used in errors.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Raster> {
    let bad = |detail: &str| Error::ImageFormat {
        path: path.to_path_buf(),
        detail: detail.to_string(),
    };
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(bad("expected P5 or P6 magic")),
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // Whitespace and comments between header tokens.
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err(bad("truncated header")),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(bad("malformed header: expected a number"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header: number out of range"))?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(bad("malformed header: missing separator before pixel data"));
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(bad("zero image dimension"));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            detail: format!("maxval {maxval}, only 255 is supported"),
        });
    }
    let n = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(channels))
        .ok_or_else(|| bad("image dimensions overflow"))?;
    let pixels = bytes
        .get(pos..pos + n)
        .ok_or_else(|| bad(&format!("truncated payload: need {n} bytes, have {}", bytes.len() - pos)))?
        .to_vec();
    Ok(Raster {
        width,
        height,
        channels,
        pixels,
    })
}

pub fn encode_pnm(r: &Raster) -> Vec<u8> {
    let magic = if r.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn expect_channels(r: &Raster, want: usize, path: &Path) -> Result<()> {
    if r.channels == want {
        return Ok(());
    }
    Err(Error::ImageFormat {
        path: path.to_path_buf(),
        detail: format!("expected {} file", if want == 1 { "P5" } else { "P6" }),
    })
}

/// Planar `[3, H, W]` tensor in `[0, 1]` from interleaved RGB bytes.
pub fn raster_to_image(r: &Raster) -> Tensor<f32> {
    let hw = r.width * r.height;
    let mut data = vec![0.0f32; r.channels * hw];
    for (i, px) in r.pixels.chunks_exact(r.channels).enumerate() {
        for (c, &v) in px.iter().enumerate() {
            data[c * hw + i] = v as f32 / 255.0;
        }
    }
    Tensor::new(&[r.channels, r.height, r.width], data).expect("shape matches")
}

pub fn image_to_raster(t: &Tensor<f32>) -> Result<Raster> {
    let s = t.shape();
    if s.len() != 3 || (s[0] != 1 && s[0] != 3) {
        return Err(Error::shape("image_to_raster", format!("expected [1|3, H, W], got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let hw = h * w;
    let mut pixels = vec![0u8; c * hw];
    for i in 0..hw {
        for ch in 0..c {
            pixels[i * c + ch] = (t.data()[ch * hw + i].clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
    Ok(Raster {
        width: w,
        height: h,
        channels: c,
        pixels,
    })
}

pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let r = decode_pnm(&read(path)?, path)?;
    expect_channels(&r, 3, path)?;
    Ok(raster_to_image(&r))
}

pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    write(path, &encode_pnm(&image_to_raster(t)?))
}

/// Mask `[1, H, W]` binarized at 128.
pub fn load_mask(path: &Path) -> Result<Tensor<f32>> {
    let r = decode_pnm(&read(path)?, path)?;
    expect_channels(&r, 1, path)?;
    let data = r.pixels.iter().map(|&v| if v >= 128 { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::new(&[1, r.height, r.width], data).expect("shape matches"))
}

pub fn mask_to_raster(t: &Tensor<f32>) -> Result<Raster> {
    let s = t.shape();
    if s.len() != 3 || s[0] != 1 {
        return Err(Error::shape("save_mask", format!("expected [1, H, W], got {s:?}")));
    }
    let pixels = t
        .data()
        .iter()
        .map(|&v| {
            if v == 0.0 {
                Ok(0)
            } else if v == 1.0 {
                Ok(255)
            } else {
                Err(Error::NonBinary(v as f64))
            }
        })
        .collect::<Result<_>>()?;
    Ok(Raster {
        width: s[2],
        height: s[1],
        channels: 1,
        pixels,
    })
}

/// Writes a binary mask as `{0, 255}`.
pub fn save_mask(t: &Tensor<f32>, path: &Path) -> Result<()> {
    write(path, &encode_pnm(&mask_to_raster(t)?))
}

pub(crate) fn indexed(dir: &Path, sub: &str, index: usize, ext: &str) -> PathBuf {
    dir.join(sub).join(format!("{index:04}.{ext}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(name: &str) -> PathBuf {
        PathBuf::from(name)
    }

    #[test]
    fn decodes_two_by_two_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255, 255, 0]);
        std::fs::write(&path, &bytes).unwrap();
        let m = load_mask(&path).unwrap();
        assert_eq!(m.shape(), &[1, 2, 2]);
        assert_eq!(m.data(), &[0.0, 1.0, 1.0, 0.0]);
        let out = dir.path().join("o.pgm");
        save_mask(&m, &out).unwrap();
        assert_eq!(std::fs::read(&out).unwrap(), bytes);
    }

    #[test]
    fn header_comments_are_skipped() {
        let mut bytes = b"P6 # rgb\n# size next\n1 1 255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 51]);
        let r = decode_pnm(&bytes, &p("c.ppm")).unwrap();
        let t = raster_to_image(&r);
        assert_eq!(t.data(), &[1.0, 0.0, 0.2]);
    }

    #[test]
    fn wide_maxval_is_unsupported() {
        let bytes = b"P6\n1 1\n65535\n\0\0\0\0\0\0".to_vec();
        assert!(matches!(decode_pnm(&bytes, &p("x.ppm")), Err(Error::UnsupportedFormat { .. })));
    }

    #[test]
    fn malformed_inputs_are_format_errors() {
        for bytes in [&b"P3\n1 1\n255\n"[..], b"P5\n2 2\n255\n\0\0\0", b"P5\n2", b"P5\nx 2\n255\n"] {
            assert!(matches!(decode_pnm(bytes, &p("bad")), Err(Error::ImageFormat { .. })), "{bytes:?}");
        }
    }

    #[test]
    fn non_binary_mask_is_rejected() {
        let t = Tensor::new(&[1, 1, 2], vec![0.0, 0.5]).unwrap();
        assert!(matches!(mask_to_raster(&t), Err(Error::NonBinary(_))));
    }

    #[test]
    fn image_round_trip_at_8_bits() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 3,
            pixels: (0..18).map(|i| (i * 14) as u8).collect(),
        };
        let bytes = encode_pnm(&r);
        let back = image_to_raster(&raster_to_image(&decode_pnm(&bytes, &p("r")).unwrap())).unwrap();
        assert_eq!(back, r);
    }
}
