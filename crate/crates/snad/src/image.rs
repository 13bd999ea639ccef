//! 8-bit images and their netpbm serialization (binary P5 / P6, maxval 255).
//!
//! Netpbm keeps the pipeline byte-exact with zero dependencies: every write
//! is deterministic, and a write/read round trip returns identical samples.
//! Label maps ride on P5 with the 4-value code alphabet
//! `{0 = back, 85 = skin, 170 = hair, 255 = facial}`.

use crate::error::{Error, Result};
use crate::masks::{LabelMap, RegionClass};
use crate::tensor::Tensor;
use std::path::Path;

/// 8-bit interleaved image, row-major, 1 (gray) or 3 (RGB) channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// `height * width * channels` samples, channel-interleaved.
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument {
                what: "image channels",
                detail: format!("must be 1 or 3, got {channels}"),
            });
        }
        Ok(Image {
            width,
            height,
            channels,
            data: vec![0; width * height * channels],
        })
    }

    #[inline]
    pub fn sample(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set_sample(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    /// `(1, C, H, W)` tensor with samples mapped to `[0, 1]`.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_fn([1, self.channels, self.height, self.width], |_, c, h, w| {
            self.sample(w, h, c) as f64 / 255.0
        })
    }

    /// Quantizes a `(1, C, H, W)` tensor in `[0, 1]` back to 8-bit samples.
    /// Inverse of [`Image::to_tensor`] for in-gamut values.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let [b, c, h, w] = t.shape();
        if b != 1 || (c != 1 && c != 3) {
            return Err(Error::shape(
                "image tensor",
                "(1, 1|3, H, W)",
                format!("{:?}", t.shape()),
            ));
        }
        let mut img = Image::new(w, h, c)?;
        for ci in 0..c {
            for hi in 0..h {
                for wi in 0..w {
                    let v = (t.at(0, ci, hi, wi).clamp(0.0, 1.0) * 255.0).round() as u8;
                    img.set_sample(wi, hi, ci, v);
                }
            }
        }
        Ok(img)
    }
}

/// Reads a binary netpbm file (P5 grayscale or P6 RGB, maxval 255).
pub fn read_netpbm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    parse_netpbm(&bytes).map_err(|(offset, detail)| Error::Parse {
        path: path.display().to_string(),
        offset,
        detail,
    })
}

/// Writes `image` as P5 (1 channel) or P6 (3 channels). Byte output is a
/// pure function of the image.
pub fn write_netpbm(image: &Image, path: &Path) -> Result<()> {
    let bytes = encode_netpbm(image);
    std::fs::write(path, bytes).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn encode_netpbm(image: &Image) -> Vec<u8> {
    let tag = if image.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{tag}\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.data);
    out
}

pub fn parse_netpbm(bytes: &[u8]) -> std::result::Result<Image, (usize, String)> {
    let mut pos = 0usize;
    if bytes.len() < 2 {
        return Err((0, "file shorter than a magic number".into()));
    }
    let channels = match &bytes[0..2] {
        b"P5" => 1,
        b"P6" => 3,
        other => return Err((0, format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
    };
    pos += 2;

    let width = read_header_int(bytes, &mut pos)?;
    let height = read_header_int(bytes, &mut pos)?;
    let maxval = read_header_int(bytes, &mut pos)?;
    if maxval != 255 {
        return Err((pos, format!("unsupported maxval {maxval}, only 255")));
    }
    // Exactly one whitespace byte separates the header from the payload.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err((pos, "missing whitespace before payload".into()));
    }
    pos += 1;

    let expected = width * height * channels;
    let payload = &bytes[pos..];
    if payload.len() < expected {
        return Err((
            bytes.len(),
            format!("truncated payload: need {expected} bytes, have {}", payload.len()),
        ));
    }
    Ok(Image {
        width,
        height,
        channels,
        data: payload[..expected].to_vec(),
    })
}

/// Parses the next ASCII integer, skipping whitespace and `#` comments.
fn read_header_int(bytes: &[u8], pos: &mut usize) -> std::result::Result<usize, (usize, String)> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && bytes[*pos].is_ascii_digit() {
        *pos += 1;
    }
    if start == *pos {
        return Err((start, "expected an ASCII integer in header".into()));
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| (start, "unparsable header integer".into()))
}

/// Writes a label map as P5 using the 4-value code alphabet.
pub fn write_labelmap(map: &LabelMap, path: &Path) -> Result<()> {
    let mut img = Image::new(map.width, map.height, 1)?;
    for y in 0..map.height {
        for x in 0..map.width {
            img.set_sample(x, y, 0, map.class_at(x, y).code());
        }
    }
    write_netpbm(&img, path)
}

/// Reads a P5 label map, rejecting any pixel outside the code alphabet.
pub fn read_labelmap(path: &Path) -> Result<LabelMap> {
    let img = read_netpbm(path)?;
    if img.channels != 1 {
        return Err(Error::Parse {
            path: path.display().to_string(),
            offset: 0,
            detail: "label maps must be P5 grayscale".into(),
        });
    }
    let mut classes = Vec::with_capacity(img.width * img.height);
    for (index, &v) in img.data.iter().enumerate() {
        match RegionClass::from_code(v) {
            Some(c) => classes.push(c),
            None => {
                return Err(Error::BadLabelCode {
                    path: path.display().to_string(),
                    value: v,
                    index,
                })
            }
        }
    }
    LabelMap::from_classes(img.width, img.height, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn temp_path(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("snad-image-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn rgb_round_trip_is_identity() {
        let mut rng = crate::rng::seeded(41);
        let mut img = Image::new(8, 8, 3).unwrap();
        rng.fill(&mut img.data[..]);
        let path = temp_path("rt.ppm");
        write_netpbm(&img, &path).unwrap();
        let back = read_netpbm(&path).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn hand_constructed_p6_parses() {
        let mut bytes = b"P6\n8 8\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(7u8, 192));
        let img = parse_netpbm(&bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (8, 8, 3));
        assert!(img.data.iter().all(|&v| v == 7));
    }

    #[test]
    fn sixteen_bit_maxval_rejected() {
        let bytes = b"P5\n2 2\n65535\n\0\0\0\0\0\0\0\0".to_vec();
        let err = parse_netpbm(&bytes).unwrap_err();
        assert!(err.1.contains("maxval"), "{err:?}");
    }

    #[test]
    fn truncated_payload_rejected_with_offset() {
        let mut bytes = b"P5\n4 4\n255\n".to_vec();
        bytes.extend(std::iter::repeat_n(1u8, 10)); // need 16
        let err = parse_netpbm(&bytes).unwrap_err();
        assert_eq!(err.0, bytes.len());
        assert!(err.1.contains("truncated"));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P5\n# a comment\n3 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 5]);
        let img = parse_netpbm(&bytes).unwrap();
        assert_eq!((img.width, img.height), (3, 2));
    }

    #[test]
    fn tensor_round_trip_in_gamut() {
        let mut rng = crate::rng::seeded(42);
        let mut img = Image::new(5, 4, 3).unwrap();
        rng.fill(&mut img.data[..]);
        let t = img.to_tensor();
        let back = Image::from_tensor(&t).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn labelmap_bad_code_rejected() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 85, 17, 255]);
        let path = temp_path("bad.pgm");
        std::fs::write(&path, &bytes).unwrap();
        let err = read_labelmap(&path).unwrap_err();
        match err {
            Error::BadLabelCode { value, index, .. } => {
                assert_eq!(value, 17);
                assert_eq!(index, 2);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn all_back_labelmap_writes_zeros() {
        let map = LabelMap::from_classes(3, 2, vec![RegionClass::Back; 6]).unwrap();
        let path = temp_path("back.pgm");
        write_labelmap(&map, &path).unwrap();
        let img = read_netpbm(&path).unwrap();
        assert!(img.data.iter().all(|&v| v == 0));
    }
}
