//! Binary PGM (P5) and PPM (P6) files with 8-bit samples.

use std::fs;
use std::io::{self, ErrorKind};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Raw 8-bit raster, row-major, channels interleaved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub data: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::format(start, format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        text.parse()
            .map_err(|_| Error::format(start, format!("{what} `{text}` out of range")))
    }
}

/// Parses an in-memory P5 or P6 file.
pub fn parse(bytes: &[u8]) -> Result<Raster> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::format(0, "expected magic P5 or P6")),
    };
    let mut hdr = Header { bytes, pos: 2 };
    if !bytes.get(2).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(2, "expected whitespace after magic"));
    }
    let width = hdr.number("width")?;
    let height = hdr.number("height")?;
    let maxval_at = {
        hdr.skip_space();
        hdr.pos
    };
    let maxval = hdr.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::format(2, format!("empty raster {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::format(maxval_at, format!("maxval {maxval} unsupported, expected 255")));
    }
    if !bytes.get(hdr.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::format(hdr.pos, "expected single whitespace before payload"));
    }
    let start = hdr.pos + 1;
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::format(2, "raster dimensions overflow"))?;
    let payload = &bytes[start..];
    if payload.len() < len {
        return Err(Error::Io(io::Error::new(
            ErrorKind::UnexpectedEof,
            format!("payload has {} of {len} bytes", payload.len()),
        )));
    }
    Ok(Raster {
        width,
        height,
        channels,
        data: payload[..len].to_vec(),
    })
}

pub fn encode(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Contract(format!("cannot encode {c} channels"))),
    };
    if r.data.len() != r.width * r.height * r.channels {
        return Err(Error::dim("pnm::encode", format!("{} bytes for {}x{}x{}", r.data.len(), r.height, r.width, r.channels)));
    }
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.data);
    Ok(out)
}

pub fn read(path: &Path) -> Result<Raster> {
    parse(&fs::read(path)?)
}

pub fn write(path: &Path, r: &Raster) -> Result<()> {
    fs::write(path, encode(r)?)?;
    Ok(())
}

/// Reads an image as `[H, W, C]` with values in `[0, 1]`.
pub fn read_image<T: Real>(path: &Path) -> Result<Tensor<T>> {
    let r = read(path)?;
    let data = r.data.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect();
    Tensor::new(&[r.height, r.width, r.channels], data)
}

/// Writes a `[H, W, 1]` or `[H, W, 3]` image, clamping to `[0, 1]` and
/// rounding to the nearest 8-bit level.
pub fn write_image<T: Real>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let &[height, width, channels] = image.shape() else {
        return Err(Error::dim("write_image", format!("expected [H,W,C], got {:?}", image.shape())));
    };
    let data = image.data().iter().map(|v| quantize(v.as_f64())).collect();
    write(path, &Raster { width, height, channels, data })
}

pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Reads a PGM of raw class indices, returning `(height, width, mask)`.
pub fn read_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let r = read(path)?;
    if r.channels != 1 {
        return Err(Error::format(0, "mask must be a P5 greymap"));
    }
    Ok((r.height, r.width, r.data))
}

pub fn write_mask(path: &Path, height: usize, width: usize, mask: &[u8]) -> Result<()> {
    write(path, &Raster { width, height, channels: 1, data: mask.to_vec() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_written_greymap() {
        let mut bytes = b"P5 2 2 255\n".to_vec();
        bytes.extend([0, 1, 1, 0]);
        let r = parse(&bytes).unwrap();
        assert_eq!((r.height, r.width, r.channels), (2, 2, 1));
        assert_eq!(r.data, [0, 1, 1, 0]);
    }

    #[test]
    fn comments_in_header() {
        let mut bytes = b"P6\n# made by hand\n1 1\n# depth\n255\n".to_vec();
        bytes.extend([10, 20, 30]);
        assert_eq!(parse(&bytes).unwrap().data, [10, 20, 30]);
    }

    #[test]
    fn format_errors_carry_offsets() {
        let cases: [(&[u8], usize); 4] = [
            (b"P3 1 1 255\n\0", 0),
            (b"P5 x 1 255\n\0", 3),
            (b"P5 1 1 65535\n\0\0", 7),
            (b"P5 1 1 255", 10),
        ];
        for (bytes, at) in cases {
            match parse(bytes) {
                Err(Error::Format { offset, .. }) => assert_eq!(offset, at, "{:?}", String::from_utf8_lossy(bytes)),
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn truncated_payload_is_io_error() {
        let err = parse(b"P5 2 2 255\n\0\0\0").unwrap_err();
        assert!(matches!(err, Error::Io(ref e) if e.kind() == ErrorKind::UnexpectedEof), "{err:?}");
    }

    #[test]
    fn encode_parse_round_trip() {
        let r = Raster {
            width: 3,
            height: 2,
            channels: 3,
            data: (0..18).map(|i| (i * 14) as u8).collect(),
        };
        assert_eq!(parse(&encode(&r).unwrap()).unwrap(), r);
    }
}
