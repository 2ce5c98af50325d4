//! Binary NetPBM rasters: P5 (grayscale) and P6 (RGB), maxval <= 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PnmKind {
    Gray,
    Rgb,
}

impl PnmKind {
    pub fn channels(self) -> usize {
        match self {
            PnmKind::Gray => 1,
            PnmKind::Rgb => 3,
        }
    }

    fn magic(self) -> &'static [u8; 2] {
        match self {
            PnmKind::Gray => b"P5",
            PnmKind::Rgb => b"P6",
        }
    }
}

/// Decoded raster with interleaved 8-bit samples.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Pnm {
    pub kind: PnmKind,
    pub width: usize,
    pub height: usize,
    pub maxval: u8,
    pub data: Vec<u8>,
}

fn malformed(msg: impl Into<String>) -> Error {
    Error::MalformedPnm(msg.into())
}

struct HeaderReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl HeaderReader<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
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
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed(format!("bad {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Pnm> {
    let kind = match bytes.get(..2) {
        Some(b"P5") => PnmKind::Gray,
        Some(b"P6") => PnmKind::Rgb,
        _ => return Err(malformed("expected P5 or P6 magic")),
    };
    let mut r = HeaderReader { bytes, pos: 2 };
    let width = r.number("width")?;
    let height = r.number("height")?;
    let maxval = r.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(malformed(format!("zero extent {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(malformed(format!("maxval {maxval} outside 1..=255")));
    }
    // exactly one whitespace byte separates the header from the raster
    if !bytes.get(r.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(malformed("missing separator after maxval"));
    }
    let start = r.pos + 1;
    let len = width * height * kind.channels();
    let data = bytes
        .get(start..start + len)
        .ok_or_else(|| malformed(format!("raster truncated: need {len} bytes")))?
        .to_vec();
    Ok(Pnm { kind, width, height, maxval: maxval as u8, data })
}

pub fn encode(img: &Pnm) -> Vec<u8> {
    let header = format!("{}\n{} {}\n{}\n", std::str::from_utf8(img.kind.magic()).expect("ascii"), img.width, img.height, img.maxval);
    let mut out = header.into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read(path: &Path) -> Result<Pnm> {
    decode(&fs::read(path)?).map_err(|e| match e {
        Error::MalformedPnm(msg) => Error::MalformedPnm(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write(path: &Path, img: &Pnm) -> Result<()> {
    fs::write(path, encode(img))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_round_trips() {
        let bytes = b"P5\n# a comment\n2 2\n255\n\x00\xff\x80\x7f";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height, img.maxval), (2, 2, 255));
        assert_eq!(img.data, vec![0, 255, 128, 127]);
        assert_eq!(decode(&encode(&img)).unwrap(), img);
    }

    #[test]
    fn rejects_malformed_inputs() {
        for bad in [
            &b"P3\n1 1\n255\n\x00"[..],
            b"P5\n1 1\n65535\n\x00\x00",
            b"P6\n2 1\n255\n\x00\x00\x00",
            b"P5\n0 1\n255\n",
            b"P5\n1 x\n255\n\x00",
        ] {
            assert!(matches!(decode(bad), Err(Error::MalformedPnm(_))));
        }
    }
}
