//! Binary (P5) 8-bit PGM.
//!
//! Written files are exactly `P5\n<width> <height>\n255\n` followed by the
//! row-major pixels. The reader accepts any whitespace and `#` comments in the
//! header and maxval up to 255, rescaling other maxvals to `0..=255`.

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height, "pixel count");
        Self { width, height, data }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PgmError {
    #[error("unsupported PGM variant {0} (only binary P5 is read)")]
    Unsupported(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
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

    fn number(&mut self, what: &str) -> Result<usize, PgmError> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| PgmError::Header(format!("missing or invalid {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage, PgmError> {
    let magic = bytes.get(..2).ok_or_else(|| PgmError::Header("file too short".into()))?;
    match magic {
        b"P5" => {}
        [b'P', d] if d.is_ascii_digit() => return Err(PgmError::Unsupported(format!("P{}", *d as char))),
        _ => return Err(PgmError::Header("missing P5 magic".into())),
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(PgmError::Header(format!("empty image {width}x{height}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(PgmError::Unsupported(format!("maxval {maxval}")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(PgmError::Header("no whitespace after maxval".into()));
    }
    let payload = &bytes[h.pos + 1..];
    let expected = width * height;
    if payload.len() < expected {
        return Err(PgmError::Truncated { expected, found: payload.len() });
    }
    let mut data = payload[..expected].to_vec();
    if maxval != 255 {
        for v in &mut data {
            *v = ((usize::from(*v).min(maxval) * 255 + maxval / 2) / maxval) as u8;
        }
    }
    Ok(GrayImage { width, height, data })
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> Result<()> {
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<GrayImage> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::format(path, e.to_string()))
}
