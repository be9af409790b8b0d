//! Binary NetPBM (P5 graymap / P6 pixmap) codec.

use super::{DatasetError, Image};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments (which run to the end of the line).
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &'static str) -> Result<usize, DatasetError> {
        let start = self.pos;
        if !self.bytes.get(self.pos).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
            return Err(DatasetError::Header(format!("expected whitespace before {field}")));
        }
        self.skip_separators();
        let digits_start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if digits_start == self.pos {
            self.pos = start;
            return Err(DatasetError::Header(format!("missing {field}")));
        }
        std::str::from_utf8(&self.bytes[digits_start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| DatasetError::Header(format!("{field} is out of range")))
    }
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<Image, DatasetError> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        Some(m) => return Err(DatasetError::UnsupportedFormat(String::from_utf8_lossy(m).into_owned())),
        None => return Err(DatasetError::UnsupportedFormat(String::from_utf8_lossy(bytes).into_owned())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if maxval == 0 {
        return Err(DatasetError::Header("maxval must be positive".into()));
    }
    if maxval > 255 {
        return Err(DatasetError::UnsupportedMaxval(maxval));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(DatasetError::Header("expected a single whitespace after maxval".into())),
    }
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| DatasetError::Header("image dimensions overflow".into()))?;
    let payload = &bytes[cur.pos..];
    if payload.len() < expected {
        return Err(DatasetError::Truncated {
            expected,
            actual: payload.len(),
        });
    }
    if payload.len() > expected {
        return Err(DatasetError::TrailingData(payload.len() - expected));
    }
    let pixels = if maxval == 255 {
        payload.to_vec()
    } else {
        payload
            .iter()
            .map(|&v| {
                if v as usize > maxval {
                    Err(DatasetError::Header(format!("sample {v} exceeds maxval {maxval}")))
                } else {
                    Ok(((v as usize * 255 + maxval / 2) / maxval) as u8)
                }
            })
            .collect::<Result<_, _>>()?
    };
    Image::new(width, height, channels, pixels)
}

/// Canonical encoding: `P5`/`P6`, single newlines between header fields,
/// maxval 255.
pub fn encode_netpbm(img: &Image) -> Vec<u8> {
    let magic = if img.channels() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.pixels());
    out
}
