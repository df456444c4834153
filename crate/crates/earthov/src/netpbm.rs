//! Binary netpbm IO: P6 (RGB) and P5 (grayscale), maxval 255.
//!
//! Parse errors carry the byte offset of the problem. A save/load cycle is
//! bit-exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::raster::Raster;

pub fn to_bytes(img: &Raster) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Raster> {
    let mut p = Parser { bytes, pos: 0 };
    let magic = p.take(2, "magic number")?;
    let channels = match magic {
        b"P6" => 3,
        b"P5" => 1,
        other => {
            return Err(Error::Parse {
                offset: 0,
                msg: format!("unsupported magic {:?} (want P5 or P6)", String::from_utf8_lossy(other)),
            })
        }
    };
    let width = p.ascii_int("width")?;
    let height = p.ascii_int("height")?;
    let maxval = p.ascii_int("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: p.pos,
            msg: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    p.single_whitespace()?;
    let n = width * height * channels;
    let payload_off = p.pos;
    let payload = p.take(n, "pixel payload")?;
    if p.pos != bytes.len() {
        return Err(Error::Parse {
            offset: p.pos,
            msg: format!("{} trailing bytes after payload", bytes.len() - p.pos),
        });
    }
    Raster::new(width, height, channels, payload.to_vec()).map_err(|e| Error::Parse {
        offset: payload_off,
        msg: e.to_string(),
    })
}

pub fn save(img: &Raster, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(img))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Raster> {
    let bytes =
        fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Parse { offset, msg } => Error::Parse {
            offset,
            msg: format!("{}: {msg}", path.display()),
        },
        other => other,
    })
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Parser<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                offset: self.pos,
                msg: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    /// Skip whitespace and `#` comment lines.
    fn skip_separators(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b' ' | b'\t' | b'\r' | b'\n' => self.pos += 1,
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                _ => break,
            }
        }
    }

    fn ascii_int(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                msg: format!("expected ASCII integer for {what}"),
            });
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("digits are UTF-8");
        s.parse().map_err(|e| Error::Parse {
            offset: start,
            msg: format!("bad {what}: {e}"),
        })
    }

    /// Exactly one whitespace byte separates the header from the payload.
    fn single_whitespace(&mut self) -> Result<()> {
        match self.bytes.get(self.pos) {
            Some(b' ' | b'\t' | b'\r' | b'\n') => {
                self.pos += 1;
                Ok(())
            }
            _ => Err(Error::Parse {
                offset: self.pos,
                msg: "expected single whitespace before payload".into(),
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_known_2x2_p6() {
        let bytes = b"P6\n2 2\n255\n\x01\x02\x03\x04\x05\x06\x07\x08\x09\x0a\x0b\x0c";
        let img = from_bytes(bytes).unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 2, 3));
        assert_eq!(img.data(), &bytes[11..]);
    }

    #[test]
    fn p5_mask_values_survive() {
        let img = Raster::new(3, 1, 1, vec![0, 1, 2]).unwrap();
        let back = from_bytes(&to_bytes(&img)).unwrap();
        assert_eq!(back.data(), &[0, 1, 2]);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let data: Vec<u8> = (0..17 * 9 * 3).map(|i| (i * 31 % 256) as u8).collect();
        let img = Raster::new(17, 9, 3, data).unwrap();
        let bytes = to_bytes(&img);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let bytes = b"P5\n# made by hand\n2 1\n255\n\xaa\xbb";
        let img = from_bytes(bytes).unwrap();
        assert_eq!(img.data(), &[0xaa, 0xbb]);
    }

    #[test]
    fn truncated_payload_reports_offset() {
        let bytes = b"P5\n2 2\n255\n\x01\x02";
        match from_bytes(bytes) {
            Err(Error::Parse { offset, msg }) => {
                assert_eq!(offset, 11);
                assert!(msg.contains("truncated"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_header_reports_offset() {
        assert!(matches!(from_bytes(b"P4\n1 1\n255\n\x00"), Err(Error::Parse { offset: 0, .. })));
        assert!(matches!(from_bytes(b"P5\nx 2\n255\n"), Err(Error::Parse { .. })));
    }
}
