//! Binary 8-bit netpbm images: P5 (graymap) and P6 (pixmap).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Interleaved 8-bit raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn gray(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height);
        Raster {
            width,
            height,
            channels: 1,
            data,
        }
    }

    pub fn rgb(width: usize, height: usize, data: Vec<u8>) -> Self {
        assert_eq!(data.len(), width * height * 3);
        Raster {
            width,
            height,
            channels: 3,
            data,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut p = Parser { bytes, pos: 0 };
        let channels = match bytes.get(..2) {
            Some(b"P5") => 1,
            Some(b"P6") => 3,
            _ => {
                return Err(Error::Parse {
                    offset: 0,
                    detail: "expected netpbm magic `P5` or `P6`".into(),
                })
            }
        };
        p.pos = 2;
        let width = p.number("width")?;
        let height = p.number("height")?;
        let maxval = p.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Parse {
                offset: p.pos,
                detail: format!("only 8-bit images are supported, maxval is {maxval}"),
            });
        }
        if width == 0 || height == 0 {
            return Err(Error::Parse {
                offset: p.pos,
                detail: "zero image extent".into(),
            });
        }
        // Exactly one whitespace byte separates the header from the raster.
        if !bytes.get(p.pos).is_some_and(u8::is_ascii_whitespace) {
            return Err(Error::Parse {
                offset: p.pos,
                detail: "missing whitespace after header".into(),
            });
        }
        let start = p.pos + 1;
        let need = width * height * channels;
        let data = bytes.get(start..start + need).ok_or_else(|| Error::Parse {
            offset: bytes.len(),
            detail: format!("raster truncated: need {need} bytes after offset {start}"),
        })?;
        Ok(Raster {
            width,
            height,
            channels,
            data: data.to_vec(),
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes).map_err(|e| match e {
            Error::Parse { offset, detail } => Error::Parse {
                offset,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }
}

struct Parser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Parser<'_> {
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

    fn number(&mut self, what: &str) -> Result<usize> {
        let before = self.pos;
        self.skip_space();
        if self.pos == before {
            return Err(Error::Parse {
                offset: self.pos,
                detail: format!("expected whitespace before {what}"),
            });
        }
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                detail: format!("expected decimal {what}"),
            })
    }
}
