//! Image files: raw f32 grids with a JSON sidecar, and PGM/PPM import.

use super::ImageGrid;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageMeta {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes planar little-endian f32 pixels to `path` and
/// `{height, width, channels}` to `path.json`.
pub fn save_f32_grid(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    std::fs::write(path, bytes)?;
    let meta = ImageMeta {
        height: img.height(),
        width: img.width(),
        channels: img.channels(),
    };
    std::fs::write(sidecar(path), serde_json::to_vec(&meta)?)?;
    Ok(())
}

pub fn load_f32_grid(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let path = path.as_ref();
    let meta: ImageMeta = serde_json::from_slice(&std::fs::read(sidecar(path))?)?;
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format("pixel payload is not a multiple of 4 bytes".into()));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    ImageGrid::new(meta.height, meta.width, meta.channels, data)
}

struct PnmReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmReader<'_> {
    fn skip_space(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn token(&mut self) -> Result<&str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("unexpected end of PNM header".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).map_err(|_| Error::Format("bad PNM token".into()))
    }

    fn number(&mut self) -> Result<usize> {
        let t = self.token()?;
        t.parse().map_err(|_| Error::Format(format!("bad PNM number {t:?}")))
    }
}

/// Reads P2/P5 (grey) and P3/P6 (RGB) files, scaling samples by `1/maxval`.
pub fn load_pnm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let bytes = std::fs::read(path)?;
    parse_pnm(&bytes)
}

pub(crate) fn parse_pnm(bytes: &[u8]) -> Result<ImageGrid> {
    let mut r = PnmReader { bytes, pos: 0 };
    let magic = r.token()?.to_string();
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(Error::Format(format!("unsupported PNM kind {other:?}"))),
    };
    let width = r.number()?;
    let height = r.number()?;
    let maxval = r.number()?;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PNM maxval {maxval}")));
    }
    let n = width * height * channels;
    let mut interleaved = Vec::with_capacity(n);
    if binary {
        r.pos += 1;
        let wide = maxval > 255;
        let need = if wide { 2 * n } else { n };
        let body = r
            .bytes
            .get(r.pos..r.pos + need)
            .ok_or_else(|| Error::Format("truncated PNM payload".into()))?;
        if wide {
            interleaved.extend(body.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize));
        } else {
            interleaved.extend(body.iter().map(|&b| b as usize));
        }
    } else {
        for _ in 0..n {
            interleaved.push(r.number()?);
        }
    }
    let scale = 1.0 / maxval as f32;
    let mut planar = vec![0.0f32; n];
    for (i, &v) in interleaved.iter().enumerate() {
        if v > maxval {
            return Err(Error::Format(format!("PNM sample {v} exceeds maxval {maxval}")));
        }
        let (pix, c) = (i / channels, i % channels);
        planar[c * width * height + pix] = v as f32 * scale;
    }
    ImageGrid::new(height, width, channels, planar)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_and_binary_pnm() {
        let grey = parse_pnm(b"P2\n# c\n2 1\n255\n0 255\n").unwrap();
        assert_eq!(grey.data(), &[0.0, 1.0]);
        let mut p6 = b"P6 1 2 255\n".to_vec();
        p6.extend_from_slice(&[255, 0, 0, 0, 0, 255]);
        let rgb = parse_pnm(&p6).unwrap();
        assert_eq!((rgb.height(), rgb.width(), rgb.channels()), (2, 1, 3));
        assert_eq!(rgb.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert!(parse_pnm(b"P6 2 2 255\n\x00").is_err());
        assert!(parse_pnm(b"P7 1 1 1\n").is_err());
    }

    #[test]
    fn raw_grid_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.f32");
        let img = ImageGrid::new(2, 2, 1, vec![0.0, 0.25, 0.5, 1.0]).unwrap();
        save_f32_grid(&p, &img).unwrap();
        assert_eq!(load_f32_grid(&p).unwrap(), img);
        let meta: ImageMeta = serde_json::from_slice(&std::fs::read(dir.path().join("img.f32.json")).unwrap()).unwrap();
        assert_eq!(meta, ImageMeta { height: 2, width: 2, channels: 1 });
    }
}
