//! PGM (P5) and PFM (`Pf`) readers and writers.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid_model::Plane;

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Header<'a> {
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

    fn token(&mut self) -> Option<&'a str> {
        self.skip_space();
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return None;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()
    }

    fn number<T: std::str::FromStr>(&mut self, path: &Path, what: &str) -> Result<T> {
        self.token()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| Error::format(path, format!("bad or missing {what}")))
    }

    /// Consumes exactly one whitespace byte after the last header token.
    fn end(&mut self, path: &Path) -> Result<usize> {
        match self.bytes.get(self.pos) {
            Some(c) if c.is_ascii_whitespace() => Ok(self.pos + 1),
            _ => Err(Error::format(path, "header not terminated by whitespace")),
        }
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Parses a binary PGM (8-bit or 16-bit big-endian) into values in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<Plane<f64>> {
    let (raw, maxval) = parse_pgm_raw(bytes, path)?;
    Ok(raw.map(|&v| v as f64 / maxval as f64))
}

/// Parses a binary PGM, returning raw sample values and the maximum value.
pub fn parse_pgm_raw(bytes: &[u8], path: &Path) -> Result<(Plane<u16>, u16)> {
    let mut h = Header { bytes, pos: 0 };
    if h.token() != Some("P5") {
        return Err(Error::format(path, "not a binary PGM (expected magic P5)"));
    }
    let width: usize = h.number(path, "width")?;
    let height: usize = h.number(path, "height")?;
    let maxval: u32 = h.number(path, "maximum value")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "image has zero size"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(Error::format(path, format!("maximum value {maxval} out of range")));
    }
    let start = h.end(path)?;
    let wide = maxval > 255;
    let need = width * height * if wide { 2 } else { 1 };
    let data = &bytes[start..];
    if data.len() < need {
        return Err(Error::format(
            path,
            format!("pixel data truncated: {} of {need} bytes", data.len()),
        ));
    }
    let values: Vec<u16> = if wide {
        data[..need]
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]))
            .collect()
    } else {
        data[..need].iter().map(|&b| b as u16).collect()
    };
    Ok((Plane::from_vec(height, width, values)?, maxval as u16))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Plane<f64>> {
    let path = path.as_ref();
    parse_pgm(&read_bytes(path)?, path)
}

/// Encodes raw samples as a binary PGM; 16-bit when `maxval > 255`.
pub fn encode_pgm(image: &Plane<u16>, maxval: u16) -> Result<Vec<u8>> {
    if maxval == 0 {
        return Err(Error::InvalidArgument("PGM maximum value must be positive".into()));
    }
    if let Some(v) = image.data().iter().find(|&&v| v > maxval) {
        return Err(Error::InvalidArgument(format!(
            "sample {v} exceeds the maximum value {maxval}"
        )));
    }
    let mut out = format!("P5\n{} {}\n{}\n", image.width(), image.height(), maxval).into_bytes();
    if maxval > 255 {
        for v in image.data() {
            out.extend_from_slice(&v.to_be_bytes());
        }
    } else {
        out.extend(image.data().iter().map(|&v| v as u8));
    }
    Ok(out)
}

pub fn write_pgm(path: impl AsRef<Path>, image: &Plane<u16>, maxval: u16) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pgm(image, maxval)?)
}

/// Writes values in `[0, 1]` as an 8-bit PGM (clamped and rounded).
pub fn write_pgm_unit(path: impl AsRef<Path>, image: &Plane<f64>) -> Result<()> {
    let raw = image.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u16);
    write_pgm(path, &raw, 255)
}

/// Parses a single-channel PFM. Rows are stored bottom to top; the sign of
/// the scale field selects the byte order (negative = little-endian).
pub fn parse_pfm(bytes: &[u8], path: &Path) -> Result<Plane<f32>> {
    let mut h = Header { bytes, pos: 0 };
    match h.token() {
        Some("Pf") => {}
        Some("PF") => return Err(Error::format(path, "colour PFM is not supported")),
        _ => return Err(Error::format(path, "not a PFM (expected magic Pf)")),
    }
    let width: usize = h.number(path, "width")?;
    let height: usize = h.number(path, "height")?;
    let scale: f64 = h.number(path, "scale")?;
    if width == 0 || height == 0 {
        return Err(Error::format(path, "image has zero size"));
    }
    if scale == 0.0 || !scale.is_finite() {
        return Err(Error::format(path, "scale must be non-zero"));
    }
    let start = h.end(path)?;
    let need = width * height * 4;
    let data = &bytes[start..];
    if data.len() < need {
        return Err(Error::format(
            path,
            format!("pixel data truncated: {} of {need} bytes", data.len()),
        ));
    }
    let little = scale < 0.0;
    let mut values = vec![0f32; width * height];
    for (i, c) in data[..need].chunks_exact(4).enumerate() {
        let b = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(b)
        } else {
            f32::from_be_bytes(b)
        };
        let (row, col) = (i / width, i % width);
        values[(height - 1 - row) * width + col] = v;
    }
    Plane::from_vec(height, width, values)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Plane<f32>> {
    let path = path.as_ref();
    parse_pfm(&read_bytes(path)?, path)
}

/// Encodes a single-channel little-endian PFM (scale `-1.0`).
pub fn encode_pfm(image: &Plane<f32>) -> Vec<u8> {
    let (h, w) = (image.height(), image.width());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(h * w * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&image.at(y, x).to_le_bytes());
        }
    }
    out
}

pub fn write_pfm(path: impl AsRef<Path>, image: &Plane<f32>) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(image))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_8_bit_round_trip_with_comments() {
        let img = Plane::from_vec(2, 3, vec![0u16, 10, 255, 7, 128, 3]).unwrap();
        let mut bytes = encode_pgm(&img, 255).unwrap();
        bytes.splice(3..3, b"# a comment\n".iter().copied());
        let (back, maxval) = parse_pgm_raw(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(maxval, 255);
        assert_eq!(back, img);
        let unit = parse_pgm(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(unit.at(0, 2), 1.0);
    }

    #[test]
    fn pgm_16_bit_is_big_endian() {
        let img = Plane::from_vec(1, 2, vec![258u16, 65535]).unwrap();
        let bytes = encode_pgm(&img, 65535).unwrap();
        assert_eq!(&bytes[bytes.len() - 4..], &[1, 2, 255, 255]);
        let (back, _) = parse_pgm_raw(&bytes, Path::new("x.pgm")).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn pgm_errors() {
        let p = Path::new("bad.pgm");
        assert!(parse_pgm(b"P2\n1 1\n255\n\x00", p).is_err());
        assert!(parse_pgm(b"P5\n2 2\n255\n\x00\x01", p).is_err());
        let err = parse_pgm(b"P5\n2 x\n255\n", p).unwrap_err().to_string();
        assert!(err.contains("bad.pgm"));
    }

    #[test]
    fn pfm_round_trip_is_bit_exact() {
        let vals = vec![0.0f32, -1.5, f32::MIN_POSITIVE, 3.25e7, 1.0 / 3.0, f32::INFINITY];
        let img = Plane::from_vec(2, 3, vals).unwrap();
        let bytes = encode_pfm(&img);
        assert!(bytes.starts_with(b"Pf\n3 2\n-1.0\n"));
        let back = parse_pfm(&bytes, Path::new("x.pfm")).unwrap();
        let bits = |p: &Plane<f32>| p.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&img));
    }

    #[test]
    fn pfm_rows_are_bottom_to_top() {
        let img = Plane::from_vec(2, 1, vec![1.0f32, 2.0]).unwrap();
        let bytes = encode_pfm(&img);
        let body = &bytes[bytes.len() - 8..];
        assert_eq!(&body[..4], &2.0f32.to_le_bytes());
    }

    #[test]
    fn big_endian_pfm_is_read() {
        let mut bytes = b"Pf\n1 1\n1.0\n".to_vec();
        bytes.extend_from_slice(&0.5f32.to_be_bytes());
        assert_eq!(parse_pfm(&bytes, Path::new("x.pfm")).unwrap().at(0, 0), 0.5);
        assert!(parse_pfm(b"PF\n1 1\n-1.0\n", Path::new("x.pfm")).is_err());
    }
}
