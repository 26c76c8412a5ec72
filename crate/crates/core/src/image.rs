//! Float RGB images and binary PPM (P6) interchange.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::gaussian::Rgb;

/// Row-major RGB image with `f64` channels in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Image { width, height, data }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "buffer of {} values for a {width}x{height} RGB image",
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> Rgb) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Image { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Rgb {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: Rgb) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn same_dims(&self, other: &Image) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::DimensionMismatch(self.width, self.height, other.width, other.height));
        }
        Ok(())
    }

    /// Encode as binary PPM, `value = round(channel * 255)` after clamping to `[0, 1]`.
    pub fn write_ppm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self.data.iter().map(|&v| quantize(v)).collect();
        out.write_all(&bytes)?;
        out.flush()
    }

    pub fn read_ppm<R: Read>(input: R) -> Result<Image> {
        let mut reader = BufReader::new(input);
        let magic = next_token(&mut reader)?;
        if magic != "P6" {
            return Err(Error::parse("PPM", format!("expected magic P6, found {magic:?}")));
        }
        let width = parse_dim(&next_token(&mut reader)?)?;
        let height = parse_dim(&next_token(&mut reader)?)?;
        let maxval = parse_dim(&next_token(&mut reader)?)?;
        if maxval != 255 {
            return Err(Error::parse("PPM", format!("unsupported maxval {maxval}")));
        }
        // exactly one whitespace byte after maxval was consumed by next_token
        let mut bytes = vec![0u8; width * height * 3];
        reader
            .read_exact(&mut bytes)
            .map_err(|e| Error::parse("PPM", format!("truncated pixel data: {e}")))?;
        let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
        Ok(Image { width, height, data })
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io("creating PPM", path, e))?;
        self.write_ppm(std::io::BufWriter::new(file))
            .map_err(|e| Error::io("writing PPM", path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Image> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io("opening PPM", path, e))?;
        Image::read_ppm(file)
    }
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => Err(Error::parse("PPM", format!("bad header field {tok:?}"))),
    }
}

/// Reads one whitespace-delimited header token, skipping `#` comments.
/// Consumes the single whitespace byte that terminates the token.
fn next_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte).map_err(|e| Error::parse("PPM", e.to_string()))? == 0 {
            if tok.is_empty() {
                return Err(Error::parse("PPM", "unexpected end of header"));
            }
            return Ok(tok);
        }
        let c = byte[0];
        if c == b'#' && tok.is_empty() {
            let mut line = Vec::new();
            reader
                .read_until(b'\n', &mut line)
                .map_err(|e| Error::parse("PPM", e.to_string()))?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if tok.is_empty() {
                continue;
            }
            return Ok(tok);
        }
        tok.push(c as char);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_exact() {
        let img = Image::filled(2, 1, [1.0, 0.5, 0.0]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        // round(0.5 * 255) = 128 (round half away from zero)
        assert_eq!(&buf[11..], &[255, 128, 0, 255, 128, 0]);
    }

    #[test]
    fn reads_header_comments() {
        let mut buf = b"P6\n# made by hand\n1 1\n# another\n255\n".to_vec();
        buf.extend_from_slice(&[0, 51, 255]);
        let img = Image::read_ppm(&buf[..]).unwrap();
        assert_eq!(img.get(0, 0), [0.0, 0.2, 1.0]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(Image::read_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
        assert!(Image::read_ppm(&b"P6\n1 1\n65535\n"[..]).is_err());
        assert!(Image::read_ppm(&b"P6\n2 2\n255\n\x00\x01"[..]).is_err());
        assert!(Image::from_raw(2, 2, vec![0.0; 5]).is_err());
    }

    proptest! {
        #[test]
        fn quantized_images_roundtrip(w in 1usize..8, h in 1usize..8, seed in any::<u64>()) {
            let img = Image::from_fn(w, h, |x, y| {
                let v = seed.wrapping_mul(31 + x as u64).wrapping_add(7 * y as u64);
                [(v % 256) as f64 / 255.0, ((v >> 8) % 256) as f64 / 255.0, ((v >> 16) % 256) as f64 / 255.0]
            });
            let mut buf = Vec::new();
            img.write_ppm(&mut buf).unwrap();
            let back = Image::read_ppm(&buf[..]).unwrap();
            prop_assert_eq!(back, img);
        }
    }
}
