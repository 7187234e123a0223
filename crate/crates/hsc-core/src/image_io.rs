//! Binary PPM/PGM I/O and padding. Images live in memory as `[C, H, W]`
//! f64 planes in [0, 1]; 8-bit conversion rounds half to even so the byte
//! boundary is bit-exact and unbiased.

use crate::error::{Error, Result};
use std::path::Path;

struct HeaderReader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> HeaderReader<'a> {
    fn new(data: &'a [u8]) -> Self {
        HeaderReader { data, pos: 0 }
    }

    /// Next whitespace-separated token, skipping `#` comments.
    fn token(&mut self) -> Result<&'a str> {
        loop {
            while self.pos < self.data.len() && self.data[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.pos < self.data.len() && self.data[self.pos] == b'#' {
                while self.pos < self.data.len() && self.data[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.data.len() && !self.data[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format("unexpected end of image header".into()));
        }
        std::str::from_utf8(&self.data[start..self.pos]).map_err(|_| Error::Format("binary junk in image header".into()))
    }

    fn dimension(&mut self, what: &str) -> Result<usize> {
        let t = self.token()?;
        let v: usize = t.parse().map_err(|_| Error::Format(format!("bad {what} {t:?}")))?;
        if v == 0 {
            return Err(Error::Format(format!("{what} must be positive")));
        }
        Ok(v)
    }

    /// Consume the single whitespace byte that separates header from pixels.
    fn body(mut self) -> Result<&'a [u8]> {
        if self.pos >= self.data.len() || !self.data[self.pos].is_ascii_whitespace() {
            return Err(Error::Format("missing separator before pixel data".into()));
        }
        self.pos += 1;
        Ok(&self.data[self.pos..])
    }
}

fn parse_header<'a>(data: &'a [u8], magic: &str) -> Result<(usize, usize, &'a [u8])> {
    let mut r = HeaderReader::new(data);
    let m = r.token()?;
    if m != magic {
        return Err(Error::Format(format!("expected {magic} image, found {m:?}")));
    }
    let w = r.dimension("width")?;
    let h = r.dimension("height")?;
    let maxval = r.dimension("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit images supported, maxval {maxval}")));
    }
    Ok((w, h, r.body()?))
}

/// Parse a binary P6 PPM into `[3, H, W]` planes in [0, 1].
pub fn read_ppm_bytes(data: &[u8]) -> Result<(Vec<f64>, usize, usize)> {
    let (w, h, body) = parse_header(data, "P6")?;
    let n = w * h;
    if body.len() < 3 * n {
        return Err(Error::Format(format!("pixel data truncated: {} of {} bytes", body.len(), 3 * n)));
    }
    let mut img = vec![0.0; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            img[c * n + i] = body[3 * i + c] as f64 / 255.0;
        }
    }
    Ok((img, w, h))
}

/// Parse a binary P5 PGM into raw bytes plus dimensions.
pub fn read_pgm_bytes(data: &[u8]) -> Result<(Vec<u8>, usize, usize)> {
    let (w, h, body) = parse_header(data, "P5")?;
    let n = w * h;
    if body.len() < n {
        return Err(Error::Format(format!("pixel data truncated: {} of {n} bytes", body.len())));
    }
    Ok((body[..n].to_vec(), w, h))
}

fn to_byte(v: f64) -> u8 {
    (v * 255.0).round_ties_even().clamp(0.0, 255.0) as u8
}

/// Serialize `[3, H, W]` planes to a binary P6 PPM.
pub fn write_ppm_bytes(img: &[f64], w: usize, h: usize) -> Result<Vec<u8>> {
    let n = w * h;
    if img.len() != 3 * n {
        return Err(Error::shape(&[3 * n], &[img.len()], "ppm image size"));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for i in 0..n {
        for c in 0..3 {
            out.push(to_byte(img[c * n + i]));
        }
    }
    Ok(out)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<(Vec<f64>, usize, usize)> {
    read_ppm_bytes(&std::fs::read(path)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<(Vec<u8>, usize, usize)> {
    read_pgm_bytes(&std::fs::read(path)?)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &[f64], w: usize, h: usize) -> Result<()> {
    std::fs::write(path, write_ppm_bytes(img, w, h)?)?;
    Ok(())
}

#[inline]
fn reflect(i: usize, n: usize) -> usize {
    let j = i % (2 * n);
    if j < n {
        j
    } else {
        2 * n - 1 - j
    }
}

/// Mirror-pad the right and bottom edges up to multiples of `multiple`.
/// Returns the padded planes and their new height and width.
pub fn mirror_pad(img: &[f64], c: usize, h: usize, w: usize, multiple: usize) -> (Vec<f64>, usize, usize) {
    let ph = h.div_ceil(multiple) * multiple;
    let pw = w.div_ceil(multiple) * multiple;
    if ph == h && pw == w {
        return (img.to_vec(), h, w);
    }
    let mut out = vec![0.0; c * ph * pw];
    for ci in 0..c {
        for y in 0..ph {
            let sy = reflect(y, h);
            for x in 0..pw {
                out[(ci * ph + y) * pw + x] = img[(ci * h + sy) * w + reflect(x, w)];
            }
        }
    }
    (out, ph, pw)
}

/// Take the top-left `h` x `w` window out of `[C, PH, PW]` planes.
pub fn crop(img: &[f64], c: usize, ph: usize, pw: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ci * h + y) * w + x] = img[(ci * ph + y) * pw + x];
            }
        }
    }
    out
}
