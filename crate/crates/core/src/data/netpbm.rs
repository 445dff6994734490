//! Binary Netpbm: P6 for RGB images, P5 for label masks. Only maxval 255.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{LabelTensor, Tensor};

/// `floor(v * 255 + 0.5)`
pub fn quantize(v: f64) -> u8 {
    (v * 255.0 + 0.5).floor() as u8
}

fn header(magic: &str, h: usize, w: usize) -> Vec<u8> {
    format!("{magic}\n{w} {h}\n255\n").into_bytes()
}

pub fn encode_ppm(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w) = match *img.shape() {
        [3, h, w] => (h, w),
        _ => return Err(Error::shape(format!("PPM needs [3,H,W], got {:?}", img.shape()))),
    };
    if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::data(format!("pixel value {v} outside [0,1]")));
    }
    let plane = h * w;
    let d = img.data();
    let mut out = header("P6", h, w);
    out.reserve(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            out.push(quantize(d[c * plane + i]));
        }
    }
    Ok(out)
}

pub fn encode_pgm(mask: &LabelTensor) -> Result<Vec<u8>> {
    let (h, w) = match *mask.shape() {
        [h, w] => (h, w),
        _ => return Err(Error::shape(format!("PGM needs [H,W], got {:?}", mask.shape()))),
    };
    let mut out = header("P5", h, w);
    for &l in mask.data() {
        out.push(u8::try_from(l).map_err(|_| Error::data(format!("label {l} exceeds 255")))?);
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(self.pos as u64, msg)
    }

    /// Whitespace and `#` comments before a header token.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b.is_ascii_whitespace() {
                self.pos += 1;
            } else if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            self.pos = start;
            return Err(self.err(format!("expected {what}")));
        }
        let text = std::str::from_utf8(&self.buf[start..self.pos]).unwrap();
        text.parse().map_err(|_| {
            self.pos = start;
            self.err(format!("{what} {text} is out of range"))
        })
    }
}

/// Parses the header and returns (width, height, payload offset).
fn parse_header(buf: &[u8], magic: &[u8; 2]) -> Result<(usize, usize, usize)> {
    let mut cur = Cursor { buf, pos: 0 };
    if buf.len() < 2 || &buf[..2] != magic {
        return Err(cur.err(format!("expected magic {}", String::from_utf8_lossy(magic))));
    }
    cur.pos = 2;
    if !buf.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(cur.err("expected whitespace after magic"));
    }
    let w = cur.number("width")?;
    let h = cur.number("height")?;
    let maxval_at = cur.pos;
    let maxval = cur.number("maxval")?;
    if w == 0 || h == 0 {
        return Err(Error::format(3, format!("zero image extent {w}x{h}")));
    }
    if maxval != 255 {
        cur.pos = maxval_at;
        cur.skip_separators();
        return Err(cur.err(format!("unsupported maxval {maxval}, only 255")));
    }
    if !buf.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected one whitespace byte before the payload"));
    }
    Ok((w, h, cur.pos + 1))
}

fn payload(buf: &[u8], start: usize, len: usize) -> Result<&[u8]> {
    let end = start.checked_add(len).filter(|&e| e <= buf.len());
    match end {
        Some(end) => Ok(&buf[start..end]),
        None => Err(Error::format(
            buf.len() as u64,
            format!("truncated payload: need {len} bytes from offset {start}, file has {}", buf.len()),
        )),
    }
}

pub fn decode_ppm(buf: &[u8]) -> Result<Tensor> {
    let (w, h, start) = parse_header(buf, b"P6")?;
    let plane = w * h;
    let px = payload(buf, start, 3 * plane)?;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = px[3 * i + c] as f64 / 255.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

pub fn decode_pgm(buf: &[u8]) -> Result<LabelTensor> {
    let (w, h, start) = parse_header(buf, b"P5")?;
    let px = payload(buf, start, w * h)?;
    LabelTensor::new(&[h, w], px.iter().map(|&b| b as usize).collect())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    write(path.as_ref(), &encode_ppm(img)?)
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_ppm(&read(path.as_ref())?)
}

pub fn write_pgm(path: impl AsRef<Path>, mask: &LabelTensor) -> Result<()> {
    write(path.as_ref(), &encode_pgm(mask)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelTensor> {
    decode_pgm(&read(path.as_ref())?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_pixel_bytes() {
        let bytes = encode_ppm(&Tensor::zeros(&[3, 1, 1])).unwrap();
        assert_eq!(bytes, b"P6\n1 1\n255\n\0\0\0");
        assert_eq!(bytes.len(), 14);
    }

    #[test]
    fn half_up_rounding() {
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5 / 255.0), 1);
        assert_eq!(quantize(0.49 / 255.0), 0);
    }

    #[test]
    fn rgb_round_trip() {
        let img = Tensor::from_fn(&[3, 5, 7], |i| (i as f64 * 0.37).fract());
        let back = decode_ppm(&encode_ppm(&img).unwrap()).unwrap();
        assert_eq!(back.shape(), img.shape());
        assert!(img.max_abs_diff(&back) <= 1.0 / 510.0);
    }

    #[test]
    fn label_round_trip() {
        let m = LabelTensor::new(&[2, 3], vec![0, 1, 2, 3, 255, 7]).unwrap();
        assert_eq!(decode_pgm(&encode_pgm(&m).unwrap()).unwrap(), m);
        let zeros = encode_pgm(&LabelTensor::filled(&[4, 4], 0)).unwrap();
        assert!(zeros[b"P5\n4 4\n255\n".len()..].iter().all(|&b| b == 0));
        let big = LabelTensor::new(&[1, 1], vec![256]).unwrap();
        assert!(matches!(encode_pgm(&big), Err(Error::Data(_))));
    }

    #[test]
    fn out_of_range_pixels() {
        assert!(encode_ppm(&Tensor::full(&[3, 1, 1], 1.5)).is_err());
        assert!(encode_ppm(&Tensor::zeros(&[1, 2, 2])).is_err());
    }

    fn offset(e: Error) -> u64 {
        match e {
            Error::Format { offset, .. } => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn malformed_headers() {
        assert_eq!(offset(decode_ppm(b"P5\n1 1\n255\n\0").unwrap_err()), 0);
        assert_eq!(offset(decode_ppm(b"P6\nx 1\n255\n").unwrap_err()), 3);
        assert_eq!(offset(decode_ppm(b"P6\n1 1\n65535\n").unwrap_err()), 7);
        assert_eq!(offset(decode_ppm(b"P6\n2 1\n255\n\0\0\0").unwrap_err()), 14);
        assert_eq!(offset(decode_pgm(b"P6\n1 1\n255\n\0").unwrap_err()), 0);
        assert!(decode_ppm(b"").is_err());
    }

    #[test]
    fn comments_are_skipped() {
        let img = decode_ppm(b"P6 # made by hand\n1 1\n255\n\xff\0\x80").unwrap();
        assert_eq!(img.data(), &[1.0, 0.0, 128.0 / 255.0]);
    }
}
