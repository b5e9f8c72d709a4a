//! AOPT tensor files and binary netpbm images.
//!
//! AOPT layout: `b"AOPT"`, `u8` version (1), `u8` ndim, `ndim × u32` LE dims,
//! then the row-major payload as LE `f32`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const TENSOR_MAGIC: &[u8; 4] = b"AOPT";
pub const TENSOR_VERSION: u8 = 1;

pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> std::io::Result<()> {
    let ndim = u8::try_from(t.ndim()).map_err(|_| {
        std::io::Error::new(std::io::ErrorKind::InvalidInput, "too many dimensions")
    })?;
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[TENSOR_VERSION, ndim])?;
    for &d in t.shape() {
        let d = u32::try_from(d).map_err(|_| {
            std::io::Error::new(std::io::ErrorKind::InvalidInput, "dimension exceeds u32")
        })?;
        w.write_all(&d.to_le_bytes())?;
    }
    let mut buf = Vec::with_capacity(t.numel() * 4);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

fn read_exact_or_truncated<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::format(format!("truncated tensor: {what}")),
        _ => Error::format(format!("reading tensor {what}: {e}")),
    })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic")?;
    if &magic != TENSOR_MAGIC {
        return Err(Error::format(format!("bad tensor magic {magic:?}")));
    }
    let mut head = [0u8; 2];
    read_exact_or_truncated(r, &mut head, "header")?;
    if head[0] != TENSOR_VERSION {
        return Err(Error::format(format!(
            "unsupported tensor version {}",
            head[0]
        )));
    }
    let ndim = head[1] as usize;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut d = [0u8; 4];
        read_exact_or_truncated(r, &mut d, "dims")?;
        shape.push(u32::from_le_bytes(d) as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::format("tensor dims overflow"))?;
    let bytes = numel
        .checked_mul(4)
        .ok_or_else(|| Error::format("tensor payload overflow"))?;
    let mut payload = vec![0u8; bytes];
    read_exact_or_truncated(r, &mut payload, "payload")?;
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Tensor::from_vec(&shape, data)
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_tensor(&mut w, t)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(f);
    let t = read_tensor(&mut r).map_err(|e| match e {
        Error::Format(msg) => Error::format(format!("{}: {msg}", path.display())),
        other => other,
    })?;
    let mut rest = [0u8; 1];
    match r.read(&mut rest) {
        Ok(0) => Ok(t),
        Ok(_) => Err(Error::format(format!(
            "{}: trailing bytes after tensor payload",
            path.display()
        ))),
        Err(e) => Err(Error::io(path, e)),
    }
}

// ---------------------------------------------------------------------------
// Netpbm
// ---------------------------------------------------------------------------

fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P5 greyscale image of a 2-D map, `[0, 1]` scaled to `[0, 255]`.
pub fn write_pgm<W: Write>(w: &mut W, map: &Tensor) -> Result<()> {
    map.expect_ndim(2, "write_pgm")?;
    let (h, w_) = map.hw();
    let mut buf = format!("P5\n{w_} {h}\n255\n").into_bytes();
    buf.extend(map.data().iter().map(|&v| to_byte(v)));
    w.write_all(&buf).map_err(|e| Error::format(format!("writing PGM: {e}")))
}

/// Binary P6 colour image of a `[3, H, W]` tensor in `[0, 1]`.
pub fn write_ppm<W: Write>(w: &mut W, image: &Tensor) -> Result<()> {
    image.expect_ndim(3, "write_ppm")?;
    if image.shape()[0] != 3 {
        return Err(Error::dim("write_ppm: expected 3 channels"));
    }
    let (h, w_) = image.hw();
    let plane = h * w_;
    let d = image.data();
    let mut buf = format!("P6\n{w_} {h}\n255\n").into_bytes();
    for p in 0..plane {
        buf.extend_from_slice(&[to_byte(d[p]), to_byte(d[plane + p]), to_byte(d[2 * plane + p])]);
    }
    w.write_all(&buf).map_err(|e| Error::format(format!("writing PPM: {e}")))
}

fn next_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("truncated netpbm header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Reads a binary P5 or P6 file (maxval ≤ 255) into a `[C, H, W]` tensor in
/// `[0, 1]`, with C = 1 or 3.
pub fn read_netpbm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::format(format!("unsupported netpbm type {other}"))),
    };
    let parse = |s: String| {
        s.parse::<usize>()
            .map_err(|_| Error::format(format!("bad netpbm header field {s:?}")))
    };
    let w = parse(next_token(bytes, &mut pos)?)?;
    let h = parse(next_token(bytes, &mut pos)?)?;
    let maxval = parse(next_token(bytes, &mut pos)?)?;
    if maxval == 0 || maxval > 255 {
        return Err(Error::format(format!("unsupported maxval {maxval}")));
    }
    pos += 1;
    let need = w * h * channels;
    let pixels = bytes
        .get(pos..pos + need)
        .ok_or_else(|| Error::format("truncated netpbm payload"))?;
    let plane = w * h;
    let mut data = vec![0.0f32; need];
    for p in 0..plane {
        for c in 0..channels {
            data[c * plane + p] = pixels[p * channels + c] as f32 / maxval as f32;
        }
    }
    Tensor::from_vec(&[channels, h, w], data)
}

pub fn save_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_pgm(&mut buf, map)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn save_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let mut buf = Vec::new();
    write_ppm(&mut buf, image)?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Loads an image from a PPM/PGM file or an AOPT tensor, returned as
/// `[C, H, W]`.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TENSOR_MAGIC) {
        let t = read_tensor(&mut bytes.as_slice())?;
        return match t.ndim() {
            3 => Ok(t),
            2 => {
                let (h, w) = t.hw();
                t.reshape(&[1, h, w])
            }
            _ => Err(Error::format(format!(
                "{}: image tensor must be 2-d or 3-d",
                path.display()
            ))),
        };
    }
    read_netpbm(&bytes)
}
