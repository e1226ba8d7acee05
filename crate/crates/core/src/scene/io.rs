//! Middlebury `.flo`, PFM and binary PPM readers/writers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::tensor::{FlowField, ImageGrid};

const FLO_MAGIC: &[u8; 4] = b"PIEH";
/// Largest width or height accepted from a file header.
const MAX_DIM: usize = 1 << 15;

fn check_dims(w: i64, h: i64) -> Result<(usize, usize)> {
    ensure(
        w > 0 && h > 0 && (w as usize) <= MAX_DIM && (h as usize) <= MAX_DIM,
        || Error::Format(format!("bad dimensions {w}x{h}")),
    )?;
    Ok((w as usize, h as usize))
}

pub fn encode_flo(flow: &FlowField) -> Result<Vec<u8>> {
    ensure(flow.is_finite(), || {
        Error::NonFinite("flow written to .flo".into())
    })?;
    let (w, h) = (flow.width(), flow.height());
    let mut out = Vec::with_capacity(12 + 8 * w * h);
    out.extend_from_slice(FLO_MAGIC);
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for v in flow.as_grid().data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField> {
    ensure(bytes.len() >= 12, || {
        Error::Format("truncated .flo header".into())
    })?;
    ensure(&bytes[..4] == FLO_MAGIC, || {
        Error::Format("bad .flo magic".into())
    })?;
    let w = i32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    let h = i32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let (w, h) = check_dims(w as i64, h as i64)?;
    let need = 12 + 8 * w * h;
    ensure(bytes.len() >= need, || {
        Error::Format(format!(
            "truncated .flo payload: {} of {need} bytes",
            bytes.len()
        ))
    })?;
    let data = bytes[12..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    FlowField::from_grid(ImageGrid::from_vec(h, w, 2, data)?)
}

pub fn write_flo(path: impl AsRef<Path>, flow: &FlowField) -> Result<()> {
    fs::write(path, encode_flo(flow)?)?;
    Ok(())
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField> {
    decode_flo(&fs::read(path)?)
}

/// Splits off `n` whitespace-separated header tokens (skipping `#`
/// comments); returns them and the offset just past the single whitespace
/// byte that ends the last token.
fn header_tokens(bytes: &[u8], n: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        ensure(i > start, || Error::Format("truncated header".into()))?;
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    ensure(i < bytes.len(), || {
        Error::Format("header without payload".into())
    })?;
    Ok((tokens, i + 1))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.parse()
        .map_err(|_| Error::Format(format!("bad {what} `{s}`")))
}

/// PFM, written little-endian (negative scale) with rows bottom-up.
pub fn encode_pfm(img: &ImageGrid) -> Result<Vec<u8>> {
    let c = img.channels();
    ensure(c == 1 || c == 3, || {
        Error::InvalidArgument(format!("PFM holds 1 or 3 channels, got {c}"))
    })?;
    let tag = if c == 3 { "PF" } else { "Pf" };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    for y in (0..img.height()).rev() {
        for x in 0..img.width() {
            for ch in 0..c {
                out.extend_from_slice(&(img.get(x, y, ch) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

/// Decodes one PFM image; returns it and the number of bytes consumed.
pub fn decode_pfm_prefix(bytes: &[u8]) -> Result<(ImageGrid, usize)> {
    let (tok, start) = header_tokens(bytes, 4)?;
    let channels = match tok[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::Format(format!("bad PFM tag `{other}`"))),
    };
    let w: i64 = parse_num(&tok[1], "PFM width")?;
    let h: i64 = parse_num(&tok[2], "PFM height")?;
    let (w, h) = check_dims(w, h)?;
    let scale: f64 = parse_num(&tok[3], "PFM scale")?;
    ensure(scale != 0.0 && scale.is_finite(), || {
        Error::Format("PFM scale is zero".into())
    })?;
    let little = scale < 0.0;
    let need = w * h * channels * 4;
    ensure(bytes.len() >= start + need, || {
        Error::Format("truncated PFM payload".into())
    })?;
    let mut img = ImageGrid::zeros(h, w, channels);
    let mut chunks = bytes[start..start + need].chunks_exact(4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..channels {
                let b: [u8; 4] = chunks
                    .next()
                    .expect("length checked")
                    .try_into()
                    .expect("4 bytes");
                let v = if little {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                img.set(x, y, ch, v as f64);
            }
        }
    }
    Ok((img, start + need))
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageGrid> {
    decode_pfm_prefix(bytes).map(|(img, _)| img)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    fs::write(path, encode_pfm(img)?)?;
    Ok(())
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    decode_pfm(&fs::read(path)?)
}

/// A multi-channel grid as concatenated single-channel PFM images, one
/// per channel (used for cost-volume dumps).
pub fn write_pfm_stack(path: impl AsRef<Path>, grid: &ImageGrid) -> Result<()> {
    let mut f = fs::File::create(path)?;
    for c in 0..grid.channels() {
        f.write_all(&encode_pfm(&grid.channel(c))?)?;
    }
    Ok(())
}

pub fn read_pfm_stack(path: impl AsRef<Path>) -> Result<ImageGrid> {
    let bytes = fs::read(path)?;
    let mut layers = Vec::new();
    let mut off = 0;
    while off < bytes.len() && bytes[off..].iter().any(|b| !b.is_ascii_whitespace()) {
        let (img, used) = decode_pfm_prefix(&bytes[off..])?;
        ensure(img.channels() == 1, || {
            Error::Format("stack layers must be Pf".into())
        })?;
        if let Some(first) = layers.first() {
            ensure(img.same_extent(first), || {
                Error::Format("stack layers differ in extent".into())
            })?;
        }
        layers.push(img);
        off += used;
    }
    ensure(!layers.is_empty(), || {
        Error::Format("empty PFM stack".into())
    })?;
    let (h, w) = (layers[0].height(), layers[0].width());
    Ok(ImageGrid::from_fn(h, w, layers.len(), |x, y, c| {
        layers[c].get(x, y, 0)
    }))
}

#[inline]
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 with maxval 255. One-channel grids are replicated to grey.
pub fn encode_ppm(img: &ImageGrid, comment: Option<&str>) -> Result<Vec<u8>> {
    let c = img.channels();
    ensure(c == 1 || c == 3, || {
        Error::InvalidArgument(format!("PPM holds 1 or 3 channels, got {c}"))
    })?;
    let mut out = b"P6\n".to_vec();
    if let Some(text) = comment {
        for line in text.lines() {
            out.extend_from_slice(format!("# {line}\n").as_bytes());
        }
    }
    out.extend_from_slice(format!("{} {}\n255\n", img.width(), img.height()).as_bytes());
    for y in 0..img.height() {
        for x in 0..img.width() {
            for ch in 0..3 {
                out.push(quantize(img.get(x, y, if c == 3 { ch } else { 0 })));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageGrid> {
    let (tok, start) = header_tokens(bytes, 4)?;
    ensure(tok[0] == "P6", || {
        Error::Format(format!("bad PPM magic `{}`", tok[0]))
    })?;
    let w: i64 = parse_num(&tok[1], "PPM width")?;
    let h: i64 = parse_num(&tok[2], "PPM height")?;
    let (w, h) = check_dims(w, h)?;
    let maxval: u32 = parse_num(&tok[3], "PPM maxval")?;
    ensure(maxval == 255, || {
        Error::Format(format!("unsupported maxval {maxval}"))
    })?;
    let need = w * h * 3;
    ensure(bytes.len() >= start + need, || {
        Error::Format("truncated PPM payload".into())
    })?;
    let data = bytes[start..start + need]
        .iter()
        .map(|&b| b as f64 / 255.0)
        .collect();
    ImageGrid::from_vec(h, w, 3, data)
}

pub fn write_ppm(path: impl AsRef<Path>, img: &ImageGrid) -> Result<()> {
    fs::write(path, encode_ppm(img, None)?)?;
    Ok(())
}

pub fn write_ppm_with_comment(
    path: impl AsRef<Path>,
    img: &ImageGrid,
    comment: &str,
) -> Result<()> {
    fs::write(path, encode_ppm(img, Some(comment))?)?;
    Ok(())
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<ImageGrid> {
    decode_ppm(&fs::read(path)?)
}
