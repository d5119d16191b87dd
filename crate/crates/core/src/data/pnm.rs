//! Binary PGM (P5) and PPM (P6) images. Model-space values in `[-1, 1]` map
//! to bytes by `round((v + 1) * 127.5)`.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Quantises one value, reporting whether it had to be clipped.
pub fn to_byte(v: f64) -> (u8, bool) {
    let clipped = !(-1.0..=1.0).contains(&v);
    let b = ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round();
    (b as u8, clipped)
}

pub fn from_byte(b: u8) -> f64 {
    f64::from(b) / 127.5 - 1.0
}

/// `[H, W]`, `[1, H, W]` or `[3, H, W]` as `(channels, h, w)`.
fn image_dims(img: &Tensor) -> Result<(usize, usize, usize)> {
    match img.shape() {
        [h, w] => Ok((1, *h, *w)),
        [c @ (1 | 3), h, w] => Ok((*c, *h, *w)),
        s => Err(Error::invalid(format!(
            "image must be [H,W], [1,H,W] or [3,H,W], got {s:?}"
        ))),
    }
}

/// Encodes as P5 (one channel) or P6 (three channels). Returns the bytes and
/// the number of values that were outside `[-1, 1]`.
pub fn encode_image(img: &Tensor) -> Result<(Vec<u8>, usize)> {
    let (c, h, w) = image_dims(img)?;
    let magic = if c == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let mut clipped = 0;
    for p in 0..plane {
        for ch in 0..c {
            let (b, clip) = to_byte(img.data()[ch * plane + p]);
            clipped += usize::from(clip);
            out.push(b);
        }
    }
    Ok((out, clipped))
}

/// Encodes packed RGB bytes (`h * w * 3`) as P6.
pub fn encode_rgb(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    if rgb.len() != w * h * 3 {
        return Err(Error::invalid(format!(
            "rgb: {w}x{h} needs {} bytes, got {}",
            w * h * 3,
            rgb.len()
        )));
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

fn header_token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else {
            break;
        }
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::format("pnm: truncated header"));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

/// Decodes P5/P6 back to model space as `[C, H, W]`.
pub fn decode_image(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let c = match header_token(bytes, &mut pos)?.as_str() {
        "P5" => 1,
        "P6" => 3,
        m => return Err(Error::format(format!("pnm: unsupported magic {m:?}"))),
    };
    let mut num = || -> Result<usize> {
        header_token(bytes, &mut pos)?
            .parse()
            .map_err(|_| Error::format("pnm: bad header number"))
    };
    let (w, h, max) = (num()?, num()?, num()?);
    if max != 255 {
        return Err(Error::format(format!("pnm: max value {max} unsupported")));
    }
    pos += 1;
    let plane = w * h;
    let body = bytes.get(pos..).unwrap_or(&[]);
    if body.len() != plane * c {
        return Err(Error::format(format!(
            "pnm: expected {} payload bytes, got {}",
            plane * c,
            body.len()
        )));
    }
    let mut data = vec![0.0; plane * c];
    for p in 0..plane {
        for ch in 0..c {
            data[ch * plane + p] = from_byte(body[p * c + ch]);
        }
    }
    Ok(Tensor::new(vec![c, h, w], data)?)
}

/// Writes an image, logging a notice when values were clipped.
pub fn write_image(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    let (bytes, clipped) = encode_image(img)?;
    if clipped > 0 {
        log::warn!(
            "{}: clipped {clipped} values outside [-1, 1]",
            path.as_ref().display()
        );
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Grayscale writer; accepts `[H, W]` or `[1, H, W]`.
pub fn write_pgm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    match image_dims(img)? {
        (1, _, _) => write_image(path, img),
        _ => Err(Error::invalid("write_pgm needs a single-channel image")),
    }
}

/// Colour writer; needs `[3, H, W]`.
pub fn write_ppm(path: impl AsRef<Path>, img: &Tensor) -> Result<()> {
    match image_dims(img)? {
        (3, _, _) => write_image(path, img),
        _ => Err(Error::invalid("write_ppm needs a three-channel image")),
    }
}

/// Tiles equally shaped `[C, H, W]` images row-major into `cols` columns,
/// with a one-pixel black (-1) gutter. Unused cells stay black.
pub fn tile_grid(images: &[Tensor], cols: usize) -> Result<Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("tile_grid: no images"))?;
    if cols == 0 {
        return Err(Error::invalid("tile_grid: cols must be positive"));
    }
    let (c, h, w) = image_dims(first)?;
    let rows = images.len().div_ceil(cols);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut grid = Tensor::full(&[c, gh, gw], -1.0);
    for (n, img) in images.iter().enumerate() {
        if image_dims(img)? != (c, h, w) {
            return Err(Error::invalid(format!(
                "tile_grid: image {n} has shape {:?}, expected {:?}",
                img.shape(),
                first.shape()
            )));
        }
        let (r0, c0) = ((n / cols) * (h + 1), (n % cols) * (w + 1));
        for ch in 0..c {
            for i in 0..h {
                let src = &img.data()[(ch * h + i) * w..(ch * h + i + 1) * w];
                let off = (ch * gh + r0 + i) * gw + c0;
                grid.data_mut()[off..off + w].copy_from_slice(src);
            }
        }
    }
    Ok(grid)
}
