//! Raster ingestion: binary PGM (P5, 8-bit) and single-frame IMGX files.

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::grid::GridSpec;
use super::image::Transmittance;
use crate::error::{Error, Result};
use crate::imgx::{self, ImgxData};

/// Reads a raster as transmittance on `grid`. No resampling is done: the file
/// must already be `side × side`.
///
/// PGM samples are divided by the header maxval. IMGX `f32le` values are taken
/// as transmittance and must lie in [0, 1]; `u32le` counts are divided by the
/// largest count.
pub fn load_raster(path: impl AsRef<Path>, grid: &GridSpec) -> Result<Transmittance> {
    let path = path.as_ref();
    let bytes =
        fs::read(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let image = if bytes.starts_with(b"P5") {
        parse_pgm(&bytes)?
    } else if bytes.first() == Some(&b'{') {
        let file = imgx::decode(&bytes)?;
        if file.header.frames != 1 {
            return Err(Error::Format(format!(
                "raster IMGX must hold one frame, found {}",
                file.header.frames
            )));
        }
        let (h, w) = (file.header.height, file.header.width);
        let values: Vec<f64> = match file.data {
            ImgxData::F32(v) => {
                if v.iter().any(|x| !(0.0..=1.0).contains(x)) {
                    return Err(Error::Format("f32 raster values must lie in [0, 1]".into()));
                }
                v.into_iter().map(f64::from).collect()
            }
            ImgxData::U32(v) => {
                let max = v.iter().copied().max().unwrap_or(0).max(1) as f64;
                v.into_iter().map(|x| x as f64 / max).collect()
            }
        };
        Array2::from_shape_vec((h, w), values).map_err(|e| Error::Format(e.to_string()))?
    } else {
        return Err(Error::Format(format!("{}: neither PGM (P5) nor IMGX", path.display())));
    };
    if image.dim() != grid.shape() {
        return Err(Error::dims(
            format!("{0}x{0}", grid.side()),
            format!("{}x{}", image.nrows(), image.ncols()),
        ));
    }
    Ok(Transmittance(image))
}

fn parse_pgm(bytes: &[u8]) -> Result<Array2<f64>> {
    // header: magic, width, height, maxval separated by whitespace; '#' comments allowed
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PGM header".into()));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).unwrap_or("").to_owned());
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>().map_err(|_| Error::Format(format!("bad PGM header field {s:?}")))
    };
    let (width, height, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("only 8-bit PGM is supported (maxval {maxval})")));
    }
    let raster = bytes.get(pos..).unwrap_or_default();
    if raster.len() != width * height {
        return Err(Error::Format(format!(
            "PGM raster holds {} bytes, expected {}",
            raster.len(),
            width * height
        )));
    }
    let scale = 1.0 / maxval as f64;
    Array2::from_shape_vec((height, width), raster.iter().map(|&b| b as f64 * scale).collect())
        .map_err(|e| Error::Format(e.to_string()))
}

/// Writes an 8-bit binary PGM, quantising transmittance to `round(255 T)`.
pub fn write_pgm(path: impl AsRef<Path>, image: &Transmittance) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = image.0.dim();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(image.0.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Writes a single-frame `f32le` IMGX raster.
pub fn write_raster(path: impl AsRef<Path>, image: &Transmittance) -> Result<()> {
    let (h, w) = image.0.dim();
    let data: Vec<f32> = image.0.iter().map(|&v| v as f32).collect();
    imgx::write_f32(path, h, w, 1, &data)
}
