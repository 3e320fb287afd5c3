//! On-disk formats.
//!
//! * Raw matrix: 16-byte magic `SWPDMOD-RAW\0\0\0\0\0`, then little-endian
//!   `u32` width, height and column count, then `width*height*columns`
//!   little-endian `f64` values in column-major order.
//! * PGM: binary `P5`, maxval 65535, big-endian samples.
//! * Frame stack directory: `meta.txt` (key=value), `frames.raw`, and one
//!   `frame_NNNN.pgm` per frame scaled affinely from `[min, max]` to
//!   `[0, 65535]`. A constant frame stores `scale_j=0` and all-zero pixels.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;

use crate::config::ConfigEntries;
use crate::error::{Error, Result};
use crate::types::FrameStack;

pub const RAW_MAGIC: &[u8; 16] = b"SWPDMOD-RAW\0\0\0\0\0";
pub const PGM_MAXVAL: u16 = 65535;

pub const META_FILE: &str = "meta.txt";
pub const RAW_FILE: &str = "frames.raw";

pub fn frame_pgm_name(j: usize) -> String {
    format!("frame_{j:04}.pgm")
}

/// Write `bytes` to `path` through a temporary sibling and a rename, so a
/// reader never observes a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::format("path", format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if let Err(e) = result {
        let _ = fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(())
}

pub fn encode_raw_matrix(width: usize, height: usize, m: &DMatrix<f64>) -> Result<Vec<u8>> {
    if m.nrows() != width * height {
        return Err(Error::Contract(format!(
            "matrix has {} rows, grid {width}x{height} needs {}",
            m.nrows(),
            width * height
        )));
    }
    let dims = [width, height, m.ncols()]
        .iter()
        .map(|&d| u32::try_from(d).map_err(|_| Error::format("dims", "dimension exceeds u32")))
        .collect::<Result<Vec<u32>>>()?;
    let mut out = Vec::with_capacity(16 + 12 + 8 * m.len());
    out.extend_from_slice(RAW_MAGIC);
    for d in dims {
        out.extend_from_slice(&d.to_le_bytes());
    }
    // nalgebra storage is column-major already.
    for v in m.as_slice() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_raw_matrix(bytes: &[u8], field: &str) -> Result<(usize, usize, DMatrix<f64>)> {
    if bytes.len() < 28 || &bytes[..16] != RAW_MAGIC {
        return Err(Error::format(field, "missing raw matrix magic header"));
    }
    let word =
        |k: usize| u32::from_le_bytes(bytes[16 + 4 * k..20 + 4 * k].try_into().unwrap()) as usize;
    let (width, height, cols) = (word(0), word(1), word(2));
    let count = width
        .checked_mul(height)
        .and_then(|p| p.checked_mul(cols))
        .ok_or_else(|| Error::format(field, "header dimensions overflow"))?;
    let payload = &bytes[28..];
    if payload.len() != count * 8 {
        return Err(Error::format(
            field,
            format!(
                "payload holds {} bytes, header {width}x{height}x{cols} needs {}",
                payload.len(),
                count * 8
            ),
        ));
    }
    let values: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        width,
        height,
        DMatrix::from_vec(width * height, cols, values),
    ))
}

pub fn write_raw_matrix(path: &Path, width: usize, height: usize, m: &DMatrix<f64>) -> Result<()> {
    write_atomic(path, &encode_raw_matrix(width, height, m)?)
}

pub fn read_raw_matrix(path: &Path) -> Result<(usize, usize, DMatrix<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw_matrix(&bytes, &path.display().to_string())
}

/// Affine map of `values` onto `[0, 65535]`. Returns `(pixels, scale, offset)`
/// with `pixel = round((v - offset) * scale)`; `scale = 0` flags a constant
/// input.
pub fn pgm_scale(values: &[f64]) -> (Vec<u16>, f64, f64) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(max > min) {
        return (
            vec![0; values.len()],
            0.0,
            if min.is_finite() { min } else { 0.0 },
        );
    }
    let scale = f64::from(PGM_MAXVAL) / (max - min);
    (quantize(values, scale, min), scale, min)
}

/// `round((v - offset) * scale)` clamped to the PGM range.
pub fn quantize(values: &[f64], scale: f64, offset: f64) -> Vec<u16> {
    values
        .iter()
        .map(|&v| {
            ((v - offset) * scale)
                .round()
                .clamp(0.0, f64::from(PGM_MAXVAL)) as u16
        })
        .collect()
}

pub fn encode_pgm(width: usize, height: usize, pixels: &[u16]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n{PGM_MAXVAL}\n").into_bytes();
    out.reserve(2 * pixels.len());
    for p in pixels {
        out.extend_from_slice(&p.to_be_bytes());
    }
    out
}

pub fn decode_pgm(bytes: &[u8], field: &str) -> Result<(usize, usize, Vec<u16>)> {
    let mut pos = 0;
    let mut tokens = Vec::with_capacity(4);
    while tokens.len() < 4 {
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
            return Err(Error::format(field, "truncated PGM header"));
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // exactly one whitespace byte separates the header from the samples
    pos += 1;
    if tokens[0] != "P5" {
        return Err(Error::format(
            field,
            format!("expected P5 magic, found {}", tokens[0]),
        ));
    }
    let parse = |t: &str, what: &str| {
        t.parse::<usize>()
            .map_err(|_| Error::format(field, format!("bad PGM {what} `{t}`")))
    };
    let width = parse(&tokens[1], "width")?;
    let height = parse(&tokens[2], "height")?;
    let maxval = parse(&tokens[3], "maxval")?;
    if maxval != usize::from(PGM_MAXVAL) {
        return Err(Error::format(
            field,
            format!("expected maxval 65535, found {maxval}"),
        ));
    }
    let payload = bytes.get(pos..).unwrap_or(&[]);
    if payload.len() != 2 * width * height {
        return Err(Error::format(
            field,
            format!(
                "PGM payload has {} bytes, expected {}",
                payload.len(),
                2 * width * height
            ),
        ));
    }
    let pixels = payload
        .chunks_exact(2)
        .map(|c| u16::from_be_bytes([c[0], c[1]]))
        .collect();
    Ok((width, height, pixels))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<(f64, f64)> {
    let (pixels, scale, offset) = pgm_scale(values);
    write_atomic(path, &encode_pgm(width, height, &pixels))?;
    Ok((scale, offset))
}

fn join_f64(values: &[f64]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

pub fn write_frame_stack(stack: &FrameStack, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (w, h) = (stack.width, stack.height);
    let mut meta = format!(
        "width={w}\nheight={h}\nM={}\npixel_pitch_x={}\npixel_pitch_y={}\nsample_times={}\n",
        stack.num_frames(),
        stack.pixel_pitch_x,
        stack.pixel_pitch_y,
        stack.sample_times().map(join_f64).unwrap_or_default(),
    );
    for j in 0..stack.num_frames() {
        let values: Vec<f64> = stack.frame(j).iter().copied().collect();
        let (scale, offset) = write_pgm(&dir.join(frame_pgm_name(j)), w, h, &values)?;
        meta.push_str(&format!("scale_{j}={scale}\noffset_{j}={offset}\n"));
    }
    write_raw_matrix(&dir.join(RAW_FILE), w, h, stack.frames())?;
    write_atomic(&dir.join(META_FILE), meta.as_bytes())
}

pub fn read_frame_stack(dir: &Path) -> Result<FrameStack> {
    let meta = ConfigEntries::from_path(&dir.join(META_FILE))?;
    let fmt_err = |field: &str, e: Error| Error::format(field, e.to_string());
    let width: usize = meta.require("width").map_err(|e| fmt_err("width", e))?;
    let height: usize = meta.require("height").map_err(|e| fmt_err("height", e))?;
    let m: usize = meta.require("M").map_err(|e| fmt_err("M", e))?;
    let pitch_x = meta
        .get_f64("pixel_pitch_x")
        .map_err(|e| fmt_err("pixel_pitch_x", e))?
        .unwrap_or(crate::types::DEFAULT_PIXEL_PITCH);
    let pitch_y = meta
        .get_f64("pixel_pitch_y")
        .map_err(|e| fmt_err("pixel_pitch_y", e))?
        .unwrap_or(crate::types::DEFAULT_PIXEL_PITCH);
    let times: Option<Vec<f64>> = meta
        .get_list("sample_times")
        .map_err(|e| fmt_err("sample_times", e))?;

    let (rw, rh, frames) = read_raw_matrix(&dir.join(RAW_FILE))?;
    if rw != width {
        return Err(Error::format(
            "width",
            format!("metadata {width}, raw payload {rw}"),
        ));
    }
    if rh != height {
        return Err(Error::format(
            "height",
            format!("metadata {height}, raw payload {rh}"),
        ));
    }
    if frames.ncols() != m {
        return Err(Error::format(
            "M",
            format!("metadata {m}, raw payload {}", frames.ncols()),
        ));
    }

    let pgm_count = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter(|e| {
            let name = e.file_name();
            let name = name.to_string_lossy();
            name.starts_with("frame_") && name.ends_with(".pgm")
        })
        .count();
    if pgm_count != m {
        return Err(Error::format(
            "M",
            format!("metadata {m}, {pgm_count} PGM frames present"),
        ));
    }
    for j in 0..m {
        let path = dir.join(frame_pgm_name(j));
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (pw, ph, _) = decode_pgm(&bytes, &path.display().to_string())?;
        if pw != width {
            return Err(Error::format(
                "width",
                format!("metadata {width}, {} has {pw}", path.display()),
            ));
        }
        if ph != height {
            return Err(Error::format(
                "height",
                format!("metadata {height}, {} has {ph}", path.display()),
            ));
        }
    }
    FrameStack::with_pitch(width, height, pitch_x, pitch_y, frames, times)
        .map_err(|e| Error::format("frames", e.to_string()))
}
