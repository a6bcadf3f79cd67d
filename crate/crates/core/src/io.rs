//! Netpbm/PFM image files and synthetic fixture directories.
//!
//! * RGB: 8-bit binary PPM (`P6`), values mapped from `[0, 1]`;
//! * raw thermal: 16-bit big-endian PGM (`P5`, maxval 16383);
//! * depth and flow: PFM (`Pf` / `PF`), little-endian `f32`, rows stored
//!   bottom-to-top.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::frame::{MultiSpectralPair, Rig};
use crate::image::{DepthMap, ImageGrid};
use crate::se3::RigidPose;
use crate::thermal::{RawThermalImage, RAW_MAX};
use crate::warp::FlowField;

fn format_err(format: &'static str, reason: impl Into<String>) -> Error {
    Error::Format { format, reason: reason.into() }
}

/// Splits a Netpbm-style header into `count` tokens (skipping `#` comments)
/// and returns them with the offset of the first data byte.
fn header_tokens(bytes: &[u8], count: usize, format: &'static str) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        match bytes.get(i) {
            None => return Err(format_err(format, "truncated header")),
            Some(b'#') => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            Some(c) if c.is_ascii_whitespace() => i += 1,
            Some(_) => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    if i >= bytes.len() {
        return Err(format_err(format, "missing pixel data"));
    }
    Ok((tokens, i + 1))
}

fn parse<T: std::str::FromStr>(token: &str, what: &str, format: &'static str) -> Result<T> {
    token.parse().map_err(|_| format_err(format, format!("bad {what} `{token}`")))
}

fn dims(tokens: &[String], format: &'static str) -> Result<(usize, usize)> {
    let w: usize = parse(&tokens[1], "width", format)?;
    let h: usize = parse(&tokens[2], "height", format)?;
    if w == 0 || h == 0 {
        return Err(format_err(format, "empty image"));
    }
    Ok((w, h))
}

fn data_slice<'a>(bytes: &'a [u8], start: usize, len: usize, format: &'static str) -> Result<&'a [u8]> {
    bytes
        .get(start..start + len)
        .ok_or_else(|| format_err(format, format!("expected {len} data bytes, found {}", bytes.len() - start)))
}

/// Encodes a 3-channel image in `[0, 1]` as 8-bit PPM (values are clamped
/// and rounded).
pub fn encode_ppm(img: &ImageGrid) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(format_err("PPM", "image must have 3 channels"));
    }
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend(img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    Ok(out)
}

pub fn decode_ppm(bytes: &[u8]) -> Result<ImageGrid> {
    let (tokens, start) = header_tokens(bytes, 4, "PPM")?;
    if tokens[0] != "P6" {
        return Err(format_err("PPM", format!("unsupported magic `{}`", tokens[0])));
    }
    let (w, h) = dims(&tokens, "PPM")?;
    let maxval: u16 = parse(&tokens[3], "maxval", "PPM")?;
    if maxval == 0 || maxval > 255 {
        return Err(format_err("PPM", "only 8-bit PPM is supported"));
    }
    let data = data_slice(bytes, start, w * h * 3, "PPM")?;
    let scale = f64::from(maxval);
    ImageGrid::from_vec(w, h, 3, data.iter().map(|&b| f64::from(b) / scale).collect())
}

pub fn encode_pgm16(img: &RawThermalImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", img.width(), img.height(), RAW_MAX).into_bytes();
    for v in img.data() {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out
}

pub fn decode_pgm16(bytes: &[u8]) -> Result<RawThermalImage> {
    let (tokens, start) = header_tokens(bytes, 4, "PGM")?;
    if tokens[0] != "P5" {
        return Err(format_err("PGM", format!("unsupported magic `{}`", tokens[0])));
    }
    let (w, h) = dims(&tokens, "PGM")?;
    let maxval: u32 = parse(&tokens[3], "maxval", "PGM")?;
    if !(256..=65535).contains(&maxval) {
        return Err(format_err("PGM", "expected a 16-bit PGM"));
    }
    let data = data_slice(bytes, start, w * h * 2, "PGM")?;
    let counts: Vec<u16> = data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect();
    RawThermalImage::new(w, h, counts)
}

/// Encodes a 1- or 3-channel image as PFM.
pub fn encode_pfm(img: &ImageGrid) -> Result<Vec<u8>> {
    let magic = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(format_err("PFM", format!("cannot store {c} channels"))),
    };
    let (w, ch) = (img.width(), img.channels());
    let mut out = format!("{magic}\n{} {}\n-1.0\n", w, img.height()).into_bytes();
    for y in (0..img.height()).rev() {
        let row = &img.data()[y * w * ch..(y + 1) * w * ch];
        for v in row {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ImageGrid> {
    let (tokens, start) = header_tokens(bytes, 4, "PFM")?;
    let ch = match tokens[0].as_str() {
        "Pf" => 1,
        "PF" => 3,
        m => return Err(format_err("PFM", format!("unsupported magic `{m}`"))),
    };
    let (w, h) = dims(&tokens, "PFM")?;
    let scale: f64 = parse(&tokens[3], "scale", "PFM")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(format_err("PFM", "scale must be nonzero"));
    }
    let little = scale < 0.0;
    let data = data_slice(bytes, start, w * h * ch * 4, "PFM")?;
    let mut values = vec![0.0; w * h * ch];
    for (k, c) in data.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, col) = (k / (w * ch), k % (w * ch));
        values[(h - 1 - row) * w * ch + col] = f64::from(v);
    }
    ImageGrid::from_vec(w, h, ch, values)
}

pub fn encode_flow_pfm(flow: &FlowField) -> Result<Vec<u8>> {
    let (w, h) = (flow.flow.width(), flow.flow.height());
    let packed = ImageGrid::from_fn(w, h, 3, |x, y, c| match c {
        0 | 1 => flow.flow.get(x, y, c),
        _ => flow.mask.get(x, y, 0),
    });
    encode_pfm(&packed)
}

pub fn decode_flow_pfm(bytes: &[u8]) -> Result<FlowField> {
    let img = decode_pfm(bytes)?;
    if img.channels() != 3 {
        return Err(format_err("PFM", "flow files have 3 channels"));
    }
    let (w, h) = (img.width(), img.height());
    Ok(FlowField {
        flow: ImageGrid::from_fn(w, h, 2, |x, y, c| img.get(x, y, c)),
        mask: ImageGrid::from_fn(w, h, 1, |x, y, _| img.get(x, y, 2)),
    })
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

pub fn write_ppm(path: &Path, img: &ImageGrid) -> Result<()> {
    write(path, &encode_ppm(img)?)
}

pub fn read_ppm(path: &Path) -> Result<ImageGrid> {
    decode_ppm(&read(path)?)
}

pub fn write_pgm16(path: &Path, img: &RawThermalImage) -> Result<()> {
    write(path, &encode_pgm16(img))
}

pub fn read_pgm16(path: &Path) -> Result<RawThermalImage> {
    decode_pgm16(&read(path)?)
}

pub fn write_pfm(path: &Path, img: &ImageGrid) -> Result<()> {
    write(path, &encode_pfm(img)?)
}

pub fn read_pfm(path: &Path) -> Result<ImageGrid> {
    decode_pfm(&read(path)?)
}

pub fn write_flow(path: &Path, flow: &FlowField) -> Result<()> {
    write(path, &encode_flow_pfm(flow)?)
}

pub fn read_flow(path: &Path) -> Result<FlowField> {
    decode_flow_pfm(&read(path)?)
}

/// Writes pretty-printed JSON followed by a newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write(path, &bytes)
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&read(path)?)?)
}

/// Path of frame `index` inside a fixture subdirectory.
pub fn frame_path(root: &Path, sub: &str, index: usize, ext: &str) -> PathBuf {
    root.join(sub).join(format!("{index:06}.{ext}"))
}

/// A rendered sequence as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct Fixture {
    pub rig: Rig,
    pub frames: Vec<MultiSpectralPair>,
}

/// Writes `rgb/`, `thermal/`, `depth/` (thermal-camera depth),
/// `depth_rgb/`, `poses.json` (world-from-thermal, row-major 4×4) and
/// `rig.json`.
pub fn write_fixture(root: &Path, rig: &Rig, frames: &[MultiSpectralPair]) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, f) in frames.iter().enumerate() {
        write_ppm(&frame_path(root, "rgb", i, "ppm"), &f.rgb)?;
        write_pgm16(&frame_path(root, "thermal", i, "pgm"), &f.thermal_raw)?;
        write_pfm(&frame_path(root, "depth", i, "pfm"), &f.gt_depth_thermal)?;
        write_pfm(&frame_path(root, "depth_rgb", i, "pfm"), &f.gt_depth_rgb)?;
    }
    let poses: Vec<RigidPose> = frames.iter().map(|f| f.gt_pose).collect();
    write_json(&root.join("poses.json"), &poses)?;
    write_json(&root.join("rig.json"), rig)
}

/// Reads a fixture written by [`write_fixture`]. Frame `i` gets timestamp
/// `i`; a missing `depth_rgb/` map is left as zeros.
pub fn read_fixture(root: &Path) -> Result<Fixture> {
    let rig: Rig = read_json(&root.join("rig.json"))?;
    rig.validate()?;
    let poses: Vec<RigidPose> = read_json(&root.join("poses.json"))?;
    let mut frames = Vec::with_capacity(poses.len());
    for (i, pose) in poses.into_iter().enumerate() {
        let rgb_depth_path = frame_path(root, "depth_rgb", i, "pfm");
        let gt_depth_rgb = if rgb_depth_path.exists() {
            read_pfm(&rgb_depth_path)?
        } else {
            ImageGrid::new(rig.rgb.width, rig.rgb.height, 1)
        };
        let frame = MultiSpectralPair {
            rgb: read_ppm(&frame_path(root, "rgb", i, "ppm"))?,
            thermal_raw: read_pgm16(&frame_path(root, "thermal", i, "pgm"))?,
            gt_depth_thermal: read_pfm(&frame_path(root, "depth", i, "pfm"))?,
            gt_depth_rgb,
            gt_pose: pose,
            timestamp: i as f64,
        };
        frame.check_against(&rig)?;
        frames.push(frame);
    }
    Ok(Fixture { rig, frames })
}

/// Reads every `*.pfm` in `dir`, sorted by file name.
pub fn read_pfm_dir(dir: &Path) -> Result<Vec<(String, DepthMap)>> {
    let mut names: Vec<String> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".pfm"))
        .collect();
    names.sort();
    names
        .into_iter()
        .map(|n| {
            let img = read_pfm(&dir.join(&n))?;
            Ok((n, img))
        })
        .collect()
}
