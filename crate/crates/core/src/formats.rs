//! File formats for flow fields, grayscale frames, flow visualizations and
//! scene directories.
//!
//! A scene directory holds `events.evt` (EVT1), `image_before.pgm`,
//! `image_after.pgm` (16-bit binary graymaps) and, optionally, `flow.flo`
//! (FLO1 ground truth). A dataset directory is either one scene directory or
//! a directory of scene subdirectories, loaded in name order.

use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::events::{read_events, write_events, EventStream, SynthScene};
use crate::flow::FlowField;
use crate::tensor::{Scalar, Tensor};
use crate::train::{Dataset, Sample};

const FLO_MAGIC: [u8; 4] = *b"FLO1";
const FLO_HEADER: usize = 8;

pub const EVENTS_FILE: &str = "events.evt";
pub const IMAGE_BEFORE_FILE: &str = "image_before.pgm";
pub const IMAGE_AFTER_FILE: &str = "image_after.pgm";
pub const FLOW_FILE: &str = "flow.flo";

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// "FLO1", width u16, height u16, then row-major `(u, v)` f32 pairs, all
/// little-endian.
pub fn encode_flo(flow: &FlowField<f32>) -> Result<Vec<u8>> {
    let (h, w) = (flow.height(), flow.width());
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::Format(format!("flow {h}x{w} too large for FLO1")));
    }
    let mut out = Vec::with_capacity(FLO_HEADER + 8 * h * w);
    out.extend_from_slice(&FLO_MAGIC);
    out.extend_from_slice(&(w as u16).to_le_bytes());
    out.extend_from_slice(&(h as u16).to_le_bytes());
    for (u, v) in flow.u().iter().zip(flow.v()) {
        out.extend_from_slice(&u.to_le_bytes());
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_flo(buf: &[u8]) -> Result<FlowField<f32>> {
    if buf.len() < FLO_HEADER {
        return Err(Error::Truncated {
            what: "FLO1 header",
            needed: FLO_HEADER,
            available: buf.len(),
        });
    }
    let magic: [u8; 4] = buf[..4].try_into().unwrap();
    if magic != FLO_MAGIC {
        return Err(Error::BadMagic {
            expected: FLO_MAGIC,
            found: magic,
        });
    }
    let w = u16::from_le_bytes([buf[4], buf[5]]) as usize;
    let h = u16::from_le_bytes([buf[6], buf[7]]) as usize;
    let body = &buf[FLO_HEADER..];
    if body.len() != 8 * h * w {
        return Err(Error::Truncated {
            what: "FLO1 body",
            needed: 8 * h * w,
            available: body.len(),
        });
    }
    let mut u = Vec::with_capacity(h * w);
    let mut v = Vec::with_capacity(h * w);
    for pair in body.chunks_exact(8) {
        u.push(f32::from_le_bytes(pair[..4].try_into().unwrap()));
        v.push(f32::from_le_bytes(pair[4..].try_into().unwrap()));
    }
    if u.iter().chain(&v).any(|x| !x.is_finite()) {
        return Err(Error::Format("FLO1 contains non-finite values".into()));
    }
    FlowField::from_planes(h, w, u, v)
}

pub fn write_flo(flow: &FlowField<f32>, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_flo(flow)?)
}

pub fn read_flo(path: impl AsRef<Path>) -> Result<FlowField<f32>> {
    decode_flo(&read(path.as_ref())?)
}

/// Binary 16-bit graymap (`P5`, maxval 65535) of intensities in `[0, 1]`.
pub fn encode_pgm(image: &Tensor<f32>, height: usize, width: usize) -> Result<Vec<u8>> {
    if image.len() != height * width {
        return Err(Error::shape("encode_pgm", &[height, width], image.shape()));
    }
    let mut out = format!("P5\n{width} {height}\n65535\n").into_bytes();
    for &x in image.data() {
        let q = (x.clamp(0.0, 1.0) * 65535.0).round() as u16;
        out.extend_from_slice(&q.to_be_bytes());
    }
    Ok(out)
}

/// Reads 8- or 16-bit binary graymaps into `[h, w]` intensities in `[0, 1]`.
pub fn decode_pgm(buf: &[u8]) -> Result<Tensor<f32>> {
    let (fields, body) = pnm_header(buf, b"P5")?;
    let [width, height, maxval] = fields;
    if maxval == 0 || maxval > 65535 {
        return Err(Error::Format(format!("PGM maxval {maxval} out of range")));
    }
    let bytes = if maxval < 256 { 1 } else { 2 };
    let needed = width * height * bytes;
    if body.len() < needed {
        return Err(Error::Truncated {
            what: "PGM pixels",
            needed,
            available: body.len(),
        });
    }
    let scale = 1.0 / maxval as f32;
    let data = body[..needed]
        .chunks_exact(bytes)
        .map(|c| {
            let raw = if bytes == 1 { c[0] as u16 } else { u16::from_be_bytes([c[0], c[1]]) };
            raw as f32 * scale
        })
        .collect();
    Tensor::from_vec(&[height, width], data)
}

/// Parses `magic width height maxval` with `#` comments and returns the
/// pixel body after the single whitespace byte that ends the header.
fn pnm_header<'a>(buf: &'a [u8], magic: &[u8; 2]) -> Result<([usize; 3], &'a [u8])> {
    if buf.len() < 2 || &buf[..2] != magic {
        let mut found = [0u8; 4];
        found[..buf.len().min(2)].copy_from_slice(&buf[..buf.len().min(2)]);
        let mut expected = [0u8; 4];
        expected[..2].copy_from_slice(magic);
        return Err(Error::BadMagic { expected, found });
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match buf.get(pos) {
                Some(b'#') => {
                    while buf.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err(Error::Format("truncated PNM header".into())),
            }
        }
        let start = pos;
        while buf.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&buf[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format("malformed PNM header".into()))?;
    }
    if !buf.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("malformed PNM header".into()));
    }
    Ok((fields, &buf[pos + 1..]))
}

pub fn write_pgm(image: &Tensor<f32>, height: usize, width: usize, path: impl AsRef<Path>) -> Result<()> {
    write(path.as_ref(), &encode_pgm(image, height, width)?)
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    decode_pgm(&read(path.as_ref())?)
}

/// Colour-wheel encoding: hue is the flow direction, saturation the
/// magnitude relative to `max_magnitude` (clamped to 1), value 1. Zero flow
/// maps to white.
pub fn flow_to_rgb(flow: &FlowField<f32>, max_magnitude: f64) -> Vec<u8> {
    let mut out = Vec::with_capacity(3 * flow.len());
    for (&u, &v) in flow.u().iter().zip(flow.v()) {
        let (u, v) = (u as f64, v as f64);
        let sat = if max_magnitude > 0.0 { (u.hypot(v) / max_magnitude).min(1.0) } else { 0.0 };
        let hue = (v.atan2(u).to_degrees() + 360.0) % 360.0;
        out.extend(hsv_to_rgb(hue, sat));
    }
    out
}

fn hsv_to_rgb(hue: f64, sat: f64) -> [u8; 3] {
    let c = sat;
    let hp = hue / 60.0;
    let x = c * (1.0 - (hp % 2.0 - 1.0).abs());
    let (r, g, b) = match hp as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = 1.0 - c;
    [r, g, b].map(|ch| ((ch + m) * 255.0).round() as u8)
}

/// Binary 8-bit pixmap (`P6`).
pub fn encode_ppm(rgb: &[u8], height: usize, width: usize) -> Result<Vec<u8>> {
    if rgb.len() != 3 * height * width {
        return Err(Error::shape("encode_ppm", &[height, width, 3], &[rgb.len()]));
    }
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    Ok(out)
}

pub fn decode_ppm(buf: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (fields, body) = pnm_header(buf, b"P6")?;
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::Format(format!("PPM maxval {maxval} unsupported")));
    }
    let needed = 3 * width * height;
    if body.len() < needed {
        return Err(Error::Truncated {
            what: "PPM pixels",
            needed,
            available: body.len(),
        });
    }
    Ok((height, width, body[..needed].to_vec()))
}

pub fn write_flow_ppm(flow: &FlowField<f32>, max_magnitude: f64, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_ppm(&flow_to_rgb(flow, max_magnitude), flow.height(), flow.width())?;
    write(path.as_ref(), &bytes)
}

/// Contents of one scene directory.
#[derive(Debug, Clone)]
pub struct SceneFiles {
    pub stream: EventStream,
    pub image_before: Tensor<f32>,
    pub image_after: Tensor<f32>,
    pub gt_flow: Option<FlowField<f32>>,
}

impl SceneFiles {
    pub fn from_scene(scene: &SynthScene) -> Self {
        SceneFiles {
            stream: scene.stream.clone(),
            image_before: scene.image_before.clone(),
            image_after: scene.image_after.clone(),
            gt_flow: Some(scene.gt_flow.clone()),
        }
    }

    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let (h, w) = (self.stream.height as usize, self.stream.width as usize);
        write_events(&self.stream, dir.join(EVENTS_FILE))?;
        write_pgm(&self.image_before, h, w, dir.join(IMAGE_BEFORE_FILE))?;
        write_pgm(&self.image_after, h, w, dir.join(IMAGE_AFTER_FILE))?;
        if let Some(f) = &self.gt_flow {
            write_flo(f, dir.join(FLOW_FILE))?;
        }
        Ok(())
    }

    pub fn read(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let stream = read_events(dir.join(EVENTS_FILE))?;
        let image_before = read_pgm(dir.join(IMAGE_BEFORE_FILE))?;
        let image_after = read_pgm(dir.join(IMAGE_AFTER_FILE))?;
        let flow_path = dir.join(FLOW_FILE);
        let gt_flow = if flow_path.exists() { Some(read_flo(&flow_path)?) } else { None };
        Ok(SceneFiles {
            stream,
            image_before,
            image_after,
            gt_flow,
        })
    }

    pub fn to_sample<S: Scalar>(&self, bins: usize) -> Result<Sample<S>> {
        Sample::from_parts(&self.stream, &self.image_before, &self.image_after, self.gt_flow.as_ref(), bins)
    }
}

pub fn is_scene_dir(dir: &Path) -> bool {
    dir.join(EVENTS_FILE).is_file()
}

/// Scene directories under `dir`: `dir` itself if it is one, otherwise its
/// scene subdirectories sorted by name.
pub fn scene_dirs(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if is_scene_dir(dir) {
        return Ok(vec![dir.to_path_buf()]);
    }
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut dirs = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if is_scene_dir(&path) {
            dirs.push(path);
        }
    }
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(dirs)
}

pub fn load_dataset<S: Scalar>(dir: impl AsRef<Path>, bins: usize) -> Result<Dataset<S>> {
    let samples = scene_dirs(dir)?
        .iter()
        .map(|d| SceneFiles::read(d)?.to_sample(bins))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset::new(samples))
}

/// Writes scenes as `scene_0000`, `scene_0001`, ... under `dir`.
pub fn save_scenes(scenes: &[SynthScene], dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("scene_{i:04}"));
            SceneFiles::from_scene(s).write(&path)?;
            Ok(path)
        })
        .collect()
}
