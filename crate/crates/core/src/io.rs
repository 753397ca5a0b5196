//! File formats: PFM and PNG images, event CSV and packed binary, PLY point
//! clouds and Gaussian scenes, TUM trajectories, edge scale lists and
//! pointmap files.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::Vector3;

use crate::alignment::PointMap;
use crate::error::{Error, Result};
use crate::events::Event;
use crate::geometry::{Quaternion, RigidTransform};
use crate::image::Image;
use crate::metrics::TimedPose;
use crate::sampling::ConfidencePointCloud;
use crate::splat::{Gaussian3D, Scene};

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Formats like C's `%.9g`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if (-5..9).contains(&exp) {
        let s = format!("{:.*}", (8 - exp) as usize, x);
        trim_zeros(&s).to_string()
    } else {
        let m = trim_zeros(mantissa);
        format!("{m}e{}{:02}", if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

// ---------------------------------------------------------------------------
// PFM
// ---------------------------------------------------------------------------

/// Little-endian PFM (scale -1), rows stored bottom to top.
pub fn encode_pfm(img: &Image) -> Result<Vec<u8>> {
    let tag = match img.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::WrongChannelCount { expected: 3, got: c }),
    };
    let mut out = format!("{tag}\n{} {}\n-1.0\n", img.width(), img.height()).into_bytes();
    let row = img.width() * img.channels();
    for y in (0..img.height()).rev() {
        for v in &img.data()[y * row..(y + 1) * row] {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(path, "truncated PFM header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let channels = match token()?.as_str() {
        "PF" => 3,
        "Pf" => 1,
        other => return Err(Error::parse(path, format!("bad PFM magic {other:?}"))),
    };
    let width: usize = token()?.parse().map_err(|_| Error::parse(path, "bad PFM width"))?;
    let height: usize = token()?.parse().map_err(|_| Error::parse(path, "bad PFM height"))?;
    let scale: f64 = token()?.parse().map_err(|_| Error::parse(path, "bad PFM scale"))?;
    let data_start = pos + 1;
    let row = width * channels;
    let need = row * height * 4;
    if bytes.len() < data_start + need {
        return Err(Error::parse(path, format!("PFM payload has {} bytes, expected {need}", bytes.len().saturating_sub(data_start))));
    }
    let payload = &bytes[data_start..data_start + need];
    let read = |i: usize| {
        let b = [payload[4 * i], payload[4 * i + 1], payload[4 * i + 2], payload[4 * i + 3]];
        if scale < 0.0 {
            f32::from_le_bytes(b) as f64
        } else {
            f32::from_be_bytes(b) as f64
        }
    };
    let mut data = vec![0.0; row * height];
    for y in 0..height {
        let src = height - 1 - y;
        for i in 0..row {
            data[y * row + i] = read(src * row + i);
        }
    }
    Image::from_vec(width, height, channels, data)
}

pub fn write_pfm(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    write_bytes(path.as_ref(), &encode_pfm(img)?)
}

pub fn read_pfm(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    decode_pfm(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------------------
// PNG
// ---------------------------------------------------------------------------

/// Reads an 8- or 16-bit PNG as floats in [0, 1]. Alpha is dropped.
pub fn read_png(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::parse(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::parse(path, "PNG too large"))?];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::parse(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let src_channels = info.color_type.samples();
    let wide = info.bit_depth == png::BitDepth::Sixteen;
    let sample = |i: usize| {
        if wide {
            u16::from_be_bytes([buf[2 * i], buf[2 * i + 1]]) as f64 / 65535.0
        } else {
            buf[i] as f64 / 255.0
        }
    };
    let channels = if src_channels >= 3 { 3 } else { 1 };
    Image::from_fn(w, h, channels, |x, y, c| sample((y * w + x) * src_channels + c))
}

/// Writes an 8-bit PNG, clamping to [0, 1].
pub fn write_png(path: impl AsRef<Path>, img: &Image) -> Result<()> {
    let path = path.as_ref();
    let color = match img.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::WrongChannelCount { expected: 3, got: c }),
    };
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, img.width() as u32, img.height() as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::parse(path, e.to_string()))?;
        let data: Vec<u8> = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        writer.write_image_data(&data).map_err(|e| Error::parse(path, e.to_string()))?;
    }
    write_bytes(path, &bytes)
}

// ---------------------------------------------------------------------------
// Events
// ---------------------------------------------------------------------------

pub const EVENT_MAGIC: &[u8; 4] = b"EVT1";
pub const EVENT_HEADER_LEN: usize = 16;
pub const EVENT_RECORD_LEN: usize = 13;

pub fn encode_events_bin(width: u16, height: u16, events: &[Event]) -> Vec<u8> {
    let mut out = Vec::with_capacity(EVENT_HEADER_LEN + EVENT_RECORD_LEN * events.len());
    out.extend_from_slice(EVENT_MAGIC);
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&height.to_le_bytes());
    out.extend_from_slice(&(events.len() as u64).to_le_bytes());
    for e in events {
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.extend_from_slice(&e.t_us.to_le_bytes());
        out.extend_from_slice(&e.polarity.to_le_bytes());
    }
    out
}

/// Decoded binary event file: sensor size and records.
#[derive(Debug, Clone, PartialEq)]
pub struct EventFile {
    pub width: u16,
    pub height: u16,
    pub events: Vec<Event>,
}

pub fn decode_events_bin(bytes: &[u8], path: &Path) -> Result<EventFile> {
    if bytes.len() < EVENT_HEADER_LEN || &bytes[..4] != EVENT_MAGIC {
        return Err(Error::parse(path, "missing EVT1 header"));
    }
    let width = u16::from_le_bytes([bytes[4], bytes[5]]);
    let height = u16::from_le_bytes([bytes[6], bytes[7]]);
    let count = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[EVENT_HEADER_LEN..];
    if body.len() != count * EVENT_RECORD_LEN {
        return Err(Error::parse(path, format!("header declares {count} events but payload holds {} bytes", body.len())));
    }
    let events = body
        .chunks_exact(EVENT_RECORD_LEN)
        .map(|r| Event {
            x: u16::from_le_bytes([r[0], r[1]]),
            y: u16::from_le_bytes([r[2], r[3]]),
            t_us: u64::from_le_bytes(r[4..12].try_into().unwrap()),
            polarity: r[12] as i8,
        })
        .collect();
    Ok(EventFile { width, height, events })
}

pub fn write_events_bin(path: impl AsRef<Path>, width: u16, height: u16, events: &[Event]) -> Result<()> {
    write_bytes(path.as_ref(), &encode_events_bin(width, height, events))
}

pub fn read_events_bin(path: impl AsRef<Path>) -> Result<EventFile> {
    let path = path.as_ref();
    decode_events_bin(&read_bytes(path)?, path)
}

pub fn write_events_csv(path: impl AsRef<Path>, events: &[Event]) -> Result<()> {
    let mut s = String::from("x,y,t_us,p\n");
    for e in events {
        writeln!(s, "{},{},{},{}", e.x, e.y, e.t_us, e.polarity).unwrap();
    }
    write_bytes(path.as_ref(), s.as_bytes())
}

pub fn read_events_csv(path: impl AsRef<Path>) -> Result<Vec<Event>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,t_us,p") {
        return Err(Error::parse(path, "expected header x,y,t_us,p"));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.trim().split(',').collect();
            let bad = || Error::parse(path, format!("line {}: malformed event {l:?}", i + 2));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(Event {
                x: f[0].parse().map_err(|_| bad())?,
                y: f[1].parse().map_err(|_| bad())?,
                t_us: f[2].parse().map_err(|_| bad())?,
                polarity: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// PLY
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PlyFormat {
    Ascii,
    #[default]
    BinaryLittleEndian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PlyType {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl PlyType {
    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "char" | "int8" => PlyType::I8,
            "uchar" | "uint8" => PlyType::U8,
            "short" | "int16" => PlyType::I16,
            "ushort" | "uint16" => PlyType::U16,
            "int" | "int32" => PlyType::I32,
            "uint" | "uint32" => PlyType::U32,
            "float" | "float32" => PlyType::F32,
            "double" | "float64" => PlyType::F64,
            _ => return None,
        })
    }

    fn name(self) -> &'static str {
        match self {
            PlyType::I8 => "char",
            PlyType::U8 => "uchar",
            PlyType::I16 => "short",
            PlyType::U16 => "ushort",
            PlyType::I32 => "int",
            PlyType::U32 => "uint",
            PlyType::F32 => "float",
            PlyType::F64 => "double",
        }
    }

    fn size(self) -> usize {
        match self {
            PlyType::I8 | PlyType::U8 => 1,
            PlyType::I16 | PlyType::U16 => 2,
            PlyType::I32 | PlyType::U32 | PlyType::F32 => 4,
            PlyType::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            PlyType::I8 => b[0] as i8 as f64,
            PlyType::U8 => b[0] as f64,
            PlyType::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            PlyType::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            PlyType::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    fn write_le(self, v: f64, out: &mut Vec<u8>) {
        match self {
            PlyType::I8 => out.push(v as i8 as u8),
            PlyType::U8 => out.push(v as u8),
            PlyType::I16 => out.extend_from_slice(&(v as i16).to_le_bytes()),
            PlyType::U16 => out.extend_from_slice(&(v as u16).to_le_bytes()),
            PlyType::I32 => out.extend_from_slice(&(v as i32).to_le_bytes()),
            PlyType::U32 => out.extend_from_slice(&(v as u32).to_le_bytes()),
            PlyType::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            PlyType::F64 => out.extend_from_slice(&v.to_le_bytes()),
        }
    }

    fn format_ascii(self, v: f64) -> String {
        match self {
            PlyType::F32 => format!("{}", v as f32),
            PlyType::F64 => format!("{v}"),
            _ => format!("{}", v as i64),
        }
    }
}

/// Vertex table: property names and row-major values.
struct PlyTable {
    properties: Vec<(String, PlyType)>,
    rows: Vec<Vec<f64>>,
    comments: Vec<String>,
}

impl PlyTable {
    fn column(&self, name: &str, path: &Path) -> Result<usize> {
        self.properties
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| Error::parse(path, format!("PLY vertex lacks property {name:?}")))
    }
}

fn encode_ply(table: &PlyTable, format: PlyFormat) -> Vec<u8> {
    let mut head = String::from("ply\n");
    head += match format {
        PlyFormat::Ascii => "format ascii 1.0\n",
        PlyFormat::BinaryLittleEndian => "format binary_little_endian 1.0\n",
    };
    for c in &table.comments {
        writeln!(head, "comment {c}").unwrap();
    }
    writeln!(head, "element vertex {}", table.rows.len()).unwrap();
    for (name, ty) in &table.properties {
        writeln!(head, "property {} {name}", ty.name()).unwrap();
    }
    head += "end_header\n";
    let mut out = head.into_bytes();
    for row in &table.rows {
        match format {
            PlyFormat::Ascii => {
                let line: Vec<String> = row.iter().zip(&table.properties).map(|(v, (_, t))| t.format_ascii(*v)).collect();
                out.extend_from_slice(line.join(" ").as_bytes());
                out.push(b'\n');
            }
            PlyFormat::BinaryLittleEndian => {
                for (v, (_, t)) in row.iter().zip(&table.properties) {
                    t.write_le(*v, &mut out);
                }
            }
        }
    }
    out
}

fn decode_ply(bytes: &[u8], path: &Path) -> Result<PlyTable> {
    let mut reader = BufReader::new(bytes);
    let mut line = String::new();
    let mut next_line = |reader: &mut BufReader<&[u8]>| -> Result<String> {
        line.clear();
        let n = reader.read_line(&mut line).map_err(|e| Error::io(path, e))?;
        if n == 0 {
            return Err(Error::parse(path, "unexpected end of PLY header"));
        }
        Ok(line.trim_end().to_string())
    };
    if next_line(&mut reader)? != "ply" {
        return Err(Error::parse(path, "missing ply magic"));
    }
    let mut format = None;
    let mut count = None;
    let mut properties = Vec::new();
    let mut comments = Vec::new();
    let mut in_vertex = false;
    loop {
        let l = next_line(&mut reader)?;
        let parts: Vec<&str> = l.split_whitespace().collect();
        match parts.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => format = Some(PlyFormat::Ascii),
            ["format", "binary_little_endian", _] => format = Some(PlyFormat::BinaryLittleEndian),
            ["format", other, _] => return Err(Error::parse(path, format!("unsupported PLY format {other}"))),
            ["comment", ..] => comments.push(l.trim_start_matches("comment").trim().to_string()),
            ["obj_info", ..] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(Error::parse(path, "duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| Error::parse(path, "bad vertex count"))?);
                in_vertex = true;
            }
            ["element", ..] => {
                if count.is_none() {
                    return Err(Error::parse(path, "elements before vertex are not supported"));
                }
                in_vertex = false;
            }
            ["property", ty, name] if in_vertex => {
                let t = PlyType::parse(ty).ok_or_else(|| Error::parse(path, format!("unsupported property type {ty}")))?;
                properties.push((name.to_string(), t));
            }
            ["property", "list", ..] if in_vertex => return Err(Error::parse(path, "list properties on vertices are not supported")),
            ["property", ..] => {}
            _ => return Err(Error::parse(path, format!("unrecognized header line {l:?}"))),
        }
    }
    let format = format.ok_or_else(|| Error::parse(path, "PLY header lacks a format line"))?;
    let count = count.ok_or_else(|| Error::parse(path, "PLY header lacks a vertex element"))?;
    let mut rows = Vec::with_capacity(count);
    match format {
        PlyFormat::Ascii => {
            let mut body = String::new();
            reader.read_to_string(&mut body).map_err(|e| Error::io(path, e))?;
            let mut tokens = body.split_whitespace();
            for i in 0..count {
                let row = (0..properties.len())
                    .map(|_| {
                        tokens
                            .next()
                            .and_then(|t| t.parse::<f64>().ok())
                            .ok_or_else(|| Error::parse(path, format!("vertex {i}: missing or malformed value")))
                    })
                    .collect::<Result<Vec<f64>>>()?;
                rows.push(row);
            }
        }
        PlyFormat::BinaryLittleEndian => {
            let stride: usize = properties.iter().map(|(_, t)| t.size()).sum();
            let mut body = Vec::new();
            reader.read_to_end(&mut body).map_err(|e| Error::io(path, e))?;
            if body.len() < stride * count {
                return Err(Error::parse(path, format!("PLY body holds {} bytes, expected {}", body.len(), stride * count)));
            }
            for rec in body.chunks_exact(stride).take(count) {
                let mut off = 0;
                let row = properties
                    .iter()
                    .map(|(_, t)| {
                        let v = t.read_le(&rec[off..]);
                        off += t.size();
                        v
                    })
                    .collect();
                rows.push(row);
            }
        }
    }
    Ok(PlyTable { properties, rows, comments })
}

pub fn encode_point_cloud_ply(cloud: &ConfidencePointCloud, format: PlyFormat) -> Vec<u8> {
    let mut properties: Vec<(String, PlyType)> = ["x", "y", "z"].iter().map(|n| (n.to_string(), PlyType::F64)).collect();
    if cloud.colors.is_some() {
        properties.extend(["red", "green", "blue"].iter().map(|n| (n.to_string(), PlyType::U8)));
    }
    properties.push(("confidence".into(), PlyType::F64));
    let rows = (0..cloud.len())
        .map(|i| {
            let p = cloud.positions[i];
            let mut row = vec![p.x, p.y, p.z];
            if let Some(c) = &cloud.colors {
                row.extend(c[i].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round()));
            }
            row.push(cloud.confidence[i]);
            row
        })
        .collect();
    encode_ply(&PlyTable { properties, rows, comments: vec![] }, format)
}

/// Reads a point cloud; colors are optional (8-bit or float in [0, 1]),
/// confidence defaults to 1 when absent.
pub fn decode_point_cloud_ply(bytes: &[u8], path: &Path) -> Result<ConfidencePointCloud> {
    let t = decode_ply(bytes, path)?;
    let (x, y, z) = (t.column("x", path)?, t.column("y", path)?, t.column("z", path)?);
    let rgb = match (t.column("red", path), t.column("green", path), t.column("blue", path)) {
        (Ok(r), Ok(g), Ok(b)) => Some([r, g, b]),
        _ => None,
    };
    let conf = t.column("confidence", path).ok();
    let positions = t.rows.iter().map(|r| Vector3::new(r[x], r[y], r[z])).collect();
    let colors = rgb.map(|idx| {
        let integer = t.properties[idx[0]].1 == PlyType::U8;
        t.rows
            .iter()
            .map(|r| idx.map(|c| if integer { r[c] / 255.0 } else { r[c] }))
            .collect()
    });
    let confidence = t.rows.iter().map(|r| conf.map_or(1.0, |c| r[c])).collect();
    ConfidencePointCloud::new(positions, colors, confidence)
}

pub fn write_point_cloud_ply(path: impl AsRef<Path>, cloud: &ConfidencePointCloud, format: PlyFormat) -> Result<()> {
    write_bytes(path.as_ref(), &encode_point_cloud_ply(cloud, format))
}

pub fn read_point_cloud_ply(path: impl AsRef<Path>) -> Result<ConfidencePointCloud> {
    let path = path.as_ref();
    decode_point_cloud_ply(&read_bytes(path)?, path)
}

const SCENE_PROPS: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green", "blue",
];

/// Scene PLY in the 3D-GS storage convention: `scale_*` are log-scales,
/// `opacity` is the logit, `rot_*` is the raw `wxyz` quaternion.
pub fn encode_scene_ply(scene: &Scene, format: PlyFormat) -> Vec<u8> {
    let properties = SCENE_PROPS.iter().map(|n| (n.to_string(), PlyType::F64)).collect();
    let rows = scene.gaussians.iter().map(|g| g.to_params().to_vec()).collect();
    let [r, g, b] = scene.background;
    let comments = vec![format!("background {r:?} {g:?} {b:?}")];
    encode_ply(&PlyTable { properties, rows, comments }, format)
}

pub fn decode_scene_ply(bytes: &[u8], path: &Path) -> Result<Scene> {
    let t = decode_ply(bytes, path)?;
    let cols = SCENE_PROPS.iter().map(|n| t.column(n, path)).collect::<Result<Vec<usize>>>()?;
    let gaussians = t
        .rows
        .iter()
        .map(|r| Gaussian3D::from_params(&std::array::from_fn(|i| r[cols[i]])))
        .collect();
    let mut background = [0.0; 3];
    if let Some(c) = t.comments.iter().find_map(|c| c.strip_prefix("background ")) {
        let vals: Vec<f64> = c.split_whitespace().filter_map(|v| v.parse().ok()).collect();
        if vals.len() == 3 {
            background = [vals[0], vals[1], vals[2]];
        }
    }
    Ok(Scene { gaussians, background })
}

pub fn write_scene_ply(path: impl AsRef<Path>, scene: &Scene, format: PlyFormat) -> Result<()> {
    write_bytes(path.as_ref(), &encode_scene_ply(scene, format))
}

pub fn read_scene_ply(path: impl AsRef<Path>) -> Result<Scene> {
    let path = path.as_ref();
    decode_scene_ply(&read_bytes(path)?, path)
}

// ---------------------------------------------------------------------------
// Trajectories and scales
// ---------------------------------------------------------------------------

/// TUM lines `timestamp tx ty tz qx qy qz qw`, 9 significant digits.
pub fn format_tum(poses: &[TimedPose]) -> String {
    let mut s = String::new();
    for p in poses {
        let q = p.pose.quaternion();
        let t = p.pose.translation;
        let fields = [p.timestamp, t.x, t.y, t.z, q.x, q.y, q.z, q.w].map(format_sig9);
        s += &fields.join(" ");
        s.push('\n');
    }
    s
}

pub fn parse_tum(text: &str, path: &Path) -> Result<Vec<TimedPose>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            let v: Vec<f64> = l
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::parse(path, format!("line {}: non-numeric field", i + 1)))?;
            if v.len() != 8 {
                return Err(Error::parse(path, format!("line {}: expected 8 fields, got {}", i + 1, v.len())));
            }
            let q = Quaternion::new(v[7], v[4], v[5], v[6]);
            Ok(TimedPose { timestamp: v[0], pose: RigidTransform::from_quaternion(&q, Vector3::new(v[1], v[2], v[3])) })
        })
        .collect()
}

pub fn write_tum(path: impl AsRef<Path>, poses: &[TimedPose]) -> Result<()> {
    write_bytes(path.as_ref(), format_tum(poses).as_bytes())
}

pub fn read_tum(path: impl AsRef<Path>) -> Result<Vec<TimedPose>> {
    let path = path.as_ref();
    parse_tum(&read_text(path)?, path)
}

/// Lines `edge_n edge_m sigma`.
pub fn write_scales(path: impl AsRef<Path>, scales: &[(usize, usize, f64)]) -> Result<()> {
    let mut s = String::new();
    for (n, m, sigma) in scales {
        writeln!(s, "{n} {m} {sigma:?}").unwrap();
    }
    write_bytes(path.as_ref(), s.as_bytes())
}

pub fn read_scales(path: impl AsRef<Path>) -> Result<Vec<(usize, usize, f64)>> {
    let path = path.as_ref();
    read_text(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split_whitespace().collect();
            let bad = || Error::parse(path, format!("line {}: expected 'edge_n edge_m sigma'", i + 1));
            if f.len() != 3 {
                return Err(bad());
            }
            Ok((f[0].parse().map_err(|_| bad())?, f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Pointmaps
// ---------------------------------------------------------------------------

/// Pointmap of `view` inside edge `(n, m)` as written by [`write_pointmap`].
#[derive(Debug, Clone, PartialEq)]
pub struct PointMapRecord {
    pub edge_n: usize,
    pub edge_m: usize,
    pub view: usize,
    pub map: PointMap,
}

/// Writes `<stem>.pts.pfm` (3 channels), `<stem>.conf.pfm` (invalid pixels
/// get confidence 0) and the sidecar `<stem>.txt` holding `edge_n edge_m view`.
pub fn write_pointmap(stem: impl AsRef<Path>, record: &PointMapRecord) -> Result<()> {
    let stem = stem.as_ref();
    let m = &record.map;
    let pts = Image::from_fn(m.width, m.height, 3, |x, y, c| m.points[y * m.width + x][c])?;
    let conf = Image::from_fn(m.width, m.height, 1, |x, y, _| {
        let k = y * m.width + x;
        if m.valid[k] {
            m.confidence[k]
        } else {
            0.0
        }
    })?;
    write_pfm(with_suffix(stem, ".pts.pfm"), &pts)?;
    write_pfm(with_suffix(stem, ".conf.pfm"), &conf)?;
    write_bytes(&with_suffix(stem, ".txt"), format!("{} {} {}\n", record.edge_n, record.edge_m, record.view).as_bytes())
}

pub fn read_pointmap(stem: impl AsRef<Path>) -> Result<PointMapRecord> {
    let stem = stem.as_ref();
    let side = with_suffix(stem, ".txt");
    let ids: Vec<usize> = read_text(&side)?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::parse(&side, "expected 'edge_n edge_m view'")))
        .collect::<Result<_>>()?;
    if ids.len() != 3 {
        return Err(Error::parse(&side, "expected 'edge_n edge_m view'"));
    }
    let pts = read_pfm(with_suffix(stem, ".pts.pfm"))?;
    let conf = read_pfm(with_suffix(stem, ".conf.pfm"))?;
    if !pts.same_dims(&conf) || pts.channels() != 3 || conf.channels() != 1 {
        return Err(Error::DimensionMismatch("pointmap and confidence PFMs disagree".into()));
    }
    let (w, h) = (pts.width(), pts.height());
    let points = (0..w * h).map(|k| Vector3::new(pts.data()[3 * k], pts.data()[3 * k + 1], pts.data()[3 * k + 2])).collect();
    let confidence: Vec<f64> = conf.data().to_vec();
    let valid = confidence.iter().map(|&c| c > 0.0).collect();
    Ok(PointMapRecord { edge_n: ids[0], edge_m: ids[1], view: ids[2], map: PointMap::new(w, h, points, confidence, valid)? })
}

fn with_suffix(stem: &Path, suffix: &str) -> std::path::PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(suffix);
    s.into()
}

/// Writes text through a buffered file, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: impl AsRef<Path>) -> Result<String> {
    read_text(path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig9_matches_printf() {
        assert_eq!(format_sig9(0.0), "0");
        assert_eq!(format_sig9(1.0), "1");
        assert_eq!(format_sig9(-0.5), "-0.5");
        assert_eq!(format_sig9(1.0 / 3.0), "0.333333333");
        assert_eq!(format_sig9(123456789.4), "123456789");
        assert_eq!(format_sig9(1234567890.0), "1.23456789e+09");
        assert_eq!(format_sig9(1.5e-7), "1.5e-07");
        assert_eq!(format_sig9(0.000123456789123), "0.000123456789");
        assert_eq!(format_sig9(99999999.95), "100000000");
    }

    #[test]
    fn pfm_header_layout() {
        let img = Image::from_vec(2, 1, 1, vec![0.5, 1.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert!(bytes.starts_with(b"Pf\n2 1\n-1.0\n"));
        assert_eq!(bytes.len(), 12 + 8);
        assert_eq!(&bytes[12..16], &0.5f32.to_le_bytes());
    }

    #[test]
    fn pfm_rows_are_bottom_up() {
        let img = Image::from_vec(1, 2, 1, vec![1.0, 2.0]).unwrap();
        let bytes = encode_pfm(&img).unwrap();
        assert_eq!(&bytes[12..16], &2.0f32.to_le_bytes());
        let back = decode_pfm(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.data(), img.data());
    }

    #[test]
    fn event_header_is_sixteen_bytes() {
        let ev = [Event { x: 3, y: 4, t_us: 99, polarity: -1 }];
        let bytes = encode_events_bin(640, 480, &ev);
        assert_eq!(&bytes[..4], b"EVT1");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 640);
        assert_eq!(u64::from_le_bytes(bytes[8..16].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 16 + 13);
        assert_eq!(bytes[28] as i8, -1);
        let back = decode_events_bin(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.events, ev);
    }

    #[test]
    fn truncated_event_file_is_rejected() {
        let bytes = encode_events_bin(4, 4, &[Event { x: 0, y: 0, t_us: 1, polarity: 1 }]);
        assert!(matches!(decode_events_bin(&bytes[..20], Path::new("mem")), Err(Error::Parse { .. })));
    }
}
