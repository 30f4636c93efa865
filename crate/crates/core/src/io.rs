//! Everything that touches disk: PNG frame I/O, PLY/OBJ meshes, JSON poses
//! and configs, the binary volume checkpoint, and the on-disk layouts for
//! sequences, runs, and the memory pool.
//!
//! Sequence directories hold flat per-frame triples `NNNNNN.color.png`,
//! `NNNNNN.depth.png` (16-bit millimeters), `NNNNNN.mask.png`, with
//! `intrinsics.json` at the root; frames are ordered by sorting the stems.
//! Meshes travel as binary little-endian PLY with 8-bit vertex colors and an
//! optional per-vertex `uncertain` flag; hybrid models add a JSON sidecar
//! with provenance and the reference poses they were fused from.

use crate::eval::MetricReport;
use crate::geom::{GeomError, Intrinsics, Pose};
use crate::img::{ColorImage, DepthImage, Frame, ImgError, MaskImage};
use crate::mesh::{MeshError, TriangleMesh};
use crate::model::{HybridModel, Provenance};
use crate::raster::RenderOutput;
use crate::volume::{TsdfVolume, Voxel};
use nalgebra::Vector3;
use serde::{de::DeserializeOwned, Deserialize, Serialize};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Mesh(#[from] MeshError),
    #[error(transparent)]
    Geom(#[from] GeomError),
}

fn bad(path: &Path, what: impl std::fmt::Display) -> IoError {
    IoError::Format(format!("{}: {what}", path.display()))
}

// Well-known file names inside sequence and run directories.
pub const INTRINSICS_FILE: &str = "intrinsics.json";
pub const GT_POSES_FILE: &str = "gt_poses.json";
pub const GT_MESH_FILE: &str = "gt_mesh.ply";
pub const TRAJECTORY_FILE: &str = "trajectory.jsonl";
pub const REBUILD_LOG_FILE: &str = "rebuilds.jsonl";
pub const MODEL_INITIAL_FILE: &str = "model_initial.ply";
pub const MODEL_FINAL_FILE: &str = "model_final.ply";
pub const RUN_META_FILE: &str = "run_meta.json";
pub const REPORT_JSON_FILE: &str = "report.json";
pub const REPORT_CSV_FILE: &str = "report.csv";
pub const POOL_DIR: &str = "pool";

// ---------------------------------------------------------------------------
// PNG images
// ---------------------------------------------------------------------------

/// Writes linear color as 8-bit RGB (values clamped to [0, 1]).
pub fn save_color(path: &Path, img: &ColorImage) -> Result<(), IoError> {
    let out = image::RgbImage::from_fn(img.width() as u32, img.height() as u32, |x, y| {
        let c = img.get(x as usize, y as usize);
        image::Rgb(c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    out.save(path)?;
    Ok(())
}

pub fn load_color(path: &Path) -> Result<ColorImage, IoError> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0.map(|v| v as f32 / 255.0)).collect();
    Ok(ColorImage::from_vec(w, h, data)?)
}

/// Writes depth in meters as 16-bit millimeters; 0 stays "no measurement".
pub fn save_depth_mm(path: &Path, depth: &DepthImage) -> Result<(), IoError> {
    let out = image::ImageBuffer::<image::Luma<u16>, Vec<u16>>::from_fn(
        depth.width() as u32,
        depth.height() as u32,
        |x, y| {
            let mm = (f64::from(*depth.get(x as usize, y as usize)) * 1000.0).round();
            image::Luma([mm.clamp(0.0, f64::from(u16::MAX)) as u16])
        },
    );
    out.save(path)?;
    Ok(())
}

pub fn load_depth_mm(path: &Path) -> Result<DepthImage, IoError> {
    let img = image::open(path)?.to_luma16();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f32 / 1000.0).collect();
    Ok(DepthImage::from_vec(w, h, data)?)
}

pub fn save_mask(path: &Path, mask: &MaskImage) -> Result<(), IoError> {
    let out = image::GrayImage::from_fn(mask.width() as u32, mask.height() as u32, |x, y| {
        image::Luma([if *mask.get(x as usize, y as usize) { 255 } else { 0 }])
    });
    out.save(path)?;
    Ok(())
}

pub fn load_mask(path: &Path) -> Result<MaskImage, IoError> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] > 127).collect();
    Ok(MaskImage::from_vec(w, h, data)?)
}

/// Debug dump of a render as four PNGs: `<stem>.color/depth/mask/uncertainty.png`.
pub fn save_render_debug(dir: &Path, stem: &str, render: &RenderOutput) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    save_color(&dir.join(format!("{stem}.color.png")), &render.color)?;
    save_depth_mm(&dir.join(format!("{stem}.depth.png")), &render.depth)?;
    save_mask(&dir.join(format!("{stem}.mask.png")), &render.mask)?;
    save_mask(&dir.join(format!("{stem}.uncertainty.png")), &render.uncertainty)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Sequence directories
// ---------------------------------------------------------------------------

/// The frame stems in a sequence directory, sorted lexicographically.
pub fn frame_stems(dir: &Path) -> Result<Vec<String>, IoError> {
    let mut stems = Vec::new();
    for entry in fs::read_dir(dir)? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix(".color.png") {
            stems.push(stem.to_string());
        }
    }
    stems.sort();
    Ok(stems)
}

pub fn load_frame(dir: &Path, stem: &str) -> Result<Frame, IoError> {
    let frame = Frame {
        color: load_color(&dir.join(format!("{stem}.color.png")))?,
        depth: load_depth_mm(&dir.join(format!("{stem}.depth.png")))?,
        mask: load_mask(&dir.join(format!("{stem}.mask.png")))?,
    };
    frame.validate()?;
    Ok(frame)
}

pub fn save_frame(dir: &Path, stem: &str, frame: &Frame) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    save_color(&dir.join(format!("{stem}.color.png")), &frame.color)?;
    save_depth_mm(&dir.join(format!("{stem}.depth.png")), &frame.depth)?;
    save_mask(&dir.join(format!("{stem}.mask.png")), &frame.mask)?;
    Ok(())
}

/// Conventional zero-padded stem for frame `i`.
pub fn frame_stem(i: usize) -> String {
    format!("{i:06}")
}

// ---------------------------------------------------------------------------
// JSON: intrinsics, poses, generic configs
// ---------------------------------------------------------------------------

pub fn save_json<T: Serialize>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut out = serde_json::to_string_pretty(value)?;
    out.push('\n');
    fs::write(path, out)?;
    Ok(())
}

pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    Ok(serde_json::from_reader(BufReader::new(File::open(path)?))?)
}

pub fn save_intrinsics(path: &Path, k: &Intrinsics) -> Result<(), IoError> {
    save_json(path, k)
}

pub fn load_intrinsics(path: &Path) -> Result<Intrinsics, IoError> {
    let k: Intrinsics = load_json(path)?;
    k.validate()?;
    Ok(k)
}

/// Writes poses as a JSON array of 4x4 row-major 16-float arrays.
pub fn save_poses(path: &Path, poses: &[Pose]) -> Result<(), IoError> {
    let rows: Vec<Vec<f64>> = poses.iter().map(|p| p.to_row_major().to_vec()).collect();
    save_json(path, &rows)
}

/// Reads poses from either a JSON array of 16-float arrays or one such array
/// per line.
pub fn load_poses(path: &Path) -> Result<Vec<Pose>, IoError> {
    let text = fs::read_to_string(path)?;
    let parse_one = |v: &serde_json::Value| -> Result<Pose, IoError> {
        let arr: [f64; 16] = serde_json::from_value(v.clone())
            .map_err(|_| bad(path, "pose is not a 16-float row-major matrix"))?;
        Ok(Pose::from_row_major(&arr))
    };
    if let Ok(value) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(items) = value.as_array() {
            return items.iter().map(parse_one).collect();
        }
    }
    let mut poses = Vec::new();
    for line in text.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        poses.push(parse_one(&serde_json::from_str(line)?)?);
    }
    Ok(poses)
}

// ---------------------------------------------------------------------------
// Trajectory and rebuild logs (JSON lines)
// ---------------------------------------------------------------------------

/// One tracked frame as written to `trajectory.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrajectoryRecord {
    pub frame_id: u64,
    /// Object-to-camera pose, 4x4 row-major.
    pub pose: [f64; 16],
    pub seen_iou: f64,
    pub uncertainty_rate: f64,
    pub valid: bool,
    /// "first" | "tracked" | "reinit".
    pub kind: String,
    pub build_stamp: u64,
}

/// One completion pass as written to `rebuilds.jsonl`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RebuildRecord {
    pub trigger_frame: u64,
    pub selected_ids: Vec<u64>,
    pub duration_s: f64,
    pub certain_fraction_before: f64,
    pub certain_fraction_after: f64,
}

fn save_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn load_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, IoError> {
    let mut out = Vec::new();
    for line in BufReader::new(File::open(path)?).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn save_trajectory(path: &Path, records: &[TrajectoryRecord]) -> Result<(), IoError> {
    save_jsonl(path, records)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryRecord>, IoError> {
    load_jsonl(path)
}

pub fn save_rebuild_log(path: &Path, records: &[RebuildRecord]) -> Result<(), IoError> {
    save_jsonl(path, records)
}

pub fn load_rebuild_log(path: &Path) -> Result<Vec<RebuildRecord>, IoError> {
    load_jsonl(path)
}

// ---------------------------------------------------------------------------
// PLY meshes
// ---------------------------------------------------------------------------

/// Writes a binary little-endian PLY: float32 positions, uint8 colors, and —
/// when labels are given — a uint8 `uncertain` property per vertex.
pub fn save_mesh_ply(
    path: &Path,
    mesh: &TriangleMesh,
    uncertain: Option<&[bool]>,
) -> Result<(), IoError> {
    if let Some(u) = uncertain {
        if u.len() != mesh.vertices.len() {
            return Err(IoError::Format(format!(
                "uncertain labels ({}) do not match vertices ({})",
                u.len(),
                mesh.vertices.len()
            )));
        }
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\n",
        mesh.vertices.len()
    )?;
    if uncertain.is_some() {
        writeln!(w, "property uchar uncertain")?;
    }
    write!(
        w,
        "element face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.faces.len()
    )?;
    for (i, v) in mesh.vertices.iter().enumerate() {
        for c in 0..3 {
            w.write_all(&(v[c] as f32).to_le_bytes())?;
        }
        let col = mesh.colors.get(i).copied().unwrap_or([0.7; 3]);
        w.write_all(&col.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))?;
        if let Some(u) = uncertain {
            w.write_all(&[u8::from(u[i])])?;
        }
    }
    for f in &mesh.faces {
        w.write_all(&[3u8])?;
        for &v in f {
            w.write_all(&(v as i32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Debug)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(token: &str) -> Option<Self> {
        Some(match token {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    /// Reads one value from a little-endian byte stream, widened to f64.
    fn read_le(self, bytes: &[u8]) -> f64 {
        match self {
            Scalar::I8 => bytes[0] as i8 as f64,
            Scalar::U8 => bytes[0] as f64,
            Scalar::I16 => i16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([bytes[0], bytes[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(bytes[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(bytes[..8].try_into().unwrap()),
        }
    }
}

#[derive(Debug)]
enum PlyProp {
    Scalar { name: String, ty: Scalar },
    List { name: String, count: Scalar, item: Scalar },
}

#[derive(Debug)]
struct PlyElement {
    name: String,
    count: usize,
    props: Vec<PlyProp>,
}

/// Pull-based value source shared by the ascii and binary paths.
enum PlyData<'a> {
    Binary { bytes: &'a [u8], at: usize },
    Ascii { tokens: std::str::SplitWhitespace<'a> },
}

impl PlyData<'_> {
    fn next(&mut self, ty: Scalar, path: &Path) -> Result<f64, IoError> {
        match self {
            PlyData::Binary { bytes, at } => {
                let end = *at + ty.size();
                if end > bytes.len() {
                    return Err(bad(path, "binary payload ends mid-element"));
                }
                let v = ty.read_le(&bytes[*at..end]);
                *at = end;
                Ok(v)
            }
            PlyData::Ascii { tokens } => {
                let tok = tokens.next().ok_or_else(|| bad(path, "ascii payload too short"))?;
                tok.parse::<f64>().map_err(|_| bad(path, format!("bad number '{tok}'")))
            }
        }
    }
}

/// Reads an ascii or binary little-endian PLY. Returns the mesh and, when a
/// per-vertex `uncertain` property is present, its flags. Unknown properties
/// and elements are skipped; missing colors default to neutral gray.
pub fn load_mesh_ply(path: &Path) -> Result<(TriangleMesh, Option<Vec<bool>>), IoError> {
    let raw = fs::read(path)?;
    // The header is ASCII, terminated by an "end_header" line.
    let header_end = raw
        .windows(11)
        .position(|w| w == b"end_header\n")
        .map(|p| p + 11)
        .ok_or_else(|| bad(path, "missing end_header"))?;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| bad(path, "header is not valid UTF-8"))?;

    let mut lines = header.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad(path, "not a PLY file"));
    }
    let mut binary = None;
    let mut elements: Vec<PlyElement> = Vec::new();
    for line in lines {
        let mut t = line.split_whitespace();
        match t.next() {
            Some("format") => {
                binary = match t.next() {
                    Some("binary_little_endian") => Some(true),
                    Some("ascii") => Some(false),
                    other => {
                        return Err(bad(path, format!("unsupported format {other:?}")));
                    }
                };
            }
            Some("element") => {
                let name = t.next().ok_or_else(|| bad(path, "element without name"))?;
                let count: usize = t
                    .next()
                    .and_then(|c| c.parse().ok())
                    .ok_or_else(|| bad(path, "element without count"))?;
                elements.push(PlyElement { name: name.into(), count, props: Vec::new() });
            }
            Some("property") => {
                let el = elements
                    .last_mut()
                    .ok_or_else(|| bad(path, "property before any element"))?;
                let first = t.next().ok_or_else(|| bad(path, "property without type"))?;
                if first == "list" {
                    let count = t
                        .next()
                        .and_then(Scalar::parse)
                        .ok_or_else(|| bad(path, "bad list count type"))?;
                    let item = t
                        .next()
                        .and_then(Scalar::parse)
                        .ok_or_else(|| bad(path, "bad list item type"))?;
                    let name = t.next().ok_or_else(|| bad(path, "list without name"))?;
                    el.props.push(PlyProp::List { name: name.into(), count, item });
                } else {
                    let ty = Scalar::parse(first)
                        .ok_or_else(|| bad(path, format!("unknown type '{first}'")))?;
                    let name = t.next().ok_or_else(|| bad(path, "property without name"))?;
                    el.props.push(PlyProp::Scalar { name: name.into(), ty });
                }
            }
            Some("comment") | Some("obj_info") | Some("end_header") | None => {}
            Some(other) => {
                return Err(bad(path, format!("unexpected header line '{other}'")));
            }
        }
    }
    let binary = binary.ok_or_else(|| bad(path, "missing format line"))?;

    let rest = &raw[header_end..];
    let ascii_text;
    let mut data = if binary {
        PlyData::Binary { bytes: rest, at: 0 }
    } else {
        ascii_text =
            std::str::from_utf8(rest).map_err(|_| bad(path, "ascii payload is not UTF-8"))?;
        PlyData::Ascii { tokens: ascii_text.split_whitespace() }
    };

    let mut mesh = TriangleMesh { vertices: Vec::new(), colors: Vec::new(), faces: Vec::new() };
    let mut uncertain: Option<Vec<bool>> = None;

    for el in &elements {
        match el.name.as_str() {
            "vertex" => {
                let has = |n: &str| {
                    el.props.iter().any(
                        |p| matches!(p, PlyProp::Scalar { name, .. } if name == n),
                    )
                };
                if !(has("x") && has("y") && has("z")) {
                    return Err(bad(path, "vertex element lacks x/y/z"));
                }
                let has_color = has("red") && has("green") && has("blue");
                if has("uncertain") {
                    uncertain = Some(Vec::with_capacity(el.count));
                }
                for _ in 0..el.count {
                    let mut pos = Vector3::zeros();
                    let mut col = [0.7f32; 3];
                    for p in &el.props {
                        match p {
                            PlyProp::Scalar { name, ty } => {
                                let v = data.next(*ty, path)?;
                                match name.as_str() {
                                    "x" => pos.x = v,
                                    "y" => pos.y = v,
                                    "z" => pos.z = v,
                                    "red" | "green" | "blue" => {
                                        // 8/16-bit colors are code values; float
                                        // colors are already 0..1.
                                        let c = match ty {
                                            Scalar::U8 => v / 255.0,
                                            Scalar::U16 => v / 65535.0,
                                            _ => v,
                                        };
                                        let i = match name.as_str() {
                                            "red" => 0,
                                            "green" => 1,
                                            _ => 2,
                                        };
                                        col[i] = c.clamp(0.0, 1.0) as f32;
                                    }
                                    "uncertain" => {
                                        uncertain
                                            .as_mut()
                                            .expect("declared above")
                                            .push(v != 0.0);
                                    }
                                    _ => {}
                                }
                            }
                            PlyProp::List { count, item, .. } => {
                                let n = data.next(*count, path)? as usize;
                                for _ in 0..n {
                                    data.next(*item, path)?;
                                }
                            }
                        }
                    }
                    mesh.vertices.push(pos);
                    mesh.colors.push(if has_color { col } else { [0.7; 3] });
                }
            }
            "face" => {
                for _ in 0..el.count {
                    for p in &el.props {
                        match p {
                            PlyProp::List { name, count, item }
                                if name == "vertex_indices" || name == "vertex_index" =>
                            {
                                let n = data.next(*count, path)? as usize;
                                let mut idx = Vec::with_capacity(n);
                                for _ in 0..n {
                                    let v = data.next(*item, path)?;
                                    if v < 0.0 {
                                        return Err(bad(path, "negative face index"));
                                    }
                                    idx.push(v as u32);
                                }
                                if n < 3 {
                                    return Err(bad(path, "face with fewer than 3 indices"));
                                }
                                for i in 1..n - 1 {
                                    mesh.faces.push([idx[0], idx[i], idx[i + 1]]);
                                }
                            }
                            PlyProp::List { count, item, .. } => {
                                let n = data.next(*count, path)? as usize;
                                for _ in 0..n {
                                    data.next(*item, path)?;
                                }
                            }
                            PlyProp::Scalar { ty, .. } => {
                                data.next(*ty, path)?;
                            }
                        }
                    }
                }
            }
            _ => {
                // Unknown element: consume and discard its payload.
                for _ in 0..el.count {
                    for p in &el.props {
                        match p {
                            PlyProp::Scalar { ty, .. } => {
                                data.next(*ty, path)?;
                            }
                            PlyProp::List { count, item, .. } => {
                                let n = data.next(*count, path)? as usize;
                                for _ in 0..n {
                                    data.next(*item, path)?;
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    mesh.validate()?;
    if let Some(u) = &uncertain {
        if u.len() != mesh.vertices.len() {
            return Err(bad(path, "uncertain flags do not cover all vertices"));
        }
    }
    Ok((mesh, uncertain))
}

// ---------------------------------------------------------------------------
// OBJ meshes
// ---------------------------------------------------------------------------

/// Reads a Wavefront OBJ: `v x y z [r g b]` and `f` lines (1-based indices,
/// `/vt/vn` suffixes ignored, polygons fan-triangulated). Everything else is
/// skipped.
pub fn load_mesh_obj(path: &Path) -> Result<TriangleMesh, IoError> {
    let text = fs::read_to_string(path)?;
    let mut mesh = TriangleMesh { vertices: Vec::new(), colors: Vec::new(), faces: Vec::new() };
    for (ln, line) in text.lines().enumerate() {
        let mut t = line.split_whitespace();
        match t.next() {
            Some("v") => {
                let mut nums = [0.0f64; 6];
                let mut n = 0;
                for tok in t.take(6) {
                    nums[n] = tok
                        .parse()
                        .map_err(|_| bad(path, format!("line {}: bad vertex", ln + 1)))?;
                    n += 1;
                }
                if n < 3 {
                    return Err(bad(path, format!("line {}: vertex needs x y z", ln + 1)));
                }
                mesh.vertices.push(Vector3::new(nums[0], nums[1], nums[2]));
                mesh.colors.push(if n >= 6 {
                    [nums[3] as f32, nums[4] as f32, nums[5] as f32]
                } else {
                    [0.7; 3]
                });
            }
            Some("f") => {
                let mut idx = Vec::new();
                for tok in t {
                    let first = tok.split('/').next().unwrap_or("");
                    let v: i64 = first
                        .parse()
                        .map_err(|_| bad(path, format!("line {}: bad face index", ln + 1)))?;
                    if v < 1 {
                        return Err(bad(
                            path,
                            format!("line {}: only positive 1-based indices supported", ln + 1),
                        ));
                    }
                    idx.push((v - 1) as u32);
                }
                if idx.len() < 3 {
                    return Err(bad(path, format!("line {}: face needs 3+ vertices", ln + 1)));
                }
                for i in 1..idx.len() - 1 {
                    mesh.faces.push([idx[0], idx[i], idx[i + 1]]);
                }
            }
            _ => {}
        }
    }
    mesh.validate()?;
    Ok(mesh)
}

/// Loads a mesh by extension: `.ply` or `.obj`.
pub fn load_mesh_any(path: &Path) -> Result<TriangleMesh, IoError> {
    match path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref() {
        Some("ply") => Ok(load_mesh_ply(path)?.0),
        Some("obj") => load_mesh_obj(path),
        _ => Err(bad(path, "unsupported mesh extension (expected .ply or .obj)")),
    }
}

// ---------------------------------------------------------------------------
// Hybrid model persistence (PLY + JSON sidecar)
// ---------------------------------------------------------------------------

/// Sidecar stored next to a model PLY (same path, `.json` extension).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSidecar {
    pub provenance: Provenance,
    pub build_stamp: u64,
    pub vis_eps: f64,
    /// Object-to-camera poses of the references fused into this model.
    pub reference_pose_list: Vec<[f64; 16]>,
}

fn sidecar_path(ply: &Path) -> PathBuf {
    ply.with_extension("json")
}

/// Writes the model mesh (with its `uncertain` property) and the sidecar.
pub fn save_model(
    ply_path: &Path,
    model: &HybridModel,
    reference_poses: &[Pose],
) -> Result<(), IoError> {
    save_mesh_ply(ply_path, &model.mesh, Some(&model.uncertain))?;
    let sidecar = ModelSidecar {
        provenance: model.provenance,
        build_stamp: model.build_stamp,
        vis_eps: model.vis_eps,
        reference_pose_list: reference_poses.iter().map(|p| p.to_row_major()).collect(),
    };
    save_json(&sidecar_path(ply_path), &sidecar)
}

/// Loads a model the tool itself saved. Requires the `uncertain` property
/// and the sidecar; normals are recomputed from the mesh.
pub fn load_model(ply_path: &Path) -> Result<(HybridModel, Vec<Pose>), IoError> {
    let (mesh, uncertain) = load_mesh_ply(ply_path)?;
    let uncertain =
        uncertain.ok_or_else(|| bad(ply_path, "model PLY lacks the 'uncertain' property"))?;
    let sidecar: ModelSidecar = load_json(&sidecar_path(ply_path))?;
    let refs = sidecar.reference_pose_list.iter().map(Pose::from_row_major).collect();
    let normals = mesh.vertex_normals();
    Ok((
        HybridModel {
            mesh,
            uncertain,
            normals,
            provenance: sidecar.provenance,
            build_stamp: sidecar.build_stamp,
            vis_eps: sidecar.vis_eps,
        },
        refs,
    ))
}

// ---------------------------------------------------------------------------
// Volume checkpoint
// ---------------------------------------------------------------------------

const VOLUME_MAGIC: &[u8; 4] = b"TSDF";
const VOLUME_VERSION: u32 = 1;

/// Binary volume checkpoint: magic, version, origin, voxel size, truncation,
/// dims, then per-voxel `tsdf, weight, color_weight, r, g, b` as f32, all
/// little-endian.
pub fn save_volume(path: &Path, vol: &TsdfVolume) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(VOLUME_MAGIC)?;
    w.write_all(&VOLUME_VERSION.to_le_bytes())?;
    for c in 0..3 {
        w.write_all(&vol.origin[c].to_le_bytes())?;
    }
    w.write_all(&vol.voxel_size.to_le_bytes())?;
    w.write_all(&vol.truncation.to_le_bytes())?;
    for d in vol.dims {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for v in &vol.voxels {
        for f in [v.tsdf, v.weight, v.color_weight, v.color[0], v.color[1], v.color[2]] {
            w.write_all(&f.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_volume(path: &Path) -> Result<TsdfVolume, IoError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != VOLUME_MAGIC {
        return Err(bad(path, "not a volume checkpoint"));
    }
    let mut u32b = [0u8; 4];
    r.read_exact(&mut u32b)?;
    let version = u32::from_le_bytes(u32b);
    if version != VOLUME_VERSION {
        return Err(bad(path, format!("unsupported checkpoint version {version}")));
    }
    let mut f64b = [0u8; 8];
    let mut read_f64 = |r: &mut BufReader<File>| -> Result<f64, IoError> {
        r.read_exact(&mut f64b)?;
        Ok(f64::from_le_bytes(f64b))
    };
    let origin = Vector3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
    let voxel_size = read_f64(&mut r)?;
    let truncation = read_f64(&mut r)?;
    let mut dims = [0usize; 3];
    for d in &mut dims {
        let mut u64b = [0u8; 8];
        r.read_exact(&mut u64b)?;
        *d = u64::from_le_bytes(u64b) as usize;
    }
    let count = dims
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| bad(path, "voxel count overflows"))?;
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != count * 24 {
        return Err(bad(
            path,
            format!("payload is {} bytes, expected {}", payload.len(), count * 24),
        ));
    }
    let f32_at = |i: usize| f32::from_le_bytes(payload[i * 4..i * 4 + 4].try_into().unwrap());
    let mut voxels = Vec::with_capacity(count);
    for i in 0..count {
        let b = i * 6;
        voxels.push(Voxel {
            tsdf: f32_at(b),
            weight: f32_at(b + 1),
            color_weight: f32_at(b + 2),
            color: [f32_at(b + 3), f32_at(b + 4), f32_at(b + 5)],
        });
    }
    Ok(TsdfVolume { origin, voxel_size, dims, truncation, voxels })
}

// ---------------------------------------------------------------------------
// Memory pool checkpoint
// ---------------------------------------------------------------------------

/// `pose.json` inside a pool entry folder.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PoolEntryMeta {
    /// Object-to-camera pose, 4x4 row-major.
    pub matrix: [f64; 16],
    pub frame_id: u64,
    pub seen_iou: f64,
    /// True for synthetic augmentation views (never real observations).
    pub augmented: bool,
}

/// Writes one pool-style entry folder: color/depth/mask PNGs plus pose.json.
pub fn save_pool_entry(
    dir: &Path,
    frame: &Frame,
    meta: &PoolEntryMeta,
) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    save_color(&dir.join("color.png"), &frame.color)?;
    save_depth_mm(&dir.join("depth.png"), &frame.depth)?;
    save_mask(&dir.join("mask.png"), &frame.mask)?;
    save_json(&dir.join("pose.json"), meta)
}

pub fn load_pool_entry(dir: &Path) -> Result<(Frame, PoolEntryMeta), IoError> {
    let frame = Frame {
        color: load_color(&dir.join("color.png"))?,
        depth: load_depth_mm(&dir.join("depth.png"))?,
        mask: load_mask(&dir.join("mask.png"))?,
    };
    frame.validate()?;
    let meta = load_json(&dir.join("pose.json"))?;
    Ok((frame, meta))
}

// ---------------------------------------------------------------------------
// Reference directories
// ---------------------------------------------------------------------------

/// Writes a reference-view directory: `intrinsics.json` at the root plus one
/// pool-style entry folder per view.
pub fn save_references(dir: &Path, refs: &crate::model::ReferenceSet) -> Result<(), IoError> {
    fs::create_dir_all(dir)?;
    let k = refs
        .frames
        .first()
        .map(|f| f.k)
        .ok_or_else(|| bad(dir, "reference set is empty"))?;
    save_intrinsics(&dir.join(INTRINSICS_FILE), &k)?;
    for (i, rf) in refs.frames.iter().enumerate() {
        let meta = PoolEntryMeta {
            matrix: rf.pose.to_row_major(),
            frame_id: i as u64,
            seen_iou: 1.0,
            augmented: false,
        };
        save_pool_entry(&dir.join(frame_stem(i)), &rf.frame, &meta)?;
    }
    Ok(())
}

/// Loads the posed reference views from a directory written by
/// [`save_references`] (or assembled by hand in the same layout). Entries
/// flagged `augmented` are skipped — references are real captures.
pub fn load_references(dir: &Path) -> Result<crate::model::ReferenceSet, IoError> {
    let k = load_intrinsics(&dir.join(INTRINSICS_FILE))?;
    let mut names: Vec<String> = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    names.sort();
    let mut frames = Vec::new();
    for name in names {
        let (frame, meta) = load_pool_entry(&dir.join(&name))?;
        if meta.augmented {
            continue;
        }
        frames.push(crate::model::RefFrame {
            frame,
            pose: Pose::from_row_major(&meta.matrix),
            k,
        });
    }
    if frames.is_empty() {
        return Err(bad(dir, "no reference entries found"));
    }
    Ok(crate::model::ReferenceSet { frames })
}

// ---------------------------------------------------------------------------
// Metric reports
// ---------------------------------------------------------------------------

pub fn save_report_json(path: &Path, report: &MetricReport) -> Result<(), IoError> {
    save_json(path, report)
}

/// Per-frame CSV; the aggregates live in the JSON report.
pub fn save_report_csv(path: &Path, report: &MetricReport) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame_id,add_m,adds_m,rotation_deg,translation_m,valid")?;
    for f in &report.frames {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            f.frame_id, f.add_m, f.adds_m, f.rotation_deg, f.translation_m, f.valid
        )?;
    }
    w.flush()?;
    Ok(())
}
