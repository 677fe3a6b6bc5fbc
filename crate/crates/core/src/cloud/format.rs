//! Versioned on-disk cloud format.
//!
//! A cloud directory holds `cloud.json` plus one array file per frame:
//!
//! ```text
//! cloud.json
//! frame_000.csv   # header `u,v,x,y,z,conf`, one row per entry
//! frame_001.bin   # or: count×6 little-endian f64, same column order
//! ```
//!
//! The manifest fields are `version`, `num_frames`, `width`, `height`,
//! `reference_frame_index`, `dense_raster`, `camera` (`fx, fy, cx, cy,
//! width, height`), `frames` (`index, timestamp, file, format, count`) and
//! an optional `camera_positions` list. Dense rasters store `width·height`
//! entries in row-major pixel order with `(u, v) = (col, row)`; pixels
//! without a prediction carry `conf = 0`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CloudEntry, CloudFrame, PredictedCloud};
use crate::geometry::PinholeCamera;

pub const CLOUD_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_NAME: &str = "cloud.json";

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("I/O error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("malformed manifest {path}: {source}")]
    Manifest { path: PathBuf, source: serde_json::Error },
    #[error("{path}: {message}")]
    Data { path: PathBuf, message: String },
    #[error("cloud failed schema check: {}", .0.join("; "))]
    Schema(Vec<String>),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> FormatError + '_ {
    move |source| FormatError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameFormat {
    Csv,
    Bin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    pub timestamp: f64,
    pub file: String,
    pub format: FrameFormat,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CloudManifest {
    pub version: u32,
    pub num_frames: usize,
    pub width: usize,
    pub height: usize,
    pub reference_frame_index: usize,
    pub dense_raster: bool,
    pub camera: PinholeCamera,
    pub frames: Vec<FrameRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub camera_positions: Option<Vec<[f64; 3]>>,
}

/// Write `cloud` under `dir`, creating it if needed.
pub fn write_cloud(dir: &Path, cloud: &PredictedCloud, camera: &PinholeCamera, format: FrameFormat) -> Result<CloudManifest, FormatError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut frames = Vec::with_capacity(cloud.frames.len());
    for (index, frame) in cloud.frames.iter().enumerate() {
        let ext = match format {
            FrameFormat::Csv => "csv",
            FrameFormat::Bin => "bin",
        };
        let file = format!("frame_{index:03}.{ext}");
        let path = dir.join(&file);
        let f = fs::File::create(&path).map_err(io_err(&path))?;
        let mut w = BufWriter::new(f);
        match format {
            FrameFormat::Csv => {
                writeln!(w, "u,v,x,y,z,conf").map_err(io_err(&path))?;
                for e in &frame.entries {
                    writeln!(w, "{},{},{},{},{},{}", e.pixel.x, e.pixel.y, e.point.x, e.point.y, e.point.z, e.confidence).map_err(io_err(&path))?;
                }
            }
            FrameFormat::Bin => {
                for e in &frame.entries {
                    for v in [e.pixel.x, e.pixel.y, e.point.x, e.point.y, e.point.z, e.confidence] {
                        w.write_all(&v.to_le_bytes()).map_err(io_err(&path))?;
                    }
                }
            }
        }
        w.flush().map_err(io_err(&path))?;
        frames.push(FrameRecord { index, timestamp: frame.timestamp, file, format, count: frame.entries.len() });
    }
    let manifest = CloudManifest {
        version: CLOUD_FORMAT_VERSION,
        num_frames: cloud.frames.len(),
        width: cloud.width,
        height: cloud.height,
        reference_frame_index: 0,
        dense_raster: cloud.dense_raster,
        camera: *camera,
        frames,
        camera_positions: cloud.camera_positions.as_ref().map(|ps| ps.iter().map(|p| [p.x, p.y, p.z]).collect()),
    };
    let path = dir.join(MANIFEST_NAME);
    let text = serde_json::to_string_pretty(&manifest).map_err(|source| FormatError::Manifest { path: path.clone(), source })?;
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CloudManifest, FormatError> {
    let path = dir.join(MANIFEST_NAME);
    let text = fs::read_to_string(&path).map_err(io_err(&path))?;
    serde_json::from_str(&text).map_err(|source| FormatError::Manifest { path, source })
}

fn read_frame_rows(dir: &Path, rec: &FrameRecord) -> Result<Vec<[f64; 6]>, FormatError> {
    let path = dir.join(&rec.file);
    let data_err = |message: String| FormatError::Data { path: path.clone(), message };
    match rec.format {
        FrameFormat::Csv => {
            let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(&path).map_err(|e| data_err(e.to_string()))?;
            let header: Vec<String> = reader.headers().map_err(|e| data_err(e.to_string()))?.iter().map(str::to_owned).collect();
            if header != ["u", "v", "x", "y", "z", "conf"] {
                return Err(data_err(format!("expected header u,v,x,y,z,conf, found {}", header.join(","))));
            }
            let mut rows = Vec::new();
            for (line, record) in reader.records().enumerate() {
                let record = record.map_err(|e| data_err(e.to_string()))?;
                if record.len() != 6 {
                    return Err(data_err(format!("row {}: expected 6 columns, found {}", line + 1, record.len())));
                }
                let mut row = [0.0; 6];
                for (slot, field) in row.iter_mut().zip(record.iter()) {
                    *slot = field.parse().map_err(|_| data_err(format!("row {}: cannot parse {field:?}", line + 1)))?;
                }
                rows.push(row);
            }
            Ok(rows)
        }
        FrameFormat::Bin => {
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            if bytes.len() % 48 != 0 {
                return Err(data_err(format!("size {} is not a multiple of 48 bytes", bytes.len())));
            }
            Ok(bytes
                .chunks_exact(48)
                .map(|chunk| {
                    let mut row = [0.0; 6];
                    for (slot, b) in row.iter_mut().zip(chunk.chunks_exact(8)) {
                        *slot = f64::from_le_bytes(b.try_into().expect("8-byte chunk"));
                    }
                    row
                })
                .collect())
        }
    }
}

fn entry_from_row(row: &[f64; 6]) -> CloudEntry {
    CloudEntry::new(Vector2::new(row[0], row[1]), Vector3::new(row[2], row[3], row[4]), row[5])
}

/// Load a cloud directory after it passes [`check_cloud`].
pub fn read_cloud(dir: &Path) -> Result<(PredictedCloud, CloudManifest), FormatError> {
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.frames.len());
    let mut violations = check_manifest(&manifest);
    for rec in &manifest.frames {
        let rows = read_frame_rows(dir, rec)?;
        violations.extend(check_rows(&manifest, rec, &rows));
        frames.push(CloudFrame { timestamp: rec.timestamp, entries: rows.iter().map(entry_from_row).collect() });
    }
    if !violations.is_empty() {
        return Err(FormatError::Schema(violations));
    }
    let cloud = PredictedCloud {
        width: manifest.width,
        height: manifest.height,
        dense_raster: manifest.dense_raster,
        frames,
        camera_positions: manifest.camera_positions.as_ref().map(|ps| ps.iter().map(|p| Vector3::new(p[0], p[1], p[2])).collect()),
    };
    Ok((cloud, manifest))
}

/// Validate a cloud directory. Returns every violation found.
pub fn check_cloud(dir: &Path) -> Result<CloudManifest, FormatError> {
    let manifest = read_manifest(dir)?;
    let mut violations = check_manifest(&manifest);
    for rec in &manifest.frames {
        match read_frame_rows(dir, rec) {
            Ok(rows) => violations.extend(check_rows(&manifest, rec, &rows)),
            Err(e) => violations.push(e.to_string()),
        }
    }
    if violations.is_empty() {
        Ok(manifest)
    } else {
        Err(FormatError::Schema(violations))
    }
}

fn check_manifest(m: &CloudManifest) -> Vec<String> {
    let mut v = Vec::new();
    if m.version != CLOUD_FORMAT_VERSION {
        v.push(format!("unsupported version {} (expected {CLOUD_FORMAT_VERSION})", m.version));
    }
    if m.num_frames != m.frames.len() {
        v.push(format!("num_frames {} but {} frame records", m.num_frames, m.frames.len()));
    }
    if m.num_frames == 0 {
        v.push("cloud has no frames".into());
    }
    if m.reference_frame_index != 0 {
        v.push(format!("reference_frame_index must be 0, found {}", m.reference_frame_index));
    }
    if m.width == 0 || m.height == 0 {
        v.push(format!("image size {}x{} is empty", m.width, m.height));
    }
    if m.camera.width != m.width || m.camera.height != m.height {
        v.push(format!("camera size {}x{} differs from cloud size {}x{}", m.camera.width, m.camera.height, m.width, m.height));
    }
    if let Err(e) = m.camera.validate() {
        v.push(e.to_string());
    }
    for (i, rec) in m.frames.iter().enumerate() {
        if rec.index != i {
            v.push(format!("frame record {i} has index {}", rec.index));
        }
        if !rec.timestamp.is_finite() {
            v.push(format!("frame {i}: timestamp is not finite"));
        }
        if i > 0 && rec.timestamp < m.frames[i - 1].timestamp {
            v.push(format!("frame {i}: timestamps decrease"));
        }
        if m.dense_raster && rec.count != m.width * m.height {
            v.push(format!("frame {i}: dense raster needs {} entries, manifest declares {}", m.width * m.height, rec.count));
        }
    }
    if let Some(ps) = &m.camera_positions {
        if ps.len() != m.num_frames {
            v.push(format!("{} camera positions for {} frames", ps.len(), m.num_frames));
        }
        if ps.iter().flatten().any(|x| !x.is_finite()) {
            v.push("camera positions must be finite".into());
        }
    }
    v
}

fn check_rows(m: &CloudManifest, rec: &FrameRecord, rows: &[[f64; 6]]) -> Vec<String> {
    const MAX_REPORTED: usize = 5;
    let mut v = Vec::new();
    if rows.len() != rec.count {
        v.push(format!("frame {}: manifest declares {} entries, file has {}", rec.index, rec.count, rows.len()));
    }
    let mut bad = 0;
    for (k, row) in rows.iter().enumerate() {
        let mut problem = None;
        let (u, vv, conf) = (row[0], row[1], row[5]);
        if m.dense_raster {
            let (col, r) = ((k % m.width.max(1)) as f64, (k / m.width.max(1)) as f64);
            if u != col || vv != r {
                problem = Some(format!("pixel ({u}, {vv}) breaks row-major order, expected ({col}, {r})"));
            }
        } else if !(u >= 0.0 && vv >= 0.0 && u < m.width as f64 && vv < m.height as f64) {
            problem = Some(format!("pixel ({u}, {vv}) outside the image"));
        }
        if problem.is_none() {
            if conf == 0.0 {
                // explicit hole
            } else if !(conf >= 1.0 && conf.is_finite()) {
                problem = Some(format!("confidence {conf} must be 0 (hole) or in [1, ∞)"));
            } else if row[2..5].iter().any(|x| !x.is_finite()) {
                problem = Some("non-finite point with positive confidence".into());
            }
        }
        if let Some(p) = problem {
            bad += 1;
            if bad <= MAX_REPORTED {
                v.push(format!("frame {} entry {k}: {p}", rec.index));
            }
        }
    }
    if bad > MAX_REPORTED {
        v.push(format!("frame {}: {} more invalid entries", rec.index, bad - MAX_REPORTED));
    }
    v
}
