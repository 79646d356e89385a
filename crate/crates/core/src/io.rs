//! MOT-challenge text rows, the `JDEB` binary embedding sidecar and the
//! `key=value` tracker configuration file.
//!
//! MOT rows are `frame,id,bb_left,bb_top,bb_width,bb_height,conf,x,y,z`.
//! Detections use id `-1`. Numbers are written in their shortest
//! round-trip decimal form, so a canonical file parses and re-serializes to
//! identical bytes.
//!
//! A `JDEB` file is a little-endian header
//!
//! ```text
//! magic   4 bytes  "JDEB"
//! version u32      1
//! count   u64      number of rows
//! dim     u32      floats per row
//! ```
//!
//! followed by `count * dim` `f32` values, row-major, in the same row order
//! as the detection file.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::metrics::{SequenceResult, TrackRow};
use crate::tracker::{Detection, TrackerConfig};

pub const JDEB_MAGIC: &[u8; 4] = b"JDEB";
pub const JDEB_VERSION: u32 = 1;
const JDEB_HEADER_LEN: usize = 4 + 4 + 8 + 4;
/// Allowed deviation of a stored embedding's norm from 1.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotRow {
    pub frame: u64,
    pub id: i64,
    pub bb_left: f64,
    pub bb_top: f64,
    pub bb_width: f64,
    pub bb_height: f64,
    pub conf: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl MotRow {
    pub fn new(frame: u64, id: i64, bbox: BBox, conf: f64) -> Self {
        Self {
            frame,
            id,
            bb_left: bbox.x,
            bb_top: bbox.y,
            bb_width: bbox.w,
            bb_height: bbox.h,
            conf,
            x: -1.0,
            y: -1.0,
            z: -1.0,
        }
    }

    pub fn bbox(&self) -> BBox {
        BBox::new(self.bb_left, self.bb_top, self.bb_width, self.bb_height)
    }
}

fn parse_integral(field: &str, line: usize, what: &str) -> Result<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Ok(v);
    }
    match field.parse::<f64>() {
        Ok(v) if v.fract() == 0.0 && v.abs() < 9.0e15 => Ok(v as i64),
        _ => Err(Error::format(line, format!("{what} `{field}` is not an integer"))),
    }
}

/// Parses MOT text. Blank lines are skipped; rows may carry 6 to 10 fields,
/// missing trailing fields default to `conf = 1` and `x = y = z = -1`.
pub fn parse_mot(text: &str) -> Result<Vec<MotRow>> {
    let mut rows = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let raw = raw.trim();
        if raw.is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').map(str::trim).collect();
        if !(6..=10).contains(&fields.len()) {
            return Err(Error::format(
                line,
                format!("expected 6 to 10 fields, got {}", fields.len()),
            ));
        }
        let frame = parse_integral(fields[0], line, "frame")?;
        if frame < 1 {
            return Err(Error::format(line, format!("frame must be >= 1, got {frame}")));
        }
        let id = parse_integral(fields[1], line, "id")?;
        let num = |k: usize, default: f64| -> Result<f64> {
            match fields.get(k) {
                None => Ok(default),
                Some(s) => s
                    .parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::format(line, format!("field {} `{s}` is not a finite number", k + 1))),
            }
        };
        rows.push(MotRow {
            frame: frame as u64,
            id,
            bb_left: num(2, 0.0)?,
            bb_top: num(3, 0.0)?,
            bb_width: num(4, 0.0)?,
            bb_height: num(5, 0.0)?,
            conf: num(6, 1.0)?,
            x: num(7, -1.0)?,
            y: num(8, -1.0)?,
            z: num(9, -1.0)?,
        });
    }
    Ok(rows)
}

pub fn format_mot(rows: &[MotRow]) -> String {
    let mut out = String::with_capacity(rows.len() * 48);
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.frame, r.id, r.bb_left, r.bb_top, r.bb_width, r.bb_height, r.conf, r.x, r.y, r.z
        ));
    }
    out
}

pub fn rows_to_sequence(rows: &[MotRow]) -> Result<SequenceResult> {
    for (i, r) in rows.iter().enumerate() {
        if !r.bbox().is_valid() {
            return Err(Error::format(i + 1, "box needs positive width and height"));
        }
    }
    SequenceResult::new(
        rows.iter()
            .map(|r| TrackRow {
                frame: r.frame,
                id: r.id,
                bbox: r.bbox(),
            })
            .collect(),
    )
}

pub fn sequence_to_rows(seq: &SequenceResult) -> Vec<MotRow> {
    seq.rows()
        .iter()
        .map(|r| MotRow::new(r.frame, r.id, r.bbox, 1.0))
        .collect()
}

/// Detections grouped per frame `1..=last_frame`, together with their source
/// row indices. `embeddings`, when given, supplies one row per MOT row.
pub fn group_detections(rows: &[MotRow], embeddings: Option<&EmbeddingMatrix>) -> Result<Vec<Vec<Detection>>> {
    if let Some(e) = embeddings {
        if e.count() != rows.len() {
            return Err(Error::format(
                0,
                format!("{} detection rows but {} embeddings", rows.len(), e.count()),
            ));
        }
    }
    let last = rows.iter().map(|r| r.frame).max().unwrap_or(0) as usize;
    let mut frames: Vec<Vec<Detection>> = vec![Vec::new(); last];
    for (i, r) in rows.iter().enumerate() {
        let emb = embeddings.map(|e| e.row(i).iter().map(|&v| v as f64).collect());
        let det = Detection::new(r.bbox(), r.conf, emb).map_err(|e| Error::format(i + 1, e.to_string()))?;
        frames[r.frame as usize - 1].push(det);
    }
    Ok(frames)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMatrix {
    dim: usize,
    data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::domain(format!(
                "{} floats do not form rows of {dim}",
                data.len()
            )));
        }
        Ok(Self { dim, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        if rows.iter().any(|r| r.as_ref().len() != dim) {
            return Err(Error::domain("embedding rows differ in length"));
        }
        let data = rows.iter().flat_map(|r| r.as_ref().iter().map(|&v| v as f32)).collect();
        if rows.is_empty() {
            return Ok(Self { dim: 1, data });
        }
        Self::new(dim, data)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn write_embeddings<W: Write>(mut w: W, m: &EmbeddingMatrix) -> Result<()> {
    w.write_all(JDEB_MAGIC)?;
    w.write_all(&JDEB_VERSION.to_le_bytes())?;
    w.write_all(&(m.count() as u64).to_le_bytes())?;
    w.write_all(&(m.dim as u32).to_le_bytes())?;
    for v in &m.data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads and validates a `JDEB` stream: header, exact payload length and
/// unit norm of every row.
pub fn read_embeddings<R: Read>(mut r: R) -> Result<EmbeddingMatrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < JDEB_HEADER_LEN {
        return Err(Error::format(0, "embedding file shorter than its header"));
    }
    if &bytes[0..4] != JDEB_MAGIC {
        return Err(Error::format(0, "bad embedding file magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != JDEB_VERSION {
        return Err(Error::format(
            0,
            format!("unsupported embedding file version {version}"),
        ));
    }
    let count = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let dim = u32::from_le_bytes(bytes[16..20].try_into().expect("4 bytes")) as usize;
    if dim == 0 {
        return Err(Error::format(0, "embedding dimension must be positive"));
    }
    let expected = (count as u128) * (dim as u128) * 4;
    let payload = &bytes[JDEB_HEADER_LEN..];
    if payload.len() as u128 != expected {
        return Err(Error::format(
            0,
            format!(
                "header announces {count}x{dim} floats but payload has {} bytes",
                payload.len()
            ),
        ));
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let m = EmbeddingMatrix { dim, data };
    for i in 0..m.count() {
        let norm = m.row(i).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        if !((norm - 1.0).abs() <= UNIT_NORM_TOLERANCE) {
            return Err(Error::format(
                0,
                format!("embedding row {i} has norm {norm}, expected 1"),
            ));
        }
    }
    Ok(m)
}

/// Parses `key=value` lines; `#` starts a comment.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::format(i + 1, format!("expected key=value, got `{line}`")))?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Applies config-file entries to `cfg`. Keys mirror the `track` flags
/// without their leading dashes.
pub fn apply_tracker_config(entries: &BTreeMap<String, String>, cfg: &mut TrackerConfig) -> Result<()> {
    fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
        v.parse()
            .map_err(|_| Error::format(0, format!("config key `{k}`: cannot parse `{v}`")))
    }
    for (k, v) in entries {
        match k.as_str() {
            "lambda" => cfg.lambda = num(k, v)?,
            "alpha" => cfg.alpha_ema = num(k, v)?,
            "confirm-frames" => cfg.confirm_frames = num(k, v)?,
            "max-lost" => cfg.max_lost_frames = num(k, v)?,
            "gate" => cfg.gate = num(k, v)?,
            "max-cost" => cfg.max_cost = num(k, v)?,
            "min-conf" => cfg.min_confidence = num(k, v)?,
            "motion-only" => cfg.motion_only = num(k, v)?,
            other => return Err(Error::format(0, format!("unknown config key `{other}`"))),
        }
    }
    Ok(())
}
