//! Scene files.
//!
//! Binary layout: one ASCII header line
//! `corrlab-scenes v1 count=<scenes> fields=<list>\n`, then per scene a
//! little-endian `u64` correspondence count `N` followed by little-endian
//! `f64` values in this order: `N x (x, y, x', y')`, `N` labels (0 or 1),
//! rotation (9, row-major), translation (3), essential matrix (9, row-major).
//!
//! Text layout (`.jsonl`): a header object on the first line, then one JSON
//! object per scene.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ScenePair;
use crate::error::{Error, Result};
use crate::geometry::{CameraPose, CorrespondenceSet, EssentialMatrix, Mat3, Vec3};

const MAGIC: &str = "corrlab-scenes";
const VERSION: u32 = 1;
const FIELDS: &str = "x,y,x2,y2;label;rotation[9];translation[3];essential[9]";

#[derive(Serialize, Deserialize)]
struct TextHeader {
    format: String,
    version: u32,
    count: usize,
    fields: String,
}

#[derive(Serialize, Deserialize)]
struct SceneRecord {
    n: usize,
    points: Vec<[f64; 4]>,
    labels: Vec<u8>,
    rotation: [f64; 9],
    translation: [f64; 3],
    essential: [f64; 9],
}

fn parse_err(index: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        index,
        message: message.into(),
    }
}

fn row_major(m: &Mat3) -> [f64; 9] {
    std::array::from_fn(|k| m[(k / 3, k % 3)])
}

impl SceneRecord {
    fn from_scene(s: &ScenePair) -> Self {
        let t = s.pose_gt.translation;
        Self {
            n: s.correspondences.len(),
            points: s.correspondences.points().to_vec(),
            labels: s.labels.iter().map(|&l| u8::from(l)).collect(),
            rotation: row_major(&s.pose_gt.rotation),
            translation: [t.x, t.y, t.z],
            essential: s.essential_gt.row_major(),
        }
    }

    fn into_scene(self, index: usize) -> Result<ScenePair> {
        let wrap = |e: Error| parse_err(index, e.to_string());
        if self.points.len() != self.n || self.labels.len() != self.n {
            return Err(parse_err(index, "record length does not match n"));
        }
        if self.labels.iter().any(|&l| l > 1) {
            return Err(parse_err(index, "labels must be 0 or 1"));
        }
        let pose = CameraPose::from_unit(
            Mat3::from_row_slice(&self.rotation),
            Vec3::from_row_slice(&self.translation),
        )
        .map_err(wrap)?;
        Ok(ScenePair {
            correspondences: CorrespondenceSet::new(self.points).map_err(wrap)?,
            labels: self.labels.into_iter().map(|l| l == 1).collect(),
            pose_gt: pose,
            essential_gt: EssentialMatrix::from_unit_row_major(&self.essential).map_err(wrap)?,
        })
    }
}

pub fn write_binary(scenes: &[ScenePair], mut w: impl Write) -> Result<()> {
    writeln!(w, "{MAGIC} v{VERSION} count={} fields={FIELDS}", scenes.len())?;
    for s in scenes {
        let r = SceneRecord::from_scene(s);
        w.write_all(&(r.n as u64).to_le_bytes())?;
        let labels = r.labels.iter().map(|&l| f64::from(l));
        let values = r
            .points
            .iter()
            .flatten()
            .copied()
            .chain(labels)
            .chain(r.rotation)
            .chain(r.translation)
            .chain(r.essential);
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_f64s(r: &mut impl Read, count: usize, index: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)
        .map_err(|_| parse_err(index, "truncated scene record"))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

fn parse_header_count(line: &str) -> Result<usize> {
    let mut parts = line.trim_end().split(' ');
    let bad = || parse_err(0, format!("bad header `{}`", line.trim_end()));
    if parts.next() != Some(MAGIC) {
        return Err(bad());
    }
    if parts.next() != Some(&format!("v{VERSION}")) {
        return Err(parse_err(0, "unsupported version"));
    }
    let count = parts
        .next()
        .and_then(|p| p.strip_prefix("count="))
        .and_then(|c| c.parse().ok())
        .ok_or_else(bad)?;
    if parts.next() != Some(&format!("fields={FIELDS}")) {
        return Err(bad());
    }
    Ok(count)
}

pub fn read_binary(r: impl Read) -> Result<Vec<ScenePair>> {
    let mut r = BufReader::new(r);
    let mut header = String::new();
    r.read_line(&mut header)?;
    let count = parse_header_count(&header)?;
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for index in 0..count {
        let mut nbuf = [0u8; 8];
        r.read_exact(&mut nbuf)
            .map_err(|_| parse_err(index, "truncated scene header"))?;
        let n = usize::try_from(u64::from_le_bytes(nbuf))
            .ok()
            .filter(|&n| n < (1 << 32))
            .ok_or_else(|| parse_err(index, "implausible correspondence count"))?;
        let v = read_f64s(&mut r, 5 * n + 21, index)?;
        let (pts, rest) = v.split_at(4 * n);
        let (labels, rest) = rest.split_at(n);
        if labels.iter().any(|&l| l != 0.0 && l != 1.0) {
            return Err(parse_err(index, "labels must be 0 or 1"));
        }
        let record = SceneRecord {
            n,
            points: pts.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            labels: labels.iter().map(|&l| l as u8).collect(),
            rotation: rest[0..9].try_into().expect("9 values"),
            translation: rest[9..12].try_into().expect("3 values"),
            essential: rest[12..21].try_into().expect("9 values"),
        };
        scenes.push(record.into_scene(index)?);
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra)? != 0 {
        return Err(parse_err(count, "trailing bytes after last scene"));
    }
    Ok(scenes)
}

pub fn write_text(scenes: &[ScenePair], mut w: impl Write) -> Result<()> {
    let header = TextHeader {
        format: MAGIC.into(),
        version: VERSION,
        count: scenes.len(),
        fields: FIELDS.into(),
    };
    let json = |e: serde_json::Error| Error::Io(e.into());
    writeln!(w, "{}", serde_json::to_string(&header).map_err(json)?)?;
    for s in scenes {
        writeln!(w, "{}", serde_json::to_string(&SceneRecord::from_scene(s)).map_err(json)?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_text(r: impl Read) -> Result<Vec<ScenePair>> {
    let mut lines = BufReader::new(r).lines();
    let header_line = lines.next().ok_or_else(|| parse_err(0, "missing header"))??;
    let header: TextHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(0, format!("header: {e}")))?;
    if header.format != MAGIC || header.version != VERSION {
        return Err(parse_err(0, "unsupported format or version"));
    }
    let mut scenes = Vec::with_capacity(header.count.min(1 << 16));
    for index in 0..header.count {
        let line = lines
            .next()
            .ok_or_else(|| parse_err(index, "missing scene record"))??;
        let record: SceneRecord =
            serde_json::from_str(&line).map_err(|e| parse_err(index, e.to_string()))?;
        scenes.push(record.into_scene(index)?);
    }
    if let Some(extra) = lines.next()
        && !extra?.trim().is_empty()
    {
        return Err(parse_err(header.count, "trailing records after last scene"));
    }
    Ok(scenes)
}

fn is_text(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "jsonl")
}

/// Writes `.jsonl` paths as text, anything else as binary.
pub fn write_dataset(scenes: &[ScenePair], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let w = BufWriter::new(File::create(path)?);
    if is_text(path) {
        write_text(scenes, w)
    } else {
        write_binary(scenes, w)
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Vec<ScenePair>> {
    let path = path.as_ref();
    let r = File::open(path)?;
    if is_text(path) {
        read_text(r)
    } else {
        read_binary(r)
    }
}
