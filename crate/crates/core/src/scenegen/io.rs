//! Scene files: a JSON document plus a binary sidecar holding the feature
//! maps.
//!
//! Sidecar layout, all little-endian:
//!
//! | bytes | content |
//! |-------|---------|
//! | 8 | magic `CAPEBLOB` |
//! | 4 | `u32` format version |
//! | 4 | `u32` number of dimensions `k` |
//! | 8·k | `u64` extents |
//! | 8·∏extents | `f64` payload, row-major |
//!
//! Scene sidecars have four dimensions: frame (current, previous), camera,
//! pixel, channel.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Frame, Result, SceneSample, ScenegenError};
use crate::detection::Box3D;
use crate::geometry::{CameraRig, EgoMotion};
use crate::tensor::Tensor;

pub const SCHEMA_VERSION: u32 = 1;
pub const BLOB_MAGIC: &[u8; 8] = b"CAPEBLOB";
pub const BLOB_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FrameFile {
    boxes: Vec<Box3D>,
    rig: CameraRig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SceneFile {
    schema_version: u32,
    seed: u64,
    motion: EgoMotion,
    current: FrameFile,
    previous: FrameFile,
    /// Sidecar path relative to the JSON file.
    features: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ScenegenError + '_ {
    move |source| ScenegenError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn blob_err(path: &Path, message: impl Into<String>) -> ScenegenError {
    ScenegenError::Blob {
        path: path.display().to_string(),
        message: message.into(),
    }
}

pub fn write_blob(path: &Path, extents: &[usize], payload: &[f64]) -> Result<()> {
    let count: usize = extents.iter().product();
    assert_eq!(count, payload.len(), "payload does not match extents");
    let mut bytes = Vec::with_capacity(16 + 8 * extents.len() + 8 * payload.len());
    bytes.extend_from_slice(BLOB_MAGIC);
    bytes.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(extents.len() as u32).to_le_bytes());
    for &e in extents {
        bytes.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in payload {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

/// Returns the extents and payload of a sidecar.
pub fn read_blob(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let take = |at: usize, n: usize, what: &str| -> Result<&[u8]> {
        bytes
            .get(at..at + n)
            .ok_or_else(|| blob_err(path, format!("truncated while reading {what} at byte {at}")))
    };
    if take(0, 8, "magic")? != BLOB_MAGIC {
        return Err(blob_err(path, "bad magic"));
    }
    let version = u32::from_le_bytes(take(8, 4, "version")?.try_into().expect("4 bytes"));
    if version != BLOB_VERSION {
        return Err(blob_err(path, format!("unsupported blob version {version}")));
    }
    let dims = u32::from_le_bytes(take(12, 4, "dimension count")?.try_into().expect("4 bytes")) as usize;
    let mut extents = Vec::with_capacity(dims);
    for d in 0..dims {
        let raw = take(16 + 8 * d, 8, "extent")?;
        extents.push(u64::from_le_bytes(raw.try_into().expect("8 bytes")) as usize);
    }
    let start = 16 + 8 * dims;
    let count = extents
        .iter()
        .try_fold(1usize, |a, &e| a.checked_mul(e))
        .ok_or_else(|| blob_err(path, "extents overflow"))?;
    let body = &bytes[start.min(bytes.len())..];
    if body.len() != count * 8 {
        return Err(blob_err(
            path,
            format!("payload holds {} bytes, extents need {}", body.len(), count * 8),
        ));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((extents, payload))
}

/// Writes `path` (JSON) and a sidecar next to it with extension `capeblob`.
pub fn save_scene(sample: &SceneSample, path: &Path) -> Result<()> {
    let blob_path = path.with_extension("capeblob");
    let blob_name = blob_path
        .file_name()
        .expect("path has a file name")
        .to_string_lossy()
        .into_owned();
    let frames = [&sample.current, &sample.previous];
    let cams = sample.current.features.len();
    let (pixels, channels) = sample
        .current
        .features
        .first()
        .map(|t| (t.shape()[0], t.shape()[1]))
        .unwrap_or((0, 0));
    let mut payload = Vec::with_capacity(2 * cams * pixels * channels);
    for f in frames {
        for t in &f.features {
            payload.extend_from_slice(t.data());
        }
    }
    write_blob(&blob_path, &[2, cams, pixels, channels], &payload)?;
    let file = SceneFile {
        schema_version: SCHEMA_VERSION,
        seed: sample.seed,
        motion: sample.motion,
        current: FrameFile {
            boxes: sample.current.boxes.clone(),
            rig: sample.current.rig.clone(),
        },
        previous: FrameFile {
            boxes: sample.previous.boxes.clone(),
            rig: sample.previous.rig.clone(),
        },
        features: blob_name,
    };
    let json = serde_json::to_string_pretty(&file).expect("scene serializes");
    fs::write(path, json).map_err(io_err(path))
}

pub fn load_scene(path: &Path) -> Result<SceneSample> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| ScenegenError::Parse {
        path: path.display().to_string(),
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    if file.schema_version != SCHEMA_VERSION {
        return Err(ScenegenError::Schema {
            path: path.display().to_string(),
            found: file.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    file.current.rig.validate()?;
    file.previous.rig.validate()?;
    let blob_path = path.parent().unwrap_or(Path::new(".")).join(&file.features);
    let (extents, payload) = read_blob(&blob_path)?;
    let cams = file.current.rig.len();
    let pixels = file.current.rig.pixels();
    if extents.len() != 4 || extents[0] != 2 || extents[1] != cams || extents[2] != pixels {
        return Err(blob_err(
            &blob_path,
            format!("extents {extents:?} do not match 2 frames of {cams} cameras with {pixels} pixels"),
        ));
    }
    let channels = extents[3];
    let mut maps = payload
        .chunks_exact((pixels * channels).max(1))
        .map(|c| Tensor::new([pixels, channels], c.to_vec()).expect("sized"));
    let mut frame = |f: FrameFile| Frame {
        features: maps.by_ref().take(cams).collect(),
        boxes: f.boxes,
        rig: f.rig,
    };
    let current = frame(file.current);
    let previous = frame(file.previous);
    Ok(SceneSample {
        seed: file.seed,
        current,
        previous,
        motion: file.motion,
    })
}
