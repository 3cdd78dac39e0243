//! Attention-map dumps.
//!
//! Each map is a CSV file with a header `query,p0,p1,...` and one row per
//! requested query. Pixel `p` of view `v` is feature-map position
//! `(p / width, p % width)`. Values are written in shortest round-trip form,
//! so reading a file back reproduces the logits exactly.
//!
//! `manifest.json` lists the files together with the layout and the
//! visualization threshold. The threshold is metadata only; no value is
//! clipped.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::sample_input;
use super::{io_error, write_json, Checkpoint, HarnessError, Result};
use crate::scenegen::generate_scene;
use crate::tensor::{Tape, Tensor};

/// Softmax weights at or below this value are hidden when visualizing.
pub const VISUAL_THRESHOLD: f64 = 1e-4;
pub const MANIFEST_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapKind {
    /// Positional logits: query PE against key PE of the view.
    Local,
    /// Content logits: decoder embedding against image features.
    Global,
    /// Pre-softmax logits, `local + global` in bilateral mode.
    Overall,
    /// Attention weights.
    Softmax,
}

impl MapKind {
    fn name(self) -> &'static str {
        match self {
            Self::Local => "local",
            Self::Global => "global",
            Self::Overall => "overall",
            Self::Softmax => "softmax",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapEntry {
    pub layer: usize,
    pub head: usize,
    pub view: usize,
    pub kind: MapKind,
    pub file: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionManifest {
    pub format_version: u32,
    pub config_hash: String,
    pub scene_seed: u64,
    pub query_ids: Vec<usize>,
    pub layers: usize,
    pub heads: usize,
    pub views: usize,
    pub height: usize,
    pub width: usize,
    /// `true` when each view is normalized on its own; otherwise softmax
    /// rows sum to one across all views of a head.
    pub per_view_softmax: bool,
    pub threshold: f64,
    pub maps: Vec<MapEntry>,
}

fn write_csv(path: &Path, queries: &[usize], map: &Tensor) -> Result<()> {
    let cols = map.shape()[1];
    let mut s = String::from("query");
    for p in 0..cols {
        write!(s, ",p{p}").expect("write to string");
    }
    s.push('\n');
    for &q in queries {
        write!(s, "{q}").expect("write to string");
        for v in map.row(q) {
            write!(s, ",{v:?}").expect("write to string");
        }
        s.push('\n');
    }
    std::fs::write(path, s).map_err(io_error(path))
}

/// Reads one map file back: the query ids and a `[queries, pixels]` tensor.
pub fn read_map(path: &Path) -> Result<(Vec<usize>, Tensor)> {
    let text = std::fs::read_to_string(path).map_err(io_error(path))?;
    let bad = |line: usize, message: String| HarnessError::Parse {
        path: format!("{}:{}", path.display(), line + 1),
        message,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| bad(0, "empty file".into()))?;
    let cols = header.split(',').count() - 1;
    let (mut ids, mut data) = (Vec::new(), Vec::new());
    for (n, line) in lines {
        let mut fields = line.split(',');
        let id = fields.next().unwrap_or_default();
        ids.push(id.parse().map_err(|_| bad(n, format!("bad query id {id:?}")))?);
        let row: Vec<f64> = fields
            .map(|f| f.parse().map_err(|_| bad(n, format!("bad value {f:?}"))))
            .collect::<Result<_>>()?;
        if row.len() != cols {
            return Err(bad(n, format!("{} values, header has {cols}", row.len())));
        }
        data.extend(row);
    }
    Ok((ids.clone(), Tensor::new([ids.len(), cols], data)?))
}

pub fn read_manifest(dir: &Path) -> Result<AttentionManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(io_error(&path))?;
    serde_json::from_str(&text).map_err(|e| HarnessError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// Runs the checkpoint on scene `scene_seed` and writes every recorded
/// current-frame map of the requested queries into `out`.
pub fn dump_attention(
    ckpt: &Checkpoint,
    scene_seed: u64,
    query_ids: &[usize],
    out: &Path,
) -> Result<AttentionManifest> {
    let cfg = &ckpt.config;
    let queries = cfg.model.queries;
    if let Some(&id) = query_ids.iter().find(|&&id| id >= queries) {
        return Err(HarnessError::QueryId { id, queries });
    }
    let (model, store) = ckpt.model()?;
    let sample = generate_scene(&cfg.data, scene_seed)?;
    let mut tape = Tape::with_params(&store);
    let output = model.forward(&mut tape, &sample_input(&sample, cfg.model.temporal.mode), true)?;
    std::fs::create_dir_all(out).map_err(io_error(out))?;

    let mut maps = Vec::new();
    for (layer, record) in output.records.iter().enumerate() {
        for (head, views) in record.maps.iter().enumerate() {
            for (view, m) in views.iter().enumerate() {
                let kinds = [
                    (MapKind::Local, m.local.as_ref()),
                    (MapKind::Global, m.global.as_ref()),
                    (MapKind::Overall, Some(&m.overall)),
                    (MapKind::Softmax, Some(&m.softmax)),
                ];
                for (kind, map) in kinds {
                    let Some(map) = map else { continue };
                    let file = format!("l{layer}_h{head}_v{view}_{}.csv", kind.name());
                    write_csv(&out.join(&file), query_ids, map)?;
                    maps.push(MapEntry {
                        layer,
                        head,
                        view,
                        kind,
                        file,
                    });
                }
            }
        }
    }
    let first = output.records.first().and_then(|r| r.maps.first());
    let manifest = AttentionManifest {
        format_version: MANIFEST_VERSION,
        config_hash: ckpt.config_hash.clone(),
        scene_seed,
        query_ids: query_ids.to_vec(),
        layers: output.records.len(),
        heads: output.records.first().map_or(0, |r| r.maps.len()),
        views: first.map_or(0, Vec::len),
        height: sample.current.rig.height,
        width: sample.current.rig.width,
        per_view_softmax: cfg.model.per_view_softmax,
        threshold: VISUAL_THRESHOLD,
        maps,
    };
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::train::Trainer;
    use crate::harness::ExperimentConfig;

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::smoke();
        cfg.model.layers = 2;
        cfg
    }

    #[test]
    fn dump_round_trips_and_decomposes() {
        let ckpt = Trainer::new(&tiny()).unwrap().checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let m = dump_attention(&ckpt, 3, &[0, 2], dir.path()).unwrap();
        assert_eq!(read_manifest(dir.path()).unwrap(), m);
        assert_eq!(m.threshold, 1e-4);
        assert_eq!((m.layers, m.heads, m.views), (2, 2, 4));
        assert_eq!(m.maps.len(), 2 * 2 * 4 * 4);
        let load = |l, h, v, k| {
            let e = m
                .maps
                .iter()
                .find(|e| (e.layer, e.head, e.view, e.kind) == (l, h, v, k))
                .unwrap();
            read_map(&dir.path().join(&e.file)).unwrap()
        };
        for l in 0..2 {
            for h in 0..2 {
                let mut sums = [0.0; 2];
                for v in 0..4 {
                    let (ids, overall) = load(l, h, v, MapKind::Overall);
                    assert_eq!(ids, vec![0, 2]);
                    let (_, local) = load(l, h, v, MapKind::Local);
                    let (_, global) = load(l, h, v, MapKind::Global);
                    for i in 0..overall.len() {
                        assert_eq!(overall.data()[i], local.data()[i] + global.data()[i]);
                    }
                    let (_, w) = load(l, h, v, MapKind::Softmax);
                    for (q, s) in sums.iter_mut().enumerate() {
                        *s += w.row(q).iter().sum::<f64>();
                    }
                }
                assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn invalid_query_id() {
        let ckpt = Trainer::new(&tiny()).unwrap().checkpoint();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            dump_attention(&ckpt, 3, &[4], dir.path()),
            Err(HarnessError::QueryId { id: 4, queries: 4 })
        ));
    }

    #[test]
    fn malformed_csv_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, "query,p0,p1\n0,1.0\n").unwrap();
        assert!(matches!(read_map(&p), Err(HarnessError::Parse { .. })));
    }
}
