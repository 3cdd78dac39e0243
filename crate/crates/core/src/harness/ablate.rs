use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::eval::{evaluate_model, split_seeds, EvalSplit};
use super::train::train;
use super::{write_json, ExperimentConfig, HarnessError, Result};
use crate::detection::DeskMetrics;
use crate::embedding::PeMode;
use crate::temporal::{FusionKind, TemporalMode};

/// One row of an ablation table: a label and the flags it sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: u8,
    pub label: char,
    pub description: String,
    pub config: ExperimentConfig,
}

fn row(
    table: u8,
    label: char,
    description: &str,
    base: &ExperimentConfig,
    set: impl FnOnce(&mut ExperimentConfig),
) -> AblationRow {
    let mut config = base.clone();
    set(&mut config);
    AblationRow {
        table,
        label,
        description: description.to_string(),
        config,
    }
}

/// The flag combinations of one ablation table, applied on top of `base`.
///
/// * 4: view of the position embedding × bilateral attention
/// * 5: feature guidance on queries × keys
/// * 6: shared or per-frame queries, with and without the previous-frame loss
/// * 7: fusion operator × ego-motion embedding
pub fn ablation_rows(base: &ExperimentConfig, table: u8) -> Result<Vec<AblationRow>> {
    let single = |c: &mut ExperimentConfig| {
        c.model.temporal.mode = TemporalMode::Off;
        c.model.query_fpe = true;
        c.model.key_fpe = true;
    };
    let temporal = |c: &mut ExperimentConfig| {
        c.model.pe_mode = PeMode::Camera;
        c.model.bilateral = true;
        c.model.query_fpe = true;
        c.model.key_fpe = true;
        c.model.temporal.fusion = FusionKind::ChannelAttention;
        c.model.temporal.ego_embedding = true;
    };
    let rows = match table {
        4 => [
            ('a', "global PE, plain attention", PeMode::Global, false),
            ('b', "global PE, bilateral", PeMode::Global, true),
            ('c', "camera PE, plain attention", PeMode::Camera, false),
            ('d', "camera PE, bilateral", PeMode::Camera, true),
        ]
        .into_iter()
        .map(|(l, d, pe, bilateral)| {
            row(4, l, d, base, |c| {
                single(c);
                c.model.pe_mode = pe;
                c.model.bilateral = bilateral;
            })
        })
        .collect(),
        5 => [
            ('a', "no feature guidance", false, false),
            ('b', "Q-FPE", true, false),
            ('c', "K-FPE", false, true),
            ('d', "Q-FPE and K-FPE", true, true),
        ]
        .into_iter()
        .map(|(l, d, q, k)| {
            row(5, l, d, base, |c| {
                single(c);
                c.model.pe_mode = PeMode::Camera;
                c.model.bilateral = true;
                c.model.query_fpe = q;
                c.model.key_fpe = k;
            })
        })
        .collect(),
        6 => [
            ('a', "shared queries", TemporalMode::SharedQueries, false),
            ('b', "per-frame queries", TemporalMode::SeparateQueries, false),
            (
                'c',
                "per-frame queries, previous-frame loss",
                TemporalMode::SeparateQueries,
                true,
            ),
        ]
        .into_iter()
        .map(|(l, d, mode, prev)| {
            row(6, l, d, base, |c| {
                temporal(c);
                c.model.temporal.mode = mode;
                c.model.temporal.prev_loss = prev;
            })
        })
        .collect(),
        7 => [
            ('a', "concat + MLP", FusionKind::ConcatMlp, false),
            ('b', "concat + MLP, ego embedding", FusionKind::ConcatMlp, true),
            ('c', "channel attention", FusionKind::ChannelAttention, false),
            (
                'd',
                "channel attention, ego embedding",
                FusionKind::ChannelAttention,
                true,
            ),
        ]
        .into_iter()
        .map(|(l, d, fusion, ego)| {
            row(7, l, d, base, |c| {
                temporal(c);
                c.model.temporal.mode = TemporalMode::SeparateQueries;
                c.model.temporal.prev_loss = true;
                c.model.temporal.fusion = fusion;
                c.model.temporal.ego_embedding = ego;
            })
        })
        .collect(),
        other => {
            return Err(HarnessError::Config(format!(
                "no ablation table {other}; expected 4, 5, 6 or 7"
            )))
        }
    };
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    /// Step at which training produced a non-finite loss.
    pub diverged_at: Option<usize>,
    pub final_loss: Option<f64>,
    pub metrics: DeskMetrics,
}

/// Mean, minimum and maximum over seeds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

impl Spread {
    pub fn of(values: impl IntoIterator<Item = f64>) -> Option<Self> {
        let v: Vec<f64> = values.into_iter().collect();
        if v.is_empty() {
            return None;
        }
        Some(Self {
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v.iter().copied().fold(f64::INFINITY, f64::min),
            max: v.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowResult {
    pub label: char,
    pub description: String,
    pub config_hash: String,
    pub seeds: Vec<SeedResult>,
    /// AP at 2 m.
    pub desk_map: Spread,
    /// AP averaged over all thresholds.
    pub map: Spread,
    pub mate: Option<Spread>,
    pub mave: Option<Spread>,
    pub diverged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub table: u8,
    pub rows: Vec<RowResult>,
}

impl AblationTable {
    pub fn row(&self, label: char) -> Option<&RowResult> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Plain-text rendering in the row order of the table.
    pub fn render(&self) -> String {
        let mut s = format!(
            "table {}\n{:<4}{:<42}{:>18}{:>10}{:>10}{:>10}\n",
            self.table, "row", "setting", "desk-mAP", "mAP", "mATE", "mAVE"
        );
        let opt = |v: Option<Spread>| v.map_or("-".to_string(), |v| format!("{:.3}", v.mean));
        for r in &self.rows {
            let flag = if r.diverged { " (diverged)" } else { "" };
            s += &format!(
                "({}) {:<42}{:>18}{:>10.3}{:>10}{:>10}\n",
                r.label,
                format!("{}{flag}", r.description),
                format!("{:.3} [{:.3}, {:.3}]", r.desk_map.mean, r.desk_map.min, r.desk_map.max),
                r.map.mean,
                opt(r.mate),
                opt(r.mave),
            );
        }
        s
    }
}

/// Trains and evaluates a single configuration under `seed`. A diverged run
/// is evaluated at its last finite state.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedResult> {
    let cfg = ExperimentConfig { seed, ..config.clone() };
    let outcome = train(&cfg, None, false)?;
    let (model, store) = outcome.checkpoint.model()?;
    let metrics = evaluate_model(&model, &store, &cfg, &split_seeds(&cfg, EvalSplit::HeldOut), None)?;
    Ok(SeedResult {
        seed,
        diverged_at: outcome.diverged.as_ref().map(|d| d.step),
        final_loss: outcome.log.last().map(|l| l.loss),
        metrics,
    })
}

/// Trains every row of `table` under each seed (rows and seeds in
/// parallel) and evaluates on the held-out split.
pub fn ablate(base: &ExperimentConfig, table: u8, seeds: &[u64], out: Option<&Path>) -> Result<AblationTable> {
    let rows = ablation_rows(base, table)?;
    for r in &rows {
        r.config.validate()?;
    }
    let jobs: Vec<(usize, u64)> = (0..rows.len())
        .flat_map(|r| seeds.iter().map(move |&s| (r, s)))
        .collect();
    let results: Vec<SeedResult> = jobs
        .par_iter()
        .map(|&(r, s)| run_seed(&rows[r].config, s))
        .collect::<Result<_>>()?;
    let mut results = results.into_iter();
    let rows = rows
        .iter()
        .map(|r| {
            let seeds: Vec<SeedResult> = results.by_ref().take(seeds.len()).collect();
            let diverged = seeds.iter().any(|s| s.diverged_at.is_some());
            RowResult {
                label: r.label,
                description: r.description.clone(),
                config_hash: r.config.config_hash(),
                desk_map: Spread::of(seeds.iter().map(|s| s.metrics.desk_map())).unwrap_or(Spread {
                    mean: 0.0,
                    min: 0.0,
                    max: 0.0,
                }),
                map: Spread::of(seeds.iter().map(|s| s.metrics.map)).unwrap_or(Spread {
                    mean: 0.0,
                    min: 0.0,
                    max: 0.0,
                }),
                mate: Spread::of(seeds.iter().filter_map(|s| s.metrics.mate)),
                mave: Spread::of(seeds.iter().filter_map(|s| s.metrics.mave)),
                seeds,
                diverged,
            }
        })
        .collect();
    let table = AblationTable { table, rows };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(super::io_error(dir))?;
        write_json(&dir.join(format!("ablation_table{}.json", table.table)), &table)?;
    }
    Ok(table)
}
