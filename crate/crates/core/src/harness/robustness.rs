use std::path::Path;

use serde::{Deserialize, Serialize};

use super::eval::{evaluate_model, split_seeds, EvalSplit, Perturbation};
use super::{write_json, Checkpoint, HarnessError, Result};

/// Drops at `R_max = 4°` reported for the full-scale temporal model and its
/// global-frame baseline, in NDS points.
pub const REFERENCE_DROP_AT_4_DEG: [(&str, f64); 2] = [("camera view (CAPE-T)", 1.31), ("global (PETRv2)", 2.39)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessCurve {
    pub label: String,
    pub config_hash: String,
    /// mAP (all thresholds) on unperturbed extrinsics.
    pub clean_map: f64,
    pub levels: Vec<f64>,
    /// `drops[level][trial]`: clean mAP minus perturbed mAP.
    pub drops: Vec<Vec<f64>>,
    pub mean_drop: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub trials: usize,
    pub curves: Vec<RobustnessCurve>,
}

/// Evaluates every checkpoint with extrinsics rotated by up to `R_max`
/// degrees at inference time, `trials` noise draws per level. Draw `t` uses
/// the same noise for every checkpoint.
pub fn robustness_sweep(
    checkpoints: &[(String, Checkpoint)],
    levels: &[f64],
    trials: usize,
    noise_seed: u64,
    out: Option<&Path>,
) -> Result<RobustnessReport> {
    if checkpoints.is_empty() || trials == 0 {
        return Err(HarnessError::Config(
            "robustness needs checkpoints and at least one trial".into(),
        ));
    }
    let mut curves = Vec::with_capacity(checkpoints.len());
    for (label, ckpt) in checkpoints {
        let cfg = &ckpt.config;
        let (model, store) = ckpt.model()?;
        let seeds = split_seeds(cfg, EvalSplit::HeldOut);
        let clean_map = evaluate_model(&model, &store, cfg, &seeds, None)?.map;
        let mut drops = Vec::with_capacity(levels.len());
        for (li, &max_deg) in levels.iter().enumerate() {
            let per_trial = (0..trials)
                .map(|t| {
                    let p = Perturbation {
                        max_deg,
                        seed: noise_seed ^ ((li as u64) << 32 | t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
                    };
                    Ok(clean_map - evaluate_model(&model, &store, cfg, &seeds, Some(p))?.map)
                })
                .collect::<Result<Vec<f64>>>()?;
            drops.push(per_trial);
        }
        let mean_drop = drops.iter().map(|d| d.iter().sum::<f64>() / d.len() as f64).collect();
        curves.push(RobustnessCurve {
            label: label.clone(),
            config_hash: ckpt.config_hash.clone(),
            clean_map,
            levels: levels.to_vec(),
            drops,
            mean_drop,
        });
    }
    let report = RobustnessReport { trials, curves };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(super::io_error(dir))?;
        write_json(&dir.join("robustness.json"), &report)?;
    }
    Ok(report)
}
