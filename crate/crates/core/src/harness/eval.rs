use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::train::sample_input;
use super::{write_json, Checkpoint, ExperimentConfig, HarnessError, Result};
use crate::detection::{evaluate, DeskMetrics};
use crate::geometry::{perturb_extrinsics, CameraRig};
use crate::model::CapeModel;
use crate::scenegen::{generate_scene, SceneSample};
use crate::tensor::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSplit {
    Train,
    HeldOut,
}

/// Inference-time extrinsic noise: every camera of every evaluated frame is
/// rotated by a random angle of at most `max_deg` degrees.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub max_deg: f64,
    pub seed: u64,
}

/// The metrics file written by `eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_hash: String,
    pub model_hash: String,
    pub seed: u64,
    pub step: usize,
    pub split: EvalSplit,
    pub metrics: DeskMetrics,
}

fn perturbed(rig: &CameraRig, p: &Perturbation, rng: &mut ChaCha8Rng) -> CameraRig {
    let mut rig = rig.clone();
    for cam in &mut rig.cameras {
        cam.extrinsics = perturb_extrinsics(&cam.extrinsics, p.max_deg, rng);
    }
    rig
}

/// Scene seeds of a split.
pub fn split_seeds(cfg: &ExperimentConfig, split: EvalSplit) -> Vec<u64> {
    match split {
        EvalSplit::Train => (0..cfg.train.eval_scenes.min(cfg.train.train_scenes))
            .map(|i| cfg.train_seed(i))
            .collect(),
        EvalSplit::HeldOut => (0..cfg.train.eval_scenes).map(|i| cfg.eval_seed(i)).collect(),
    }
}

pub fn evaluate_model(
    model: &CapeModel,
    store: &ParamStore,
    cfg: &ExperimentConfig,
    seeds: &[u64],
    perturbation: Option<Perturbation>,
) -> Result<DeskMetrics> {
    if seeds.is_empty() {
        return Err(HarnessError::EmptyDataset);
    }
    let mode = cfg.model.temporal.mode;
    let results: Vec<_> = seeds
        .par_iter()
        .map(|&seed| {
            let mut sample: SceneSample = generate_scene(&cfg.data, seed)?;
            if let Some(p) = &perturbation {
                let mut rng = ChaCha8Rng::seed_from_u64(p.seed ^ seed.rotate_left(17));
                sample.current.rig = perturbed(&sample.current.rig, p, &mut rng);
                sample.previous.rig = perturbed(&sample.previous.rig, p, &mut rng);
            }
            let dets = model.predict(store, &sample_input(&sample, mode))?;
            Ok((dets, sample.current.boxes))
        })
        .collect::<Result<_>>()?;
    let (preds, gts): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok(evaluate(&preds, &gts))
}

/// Evaluates `ckpt` on the held-out split of `cfg`, which must describe the
/// same model and data as the checkpoint. Writes `eval_metrics.json` into
/// `out` when given.
pub fn eval(ckpt: &Checkpoint, cfg: &ExperimentConfig, out: Option<&Path>) -> Result<EvalRecord> {
    let expected = ckpt.config.model_hash();
    let found = cfg.model_hash();
    if expected != found {
        return Err(HarnessError::ConfigMismatch { expected, found });
    }
    let (model, store) = ckpt.model()?;
    let seeds = split_seeds(cfg, EvalSplit::HeldOut);
    let metrics = evaluate_model(&model, &store, cfg, &seeds, None)?;
    let record = EvalRecord {
        config_hash: ckpt.config_hash.clone(),
        model_hash: expected,
        seed: ckpt.config.seed,
        step: ckpt.step,
        split: EvalSplit::HeldOut,
        metrics,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(super::io_error(dir))?;
        write_json(&dir.join("eval_metrics.json"), &record)?;
    }
    Ok(record)
}
