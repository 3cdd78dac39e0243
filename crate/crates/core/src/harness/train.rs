use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
use super::optim::{clip_grad_norm, cosine_lr, Adam};
use super::{io_error, write_json, ExperimentConfig, HarnessError, Result};
use crate::decoder::DecoderError;
use crate::detection::{total_loss, DetectionError, LossBreakdown};
use crate::model::{CapeModel, FrameInput, ModelError, SampleInput};
use crate::scenegen::{generate_scene, SceneSample};
use crate::temporal::TemporalMode;
use crate::tensor::{ParamStore, Tape, Tensor, TensorError};

/// Stream of the batch-order generator; stream 0 initializes parameters.
const DATA_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub focal: f64,
    pub l1: f64,
    pub prev_focal: f64,
    pub prev_l1: f64,
    pub grad_norm: f64,
}

/// Diagnostic state at the first non-finite loss or gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub step: usize,
    pub scene_seeds: Vec<u64>,
    pub loss: Option<f64>,
    pub breakdown: Vec<Option<LossBreakdown>>,
    pub non_finite_grads: Vec<String>,
    pub param_norms: Vec<(String, f64)>,
    pub last_log: Option<StepLog>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// State after the last finite step.
    pub checkpoint: Checkpoint,
    pub log: Vec<StepLog>,
    pub diverged: Option<Divergence>,
}

pub fn sample_input<'a>(sample: &'a SceneSample, mode: TemporalMode) -> SampleInput<'a> {
    SampleInput {
        current: FrameInput {
            rig: &sample.current.rig,
            features: &sample.current.features,
        },
        previous: (mode != TemporalMode::Off).then_some((
            FrameInput {
                rig: &sample.previous.rig,
                features: &sample.previous.features,
            },
            sample.motion,
        )),
    }
}

/// Errors that mean a NaN or infinity reached the forward pass.
fn is_non_finite(e: &HarnessError) -> bool {
    let tensor = |t: &TensorError| matches!(t, TensorError::NonFinite { .. });
    let detection = |d: &DetectionError| match d {
        DetectionError::NonFiniteCost => true,
        DetectionError::Tensor(t) => tensor(t),
        _ => false,
    };
    match e {
        HarnessError::Tensor(t) => tensor(t),
        HarnessError::Detection(d) => detection(d),
        HarnessError::Model(m) => match m {
            ModelError::Tensor(t) | ModelError::Decoder(DecoderError::Tensor(t)) => tensor(t),
            ModelError::Detection(d) => detection(d),
            _ => false,
        },
        _ => false,
    }
}

/// Loss and parameter gradients of one scene.
fn scene_gradients(
    cfg: &ExperimentConfig,
    model: &CapeModel,
    store: &ParamStore,
    sample: &SceneSample,
) -> Result<(LossBreakdown, Vec<Tensor>)> {
    let mut tape = Tape::with_params(store);
    let out = model.forward(&mut tape, &sample_input(sample, cfg.model.temporal.mode), false)?;
    let previous = match (&out.previous, cfg.model.temporal.prev_loss) {
        (Some(p), true) => Some((p, sample.previous.boxes.as_slice())),
        _ => None,
    };
    let (loss, breakdown) = total_loss(
        &mut tape,
        (&out.current, &sample.current.boxes),
        previous,
        &cfg.model.bounds,
        &cfg.train.loss,
    )?;
    let grads = tape.backward(loss)?.param_grads(store);
    Ok((breakdown, grads))
}

/// Resumable training state.
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: CapeModel,
    pub store: ParamStore,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = ChaCha8Rng::seed_from_u64(config.seed);
        let model = CapeModel::new(config.model.clone(), &mut store, &mut init)?;
        let optimizer = Adam::new(&store, config.train.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(DATA_STREAM);
        Ok(Self {
            config: config.clone(),
            model,
            store,
            optimizer,
            rng,
            step: 0,
        })
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let (model, store) = ckpt.model()?;
        Ok(Self {
            config: ckpt.config.clone(),
            model,
            store,
            optimizer: ckpt.optimizer.clone(),
            rng: ckpt.rng.restore()?,
            step: ckpt.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            config_hash: self.config.config_hash(),
            step: self.step,
            params: self.store.clone(),
            optimizer: self.optimizer.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    fn divergence(
        &self,
        scene_seeds: Vec<u64>,
        loss: Option<f64>,
        breakdown: Vec<Option<LossBreakdown>>,
        non_finite_grads: Vec<String>,
    ) -> Divergence {
        Divergence {
            step: self.step,
            scene_seeds,
            loss,
            breakdown,
            non_finite_grads,
            param_norms: self
                .store
                .ids()
                .map(|id| {
                    let n = self.store.get(id).data().iter().map(|v| v * v).sum::<f64>().sqrt();
                    (self.store.name(id).to_string(), n)
                })
                .collect(),
            last_log: None,
        }
    }

    /// One optimizer step over a batch. Parameters are untouched when the
    /// step diverges.
    pub fn step(&mut self) -> Result<Result<StepLog, Divergence>> {
        let t = &self.config.train;
        let seeds: Vec<u64> = (0..t.batch)
            .map(|_| self.config.train_seed(self.rng.random_range(0..t.train_scenes)))
            .collect();
        // A NaN in the forward pass is a divergence, not an error.
        let attempts: Vec<Option<(LossBreakdown, Vec<Tensor>)>> = seeds
            .par_iter()
            .map(|&seed| {
                let sample = generate_scene(&self.config.data, seed)?;
                match scene_gradients(&self.config, &self.model, &self.store, &sample) {
                    Ok(r) => Ok(Some(r)),
                    Err(e) if is_non_finite(&e) => Ok(None),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<_>>()?;
        if attempts.iter().any(Option::is_none) {
            return Ok(Err(self.divergence(
                seeds,
                None,
                attempts.iter().map(|a| a.as_ref().map(|r| r.0)).collect(),
                Vec::new(),
            )));
        }
        let per_scene: Vec<(LossBreakdown, Vec<Tensor>)> = attempts.into_iter().flatten().collect();

        // Summed in batch order so the result does not depend on threads.
        let inv = 1.0 / t.batch as f64;
        let mut grads: Vec<Tensor> = per_scene[0].1.iter().map(|g| Tensor::zeros(g.shape())).collect();
        let mut mean = LossBreakdown::default();
        for (b, g) in &per_scene {
            for (acc, part) in grads.iter_mut().zip(g) {
                for (a, v) in acc.data_mut().iter_mut().zip(part.data()) {
                    *a += inv * v;
                }
            }
            mean.total += inv * b.total;
            mean.focal += inv * b.focal;
            mean.l1 += inv * b.l1;
            mean.prev_focal += inv * b.prev_focal;
            mean.prev_l1 += inv * b.prev_l1;
        }

        let non_finite: Vec<String> = self
            .store
            .ids()
            .zip(&grads)
            .filter(|(_, g)| !g.is_finite())
            .map(|(id, _)| self.store.name(id).to_string())
            .collect();
        if !mean.total.is_finite() || !non_finite.is_empty() {
            let loss = mean.total.is_finite().then_some(mean.total);
            let breakdown = per_scene.iter().map(|(b, _)| Some(*b)).collect();
            return Ok(Err(self.divergence(seeds, loss, breakdown, non_finite)));
        }

        let grad_norm = clip_grad_norm(&mut grads, t.grad_clip);
        let lr = cosine_lr(self.step, t.steps, t.warmup, t.lr, t.min_lr_ratio);
        self.optimizer.step(&mut self.store, &grads, lr);
        let log = StepLog {
            step: self.step,
            lr,
            loss: mean.total,
            focal: mean.focal,
            l1: mean.l1,
            prev_focal: mean.prev_focal,
            prev_l1: mean.prev_l1,
            grad_norm,
        };
        self.step += 1;
        Ok(Ok(log))
    }

    /// Steps until `until` (capped at the configured total). Logs every
    /// `log_every` steps and the final one.
    pub fn run(
        &mut self,
        until: usize,
        mut on_log: impl FnMut(&StepLog),
    ) -> Result<(Vec<StepLog>, Option<Divergence>)> {
        let until = until.min(self.config.train.steps);
        let every = self.config.train.log_every.max(1);
        let mut logs = Vec::new();
        let mut last = None;
        while self.step < until {
            match self.step()? {
                Ok(log) => {
                    if log.step % every == 0 || log.step + 1 == until {
                        on_log(&log);
                        logs.push(log.clone());
                    }
                    last = Some(log);
                }
                Err(mut d) => {
                    d.last_log = last;
                    return Ok((logs, Some(d)));
                }
            }
        }
        Ok((logs, None))
    }
}

/// Trains from scratch. When `out` is given, writes `checkpoint.json`,
/// `train_log.jsonl` and, on divergence, `divergence.json`.
pub fn train(cfg: &ExperimentConfig, out: Option<&Path>, verbose: bool) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(cfg)?;
    let mut log_file = match out {
        Some(dir) => {
            std::fs::create_dir_all(dir).map_err(io_error(dir))?;
            let path = dir.join("train_log.jsonl");
            Some((std::fs::File::create(&path).map_err(io_error(&path))?, path))
        }
        None => None,
    };
    let mut write_err = None;
    let (log, diverged) = trainer.run(cfg.train.steps, |l| {
        if verbose {
            eprintln!(
                "step {:>5}  lr {:.2e}  loss {:.4}  focal {:.4}  l1 {:.4}  |g| {:.3}",
                l.step, l.lr, l.loss, l.focal, l.l1, l.grad_norm
            );
        }
        if let Some((f, path)) = log_file.as_mut() {
            let line = serde_json::to_string(l).expect("log serializes");
            if let Err(e) = writeln!(f, "{line}") {
                write_err.get_or_insert(HarnessError::Io {
                    path: path.display().to_string(),
                    source: e,
                });
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e);
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out {
        checkpoint.save(&dir.join("checkpoint.json"))?;
        if let Some(d) = &diverged {
            write_json(&dir.join("divergence.json"), d)?;
        }
    }
    Ok(TrainOutcome {
        checkpoint,
        log,
        diverged,
    })
}
