use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::boxes::{absolute_code, wrap_angle, Box3D, SceneBounds, BOX_CODE};
use super::hungarian::hungarian_match;
use super::Result;
use crate::geometry::EgoMotion;
use crate::tensor::{sigmoid, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Weight on the focal term relative to box L1.
    pub cls: f64,
    /// Weight on the previous-frame loss.
    pub prev: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            prev: 0.1,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Head outputs of one decoder layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerOutput {
    /// `[M, K]`
    pub logits: Var,
    /// `[M, 10]`, centers as offsets from the reference points.
    pub codes: Var,
}

/// Head outputs of every layer for one frame, with the normalized
/// reference points `[M, 3]` the offsets are relative to.
#[derive(Clone, Debug)]
pub struct FrameOutput {
    pub layers: Vec<LayerOutput>,
    pub references: Var,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub focal: f64,
    pub l1: f64,
    pub prev_focal: f64,
    pub prev_l1: f64,
    pub total: f64,
}

/// Sigmoid focal loss summed over classes and averaged over queries.
/// `targets` is `[M, K]` with entries in {0, 1}.
pub fn focal_loss(tape: &mut Tape, logits: Var, targets: &Tensor, alpha: f64, gamma: f64) -> Result<Var> {
    let queries = tape.shape(logits)[0].max(1);
    let t = tape.leaf(targets.clone());
    let not_t = tape.leaf(targets.map(|v| 1.0 - v));

    let log_p = tape.log_sigmoid(logits);
    let neg_logits = tape.neg(logits);
    let log_not_p = tape.log_sigmoid(neg_logits);
    let p = tape.sigmoid(logits);
    let not_p = tape.sigmoid(neg_logits);

    let pos_mod = tape.powf(not_p, gamma);
    let pos = tape.mul(pos_mod, log_p)?;
    let pos = tape.mul(pos, t)?;
    let pos = tape.scale(pos, -alpha);

    let neg_mod = tape.powf(p, gamma);
    let neg = tape.mul(neg_mod, log_not_p)?;
    let neg = tape.mul(neg, not_t)?;
    let neg = tape.scale(neg, -(1.0 - alpha));

    let both = tape.add(pos, neg)?;
    let total = tape.sum(both);
    Ok(tape.scale(total, 1.0 / queries as f64))
}

/// Pairwise matching cost `[G, M]`: `cls_weight · (−p_class) + L1` between
/// each prediction's code (center made absolute) and each target's code.
pub fn match_cost(probs: &Tensor, codes: &Tensor, gts: &[Box3D], bounds: &SceneBounds, cls_weight: f64) -> Tensor {
    let m = probs.shape()[0];
    let mut data = Vec::with_capacity(gts.len() * m);
    for gt in gts {
        let target = absolute_code(gt, bounds);
        for q in 0..m {
            let l1: f64 = codes.row(q).iter().zip(&target).map(|(a, b)| (a - b).abs()).sum();
            data.push(cls_weight * -probs.at2(q, gt.class) + l1);
        }
    }
    Tensor::new([gts.len(), m], data).expect("sized")
}

fn absolute_codes(tape: &mut Tape, codes: Var, references: Var) -> Result<Var> {
    let m = tape.shape(codes)[0];
    let pad = tape.leaf(Tensor::zeros([m, BOX_CODE - 3]));
    let shift = tape.concat(&[references, pad], 1)?;
    Ok(tape.add(codes, shift)?)
}

/// Matches, then `cls · focal + L1` per layer, summed over layers. Returns
/// the loss and the summed focal and L1 parts.
pub fn frame_loss(
    tape: &mut Tape,
    out: &FrameOutput,
    gts: &[Box3D],
    bounds: &SceneBounds,
    w: &LossWeights,
) -> Result<(Var, f64, f64)> {
    let mut total: Option<Var> = None;
    let (mut focal_sum, mut l1_sum) = (0.0, 0.0);
    for layer in &out.layers {
        let abs = absolute_codes(tape, layer.codes, out.references)?;
        let (m, k) = tape.value(layer.logits).dims2("frame_loss")?;
        let probs = tape.value(layer.logits).map(sigmoid);
        let cost = match_cost(&probs, tape.value(abs), gts, bounds, w.cls);
        let assignment = hungarian_match(&cost)?;

        let mut targets = Tensor::zeros([m, k]);
        for (gt, &q) in gts.iter().zip(&assignment.query_of_gt) {
            targets.data_mut()[q * k + gt.class] = 1.0;
        }
        let focal = focal_loss(tape, layer.logits, &targets, w.focal_alpha, w.focal_gamma)?;
        focal_sum += tape.value(focal).item()?;
        let mut layer_loss = tape.scale(focal, w.cls);

        if !gts.is_empty() {
            let picked = tape.gather_rows(abs, &assignment.query_of_gt)?;
            let target_rows: Vec<[f64; BOX_CODE]> = gts.iter().map(|g| absolute_code(g, bounds)).collect();
            let target = tape.leaf(Tensor::from_rows(&target_rows)?);
            let diff = tape.sub(picked, target)?;
            let diff = tape.abs(diff);
            let l1 = tape.sum(diff);
            let l1 = tape.scale(l1, 1.0 / gts.len() as f64);
            l1_sum += tape.value(l1).item()?;
            layer_loss = tape.add(layer_loss, l1)?;
        }
        total = Some(match total {
            Some(t) => tape.add(t, layer_loss)?,
            None => layer_loss,
        });
    }
    let total = total.unwrap_or_else(|| tape.leaf(Tensor::scalar(0.0)));
    Ok((total, focal_sum, l1_sum))
}

/// `L_cur + prev · L_prev`; the previous-frame term is skipped entirely when
/// `previous` is `None`.
pub fn total_loss(
    tape: &mut Tape,
    current: (&FrameOutput, &[Box3D]),
    previous: Option<(&FrameOutput, &[Box3D])>,
    bounds: &SceneBounds,
    w: &LossWeights,
) -> Result<(Var, LossBreakdown)> {
    let (cur, focal, l1) = frame_loss(tape, current.0, current.1, bounds, w)?;
    let mut breakdown = LossBreakdown {
        focal,
        l1,
        ..Default::default()
    };
    let mut total = cur;
    if let Some((out, gts)) = previous {
        let (prev, focal, l1) = frame_loss(tape, out, gts, bounds, w)?;
        breakdown.prev_focal = focal;
        breakdown.prev_l1 = l1;
        let prev = tape.scale(prev, w.prev);
        total = tape.add(total, prev)?;
    }
    breakdown.total = tape.value(total).item()?;
    Ok((total, breakdown))
}

/// Ground truth at the previous frame, assuming constant velocity over the
/// frame gap and expressed through `motion` (current → previous frame).
pub fn generate_prev_gt(gts: &[Box3D], motion: &EgoMotion) -> Vec<Box3D> {
    let dt = motion.dt();
    let r = motion.rotation();
    let turn = r[(1, 0)].atan2(r[(0, 0)]);
    gts.iter()
        .map(|b| {
            let back = Vector3::new(
                b.center[0] - b.velocity[0] * dt,
                b.center[1] - b.velocity[1] * dt,
                b.center[2],
            );
            let c = motion.apply(&back);
            let v = r * Vector3::new(b.velocity[0], b.velocity[1], 0.0);
            Box3D {
                center: [c.x, c.y, c.z],
                size: b.size,
                yaw: wrap_angle(b.yaw + turn),
                velocity: [v.x, v.y],
                class: b.class,
            }
        })
        .collect()
}
