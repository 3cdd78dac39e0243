use serde::{Deserialize, Serialize};

use super::boxes::Box3D;

/// Center-distance thresholds in meters.
pub const THRESHOLDS: [f64; 4] = [0.5, 1.0, 2.0, 4.0];
/// Threshold at which translation and velocity errors are measured.
pub const TP_THRESHOLD: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: Box3D,
    pub score: f64,
}

/// Desk-scale detection metrics. Distance-threshold AP in the style of
/// large driving benchmarks, but at small scale and without their
/// composite score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskMetrics {
    pub thresholds: Vec<f64>,
    /// Class-averaged AP at each threshold.
    pub ap: Vec<f64>,
    /// Mean of `ap`.
    pub map: f64,
    /// Mean planar center error of true positives at 2 m; `None` without any.
    pub mate: Option<f64>,
    /// Mean velocity error of true positives at 2 m.
    pub mave: Option<f64>,
    pub scenes: usize,
    pub ground_truths: usize,
}

impl DeskMetrics {
    pub fn ap_at(&self, threshold: f64) -> Option<f64> {
        self.thresholds.iter().position(|&t| t == threshold).map(|i| self.ap[i])
    }

    /// AP at the 2 m threshold.
    pub fn desk_map(&self) -> f64 {
        self.ap_at(TP_THRESHOLD).unwrap_or(0.0)
    }
}

struct ClassResult {
    ap: f64,
    /// (translation error, velocity error) of each true positive.
    errors: Vec<(f64, f64)>,
}

fn evaluate_class(preds: &[Vec<Detection>], gts: &[Vec<Box3D>], class: usize, threshold: f64) -> Option<ClassResult> {
    let total: usize = gts.iter().map(|g| g.iter().filter(|b| b.class == class).count()).sum();
    if total == 0 {
        return None;
    }
    let mut ranked: Vec<(usize, &Detection)> = preds
        .iter()
        .enumerate()
        .flat_map(|(s, ds)| ds.iter().filter(|d| d.bbox.class == class).map(move |d| (s, d)))
        .collect();
    // Stable sort keeps scene and query order among equal scores.
    ranked.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

    let mut taken: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp = 0usize;
    let mut curve = Vec::with_capacity(ranked.len());
    let mut errors = Vec::new();
    for (k, (scene, det)) in ranked.iter().enumerate() {
        let best = gts[*scene]
            .iter()
            .enumerate()
            .filter(|(g, b)| b.class == class && !taken[*scene][*g])
            .map(|(g, b)| (g, det.bbox.center_distance(b)))
            .filter(|&(_, d)| d <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((g, dist)) = best {
            taken[*scene][g] = true;
            tp += 1;
            let gt = &gts[*scene][g];
            let dv = (det.bbox.velocity[0] - gt.velocity[0]).hypot(det.bbox.velocity[1] - gt.velocity[1]);
            errors.push((dist, dv));
        }
        curve.push((tp as f64 / total as f64, tp as f64 / (k + 1) as f64));
    }
    // Area under the precision envelope.
    let mut envelope: f64 = 0.0;
    let mut envelopes = vec![0.0; curve.len()];
    for k in (0..curve.len()).rev() {
        envelope = envelope.max(curve[k].1);
        envelopes[k] = envelope;
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &(recall, _)) in curve.iter().enumerate() {
        ap += (recall - prev_recall) * envelopes[k];
        prev_recall = recall;
    }
    Some(ClassResult { ap, errors })
}

/// Scores per-scene detections against per-scene ground truth.
pub fn evaluate(preds: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> DeskMetrics {
    let classes = gts.iter().flatten().map(|b| b.class + 1).max().unwrap_or(0);
    let mut ap = Vec::with_capacity(THRESHOLDS.len());
    let mut tp_errors = Vec::new();
    for &t in &THRESHOLDS {
        let results: Vec<ClassResult> = (0..classes).filter_map(|c| evaluate_class(preds, gts, c, t)).collect();
        let mean = if results.is_empty() {
            0.0
        } else {
            results.iter().map(|r| r.ap).sum::<f64>() / results.len() as f64
        };
        ap.push(mean);
        if t == TP_THRESHOLD {
            tp_errors = results.into_iter().flat_map(|r| r.errors).collect();
        }
    }
    let mean_of = |f: fn(&(f64, f64)) -> f64| {
        (!tp_errors.is_empty()).then(|| tp_errors.iter().map(f).sum::<f64>() / tp_errors.len() as f64)
    };
    DeskMetrics {
        thresholds: THRESHOLDS.to_vec(),
        map: ap.iter().sum::<f64>() / ap.len() as f64,
        ap,
        mate: mean_of(|e| e.0),
        mave: mean_of(|e| e.1),
        scenes: gts.len(),
        ground_truths: gts.iter().map(Vec::len).sum(),
    }
}

/// AP at 2 m.
pub fn desk_map(preds: &[Vec<Detection>], gts: &[Vec<Box3D>]) -> f64 {
    evaluate(preds, gts).desk_map()
}
