use rand::Rng;

use super::boxes::{decode, SceneBounds, BOX_CODE};
use super::metrics::Detection;
use crate::tensor::{sigmoid, Activation, Mlp2, ParamStore, Result, Tape, Tensor, Var};

/// Initial foreground probability of the classifier.
const PRIOR: f64 = 0.01;

#[derive(Clone, Copy, Debug)]
pub struct DetectionHeads {
    pub classifier: Mlp2,
    pub regressor: Mlp2,
    pub classes: usize,
}

impl DetectionHeads {
    pub fn new(store: &mut ParamStore, width: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let classifier = Mlp2::new(store, "heads.cls", (width, width, classes), Activation::Relu, rng);
        let regressor = Mlp2::new(store, "heads.reg", (width, width, BOX_CODE), Activation::Relu, rng);
        let bias = -((1.0 - PRIOR) / PRIOR).ln();
        store.get_mut(classifier.second.bias).data_mut().fill(bias);
        Self {
            classifier,
            regressor,
            classes,
        }
    }

    /// Class logits `[M, K]` and box codes `[M, 10]` from normalized
    /// decoder embeddings.
    pub fn forward(&self, tape: &mut Tape, normed: Var) -> Result<(Var, Var)> {
        let logits = self.classifier.forward(tape, normed)?;
        let codes = self.regressor.forward(tape, normed)?;
        Ok((logits, codes))
    }
}

/// One detection per query: its most probable class, scored by that
/// class's probability.
pub fn decode_predictions(
    logits: &Tensor,
    codes: &Tensor,
    references: &Tensor,
    bounds: &SceneBounds,
) -> Vec<Detection> {
    let m = logits.shape()[0];
    (0..m)
        .map(|q| {
            let (class, score) =
                logits
                    .row(q)
                    .iter()
                    .map(|&z| sigmoid(z))
                    .enumerate()
                    .fold(
                        (0, f64::NEG_INFINITY),
                        |best, (k, p)| if p > best.1 { (k, p) } else { best },
                    );
            let r = references.row(q);
            Detection {
                bbox: decode(codes.row(q), [r[0], r[1], r[2]], bounds, class),
                score,
            }
        })
        .collect()
}
