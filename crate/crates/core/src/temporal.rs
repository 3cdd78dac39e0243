//! Two-frame query fusion aligned by ego motion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::EgoMotion;
use crate::tensor::{Activation, Mlp2, ParamStore, Result, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalMode {
    /// Single frame.
    #[default]
    Off,
    /// One query set attending to the views of both frames.
    SharedQueries,
    /// One query set per frame, fused after decoder layers.
    SeparateQueries,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    /// Per-channel softmax gates over the two frames.
    #[default]
    ChannelAttention,
    /// A perceptron over the concatenated embeddings.
    ConcatMlp,
}

/// Ego-motion embedding and fusion perceptrons.
#[derive(Clone, Copy, Debug)]
pub struct TemporalFusion {
    pub ego: Mlp2,
    /// `2C → 2C` gate logits in channel-attention mode, `2C → C` otherwise.
    pub mixer: Mlp2,
    pub kind: FusionKind,
    pub use_ego: bool,
    /// Translation divisor applied before the ego perceptron.
    pub scale: f64,
    /// Fixed `(w1, w2)` replacing the learned gates.
    pub gate_override: Option<(f64, f64)>,
}

/// Result of fusing the two frames' embeddings.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub current: Var,
    pub previous: Var,
    /// Gate weights of the current-frame pass, when gating is used.
    pub gates: Option<(Var, Var)>,
}

impl TemporalFusion {
    pub fn new(
        store: &mut ParamStore,
        width: usize,
        kind: FusionKind,
        use_ego: bool,
        scale: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let ego = Mlp2::new(store, "temporal.ego", (12, width, width), Activation::Relu, rng);
        let out = match kind {
            FusionKind::ChannelAttention => 2 * width,
            FusionKind::ConcatMlp => width,
        };
        let mixer = Mlp2::new(
            store,
            "temporal.mixer",
            (2 * width, 2 * width, out),
            Activation::Relu,
            rng,
        );
        Self {
            ego,
            mixer,
            kind,
            use_ego,
            scale,
            gate_override: None,
        }
    }

    /// Embeds the top three rows of the motion matrix, translation scaled.
    pub fn ego_motion_embedding(&self, tape: &mut Tape, m: &EgoMotion) -> Result<Var> {
        let mut rows = m.top_rows();
        for k in [3, 7, 11] {
            rows[k] /= self.scale;
        }
        let x = tape.leaf(Tensor::new([1, 12], rows.to_vec())?);
        self.ego.forward(tape, x)
    }

    /// One direction: `own` absorbs `other`, modulated by the embedding of
    /// the motion taking `other`'s frame into `own`'s.
    fn fuse_into(&self, tape: &mut Tape, own: Var, other: Var, m: &EgoMotion) -> Result<(Var, Option<(Var, Var)>)> {
        let aligned = if self.use_ego {
            let e = self.ego_motion_embedding(tape, m)?;
            tape.mul_row(other, e)?
        } else {
            other
        };
        let width = tape.shape(own)[1];
        match self.kind {
            FusionKind::ChannelAttention => {
                let (w1, w2) = match self.gate_override {
                    Some((a, b)) => {
                        let rows = tape.shape(own)[0];
                        (
                            tape.leaf(Tensor::full([rows, width], a)),
                            tape.leaf(Tensor::full([rows, width], b)),
                        )
                    }
                    None => {
                        let joined = tape.concat(&[own, aligned], 1)?;
                        let logits = self.mixer.forward(tape, joined)?;
                        let e1 = tape.narrow(logits, 1, 0, width)?;
                        let e2 = tape.narrow(logits, 1, width, width)?;
                        // Two-way softmax per channel.
                        let diff = tape.sub(e1, e2)?;
                        let w1 = tape.sigmoid(diff);
                        let neg = tape.neg(w1);
                        (w1, tape.add_scalar(neg, 1.0))
                    }
                };
                let a = tape.mul(w1, own)?;
                let b = tape.mul(w2, aligned)?;
                Ok((tape.add(a, b)?, Some((w1, w2))))
            }
            FusionKind::ConcatMlp => {
                let joined = tape.concat(&[own, aligned], 1)?;
                let update = self.mixer.forward(tape, joined)?;
                Ok((tape.add(own, update)?, None))
            }
        }
    }

    /// `motion` maps current-frame coordinates to previous-frame ones. The
    /// previous frame's pass uses the same perceptrons with roles swapped
    /// and the inverse motion.
    pub fn fuse_queries(&self, tape: &mut Tape, current: Var, previous: Var, motion: &EgoMotion) -> Result<Fused> {
        if tape.shape(current) != tape.shape(previous) {
            return Err(crate::tensor::TensorError::ShapeMismatch {
                op: "fuse_queries",
                lhs: tape.shape(current).to_vec(),
                rhs: tape.shape(previous).to_vec(),
            });
        }
        let (cur, gates) = self.fuse_into(tape, current, previous, motion)?;
        let (prev, _) = self.fuse_into(tape, previous, current, &motion.inverse())?;
        Ok(Fused {
            current: cur,
            previous: prev,
            gates,
        })
    }
}
