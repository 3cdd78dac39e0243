//! Assembly of embeddings, decoder, temporal fusion and heads.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decoder::{AttentionRecord, Decoder, DecoderError, DecoderShape, KeySet};
use crate::detection::{
    decode_predictions, Detection, DetectionError, DetectionHeads, FrameOutput, LayerOutput, SceneBounds,
};
use crate::embedding::{KeyPe, PeMode, QueryPe};
use crate::geometry::{self, CameraRig, EgoMotion, Extrinsics, GeometryError};
use crate::temporal::{FusionKind, TemporalFusion, TemporalMode};
use crate::tensor::{Activation, ParamId, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decoder(#[from] DecoderError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("invalid model input: {0}")]
    Input(String),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TemporalConfig {
    pub mode: TemporalMode,
    /// Supervise the previous frame's query stream.
    pub prev_loss: bool,
    pub fusion: FusionKind,
    pub ego_embedding: bool,
    /// Fuse after every decoder layer rather than only after the last.
    pub fuse_every_layer: bool,
}

impl Default for TemporalConfig {
    fn default() -> Self {
        Self {
            mode: TemporalMode::Off,
            prev_loss: true,
            fusion: FusionKind::ChannelAttention,
            ego_embedding: true,
            fuse_every_layer: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub width: usize,
    pub queries: usize,
    pub layers: usize,
    pub heads: usize,
    pub depth_bins: usize,
    pub classes: usize,
    pub pe_mode: PeMode,
    pub bilateral: bool,
    pub query_fpe: bool,
    pub key_fpe: bool,
    pub per_view_softmax: bool,
    /// Meters per unit of embedding input.
    pub pe_scale: f64,
    pub bounds: SceneBounds,
    pub temporal: TemporalConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: 32,
            queries: 16,
            layers: 3,
            heads: 4,
            depth_bins: 8,
            classes: 3,
            pe_mode: PeMode::Camera,
            bilateral: true,
            query_fpe: true,
            key_fpe: true,
            per_view_softmax: false,
            pe_scale: 10.0,
            bounds: SceneBounds {
                min: [-10.0, -10.0, 0.0],
                max: [10.0, 10.0, 2.0],
            },
            temporal: TemporalConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.into()));
        if self.width == 0 || self.queries == 0 || self.classes == 0 || self.depth_bins == 0 {
            return fail("width, queries, classes and depth bins must be positive");
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return fail("width must split evenly into heads");
        }
        if !(self.pe_scale > 0.0 && self.pe_scale.is_finite()) {
            return fail("pe_scale must be positive");
        }
        SceneBounds::new(self.bounds.min, self.bounds.max)?;
        Ok(())
    }

    pub fn decoder_shape(&self) -> DecoderShape {
        DecoderShape {
            width: self.width,
            heads: self.heads,
            layers: self.layers,
            bilateral: self.bilateral,
            per_view_softmax: self.per_view_softmax,
        }
    }
}

/// One frame as the model sees it: the rig it believes in and the feature
/// map `[H·W, C]` of each camera.
#[derive(Clone, Copy, Debug)]
pub struct FrameInput<'a> {
    pub rig: &'a CameraRig,
    pub features: &'a [Tensor],
}

#[derive(Clone, Copy, Debug)]
pub struct SampleInput<'a> {
    pub current: FrameInput<'a>,
    /// Previous frame and the motion from current to previous coordinates.
    pub previous: Option<(FrameInput<'a>, EgoMotion)>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub current: FrameOutput,
    /// Present for separate per-frame queries.
    pub previous: Option<FrameOutput>,
    /// Current-frame cross-attention maps per layer, when requested.
    pub records: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct CapeModel {
    pub config: ModelConfig,
    pub key_pe: KeyPe,
    pub query_pe: QueryPe,
    pub decoder: Decoder,
    pub heads: DetectionHeads,
    /// Normalized reference points `[M, 3]`.
    pub references: ParamId,
    /// Initial decoder embeddings `[M, C]`.
    pub query_init: ParamId,
    pub prev_query_init: Option<ParamId>,
    pub fusion: Option<TemporalFusion>,
}

/// Query-side state of one frame for one decoding pass.
struct QueryContext {
    /// Per-view query points already divided by the embedding scale.
    points: Vec<Var>,
    extrinsics: Vec<Extrinsics>,
    self_pos: Var,
    /// Normalized reference points the box offsets are relative to.
    references: Var,
    /// Embeddings when they do not depend on the decoder state.
    fixed: Option<Vec<Var>>,
}

impl CapeModel {
    /// Creates every parameter in `store`. Temporal parameters come last, so
    /// a single-frame model built from the same seed is a prefix.
    pub fn new(config: ModelConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c = config.width;
        let key_pe = KeyPe::new(store, config.depth_bins, c, config.pe_scale, Activation::Relu, rng);
        let query_pe = QueryPe::new(store, c, config.pe_scale, Activation::Relu, rng);
        let decoder = Decoder::new(store, "decoder", config.decoder_shape(), rng)?;
        let heads = DetectionHeads::new(store, c, config.classes, rng);
        let m = config.queries;
        let refs = (0..m * 3)
            .map(|k| if k % 3 == 2 { 0.0 } else { rng.random_range(-0.9..0.9) })
            .collect();
        let references = store.add("queries.reference", Tensor::new([m, 3], refs)?);
        let init = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
        let query_init = store.add("queries.embedding", Tensor::new([m, c], init)?);
        let (prev_query_init, fusion) = if config.temporal.mode == TemporalMode::SeparateQueries {
            let init = (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect();
            let prev = store.add("queries.embedding_prev", Tensor::new([m, c], init)?);
            let t = &config.temporal;
            let fusion = TemporalFusion::new(store, c, t.fusion, t.ego_embedding, config.pe_scale, rng);
            (Some(prev), Some(fusion))
        } else {
            (None, None)
        };
        Ok(Self {
            config,
            key_pe,
            query_pe,
            decoder,
            heads,
            references,
            query_init,
            prev_query_init,
            fusion,
        })
    }

    fn keys(&self, tape: &mut Tape, frame: &FrameInput) -> Result<KeySet> {
        let rig = frame.rig;
        if frame.features.len() != rig.len() {
            return Err(ModelError::Input(format!(
                "{} feature maps for {} cameras",
                frame.features.len(),
                rig.len()
            )));
        }
        if rig.depth_bins.len() != self.config.depth_bins {
            return Err(ModelError::Input(format!(
                "rig has {} depth bins, model expects {}",
                rig.depth_bins.len(),
                self.config.depth_bins
            )));
        }
        let pixels = rig.pixels();
        let mut feats = Vec::with_capacity(pixels * rig.len() * self.config.width);
        let mut coords = Vec::new();
        for (n, x) in frame.features.iter().enumerate() {
            if x.shape() != [pixels, self.config.width] {
                return Err(ModelError::Input(format!(
                    "view {n} features have shape {:?}, expected [{pixels}, {}]",
                    x.shape(),
                    self.config.width
                )));
            }
            feats.extend_from_slice(x.data());
            let mut c = geometry::frustum_points(rig, n)?;
            if self.config.pe_mode == PeMode::Global {
                let to_global = rig.cameras[n].extrinsics.inverse_matrix();
                for p in c.data_mut().chunks_exact_mut(3) {
                    let g = to_global * nalgebra::Vector4::new(p[0], p[1], p[2], 1.0);
                    p.copy_from_slice(&[g.x, g.y, g.z]);
                }
            }
            coords.extend(c.into_data());
        }
        let views = rig.len();
        let features = tape.leaf(Tensor::new([views * pixels, self.config.width], feats)?);
        let coords = tape.leaf(Tensor::new([views * pixels, 3 * self.config.depth_bins], coords)?);
        let pe = if self.config.key_fpe {
            self.key_pe.key_fpe(tape, coords, features)?
        } else {
            self.key_pe.key_pe(tape, coords)?
        };
        Ok(KeySet {
            features,
            pe,
            views,
            pixels,
        })
    }

    fn to_metric(&self, tape: &mut Tape, normalized: Var) -> Result<Var> {
        let b = &self.config.bounds;
        let half = tape.leaf(Tensor::new([3], b.half_extent().to_vec())?);
        let center = tape.leaf(Tensor::new([3], b.center().to_vec())?);
        let scaled = tape.mul_row(normalized, half)?;
        Ok(tape.add_row(scaled, center)?)
    }

    fn to_normalized(&self, tape: &mut Tape, metric: Var) -> Result<Var> {
        let b = &self.config.bounds;
        let inv_half = tape.leaf(Tensor::new([3], b.half_extent().iter().map(|h| 1.0 / h).collect())?);
        let neg_center = tape.leaf(Tensor::new([3], b.center().iter().map(|c| -c).collect())?);
        let shifted = tape.add_row(metric, neg_center)?;
        Ok(tape.mul_row(shifted, inv_half)?)
    }

    fn query_context(&self, tape: &mut Tape, metric: Var, rig: &CameraRig) -> Result<QueryContext> {
        let self_pos = self.query_pe.self_pos_embedding(tape, metric)?;
        let references = self.to_normalized(tape, metric)?;
        let (points, extrinsics) = match self.config.pe_mode {
            PeMode::Camera => {
                let mut pts = Vec::with_capacity(rig.len());
                for cam in &rig.cameras {
                    pts.push(self.query_pe.camera_points(tape, metric, &cam.extrinsics)?);
                }
                (pts, rig.cameras.iter().map(|c| c.extrinsics).collect())
            }
            PeMode::Global => {
                let p = tape.scale(metric, 1.0 / self.config.pe_scale);
                (vec![p; rig.len()], vec![Extrinsics::identity(); rig.len()])
            }
        };
        let fixed = if self.config.query_fpe {
            None
        } else {
            let g = match self.config.pe_mode {
                PeMode::Camera => points
                    .iter()
                    .map(|&p| self.query_pe.query_pe(tape, p))
                    .collect::<Result<Vec<_>, _>>()?,
                PeMode::Global => vec![self.query_pe.query_pe(tape, points[0])?; rig.len()],
            };
            Some(g)
        };
        Ok(QueryContext {
            points,
            extrinsics,
            self_pos,
            references,
            fixed,
        })
    }

    fn query_embeddings(&self, tape: &mut Tape, ctx: &QueryContext, normed: Var) -> Result<Vec<Var>, TensorError> {
        if let Some(g) = &ctx.fixed {
            return Ok(g.clone());
        }
        match self.config.pe_mode {
            PeMode::Camera => ctx
                .points
                .iter()
                .zip(&ctx.extrinsics)
                .map(|(&p, e)| self.query_pe.query_fpe(tape, p, normed, e))
                .collect(),
            PeMode::Global => {
                let g = self
                    .query_pe
                    .query_fpe(tape, ctx.points[0], normed, &ctx.extrinsics[0])?;
                Ok(vec![g; ctx.points.len()])
            }
        }
    }

    fn layer(
        &self,
        tape: &mut Tape,
        l: usize,
        o: Var,
        keys: &KeySet,
        ctx: &QueryContext,
        record: bool,
    ) -> Result<(Var, Option<AttentionRecord>)> {
        let mut qpe = |tape: &mut Tape, n: Var| self.query_embeddings(tape, ctx, n);
        Ok(self.decoder.layers[l].forward(tape, o, ctx.self_pos, keys, &mut qpe, record)?)
    }

    fn head_outputs(&self, tape: &mut Tape, stream: &[Var]) -> Result<Vec<LayerOutput>> {
        stream
            .iter()
            .map(|&o| {
                let n = self.decoder.normalize(tape, o)?;
                let (logits, codes) = self.heads.forward(tape, n)?;
                Ok(LayerOutput { logits, codes })
            })
            .collect()
    }

    /// Rig and features covering both frames, with the previous cameras
    /// re-expressed in current-frame coordinates.
    fn joint_frame(
        current: &FrameInput,
        previous: &FrameInput,
        motion: &EgoMotion,
    ) -> Result<(CameraRig, Vec<Tensor>)> {
        let prev = previous.rig.reexpressed(motion.matrix())?;
        let mut rig = current.rig.clone();
        if (prev.height, prev.width, &prev.depth_bins) != (rig.height, rig.width, &rig.depth_bins) {
            return Err(ModelError::Input(
                "frames disagree on feature extent or depth bins".into(),
            ));
        }
        rig.cameras.extend(prev.cameras);
        let features = current.features.iter().chain(previous.features).cloned().collect();
        Ok((rig, features))
    }

    pub fn forward(&self, tape: &mut Tape, input: &SampleInput, record: bool) -> Result<ModelOutput> {
        let refs = tape.param(self.references);
        let metric = self.to_metric(tape, refs)?;
        let o0 = tape.param(self.query_init);
        let layers = self.decoder.layers.len();

        match (self.config.temporal.mode, &input.previous) {
            (TemporalMode::SeparateQueries, Some((prev_frame, motion))) => {
                let fusion = self
                    .fusion
                    .as_ref()
                    .ok_or_else(|| ModelError::Config("missing fusion".into()))?;
                let keys_cur = self.keys(tape, &input.current)?;
                let keys_prev = self.keys(tape, prev_frame)?;
                let ctx_cur = self.query_context(tape, metric, input.current.rig)?;
                let prev_metric = self.propagate(tape, metric, motion)?;
                let ctx_prev = self.query_context(tape, prev_metric, prev_frame.rig)?;

                let mut oc = o0;
                let mut op = tape.param(self.prev_query_init.expect("separate queries"));
                let (mut cur, mut prev, mut records) = (Vec::new(), Vec::new(), Vec::new());
                for l in 0..layers {
                    let (c, rec) = self.layer(tape, l, oc, &keys_cur, &ctx_cur, record)?;
                    let (p, _) = self.layer(tape, l, op, &keys_prev, &ctx_prev, false)?;
                    (oc, op) = (c, p);
                    if self.config.temporal.fuse_every_layer || l + 1 == layers {
                        let fused = fusion.fuse_queries(tape, oc, op, motion)?;
                        (oc, op) = (fused.current, fused.previous);
                    }
                    cur.push(oc);
                    prev.push(op);
                    records.extend(rec);
                }
                Ok(ModelOutput {
                    current: FrameOutput {
                        layers: self.head_outputs(tape, &cur)?,
                        references: ctx_cur.references,
                    },
                    previous: Some(FrameOutput {
                        layers: self.head_outputs(tape, &prev)?,
                        references: ctx_prev.references,
                    }),
                    records,
                })
            }
            (TemporalMode::SeparateQueries, None) => {
                Err(ModelError::Input("temporal model needs a previous frame".into()))
            }
            (mode, previous) => {
                let joint;
                let frame = match (mode, previous) {
                    (TemporalMode::SharedQueries, Some((prev_frame, motion))) => {
                        joint = Self::joint_frame(&input.current, prev_frame, motion)?;
                        FrameInput {
                            rig: &joint.0,
                            features: &joint.1,
                        }
                    }
                    (TemporalMode::SharedQueries, None) => {
                        return Err(ModelError::Input("temporal model needs a previous frame".into()))
                    }
                    _ => input.current,
                };
                let keys = self.keys(tape, &frame)?;
                let ctx = self.query_context(tape, metric, frame.rig)?;
                let mut o = o0;
                let (mut stream, mut records) = (Vec::new(), Vec::new());
                for l in 0..layers {
                    let (next, rec) = self.layer(tape, l, o, &keys, &ctx, record)?;
                    o = next;
                    stream.push(o);
                    records.extend(rec);
                }
                Ok(ModelOutput {
                    current: FrameOutput {
                        layers: self.head_outputs(tape, &stream)?,
                        references: ctx.references,
                    },
                    previous: None,
                    records,
                })
            }
        }
    }

    /// Reference points carried into previous-frame coordinates.
    fn propagate(&self, tape: &mut Tape, metric: Var, motion: &EgoMotion) -> Result<Var> {
        // nalgebra stores R column-major, which reads as Rᵀ row-major.
        let r = tape.leaf(Tensor::new([3, 3], motion.rotation().as_slice().to_vec())?);
        let m = motion.matrix();
        let t = tape.leaf(Tensor::new([3], vec![m[(0, 3)], m[(1, 3)], m[(2, 3)]])?);
        let rotated = tape.matmul(metric, r)?;
        Ok(tape.add_row(rotated, t)?)
    }

    /// Key embeddings `[N·I, C]` of `frame` and the query embedding seen by
    /// each view at the reference points. `state` stands in for the
    /// normalized decoder embeddings `[M, C]` that guide Q-FPE.
    pub fn position_embeddings(
        &self,
        store: &ParamStore,
        frame: &FrameInput,
        state: &Tensor,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::with_params(store);
        let keys = self.keys(&mut tape, frame)?;
        let refs = tape.param(self.references);
        let metric = self.to_metric(&mut tape, refs)?;
        let ctx = self.query_context(&mut tape, metric, frame.rig)?;
        let normed = tape.leaf(state.clone());
        let queries = self.query_embeddings(&mut tape, &ctx, normed)?;
        Ok((
            tape.value(keys.pe).clone(),
            queries.into_iter().map(|q| tape.value(q).clone()).collect(),
        ))
    }

    /// Detections from the last layer's current-frame heads.
    pub fn predict(&self, store: &ParamStore, input: &SampleInput) -> Result<Vec<Detection>> {
        let mut tape = Tape::with_params(store);
        let out = self.forward(&mut tape, input, false)?;
        let Some(last) = out.current.layers.last() else {
            return Ok(Vec::new());
        };
        Ok(decode_predictions(
            tape.value(last.logits),
            tape.value(last.codes),
            tape.value(out.current.references),
            &self.config.bounds,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{total_loss, Box3D, LossWeights};
    use crate::geometry::{Camera, Intrinsics};
    use crate::tensor::grad_check;
    use nalgebra::Vector3;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            width: 8,
            queries: 4,
            layers: 1,
            heads: 2,
            depth_bins: 4,
            classes: 2,
            ..Default::default()
        }
    }

    fn rig(n: usize) -> CameraRig {
        let k = Intrinsics::new(2.0, 2.0, 1.5, 0.5).unwrap();
        let cams = (0..n)
            .map(|i| Camera {
                intrinsics: k,
                extrinsics: Extrinsics::looking_along(Vector3::new(0.3, 0.0, 1.0), i as f64 * 1.7),
            })
            .collect();
        CameraRig::new(cams, 2, 4, vec![1.0, 3.0, 6.0, 10.0]).unwrap()
    }

    fn features(rng: &mut impl Rng, rig: &CameraRig, c: usize) -> Vec<Tensor> {
        (0..rig.len())
            .map(|_| {
                Tensor::new(
                    [rig.pixels(), c],
                    (0..rig.pixels() * c).map(|_| rng.random_range(-1.0..1.0)).collect(),
                )
                .unwrap()
            })
            .collect()
    }

    fn gts() -> Vec<Box3D> {
        vec![
            Box3D {
                center: [3.0, 1.0, 1.0],
                size: [1.0, 2.0, 1.5],
                yaw: 0.3,
                velocity: [0.5, 0.0],
                class: 0,
            },
            Box3D {
                center: [-2.0, 4.0, 0.5],
                size: [0.5, 0.5, 1.0],
                yaw: -1.0,
                velocity: [0.0, -0.4],
                class: 1,
            },
        ]
    }

    fn jitter_biases(store: &mut ParamStore, rng: &mut impl Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with("bias") && !store.name(id).starts_with("heads.cls") {
                for v in store.get_mut(id).data_mut() {
                    *v += rng.random_range(-0.2..0.2);
                }
            }
        }
    }

    #[test]
    fn end_to_end_gradients_match_finite_differences() {
        for (pe_mode, bilateral) in [(PeMode::Camera, true), (PeMode::Global, false)] {
            let mut rng = ChaCha8Rng::seed_from_u64(1);
            let cfg = ModelConfig {
                pe_mode,
                bilateral,
                ..tiny_config()
            };
            let mut store = ParamStore::new();
            let model = CapeModel::new(cfg, &mut store, &mut rng).unwrap();
            jitter_biases(&mut store, &mut rng);
            let r = rig(2);
            let x = features(&mut rng, &r, 8);
            let g = gts();
            let input = SampleInput {
                current: FrameInput { rig: &r, features: &x },
                previous: None,
            };
            let w = LossWeights::default();
            let report = grad_check(&store, 1e-5, |tape| {
                let out = model.forward(tape, &input, false).map_err(|e| match e {
                    ModelError::Tensor(t) => t,
                    other => panic!("{other}"),
                })?;
                let (loss, _) =
                    total_loss(tape, (&out.current, &g), None, &model.config.bounds, &w).map_err(|e| match e {
                        DetectionError::Tensor(t) => t,
                        other => panic!("{other}"),
                    })?;
                Ok(loss)
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-4, "{pe_mode:?}: {:?}", report.worst());
        }
    }

    #[test]
    fn single_frame_predicts_one_box_per_query() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let model = CapeModel::new(tiny_config(), &mut store, &mut rng).unwrap();
        let r = rig(3);
        let x = features(&mut rng, &r, 8);
        let input = SampleInput {
            current: FrameInput { rig: &r, features: &x },
            previous: None,
        };
        let dets = model.predict(&store, &input).unwrap();
        assert_eq!(dets.len(), 4);
        assert!(dets.iter().all(|d| d.score > 0.0 && d.score < 1.0));
    }

    #[test]
    fn wrong_feature_count_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let model = CapeModel::new(tiny_config(), &mut store, &mut rng).unwrap();
        let r = rig(2);
        let x = features(&mut rng, &rig(1), 8);
        let input = SampleInput {
            current: FrameInput { rig: &r, features: &x },
            previous: None,
        };
        assert!(matches!(model.predict(&store, &input), Err(ModelError::Input(_))));
        assert!(CapeModel::new(
            ModelConfig {
                heads: 3,
                ..tiny_config()
            },
            &mut store,
            &mut rng
        )
        .is_err());
    }

    fn temporal_config(mode: TemporalMode) -> ModelConfig {
        ModelConfig {
            layers: 2,
            temporal: TemporalConfig {
                mode,
                ..Default::default()
            },
            ..tiny_config()
        }
    }

    #[test]
    fn pinned_gates_reproduce_the_single_frame_model() {
        let r = rig(2);
        let mut frng = ChaCha8Rng::seed_from_u64(4);
        let x = features(&mut frng, &r, 8);
        let xp = features(&mut frng, &r, 8);
        let motion = EgoMotion::planar(0.1, Vector3::new(0.8, 0.1, 0.0), 0.5).unwrap();

        let mut store_t = ParamStore::new();
        let mut model_t = CapeModel::new(
            temporal_config(TemporalMode::SeparateQueries),
            &mut store_t,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        model_t.fusion.as_mut().unwrap().gate_override = Some((1.0, 0.0));
        let mut store_s = ParamStore::new();
        let model_s = CapeModel::new(
            temporal_config(TemporalMode::Off),
            &mut store_s,
            &mut ChaCha8Rng::seed_from_u64(5),
        )
        .unwrap();
        for id in store_s.ids() {
            assert_eq!(store_s.get(id), store_t.get(store_t.find(store_s.name(id)).unwrap()));
        }

        let input_t = SampleInput {
            current: FrameInput { rig: &r, features: &x },
            previous: Some((FrameInput { rig: &r, features: &xp }, motion)),
        };
        let input_s = SampleInput {
            current: FrameInput { rig: &r, features: &x },
            previous: None,
        };
        let mut tape_t = Tape::with_params(&store_t);
        let out_t = model_t.forward(&mut tape_t, &input_t, false).unwrap();
        let mut tape_s = Tape::with_params(&store_s);
        let out_s = model_s.forward(&mut tape_s, &input_s, false).unwrap();
        for (a, b) in out_t.current.layers.iter().zip(&out_s.current.layers) {
            assert_eq!(tape_t.value(a.logits), tape_s.value(b.logits));
            assert_eq!(tape_t.value(a.codes), tape_s.value(b.codes));
        }
        assert!(out_t.previous.is_some());
    }

    #[test]
    fn identical_frames_give_identical_streams() {
        let r = rig(2);
        let mut frng = ChaCha8Rng::seed_from_u64(6);
        let x = features(&mut frng, &r, 8);
        let mut store = ParamStore::new();
        let model = CapeModel::new(
            temporal_config(TemporalMode::SeparateQueries),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(7),
        )
        .unwrap();
        // Same initialization for both streams.
        let init = store.get(model.query_init).clone();
        *store.get_mut(model.prev_query_init.unwrap()) = init;
        let input = SampleInput {
            current: FrameInput { rig: &r, features: &x },
            previous: Some((FrameInput { rig: &r, features: &x }, EgoMotion::identity(0.5).unwrap())),
        };
        let mut tape = Tape::with_params(&store);
        let out = model.forward(&mut tape, &input, false).unwrap();
        let prev = out.previous.unwrap();
        for (a, b) in out.current.layers.iter().zip(&prev.layers) {
            assert_eq!(tape.value(a.codes), tape.value(b.codes));
        }
    }

    #[test]
    fn shared_queries_attend_to_both_frames() {
        let r = rig(2);
        let mut frng = ChaCha8Rng::seed_from_u64(8);
        let x = features(&mut frng, &r, 8);
        let xp = features(&mut frng, &r, 8);
        let mut store = ParamStore::new();
        let model = CapeModel::new(
            temporal_config(TemporalMode::SharedQueries),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(9),
        )
        .unwrap();
        let motion = EgoMotion::planar(0.1, Vector3::new(0.8, 0.1, 0.0), 0.5).unwrap();
        let input = SampleInput {
            current: FrameInput { rig: &r, features: &x },
            previous: Some((FrameInput { rig: &r, features: &xp }, motion)),
        };
        let mut tape = Tape::with_params(&store);
        let out = model.forward(&mut tape, &input, true).unwrap();
        assert!(out.previous.is_none());
        assert_eq!(out.records[0].maps[0].len(), 4);
    }

    #[test]
    fn previous_references_follow_the_motion() {
        let mut store = ParamStore::new();
        let model = CapeModel::new(
            temporal_config(TemporalMode::SeparateQueries),
            &mut store,
            &mut ChaCha8Rng::seed_from_u64(10),
        )
        .unwrap();
        let motion = EgoMotion::planar(0.4, Vector3::new(1.0, -0.5, 0.0), 0.5).unwrap();
        let mut tape = Tape::with_params(&store);
        let refs = tape.param(model.references);
        let metric = model.to_metric(&mut tape, refs).unwrap();
        let moved = model.propagate(&mut tape, metric, &motion).unwrap();
        let oracle = geometry::propagate_reference(tape.value(metric), &motion);
        assert!(tape.value(moved).max_abs_diff(&oracle) < 1e-12);
    }
}
