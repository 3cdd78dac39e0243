//! Transformer decoder with bilateral multi-view cross-attention.
//!
//! Embeddings are token-major: decoder embeddings are `[M, C]`, the keys of
//! all views are stacked view after view into `[N·I, C]`.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Activation, LayerNorm, Linear, Mlp2, ParamStore, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum DecoderError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{queries} query embeddings for {keys} key views")]
    ViewCount { queries: usize, keys: usize },
    #[error("width {width} does not split into {heads} heads")]
    HeadSplit { width: usize, heads: usize },
}

pub type Result<T, E = DecoderError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderShape {
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Content and positional terms are projected separately and summed.
    pub bilateral: bool,
    /// Normalize each view's keys on their own instead of jointly.
    #[serde(default)]
    pub per_view_softmax: bool,
}

impl DecoderShape {
    pub fn head_width(&self) -> Result<usize> {
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(DecoderError::HeadSplit {
                width: self.width,
                heads: self.heads,
            });
        }
        Ok(self.width / self.heads)
    }
}

/// Keys of every view, stacked view-major.
#[derive(Clone, Copy, Debug)]
pub struct KeySet {
    /// `[N·I, C]` image features.
    pub features: Var,
    /// `[N·I, C]` key position embeddings.
    pub pe: Var,
    pub views: usize,
    pub pixels: usize,
}

/// The four maps of one head attending to one view, each `[M, I]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewMaps {
    /// Scaled positional term `G·Pᵀ`; absent without bilateral attention.
    pub local: Option<Tensor>,
    /// Scaled content term `O·Xᵀ`; absent without bilateral attention.
    pub global: Option<Tensor>,
    /// Pre-softmax logits.
    pub overall: Tensor,
    /// Post-softmax weights.
    pub softmax: Tensor,
}

/// Cross-attention maps of one layer, indexed `[head][view]`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttentionRecord {
    pub maps: Vec<Vec<ViewMaps>>,
}

fn columns(t: &Tensor, start: usize, len: usize) -> Tensor {
    let (rows, cols) = t.dims2("columns").expect("rank 2");
    let mut data = Vec::with_capacity(rows * len);
    for r in 0..rows {
        data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
    }
    Tensor::new([rows, len], data).expect("sized")
}

/// Logits in concatenated form, `[q_c | q_p] · [k_c | k_p]ᵀ · scale`.
///
/// Used to check that the two-term sum recorded by the attention equals
/// attention over concatenated content and position embeddings.
pub fn concat_form_logits(
    q_content: &Tensor,
    q_position: &Tensor,
    k_content: &Tensor,
    k_position: &Tensor,
    scale: f64,
) -> Result<Tensor> {
    let cat = |a: &Tensor, b: &Tensor| -> Result<Tensor> {
        let (ra, ca) = a.dims2("concat_form")?;
        let (rb, cb) = b.dims2("concat_form")?;
        if ra != rb {
            return Err(TensorError::ShapeMismatch {
                op: "concat_form",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }
            .into());
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(a.row(r));
            data.extend_from_slice(b.row(r));
        }
        Ok(Tensor::new([ra, ca + cb], data)?)
    };
    let q = cat(q_content, q_position)?;
    let k = cat(k_content, k_position)?;
    Ok(q.matmul(&k.transpose()?)?.map(|v| v * scale))
}

#[derive(Clone, Copy, Debug)]
pub struct CrossAttention {
    pub content_q: Linear,
    pub content_k: Linear,
    /// Positional projections, present in bilateral mode.
    pub position_q: Option<Linear>,
    pub position_k: Option<Linear>,
    pub value: Linear,
    pub out: Linear,
    pub shape: DecoderShape,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, name: &str, shape: DecoderShape, rng: &mut impl Rng) -> Result<Self> {
        shape.head_width()?;
        let c = shape.width;
        let (position_q, position_k) = if shape.bilateral {
            (
                Some(Linear::new(store, &format!("{name}.position_q"), c, c, rng)),
                Some(Linear::new(store, &format!("{name}.position_k"), c, c, rng)),
            )
        } else {
            (None, None)
        };
        Ok(Self {
            content_q: Linear::new(store, &format!("{name}.content_q"), c, c, rng),
            content_k: Linear::new(store, &format!("{name}.content_k"), c, c, rng),
            position_q,
            position_k,
            value: Linear::new(store, &format!("{name}.value"), c, c, rng),
            out: Linear::new(store, &format!("{name}.out"), c, c, rng),
            shape,
        })
    }

    /// Attends from `queries: [M, C]` to every view's keys. `query_pe[n]` is
    /// the query position embedding in view `n`'s frame. Returns the update
    /// to add to the residual stream.
    pub fn forward(
        &self,
        tape: &mut Tape,
        queries: Var,
        query_pe: &[Var],
        keys: &KeySet,
        record: bool,
    ) -> Result<(Var, Option<AttentionRecord>)> {
        if query_pe.len() != keys.views {
            return Err(DecoderError::ViewCount {
                queries: query_pe.len(),
                keys: keys.views,
            });
        }
        let dh = self.shape.head_width()?;
        let scale = 1.0 / (dh as f64).sqrt();
        let (n_views, pixels) = (keys.views, keys.pixels);

        let value = self.value.forward(tape, keys.features)?;
        let bilateral = match (self.position_q, self.position_k) {
            (Some(pq), Some(pk)) => Some((pq, pk)),
            _ => None,
        };
        // Bilateral: one content query for all views plus per-view positional
        // queries. Otherwise: one query per view from the summed embeddings.
        let (content_q, content_k, position) = match bilateral {
            Some((pq, pk)) => {
                let cq = self.content_q.forward(tape, queries)?;
                let ck = self.content_k.forward(tape, keys.features)?;
                let pk = pk.forward(tape, keys.pe)?;
                let pqs = query_pe
                    .iter()
                    .map(|&g| pq.forward(tape, g))
                    .collect::<Result<Vec<_>, _>>()?;
                (vec![cq], ck, Some((pqs, pk)))
            }
            None => {
                let summed = tape.add(keys.features, keys.pe)?;
                let ck = self.content_k.forward(tape, summed)?;
                let qs = query_pe
                    .iter()
                    .map(|&g| {
                        let q = tape.add(queries, g)?;
                        self.content_q.forward(tape, q)
                    })
                    .collect::<Result<Vec<_>, _>>()?;
                (qs, ck, None)
            }
        };

        let mut head_outputs = Vec::with_capacity(self.shape.heads);
        let mut record_maps = Vec::new();
        for h in 0..self.shape.heads {
            let kc = tape.narrow(content_k, 1, h * dh, dh)?;
            let (logits, content, positional) = match &position {
                Some((pqs, pk)) => {
                    let qc = tape.narrow(content_q[0], 1, h * dh, dh)?;
                    let content = tape.matmul_t(qc, kc)?;
                    let content = tape.scale(content, scale);
                    let pk = tape.narrow(*pk, 1, h * dh, dh)?;
                    let mut parts = Vec::with_capacity(n_views);
                    for (n, &pq) in pqs.iter().enumerate() {
                        let q = tape.narrow(pq, 1, h * dh, dh)?;
                        let k = tape.narrow(pk, 0, n * pixels, pixels)?;
                        parts.push(tape.matmul_t(q, k)?);
                    }
                    let positional = tape.concat(&parts, 1)?;
                    let positional = tape.scale(positional, scale);
                    (tape.add(content, positional)?, Some(content), Some(positional))
                }
                None => {
                    let mut parts = Vec::with_capacity(n_views);
                    for (n, &q) in content_q.iter().enumerate() {
                        let q = tape.narrow(q, 1, h * dh, dh)?;
                        let k = tape.narrow(kc, 0, n * pixels, pixels)?;
                        parts.push(tape.matmul_t(q, k)?);
                    }
                    let logits = tape.concat(&parts, 1)?;
                    (tape.scale(logits, scale), None, None)
                }
            };
            let weights = if self.shape.per_view_softmax {
                let m = tape.shape(logits)[0];
                let per_view = tape.reshape(logits, [m * n_views, pixels])?;
                let w = tape.softmax(per_view, 1)?;
                tape.reshape(w, [m, n_views * pixels])?
            } else {
                tape.softmax(logits, 1)?
            };
            let v = tape.narrow(value, 1, h * dh, dh)?;
            head_outputs.push(tape.matmul(weights, v)?);

            if record {
                let slice = |t: &Tape, var: Var, n: usize| columns(t.value(var), n * pixels, pixels);
                record_maps.push(
                    (0..n_views)
                        .map(|n| ViewMaps {
                            local: positional.map(|p| slice(tape, p, n)),
                            global: content.map(|c| slice(tape, c, n)),
                            overall: slice(tape, logits, n),
                            softmax: slice(tape, weights, n),
                        })
                        .collect(),
                );
            }
        }
        let joined = tape.concat(&head_outputs, 1)?;
        let update = self.out.forward(tape, joined)?;
        Ok((update, record.then_some(AttentionRecord { maps: record_maps })))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct SelfAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, heads: usize, rng: &mut impl Rng) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.query"), width, width, rng),
            key: Linear::new(store, &format!("{name}.key"), width, width, rng),
            value: Linear::new(store, &format!("{name}.value"), width, width, rng),
            out: Linear::new(store, &format!("{name}.out"), width, width, rng),
            heads,
        }
    }

    /// Queries and keys carry the positional term, values do not.
    pub fn forward(&self, tape: &mut Tape, x: Var, position: Var) -> Result<Var> {
        let width = self.query.output;
        if self.heads == 0 || !width.is_multiple_of(self.heads) {
            return Err(DecoderError::HeadSplit {
                width,
                heads: self.heads,
            });
        }
        let dh = width / self.heads;
        let with_pos = tape.add(x, position)?;
        let q = self.query.forward(tape, with_pos)?;
        let k = self.key.forward(tape, with_pos)?;
        let v = self.value.forward(tape, x)?;
        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.narrow(q, 1, h * dh, dh)?;
            let kh = tape.narrow(k, 1, h * dh, dh)?;
            let vh = tape.narrow(v, 1, h * dh, dh)?;
            let logits = tape.matmul_t(qh, kh)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
            let w = tape.softmax(logits, 1)?;
            heads.push(tape.matmul(w, vh)?);
        }
        let joined = tape.concat(&heads, 1)?;
        Ok(self.out.forward(tape, joined)?)
    }
}

/// Pre-norm block: self-attention, cross-attention, feed-forward, each
/// added back onto the residual stream.
#[derive(Clone, Copy, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: SelfAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: CrossAttention,
    pub ffn_norm: LayerNorm,
    pub ffn: Mlp2,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, shape: DecoderShape, rng: &mut impl Rng) -> Result<Self> {
        let c = shape.width;
        Ok(Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), c),
            self_attn: SelfAttention::new(store, &format!("{name}.self_attn"), c, shape.heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), c),
            cross_attn: CrossAttention::new(store, &format!("{name}.cross_attn"), shape, rng)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), c),
            ffn: Mlp2::new(store, &format!("{name}.ffn"), (c, 4 * c, c), Activation::Relu, rng),
        })
    }

    /// One layer. `query_pe` receives the normalized embeddings entering
    /// cross-attention and returns one position embedding per view.
    pub fn forward<F>(
        &self,
        tape: &mut Tape,
        o: Var,
        self_pos: Var,
        keys: &KeySet,
        query_pe: &mut F,
        record: bool,
    ) -> Result<(Var, Option<AttentionRecord>)>
    where
        F: FnMut(&mut Tape, Var) -> Result<Vec<Var>, TensorError>,
    {
        let n = self.self_norm.forward(tape, o)?;
        let update = self.self_attn.forward(tape, n, self_pos)?;
        let o = tape.add(o, update)?;

        let n = self.cross_norm.forward(tape, o)?;
        let g = query_pe(tape, n)?;
        let (update, rec) = self.cross_attn.forward(tape, n, &g, keys, record)?;
        let o = tape.add(o, update)?;

        let n = self.ffn_norm.forward(tape, o)?;
        let update = self.ffn.forward(tape, n)?;
        Ok((tape.add(o, update)?, rec))
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<DecoderLayer>,
    /// Shared normalization applied before the prediction heads.
    pub final_norm: LayerNorm,
    pub shape: DecoderShape,
}

/// Per-layer outputs of a decoder pass.
#[derive(Clone, Debug, Default)]
pub struct Decoded {
    /// Residual stream after each layer (not normalized).
    pub layers: Vec<Var>,
    /// Attention maps per layer, when requested.
    pub records: Vec<AttentionRecord>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, shape: DecoderShape, rng: &mut impl Rng) -> Result<Self> {
        shape.head_width()?;
        let layers = (0..shape.layers)
            .map(|l| DecoderLayer::new(store, &format!("{name}.layer{l}"), shape, rng))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), shape.width),
            shape,
        })
    }

    /// Runs every layer, recomputing query position embeddings from the
    /// current embeddings each time.
    pub fn decode<F>(
        &self,
        tape: &mut Tape,
        o: Var,
        self_pos: Var,
        keys: &KeySet,
        mut query_pe: F,
        record: bool,
    ) -> Result<Decoded>
    where
        F: FnMut(&mut Tape, Var) -> Result<Vec<Var>, TensorError>,
    {
        let mut out = Decoded::default();
        let mut o = o;
        for layer in &self.layers {
            let (next, rec) = layer.forward(tape, o, self_pos, keys, &mut query_pe, record)?;
            o = next;
            out.layers.push(o);
            out.records.extend(rec);
        }
        Ok(out)
    }

    pub fn normalize(&self, tape: &mut Tape, o: Var) -> Result<Var> {
        Ok(self.final_norm.forward(tape, o)?)
    }
}
