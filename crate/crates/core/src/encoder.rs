//! Rumor representation: multi-head self-attention over path embeddings,
//! a two-layer ReLU feed-forward block applied row-wise, and max-pooling over
//! paths into a single rumor vector.
//!
//! Batched encoding projects all paths of a batch at once and keeps the
//! per-head queries, keys and values so the cross-attention branch can reuse
//! them without recomputation.

use rand::Rng;

use crate::data::{Domain, PathSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-head query/key/value projections plus the output projection.
#[derive(Debug, Clone)]
pub struct AttentionParams {
    pub w_q: Vec<Tensor>,
    pub w_k: Vec<Tensor>,
    pub w_v: Vec<Tensor>,
    pub w_o: Tensor,
}

#[derive(Debug, Clone)]
pub struct FeedForward {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub attention: AttentionParams,
    pub ffn: FeedForward,
    pub residual: bool,
}

/// `uniform(-b, b)` with `b = sqrt(6 / (fan_in + fan_out))`.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::param(&[fan_in, fan_out], data).expect("xavier shape")
}

impl AttentionParams {
    pub fn init(rng: &mut impl Rng, dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("heads ({heads}) must divide dim ({dim})")));
        }
        let dk = dim / heads;
        let mut w_q = Vec::with_capacity(heads);
        let mut w_k = Vec::with_capacity(heads);
        let mut w_v = Vec::with_capacity(heads);
        for _ in 0..heads {
            w_q.push(xavier(rng, dim, dk));
            w_k.push(xavier(rng, dim, dk));
            w_v.push(xavier(rng, dim, dk));
        }
        let w_o = xavier(rng, heads * dk, dim);
        Ok(AttentionParams { w_q, w_k, w_v, w_o })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn key_dim(&self) -> usize {
        self.w_k[0].cols()
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (kind, ws) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            for (j, w) in ws.iter().enumerate() {
                out.push((format!("{prefix}.{kind}.{j}"), w.clone()));
            }
        }
        out.push((format!("{prefix}.w_o"), self.w_o.clone()));
        out
    }
}

impl FeedForward {
    pub fn init(rng: &mut impl Rng, dim: usize, hidden: usize) -> Self {
        FeedForward {
            w1: xavier(rng, dim, hidden),
            b1: Tensor::param(&[hidden], vec![0.0; hidden]).expect("bias"),
            w2: xavier(rng, hidden, dim),
            b2: Tensor::param(&[dim], vec![0.0; dim]).expect("bias"),
        }
    }

    /// `relu(x·W1 + b1)·W2 + b2`, row-wise.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w1)?.add_row(&self.b1)?.relu().matmul(&self.w2)?.add_row(&self.b2)
    }

    pub fn named(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w1"), self.w1.clone()),
            (format!("{prefix}.b1"), self.b1.clone()),
            (format!("{prefix}.w2"), self.w2.clone()),
            (format!("{prefix}.b2"), self.b2.clone()),
        ]
    }
}

impl EncoderParams {
    pub fn init(rng: &mut impl Rng, dim: usize, heads: usize, ffn_dim: usize, residual: bool) -> Result<Self> {
        Ok(EncoderParams {
            attention: AttentionParams::init(rng, dim, heads)?,
            ffn: FeedForward::init(rng, dim, ffn_dim),
            residual,
        })
    }

    pub fn dim(&self) -> usize {
        self.attention.w_o.cols()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        let mut out = self.attention.named("attn");
        out.extend(self.ffn.named("ffn"));
        out
    }
}

/// Encoded rumor vector with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct RumorEmbedding {
    pub rumor_id: String,
    pub domain: Domain,
    pub vector: Vec<f64>,
}

/// `softmax(q·kᵀ / sqrt(d_k))`.
pub fn attention_weights(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let dk = q.cols() as f64;
    q.matmul_t(k)?.scale(1.0 / dk.sqrt()).softmax_rows()
}

/// Scaled dot-product attention.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    attention_weights(q, k)?.matmul(v)
}

/// Output of head `j` on a single path matrix `x`.
pub fn self_attention_head(x: &Tensor, attn: &AttentionParams, j: usize) -> Result<Tensor> {
    let q = x.matmul(&attn.w_q[j])?;
    let k = x.matmul(&attn.w_k[j])?;
    let v = x.matmul(&attn.w_v[j])?;
    attend(&q, &k, &v)
}

/// Attention weights of head `j` on `x` (rows sum to one).
pub fn self_attention_weights(x: &Tensor, attn: &AttentionParams, j: usize) -> Result<Tensor> {
    attention_weights(&x.matmul(&attn.w_q[j])?, &x.matmul(&attn.w_k[j])?)
}

/// `concat(head_1, …, head_h)·W_O`.
pub fn mha(x: &Tensor, attn: &AttentionParams) -> Result<Tensor> {
    let heads = (0..attn.heads())
        .map(|j| self_attention_head(x, attn, j))
        .collect::<Result<Vec<_>>>()?;
    Tensor::concat_cols(&heads)?.matmul(&attn.w_o)
}

/// Rumor vector for a single path set.
pub fn encode(pathset: &PathSet, params: &EncoderParams) -> Result<Tensor> {
    let batch = encode_batch(&[pathset], params)?;
    batch.features.reshape(&[params.dim()])
}

pub fn encode_embedding(pathset: &PathSet, domain: Domain, params: &EncoderParams) -> Result<RumorEmbedding> {
    Ok(RumorEmbedding {
        rumor_id: pathset.rumor_id.clone(),
        domain,
        vector: encode(pathset, params)?.to_vec(),
    })
}

/// Per-head projections of every path row in a batch.
#[derive(Debug, Clone)]
pub struct Projections {
    pub q: Vec<Tensor>,
    pub k: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Projections {
    pub fn compute(x: &Tensor, attn: &AttentionParams) -> Result<Self> {
        let proj = |ws: &[Tensor]| ws.iter().map(|w| x.matmul(w)).collect::<Result<Vec<_>>>();
        Ok(Projections {
            q: proj(&attn.w_q)?,
            k: proj(&attn.w_k)?,
            v: proj(&attn.w_v)?,
        })
    }
}

/// Graph handles for an encoded batch.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `B×d`, one rumor vector per row.
    pub features: Tensor,
    /// All path rows stacked, `(Σ n_i)×d`.
    pub paths: Tensor,
    pub offsets: Vec<usize>,
    pub lengths: Vec<usize>,
    pub projections: Projections,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }
}

fn stack_pathsets(pathsets: &[&PathSet], dim: usize) -> Result<(Tensor, Vec<usize>, Vec<usize>)> {
    let mut data = Vec::new();
    let mut offsets = Vec::with_capacity(pathsets.len());
    let mut lengths = Vec::with_capacity(pathsets.len());
    let mut total = 0;
    for ps in pathsets {
        if ps.dim != dim {
            return Err(Error::shape("encode", &[ps.len(), ps.dim], &[ps.len(), dim]));
        }
        if ps.is_empty() {
            return Err(Error::Contract(format!("empty path set for {}", ps.rumor_id)));
        }
        offsets.push(total);
        lengths.push(ps.len());
        total += ps.len();
        data.extend_from_slice(ps.values());
    }
    Ok((Tensor::new(&[total, dim], data)?, offsets, lengths))
}

/// Attention → FFN → per-rumor max-pool for query segments attending over
/// key/value segments. `x_q` are the query-side inputs (for the residual).
fn pooled_outputs(
    params: &EncoderParams,
    w_o: &Tensor,
    x_q: &Tensor,
    q: &Projections,
    q_segments: &[(usize, usize)],
    kv: &Projections,
    kv_segments: &[(usize, usize)],
) -> Result<Tensor> {
    let mut per_item = Vec::with_capacity(q_segments.len());
    let mut x_rows = Vec::new();
    for (&(qs, qn), &(ks, kn)) in q_segments.iter().zip(kv_segments) {
        let heads = (0..q.q.len())
            .map(|j| {
                attend(
                    &q.q[j].slice_rows(qs, qn)?,
                    &kv.k[j].slice_rows(ks, kn)?,
                    &kv.v[j].slice_rows(ks, kn)?,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        per_item.push(Tensor::concat_cols(&heads)?);
        x_rows.extend(qs..qs + qn);
    }
    let mut o = Tensor::concat_rows(&per_item)?.matmul(w_o)?;
    if params.residual {
        o = o.add(&x_q.select_rows(&x_rows)?)?;
    }
    let mut f = params.ffn.forward(&o)?;
    if params.residual {
        f = f.add(&o)?;
    }
    let lengths: Vec<usize> = q_segments.iter().map(|&(_, n)| n).collect();
    f.segment_max_pool(&lengths)
}

/// Self-attention encoding of a batch of rumors into a `B×d` feature matrix.
pub fn encode_batch(pathsets: &[&PathSet], params: &EncoderParams) -> Result<EncodedBatch> {
    if pathsets.is_empty() {
        return Err(Error::Contract("encode_batch on an empty batch".into()));
    }
    let (paths, offsets, lengths) = stack_pathsets(pathsets, params.dim())?;
    let projections = Projections::compute(&paths, &params.attention)?;
    let segments: Vec<(usize, usize)> = offsets.iter().copied().zip(lengths.iter().copied()).collect();
    let features = pooled_outputs(
        params,
        &params.attention.w_o,
        &paths,
        &projections,
        &segments,
        &projections,
        &segments,
    )?;
    Ok(EncodedBatch {
        features,
        paths,
        offsets,
        lengths,
        projections,
    })
}

/// Cross-attention encodings for `(source index, target index)` pairs: queries
/// from the source rumor's paths, keys and values from the target's. With
/// `cam = None` the encoder's own projections are reused; otherwise the given
/// attention weights are applied to the stacked path inputs. The FFN and
/// pooling are always shared. Returns `P×d`.
pub fn cross_attention_batch(
    source: &EncodedBatch,
    target: &EncodedBatch,
    pairs: &[(usize, usize)],
    params: &EncoderParams,
    cam: Option<&AttentionParams>,
) -> Result<Tensor> {
    if pairs.is_empty() {
        return Err(Error::Contract("cross attention over no pairs".into()));
    }
    let q_segments: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(s, _)| (source.offsets[s], source.lengths[s]))
        .collect();
    let kv_segments: Vec<(usize, usize)> = pairs
        .iter()
        .map(|&(_, t)| (target.offsets[t], target.lengths[t]))
        .collect();
    match cam {
        None => pooled_outputs(
            params,
            &params.attention.w_o,
            &source.paths,
            &source.projections,
            &q_segments,
            &target.projections,
            &kv_segments,
        ),
        Some(attn) => {
            let q = Projections::compute(&source.paths, attn)?;
            let kv = Projections::compute(&target.paths, attn)?;
            pooled_outputs(params, &attn.w_o, &source.paths, &q, &q_segments, &kv, &kv_segments)
        }
    }
}

/// Cross-attention encoding of one source/target pair, `d`-vector.
pub fn cross_attention(
    source: &PathSet,
    target: &PathSet,
    params: &EncoderParams,
    cam: Option<&AttentionParams>,
) -> Result<Tensor> {
    let s = encode_batch(&[source], params)?;
    let t = encode_batch(&[target], params)?;
    cross_attention_batch(&s, &t, &[(0, 0)], params, cam)?.reshape(&[params.dim()])
}
