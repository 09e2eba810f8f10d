//! Pre-norm attention encoder scoring the 16 score slots.

use super::weights::{Tensor, ValueModelWeights};
use super::{
    tokenize, ActionValues, AgentState, ModelError, TokenSeq, ValueFunction, MAX_SET, NO_PITCH,
    SCORE_OFFSET, SCORE_SLOTS, SEQ_LEN, VOCAB,
};

const LN_EPS: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PositionEncoding {
    /// Fixed sine/cosine table, no parameters.
    Sinusoidal,
    /// `embed.position` tensor of shape `[26, d_model]`.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub positions: PositionEncoding,
    /// Layer norm after the last block.
    pub final_norm: bool,
}

impl Default for ModelConfig {
    /// 64 wide, 8 heads, 6 layers, feed-forward width 64: 157 250 parameters.
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 8,
            layers: 6,
            ff_dim: 64,
            positions: PositionEncoding::Sinusoidal,
            final_norm: false,
        }
    }
}

impl ModelConfig {
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let per_layer = 2 * d            // norm1
            + 3 * d * d + 3 * d          // in_proj
            + d * d + d                  // out_proj
            + 2 * d                      // norm2
            + self.ff_dim * d + self.ff_dim
            + d * self.ff_dim + d;
        let positions = match self.positions {
            PositionEncoding::Learned => SEQ_LEN * d,
            PositionEncoding::Sinusoidal => 0,
        };
        VOCAB * d
            + positions
            + self.layers * per_layer
            + if self.final_norm { 2 * d } else { 0 }
            + 2 * d
            + 2
    }
}

#[derive(Debug, Clone)]
struct Layer {
    norm1: (Vec<f32>, Vec<f32>),
    in_w: Vec<f32>,
    in_b: Vec<f32>,
    out_w: Vec<f32>,
    out_b: Vec<f32>,
    norm2: (Vec<f32>, Vec<f32>),
    ff1_w: Vec<f32>,
    ff1_b: Vec<f32>,
    ff2_w: Vec<f32>,
    ff2_b: Vec<f32>,
}

/// Loaded network, immutable and shareable across threads.
#[derive(Debug, Clone)]
pub struct ValueModel {
    config: ModelConfig,
    pitch_embed: Vec<f32>,
    positions: Vec<f32>,
    layers: Vec<Layer>,
    final_norm: Option<(Vec<f32>, Vec<f32>)>,
    head_w: Vec<f32>,
    head_b: Vec<f32>,
    param_count: usize,
}

fn sinusoidal_table(d: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; SEQ_LEN * d];
    for pos in 0..SEQ_LEN {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            t[pos * d + i] = angle.sin() as f32;
            if i + 1 < d {
                t[pos * d + i + 1] = angle.cos() as f32;
            }
        }
    }
    t
}

struct Fetch<'a> {
    w: &'a ValueModelWeights,
    used: usize,
}

impl Fetch<'_> {
    fn opt(&mut self, name: &str, dims: &[usize]) -> Result<Option<Vec<f32>>, ModelError> {
        let Some(t) = self.w.get(name) else {
            return Ok(None);
        };
        check_dims(t, dims)?;
        self.used += 1;
        Ok(Some(t.data.clone()))
    }

    fn req(&mut self, name: &str, dims: &[usize]) -> Result<Vec<f32>, ModelError> {
        self.opt(name, dims)?
            .ok_or_else(|| ModelError::Shape(format!("missing tensor {name}")))
    }
}

fn check_dims(t: &Tensor, dims: &[usize]) -> Result<(), ModelError> {
    let have: Vec<usize> = t.dims.iter().map(|&d| d as usize).collect();
    if have != dims {
        return Err(ModelError::Shape(format!(
            "{}: expected shape {dims:?}, file declares {have:?}",
            t.name
        )));
    }
    Ok(())
}

impl ValueModel {
    /// Builds the network from a weight set; the layout (width, depth, feed-forward width,
    /// position scheme, final norm) is read from the tensor table, the head count is given.
    pub fn from_weights(w: &ValueModelWeights, heads: usize) -> Result<Self, ModelError> {
        let embed = w
            .get("embed.pitch")
            .ok_or_else(|| ModelError::Shape("missing tensor embed.pitch".into()))?;
        if embed.dims.len() != 2 || embed.dims[0] as usize != VOCAB {
            return Err(ModelError::Shape(format!(
                "embed.pitch: expected [{VOCAB}, d], file declares {:?}",
                embed.dims
            )));
        }
        let d = embed.dims[1] as usize;
        if heads == 0 || d == 0 || d % heads != 0 {
            return Err(ModelError::Shape(format!("width {d} not divisible into {heads} heads")));
        }
        let layers = (0..)
            .take_while(|l| w.get(&format!("layers.{l}.norm1.weight")).is_some())
            .count();
        let ff_dim = match w.get("layers.0.ff.linear1.weight") {
            Some(t) if t.dims.len() == 2 => t.dims[0] as usize,
            _ if layers == 0 => 0,
            _ => return Err(ModelError::Shape("layers.0.ff.linear1.weight malformed".into())),
        };
        let mut f = Fetch { w, used: 0 };
        let pitch_embed = f.req("embed.pitch", &[VOCAB, d])?;
        let learned = f.opt("embed.position", &[SEQ_LEN, d])?;
        let positions_kind = if learned.is_some() {
            PositionEncoding::Learned
        } else {
            PositionEncoding::Sinusoidal
        };
        let positions = learned.unwrap_or_else(|| sinusoidal_table(d));
        let mut layer_vec = Vec::with_capacity(layers);
        for l in 0..layers {
            let n = |s: &str| format!("layers.{l}.{s}");
            layer_vec.push(Layer {
                norm1: (f.req(&n("norm1.weight"), &[d])?, f.req(&n("norm1.bias"), &[d])?),
                in_w: f.req(&n("attn.in_proj.weight"), &[3 * d, d])?,
                in_b: f.req(&n("attn.in_proj.bias"), &[3 * d])?,
                out_w: f.req(&n("attn.out_proj.weight"), &[d, d])?,
                out_b: f.req(&n("attn.out_proj.bias"), &[d])?,
                norm2: (f.req(&n("norm2.weight"), &[d])?, f.req(&n("norm2.bias"), &[d])?),
                ff1_w: f.req(&n("ff.linear1.weight"), &[ff_dim, d])?,
                ff1_b: f.req(&n("ff.linear1.bias"), &[ff_dim])?,
                ff2_w: f.req(&n("ff.linear2.weight"), &[d, ff_dim])?,
                ff2_b: f.req(&n("ff.linear2.bias"), &[d])?,
            });
        }
        let final_norm = match (f.opt("final_norm.weight", &[d])?, f.opt("final_norm.bias", &[d])?) {
            (Some(g), Some(b)) => Some((g, b)),
            (None, None) => None,
            _ => return Err(ModelError::Shape("final_norm needs both weight and bias".into())),
        };
        let head_w = f.req("head.weight", &[2, d])?;
        let head_b = f.req("head.bias", &[2])?;
        if f.used != w.tensors.len() {
            let known = |name: &str| {
                name.starts_with("layers.")
                    || matches!(
                        name,
                        "embed.pitch" | "embed.position" | "final_norm.weight" | "final_norm.bias"
                            | "head.weight" | "head.bias"
                    )
            };
            let extra = w
                .tensors
                .iter()
                .find(|t| !known(&t.name))
                .map(|t| t.name.clone())
                .unwrap_or_else(|| "layer tensors beyond a gap in numbering".into());
            return Err(ModelError::Shape(format!("unexpected tensor {extra}")));
        }
        let config = ModelConfig {
            d_model: d,
            heads,
            layers,
            ff_dim,
            positions: positions_kind,
            final_norm: final_norm.is_some(),
        };
        Ok(ValueModel {
            config,
            pitch_embed,
            positions,
            layers: layer_vec,
            final_norm,
            head_w,
            head_b,
            param_count: w.param_count(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.param_count
    }

    /// Slot embeddings without position terms. Score slots sum the embeddings of their member
    /// pitches in ascending token order; a slot with no pitch uses the `no_pitch` embedding.
    pub fn embed_tokens(&self, seq: &TokenSeq) -> Vec<f32> {
        let d = self.config.d_model;
        let mut x = vec![0.0f32; SEQ_LEN * d];
        for (pos, slot) in seq.tokens.iter().enumerate() {
            let row = &mut x[pos * d..(pos + 1) * d];
            let mut members: [u8; MAX_SET] = *slot;
            members.sort_unstable();
            let mut add = |t: u8| {
                let e = &self.pitch_embed[t as usize * d..(t as usize + 1) * d];
                row.iter_mut().zip(e).for_each(|(r, v)| *r += v);
            };
            let mut any = false;
            for &t in members.iter().filter(|&&t| t != NO_PITCH) {
                add(t);
                any = true;
            }
            if !any {
                add(NO_PITCH);
            }
        }
        x
    }

    /// Token embeddings plus position terms, `26 x d_model` row-major.
    pub fn embed(&self, seq: &TokenSeq) -> Vec<f32> {
        let mut x = self.embed_tokens(seq);
        x.iter_mut().zip(&self.positions).for_each(|(a, p)| *a += p);
        x
    }

    pub fn forward(&self, seq: &TokenSeq) -> Result<ActionValues, ModelError> {
        let d = self.config.d_model;
        let heads = self.config.heads;
        let hd = d / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut x = self.embed(seq);
        let mut h = vec![0.0f32; SEQ_LEN * d];
        let mut qkv = vec![0.0f32; SEQ_LEN * 3 * d];
        let mut ctx = vec![0.0f32; SEQ_LEN * d];
        let mut ff = vec![0.0f32; SEQ_LEN * self.config.ff_dim];
        let mut att = [0.0f32; SEQ_LEN];
        for layer in &self.layers {
            layer_norm(&x, &mut h, &layer.norm1, d);
            linear(&h, &layer.in_w, &layer.in_b, &mut qkv, d, 3 * d);
            for head in 0..heads {
                let off = head * hd;
                for t in 0..SEQ_LEN {
                    let q = &qkv[t * 3 * d + off..t * 3 * d + off + hd];
                    let mut max = f32::NEG_INFINITY;
                    for (s, a) in att.iter_mut().enumerate() {
                        if !seq.mask[s] {
                            *a = f32::NEG_INFINITY;
                            continue;
                        }
                        let k = &qkv[s * 3 * d + d + off..s * 3 * d + d + off + hd];
                        *a = dot(q, k) * scale;
                        max = max.max(*a);
                    }
                    let mut sum = 0.0;
                    for a in att.iter_mut() {
                        *a = if *a == f32::NEG_INFINITY { 0.0 } else { (*a - max).exp() };
                        sum += *a;
                    }
                    let out = &mut ctx[t * d + off..t * d + off + hd];
                    out.iter_mut().for_each(|o| *o = 0.0);
                    for (s, &a) in att.iter().enumerate() {
                        if a == 0.0 {
                            continue;
                        }
                        let w = a / sum;
                        let v = &qkv[s * 3 * d + 2 * d + off..s * 3 * d + 2 * d + off + hd];
                        out.iter_mut().zip(v).for_each(|(o, v)| *o += w * v);
                    }
                }
            }
            linear(&ctx, &layer.out_w, &layer.out_b, &mut h, d, d);
            x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
            layer_norm(&x, &mut h, &layer.norm2, d);
            let f = self.config.ff_dim;
            linear(&h, &layer.ff1_w, &layer.ff1_b, &mut ff, d, f);
            ff.iter_mut().for_each(|v| *v = v.max(0.0));
            linear(&ff, &layer.ff2_w, &layer.ff2_b, &mut h, f, d);
            x.iter_mut().zip(&h).for_each(|(a, b)| *a += b);
        }
        if let Some(norm) = &self.final_norm {
            layer_norm(&x, &mut h, norm, d);
            std::mem::swap(&mut x, &mut h);
        }
        let mut q = [ActionValues::MASKED; SCORE_SLOTS];
        for (slot, value) in q.iter_mut().enumerate() {
            let pos = SCORE_OFFSET + slot;
            if !seq.mask[pos] {
                continue;
            }
            let row = &x[pos * d..(pos + 1) * d];
            let l0 = dot(row, &self.head_w[..d]) + self.head_b[0];
            let l1 = dot(row, &self.head_w[d..2 * d]) + self.head_b[1];
            if !(l0.is_finite() && l1.is_finite()) {
                return Err(ModelError::NonFinite("classification head"));
            }
            // softmax over the two classes, probability of reward 1
            *value = 1.0 / (1.0 + ((l0 - l1) as f64).exp());
        }
        Ok(ActionValues { q })
    }
}

impl ValueFunction for ValueModel {
    fn values(&self, state: &AgentState) -> Result<ActionValues, ModelError> {
        self.forward(&tokenize(state))
    }
}

#[inline]
fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out[t] = w x[t] + b` for every row, `w` stored `[n_out, n_in]`.
fn linear(x: &[f32], w: &[f32], b: &[f32], out: &mut [f32], n_in: usize, n_out: usize) {
    for t in 0..SEQ_LEN {
        let row = &x[t * n_in..(t + 1) * n_in];
        let dst = &mut out[t * n_out..(t + 1) * n_out];
        for (o, d) in dst.iter_mut().enumerate() {
            *d = b[o] + dot(row, &w[o * n_in..(o + 1) * n_in]);
        }
    }
}

fn layer_norm(x: &[f32], out: &mut [f32], (gamma, beta): &(Vec<f32>, Vec<f32>), d: usize) {
    for t in 0..SEQ_LEN {
        let row = &x[t * d..(t + 1) * d];
        let mean = row.iter().sum::<f32>() / d as f32;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (k, o) in out[t * d..(t + 1) * d].iter_mut().enumerate() {
            *o = (row[k] - mean) * inv * gamma[k] + beta[k];
        }
    }
}
