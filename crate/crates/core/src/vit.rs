//! Vision-transformer backbone: patch geometry, patch embedding, pre-norm
//! encoder blocks and attention rollout.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{Bindings, ParamId, ParamStore};

pub const INIT_STD: f64 = 0.02;
/// Init std of encoder-block linear weights.
pub const BLOCK_INIT_STD: f64 = 0.1;
pub const LN_EPS: f64 = 1e-6;

/// Image and patch geometry. `patch` is the window side, `stride` the step.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch: usize,
    pub stride: usize,
    pub dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { height: 96, width: 48, channels: 3, patch: 8, stride: 8, dim: 64 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
}

/// Divisors the patch count must satisfy: four for the fusion quarters and
/// twelve for the slicing groups.
pub const REQUIRED_DIVISORS: [usize; 2] = [4, 12];

impl PatchConfig {
    /// Grid extents without the divisibility requirement.
    pub fn raw_grid(&self) -> Result<Grid> {
        if self.channels == 0 || self.dim == 0 || self.patch == 0 {
            return Err(Error::Config("channels, dim and patch must be positive".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        if self.patch > self.height || self.patch > self.width {
            return Err(Error::Config(format!(
                "patch {} exceeds image {}x{}",
                self.patch, self.height, self.width
            )));
        }
        let rows = (self.height + self.stride - self.patch) / self.stride;
        let cols = (self.width + self.stride - self.patch) / self.stride;
        Ok(Grid { rows, cols, count: rows * cols })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Validated grid: fails unless the patch count is divisible by 4 and 12.
pub fn compute_grid(cfg: &PatchConfig) -> Result<Grid> {
    let grid = cfg.raw_grid()?;
    if REQUIRED_DIVISORS.iter().any(|d| grid.count % d != 0) {
        return Err(Error::Config(format!(
            "patch count N = {} ({}x{}) must be divisible by {:?}",
            grid.count, grid.rows, grid.cols, REQUIRED_DIVISORS
        )));
    }
    Ok(grid)
}

/// Gathers every `patch×patch` window (row-major window order) of a batch of
/// `[B, C, H, W]` images into `[B, N, C·P·P]`. Within a window values are
/// ordered channel, row, column.
pub fn extract_patches(images: &Tensor, cfg: &PatchConfig) -> Result<Tensor> {
    let grid = cfg.raw_grid()?;
    let (c, h, w, p, s) = (cfg.channels, cfg.height, cfg.width, cfg.patch, cfg.stride);
    let shape = images.shape();
    let batch = match shape {
        [b, cc, hh, ww] if (*cc, *hh, *ww) == (c, h, w) => *b,
        _ => return Err(Error::Shape { op: "extract_patches", lhs: shape.to_vec(), rhs: vec![c, h, w] }),
    };
    let src = images.data();
    let plen = cfg.patch_len();
    let mut out = Vec::with_capacity(batch * grid.count * plen);
    for b in 0..batch {
        let img = &src[b * c * h * w..(b + 1) * c * h * w];
        for gr in 0..grid.rows {
            for gc in 0..grid.cols {
                for ch in 0..c {
                    for py in 0..p {
                        let row = (ch * h + gr * s + py) * w + gc * s;
                        out.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    Tensor::new(&[batch, grid.count, plen], out)
}

/// Ordered patch embeddings `[N, D]` with an optional class token `[1, D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSequence {
    pub tokens: Tensor,
    pub class_token: Option<Tensor>,
}

impl PatchSequence {
    pub fn new(tokens: Tensor, class_token: Option<Tensor>) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::invalid("patch_sequence", format!("tokens must be [N, D], got {:?}", tokens.shape())));
        }
        if let Some(c) = &class_token {
            if c.shape() != [1, tokens.cols()] {
                return Err(Error::Shape { op: "patch_sequence", lhs: tokens.shape().to_vec(), rhs: c.shape().to_vec() });
            }
        }
        Ok(PatchSequence { tokens, class_token })
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// `[1, T, D]` with the class token (if any) as row 0.
    pub fn to_batch(&self) -> Tensor {
        let mut data = Vec::with_capacity((self.len() + 1) * self.dim());
        if let Some(c) = &self.class_token {
            data.extend_from_slice(c.data());
        }
        data.extend_from_slice(self.tokens.data());
        let rows = data.len() / self.dim();
        Tensor::new(&[1, rows, self.dim()], data).expect("consistent sequence shape")
    }

    /// Inverse of [`Self::to_batch`] for a single `[1, T, D]` sequence.
    pub fn from_batch(t: &Tensor, has_class: bool) -> Result<Self> {
        let [1, rows, d] = t.shape() else {
            return Err(Error::invalid("patch_sequence", format!("expected [1, T, D], got {:?}", t.shape())));
        };
        let (rows, d) = (*rows, *d);
        let data = t.data();
        if has_class {
            let cls = Tensor::new(&[1, d], data[..d].to_vec())?;
            let tokens = Tensor::new(&[rows - 1, d], data[d..].to_vec())?;
            Self::new(tokens, Some(cls))
        } else {
            Self::new(Tensor::new(&[rows, d], data.to_vec())?, None)
        }
    }
}

/// Linear projection of flattened windows, equivalent to a strided convolution.
#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, cfg: &PatchConfig, seed: u64) -> Result<Self> {
        Ok(PatchEmbed {
            weight: store.add_normal("patch_embed.weight", &[cfg.patch_len(), cfg.dim], INIT_STD, seed)?,
            bias: store.add_full("patch_embed.bias", &[cfg.dim], 0.0)?,
        })
    }

    /// `patches`: `[B, N, C·P·P]` → `[B, N, D]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, patches: Var) -> Result<Var> {
        let y = tape.matmul(patches, bind.var(self.weight))?;
        tape.add_broadcast(y, bind.var(self.bias))
    }
}

/// Embeds one `[C, H, W]` image into an `N×D` sequence (no class token).
pub fn patch_embed(image: &Tensor, cfg: &PatchConfig, weight: &Tensor, bias: &Tensor) -> Result<PatchSequence> {
    if image.shape() != [cfg.channels, cfg.height, cfg.width] {
        return Err(Error::Shape {
            op: "patch_embed",
            lhs: image.shape().to_vec(),
            rhs: vec![cfg.channels, cfg.height, cfg.width],
        });
    }
    let batch = image.reshaped(&[1, cfg.channels, cfg.height, cfg.width])?;
    let patches = extract_patches(&batch, cfg)?;
    let mut tape = Tape::new();
    let x = tape.constant(patches);
    let w = tape.constant(weight.clone());
    let b = tape.constant(bias.clone());
    let y = tape.matmul(x, w)?;
    let y = tape.add_broadcast(y, b)?;
    let n = tape.shape(y)[1];
    let tokens = tape.value(y).reshaped(&[n, cfg.dim])?;
    PatchSequence::new(tokens, None)
}

/// Pre-norm transformer encoder block:
/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))` with a GELU hidden layer.
#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub heads: usize,
    pub ln1: (ParamId, ParamId),
    /// Fused query/key/value weight `[D, 3D]`.
    pub qkv: ParamId,
    /// Query and value biases; keys have none, since a key bias shifts every
    /// score of a row equally and cannot change the softmax.
    pub qv_bias: (ParamId, ParamId),
    pub proj: (ParamId, ParamId),
    pub ln2: (ParamId, ParamId),
    pub fc1: (ParamId, ParamId),
    pub fc2: (ParamId, ParamId),
}

/// Output of one block plus the attention node whose weights it retains.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub out: Var,
    pub attention: Var,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, prefix: &str, dim: usize, heads: usize, hidden: usize, seed: u64) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!("dim {dim} is not divisible by {heads} heads")));
        }
        let weight = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| {
            store.add_normal(&format!("{prefix}.{name}.weight"), &[fan_in, fan_out], BLOCK_INIT_STD, seed)
        };
        let bias = |store: &mut ParamStore, name: &str, n: usize| store.add_full(&format!("{prefix}.{name}"), &[n], 0.0);
        let qkv = weight(store, "attn.qkv", dim, 3 * dim)?;
        let qv_bias = (bias(store, "attn.q_bias", dim)?, bias(store, "attn.v_bias", dim)?);
        let mut linear = |name: &str, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId)> {
            Ok((weight(store, name, fan_in, fan_out)?, bias(store, &format!("{name}.bias"), fan_out)?))
        };
        let proj = linear("attn.proj", dim, dim)?;
        let fc1 = linear("mlp.fc1", dim, hidden)?;
        let fc2 = linear("mlp.fc2", hidden, dim)?;
        let ln1 = (
            store.add_full(&format!("{prefix}.norm1.gain"), &[dim], 1.0)?,
            store.add_full(&format!("{prefix}.norm1.bias"), &[dim], 0.0)?,
        );
        let ln2 = (
            store.add_full(&format!("{prefix}.norm2.gain"), &[dim], 1.0)?,
            store.add_full(&format!("{prefix}.norm2.bias"), &[dim], 0.0)?,
        );
        Ok(EncoderBlock { heads, ln1, qkv, qv_bias, proj, ln2, fc1, fc2 })
    }

    /// `x`: `[B, T, D]` → `[B, T, D]`.
    pub fn forward(&self, tape: &mut Tape, bind: &Bindings, x: Var) -> Result<BlockOutput> {
        let linear = |tape: &mut Tape, x: Var, (w, b): (ParamId, ParamId)| -> Result<Var> {
            let y = tape.matmul(x, bind.var(w))?;
            tape.add_broadcast(y, bind.var(b))
        };
        let h = tape.layer_norm(x, bind.var(self.ln1.0), bind.var(self.ln1.1), LN_EPS)?;
        let qkv = tape.matmul(h, bind.var(self.qkv))?;
        let dim = tape.shape(h)[2];
        let no_key_bias = tape.constant(Tensor::zeros(&[dim]));
        let bias = tape.concat(&[bind.var(self.qv_bias.0), no_key_bias, bind.var(self.qv_bias.1)], 0)?;
        let qkv = tape.add_broadcast(qkv, bias)?;
        let attention = tape.self_attention(qkv, self.heads)?;
        let mixed = linear(tape, attention, self.proj)?;
        let x = tape.add(x, mixed)?;

        let h = tape.layer_norm(x, bind.var(self.ln2.0), bind.var(self.ln2.1), LN_EPS)?;
        let h = linear(tape, h, self.fc1)?;
        let h = tape.gelu(h)?;
        let h = linear(tape, h, self.fc2)?;
        let out = tape.add(x, h)?;
        Ok(BlockOutput { out, attention })
    }
}

/// Result of running a range of blocks.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub out: Var,
    /// One attention node per applied block, in order.
    pub attention: Vec<Var>,
}

/// Applies `blocks[range]` to a `[B, N+1, D]` sequence.
pub fn encode(
    tape: &mut Tape,
    bind: &Bindings,
    blocks: &[EncoderBlock],
    range: std::ops::Range<usize>,
    x: Var,
) -> Result<Encoded> {
    if tape.shape(x).len() != 3 {
        return Err(Error::invalid("encode", format!("expected [B, T, D], got {:?}", tape.shape(x))));
    }
    let blocks = blocks
        .get(range.clone())
        .ok_or_else(|| Error::invalid("encode", format!("block range {range:?} out of bounds")))?;
    let mut out = x;
    let mut attention = Vec::with_capacity(blocks.len());
    for block in blocks {
        let o = block.forward(tape, bind, out)?;
        out = o.out;
        attention.push(o.attention);
    }
    Ok(Encoded { out, attention })
}

/// Attention rollout heat map over the patch grid.
///
/// Each layer's attention (`[heads, T, T]` or already head-averaged `[T, T]`,
/// with `T = N + 1` and the class token first) is averaged over heads, mixed
/// with the identity as `(A + I) / 2`, and the layers are multiplied from the
/// first to the last. The class-token row over the `N` patch columns is
/// reshaped to the grid and normalized to sum to one; an all-zero row yields
/// the uniform map.
pub fn attention_rollout(layers: &[Tensor], grid: Grid) -> Result<Tensor> {
    let t = grid.count + 1;
    let mut rollout = identity(t);
    for layer in layers {
        let mean = match layer.shape() {
            [h, a, b] if *a == t && *b == t => {
                let mut m = vec![0.0; t * t];
                for head in 0..*h {
                    for (acc, v) in m.iter_mut().zip(&layer.data()[head * t * t..(head + 1) * t * t]) {
                        *acc += v;
                    }
                }
                m.iter_mut().for_each(|v| *v /= *h as f64);
                m
            }
            [a, b] if *a == t && *b == t => layer.data().to_vec(),
            other => {
                return Err(Error::Shape { op: "attention_rollout", lhs: other.to_vec(), rhs: vec![t, t] });
            }
        };
        let mut mixed = mean;
        for i in 0..t {
            for j in 0..t {
                mixed[i * t + j] = (mixed[i * t + j] + if i == j { 1.0 } else { 0.0 }) / 2.0;
            }
        }
        // rollout ← mixed · rollout
        let mut next = vec![0.0; t * t];
        for i in 0..t {
            for k in 0..t {
                let a = mixed[i * t + k];
                for j in 0..t {
                    next[i * t + j] += a * rollout[k * t + j];
                }
            }
        }
        rollout = next;
    }
    let class_row = &rollout[1..t];
    let total: f64 = class_row.iter().sum();
    let heat: Vec<f64> = if total > 0.0 {
        class_row.iter().map(|v| v / total).collect()
    } else {
        vec![1.0 / grid.count as f64; grid.count]
    };
    Tensor::new(&[grid.rows, grid.cols], heat)
}

fn identity(n: usize) -> Vec<f64> {
    let mut m = vec![0.0; n * n];
    for i in 0..n {
        m[i * n + i] = 1.0;
    }
    m
}
