//! Building blocks on the tape. Activations carry a leading batch axis.

use crate::error::{Error, Result};
use crate::tensor::{PoolKind, Scalar, Tape, Var};

/// Combined `d x d` projections; head `i` uses columns `i*d_k..(i+1)*d_k`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct NormVars {
    pub g: Var,
    pub b: Var,
}

/// Which tensor the feed-forward layer reads inside a wrapped block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FfInput {
    /// The first normalized tensor (post-norm reading).
    #[default]
    Normalized,
    /// The first residual sum, before normalization.
    Residual,
}

impl FfInput {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "normalized" => Ok(Self::Normalized),
            "residual" => Ok(Self::Residual),
            other => Err(Error::config(format!("unknown feed-forward input `{other}`"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Normalized => "normalized",
            Self::Residual => "residual",
        }
    }
}

pub fn linear<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

/// `[B, L, h*d_k] -> [B*h, L, d_k]`
fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, n_h: usize) -> Result<Var> {
    let [b, l, d] = dims3(tape, x)?;
    let y = tape.reshape(x, &[b, l, n_h, d / n_h])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    tape.reshape(y, &[b * n_h, l, d / n_h])
}

fn merge_heads<T: Scalar>(tape: &mut Tape<T>, x: Var, n_h: usize) -> Result<Var> {
    let [bh, l, dk] = dims3(tape, x)?;
    let y = tape.reshape(x, &[bh / n_h, n_h, l, dk])?;
    let y = tape.permute(y, &[0, 2, 1, 3])?;
    tape.reshape(y, &[bh / n_h, l, n_h * dk])
}

fn dims3<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<[usize; 3]> {
    match *tape.shape(x) {
        [a, b, c] => Ok([a, b, c]),
        ref s => Err(Error::shape("expected [batch, rows, cols]", s, &[0, 0, 0])),
    }
}

/// Multi-head scaled dot-product self-attention over the row axis of `[B, L, d]`.
pub fn temporal_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &AttentionVars, n_h: usize) -> Result<Var> {
    let [_, _, d] = dims3(tape, x)?;
    if n_h == 0 || d % n_h != 0 {
        return Err(Error::config(format!("model width {d} is not divisible by {n_h} heads")));
    }
    let q = linear(tape, x, p.wq, p.bq)?;
    let k = linear(tape, x, p.wk, p.bk)?;
    let v = linear(tape, x, p.wv, p.bv)?;
    let (q, k, v) = (split_heads(tape, q, n_h)?, split_heads(tape, k, n_h)?, split_heads(tape, v, n_h)?);
    let logits = tape.bmm(q, k, true)?;
    let logits = tape.scale(logits, T::from_f64_lossy(1.0 / ((d / n_h) as f64).sqrt()));
    let att = tape.softmax_last(logits)?;
    let o = tape.bmm(att, v, false)?;
    let o = merge_heads(tape, o, n_h)?;
    linear(tape, o, p.wo, p.bo)
}

/// Sigmoid map over the antenna grid, `[B, N_R*N_T, 1]`.
pub fn spatial_map<T: Scalar>(tape: &mut Tape<T>, x: Var, conv_w: Var, conv_b: Var, n_r: usize, n_t: usize) -> Result<Var> {
    let [b, s, _] = dims3(tape, x)?;
    if s != n_r * n_t {
        return Err(Error::shape("spatial_attention", &[s], &[n_r, n_t]));
    }
    let mx = tape.pool_last(x, PoolKind::Max)?;
    let av = tape.pool_last(x, PoolKind::Avg)?;
    let pooled = tape.concat_last(&[mx, av])?;
    let pooled = tape.permute(pooled, &[0, 2, 1])?;
    let pooled = tape.reshape(pooled, &[b, 2, n_r, n_t])?;
    let m = tape.conv2d(pooled, conv_w, conv_b)?;
    let m = tape.sigmoid(m);
    tape.reshape(m, &[b, s, 1])
}

/// Gates every antenna-pair row of `[B, N_R*N_T, d]` by its map entry.
pub fn spatial_attention<T: Scalar>(tape: &mut Tape<T>, x: Var, conv_w: Var, conv_b: Var, n_r: usize, n_t: usize) -> Result<Var> {
    let m = spatial_map(tape, x, conv_w, conv_b, n_r, n_t)?;
    tape.mul(x, m)
}

/// `K x K` convolution over the antenna grid with `d` channels.
pub fn spatial_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var, n_r: usize, n_t: usize) -> Result<Var> {
    let [bs, s, d] = dims3(tape, x)?;
    if s != n_r * n_t {
        return Err(Error::shape("spatial_conv", &[s], &[n_r, n_t]));
    }
    let y = tape.permute(x, &[0, 2, 1])?;
    let y = tape.reshape(y, &[bs, d, n_r, n_t])?;
    let y = tape.conv2d(y, w, b)?;
    let y = tape.reshape(y, &[bs, d, s])?;
    tape.permute(y, &[0, 2, 1])
}

/// Length-`K` convolution along the tap axis with `d` channels.
pub fn temporal_conv<T: Scalar>(tape: &mut Tape<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.permute(x, &[0, 2, 1])?;
    let y = tape.conv1d(y, w, b)?;
    tape.permute(y, &[0, 2, 1])
}

pub fn feed_forward<T: Scalar>(tape: &mut Tape<T>, x: Var, p: &FeedForwardVars) -> Result<Var> {
    let h = linear(tape, x, p.w1, p.b1)?;
    let h = tape.relu(h);
    linear(tape, h, p.w2, p.b2)
}

/// Residual, normalization and feed-forward around an already mixed tensor.
pub fn wrap<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    mixed: Var,
    ln1: &NormVars,
    ff: &FeedForwardVars,
    ln2: &NormVars,
    ff_input: FfInput,
    eps: T,
) -> Result<Var> {
    let rc1 = tape.add(mixed, x)?;
    let n1 = tape.layer_norm(rc1, ln1.g, ln1.b, eps)?;
    let src = match ff_input {
        FfInput::Normalized => n1,
        FfInput::Residual => rc1,
    };
    let f = feed_forward(tape, src, ff)?;
    let rc2 = tape.add(f, n1)?;
    tape.layer_norm(rc2, ln2.g, ln2.b, eps)
}
