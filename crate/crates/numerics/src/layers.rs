//! Composite building blocks assembled from primitive graph ops.

use crate::error::Result;
use crate::graph::{ConvGeom, Graph, Var};
use crate::real::Real;

/// `x · w + b` for `x: [rows, in]`, `w: [in, out]`, `b: [out]`.
pub fn linear<T: Real>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_bias(y, b)
}

/// Convolution as unfold + matmul. `w` is `[k·k·C_in, C_out]`.
pub fn conv2d<T: Real>(g: &mut Graph<T>, x: Var, geom: ConvGeom, w: Var, b: Var) -> Result<Var> {
    let cols = g.im2col(x, geom)?;
    linear(g, cols, w, b)
}

/// Projection weights of one self-attention block.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
}

/// Multi-head self-attention over `batch` sequences of `len` tokens,
/// `x: [batch·len, d]`. No positional information is injected here, so
/// the op is equivariant to token permutations within a sequence.
pub fn multi_head_attention<T: Real>(
    g: &mut Graph<T>,
    x: Var,
    batch: usize,
    len: usize,
    heads: usize,
    p: &AttentionWeights,
) -> Result<Var> {
    let q = linear(g, x, p.wq, p.bq)?;
    let k = linear(g, x, p.wk, p.bk)?;
    let v = linear(g, x, p.wv, p.bv)?;
    let attn = g.attention(q, k, v, batch, len, heads)?;
    linear(g, attn, p.wo, p.bo)
}
