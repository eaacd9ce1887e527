use crate::error::{Error, Result};
use crate::tensor::{AttentionLayout, Var};

/// Projection weights of one multi-head attention block, each `[d, d]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars<'t> {
    pub w_q: Var<'t>,
    pub w_k: Var<'t>,
    pub w_v: Var<'t>,
    pub w_o: Var<'t>,
    pub n_heads: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput<'t> {
    /// Projected output `[L, d]`.
    pub output: Var<'t>,
    /// Head mixture before the output projection; carries the attention
    /// weights (see [`crate::tensor::Tape::attention_probes`]).
    pub mixed: Var<'t>,
}

/// Multi-head self-attention over packed sequences.
///
/// With `prefix = Some((p_k, p_v))` the `[p, d]` prompt rows are prepended
/// to the keys and values of every sequence.
pub fn multi_head_attention<'t>(
    x: Var<'t>,
    w: &AttentionVars<'t>,
    prefix: Option<(Var<'t>, Var<'t>)>,
    layout: &AttentionLayout,
) -> Result<AttentionOutput<'t>> {
    let xs = x.shape();
    let ws = w.w_q.shape();
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
        return Err(Error::shape("multi_head_attention", &xs, &ws));
    }
    let q = x.matmul(w.w_q)?;
    let k = x.matmul(w.w_k)?;
    let v = x.matmul(w.w_v)?;
    let mixed = x.tape().attention(q, k, v, prefix, layout, w.n_heads)?;
    Ok(AttentionOutput {
        output: mixed.matmul(w.w_o)?,
        mixed,
    })
}
