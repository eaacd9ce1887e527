//! Neural building blocks over [`Var`]s: dense layers, layer norm,
//! multi-head attention with optional prefixes, 1-D convolution and a
//! bidirectional LSTM.
//!
//! Layers are plain functions of their weight variables so that each one
//! can be finite-difference checked in isolation. [`params`] binds named
//! parameters to a tape.

mod attention;
pub mod init;
pub mod params;
mod recurrent;

pub use attention::{multi_head_attention, AttentionOutput, AttentionVars};
pub use params::{Ctx, Init, Param, ParamGroup, ParamId, ParamSpec, ParamStore};
pub use recurrent::{bilstm, conv1d, lstm, LstmVars};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Var;

/// Nonlinearity used inside the encoder feed-forward block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    /// Tanh approximation.
    Gelu,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Gelu => {
                let c = (2.0 / std::f64::consts::PI).sqrt();
                let cube = x.mul(x)?.mul(x)?.scale(0.044715)?;
                let t = x.add(cube)?.scale(c)?.tanh()?;
                let one_plus = t.add(x.tape().constant(&crate::Tensor::scalar(1.0)))?;
                x.mul(one_plus)?.scale(0.5)
            }
        }
    }
}

/// `x · w + b` for `x: [L, d_in]`, `w: [d_in, d_out]`.
pub fn linear<'t>(x: Var<'t>, w: Var<'t>, b: Option<Var<'t>>) -> Result<Var<'t>> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add(b),
        None => Ok(y),
    }
}

/// `w2 · act(w1 · x + b1) + b2` applied rowwise.
pub fn feed_forward<'t>(
    x: Var<'t>,
    w1: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
    act: Activation,
) -> Result<Var<'t>> {
    let h = act.apply(linear(x, w1, Some(b1))?)?;
    linear(h, w2, Some(b2))
}

/// Row-wise layer normalization with population variance.
pub fn layer_norm<'t>(x: Var<'t>, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
    x.layer_norm(gain, bias, eps)
}

/// Token embedding lookup; ids outside the table raise a vocabulary error.
pub fn embedding<'t>(table: Var<'t>, ids: &[usize]) -> Result<Var<'t>> {
    let rows = table.shape()[0];
    if let Some(&id) = ids.iter().find(|&&i| i >= rows) {
        return Err(Error::Vocab { id, size: rows });
    }
    let index: Vec<Option<usize>> = ids.iter().map(|&i| Some(i)).collect();
    table.gather_rows(&index)
}
