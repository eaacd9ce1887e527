//! Finite-difference gradient suites for the differentiable building blocks.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{encoder_layer, LayerVars};
use crate::nn::{bilstm, conv1d, lstm, multi_head_attention, Activation, AttentionVars, LstmVars};
use crate::peft::{adapter_forward, AdapterVars};
use crate::tensor::{finite_diff_check_many, AttentionLayout, GradCheckReport, Tensor, Var};

/// Central-difference step used by every suite.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Attention,
    AttentionPrefix,
    Adapter,
    Lstm,
    Conv,
    LayerNorm,
    Encoder,
}

impl Component {
    pub const ALL: [Component; 7] = [
        Component::Attention,
        Component::AttentionPrefix,
        Component::Adapter,
        Component::Lstm,
        Component::Conv,
        Component::LayerNorm,
        Component::Encoder,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Attention => "attention",
            Component::AttentionPrefix => "attention_prefix",
            Component::Adapter => "adapter",
            Component::Lstm => "lstm",
            Component::Conv => "conv",
            Component::LayerNorm => "layernorm",
            Component::Encoder => "encoder",
        }
    }

    /// Expands a command-line selector; `attention` covers both the plain
    /// and the prefixed variant.
    pub fn select(name: &str) -> Result<Vec<Component>> {
        match name {
            "all" => Ok(Self::ALL.to_vec()),
            "attention" => Ok(vec![Component::Attention, Component::AttentionPrefix]),
            other => Ok(vec![other.parse()?]),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown gradcheck component {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComponentCheck {
    pub component: Component,
    pub max_rel_error: f64,
    pub passed: bool,
}

/// Runs one suite. With `corrupt` the first analytic coordinate is shifted
/// by one before comparison, a negative control for the checker itself.
pub fn check_component(
    component: Component,
    seed: u64,
    tolerance: f64,
    corrupt: bool,
) -> Result<ComponentCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = match component {
        Component::Attention => attention(&mut rng, false)?,
        Component::AttentionPrefix => attention(&mut rng, true)?,
        Component::Adapter => adapter(&mut rng)?,
        Component::Lstm => lstm_suite(&mut rng)?,
        Component::Conv => conv(&mut rng)?,
        Component::LayerNorm => layer_norm(&mut rng)?,
        Component::Encoder => encoder(&mut rng)?,
    };
    if corrupt {
        if let Some(g) = report.analytic.iter_mut().find_map(|g| g.first_mut()) {
            *g += 1.0;
        }
    }
    let max_rel_error = report.max_rel_error();
    Ok(ComponentCheck {
        component,
        max_rel_error,
        passed: max_rel_error <= tolerance,
    })
}

pub fn run_gradcheck(
    components: &[Component],
    seed: u64,
    tolerance: f64,
    corrupt: bool,
) -> Result<Vec<ComponentCheck>> {
    components
        .iter()
        .map(|&c| check_component(c, seed, tolerance, corrupt))
        .collect()
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn sum_sq(y: Var<'_>) -> Result<Var<'_>> {
    y.mul(y)?.sum()
}

fn attention(rng: &mut ChaCha8Rng, prefix: bool) -> Result<GradCheckReport> {
    let (l, d, p) = (5, 6, 3);
    let mut inputs = vec![random(&[l, d], rng)];
    inputs.extend((0..4).map(|_| random(&[d, d], rng)));
    if prefix {
        inputs.push(random(&[p, d], rng));
        inputs.push(random(&[p, d], rng));
    }
    let layout = AttentionLayout::packed(vec![0..2, 2..5])
        .with_key_mask(vec![true, true, true, true, false]);
    finite_diff_check_many(
        |_, v| {
            let w = AttentionVars {
                w_q: v[1],
                w_k: v[2],
                w_v: v[3],
                w_o: v[4],
                n_heads: 2,
            };
            let pre = if prefix { Some((v[5], v[6])) } else { None };
            sum_sq(multi_head_attention(v[0], &w, pre, &layout)?.output)
        },
        &inputs,
        STEP,
    )
}

fn adapter(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let inputs = vec![
        random(&[4, 8], rng),
        random(&[8, 2], rng),
        random(&[2], rng),
        random(&[2, 8], rng),
        random(&[8], rng),
    ];
    finite_diff_check_many(
        |_, v| {
            let a = AdapterVars {
                w_down: v[1],
                b_down: v[2],
                w_up: v[3],
                b_up: v[4],
            };
            sum_sq(adapter_forward(v[0], &a)?)
        },
        &inputs,
        STEP,
    )
}

fn lstm_suite(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (d, h) = (3, 2);
    let inputs = vec![
        random(&[6, d], rng),
        random(&[d, 4 * h], rng),
        random(&[h, 4 * h], rng),
        random(&[4 * h], rng),
    ];
    let segs = [0..4, 4..6];
    finite_diff_check_many(
        |_, v| {
            let w = LstmVars {
                w_ih: v[1],
                w_hh: v[2],
                b: v[3],
            };
            let fwd = lstm(v[0], &w, &segs, false)?;
            let both = bilstm(v[0], &w, &w, &segs)?;
            sum_sq(fwd)?.add(sum_sq(both)?)
        },
        &inputs,
        STEP,
    )
}

fn conv(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let inputs = vec![
        random(&[7, 3], rng),
        random(&[3, 3, 4], rng),
        random(&[4], rng),
    ];
    let segs = [0..2, 2..7];
    finite_diff_check_many(
        |_, v| sum_sq(conv1d(v[0], v[1], Some(v[2]), &segs)?),
        &inputs,
        STEP,
    )
}

fn layer_norm(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let inputs = vec![
        random(&[4, 6], rng),
        random(&[6], rng),
        random(&[6], rng),
        random(&[4, 6], rng),
    ];
    finite_diff_check_many(
        // the fixed random projection keeps the loss from being symmetric
        |_, v| v[0].layer_norm(v[1], v[2], 1e-12)?.mul(v[3])?.sum(),
        &inputs,
        STEP,
    )
}

fn encoder(rng: &mut ChaCha8Rng) -> Result<GradCheckReport> {
    let (l, d, ff, r, p) = (5, 4, 8, 2, 2);
    let shapes: Vec<Vec<usize>> = vec![
        vec![l, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d, d],
        vec![d],
        vec![d],
        vec![d, ff],
        vec![ff],
        vec![ff, d],
        vec![d],
        vec![d],
        vec![d],
        vec![d, r],
        vec![r],
        vec![r, d],
        vec![d],
        vec![d, r],
        vec![r],
        vec![r, d],
        vec![d],
        vec![p, d],
        vec![p, d],
    ];
    let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, rng)).collect();
    let layout = AttentionLayout::packed(vec![0..3, 3..5]);
    finite_diff_check_many(
        |_, v| {
            let ad = |i: usize| AdapterVars {
                w_down: v[i],
                b_down: v[i + 1],
                w_up: v[i + 2],
                b_up: v[i + 3],
            };
            let w = LayerVars {
                attention: AttentionVars {
                    w_q: v[1],
                    w_k: v[2],
                    w_v: v[3],
                    w_o: v[4],
                    n_heads: 2,
                },
                ln1: (v[5], v[6]),
                w1: v[7],
                b1: v[8],
                w2: v[9],
                b2: v[10],
                ln2: (v[11], v[12]),
                adapters: Some([ad(13), ad(17)]),
                prefix: Some((v[21], v[22])),
            };
            let (y, _) = encoder_layer(v[0], &w, &layout, Activation::Gelu, 1e-12, &Ok)?;
            let proj = v[0].tape().constant(&Tensor::from_fn(&[l, d], |i| {
                ((i * 7 % 5) as f64 - 2.0) / 2.0
            }));
            y.mul(proj)?.sum()
        },
        &inputs,
        STEP,
    )
}
