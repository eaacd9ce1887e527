//! Bottleneck adapters, per-layer key/value prompts, and the freeze policy
//! that selects which parameters a fine-tuning method may update.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EncoderConfig, EncoderModel};
use crate::nn::{Init, ParamGroup, ParamSpec, ParamStore};
use crate::tensor::Var;

/// Where an adapter sits inside an encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    AfterAttention,
    AfterFfn,
}

impl Placement {
    pub const ALL: [Placement; 2] = [Placement::AfterAttention, Placement::AfterFfn];

    fn key(self) -> &'static str {
        match self {
            Placement::AfterAttention => "after_attention",
            Placement::AfterFfn => "after_ffn",
        }
    }
}

/// Bounds of the small uniform initialization of the down-projection.
pub const ADAPTER_DOWN_INIT: f64 = 0.01;
/// Standard deviation of prompt initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

/// Weights of one adapter block bound to a tape.
#[derive(Clone, Copy, Debug)]
pub struct AdapterVars<'t> {
    /// `[d, d / r]`
    pub w_down: Var<'t>,
    pub b_down: Var<'t>,
    /// `[d / r, d]`
    pub w_up: Var<'t>,
    pub b_up: Var<'t>,
}

/// `x + f_up(relu(f_down(x)))`.
pub fn adapter_forward<'t>(x: Var<'t>, a: &AdapterVars<'t>) -> Result<Var<'t>> {
    let xs = x.shape();
    let ds = a.w_down.shape();
    if xs.len() != 2 || ds.len() != 2 || xs[1] != ds[0] || a.w_up.shape() != [ds[1], ds[0]] {
        return Err(Error::shape("adapter_forward", &xs, &ds));
    }
    let h = x.matmul(a.w_down)?.add(a.b_down)?.relu()?;
    let delta = h.matmul(a.w_up)?.add(a.b_up)?;
    x.add(delta)
}

pub fn bottleneck_width(d_model: usize, reduction_factor: usize) -> Result<usize> {
    if reduction_factor == 0 || !d_model.is_multiple_of(reduction_factor) {
        return Err(Error::Config(format!(
            "d_model {d_model} is not divisible by reduction factor {reduction_factor}"
        )));
    }
    Ok(d_model / reduction_factor)
}

pub fn adapter_name(layer: usize, placement: Placement, part: &str) -> String {
    format!("layers.{layer}.adapter.{}.{part}", placement.key())
}

pub fn prompt_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.prompt.{part}")
}

/// Two adapter blocks per encoder layer.
pub fn adapter_specs(config: &EncoderConfig, reduction_factor: usize) -> Result<Vec<ParamSpec>> {
    let d = config.d_model;
    let b = bottleneck_width(d, reduction_factor)?;
    let mut specs = Vec::with_capacity(config.n_layers * 8);
    for layer in 0..config.n_layers {
        for placement in Placement::ALL {
            let g = ParamGroup::Adapter;
            specs.push(ParamSpec::new(
                adapter_name(layer, placement, "w_down"),
                &[d, b],
                g,
                Init::Uniform(ADAPTER_DOWN_INIT),
            ));
            specs.push(ParamSpec::new(
                adapter_name(layer, placement, "b_down"),
                &[b],
                g,
                Init::Zeros,
            ));
            specs.push(ParamSpec::new(
                adapter_name(layer, placement, "w_up"),
                &[b, d],
                g,
                Init::Zeros,
            ));
            specs.push(ParamSpec::new(
                adapter_name(layer, placement, "b_up"),
                &[d],
                g,
                Init::Zeros,
            ));
        }
    }
    Ok(specs)
}

/// One `(P_k, P_v)` pair of `[p, d]` matrices per encoder layer.
pub fn prompt_specs(config: &EncoderConfig, length: usize, init_std: f64) -> Vec<ParamSpec> {
    let d = config.d_model;
    (0..config.n_layers)
        .flat_map(|layer| {
            ["key", "value"].map(|part| {
                ParamSpec::new(
                    prompt_name(layer, part),
                    &[length, d],
                    ParamGroup::Prompt,
                    Init::Normal(init_std),
                )
            })
        })
        .collect()
}

/// Fine-tuning method, expressed as the set of trainable parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FreezeMode {
    #[default]
    Full,
    Adapter,
    Prompt,
}

impl std::str::FromStr for FreezeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "adapter" => Ok(Self::Adapter),
            "prompt" => Ok(Self::Prompt),
            other => Err(Error::Config(format!("unknown freeze mode {other}"))),
        }
    }
}

/// Adapter/prompt attachments and freeze settings of an encoder.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PeftState {
    pub reduction_factor: Option<usize>,
    pub prompt_length: Option<usize>,
    pub freeze: FreezeMode,
    /// Also train layer-norm parameters in adapter mode.
    pub train_layer_norm: bool,
}

/// Whether a parameter of `group` is updated under `mode`.
pub fn trainable_under(group: ParamGroup, mode: FreezeMode, train_layer_norm: bool) -> bool {
    match mode {
        FreezeMode::Full => true,
        FreezeMode::Adapter => {
            matches!(group, ParamGroup::Adapter | ParamGroup::Head)
                || (train_layer_norm && group == ParamGroup::LayerNorm)
        }
        FreezeMode::Prompt => matches!(group, ParamGroup::Prompt | ParamGroup::Head),
    }
}

/// Adds two zero-up adapters to every layer; the network function is
/// unchanged until the adapters are trained.
pub fn insert_adapters(
    model: &mut EncoderModel,
    reduction_factor: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    if model.peft.reduction_factor.is_some() {
        return Err(Error::Config("adapters are already inserted".into()));
    }
    let specs = adapter_specs(&model.config, reduction_factor)?;
    for spec in &specs {
        model.store.add_spec(spec, rng)?;
    }
    model.peft.reduction_factor = Some(reduction_factor);
    model.refresh()
}

/// Attaches per-layer prefix prompts of length `length`.
pub fn attach_prompts(
    model: &mut EncoderModel,
    length: usize,
    init_std: f64,
    rng: &mut impl Rng,
) -> Result<()> {
    if model.peft.prompt_length.is_some() {
        return Err(Error::Config("prompts are already attached".into()));
    }
    for spec in &prompt_specs(&model.config, length, init_std) {
        model.store.add_spec(spec, rng)?;
    }
    model.peft.prompt_length = Some(length);
    model.refresh()
}

/// Marks parameters trainable or frozen for `mode`; returns the number of
/// trainable scalars.
pub fn apply_freeze_policy(model: &mut EncoderModel, mode: FreezeMode) -> Result<usize> {
    match mode {
        FreezeMode::Adapter if model.peft.reduction_factor.is_none() => {
            return Err(Error::Config("adapter mode needs inserted adapters".into()))
        }
        FreezeMode::Prompt if model.peft.prompt_length.is_none() => {
            return Err(Error::Config("prompt mode needs attached prompts".into()))
        }
        _ => {}
    }
    let ln = model.peft.train_layer_norm;
    model
        .store
        .set_trainable(|p| trainable_under(p.group, mode, ln));
    model.peft.freeze = mode;
    Ok(model.store.trainable_scalars())
}

/// Trainable scalars over all scalars; 0 for an empty store.
pub fn count_trainable_fraction(store: &ParamStore) -> f64 {
    let total = store.total_scalars();
    if total == 0 {
        return 0.0;
    }
    store.trainable_scalars() as f64 / total as f64
}

/// `(trainable, total)` scalar counts of a layout under a freeze mode,
/// computed without allocating parameters.
pub fn layout_counts(
    specs: &[ParamSpec],
    mode: FreezeMode,
    train_layer_norm: bool,
) -> (usize, usize) {
    specs.iter().fold((0, 0), |(t, n), s| {
        let k = s.numel();
        (
            t + if trainable_under(s.group, mode, train_layer_norm) {
                k
            } else {
                0
            },
            n + k,
        )
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_diff_check_many, Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_up_projection_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let x = tape.constant(&Tensor::from_fn(&[3, 4], |_| rng.gen_range(-5.0..5.0)));
        let a = AdapterVars {
            w_down: tape.constant(&Tensor::from_fn(&[4, 2], |_| rng.gen_range(-1.0..1.0))),
            b_down: tape.constant(&Tensor::full(&[2], 0.3)),
            w_up: tape.zeros(&[2, 4]),
            b_up: tape.zeros(&[4]),
        };
        let y = adapter_forward(x, &a).unwrap();
        assert!(y
            .value()
            .iter()
            .zip(x.value())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn hand_evaluated_adapter() {
        let tape = Tape::new();
        let t =
            |s: &[usize], v: &[f64]| tape.constant(&Tensor::new(s.to_vec(), v.to_vec()).unwrap());
        let a = AdapterVars {
            w_down: t(&[2, 1], &[1.0, 0.0]),
            b_down: t(&[1], &[0.0]),
            w_up: t(&[1, 2], &[1.0, 0.0]),
            b_up: t(&[2], &[0.0, 0.0]),
        };
        let y = adapter_forward(t(&[1, 2], &[3.0, 5.0]), &a).unwrap();
        assert_eq!(y.value(), vec![6.0, 5.0]);
    }

    #[test]
    fn bottleneck_widths() {
        assert_eq!(bottleneck_width(768, 16).unwrap(), 48);
        assert!(matches!(bottleneck_width(100, 16), Err(Error::Config(_))));
    }

    #[test]
    fn base_like_adapter_count() {
        let specs = adapter_specs(&EncoderConfig::base_like(), 16).unwrap();
        assert_eq!(specs.len(), 24 * 4);
        let n: usize = specs.iter().map(ParamSpec::numel).sum();
        assert_eq!(n, 24 * (768 * 48 + 48 + 48 * 768 + 768));
        assert_eq!(n, 1_789_056);
    }

    #[test]
    fn prompt_count_for_twelve_layers() {
        let mut c = EncoderConfig::tiny(100);
        c.n_layers = 12;
        let n: usize = prompt_specs(&c, 30, PROMPT_INIT_STD)
            .iter()
            .map(ParamSpec::numel)
            .sum();
        assert_eq!(n, 12 * 2 * 30 * 128);
        assert_eq!(n, 92_160);
    }

    #[test]
    fn policy_table() {
        use ParamGroup::*;
        for g in [Backbone, LayerNorm, Adapter, Prompt, Head, MlmHead] {
            assert!(trainable_under(g, FreezeMode::Full, false));
        }
        assert!(trainable_under(Adapter, FreezeMode::Adapter, false));
        assert!(trainable_under(Head, FreezeMode::Adapter, false));
        assert!(!trainable_under(LayerNorm, FreezeMode::Adapter, false));
        assert!(trainable_under(LayerNorm, FreezeMode::Adapter, true));
        assert!(!trainable_under(Backbone, FreezeMode::Adapter, true));
        assert!(trainable_under(Prompt, FreezeMode::Prompt, false));
        assert!(!trainable_under(Adapter, FreezeMode::Prompt, false));
        assert!(!trainable_under(MlmHead, FreezeMode::Prompt, false));
    }

    #[test]
    fn adapter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut r = |s: &[usize]| Tensor::from_fn(s, |_| rng.gen_range(-1.0..1.0));
        let inputs = vec![r(&[4, 8]), r(&[8, 2]), r(&[2]), r(&[2, 8]), r(&[8])];
        let report = finite_diff_check_many(
            |_, v| {
                let a = AdapterVars {
                    w_down: v[1],
                    b_down: v[2],
                    w_up: v[3],
                    b_up: v[4],
                };
                let y = adapter_forward(v[0], &a)?;
                y.mul(y)?.sum()
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-4);
    }
}
