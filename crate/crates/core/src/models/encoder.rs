use std::ops::Range;

use rand::Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::nn::{
    embedding, feed_forward, linear, multi_head_attention, Activation, AttentionVars, Ctx, Init,
    ParamGroup, ParamId, ParamSpec, ParamStore,
};
use crate::peft::{
    adapter_forward, adapter_name, adapter_specs, prompt_name, prompt_specs, AdapterVars,
    PeftState, Placement, PROMPT_INIT_STD,
};
use crate::tensor::{AttentionLayout, Var};

/// Weights of one post-norm encoder layer bound to a tape, plus optional
/// adapters (after attention, after FFN) and a key/value prefix.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars<'t> {
    pub attention: AttentionVars<'t>,
    pub ln1: (Var<'t>, Var<'t>),
    pub w1: Var<'t>,
    pub b1: Var<'t>,
    pub w2: Var<'t>,
    pub b2: Var<'t>,
    pub ln2: (Var<'t>, Var<'t>),
    pub adapters: Option<[AdapterVars<'t>; 2]>,
    pub prefix: Option<(Var<'t>, Var<'t>)>,
}

/// attention → [adapter] → add & norm → FFN → [adapter] → add & norm.
///
/// `dropout` is applied to each sublayer output before its adapter.
/// Returns the layer output and the attention mixture node.
pub fn encoder_layer<'t>(
    x: Var<'t>,
    w: &LayerVars<'t>,
    layout: &AttentionLayout,
    activation: Activation,
    eps: f64,
    dropout: &dyn Fn(Var<'t>) -> Result<Var<'t>>,
) -> Result<(Var<'t>, Var<'t>)> {
    let att = multi_head_attention(x, &w.attention, w.prefix, layout)?;
    let mut a = dropout(att.output)?;
    if let Some(ad) = &w.adapters {
        a = adapter_forward(a, &ad[0])?;
    }
    let x = x.add(a)?.layer_norm(w.ln1.0, w.ln1.1, eps)?;
    let mut f = dropout(feed_forward(x, w.w1, w.b1, w.w2, w.b2, activation)?)?;
    if let Some(ad) = &w.adapters {
        f = adapter_forward(f, &ad[1])?;
    }
    Ok((x.add(f)?.layer_norm(w.ln2.0, w.ln2.1, eps)?, att.mixed))
}

#[derive(Debug, Clone, Copy)]
struct AdapterIds {
    w_down: ParamId,
    b_down: ParamId,
    w_up: ParamId,
    b_up: ParamId,
}

#[derive(Debug, Clone)]
struct LayerIds {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    ln1: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    ln2: (ParamId, ParamId),
    adapters: Option<[AdapterIds; 2]>,
    prompt: Option<(ParamId, ParamId)>,
}

#[derive(Debug, Clone)]
struct EncoderIds {
    token: ParamId,
    position: ParamId,
    emb_ln: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    mlm_bias: ParamId,
    head: Option<(ParamId, ParamId)>,
}

pub const TOKEN_EMBEDDING: &str = "embeddings.token";

/// Parameters of the encoder body and the MLM output bias.
pub fn backbone_specs(c: &EncoderConfig) -> Vec<ParamSpec> {
    let (d, f) = (c.d_model, c.d_ff);
    let w = Init::Normal(c.init_std);
    let bb = ParamGroup::Backbone;
    let ln = ParamGroup::LayerNorm;
    let mut s = vec![
        ParamSpec::new(TOKEN_EMBEDDING, &[c.vocab_size, d], bb, w),
        ParamSpec::new("embeddings.position", &[c.max_len, d], bb, w),
        ParamSpec::new("embeddings.ln.gain", &[d], ln, Init::Ones),
        ParamSpec::new("embeddings.ln.bias", &[d], ln, Init::Zeros),
    ];
    for i in 0..c.n_layers {
        let n = |part: &str| format!("layers.{i}.{part}");
        for p in ["w_q", "w_k", "w_v", "w_o"] {
            s.push(ParamSpec::new(n(&format!("attention.{p}")), &[d, d], bb, w));
        }
        s.push(ParamSpec::new(n("ln1.gain"), &[d], ln, Init::Ones));
        s.push(ParamSpec::new(n("ln1.bias"), &[d], ln, Init::Zeros));
        s.push(ParamSpec::new(n("ffn.w1"), &[d, f], bb, w));
        s.push(ParamSpec::new(n("ffn.b1"), &[f], bb, Init::Zeros));
        s.push(ParamSpec::new(n("ffn.w2"), &[f, d], bb, w));
        s.push(ParamSpec::new(n("ffn.b2"), &[d], bb, Init::Zeros));
        s.push(ParamSpec::new(n("ln2.gain"), &[d], ln, Init::Ones));
        s.push(ParamSpec::new(n("ln2.bias"), &[d], ln, Init::Zeros));
    }
    s.push(ParamSpec::new(
        "mlm.bias",
        &[c.vocab_size],
        ParamGroup::MlmHead,
        Init::Zeros,
    ));
    s
}

/// Dense `d_model → 2` classification head.
pub fn head_specs(c: &EncoderConfig) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(
            "head.weight",
            &[c.d_model, 2],
            ParamGroup::Head,
            Init::Normal(c.init_std),
        ),
        ParamSpec::new("head.bias", &[2], ParamGroup::Head, Init::Zeros),
    ]
}

/// Result of an encoder pass over a packed batch.
pub struct EncoderOutput<'t> {
    /// `[T, d]` hidden states of all packed rows.
    pub states: Var<'t>,
    /// `[B, d]` states at each sequence's first ([CLS]) position.
    pub pooled: Var<'t>,
    pub segments: Vec<Range<usize>>,
    /// Some input exceeded `max_len` and was cut.
    pub truncated: bool,
    /// Attention mixture node of every layer (for weight probes).
    pub attention: Vec<Var<'t>>,
}

/// Transformer encoder with MLM output bias, optional classifier head,
/// and optional adapters/prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderModel {
    pub config: EncoderConfig,
    pub store: ParamStore,
    pub peft: PeftState,
    ids: EncoderIdsCache,
}

#[derive(Debug, Clone)]
struct EncoderIdsCache(EncoderIds);

impl PartialEq for EncoderIdsCache {
    fn eq(&self, _: &Self) -> bool {
        // derived from the store, which is compared directly
        true
    }
}

impl EncoderModel {
    /// Randomly initialized backbone without head, adapters or prompts.
    pub fn new(config: EncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        for spec in backbone_specs(&config) {
            store.add_spec(&spec, rng)?;
        }
        Self::from_parts(config, store, PeftState::default())
    }

    /// Reassembles a model from a parameter store (e.g. a checkpoint).
    pub fn from_parts(config: EncoderConfig, store: ParamStore, peft: PeftState) -> Result<Self> {
        config.validate()?;
        let ids = resolve(&config, &store, &peft)?;
        Ok(Self {
            config,
            store,
            peft,
            ids: EncoderIdsCache(ids),
        })
    }

    /// Parameter layout of a model with the given attachments.
    pub fn layout(config: &EncoderConfig, peft: &PeftState, head: bool) -> Result<Vec<ParamSpec>> {
        let mut specs = backbone_specs(config);
        if head {
            specs.extend(head_specs(config));
        }
        if let Some(r) = peft.reduction_factor {
            specs.extend(adapter_specs(config, r)?);
        }
        if let Some(p) = peft.prompt_length {
            specs.extend(prompt_specs(config, p, PROMPT_INIT_STD));
        }
        Ok(specs)
    }

    pub(crate) fn refresh(&mut self) -> Result<()> {
        self.ids = EncoderIdsCache(resolve(&self.config, &self.store, &self.peft)?);
        Ok(())
    }

    pub fn add_classifier_head(&mut self, rng: &mut impl Rng) -> Result<()> {
        if self.has_head() {
            return Err(Error::Config("classifier head already present".into()));
        }
        for spec in head_specs(&self.config) {
            self.store.add_spec(&spec, rng)?;
        }
        self.refresh()
    }

    pub fn has_head(&self) -> bool {
        self.ids.0.head.is_some()
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.ids.0.token
    }

    /// Truncates and packs sequences into one row block.
    pub fn pack(&self, batch: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<Range<usize>>, bool)> {
        pack(batch, self.config.max_len)
    }

    fn layer_vars<'t>(&self, ctx: &Ctx<'t, '_>, l: &LayerIds) -> LayerVars<'t> {
        let p = |id| ctx.p(id);
        let adapter = |a: &AdapterIds| AdapterVars {
            w_down: p(a.w_down),
            b_down: p(a.b_down),
            w_up: p(a.w_up),
            b_up: p(a.b_up),
        };
        LayerVars {
            attention: AttentionVars {
                w_q: p(l.w_q),
                w_k: p(l.w_k),
                w_v: p(l.w_v),
                w_o: p(l.w_o),
                n_heads: self.config.n_heads,
            },
            ln1: (p(l.ln1.0), p(l.ln1.1)),
            w1: p(l.w1),
            b1: p(l.b1),
            w2: p(l.w2),
            b2: p(l.b2),
            ln2: (p(l.ln2.0), p(l.ln2.1)),
            adapters: l.adapters.as_ref().map(|[a, b]| [adapter(a), adapter(b)]),
            prefix: l.prompt.map(|(k, v)| (p(k), p(v))),
        }
    }

    pub fn forward<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        batch: &[Vec<usize>],
    ) -> Result<EncoderOutput<'t>> {
        let (ids, segments, truncated) = self.pack(batch)?;
        let ix = &self.ids.0;
        let positions: Vec<usize> = segments.iter().flat_map(|s| 0..s.len()).collect();
        let tok = embedding(ctx.p(ix.token), &ids)?;
        let pos = embedding(ctx.p(ix.position), &positions)?;
        let eps = self.config.layer_norm_eps;
        let mut x = tok
            .add(pos)?
            .layer_norm(ctx.p(ix.emb_ln.0), ctx.p(ix.emb_ln.1), eps)?;
        x = ctx.dropout(x)?;
        let layout = AttentionLayout::packed(segments.clone());
        let drop = |v| ctx.dropout(v);
        let mut attention = Vec::with_capacity(ix.layers.len());
        for l in &ix.layers {
            let w = self.layer_vars(ctx, l);
            let (y, mixed) = encoder_layer(x, &w, &layout, self.config.activation, eps, &drop)?;
            x = y;
            attention.push(mixed);
        }
        let cls: Vec<Option<usize>> = segments.iter().map(|s| Some(s.start)).collect();
        Ok(EncoderOutput {
            pooled: x.gather_rows(&cls)?,
            states: x,
            segments,
            truncated,
            attention,
        })
    }

    /// `[B, 2]` class logits from the pooled [CLS] states.
    pub fn classify<'t>(&self, ctx: &Ctx<'t, '_>, batch: &[Vec<usize>]) -> Result<Var<'t>> {
        let (w, b) = self
            .ids
            .0
            .head
            .ok_or_else(|| Error::Config("encoder has no classification head".into()))?;
        let out = self.forward(ctx, batch)?;
        linear(out.pooled, ctx.p(w), Some(ctx.p(b)))
    }

    /// `[n, vocab]` token logits at the given packed rows, using the token
    /// embedding table as the output projection.
    pub fn mlm_logits<'t>(
        &self,
        ctx: &Ctx<'t, '_>,
        states: Var<'t>,
        rows: &[usize],
    ) -> Result<Var<'t>> {
        let index: Vec<Option<usize>> = rows.iter().map(|&r| Some(r)).collect();
        let h = states.gather_rows(&index)?;
        h.matmul_nt(ctx.p(self.ids.0.token))?
            .add(ctx.p(self.ids.0.mlm_bias))
    }
}

/// Cuts sequences to `max_len` and concatenates them.
pub fn pack(batch: &[Vec<usize>], max_len: usize) -> Result<(Vec<usize>, Vec<Range<usize>>, bool)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut ids = Vec::new();
    let mut segments = Vec::with_capacity(batch.len());
    let mut truncated = false;
    for seq in batch {
        if seq.is_empty() {
            return Err(Error::Contract("empty token sequence".into()));
        }
        let n = seq.len().min(max_len);
        truncated |= seq.len() > max_len;
        segments.push(ids.len()..ids.len() + n);
        ids.extend_from_slice(&seq[..n]);
    }
    Ok((ids, segments, truncated))
}

fn resolve(c: &EncoderConfig, store: &ParamStore, peft: &PeftState) -> Result<EncoderIds> {
    let id = |name: &str| store.id(name);
    let mut layers = Vec::with_capacity(c.n_layers);
    for i in 0..c.n_layers {
        let n = |part: &str| id(&format!("layers.{i}.{part}"));
        let adapters = match peft.reduction_factor {
            Some(_) => {
                let one = |pl: Placement| -> Result<AdapterIds> {
                    Ok(AdapterIds {
                        w_down: id(&adapter_name(i, pl, "w_down"))?,
                        b_down: id(&adapter_name(i, pl, "b_down"))?,
                        w_up: id(&adapter_name(i, pl, "w_up"))?,
                        b_up: id(&adapter_name(i, pl, "b_up"))?,
                    })
                };
                Some([one(Placement::AfterAttention)?, one(Placement::AfterFfn)?])
            }
            None => None,
        };
        let prompt = match peft.prompt_length {
            Some(_) => Some((id(&prompt_name(i, "key"))?, id(&prompt_name(i, "value"))?)),
            None => None,
        };
        layers.push(LayerIds {
            w_q: n("attention.w_q")?,
            w_k: n("attention.w_k")?,
            w_v: n("attention.w_v")?,
            w_o: n("attention.w_o")?,
            ln1: (n("ln1.gain")?, n("ln1.bias")?),
            w1: n("ffn.w1")?,
            b1: n("ffn.b1")?,
            w2: n("ffn.w2")?,
            b2: n("ffn.b2")?,
            ln2: (n("ln2.gain")?, n("ln2.bias")?),
            adapters,
            prompt,
        });
    }
    let head = match (store.find("head.weight"), store.find("head.bias")) {
        (Some(w), Some(b)) => Some((w, b)),
        (None, None) => None,
        _ => return Err(Error::Config("incomplete classification head".into())),
    };
    let ids = EncoderIds {
        token: id(TOKEN_EMBEDDING)?,
        position: id("embeddings.position")?,
        emb_ln: (id("embeddings.ln.gain")?, id("embeddings.ln.bias")?),
        layers,
        mlm_bias: id("mlm.bias")?,
        head,
    };
    let expected = EncoderModel::layout(c, peft, head.is_some())?;
    if expected.len() != store.len() {
        return Err(Error::Config(format!(
            "parameter store holds {} tensors, layout expects {}",
            store.len(),
            expected.len()
        )));
    }
    for spec in &expected {
        let got = store.tensor(store.id(&spec.name)?).shape();
        if got != spec.shape.as_slice() {
            return Err(Error::shape("encoder parameter", got, &spec.shape));
        }
    }
    Ok(ids)
}
