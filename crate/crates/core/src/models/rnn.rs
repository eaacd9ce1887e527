use rand::Rng;

use super::encoder::pack;
use super::{RnnConfig, RnnVariant};
use crate::error::{Error, Result};
use crate::nn::{
    bilstm, conv1d, embedding, linear, multi_head_attention, AttentionVars, Ctx, Init, LstmVars,
    ParamGroup, ParamId, ParamSpec, ParamStore,
};
use crate::tensor::{AttentionLayout, Tensor, Var};

/// Parameter layout of a recurrent baseline.
pub fn rnn_specs(c: &RnnConfig) -> Vec<ParamSpec> {
    let (e, h) = (c.embed_dim, c.hidden_dim);
    let bb = ParamGroup::Backbone;
    let mut s = vec![ParamSpec::new(
        "embedding",
        &[c.vocab_size, e],
        bb,
        Init::Normal(0.1),
    )];
    if c.variant != RnnVariant::Bilstm {
        let bound = (1.0 / (c.conv_kernel * e) as f64).sqrt();
        s.push(ParamSpec::new(
            "conv.kernel",
            &[c.conv_kernel, e, e],
            bb,
            Init::Uniform(bound),
        ));
        s.push(ParamSpec::new("conv.bias", &[e], bb, Init::Zeros));
    }
    for dir in ["fw", "bw"] {
        let bound = (1.0 / h as f64).sqrt();
        s.push(ParamSpec::new(
            format!("lstm.{dir}.w_ih"),
            &[e, 4 * h],
            bb,
            Init::Uniform(bound),
        ));
        s.push(ParamSpec::new(
            format!("lstm.{dir}.w_hh"),
            &[h, 4 * h],
            bb,
            Init::Uniform(bound),
        ));
        // forget-gate slice set to 1.0 after materialization
        s.push(ParamSpec::new(
            format!("lstm.{dir}.b"),
            &[4 * h],
            bb,
            Init::Zeros,
        ));
    }
    if c.variant == RnnVariant::CnnBilstmAtt {
        let d = 2 * h;
        let bound = (3.0 / d as f64).sqrt();
        for p in ["w_q", "w_k", "w_v", "w_o"] {
            s.push(ParamSpec::new(
                format!("attention.{p}"),
                &[d, d],
                bb,
                Init::Uniform(bound),
            ));
        }
    }
    s.push(ParamSpec::new(
        "head.weight",
        &[2 * h, 2],
        ParamGroup::Head,
        Init::Normal(0.1),
    ));
    s.push(ParamSpec::new(
        "head.bias",
        &[2],
        ParamGroup::Head,
        Init::Zeros,
    ));
    s
}

/// Projects an embedding table to `dim` columns with a seeded Gaussian
/// matrix (entries N(0, 1/dim)); returned unchanged if widths match.
pub fn project_embeddings(table: &Tensor, dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(Error::shape("project_embeddings", s, &[]));
    }
    if s[1] == dim {
        return Ok(table.clone().with_requires_grad(false));
    }
    let r = crate::nn::init::normal(&[s[1], dim], (1.0 / dim as f64).sqrt(), rng);
    let tape = crate::tensor::Tape::new();
    let out = tape.constant(table).matmul(tape.constant(&r))?;
    Ok(out.to_tensor())
}

#[derive(Debug, Clone)]
struct RnnIds {
    embedding: ParamId,
    conv: Option<(ParamId, ParamId)>,
    fw: [ParamId; 3],
    bw: [ParamId; 3],
    attention: Option<[ParamId; 4]>,
    head: (ParamId, ParamId),
}

/// Bi-LSTM baseline family: embed → [conv1d → relu] → BiLSTM →
/// [self-attention with residual] → masked max-pool → dense(2).
#[derive(Debug, Clone)]
pub struct RnnModel {
    pub config: RnnConfig,
    pub store: ParamStore,
    ids: RnnIds,
}

impl PartialEq for RnnModel {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.store == other.store
    }
}

impl RnnModel {
    /// Builds a baseline; `embedding_init`, when given, must be
    /// `[vocab, embed_dim]` and replaces the random embedding table.
    pub fn new(
        config: RnnConfig,
        embedding_init: Option<&Tensor>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let h = config.hidden_dim;
        for spec in rnn_specs(&config) {
            let id = store.add_spec(&spec, rng)?;
            if spec.name.starts_with("lstm.") && spec.name.ends_with(".b") {
                store.get_mut(id).tensor.values_mut()[h..2 * h]
                    .iter_mut()
                    .for_each(|v| *v = 1.0);
            }
        }
        if let Some(init) = embedding_init {
            let want = [config.vocab_size, config.embed_dim];
            if init.shape() != want {
                return Err(Error::shape("embedding init", init.shape(), &want));
            }
            let id = store.id("embedding")?;
            store
                .get_mut(id)
                .tensor
                .values_mut()
                .copy_from_slice(init.values());
        }
        Self::from_parts(config, store)
    }

    pub fn from_parts(config: RnnConfig, store: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = rnn_specs(&config);
        if specs.len() != store.len() {
            return Err(Error::Config(format!(
                "parameter store holds {} tensors, {} variant expects {}",
                store.len(),
                config.variant,
                specs.len()
            )));
        }
        for spec in &specs {
            let got = store.tensor(store.id(&spec.name)?).shape();
            if got != spec.shape.as_slice() {
                return Err(Error::shape("rnn parameter", got, &spec.shape));
            }
        }
        let id = |n: &str| store.id(n);
        let dir = |d: &str| -> Result<[ParamId; 3]> {
            Ok([
                id(&format!("lstm.{d}.w_ih"))?,
                id(&format!("lstm.{d}.w_hh"))?,
                id(&format!("lstm.{d}.b"))?,
            ])
        };
        let ids = RnnIds {
            embedding: id("embedding")?,
            conv: match config.variant {
                RnnVariant::Bilstm => None,
                _ => Some((id("conv.kernel")?, id("conv.bias")?)),
            },
            fw: dir("fw")?,
            bw: dir("bw")?,
            attention: match config.variant {
                RnnVariant::CnnBilstmAtt => Some([
                    id("attention.w_q")?,
                    id("attention.w_k")?,
                    id("attention.w_v")?,
                    id("attention.w_o")?,
                ]),
                _ => None,
            },
            head: (id("head.weight")?, id("head.bias")?),
        };
        Ok(Self { config, store, ids })
    }

    pub fn classify<'t>(&self, ctx: &Ctx<'t, '_>, batch: &[Vec<usize>]) -> Result<Var<'t>> {
        let (ids, segments, _) = pack(batch, self.config.max_len)?;
        let ix = &self.ids;
        let mut x = ctx.dropout(embedding(ctx.p(ix.embedding), &ids)?)?;
        if let Some((k, b)) = ix.conv {
            x = conv1d(x, ctx.p(k), Some(ctx.p(b)), &segments)?.relu()?;
        }
        let lstm = |w: [ParamId; 3]| LstmVars {
            w_ih: ctx.p(w[0]),
            w_hh: ctx.p(w[1]),
            b: ctx.p(w[2]),
        };
        let mut h = bilstm(x, &lstm(ix.fw), &lstm(ix.bw), &segments)?;
        if let Some([q, k, v, o]) = ix.attention {
            let w = AttentionVars {
                w_q: ctx.p(q),
                w_k: ctx.p(k),
                w_v: ctx.p(v),
                w_o: ctx.p(o),
                n_heads: self.config.n_heads,
            };
            let att =
                multi_head_attention(h, &w, None, &AttentionLayout::packed(segments.clone()))?;
            h = h.add(att.output)?;
        }
        let pooled = ctx.dropout(h.segment_max(&segments)?)?;
        linear(pooled, ctx.p(ix.head.0), Some(ctx.p(ix.head.1)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    fn names(v: RnnVariant) -> BTreeSet<String> {
        rnn_specs(&RnnConfig::new(v, 10))
            .into_iter()
            .map(|s| s.name)
            .collect()
    }

    #[test]
    fn variants_differ_by_documented_blocks() {
        let a = names(RnnVariant::Bilstm);
        let b = names(RnnVariant::CnnBilstm);
        let c = names(RnnVariant::CnnBilstmAtt);
        let ab: BTreeSet<_> = b.difference(&a).cloned().collect();
        assert_eq!(ab, ["conv.bias", "conv.kernel"].map(String::from).into());
        let bc: BTreeSet<_> = c.difference(&b).cloned().collect();
        assert_eq!(
            bc,
            [
                "attention.w_k",
                "attention.w_o",
                "attention.w_q",
                "attention.w_v"
            ]
            .map(String::from)
            .into()
        );
        assert!(a.is_subset(&b) && b.is_subset(&c));
    }

    #[test]
    fn embedding_init_is_copied() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut c = RnnConfig::new(RnnVariant::Bilstm, 6);
        c.embed_dim = 3;
        let init = Tensor::from_fn(&[6, 3], |i| i as f64 / 10.0);
        let m = RnnModel::new(c, Some(&init), &mut rng).unwrap();
        assert_eq!(
            m.store.tensor(m.store.id("embedding").unwrap()).values(),
            init.values()
        );
        let bias = m.store.tensor(m.store.id("lstm.fw.b").unwrap()).values();
        assert!(bias[64..128].iter().all(|&v| v == 1.0));
        assert!(bias[..64].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_variants_produce_finite_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for v in [
            RnnVariant::Bilstm,
            RnnVariant::CnnBilstm,
            RnnVariant::CnnBilstmAtt,
        ] {
            let mut c = RnnConfig::new(v, 12);
            c.embed_dim = 8;
            c.hidden_dim = 4;
            c.n_heads = 2;
            let m = RnnModel::new(c, None, &mut rng).unwrap();
            let tape = Tape::new();
            let ctx = Ctx::eval(&tape, &m.store);
            let y = m.classify(&ctx, &[vec![2, 3, 4], vec![2, 5]]).unwrap();
            assert_eq!(y.shape(), vec![2, 2]);
            assert!(y.value().iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn projection_keeps_rows_and_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::from_fn(&[5, 8], |i| (i as f64).sin());
        assert_eq!(
            project_embeddings(&t, 8, &mut rng).unwrap().values(),
            t.values()
        );
        assert_eq!(
            project_embeddings(&t, 3, &mut rng).unwrap().shape(),
            &[5, 3]
        );
    }
}
