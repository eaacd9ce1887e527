use std::cell::RefCell;
use std::ops::Range;

use super::kernels::{gemm, Layout};
use super::Tensor;
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Records operations on [`Var`]s for reverse-mode differentiation.
///
/// A tape is single-threaded; independent tapes may live on different
/// threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Row segmentation for packed multi-sequence attention.
///
/// Every segment is an independent sequence: queries in a segment attend
/// to the (optional) prefix rows followed by the keys of the same segment.
/// `key_mask[r] == false` excludes packed row `r` as a key (padding).
/// Prefix keys are never masked.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionLayout {
    pub segments: Vec<Range<usize>>,
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionLayout {
    pub fn single(len: usize) -> Self {
        Self {
            segments: vec![0..len],
            key_mask: None,
        }
    }

    pub fn packed(segments: Vec<Range<usize>>) -> Self {
        Self {
            segments,
            key_mask: None,
        }
    }

    pub fn with_key_mask(mut self, mask: Vec<bool>) -> Self {
        self.key_mask = Some(mask);
        self
    }

    pub fn total_rows(&self) -> usize {
        self.segments.iter().map(|s| s.end).max().unwrap_or(0)
    }
}

/// Attention weights of one (segment, head) pair, kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionProbe {
    pub segment: usize,
    pub head: usize,
    /// Number of queries (segment length).
    pub rows: usize,
    /// Number of keys: prefix length plus segment length.
    pub cols: usize,
    pub weights: Vec<f64>,
}

enum Op {
    Leaf,
    MatMul {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: NodeId,
        b: NodeId,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    MulConst {
        a: NodeId,
        factors: Vec<f64>,
    },
    Scale {
        a: NodeId,
        s: f64,
    },
    Relu {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Sum {
        a: NodeId,
    },
    SoftmaxRows {
        a: NodeId,
        cols: usize,
    },
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows {
        src: NodeId,
        index: Vec<Option<usize>>,
        cols: usize,
    },
    ConcatCols {
        parts: Vec<(NodeId, usize)>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
        src_cols: usize,
    },
    ConcatRows {
        parts: Vec<NodeId>,
    },
    Reshape {
        a: NodeId,
    },
    SegmentMax {
        a: NodeId,
        argmax: Vec<usize>,
        src_len: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Attention(Box<AttentionNode>),
}

struct AttentionNode {
    q: NodeId,
    k: NodeId,
    v: NodeId,
    prefix: Option<(NodeId, NodeId)>,
    prefix_len: usize,
    segments: Vec<Range<usize>>,
    heads: usize,
    d: usize,
    probes: Vec<AttentionProbe>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every leaf that requires grad.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&[f64]> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take_id(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a copy of `tensor`; it requires grad iff the tensor does.
    pub fn leaf(&self, tensor: &Tensor) -> Var<'_> {
        self.push_unchecked(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            tensor.requires_grad(),
        )
    }

    pub fn constant(&self, tensor: &Tensor) -> Var<'_> {
        self.push_unchecked(
            tensor.shape().to_vec(),
            tensor.values().to_vec(),
            Op::Leaf,
            false,
        )
    }

    pub fn values(
        &self,
        shape: &[usize],
        values: Vec<f64>,
        requires_grad: bool,
    ) -> Result<Var<'_>> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::shape("Tape::values", shape, &[values.len()]));
        }
        self.push(shape.to_vec(), values, Op::Leaf, requires_grad, "leaf")
    }

    pub fn zeros(&self, shape: &[usize]) -> Var<'_> {
        let numel = shape.iter().product();
        self.push_unchecked(shape.to_vec(), vec![0.0; numel], Op::Leaf, false)
    }

    fn push_unchecked(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
    ) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        shape: Vec<usize>,
        value: Vec<f64>,
        op: Op,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var<'_>> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push_unchecked(shape, value, op, requires_grad))
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Attention weights saved by an attention node, if `var` is one.
    pub fn attention_probes(&self, var: Var<'_>) -> Option<Vec<AttentionProbe>> {
        match &self.nodes.borrow()[var.id].op {
            Op::Attention(node) => Some(node.probes.clone()),
            _ => None,
        }
    }

    /// Multi-head scaled dot-product attention over packed sequences with
    /// optional key/value prefixes prepended to every segment.
    ///
    /// `q`, `k`, `v` are `[T, d]`; prefix matrices are `[p, d]` and are
    /// already in projected key/value space.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        prefix: Option<(Var<'t>, Var<'t>)>,
        layout: &AttentionLayout,
        heads: usize,
    ) -> Result<Var<'t>> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 2 || qs != ks || qs != vs {
            return Err(Error::shape("attention", &qs, &ks));
        }
        let (rows, d) = (qs[0], qs[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model width {d} is not divisible by {heads} heads"
            )));
        }
        if layout.total_rows() > rows {
            return Err(Error::shape(
                "attention layout",
                &[layout.total_rows()],
                &qs,
            ));
        }
        if let Some(mask) = &layout.key_mask {
            if mask.len() != rows {
                return Err(Error::shape("attention key mask", &[mask.len()], &qs));
            }
        }
        let prefix_len = match prefix {
            Some((pk, pv)) => {
                let (a, b) = (pk.shape(), pv.shape());
                if a.len() != 2 || a[1] != d || a != b {
                    return Err(Error::shape("attention prefix", &a, &qs));
                }
                a[0]
            }
            None => 0,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; rows * d];
        let mut probes = Vec::with_capacity(layout.segments.len() * heads);
        {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
            let (pkv, pvv): (&[f64], &[f64]) = match prefix {
                Some((pk, pv)) => (&nodes[pk.id].value, &nodes[pv.id].value),
                None => (&[], &[]),
            };
            for (s, seg) in layout.segments.iter().enumerate() {
                let len = seg.len();
                let cols = prefix_len + len;
                for h in 0..heads {
                    let off = h * dh;
                    let key = |j: usize| -> &[f64] {
                        if j < prefix_len {
                            &pkv[j * d + off..j * d + off + dh]
                        } else {
                            let r = seg.start + j - prefix_len;
                            &kv[r * d + off..r * d + off + dh]
                        }
                    };
                    let val = |j: usize| -> &[f64] {
                        if j < prefix_len {
                            &pvv[j * d + off..j * d + off + dh]
                        } else {
                            let r = seg.start + j - prefix_len;
                            &vv[r * d + off..r * d + off + dh]
                        }
                    };
                    let keep = |j: usize| -> bool {
                        j < prefix_len
                            || layout
                                .key_mask
                                .as_ref()
                                .is_none_or(|m| m[seg.start + j - prefix_len])
                    };
                    let mut weights = vec![0.0; len * cols];
                    for i in 0..len {
                        let qr = &qv[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                        let row = &mut weights[i * cols..(i + 1) * cols];
                        let mut max = f64::NEG_INFINITY;
                        for (j, w) in row.iter_mut().enumerate() {
                            if keep(j) {
                                *w = dot(qr, key(j)) * scale;
                                max = max.max(*w);
                            }
                        }
                        if max == f64::NEG_INFINITY {
                            // every key masked: the query attends to nothing
                            row.iter_mut().for_each(|w| *w = 0.0);
                            continue;
                        }
                        let mut total = 0.0;
                        for (j, w) in row.iter_mut().enumerate() {
                            if keep(j) {
                                *w = (*w - max).exp();
                                total += *w;
                            } else {
                                *w = 0.0;
                            }
                        }
                        row.iter_mut().for_each(|w| *w /= total);
                        let o = &mut out[(seg.start + i) * d + off..(seg.start + i) * d + off + dh];
                        for (j, &w) in row.iter().enumerate() {
                            if w != 0.0 {
                                axpy(w, val(j), o);
                            }
                        }
                    }
                    probes.push(AttentionProbe {
                        segment: s,
                        head: h,
                        rows: len,
                        cols,
                        weights,
                    });
                }
            }
        }
        let mut inputs = vec![q.id, k.id, v.id];
        if let Some((pk, pv)) = prefix {
            inputs.extend([pk.id, pv.id]);
        }
        let rg = self.requires(&inputs);
        self.push(
            vec![rows, d],
            out,
            Op::Attention(Box::new(AttentionNode {
                q: q.id,
                k: k.id,
                v: v.id,
                prefix: prefix.map(|(a, b)| (a.id, b.id)),
                prefix_len,
                segments: layout.segments.clone(),
                heads,
                d,
                probes,
            })),
            rg,
            "attention",
        )
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Returns gradients for every leaf that requires grad. Fan-out
    /// contributions are summed.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.id + 1, || None);
        grads[loss.id] = Some(vec![1.0]);

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let mut acc = Accumulator {
                nodes: &nodes,
                grads: &mut grads,
            };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                &Op::MatMul { a, b, m, k, n } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    // dA = G · Bᵀ
                    acc.with(a, |ga| {
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            Layout::row_major(n),
                            bv,
                            Layout::transposed(n),
                            1.0,
                            ga,
                        )
                    });
                    // dB = Aᵀ · G
                    acc.with(b, |gb| {
                        gemm(
                            k,
                            m,
                            n,
                            av,
                            Layout::transposed(k),
                            &g,
                            Layout::row_major(n),
                            1.0,
                            gb,
                        )
                    });
                }
                &Op::MatMulNt { a, b, m, k, n } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    // out = A · Bᵀ with B [n, k]: dA = G · B, dB = Gᵀ · A
                    acc.with(a, |ga| {
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            Layout::row_major(n),
                            bv,
                            Layout::row_major(k),
                            1.0,
                            ga,
                        )
                    });
                    acc.with(b, |gb| {
                        gemm(
                            n,
                            m,
                            k,
                            &g,
                            Layout::transposed(n),
                            av,
                            Layout::row_major(k),
                            1.0,
                            gb,
                        )
                    });
                }
                &Op::Add { a, b } => {
                    acc.with(a, |ga| add_into(ga, &g));
                    acc.with(b, |gb| reduce_into(gb, &g, |x, _| x));
                }
                &Op::Mul { a, b } => {
                    let av = &nodes[a].value;
                    let bv = &nodes[b].value;
                    let bl = bv.len();
                    acc.with(a, |ga| {
                        for (i, (o, gi)) in ga.iter_mut().zip(&g).enumerate() {
                            *o += gi * bv[i % bl];
                        }
                    });
                    acc.with(b, |gb| {
                        for (i, gi) in g.iter().enumerate() {
                            gb[i % bl] += gi * av[i];
                        }
                    });
                }
                Op::MulConst { a, factors } => {
                    acc.with(*a, |ga| {
                        for ((o, gi), f) in ga.iter_mut().zip(&g).zip(factors) {
                            *o += gi * f;
                        }
                    });
                }
                &Op::Scale { a, s } => {
                    acc.with(a, |ga| {
                        ga.iter_mut().zip(&g).for_each(|(o, gi)| *o += gi * s)
                    });
                }
                &Op::Relu { a } => {
                    let av = &nodes[a].value;
                    acc.with(a, |ga| {
                        for ((o, gi), x) in ga.iter_mut().zip(&g).zip(av) {
                            if *x > 0.0 {
                                *o += gi;
                            }
                        }
                    });
                }
                &Op::Tanh { a } => {
                    let y = &node.value;
                    acc.with(a, |ga| {
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(y) {
                            *o += gi * (1.0 - y * y);
                        }
                    });
                }
                &Op::Sigmoid { a } => {
                    let y = &node.value;
                    acc.with(a, |ga| {
                        for ((o, gi), y) in ga.iter_mut().zip(&g).zip(y) {
                            *o += gi * y * (1.0 - y);
                        }
                    });
                }
                &Op::Sum { a } => {
                    acc.with(a, |ga| ga.iter_mut().for_each(|o| *o += g[0]));
                }
                &Op::SoftmaxRows { a, cols } => {
                    let y = &node.value;
                    acc.with(a, |ga| {
                        for ((gr, yr), or) in g
                            .chunks_exact(cols)
                            .zip(y.chunks_exact(cols))
                            .zip(ga.chunks_exact_mut(cols))
                        {
                            let inner = dot(gr, yr);
                            for ((o, gi), yi) in or.iter_mut().zip(gr).zip(yr) {
                                *o += yi * (gi - inner);
                            }
                        }
                    });
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let d = nodes[*gain].value.len();
                    let gv = &nodes[*gain].value;
                    acc.with(*gain, |gg| {
                        for (gr, xr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                            for ((o, gi), xi) in gg.iter_mut().zip(gr).zip(xr) {
                                *o += gi * xi;
                            }
                        }
                    });
                    acc.with(*bias, |gb| reduce_into(gb, &g, |x, _| x));
                    acc.with(*x, |gx| {
                        let mut dxhat = vec![0.0; d];
                        for (r, ((gr, xr), or)) in g
                            .chunks_exact(d)
                            .zip(xhat.chunks_exact(d))
                            .zip(gx.chunks_exact_mut(d))
                            .enumerate()
                        {
                            for ((dx, gi), gn) in dxhat.iter_mut().zip(gr).zip(gv) {
                                *dx = gi * gn;
                            }
                            let sum: f64 = dxhat.iter().sum();
                            let sum_xhat = dot(&dxhat, xr);
                            let f = inv_std[r] / d as f64;
                            for ((o, dx), xi) in or.iter_mut().zip(&dxhat).zip(xr) {
                                *o += f * (d as f64 * dx - sum - xi * sum_xhat);
                            }
                        }
                    });
                }
                Op::GatherRows { src, index, cols } => {
                    acc.with(*src, |gs| {
                        for (gr, ix) in g.chunks_exact(*cols).zip(index) {
                            if let Some(r) = ix {
                                add_into(&mut gs[r * cols..(r + 1) * cols], gr);
                            }
                        }
                    });
                }
                Op::ConcatCols { parts } => {
                    let total: usize = parts.iter().map(|p| p.1).sum();
                    let rows = g.len() / total.max(1);
                    let mut start = 0;
                    for &(p, w) in parts {
                        acc.with(p, |gp| {
                            for r in 0..rows {
                                add_into(
                                    &mut gp[r * w..(r + 1) * w],
                                    &g[r * total + start..r * total + start + w],
                                );
                            }
                        });
                        start += w;
                    }
                }
                &Op::SliceCols { a, start, src_cols } => {
                    let w = node.shape[1];
                    acc.with(a, |ga| {
                        for (r, gr) in g.chunks_exact(w).enumerate() {
                            add_into(&mut ga[r * src_cols + start..r * src_cols + start + w], gr);
                        }
                    });
                }
                Op::ConcatRows { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let n = nodes[p].value.len();
                        acc.with(p, |gp| add_into(gp, &g[off..off + n]));
                        off += n;
                    }
                }
                &Op::Reshape { a } => {
                    acc.with(a, |ga| add_into(ga, &g));
                }
                Op::SegmentMax { a, argmax, src_len } => {
                    let cols = node.shape[1];
                    let _ = src_len;
                    acc.with(*a, |ga| {
                        for (i, (gi, &r)) in g.iter().zip(argmax).enumerate() {
                            ga[r * cols + i % cols] += gi;
                        }
                    });
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let n = targets.len();
                    let c = probs.len() / n;
                    let f = g[0] / n as f64;
                    acc.with(*logits, |gl| {
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..c {
                                let y = if j == t { 1.0 } else { 0.0 };
                                gl[i * c + j] += f * (probs[i * c + j] - y);
                            }
                        }
                    });
                }
                Op::Attention(att) => attention_backward(att, &g, &mut acc),
            }
        }
        Ok(Gradients { grads })
    }
}

struct Accumulator<'a> {
    nodes: &'a [Node],
    grads: &'a mut Vec<Option<Vec<f64>>>,
}

impl Accumulator<'_> {
    /// Runs `f` on the gradient buffer of `id` if that node needs one.
    fn with(&mut self, id: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[id].requires_grad {
            return;
        }
        let len = self.nodes[id].value.len();
        let buf = self.grads[id].get_or_insert_with(|| vec![0.0; len]);
        f(buf);
    }
}

fn attention_backward(att: &AttentionNode, g: &[f64], acc: &mut Accumulator<'_>) {
    let nodes = acc.nodes;
    let d = att.d;
    let dh = d / att.heads;
    let p = att.prefix_len;
    let scale = 1.0 / (dh as f64).sqrt();
    let rows = nodes[att.q].value.len() / d;
    let (qv, kv, vv) = (
        &nodes[att.q].value,
        &nodes[att.k].value,
        &nodes[att.v].value,
    );
    let (pkv, pvv): (&[f64], &[f64]) = match att.prefix {
        Some((a, b)) => (&nodes[a].value, &nodes[b].value),
        None => (&[], &[]),
    };
    let need = |id: NodeId| nodes[id].requires_grad;
    let mut dq = need(att.q).then(|| vec![0.0; rows * d]);
    let mut dk = need(att.k).then(|| vec![0.0; rows * d]);
    let mut dv = need(att.v).then(|| vec![0.0; rows * d]);
    let (mut dpk, mut dpv) = match att.prefix {
        Some((a, b)) => (
            need(a).then(|| vec![0.0; p * d]),
            need(b).then(|| vec![0.0; p * d]),
        ),
        None => (None, None),
    };

    let mut dp = Vec::new();
    for probe in &att.probes {
        let seg = &att.segments[probe.segment];
        let off = probe.head * dh;
        let cols = probe.cols;
        let key_at = |j: usize| -> (bool, usize) {
            if j < p {
                (true, j * d + off)
            } else {
                (false, (seg.start + j - p) * d + off)
            }
        };
        for i in 0..probe.rows {
            let r = seg.start + i;
            let go = &g[r * d + off..r * d + off + dh];
            let w = &probe.weights[i * cols..(i + 1) * cols];
            dp.clear();
            dp.extend((0..cols).map(|j| {
                let (is_prefix, at) = key_at(j);
                let vr = if is_prefix {
                    &pvv[at..at + dh]
                } else {
                    &vv[at..at + dh]
                };
                dot(go, vr)
            }));
            let inner = dot(&dp, w);
            let qr = &qv[r * d + off..r * d + off + dh];
            for j in 0..cols {
                if w[j] == 0.0 {
                    continue;
                }
                let ds = w[j] * (dp[j] - inner) * scale;
                let (is_prefix, at) = key_at(j);
                let kr = if is_prefix {
                    &pkv[at..at + dh]
                } else {
                    &kv[at..at + dh]
                };
                if let Some(dq) = dq.as_mut() {
                    axpy(ds, kr, &mut dq[r * d + off..r * d + off + dh]);
                }
                let (dkey, dval) = if is_prefix {
                    (dpk.as_mut(), dpv.as_mut())
                } else {
                    (dk.as_mut(), dv.as_mut())
                };
                if let Some(dkey) = dkey {
                    axpy(ds, qr, &mut dkey[at..at + dh]);
                }
                if let Some(dval) = dval {
                    axpy(w[j], go, &mut dval[at..at + dh]);
                }
            }
        }
    }
    for (id, buf) in [(Some(att.q), dq), (Some(att.k), dk), (Some(att.v), dv)] {
        if let (Some(id), Some(buf)) = (id, buf) {
            acc.with(id, |o| add_into(o, &buf));
        }
    }
    if let Some((a, b)) = att.prefix {
        if let Some(buf) = dpk {
            acc.with(a, |o| add_into(o, &buf));
        }
        if let Some(buf) = dpv {
            acc.with(b, |o| add_into(o, &buf));
        }
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    y.iter_mut().zip(x).for_each(|(o, v)| *o += alpha * v);
}

#[inline]
fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(o, v)| *o += v);
}

/// Sums `src` into `dst` cyclically (reduces a trailing-dim broadcast).
fn reduce_into(dst: &mut [f64], src: &[f64], f: impl Fn(f64, usize) -> f64) {
    let n = dst.len();
    for (i, v) in src.iter().enumerate() {
        dst[i % n] += f(*v, i);
    }
}

/// `b` broadcasts against `a` when shapes match or `b`'s shape is a
/// suffix of `a`'s.
fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<'t> Var<'t> {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    pub fn value(&self) -> Vec<f64> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn to_tensor(&self) -> Tensor {
        let nodes = self.tape.nodes.borrow();
        let n = &nodes[self.id];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape values are finite")
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(
        self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl FnOnce(NodeId) -> Op,
    ) -> Result<Var<'t>> {
        let (shape, value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (
                n.shape.clone(),
                n.value.iter().map(|&x| f(x)).collect(),
                n.requires_grad,
            )
        };
        self.tape.push(shape, value, op(self.id), rg, name)
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape();
        if s.len() != 2 {
            return Err(Error::shape(op, &s, &[]));
        }
        Ok((s[0], s[1]))
    }

    /// Matrix product `[m, k] · [k, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.matrix_dims("matmul")?;
        let (k2, n) = rhs.matrix_dims("matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm(
                m,
                k,
                n,
                &nodes[self.id].value,
                Layout::row_major(k),
                &nodes[rhs.id].value,
                Layout::row_major(n),
                0.0,
                &mut out,
            );
        }
        let rg = self.tape.requires(&[self.id, rhs.id]);
        self.tape.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
            "matmul",
        )
    }

    /// `self · rhsᵀ` for `self: [m, k]`, `rhs: [n, k]`.
    pub fn matmul_nt(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (m, k) = self.matrix_dims("matmul_nt")?;
        let (n, k2) = rhs.matrix_dims("matmul_nt")?;
        if k != k2 {
            return Err(Error::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.tape.nodes.borrow();
            gemm(
                m,
                k,
                n,
                &nodes[self.id].value,
                Layout::row_major(k),
                &nodes[rhs.id].value,
                Layout::transposed(k),
                0.0,
                &mut out,
            );
        }
        let rg = self.tape.requires(&[self.id, rhs.id]);
        self.tape.push(
            vec![m, n],
            out,
            Op::MatMulNt {
                a: self.id,
                b: rhs.id,
                m,
                k,
                n,
            },
            rg,
            "matmul_nt",
        )
    }

    fn binary(
        self,
        rhs: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (shape, value) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[rhs.id]);
            if !broadcastable(&a.shape, &b.shape) {
                return Err(Error::shape(name, &a.shape, &b.shape));
            }
            let bl = b.value.len().max(1);
            let value = a
                .value
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.value[i % bl]))
                .collect();
            (a.shape.clone(), value)
        };
        let rg = self.tape.requires(&[self.id, rhs.id]);
        self.tape.push(shape, value, op, rg, name)
    }

    /// Elementwise sum; `rhs` may broadcast over trailing dimensions.
    #[allow(clippy::should_implement_trait)]
    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            "add",
            |a, b| a + b,
            Op::Add {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Elementwise product; `rhs` may broadcast over trailing dimensions.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.binary(
            rhs,
            "mul",
            |a, b| a * b,
            Op::Mul {
                a: self.id,
                b: rhs.id,
            },
        )
    }

    /// Elementwise product with a constant array (dropout masks, gates).
    pub fn mul_const(self, factors: Vec<f64>) -> Result<Var<'t>> {
        let value: Vec<f64> = {
            let nodes = self.tape.nodes.borrow();
            let a = &nodes[self.id];
            if a.value.len() != factors.len() {
                return Err(Error::shape("mul_const", &a.shape, &[factors.len()]));
            }
            a.value.iter().zip(&factors).map(|(x, f)| x * f).collect()
        };
        let shape = self.shape();
        let rg = self.requires_grad();
        self.tape.push(
            shape,
            value,
            Op::MulConst {
                a: self.id,
                factors,
            },
            rg,
            "mul_const",
        )
    }

    pub fn scale(self, s: f64) -> Result<Var<'t>> {
        self.unary("scale", |x| x * s, |a| Op::Scale { a, s })
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.unary("relu", |x| x.max(0.0), |a| Op::Relu { a })
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.unary("tanh", f64::tanh, |a| Op::Tanh { a })
    }

    pub fn sigmoid(self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, |a| Op::Sigmoid { a })
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Result<Var<'t>> {
        let (s, rg) = {
            let nodes = self.tape.nodes.borrow();
            let n = &nodes[self.id];
            (n.value.iter().sum::<f64>(), n.requires_grad)
        };
        self.tape
            .push(Vec::new(), vec![s], Op::Sum { a: self.id }, rg, "sum")
    }

    pub fn mean(self) -> Result<Var<'t>> {
        let n = self.numel().max(1);
        self.sum()?.scale(1.0 / n as f64)
    }

    /// Numerically stable softmax over the last dimension.
    pub fn softmax_rows(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let cols = *shape
            .last()
            .ok_or_else(|| Error::shape("softmax_rows", &shape, &[]))?;
        if cols == 0 {
            return Err(Error::shape("softmax_rows", &shape, &[]));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let mut out = nodes[self.id].value.clone();
            out.chunks_exact_mut(cols).for_each(softmax_in_place);
            out
        };
        let rg = self.requires_grad();
        self.tape.push(
            shape,
            value,
            Op::SoftmaxRows { a: self.id, cols },
            rg,
            "softmax_rows",
        )
    }

    /// Row-wise layer normalization with population variance.
    pub fn layer_norm(self, gain: Var<'t>, bias: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let d = *shape
            .last()
            .ok_or_else(|| Error::shape("layer_norm", &shape, &[]))?;
        if d == 0 || gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", &shape, &gain.shape()));
        }
        let (value, xhat, inv_std) = {
            let nodes = self.tape.nodes.borrow();
            let (x, gv, bv) = (
                &nodes[self.id].value,
                &nodes[gain.id].value,
                &nodes[bias.id].value,
            );
            let rows = x.len() / d;
            let mut out = vec![0.0; x.len()];
            let mut xhat = vec![0.0; x.len()];
            let mut inv_std = vec![0.0; rows];
            for r in 0..rows {
                let xr = &x[r * d..(r + 1) * d];
                let mean = xr.iter().sum::<f64>() / d as f64;
                let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for c in 0..d {
                    let h = (xr[c] - mean) * is;
                    xhat[r * d + c] = h;
                    out[r * d + c] = h * gv[c] + bv[c];
                }
            }
            (out, xhat, inv_std)
        };
        let rg = self.tape.requires(&[self.id, gain.id, bias.id]);
        self.tape.push(
            shape,
            value,
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Selects rows of a 2-D value; `None` produces a zero row.
    pub fn gather_rows(self, index: &[Option<usize>]) -> Result<Var<'t>> {
        let (rows, cols) = self.matrix_dims("gather_rows")?;
        let value = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut out = vec![0.0; index.len() * cols];
            for (o, ix) in out.chunks_exact_mut(cols.max(1)).zip(index) {
                if let Some(r) = *ix {
                    if r >= rows {
                        return Err(Error::Vocab { id: r, size: rows });
                    }
                    o.copy_from_slice(&src[r * cols..(r + 1) * cols]);
                }
            }
            out
        };
        let rg = self.requires_grad();
        self.tape.push(
            vec![index.len(), cols],
            value,
            Op::GatherRows {
                src: self.id,
                index: index.to_vec(),
                cols,
            },
            rg,
            "gather_rows",
        )
    }

    /// Horizontal concatenation of 2-D values with equal row counts.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let tape = first.tape;
        let (rows, _) = first.matrix_dims("concat_cols")?;
        let mut dims = Vec::with_capacity(parts.len());
        for p in parts {
            let (r, c) = p.matrix_dims("concat_cols")?;
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows], &[r, c]));
            }
            dims.push((p.id, c));
        }
        let total: usize = dims.iter().map(|d| d.1).sum();
        let value = {
            let nodes = tape.nodes.borrow();
            let mut out = vec![0.0; rows * total];
            let mut start = 0;
            for &(id, w) in &dims {
                let src = &nodes[id].value;
                for r in 0..rows {
                    out[r * total + start..r * total + start + w]
                        .copy_from_slice(&src[r * w..(r + 1) * w]);
                }
                start += w;
            }
            out
        };
        let ids: Vec<NodeId> = dims.iter().map(|d| d.0).collect();
        let rg = tape.requires(&ids);
        tape.push(
            vec![rows, total],
            value,
            Op::ConcatCols { parts: dims },
            rg,
            "concat_cols",
        )
    }

    pub fn slice_cols(self, start: usize, width: usize) -> Result<Var<'t>> {
        let (rows, cols) = self.matrix_dims("slice_cols")?;
        if start + width > cols {
            return Err(Error::shape("slice_cols", &[rows, cols], &[start, width]));
        }
        let value = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut out = Vec::with_capacity(rows * width);
            for r in 0..rows {
                out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
            }
            out
        };
        let rg = self.requires_grad();
        self.tape.push(
            vec![rows, width],
            value,
            Op::SliceCols {
                a: self.id,
                start,
                src_cols: cols,
            },
            rg,
            "slice_cols",
        )
    }

    /// Vertical concatenation of 2-D values with equal column counts.
    pub fn concat_rows(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows of nothing".into()))?;
        let tape = first.tape;
        let (_, cols) = first.matrix_dims("concat_rows")?;
        let mut rows = 0;
        for p in parts {
            let (r, c) = p.matrix_dims("concat_rows")?;
            if c != cols {
                return Err(Error::shape("concat_rows", &[r, c], &[cols]));
            }
            rows += r;
        }
        let value = {
            let nodes = tape.nodes.borrow();
            let mut out = Vec::with_capacity(rows * cols);
            for p in parts {
                out.extend_from_slice(&nodes[p.id].value);
            }
            out
        };
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let rg = tape.requires(&ids);
        tape.push(
            vec![rows, cols],
            value,
            Op::ConcatRows { parts: ids },
            rg,
            "concat_rows",
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(Error::shape("reshape", &self.shape(), shape));
        }
        let value = self.value();
        let rg = self.requires_grad();
        self.tape.push(
            shape.to_vec(),
            value,
            Op::Reshape { a: self.id },
            rg,
            "reshape",
        )
    }

    /// Column-wise maximum over each row segment: `[T, d] -> [S, d]`.
    pub fn segment_max(self, segments: &[Range<usize>]) -> Result<Var<'t>> {
        let (rows, cols) = self.matrix_dims("segment_max")?;
        let (value, argmax) = {
            let nodes = self.tape.nodes.borrow();
            let src = &nodes[self.id].value;
            let mut out = Vec::with_capacity(segments.len() * cols);
            let mut argmax = Vec::with_capacity(segments.len() * cols);
            for seg in segments {
                if seg.is_empty() || seg.end > rows {
                    return Err(Error::Contract(format!(
                        "segment {seg:?} is empty or exceeds {rows} rows"
                    )));
                }
                for c in 0..cols {
                    let mut best = seg.start;
                    for r in seg.clone() {
                        if src[r * cols + c] > src[best * cols + c] {
                            best = r;
                        }
                    }
                    out.push(src[best * cols + c]);
                    argmax.push(best);
                }
            }
            (out, argmax)
        };
        let rg = self.requires_grad();
        self.tape.push(
            vec![segments.len(), cols],
            value,
            Op::SegmentMax {
                a: self.id,
                argmax,
                src_len: rows,
            },
            rg,
            "segment_max",
        )
    }

    /// Mean softmax cross-entropy of `[n, C]` logits against class ids.
    pub fn cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (n, c) = self.matrix_dims("cross_entropy")?;
        if n != targets.len() || n == 0 {
            return Err(Error::shape("cross_entropy", &[n, c], &[targets.len()]));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::Contract(format!("target class {t} >= {c} classes")));
        }
        let (loss, probs) = {
            let nodes = self.tape.nodes.borrow();
            let mut probs = nodes[self.id].value.clone();
            let mut loss = 0.0;
            for (row, &t) in probs.chunks_exact_mut(c).zip(targets) {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
                loss += lse - row[t];
                row.iter_mut().for_each(|z| *z = (*z - lse).exp());
            }
            (loss / n as f64, probs)
        };
        let rg = self.requires_grad();
        self.tape.push(
            Vec::new(),
            vec![loss],
            Op::CrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}
