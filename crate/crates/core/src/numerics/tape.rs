//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! The tape only covers the closed kernel set the model and the losses need.
//! Every operation checks that its output is finite.

use super::kernels::{self, gelu, gelu_grad, masked_softmax_row, rope_rotate, rope_tables, rope_unrotate};
use super::tensor::{gemm, MatMut, MatRef, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Static layout of one fused causal self-attention call.
#[derive(Debug, Clone, Copy)]
pub struct AttentionLayout {
    pub heads: usize,
    pub seq_len: usize,
    pub rope_base: f64,
}

struct AttentionSaved<F> {
    qkv: Var,
    layout: AttentionLayout,
    nseq: usize,
    width: usize,
    q_rot: Vec<F>,
    k_rot: Vec<F>,
    /// `[nseq × heads × T × T]`
    probs: Vec<F>,
    cos: Vec<F>,
    sin: Vec<F>,
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    Exp { x: Var },
    Gelu { x: Var },
    SelectRows { sources: Vec<Var>, picks: Vec<(usize, usize)> },
    Take { x: Var, idx: Vec<usize> },
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<F> },
    MaskedSoftmax { x: Var },
    Attention(Box<AttentionSaved<F>>),
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<F> },
    CosineDistance { a: Var, b: Var, norms: Vec<(F, F, F)> },
    L2Normalize { x: Var, norms: Vec<F> },
    Mean { x: Var },
}

struct Node<F> {
    value: Tensor<F>,
    needs_grad: bool,
    op: Op<F>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Default)]
pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
}

fn finite<F: Real>(t: Tensor<F>, op: &'static str) -> Result<Tensor<F>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite { op })
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, needs_grad: bool, op: Op<F>) -> Var {
        self.nodes.push(Node { value, needs_grad, op });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.push(t, true, Op::Leaf)
    }

    /// A constant input: no gradient ever reaches it.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t, false, Op::Leaf)
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    /// Attention probabilities `[nseq × heads × T × T]` saved by an attention node.
    pub fn attention_probs(&self, v: Var) -> Option<&[F]> {
        match &self.nodes[v.0].op {
            Op::Attention(s) => Some(&s.probs),
            _ => None,
        }
    }

    /// `a·b`, or `a·bᵀ` when `trans_b`.
    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (m, k) = self.value(a).dims2();
        let (br, bc) = self.value(b).dims2();
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?} (trans_b={trans_b})", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let mut out = vec![F::zero(); m * n];
        {
            let av = MatRef::dense(self.value(a).data(), m, k);
            let bv = MatRef::dense(self.value(b).data(), br, bc);
            let bv = if trans_b { bv.t() } else { bv };
            gemm(F::one(), av, bv, F::zero(), MatMut::dense(&mut out, m, n));
        }
        let mut shape = self.value(a).shape().to_vec();
        *shape.last_mut().unwrap() = n;
        if shape.len() == 1 {
            shape = vec![1, n];
        }
        let t = finite(Tensor::new(shape, out)?, "matmul")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, ng, Op::MatMul { a, b, trans_b }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x + y).collect();
        let t = finite(Tensor::new(self.value(a).shape().to_vec(), data)?, "add")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, ng, Op::Add { a, b }))
    }

    /// Adds a `[cols]` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.value(x).dims2();
        if self.value(bias).len() != c {
            return Err(Error::shape("add_bias", format!("bias {} vs cols {c}", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let data = self.value(x).data().chunks(c).flat_map(|r| r.iter().zip(b).map(|(&v, &w)| v + w)).collect();
        let t = finite(Tensor::new(self.value(x).shape().to_vec(), data)?, "add_bias")?;
        let ng = self.ng(x) || self.ng(bias);
        Ok(self.push(t, ng, Op::AddBias { x, bias }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape())));
        }
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(&x, &y)| x * y).collect();
        let t = finite(Tensor::new(self.value(a).shape().to_vec(), data)?, "mul")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, ng, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, c: F) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| v * c).collect();
        let t = finite(Tensor::new(self.value(x).shape().to_vec(), data)?, "scale")?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::Scale { x, c }))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|v| v.exp()).collect();
        let t = finite(Tensor::new(self.value(x).shape().to_vec(), data)?, "exp")?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::Exp { x }))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let t = finite(Tensor::new(self.value(x).shape().to_vec(), data)?, "gelu")?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::Gelu { x }))
    }

    /// Builds `[picks.len() × cols]` from `(source, row)` pairs. All sources
    /// must share the column count. Embedding lookup, concatenation and row
    /// gathers are all expressed through this op.
    pub fn select_rows(&mut self, sources: &[Var], picks: Vec<(usize, usize)>) -> Result<Var> {
        let cols = self.value(sources[0]).dims2().1;
        for &s in sources {
            if self.value(s).dims2().1 != cols {
                return Err(Error::shape("select_rows", "sources disagree on column count"));
            }
        }
        let mut data = Vec::with_capacity(picks.len() * cols);
        for &(s, r) in &picks {
            let src = self.value(sources[s]);
            if r >= src.dims2().0 {
                return Err(Error::shape("select_rows", format!("row {r} out of {}", src.dims2().0)));
            }
            data.extend_from_slice(src.row(r));
        }
        let t = Tensor::new(vec![picks.len(), cols], data)?;
        let ng = sources.iter().any(|&s| self.ng(s));
        Ok(self.push(t, ng, Op::SelectRows { sources: sources.to_vec(), picks }))
    }

    /// Embedding lookup: rows `ids` of `table`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.select_rows(&[table], ids.iter().map(|&i| (0, i)).collect())
    }

    /// Flat element gather `out[i] = x[idx[i]]`, reshaped to `shape`.
    pub fn take(&mut self, x: Var, idx: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= src.len()) {
            return Err(Error::shape("take", format!("index {bad} out of {}", src.len())));
        }
        let data = idx.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::Take { x, idx }))
    }

    /// Row-wise RMS normalization followed by a learned per-column gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        if self.value(gain).len() != cols {
            return Err(Error::shape("rms_norm", format!("gain {} vs cols {cols}", self.value(gain).len())));
        }
        let g = self.value(gain).data();
        let xs = self.value(x).data();
        let mut inv_rms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        let inv_n = F::one() / F::from_usize(cols).unwrap();
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let ms = kernels::dot(row, row) * inv_n;
            let inv = F::one() / (ms + F::lit(kernels::RMS_EPS)).sqrt();
            inv_rms.push(inv);
            data.extend(row.iter().zip(g).map(|(&v, &w)| v * inv * w));
        }
        let t = finite(Tensor::new(self.value(x).shape().to_vec(), data)?, "rms_norm")?;
        let ng = self.ng(x) || self.ng(gain);
        Ok(self.push(t, ng, Op::RmsNorm { x, gain, inv_rms }))
    }

    pub fn masked_softmax(&mut self, x: Var, additive_mask: &Tensor<F>) -> Result<Var> {
        let t = kernels::masked_softmax(self.value(x), additive_mask)?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::MaskedSoftmax { x }))
    }

    /// Fused multi-head causal self-attention with rotary positions.
    ///
    /// `qkv` is `[nseq·T × 3D]` (queries, keys, values side by side); `masks`
    /// holds one additive `[T × T]` mask per sequence. Output is `[nseq·T × D]`.
    pub fn attention(&mut self, qkv: Var, layout: AttentionLayout, masks: &[&Tensor<F>]) -> Result<Var> {
        let (rows, cols3) = self.value(qkv).dims2();
        let t = layout.seq_len;
        if cols3 % 3 != 0 || rows % t != 0 {
            return Err(Error::shape("attention", format!("qkv {:?} with T={t}", self.value(qkv).shape())));
        }
        let width = cols3 / 3;
        let heads = layout.heads;
        if width % heads != 0 || (width / heads) % 2 != 0 {
            return Err(Error::shape("attention", format!("width {width} / heads {heads}")));
        }
        let dk = width / heads;
        let nseq = rows / t;
        if masks.len() != nseq || masks.iter().any(|m| m.shape() != [t, t]) {
            return Err(Error::shape("attention", format!("need {nseq} masks of [{t}×{t}]")));
        }
        let (cos, sin) = rope_tables::<F>(t, dk, layout.rope_base);
        let half = dk / 2;
        let src = self.value(qkv).data();
        let mut q_rot = vec![F::zero(); rows * width];
        let mut k_rot = vec![F::zero(); rows * width];
        for r in 0..rows {
            let p = r % t;
            q_rot[r * width..(r + 1) * width].copy_from_slice(&src[r * cols3..r * cols3 + width]);
            k_rot[r * width..(r + 1) * width].copy_from_slice(&src[r * cols3 + width..r * cols3 + 2 * width]);
            for h in 0..heads {
                let span = r * width + h * dk..r * width + (h + 1) * dk;
                rope_rotate(&mut q_rot[span.clone()], &cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
                rope_rotate(&mut k_rot[span], &cos[p * half..(p + 1) * half], &sin[p * half..(p + 1) * half]);
            }
        }
        let scale = F::one() / F::from_usize(dk).unwrap().sqrt();
        let mut probs = vec![F::zero(); nseq * heads * t * t];
        let mut out = vec![F::zero(); rows * width];
        let mut scores = vec![F::zero(); t * t];
        for s in 0..nseq {
            let mask = masks[s].data();
            for h in 0..heads {
                let off = s * t * width + h * dk;
                let qv = MatRef::block(&q_rot, off, t, dk, width);
                let kv = MatRef::block(&k_rot, off, t, dk, width);
                gemm(scale, qv, kv.t(), F::zero(), MatMut::dense(&mut scores, t, t));
                let pbase = (s * heads + h) * t * t;
                for i in 0..t {
                    let row = &mut probs[pbase + i * t..pbase + (i + 1) * t];
                    if !masked_softmax_row(&scores[i * t..(i + 1) * t], &mask[i * t..(i + 1) * t], row) {
                        return Err(Error::EmptyAttentionRow { row: s * t + i });
                    }
                }
                let pv = MatRef::dense(&probs[pbase..pbase + t * t], t, t);
                let vv = MatRef::block(src, s * t * cols3 + 2 * width + h * dk, t, dk, cols3);
                gemm(F::one(), pv, vv, F::zero(), MatMut::block(&mut out, off, t, dk, width));
            }
        }
        let tensor = finite(Tensor::new(vec![rows, width], out)?, "attention")?;
        let ng = self.ng(qkv);
        let saved = AttentionSaved { qkv, layout, nseq, width, q_rot, k_rot, probs, cos, sin };
        Ok(self.push(tensor, ng, Op::Attention(Box::new(saved))))
    }

    /// Per-row negative log-likelihood of `targets` under softmax(`logits`).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, cols) = self.value(logits).dims2();
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", format!("{} targets for {rows} rows", targets.len())));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![F::zero(); rows * cols];
        let mut out = Vec::with_capacity(rows);
        for (r, &tgt) in targets.iter().enumerate() {
            if tgt >= cols {
                return Err(Error::invalid(format!("target {tgt} out of {cols} classes at row {r}")));
            }
            let row = &xs[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut sum = F::zero();
            for (p, &v) in probs[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *p = (v - max).exp();
                sum = sum + *p;
            }
            let inv = F::one() / sum;
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p = *p * inv;
            }
            out.push(sum.ln() + max - row[tgt]);
        }
        let t = finite(Tensor::new(vec![rows], out)?, "cross_entropy")?;
        let ng = self.ng(logits);
        Ok(self.push(t, ng, Op::CrossEntropy { logits, targets: targets.to_vec(), probs }))
    }

    /// Per-row `1 − cos(a_r, b_r)`.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::shape(
                "cosine_distance",
                format!("{:?} vs {:?}", self.value(a).shape(), self.value(b).shape()),
            ));
        }
        let (rows, cols) = self.value(a).dims2();
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut norms = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(rows);
        for r in 0..rows {
            let (x, y) = (&av[r * cols..(r + 1) * cols], &bv[r * cols..(r + 1) * cols]);
            let (na, nb) = (kernels::dot(x, x).sqrt(), kernels::dot(y, y).sqrt());
            if !(na > F::zero() && nb > F::zero()) {
                return Err(Error::DegenerateFeature { row: r });
            }
            let d = kernels::dot(x, y);
            norms.push((na, nb, d));
            out.push(kernels::unit_half_sq_dist(x, y, na, nb));
        }
        let t = finite(Tensor::new(vec![rows], out)?, "cosine_distance")?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, ng, Op::CosineDistance { a, b, norms }))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).dims2();
        let xs = self.value(x).data();
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &xs[r * cols..(r + 1) * cols];
            let n = kernels::dot(row, row).sqrt();
            if !(n > F::zero()) {
                return Err(Error::DegenerateFeature { row: r });
            }
            norms.push(n);
            data.extend(row.iter().map(|&v| v / n));
        }
        let t = finite(Tensor::new(self.value(x).shape().to_vec(), data)?, "l2_normalize")?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::L2Normalize { x, norms }))
    }

    /// Mean over all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        if v.is_empty() {
            return Err(Error::shape("mean", "empty tensor"));
        }
        let m = v.data().iter().cloned().sum::<F>() / F::from_usize(v.len()).unwrap();
        let t = finite(Tensor::scalar(m), "mean")?;
        let ng = self.ng(x);
        Ok(self.push(t, ng, Op::Mean { x }))
    }

    /// Reverse sweep from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients<F>> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward", "root must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one()]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }
        Ok(Gradients {
            grads: grads
                .into_iter()
                .zip(&self.nodes)
                .map(|(g, n)| {
                    g.filter(|_| matches!(n.op, Op::Leaf) && n.needs_grad)
                        .map(|g| Tensor::new(n.value.shape().to_vec(), g).expect("grad shape"))
                })
                .collect(),
        })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<F>>], v: Var) -> Option<&'a mut Vec<F>> {
        if !self.ng(v) {
            return None;
        }
        let n = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); n]))
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (m, k) = self.value(*a).dims2();
                let (br, bc) = self.value(*b).dims2();
                let n = if *trans_b { br } else { bc };
                let gv = MatRef::dense(g, m, n);
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = MatRef::dense(self.value(*b).data(), br, bc);
                    // da = g · bᵀ (or g · b when b was transposed)
                    let bt = if *trans_b { bv } else { bv.t() };
                    gemm(F::one(), gv, bt, F::one(), MatMut::dense(ga, m, k));
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = MatRef::dense(self.value(*a).data(), m, k);
                    if *trans_b {
                        gemm(F::one(), gv.t(), av, F::one(), MatMut::dense(gb, n, k));
                    } else {
                        gemm(F::one(), av.t(), gv, F::one(), MatMut::dense(gb, k, n));
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    if let Some(acc) = self.acc(grads, v) {
                        acc.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y);
                }
                let c = self.value(*bias).len();
                if let Some(acc) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(a, &y)| *a = *a + y);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(acc) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * bv[i];
                    }
                }
                if let Some(acc) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * av[i];
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().zip(g).for_each(|(a, &y)| *a = *a + y * *c);
                }
            }
            Op::Exp { x } => {
                let y = node.value.data();
                if let Some(acc) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * y[i];
                    }
                }
            }
            Op::Gelu { x } => {
                let xv = self.value(*x).data();
                if let Some(acc) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        acc[i] = acc[i] + g[i] * gelu_grad(xv[i]);
                    }
                }
            }
            Op::SelectRows { sources, picks } => {
                let cols = node.value.dims2().1;
                for (si, &s) in sources.iter().enumerate() {
                    if let Some(acc) = self.acc(grads, s) {
                        for (o, &(src, r)) in picks.iter().enumerate() {
                            if src == si {
                                let dst = &mut acc[r * cols..(r + 1) * cols];
                                dst.iter_mut().zip(&g[o * cols..(o + 1) * cols]).for_each(|(a, &y)| *a = *a + y);
                            }
                        }
                    }
                }
            }
            Op::Take { x, idx } => {
                if let Some(acc) = self.acc(grads, *x) {
                    for (o, &i) in idx.iter().enumerate() {
                        acc[i] = acc[i] + g[o];
                    }
                }
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let (rows, cols) = self.value(*x).dims2();
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let inv_n = F::one() / F::from_usize(cols).unwrap();
                if let Some(acc) = self.acc(grads, *gain) {
                    for r in 0..rows {
                        for c in 0..cols {
                            let i = r * cols + c;
                            acc[c] = acc[c] + g[i] * xv[i] * inv_rms[r];
                        }
                    }
                }
                if let Some(acc) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let inv = inv_rms[r];
                        let span = r * cols..(r + 1) * cols;
                        let mut proj = F::zero();
                        for (c, i) in span.clone().enumerate() {
                            proj = proj + g[i] * gv[c] * xv[i] * inv;
                        }
                        proj = proj * inv_n;
                        for (c, i) in span.enumerate() {
                            let n = xv[i] * inv;
                            acc[i] = acc[i] + inv * (g[i] * gv[c] - n * proj);
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x } => {
                let (rows, cols) = node.value.dims2();
                let p = node.value.data();
                if let Some(acc) = self.acc(grads, *x) {
                    for r in 0..rows {
                        let span = r * cols..(r + 1) * cols;
                        let s: F = span.clone().map(|i| p[i] * g[i]).sum();
                        for i in span {
                            acc[i] = acc[i] + p[i] * (g[i] - s);
                        }
                    }
                }
            }
            Op::Attention(saved) => self.backward_attention(saved, g, grads),
            Op::CrossEntropy { logits, targets, probs } => {
                let (_, cols) = self.value(*logits).dims2();
                if let Some(acc) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let gr = g[r];
                        for c in 0..cols {
                            let i = r * cols + c;
                            let onehot = if c == t { F::one() } else { F::zero() };
                            acc[i] = acc[i] + gr * (probs[i] - onehot);
                        }
                    }
                }
            }
            Op::CosineDistance { a, b, norms } => {
                let (_, cols) = self.value(*a).dims2();
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                for (which, v) in [(0, *a), (1, *b)] {
                    if let Some(acc) = self.acc(grads, v) {
                        for (r, &(na, nb, d)) in norms.iter().enumerate() {
                            let (own, other, nown) = if which == 0 { (av, bv, na) } else { (bv, av, nb) };
                            let inv = F::one() / (na * nb);
                            let coef = d * inv / (nown * nown);
                            for c in 0..cols {
                                let i = r * cols + c;
                                acc[i] = acc[i] - g[r] * (other[i] * inv - own[i] * coef);
                            }
                        }
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                let (_, cols) = node.value.dims2();
                let y = node.value.data();
                if let Some(acc) = self.acc(grads, *x) {
                    for (r, &n) in norms.iter().enumerate() {
                        let span = r * cols..(r + 1) * cols;
                        let s: F = span.clone().map(|i| y[i] * g[i]).sum();
                        for i in span {
                            acc[i] = acc[i] + (g[i] - y[i] * s) / n;
                        }
                    }
                }
            }
            Op::Mean { x } => {
                let n = self.value(*x).len();
                let share = g[0] / F::from_usize(n).unwrap();
                if let Some(acc) = self.acc(grads, *x) {
                    acc.iter_mut().for_each(|a| *a = *a + share);
                }
            }
        }
    }

    fn backward_attention(&self, s: &AttentionSaved<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let t = s.layout.seq_len;
        let heads = s.layout.heads;
        let width = s.width;
        let cols3 = 3 * width;
        let dk = width / heads;
        let half = dk / 2;
        let rows = s.nseq * t;
        let scale = F::one() / F::from_usize(dk).unwrap().sqrt();
        let qkv = self.value(s.qkv).data();

        let mut dq_rot = vec![F::zero(); rows * width];
        let mut dk_rot = vec![F::zero(); rows * width];
        let Some(acc) = self.acc(grads, s.qkv) else { return };
        let mut dp = vec![F::zero(); t * t];
        for seq in 0..s.nseq {
            for h in 0..heads {
                let off = seq * t * width + h * dk;
                let pbase = (seq * heads + h) * t * t;
                let p = &s.probs[pbase..pbase + t * t];
                let go = MatRef::block(g, off, t, dk, width);
                let vv = MatRef::block(qkv, seq * t * cols3 + 2 * width + h * dk, t, dk, cols3);
                // dV += Pᵀ·dO
                gemm(
                    F::one(),
                    MatRef::dense(p, t, t).t(),
                    go,
                    F::one(),
                    MatMut::block(acc, seq * t * cols3 + 2 * width + h * dk, t, dk, cols3),
                );
                // dP = dO·Vᵀ, then the softmax adjoint in place
                gemm(F::one(), go, vv.t(), F::zero(), MatMut::dense(&mut dp, t, t));
                for i in 0..t {
                    let row = i * t..(i + 1) * t;
                    let sum: F = row.clone().map(|j| p[j] * dp[j]).sum();
                    for j in row {
                        dp[j] = p[j] * (dp[j] - sum);
                    }
                }
                let qv = MatRef::block(&s.q_rot, off, t, dk, width);
                let kv = MatRef::block(&s.k_rot, off, t, dk, width);
                gemm(scale, MatRef::dense(&dp, t, t), kv, F::one(), MatMut::block(&mut dq_rot, off, t, dk, width));
                gemm(scale, MatRef::dense(&dp, t, t).t(), qv, F::one(), MatMut::block(&mut dk_rot, off, t, dk, width));
            }
        }
        for r in 0..rows {
            let p = r % t;
            let (cos, sin) = (&s.cos[p * half..(p + 1) * half], &s.sin[p * half..(p + 1) * half]);
            for h in 0..heads {
                let span = r * width + h * dk..r * width + (h + 1) * dk;
                rope_unrotate(&mut dq_rot[span.clone()], cos, sin);
                rope_unrotate(&mut dk_rot[span], cos, sin);
            }
            let dst = &mut acc[r * cols3..(r + 1) * cols3];
            for c in 0..width {
                dst[c] = dst[c] + dq_rot[r * width + c];
                dst[width + c] = dst[width + c] + dk_rot[r * width + c];
            }
        }
    }
}
