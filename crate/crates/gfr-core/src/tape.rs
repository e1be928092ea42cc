//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records one op node per forward call, in execution order, so
//! inputs always precede the node that consumes them. [`Tape::backward`]
//! walks the node list once in reverse, accumulating vector-Jacobian
//! products into a gradient map and finally into the grad buffers of every
//! `requires_grad` leaf that was touched.
//!
//! Everything runs single-threaded with fixed reduction orders, so identical
//! inputs produce bit-identical values and gradients.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies every differentiable op the tape understands. The gradcheck
/// suite introspects [`OpKind::ALL`] to guarantee coverage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    AddBias,
    Mul,
    Scale,
    Matmul,
    Gelu,
    Gather,
    Transpose,
    Reshape,
    ConcatRows,
    ConcatCols,
    SliceRows,
    SliceCols,
    Attention,
    Sum,
    Mean,
    MeanRows,
    LayerNorm,
    SoftmaxCeMasked,
}

impl OpKind {
    pub const ALL: [OpKind; 19] = [
        OpKind::Add,
        OpKind::AddBias,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Matmul,
        OpKind::Gelu,
        OpKind::Gather,
        OpKind::Transpose,
        OpKind::Reshape,
        OpKind::ConcatRows,
        OpKind::ConcatCols,
        OpKind::SliceRows,
        OpKind::SliceCols,
        OpKind::Attention,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::MeanRows,
        OpKind::LayerNorm,
        OpKind::SoftmaxCeMasked,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::AddBias => "add_bias",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Matmul => "matmul",
            OpKind::Gelu => "gelu",
            OpKind::Gather => "gather",
            OpKind::Transpose => "transpose",
            OpKind::Reshape => "reshape",
            OpKind::ConcatRows => "concat_rows",
            OpKind::ConcatCols => "concat_cols",
            OpKind::SliceRows => "slice_rows",
            OpKind::SliceCols => "slice_cols",
            OpKind::Attention => "attention",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::MeanRows => "mean_rows",
            OpKind::LayerNorm => "layer_norm",
            OpKind::SoftmaxCeMasked => "softmax_ce_masked",
        }
    }
}

/// Scalar precision for forward math. `F32` rounds every op output (and
/// every stored parameter) to `f32`, emulating 32-bit training while keeping
/// one code path; tolerances relax accordingly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Reduction applied over masked positions by the masked cross-entropy op.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LossReduction {
    #[default]
    Mean,
    Sum,
}

/// Per-tensor gradient accumulator used during a backward sweep.
pub struct GradMap {
    map: HashMap<u64, Vec<f64>>,
}

impl GradMap {
    fn new() -> Self {
        GradMap { map: HashMap::new() }
    }

    fn take(&mut self, id: u64) -> Option<Vec<f64>> {
        self.map.remove(&id)
    }

    /// Accumulate a contribution for `t`'s gradient.
    fn add(&mut self, t: &Tensor, delta: Vec<f64>) {
        debug_assert_eq!(delta.len(), t.len());
        match self.map.get_mut(&t.id()) {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => {
                self.map.insert(t.id(), delta);
            }
        }
    }
}

type BackFn = Box<dyn Fn(&[f64], &mut GradMap)>;

struct Node {
    op: OpKind,
    out_id: u64,
    backward: BackFn,
}

/// Records forward ops and replays their backward rules in reverse order.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    watched: RefCell<Vec<Tensor>>,
    watched_ids: RefCell<HashSet<u64>>,
    recording: bool,
    precision: Precision,
}

impl Tape {
    pub fn new(precision: Precision) -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            watched: RefCell::new(Vec::new()),
            watched_ids: RefCell::new(HashSet::new()),
            recording: true,
            precision,
        }
    }

    /// A tape that skips node recording; for evaluation-only forwards.
    pub fn inference(precision: Precision) -> Self {
        let mut t = Self::new(precision);
        t.recording = false;
        t
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    fn output(&self, op: OpKind, shape: Vec<usize>, mut data: Vec<f64>) -> Result<Tensor> {
        if self.precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        if let Some(bad) = data.iter().copied().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: op.name(),
                detail: format!("output contains {bad}"),
            });
        }
        Ok(Tensor::new_unchecked(shape, data, false))
    }

    fn record<F>(&self, op: OpKind, inputs: &[&Tensor], out: &Tensor, back: F)
    where
        F: Fn(&[f64], &mut GradMap) + 'static,
    {
        if !self.recording {
            return;
        }
        for t in inputs {
            if t.requires_grad() && self.watched_ids.borrow_mut().insert(t.id()) {
                self.watched.borrow_mut().push((*t).clone());
            }
        }
        self.nodes.borrow_mut().push(Node {
            op,
            out_id: out.id(),
            backward: Box::new(back),
        });
    }

    /// Reverse sweep from a scalar root. Populates (accumulates into) the
    /// grad buffer of every `requires_grad` leaf seen by this tape; leaves
    /// the loss does not depend on receive explicit zeros.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                loss.shape()
            )));
        }
        let nodes = self.nodes.borrow();
        if !nodes.iter().any(|n| n.out_id == loss.id()) {
            return Err(Error::Contract(
                "backward root is not the output of any op on this tape".into(),
            ));
        }
        let mut grads = GradMap::new();
        grads.map.insert(loss.id(), vec![1.0]);
        for node in nodes.iter().rev() {
            if let Some(g) = grads.take(node.out_id) {
                (node.backward)(&g, &mut grads);
            }
        }
        for leaf in self.watched.borrow().iter() {
            match grads.take(leaf.id()) {
                Some(g) => leaf.accumulate_grad(&g),
                None => leaf.ensure_grad(),
            }
        }
        Ok(())
    }

    // ── elementwise ─────────────────────────────────────────────────────

    pub fn add(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "add: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
        let out = self.output(OpKind::Add, a.shape().to_vec(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(OpKind::Add, &[a, b], &out, move |g, gm| {
            gm.add(&ac, g.to_vec());
            gm.add(&bc, g.to_vec());
        });
        Ok(out)
    }

    /// Row-broadcast add: `x[n×d] + b[d]`.
    pub fn add_bias(&self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if b.shape() != [d] {
            return Err(Error::Dimension(format!(
                "add_bias: rows of width {d} vs bias {:?}",
                b.shape()
            )));
        }
        let mut data = x.data().to_vec();
        for i in 0..n {
            for j in 0..d {
                data[i * d + j] += b.data()[j];
            }
        }
        let out = self.output(OpKind::AddBias, vec![n, d], data)?;
        let (xc, bc) = (x.clone(), b.clone());
        self.record(OpKind::AddBias, &[x, b], &out, move |g, gm| {
            gm.add(&xc, g.to_vec());
            let mut db = vec![0.0; d];
            for i in 0..n {
                for j in 0..d {
                    db[j] += g[i * d + j];
                }
            }
            gm.add(&bc, db);
        });
        Ok(out)
    }

    pub fn mul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::Dimension(format!(
                "mul: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
        let out = self.output(OpKind::Mul, a.shape().to_vec(), data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(OpKind::Mul, &[a, b], &out, move |g, gm| {
            let da = g.iter().zip(bc.data()).map(|(gi, bi)| gi * bi).collect();
            let db = g.iter().zip(ac.data()).map(|(gi, ai)| gi * ai).collect();
            gm.add(&ac, da);
            gm.add(&bc, db);
        });
        Ok(out)
    }

    /// Multiply by a compile-time constant (no gradient for the constant).
    pub fn scale(&self, x: &Tensor, c: f64) -> Result<Tensor> {
        let data = x.data().iter().map(|v| v * c).collect();
        let out = self.output(OpKind::Scale, x.shape().to_vec(), data)?;
        let xc = x.clone();
        self.record(OpKind::Scale, &[x], &out, move |g, gm| {
            gm.add(&xc, g.iter().map(|v| v * c).collect());
        });
        Ok(out)
    }

    // ── linear algebra ──────────────────────────────────────────────────

    pub fn matmul(&self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = a.dims2()?;
        let (k2, n) = b.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul: inner extents {k} vs {k2}"
            )));
        }
        let mut data = vec![0.0; m * n];
        {
            let (ad, bd) = (a.data(), b.data());
            for i in 0..m {
                let row = &mut data[i * n..(i + 1) * n];
                for (p, &av) in ad[i * k..(i + 1) * k].iter().enumerate() {
                    if av != 0.0 {
                        let brow = &bd[p * n..(p + 1) * n];
                        for (c, bv) in row.iter_mut().zip(brow) {
                            *c += av * bv;
                        }
                    }
                }
            }
        }
        let out = self.output(OpKind::Matmul, vec![m, n], data)?;
        let (ac, bc) = (a.clone(), b.clone());
        self.record(OpKind::Matmul, &[a, b], &out, move |g, gm| {
            let (ad, bd) = (ac.data(), bc.data());
            // dA = dC·Bᵀ
            let mut da = vec![0.0; m * k];
            for i in 0..m {
                for p in 0..k {
                    let mut s = 0.0;
                    for j in 0..n {
                        s += g[i * n + j] * bd[p * n + j];
                    }
                    da[i * k + p] = s;
                }
            }
            // dB = Aᵀ·dC
            let mut db = vec![0.0; k * n];
            for i in 0..m {
                for p in 0..k {
                    let av = ad[i * k + p];
                    if av != 0.0 {
                        let row = &mut db[p * n..(p + 1) * n];
                        for (dv, gv) in row.iter_mut().zip(&g[i * n..(i + 1) * n]) {
                            *dv += av * gv;
                        }
                    }
                }
            }
            gm.add(&ac, da);
            gm.add(&bc, db);
        });
        Ok(out)
    }

    pub fn transpose(&self, x: &Tensor) -> Result<Tensor> {
        let (r, c) = x.dims2()?;
        let xd = x.data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = xd[i * c + j];
            }
        }
        let out = self.output(OpKind::Transpose, vec![c, r], data)?;
        let xc = x.clone();
        self.record(OpKind::Transpose, &[x], &out, move |g, gm| {
            let mut dx = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            gm.add(&xc, dx);
        });
        Ok(out)
    }

    /// Row-major reinterpretation; a pure value-permutation (identity here).
    pub fn reshape(&self, x: &Tensor, shape: Vec<usize>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != x.len() {
            return Err(Error::Dimension(format!(
                "reshape: {:?} ({} scalars) to {:?} ({} scalars)",
                x.shape(),
                x.len(),
                shape,
                n
            )));
        }
        let out = self.output(OpKind::Reshape, shape, x.data().to_vec())?;
        let xc = x.clone();
        self.record(OpKind::Reshape, &[x], &out, move |g, gm| {
            gm.add(&xc, g.to_vec());
        });
        Ok(out)
    }

    // ── gather / concat / slice ─────────────────────────────────────────

    /// Row gather with scatter-add backward. Backs both embedding lookup
    /// (table rows by token id) and fixed row permutations.
    pub fn gather(&self, x: &Tensor, indices: &[usize]) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= n) {
            return Err(Error::Dimension(format!(
                "gather: index {bad} out of range for {n} rows"
            )));
        }
        let m = indices.len();
        let mut data = Vec::with_capacity(m * d);
        for &i in indices {
            data.extend_from_slice(&x.data()[i * d..(i + 1) * d]);
        }
        let out = self.output(OpKind::Gather, vec![m, d], data)?;
        let xc = x.clone();
        let idx: Vec<usize> = indices.to_vec();
        self.record(OpKind::Gather, &[x], &out, move |g, gm| {
            let mut dx = vec![0.0; n * d];
            for (r, &i) in idx.iter().enumerate() {
                let src = &g[r * d..(r + 1) * d];
                let dst = &mut dx[i * d..(i + 1) * d];
                for (dv, gv) in dst.iter_mut().zip(src) {
                    *dv += gv;
                }
            }
            gm.add(&xc, dx);
        });
        Ok(out)
    }

    /// Concatenate along axis 0. Inputs must agree on trailing extents.
    pub fn concat_rows(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Dimension("concat_rows: empty input list".into()));
        }
        let trailing = &xs[0].shape()[1.min(xs[0].shape().len())..];
        for x in xs {
            let t = &x.shape()[1.min(x.shape().len())..];
            if t != trailing {
                return Err(Error::Dimension(format!(
                    "concat_rows: trailing extents {:?} vs {:?}",
                    trailing,
                    t
                )));
            }
        }
        let width: usize = trailing.iter().product::<usize>().max(1);
        let rows: usize = xs.iter().map(|x| x.shape()[0]).sum();
        let mut data = Vec::with_capacity(rows * width);
        for x in xs {
            data.extend_from_slice(x.data());
        }
        let mut shape = vec![rows];
        shape.extend_from_slice(trailing);
        let out = self.output(OpKind::ConcatRows, shape, data)?;
        let owned: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
        self.record(OpKind::ConcatRows, xs, &out, move |g, gm| {
            let mut off = 0;
            for x in &owned {
                let n = x.len();
                gm.add(x, g[off..off + n].to_vec());
                off += n;
            }
        });
        Ok(out)
    }

    /// Concatenate rank-2 tensors along axis 1.
    pub fn concat_cols(&self, xs: &[&Tensor]) -> Result<Tensor> {
        if xs.is_empty() {
            return Err(Error::Dimension("concat_cols: empty input list".into()));
        }
        let (n, _) = xs[0].dims2()?;
        let mut widths = Vec::with_capacity(xs.len());
        for x in xs {
            let (r, c) = x.dims2()?;
            if r != n {
                return Err(Error::Dimension(format!(
                    "concat_cols: row counts {n} vs {r}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for (x, &w) in xs.iter().zip(&widths) {
                data.extend_from_slice(&x.data()[i * w..(i + 1) * w]);
            }
        }
        let out = self.output(OpKind::ConcatCols, vec![n, total], data)?;
        let owned: Vec<Tensor> = xs.iter().map(|x| (*x).clone()).collect();
        let ws = widths.clone();
        self.record(OpKind::ConcatCols, xs, &out, move |g, gm| {
            let mut col = 0;
            for (x, &w) in owned.iter().zip(&ws) {
                let mut dx = vec![0.0; n * w];
                for i in 0..n {
                    dx[i * w..(i + 1) * w]
                        .copy_from_slice(&g[i * total + col..i * total + col + w]);
                }
                gm.add(x, dx);
                col += w;
            }
        });
        Ok(out)
    }

    pub fn slice_rows(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        if x.shape().is_empty() {
            return Err(Error::Dimension("slice_rows: rank-0 input".into()));
        }
        let rows = x.shape()[0];
        if start + len > rows {
            return Err(Error::Dimension(format!(
                "slice_rows: {start}..{} out of {rows} rows",
                start + len
            )));
        }
        let width: usize = x.shape()[1..].iter().product::<usize>().max(1);
        let data = x.data()[start * width..(start + len) * width].to_vec();
        let mut shape = vec![len];
        shape.extend_from_slice(&x.shape()[1..]);
        let out = self.output(OpKind::SliceRows, shape, data)?;
        let xc = x.clone();
        self.record(OpKind::SliceRows, &[x], &out, move |g, gm| {
            let mut dx = vec![0.0; rows * width];
            dx[start * width..(start + len) * width].copy_from_slice(g);
            gm.add(&xc, dx);
        });
        Ok(out)
    }

    pub fn slice_cols(&self, x: &Tensor, start: usize, len: usize) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if start + len > d {
            return Err(Error::Dimension(format!(
                "slice_cols: {start}..{} out of {d} cols",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(n * len);
        for i in 0..n {
            data.extend_from_slice(&x.data()[i * d + start..i * d + start + len]);
        }
        let out = self.output(OpKind::SliceCols, vec![n, len], data)?;
        let xc = x.clone();
        self.record(OpKind::SliceCols, &[x], &out, move |g, gm| {
            let mut dx = vec![0.0; n * d];
            for i in 0..n {
                dx[i * d + start..i * d + start + len]
                    .copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            gm.add(&xc, dx);
        });
        Ok(out)
    }

    // ── nonlinearities ──────────────────────────────────────────────────

    /// GELU, tanh approximation.
    pub fn gelu(&self, x: &Tensor) -> Result<Tensor> {
        const C0: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
        const C1: f64 = 0.044715;
        let data = x
            .data()
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (C0 * (v + C1 * v * v * v)).tanh()))
            .collect();
        let out = self.output(OpKind::Gelu, x.shape().to_vec(), data)?;
        let xc = x.clone();
        self.record(OpKind::Gelu, &[x], &out, move |g, gm| {
            let dx = xc
                .data()
                .iter()
                .zip(g)
                .map(|(&v, gv)| {
                    let t = (C0 * (v + C1 * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * C0 * (1.0 + 3.0 * C1 * v * v);
                    d * gv
                })
                .collect();
            gm.add(&xc, dx);
        });
        Ok(out)
    }

    // ── attention ───────────────────────────────────────────────────────

    /// Single-head scaled-dot-product attention over `q,k,v: [T×d]`.
    /// With `causal`, position i attends only to positions ≤ i.
    pub fn attention(&self, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool) -> Result<Tensor> {
        let (t, d) = q.dims2()?;
        if k.shape() != [t, d] || v.shape() != [t, d] {
            return Err(Error::Dimension(format!(
                "attention: q {:?}, k {:?}, v {:?}",
                q.shape(),
                k.shape(),
                v.shape()
            )));
        }
        if d == 0 {
            return Err(Error::Dimension("attention: zero head width".into()));
        }
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (q.data(), k.data(), v.data());
        let mut probs = vec![0.0; t * t];
        let mut data = vec![0.0; t * d];
        for i in 0..t {
            let limit = if causal { i + 1 } else { t };
            let row = &mut probs[i * t..i * t + limit];
            let mut max = f64::NEG_INFINITY;
            for (j, slot) in row.iter_mut().enumerate() {
                let mut s = 0.0;
                for c in 0..d {
                    s += qd[i * d + c] * kd[j * d + c];
                }
                *slot = s * scale;
                max = max.max(*slot);
            }
            let mut denom = 0.0;
            for slot in row.iter_mut() {
                *slot = (*slot - max).exp();
                denom += *slot;
            }
            for slot in row.iter_mut() {
                *slot /= denom;
            }
            for (j, &p) in row.iter().enumerate() {
                if p != 0.0 {
                    for c in 0..d {
                        data[i * d + c] += p * vd[j * d + c];
                    }
                }
            }
        }
        let out = self.output(OpKind::Attention, vec![t, d], data)?;
        let (qc, kc, vc) = (q.clone(), k.clone(), v.clone());
        self.record(OpKind::Attention, &[q, k, v], &out, move |g, gm| {
            let (qd, kd, vd) = (qc.data(), kc.data(), vc.data());
            let mut dq = vec![0.0; t * d];
            let mut dk = vec![0.0; t * d];
            let mut dv = vec![0.0; t * d];
            let mut dscores = vec![0.0; t];
            for i in 0..t {
                let limit = if causal { i + 1 } else { t };
                let prow = &probs[i * t..i * t + limit];
                // dP and the softmax inner product
                let mut dot = 0.0;
                for (j, &p) in prow.iter().enumerate() {
                    let mut dp = 0.0;
                    for c in 0..d {
                        dp += g[i * d + c] * vd[j * d + c];
                    }
                    dscores[j] = dp;
                    dot += p * dp;
                }
                for (j, &p) in prow.iter().enumerate() {
                    let ds = p * (dscores[j] - dot);
                    for c in 0..d {
                        dq[i * d + c] += scale * ds * kd[j * d + c];
                        dk[j * d + c] += scale * ds * qd[i * d + c];
                        dv[j * d + c] += p * g[i * d + c];
                    }
                }
            }
            gm.add(&qc, dq);
            gm.add(&kc, dk);
            gm.add(&vc, dv);
        });
        Ok(out)
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum(&self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.data().iter().sum();
        let out = self.output(OpKind::Sum, vec![1], vec![s])?;
        let xc = x.clone();
        self.record(OpKind::Sum, &[x], &out, move |g, gm| {
            gm.add(&xc, vec![g[0]; xc.len()]);
        });
        Ok(out)
    }

    pub fn mean(&self, x: &Tensor) -> Result<Tensor> {
        if x.is_empty() {
            return Err(Error::Dimension("mean: empty tensor".into()));
        }
        let n = x.len() as f64;
        let s: f64 = x.data().iter().sum();
        let out = self.output(OpKind::Mean, vec![1], vec![s / n])?;
        let xc = x.clone();
        self.record(OpKind::Mean, &[x], &out, move |g, gm| {
            gm.add(&xc, vec![g[0] / n; xc.len()]);
        });
        Ok(out)
    }

    /// Mean over axis 0: `x[n×d] -> [d]`.
    pub fn mean_rows(&self, x: &Tensor) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if n == 0 {
            return Err(Error::Dimension("mean_rows: zero rows".into()));
        }
        let mut data = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                data[j] += x.data()[i * d + j];
            }
        }
        for v in &mut data {
            *v /= n as f64;
        }
        let out = self.output(OpKind::MeanRows, vec![d], data)?;
        let xc = x.clone();
        self.record(OpKind::MeanRows, &[x], &out, move |g, gm| {
            let mut dx = vec![0.0; n * d];
            for i in 0..n {
                for j in 0..d {
                    dx[i * d + j] = g[j] / n as f64;
                }
            }
            gm.add(&xc, dx);
        });
        Ok(out)
    }

    // ── normalization and loss ──────────────────────────────────────────

    /// Per-row zero-mean unit-variance normalization followed by affine.
    pub fn layer_norm(&self, x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let (n, d) = x.dims2()?;
        if d == 0 {
            return Err(Error::Dimension("layer_norm: zero row width".into()));
        }
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension(format!(
                "layer_norm: width {d} vs gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let xd = x.data();
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut data = vec![0.0; n * d];
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mu) * inv;
                xhat[i * d + j] = h;
                data[i * d + j] = gamma.data()[j] * h + beta.data()[j];
            }
        }
        let out = self.output(OpKind::LayerNorm, vec![n, d], data)?;
        let (xc, gc, bc) = (x.clone(), gamma.clone(), beta.clone());
        self.record(OpKind::LayerNorm, &[x, gamma, beta], &out, move |g, gm| {
            let mut dx = vec![0.0; n * d];
            let mut dgamma = vec![0.0; d];
            let mut dbeta = vec![0.0; d];
            for i in 0..n {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for j in 0..d {
                    let dy = g[i * d + j];
                    let h = xhat[i * d + j];
                    let dxh = dy * gc.data()[j];
                    m1 += dxh;
                    m2 += dxh * h;
                    dgamma[j] += dy * h;
                    dbeta[j] += dy;
                }
                m1 /= d as f64;
                m2 /= d as f64;
                for j in 0..d {
                    let dxh = g[i * d + j] * gc.data()[j];
                    dx[i * d + j] = inv_std[i] * (dxh - m1 - xhat[i * d + j] * m2);
                }
            }
            gm.add(&xc, dx);
            gm.add(&gc, dgamma);
            gm.add(&bc, dbeta);
        });
        Ok(out)
    }

    /// Cross-entropy over masked rows of `logits[T×V]`. Unmasked rows
    /// contribute exactly zero loss and exactly zero gradient.
    pub fn softmax_ce_masked(
        &self,
        logits: &Tensor,
        targets: &[usize],
        mask: &[bool],
        reduction: LossReduction,
    ) -> Result<Tensor> {
        let (t, v) = logits.dims2()?;
        if targets.len() != t || mask.len() != t {
            return Err(Error::Dimension(format!(
                "softmax_ce_masked: {t} rows vs {} targets, {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|m| **m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        for (i, (&y, &m)) in targets.iter().zip(mask).enumerate() {
            if m && y >= v {
                return Err(Error::Dimension(format!(
                    "softmax_ce_masked: target {y} at row {i} out of vocab {v}"
                )));
            }
        }
        let ld = logits.data();
        let mut total = 0.0;
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let row = &ld[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[targets[i]];
        }
        let loss = match reduction {
            LossReduction::Mean => total / count as f64,
            LossReduction::Sum => total,
        };
        let out = self.output(OpKind::SoftmaxCeMasked, vec![1], vec![loss])?;
        let lc = logits.clone();
        let tg: Vec<usize> = targets.to_vec();
        let mk: Vec<bool> = mask.to_vec();
        self.record(OpKind::SoftmaxCeMasked, &[logits], &out, move |g, gm| {
            let w = match reduction {
                LossReduction::Mean => g[0] / count as f64,
                LossReduction::Sum => g[0],
            };
            let ld = lc.data();
            let mut dl = vec![0.0; t * v];
            for i in 0..t {
                if !mk[i] {
                    continue;
                }
                let row = &ld[i * v..(i + 1) * v];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let denom: f64 = row.iter().map(|x| (x - max).exp()).sum();
                for j in 0..v {
                    let p = (row[j] - max).exp() / denom;
                    dl[i * v + j] = w * (p - if j == tg[i] { 1.0 } else { 0.0 });
                }
            }
            gm.add(&lc, dl);
        });
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::new(vec![rows, cols], data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_cases() {
        let tape = Tape::new(Precision::F64);
        let eye = t2(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let m = t2(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let out = tape.matmul(&eye, &m).unwrap();
        assert_eq!(out.data(), m.data());

        let a = t2(1, 2, &[1.0, 2.0]);
        let b = t2(2, 1, &[3.0, 4.0]);
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let tape = Tape::new(Precision::F64);
        let a = t2(2, 3, &[0.0; 6]);
        let b = t2(2, 2, &[0.0; 4]);
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let tape = Tape::new(Precision::F64);
        let x = Tensor::leaf(vec![3], vec![1.0, -2.0, 3.0]).unwrap();
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum(&sq).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_zero_for_unused_leaf() {
        let tape = Tape::new(Precision::F64);
        let x = Tensor::leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let y = Tensor::leaf(vec![2], vec![5.0, 6.0]).unwrap();
        let _unused = tape.scale(&y, 2.0).unwrap();
        let loss = tape.sum(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0]);
        assert_eq!(y.grad().unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_requires_scalar_root_on_tape() {
        let tape = Tape::new(Precision::F64);
        let x = Tensor::leaf(vec![2], vec![1.0, 2.0]).unwrap();
        let doubled = tape.scale(&x, 2.0).unwrap();
        assert!(matches!(tape.backward(&doubled), Err(Error::Contract(_))));
        let stray = Tensor::scalar(1.0).unwrap();
        assert!(matches!(tape.backward(&stray), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_logits_loss_is_log_vocab() {
        let tape = Tape::new(Precision::F64);
        let logits = t2(3, 8, &[0.25; 24]);
        let loss = tape
            .softmax_ce_masked(&logits, &[1, 5, 7], &[true, true, false], LossReduction::Mean)
            .unwrap();
        assert!((loss.item().unwrap() - (8.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn saturated_correct_class_loss_near_zero() {
        let tape = Tape::new(Precision::F64);
        let mut row = vec![0.0; 8];
        row[3] = 1e4;
        let logits = t2(1, 8, &row);
        let loss = tape
            .softmax_ce_masked(&logits, &[3], &[true], LossReduction::Mean)
            .unwrap();
        assert!(loss.item().unwrap() < 1e-9);
    }

    #[test]
    fn all_false_mask_is_an_error() {
        let tape = Tape::new(Precision::F64);
        let logits = t2(2, 4, &[0.0; 8]);
        assert!(matches!(
            tape.softmax_ce_masked(&logits, &[0, 0], &[false, false], LossReduction::Mean),
            Err(Error::EmptyMask)
        ));
    }

    #[test]
    fn masked_loss_ignores_unmasked_rows_exactly() {
        let tape = Tape::new(Precision::F64);
        let base = t2(3, 4, &[0.1, 0.2, 0.3, 0.4, 1.0, 2.0, 3.0, 4.0, -1.0, 0.0, 1.0, 2.0]);
        let mask = [true, false, true];
        let loss_a = tape
            .softmax_ce_masked(&base, &[0, 0, 1], &mask, LossReduction::Mean)
            .unwrap();
        // perturb the unmasked row arbitrarily
        let mut perturbed = base.data().to_vec();
        perturbed[4] += 1234.5;
        perturbed[7] -= 9.0;
        let other = t2(3, 4, &perturbed);
        let loss_b = tape
            .softmax_ce_masked(&other, &[0, 0, 1], &mask, LossReduction::Mean)
            .unwrap();
        assert_eq!(loss_a.item().unwrap(), loss_b.item().unwrap());
    }

    #[test]
    fn unmasked_rows_receive_zero_gradient() {
        let tape = Tape::new(Precision::F64);
        let logits = Tensor::leaf(vec![3, 4], vec![0.3; 12]).unwrap();
        let loss = tape
            .softmax_ce_masked(&logits, &[0, 0, 1], &[true, false, true], LossReduction::Mean)
            .unwrap();
        tape.backward(&loss).unwrap();
        let g = logits.grad().unwrap();
        assert!(g[4..8].iter().all(|&v| v == 0.0));
        assert!(g[0..4].iter().any(|&v| v != 0.0));
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let tape = Tape::new(Precision::F64);
        let x = t2(1, 4, &[5.0; 4]);
        let gamma = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let beta = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_symmetric_pair() {
        let tape = Tape::new(Precision::F64);
        let x = t2(1, 2, &[1.0, 3.0]);
        let gamma = Tensor::new(vec![2], vec![1.0; 2]).unwrap();
        let beta = Tensor::new(vec![2], vec![0.0; 2]).unwrap();
        let y = tape.layer_norm(&x, &gamma, &beta, 1e-12).unwrap();
        assert!((y.data()[0] + 1.0).abs() < 1e-6);
        assert!((y.data()[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn layer_norm_rejects_zero_width() {
        let tape = Tape::new(Precision::F64);
        let x = Tensor::new(vec![2, 0], vec![]).unwrap();
        let g = Tensor::new(vec![0], vec![]).unwrap();
        assert!(matches!(
            tape.layer_norm(&x, &g, &g, 1e-5),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn reshape_and_transpose_preserve_value_multiset() {
        let tape = Tape::new(Precision::F64);
        let x = t2(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = tape.reshape(&x, vec![3, 2]).unwrap();
        let tr = tape.transpose(&x).unwrap();
        let mut a = x.data().to_vec();
        let mut b = r.data().to_vec();
        let mut c = tr.data().to_vec();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        c.sort_by(f64::total_cmp);
        assert_eq!(a, b);
        assert_eq!(a, c);
    }

    #[test]
    fn non_finite_forward_is_surfaced() {
        let tape = Tape::new(Precision::F64);
        let x = t2(1, 1, &[1e308]);
        let y = t2(1, 1, &[1e308]);
        // overflow to +inf must not propagate silently
        assert!(matches!(tape.add(&x, &y), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn causal_attention_single_position_is_value() {
        let tape = Tape::new(Precision::F64);
        let q = t2(1, 2, &[0.3, -0.7]);
        let k = t2(1, 2, &[1.0, 2.0]);
        let v = t2(1, 2, &[5.0, -4.0]);
        let out = tape.attention(&q, &k, &v, true).unwrap();
        assert_eq!(out.data(), v.data());
    }

    #[test]
    fn f32_mode_rounds_outputs() {
        let tape = Tape::new(Precision::F32);
        let x = t2(1, 1, &[0.1]);
        let y = tape.scale(&x, 1.0).unwrap();
        assert_eq!(y.data()[0], 0.1f32 as f64);
    }

}
