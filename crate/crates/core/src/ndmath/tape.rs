//! Tensor-level reverse-mode differentiation.
//!
//! Every primitive appends one node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse recorded order and accumulates adjoints
//! additively, so a value consumed by several ops receives the sum of
//! their contributions.

use std::collections::{BTreeMap, HashMap};

use super::params::ParamSet;
use super::tensor::{
    dot, gemm_acc, gemm_nt_acc, gemm_tn_acc, inv_rms, softmax_row, split_axis, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `x[.., k] · w[k, n]`
    Linear { x: Var, w: Var },
    /// Batched `a[b, m, k] · b[b, k, n]`, or `a · bᵀ` with `b[b, n, k]`.
    Bmm { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `y` broadcast over the leading axes of `x`.
    AddBroadcast { x: Var, y: Var },
    Scale { x: Var, c: f64 },
    /// Multiply each leading-axis slice by its own constant.
    ScaleRows { x: Var, s: Vec<f64> },
    /// Elementwise product with a constant tensor.
    MulConst { x: Var, c: Vec<f64> },
    Sigmoid(Var),
    Exp(Var),
    RmsNorm {
        x: Var,
        gain: Option<Var>,
        inv: Vec<f64>,
    },
    Softmax(Var),
    Reshape(Var),
    Transpose(Var),
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Expand {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        lens: Vec<usize>,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        full: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Gather { w: Var, ids: Vec<usize> },
    PairSqDist { a: Var, b: Var },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of primitive applications.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    params: BTreeMap<String, Var>,
}

impl Gradients {
    /// Adjoint of `v`; zeros when the seed never reached it.
    pub fn wrt(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Adjoint of the named parameter, zeros when unreached.
    pub fn param(&self, name: &str) -> Option<Tensor> {
        self.params.get(name).map(|&v| self.wrt(v))
    }

    /// Adjoints for every parameter of `params`; ones never placed on the tape get zeros.
    pub fn for_params(&self, params: &ParamSet) -> BTreeMap<String, Tensor> {
        params
            .iter()
            .map(|(name, t)| {
                let g = self
                    .param(name)
                    .unwrap_or_else(|| Tensor::zeros(t.shape()));
                (name.to_string(), g)
            })
            .collect()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input that is not a named parameter.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Places a named parameter on the tape; repeated requests share one node.
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = params
            .get(name)
            .ok_or_else(|| Error::Lookup(format!("parameter `{name}` not found")))?;
        let v = self.push(t.clone(), Op::Leaf);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    /// Applies `w[k, n]` to the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let ws = self.shape(w).to_vec();
        let xs = self.shape(x).to_vec();
        if ws.len() != 2 || xs.last() != Some(&ws[0]) {
            return Err(Error::Dimension(format!("linear {xs:?} x {ws:?}")));
        }
        let (k, n) = (ws[0], ws[1]);
        let m = self.value(x).len() / k.max(1);
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(x).data(), self.value(w).data(), m, k, n, &mut out);
        let mut shape = xs;
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(value, Op::Linear { x, w }))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::Dimension("matmul expects a matrix".into()));
        }
        self.linear(a, b)
    }

    /// Batched product over a shared leading axis.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(Error::Dimension(format!("bmm {sa:?} x {sb:?}")));
        }
        let (bt, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(Error::Dimension(format!("bmm {sa:?} x {sb:?}")));
        }
        let mut out = vec![0.0; bt * m * n];
        {
            let (av, bv) = (self.value(a).data(), self.value(b).data());
            for i in 0..bt {
                let ab = &av[i * m * k..(i + 1) * m * k];
                let bb = &bv[i * k * n..(i + 1) * k * n];
                let ob = &mut out[i * m * n..(i + 1) * m * n];
                if trans_b {
                    gemm_nt_acc(ab, bb, m, k, n, ob);
                } else {
                    gemm_acc(ab, bb, m, k, n, ob);
                }
            }
        }
        let value = Tensor::new(&[bt, m, n], out)?;
        Ok(self.push(value, Op::Bmm { a, b, trans_b }))
    }

    fn zip_values(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data).expect("shape checked")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.zip_values(a, b, |p, q| p + q);
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.zip_values(a, b, |p, q| p - q);
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.zip_values(a, b, |p, q| p * q);
        Ok(self.push(v, Op::Mul(a, b)))
    }

    /// `x + y` where `y`'s shape equals the trailing axes of `x`.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (sx, sy) = (self.shape(x).to_vec(), self.shape(y).to_vec());
        if sy.len() > sx.len() || sx[sx.len() - sy.len()..] != sy[..] {
            return Err(Error::Dimension(format!("broadcast {sy:?} onto {sx:?}")));
        }
        let yv = self.value(y).data();
        let inner = yv.len().max(1);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + yv[i % inner])
            .collect();
        let value = Tensor::new(&sx, data)?;
        Ok(self.push(value, Op::AddBroadcast { x, y }))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c })
    }

    /// Multiplies slice `i` of the leading axis by `s[i]`.
    pub fn scale_rows(&mut self, x: Var, s: &[f64]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&s.len()) {
            return Err(Error::Dimension(format!(
                "scale_rows with {} factors on {shape:?}",
                s.len()
            )));
        }
        let inner = self.value(x).len() / s.len().max(1);
        let data = self
            .value(x)
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * s[i / inner])
            .collect();
        let value = Tensor::new(&shape, data)?;
        Ok(self.push(
            value,
            Op::ScaleRows {
                x,
                s: s.to_vec(),
            },
        ))
    }

    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        if self.shape(x) != c.shape() {
            return Err(Error::Dimension("mul_const shape mismatch".into()));
        }
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(c.data())
            .map(|(a, b)| a * b)
            .collect();
        let value = Tensor::new(c.shape(), data)?;
        Ok(self.push(
            value,
            Op::MulConst {
                x,
                c: c.data().to_vec(),
            },
        ))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push(value, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::exp);
        self.push(value, Op::Exp(x))
    }

    /// Root-mean-square normalization over the last axis with optional gain.
    pub fn rmsnorm(&mut self, x: Var, gain: Option<Var>, eps: f64) -> Result<Var> {
        let d = self.value(x).last_dim();
        if let Some(g) = gain {
            if self.shape(g) != [d] {
                return Err(Error::Dimension(format!(
                    "rmsnorm gain {:?} for width {d}",
                    self.shape(g)
                )));
            }
        }
        let xv = self.value(x);
        let rows = xv.len() / d;
        let mut inv = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let ir = if row.iter().all(|&v| v == 0.0) {
                0.0
            } else {
                inv_rms(row, eps)
            };
            inv.push(ir);
            for (o, &v) in out[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = v * ir;
            }
        }
        if let Some(g) = gain {
            let gv = self.value(g).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o *= gv[i % d];
            }
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::RmsNorm { x, gain, inv }))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if d == 0 {
            return Err(Error::Argument("softmax over an empty axis".into()));
        }
        let mut out = vec![0.0; xv.len()];
        for (src, dst) in xv.data().chunks(d).zip(out.chunks_mut(d)) {
            softmax_row(src, dst);
        }
        let value = Tensor::new(xv.shape(), out)?;
        Ok(self.push(value, Op::Softmax(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Transpose of a matrix.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension("transpose expects a matrix".into()));
        }
        let (m, n) = (s[0], s[1]);
        let xv = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = xv[i * n + j];
            }
        }
        let value = Tensor::new(&[n, m], out)?;
        Ok(self.push(value, Op::Transpose(x)))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::Argument(format!("mean over axis {axis} of {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &xv[(o * len + l) * inner..(o * len + l + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            for d in dst.iter_mut() {
                *d /= len as f64;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Inserts a new axis of length `n` at `axis`, repeating the data.
    pub fn expand(&mut self, x: Var, axis: usize, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis > shape.len() {
            return Err(Error::Dimension(format!("expand axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis..].iter().product();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            for _ in 0..n {
                out.extend_from_slice(&xv[o * inner..(o + 1) * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape.insert(axis, n);
        let value = Tensor::new(&out_shape, out)?;
        Ok(self.push(
            value,
            Op::Expand {
                x,
                outer,
                n,
                inner,
            },
        ))
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::Argument("empty concat".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Dimension(format!("concat axis {axis} of {first:?}")));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s.iter()
                    .zip(&first)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::Dimension(format!("concat {first:?} with {s:?}")));
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&p, &l) in parts.iter().zip(&lens) {
                let src = self.value(p).data();
                out.extend_from_slice(&src[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let value = Tensor::new(&shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                lens,
                inner,
            },
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dimension(format!(
                "narrow [{start}, {}) on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let value = self.value(x).narrow(axis, start, len);
        Ok(self.push(
            value,
            Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
                inner,
            },
        ))
    }

    /// Row lookup: output row `i` is row `ids[i]` of `w`.
    pub fn gather(&mut self, w: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(w).to_vec();
        if s.len() != 2 {
            return Err(Error::Dimension("gather expects a matrix".into()));
        }
        let (k, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= k {
                return Err(Error::Lookup(format!("row {id} of a table with {k} rows")));
            }
            out.extend_from_slice(self.value(w).row(id));
        }
        let value = Tensor::new(&[ids.len(), d], out)?;
        Ok(self.push(
            value,
            Op::Gather {
                w,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Squared Euclidean distances between rows: `[b,n,d] × [b,m,d] → [b,n,m]`.
    pub fn pair_sqdist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
            return Err(Error::Dimension(format!("pair_sqdist {sa:?} vs {sb:?}")));
        }
        let (bt, n, d, m) = (sa[0], sa[1], sa[2], sb[1]);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; bt * n * m];
        for s in 0..bt {
            for i in 0..n {
                let ar = &av[(s * n + i) * d..(s * n + i + 1) * d];
                for j in 0..m {
                    let br = &bv[(s * m + j) * d..(s * m + j + 1) * d];
                    out[(s * n + i) * m + j] =
                        ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum();
                }
            }
        }
        let value = Tensor::new(&[bt, n, m], out)?;
        Ok(self.push(value, Op::PairSqDist { a, b }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).data().iter().sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.data().iter().sum::<f64>() / xv.len() as f64);
        self.push(value, Op::Mean(x))
    }

    /// Mean of squared differences between two same-shape values.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        Ok(self.mean(sq))
    }

    /// Reverse pass from `output` seeded with `seed`.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(output) {
            return Err(Error::Dimension(format!(
                "seed {:?} for output {:?}",
                seed.shape(),
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params: self.params.iter().map(|(k, &v)| (k.clone(), v)).collect(),
        })
    }

    /// Reverse pass for a scalar output.
    pub fn grad(&self, output: Var) -> Result<Gradients> {
        self.backward(output, &Tensor::scalar(1.0))
    }

    fn backprop_node(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[idx];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w } => {
                let ws = self.shape(*w);
                let (k, n) = (ws[0], ws[1]);
                let xv = self.value(*x).data();
                let m = xv.len() / k.max(1);
                let mut dx = vec![0.0; m * k];
                gemm_nt_acc(gd, self.value(*w).data(), m, n, k, &mut dx);
                accumulate(grads, *x, self.shape(*x), dx);
                let mut dw = vec![0.0; k * n];
                gemm_tn_acc(xv, gd, m, k, n, &mut dw);
                accumulate(grads, *w, ws, dw);
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let sb = self.shape(*b);
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for s in 0..bt {
                    let gs = &gd[s * m * n..(s + 1) * m * n];
                    let as_ = &av[s * m * k..(s + 1) * m * k];
                    let bs = &bv[s * k * n..(s + 1) * k * n];
                    let das = &mut da[s * m * k..(s + 1) * m * k];
                    let dbs = &mut db[s * k * n..(s + 1) * k * n];
                    if *trans_b {
                        // c = a bᵀ, b is [n, k]
                        gemm_acc(gs, bs, m, n, k, das);
                        gemm_tn_acc(gs, as_, m, n, k, dbs);
                    } else {
                        gemm_nt_acc(gs, bs, m, n, k, das);
                        gemm_tn_acc(as_, gs, m, k, n, dbs);
                    }
                }
                accumulate(grads, *a, sa, da);
                accumulate(grads, *b, sb, db);
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.shape(), gd.to_vec());
                accumulate(grads, *b, g.shape(), gd.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = gd.iter().zip(bv).map(|(g, b)| g * b).collect();
                let db = gd.iter().zip(av).map(|(g, a)| g * a).collect();
                accumulate(grads, *a, g.shape(), da);
                accumulate(grads, *b, g.shape(), db);
            }
            Op::AddBroadcast { x, y } => {
                accumulate(grads, *x, g.shape(), gd.to_vec());
                let inner = self.value(*y).len();
                let mut dy = vec![0.0; inner];
                for chunk in gd.chunks(inner.max(1)) {
                    for (d, v) in dy.iter_mut().zip(chunk) {
                        *d += v;
                    }
                }
                accumulate(grads, *y, self.shape(*y), dy);
            }
            Op::Scale { x, c } => {
                accumulate(grads, *x, g.shape(), gd.iter().map(|v| v * c).collect());
            }
            Op::ScaleRows { x, s } => {
                let inner = gd.len() / s.len().max(1);
                let dx = gd
                    .iter()
                    .enumerate()
                    .map(|(i, v)| v * s[i / inner])
                    .collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::MulConst { x, c } => {
                let dx = gd.iter().zip(c).map(|(g, c)| g * c).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Exp(x) => {
                let y = node.value.data();
                let dx = gd.iter().zip(y).map(|(g, y)| g * y).collect();
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::RmsNorm { x, gain, inv } => {
                let xv = self.value(*x).data();
                let d = self.value(*x).last_dim();
                let gain_v = gain.map(|gv| self.value(gv).data().to_vec());
                let mut dx = vec![0.0; xv.len()];
                let mut dgain = vec![0.0; d];
                for (r, &ir) in inv.iter().enumerate() {
                    let xr = &xv[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let u: Vec<f64> = xr.iter().map(|v| v * ir).collect();
                    let du: Vec<f64> = match &gain_v {
                        Some(gv) => gr.iter().zip(gv).map(|(g, w)| g * w).collect(),
                        None => gr.to_vec(),
                    };
                    if gain_v.is_some() {
                        for ((dg, g), uu) in dgain.iter_mut().zip(gr).zip(&u) {
                            *dg += g * uu;
                        }
                    }
                    let proj = dot(&du, &u) / d as f64;
                    for ((o, dd), uu) in dx[r * d..(r + 1) * d].iter_mut().zip(&du).zip(&u) {
                        *o = ir * (dd - uu * proj);
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
                if let Some(gv) = gain {
                    accumulate(grads, *gv, self.shape(*gv), dgain);
                }
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let d = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(d).zip(gd.chunks(d)).zip(dx.chunks_mut(d)) {
                    let s = dot(yr, gr);
                    for ((o, yy), gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yy * (gg - s);
                    }
                }
                accumulate(grads, *x, g.shape(), dx);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, self.shape(*x), gd.to_vec());
            }
            Op::Transpose(x) => {
                let s = self.shape(*x);
                let (m, n) = (s[0], s[1]);
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = gd[j * m + i];
                    }
                }
                accumulate(grads, *x, s, dx);
            }
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; outer * len * inner];
                let f = 1.0 / *len as f64;
                for o in 0..*outer {
                    let src = &gd[o * inner..(o + 1) * inner];
                    for l in 0..*len {
                        let dst = &mut dx[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = s * f;
                        }
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Expand { x, outer, n, inner } => {
                let mut dx = vec![0.0; outer * inner];
                for o in 0..*outer {
                    let dst = &mut dx[o * inner..(o + 1) * inner];
                    for r in 0..*n {
                        let src = &gd[(o * n + r) * inner..(o * n + r + 1) * inner];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Concat {
                parts,
                outer,
                lens,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (&p, &l) in parts.iter().zip(lens) {
                    let mut dp = Vec::with_capacity(outer * l * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&gd[base..base + l * inner]);
                    }
                    accumulate(grads, p, self.shape(p), dp);
                    offset += l;
                }
            }
            Op::Narrow {
                x,
                outer,
                full,
                start,
                len,
                inner,
            } => {
                let mut dx = vec![0.0; outer * full * inner];
                for o in 0..*outer {
                    let dst = (o * full + start) * inner;
                    let src = o * len * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                accumulate(grads, *x, self.shape(*x), dx);
            }
            Op::Gather { w, ids } => {
                let s = self.shape(*w);
                let d = s[1];
                let mut dw = vec![0.0; s[0] * d];
                for (i, &id) in ids.iter().enumerate() {
                    for (o, v) in dw[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&gd[i * d..(i + 1) * d])
                    {
                        *o += v;
                    }
                }
                accumulate(grads, *w, s, dw);
            }
            Op::PairSqDist { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, n, d, m) = (sa[0], sa[1], sa[2], sb[1]);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                for s in 0..bt {
                    for i in 0..n {
                        let ai = (s * n + i) * d;
                        for j in 0..m {
                            let w = 2.0 * gd[(s * n + i) * m + j];
                            if w == 0.0 {
                                continue;
                            }
                            let bj = (s * m + j) * d;
                            for c in 0..d {
                                let diff = w * (av[ai + c] - bv[bj + c]);
                                da[ai + c] += diff;
                                db[bj + c] -= diff;
                            }
                        }
                    }
                }
                accumulate(grads, *a, sa, da);
                accumulate(grads, *b, sb, db);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, self.shape(*x), vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                accumulate(grads, *x, self.shape(*x), vec![gd[0] / n as f64; n]);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(t) => {
            for (a, b) in t.data_mut().iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => {
            *slot = Some(Tensor::new(shape, delta).expect("adjoint shape"));
        }
    }
}
