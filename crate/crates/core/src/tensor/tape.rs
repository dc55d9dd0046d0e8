use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{numel, Element, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Which convolution kernel to run. Both produce the same result within
/// 1e-10; `Direct` is the reference, `Im2col` trades memory for matmul
/// throughput.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Conv3dImpl {
    Direct,
    Im2col,
}

#[derive(Debug, Clone)]
struct Conv3dConf {
    n: usize,
    c_in: usize,
    c_out: usize,
    in_dims: [usize; 3],
    k_dims: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
    out_dims: [usize; 3],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BnMode {
    Train,
    Eval,
}

#[derive(Debug)]
enum Op<E: Element> {
    Leaf,
    Const,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Div { a: Var, b: Var },
    Neg { a: Var },
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Transpose2d { a: Var, rows: usize, cols: usize },
    Reshape { a: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    SumAll { a: Var },
    MeanAll { a: Var },
    SumAxis { a: Var, axis: usize },
    MeanAxis { a: Var, axis: usize },
    Exp { a: Var },
    Ln { a: Var },
    Tanh { a: Var },
    Sigmoid { a: Var },
    Relu { a: Var },
    LeakyRelu { a: Var, slope: E },
    Powf { a: Var, p: E },
    Softmax { a: Var, axis: usize },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode,
        mean: Vec<E>,
        invstd: Vec<E>,
    },
    Conv3d { x: Var, kernel: Var, conf: Conv3dConf, imp: Conv3dImpl },
    AdaptiveAvgPool3d { x: Var, lead: usize, in_dims: [usize; 3], out_dims: [usize; 3] },
}

struct Node<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
    requires_grad: bool,
    op: Op<E>,
}

/// Dynamic computation tape. Records every op in execution order; backward
/// replays them in strict reverse, accumulating adjoints additively. A tape
/// serves exactly one forward/backward cycle and is single-threaded.
pub struct Tape<E: Element = f64> {
    nodes: Vec<Node<E>>,
    adjoints: Vec<Option<Vec<E>>>,
    keyed: HashMap<String, Var>,
    ran_backward: bool,
}

impl<E: Element> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Element> Tape<E> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            adjoints: Vec::new(),
            keyed: HashMap::new(),
            ran_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[E] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a single-element node.
    pub fn item(&self, v: Var) -> Result<E> {
        let node = &self.nodes[v.0];
        if node.data.len() != 1 {
            return Err(Error::Contract(format!(
                "item() on node with {} elements",
                node.data.len()
            )));
        }
        Ok(node.data[0])
    }

    /// Copies a node's value out into a standalone tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor<E> {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.data.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<E>, requires_grad: bool, op: Op<E>) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Checked push: rejects NaN/Inf produced by a forward op.
    fn push_checked(
        &mut self,
        op_name: &'static str,
        shape: Vec<usize>,
        data: Vec<E>,
        requires_grad: bool,
        op: Op<E>,
    ) -> Result<Var> {
        if let Some(index) = data.iter().position(|v| !v.is_finite_v()) {
            return Err(Error::NonFinite { op: op_name, index });
        }
        Ok(self.push(shape, data, requires_grad, op))
    }

    /// Binds a tensor onto the tape as a differentiation leaf.
    pub fn leaf(&mut self, t: &Tensor<E>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    /// Binds a tensor under a stable key; repeated binds of the same key
    /// return the same node, so a parameter used k times accumulates the
    /// sum of its k gradient contributions on one leaf.
    pub fn leaf_keyed(&mut self, key: &str, t: &Tensor<E>) -> Var {
        if let Some(&v) = self.keyed.get(key) {
            return v;
        }
        let v = self.leaf(t);
        self.keyed.insert(key.to_string(), v);
        v
    }

    pub fn keyed_leaf(&self, key: &str) -> Option<Var> {
        self.keyed.get(key).copied()
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<E>) -> Result<Var> {
        if numel(shape) != data.len() {
            return Err(Error::Shape {
                op: "constant",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Const))
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.push(vec![], vec![E::from_f64(v)], false, Op::Const)
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![E::zero(); numel(shape)], false, Op::Const)
    }

    pub fn ones(&mut self, shape: &[usize]) -> Var {
        self.push(shape.to_vec(), vec![E::one(); numel(shape)], false, Op::Const)
    }

    // ── elementwise binary ops ──────────────────────────────────────────

    /// Broadcast rule: shapes must be identical, or — after stripping
    /// leading 1-extents — one operand's shape must be a suffix of the
    /// other's. The smaller operand tiles over the leading axes. Anything
    /// fancier must be an explicit reshape.
    fn broadcast_out(&self, op: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, usize, usize)> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        let na = numel(sa);
        let nb = numel(sb);
        if sa == sb {
            return Ok((sa.clone(), na, nb));
        }
        let strip = |s: &[usize]| -> Vec<usize> {
            let first = s.iter().position(|&d| d != 1).unwrap_or(s.len());
            s[first..].to_vec()
        };
        let ra = strip(sa);
        let rb = strip(sb);
        if sa.len() >= rb.len() && sa[sa.len() - rb.len()..] == rb[..] {
            Ok((sa.clone(), na, nb))
        } else if sb.len() >= ra.len() && sb[sb.len() - ra.len()..] == ra[..] {
            Ok((sb.clone(), na, nb))
        } else {
            Err(Error::Shape {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            })
        }
    }

    fn binary<F>(&mut self, name: &'static str, a: Var, b: Var, f: F, op: Op<E>) -> Result<Var>
    where
        F: Fn(E, E) -> E,
    {
        let (shape, na, nb) = self.broadcast_out(name, a, b)?;
        let n = numel(&shape);
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let mut out = Vec::with_capacity(n);
        if na == n && nb == n {
            for i in 0..n {
                out.push(f(da[i], db[i]));
            }
        } else {
            for i in 0..n {
                out.push(f(da[i % na], db[i % nb]));
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked(name, shape, out, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div { a, b })
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| -x).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("neg", shape, data, rg, Op::Neg { a })
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product. Accepts [m,k]@[k,n] -> [m,n], [m,k]@[k] -> [m],
    /// [k]@[k,n] -> [n].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        let sb = self.nodes[b.0].shape.clone();
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        let (m, k, n, out_shape): (usize, usize, usize, Vec<usize>) = match (sa.len(), sb.len()) {
            (2, 2) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], sb[1], vec![sa[0], sb[1]])
            }
            (2, 1) => {
                if sa[1] != sb[0] {
                    return Err(mismatch());
                }
                (sa[0], sa[1], 1, vec![sa[0]])
            }
            (1, 2) => {
                if sa[0] != sb[0] {
                    return Err(mismatch());
                }
                (1, sa[0], sb[1], vec![sb[1]])
            }
            _ => return Err(mismatch()),
        };
        let da = &self.nodes[a.0].data;
        let db = &self.nodes[b.0].data;
        let out = matmul_raw(da, db, m, k, n);
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push_checked("matmul", out_shape, out, rg, Op::MatMul { a, b, m, k, n })
    }

    pub fn transpose2d(&mut self, a: Var) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if sa.len() != 2 {
            return Err(Error::Shape {
                op: "transpose2d",
                lhs: sa,
                rhs: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let da = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = da[i * c + j];
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(
            "transpose2d",
            vec![c, r],
            out,
            rg,
            Op::Transpose2d { a, rows: r, cols: c },
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if numel(shape) != self.nodes[a.0].data.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.nodes[a.0].shape.clone(),
                rhs: shape.to_vec(),
            });
        }
        let data = self.nodes[a.0].data.clone();
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape.to_vec(), data, rg, Op::Reshape { a }))
    }

    /// Concatenates along `axis`; all parts must agree on every other axis.
    pub fn concat(&mut self, axis: usize, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat of zero parts".into()));
        }
        let first = self.nodes[parts[0].0].shape.clone();
        if axis >= first.len() {
            return Err(Error::Contract(format!(
                "concat axis {axis} out of range for rank {}",
                first.len()
            )));
        }
        let mut axis_total = 0usize;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != first.len()
                || sp
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != first[i])
            {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first.clone(),
                    rhs: sp.clone(),
                });
            }
            axis_total += sp[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = vec![E::zero(); numel(&shape)];
        let row = axis_total * inner;
        let mut offset = 0usize;
        for &p in parts {
            let pa = self.nodes[p.0].shape[axis];
            let chunk = pa * inner;
            let pdata = &self.nodes[p.0].data;
            for o in 0..outer {
                let src = &pdata[o * chunk..(o + 1) * chunk];
                out[o * row + offset..o * row + offset + chunk].copy_from_slice(src);
            }
            offset += chunk;
        }
        let rg = parts.iter().any(|&p| self.nodes[p.0].requires_grad);
        self.push_checked(
            "concat",
            shape,
            out,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        )
    }

    /// Contiguous range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let sa = self.nodes[a.0].shape.clone();
        if axis >= sa.len() || start + len > sa[axis] || len == 0 {
            return Err(Error::Contract(format!(
                "slice [{start}, {}) on axis {axis} of shape {sa:?}",
                start + len
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let inner: usize = sa[axis + 1..].iter().product();
        let mut shape = sa.clone();
        shape[axis] = len;
        let mut out = vec![E::zero(); numel(&shape)];
        let in_row = sa[axis] * inner;
        let out_row = len * inner;
        let da = &self.nodes[a.0].data;
        for o in 0..outer {
            let src = &da[o * in_row + start * inner..o * in_row + (start + len) * inner];
            out[o * out_row..(o + 1) * out_row].copy_from_slice(src);
        }
        let rg = self.nodes[a.0].requires_grad;
        Ok(self.push(shape, out, rg, Op::Slice { a, axis, start }))
    }

    // ── reductions ──────────────────────────────────────────────────────

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let mut acc = E::zero();
        for &x in &self.nodes[a.0].data {
            acc = acc + x;
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("sum_all", vec![], vec![acc], rg, Op::SumAll { a })
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.nodes[a.0].data.len();
        if n == 0 {
            return Err(Error::Contract("mean of empty tensor".into()));
        }
        let mut acc = E::zero();
        for &x in &self.nodes[a.0].data {
            acc = acc + x;
        }
        let mean = acc / E::from_f64(n as f64);
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("mean_all", vec![], vec![mean], rg, Op::MeanAll { a })
    }

    fn lane_dims(&self, a: Var, axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
        let sa = &self.nodes[a.0].shape;
        if axis >= sa.len() {
            return Err(Error::Contract(format!(
                "{op}: axis {axis} out of range for shape {sa:?}"
            )));
        }
        let outer: usize = sa[..axis].iter().product();
        let lane = sa[axis];
        let inner: usize = sa[axis + 1..].iter().product();
        Ok((outer, lane, inner))
    }

    fn reduce_axis(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let name: &'static str = if mean { "mean_axis" } else { "sum_axis" };
        let (outer, lane, inner) = self.lane_dims(a, axis, name)?;
        let sa = self.nodes[a.0].shape.clone();
        let mut shape = sa.clone();
        shape.remove(axis);
        let scale = if mean {
            E::one() / E::from_f64(lane as f64)
        } else {
            E::one()
        };
        let da = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..lane {
                let base = (o * lane + l) * inner;
                let obase = o * inner;
                for i in 0..inner {
                    out[obase + i] = out[obase + i] + da[base + i];
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|v| *v = *v * scale);
        }
        let rg = self.nodes[a.0].requires_grad;
        let op = if mean {
            Op::MeanAxis { a, axis }
        } else {
            Op::SumAxis { a, axis }
        };
        self.push_checked(name, shape, out, rg, op)
    }

    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(a, axis, true)
    }

    // ── elementwise unary ops ───────────────────────────────────────────

    fn unary<F>(&mut self, name: &'static str, a: Var, f: F, op: Op<E>) -> Result<Var>
    where
        F: Fn(E) -> E,
    {
        let data: Vec<E> = self.nodes[a.0].data.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked(name, shape, data, rg, op)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp_v(), Op::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(index) = self.nodes[a.0]
            .data
            .iter()
            .position(|&x| x <= E::zero())
        {
            return Err(Error::Domain {
                op: "ln",
                index,
                detail: format!("log of non-positive value {:?}", self.nodes[a.0].data[index]),
            });
        }
        self.unary("ln", a, |x| x.ln_v(), Op::Ln { a })
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh_v(), Op::Tanh { a })
    }

    /// Numerically stable logistic; output in (0,1) for inputs of
    /// ordinary magnitude.
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid_scalar, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| x.max_v(E::zero()), Op::Relu { a })
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = E::from_f64(slope);
        self.unary(
            "leaky_relu",
            a,
            |x| if x > E::zero() { x } else { s * x },
            Op::LeakyRelu { a, slope: s },
        )
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Result<Var> {
        let pe = E::from_f64(p);
        if p.fract() != 0.0 {
            if let Some(index) = self.nodes[a.0].data.iter().position(|&x| x < E::zero()) {
                return Err(Error::Domain {
                    op: "powf",
                    index,
                    detail: format!("negative base with non-integer exponent {p}"),
                });
            }
        }
        self.unary("powf", a, |x| x.powf_v(pe), Op::Powf { a, p: pe })
    }

    /// Softmax along `axis` with max-subtraction for stability. The shift
    /// cancels exactly in the derivative, so gradients are exact.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (outer, lane, inner) = self.lane_dims(a, axis, "softmax")?;
        let sa = self.nodes[a.0].shape.clone();
        let da = &self.nodes[a.0].data;
        let mut out = vec![E::zero(); da.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * lane + l) * inner + i;
                let mut m = da[idx(0)];
                for l in 1..lane {
                    m = m.max_v(da[idx(l)]);
                }
                let mut sum = E::zero();
                for l in 0..lane {
                    let e = (da[idx(l)] - m).exp_v();
                    out[idx(l)] = e;
                    sum = sum + e;
                }
                for l in 0..lane {
                    out[idx(l)] = out[idx(l)] / sum;
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push_checked("softmax", sa, out, rg, Op::Softmax { a, axis })
    }

    // ── structured ops ──────────────────────────────────────────────────

    /// Batch normalization over axis 0 (and any axes past 1) per channel
    /// (axis 1). Train mode standardizes with batch statistics and returns
    /// `(y, batch_mean, batch_var_unbiased)` so the caller can update
    /// running state; eval mode uses the provided running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[E], &[E])>,
        eps: f64,
    ) -> Result<(Var, Vec<E>, Vec<E>)> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() < 2 {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: sx,
                rhs: vec![],
            });
        }
        let n = sx[0];
        let c = sx[1];
        let spatial: usize = sx[2..].iter().product();
        let m = n * spatial;
        let train = running.is_none();
        // standardizing needs at least two values per channel
        if train && n * spatial < 2 {
            return Err(Error::Contract(
                "batch_norm in train mode requires batch size >= 2".into(),
            ));
        }
        if self.nodes[gamma.0].data.len() != c || self.nodes[beta.0].data.len() != c {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: vec![c],
                rhs: self.nodes[gamma.0].shape.clone(),
            });
        }
        let epse = E::from_f64(eps);
        let dx = &self.nodes[x.0].data;
        let (mean, var_biased, var_unbiased): (Vec<E>, Vec<E>, Vec<E>) = match running {
            Some((rm, rv)) => (rm.to_vec(), rv.to_vec(), rv.to_vec()),
            None => {
                let mut mean = vec![E::zero(); c];
                let mut var = vec![E::zero(); c];
                for ch in 0..c {
                    let mut acc = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ch) * spatial;
                        for s in 0..spatial {
                            acc = acc + dx[base + s];
                        }
                    }
                    let mu = acc / E::from_f64(m as f64);
                    mean[ch] = mu;
                    let mut vacc = E::zero();
                    for ni in 0..n {
                        let base = (ni * c + ch) * spatial;
                        for s in 0..spatial {
                            let d = dx[base + s] - mu;
                            vacc = vacc + d * d;
                        }
                    }
                    var[ch] = vacc / E::from_f64(m as f64);
                }
                let unbiased: Vec<E> = var
                    .iter()
                    .map(|&v| {
                        if m > 1 {
                            v * E::from_f64(m as f64 / (m as f64 - 1.0))
                        } else {
                            v
                        }
                    })
                    .collect();
                (mean, var, unbiased)
            }
        };
        let invstd: Vec<E> = var_biased
            .iter()
            .map(|&v| E::one() / (v + epse).sqrt_v())
            .collect();
        let dgamma = &self.nodes[gamma.0].data;
        let dbeta = &self.nodes[beta.0].data;
        let mut out = vec![E::zero(); dx.len()];
        for ni in 0..n {
            for ch in 0..c {
                let base = (ni * c + ch) * spatial;
                let (mu, is, g, b) = (mean[ch], invstd[ch], dgamma[ch], dbeta[ch]);
                for s in 0..spatial {
                    out[base + s] = g * (dx[base + s] - mu) * is + b;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad
            || self.nodes[gamma.0].requires_grad
            || self.nodes[beta.0].requires_grad;
        let v = self.push_checked(
            "batch_norm",
            sx,
            out,
            rg,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode: if train { BnMode::Train } else { BnMode::Eval },
                mean: mean.clone(),
                invstd,
            },
        )?;
        Ok((v, mean, var_unbiased))
    }

    /// 3D cross-correlation. `x` is [N, C_in, T, H, W], `kernel` is
    /// [C_out, C_in, kt, kh, kw]; output extents are
    /// floor((d + 2p - k)/s) + 1 per spatiotemporal axis.
    pub fn conv3d(
        &mut self,
        x: Var,
        kernel: Var,
        stride: [usize; 3],
        pad: [usize; 3],
        imp: Conv3dImpl,
    ) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        let sk = self.nodes[kernel.0].shape.clone();
        if sx.len() != 5 || sk.len() != 5 || sx[1] != sk[1] {
            return Err(Error::Shape {
                op: "conv3d",
                lhs: sx,
                rhs: sk,
            });
        }
        if stride.contains(&0) {
            return Err(Error::Contract("conv3d: zero stride".into()));
        }
        let in_dims = [sx[2], sx[3], sx[4]];
        let k_dims = [sk[2], sk[3], sk[4]];
        let mut out_dims = [0usize; 3];
        for a in 0..3 {
            let padded = in_dims[a] + 2 * pad[a];
            if k_dims[a] > padded || k_dims[a] == 0 {
                return Err(Error::Contract(format!(
                    "conv3d: kernel extent {} exceeds padded input {} on axis {}",
                    k_dims[a], padded, a
                )));
            }
            out_dims[a] = (padded - k_dims[a]) / stride[a] + 1;
        }
        let conf = Conv3dConf {
            n: sx[0],
            c_in: sx[1],
            c_out: sk[0],
            in_dims,
            k_dims,
            stride,
            pad,
            out_dims,
        };
        let dx = &self.nodes[x.0].data;
        let dk = &self.nodes[kernel.0].data;
        let out = match imp {
            Conv3dImpl::Direct => conv3d_direct(dx, dk, &conf),
            Conv3dImpl::Im2col => conv3d_im2col(dx, dk, &conf),
        };
        let shape = vec![conf.n, conf.c_out, out_dims[0], out_dims[1], out_dims[2]];
        let rg = self.nodes[x.0].requires_grad || self.nodes[kernel.0].requires_grad;
        self.push_checked("conv3d", shape, out, rg, Op::Conv3d { x, kernel, conf, imp })
    }

    /// Adaptive average pooling over the trailing three axes. Bin i on an
    /// axis of extent D with output extent O covers
    /// [floor(i*D/O), ceil((i+1)*D/O)).
    pub fn adaptive_avg_pool3d(&mut self, x: Var, out_dims: [usize; 3]) -> Result<Var> {
        let sx = self.nodes[x.0].shape.clone();
        if sx.len() < 3 {
            return Err(Error::Shape {
                op: "adaptive_avg_pool3d",
                lhs: sx,
                rhs: out_dims.to_vec(),
            });
        }
        let in_dims = [sx[sx.len() - 3], sx[sx.len() - 2], sx[sx.len() - 1]];
        for a in 0..3 {
            if out_dims[a] == 0 {
                return Err(Error::Contract(
                    "adaptive_avg_pool3d: zero output extent".into(),
                ));
            }
            if out_dims[a] > in_dims[a] {
                return Err(Error::Contract(format!(
                    "adaptive_avg_pool3d: output extent {} exceeds input {} on axis {}",
                    out_dims[a], in_dims[a], a
                )));
            }
        }
        let lead: usize = sx[..sx.len() - 3].iter().product();
        let in_vol = in_dims[0] * in_dims[1] * in_dims[2];
        let out_vol = out_dims[0] * out_dims[1] * out_dims[2];
        let dx = &self.nodes[x.0].data;
        let mut out = vec![E::zero(); lead * out_vol];
        for l in 0..lead {
            let src = &dx[l * in_vol..(l + 1) * in_vol];
            let dst = &mut out[l * out_vol..(l + 1) * out_vol];
            for ot in 0..out_dims[0] {
                let (t0, t1) = pool_bin(ot, in_dims[0], out_dims[0]);
                for oh in 0..out_dims[1] {
                    let (h0, h1) = pool_bin(oh, in_dims[1], out_dims[1]);
                    for ow in 0..out_dims[2] {
                        let (w0, w1) = pool_bin(ow, in_dims[2], out_dims[2]);
                        let mut acc = E::zero();
                        for t in t0..t1 {
                            for h in h0..h1 {
                                let base = (t * in_dims[1] + h) * in_dims[2];
                                for w in w0..w1 {
                                    acc = acc + src[base + w];
                                }
                            }
                        }
                        let count = ((t1 - t0) * (h1 - h0) * (w1 - w0)) as f64;
                        dst[(ot * out_dims[1] + oh) * out_dims[2] + ow] =
                            acc / E::from_f64(count);
                    }
                }
            }
        }
        let mut shape = sx[..sx.len() - 3].to_vec();
        shape.extend_from_slice(&out_dims);
        let rg = self.nodes[x.0].requires_grad;
        self.push_checked(
            "adaptive_avg_pool3d",
            shape,
            out,
            rg,
            Op::AdaptiveAvgPool3d {
                x,
                lead,
                in_dims,
                out_dims,
            },
        )
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Fills adjoints for every node that
    /// requires gradients; leaf gradients are then read via [`Tape::grad`].
    /// A tape runs backward at most once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.ran_backward {
            return Err(Error::Contract(
                "backward already ran on this tape; build a fresh tape per step".into(),
            ));
        }
        if self.nodes[loss.0].data.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        self.ran_backward = true;
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        self.adjoints[loss.0] = Some(vec![E::one()]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(adj) = self.adjoints[id].take() else {
                continue;
            };
            self.backprop_node(id, &adj)?;
            self.adjoints[id] = Some(adj);
        }
        Ok(())
    }

    /// Adjoint of a node after [`Tape::backward`]; `None` if no gradient
    /// flowed to it.
    pub fn grad(&self, v: Var) -> Option<&[E]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    fn accumulate(&mut self, v: Var, delta: &[E]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let adj = self.adjoints[v.0]
            .get_or_insert_with(|| vec![E::zero(); self.nodes[v.0].data.len()]);
        for (a, d) in adj.iter_mut().zip(delta) {
            *a = *a + *d;
        }
    }

    /// Adds `f(i)` into the adjoint of `v` at each index, tiling over the
    /// broadcast factor when `v` was the smaller operand.
    fn accumulate_with<F>(&mut self, v: Var, n_out: usize, f: F)
    where
        F: Fn(usize) -> E,
    {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let nv = self.nodes[v.0].data.len();
        let adj = self.adjoints[v.0].get_or_insert_with(|| vec![E::zero(); nv]);
        if nv == n_out {
            for (i, a) in adj.iter_mut().enumerate() {
                *a = *a + f(i);
            }
        } else {
            for i in 0..n_out {
                adj[i % nv] = adj[i % nv] + f(i);
            }
        }
    }

    fn backprop_node(&mut self, id: usize, adj: &[E]) -> Result<()> {
        // Ops are taken apart by value to appease the borrow checker; the
        // node vector itself is only mutated through `accumulate*`.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf | Op::Const => {}
            Op::Add { a, b } => {
                let n = adj.len();
                self.accumulate_with(*a, n, |i| adj[i]);
                self.accumulate_with(*b, n, |i| adj[i]);
            }
            Op::Sub { a, b } => {
                let n = adj.len();
                self.accumulate_with(*a, n, |i| adj[i]);
                self.accumulate_with(*b, n, |i| -adj[i]);
            }
            Op::Mul { a, b } => {
                let n = adj.len();
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                let (na, nb) = (da.len(), db.len());
                self.accumulate_with(*a, n, |i| adj[i] * db[i % nb]);
                self.accumulate_with(*b, n, |i| adj[i] * da[i % na]);
            }
            Op::Div { a, b } => {
                let n = adj.len();
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                let (na, nb) = (da.len(), db.len());
                self.accumulate_with(*a, n, |i| adj[i] / db[i % nb]);
                self.accumulate_with(*b, n, |i| {
                    let bv = db[i % nb];
                    -adj[i] * da[i % na] / (bv * bv)
                });
            }
            Op::Neg { a } => {
                let n = adj.len();
                self.accumulate_with(*a, n, |i| -adj[i]);
            }
            Op::MatMul { a, b, m, k, n } => {
                let da = self.nodes[a.0].data.clone();
                let db = self.nodes[b.0].data.clone();
                if self.nodes[a.0].requires_grad {
                    // dA = dC @ B^T
                    let mut ga = vec![E::zero(); m * k];
                    for i in 0..*m {
                        for j in 0..*n {
                            let g = adj[i * n + j];
                            let brow = j;
                            for p in 0..*k {
                                ga[i * k + p] = ga[i * k + p] + g * db[p * n + brow];
                            }
                        }
                    }
                    self.accumulate(*a, &ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = A^T @ dC
                    let mut gb = vec![E::zero(); k * n];
                    for i in 0..*m {
                        for p in 0..*k {
                            let av = da[i * k + p];
                            let grow = &adj[i * n..(i + 1) * n];
                            let gbrow = &mut gb[p * n..(p + 1) * n];
                            for j in 0..*n {
                                gbrow[j] = gbrow[j] + av * grow[j];
                            }
                        }
                    }
                    self.accumulate(*b, &gb);
                }
            }
            Op::Transpose2d { a, rows, cols } => {
                let mut ga = vec![E::zero(); rows * cols];
                for i in 0..*rows {
                    for j in 0..*cols {
                        ga[i * cols + j] = adj[j * rows + i];
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Reshape { a } => {
                self.accumulate(*a, adj);
            }
            Op::Concat { parts, axis } => {
                let shape = self.nodes[id].shape.clone();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0usize;
                for &p in parts {
                    let pa = self.nodes[p.0].shape[*axis];
                    let chunk = pa * inner;
                    if self.nodes[p.0].requires_grad {
                        let mut gp = vec![E::zero(); outer * chunk];
                        for o in 0..outer {
                            gp[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&adj[o * row + offset..o * row + offset + chunk]);
                        }
                        self.accumulate(p, &gp);
                    }
                    offset += chunk;
                }
            }
            Op::Slice { a, axis, start } => {
                let sa = self.nodes[a.0].shape.clone();
                let shape = self.nodes[id].shape.clone();
                let outer: usize = sa[..*axis].iter().product();
                let inner: usize = sa[*axis + 1..].iter().product();
                let in_row = sa[*axis] * inner;
                let out_row = shape[*axis] * inner;
                let mut ga = vec![E::zero(); self.nodes[a.0].data.len()];
                for o in 0..outer {
                    ga[o * in_row + start * inner..o * in_row + start * inner + out_row]
                        .copy_from_slice(&adj[o * out_row..(o + 1) * out_row]);
                }
                self.accumulate(*a, &ga);
            }
            Op::SumAll { a } => {
                let g = adj[0];
                let n = self.nodes[a.0].data.len();
                self.accumulate_with(*a, n, |_| g);
            }
            Op::MeanAll { a } => {
                let n = self.nodes[a.0].data.len();
                let g = adj[0] / E::from_f64(n as f64);
                self.accumulate_with(*a, n, |_| g);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let mean = matches!(&op, Op::MeanAxis { .. });
                let sa = self.nodes[a.0].shape.clone();
                let outer: usize = sa[..*axis].iter().product();
                let lane = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let scale = if mean {
                    E::one() / E::from_f64(lane as f64)
                } else {
                    E::one()
                };
                let mut ga = vec![E::zero(); self.nodes[a.0].data.len()];
                for o in 0..outer {
                    for l in 0..lane {
                        let base = (o * lane + l) * inner;
                        let obase = o * inner;
                        for i in 0..inner {
                            ga[base + i] = adj[obase + i] * scale;
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::Exp { a } => {
                let y = self.nodes[id].data.clone();
                let n = y.len();
                self.accumulate_with(*a, n, |i| adj[i] * y[i]);
            }
            Op::Ln { a } => {
                let x = self.nodes[a.0].data.clone();
                let n = x.len();
                self.accumulate_with(*a, n, |i| adj[i] / x[i]);
            }
            Op::Tanh { a } => {
                let y = self.nodes[id].data.clone();
                let n = y.len();
                self.accumulate_with(*a, n, |i| adj[i] * (E::one() - y[i] * y[i]));
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[id].data.clone();
                let n = y.len();
                self.accumulate_with(*a, n, |i| adj[i] * y[i] * (E::one() - y[i]));
            }
            Op::Relu { a } => {
                let x = self.nodes[a.0].data.clone();
                let n = x.len();
                self.accumulate_with(*a, n, |i| {
                    if x[i] > E::zero() {
                        adj[i]
                    } else {
                        E::zero()
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let x = self.nodes[a.0].data.clone();
                let s = *slope;
                let n = x.len();
                self.accumulate_with(*a, n, |i| {
                    if x[i] > E::zero() {
                        adj[i]
                    } else {
                        adj[i] * s
                    }
                });
            }
            Op::Powf { a, p } => {
                let x = self.nodes[a.0].data.clone();
                let p = *p;
                let n = x.len();
                self.accumulate_with(*a, n, |i| adj[i] * p * x[i].powf_v(p - E::one()));
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[id].data.clone();
                let sa = self.nodes[a.0].shape.clone();
                let outer: usize = sa[..*axis].iter().product();
                let lane = sa[*axis];
                let inner: usize = sa[*axis + 1..].iter().product();
                let mut ga = vec![E::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * lane + l) * inner + i;
                        let mut dot = E::zero();
                        for l in 0..lane {
                            dot = dot + y[idx(l)] * adj[idx(l)];
                        }
                        for l in 0..lane {
                            ga[idx(l)] = y[idx(l)] * (adj[idx(l)] - dot);
                        }
                    }
                }
                self.accumulate(*a, &ga);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mode,
                mean,
                invstd,
            } => {
                let sx = self.nodes[x.0].shape.clone();
                let n = sx[0];
                let c = sx[1];
                let spatial: usize = sx[2..].iter().product();
                let m = (n * spatial) as f64;
                let dx_in = self.nodes[x.0].data.clone();
                let g = self.nodes[gamma.0].data.clone();
                let mut dgamma = vec![E::zero(); c];
                let mut dbeta = vec![E::zero(); c];
                let mut sum_dy = vec![E::zero(); c];
                let mut sum_dy_xhat = vec![E::zero(); c];
                for ni in 0..n {
                    for ch in 0..c {
                        let base = (ni * c + ch) * spatial;
                        for s in 0..spatial {
                            let dy = adj[base + s];
                            let xhat = (dx_in[base + s] - mean[ch]) * invstd[ch];
                            dbeta[ch] = dbeta[ch] + dy;
                            dgamma[ch] = dgamma[ch] + dy * xhat;
                            sum_dy[ch] = sum_dy[ch] + dy;
                            sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy * xhat;
                        }
                    }
                }
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![E::zero(); dx_in.len()];
                    match mode {
                        BnMode::Eval => {
                            for ni in 0..n {
                                for ch in 0..c {
                                    let base = (ni * c + ch) * spatial;
                                    let scale = g[ch] * invstd[ch];
                                    for s in 0..spatial {
                                        gx[base + s] = adj[base + s] * scale;
                                    }
                                }
                            }
                        }
                        BnMode::Train => {
                            let me = E::from_f64(m);
                            for ni in 0..n {
                                for ch in 0..c {
                                    let base = (ni * c + ch) * spatial;
                                    let scale = g[ch] * invstd[ch] / me;
                                    for s in 0..spatial {
                                        let dy = adj[base + s];
                                        let xhat =
                                            (dx_in[base + s] - mean[ch]) * invstd[ch];
                                        gx[base + s] = scale
                                            * (me * dy
                                                - sum_dy[ch]
                                                - xhat * sum_dy_xhat[ch]);
                                    }
                                }
                            }
                        }
                    }
                    self.accumulate(*x, &gx);
                }
                self.accumulate(*gamma, &dgamma);
                self.accumulate(*beta, &dbeta);
            }
            Op::Conv3d { x, kernel, conf, imp } => {
                let dx_in = self.nodes[x.0].data.clone();
                let dk_in = self.nodes[kernel.0].data.clone();
                match imp {
                    Conv3dImpl::Direct => {
                        if self.nodes[x.0].requires_grad {
                            let gx = conv3d_backward_input(adj, &dk_in, conf);
                            self.accumulate(*x, &gx);
                        }
                        if self.nodes[kernel.0].requires_grad {
                            let gk = conv3d_backward_kernel(adj, &dx_in, conf);
                            self.accumulate(*kernel, &gk);
                        }
                    }
                    Conv3dImpl::Im2col => {
                        let need_x = self.nodes[x.0].requires_grad;
                        let need_k = self.nodes[kernel.0].requires_grad;
                        let (gx, gk) =
                            conv3d_backward_im2col(adj, &dx_in, &dk_in, conf, need_x, need_k);
                        if need_x {
                            self.accumulate(*x, &gx);
                        }
                        if need_k {
                            self.accumulate(*kernel, &gk);
                        }
                    }
                }
            }
            Op::AdaptiveAvgPool3d {
                x,
                lead,
                in_dims,
                out_dims,
            } => {
                let in_vol = in_dims[0] * in_dims[1] * in_dims[2];
                let out_vol = out_dims[0] * out_dims[1] * out_dims[2];
                let mut gx = vec![E::zero(); lead * in_vol];
                for l in 0..*lead {
                    for ot in 0..out_dims[0] {
                        let (t0, t1) = pool_bin(ot, in_dims[0], out_dims[0]);
                        for oh in 0..out_dims[1] {
                            let (h0, h1) = pool_bin(oh, in_dims[1], out_dims[1]);
                            for ow in 0..out_dims[2] {
                                let (w0, w1) = pool_bin(ow, in_dims[2], out_dims[2]);
                                let count = ((t1 - t0) * (h1 - h0) * (w1 - w0)) as f64;
                                let g = adj[l * out_vol
                                    + (ot * out_dims[1] + oh) * out_dims[2]
                                    + ow]
                                    / E::from_f64(count);
                                for t in t0..t1 {
                                    for h in h0..h1 {
                                        let base =
                                            l * in_vol + (t * in_dims[1] + h) * in_dims[2];
                                        for w in w0..w1 {
                                            gx[base + w] = gx[base + w] + g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                self.accumulate(*x, &gx);
            }
        }
        self.nodes[id].op = op;
        Ok(())
    }
}

fn sigmoid_scalar<E: Element>(x: E) -> E {
    if x >= E::zero() {
        E::one() / (E::one() + (-x).exp_v())
    } else {
        let e = x.exp_v();
        e / (E::one() + e)
    }
}

/// Plain ikj matrix multiply on row-major slices: [m,k] @ [k,n] -> [m,n].
pub(crate) fn matmul_raw<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] = orow[j] + av * brow[j];
            }
        }
    }
    out
}

fn pool_bin(i: usize, in_dim: usize, out_dim: usize) -> (usize, usize) {
    let start = i * in_dim / out_dim;
    let end = ((i + 1) * in_dim).div_ceil(out_dim);
    (start, end)
}

fn conv3d_direct<E: Element>(x: &[E], k: &[E], conf: &Conv3dConf) -> Vec<E> {
    let [it_d, ih_d, iw_d] = conf.in_dims;
    let [kt_d, kh_d, kw_d] = conf.k_dims;
    let [st, sh, sw] = conf.stride;
    let [pt, ph, pw] = conf.pad;
    let [ot_d, oh_d, ow_d] = conf.out_dims;
    let in_vol = it_d * ih_d * iw_d;
    let out_vol = ot_d * oh_d * ow_d;
    let k_vol = kt_d * kh_d * kw_d;
    let mut out = vec![E::zero(); conf.n * conf.c_out * out_vol];
    for ni in 0..conf.n {
        for co in 0..conf.c_out {
            let obase = (ni * conf.c_out + co) * out_vol;
            for ci in 0..conf.c_in {
                let xbase = (ni * conf.c_in + ci) * in_vol;
                let kbase = (co * conf.c_in + ci) * k_vol;
                for kt in 0..kt_d {
                    for kh in 0..kh_d {
                        for kw in 0..kw_d {
                            let wgt = k[kbase + (kt * kh_d + kh) * kw_d + kw];
                            for ot in 0..ot_d {
                                let it = (ot * st + kt) as isize - pt as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                for oh in 0..oh_d {
                                    let ih = (oh * sh + kh) as isize - ph as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    let xrow =
                                        xbase + (it as usize * ih_d + ih as usize) * iw_d;
                                    let orow = obase + (ot * oh_d + oh) * ow_d;
                                    // valid ow range: 0 <= ow*sw + kw - pw < iw_d
                                    let lo = pw.saturating_sub(kw).div_ceil(sw).min(ow_d);
                                    let hi = if iw_d + pw > kw {
                                        ((iw_d + pw - kw - 1) / sw + 1).min(ow_d)
                                    } else {
                                        0
                                    };
                                    for ow in lo..hi {
                                        let iw = ow * sw + kw - pw;
                                        out[orow + ow] =
                                            out[orow + ow] + wgt * x[xrow + iw];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// C[m,n] = A[m,k] @ B[n,k]^T via contiguous row dot products.
pub(crate) fn matmul_nt<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::zero(); m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for p in 0..k {
                acc = acc + arow[p] * brow[p];
            }
            *o = acc;
        }
    }
    out
}

/// Gathers one sample's receptive-field columns:
/// cols[c_in*k_vol, out_vol], zero-padded at the borders.
fn im2col_gather<E: Element>(x_sample: &[E], conf: &Conv3dConf, cols: &mut [E]) {
    let [it_d, ih_d, iw_d] = conf.in_dims;
    let [kt_d, kh_d, kw_d] = conf.k_dims;
    let [st, sh, sw] = conf.stride;
    let [pt, ph, pw] = conf.pad;
    let [ot_d, oh_d, ow_d] = conf.out_dims;
    let in_vol = it_d * ih_d * iw_d;
    let out_vol = ot_d * oh_d * ow_d;
    let k_vol = kt_d * kh_d * kw_d;
    cols.iter_mut().for_each(|v| *v = E::zero());
    for ci in 0..conf.c_in {
        let xbase = ci * in_vol;
        for kt in 0..kt_d {
            for kh in 0..kh_d {
                for kw in 0..kw_d {
                    let row = ci * k_vol + (kt * kh_d + kh) * kw_d + kw;
                    let crow = &mut cols[row * out_vol..(row + 1) * out_vol];
                    for ot in 0..ot_d {
                        let it = (ot * st + kt) as isize - pt as isize;
                        if it < 0 || it as usize >= it_d {
                            continue;
                        }
                        for oh in 0..oh_d {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            if ih < 0 || ih as usize >= ih_d {
                                continue;
                            }
                            let xrow = xbase + (it as usize * ih_d + ih as usize) * iw_d;
                            let obase = (ot * oh_d + oh) * ow_d;
                            for ow in 0..ow_d {
                                let iw = (ow * sw + kw) as isize - pw as isize;
                                if iw < 0 || iw as usize >= iw_d {
                                    continue;
                                }
                                crow[obase + ow] = x_sample[xrow + iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of column gradients back into input layout (inverse of
/// `im2col_gather` with accumulation at overlapping positions).
fn col2im_scatter<E: Element>(g_cols: &[E], conf: &Conv3dConf, gx_sample: &mut [E]) {
    let [it_d, ih_d, iw_d] = conf.in_dims;
    let [kt_d, kh_d, kw_d] = conf.k_dims;
    let [st, sh, sw] = conf.stride;
    let [pt, ph, pw] = conf.pad;
    let [ot_d, oh_d, ow_d] = conf.out_dims;
    let in_vol = it_d * ih_d * iw_d;
    let out_vol = ot_d * oh_d * ow_d;
    let k_vol = kt_d * kh_d * kw_d;
    for ci in 0..conf.c_in {
        let xbase = ci * in_vol;
        for kt in 0..kt_d {
            for kh in 0..kh_d {
                for kw in 0..kw_d {
                    let row = ci * k_vol + (kt * kh_d + kh) * kw_d + kw;
                    let crow = &g_cols[row * out_vol..(row + 1) * out_vol];
                    for ot in 0..ot_d {
                        let it = (ot * st + kt) as isize - pt as isize;
                        if it < 0 || it as usize >= it_d {
                            continue;
                        }
                        for oh in 0..oh_d {
                            let ih = (oh * sh + kh) as isize - ph as isize;
                            if ih < 0 || ih as usize >= ih_d {
                                continue;
                            }
                            let xrow = xbase + (it as usize * ih_d + ih as usize) * iw_d;
                            let obase = (ot * oh_d + oh) * ow_d;
                            for ow in 0..ow_d {
                                let iw = (ow * sw + kw) as isize - pw as isize;
                                if iw < 0 || iw as usize >= iw_d {
                                    continue;
                                }
                                gx_sample[xrow + iw as usize] =
                                    gx_sample[xrow + iw as usize] + crow[obase + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Column-matrix formulation: per sample, cols[c_in*k_vol, out_vol] is
/// gathered once and hit with the flattened kernel matrix.
fn conv3d_im2col<E: Element>(x: &[E], k: &[E], conf: &Conv3dConf) -> Vec<E> {
    let in_vol = conf.in_dims.iter().product::<usize>();
    let out_vol = conf.out_dims.iter().product::<usize>();
    let k_vol = conf.k_dims.iter().product::<usize>();
    let rows = conf.c_in * k_vol;
    let mut out = vec![E::zero(); conf.n * conf.c_out * out_vol];
    let mut cols = vec![E::zero(); rows * out_vol];
    for ni in 0..conf.n {
        let xs = &x[ni * conf.c_in * in_vol..(ni + 1) * conf.c_in * in_vol];
        im2col_gather(xs, conf, &mut cols);
        let prod = matmul_raw(k, &cols, conf.c_out, rows, out_vol);
        out[ni * conf.c_out * out_vol..(ni + 1) * conf.c_out * out_vol].copy_from_slice(&prod);
    }
    out
}

/// Matmul-formulated backward for the im2col path:
/// dK = dOut @ cols^T, dX = col2im(K^T @ dOut).
fn conv3d_backward_im2col<E: Element>(
    dout: &[E],
    x: &[E],
    k: &[E],
    conf: &Conv3dConf,
    need_x: bool,
    need_k: bool,
) -> (Vec<E>, Vec<E>) {
    let in_vol = conf.in_dims.iter().product::<usize>();
    let out_vol = conf.out_dims.iter().product::<usize>();
    let k_vol = conf.k_dims.iter().product::<usize>();
    let rows = conf.c_in * k_vol;
    let mut gx = vec![E::zero(); if need_x { conf.n * conf.c_in * in_vol } else { 0 }];
    let mut gk = vec![E::zero(); if need_k { conf.c_out * rows } else { 0 }];
    let mut cols = vec![E::zero(); rows * out_vol];
    // K^T as [rows, c_out], built once
    let kt: Vec<E> = if need_x {
        let mut kt = vec![E::zero(); rows * conf.c_out];
        for co in 0..conf.c_out {
            for r in 0..rows {
                kt[r * conf.c_out + co] = k[co * rows + r];
            }
        }
        kt
    } else {
        Vec::new()
    };
    for ni in 0..conf.n {
        let dout_n = &dout[ni * conf.c_out * out_vol..(ni + 1) * conf.c_out * out_vol];
        if need_k {
            let xs = &x[ni * conf.c_in * in_vol..(ni + 1) * conf.c_in * in_vol];
            im2col_gather(xs, conf, &mut cols);
            let gk_n = matmul_nt(dout_n, &cols, conf.c_out, out_vol, rows);
            for (g, d) in gk.iter_mut().zip(&gk_n) {
                *g = *g + *d;
            }
        }
        if need_x {
            let g_cols = matmul_raw(&kt, dout_n, rows, conf.c_out, out_vol);
            let gx_n = &mut gx[ni * conf.c_in * in_vol..(ni + 1) * conf.c_in * in_vol];
            col2im_scatter(&g_cols, conf, gx_n);
        }
    }
    (gx, gk)
}

fn conv3d_backward_input<E: Element>(dout: &[E], k: &[E], conf: &Conv3dConf) -> Vec<E> {
    let [it_d, ih_d, iw_d] = conf.in_dims;
    let [kt_d, kh_d, kw_d] = conf.k_dims;
    let [st, sh, sw] = conf.stride;
    let [pt, ph, pw] = conf.pad;
    let [ot_d, oh_d, ow_d] = conf.out_dims;
    let in_vol = it_d * ih_d * iw_d;
    let out_vol = ot_d * oh_d * ow_d;
    let k_vol = kt_d * kh_d * kw_d;
    let mut gx = vec![E::zero(); conf.n * conf.c_in * in_vol];
    for ni in 0..conf.n {
        for co in 0..conf.c_out {
            let obase = (ni * conf.c_out + co) * out_vol;
            for ci in 0..conf.c_in {
                let xbase = (ni * conf.c_in + ci) * in_vol;
                let kbase = (co * conf.c_in + ci) * k_vol;
                for kt in 0..kt_d {
                    for kh in 0..kh_d {
                        for kw in 0..kw_d {
                            let wgt = k[kbase + (kt * kh_d + kh) * kw_d + kw];
                            for ot in 0..ot_d {
                                let it = (ot * st + kt) as isize - pt as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                for oh in 0..oh_d {
                                    let ih = (oh * sh + kh) as isize - ph as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    let xrow =
                                        xbase + (it as usize * ih_d + ih as usize) * iw_d;
                                    let orow = obase + (ot * oh_d + oh) * ow_d;
                                    let lo = pw.saturating_sub(kw).div_ceil(sw).min(ow_d);
                                    let hi = if iw_d + pw > kw {
                                        ((iw_d + pw - kw - 1) / sw + 1).min(ow_d)
                                    } else {
                                        0
                                    };
                                    for ow in lo..hi {
                                        let iw = ow * sw + kw - pw;
                                        gx[xrow + iw] =
                                            gx[xrow + iw] + wgt * dout[orow + ow];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

fn conv3d_backward_kernel<E: Element>(dout: &[E], x: &[E], conf: &Conv3dConf) -> Vec<E> {
    let [it_d, ih_d, iw_d] = conf.in_dims;
    let [kt_d, kh_d, kw_d] = conf.k_dims;
    let [st, sh, sw] = conf.stride;
    let [pt, ph, pw] = conf.pad;
    let [ot_d, oh_d, ow_d] = conf.out_dims;
    let in_vol = it_d * ih_d * iw_d;
    let out_vol = ot_d * oh_d * ow_d;
    let k_vol = kt_d * kh_d * kw_d;
    let mut gk = vec![E::zero(); conf.c_out * conf.c_in * k_vol];
    for ni in 0..conf.n {
        for co in 0..conf.c_out {
            let obase = (ni * conf.c_out + co) * out_vol;
            for ci in 0..conf.c_in {
                let xbase = (ni * conf.c_in + ci) * in_vol;
                let kbase = (co * conf.c_in + ci) * k_vol;
                for kt in 0..kt_d {
                    for kh in 0..kh_d {
                        for kw in 0..kw_d {
                            let mut acc = E::zero();
                            for ot in 0..ot_d {
                                let it = (ot * st + kt) as isize - pt as isize;
                                if it < 0 || it as usize >= it_d {
                                    continue;
                                }
                                for oh in 0..oh_d {
                                    let ih = (oh * sh + kh) as isize - ph as isize;
                                    if ih < 0 || ih as usize >= ih_d {
                                        continue;
                                    }
                                    let xrow =
                                        xbase + (it as usize * ih_d + ih as usize) * iw_d;
                                    let orow = obase + (ot * oh_d + oh) * ow_d;
                                    let lo = pw.saturating_sub(kw).div_ceil(sw).min(ow_d);
                                    let hi = if iw_d + pw > kw {
                                        ((iw_d + pw - kw - 1) / sw + 1).min(ow_d)
                                    } else {
                                        0
                                    };
                                    for ow in lo..hi {
                                        let iw = ow * sw + kw - pw;
                                        acc = acc + x[xrow + iw] * dout[orow + ow];
                                    }
                                }
                            }
                            let ki = kbase + (kt * kh_d + kh) * kw_d + kw;
                            gk[ki] = gk[ki] + acc;
                        }
                    }
                }
            }
        }
    }
    gk
}
