use super::kernels::{broadcast_shape, gemm, reduce_into, IndexMap, MatView};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { name: Option<String> },
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Exp(usize),
    Log(usize),
    Neg(usize),
    MaxConst(usize, f64),
    Relu(usize),
    Softmax(usize),
    Sum { a: usize, keep_shape: Vec<usize> },
    Mean { a: usize, keep_shape: Vec<usize> },
    Concat(Vec<usize>),
    Reshape(usize),
    Broadcast(usize),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf { .. } => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Neg(_) => "neg",
            Op::MaxConst(..) => "max_const",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::Broadcast(_) => "broadcast",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Record of primitive operations in topological (insertion) order.
///
/// Operations evaluate eagerly as they are added. Named inputs can be rebound
/// with [`Graph::evaluate`], which recomputes every derived node in order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    stale: bool,
}

/// Geometry of a (possibly batched, possibly transposed) matrix product.
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    a_cols: usize,
    b_cols: usize,
}

impl MatMulDims {
    fn new(a: &[usize], b: &[usize], ta: bool, tb: bool) -> Option<Self> {
        if !(2..=3).contains(&a.len()) || !(2..=3).contains(&b.len()) {
            return None;
        }
        let (ar, ac) = (a[a.len() - 2], a[a.len() - 1]);
        let (br, bc) = (b[b.len() - 2], b[b.len() - 1]);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return None;
        }
        let a_batched = a.len() == 3;
        let b_batched = b.len() == 3;
        let batch = match (a_batched, b_batched) {
            (true, true) if a[0] == b[0] => a[0],
            (true, true) => return None,
            (true, false) => a[0],
            (false, true) => b[0],
            (false, false) => 1,
        };
        Some(Self {
            batch,
            m,
            k,
            n,
            a_batched,
            b_batched,
            a_cols: ac,
            b_cols: bc,
        })
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.a_batched || self.b_batched {
            vec![self.batch, self.m, self.n]
        } else {
            vec![self.m, self.n]
        }
    }
}

fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

fn finite(out: Vec<f64>, op: &Op) -> Result<Vec<f64>> {
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite { op: op.name() });
    }
    Ok(out)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    /// Named input leaf; gradients are tracked when `t.requires_grad()`.
    pub fn input(&mut self, name: &str, t: Tensor) -> Var {
        self.push(
            Op::Leaf {
                name: Some(name.to_string()),
            },
            t,
        )
    }

    /// Unnamed leaf that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf { name: None }, t.with_grad(false))
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Tensor::scalar(x))
    }

    /// Detached copy of `v`'s current value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = Tensor {
            shape: self.nodes[v.0].value.shape.clone(),
            values: self.nodes[v.0].value.values.clone(),
            grad: None,
            requires_grad: false,
        };
        self.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.node(v).value.values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.node(v).value.grad.as_deref()
    }

    pub fn find_input(&self, name: &str) -> Option<Var> {
        self.nodes.iter().position(|n| matches!(&n.op, Op::Leaf { name: Some(x) } if x == name)).map(Var)
    }

    fn add_op(&mut self, op: Op, shape: Vec<usize>) -> Result<Var> {
        let requires_grad = self.op_inputs(&op).iter().any(|&i| self.nodes[i].value.requires_grad);
        let values = self.compute(&op, &shape)?;
        let value = Tensor {
            shape,
            values,
            grad: None,
            requires_grad,
        };
        Ok(self.push(op, value))
    }

    fn op_inputs(&self, op: &Op) -> Vec<usize> {
        match op {
            Op::Leaf { .. } => vec![],
            Op::MatMul { a, b, .. } | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Exp(a)
            | Op::Log(a)
            | Op::Neg(a)
            | Op::MaxConst(a, _)
            | Op::Relu(a)
            | Op::Softmax(a)
            | Op::Reshape(a)
            | Op::Broadcast(a) => vec![*a],
            Op::Sum { a, .. } | Op::Mean { a, .. } => vec![*a],
            Op::Concat(xs) => xs.clone(),
        }
    }

    // ---- primitives ----

    /// Matrix product over the last two axes. Rank-3 operands are batched;
    /// a rank-2 operand is shared across the batch. `ta`/`tb` transpose.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let dims = MatMulDims::new(self.shape(a), self.shape(b), ta, tb).ok_or_else(|| Error::Shape {
            op: "matmul",
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        })?;
        self.add_op(
            Op::MatMul {
                a: a.0,
                b: b.0,
                ta,
                tb,
            },
            dims.out_shape(),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op) -> Result<Var> {
        let shape = broadcast_shape(self.shape(a), self.shape(b)).ok_or_else(|| Error::Shape {
            op: op.name(),
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        })?;
        self.add_op(op, shape)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a.0, b.0))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.add_op(Op::Exp(a.0), s)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.add_op(Op::Log(a.0), s)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.add_op(Op::Neg(a.0), s)
    }

    /// `max(a, c)`; the subgradient at `a == c` is zero.
    pub fn max_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.add_op(Op::MaxConst(a.0, c), s)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.add_op(Op::Relu(a.0), s)
    }

    /// Softmax over the last axis (max-subtracted).
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        self.add_op(Op::Softmax(a.0), s)
    }

    fn reduced_shape(&self, a: Var, axes: &[usize], op: &'static str) -> Result<(Vec<usize>, Vec<usize>)> {
        let shape = self.shape(a);
        let mut keep = shape.to_vec();
        for &ax in axes {
            if ax >= shape.len() {
                return Err(Error::Shape {
                    op,
                    lhs: shape.to_vec(),
                    rhs: axes.to_vec(),
                });
            }
            keep[ax] = 1;
        }
        let squeezed: Vec<usize> = keep
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let squeezed = if squeezed.is_empty() { vec![1] } else { squeezed };
        Ok((keep, squeezed))
    }

    /// Sum over `axes`. With `keepdim` the reduced axes stay as size 1.
    pub fn sum(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (keep, squeezed) = self.reduced_shape(a, axes, "sum")?;
        let out = if keepdim { keep.clone() } else { squeezed };
        self.add_op(Op::Sum { a: a.0, keep_shape: keep }, out)
    }

    pub fn mean(&mut self, a: Var, axes: &[usize], keepdim: bool) -> Result<Var> {
        let (keep, squeezed) = self.reduced_shape(a, axes, "mean")?;
        let out = if keepdim { keep.clone() } else { squeezed };
        self.add_op(Op::Mean { a: a.0, keep_shape: keep }, out)
    }

    /// Sum of every element, shape `[1]`.
    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.sum(a, &axes, false)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        self.mean(a, &axes, false)
    }

    /// Concatenation along the last axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = xs.first().ok_or_else(|| Error::Invalid("concat of zero tensors".into()))?;
        let lead = &self.shape(*first)[..self.shape(*first).len() - 1];
        let mut last = 0;
        for x in xs {
            let s = self.shape(*x);
            if s.len() != lead.len() + 1 || &s[..s.len() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            last += s[s.len() - 1];
        }
        let mut shape = lead.to_vec();
        shape.push(last);
        self.add_op(Op::Concat(xs.iter().map(|v| v.0).collect()), shape)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        self.add_op(Op::Reshape(a.0), shape.to_vec())
    }

    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        match broadcast_shape(self.shape(a), shape) {
            Some(s) if s == shape => self.add_op(Op::Broadcast(a.0), shape.to_vec()),
            _ => Err(Error::Shape {
                op: "broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            }),
        }
    }

    // ---- composites ----

    /// `x * c` for a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.mul(a, s)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let s = self.scalar(c);
        self.add(a, s)
    }

    /// `min(a, c)` as `-max(-a, -c)`.
    pub fn min_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let n = self.neg(a)?;
        let m = self.max_const(n, -c)?;
        self.neg(m)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        let x = self.max_const(a, lo)?;
        self.min_const(x, hi)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.mul(a, a)
    }

    /// Logistic function of a `[.., 1]` tensor, built as the second entry of
    /// `softmax([0, z])` so large `|z|` stays finite.
    pub fn sigmoid(&mut self, z: Var) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape.last() != Some(&1) {
            return Err(Error::Shape {
                op: "sigmoid",
                lhs: shape,
                rhs: vec![1],
            });
        }
        let zeros = self.constant(Tensor::zeros(&shape));
        let pair = self.concat(&[zeros, z])?;
        let p = self.softmax(pair)?;
        let pick = self.constant(Tensor::new(&[2, 1], vec![0.0, 1.0])?);
        let flat_rows = shape.iter().product::<usize>();
        let p2 = self.reshape(p, &[flat_rows, 2])?;
        let out = self.matmul(p2, pick)?;
        self.reshape(out, &shape)
    }

    /// Scales `a` so every slice reduced over `axes` has unit L2 norm.
    /// Slices with squared norm below `floor` are divided by `sqrt(floor)`.
    pub fn l2_normalize(&mut self, a: Var, axes: &[usize], floor: f64) -> Result<Var> {
        let sq = self.square(a)?;
        let ss = self.sum(sq, axes, true)?;
        let ss = self.max_const(ss, floor)?;
        let lg = self.log(ss)?;
        let half = self.scale(lg, -0.5)?;
        let inv = self.exp(half)?;
        self.mul(a, inv)
    }

    // ---- evaluation ----

    fn compute(&self, op: &Op, shape: &[usize]) -> Result<Vec<f64>> {
        let vals = |i: usize| &self.nodes[i].value.values;
        let shp = |i: usize| &self.nodes[i].value.shape;
        let n: usize = shape.iter().product();
        let out = match op {
            Op::Leaf { .. } => unreachable!("leaves are not computed"),
            Op::MatMul { a, b, ta, tb } => {
                let d = MatMulDims::new(shp(*a), shp(*b), *ta, *tb).expect("validated");
                let mut out = vec![0.0; n];
                let (av, bv) = (MatView::of(d.a_cols, *ta), MatView::of(d.b_cols, *tb));
                let (sa, sb) = (d.m * d.k, d.k * d.n);
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * sa } else { 0 };
                    let bo = if d.b_batched { bi * sb } else { 0 };
                    gemm(
                        d.m,
                        d.k,
                        d.n,
                        &vals(*a)[ao..ao + sa],
                        av,
                        &vals(*b)[bo..bo + sb],
                        bv,
                        0.0,
                        &mut out[bi * d.m * d.n..(bi + 1) * d.m * d.n],
                    );
                }
                out
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let (xa, xb) = (vals(*a), vals(*b));
                if xa.len() == n && xb.len() < n && n % xb.len() == 0 && shp(*b).len() == 1 {
                    // Row-vector operand, e.g. a bias.
                    let mut out = Vec::with_capacity(n);
                    for row in xa.chunks_exact(xb.len()) {
                        out.extend(row.iter().zip(xb).map(|(&x, &y)| f(x, y)));
                    }
                    return finite(out, op);
                }
                let ea;
                let xa = if xa.len() == n {
                    xa
                } else {
                    ea = IndexMap::new(shp(*a), shape).expand(xa, n);
                    &ea
                };
                let eb;
                let xb = if xb.len() == n {
                    xb
                } else {
                    eb = IndexMap::new(shp(*b), shape).expand(xb, n);
                    &eb
                };
                xa.iter().zip(xb).map(|(&x, &y)| f(x, y)).collect()
            }
            Op::Exp(a) => vals(*a).iter().map(|x| x.exp()).collect(),
            Op::Log(a) => vals(*a).iter().map(|x| x.ln()).collect(),
            Op::Neg(a) => vals(*a).iter().map(|x| -x).collect(),
            Op::MaxConst(a, c) => vals(*a).iter().map(|&x| if x > *c { x } else { *c }).collect(),
            Op::Relu(a) => vals(*a).iter().map(|&x| relu(x)).collect(),
            Op::Softmax(a) => {
                let cols = *shape.last().expect("non-empty shape");
                let mut out = vals(*a).clone();
                for row in out.chunks_exact_mut(cols) {
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - mx).exp();
                        z += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= z;
                    }
                }
                out
            }
            Op::Sum { a, keep_shape } | Op::Mean { a, keep_shape } => {
                let map = IndexMap::new(keep_shape, shp(*a));
                let mut out = vec![0.0; n];
                reduce_into(&mut out, vals(*a), &map);
                if let Op::Mean { .. } = op {
                    let count = (vals(*a).len() / n) as f64;
                    out.iter_mut().for_each(|x| *x /= count);
                }
                out
            }
            Op::Concat(xs) => {
                let rows = n / shape[shape.len() - 1];
                let mut out = Vec::with_capacity(n);
                for r in 0..rows {
                    for &x in xs {
                        let w = *shp(x).last().expect("non-empty shape");
                        out.extend_from_slice(&vals(x)[r * w..(r + 1) * w]);
                    }
                }
                out
            }
            Op::Reshape(a) => vals(*a).clone(),
            Op::Broadcast(a) => {
                IndexMap::new(shp(*a), shape).expand(vals(*a), n)
            }
        };
        finite(out, op)
    }

    /// Rebinds named inputs (shapes must match) and recomputes every derived
    /// node in insertion order.
    pub fn evaluate(&mut self, inputs: &[(&str, Tensor)]) -> Result<()> {
        for (name, t) in inputs {
            let v = self.find_input(name).ok_or_else(|| Error::UnknownInput(name.to_string()))?;
            let node = &mut self.nodes[v.0];
            if node.value.shape != t.shape {
                return Err(Error::Shape {
                    op: "evaluate",
                    lhs: node.value.shape.clone(),
                    rhs: t.shape.clone(),
                });
            }
            node.value.values.clone_from(&t.values);
            self.stale = true;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let values = self.compute(&op, &self.nodes[i].value.shape)?;
            self.nodes[i].value.values = values;
        }
        self.stale = false;
        Ok(())
    }

    /// Marks named inputs as rebound without recomputing; `backward` refuses
    /// to run until [`Graph::evaluate`] is called.
    pub fn rebind(&mut self, name: &str, t: Tensor) -> Result<()> {
        let v = self.find_input(name).ok_or_else(|| Error::UnknownInput(name.to_string()))?;
        if self.nodes[v.0].value.shape != t.shape {
            return Err(Error::Shape {
                op: "rebind",
                lhs: self.nodes[v.0].value.shape.clone(),
                rhs: t.shape.clone(),
            });
        }
        self.nodes[v.0].value.values = t.values;
        self.stale = true;
        Ok(())
    }

    /// Reverse-mode sweep from a one-element output. Gradients of every
    /// node that depends on a `requires_grad` leaf are overwritten.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.stale {
            return Err(Error::NotEvaluated);
        }
        if self.nodes[out.0].value.len() != 1 {
            return Err(Error::NonScalar(self.nodes[out.0].value.shape.clone()));
        }
        for node in &mut self.nodes {
            node.value.grad = None;
        }
        if !self.nodes[out.0].value.requires_grad {
            return Ok(());
        }
        self.nodes[out.0].value.grad = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let Some(g) = self.nodes[i].value.grad.take() else {
                continue;
            };
            let op = self.nodes[i].op.clone();
            self.backprop(i, &op, &g);
            self.nodes[i].value.grad = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, i: usize) -> Option<&mut Vec<f64>> {
        let v = &mut self.nodes[i].value;
        if !v.requires_grad {
            return None;
        }
        let n = v.values.len();
        Some(v.grad.get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop(&mut self, i: usize, op: &Op, g: &[f64]) {
        let out_shape = self.nodes[i].value.shape.clone();
        match *op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b, ta, tb } => {
                let d = MatMulDims::new(&self.nodes[a].value.shape, &self.nodes[b].value.shape, ta, tb)
                    .expect("validated");
                let (sa, sb, sc) = (d.m * d.k, d.k * d.n, d.m * d.n);
                let gv = MatView::of(d.n, false);
                if self.nodes[a].value.requires_grad {
                    let bvals = if a == b {
                        self.nodes[b].value.values.clone()
                    } else {
                        std::mem::take(&mut self.nodes[b].value.values)
                    };
                    let buf = self.grad_buf(a).expect("requires grad");
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * sa } else { 0 };
                        let bo = if d.b_batched { bi * sb } else { 0 };
                        let gc = &g[bi * sc..(bi + 1) * sc];
                        let bm = &bvals[bo..bo + sb];
                        if ta {
                            // dA (k x m) = op(B) (k x n) * dC^T (n x m)
                            gemm(d.k, d.n, d.m, bm, MatView::of(d.b_cols, tb), gc, MatView::of(d.n, true), 1.0, &mut buf[ao..ao + sa]);
                        } else {
                            // dA (m x k) = dC (m x n) * op(B)^T (n x k)
                            gemm(d.m, d.n, d.k, gc, gv, bm, MatView::of(d.b_cols, !tb), 1.0, &mut buf[ao..ao + sa]);
                        }
                    }
                    if a != b {
                        self.nodes[b].value.values = bvals;
                    }
                }
                if self.nodes[b].value.requires_grad {
                    let avals = if a == b {
                        self.nodes[a].value.values.clone()
                    } else {
                        std::mem::take(&mut self.nodes[a].value.values)
                    };
                    let am: &[f64] = &avals;
                    let buf = self.grad_buf(b).expect("requires grad");
                    for bi in 0..d.batch {
                        let ao = if d.a_batched { bi * sa } else { 0 };
                        let bo = if d.b_batched { bi * sb } else { 0 };
                        let gc = &g[bi * sc..(bi + 1) * sc];
                        let amat = &am[ao..ao + sa];
                        if tb {
                            // dB (n x k) = dC^T (n x m) * op(A) (m x k)
                            gemm(d.n, d.m, d.k, gc, MatView::of(d.n, true), amat, MatView::of(d.a_cols, ta), 1.0, &mut buf[bo..bo + sb]);
                        } else {
                            // dB (k x n) = op(A)^T (k x m) * dC (m x n)
                            gemm(d.k, d.m, d.n, amat, MatView::of(d.a_cols, !ta), gc, gv, 1.0, &mut buf[bo..bo + sb]);
                        }
                    }
                    if a != b {
                        self.nodes[a].value.values = avals;
                    }
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let sign_b = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                let is_mul = matches!(op, Op::Mul(..));
                for (x, y, rhs) in [(a, b, false), (b, a, true)] {
                    if !self.nodes[x].value.requires_grad {
                        continue;
                    }
                    let sign = if rhs && !is_mul { sign_b } else { 1.0 };
                    let map = IndexMap::new(&self.nodes[x].value.shape, &out_shape);
                    let contrib: Vec<f64> = if is_mul {
                        let yv = &self.nodes[y].value.values;
                        if yv.len() == g.len() {
                            g.iter().zip(yv).map(|(gk, yk)| gk * yk).collect()
                        } else {
                            let ye = IndexMap::new(&self.nodes[y].value.shape, &out_shape).expand(yv, g.len());
                            g.iter().zip(&ye).map(|(gk, yk)| gk * yk).collect()
                        }
                    } else if sign < 0.0 {
                        g.iter().map(|v| -v).collect()
                    } else {
                        g.to_vec()
                    };
                    let buf = self.grad_buf(x).expect("requires grad");
                    reduce_into(buf, &contrib, &map);
                }
            }
            Op::Exp(a) => self.unary_back(a, i, g, |_, y, gk| gk * y),
            Op::Log(a) => self.unary_back(a, i, g, |x, _, gk| gk / x),
            Op::Neg(a) => self.unary_back(a, i, g, |_, _, gk| -gk),
            Op::MaxConst(a, c) => self.unary_back(a, i, g, move |x, _, gk| if x > c { gk } else { 0.0 }),
            Op::Relu(a) => self.unary_back(a, i, g, |x, _, gk| if x > 0.0 { gk } else { 0.0 }),
            Op::Softmax(a) => {
                if !self.nodes[a].value.requires_grad {
                    return;
                }
                let cols = *out_shape.last().expect("non-empty");
                let y = std::mem::take(&mut self.nodes[i].value.values);
                let buf = self.grad_buf(a).expect("requires grad");
                for ((yr, gr), br) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(buf.chunks_exact_mut(cols)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for ((bv, yv), gv) in br.iter_mut().zip(yr).zip(gr) {
                        *bv += yv * (gv - dot);
                    }
                }
                self.nodes[i].value.values = y;
            }
            Op::Sum { a, ref keep_shape } | Op::Mean { a, ref keep_shape } => {
                if !self.nodes[a].value.requires_grad {
                    return;
                }
                let in_len = self.nodes[a].value.values.len();
                let scale = if matches!(op, Op::Mean { .. }) {
                    1.0 / (in_len / g.len()) as f64
                } else {
                    1.0
                };
                let ge = IndexMap::new(keep_shape, &self.nodes[a].value.shape.clone()).expand(g, in_len);
                let buf = self.grad_buf(a).expect("requires grad");
                for (bv, gv) in buf.iter_mut().zip(&ge) {
                    *bv += gv * scale;
                }
            }
            Op::Concat(ref xs) => {
                let rows = g.len() / out_shape[out_shape.len() - 1];
                let widths: Vec<usize> = xs.iter().map(|&x| *self.nodes[x].value.shape.last().expect("non-empty")).collect();
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if let Some(buf) = self.grad_buf(x) {
                        for r in 0..rows {
                            for c in 0..w {
                                buf[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                if let Some(buf) = self.grad_buf(a) {
                    for (bv, gv) in buf.iter_mut().zip(g) {
                        *bv += gv;
                    }
                }
            }
            Op::Broadcast(a) => {
                if !self.nodes[a].value.requires_grad {
                    return;
                }
                let map = IndexMap::new(&self.nodes[a].value.shape.clone(), &out_shape);
                let buf = self.grad_buf(a).expect("requires grad");
                reduce_into(buf, g, &map);
            }
        }
    }

    fn unary_back(&mut self, a: usize, i: usize, g: &[f64], f: impl Fn(f64, f64, f64) -> f64) {
        if !self.nodes[a].value.requires_grad {
            return;
        }
        self.grad_buf(a);
        let x = std::mem::take(&mut self.nodes[a].value.values);
        let y = std::mem::take(&mut self.nodes[i].value.values);
        let buf = self.grad_buf(a).expect("requires grad");
        for (k, bv) in buf.iter_mut().enumerate() {
            *bv += f(x[k], y[k], g[k]);
        }
        self.nodes[a].value.values = x;
        self.nodes[i].value.values = y;
    }
}
