use std::fmt::Write as _;

use super::tensor::{dot, Tensor};
use super::DiffError;

/// Norm floor shared by the cosine and row-normalization ops.
pub const NORM_FLOOR: f64 = 1e-12;

/// Handle to a node in a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Detach(NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Relu(NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    Log(NodeId),
    Clamp(NodeId, f64, f64),
    Softplus(NodeId),
    MulConst(NodeId, Tensor),
    RowScale(NodeId, NodeId),
    NormalizeRows(NodeId),
    RowCosine(NodeId, NodeId),
    SoftmaxRows(NodeId),
    GatherRows(NodeId, Vec<usize>),
    ScatterRows(NodeId, Vec<usize>),
    GatherEntries(NodeId, Vec<(usize, usize)>),
    Map(NodeId, fn(f64) -> f64),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Constant => "constant",
            Op::Detach(_) => "detach",
            Op::MatMul(..) => "matmul",
            Op::MatMulT(..) => "matmul_t",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBias(..) => "add_bias",
            Op::Relu(_) => "relu",
            Op::Scale(..) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::SumAll(_) => "sum_all",
            Op::MeanAll(_) => "mean_all",
            Op::Log(_) => "log",
            Op::Clamp(..) => "clamp",
            Op::Softplus(_) => "softplus",
            Op::MulConst(..) => "mul_const",
            Op::RowScale(..) => "row_scale",
            Op::NormalizeRows(_) => "normalize_rows",
            Op::RowCosine(..) => "row_cosine",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::GatherRows(..) => "gather_rows",
            Op::ScatterRows(..) => "scatter_rows",
            Op::GatherEntries(..) => "gather_entries",
            Op::Map(..) => "map",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    grad: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run computation graph. Node ids are issued in creation order, which
/// is therefore a valid topological order for the reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    diagnostics: Vec<String>,
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn stable_softplus(x: f64) -> f64 {
    (-x.abs()).exp().ln_1p() + x.max(0.0)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        let grad = Tensor::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Warnings raised during the forward pass (e.g. floored norms).
    pub fn diagnostics(&self) -> &[String] {
        &self.diagnostics
    }

    /// Trainable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    /// Same value as `x`; the reverse sweep stops here.
    pub fn detach(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).clone();
        self.push(v, Op::Detach(x), false)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(a).matmul_t(self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::MatMulT(a, b), rg))
    }

    fn zip_with(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same(name, vb)?;
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let v = Tensor::from_vec(va.rows(), va.cols(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, op, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        self.zip_with(a, b, "mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a `1×cols` bias to every row.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId, DiffError> {
        let v = self.value(x).add_row_vector(self.value(bias))?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(v, Op::AddBias(x, bias), rg))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(v, Op::Relu(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|v| v * s);
        let rg = self.rg(&[x]);
        self.push(v, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: NodeId, s: f64) -> NodeId {
        let v = self.value(x).map(|v| v + s);
        let rg = self.rg(&[x]);
        self.push(v, Op::AddScalar(x), rg)
    }

    pub fn sum_all(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::filled(1, 1, s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len().max(1) as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::filled(1, 1, s), Op::MeanAll(x), rg)
    }

    /// Natural log. Inputs are expected to be positive (clamp first).
    pub fn log(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(f64::ln);
        let rg = self.rg(&[x]);
        self.push(v, Op::Log(x), rg)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.rg(&[x]);
        self.push(v, Op::Clamp(x, lo, hi), rg)
    }

    /// `ln(1 + e^x)` evaluated as `ln(1 + e^{-|x|}) + max(0, x)`.
    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(stable_softplus);
        let rg = self.rg(&[x]);
        self.push(v, Op::Softplus(x), rg)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, x: NodeId, c: Tensor) -> Result<NodeId, DiffError> {
        let vx = self.value(x);
        vx.check_same("mul_const", &c)?;
        let data = vx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let v = Tensor::from_vec(vx.rows(), vx.cols(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::MulConst(x, c), rg))
    }

    /// Multiplies row `n` of `x` by the scalar `s[n, 0]`.
    pub fn row_scale(&mut self, x: NodeId, s: NodeId) -> Result<NodeId, DiffError> {
        let (vx, vs) = (self.value(x), self.value(s));
        if vs.cols() != 1 || vs.rows() != vx.rows() {
            return Err(DiffError::Shape {
                op: "row_scale",
                left: vx.shape(),
                right: vs.shape(),
            });
        }
        let v = Tensor::from_fn(vx.rows(), vx.cols(), |r, c| vx.get(r, c) * vs.get(r, 0));
        let rg = self.rg(&[x, s]);
        Ok(self.push(v, Op::RowScale(x, s), rg))
    }

    /// Scales each row to unit norm (norm floored at [`NORM_FLOOR`]).
    pub fn normalize_rows(&mut self, x: NodeId) -> NodeId {
        let vx = self.value(x);
        let mut v = vx.clone();
        let mut floored = 0usize;
        for r in 0..v.rows() {
            let n = dot(vx.row(r), vx.row(r)).sqrt();
            if n < NORM_FLOOR {
                floored += 1;
            }
            let n = n.max(NORM_FLOOR);
            v.row_mut(r).iter_mut().for_each(|e| *e /= n);
        }
        if floored > 0 {
            self.diagnostics.push(format!(
                "normalize_rows: {floored} row(s) with norm below floor"
            ));
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::NormalizeRows(x), rg)
    }

    /// Per-row cosine similarity, `N×1`.
    pub fn row_cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, DiffError> {
        let (va, vb) = (self.value(a), self.value(b));
        va.check_same("row_cosine", vb)?;
        let mut floored = 0usize;
        let v = Tensor::from_fn(va.rows(), 1, |r, _| {
            let (x, y) = (va.row(r), vb.row(r));
            let (nx, ny) = (dot(x, x).sqrt(), dot(y, y).sqrt());
            if nx < NORM_FLOOR || ny < NORM_FLOOR {
                floored += 1;
            }
            dot(x, y) / (nx.max(NORM_FLOOR) * ny.max(NORM_FLOOR))
        });
        if floored > 0 {
            self.diagnostics.push(format!(
                "row_cosine: {floored} row(s) with norm below floor"
            ));
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(v, Op::RowCosine(a, b), rg))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let mut v = self.value(x).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for e in row.iter_mut() {
                *e = (*e - max).exp();
                sum += *e;
            }
            row.iter_mut().for_each(|e| *e /= sum);
        }
        let rg = self.rg(&[x]);
        self.push(v, Op::SoftmaxRows(x), rg)
    }

    pub fn gather_rows(&mut self, x: NodeId, idx: Vec<usize>) -> Result<NodeId, DiffError> {
        let vx = self.value(x);
        if let Some(&bad) = idx.iter().find(|&&i| i >= vx.rows()) {
            return Err(DiffError::Index {
                op: "gather_rows",
                index: bad,
                bound: vx.rows(),
            });
        }
        let v = Tensor::from_fn(idx.len(), vx.cols(), |r, c| vx.get(idx[r], c));
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GatherRows(x, idx), rg))
    }

    /// Places row `k` of `x` at row `idx[k]` of an `n_rows × cols` zero matrix.
    pub fn scatter_rows(
        &mut self,
        x: NodeId,
        idx: Vec<usize>,
        n_rows: usize,
    ) -> Result<NodeId, DiffError> {
        let vx = self.value(x);
        if idx.len() != vx.rows() {
            return Err(DiffError::Shape {
                op: "scatter_rows",
                left: vx.shape(),
                right: (idx.len(), 1),
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n_rows) {
            return Err(DiffError::Index {
                op: "scatter_rows",
                index: bad,
                bound: n_rows,
            });
        }
        let mut v = Tensor::zeros(n_rows, vx.cols());
        for (k, &i) in idx.iter().enumerate() {
            v.row_mut(i).copy_from_slice(vx.row(k));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::ScatterRows(x, idx), rg))
    }

    /// Collects the listed `(row, col)` entries into a column vector.
    pub fn gather_entries(
        &mut self,
        x: NodeId,
        idx: Vec<(usize, usize)>,
    ) -> Result<NodeId, DiffError> {
        let vx = self.value(x);
        if let Some(&(r, c)) = idx.iter().find(|&&(r, c)| r >= vx.rows() || c >= vx.cols()) {
            return Err(DiffError::Index {
                op: "gather_entries",
                index: r.max(c),
                bound: vx.rows().min(vx.cols()),
            });
        }
        let v = Tensor::from_fn(idx.len(), 1, |k, _| vx.get(idx[k].0, idx[k].1));
        let rg = self.rg(&[x]);
        Ok(self.push(v, Op::GatherEntries(x, idx), rg))
    }

    /// Elementwise `f` with user-supplied derivative `df`.
    pub fn map(&mut self, x: NodeId, f: fn(f64) -> f64, df: fn(f64) -> f64) -> NodeId {
        let v = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(v, Op::Map(x, df), rg)
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Reverse sweep from a scalar node. Gradients are added to whatever the
    /// nodes already hold, so two calls without [`Graph::zero_grad`] double them.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), DiffError> {
        let shape = self.value(loss).shape();
        if shape != (1, 1) {
            return Err(DiffError::NonScalarLoss(shape));
        }
        let mut pending: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(Tensor::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut pending)?;
            self.nodes[i].grad.add_assign(&g)?;
        }
        Ok(())
    }

    fn propagate(
        &self,
        i: usize,
        g: &Tensor,
        pending: &mut [Option<Tensor>],
    ) -> Result<(), DiffError> {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |id: NodeId| &self.nodes[id.0].value;

        let mut send = |id: NodeId, contrib: Tensor| -> Result<(), DiffError> {
            if !self.nodes[id.0].requires_grad {
                return Ok(());
            }
            match &mut pending[id.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => {
                    *slot = Some(contrib);
                    Ok(())
                }
            }
        };

        match &node.op {
            Op::Leaf | Op::Constant | Op::Detach(_) => {}
            Op::MatMul(a, b) => {
                send(*a, g.matmul_t(val(*b))?)?;
                send(*b, val(*a).t_matmul(g)?)?;
            }
            Op::MatMulT(a, b) => {
                send(*a, g.matmul(val(*b))?)?;
                send(*b, g.t_matmul(val(*a))?)?;
            }
            Op::Add(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                send(*a, g.clone())?;
                send(*b, g.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                send(*a, zip(g, val(*b), |x, y| x * y))?;
                send(*b, zip(g, val(*a), |x, y| x * y))?;
            }
            Op::AddBias(x, b) => {
                send(*x, g.clone())?;
                let mut gb = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (acc, v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                send(*b, gb)?;
            }
            Op::Relu(x) => {
                send(*x, zip(g, val(*x), |g, x| if x > 0.0 { g } else { 0.0 }))?;
            }
            Op::Scale(x, s) => send(*x, g.map(|v| v * s))?,
            Op::AddScalar(x) => send(*x, g.clone())?,
            Op::SumAll(x) => {
                let (r, c) = val(*x).shape();
                send(*x, Tensor::filled(r, c, g.data()[0]))?;
            }
            Op::MeanAll(x) => {
                let (r, c) = val(*x).shape();
                send(
                    *x,
                    Tensor::filled(r, c, g.data()[0] / (r * c).max(1) as f64),
                )?;
            }
            Op::Log(x) => send(*x, zip(g, val(*x), |g, x| g / x))?,
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                send(
                    *x,
                    zip(g, val(*x), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
                )?;
            }
            Op::Softplus(x) => send(*x, zip(g, val(*x), |g, x| g * sigmoid(x)))?,
            Op::MulConst(x, c) => send(*x, zip(g, c, |g, c| g * c))?,
            Op::RowScale(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                send(
                    *x,
                    Tensor::from_fn(g.rows(), g.cols(), |r, c| g.get(r, c) * vs.get(r, 0)),
                )?;
                send(
                    *s,
                    Tensor::from_fn(g.rows(), 1, |r, _| dot(g.row(r), vx.row(r))),
                )?;
            }
            Op::NormalizeRows(x) => {
                let vx = val(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for r in 0..vx.rows() {
                    let n = dot(vx.row(r), vx.row(r)).sqrt();
                    let y = out.row(r);
                    let gr = g.row(r);
                    let row = gx.row_mut(r);
                    if n < NORM_FLOOR {
                        for (o, gv) in row.iter_mut().zip(gr) {
                            *o = gv / NORM_FLOOR;
                        }
                    } else {
                        let yg = dot(y, gr);
                        for ((o, gv), yv) in row.iter_mut().zip(gr).zip(y) {
                            *o = (gv - yv * yg) / n;
                        }
                    }
                }
                send(*x, gx)?;
            }
            Op::RowCosine(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Tensor::zeros(va.rows(), va.cols());
                let mut gb = Tensor::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let (x, y) = (va.row(r), vb.row(r));
                    let (nx_raw, ny_raw) = (dot(x, x).sqrt(), dot(y, y).sqrt());
                    let (nx, ny) = (nx_raw.max(NORM_FLOOR), ny_raw.max(NORM_FLOOR));
                    let cos = out.get(r, 0);
                    let gr = g.get(r, 0);
                    // floored norms are treated as constants
                    let kx = if nx_raw < NORM_FLOOR {
                        0.0
                    } else {
                        cos / (nx * nx)
                    };
                    let ky = if ny_raw < NORM_FLOOR {
                        0.0
                    } else {
                        cos / (ny * ny)
                    };
                    let inv = 1.0 / (nx * ny);
                    for j in 0..x.len() {
                        ga.set(r, j, gr * (y[j] * inv - kx * x[j]));
                        gb.set(r, j, gr * (x[j] * inv - ky * y[j]));
                    }
                }
                send(*a, ga)?;
                send(*b, gb)?;
            }
            Op::SoftmaxRows(x) => {
                let mut gx = Tensor::zeros(out.rows(), out.cols());
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let s = dot(y, gr);
                    for ((o, yv), gv) in gx.row_mut(r).iter_mut().zip(y).zip(gr) {
                        *o = yv * (gv - s);
                    }
                }
                send(*x, gx)?;
            }
            Op::GatherRows(x, idx) => {
                let vx = val(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for (k, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                send(*x, gx)?;
            }
            Op::ScatterRows(x, idx) => {
                let vx = val(*x);
                send(
                    *x,
                    Tensor::from_fn(vx.rows(), vx.cols(), |k, c| g.get(idx[k], c)),
                )?;
            }
            Op::GatherEntries(x, idx) => {
                let vx = val(*x);
                let mut gx = Tensor::zeros(vx.rows(), vx.cols());
                for (k, &(r, c)) in idx.iter().enumerate() {
                    gx.set(r, c, gx.get(r, c) + g.get(k, 0));
                }
                send(*x, gx)?;
            }
            Op::Map(x, df) => send(*x, zip(g, val(*x), |g, x| g * df(x)))?,
        }
        Ok(())
    }

    /// Text dump of every node: id, op, shape, value norm and gradient norm.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let (r, c) = n.value.shape();
            let _ = write!(
                s,
                "#{i:<4} {:<15} {r}x{c:<6} |v|={:.6e} |g|={:.6e}",
                n.op.name(),
                n.value.norm(),
                n.grad.norm(),
            );
            match n.op {
                Op::Detach(src) => s.push_str(&format!(" (detached from #{})\n", src.0)),
                _ if !n.requires_grad => s.push_str(" (no grad)\n"),
                _ => s.push('\n'),
            }
        }
        s
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data).expect("same shape")
}
