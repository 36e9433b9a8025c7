use super::attention::{self, AttentionSpec};
use super::{gemm, DiffError, Grads, Linear, ParamId, ParamSet, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Square(usize),
    Gelu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, inv_std: Vec<f64> },
    Attention { q: usize, k: usize, v: usize, spec: AttentionSpec, probs: Vec<f64> },
    GatherRows(usize, Arc<Vec<usize>>),
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    Reshape(usize),
    Sum(usize),
    Mean(usize),
    RowSum(usize),
    Clamp { x: usize, lo: f64, hi: f64 },
    Minimum(usize, usize),
    MulConst(usize, Arc<Tensor>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Sigmoid(_) => "sigmoid",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Gelu(_) => "gelu",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Attention { .. } => "attention",
            Op::GatherRows(..) => "gather_rows",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Clamp { .. } => "clamp",
            Op::Minimum(..) => "minimum",
            Op::MulConst(..) => "mul_const",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A tape of operations over parameters and inputs.
///
/// Shape errors in individual operations are programming errors and panic;
/// callers validate external shapes before building a graph.
pub struct Graph<'p> {
    params: &'p ParamSet,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<usize>>,
    dropout_rng: Option<ChaCha8Rng>,
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { rows: a.rows, cols: a.cols, data: a.data.iter().map(|&x| f(x)).collect() }
}

fn col_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols);
    for r in 0..t.rows {
        for (o, v) in out.data.iter_mut().zip(t.row(r)) {
            *o += v;
        }
    }
    out
}

impl<'p> Graph<'p> {
    /// Evaluation-mode graph: dropout is the identity.
    pub fn new(params: &'p ParamSet) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: vec![None; params.len()], dropout_rng: None }
    }

    /// Training-mode graph whose dropout masks are drawn from `rng`.
    pub fn training(params: &'p ParamSet, rng: ChaCha8Rng) -> Self {
        Self { dropout_rng: Some(rng), ..Self::new(params) }
    }

    pub fn params(&self) -> &ParamSet {
        self.params
    }

    pub fn is_training(&self) -> bool {
        self.dropout_rng.is_some()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(n) = self.param_nodes[id.0] {
            return Var(n);
        }
        let v = self.push(self.params.get(id).clone(), Op::Param(id));
        self.param_nodes[id.0] = Some(v.0);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.cols, y.rows, "matmul inner dimensions");
        let mut out = Tensor::zeros(x.rows, y.cols);
        gemm(x.rows, x.cols, y.cols, &x.data, false, &y.data, false, &mut out.data, 0.0);
        self.push(out, Op::MatMul(a.0, b.0))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "add_row expects a 1x{} row", x.cols);
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols) {
            chunk.iter_mut().zip(&r.data).for_each(|(o, b)| *o += b);
        }
        self.push(out, Op::AddRow(a.0, row.0))
    }

    /// Multiplies every row of `a` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows == 1 && r.cols == x.cols, "mul_row expects a 1x{} row", x.cols);
        let mut out = x.clone();
        for chunk in out.data.chunks_mut(x.cols) {
            chunk.iter_mut().zip(&r.data).for_each(|(o, b)| *o *= b);
        }
        self.push(out, Op::MulRow(a.0, row.0))
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, layer: &Linear) -> Var {
        let w = self.param(layer.w);
        let b = self.param(layer.b);
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a.0, b.0))
    }

    /// Elementwise product with a constant tensor (masks, fixed weights).
    pub fn mul_const(&mut self, a: Var, c: Arc<Tensor>) -> Var {
        let out = zip_map(self.value(a), &c, |x, y| x * y);
        self.push(out, Op::MulConst(a.0, c))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x * s);
        self.push(out, Op::Scale(a.0, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = map(self.value(a), |x| x + s);
        self.push(out, Op::AddScalar(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::tanh);
        self.push(out, Op::Tanh(a.0))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 1.0 / (1.0 + (-x).exp()));
        self.push(out, Op::Sigmoid(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = map(self.value(a), f64::exp);
        self.push(out, Op::Exp(a.0))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| x * x);
        self.push(out, Op::Square(a.0))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = map(self.value(a), |x| 0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh()));
        self.push(out, Op::Gelu(a.0))
    }

    /// Row-wise layer normalization with `1 x cols` gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (g, b) = (self.value(gamma), self.value(beta));
        let cols = xv.cols;
        assert!(g.shape() == (1, cols) && b.shape() == (1, cols), "layer_norm gain/shift shape");
        let mut xhat = vec![0.0; xv.len()];
        let mut inv_std = vec![0.0; xv.rows];
        let mut out = Tensor::zeros(xv.rows, cols);
        for r in 0..xv.rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..cols {
                let h = (row[c] - mean) * is;
                xhat[r * cols + c] = h;
                out.data[r * cols + c] = h * g.data[c] + b.data[c];
            }
        }
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, inv_std })
    }

    /// Masked multi-head attention; see [`AttentionSpec`] for the row layout.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, mask: &[bool], spec: AttentionSpec) -> Result<Var, DiffError> {
        let (out, probs) = attention::forward(self.value(q), self.value(k), self.value(v), mask, &spec)?;
        Ok(self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, spec, probs }))
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Var {
        let x = self.value(a);
        let mut out = Tensor::zeros(idx.len(), x.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.data[r * x.cols..(r + 1) * x.cols].copy_from_slice(x.row(i));
        }
        self.push(out, Op::GatherRows(a.0, idx))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols, "slice_cols out of range");
        let mut out = Tensor::zeros(x.rows, len);
        for r in 0..x.rows {
            out.data[r * len..(r + 1) * len].copy_from_slice(&x.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { x: a.0, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.data[r * cols + off..r * cols + off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.push(out, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    /// Reinterprets the row-major data with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.len(), rows * cols, "reshape size");
        let out = Tensor { rows, cols, data: x.data.clone() };
        self.push(out, Op::Reshape(a.0))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let s = x.data.iter().sum::<f64>() / x.len().max(1) as f64;
        self.push(Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Sums each row into a `rows x 1` column.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let data = (0..x.rows).map(|r| x.row(r).iter().sum()).collect();
        self.push(Tensor { rows: x.rows, cols: 1, data }, Op::RowSum(a.0))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = map(self.value(a), |x| x.clamp(lo, hi));
        self.push(out, Op::Clamp { x: a.0, lo, hi })
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let out = zip_map(self.value(a), self.value(b), f64::min);
        self.push(out, Op::Minimum(a.0, b.0))
    }

    /// Inverted dropout; the identity in evaluation mode or when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64) -> Var {
        let Some(rng) = self.dropout_rng.as_mut() else { return a };
        if p <= 0.0 {
            return a;
        }
        let x = &self.nodes[a.0].value;
        let keep = 1.0 / (1.0 - p);
        let data = (0..x.len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = Arc::new(Tensor { rows: x.rows, cols: x.cols, data });
        self.mul_const(a, mask)
    }

    /// Reverse pass from a `1 x 1` loss.
    pub fn backward(&self, loss: Var) -> Result<Grads, DiffError> {
        let lv = self.value(loss);
        if lv.shape() != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows: lv.rows, cols: lv.cols });
        }
        for node in &self.nodes[..=loss.0] {
            if !node.value.is_finite() {
                return Err(DiffError::NonFinite { op: node.op.name() });
            }
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        let mut out = Grads::zeros_like(self.params);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let val = &node.value;
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.tensors[id.0].add_assign(&g),
                Op::MatMul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    gemm(x.rows, g.cols, x.cols, &g.data, false, &y.data, true, &mut da.data, 0.0);
                    let mut db = Tensor::zeros(y.rows, y.cols);
                    gemm(y.rows, x.rows, y.cols, &x.data, true, &g.data, false, &mut db.data, 0.0);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::AddRow(a, r) => {
                    acc(&mut grads, *r, col_sums(&g));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, r) => {
                    let x = &self.nodes[*a].value;
                    let row = &self.nodes[*r].value;
                    let mut da = g.clone();
                    for chunk in da.data.chunks_mut(g.cols) {
                        chunk.iter_mut().zip(&row.data).for_each(|(o, s)| *o *= s);
                    }
                    acc(&mut grads, *r, col_sums(&zip_map(&g, x, |p, q| p * q)));
                    acc(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, map(&g, |x| -x));
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    acc(&mut grads, *a, zip_map(&g, y, |p, q| p * q));
                    acc(&mut grads, *b, zip_map(&g, x, |p, q| p * q));
                }
                Op::MulConst(a, c) => acc(&mut grads, *a, zip_map(&g, c, |p, q| p * q)),
                Op::Scale(a, s) => acc(&mut grads, *a, map(&g, |x| x * s)),
                Op::AddScalar(a) | Op::Reshape(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor { rows: x.rows, cols: x.cols, data: g.data });
                }
                Op::Tanh(a) => acc(&mut grads, *a, zip_map(&g, val, |p, y| p * (1.0 - y * y))),
                Op::Sigmoid(a) => acc(&mut grads, *a, zip_map(&g, val, |p, y| p * y * (1.0 - y))),
                Op::Exp(a) => acc(&mut grads, *a, zip_map(&g, val, |p, y| p * y)),
                Op::Square(a) => acc(&mut grads, *a, zip_map(&g, &self.nodes[*a].value, |p, x| 2.0 * p * x)),
                Op::Gelu(a) => {
                    let d = zip_map(&g, &self.nodes[*a].value, |p, x| {
                        let u = GELU_C * (x + 0.044715 * x * x * x);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
                        p * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    });
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let cols = g.cols;
                    let gam = &self.nodes[*gamma].value;
                    let mut dx = Tensor::zeros(g.rows, cols);
                    let mut dgamma = Tensor::zeros(1, cols);
                    let mut dbeta = Tensor::zeros(1, cols);
                    for r in 0..g.rows {
                        let gr = g.row(r);
                        let hr = &xhat[r * cols..(r + 1) * cols];
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for c in 0..cols {
                            dgamma.data[c] += gr[c] * hr[c];
                            dbeta.data[c] += gr[c];
                            let dh = gr[c] * gam.data[c];
                            mean_d += dh;
                            mean_dh += dh * hr[c];
                        }
                        mean_d /= cols as f64;
                        mean_dh /= cols as f64;
                        for c in 0..cols {
                            let dh = gr[c] * gam.data[c];
                            dx.data[r * cols + c] = inv_std[r] * (dh - mean_d - hr[c] * mean_dh);
                        }
                    }
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *gamma, dgamma);
                    acc(&mut grads, *beta, dbeta);
                }
                Op::Attention { q, k, v, spec, probs } => {
                    let (dq, dk, dv) = attention::backward(
                        &self.nodes[*q].value,
                        &self.nodes[*k].value,
                        &self.nodes[*v].value,
                        probs,
                        &g,
                        spec,
                    );
                    acc(&mut grads, *q, dq);
                    acc(&mut grads, *k, dk);
                    acc(&mut grads, *v, dv);
                }
                Op::GatherRows(a, idx) => {
                    let x = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for (r, &src) in idx.iter().enumerate() {
                        for (o, v) in da.data[src * x.cols..(src + 1) * x.cols].iter_mut().zip(g.row(r)) {
                            *o += v;
                        }
                    }
                    acc(&mut grads, *a, da);
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[*x].value;
                    let mut da = Tensor::zeros(xv.rows, xv.cols);
                    for r in 0..g.rows {
                        da.data[r * xv.cols + start..r * xv.cols + start + g.cols].copy_from_slice(g.row(r));
                    }
                    acc(&mut grads, *x, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let pc = self.nodes[p].value.cols;
                        let mut dp = Tensor::zeros(g.rows, pc);
                        for r in 0..g.rows {
                            dp.data[r * pc..(r + 1) * pc].copy_from_slice(&g.row(r)[off..off + pc]);
                        }
                        off += pc;
                        acc(&mut grads, p, dp);
                    }
                }
                Op::Sum(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor::filled(x.rows, x.cols, g.item()));
                }
                Op::Mean(a) => {
                    let x = &self.nodes[*a].value;
                    acc(&mut grads, *a, Tensor::filled(x.rows, x.cols, g.item() / x.len().max(1) as f64));
                }
                Op::RowSum(a) => {
                    let x = &self.nodes[*a].value;
                    let mut da = Tensor::zeros(x.rows, x.cols);
                    for r in 0..x.rows {
                        da.data[r * x.cols..(r + 1) * x.cols].iter_mut().for_each(|v| *v = g.data[r]);
                    }
                    acc(&mut grads, *a, da);
                }
                Op::Clamp { x, lo, hi } => {
                    let d = zip_map(&g, &self.nodes[*x].value, |p, v| if v >= *lo && v <= *hi { p } else { 0.0 });
                    acc(&mut grads, *x, d);
                }
                Op::Minimum(a, b) => {
                    let (x, y) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let mut da = Tensor::zeros(g.rows, g.cols);
                    let mut db = Tensor::zeros(g.rows, g.cols);
                    for i in 0..g.len() {
                        if x.data[i] <= y.data[i] {
                            da.data[i] = g.data[i];
                        } else {
                            db.data[i] = g.data[i];
                        }
                    }
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
            }
        }
        Ok(out)
    }
}

fn acc(grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut grads[i] {
        Some(t) => t.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_gradient() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new(&p);
        let x = g.param(w);
        let y = g.square(x);
        let l = g.sum(y);
        assert_eq!(g.backward(l).unwrap().get(w).data, vec![6.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::zeros(2, 2));
        assert!(matches!(g.backward(x), Err(DiffError::NonScalarLoss { rows: 2, cols: 2 })));
    }

    #[test]
    fn non_finite_intermediate_is_rejected() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::scalar(1000.0)).unwrap();
        let mut g = Graph::new(&p);
        let x = g.param(w);
        let e = g.exp(x);
        let l = g.sum(e);
        assert!(matches!(g.backward(l), Err(DiffError::NonFinite { op: "exp" })));
    }

    #[test]
    fn parameter_reuse_accumulates() {
        let mut p = ParamSet::new();
        let w = p.add("w", Tensor::scalar(2.0)).unwrap();
        let mut g = Graph::new(&p);
        let a = g.param(w);
        let b = g.param(w);
        let y = g.mul(a, b);
        let l = g.sum(y);
        assert_eq!(g.backward(l).unwrap().get(w).data, vec![4.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let p = ParamSet::new();
        let mut g = Graph::new(&p);
        let x = g.input(Tensor::filled(3, 3, 1.5));
        let y = g.dropout(x, 0.5);
        assert_eq!(x, y);
    }
}
