use super::DiffError;
use rand::Rng;
use std::collections::HashMap;

/// Dense row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn scalar(value: f64) -> Self {
        Self { rows: 1, cols: 1, data: vec![value] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, DiffError> {
        if data.len() != rows * cols {
            return Err(DiffError::Shape(format!("{} values for a {rows}x{cols} tensor", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    /// A single row.
    pub fn row_vector(data: Vec<f64>) -> Self {
        Self { rows: 1, cols: data.len(), data }
    }

    /// Uniform entries in `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(rows: usize, cols: usize, bound: f64, rng: &mut R) -> Self {
        let data = (0..rows * cols).map(|_| rng.random_range(-bound..=bound)).collect();
        Self { rows, cols, data }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Weight and bias of an affine map `x W + b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

/// Named trainable tensors in insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<ParamId, DiffError> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(DiffError::DuplicateName(name));
        }
        self.lookup.insert(name.clone(), self.tensors.len());
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(ParamId(self.tensors.len() - 1))
    }

    /// Adds `prefix.w` (fan-in scaled uniform) and `prefix.b` (zeros).
    pub fn linear<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Result<Linear, DiffError> {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = self.add(format!("{prefix}.w"), Tensor::uniform(fan_in, fan_out, bound, rng))?;
        let b = self.add(format!("{prefix}.b"), Tensor::zeros(1, fan_out))?;
        Ok(Linear { w, b, fan_in, fan_out })
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.lookup.get(name).map(|&i| ParamId(i))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }

    /// Every value concatenated in parameter order.
    pub fn flat(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub(crate) tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self { tensors: params.tensors.iter().map(|t| Tensor::zeros(t.rows, t.cols)).collect() }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.tensors.iter()
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm before clipping.
    pub fn clip_global_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            self.scale(max_norm / norm);
        }
        norm
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    /// Like [`Grads::clip_global_norm`] restricted to the parameters `select` accepts.
    pub fn clip_norm_where(&mut self, max_norm: f64, select: impl Fn(ParamId) -> bool) -> f64 {
        let chosen: Vec<usize> = (0..self.tensors.len()).filter(|&i| select(ParamId(i))).collect();
        let norm = chosen.iter().map(|&i| self.tensors[i].sum_sq()).sum::<f64>().sqrt();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for i in chosen {
                self.tensors[i].data.iter_mut().for_each(|v| *v *= s);
            }
        }
        norm
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::is_finite)
    }
}
