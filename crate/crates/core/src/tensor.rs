//! Named dense tensors and ordered parameter trees.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(name: impl Into<String>, shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Rows and columns of a rank-2 tensor; a vector counts as one row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [r, c] => (*r, *c),
            [c] => (1, *c),
            _ => (1, self.data.len()),
        }
    }

    /// `y = W x` for a row-major `[rows, cols]` matrix.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let (rows, cols) = self.dims();
        debug_assert_eq!(x.len(), cols);
        (0..rows)
            .map(|r| {
                self.data[r * cols..(r + 1) * cols]
                    .iter()
                    .zip(x)
                    .map(|(w, v)| w * v)
                    .sum()
            })
            .collect()
    }

    /// `y += W x`.
    pub fn matvec_add(&self, x: &[f64], y: &mut [f64]) {
        let (_, cols) = self.dims();
        for (r, yr) in y.iter_mut().enumerate() {
            *yr += self.data[r * cols..(r + 1) * cols]
                .iter()
                .zip(x)
                .map(|(w, v)| w * v)
                .sum::<f64>();
        }
    }

    /// `dx += Wᵀ dy`.
    pub fn matvec_t_add(&self, dy: &[f64], dx: &mut [f64]) {
        let (_, cols) = self.dims();
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (d, w) in dx.iter_mut().zip(&self.data[r * cols..(r + 1) * cols]) {
                *d += w * g;
            }
        }
    }

    /// `W += dy ⊗ x`.
    pub fn outer_add(&mut self, dy: &[f64], x: &[f64]) {
        let (_, cols) = self.dims();
        for (r, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            for (w, v) in self.data[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *w += g * v;
            }
        }
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }
}

/// Ordered collection of named tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    pub tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn zeros_like(other: &ParamSet) -> Self {
        Self {
            tensors: other
                .tensors
                .iter()
                .map(|t| Tensor::zeros(t.name.clone(), t.shape.clone()))
                .collect(),
        }
    }

    /// Names and shapes only.
    pub fn shape_tree(&self) -> Vec<(&str, &[usize])> {
        self.tensors
            .iter()
            .map(|t| (t.name.as_str(), t.shape.as_slice()))
            .collect()
    }

    pub fn same_shape(&self, other: &ParamSet) -> bool {
        self.shape_tree() == other.shape_tree()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn l2_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::sum_sq).sum::<f64>().sqrt()
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = &f64> {
        self.tensors.iter().flat_map(|t| t.data.iter())
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut f64> {
        self.tensors.iter_mut().flat_map(|t| t.data.iter_mut())
    }

    pub fn scale(&mut self, s: f64) {
        self.iter_mut().for_each(|x| *x *= s);
    }

    /// `self += s * other`.
    pub fn axpy(&mut self, s: f64, other: &ParamSet) {
        debug_assert!(self.same_shape(other));
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += s * b;
        }
    }

    pub fn add_assign(&mut self, other: &ParamSet) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            *a += b;
        }
    }

    /// `self - other`, elementwise.
    pub fn sub(&self, other: &ParamSet) -> ParamSet {
        let mut out = self.clone();
        for (a, b) in out.iter_mut().zip(other.iter()) {
            *a -= b;
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.iter().all(|x| x.is_finite())
    }
}
