//! Dense row-major `f64` arrays with forward operations and their
//! vector-Jacobian products.
//!
//! There is no tape: every consumer composes the VJPs it needs by hand.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Forward output together with whatever the backward pass needs.
#[derive(Debug, Clone)]
pub struct GradPair<C> {
    pub value: Tensor,
    pub cache: C,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() {
            return Err(Error::Dimension("tensor shape must have at least one axis".into()));
        }
        if let Some(axis) = shape.iter().position(|&n| n == 0) {
            return Err(Error::Dimension(format!(
                "axis {axis} of shape {shape:?} has zero length"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&n| n > 0),
            "invalid shape {shape:?}"
        );
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    /// Builds a 2-D tensor from equal-length rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::EmptyInput("no rows given".into()))?;
        let cols = first.as_ref().len();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            let row = row.as_ref();
            if row.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {i} has {} columns, row 0 has {cols}",
                    row.len()
                )));
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![rows.len(), cols], data)
    }

    /// I.i.d. uniform entries on `[-bound, bound]`.
    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Self {
        let mut t = Self::zeros(shape);
        for x in &mut t.data {
            *x = rng.random_range(-bound..=bound);
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` of a 2-D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::Dimension(format!(
                "expected a matrix, got shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap();
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let cols = *self.shape.last().unwrap();
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn at2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn transpose(&self) -> Result<Self> {
        let (r, c) = self.dims2()?;
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Self::new(vec![c, r], out)
    }

    /// Copy of columns `start..end` of a matrix.
    pub fn columns(&self, start: usize, end: usize) -> Result<Self> {
        let (r, c) = self.dims2()?;
        if start >= end || end > c {
            return Err(Error::Dimension(format!(
                "column range {start}..{end} invalid for {r}x{c}"
            )));
        }
        let width = end - start;
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&self.data[i * c + start..i * c + end]);
        }
        Self::new(vec![r, width], out)
    }

    /// Adds `block` into columns `start..start + block.cols`.
    pub fn add_columns(&mut self, start: usize, block: &Tensor) -> Result<()> {
        let (r, c) = self.dims2()?;
        let (br, bc) = block.dims2()?;
        if br != r || start + bc > c {
            return Err(Error::Dimension(format!(
                "cannot add {br}x{bc} block at column {start} of {r}x{c}"
            )));
        }
        for i in 0..r {
            let dst = &mut self.data[i * c + start..i * c + start + bc];
            for (d, s) in dst.iter_mut().zip(block.row(i)) {
                *d += s;
            }
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.check_same_shape(other, "add")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, k: f64) {
        for x in &mut self.data {
            *x *= k;
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Result<f64> {
        self.check_same_shape(other, "compare")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    fn check_same_shape(&self, other: &Tensor, op: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape, other.shape
            )));
        }
        Ok(())
    }
}

/// `a · b` for `a: M×K`, `b: K×N`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (k2, n) = b.dims2()?;
    if k != k2 {
        return Err(Error::Dimension(format!(
            "matmul of {:?} by {:?}: inner dimensions {k} and {k2} differ",
            a.shape, b.shape
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Tensor::new(vec![m, n], out)
}

/// VJP of [`matmul`]: returns `(g·bᵀ, aᵀ·g)`.
pub fn matmul_vjp(a: &Tensor, b: &Tensor, g: &Tensor) -> Result<(Tensor, Tensor)> {
    let (m, _) = a.dims2()?;
    let (_, n) = b.dims2()?;
    if g.shape != [m, n] {
        return Err(Error::Dimension(format!(
            "matmul gradient has shape {:?}, expected [{m}, {n}]",
            g.shape
        )));
    }
    let grad_a = matmul(g, &b.transpose()?)?;
    let grad_b = matmul(&a.transpose()?, g)?;
    Ok((grad_a, grad_b))
}

fn axis_layout(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax_axis(x: &Tensor, axis: usize) -> Result<Tensor> {
    let (outer, len, inner) = axis_layout(&x.shape, axis)?;
    let mut out = x.data.clone();
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| x.data[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for k in 0..len {
                let e = (x.data[idx(k)] - max).exp();
                out[idx(k)] = e;
                sum += e;
            }
            for k in 0..len {
                out[idx(k)] /= sum;
            }
        }
    }
    Tensor::new(x.shape.clone(), out)
}

/// VJP of [`softmax_axis`] given its output `y`: `y ⊙ (g − Σ_axis g⊙y)`.
pub fn softmax_axis_vjp(y: &Tensor, g: &Tensor, axis: usize) -> Result<Tensor> {
    y.check_same_shape(g, "softmax vjp")?;
    let (outer, len, inner) = axis_layout(&y.shape, axis)?;
    let mut out = vec![0.0; y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |k: usize| (o * len + k) * inner + i;
            let inner_prod: f64 = (0..len).map(|k| y.data[idx(k)] * g.data[idx(k)]).sum();
            for k in 0..len {
                out[idx(k)] = y.data[idx(k)] * (g.data[idx(k)] - inner_prod);
            }
        }
    }
    Tensor::new(y.shape.clone(), out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// VJP of [`relu`]; the subgradient at exactly zero is zero.
pub fn relu_vjp(x: &Tensor, g: &Tensor) -> Result<Tensor> {
    x.check_same_shape(g, "relu vjp")?;
    let data = x
        .data
        .iter()
        .zip(&g.data)
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(x.shape.clone(), data)
}

/// Adds the vector `bias` to every row of the matrix `x`.
pub fn add_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = x.dims2()?;
    if bias.shape != [c] {
        return Err(Error::Dimension(format!(
            "bias of shape {:?} cannot be added to rows of {r}x{c}",
            bias.shape
        )));
    }
    let mut out = x.clone();
    for i in 0..r {
        for (o, b) in out.row_mut(i).iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(out)
}

/// Bias half of the [`add_bias`] VJP: column sums of `g`.
pub fn add_bias_vjp(g: &Tensor) -> Result<Tensor> {
    let (r, c) = g.dims2()?;
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Tensor::vector(out)
}
