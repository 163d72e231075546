//! Dense vectors, row-major matrices and flat parameter vectors.
//!
//! Everything is `f64`. Public constructors reject NaN and infinities; the
//! arithmetic helpers only re-check in debug builds so the training loops
//! stay cheap.

use std::ops::{Deref, Index};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_finite(data: &[f64], what: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// A finite dense vector.
#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        check_finite(&data, "vector")?;
        Ok(Vector(data))
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Vector::new(v)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        check_finite(&data, "matrix")?;
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        &self.data[r * self.cols + c]
    }
}

/// `m · v`.
pub fn matvec(m: &Matrix, v: &Vector) -> Result<Vector> {
    if m.cols != v.len() {
        return Err(Error::DimensionMismatch {
            expected: m.cols,
            actual: v.len(),
        });
    }
    let mut out = vec![0.0; m.rows];
    matvec_into(&m.data, m.cols, v, &mut out);
    Ok(Vector(out))
}

/// `out = w · v` for a row-major slice with `cols` columns. No validation.
#[inline]
pub(crate) fn matvec_into(w: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o = row.iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

/// `out += w · v`.
#[inline]
pub(crate) fn matvec_acc(w: &[f64], cols: usize, v: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), cols * out.len());
    for (o, row) in out.iter_mut().zip(w.chunks_exact(cols)) {
        *o += row.iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// `out += wᵀ · u` for a row-major `w` with `cols` columns.
#[inline]
pub(crate) fn matvec_t_acc(w: &[f64], cols: usize, u: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), cols * u.len());
    for (&ui, row) in u.iter().zip(w.chunks_exact(cols)) {
        if ui != 0.0 {
            for (o, a) in out.iter_mut().zip(row) {
                *o += ui * a;
            }
        }
    }
}

/// `g += u ⊗ v` (outer product accumulated into a row-major block).
#[inline]
pub(crate) fn outer_acc(g: &mut [f64], u: &[f64], v: &[f64]) {
    let cols = v.len();
    debug_assert_eq!(g.len(), u.len() * cols);
    for (&ui, row) in u.iter().zip(g.chunks_exact_mut(cols)) {
        if ui != 0.0 {
            for (o, b) in row.iter_mut().zip(v) {
                *o += ui * b;
            }
        }
    }
}

/// One named block inside a [`ParamVector`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub offset: usize,
    pub shape: (usize, usize),
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered, contiguous description of how a flat parameter vector is split
/// into named blocks.
#[derive(Clone, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
}

impl Layout {
    pub fn new() -> Self {
        Layout::default()
    }

    /// Appends a block directly after the previous one.
    pub fn push(mut self, name: &str, rows: usize, cols: usize) -> Self {
        let offset = self.total_len();
        self.blocks.push(ParamBlock {
            name: name.to_string(),
            offset,
            shape: (rows, cols),
        });
        self
    }

    /// A single unnamed block of `n` scalars.
    pub fn flat(n: usize) -> Self {
        Layout::new().push("theta", n, 1)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn total_len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.offset + b.len())
    }
}

/// Flat view of every trainable scalar of a model, tagged with its layout.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    layout: Arc<Layout>,
}

impl ParamVector {
    pub fn new(layout: Arc<Layout>, data: Vec<f64>) -> Result<Self> {
        if data.len() != layout.total_len() {
            return Err(Error::DimensionMismatch {
                expected: layout.total_len(),
                actual: data.len(),
            });
        }
        check_finite(&data, "parameter vector")?;
        Ok(ParamVector { data, layout })
    }

    /// Shorthand for a single-block vector; handy for toy objectives.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        ParamVector::new(Arc::new(Layout::flat(values.len())), values.to_vec())
    }

    pub fn zeros(layout: Arc<Layout>) -> Self {
        let n = layout.total_len();
        ParamVector {
            data: vec![0.0; n],
            layout,
        }
    }

    pub fn zeros_like(other: &ParamVector) -> Self {
        ParamVector::zeros(other.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.data
    }

    /// Slice of one named block.
    pub fn block(&self, name: &str) -> Option<&[f64]> {
        self.layout.block(name).map(|b| &self.data[b.range()])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    /// `self += alpha * x` in place.
    pub fn axpy_in_place(&mut self, alpha: f64, x: &ParamVector) -> Result<()> {
        if !self.same_layout(x) {
            return Err(Error::LayoutMismatch);
        }
        for (y, xv) in self.data.iter_mut().zip(&x.data) {
            *y += alpha * xv;
        }
        Ok(())
    }
}

/// A differentiable scalar function of a parameter vector.
pub trait Objective {
    fn loss(&self, theta: &ParamVector) -> Result<f64>;
    fn grad(&self, theta: &ParamVector) -> Result<ParamVector>;
}

pub fn dot(a: &ParamVector, b: &ParamVector) -> Result<f64> {
    if !a.same_layout(b) {
        return Err(Error::LayoutMismatch);
    }
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum())
}

/// Returns `y + alpha * x`.
pub fn axpy(y: &ParamVector, alpha: f64, x: &ParamVector) -> Result<ParamVector> {
    let mut out = y.clone();
    out.axpy_in_place(alpha, x)?;
    Ok(out)
}

/// Central-difference gradient of `f` at `p`.
pub fn finite_difference_grad<F>(mut f: F, p: &ParamVector, eps: f64) -> Result<ParamVector>
where
    F: FnMut(&ParamVector) -> Result<f64>,
{
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let mut probe = p.clone();
    let mut grad = ParamVector::zeros_like(p);
    for i in 0..p.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let up = f(&probe)?;
        probe.data[i] = orig - eps;
        let down = f(&probe)?;
        probe.data[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite("finite-difference evaluation"));
        }
        grad.data[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}
