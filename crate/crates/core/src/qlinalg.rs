//! Compute-graph operators with FMAC semantics.
//!
//! Inputs are format-representable tensors, reductions accumulate `a <- a + x*y`
//! in a wide accumulator with no intermediate rounding, and every operator
//! output is rounded exactly once into the target format.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatsim::{FloatFormat, Rounding};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }
}

/// Tensor whose every element is exactly representable in `fmt`.
#[derive(Clone, Debug, PartialEq)]
pub struct QTensor {
    shape: Shape,
    data: Vec<f64>,
    fmt: FloatFormat,
}

impl QTensor {
    /// Wraps already-representable values; rejects anything else.
    pub fn new(shape: Shape, data: Vec<f64>, fmt: FloatFormat) -> Result<Self> {
        if shape.len() != data.len() {
            return Err(Error::Shape(format!(
                "{shape:?} needs {} elements, got {}",
                shape.len(),
                data.len()
            )));
        }
        if let Some(&bad) = data.iter().find(|v| !fmt.is_representable(**v)) {
            return Err(Error::NotRepresentable {
                value: bad,
                format: fmt,
            });
        }
        Ok(Self { shape, data, fmt })
    }

    /// Nearest-rounds arbitrary values into `fmt`.
    pub fn quantize(shape: Shape, values: &[f64], fmt: FloatFormat) -> Result<Self> {
        let data = values.iter().map(|&v| fmt.round_nearest(v)).collect();
        Self::new(shape, data, fmt)
    }

    pub fn vector(values: &[f64], fmt: FloatFormat) -> Result<Self> {
        Self::quantize(Shape::Vector(values.len()), values, fmt)
    }

    pub fn matrix(rows: usize, cols: usize, values: &[f64], fmt: FloatFormat) -> Result<Self> {
        Self::quantize(Shape::Matrix(rows, cols), values, fmt)
    }

    pub fn zeros(shape: Shape, fmt: FloatFormat) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.len()],
            fmt,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn fmt(&self) -> FloatFormat {
        self.fmt
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// `(rows, cols)`; a vector is a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape {
            Shape::Vector(n) => (1, n),
            Shape::Matrix(r, c) => (r, c),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, cols) = self.dims();
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn transpose(&self) -> Self {
        let (rows, cols) = self.dims();
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..cols {
            for r in 0..rows {
                data.push(self.data[r * cols + c]);
            }
        }
        Self {
            shape: Shape::Matrix(cols, rows),
            data,
            fmt: self.fmt,
        }
    }

    /// Same values, reshaped to a vector.
    pub fn flatten(mut self) -> Self {
        self.shape = Shape::Vector(self.data.len());
        self
    }

    /// Re-expresses the values in a wider format that contains them exactly.
    pub fn widen(&self, fmt: FloatFormat) -> Result<Self> {
        Self::new(self.shape, self.data.clone(), fmt)
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<f64>, fmt: FloatFormat) -> Self {
        debug_assert!(data.iter().all(|v| fmt.is_representable(*v)));
        Self { shape, data, fmt }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Precision of the FMAC accumulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AccumPrecision {
    /// IEEE binary32 accumulator, as in 16-bit FMAC hardware.
    #[default]
    Wide32,
    /// binary64 accumulator, the oracle.
    Wide64,
}

/// Raw accumulation `init + sum(x_i * y_i)`, left to right, one fused
/// multiply-add per term, no rounding beyond the accumulator's own.
pub fn fmac_accumulate(init: f64, xs: &[f64], ys: &[f64], acc: AccumPrecision) -> f64 {
    debug_assert_eq!(xs.len(), ys.len());
    match acc {
        AccumPrecision::Wide32 => {
            let mut a = init as f32;
            for (&x, &y) in xs.iter().zip(ys) {
                a = (x as f32).mul_add(y as f32, a);
            }
            f64::from(a)
        }
        AccumPrecision::Wide64 => xs
            .iter()
            .zip(ys)
            .fold(init, |a, (&x, &y)| x.mul_add(y, a)),
    }
}

fn check_accumulator(acc: AccumPrecision, inputs: &[&QTensor]) -> Result<()> {
    if acc == AccumPrecision::Wide32 {
        if let Some(t) = inputs.iter().find(|t| !t.fmt.fits_in_f32()) {
            return Err(Error::Config(format!(
                "{} inputs do not fit a 32-bit accumulator",
                t.fmt
            )));
        }
    }
    Ok(())
}

fn finite(v: f64, op: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

/// Single-rounded dot product into `fmt`.
pub fn qdot(
    x: &QTensor,
    y: &QTensor,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
    acc: AccumPrecision,
) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::Shape(format!(
            "dot of lengths {} and {}",
            x.len(),
            y.len()
        )));
    }
    check_accumulator(acc, &[x, y])?;
    let a = finite(fmac_accumulate(0.0, &x.data, &y.data, acc), "qdot accumulator")?;
    finite(rounding.round(a, fmt)?, "qdot")
}

/// `A x`, each output element an independent single-rounded dot product.
pub fn qmatvec(
    a: &QTensor,
    x: &QTensor,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
    acc: AccumPrecision,
) -> Result<QTensor> {
    let (rows, cols) = a.dims();
    if cols != x.len() {
        return Err(Error::Shape(format!(
            "matvec {rows}x{cols} with vector of length {}",
            x.len()
        )));
    }
    check_accumulator(acc, &[a, x])?;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let s = finite(fmac_accumulate(0.0, a.row(r), &x.data, acc), "qmatvec accumulator")?;
        out.push(finite(rounding.round(s, fmt)?, "qmatvec")?);
    }
    Ok(QTensor::from_parts_unchecked(Shape::Vector(rows), out, fmt))
}

/// `A B` with one rounding per output element.
pub fn qmatmul(
    a: &QTensor,
    b: &QTensor,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
    acc: AccumPrecision,
) -> Result<QTensor> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
    }
    check_accumulator(acc, &[a, b])?;
    let bt = b.transpose();
    let mut out = Vec::with_capacity(m * n);
    for i in 0..m {
        for j in 0..n {
            let s = finite(fmac_accumulate(0.0, a.row(i), bt.row(j), acc), "qmatmul accumulator")?;
            out.push(finite(rounding.round(s, fmt)?, "qmatmul")?);
        }
    }
    Ok(QTensor::from_parts_unchecked(Shape::Matrix(m, n), out, fmt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ElementwiseOp {
    fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ElementwiseOp::Add => a + b,
            ElementwiseOp::Sub => a - b,
            ElementwiseOp::Mul => a * b,
            ElementwiseOp::Div => a / b,
        }
    }
}

/// Second operand of an elementwise operator; a scalar broadcasts
/// (`Mul` against a scalar is the `scale` operator).
#[derive(Clone, Copy, Debug)]
pub enum Operand<'a> {
    Tensor(&'a QTensor),
    Scalar(f64),
}

/// One scalar operator: exact-in-`f64` result, rounded once into `fmt`.
///
/// Sums, differences and products of values from formats with at most 24
/// significant bits are exact in `f64`; quotients and square roots are
/// correctly rounded there first, and that double rounding is innocuous
/// because 53 >= 2p + 2.
pub fn qscalar(
    op: ElementwiseOp,
    a: f64,
    b: f64,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
) -> Result<f64> {
    finite(rounding.round(op.apply(a, b), fmt)?, "elementwise")
}

pub fn qelementwise(
    op: ElementwiseOp,
    a: &QTensor,
    b: Operand<'_>,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
) -> Result<QTensor> {
    let out = match b {
        Operand::Tensor(b) => {
            if a.len() != b.len() {
                return Err(Error::Shape(format!(
                    "elementwise {:?} vs {:?}",
                    a.shape, b.shape
                )));
            }
            a.data
                .iter()
                .zip(&b.data)
                .map(|(&x, &y)| qscalar(op, x, y, fmt, rounding))
                .collect::<Result<Vec<_>>>()?
        }
        Operand::Scalar(s) => a
            .data
            .iter()
            .map(|&x| qscalar(op, x, s, fmt, rounding))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(QTensor::from_parts_unchecked(a.shape, out, fmt))
}

/// Elementwise square root, single-rounded.
pub fn qsqrt(a: &QTensor, fmt: FloatFormat, rounding: &mut Rounding<'_>) -> Result<QTensor> {
    let out = a
        .data
        .iter()
        .map(|&x| finite(rounding.round(x.sqrt(), fmt)?, "sqrt"))
        .collect::<Result<Vec<_>>>()?;
    Ok(QTensor::from_parts_unchecked(a.shape, out, fmt))
}
