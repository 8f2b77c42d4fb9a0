//! Synthetic problems with quantization inserted at every operator output.
//!
//! Least-squares regression follows the FMAC pattern
//! `Q(Q(Q(x_i^T w - y_i)) x_i)`: one rounding for the residual (the dot product
//! itself accumulates wide), one for the activation gradient, one per weight
//! gradient coordinate. The one-hidden-layer MLP applies the same
//! one-rounding-per-operator rule to a small compute graph.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatsim::{FloatFormat, Rounding};
use crate::optim::UpdatePolicy;
use crate::qlinalg::{
    fmac_accumulate, qmatmul, qscalar, AccumPrecision, ElementwiseOp, QTensor, Shape,
};
use crate::rng::{label_key, RngStream};

/// Parameters that fully determine a least-squares instance. Data is always
/// regenerated from these, never stored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LsqParams {
    pub d: usize,
    pub n: usize,
    pub w_range: [f64; 2],
    pub noise_std: f64,
    pub seed: u64,
}

impl LsqParams {
    /// Noiseless instance for theorem validation (interpolation holds).
    pub fn theory(seed: u64) -> Self {
        Self {
            d: 10,
            n: 2048,
            w_range: [0.0, 100.0],
            noise_std: 0.0,
            seed,
        }
    }

    /// The noisy setup of the least-squares figure experiment.
    pub fn figure(seed: u64) -> Self {
        Self {
            noise_std: 0.5,
            ..Self::theory(seed)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DataConstants {
    /// `max_i ||x_i||^2`, the per-sample gradient Lipschitz constant.
    pub lipschitz: f64,
    /// Smallest eigenvalue of `(1/n) X^T X`; zero when `singular`.
    pub mu: f64,
    pub singular: bool,
}

/// A least-squares problem: `n x d` Gaussian data, optimum `w_star`,
/// labels `y = X w_star + noise`.
#[derive(Clone, Debug)]
pub struct LsqInstance {
    params: LsqParams,
    x: Vec<f64>,
    noise: Vec<f64>,
    w_star: Vec<f64>,
    master: LsqData,
    constants: DataConstants,
}

/// One precision's copy of the data: `x` representable in `fmt`, labels
/// rebuilt from the quantized rows so interpolation survives quantization.
#[derive(Clone, Debug)]
pub struct LsqData {
    fmt: FloatFormat,
    n: usize,
    d: usize,
    x: Vec<f64>,
    y: Vec<f64>,
}

pub fn gen_lsq(params: &LsqParams) -> Result<LsqInstance> {
    let LsqParams {
        d,
        n,
        w_range: [lo, hi],
        noise_std,
        seed,
    } = *params;
    if d == 0 || n < d {
        return Err(Error::Config(format!("need d >= 1 and n >= d, got d={d} n={n}")));
    }
    if !(hi > lo) || noise_std < 0.0 {
        return Err(Error::Config(format!(
            "bad instance range [{lo}, {hi}) or noise {noise_std}"
        )));
    }
    let mut data_rng = RngStream::keyed(seed, &[label_key("lsq-x")]);
    let x: Vec<f64> = (0..n * d)
        .map(|_| data_rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut w_rng = RngStream::keyed(seed, &[label_key("lsq-w-star")]);
    let w_star: Vec<f64> = (0..d)
        .map(|_| lo + (hi - lo) * w_rng.next_uniform())
        .collect();
    let mut noise_rng = RngStream::keyed(seed, &[label_key("lsq-noise")]);
    let noise: Vec<f64> = (0..n)
        .map(|_| {
            if noise_std == 0.0 {
                0.0
            } else {
                noise_std * noise_rng.sample::<f64, _>(StandardNormal)
            }
        })
        .collect();
    let master = LsqData::build(FloatFormat::FP64, n, d, x.clone(), &w_star, &noise);
    let constants = compute_constants(&master.x, n, d)?;
    Ok(LsqInstance {
        params: params.clone(),
        x,
        noise,
        w_star,
        master,
        constants,
    })
}

impl LsqInstance {
    pub fn params(&self) -> &LsqParams {
        &self.params
    }

    pub fn d(&self) -> usize {
        self.params.d
    }

    pub fn n(&self) -> usize {
        self.params.n
    }

    pub fn w_star(&self) -> &[f64] {
        &self.w_star
    }

    pub fn noise_std(&self) -> f64 {
        self.params.noise_std
    }

    /// The unquantized (binary64) data.
    pub fn master(&self) -> &LsqData {
        &self.master
    }

    pub fn constants(&self) -> DataConstants {
        self.constants
    }

    /// Data quantized once into `fmt`.
    pub fn data(&self, fmt: FloatFormat) -> LsqData {
        if fmt == FloatFormat::FP64 {
            return self.master.clone();
        }
        let xq = self.x.iter().map(|&v| fmt.round_nearest(v)).collect();
        LsqData::build(fmt, self.n(), self.d(), xq, &self.w_star, &self.noise)
    }

    /// `||w - w*||`.
    pub fn distance(&self, w: &[f64]) -> f64 {
        distance(w, &self.w_star)
    }
}

impl LsqData {
    fn build(fmt: FloatFormat, n: usize, d: usize, x: Vec<f64>, w_star: &[f64], noise: &[f64]) -> Self {
        let y = (0..n)
            .map(|i| dot64(&x[i * d..(i + 1) * d], w_star) + noise[i])
            .collect();
        Self { fmt, n, d, x, y }
    }

    pub fn fmt(&self) -> FloatFormat {
        self.fmt
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.x[i * self.d..(i + 1) * self.d]
    }

    pub fn label(&self, i: usize) -> f64 {
        self.y[i]
    }

    pub fn rows(&self) -> &[f64] {
        &self.x
    }

    pub fn constants(&self) -> Result<DataConstants> {
        compute_constants(&self.x, self.n, self.d)
    }

    /// Training loss `1/(2n) sum_i (x_i^T w - y_i)^2` in binary64.
    pub fn loss(&self, w: &[f64]) -> f64 {
        let sum: f64 = (0..self.n)
            .map(|i| {
                let r = dot64(self.row(i), w) - self.y[i];
                r * r
            })
            .sum();
        0.5 * sum / self.n as f64
    }
}

/// Plain left-to-right binary64 dot product.
pub fn dot64(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// `L = max_i ||x_i||^2` and the smallest eigenvalue of `(1/n) X^T X` by
/// cyclic Jacobi rotations.
pub fn compute_constants(x: &[f64], n: usize, d: usize) -> Result<DataConstants> {
    if d == 0 || n < d || x.len() != n * d {
        return Err(Error::Shape(format!("data of {} values is not {n}x{d} with n >= d", x.len())));
    }
    let lipschitz = x
        .chunks(d)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>())
        .fold(0.0, f64::max);

    let mut cov = vec![0.0; d * d];
    for r in x.chunks(d) {
        for p in 0..d {
            for q in 0..d {
                cov[p * d + q] += r[p] * r[q];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let eig = jacobi_eigenvalues(cov, d);
    let max = eig.iter().cloned().fold(f64::MIN, f64::max);
    let min = eig.iter().cloned().fold(f64::MAX, f64::min);
    let singular = min <= 1e-12 * max.max(f64::MIN_POSITIVE);
    Ok(DataConstants {
        lipschitz,
        mu: if singular { 0.0 } else { min },
        singular,
    })
}

/// Eigenvalues of a symmetric `d x d` matrix (row-major), iterating sweeps
/// until the off-diagonal Frobenius norm drops to 1e-12.
pub fn jacobi_eigenvalues(mut a: Vec<f64>, d: usize) -> Vec<f64> {
    const TOL: f64 = 1e-12;
    const MAX_SWEEPS: usize = 100;
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for p in 0..d {
            for q in 0..d {
                if p != q {
                    s += a[p * d + q] * a[p * d + q];
                }
            }
        }
        s.sqrt()
    };
    for _ in 0..MAX_SWEEPS {
        if off(&a) <= TOL {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = a[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - s * akq;
                    a[k * d + q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - s * aqk;
                    a[q * d + k] = s * apk + c * aqk;
                }
            }
        }
    }
    (0..d).map(|i| a[i * d + i]).collect()
}

/// Exact binary64 per-sample gradient `(x_i^T w - y_i) x_i`.
pub fn lsq_grad_exact(w: &[f64], data: &LsqData, i: usize) -> Vec<f64> {
    let x = data.row(i);
    let r = dot64(x, w) - data.label(i);
    x.iter().map(|xj| r * xj).collect()
}

/// Quantized per-sample gradient `Q(Q(Q(x_i^T w - y_i)) x_i)` in `fmt`.
///
/// The label seeds the accumulator, the dot product accumulates in `acc`, and
/// the residual, activation gradient and each gradient coordinate are rounded
/// once with `rounding`.
pub fn lsq_grad_quantized(
    w: &QTensor,
    data: &LsqData,
    i: usize,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
    acc: AccumPrecision,
) -> Result<QTensor> {
    if w.len() != data.d {
        return Err(Error::Shape(format!(
            "weights of length {} for {}-dim data",
            w.len(),
            data.d
        )));
    }
    if acc == AccumPrecision::Wide32 && !(w.fmt().fits_in_f32() && data.fmt.fits_in_f32()) {
        return Err(Error::Config(format!(
            "{} weights / {} data do not fit a 32-bit accumulator",
            w.fmt(),
            data.fmt
        )));
    }
    let x = data.row(i);
    let acc_value = fmac_accumulate(-data.label(i), x, w.data(), acc);
    if !acc_value.is_finite() {
        return Err(Error::NonFinite("least-squares residual".into()));
    }
    let residual = rounding.round(acc_value, fmt)?;
    let act_grad = rounding.round(residual, fmt)?;
    let grad = x
        .iter()
        .map(|&xj| qscalar(ElementwiseOp::Mul, act_grad, xj, fmt, rounding))
        .collect::<Result<Vec<_>>>()?;
    Ok(QTensor::from_parts_unchecked(Shape::Vector(x.len()), grad, fmt))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightsPrecision {
    Fmt16,
    Master32,
}

/// Where rounding happens in a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QuantPolicy {
    pub round_forward_backward: bool,
    pub weight_update: UpdatePolicy,
    pub weights_precision: WeightsPrecision,
}

impl QuantPolicy {
    /// Master32 storage follows from a Master32 update policy and vice versa.
    pub fn new(round_forward_backward: bool, weight_update: UpdatePolicy) -> Self {
        let weights_precision = if weight_update == UpdatePolicy::Master32 {
            WeightsPrecision::Master32
        } else {
            WeightsPrecision::Fmt16
        };
        Self {
            round_forward_backward,
            weight_update,
            weights_precision,
        }
    }

    /// Format in which forward and backward operator outputs are rounded.
    pub fn compute_format(&self, fmt: FloatFormat) -> FloatFormat {
        if self.round_forward_backward {
            fmt
        } else {
            FloatFormat::FP32
        }
    }

    /// Storage format of weights and optimizer state.
    pub fn storage_format(&self, fmt: FloatFormat) -> FloatFormat {
        match self.weights_precision {
            WeightsPrecision::Fmt16 => fmt,
            WeightsPrecision::Master32 => FloatFormat::FP32,
        }
    }
}

/// One hidden ReLU layer, two-class logistic output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dim: usize,
}

pub const MLP_CLASSES: usize = 2;

/// MLP parameters (also used for their gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    /// hidden x input
    pub w1: QTensor,
    pub b1: QTensor,
    /// classes x hidden
    pub w2: QTensor,
    pub b2: QTensor,
}

impl MlpParams {
    pub const NAMES: [&'static str; 4] = ["w1", "b1", "w2", "b2"];

    pub fn zeros(spec: MlpSpec, fmt: FloatFormat) -> Self {
        Self {
            w1: QTensor::zeros(Shape::Matrix(spec.hidden_dim, spec.input_dim), fmt),
            b1: QTensor::zeros(Shape::Vector(spec.hidden_dim), fmt),
            w2: QTensor::zeros(Shape::Matrix(MLP_CLASSES, spec.hidden_dim), fmt),
            b2: QTensor::zeros(Shape::Vector(MLP_CLASSES), fmt),
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases.
    pub fn init(spec: MlpSpec, fmt: FloatFormat, rng: &mut RngStream) -> Result<Self> {
        let mut uniform = |len: usize, fan_in: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| bound * (2.0 * rng.next_uniform() - 1.0)).collect()
        };
        let w1 = uniform(spec.hidden_dim * spec.input_dim, spec.input_dim);
        let w2 = uniform(MLP_CLASSES * spec.hidden_dim, spec.hidden_dim);
        Ok(Self {
            w1: QTensor::matrix(spec.hidden_dim, spec.input_dim, &w1, fmt)?,
            b1: QTensor::zeros(Shape::Vector(spec.hidden_dim), fmt),
            w2: QTensor::matrix(MLP_CLASSES, spec.hidden_dim, &w2, fmt)?,
            b2: QTensor::zeros(Shape::Vector(MLP_CLASSES), fmt),
        })
    }

    pub fn tensors(&self) -> [&QTensor; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> [&mut QTensor; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// A batch of inputs (rows of `x`) with class labels.
#[derive(Clone, Debug)]
pub struct MlpBatch {
    pub x: QTensor,
    pub labels: Vec<usize>,
}

/// Two Gaussian blobs centred at `+-1/sqrt(dim)` per coordinate, unit variance.
pub fn gen_blobs(n: usize, dim: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let mut rng = RngStream::keyed(seed, &[label_key("mlp-blobs")]);
    let shift = 1.0 / (dim as f64).sqrt();
    let mut x = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let label = rng.next_index(MLP_CLASSES);
        let centre = if label == 0 { -shift } else { shift };
        for _ in 0..dim {
            x.push(centre + rng.sample::<f64, _>(StandardNormal));
        }
        labels.push(label);
    }
    (x, labels)
}

fn add_row_bias(
    m: &QTensor,
    bias: &QTensor,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
) -> Result<QTensor> {
    let (rows, cols) = m.dims();
    let mut out = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for (v, b) in m.row(r).iter().zip(bias.data()) {
            out.push(qscalar(ElementwiseOp::Add, *v, *b, fmt, rounding)?);
        }
    }
    Ok(QTensor::from_parts_unchecked(m.shape(), out, fmt))
}

fn column_sums(
    m: &QTensor,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
    acc: AccumPrecision,
) -> Result<QTensor> {
    let (rows, _) = m.dims();
    let ones = QTensor::from_parts_unchecked(Shape::Matrix(rows, 1), vec![1.0; rows], fmt);
    let sums = qmatmul(&m.transpose(), &ones, fmt, rounding, acc)?;
    Ok(sums.flatten())
}

/// Mean logistic loss over the batch and the gradients of every parameter.
///
/// Every operator output (matmuls, bias adds, loss, and each backward
/// operator) is rounded once into `fmt`. With `fmt = FP64` and a `Wide64`
/// accumulator the computation is plain binary64.
pub fn mlp_forward_backward(
    params: &MlpParams,
    batch: &MlpBatch,
    fmt: FloatFormat,
    rounding: &mut Rounding<'_>,
    acc: AccumPrecision,
) -> Result<(f64, MlpParams)> {
    let (b, _) = batch.x.dims();
    if batch.labels.len() != b || b == 0 {
        return Err(Error::Shape(format!("{} labels for {b} rows", batch.labels.len())));
    }
    let a1 = qmatmul(&batch.x, &params.w1.transpose(), fmt, rounding, acc)?;
    let h1 = add_row_bias(&a1, &params.b1, fmt, rounding)?;
    let relu: Vec<f64> = h1.data().iter().map(|v| v.max(0.0)).collect();
    let r = QTensor::from_parts_unchecked(h1.shape(), relu, fmt);
    let z0 = qmatmul(&r, &params.w2.transpose(), fmt, rounding, acc)?;
    let z = add_row_bias(&z0, &params.b2, fmt, rounding)?;

    let mut loss_sum = 0.0;
    let mut dz = Vec::with_capacity(b * MLP_CLASSES);
    for (row, &label) in batch.labels.iter().enumerate() {
        let logits = z.row(row);
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        loss_sum += rounding.round(lse - logits[label], fmt)?;
        for (k, v) in logits.iter().enumerate() {
            let p = (v - lse).exp();
            let target = if k == label { 1.0 } else { 0.0 };
            dz.push(rounding.round((p - target) / b as f64, fmt)?);
        }
    }
    let loss = rounding.round(loss_sum / b as f64, fmt)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("mlp loss".into()));
    }
    let dz = QTensor::from_parts_unchecked(Shape::Matrix(b, MLP_CLASSES), dz, fmt);

    let dw2 = qmatmul(&dz.transpose(), &r, fmt, rounding, acc)?;
    let db2 = column_sums(&dz, fmt, rounding, acc)?;
    let dr = qmatmul(&dz, &params.w2, fmt, rounding, acc)?;
    let dh: Vec<f64> = dr
        .data()
        .iter()
        .zip(h1.data())
        .map(|(g, h)| if *h > 0.0 { *g } else { 0.0 })
        .collect();
    let dh = QTensor::from_parts_unchecked(dr.shape(), dh, fmt);
    let dw1 = qmatmul(&dh.transpose(), &batch.x, fmt, rounding, acc)?;
    let db1 = column_sums(&dh, fmt, rounding, acc)?;
    Ok((
        loss,
        MlpParams {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        },
    ))
}
