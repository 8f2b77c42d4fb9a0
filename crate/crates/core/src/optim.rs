//! SGD with momentum and AdamW in fully quantized arithmetic.
//!
//! Every optimizer operator output is nearest-rounded into the weight storage
//! format. Only the final weight write depends on the [`UpdatePolicy`]:
//! nearest, stochastic (`w ⊖ u`), Kahan-compensated, Kahan with a stochastic
//! accumulate, or a 32-bit master copy updated without 16-bit rounding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatsim::{FloatFormat, Rounding};
use crate::qlinalg::{QTensor, Shape};
use crate::rng::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdatePolicy {
    Nearest,
    Stochastic,
    Kahan,
    KahanStochastic,
    Master32,
}

impl UpdatePolicy {
    pub const ALL: [UpdatePolicy; 5] = [
        UpdatePolicy::Nearest,
        UpdatePolicy::Stochastic,
        UpdatePolicy::Kahan,
        UpdatePolicy::KahanStochastic,
        UpdatePolicy::Master32,
    ];

    pub fn name(self) -> &'static str {
        match self {
            UpdatePolicy::Nearest => "nearest",
            UpdatePolicy::Stochastic => "stochastic",
            UpdatePolicy::Kahan => "kahan",
            UpdatePolicy::KahanStochastic => "kahan-stochastic",
            UpdatePolicy::Master32 => "master32",
        }
    }

    pub fn needs_rng(self) -> bool {
        matches!(self, UpdatePolicy::Stochastic | UpdatePolicy::KahanStochastic)
    }

    pub fn uses_kahan(self) -> bool {
        matches!(self, UpdatePolicy::Kahan | UpdatePolicy::KahanStochastic)
    }
}

impl fmt::Display for UpdatePolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for UpdatePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        UpdatePolicy::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown policy `{s}` (expected nearest, stochastic, kahan, kahan-stochastic or master32)"
                ))
            })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrPhase {
    pub from_step: u64,
    pub lr: f64,
}

/// Learning rate as a function of the step index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LrSchedule {
    Constant(f64),
    /// Phases sorted by `from_step`; the first phase applies before its start too.
    Piecewise(Vec<LrPhase>),
}

impl LrSchedule {
    pub fn at(&self, step: u64) -> f64 {
        match self {
            LrSchedule::Constant(lr) => *lr,
            LrSchedule::Piecewise(phases) => phases
                .iter()
                .take_while(|p| p.from_step <= step)
                .last()
                .or(phases.first())
                .map_or(0.0, |p| p.lr),
        }
    }

    fn values_mut(&mut self) -> Vec<&mut f64> {
        match self {
            LrSchedule::Constant(lr) => vec![lr],
            LrSchedule::Piecewise(phases) => phases.iter_mut().map(|p| &mut p.lr).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: LrSchedule,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn plain(lr: f64) -> Self {
        Self {
            lr: LrSchedule::Constant(lr),
            momentum: 0.0,
            weight_decay: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    /// Denominator offset, not the format's machine epsilon.
    pub eps: f64,
    #[serde(default)]
    pub weight_decay: f64,
}

/// Compensation buffer `c`, same shape and format as the weights, `c_0 = 0`.
#[derive(Clone, Debug, PartialEq)]
pub struct KahanState {
    c: QTensor,
}

impl KahanState {
    pub fn new(like: &QTensor) -> Self {
        Self {
            c: QTensor::zeros(like.shape(), like.fmt()),
        }
    }

    pub fn compensation(&self) -> &QTensor {
        &self.c
    }
}

/// Per-tensor optimizer state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub m: QTensor,
    pub v: Option<QTensor>,
    pub c1: f64,
    pub c2: f64,
    pub kahan: Option<KahanState>,
    pub step: u64,
}

impl OptimState {
    pub fn sgd(w: &QTensor, policy: UpdatePolicy) -> Self {
        Self {
            m: QTensor::zeros(w.shape(), w.fmt()),
            v: None,
            c1: 1.0,
            c2: 1.0,
            kahan: policy.uses_kahan().then(|| KahanState::new(w)),
            step: 0,
        }
    }

    pub fn adamw(w: &QTensor, policy: UpdatePolicy) -> Self {
        Self {
            v: Some(QTensor::zeros(w.shape(), w.fmt())),
            ..Self::sgd(w, policy)
        }
    }
}

/// Nearest-rounded 16-bit copy of a (32-bit master) weight tensor.
pub fn shadow(w: &QTensor, fmt: FloatFormat) -> QTensor {
    let data = w.data().iter().map(|&v| fmt.round_nearest(v)).collect();
    QTensor::from_parts_unchecked(w.shape(), data, fmt)
}

/// Per-step cancellation telemetry.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StepReport {
    /// Coordinates whose computed update was nonzero.
    pub nonzero_updates: usize,
    /// Of those, coordinates whose stored weight did not change bitwise.
    pub cancelled: usize,
}

impl StepReport {
    pub fn cancel_fraction(&self) -> Option<f64> {
        (self.nonzero_updates > 0).then(|| self.cancelled as f64 / self.nonzero_updates as f64)
    }

    pub fn merge(self, other: StepReport) -> StepReport {
        StepReport {
            nonzero_updates: self.nonzero_updates + other.nonzero_updates,
            cancelled: self.cancelled + other.cancelled,
        }
    }
}

fn rn(x: f64, fmt: FloatFormat, what: &str) -> Result<f64> {
    let r = fmt.round_nearest(x);
    if r.is_finite() {
        Ok(r)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

fn check_inputs(
    w: &QTensor,
    grad: &QTensor,
    state: &OptimState,
    policy: UpdatePolicy,
    rng: &Option<&mut RngStream>,
) -> Result<()> {
    if w.len() != grad.len() || w.len() != state.m.len() {
        return Err(Error::Shape(format!(
            "weights {:?}, gradient {:?}, state {:?}",
            w.shape(),
            grad.shape(),
            state.m.shape()
        )));
    }
    if policy.needs_rng() != rng.is_some() {
        return Err(Error::Config(format!(
            "policy {policy} {} a random stream",
            if policy.needs_rng() { "requires" } else { "does not take" }
        )));
    }
    if policy == UpdatePolicy::Master32 && w.fmt() != FloatFormat::FP32 {
        return Err(Error::Config(format!(
            "master32 weights must be stored in E8M23, got {}",
            w.fmt()
        )));
    }
    if policy.uses_kahan() != state.kahan.is_some() {
        return Err(Error::Config(format!(
            "policy {policy} and Kahan state presence disagree"
        )));
    }
    Ok(())
}

/// Kahan-compensated weight update, every line rounded once:
///
/// ```text
/// y = u - c        (compensate)
/// s = w + y        (accumulate, rounded with `accumulate`)
/// c = (s - w) - y  (measure error)
/// w = s
/// ```
///
/// `u` is the signed update. The compensation lines always round to nearest.
pub fn kahan_apply(
    w: &mut QTensor,
    u: &[f64],
    state: &mut KahanState,
    accumulate: &mut Rounding<'_>,
) -> Result<()> {
    if w.len() != u.len() || w.len() != state.c.len() {
        return Err(Error::Shape(format!(
            "kahan update of {} onto {} weights with {} compensation slots",
            u.len(),
            w.len(),
            state.c.len()
        )));
    }
    let fmt = w.fmt();
    if state.c.fmt() != fmt {
        return Err(Error::Config("compensation buffer format differs from weights".into()));
    }
    for j in 0..w.len() {
        let wj = w.data()[j];
        let cj = state.c.data()[j];
        let y = rn(u[j] - cj, fmt, "kahan compensate")?;
        let s = accumulate.round(wj + y, fmt)?;
        if !s.is_finite() {
            return Err(Error::NonFinite("kahan accumulate".into()));
        }
        let moved = rn(s - wj, fmt, "kahan measure")?;
        state.c.data_mut()[j] = rn(moved - y, fmt, "kahan measure")?;
        w.data_mut()[j] = s;
    }
    Ok(())
}

/// Writes `w ⊖ step` per policy; `step` holds positive-direction magnitudes
/// (the update is `-step`).
fn apply_update(
    w: &mut QTensor,
    step: &[f64],
    state: &mut OptimState,
    policy: UpdatePolicy,
    rng: Option<&mut RngStream>,
) -> Result<StepReport> {
    let before: Vec<u64> = w.data().iter().map(|v| v.to_bits()).collect();
    let fmt = w.fmt();
    match policy {
        UpdatePolicy::Nearest | UpdatePolicy::Master32 => {
            for (wj, sj) in w.data_mut().iter_mut().zip(step) {
                *wj = rn(*wj - sj, fmt, "weight update")?;
            }
        }
        UpdatePolicy::Stochastic => {
            let rng = rng.expect("checked by check_inputs");
            for (wj, sj) in w.data_mut().iter_mut().zip(step) {
                *wj = fmt.round_stochastic(*wj - sj, rng)?;
            }
        }
        UpdatePolicy::Kahan | UpdatePolicy::KahanStochastic => {
            let signed: Vec<f64> = step.iter().map(|s| -s).collect();
            let kahan = state.kahan.as_mut().expect("checked by check_inputs");
            let mut accumulate = match rng {
                Some(r) => Rounding::Stochastic(r),
                None => Rounding::Nearest,
            };
            kahan_apply(w, &signed, kahan, &mut accumulate)?;
        }
    }
    let mut report = StepReport::default();
    for ((s, b), a) in step.iter().zip(&before).zip(w.data()) {
        if *s != 0.0 {
            report.nonzero_updates += 1;
            if *b == a.to_bits() {
                report.cancelled += 1;
            }
        }
    }
    Ok(report)
}

/// One SGD step: `g = grad + d*w; m = mu*m + g; w = w ⊖ lr*m`.
pub fn sgd_step(
    w: &mut QTensor,
    grad: &QTensor,
    state: &mut OptimState,
    cfg: &SgdConfig,
    policy: UpdatePolicy,
    rng: Option<&mut RngStream>,
) -> Result<StepReport> {
    check_inputs(w, grad, state, policy, &rng)?;
    let fmt = w.fmt();
    let lr = rn(cfg.lr.at(state.step), fmt, "learning rate")?;
    let momentum = rn(cfg.momentum, fmt, "momentum")?;
    let decay = rn(cfg.weight_decay, fmt, "weight decay")?;

    let mut step = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        let wj = w.data()[j];
        let decayed = rn(decay * wj, fmt, "sgd decay")?;
        let g = rn(grad.data()[j] + decayed, fmt, "sgd gradient")?;
        let mj = rn(rn(momentum * state.m.data()[j], fmt, "sgd momentum")? + g, fmt, "sgd momentum")?;
        state.m.data_mut()[j] = mj;
        step.push(rn(lr * mj, fmt, "sgd step")?);
    }
    state.step += 1;
    apply_update(w, &step, state, policy, rng)
}

/// One AdamW step with multiplicative bias correction and decoupled decay.
pub fn adamw_step(
    w: &mut QTensor,
    grad: &QTensor,
    state: &mut OptimState,
    cfg: &AdamWConfig,
    policy: UpdatePolicy,
    rng: Option<&mut RngStream>,
) -> Result<StepReport> {
    check_inputs(w, grad, state, policy, &rng)?;
    let fmt = w.fmt();
    let lr = rn(cfg.lr.at(state.step), fmt, "learning rate")?;
    let beta1 = rn(cfg.beta1, fmt, "beta1")?;
    let beta2 = rn(cfg.beta2, fmt, "beta2")?;
    if beta1 >= 1.0 || beta2 >= 1.0 {
        return Err(Error::Config(format!(
            "betas ({}, {}) round to ({beta1}, {beta2}) in {fmt}; both must stay below 1",
            cfg.beta1, cfg.beta2
        )));
    }
    let eps = rn(cfg.eps, fmt, "adam eps")?;
    let decay = rn(cfg.weight_decay, fmt, "weight decay")?;
    let one_minus_b1 = rn(1.0 - beta1, fmt, "1 - beta1")?;
    let one_minus_b2 = rn(1.0 - beta2, fmt, "1 - beta2")?;
    let lr_decay = rn(lr * decay, fmt, "lr * decay")?;

    state.c1 = rn(state.c1 * beta1, fmt, "bias correction")?;
    state.c2 = rn(state.c2 * beta2, fmt, "bias correction")?;
    let corr1 = rn(1.0 - state.c1, fmt, "bias correction")?;
    let corr2 = rn(1.0 - state.c2, fmt, "bias correction")?;

    let v = state.v.as_mut().ok_or_else(|| {
        Error::Config("adamw step on state without second moment".into())
    })?;
    let mut step = Vec::with_capacity(w.len());
    for j in 0..w.len() {
        let g = grad.data()[j];
        let mj = rn(
            rn(beta1 * state.m.data()[j], fmt, "adam m")? + rn(one_minus_b1 * g, fmt, "adam m")?,
            fmt,
            "adam m",
        )?;
        let g2 = rn(g * g, fmt, "adam g^2")?;
        let vj = rn(
            rn(beta2 * v.data()[j], fmt, "adam v")? + rn(one_minus_b2 * g2, fmt, "adam v")?,
            fmt,
            "adam v",
        )?;
        state.m.data_mut()[j] = mj;
        v.data_mut()[j] = vj;
        let m_hat = rn(mj / corr1, fmt, "adam m_hat")?;
        let v_hat = rn(rn(vj / corr2, fmt, "adam v_hat")?.sqrt(), fmt, "adam v_hat")?;
        let scaled = rn(lr * m_hat, fmt, "adam step")?;
        let denom = rn(v_hat + eps, fmt, "adam denom")?;
        let ratio = rn(scaled / denom, fmt, "adam step")?;
        let decayed = rn(lr_decay * w.data()[j], fmt, "adam decay")?;
        step.push(rn(ratio + decayed, fmt, "adam step")?);
    }
    state.step += 1;
    apply_update(w, &step, state, policy, rng)
}

/// A config with every scalar rounded into a format, plus notes on what moved.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedHparams<C> {
    pub config: C,
    pub warnings: Vec<String>,
}

pub trait Hyperparams: Sized + Clone {
    fn quantize(&self, fmt: FloatFormat) -> Result<QuantizedHparams<Self>>;
}

pub fn quantize_hparams<C: Hyperparams>(cfg: &C, fmt: FloatFormat) -> Result<QuantizedHparams<C>> {
    cfg.quantize(fmt)
}

struct Quantizer {
    fmt: FloatFormat,
    warnings: Vec<String>,
}

impl Quantizer {
    fn scalar(&mut self, name: &str, value: &mut f64) {
        let q = self.fmt.round_nearest(*value);
        if q != *value {
            self.warnings
                .push(format!("{name} {value} -> {q} in {}", self.fmt));
            *value = q;
        }
    }

    fn lr(&mut self, lr: &mut LrSchedule) -> Result<()> {
        for v in lr.values_mut() {
            let before = *v;
            self.scalar("lr", v);
            if *v == 0.0 && before != 0.0 {
                return Err(Error::Config(format!(
                    "lr {before} rounds to 0 in {}",
                    self.fmt
                )));
            }
        }
        Ok(())
    }

    fn beta(&mut self, name: &str, value: &mut f64) -> Result<()> {
        let before = *value;
        self.scalar(name, value);
        if *value >= 1.0 {
            let below = self.fmt.next_down(1.0)?;
            return Err(Error::Config(format!(
                "{name} {before} rounds to {} in {}; largest representable value below 1 is {below}",
                *value, self.fmt
            )));
        }
        Ok(())
    }
}

impl Hyperparams for SgdConfig {
    fn quantize(&self, fmt: FloatFormat) -> Result<QuantizedHparams<Self>> {
        let mut config = self.clone();
        let mut q = Quantizer {
            fmt,
            warnings: Vec::new(),
        };
        q.lr(&mut config.lr)?;
        q.scalar("momentum", &mut config.momentum);
        q.scalar("weight_decay", &mut config.weight_decay);
        Ok(QuantizedHparams {
            config,
            warnings: q.warnings,
        })
    }
}

impl Hyperparams for AdamWConfig {
    fn quantize(&self, fmt: FloatFormat) -> Result<QuantizedHparams<Self>> {
        let mut config = self.clone();
        let mut q = Quantizer {
            fmt,
            warnings: Vec::new(),
        };
        q.lr(&mut config.lr)?;
        q.beta("beta1", &mut config.beta1)?;
        q.beta("beta2", &mut config.beta2)?;
        q.scalar("eps", &mut config.eps);
        q.scalar("weight_decay", &mut config.weight_decay);
        Ok(QuantizedHparams {
            config,
            warnings: q.warnings,
        })
    }
}

/// Either optimizer, for per-tensor driving.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    Sgd(SgdConfig),
    Adamw(AdamWConfig),
}

impl OptimizerConfig {
    pub fn lr_at(&self, step: u64) -> f64 {
        match self {
            OptimizerConfig::Sgd(c) => c.lr.at(step),
            OptimizerConfig::Adamw(c) => c.lr.at(step),
        }
    }

    pub fn init_state(&self, w: &QTensor, policy: UpdatePolicy) -> OptimState {
        match self {
            OptimizerConfig::Sgd(_) => OptimState::sgd(w, policy),
            OptimizerConfig::Adamw(_) => OptimState::adamw(w, policy),
        }
    }

    pub fn step(
        &self,
        w: &mut QTensor,
        grad: &QTensor,
        state: &mut OptimState,
        policy: UpdatePolicy,
        rng: Option<&mut RngStream>,
    ) -> Result<StepReport> {
        match self {
            OptimizerConfig::Sgd(c) => sgd_step(w, grad, state, c, policy, rng),
            OptimizerConfig::Adamw(c) => adamw_step(w, grad, state, c, policy, rng),
        }
    }

    pub fn quantize(&self, fmt: FloatFormat) -> Result<QuantizedHparams<Self>> {
        Ok(match self {
            OptimizerConfig::Sgd(c) => {
                let q = c.quantize(fmt)?;
                QuantizedHparams {
                    config: OptimizerConfig::Sgd(q.config),
                    warnings: q.warnings,
                }
            }
            OptimizerConfig::Adamw(c) => {
                let q = c.quantize(fmt)?;
                QuantizedHparams {
                    config: OptimizerConfig::Adamw(q.config),
                    warnings: q.warnings,
                }
            }
        })
    }
}

/// Zero tensor helper for tests and harness code.
pub fn zeros_like(w: &QTensor) -> QTensor {
    QTensor::zeros(Shape::Vector(w.len()), w.fmt())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BF: FloatFormat = FloatFormat::BF16;

    fn t(xs: &[f64]) -> QTensor {
        QTensor::vector(xs, BF).unwrap()
    }

    #[test]
    fn policy_names_roundtrip() {
        for p in UpdatePolicy::ALL {
            assert_eq!(p.name().parse::<UpdatePolicy>().unwrap(), p);
            let json = serde_json::to_string(&p).unwrap();
            assert_eq!(json, format!("\"{}\"", p.name()));
        }
        assert!("kahan_stochastic".parse::<UpdatePolicy>().is_err());
    }

    #[test]
    fn lr_schedule() {
        let s = LrSchedule::Piecewise(vec![
            LrPhase { from_step: 0, lr: 0.1 },
            LrPhase { from_step: 100, lr: 0.01 },
        ]);
        assert_eq!(s.at(0), 0.1);
        assert_eq!(s.at(99), 0.1);
        assert_eq!(s.at(100), 0.01);
        assert_eq!(s.at(10_000), 0.01);
        let json: LrSchedule = serde_json::from_str("0.5").unwrap();
        assert_eq!(json, LrSchedule::Constant(0.5));
    }

    #[test]
    fn sgd_nearest_cancels_midpoint_update() {
        let cfg = SgdConfig::plain(0.01);
        let mut w = t(&[256.0]);
        let mut state = OptimState::sgd(&w, UpdatePolicy::Nearest);
        let r = sgd_step(&mut w, &t(&[50.0]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
        assert_eq!(w.data(), &[256.0]);
        assert_eq!(r, StepReport { nonzero_updates: 1, cancelled: 1 });
        assert_eq!(r.cancel_fraction(), Some(1.0));
    }

    #[test]
    fn sgd_stochastic_midpoint_update_is_unbiased() {
        // lr*grad rounds to 0.5 exactly? Q(0.01) * 50 = 0.50048828125 -> Q = 0.5
        assert_eq!(BF.round_nearest(BF.round_nearest(0.01) * 50.0), 0.5);
        let cfg = SgdConfig::plain(0.01);
        let trials = 10_000;
        let mut sum = 0.0;
        let mut rng = RngStream::new(99, 0);
        for _ in 0..trials {
            let mut w = t(&[256.0]);
            let mut state = OptimState::sgd(&w, UpdatePolicy::Stochastic);
            sgd_step(&mut w, &t(&[50.0]), &mut state, &cfg, UpdatePolicy::Stochastic, Some(&mut rng)).unwrap();
            let v = w.data()[0];
            assert!(v == 255.0 || v == 256.0);
            sum += v;
        }
        let mean = sum / trials as f64;
        let se = 0.5 / (trials as f64).sqrt();
        assert!((mean - 255.5).abs() < 4.0 * se, "{mean}");
    }

    #[test]
    fn zero_gradient_is_a_null_update() {
        let cfg = SgdConfig::plain(0.01);
        for policy in [UpdatePolicy::Nearest, UpdatePolicy::Stochastic, UpdatePolicy::Kahan, UpdatePolicy::KahanStochastic] {
            let mut w = t(&[3.0, -7.5]);
            let mut state = OptimState::sgd(&w, policy);
            let before = state.clone();
            let mut rng = RngStream::new(1, 1);
            let rng = policy.needs_rng().then_some(&mut rng);
            let r = sgd_step(&mut w, &t(&[0.0, 0.0]), &mut state, &cfg, policy, rng).unwrap();
            assert_eq!(w.data(), &[3.0, -7.5], "{policy}");
            assert_eq!(r.nonzero_updates, 0);
            assert_eq!(state.kahan, before.kahan);
            assert_eq!(state.m, before.m);
        }
    }

    #[test]
    fn kahan_hand_trace() {
        let mut w = t(&[256.0]);
        let mut k = KahanState::new(&w);
        kahan_apply(&mut w, &[-0.5], &mut k, &mut Rounding::Nearest).unwrap();
        assert_eq!(w.data(), &[256.0]);
        assert_eq!(k.compensation().data(), &[0.5]);
        kahan_apply(&mut w, &[-0.5], &mut k, &mut Rounding::Nearest).unwrap();
        assert_eq!(w.data(), &[255.0]);
        assert_eq!(k.compensation().data(), &[0.0]);
        kahan_apply(&mut w, &[0.0], &mut k, &mut Rounding::Nearest).unwrap();
        assert_eq!(w.data(), &[255.0]);
        assert_eq!(k.compensation().data(), &[0.0]);
    }

    #[test]
    fn kahan_tracks_blocked_updates() {
        let mut nearest = t(&[256.0]);
        let mut w = t(&[256.0]);
        let mut k = KahanState::new(&w);
        for step in 1..=10_000u32 {
            kahan_apply(&mut w, &[-0.5], &mut k, &mut Rounding::Nearest).unwrap();
            let exact = 256.0 - 0.5 * f64::from(step);
            assert!((w.data()[0] - exact).abs() <= BF.ulp(w.data()[0]), "step {step}");
            assert!(k.compensation().data()[0].abs() <= BF.ulp(w.data()[0]));
            let v = nearest.data()[0];
            nearest.data_mut()[0] = BF.round_nearest(v - 0.5);
            assert_eq!(nearest.data()[0], 256.0);
        }
    }

    #[test]
    fn kahan_stochastic_with_nearest_like_draws_matches_kahan() {
        // Replaying the stochastic accumulate with a chooser that always picks
        // the closer neighbor must reproduce plain Kahan bit for bit.
        let mut w1 = t(&[256.0, 100.0]);
        let mut w2 = w1.clone();
        let mut k1 = KahanState::new(&w1);
        let mut k2 = KahanState::new(&w2);
        let updates = [-0.125, -0.0625];
        for _ in 0..200 {
            kahan_apply(&mut w1, &updates, &mut k1, &mut Rounding::Nearest).unwrap();
            for j in 0..2 {
                let wj = w2.data()[j];
                let y = BF.round_nearest(updates[j] - k2.c.data()[j]);
                let (lo, hi) = BF.neighbors(wj + y).unwrap();
                let s = if (wj + y - lo) < (hi - (wj + y)) { lo } else { hi };
                let c = BF.round_nearest(BF.round_nearest(s - wj) - y);
                w2.data_mut()[j] = s;
                k2.c.data_mut()[j] = c;
            }
        }
        assert_eq!(w1, w2);
        assert_eq!(k1, k2);
    }

    #[test]
    fn master32_requires_fp32_storage() {
        let mut w = t(&[1.0]);
        let mut state = OptimState::sgd(&w, UpdatePolicy::Master32);
        let e = sgd_step(&mut w, &t(&[1.0]), &mut state, &SgdConfig::plain(0.1), UpdatePolicy::Master32, None);
        assert!(matches!(e, Err(Error::Config(_))));

        let mut w = QTensor::vector(&[256.0], FloatFormat::FP32).unwrap();
        let mut state = OptimState::sgd(&w, UpdatePolicy::Master32);
        sgd_step(&mut w, &t(&[50.0]), &mut state, &SgdConfig::plain(0.01), UpdatePolicy::Master32, None).unwrap();
        let lr = 0.01f32;
        assert_eq!(w.data()[0], f64::from(256.0f32 - lr * 50.0f32));
    }

    #[test]
    fn rng_presence_must_match_policy() {
        let mut w = t(&[1.0]);
        let mut state = OptimState::sgd(&w, UpdatePolicy::Stochastic);
        let e = sgd_step(&mut w, &t(&[1.0]), &mut state, &SgdConfig::plain(0.1), UpdatePolicy::Stochastic, None);
        assert!(matches!(e, Err(Error::Config(_))));
    }

    #[test]
    fn sgd_momentum_and_decay() {
        let cfg = SgdConfig { lr: LrSchedule::Constant(0.5), momentum: 0.5, weight_decay: 0.25 };
        let mut w = t(&[2.0]);
        let mut state = OptimState::sgd(&w, UpdatePolicy::Nearest);
        // g = 1 + 0.25*2 = 1.5; m = 1.5; w = 2 - 0.75
        sgd_step(&mut w, &t(&[1.0]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
        assert_eq!(w.data(), &[1.25]);
        assert_eq!(state.m.data(), &[1.5]);
        // g = 1 + 0.3125 = 1.3125; m = 0.75 + 1.3125 = 2.0625; w = 1.25 - 1.03125
        sgd_step(&mut w, &t(&[1.0]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
        assert_eq!(state.m.data(), &[2.0625]);
        assert_eq!(w.data(), &[0.21875]);
    }

    #[test]
    fn adamw_degenerate_betas() {
        let cfg = AdamWConfig { lr: LrSchedule::Constant(0.125), beta1: 0.0, beta2: 0.0, eps: 0.0, weight_decay: 0.0 };
        let mut w = t(&[1.0, 1.0]);
        let mut state = OptimState::adamw(&w, UpdatePolicy::Nearest);
        adamw_step(&mut w, &t(&[3.0, -0.5]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
        // m_hat = g, v_hat = |g|, step = lr * sign(g)
        assert_eq!(w.data(), &[0.875, 1.125]);

        let cfg = AdamWConfig { eps: 1.0, ..cfg };
        let mut w = t(&[1.0]);
        let mut state = OptimState::adamw(&w, UpdatePolicy::Nearest);
        adamw_step(&mut w, &t(&[3.0]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
        // lr * g / (|g| + eps) = 0.125 * 3 / 4
        assert_eq!(w.data(), &[1.0 - 0.09375]);
    }

    #[test]
    fn adamw_zero_gradient_decays_moments() {
        let cfg = AdamWConfig { lr: LrSchedule::Constant(0.01), beta1: 0.5, beta2: 0.75, eps: 1e-8, weight_decay: 0.0 };
        let mut w = t(&[4.0]);
        let mut state = OptimState::adamw(&w, UpdatePolicy::Nearest);
        state.m = t(&[2.0]);
        state.v = Some(t(&[8.0]));
        adamw_step(&mut w, &t(&[0.0]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
        assert_eq!(state.m.data(), &[1.0]);
        assert_eq!(state.v.as_ref().unwrap().data(), &[6.0]);
        assert_eq!(state.c1, 0.5);
        assert_eq!(state.c2, 0.75);
    }

    #[test]
    fn adamw_zero_gradient_zero_moments_is_identity() {
        let cfg = AdamWConfig { lr: LrSchedule::Constant(0.01), beta1: 0.9, beta2: 0.99609375, eps: 1e-8, weight_decay: 0.0 };
        for policy in [UpdatePolicy::Nearest, UpdatePolicy::Kahan] {
            let mut w = t(&[4.0, -3.0]);
            let mut state = OptimState::adamw(&w, policy);
            adamw_step(&mut w, &t(&[0.0, 0.0]), &mut state, &cfg, policy, None).unwrap();
            assert_eq!(w.data(), &[4.0, -3.0]);
        }
    }

    #[test]
    fn adamw_rejects_beta2_rounding_to_one() {
        let cfg = AdamWConfig { lr: LrSchedule::Constant(0.01), beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let mut w = t(&[1.0]);
        let mut state = OptimState::adamw(&w, UpdatePolicy::Nearest);
        let e = adamw_step(&mut w, &t(&[1.0]), &mut state, &cfg, UpdatePolicy::Nearest, None);
        assert!(matches!(e, Err(Error::Config(_))));
        let cfg = AdamWConfig { beta2: 0.99609375, ..cfg };
        adamw_step(&mut w, &t(&[1.0]), &mut state, &cfg, UpdatePolicy::Nearest, None).unwrap();
    }

    #[test]
    fn quantize_hparams_examples() {
        let cfg = AdamWConfig { lr: LrSchedule::Constant(0.001), beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 };
        let e = quantize_hparams(&cfg, BF).unwrap_err();
        assert!(e.to_string().contains("0.99609375"), "{e}");

        let q = quantize_hparams(&SgdConfig::plain(0.1), BF).unwrap();
        assert_eq!(q.config.lr, LrSchedule::Constant(0.10009765625));
        assert_eq!(q.warnings.len(), 1);

        let exact = SgdConfig { lr: LrSchedule::Constant(0.5), momentum: 0.875, weight_decay: 0.0 };
        let q = quantize_hparams(&exact, BF).unwrap();
        assert_eq!(q.config, exact);
        assert!(q.warnings.is_empty());

        assert!(quantize_hparams(&SgdConfig::plain(1e-300), BF).is_err());
    }

    #[test]
    fn policies_are_independent_per_tensor() {
        // Two tensors stepped with separate streams: switching tensor A's policy
        // leaves tensor B's bits untouched.
        let cfg = SgdConfig::plain(0.01);
        let run = |policy_a: UpdatePolicy| -> QTensor {
            let mut a = t(&[10.0, 20.0]);
            let mut b = t(&[30.0, 40.0]);
            let mut sa = OptimState::sgd(&a, policy_a);
            let mut sb = OptimState::sgd(&b, UpdatePolicy::Stochastic);
            let mut ra = RngStream::keyed(5, &[0]);
            let mut rb = RngStream::keyed(5, &[1]);
            for _ in 0..100 {
                let ra = policy_a.needs_rng().then_some(&mut ra);
                sgd_step(&mut a, &t(&[1.0, 2.0]), &mut sa, &cfg, policy_a, ra).unwrap();
                sgd_step(&mut b, &t(&[3.0, 4.0]), &mut sb, &cfg, UpdatePolicy::Stochastic, Some(&mut rb)).unwrap();
            }
            b
        };
        let b1 = run(UpdatePolicy::Nearest);
        let b2 = run(UpdatePolicy::Stochastic);
        let b3 = run(UpdatePolicy::Kahan);
        assert_eq!(b1, b2);
        assert_eq!(b1, b3);
    }
}
