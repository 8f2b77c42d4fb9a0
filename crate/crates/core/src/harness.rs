//! Experiment configs, deterministic run orchestration and CSV metrics.
//!
//! A config fully determines every output bit. Arms and seeds run on a rayon
//! pool (capped by `LPREC_THREADS`); each job owns its state and RNG streams,
//! and results are gathered in config order before any file is written.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounds::{cancellation_radius, fmt_real, BoundsSuite, Thm1Params};
use crate::error::{Error, Result};
use crate::floatsim::{FloatFormat, Rounding};
use crate::models::{
    gen_blobs, gen_lsq, lsq_grad_quantized, mlp_forward_backward, LsqParams, MlpBatch, MlpParams,
    MlpSpec, QuantPolicy,
};
use crate::optim::{OptimState, OptimizerConfig, SgdConfig, StepReport, UpdatePolicy};
use crate::qlinalg::{AccumPrecision, QTensor, Shape};
use crate::rng::{label_key, RngStream};

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "LPREC_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    LsqTheory,
    LsqFigure,
    MlpDemo,
    Cancellation,
    FormatSweep,
    BoundsCheck,
}

/// Least-squares instance shape; the instance seed is the run seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_w_range")]
    pub w_range: [f64; 2],
    /// Defaults to 0.5 for `lsq-figure` and 0 otherwise.
    #[serde(default)]
    pub noise_std: Option<f64>,
}

impl Default for InstanceConfig {
    fn default() -> Self {
        Self {
            d: default_d(),
            n: default_n(),
            w_range: default_w_range(),
            noise_std: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    #[serde(default = "default_mlp_input")]
    pub input_dim: usize,
    #[serde(default = "default_mlp_hidden")]
    pub hidden_dim: usize,
    #[serde(default = "default_mlp_train")]
    pub n_train: usize,
    #[serde(default = "default_mlp_batch")]
    pub batch_size: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            input_dim: default_mlp_input(),
            hidden_dim: default_mlp_hidden(),
            n_train: default_mlp_train(),
            batch_size: default_mlp_batch(),
        }
    }
}

/// A complete experiment description. Every field but `kind` has a default.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_schema")]
    pub schema_version: u32,
    pub kind: ExperimentKind,
    #[serde(default = "default_format")]
    pub format: FloatFormat,
    #[serde(default = "default_policy")]
    pub policy: UpdatePolicy,
    /// Per-tensor policies keyed by parameter name (`w` for least squares,
    /// `w1`, `b1`, `w2`, `b2` for the MLP).
    #[serde(default)]
    pub policy_overrides: BTreeMap<String, UpdatePolicy>,
    #[serde(default = "default_optimizer")]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_steps")]
    pub steps: u64,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub instance: InstanceConfig,
    #[serde(default = "default_true")]
    pub round_forward_backward: bool,
    #[serde(default)]
    pub accumulator: AccumPrecision,
    /// Log every k-th step (the last step is always logged).
    #[serde(default = "default_one")]
    pub log_every: u64,
    /// Trailing window, in logged rows, of the `loss_smooth` column.
    #[serde(default = "default_window")]
    pub smooth_window: usize,
    /// Fraction of steps in each of the early and late cancellation windows.
    #[serde(default = "default_window_frac")]
    pub window_frac: f64,
    /// Formats of a format sweep; empty means `[format]`.
    #[serde(default)]
    pub formats: Vec<FloatFormat>,
    /// Policies of a format sweep; empty means `[policy]`.
    #[serde(default)]
    pub policies: Vec<UpdatePolicy>,
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub bounds: Option<BoundsSuite>,
    #[serde(default)]
    pub output_path: Option<PathBuf>,
}

fn default_schema() -> u32 {
    SCHEMA_VERSION
}
fn default_format() -> FloatFormat {
    FloatFormat::BF16
}
fn default_policy() -> UpdatePolicy {
    UpdatePolicy::Nearest
}
fn default_optimizer() -> OptimizerConfig {
    OptimizerConfig::Sgd(SgdConfig::plain(0.01))
}
fn default_steps() -> u64 {
    50_000
}
fn default_seeds() -> Vec<u64> {
    vec![1]
}
fn default_true() -> bool {
    true
}
fn default_one() -> u64 {
    1
}
fn default_window() -> usize {
    100
}
fn default_window_frac() -> f64 {
    0.1
}
fn default_d() -> usize {
    10
}
fn default_n() -> usize {
    2048
}
fn default_w_range() -> [f64; 2] {
    [0.0, 100.0]
}
fn default_mlp_input() -> usize {
    8
}
fn default_mlp_hidden() -> usize {
    16
}
fn default_mlp_train() -> usize {
    512
}
fn default_mlp_batch() -> usize {
    16
}

impl ExperimentConfig {
    /// All defaults for `kind`.
    pub fn new(kind: ExperimentKind) -> Self {
        serde_json::from_value(serde_json::json!({ "kind": kind })).expect("defaults deserialize")
    }

    /// Parses without validating, so overrides can be applied first.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg = Self::parse(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and parses a config file; call [`validate`](Self::validate) after
    /// applying overrides.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn lsq_params(&self, seed: u64) -> LsqParams {
        let noise = self.instance.noise_std.unwrap_or(match self.kind {
            ExperimentKind::LsqFigure => 0.5,
            _ => 0.0,
        });
        LsqParams {
            d: self.instance.d,
            n: self.instance.n,
            w_range: self.instance.w_range,
            noise_std: noise,
            seed,
        }
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_path.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn sweep_formats(&self) -> Vec<FloatFormat> {
        if self.formats.is_empty() {
            vec![self.format]
        } else {
            self.formats.clone()
        }
    }

    pub fn sweep_policies(&self) -> Vec<UpdatePolicy> {
        if self.policies.is_empty() {
            vec![self.policy]
        } else {
            self.policies.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            ));
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.log_every == 0 || self.smooth_window == 0 {
            return bad("log_every and smooth_window must be positive".into());
        }
        if !(self.window_frac > 0.0 && self.window_frac <= 0.5) {
            return bad(format!("window_frac {} outside (0, 0.5]", self.window_frac));
        }
        let names: &[&str] = match self.kind {
            ExperimentKind::MlpDemo => &MlpParams::NAMES,
            _ => &["w"],
        };
        if let Some(k) = self.policy_overrides.keys().find(|k| !names.contains(&k.as_str())) {
            return bad(format!("policy override for unknown tensor `{k}` (expected one of {names:?})"));
        }
        match self.kind {
            ExperimentKind::Cancellation => {
                let all_nearest = self.policy == UpdatePolicy::Nearest
                    && self.policy_overrides.values().all(|p| *p == UpdatePolicy::Nearest);
                if !all_nearest {
                    return bad("the cancellation study is defined for the nearest policy".into());
                }
            }
            ExperimentKind::BoundsCheck if self.bounds.is_none() => {
                return bad("bounds-check needs a `bounds` section".into());
            }
            ExperimentKind::MlpDemo => {
                let m = &self.mlp;
                if m.input_dim == 0 || m.hidden_dim == 0 || m.batch_size == 0 || m.n_train < m.batch_size {
                    return bad(format!("bad mlp shape {m:?}"));
                }
            }
            _ => {}
        }
        if !matches!(self.kind, ExperimentKind::MlpDemo | ExperimentKind::BoundsCheck) {
            gen_lsq(&self.lsq_params(self.seeds[0]))?;
        }
        for arm in self.arms() {
            for policy in arm.tensor_policies(self) {
                self.optimizer.quantize(arm.storage_format(policy))?;
            }
        }
        Ok(())
    }

    /// The arms a `run` of this config executes.
    pub fn arms(&self) -> Vec<Arm> {
        let chosen = Arm::new(self.policy.name(), self.format, self.policy, self.round_forward_backward);
        match self.kind {
            ExperimentKind::LsqFigure => vec![
                Arm::new("fp32", FloatFormat::FP32, UpdatePolicy::Nearest, true),
                Arm::new("nearest-updates", self.format, UpdatePolicy::Nearest, false),
                Arm::new("fwdbwd-only", self.format, UpdatePolicy::Master32, true),
                chosen,
            ],
            ExperimentKind::Cancellation => vec![Arm { label: "cancellation".into(), ..chosen }],
            ExperimentKind::FormatSweep => {
                let mut arms = Vec::new();
                for fmt in self.sweep_formats() {
                    for policy in self.sweep_policies() {
                        arms.push(Arm::new(&format!("{fmt}-{policy}"), fmt, policy, self.round_forward_backward));
                    }
                }
                arms
            }
            ExperimentKind::BoundsCheck => Vec::new(),
            ExperimentKind::LsqTheory | ExperimentKind::MlpDemo => vec![chosen],
        }
    }
}

/// One comparison arm: where rounding happens and how weights are updated.
#[derive(Clone, Debug, PartialEq)]
pub struct Arm {
    pub label: String,
    pub format: FloatFormat,
    pub policy: UpdatePolicy,
    pub round_forward_backward: bool,
}

impl Arm {
    pub fn new(label: &str, format: FloatFormat, policy: UpdatePolicy, round_forward_backward: bool) -> Self {
        Self {
            label: label.to_string(),
            format,
            policy,
            round_forward_backward,
        }
    }

    fn quant(&self, policy: UpdatePolicy) -> QuantPolicy {
        QuantPolicy::new(self.round_forward_backward, policy)
    }

    pub fn compute_format(&self) -> FloatFormat {
        self.quant(self.policy).compute_format(self.format)
    }

    pub fn storage_format(&self, policy: UpdatePolicy) -> FloatFormat {
        self.quant(policy).storage_format(self.format)
    }

    /// The arm's policy with per-tensor overrides applied. Only the chosen-policy
    /// arm honours overrides; the fixed comparison arms never do.
    fn policy_for(&self, cfg: &ExperimentConfig, tensor: &str) -> UpdatePolicy {
        if self.policy == cfg.policy && self.format == cfg.format {
            cfg.policy_overrides.get(tensor).copied().unwrap_or(self.policy)
        } else {
            self.policy
        }
    }

    fn tensor_policies(&self, cfg: &ExperimentConfig) -> Vec<UpdatePolicy> {
        let names: &[&str] = match cfg.kind {
            ExperimentKind::MlpDemo => &MlpParams::NAMES,
            _ => &["w"],
        };
        names.iter().map(|n| self.policy_for(cfg, n)).collect()
    }

    fn policy_column(&self, cfg: &ExperimentConfig) -> String {
        let names: &[&str] = match cfg.kind {
            ExperimentKind::MlpDemo => &MlpParams::NAMES,
            _ => &["w"],
        };
        let policies: Vec<UpdatePolicy> = names.iter().map(|n| self.policy_for(cfg, n)).collect();
        if policies.iter().all(|p| *p == self.policy) {
            self.policy.name().to_string()
        } else {
            names
                .iter()
                .zip(&policies)
                .map(|(n, p)| format!("{n}={p}"))
                .collect::<Vec<_>>()
                .join(";")
        }
    }

    /// Stream for one tensor's update rounding at one step.
    pub fn update_stream(&self, seed: u64, tensor: &str, step: u64) -> RngStream {
        RngStream::keyed(seed, &[label_key(&self.label), label_key(tensor), step])
    }
}

/// Stream that draws the per-step sample indices of a seed, shared by arms.
pub fn sample_stream(seed: u64) -> RngStream {
    RngStream::keyed(seed, &[label_key("sample")])
}

/// Per-step telemetry.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub arm: String,
    pub step: u64,
    pub seed: u64,
    pub policy: String,
    pub lr: f64,
    pub loss: f64,
    pub dist_to_opt: Option<f64>,
    pub cancel_frac: Option<f64>,
    pub flag: String,
}

pub const METRICS_HEADER: [&str; 10] = [
    "arm",
    "step",
    "seed",
    "policy",
    "lr",
    "loss",
    "loss_smooth",
    "dist_to_opt",
    "cancel_frac",
    "flag",
];

/// Trailing-window means of `values`.
pub fn trailing_mean(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut sum = 0.0;
    for (k, v) in values.iter().enumerate() {
        sum += v;
        if k >= window {
            sum -= values[k - window];
        }
        out.push(sum / (k + 1).min(window) as f64);
    }
    out
}

fn opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

/// The logged rows of one (arm, seed) run.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmTrace {
    pub arm: String,
    pub seed: u64,
    pub rows: Vec<MetricsRow>,
    /// Final weights (widened to binary64), for least-squares runs.
    pub final_weights: Option<Vec<f64>>,
    /// Cancellation radius of this run's configuration, for least-squares runs.
    pub radius: Option<f64>,
    pub warnings: Vec<String>,
}

impl ArmTrace {
    pub fn flagged(&self) -> bool {
        self.rows.last().is_some_and(|r| !r.flag.is_empty())
    }

    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.rows.iter().map(|r| r.loss).collect();
        trailing_mean(&losses, window)
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }

    pub fn final_smoothed(&self, window: usize) -> Option<f64> {
        self.smoothed(window).last().copied()
    }

    pub fn final_dist(&self) -> Option<f64> {
        self.rows.last().and_then(|r| r.dist_to_opt)
    }
}

/// Writes traces (in the given order) as one metrics CSV.
pub fn write_metrics<W: Write>(out: W, traces: &[&ArmTrace], window: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(METRICS_HEADER)?;
    for trace in traces {
        let smooth = trace.smoothed(window);
        for (row, s) in trace.rows.iter().zip(smooth) {
            w.write_record([
                row.arm.clone(),
                row.step.to_string(),
                row.seed.to_string(),
                row.policy.clone(),
                fmt_real(row.lr),
                fmt_real(row.loss),
                fmt_real(s),
                opt_real(row.dist_to_opt),
                opt_real(row.cancel_frac),
                row.flag.clone(),
            ])?;
        }
    }
    Ok(w.flush()?)
}

fn should_log(cfg: &ExperimentConfig, step: u64) -> bool {
    step % cfg.log_every == 0 || step == cfg.steps
}

fn flag_row(arm: &Arm, cfg: &ExperimentConfig, seed: u64, step: u64, e: &Error) -> MetricsRow {
    MetricsRow {
        arm: arm.label.clone(),
        step,
        seed,
        policy: arm.policy_column(cfg),
        lr: cfg.optimizer.lr_at(step.saturating_sub(1)),
        loss: f64::NAN,
        dist_to_opt: None,
        cancel_frac: None,
        flag: format!("non-finite: {e}"),
    }
}

/// Batch-1 SGD (or AdamW) on one least-squares instance for one arm and seed.
///
/// A numerical failure ends the run with a flagged row; configuration errors
/// are returned.
pub fn simulate_lsq(cfg: &ExperimentConfig, arm: &Arm, seed: u64) -> Result<ArmTrace> {
    let inst = gen_lsq(&cfg.lsq_params(seed))?;
    let policy = arm.policy_for(cfg, "w");
    let storage = arm.storage_format(policy);
    let compute = arm.compute_format();
    let hp = cfg.optimizer.quantize(storage)?;
    let opt = hp.config;
    let data = inst.data(compute);
    let mut w = QTensor::zeros(Shape::Vector(inst.d()), storage);
    let mut state = opt.init_state(&w, policy);
    let mut sampler = sample_stream(seed);
    let radius = cancellation_radius(&Thm1Params::for_instance(
        &inst,
        arm.format,
        storage.round_nearest(opt.lr_at(0)),
        w.data(),
    ));
    let policy_column = arm.policy_column(cfg);

    let mut rows = Vec::new();
    for step in 1..=cfg.steps {
        let i = sampler.next_index(data.n());
        let outcome = (|| -> Result<StepReport> {
            let g = lsq_grad_quantized(&w, &data, i, compute, &mut Rounding::Nearest, cfg.accumulator)?;
            let mut stream = policy.needs_rng().then(|| arm.update_stream(seed, "w", step));
            opt.step(&mut w, &g, &mut state, policy, stream.as_mut())
        })();
        match outcome {
            Ok(report) => {
                if should_log(cfg, step) {
                    let loss = inst.master().loss(w.data());
                    if !loss.is_finite() {
                        rows.push(flag_row(arm, cfg, seed, step, &Error::NonFinite("loss".into())));
                        break;
                    }
                    rows.push(MetricsRow {
                        arm: arm.label.clone(),
                        step,
                        seed,
                        policy: policy_column.clone(),
                        lr: storage.round_nearest(opt.lr_at(step - 1)),
                        loss,
                        dist_to_opt: Some(inst.distance(w.data())),
                        cancel_frac: report.cancel_fraction(),
                        flag: String::new(),
                    });
                }
            }
            Err(e) if e.is_numerical() => {
                rows.push(flag_row(arm, cfg, seed, step, &e));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ArmTrace {
        arm: arm.label.clone(),
        seed,
        rows,
        final_weights: Some(w.into_vec()),
        radius: Some(radius),
        warnings: hp.warnings,
    })
}

/// Mini-batch training of the one-hidden-layer MLP on two Gaussian blobs.
pub fn simulate_mlp(cfg: &ExperimentConfig, arm: &Arm, seed: u64) -> Result<ArmTrace> {
    let m = &cfg.mlp;
    let spec = MlpSpec {
        input_dim: m.input_dim,
        hidden_dim: m.hidden_dim,
    };
    let compute = arm.compute_format();
    let (xs, labels) = gen_blobs(m.n_train, m.input_dim, seed);
    let xq: Vec<f64> = xs.iter().map(|&v| compute.round_nearest(v)).collect();

    let mut init_rng = RngStream::keyed(seed, &[label_key("mlp-init")]);
    let init = MlpParams::init(spec, FloatFormat::FP64, &mut init_rng)?;
    let policies: Vec<UpdatePolicy> = MlpParams::NAMES.iter().map(|n| arm.policy_for(cfg, n)).collect();
    let mut params = init.clone();
    let mut opts = Vec::new();
    let mut warnings = Vec::new();
    for ((t, src), policy) in params.tensors_mut().into_iter().zip(init.tensors()).zip(&policies) {
        let storage = arm.storage_format(*policy);
        *t = QTensor::quantize(src.shape(), src.data(), storage)?;
        let hp = cfg.optimizer.quantize(storage)?;
        warnings.extend(hp.warnings);
        opts.push(hp.config);
    }
    let mut states: Vec<OptimState> = params
        .tensors()
        .into_iter()
        .zip(&opts)
        .zip(&policies)
        .map(|((t, o), p)| o.init_state(t, *p))
        .collect();
    warnings.dedup();

    let mut sampler = sample_stream(seed);
    let policy_column = arm.policy_column(cfg);
    let mut rows = Vec::new();
    for step in 1..=cfg.steps {
        let idx: Vec<usize> = (0..m.batch_size).map(|_| sampler.next_index(m.n_train)).collect();
        let outcome = (|| -> Result<(f64, StepReport)> {
            let bx: Vec<f64> = idx
                .iter()
                .flat_map(|&i| xq[i * m.input_dim..(i + 1) * m.input_dim].iter().copied())
                .collect();
            let batch = MlpBatch {
                x: QTensor::matrix(m.batch_size, m.input_dim, &bx, compute)?,
                labels: idx.iter().map(|&i| labels[i]).collect(),
            };
            let (loss, grads) = mlp_forward_backward(&params, &batch, compute, &mut Rounding::Nearest, cfg.accumulator)?;
            let mut report = StepReport::default();
            for (k, (t, g)) in params.tensors_mut().into_iter().zip(grads.tensors()).enumerate() {
                let name = MlpParams::NAMES[k];
                let mut stream = policies[k].needs_rng().then(|| arm.update_stream(seed, name, step));
                let r = opts[k].step(t, g, &mut states[k], policies[k], stream.as_mut())?;
                report = report.merge(r);
            }
            Ok((loss, report))
        })();
        match outcome {
            Ok((loss, report)) => {
                if should_log(cfg, step) {
                    rows.push(MetricsRow {
                        arm: arm.label.clone(),
                        step,
                        seed,
                        policy: policy_column.clone(),
                        lr: arm.format.round_nearest(cfg.optimizer.lr_at(step - 1)),
                        loss,
                        dist_to_opt: None,
                        cancel_frac: report.cancel_fraction(),
                        flag: String::new(),
                    });
                }
            }
            Err(e) if e.is_numerical() => {
                rows.push(flag_row(arm, cfg, seed, step, &e));
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ArmTrace {
        arm: arm.label.clone(),
        seed,
        rows,
        final_weights: None,
        radius: None,
        warnings,
    })
}

/// Runs `f` on the worker pool sized by `LPREC_THREADS` (default: all cores).
pub fn with_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Every (arm, seed) job of a config, run in parallel and returned in
/// (arm, seed) config order.
pub fn simulate_arms(cfg: &ExperimentConfig, arms: &[Arm]) -> Result<Vec<ArmTrace>> {
    use rayon::prelude::*;
    let jobs: Vec<(&Arm, u64)> = arms
        .iter()
        .flat_map(|a| cfg.seeds.iter().map(move |&s| (a, s)))
        .collect();
    with_pool(|| {
        jobs.par_iter()
            .map(|&(arm, seed)| match cfg.kind {
                ExperimentKind::MlpDemo => simulate_mlp(cfg, arm, seed),
                _ => simulate_lsq(cfg, arm, seed),
            })
            .collect::<Result<Vec<_>>>()
    })?
}

/// Per-arm aggregate printed as the one-line run summary.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub seeds: usize,
    pub flagged: usize,
    pub final_loss: f64,
    pub final_loss_smooth: f64,
    pub final_dist: Option<f64>,
    pub radius: Option<f64>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        s / n as f64
    }
}

impl ArmSummary {
    pub fn from_traces(arm: &str, traces: &[&ArmTrace], window: usize) -> Self {
        let ok: Vec<&&ArmTrace> = traces.iter().filter(|t| !t.flagged()).collect();
        let dists: Vec<f64> = ok.iter().filter_map(|t| t.final_dist()).collect();
        let radii: Vec<f64> = traces.iter().filter_map(|t| t.radius).collect();
        Self {
            arm: arm.to_string(),
            seeds: traces.len(),
            flagged: traces.len() - ok.len(),
            final_loss: mean(ok.iter().filter_map(|t| t.final_loss())),
            final_loss_smooth: mean(ok.iter().filter_map(|t| t.final_smoothed(window))),
            final_dist: (!dists.is_empty()).then(|| mean(dists.into_iter())),
            radius: (!radii.is_empty()).then(|| mean(radii.into_iter())),
        }
    }
}

impl std::fmt::Display for ArmSummary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{}: seeds={} final_loss={:.6e} smoothed={:.6e}",
            self.arm, self.seeds, self.final_loss, self.final_loss_smooth
        )?;
        if let Some(d) = self.final_dist {
            write!(f, " dist={d:.6e}")?;
        }
        if self.flagged > 0 {
            write!(f, " FLAGGED={}", self.flagged)?;
        }
        Ok(())
    }
}

/// What an experiment produced.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunOutcome {
    pub files: Vec<PathBuf>,
    pub summary: Vec<String>,
    pub warnings: Vec<String>,
    /// Some arm hit a non-finite value, or a validator found a violation.
    pub numerical_failure: bool,
}

fn create(dir: &Path, name: &str) -> Result<(fs::File, PathBuf)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    Ok((fs::File::create(&path)?, path))
}

fn collect_warnings(traces: &[ArmTrace]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    traces
        .iter()
        .flat_map(|t| t.warnings.iter().map(move |w| format!("{}: {w}", t.arm)))
        .filter(|w| seen.insert(w.clone()))
        .collect()
}

fn group<'a>(traces: &'a [ArmTrace], arm: &Arm) -> Vec<&'a ArmTrace> {
    traces.iter().filter(|t| t.arm == arm.label).collect()
}

/// Least-squares or MLP training: one metrics CSV per arm.
pub fn run_training(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let arms = cfg.arms();
    let traces = simulate_arms(cfg, &arms)?;
    let mut outcome = RunOutcome {
        warnings: collect_warnings(&traces),
        ..Default::default()
    };
    let prefix = if cfg.kind == ExperimentKind::MlpDemo { "mlp-" } else { "" };
    for arm in &arms {
        let g = group(&traces, arm);
        let (file, path) = create(out, &format!("{prefix}{}.csv", arm.label))?;
        write_metrics(std::io::BufWriter::new(file), &g, cfg.smooth_window)?;
        let s = ArmSummary::from_traces(&arm.label, &g, cfg.smooth_window);
        outcome.numerical_failure |= s.flagged > 0;
        outcome.summary.push(s.to_string());
        outcome.files.push(path);
    }
    Ok(outcome)
}

/// Early/late window means of the cancellation fraction of one trace.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CancellationWindows {
    pub early: Option<f64>,
    pub late: Option<f64>,
}

pub fn cancellation_windows(trace: &ArmTrace, steps: u64, frac: f64) -> CancellationWindows {
    let span = ((steps as f64 * frac).ceil() as u64).max(1);
    let window = |lo: u64, hi: u64| {
        let vals: Vec<f64> = trace
            .rows
            .iter()
            .filter(|r| r.step > lo && r.step <= hi)
            .filter_map(|r| r.cancel_frac)
            .collect();
        (!vals.is_empty()).then(|| mean(vals.into_iter()))
    };
    CancellationWindows {
        early: window(0, span),
        late: window(steps.saturating_sub(span), steps),
    }
}

pub const CANCELLATION_SUMMARY_HEADER: [&str; 5] = ["seed", "steps", "early_mean", "late_mean", "flag"];

/// Nearest-policy run with per-step cancellation fractions plus a summary of
/// the early and late windows.
pub fn run_cancellation(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    if cfg.policy != UpdatePolicy::Nearest {
        return Err(Error::Config("the cancellation study is defined for the nearest policy".into()));
    }
    let arms = cfg.arms();
    let traces = simulate_arms(cfg, &arms)?;
    let refs: Vec<&ArmTrace> = traces.iter().collect();
    let (file, path) = create(out, "cancellation.csv")?;
    write_metrics(std::io::BufWriter::new(file), &refs, cfg.smooth_window)?;
    let (file, summary_path) = create(out, "cancellation_summary.csv")?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(CANCELLATION_SUMMARY_HEADER)?;
    let mut outcome = RunOutcome {
        files: vec![path, summary_path],
        ..Default::default()
    };
    for t in &traces {
        let win = cancellation_windows(t, cfg.steps, cfg.window_frac);
        let flag = if t.flagged() { "non-finite" } else { "" };
        outcome.numerical_failure |= t.flagged();
        w.write_record([
            t.seed.to_string(),
            cfg.steps.to_string(),
            opt_real(win.early),
            opt_real(win.late),
            flag.to_string(),
        ])?;
        outcome.summary.push(format!(
            "cancellation seed {}: early={} late={}",
            t.seed,
            win.early.map_or("-".into(), |v| format!("{v:.4}")),
            win.late.map_or("-".into(), |v| format!("{v:.4}")),
        ));
    }
    w.flush()?;
    Ok(outcome)
}

pub const SWEEP_HEADER: [&str; 8] = [
    "format",
    "policy",
    "seeds",
    "final_loss",
    "final_loss_smooth",
    "final_dist",
    "thm1_radius",
    "flagged",
];

/// One summary row per (format, policy); failing arms are flagged and the
/// sweep continues.
pub fn run_format_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<(RunOutcome, Vec<(Arm, ArmSummary)>)> {
    let arms = cfg.arms();
    let traces = simulate_arms(cfg, &arms)?;
    let (file, path) = create(out, "format_sweep.csv")?;
    let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
    w.write_record(SWEEP_HEADER)?;
    let mut outcome = RunOutcome {
        files: vec![path],
        warnings: collect_warnings(&traces),
        ..Default::default()
    };
    let mut summaries = Vec::new();
    for arm in &arms {
        let s = ArmSummary::from_traces(&arm.label, &group(&traces, arm), cfg.smooth_window);
        w.write_record([
            arm.format.to_string(),
            arm.policy.to_string(),
            s.seeds.to_string(),
            fmt_real(s.final_loss),
            fmt_real(s.final_loss_smooth),
            opt_real(s.final_dist),
            opt_real(s.radius),
            s.flagged.to_string(),
        ])?;
        outcome.summary.push(s.to_string());
        summaries.push((arm.clone(), s));
    }
    w.flush()?;
    Ok((outcome, summaries))
}

/// Runs the configured bound validators into `bounds.csv`.
pub fn run_bounds_check(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    let suite = cfg
        .bounds
        .as_ref()
        .ok_or_else(|| Error::Config("bounds-check needs a `bounds` section".into()))?;
    let report = with_pool(|| suite.run())??;
    let (file, path) = create(out, "bounds.csv")?;
    report.write_csv(std::io::BufWriter::new(file))?;
    let mut summary = report.notes.clone();
    summary.push(format!(
        "bounds: {} rows, {} elementary checks, {} violations",
        report.rows.len(),
        report.checks,
        report.violations
    ));
    Ok(RunOutcome {
        files: vec![path],
        summary,
        warnings: Vec::new(),
        numerical_failure: !report.passed(),
    })
}

/// Dispatches on the config's kind.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<RunOutcome> {
    cfg.validate()?;
    match cfg.kind {
        ExperimentKind::LsqTheory | ExperimentKind::LsqFigure | ExperimentKind::MlpDemo => run_training(cfg, out),
        ExperimentKind::Cancellation => run_cancellation(cfg, out),
        ExperimentKind::FormatSweep => run_format_sweep(cfg, out).map(|(o, _)| o),
        ExperimentKind::BoundsCheck => run_bounds_check(cfg, out),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::new(kind);
        cfg.steps = 200;
        cfg.instance.n = 128;
        cfg
    }

    #[test]
    fn defaults_roundtrip() {
        let cfg = ExperimentConfig::new(ExperimentKind::LsqFigure);
        assert_eq!(cfg.steps, 50_000);
        assert_eq!(cfg.smooth_window, 100);
        assert_eq!(cfg.lsq_params(3).noise_std, 0.5);
        assert_eq!(ExperimentConfig::new(ExperimentKind::LsqTheory).lsq_params(3).noise_std, 0.0);
        let back = ExperimentConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_rejects_unknown_fields_and_versions() {
        assert!(ExperimentConfig::from_json(r#"{"kind":"lsq-theory","stepz":3}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind":"lsq-theory","schema_version":2}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"kind":"lsq-theory","format":"E8M0"}"#).is_err());
        let cfg = ExperimentConfig::from_json(
            r#"{"kind":"mlp-demo","optimizer":{"kind":"adamw","lr":0.001,"beta1":0.9,"beta2":0.99609375,"eps":1e-8},
                "policy_overrides":{"w1":"kahan"}}"#,
        )
        .unwrap();
        assert!(matches!(cfg.optimizer, OptimizerConfig::Adamw(_)));
        assert!(ExperimentConfig::from_json(r#"{"kind":"mlp-demo","policy_overrides":{"w9":"kahan"}}"#).is_err());
    }

    #[test]
    fn beta2_that_rounds_to_one_is_a_config_error() {
        let e = ExperimentConfig::from_json(
            r#"{"kind":"mlp-demo","optimizer":{"kind":"adamw","lr":0.001,"beta1":0.9,"beta2":0.999,"eps":1e-8}}"#,
        )
        .unwrap_err();
        assert!(matches!(e, Error::Config(_)));
    }

    #[test]
    fn cancellation_requires_nearest() {
        let mut cfg = small(ExperimentKind::Cancellation);
        cfg.policy = UpdatePolicy::Stochastic;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn trailing_mean_examples() {
        assert_eq!(trailing_mean(&[1.0, 3.0, 5.0, 7.0], 2), vec![1.0, 2.0, 4.0, 6.0]);
        assert_eq!(trailing_mean(&[], 3), Vec::<f64>::new());
    }

    #[test]
    fn figure_arms_layout() {
        let mut cfg = small(ExperimentKind::LsqFigure);
        cfg.policy = UpdatePolicy::Kahan;
        let labels: Vec<String> = cfg.arms().into_iter().map(|a| a.label).collect();
        assert_eq!(labels, ["fp32", "nearest-updates", "fwdbwd-only", "kahan"]);
    }

    #[test]
    fn zero_steps_gives_no_rows() {
        let mut cfg = small(ExperimentKind::LsqTheory);
        cfg.steps = 0;
        let t = simulate_lsq(&cfg, &cfg.arms()[0], 1).unwrap();
        assert!(t.rows.is_empty());
        let mut buf = Vec::new();
        write_metrics(&mut buf, &[&t], 10).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), format!("{}\n", METRICS_HEADER.join(",")));
    }

    #[test]
    fn rows_increase_and_log_every_keeps_last() {
        let mut cfg = small(ExperimentKind::LsqTheory);
        cfg.steps = 25;
        cfg.log_every = 10;
        let t = simulate_lsq(&cfg, &cfg.arms()[0], 1).unwrap();
        let steps: Vec<u64> = t.rows.iter().map(|r| r.step).collect();
        assert_eq!(steps, [10, 20, 25]);
    }

    #[test]
    fn arms_do_not_perturb_each_other() {
        let mut cfg = small(ExperimentKind::LsqFigure);
        cfg.policy = UpdatePolicy::Stochastic;
        let arms = cfg.arms();
        let all = simulate_arms(&cfg, &arms).unwrap();
        let alone = simulate_lsq(&cfg, &arms[3], cfg.seeds[0]).unwrap();
        assert_eq!(all[3], alone);
    }

    #[test]
    fn start_at_optimum_has_undefined_cancel_fraction() {
        let mut cfg = small(ExperimentKind::Cancellation);
        cfg.instance.w_range = [0.0, 1e-300];
        cfg.steps = 5;
        let t = simulate_lsq(&cfg, &cfg.arms()[0], 1).unwrap();
        // w* is (numerically) zero, so w0 = 0 already interpolates
        assert!(t.rows.iter().all(|r| r.cancel_frac.is_none()));
        let win = cancellation_windows(&t, cfg.steps, cfg.window_frac);
        assert_eq!(win.early, None);
    }

    #[test]
    fn mlp_runs_with_mixed_policies() {
        let mut cfg = small(ExperimentKind::MlpDemo);
        cfg.steps = 50;
        cfg.policy = UpdatePolicy::Kahan;
        cfg.policy_overrides.insert("b1".into(), UpdatePolicy::Stochastic);
        cfg.policy_overrides.insert("w2".into(), UpdatePolicy::Master32);
        let t = simulate_mlp(&cfg, &cfg.arms()[0], 4).unwrap();
        assert_eq!(t.rows.len(), 50);
        assert_eq!(t.rows[0].policy, "w1=kahan;b1=stochastic;w2=master32;b2=kahan");
        let first = t.rows[0].loss;
        let last = t.smoothed(10).last().copied().unwrap();
        assert!(last < first, "{first} -> {last}");
    }
}
