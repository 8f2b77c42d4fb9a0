//! Closed-form convergence bounds for low-precision SGD on least squares and
//! Monte Carlo validators that check them against simulated trajectories.
//!
//! The cancellation bounds describe nearest-rounded weight updates with exact
//! gradients. The forward/backward bound describes exact (32-bit) weight
//! updates driven by gradients computed with 16-bit operator outputs.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::floatsim::{FloatFormat, Rounding};
use crate::models::{distance, gen_lsq, lsq_grad_exact, lsq_grad_quantized, LsqInstance, LsqParams};
use crate::optim::{sgd_step, OptimState, SgdConfig, UpdatePolicy};
use crate::qlinalg::{AccumPrecision, QTensor};
use crate::rng::{label_key, RngStream};

#[derive(Clone, Debug, PartialEq)]
pub struct Thm1Params {
    /// Machine epsilon of the weight format.
    pub eps: f64,
    pub alpha: f64,
    /// Per-sample gradient Lipschitz constant, `max_i ||x_i||^2`.
    pub lipschitz: f64,
    pub w_star: Vec<f64>,
    pub w0: Vec<f64>,
}

impl Thm1Params {
    pub fn for_instance(inst: &LsqInstance, fmt: FloatFormat, alpha: f64, w0: &[f64]) -> Self {
        Self {
            eps: fmt.machine_epsilon(),
            alpha,
            lipschitz: inst.constants().lipschitz,
            w_star: inst.w_star().to_vec(),
            w0: w0.to_vec(),
        }
    }

    fn min_abs_w_star(&self) -> f64 {
        self.w_star.iter().map(|w| w.abs()).fold(f64::INFINITY, f64::min)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Thm2Params {
    pub alpha: f64,
    pub mu: f64,
    pub lipschitz: f64,
    pub eps: f64,
    pub t: u64,
    /// `||w0 - w*||^2`.
    pub d0_sq: f64,
}

/// Radius `eps / (alpha L + eps) * min_j |w*_j|` inside which nearest rounding
/// cancels every per-sample SGD step.
pub fn cancellation_radius(p: &Thm1Params) -> f64 {
    let al = p.alpha * p.lipschitz;
    p.eps / (al + p.eps) * p.min_abs_w_star()
}

/// `min(eps (1 - alpha L) / (alpha L + eps) * min_j |w*_j|, ||w0 - w*||)`.
pub fn halting_lower_bound(p: &Thm1Params) -> Result<f64> {
    let al = p.alpha * p.lipschitz;
    if al > 1.0 {
        return Err(Error::Domain(format!(
            "halting bound needs alpha L <= 1, got {al}"
        )));
    }
    let halt = p.eps * (1.0 - al) / (al + p.eps) * p.min_abs_w_star();
    Ok(halt.min(distance(&p.w0, &p.w_star)))
}

/// Bound on `E ||w_t - w*||^2` with its vacuity flag (`4 eps L / mu >= 1`).
pub fn thm2_upper_bound(p: &Thm2Params) -> (f64, bool) {
    let ratio = 4.0 * p.eps * p.lipschitz / p.mu;
    let rate = p.alpha * p.mu * p.t as f64 * (1.0 - ratio);
    ((-rate).exp() * p.d0_sq, !(ratio < 1.0))
}

/// Sufficient condition for a halted trajectory: `||w - w*||` is within the
/// cancellation radius.
pub fn predict_halt(w: &[f64], inst: &LsqInstance, alpha: f64, fmt: FloatFormat) -> bool {
    let p = Thm1Params::for_instance(inst, fmt, alpha, w);
    inst.distance(w) <= cancellation_radius(&p)
}

/// True iff `Q(w - alpha grad_i(w)) == w` bitwise for every sample `i`.
pub fn cancels_everywhere(w: &[f64], inst: &LsqInstance, alpha: f64, fmt: FloatFormat) -> bool {
    let data = inst.master();
    (0..data.n()).all(|i| {
        let g = lsq_grad_exact(w, data, i);
        w.iter()
            .zip(&g)
            .all(|(wj, gj)| fmt.round_nearest(wj - alpha * gj).to_bits() == wj.to_bits())
    })
}

/// One line of a validator report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ValidatorRow {
    pub check: String,
    pub probe_id: u64,
    pub distance: f64,
    pub radius: f64,
    pub predicted: bool,
    pub observed_cancelled: bool,
    pub bound: f64,
    pub measured: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ValidatorReport {
    pub rows: Vec<ValidatorRow>,
    pub violations: usize,
    /// Number of elementary checks performed, e.g. `(w, sample)` pairs.
    pub checks: u64,
    pub notes: Vec<String>,
}

impl ValidatorReport {
    pub fn passed(&self) -> bool {
        self.violations == 0 && self.checks > 0
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(Self::HEADER)?;
        for row in &self.rows {
            w.write_record([
                row.check.clone(),
                row.probe_id.to_string(),
                fmt_real(row.distance),
                fmt_real(row.radius),
                row.predicted.to_string(),
                row.observed_cancelled.to_string(),
                fmt_real(row.bound),
                fmt_real(row.measured),
            ])
            ?;
        }
        Ok(w.flush()?)
    }

    pub const HEADER: [&'static str; 8] = [
        "check",
        "probe_id",
        "distance",
        "radius",
        "predicted",
        "observed_cancelled",
        "bound",
        "measured",
    ];

    fn merge(mut self, other: ValidatorReport) -> Self {
        self.rows.extend(other.rows);
        self.violations += other.violations;
        self.checks += other.checks;
        self.notes.extend(other.notes);
        self
    }

    fn empty() -> Self {
        Self {
            rows: Vec::new(),
            violations: 0,
            checks: 0,
            notes: Vec::new(),
        }
    }
}

pub(crate) fn fmt_real(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        format!("{x:.16e}")
    }
}

/// Probing setup for the cancellation-sufficiency check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SufficiencyConfig {
    pub formats: Vec<FloatFormat>,
    pub instance: LsqParams,
    pub instance_seeds: Vec<u64>,
    pub points_per_instance: usize,
    /// The step size is `alpha_l / L` so every instance sits at the same `alpha L`.
    pub alpha_l: f64,
    pub probe_seed: u64,
}

const MAX_PROBE_ATTEMPTS: usize = 256;

fn gaussian_direction(rng: &mut RngStream, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d)
            .map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws representable points inside the cancellation radius and checks that
/// every sample's nearest-rounded SGD step leaves them bitwise unchanged.
pub fn validate_thm1_sufficiency(cfg: &SufficiencyConfig) -> Result<ValidatorReport> {
    if cfg.instance.noise_std != 0.0 {
        return Err(Error::Config("cancellation checks need noiseless instances".into()));
    }
    let mut jobs = Vec::new();
    for &fmt in &cfg.formats {
        for &seed in &cfg.instance_seeds {
            jobs.push((fmt, seed));
        }
    }
    let reports = jobs
        .par_iter()
        .map(|&(fmt, seed)| sufficiency_instance(cfg, fmt, seed))
        .collect::<Result<Vec<_>>>()?;
    Ok(reports.into_iter().fold(ValidatorReport::empty(), ValidatorReport::merge))
}

fn sufficiency_instance(cfg: &SufficiencyConfig, fmt: FloatFormat, seed: u64) -> Result<ValidatorReport> {
    let inst = gen_lsq(&LsqParams { seed, ..cfg.instance.clone() })?;
    let alpha = cfg.alpha_l / inst.constants().lipschitz;
    let d = inst.d();
    let p = Thm1Params::for_instance(&inst, fmt, alpha, &vec![0.0; d]);
    let radius = cancellation_radius(&p);
    let check = format!("thm1-sufficiency/{fmt}/instance-{seed}");

    let probes: Vec<Option<ValidatorRow>> = (0..cfg.points_per_instance)
        .into_par_iter()
        .map(|k| {
            let mut rng = RngStream::keyed(
                cfg.probe_seed,
                &[label_key("thm1-probe"), fmt.width().into(), fmt.mantissa_bits().into(), seed, k as u64],
            );
            let w = (0..MAX_PROBE_ATTEMPTS).find_map(|_| {
                let dir = gaussian_direction(&mut rng, d);
                // half the probes hug the boundary, where cancellation is hardest
                let u = rng.next_uniform();
                let r = if k % 2 == 0 { radius * (0.9 + 0.1 * u) } else { radius * u.powf(1.0 / d as f64) };
                let w: Vec<f64> = inst
                    .w_star()
                    .iter()
                    .zip(&dir)
                    .map(|(ws, dj)| fmt.round_nearest(ws + r * dj))
                    .collect();
                (inst.distance(&w) <= radius).then_some(w)
            })?;
            let dist = inst.distance(&w);
            let observed = cancels_everywhere(&w, &inst, alpha, fmt);
            Some(ValidatorRow {
                check: check.clone(),
                probe_id: k as u64,
                distance: dist,
                radius,
                predicted: true,
                observed_cancelled: observed,
                bound: radius,
                measured: dist,
            })
        })
        .collect();

    let rejected = probes.iter().filter(|p| p.is_none()).count();
    let rows: Vec<ValidatorRow> = probes.into_iter().flatten().collect();
    let violations = rows.iter().filter(|r| !r.observed_cancelled).count();
    let mut notes = Vec::new();
    if rejected > 0 {
        notes.push(format!(
            "{check}: {rejected} of {} probes found no representable point inside radius {radius:.6e}",
            cfg.points_per_instance
        ));
    }
    Ok(ValidatorReport {
        checks: (rows.len() * inst.n()) as u64,
        rows,
        violations,
        notes,
    })
}

/// Seeded nearest-update SGD runs on one noiseless instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryConfig {
    pub format: FloatFormat,
    pub instance: LsqParams,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub steps: u64,
}

/// Runs `w <- Q(w - alpha grad_i(w))` from `w0 = 0` with exact gradients and
/// checks `||w_t - w*||` never drops below the halting bound by more than two
/// binary64 ulps of the distance.
pub fn validate_thm1_trajectory(cfg: &TrajectoryConfig) -> Result<ValidatorReport> {
    if cfg.instance.noise_std != 0.0 {
        return Err(Error::Config("trajectory bound needs a noiseless instance".into()));
    }
    let inst = gen_lsq(&cfg.instance)?;
    let fmt = cfg.format;
    let d = inst.d();
    let w0 = vec![0.0; d];
    let p = Thm1Params::for_instance(&inst, fmt, cfg.lr, &w0);
    let bound = halting_lower_bound(&p)?;
    let radius = cancellation_radius(&p);
    let data = inst.master();

    let rows: Vec<ValidatorRow> = cfg
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut sampler = RngStream::keyed(seed, &[label_key("sample")]);
            let mut w = w0.clone();
            let mut min_dist = inst.distance(&w);
            let mut violated = false;
            for _ in 0..cfg.steps {
                let i = sampler.next_index(data.n());
                let g = lsq_grad_exact(&w, data, i);
                for (wj, gj) in w.iter_mut().zip(&g) {
                    *wj = fmt.round_nearest(*wj - cfg.lr * gj);
                }
                let dist = inst.distance(&w);
                min_dist = min_dist.min(dist);
                if dist < bound - 2.0 * ulp64(dist) {
                    violated = true;
                }
            }
            ValidatorRow {
                check: format!("thm1-trajectory/{fmt}/seed-{seed}"),
                probe_id: seed,
                distance: inst.distance(&w),
                radius,
                predicted: true,
                observed_cancelled: !violated,
                bound,
                measured: min_dist,
            }
        })
        .collect();
    let violations = rows.iter().filter(|r| !r.observed_cancelled).count();
    Ok(ValidatorReport {
        checks: cfg.seeds.len() as u64 * cfg.steps,
        rows,
        violations,
        notes: Vec::new(),
    })
}

fn ulp64(x: f64) -> f64 {
    let x = x.abs();
    if x == 0.0 {
        f64::from_bits(1)
    } else {
        f64::from_bits(x.to_bits() + 1) - x
    }
}

/// Exact-update runs driven by quantized gradients on one instance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thm2Config {
    pub format: FloatFormat,
    pub instance: LsqParams,
    pub seeds: Vec<u64>,
    pub lr: f64,
    pub checkpoints: Vec<u64>,
    /// Total steps; the final distance is taken here.
    pub steps: u64,
    #[serde(default)]
    pub accumulator: AccumPrecision,
}

/// Trajectory of one exact-update run: the 32-bit master copy after each
/// checkpoint and at the end.
#[derive(Clone, Debug, PartialEq)]
pub struct Thm2Run {
    pub checkpoint_dist_sq: Vec<f64>,
    pub final_weights: Vec<f64>,
}

/// One run with a 32-bit master copy updated as `w <- w - alpha g` in binary32
/// and `g = lsq_grad_quantized(w)` rounded to `cfg.format`.
pub fn thm2_run(inst: &LsqInstance, cfg: &Thm2Config, seed: u64) -> Result<Thm2Run> {
    let data = inst.data(cfg.format);
    let mut w = QTensor::zeros(crate::qlinalg::Shape::Vector(inst.d()), FloatFormat::FP32);
    let mut state = OptimState::sgd(&w, UpdatePolicy::Master32);
    let sgd = SgdConfig::plain(cfg.lr);
    let mut sampler = RngStream::keyed(seed, &[label_key("sample")]);
    let mut checkpoint_dist_sq = Vec::with_capacity(cfg.checkpoints.len());
    for t in 1..=cfg.steps {
        let i = sampler.next_index(data.n());
        let g = lsq_grad_quantized(&w, &data, i, cfg.format, &mut Rounding::Nearest, cfg.accumulator)?;
        sgd_step(&mut w, &g, &mut state, &sgd, UpdatePolicy::Master32, None)?;
        if cfg.checkpoints.contains(&t) {
            let d = inst.distance(w.data());
            checkpoint_dist_sq.push(d * d);
        }
    }
    Ok(Thm2Run {
        checkpoint_dist_sq,
        final_weights: w.into_vec(),
    })
}

/// Checks the Monte Carlo mean of `||w_t - w*||^2` against the bound at each
/// checkpoint, and that every run ends strictly inside the halting bound of the
/// matching nearest-update configuration.
pub fn validate_thm2(cfg: &Thm2Config) -> Result<ValidatorReport> {
    let mut checkpoints = cfg.checkpoints.clone();
    checkpoints.sort_unstable();
    checkpoints.dedup();
    if checkpoints.last().is_some_and(|&t| t > cfg.steps) {
        return Err(Error::Config("checkpoint beyond the last step".into()));
    }
    let cfg = Thm2Config { checkpoints, ..cfg.clone() };
    let inst = gen_lsq(&cfg.instance)?;
    let data = inst.data(cfg.format);
    let c = data.constants()?;
    let eps = cfg.format.machine_epsilon();
    let ratio = 4.0 * eps * c.lipschitz / c.mu;
    let mut notes = vec![format!(
        "thm2: L = {:.6}, mu = {:.6}, 4 eps L / mu = {ratio:.6}",
        c.lipschitz, c.mu
    )];
    if c.singular || !(ratio < 0.9) {
        return Err(Error::Config(format!(
            "instance has 4 eps L / mu = {ratio} (singular: {}); the bound check needs < 0.9",
            c.singular
        )));
    }

    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| thm2_run(&inst, &cfg, seed))
        .collect::<Result<Vec<_>>>()?;
    let d0_sq = inst.distance(&vec![0.0; inst.d()]).powi(2);
    let mut rows = Vec::new();
    let mut violations = 0;
    for (k, &t) in cfg.checkpoints.iter().enumerate() {
        let mean = runs.iter().map(|r| r.checkpoint_dist_sq[k]).sum::<f64>() / runs.len() as f64;
        let (bound, vacuous) = thm2_upper_bound(&Thm2Params {
            alpha: cfg.lr,
            mu: c.mu,
            lipschitz: c.lipschitz,
            eps,
            t,
            d0_sq,
        });
        let ok = mean <= bound;
        violations += usize::from(!ok);
        if vacuous {
            notes.push(format!("thm2: bound at t={t} is vacuous"));
        }
        rows.push(ValidatorRow {
            check: format!("thm2/{}/t-{t}", cfg.format),
            probe_id: t,
            distance: mean.sqrt(),
            radius: f64::NAN,
            predicted: true,
            observed_cancelled: ok,
            bound,
            measured: mean,
        });
    }

    let halt = halting_lower_bound(&Thm1Params::for_instance(&inst, cfg.format, cfg.lr, &vec![0.0; inst.d()]))?;
    for (run, &seed) in runs.iter().zip(&cfg.seeds) {
        let dist = inst.distance(&run.final_weights);
        let ok = dist < halt;
        violations += usize::from(!ok);
        rows.push(ValidatorRow {
            check: format!("thm2-separation/{}/seed-{seed}", cfg.format),
            probe_id: seed,
            distance: dist,
            radius: f64::NAN,
            predicted: true,
            observed_cancelled: ok,
            bound: halt,
            measured: dist,
        });
    }
    Ok(ValidatorReport {
        checks: rows.len() as u64,
        rows,
        violations,
        notes,
    })
}

/// The full bounds suite, as driven by `lowprec bounds-check`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsSuite {
    #[serde(default)]
    pub sufficiency: Option<SufficiencyConfig>,
    #[serde(default)]
    pub trajectory: Option<TrajectoryConfig>,
    #[serde(default)]
    pub thm2: Option<Thm2Config>,
}

impl Default for BoundsSuite {
    /// Noiseless 10-dim instances: sufficiency on E8M7/E8M5/E8M3 at
    /// `alpha L = 0.01`, and 32-seed BF16 trajectory and forward/backward runs
    /// at `alpha = 0.01`.
    fn default() -> Self {
        Self {
            sufficiency: Some(SufficiencyConfig {
                formats: vec![FloatFormat::BF16, FloatFormat::E8M5, FloatFormat::E8M3],
                instance: LsqParams::theory(0),
                instance_seeds: (1..=8).collect(),
                points_per_instance: 64,
                alpha_l: 0.01,
                probe_seed: 2021,
            }),
            trajectory: Some(TrajectoryConfig {
                format: FloatFormat::BF16,
                instance: LsqParams::theory(1),
                seeds: (1..=32).collect(),
                lr: 0.01,
                steps: 5000,
            }),
            thm2: Some(Thm2Config {
                format: FloatFormat::BF16,
                instance: LsqParams::theory(1),
                seeds: (1..=32).collect(),
                lr: 0.01,
                checkpoints: vec![10, 100, 1000],
                steps: 1000,
                accumulator: AccumPrecision::Wide32,
            }),
        }
    }
}

impl BoundsSuite {
    pub fn run(&self) -> Result<ValidatorReport> {
        let mut report = ValidatorReport::empty();
        if let Some(c) = &self.sufficiency {
            report = report.merge(validate_thm1_sufficiency(c)?);
        }
        if let Some(c) = &self.trajectory {
            report = report.merge(validate_thm1_trajectory(c)?);
        }
        if let Some(c) = &self.thm2 {
            report = report.merge(validate_thm2(c)?);
        }
        Ok(report)
    }
}
