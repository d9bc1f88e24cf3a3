//! One-dimensional reduction of the single-index flow.
//!
//! With a single teacher and a rotation-invariant start, the mean-field
//! state is described by the law of the alignment `α = |w·w*|`. The
//! teacher-direction velocity depends on that law only through the moments
//! `r_k = E α^k`, up to a correction from the orthogonal components that
//! [`ReducedMode::MonteCarlo`] resolves by sampling.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Beta;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::kernels::{pair_kernel_dsigma, pair_kernel_sigma, LinkFunction, MAX_LINK_DEGREE};
use crate::{rng, Error, Result};

/// Highest cached moment order; enough for any admissible link.
pub const MAX_MOMENT: usize = MAX_LINK_DEGREE + 1;

/// Weighted law of alignments in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaEnsemble {
    alphas: Vec<f64>,
    weights: Vec<f64>,
    d: usize,
    moments: Vec<f64>,
}

impl AlphaEnsemble {
    pub fn weighted(d: usize, alphas: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if alphas.is_empty() {
            return Err(Error::InvalidArgument("empty alignment ensemble".into()));
        }
        if alphas.len() != weights.len() {
            return Err(Error::shape(alphas.len(), weights.len()));
        }
        if let Some(a) = alphas.iter().find(|a| !(0.0..=1.0).contains(*a)) {
            return Err(Error::InvalidArgument(format!("alignment {a} outside [0, 1]")));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidArgument("negative or non-finite weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("weights sum to {total}")));
        }
        let moments = compute_moments(&alphas, &weights);
        Ok(AlphaEnsemble {
            alphas,
            weights,
            d,
            moments,
        })
    }

    /// Equal weights.
    pub fn from_alphas(d: usize, alphas: Vec<f64>) -> Result<Self> {
        let n = alphas.len().max(1);
        let weights = vec![1.0 / n as f64; alphas.len()];
        Self::weighted(d, alphas, weights)
    }

    /// `|x_1|` for `x` uniform on the sphere in dimension `d`, i.e.
    /// `α² ~ Beta(1/2, (d−1)/2)`.
    pub fn sphere(d: usize, n: usize, seed: u64) -> Result<Self> {
        let beta = alpha_square_law(d)?;
        let mut alphas = vec![0.0; n];
        alphas
            .par_chunks_mut(rng::BLOCK)
            .enumerate()
            .for_each(|(b, chunk)| {
                let mut r = rng::stream(seed, rng::ENSEMBLE, b as u64);
                for a in chunk {
                    let s: f64 = beta.sample(&mut r);
                    *a = s.sqrt().min(1.0);
                }
            });
        Self::from_alphas(d, alphas)
    }

    /// Midpoint quantiles of the sphere-induced law; deterministic.
    pub fn quantile_grid(d: usize, n: usize) -> Result<Self> {
        if d < 2 || n == 0 {
            return Err(Error::InvalidArgument(format!("quantile grid with d={d}, n={n}")));
        }
        let b = (d as f64 - 1.0) / 2.0;
        let alphas = (0..n)
            .map(|i| {
                let q = (i as f64 + 0.5) / n as f64;
                beta_quantile(0.5, b, q).sqrt()
            })
            .collect();
        Self::from_alphas(d, alphas)
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.alphas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.alphas.is_empty()
    }

    /// `r_k = E α^k` for `k ≤ MAX_MOMENT`.
    pub fn moment(&self, k: usize) -> f64 {
        self.moments[k]
    }

    pub fn moments(&self) -> &[f64] {
        &self.moments
    }

    /// Weighted quantile (lower inverse of the empirical CDF).
    pub fn quantile(&self, q: f64) -> f64 {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| self.alphas[a].total_cmp(&self.alphas[b]));
        let mut acc = 0.0;
        for &i in &idx {
            acc += self.weights[i];
            if acc >= q - 1e-12 {
                return self.alphas[i];
            }
        }
        self.alphas[idx[idx.len() - 1]]
    }

    fn with_alphas(&self, alphas: Vec<f64>) -> AlphaEnsemble {
        let moments = compute_moments(&alphas, &self.weights);
        AlphaEnsemble {
            alphas,
            weights: self.weights.clone(),
            d: self.d,
            moments,
        }
    }
}

/// Bisection on the regularized incomplete beta function.
fn beta_quantile(a: f64, b: f64, q: f64) -> f64 {
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if beta_reg(a, b, mid) < q {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

fn alpha_square_law(d: usize) -> Result<Beta<f64>> {
    if d < 2 {
        return Err(Error::InvalidArgument(format!("dimension {d} < 2")));
    }
    Beta::new(0.5, (d as f64 - 1.0) / 2.0).map_err(|e| Error::InvalidArgument(e.to_string()))
}

fn compute_moments(alphas: &[f64], weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; MAX_MOMENT + 1];
    for (&a, &w) in alphas.iter().zip(weights) {
        let mut p = w;
        for m in out.iter_mut() {
            *m += p;
            p *= a;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ReducedMode {
    /// Leading-order expansion in the moments.
    Polynomial,
    /// Full expectation, sampling the partner alignment and the overlap of
    /// the orthogonal components.
    MonteCarlo { samples: usize, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityEstimate {
    pub value: f64,
    pub std_err: f64,
}

fn poly(coeffs: &[f64], z: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, &a| acc * z + a)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("alignment {alpha} outside [0, 1]")))
    }
}

fn poly_velocity(q: &[f64], alpha: f64, moments: &[f64]) -> f64 {
    let mut acc = 0.0;
    let mut p = 1.0;
    for (k, &qk) in q.iter().enumerate() {
        acc += qk * p * (1.0 - moments[k + 1]);
        p *= alpha;
    }
    acc * (1.0 - alpha * alpha)
}

fn poly_dvelocity(q: &[f64], alpha: f64, moments: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (k, &qk) in q.iter().enumerate() {
        let lower = if k == 0 { 0.0 } else { k as f64 * alpha.powi(k as i32 - 1) };
        acc += qk * (1.0 - moments[k + 1]) * (lower - (k + 2) as f64 * alpha.powi(k as i32 + 1));
    }
    acc
}

/// Teacher-direction velocity of a particle at alignment `alpha`.
///
/// ```
/// use poc_lab::kernels::LinkFunction;
/// use poc_lab::reduced::{reduced_velocity, AlphaEnsemble, ReducedMode};
/// let ens = AlphaEnsemble::from_alphas(64, vec![0.0]).unwrap();
/// let link = LinkFunction::he(4).unwrap();
/// let v = reduced_velocity(0.5, &ens, &link, ReducedMode::Polynomial).unwrap();
/// assert!((v.value - 9.0).abs() < 1e-12);
/// ```
pub fn reduced_velocity(
    alpha: f64,
    ens: &AlphaEnsemble,
    link: &LinkFunction,
    mode: ReducedMode,
) -> Result<VelocityEstimate> {
    check_alpha(alpha)?;
    let q = pair_kernel_dsigma(link);
    match mode {
        ReducedMode::Polynomial => Ok(VelocityEstimate {
            value: poly_velocity(q.coeffs(), alpha, &ens.moments),
            std_err: 0.0,
        }),
        ReducedMode::MonteCarlo { samples, seed } => {
            mc_velocity(q.coeffs(), alpha, ens, samples, seed)
        }
    }
}

fn mc_velocity(
    q: &[f64],
    alpha: f64,
    ens: &AlphaEnsemble,
    samples: usize,
    seed: u64,
) -> Result<VelocityEstimate> {
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least 2 samples".into()));
    }
    let pick = WeightedIndex::new(&ens.weights).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    // Overlap of two independent uniform directions on the sphere orthogonal
    // to the teacher: u² ~ Beta(1/2, (d−2)/2) with a random sign.
    let overlap = if ens.d > 2 {
        Some(Beta::new(0.5, (ens.d as f64 - 2.0) / 2.0).map_err(|e| Error::InvalidArgument(e.to_string()))?)
    } else {
        None
    };
    let s = (1.0 - alpha * alpha).max(0.0).sqrt();
    let teacher = poly(q, alpha) * (1.0 - alpha * alpha);
    let blocks = samples.div_ceil(rng::BLOCK);
    let parts: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, rng::MONTE_CARLO, b as u64);
            let len = rng::BLOCK.min(samples - b * rng::BLOCK);
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                let ap = ens.alphas[pick.sample(&mut r)];
                let mag = overlap.as_ref().map_or(1.0, |beta| {
                    let u2: f64 = beta.sample(&mut r);
                    u2.sqrt()
                });
                let u = if r.gen::<bool>() { mag } else { -mag };
                let z = alpha * ap + s * (1.0 - ap * ap).max(0.0).sqrt() * u;
                let val = teacher - poly(q, z) * (ap - alpha * z);
                s1 += val;
                s2 += val * val;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = parts.iter().fold((0.0, 0.0), |(a, b), (c, e)| (a + c, b + e));
    let n = samples as f64;
    let mean = s1 / n;
    let var = ((s2 - n * mean * mean) / (n - 1.0)).max(0.0);
    Ok(VelocityEstimate {
        value: mean,
        std_err: (var / n).sqrt(),
    })
}

/// `∂v/∂α` of the polynomial-mode velocity.
pub fn reduced_dvelocity(alpha: f64, ens: &AlphaEnsemble, link: &LinkFunction) -> Result<f64> {
    check_alpha(alpha)?;
    let q = pair_kernel_dsigma(link);
    Ok(poly_dvelocity(q.coeffs(), alpha, &ens.moments))
}

/// `Σ_k k! c_k² (1 − r_k)²`.
pub fn loss_proxy(ens: &AlphaEnsemble, link: &LinkFunction) -> f64 {
    proxy_from(pair_kernel_sigma(link).coeffs(), &ens.moments)
}

fn proxy_from(c: &[f64], moments: &[f64]) -> f64 {
    c.iter()
        .enumerate()
        .map(|(k, ck)| ck * (1.0 - moments[k]).powi(2))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedConfig {
    pub eta: f64,
    pub delta: f64,
    pub max_steps: usize,
    pub record_every: usize,
}

impl Default for ReducedConfig {
    fn default() -> Self {
        ReducedConfig {
            eta: 5e-3,
            delta: 0.3,
            max_steps: 1_000_000,
            record_every: 100,
        }
    }
}

impl ReducedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidSchedule(format!("step size {}", self.eta)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::InvalidArgument(format!("target accuracy {}", self.delta)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidSchedule("record_every must be positive".into()));
        }
        Ok(())
    }
}

/// Quantile levels reported per record.
pub const QUANTILE_LEVELS: [f64; 5] = [0.1, 0.25, 0.5, 0.75, 0.9];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedRecord {
    pub step: usize,
    pub time: f64,
    pub loss_proxy: f64,
    pub r_kstar: f64,
    pub quantiles: [f64; 5],
}

#[derive(Clone, Debug)]
pub struct ReducedRun {
    pub link: LinkFunction,
    pub eta: f64,
    pub records: Vec<ReducedRecord>,
    /// Moments before each step, indexed by step (the last entry is the final state).
    pub moments: Vec<Vec<f64>>,
    /// Ensemble at every recorded step.
    pub snapshots: Vec<(usize, AlphaEnsemble)>,
    pub final_ensemble: AlphaEnsemble,
    /// Time at which the loss proxy first reached `δ²`.
    pub t_delta: Option<f64>,
    /// Number of Euler updates that left `[0, 1]` and were clamped.
    pub clamps: usize,
    /// First time each particle reached alignment 1/2.
    pub escape_times: Vec<Option<f64>>,
}

impl ReducedRun {
    pub fn steps(&self) -> usize {
        self.moments.len() - 1
    }

    pub fn converged(&self) -> bool {
        self.t_delta.is_some()
    }
}

fn record(step: usize, eta: f64, ens: &AlphaEnsemble, link: &LinkFunction) -> ReducedRecord {
    ReducedRecord {
        step,
        time: step as f64 * eta,
        loss_proxy: loss_proxy(ens, link),
        r_kstar: ens.moments[link.information_exponent()],
        quantiles: QUANTILE_LEVELS.map(|q| ens.quantile(q)),
    }
}

const PARALLEL_MIN: usize = 1 << 14;

/// Euler-evolves every alignment under the polynomial velocity until the
/// loss proxy drops to `δ²` or `max_steps` is reached.
pub fn run_reduced(link: &LinkFunction, ens0: AlphaEnsemble, cfg: &ReducedConfig) -> Result<ReducedRun> {
    cfg.validate()?;
    let q = pair_kernel_dsigma(link);
    let c = pair_kernel_sigma(link);
    let target = cfg.delta * cfg.delta;
    let mut ens = ens0;
    let mut run = ReducedRun {
        link: link.clone(),
        eta: cfg.eta,
        records: Vec::new(),
        moments: Vec::new(),
        snapshots: Vec::new(),
        final_ensemble: ens.clone(),
        t_delta: None,
        clamps: 0,
        escape_times: ens.alphas.iter().map(|&a| (a >= 0.5).then_some(0.0)).collect(),
    };
    let mut step = 0;
    loop {
        run.moments.push(ens.moments.clone());
        let loss = proxy_from(c.coeffs(), &ens.moments);
        let done = loss <= target;
        if done && run.t_delta.is_none() {
            run.t_delta = Some(step as f64 * cfg.eta);
        }
        if step % cfg.record_every == 0 || done || step == cfg.max_steps {
            run.records.push(record(step, cfg.eta, &ens, link));
            run.snapshots.push((step, ens.clone()));
        }
        if done || step == cfg.max_steps {
            break;
        }
        let moments = &ens.moments;
        let update = |&a: &f64| {
            let next = a + cfg.eta * poly_velocity(q.coeffs(), a, moments);
            let clamped = next.clamp(0.0, 1.0);
            (clamped, clamped != next)
        };
        let updated: Vec<(f64, bool)> = if ens.len() >= PARALLEL_MIN {
            ens.alphas.par_iter().with_min_len(PARALLEL_MIN / 4).map(update).collect()
        } else {
            ens.alphas.iter().map(update).collect()
        };
        run.clamps += updated.iter().filter(|u| u.1).count();
        ens = ens.with_alphas(updated.into_iter().map(|u| u.0).collect());
        step += 1;
        let t = step as f64 * cfg.eta;
        for (e, &a) in run.escape_times.iter_mut().zip(&ens.alphas) {
            if e.is_none() && a >= 0.5 {
                *e = Some(t);
            }
        }
    }
    run.final_ensemble = ens;
    Ok(run)
}

/// Sensitivity of a transported alignment to its starting value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EllReport {
    pub ell: f64,
    pub alpha_s: f64,
    pub alpha_t: f64,
    /// `(α_t/α_s)^{k*−1}`.
    pub power_law: f64,
}

impl EllReport {
    /// `log(ℓ / (α_t/α_s)^{k*−1})`; multiplying by `δ` gives the fitted constant.
    pub fn log_gap(&self) -> f64 {
        (self.ell / self.power_law).ln()
    }
}

/// Transports `alpha_s` from step `s` to step `t` along the recorded moments,
/// integrating `dℓ/dt = (∂v/∂α) ℓ` on the same grid.
pub fn ell_ts(run: &ReducedRun, s: usize, t: usize, alpha_s: f64) -> Result<EllReport> {
    check_alpha(alpha_s)?;
    if s > t || t > run.steps() {
        return Err(Error::InvalidArgument(format!(
            "steps ({s}, {t}) outside [0, {}]",
            run.steps()
        )));
    }
    let q = pair_kernel_dsigma(&run.link);
    let (mut a, mut ell) = (alpha_s, 1.0);
    for moments in &run.moments[s..t] {
        let v = poly_velocity(q.coeffs(), a, moments);
        let dv = poly_dvelocity(q.coeffs(), a, moments);
        let next = a + run.eta * v;
        ell *= if (0.0..=1.0).contains(&next) { 1.0 + run.eta * dv } else { 0.0 };
        a = next.clamp(0.0, 1.0);
    }
    let k = run.link.information_exponent() as i32;
    Ok(EllReport {
        ell,
        alpha_s,
        alpha_t: a,
        power_law: (a / alpha_s).powi(k - 1),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarCheck {
    pub iota: f64,
    pub mass: f64,
    pub passes: bool,
}

/// Mass of the ensemble inside `[ι, 1−ι]`; passes when it is at most `ι`.
pub fn check_star(ens: &AlphaEnsemble, iota: f64) -> Result<StarCheck> {
    if !(iota > 0.0 && iota < 0.5) {
        return Err(Error::InvalidArgument(format!("iota {iota} outside (0, 1/2)")));
    }
    let mass: f64 = ens
        .alphas
        .iter()
        .zip(&ens.weights)
        .filter(|(a, _)| **a >= iota && **a <= 1.0 - iota)
        .map(|(_, w)| w)
        .sum();
    Ok(StarCheck {
        iota,
        mass,
        passes: mass <= iota,
    })
}

/// Largest `ι` on a uniform grid of `(0, 1/2)` for which the dispersion check passes.
pub fn largest_passing_iota(ens: &AlphaEnsemble, grid: usize) -> Option<f64> {
    (1..grid)
        .rev()
        .map(|i| 0.5 * i as f64 / grid as f64)
        .find(|&iota| check_star(ens, iota).is_ok_and(|c| c.passes))
}

/// Spread of the particle escape times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeSpread {
    pub q10: f64,
    pub q90: f64,
    /// `(q90 − q10) / T(δ)`.
    pub relative: f64,
}

/// `None` unless the run converged and at least 90% of the mass escaped.
pub fn escape_spread(run: &ReducedRun) -> Option<EscapeSpread> {
    let horizon = run.t_delta?;
    let ens = &run.final_ensemble;
    let mut times: Vec<(f64, f64)> = run
        .escape_times
        .iter()
        .zip(&ens.weights)
        .map(|(t, &w)| (t.unwrap_or(f64::INFINITY), w))
        .collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    let at = |q: f64| {
        let mut acc = 0.0;
        for &(t, w) in &times {
            acc += w;
            if acc >= q - 1e-12 {
                return t;
            }
        }
        f64::INFINITY
    };
    let (q10, q90) = (at(0.1), at(0.9));
    if !q90.is_finite() || horizon <= 0.0 {
        return None;
    }
    Some(EscapeSpread {
        q10,
        q90,
        relative: (q90 - q10) / horizon,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d: usize,
    pub kstar: usize,
    pub delta: f64,
    pub t_delta: Option<f64>,
    pub clamps: usize,
}

/// `T(δ)` for `He_{k*}` over a list of dimensions, from quantile-grid starts.
pub fn sweep_escape_times(
    kstar: usize,
    dims: &[usize],
    cfg: &ReducedConfig,
    grid: usize,
) -> Result<Vec<SweepRow>> {
    let link = LinkFunction::he(kstar)?;
    dims.iter()
        .map(|&d| {
            let ens = AlphaEnsemble::quantile_grid(d, grid)?;
            let run = run_reduced(&link, ens, cfg)?;
            Ok(SweepRow {
                d,
                kstar,
                delta: cfg.delta,
                t_delta: run.t_delta,
                clamps: run.clamps,
            })
        })
        .collect()
}
