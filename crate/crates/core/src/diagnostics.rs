//! Local and interaction Hessians, stability matrices and the error-dynamics residual.
//!
//! `D⊥(w) = ∇_w ν(w, ρ) P⊥_w` linearises the velocity of a single particle,
//! `H⊥(w, w') = P⊥_w ∇_w∇_{w'} k(w, w') P⊥_{w'}` its response to moving a
//! neighbour, and the stability matrix `J_{t,s}` solves `dJ/dt = D⊥_t J`.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CovariateSpec;
use crate::dynamics::{project_tangent, ClosedForm, FlowObserver, ParticleSystem, Simulator};
use crate::kernels::{dot, Activation};
use crate::{rng, Error, Result};

/// `max_* |w·w*|`.
pub fn alignment(w: &[f64], teachers: &[Vec<f64>]) -> f64 {
    teachers.iter().map(|t| dot(w, t).abs()).fold(0.0, f64::max)
}

/// Index of the teacher with the largest `w·w*` (ties go to the lower index).
pub fn nearest_teacher(w: &[f64], teachers: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, t) in teachers.iter().enumerate() {
        let s = dot(w, t);
        if s > best.1 {
            best = (k, s);
        }
    }
    best
}

/// Whether `min_* ‖w − w*‖ ≤ τ`, using `‖w − w*‖² = 2 − 2 w·w*`.
pub fn in_ball(w: &[f64], teachers: &[Vec<f64>], tau: f64) -> bool {
    let (_, s) = nearest_teacher(w, teachers);
    (2.0 - 2.0 * s).max(0.0).sqrt() <= tau
}

pub fn projector(w: &[f64]) -> DMatrix<f64> {
    let d = w.len();
    DMatrix::from_fn(d, d, |a, b| if a == b { 1.0 } else { 0.0 } - w[a] * w[b])
}

/// Orthonormal basis of `w⊥` from a Householder reflection, as columns of a `d × (d−1)` matrix.
pub fn tangent_basis(w: &[f64]) -> DMatrix<f64> {
    let d = w.len();
    let k = (0..d)
        .max_by(|&a, &b| w[a].abs().total_cmp(&w[b].abs()))
        .unwrap();
    let sign = if w[k] >= 0.0 { 1.0 } else { -1.0 };
    // H = I − 2uuᵀ/‖u‖² maps w to −sign·e_k; its other columns span w⊥.
    let mut u = w.to_vec();
    u[k] += sign;
    let uu = dot(&u, &u);
    let mut basis = DMatrix::zeros(d, d - 1);
    let mut col = 0;
    for j in 0..d {
        if j == k {
            continue;
        }
        for a in 0..d {
            let id = if a == j { 1.0 } else { 0.0 };
            basis[(a, col)] = id - 2.0 * u[a] * u[j] / uu;
        }
        col += 1;
    }
    basis
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HessianMode {
    Analytic,
    FiniteDifference,
}

/// Step used by the finite-difference Hessians.
pub const FD_STEP: f64 = 1e-5;

/// `D⊥(w)` for a particle with second-layer weight `b` under the population velocity.
///
/// The analytic form differentiates `b P⊥_w g(w)` including the projector:
/// `∇ν = b (P⊥ ∇g − (w·g) I − w gᵀ)`.
pub fn local_hessian(
    w: &[f64],
    b: f64,
    cf: &ClosedForm,
    system: &ParticleSystem,
    mode: HessianMode,
) -> DMatrix<f64> {
    match mode {
        HessianMode::Analytic => {
            let d = w.len();
            let g = cf.drift(w, system);
            let jg = cf.drift_jacobian(w, system);
            let p = projector(w);
            let wg = dot(w, &g);
            let wv = DVector::from_column_slice(w);
            let gv = DVector::from_column_slice(&g);
            let grad = (&p * jg - DMatrix::identity(d, d) * wg - &wv * gv.transpose()) * b;
            grad * p
        }
        HessianMode::FiniteDifference => {
            local_hessian_fd(w, FD_STEP, |x| cf.velocity(x, b, system))
        }
    }
}

/// Central differences of an arbitrary velocity field along an orthonormal tangent basis.
pub fn local_hessian_fd(w: &[f64], h: f64, velocity: impl Fn(&[f64]) -> Vec<f64>) -> DMatrix<f64> {
    let d = w.len();
    let basis = tangent_basis(w);
    let mut out = DMatrix::zeros(d, d);
    for k in 0..d - 1 {
        let e = basis.column(k);
        let plus: Vec<f64> = w.iter().zip(e.iter()).map(|(a, b)| a + h * b).collect();
        let minus: Vec<f64> = w.iter().zip(e.iter()).map(|(a, b)| a - h * b).collect();
        let (vp, vm) = (velocity(&plus), velocity(&minus));
        for a in 0..d {
            let col = (vp[a] - vm[a]) / (2.0 * h);
            for c in 0..d {
                out[(a, c)] += col * e[c];
            }
        }
    }
    out
}

/// Eigenvalues (descending) of the symmetric part of `D` restricted to `w⊥`.
pub fn tangent_spectrum(dmat: &DMatrix<f64>, w: &[f64]) -> Vec<f64> {
    let basis = tangent_basis(w);
    let sym = (dmat + dmat.transpose()) * 0.5;
    let restricted = basis.transpose() * sym * &basis;
    let mut ev: Vec<f64> = SymmetricEigen::new(restricted).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev
}

/// `H⊥(w, w') = P⊥_w (q''(w·w') w' wᵀ + q'(w·w') I) P⊥_{w'}`, acting on perturbations of `w'`.
pub fn interaction_hessian(w: &[f64], wp: &[f64], cf: &ClosedForm) -> DMatrix<f64> {
    interaction_hessian_from(w, wp, |s| (cf.dq_net.eval(s), cf.ddq_net.eval(s)))
}

pub(crate) fn interaction_hessian_from(w: &[f64], wp: &[f64], q: impl Fn(f64) -> (f64, f64)) -> DMatrix<f64> {
    let d = w.len();
    let s = dot(w, wp);
    let (q1, q2) = q(s);
    let inner = DMatrix::from_fn(d, d, |a, b| {
        q2 * wp[a] * w[b] + if a == b { q1 } else { 0.0 }
    });
    projector(w) * inner * projector(wp)
}

/// Monte-Carlo `E φ_x(w) φ_x(w')ᵀ` with `φ_x(w) = P⊥_w σ'(w·x) x`; returns the
/// estimate and the largest entrywise standard error.
pub fn interaction_hessian_mc(
    w: &[f64],
    wp: &[f64],
    act: &Activation,
    cov: &CovariateSpec,
    n: usize,
    seed: u64,
) -> Result<(DMatrix<f64>, f64)> {
    cov.validate()?;
    let d = cov.dim();
    if w.len() != d || wp.len() != d {
        return Err(Error::InvalidDistribution("vector length differs from dimension".into()));
    }
    let blocks = n.div_ceil(rng::BLOCK);
    let parts: Vec<(DMatrix<f64>, DMatrix<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|blk| {
            let mut r = rng::stream(seed, rng::MONTE_CARLO, blk as u64);
            let len = rng::BLOCK.min(n - blk * rng::BLOCK);
            let mut s1 = DMatrix::zeros(d, d);
            let mut s2 = DMatrix::zeros(d, d);
            let mut x = vec![0.0; d];
            for _ in 0..len {
                cov.sample_into(&mut r, &mut x);
                let mut a = x.clone();
                project_tangent(w, &mut a);
                let mut c = x.clone();
                project_tangent(wp, &mut c);
                let f = act.eval_d1(dot(w, &x)) * act.eval_d1(dot(wp, &x));
                for i in 0..d {
                    for j in 0..d {
                        let v = f * a[i] * c[j];
                        s1[(i, j)] += v;
                        s2[(i, j)] += v * v;
                    }
                }
            }
            (s1, s2)
        })
        .collect();
    let mut s1 = DMatrix::zeros(d, d);
    let mut s2 = DMatrix::zeros(d, d);
    for (a, b) in parts {
        s1 += a;
        s2 += b;
    }
    let nf = n as f64;
    let mean = &s1 / nf;
    let mut se: f64 = 0.0;
    for (m1, m2) in mean.iter().zip(s2.iter()) {
        let var = (m2 / nf - m1 * m1).max(0.0) * nf / (nf - 1.0);
        se = se.max((var / nf).sqrt());
    }
    Ok((mean, se))
}

/// Block matrix `[b_i b_j H⊥(w_i, w_j)]` of size `md × md`.
pub fn assemble_interaction_operator(system: &ParticleSystem, cf: &ClosedForm) -> DMatrix<f64> {
    let (m, d) = (system.m(), system.d());
    let mut out = DMatrix::zeros(m * d, m * d);
    for i in 0..m {
        for j in 0..m {
            let h = interaction_hessian(system.row(i), system.row(j), cf) * (system.b(i) * system.b(j));
            out.view_mut((i * d, j * d), (d, d)).copy_from(&h);
        }
    }
    out
}

pub fn min_eigenvalue(sym: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(sym.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

/// Positions of a probe that moves with the recorded systems, `snapshots[k]` being step `first + k`.
pub fn probe_path(
    sim: &Simulator,
    snapshots: &[ParticleSystem],
    first: usize,
    start: &[f64],
    b: f64,
) -> Vec<Vec<f64>> {
    let eta = sim.schedule.eta;
    let mut w = start.to_vec();
    let mut path = vec![w.clone()];
    for (k, sys) in snapshots.iter().enumerate().take(snapshots.len().saturating_sub(1)) {
        let batch = sim.batch(first + k);
        let v = sim.probe_velocity(&w, b, sys, batch.as_ref());
        w.iter_mut().zip(&v).for_each(|(a, x)| *a += eta * x);
        let n = dot(&w, &w).sqrt();
        w.iter_mut().for_each(|a| *a /= n);
        path.push(w.clone());
    }
    path
}

/// Derivative of the retraction `w ↦ (w + ηv)/‖w + ηv‖` at a step from `prev` to `next`:
/// `J ← P⊥_{next} (I + η D⊥) J / ‖w + ηv‖`, using `‖w + ηv‖ = 1/(prev·next)` since `v ⊥ w`.
fn advance(j: &DMatrix<f64>, dmat: &DMatrix<f64>, eta: f64, prev: &[f64], next: &[f64]) -> DMatrix<f64> {
    let step = j + dmat * j * eta;
    projector(next) * step * dot(prev, next)
}

/// `J⊥_{t,s}` along a probe path started at `path[0]` (time `s`) through the
/// systems `snapshots[0..]`, ending at `path.len() − 1` steps later.
pub fn stability_matrix(
    cf: &ClosedForm,
    eta: f64,
    snapshots: &[ParticleSystem],
    path: &[Vec<f64>],
    b: f64,
) -> DMatrix<f64> {
    let mut j = projector(&path[0]);
    for k in 0..path.len() - 1 {
        let dmat = local_hessian(&path[k], b, cf, &snapshots[k], HessianMode::Analytic);
        j = advance(&j, &dmat, eta, &path[k], &path[k + 1]);
    }
    j
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    a.singular_values().iter().copied().fold(0.0, f64::max)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JRecord {
    pub source_step: usize,
    pub target_step: usize,
    pub anchor: usize,
    pub norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JStats {
    pub j_max: f64,
    pub j_max_at: Option<JRecord>,
    pub j_avg: f64,
    pub j_avg_at: Option<(usize, usize, usize)>,
    pub tau: f64,
    pub records: Vec<JRecord>,
}

struct Probe {
    /// `H⊥_s(ξ_s(a), w') v` for each anchor `a`.
    pushes: Vec<Vec<f64>>,
}

/// Tracks stability matrices of anchor particles from several source steps during a run.
pub struct StabilityTracker {
    anchors: Vec<usize>,
    sources: Vec<usize>,
    targets: BTreeMap<usize, Vec<usize>>,
    probes_per_pair: usize,
    tau: f64,
    teachers: Vec<Vec<f64>>,
    seed: u64,
    active: BTreeMap<usize, (Vec<DMatrix<f64>>, Vec<Probe>)>,
    records: Vec<JRecord>,
    averages: Vec<((usize, usize, usize), f64)>,
    /// Anchor positions at the previous step.
    prev: Vec<Vec<f64>>,
}

impl StabilityTracker {
    /// `targets[s]` lists the steps at which `J_{t,s}` is evaluated for source `s`.
    pub fn new(
        anchors: Vec<usize>,
        targets: BTreeMap<usize, Vec<usize>>,
        probes_per_pair: usize,
        tau: f64,
        teachers: Vec<Vec<f64>>,
        seed: u64,
    ) -> Self {
        StabilityTracker {
            anchors,
            sources: targets.keys().copied().collect(),
            targets,
            probes_per_pair,
            tau,
            teachers,
            seed,
            active: BTreeMap::new(),
            records: Vec::new(),
            averages: Vec::new(),
            prev: Vec::new(),
        }
    }

    /// Evenly spaced grid of `pairs` (s, t) pairs with `s < t ≤ n_steps`.
    pub fn grid(n_steps: usize, sources: usize, per_source: usize) -> BTreeMap<usize, Vec<usize>> {
        let mut out = BTreeMap::new();
        for a in 0..sources {
            let s = a * n_steps / (sources + 1);
            let ts: Vec<usize> = (1..=per_source)
                .map(|b| s + b * (n_steps - s) / per_source)
                .collect();
            out.insert(s, ts);
        }
        out
    }

    pub fn stats(&self) -> JStats {
        let best = self
            .records
            .iter()
            .max_by(|a, b| a.norm.total_cmp(&b.norm))
            .cloned();
        let avg = self
            .averages
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1))
            .copied();
        JStats {
            j_max: best.as_ref().map_or(0.0, |r| r.norm),
            j_max_at: best,
            j_avg: avg.map_or(0.0, |a| a.1),
            j_avg_at: avg.map(|a| a.0),
            tau: self.tau,
            records: self.records.clone(),
        }
    }
}

impl FlowObserver for StabilityTracker {
    fn observe(&mut self, step: usize, system: &ParticleSystem, sim: &Simulator) -> Result<()> {
        let cf = sim
            .closed_form()
            .ok_or_else(|| Error::NotClosedForm("stability tracking needs a closed form".into()))?;
        let d = system.d();
        if self.sources.contains(&step) {
            let mut r = rng::stream(self.seed, rng::PROBE, step as u64);
            let js = self.anchors.iter().map(|&a| projector(system.row(a))).collect();
            let probes = (0..self.probes_per_pair)
                .map(|_| {
                    let jp = r.gen_range(0..system.m());
                    let wp = system.row(jp);
                    let mut v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                    project_tangent(wp, &mut v);
                    let n = dot(&v, &v).sqrt();
                    v.iter_mut().for_each(|x| *x /= n);
                    let pushes = self
                        .anchors
                        .iter()
                        .map(|&a| {
                            let h = interaction_hessian(system.row(a), wp, cf);
                            (h * DVector::from_column_slice(&v)).as_slice().to_vec()
                        })
                        .collect();
                    Probe { pushes }
                })
                .collect();
            self.active.insert(step, (js, probes));
        }
        let eta = sim.schedule.eta;
        let anchors = self.anchors.clone();
        let dmats: Vec<DMatrix<f64>> = if self.active.is_empty() {
            Vec::new()
        } else {
            anchors
                .par_iter()
                .map(|&a| local_hessian(system.row(a), system.b(a), cf, system, HessianMode::Analytic))
                .collect()
        };
        for (&s, (js, probes)) in self.active.iter_mut() {
            if s < step {
                for (k, &a) in anchors.iter().enumerate() {
                    let row = system.row(a);
                    js[k] = projector(row) * &js[k] * dot(&self.prev[k], row);
                }
            }
            if self.targets[&s].contains(&step) {
                for (k, &a) in anchors.iter().enumerate() {
                    self.records.push(JRecord {
                        source_step: s,
                        target_step: step,
                        anchor: a,
                        norm: spectral_norm(&js[k]),
                    });
                }
                for (p, probe) in probes.iter().enumerate() {
                    let mut acc = 0.0;
                    for (k, &a) in anchors.iter().enumerate() {
                        if !in_ball(system.row(a), &self.teachers, self.tau) {
                            let v = &js[k] * DVector::from_column_slice(&probe.pushes[k]);
                            acc += v.norm();
                        }
                    }
                    self.averages.push(((s, step, p), acc / anchors.len() as f64));
                }
            }
            for k in 0..anchors.len() {
                js[k] = &js[k] + &dmats[k] * &js[k] * eta;
            }
        }
        self.prev = anchors.iter().map(|&a| system.row(a).to_vec()).collect();
        let last = self.targets.values().flatten().max().copied().unwrap_or(0);
        if step >= last {
            self.active.clear();
        }
        Ok(())
    }
}

/// Self-concordance sample: the top tangent eigenvalue of `D⊥` against `v(α)/α`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceRecord {
    pub step: usize,
    pub particle: usize,
    pub alpha: f64,
    pub velocity: f64,
    pub lambda_max: f64,
    pub bound: f64,
}

impl ConcordanceRecord {
    pub fn holds(&self) -> bool {
        self.lambda_max <= self.bound
    }
}

/// Records `λ_max(D⊥)` for sampled neurons whose alignment lies in `window`,
/// with bound `factor · v(α)/α` where `v` is the radial velocity toward the nearest teacher.
pub struct ConcordanceProbe {
    pub neurons: Vec<usize>,
    pub every: usize,
    pub window: (f64, f64),
    pub factor: f64,
    pub records: Vec<ConcordanceRecord>,
    /// `(step, particle, λ_max)` for every sampled neuron regardless of the window.
    pub spectrum: Vec<(usize, usize, f64)>,
}

impl ConcordanceProbe {
    pub fn new(neurons: Vec<usize>, every: usize, window: (f64, f64), factor: f64) -> Self {
        ConcordanceProbe {
            neurons,
            every,
            window,
            factor,
            records: Vec::new(),
            spectrum: Vec::new(),
        }
    }
}

impl FlowObserver for ConcordanceProbe {
    fn observe(&mut self, step: usize, system: &ParticleSystem, sim: &Simulator) -> Result<()> {
        if step % self.every != 0 {
            return Ok(());
        }
        let cf = sim
            .closed_form()
            .ok_or_else(|| Error::NotClosedForm("self-concordance needs a closed form".into()))?;
        let teachers = &cf.atoms.directions;
        let rows: Vec<(usize, f64, f64, f64)> = self
            .neurons
            .par_iter()
            .map(|&i| {
                let w = system.row(i);
                let (k, s) = nearest_teacher(w, teachers);
                let alpha = s.abs();
                let sign = if s >= 0.0 { 1.0 } else { -1.0 };
                let nu = cf.velocity(w, system.b(i), system);
                let v = sign * dot(&teachers[k], &nu);
                let dmat = local_hessian(w, system.b(i), cf, system, HessianMode::Analytic);
                let lam = tangent_spectrum(&dmat, w)[0];
                (i, alpha, v, lam)
            })
            .collect();
        for (i, alpha, v, lam) in rows {
            self.spectrum.push((step, i, lam));
            if alpha >= self.window.0 && alpha <= self.window.1 {
                self.records.push(ConcordanceRecord {
                    step,
                    particle: i,
                    alpha,
                    velocity: v,
                    lambda_max: lam,
                    bound: self.factor * v / alpha,
                });
            }
        }
        Ok(())
    }
}

/// `out_i = (1/m) Σ_j b_i b_j H⊥(w_i, w_j) Δ_j`.
pub fn interaction_apply(system: &ParticleSystem, cf: &ClosedForm, deltas: &[f64]) -> Vec<f64> {
    let (m, d) = (system.m(), system.d());
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let wi = system.row(i);
            let mut acc = vec![0.0; d];
            for j in 0..m {
                let wj = system.row(j);
                let mut dj = deltas[j * d..(j + 1) * d].to_vec();
                project_tangent(wj, &mut dj);
                let s = dot(wi, wj);
                let (q1, q2) = (cf.dq_net.eval(s), cf.ddq_net.eval(s));
                let wd = dot(wi, &dj);
                let c = system.b(i) * system.b(j) / m as f64;
                for a in 0..d {
                    acc[a] += c * (q2 * wj[a] * wd + q1 * dj[a]);
                }
            }
            project_tangent(wi, &mut acc);
            acc
        })
        .collect();
    rows.concat()
}

/// `(D⊥(w_i) Δ_i)_i` for every particle.
pub fn local_apply(system: &ParticleSystem, cf: &ClosedForm, deltas: &[f64]) -> Vec<f64> {
    let d = system.d();
    let rows: Vec<Vec<f64>> = (0..system.m())
        .into_par_iter()
        .map(|i| {
            let dm = local_hessian(system.row(i), system.b(i), cf, system, HessianMode::Analytic);
            (dm * DVector::from_column_slice(&deltas[i * d..(i + 1) * d])).as_slice().to_vec()
        })
        .collect();
    rows.concat()
}

/// Paired states of a coupled run at consecutive steps.
#[derive(Clone, Debug)]
pub struct CoupledSnapshot {
    pub step: usize,
    /// Mean-field proxy at `step` and `step + 1`.
    pub proxy: (ParticleSystem, ParticleSystem),
    /// Width-`m` system at `step` and `step + 1`.
    pub small: (ParticleSystem, ParticleSystem),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuhamelReport {
    pub step: usize,
    pub m: usize,
    pub delta_norms: Vec<f64>,
    pub residual_norms: Vec<f64>,
    pub bound: Vec<f64>,
    /// `max_i ‖ν(ξ(w_i), ρ^M) − ν(ξ(w_i), ρ̄^m)‖`.
    pub eps_m: f64,
    /// `max_i ‖ν_batch(ŵ_i) − ν(ŵ_i)‖`; zero in population mode.
    pub eps_n: f64,
    /// Smallest constant making the bound hold at every neuron.
    pub creg_fit: f64,
    /// Mean norm of the Taylor remainder with the linear terms taken at `ρ̄^m`.
    pub quadratic_mean: f64,
}

fn deltas_of(a: &ParticleSystem, b: &ParticleSystem) -> Vec<f64> {
    a.weights().iter().zip(b.weights()).map(|(x, y)| x - y).collect()
}

fn row_norms(v: &[f64], d: usize) -> Vec<f64> {
    v.chunks_exact(d).map(|r| dot(r, r).sqrt()).collect()
}

/// Taylor remainder `ν(ŵ_i, ρ̂) − ν(w̄_i, ρ̄) − (D̄ Δ_i − E_j H̄ Δ_j)` where `ŵ = normalise(w̄ + cΔ)`
/// and the linear terms are taken at the mean-field prefix `ρ̄`; returns per-neuron norms.
pub fn quadratic_component(cf: &ClosedForm, mean_field: &ParticleSystem, deltas: &[f64], c: f64) -> Vec<f64> {
    let d = mean_field.d();
    let mut moved = Vec::with_capacity(deltas.len());
    for (w, dl) in mean_field.weights().chunks_exact(d).zip(deltas.chunks_exact(d)) {
        let mut x: Vec<f64> = w.iter().zip(dl).map(|(a, b)| a + c * b).collect();
        let n = dot(&x, &x).sqrt();
        x.iter_mut().for_each(|v| *v /= n);
        moved.extend(x);
    }
    let moved_sys = mean_field.with_weights(moved);
    let dc = deltas_of(&moved_sys, mean_field);
    let v_hat = cf.velocities(&moved_sys);
    let v_bar = cf.velocities(mean_field);
    let lin_local = local_apply(mean_field, cf, &dc);
    let lin_inter = interaction_apply(mean_field, cf, &dc);
    let rem: Vec<f64> = (0..dc.len())
        .map(|k| v_hat[k] - v_bar[k] - (lin_local[k] - lin_inter[k]))
        .collect();
    row_norms(&rem, d)
}

/// Error-dynamics residual at one snapshot of a coupled run.
pub fn duhamel_residual(sim: &Simulator, snap: &CoupledSnapshot) -> Result<DuhamelReport> {
    let cf = sim
        .closed_form()
        .ok_or_else(|| Error::NotClosedForm("Duhamel residual needs a closed form".into()))?;
    let eta = sim.schedule.eta;
    let m = snap.small.0.m();
    let d = snap.small.0.d();
    let bar = snap.proxy.0.prefix(m);
    let bar_next = snap.proxy.1.prefix(m);
    let delta = deltas_of(&snap.small.0, &bar);
    let delta_next = deltas_of(&snap.small.1, &bar_next);
    let ddt: Vec<f64> = delta_next.iter().zip(&delta).map(|(a, b)| (a - b) / eta).collect();
    // Linear terms against the mean-field proxy ρ^M.
    let proxy = &snap.proxy.0;
    let big_m = proxy.m();
    let mut local = vec![0.0; m * d];
    let mut inter = vec![0.0; m * d];
    let rows: Vec<(Vec<f64>, Vec<f64>)> = (0..m)
        .into_par_iter()
        .map(|i| {
            let wi = bar.row(i);
            let dm = local_hessian(wi, bar.b(i), cf, proxy, HessianMode::Analytic);
            let l = (dm * DVector::from_column_slice(&delta[i * d..(i + 1) * d])).as_slice().to_vec();
            let mut acc = vec![0.0; d];
            for j in 0..m {
                let h = interaction_hessian(wi, bar.row(j), cf) * (bar.b(i) * bar.b(j) / m as f64);
                let v = h * DVector::from_column_slice(&delta[j * d..(j + 1) * d]);
                acc.iter_mut().zip(v.iter()).for_each(|(a, b)| *a += b);
            }
            (l, acc)
        })
        .collect();
    for (i, (l, h)) in rows.into_iter().enumerate() {
        local[i * d..(i + 1) * d].copy_from_slice(&l);
        inter[i * d..(i + 1) * d].copy_from_slice(&h);
    }
    let resid: Vec<f64> = (0..m * d).map(|k| ddt[k] - (local[k] - inter[k])).collect();
    let residual_norms = row_norms(&resid, d);
    let delta_norms = row_norms(&delta, d);
    let mut eps_m: f64 = 0.0;
    let mut eps_n: f64 = 0.0;
    let batch = sim.batch(snap.step);
    for i in 0..m {
        let full = cf.velocity(bar.row(i), bar.b(i), proxy);
        let pre = cf.velocity(bar.row(i), bar.b(i), &bar);
        eps_m = eps_m.max(full.iter().zip(&pre).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        if let Some(bt) = &batch {
            let w = snap.small.0.row(i);
            let emp = crate::dynamics::empirical_velocity(w, snap.small.0.b(i), &snap.small.0, &sim.problem.activation, &bt.xs, &bt.ys);
            let pop = cf.velocity(w, snap.small.0.b(i), &snap.small.0);
            eps_n = eps_n.max(emp.iter().zip(&pop).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt());
        }
    }
    let _ = big_m;
    let mean_sq = delta_norms.iter().map(|x| x * x).sum::<f64>() / m as f64;
    let mut creg_fit: f64 = 0.0;
    for i in 0..m {
        let quad = delta_norms[i].powi(2) + mean_sq;
        if quad > 0.0 {
            creg_fit = creg_fit.max((residual_norms[i] - 2.0 * eps_m - eps_n).max(0.0) / (2.0 * quad));
        }
    }
    let bound = (0..m)
        .map(|i| 2.0 * eps_m + eps_n + 2.0 * creg_fit * (delta_norms[i].powi(2) + mean_sq))
        .collect();
    let quad = quadratic_component(cf, &bar, &delta, 1.0);
    Ok(DuhamelReport {
        step: snap.step,
        m,
        delta_norms,
        residual_norms,
        bound,
        eps_m,
        eps_n,
        creg_fit,
        quadratic_mean: quad.iter().sum::<f64>() / m as f64,
    })
}

/// Ratio of mean quadratic-remainder norms when `Δ` is scaled by 2.
pub fn quadratic_scaling_ratio(cf: &ClosedForm, mean_field: &ParticleSystem, deltas: &[f64]) -> f64 {
    let one = quadratic_component(cf, mean_field, deltas, 1.0);
    let two = quadratic_component(cf, mean_field, deltas, 2.0);
    two.iter().sum::<f64>() / one.iter().sum::<f64>()
}

/// Shuffled particle indices, for picking anchors and probes.
pub fn sample_indices(m: usize, k: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..m).collect();
    idx.shuffle(&mut rng::stream(seed, rng::PROBE, u64::MAX));
    idx.truncate(k.min(m));
    idx.sort_unstable();
    idx
}

/// Rate `d^{3/2} log(mT)/√m` of the sampling error.
pub fn eps_m_rate(d: usize, m: usize, horizon: f64) -> f64 {
    (d as f64).powf(1.5) * (m as f64 * horizon).max(std::f64::consts::E).ln() / (m as f64).sqrt()
}

/// Rate `√d log²(n)/√n` of the data error.
pub fn eps_n_rate(d: usize, n: usize) -> f64 {
    (d as f64).sqrt() * (n as f64).ln().powi(2) / (n as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{basis_vector, SecondLayerSpec, TargetKind, TargetSpec};
    use crate::dynamics::{FlowSchedule, Problem, VelocityMode};
    use crate::kernels::LinkFunction;

    fn he4(d: usize) -> Problem {
        Problem {
            covariates: CovariateSpec::GaussianIso { d },
            target: TargetSpec::noiseless(TargetKind::SingleIndex {
                link: LinkFunction::he(4).unwrap(),
                direction: basis_vector(d, 0),
            }),
            activation: Activation::Hermite(LinkFunction::he(4).unwrap()),
            second_layer: SecondLayerSpec::Ones,
        }
    }

    fn rel(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).amax() / b.amax().max(1e-300)
    }

    #[test]
    fn tangent_basis_is_orthonormal_and_tangent() {
        let w = [0.3, -0.5, 0.1, (1.0f64 - 0.35).sqrt()];
        let b = tangent_basis(&w);
        let gram = b.transpose() * &b;
        assert!((gram - DMatrix::identity(3, 3)).amax() < 1e-14);
        let wv = DVector::from_column_slice(&w);
        assert!((b.transpose() * wv).amax() < 1e-14);
    }

    #[test]
    fn analytic_local_hessian_matches_fd() {
        let d = 6;
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, 8, 5, &SecondLayerSpec::Ones).unwrap();
        for i in 0..8 {
            let w = sys.row(i);
            let a = local_hessian(w, 1.0, &cf, &sys, HessianMode::Analytic);
            let f = local_hessian(w, 1.0, &cf, &sys, HessianMode::FiniteDifference);
            assert!(rel(&a, &f) < 1e-6, "{}", rel(&a, &f));
        }
    }

    #[test]
    fn local_hessian_annihilates_w() {
        let d = 5;
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, 4, 1, &SecondLayerSpec::Ones).unwrap();
        let w = sys.row(2);
        let dm = local_hessian(w, 1.0, &cf, &sys, HessianMode::Analytic);
        assert!((dm * DVector::from_column_slice(w)).amax() < 1e-12);
    }

    #[test]
    fn interaction_hessian_closed_form_matches_monte_carlo() {
        let d = 4;
        let p = he4(d);
        let cf = p.closed_form().unwrap();
        let w = [0.6, 0.8, 0.0, 0.0];
        let wp = [0.8, 0.0, 0.6, 0.0];
        let closed = interaction_hessian(&w, &wp, &cf);
        let (mc, se) = interaction_hessian_mc(&w, &wp, &p.activation, &p.covariates, 400_000, 1).unwrap();
        assert!((closed - mc).amax() < 5.0 * se, "se {se}");
    }

    #[test]
    fn interaction_hessian_matches_mixed_derivative() {
        // H⊥ acting on u' equals the derivative of the neighbour term of ν(w) along u'.
        let d = 5;
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, 2, 4, &SecondLayerSpec::Ones).unwrap();
        let (w, wp) = (sys.row(0).to_vec(), sys.row(1).to_vec());
        let h = interaction_hessian(&w, &wp, &cf);
        let neighbour = |x: &[f64]| -> Vec<f64> {
            let s = dot(&w, x);
            let mut v: Vec<f64> = x.iter().map(|xi| cf.dq_net.eval(s) * xi).collect();
            project_tangent(&w, &mut v);
            v
        };
        let fd = local_hessian_fd(&wp, FD_STEP, neighbour);
        assert!(rel(&h, &fd) < 1e-6);
    }

    #[test]
    fn assembled_operator_is_psd() {
        let d = 4;
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, 10, 8, &SecondLayerSpec::Ones).unwrap();
        let op = assemble_interaction_operator(&sys, &cf);
        assert!((&op - op.transpose()).amax() < 1e-12);
        assert!(min_eigenvalue(&op) > -1e-8);
    }

    #[test]
    fn ball_membership() {
        let t = vec![basis_vector(3, 0)];
        assert!(in_ball(&[1.0, 0.0, 0.0], &t, 0.0));
        let a: f64 = 0.99;
        let w = [a, (1.0 - a * a).sqrt(), 0.0];
        assert!(in_ball(&w, &t, (2.0 - 2.0 * a).sqrt() + 1e-12));
        assert!(!in_ball(&w, &t, (2.0 - 2.0 * a).sqrt() - 1e-6));
        assert!((alignment(&[-0.6, 0.8, 0.0], &t) - 0.6).abs() < 1e-15);
    }

    #[test]
    fn tangent_spectrum_is_negative_near_a_converged_teacher() {
        // Most mass at w*, a residual fraction on the equator: the top tangent
        // eigenvalue of D⊥ near w* is negative.
        let d = 6;
        let cf = he4(d).closed_form().unwrap();
        let mut rows = Vec::new();
        for _ in 0..9 {
            rows.extend(basis_vector(d, 0));
        }
        rows.extend(basis_vector(d, 1));
        let sys = ParticleSystem::new(d, rows, None).unwrap();
        let a: f64 = 0.999;
        let mut w = vec![0.0; d];
        w[0] = a;
        w[2] = (1.0 - a * a).sqrt();
        let dm = local_hessian(&w, 1.0, &cf, &sys, HessianMode::Analytic);
        assert!(tangent_spectrum(&dm, &w)[0] < 0.0);
    }

    #[test]
    fn stability_matrix_matches_flow_map_differences() {
        let d = 5;
        let sched = FlowSchedule {
            eta: 0.001,
            n_steps: 120,
            record_every: 120,
            mode: VelocityMode::Population,
            n_train: 0,
            batch_size: 0,
        };
        let sim = Simulator::new(he4(d), sched, 0, 0).unwrap();
        let sys = ParticleSystem::init(d, 6, 3, &SecondLayerSpec::Ones).unwrap();
        let traj = crate::dynamics::run_flow(&sim, sys, crate::dynamics::SnapshotPolicy::EveryStep, &mut []).unwrap();
        let snaps: Vec<ParticleSystem> = traj.snapshots.iter().map(|(_, s)| s.clone()).collect();
        let cf = sim.closed_form().unwrap();
        let s = 10;
        let w0 = snaps[s].row(2).to_vec();
        let window = &snaps[s..s + 41];
        let path = probe_path(&sim, window, s, &w0, 1.0);
        // Probe path reproduces the particle's own path.
        assert!(path[40].iter().zip(snaps[s + 40].row(2)).all(|(a, b)| (a - b).abs() < 1e-12));
        let j = stability_matrix(cf, 0.001, window, &path, 1.0);
        assert!(spectral_norm(&j) > 0.1);
        let eps = 1e-6;
        let basis = tangent_basis(&w0);
        let mut fd = DMatrix::zeros(d, d);
        for k in 0..d - 1 {
            let e = basis.column(k);
            let shift = |sg: f64| {
                let mut x: Vec<f64> = w0.iter().zip(e.iter()).map(|(a, b)| a + sg * eps * b).collect();
                let n = dot(&x, &x).sqrt();
                x.iter_mut().for_each(|v| *v /= n);
                probe_path(&sim, window, s, &x, 1.0).pop().unwrap()
            };
            let (p, m) = (shift(1.0), shift(-1.0));
            for a in 0..d {
                for c in 0..d {
                    fd[(a, c)] += (p[a] - m[a]) / (2.0 * eps) * e[c];
                }
            }
        }
        assert!(rel(&j, &fd) < 1e-2, "{}", rel(&j, &fd));
    }

    #[test]
    fn quadratic_component_scales_by_four() {
        let d = 6;
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, 16, 2, &SecondLayerSpec::Ones).unwrap();
        let mut r = rng::stream(1, rng::PROBE, 0);
        let deltas: Vec<f64> = (0..16 * d).map(|_| 1e-3 * r.sample::<f64, _>(StandardNormal)).collect();
        let ratio = quadratic_scaling_ratio(&cf, &sys, &deltas);
        assert!((ratio - 4.0).abs() < 0.1, "{ratio}");
    }

    #[test]
    fn rates_are_monotone_in_sample_size() {
        assert!(eps_m_rate(8, 1000, 10.0) > eps_m_rate(8, 4000, 10.0));
        assert!(eps_n_rate(8, 1 << 12) > eps_n_rate(8, 1 << 16));
    }
}
