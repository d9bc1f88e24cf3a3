//! Limiting interaction operator for atomic targets, its balanced spectral
//! decomposition, and the coupling potential `Φ = Ω + Ψ`.
//!
//! Once every particle is attached to a teacher atom, the limiting operator
//! `(H̄Δ)(i) = E_j H∞(i, j) Δ(j)` only sees per-atom averages of `Δ`. With
//! occupancies `p_g`, the symmetric matrix `A_{gh} = √(p_g p_h) H(t_g, t_h)`
//! of size `(atoms·d)²` carries the whole spectrum; an eigenvector `u`
//! becomes the eigenfunction `v(w_i) = u_{g(i)} / √p_{g(i)}`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::diagnostics::{in_ball, interaction_apply, interaction_hessian_from, local_apply, nearest_teacher};
use crate::dynamics::{ClosedForm, ParticleSystem};
use crate::kernels::{pair_kernel_dsigma, pair_kernel_ddsigma, LinkFunction};
use crate::{Error, Result};

/// Relative tolerance for merging eigenvalues into one cluster.
pub const CLUSTER_TOL: f64 = 1e-8;
/// Eigenvalues below this fraction of the largest are treated as the null space.
const NULL_TOL: f64 = 1e-10;

/// Nearest teacher of every particle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TeacherAssignment {
    pub teacher: Vec<usize>,
    pub distance: Vec<f64>,
}

impl TeacherAssignment {
    pub fn m(&self) -> usize {
        self.teacher.len()
    }

    /// Fraction of particles attached to each of `k` teachers.
    pub fn occupancy(&self, k: usize) -> Vec<f64> {
        let mut p = vec![0.0; k];
        for &t in &self.teacher {
            p[t] += 1.0;
        }
        p.iter_mut().for_each(|x| *x /= self.m() as f64);
        p
    }
}

/// Assigns each particle of `system` to its closest teacher.
///
/// ```
/// use poc_lab::dynamics::ParticleSystem;
/// use poc_lab::potential::assign_xi_infinity;
/// let s = 0.5f64.sqrt();
/// let sys = ParticleSystem::new(2, vec![0.6, 0.8, s, s], None).unwrap();
/// let teachers = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
/// let a = assign_xi_infinity(&sys, &teachers).unwrap();
/// assert_eq!(a.teacher, vec![1, 0]);
/// ```
pub fn assign_xi_infinity(system: &ParticleSystem, teachers: &[Vec<f64>]) -> Result<TeacherAssignment> {
    if teachers.is_empty() {
        return Err(Error::InvalidTarget("no teacher atoms".into()));
    }
    if teachers.iter().any(|t| t.len() != system.d()) {
        return Err(Error::shape(system.d(), teachers[0].len()));
    }
    let (teacher, distance) = (0..system.m())
        .map(|i| {
            let (k, s) = nearest_teacher(system.row(i), teachers);
            (k, (2.0 - 2.0 * s).max(0.0).sqrt())
        })
        .unzip();
    Ok(TeacherAssignment { teacher, distance })
}

/// Closed-form `H⊥` between two teacher atoms.
fn teacher_block(a: &[f64], b: &[f64], link: &LinkFunction) -> DMatrix<f64> {
    let (q1, q2) = (pair_kernel_dsigma(link), pair_kernel_ddsigma(link));
    interaction_hessian_from(a, b, |s| (q1.eval(s), q2.eval(s)))
}

/// `H∞⊥(i, j)`: the interaction Hessian between the teachers of `i` and `j`.
pub fn h_infinity_block(
    i: usize,
    j: usize,
    assignment: &TeacherAssignment,
    teachers: &[Vec<f64>],
    link: &LinkFunction,
) -> DMatrix<f64> {
    let (ti, tj) = (assignment.teacher[i], assignment.teacher[j]);
    teacher_block(&teachers[ti], &teachers[tj], link)
}

/// One eigenvalue with an orthonormal basis of its eigenspace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub eigenvalue: f64,
    /// Each basis function as `atoms × d` values, one `d`-block per teacher
    /// (zero on unoccupied atoms).
    pub basis: Vec<Vec<f64>>,
    /// Smallest `η` with `Σ_v v(w) v(w)ᵀ ⪯ η² I` at every particle.
    pub eta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralDecomposition {
    pub d: usize,
    pub teachers: Vec<Vec<f64>>,
    pub occupancy: Vec<f64>,
    pub clusters: Vec<Cluster>,
    /// `C_b = Σ η_λ²`.
    pub balance: f64,
    /// `min(#atoms, dim span^degree)`.
    pub c_rho: f64,
    /// Smallest occupancy among occupied atoms.
    pub min_occupancy: f64,
    /// `2 C_ρ / p`.
    pub balance_bound: f64,
    /// Atoms with no particle attached; left out of the decomposition.
    pub empty_atoms: Vec<usize>,
}

impl SpectralDecomposition {
    pub fn balanced(&self) -> bool {
        self.balance <= self.balance_bound
    }

    /// `v(w)` for a particle attached to teacher `t`.
    pub fn eval<'a>(&self, basis: &'a [f64], t: usize) -> &'a [f64] {
        &basis[t * self.d..(t + 1) * self.d]
    }

    pub fn rank(&self) -> usize {
        self.clusters.iter().map(|c| c.basis.len()).sum()
    }
}

fn span_rank(teachers: &[Vec<f64>]) -> usize {
    let d = teachers[0].len();
    let m = DMatrix::from_fn(d, teachers.len(), |a, k| teachers[k][a]);
    m.rank(1e-10)
}

/// Eigen-decomposes `H̄∞` on the occupied atoms and computes balance constants.
pub fn spectral_decompose(
    assignment: &TeacherAssignment,
    teachers: &[Vec<f64>],
    link: &LinkFunction,
) -> Result<SpectralDecomposition> {
    if teachers.is_empty() {
        return Err(Error::InvalidTarget("no teacher atoms".into()));
    }
    let d = teachers[0].len();
    let k = teachers.len();
    let occupancy = assignment.occupancy(k);
    let occupied: Vec<usize> = (0..k).filter(|&g| occupancy[g] > 0.0).collect();
    let empty_atoms: Vec<usize> = (0..k).filter(|&g| occupancy[g] == 0.0).collect();
    let n = occupied.len() * d;
    let mut a = DMatrix::zeros(n, n);
    for (x, &g) in occupied.iter().enumerate() {
        for (y, &h) in occupied.iter().enumerate() {
            let blk = teacher_block(&teachers[g], &teachers[h], link) * (occupancy[g] * occupancy[h]).sqrt();
            a.view_mut((x * d, y * d), (d, d)).copy_from(&blk);
        }
    }
    // Symmetrise away rounding before the solver sees it.
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].total_cmp(&eig.eigenvalues[x]));
    let top = order.first().map_or(0.0, |&o| eig.eigenvalues[o].abs());

    let mut clusters: Vec<Cluster> = Vec::new();
    for &o in &order {
        let lam = eig.eigenvalues[o];
        if lam.abs() <= NULL_TOL * top {
            continue;
        }
        let u = eig.eigenvectors.column(o);
        let mut v = vec![0.0; k * d];
        for (x, &g) in occupied.iter().enumerate() {
            let s = occupancy[g].sqrt();
            for c in 0..d {
                v[g * d + c] = u[x * d + c] / s;
            }
        }
        match clusters.last_mut() {
            Some(cl) if (cl.eigenvalue - lam).abs() <= CLUSTER_TOL * cl.eigenvalue.abs() => {
                cl.basis.push(v);
            }
            _ => clusters.push(Cluster {
                eigenvalue: lam,
                basis: vec![v],
                eta: 0.0,
            }),
        }
    }
    for cl in &mut clusters {
        cl.eta = occupied
            .iter()
            .map(|&g| frame_norm(&cl.basis, g, d))
            .fold(0.0, f64::max)
            .sqrt();
    }
    let balance = clusters.iter().map(|c| c.eta * c.eta).sum();
    let c_rho = (k as f64).min((span_rank(teachers) as f64).powi(link.degree() as i32));
    let min_occupancy = occupied.iter().map(|&g| occupancy[g]).fold(1.0, f64::min);
    Ok(SpectralDecomposition {
        d,
        teachers: teachers.to_vec(),
        occupancy,
        clusters,
        balance,
        c_rho,
        min_occupancy,
        balance_bound: 2.0 * c_rho / min_occupancy,
        empty_atoms,
    })
}

/// Largest eigenvalue of `Σ_v v(w) v(w)ᵀ` on atom `g`.
fn frame_norm(basis: &[Vec<f64>], g: usize, d: usize) -> f64 {
    let mut f = DMatrix::zeros(d, d);
    for v in basis {
        let x = DVector::from_column_slice(&v[g * d..(g + 1) * d]);
        f += &x * x.transpose();
    }
    SymmetricEigen::new(f).eigenvalues.max()
}

/// Structural checks of a decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecompositionCheck {
    /// `max |⟨v, v'⟩ − δ_{vv'}|` under `⟨f, g⟩ = E_i f(w_i)·g(w_i)`.
    pub orthonormality: f64,
    /// `max_{g,h} ‖H(t_g, t_h) − Σ_λ λ Σ_v v_g v_hᵀ‖_max` over occupied atoms.
    pub reconstruction: f64,
    /// `max_{λ, g} (λ_max(Σ_v v_g v_gᵀ) − η_λ²)`; non-positive when balanced.
    pub balance_excess: f64,
}

pub fn check_decomposition(bsd: &SpectralDecomposition, link: &LinkFunction) -> DecompositionCheck {
    let d = bsd.d;
    let occupied: Vec<usize> = (0..bsd.teachers.len()).filter(|&g| bsd.occupancy[g] > 0.0).collect();
    let all: Vec<&Vec<f64>> = bsd.clusters.iter().flat_map(|c| &c.basis).collect();
    let mut ortho: f64 = 0.0;
    for (x, u) in all.iter().enumerate() {
        for (y, v) in all.iter().enumerate() {
            let ip: f64 = occupied
                .iter()
                .map(|&g| bsd.occupancy[g] * dot_block(u, v, g, d))
                .sum();
            let want = if x == y { 1.0 } else { 0.0 };
            ortho = ortho.max((ip - want).abs());
        }
    }
    let mut recon: f64 = 0.0;
    for &g in &occupied {
        for &h in &occupied {
            let mut approx = DMatrix::zeros(d, d);
            for cl in &bsd.clusters {
                for v in &cl.basis {
                    let vg = DVector::from_column_slice(&v[g * d..(g + 1) * d]);
                    let vh = DVector::from_column_slice(&v[h * d..(h + 1) * d]);
                    approx += vg * vh.transpose() * cl.eigenvalue;
                }
            }
            let exact = teacher_block(&bsd.teachers[g], &bsd.teachers[h], link);
            recon = recon.max((exact - approx).amax());
        }
    }
    let mut excess = f64::NEG_INFINITY;
    for cl in &bsd.clusters {
        for &g in &occupied {
            excess = excess.max(frame_norm(&cl.basis, g, d) - cl.eta * cl.eta);
        }
    }
    DecompositionCheck {
        orthonormality: ortho,
        reconstruction: recon,
        balance_excess: excess,
    }
}

fn dot_block(u: &[f64], v: &[f64], g: usize, d: usize) -> f64 {
    u[g * d..(g + 1) * d]
        .iter()
        .zip(&v[g * d..(g + 1) * d])
        .map(|(a, b)| a * b)
        .sum()
}

/// `Φ = Ω + Ψ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PotentialValue {
    pub phi: f64,
    pub omega: f64,
    pub psi: f64,
}

fn check_delta(delta: &[f64], bsd: &SpectralDecomposition, assignment: &TeacherAssignment) -> Result<()> {
    if delta.len() != assignment.m() * bsd.d {
        return Err(Error::shape(assignment.m() * bsd.d, delta.len()));
    }
    Ok(())
}

/// Signed projections `s_v = E_i v(w_i)·Δ(i)`, grouped by cluster.
fn projections(delta: &[f64], bsd: &SpectralDecomposition, assignment: &TeacherAssignment) -> Vec<Vec<f64>> {
    let (d, k, m) = (bsd.d, bsd.teachers.len(), assignment.m());
    let mut sums = vec![0.0; k * d];
    for (i, &t) in assignment.teacher.iter().enumerate() {
        for c in 0..d {
            sums[t * d + c] += delta[i * d + c];
        }
    }
    bsd.clusters
        .iter()
        .map(|cl| {
            cl.basis
                .iter()
                .map(|v| v.iter().zip(&sums).map(|(a, b)| a * b).sum::<f64>() / m as f64)
                .collect()
        })
        .collect()
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|a| a * a).sum::<f64>().sqrt()
}

pub fn potential_value(
    delta: &[f64],
    bsd: &SpectralDecomposition,
    assignment: &TeacherAssignment,
) -> Result<PotentialValue> {
    check_delta(delta, bsd, assignment)?;
    let d = bsd.d;
    let omega = delta.chunks(d).map(norm).sum::<f64>() / assignment.m() as f64;
    let psi = projections(delta, bsd, assignment)
        .iter()
        .zip(&bsd.clusters)
        .map(|(s, cl)| cl.eta * norm(s))
        .sum();
    Ok(PotentialValue {
        phi: omega + psi,
        omega,
        psi,
    })
}

/// A subgradient of `Φ` for the pairing `⟨A, B⟩ = E_i A(i)·B(i)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialGradient {
    pub m: usize,
    pub grad: Vec<f64>,
    /// Particles with `Δ(i) = 0`, given the zero subgradient.
    pub zero_particles: Vec<usize>,
    /// Clusters whose projections all vanish, given the zero subgradient.
    pub zero_clusters: Vec<usize>,
}

impl PotentialGradient {
    /// `⟨∇Φ, G⟩ = E_i ∇Φ(i)·G(i)`.
    pub fn pair(&self, g: &[f64]) -> f64 {
        self.grad.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / self.m as f64
    }
}

pub fn potential_gradient(
    delta: &[f64],
    bsd: &SpectralDecomposition,
    assignment: &TeacherAssignment,
) -> Result<PotentialGradient> {
    check_delta(delta, bsd, assignment)?;
    let d = bsd.d;
    let mut grad = vec![0.0; delta.len()];
    let mut zero_particles = Vec::new();
    for (i, (g, x)) in grad.chunks_mut(d).zip(delta.chunks(d)).enumerate() {
        let n = norm(x);
        if n == 0.0 {
            zero_particles.push(i);
            continue;
        }
        g.iter_mut().zip(x).for_each(|(a, b)| *a = b / n);
    }
    // Per-atom direction Σ_λ η_λ Σ_v (s_v/‖s_λ‖) v_g.
    let k = bsd.teachers.len();
    let mut atom_dir = vec![0.0; k * d];
    let mut zero_clusters = Vec::new();
    for (c, (s, cl)) in projections(delta, bsd, assignment).iter().zip(&bsd.clusters).enumerate() {
        let n = norm(s);
        if n == 0.0 {
            zero_clusters.push(c);
            continue;
        }
        for (sv, v) in s.iter().zip(&cl.basis) {
            let coef = cl.eta * sv / n;
            atom_dir.iter_mut().zip(v).for_each(|(a, b)| *a += coef * b);
        }
    }
    for (g, &t) in grad.chunks_mut(d).zip(&assignment.teacher) {
        g.iter_mut().zip(&atom_dir[t * d..(t + 1) * d]).for_each(|(a, b)| *a += b);
    }
    Ok(PotentialGradient {
        m: assignment.m(),
        grad,
        zero_particles,
        zero_clusters,
    })
}

/// Outcome of the `L1` perturbation inequality over random draws.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationReport {
    pub trials: usize,
    pub passed: usize,
    /// Largest `|⟨∇Φ, G⟩| / ((1 + C_b) E_i ‖G(i)‖)`.
    pub worst_ratio: f64,
}

impl PerturbationReport {
    pub fn all_pass(&self) -> bool {
        self.passed == self.trials
    }
}

/// `|⟨∇Φ, G⟩| ≤ (1 + C_b) E_i ‖G(i)‖` for `G(i)` independent uniform unit vectors.
pub fn l1_perturbation_check(
    grad: &PotentialGradient,
    bsd: &SpectralDecomposition,
    trials: usize,
    seed: u64,
) -> PerturbationReport {
    use rand_distr::{Distribution, StandardNormal};
    let d = bsd.d;
    let mut report = PerturbationReport {
        trials,
        passed: 0,
        worst_ratio: 0.0,
    };
    for trial in 0..trials {
        let mut r = crate::rng::stream(seed, crate::rng::PROBE, trial as u64);
        let mut g: Vec<f64> = (0..grad.grad.len()).map(|_| StandardNormal.sample(&mut r)).collect();
        for row in g.chunks_mut(d) {
            let n = norm(row);
            row.iter_mut().for_each(|x| *x /= n);
        }
        let mean_norm = g.chunks(d).map(norm).sum::<f64>() / grad.m as f64;
        let ratio = grad.pair(&g).abs() / ((1.0 + bsd.balance) * mean_norm);
        report.worst_ratio = report.worst_ratio.max(ratio);
        if ratio <= 1.0 {
            report.passed += 1;
        }
    }
    report
}

/// Both sides of the interaction-descent inequality at one snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InteractionDescent {
    /// `⟨∇Φ, −H⊥Δ⟩`.
    pub lhs: f64,
    /// `(1 + C_b) E_i ‖(H⊥Δ)(i)‖ 1(i ∉ B_τ)`.
    pub main: f64,
    /// `E_i ‖Δ(i)‖ 1(i ∉ B_τ) + τ Ω`, the scale of the exclusion term.
    pub exclusion_scale: f64,
    /// Smallest constant in front of `exclusion_scale` that closes the gap.
    pub fitted_constant: f64,
}

/// Fitted `D⊥ ≈ −(c¹ Π_V P⊥ + c² Π_U)` over ball particles, `V` the teacher span.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LscFit {
    pub c1: f64,
    pub c2: f64,
    /// Relative Frobenius residual of the fit.
    pub residual: f64,
    pub particles: usize,
}

/// Both sides of the local-descent inequality at one snapshot.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalDescent {
    /// `⟨∇Φ, D⊥ ⊙ Δ⟩`.
    pub lhs: f64,
    pub phi: f64,
    pub loss: f64,
    /// `E_i ‖Δ(i)‖ 1(w̄(i) ∉ B_τ)`.
    pub exclusion: f64,
    /// `C_b E_i ‖Δ(i)‖²`.
    pub quadratic: f64,
    /// `−lhs / (Φ √L)`: the effective contraction constant.
    pub contraction: f64,
    pub lsc: LscFit,
}

/// Spot check of `E_j H⊥_t(i, j) v(j) 1(j ∈ B_τ) = λ v(i) P[B_τ]` on ball particles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsometryRecord {
    pub cluster: usize,
    pub eigenvalue: f64,
    pub ball_mass: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub tau: f64,
    pub potential: PotentialValue,
    pub zero_particles: usize,
    pub zero_clusters: usize,
    pub perturbation: PerturbationReport,
    pub interaction: InteractionDescent,
    pub local: LocalDescent,
    pub isometry: Vec<IsometryRecord>,
}

/// Numerical check of the three potential lemmas at a snapshot, with
/// `mean_field` holding the mean-field positions and `delta` the coupling error.
pub fn lemma_checks(
    mean_field: &ParticleSystem,
    delta: &[f64],
    cf: &ClosedForm,
    bsd: &SpectralDecomposition,
    assignment: &TeacherAssignment,
    tau: f64,
    seed: u64,
) -> Result<LemmaReport> {
    if tau <= 0.0 {
        return Err(Error::InvalidArgument(format!("ball radius {tau}")));
    }
    if mean_field.m() != assignment.m() || mean_field.d() != bsd.d {
        return Err(Error::shape(assignment.m(), mean_field.m()));
    }
    if (0..mean_field.m()).any(|i| mean_field.b(i) != 1.0) {
        return Err(Error::InvalidArgument("the limiting operator assumes a unit second layer".into()));
    }
    let value = potential_value(delta, bsd, assignment)?;
    let grad = potential_gradient(delta, bsd, assignment)?;
    let perturbation = l1_perturbation_check(&grad, bsd, 100, seed);
    let interaction = interaction_descent(mean_field, delta, cf, bsd, &grad, tau, value.omega);
    let local = local_descent(mean_field, delta, cf, bsd, &grad, tau, value.phi, seed);
    let isometry = restricted_isometry(mean_field, cf, bsd, assignment, tau);
    Ok(LemmaReport {
        tau,
        potential: value,
        zero_particles: grad.zero_particles.len(),
        zero_clusters: grad.zero_clusters.len(),
        perturbation,
        interaction,
        local,
        isometry,
    })
}

fn outside_ball(system: &ParticleSystem, teachers: &[Vec<f64>], tau: f64) -> Vec<bool> {
    (0..system.m()).map(|i| !in_ball(system.row(i), teachers, tau)).collect()
}

fn interaction_descent(
    system: &ParticleSystem,
    delta: &[f64],
    cf: &ClosedForm,
    bsd: &SpectralDecomposition,
    grad: &PotentialGradient,
    tau: f64,
    omega: f64,
) -> InteractionDescent {
    let d = bsd.d;
    let m = system.m() as f64;
    let h = interaction_apply(system, cf, delta);
    let neg: Vec<f64> = h.iter().map(|x| -x).collect();
    let lhs = grad.pair(&neg);
    let out = outside_ball(system, &bsd.teachers, tau);
    let main = (1.0 + bsd.balance)
        * h.chunks(d).zip(&out).filter(|(_, o)| **o).map(|(r, _)| norm(r)).sum::<f64>()
        / m;
    let excl = delta.chunks(d).zip(&out).filter(|(_, o)| **o).map(|(r, _)| norm(r)).sum::<f64>() / m;
    let exclusion_scale = excl + tau * omega;
    let gap = lhs - main;
    let fitted_constant = if gap <= 0.0 {
        0.0
    } else if exclusion_scale > 0.0 {
        gap / exclusion_scale
    } else {
        f64::INFINITY
    };
    InteractionDescent {
        lhs,
        main,
        exclusion_scale,
        fitted_constant,
    }
}

#[allow(clippy::too_many_arguments)]
fn local_descent(
    system: &ParticleSystem,
    delta: &[f64],
    cf: &ClosedForm,
    bsd: &SpectralDecomposition,
    grad: &PotentialGradient,
    tau: f64,
    phi: f64,
    seed: u64,
) -> LocalDescent {
    let d = bsd.d;
    let m = system.m() as f64;
    let lhs = grad.pair(&local_apply(system, cf, delta));
    let out = outside_ball(system, &bsd.teachers, tau);
    let exclusion = delta.chunks(d).zip(&out).filter(|(_, o)| **o).map(|(r, _)| norm(r)).sum::<f64>() / m;
    let quadratic = bsd.balance * delta.chunks(d).map(|r| norm(r).powi(2)).sum::<f64>() / m;
    let loss = cf.loss(system, seed);
    let contraction = if phi > 0.0 && loss > 0.0 { -lhs / (phi * loss.sqrt()) } else { 0.0 };
    LocalDescent {
        lhs,
        phi,
        loss,
        exclusion,
        quadratic,
        contraction,
        lsc: fit_lsc(system, cf, &bsd.teachers, tau),
    }
}

/// Least-squares fit of the structured strong-convexity form on ball particles.
pub fn fit_lsc(system: &ParticleSystem, cf: &ClosedForm, teachers: &[Vec<f64>], tau: f64) -> LscFit {
    use crate::diagnostics::{local_hessian, projector, HessianMode};
    let d = system.d();
    let t = DMatrix::from_fn(d, teachers.len(), |a, k| teachers[k][a]);
    let svd = t.svd(true, false);
    let u = svd.u.expect("requested");
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&c| svd.singular_values[c] > 1e-10)
        .collect();
    let mut pv = DMatrix::zeros(d, d);
    for &c in &cols {
        let x = u.column(c);
        pv += x * x.transpose();
    }
    let pu = DMatrix::identity(d, d) - &pv;
    let (mut g, mut rhs, mut norm_d) = (nalgebra::Matrix2::zeros(), nalgebra::Vector2::zeros(), 0.0);
    let mut mats: Vec<(DMatrix<f64>, DMatrix<f64>, DMatrix<f64>)> = Vec::new();
    for i in 0..system.m() {
        let w = system.row(i);
        if !in_ball(w, teachers, tau) {
            continue;
        }
        let dm = local_hessian(w, system.b(i), cf, system, HessianMode::Analytic);
        let a = -(&pv * projector(w));
        let b = -pu.clone();
        g[(0, 0)] += a.dot(&a);
        g[(0, 1)] += a.dot(&b);
        g[(1, 1)] += b.dot(&b);
        rhs[0] += a.dot(&dm);
        rhs[1] += b.dot(&dm);
        norm_d += dm.dot(&dm);
        mats.push((dm, a, b));
    }
    g[(1, 0)] = g[(0, 1)];
    let c: nalgebra::Vector2<f64> = g.pseudo_inverse(1e-12).map(|p| p * rhs).unwrap_or_default();
    let resid: f64 = mats
        .iter()
        .map(|(dm, a, b)| (dm - a * c[0] - b * c[1]).norm_squared())
        .sum();
    LscFit {
        c1: c[0],
        c2: c[1],
        residual: if norm_d > 0.0 { (resid / norm_d).sqrt() } else { 0.0 },
        particles: mats.len(),
    }
}

/// Applies the ball-restricted interaction operator at time `t` to the first
/// basis function of every cluster.
pub fn restricted_isometry(
    system: &ParticleSystem,
    cf: &ClosedForm,
    bsd: &SpectralDecomposition,
    assignment: &TeacherAssignment,
    tau: f64,
) -> Vec<IsometryRecord> {
    let d = bsd.d;
    let inside: Vec<bool> = outside_ball(system, &bsd.teachers, tau).iter().map(|o| !o).collect();
    let mass = inside.iter().filter(|b| **b).count() as f64 / system.m() as f64;
    bsd.clusters
        .iter()
        .enumerate()
        .map(|(c, cl)| {
            let v = &cl.basis[0];
            let mut field = vec![0.0; system.m() * d];
            for (i, row) in field.chunks_mut(d).enumerate() {
                if inside[i] {
                    row.copy_from_slice(bsd.eval(v, assignment.teacher[i]));
                }
            }
            let applied = interaction_apply(system, cf, &field);
            let (mut err, mut scale): (f64, f64) = (0.0, 0.0);
            for i in (0..system.m()).filter(|&i| inside[i]) {
                let vi = bsd.eval(v, assignment.teacher[i]);
                let diff: Vec<f64> = applied[i * d..(i + 1) * d]
                    .iter()
                    .zip(vi)
                    .map(|(a, b)| a - cl.eigenvalue * mass * b)
                    .collect();
                err = err.max(norm(&diff));
                scale = scale.max(cl.eigenvalue * mass * norm(vi));
            }
            IsometryRecord {
                cluster: c,
                eigenvalue: cl.eigenvalue,
                ball_mass: mass,
                rel_error: if scale > 0.0 { err / scale } else { 0.0 },
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{basis_vector, CovariateSpec, SecondLayerSpec, TargetKind, TargetSpec, Teacher};
    use crate::dynamics::Problem;
    use crate::kernels::Activation;

    fn he4() -> LinkFunction {
        LinkFunction::he(4).unwrap()
    }

    fn at(d: usize, rows: &[Vec<f64>]) -> ParticleSystem {
        ParticleSystem::new(d, rows.concat(), None).unwrap()
    }

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n = norm(&v);
        v.into_iter().map(|x| x / n).collect()
    }

    fn two_teacher_setup(d: usize, m: usize) -> (ParticleSystem, Vec<Vec<f64>>) {
        let teachers = vec![basis_vector(d, 0), basis_vector(d, 1)];
        let rows: Vec<Vec<f64>> = (0..m).map(|i| teachers[i % 2].clone()).collect();
        (at(d, &rows), teachers)
    }

    #[test]
    fn assignment_examples() {
        let d = 4;
        let sys = at(d, &[unit(vec![0.9, 0.3, 0.1, 0.0]), unit(vec![-0.9, 0.2, 0.0, 0.1])]);
        let single = assign_xi_infinity(&sys, &[basis_vector(d, 2)]).unwrap();
        assert_eq!(single.teacher, vec![0, 0]);
        let e1 = basis_vector(d, 0);
        let pm = vec![e1.clone(), e1.iter().map(|x| -x).collect()];
        assert_eq!(assign_xi_infinity(&sys, &pm).unwrap().teacher, vec![0, 1]);
        let tie = at(d, &[unit(vec![1.0, 1.0, 0.0, 0.0])]);
        let a = assign_xi_infinity(&tie, &[basis_vector(d, 0), basis_vector(d, 1)]).unwrap();
        assert_eq!(a.teacher, vec![0]);
        assert!(assign_xi_infinity(&sys, &[]).is_err());
    }

    #[test]
    fn limiting_blocks() {
        let d = 5;
        let (sys, teachers) = two_teacher_setup(d, 4);
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let same = h_infinity_block(0, 2, &a, &teachers, &he4());
        let want = crate::diagnostics::projector(&teachers[0]) * 96.0;
        assert!((same - want).amax() < 1e-12);
        assert_eq!(h_infinity_block(0, 1, &a, &teachers, &he4()).amax(), 0.0);
        assert_eq!(
            h_infinity_block(0, 1, &a, &teachers, &he4()),
            h_infinity_block(2, 3, &a, &teachers, &he4())
        );
    }

    #[test]
    fn single_teacher_decomposition() {
        let d = 6;
        let t = basis_vector(d, 3);
        let sys = at(d, &vec![t.clone(); 10]);
        let a = assign_xi_infinity(&sys, &[t.clone()]).unwrap();
        let bsd = spectral_decompose(&a, &[t], &he4()).unwrap();
        assert_eq!(bsd.clusters.len(), 1);
        assert!((bsd.clusters[0].eigenvalue - 96.0).abs() < 1e-10);
        assert_eq!(bsd.clusters[0].basis.len(), d - 1);
        assert!((bsd.balance - 1.0).abs() < 1e-10);
        assert!(bsd.balanced() && bsd.balance_bound == 2.0);
        let chk = check_decomposition(&bsd, &he4());
        assert!(chk.orthonormality < 1e-8 && chk.reconstruction < 1e-8 && chk.balance_excess <= 1e-8);
    }

    #[test]
    fn orthogonal_teachers_are_balanced() {
        let (sys, teachers) = two_teacher_setup(5, 8);
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&a, &teachers, &he4()).unwrap();
        assert_eq!(bsd.c_rho, 2.0);
        assert!((bsd.balance_bound - 8.0).abs() < 1e-12);
        assert!(bsd.balanced(), "{}", bsd.balance);
        let chk = check_decomposition(&bsd, &he4());
        assert!(chk.reconstruction < 1e-8 && chk.orthonormality < 1e-8);
    }

    #[test]
    fn unoccupied_atoms_are_reported() {
        let d = 4;
        let teachers = vec![basis_vector(d, 0), basis_vector(d, 1)];
        let sys = at(d, &vec![teachers[0].clone(); 3]);
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&a, &teachers, &he4()).unwrap();
        assert_eq!(bsd.empty_atoms, vec![1]);
        assert!(check_decomposition(&bsd, &he4()).reconstruction < 1e-8);
    }

    #[test]
    fn potential_examples() {
        let (sys, teachers) = two_teacher_setup(5, 6);
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&a, &teachers, &he4()).unwrap();
        let zero = vec![0.0; 30];
        assert_eq!(potential_value(&zero, &bsd, &a).unwrap().phi, 0.0);
        let u = unit(vec![0.0, 0.0, 1.0, 1.0, 0.0]);
        let same: Vec<f64> = (0..6).flat_map(|_| u.clone()).collect();
        let v = potential_value(&same, &bsd, &a).unwrap();
        assert!((v.omega - 1.0).abs() < 1e-15);
        let delta: Vec<f64> = (0..30).map(|k| ((k * 7 % 11) as f64 - 5.0) / 10.0).collect();
        let base = potential_value(&delta, &bsd, &a).unwrap();
        assert!(base.phi >= base.omega);
        for c in [0.5, 2.0, -1.0] {
            let scaled: Vec<f64> = delta.iter().map(|x| c * x).collect();
            let v = potential_value(&scaled, &bsd, &a).unwrap();
            assert!((v.phi - c.abs() * base.phi).abs() <= 1e-14 * base.phi);
        }
        assert!(potential_value(&delta[..29], &bsd, &a).is_err());
    }

    #[test]
    fn gradient_matches_directional_differences() {
        let (sys, teachers) = two_teacher_setup(4, 6);
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&a, &teachers, &he4()).unwrap();
        let delta: Vec<f64> = (0..24).map(|k| ((k * 5 % 13) as f64 - 6.0) / 7.0).collect();
        let dir: Vec<f64> = (0..24).map(|k| ((k * 3 % 7) as f64 - 3.0) / 5.0).collect();
        let grad = potential_gradient(&delta, &bsd, &a).unwrap();
        let h = 1e-6;
        let phi = |s: f64| {
            let x: Vec<f64> = delta.iter().zip(&dir).map(|(a, b)| a + s * b).collect();
            potential_value(&x, &bsd, &a).unwrap().phi
        };
        let fd = (phi(h) - phi(-h)) / (2.0 * h);
        assert!((fd - grad.pair(&dir)).abs() < 1e-6, "{fd} {}", grad.pair(&dir));
    }

    #[test]
    fn perturbation_inequality_and_zero_subgradients() {
        let (sys, teachers) = two_teacher_setup(5, 8);
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&a, &teachers, &he4()).unwrap();
        let mut delta: Vec<f64> = (0..40).map(|k| ((k * 7 % 9) as f64 - 4.0) / 9.0).collect();
        delta[..5].iter_mut().for_each(|x| *x = 0.0);
        let grad = potential_gradient(&delta, &bsd, &a).unwrap();
        assert_eq!(grad.zero_particles, vec![0]);
        let rep = l1_perturbation_check(&grad, &bsd, 100, 1);
        assert!(rep.all_pass(), "{rep:?}");
    }

    fn sim_problem(d: usize) -> Problem {
        Problem {
            covariates: CovariateSpec::GaussianIso { d },
            target: TargetSpec::noiseless(TargetKind::AtomicTeachers {
                link: he4(),
                teachers: vec![Teacher {
                    direction: basis_vector(d, 0),
                    weight: 1.0,
                }],
            }),
            activation: Activation::Hermite(he4()),
            second_layer: SecondLayerSpec::Ones,
        }
    }

    #[test]
    fn descent_lemmas_near_convergence() {
        let d = 6;
        let problem = sim_problem(d);
        let cf = problem.closed_form().unwrap();
        let teacher = basis_vector(d, 0);
        // Most particles at the teacher, a few still near the equator.
        let mut rows = vec![teacher.clone(); 28];
        for k in 1..5 {
            rows.push(unit((0..d).map(|c| if c == 0 { 0.05 } else if c == k { 1.0 } else { 0.0 }).collect()));
        }
        let sys = at(d, &rows);
        let a = assign_xi_infinity(&sys, &[teacher.clone()]).unwrap();
        let bsd = spectral_decompose(&a, &[teacher.clone()], &he4()).unwrap();
        let delta: Vec<f64> = (0..32 * d)
            .map(|k| 1e-3 * (((k * 37) % 17) as f64 - 8.0) / 8.0)
            .collect();
        let rep = lemma_checks(&sys, &delta, &cf, &bsd, &a, 0.2, 3).unwrap();
        assert!(rep.perturbation.all_pass());
        assert!(rep.local.lhs < 0.0, "{:?}", rep.local);
        assert!(rep.local.lsc.c2 > 0.0);
        assert!(rep.interaction.fitted_constant.is_finite());
    }

    #[test]
    fn interaction_descent_at_exact_convergence() {
        let (sys, teachers) = two_teacher_setup(5, 10);
        let d = 5;
        let problem = Problem {
            covariates: CovariateSpec::GaussianIso { d },
            target: TargetSpec::noiseless(TargetKind::AtomicTeachers {
                link: he4(),
                teachers: teachers
                    .iter()
                    .map(|t| Teacher {
                        direction: t.clone(),
                        weight: 0.5,
                    })
                    .collect(),
            }),
            activation: Activation::Hermite(he4()),
            second_layer: SecondLayerSpec::Ones,
        };
        let cf = problem.closed_form().unwrap();
        let a = assign_xi_infinity(&sys, &teachers).unwrap();
        let bsd = spectral_decompose(&a, &teachers, &he4()).unwrap();
        let delta: Vec<f64> = (0..50).map(|k| 1e-2 * (((k * 13) % 11) as f64 - 5.0)).collect();
        let rep = lemma_checks(&sys, &delta, &cf, &bsd, &a, 0.1, 0).unwrap();
        assert_eq!(rep.interaction.main, 0.0);
        assert!(rep.interaction.lhs <= 1e-10, "{:?}", rep.interaction);
        for iso in &rep.isometry {
            assert!(iso.rel_error < 1e-10, "{iso:?}");
        }
    }
}
