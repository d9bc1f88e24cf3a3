//! Mean-field particle dynamics on the sphere.
//!
//! Each particle `w_i` moves with the projected velocity
//! `ν(w) = P⊥_w E[(y − f(x)) σ'(w·x) x]`, scaled by its second-layer weight,
//! and is retracted back onto the sphere after every Euler step.

use nalgebra::{DMatrix, DMatrixView};
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    init_second_layer, init_weights, sample_dataset, CovariateSpec, Dataset, SecondLayerSpec,
    TargetKind, TargetSpec, TeacherAtoms,
};
use crate::kernels::{cross_pair_kernel, dot, pair_kernel_sigma, Activation, PairKernel};
use crate::linalg::{kernel_combine, kernel_sum};
use crate::{rng, Error, Result};

/// Widths above this use sampled partners for the self-interaction term of the loss.
pub const EXACT_LOSS_MAX_WIDTH: usize = 4096;
/// Number of sampled partners per particle above [`EXACT_LOSS_MAX_WIDTH`].
pub const LOSS_PARTNERS: usize = 4096;

/// First-layer weights (rows on the unit sphere) and fixed second-layer weights.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleSystem {
    d: usize,
    weights: Vec<f64>,
    second_layer: Option<Vec<f64>>,
}

impl ParticleSystem {
    pub fn new(d: usize, weights: Vec<f64>, second_layer: Option<Vec<f64>>) -> Result<Self> {
        if d == 0 || weights.is_empty() || weights.len() % d != 0 {
            return Err(Error::shape(format!("m × {d} table"), weights.len()));
        }
        let m = weights.len() / d;
        if let Some(b) = &second_layer {
            if b.len() != m {
                return Err(Error::shape(m, b.len()));
            }
        }
        for (i, row) in weights.chunks_exact(d).enumerate() {
            let n = dot(row, row).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidArgument(format!("row {i} has norm {n}")));
            }
        }
        Ok(ParticleSystem {
            d,
            weights,
            second_layer,
        })
    }

    /// Uniform initialisation; widths drawn from the same seed share a prefix.
    pub fn init(d: usize, m: usize, seed: u64, second_layer: &SecondLayerSpec) -> Result<Self> {
        Ok(ParticleSystem {
            d,
            weights: init_weights(d, m, seed)?,
            second_layer: init_second_layer(second_layer, m, seed),
        })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn m(&self) -> usize {
        self.weights.len() / self.d
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.weights[i * self.d..(i + 1) * self.d]
    }

    pub fn second_layer(&self) -> Option<&[f64]> {
        self.second_layer.as_deref()
    }

    pub fn b(&self, i: usize) -> f64 {
        self.second_layer.as_ref().map_or(1.0, |b| b[i])
    }

    pub fn prefix(&self, m: usize) -> ParticleSystem {
        ParticleSystem {
            d: self.d,
            weights: self.weights[..m * self.d].to_vec(),
            second_layer: self.second_layer.as_ref().map(|b| b[..m].to_vec()),
        }
    }

    /// Replaces the rows without renormalising; used for perturbation studies.
    pub fn with_weights(&self, weights: Vec<f64>) -> ParticleSystem {
        assert_eq!(weights.len(), self.weights.len());
        ParticleSystem {
            d: self.d,
            weights,
            second_layer: self.second_layer.clone(),
        }
    }

    /// `f(x) = (1/m) Σ_j b_j σ(w_j·x)`.
    pub fn predict(&self, act: &Activation, x: &[f64]) -> f64 {
        let m = self.m();
        (0..m)
            .map(|j| self.b(j) * act.eval(dot(self.row(j), x)))
            .sum::<f64>()
            / m as f64
    }
}

/// Applies `P⊥_w = I − w wᵀ` in place.
pub fn project_tangent(w: &[f64], v: &mut [f64]) {
    let c = dot(w, v);
    v.iter_mut().zip(w).for_each(|(vi, wi)| *vi -= c * wi);
}

/// Learning problem: covariates, target, activation and second layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Problem {
    pub covariates: CovariateSpec,
    pub target: TargetSpec,
    pub activation: Activation,
    #[serde(default)]
    pub second_layer: SecondLayerSpec,
}

impl Problem {
    pub fn d(&self) -> usize {
        self.covariates.dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.covariates.validate()?;
        self.activation.validate()?;
        self.target.validate(self.d())?;
        let boolean = matches!(
            self.target.kind,
            TargetKind::Parity { .. } | TargetKind::Staircase { .. }
        );
        if boolean == self.covariates.is_gaussian() {
            return Err(Error::InvalidTarget(
                "Boolean targets need hypercube covariates and vice versa".into(),
            ));
        }
        Ok(())
    }

    pub fn closed_form(&self) -> Result<ClosedForm> {
        ClosedForm::new(self)
    }

    /// Directions used to measure alignment: teacher atoms, or the support
    /// coordinates of a Boolean target.
    pub fn alignment_directions(&self) -> Vec<Vec<f64>> {
        let d = self.d();
        match &self.target.kind {
            TargetKind::Parity { coords } | TargetKind::Staircase { coords, .. } => coords
                .iter()
                .map(|&j| crate::data::basis_vector(d, j))
                .collect(),
            _ => self.target.atoms().expect("gaussian target").directions,
        }
    }
}

/// Closed-form population quantities for Hermite links under Gaussian covariates.
#[derive(Clone, Debug)]
pub struct ClosedForm {
    pub d: usize,
    pub atoms: TeacherAtoms,
    pub q_net: PairKernel,
    pub dq_net: PairKernel,
    pub ddq_net: PairKernel,
    pub q_cross: PairKernel,
    pub dq_cross: PairKernel,
    pub ddq_cross: PairKernel,
    /// `‖f*‖²`.
    pub target_energy: f64,
    atom_table: Vec<f64>,
}

impl ClosedForm {
    pub fn new(problem: &Problem) -> Result<Self> {
        problem.validate()?;
        if !problem.covariates.is_gaussian() {
            return Err(Error::NotClosedForm("covariates are not Gaussian".into()));
        }
        let link = problem
            .activation
            .link()
            .ok_or_else(|| Error::NotClosedForm("activation is not a Hermite series".into()))?;
        let atoms = problem
            .target
            .atoms()
            .ok_or_else(|| Error::NotClosedForm("target has no teacher atoms".into()))?;
        let q_net = pair_kernel_sigma(link);
        let q_cross = cross_pair_kernel(link, &atoms.link);
        let q_target = pair_kernel_sigma(&atoms.link);
        let atom_table = atoms.directions.concat();
        let d = problem.d();
        let target_energy = kernel_sum(
            &atom_table,
            &atom_table,
            d,
            Some(&atoms.weights),
            Some(&atoms.weights),
            |z| q_target.eval(z),
        );
        Ok(ClosedForm {
            d,
            dq_net: q_net.derivative(),
            ddq_net: q_net.derivative().derivative(),
            dq_cross: q_cross.derivative(),
            ddq_cross: q_cross.derivative().derivative(),
            q_net,
            q_cross,
            target_energy,
            atom_table,
            atoms,
        })
    }

    /// Unprojected drift `Σ a* q'_×(w·w*) w* − (1/m) Σ_j b_j q'(w·w_j) w_j`.
    pub fn drift(&self, w: &[f64], system: &ParticleSystem) -> Vec<f64> {
        let mut g = vec![0.0; self.d];
        for (wa, a) in self.atoms.directions.iter().zip(&self.atoms.weights) {
            let c = a * self.dq_cross.eval(dot(w, wa));
            g.iter_mut().zip(wa).for_each(|(gi, x)| *gi += c * x);
        }
        let m = system.m();
        for j in 0..m {
            let wj = system.row(j);
            let c = system.b(j) * self.dq_net.eval(dot(w, wj)) / m as f64;
            g.iter_mut().zip(wj).for_each(|(gi, x)| *gi -= c * x);
        }
        g
    }

    /// Jacobian of [`ClosedForm::drift`] in `w`.
    pub fn drift_jacobian(&self, w: &[f64], system: &ParticleSystem) -> DMatrix<f64> {
        let d = self.d;
        let mut jac = DMatrix::zeros(d, d);
        let mut rank_one = |c: f64, v: &[f64]| {
            for a in 0..d {
                for b in 0..d {
                    jac[(a, b)] += c * v[a] * v[b];
                }
            }
        };
        for (wa, a) in self.atoms.directions.iter().zip(&self.atoms.weights) {
            rank_one(a * self.ddq_cross.eval(dot(w, wa)), wa);
        }
        let m = system.m() as f64;
        for j in 0..system.m() {
            let wj = system.row(j);
            rank_one(-system.b(j) * self.ddq_net.eval(dot(w, wj)) / m, wj);
        }
        jac
    }

    /// Population velocity of a particle at `w` with second-layer weight `b`.
    pub fn velocity(&self, w: &[f64], b: f64, system: &ParticleSystem) -> Vec<f64> {
        let mut g = self.drift(w, system);
        project_tangent(w, &mut g);
        g.iter_mut().for_each(|x| *x *= b);
        g
    }

    /// Population velocities of every particle, row-major.
    pub fn velocities(&self, system: &ParticleSystem) -> Vec<f64> {
        let d = self.d;
        let m = system.m();
        let w = system.weights();
        let mut out = vec![0.0; w.len()];
        kernel_combine(
            w,
            &self.atom_table,
            d,
            Some(&self.atoms.weights),
            1.0,
            |z| self.dq_cross.eval(z),
            &mut out,
        );
        kernel_combine(
            w,
            w,
            d,
            system.second_layer(),
            -1.0 / m as f64,
            |z| self.dq_net.eval(z),
            &mut out,
        );
        out.par_chunks_mut(d)
            .zip(w.par_chunks(d))
            .enumerate()
            .for_each(|(i, (v, wi))| {
                project_tangent(wi, v);
                let b = system.b(i);
                v.iter_mut().for_each(|x| *x *= b);
            });
        out
    }

    /// `(1/m²) Σ b_i b_j q(w_i·w_j)`, exact up to [`EXACT_LOSS_MAX_WIDTH`] and
    /// an unbiased partner-sampled estimate above.
    pub fn self_energy(&self, system: &ParticleSystem, seed: u64) -> f64 {
        let m = system.m();
        let w = system.weights();
        if m <= EXACT_LOSS_MAX_WIDTH {
            let s = kernel_sum(
                w,
                w,
                self.d,
                system.second_layer(),
                system.second_layer(),
                |z| self.q_net.eval(z),
            );
            return s / (m * m) as f64;
        }
        let parts: Vec<f64> = (0..m)
            .into_par_iter()
            .map(|i| {
                let mut r = rng::stream(seed, rng::SUBSAMPLE, i as u64);
                let wi = system.row(i);
                let mut s = 0.0;
                for _ in 0..LOSS_PARTNERS {
                    let j = r.gen_range(0..m);
                    s += system.b(j) * self.q_net.eval(dot(wi, system.row(j)));
                }
                system.b(i) * s / LOSS_PARTNERS as f64
            })
            .collect();
        parts.iter().sum::<f64>() / m as f64
    }

    /// `(1/m) Σ_i b_i Σ_a a_a q_×(w_i·w*_a)`.
    pub fn target_overlap(&self, system: &ParticleSystem) -> f64 {
        kernel_sum(
            system.weights(),
            &self.atom_table,
            self.d,
            system.second_layer(),
            Some(&self.atoms.weights),
            |z| self.q_cross.eval(z),
        ) / system.m() as f64
    }

    /// Population risk `‖f − f*‖²` (noise excluded).
    pub fn loss(&self, system: &ParticleSystem, seed: u64) -> f64 {
        self.self_energy(system, seed) - 2.0 * self.target_overlap(system) + self.target_energy
    }

    /// Exact `‖f_a − f_b‖²`.
    pub fn function_distance(&self, a: &ParticleSystem, b: &ParticleSystem) -> f64 {
        let aa = self.pair_energy(a, a);
        let bb = self.pair_energy(b, b);
        aa + bb - 2.0 * self.pair_energy(a, b)
    }

    /// `(1/(m_a m_b)) Σ b_i b_j q(a_i·b_j)`.
    pub fn pair_energy(&self, a: &ParticleSystem, b: &ParticleSystem) -> f64 {
        kernel_sum(
            a.weights(),
            b.weights(),
            self.d,
            a.second_layer(),
            b.second_layer(),
            |z| self.q_net.eval(z),
        ) / (a.m() * b.m()) as f64
    }
}

/// Preactivations `z = Xᵀ W`, a `B × m` matrix.
fn preactivations(system: &ParticleSystem, xs: &[f64]) -> DMatrix<f64> {
    let d = system.d();
    let wv = DMatrixView::from_slice(system.weights(), d, system.m());
    let xv = DMatrixView::from_slice(xs, d, xs.len() / d);
    xv.transpose() * wv
}

fn outputs(system: &ParticleSystem, act: &Activation, z: &DMatrix<f64>) -> Vec<f64> {
    let m = system.m();
    let mut f = vec![0.0; z.nrows()];
    for (j, col) in z.column_iter().enumerate() {
        let b = system.b(j) / m as f64;
        f.iter_mut().zip(col.iter()).for_each(|(fb, &v)| *fb += b * act.eval(v));
    }
    f
}

/// Network predictions for each row of `xs`.
pub fn predict_batch(system: &ParticleSystem, act: &Activation, xs: &[f64]) -> Vec<f64> {
    let z = preactivations(system, xs);
    outputs(system, act, &z)
}

/// Mean squared error `(1/n) Σ (f(x_i) − y_i)²`.
pub fn empirical_loss(system: &ParticleSystem, act: &Activation, xs: &[f64], ys: &[f64]) -> f64 {
    let f = predict_batch(system, act, xs);
    f.iter().zip(ys).map(|(f, y)| (f - y).powi(2)).sum::<f64>() / ys.len() as f64
}

/// Velocities `b_i P⊥ (1/B) Σ (y − f(x)) σ'(w_i·x) x` for every particle.
pub fn empirical_velocities(
    system: &ParticleSystem,
    act: &Activation,
    xs: &[f64],
    ys: &[f64],
) -> Vec<f64> {
    let d = system.d();
    let nb = ys.len();
    let mut z = preactivations(system, xs);
    let f = outputs(system, act, &z);
    let r: Vec<f64> = f.iter().zip(ys).map(|(fb, yb)| (yb - fb) / nb as f64).collect();
    z.as_mut_slice()
        .par_chunks_mut(nb)
        .for_each(|col| {
            col.iter_mut()
                .zip(&r)
                .for_each(|(v, rb)| *v = act.eval_d1(*v) * rb)
        });
    let xv = DMatrixView::from_slice(xs, d, nb);
    let g = xv * z;
    let mut out: Vec<f64> = g.as_slice().to_vec();
    out.par_chunks_mut(d)
        .zip(system.weights().par_chunks(d))
        .enumerate()
        .for_each(|(i, (v, w))| {
            project_tangent(w, v);
            let b = system.b(i);
            v.iter_mut().for_each(|x| *x *= b);
        });
    out
}

/// Velocity of a probe particle at `w` (second-layer weight `b`) driven by `system` on a batch.
pub fn empirical_velocity(
    w: &[f64],
    b: f64,
    system: &ParticleSystem,
    act: &Activation,
    xs: &[f64],
    ys: &[f64],
) -> Vec<f64> {
    let d = system.d();
    let f = predict_batch(system, act, xs);
    let mut v = vec![0.0; d];
    for (x, (fb, yb)) in xs.chunks_exact(d).zip(f.iter().zip(ys)) {
        let c = (yb - fb) * act.eval_d1(dot(w, x));
        v.iter_mut().zip(x).for_each(|(vi, xi)| *vi += c * xi);
    }
    v.iter_mut().for_each(|x| *x *= b / ys.len() as f64);
    project_tangent(w, &mut v);
    v
}

/// `w ← (w + η v)/‖w + η v‖` for every row.
pub fn euler_step(system: &mut ParticleSystem, velocities: &[f64], eta: f64) -> Result<()> {
    let d = system.d;
    if velocities.len() != system.weights.len() {
        return Err(Error::shape(system.weights.len(), velocities.len()));
    }
    for (i, (w, v)) in system
        .weights
        .chunks_exact_mut(d)
        .zip(velocities.chunks_exact(d))
        .enumerate()
    {
        let wv = dot(w, v);
        let vn = dot(v, v).sqrt();
        if !wv.is_finite() || wv.abs() > 1e-8 * vn.max(1.0) {
            return Err(Error::NonTangentVelocity {
                particle: i,
                dot: wv,
            });
        }
        w.iter_mut().zip(v).for_each(|(wi, vi)| *wi += eta * vi);
        let n = dot(w, w).sqrt();
        if !(n.is_finite() && n > 0.0) {
            return Err(Error::DegenerateStep { particle: i });
        }
        w.iter_mut().for_each(|wi| *wi /= n);
    }
    Ok(())
}

/// Which velocity field drives the particles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VelocityMode {
    /// Closed-form infinite-data velocity.
    Population,
    /// Mini-batch velocity on a finite training set.
    Empirical,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowSchedule {
    pub eta: f64,
    pub n_steps: usize,
    pub record_every: usize,
    pub mode: VelocityMode,
    /// Training-set size in empirical mode.
    #[serde(default)]
    pub n_train: usize,
    /// Mini-batch size; 0 means full batch.
    #[serde(default)]
    pub batch_size: usize,
}

impl FlowSchedule {
    pub fn validate(&self) -> Result<()> {
        // η = 0 is accepted as a frozen run.
        if !(self.eta >= 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidSchedule(format!("eta = {}", self.eta)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidSchedule("record_every = 0".into()));
        }
        if self.mode == VelocityMode::Empirical && self.n_train == 0 {
            return Err(Error::InvalidSchedule("empirical mode needs n_train > 0".into()));
        }
        Ok(())
    }

    pub fn recorded_steps(&self) -> Vec<usize> {
        let mut steps: Vec<usize> = (0..=self.n_steps).step_by(self.record_every).collect();
        if *steps.last().unwrap() != self.n_steps {
            steps.push(self.n_steps);
        }
        steps
    }
}

/// Fixed per-epoch shuffles of the training indices.
#[derive(Clone, Debug)]
pub struct BatchSchedule {
    n: usize,
    batch: usize,
    seed: u64,
}

impl BatchSchedule {
    pub fn new(n: usize, batch: usize, seed: u64) -> Self {
        let batch = if batch == 0 || batch > n { n } else { batch };
        BatchSchedule { n, batch, seed }
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n / self.batch
    }

    pub fn full_batch(&self) -> bool {
        self.batch == self.n
    }

    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n).collect();
        let mut r = rng::stream(self.seed, rng::BATCH, epoch as u64);
        idx.shuffle(&mut r);
        idx
    }

    /// Indices used at `step`.
    pub fn batch(&self, step: usize) -> Vec<usize> {
        if self.full_batch() {
            return (0..self.n).collect();
        }
        let per = self.batches_per_epoch();
        let order = self.epoch_order(step / per);
        let k = step % per;
        order[k * self.batch..(k + 1) * self.batch].to_vec()
    }
}

/// Noise-free evaluation sample size for targets without a closed form.
pub const EVAL_SAMPLES: usize = 8192;

/// Velocities, losses and batches for one problem, shared by every width.
#[derive(Clone, Debug)]
pub struct Simulator {
    pub problem: Problem,
    pub schedule: FlowSchedule,
    closed: Option<ClosedForm>,
    data: Option<Dataset>,
    eval: Option<Dataset>,
    batches: Option<BatchSchedule>,
    loss_seed: u64,
}

/// Currently materialised batch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl Simulator {
    pub fn new(problem: Problem, schedule: FlowSchedule, data_seed: u64, batch_seed: u64) -> Result<Self> {
        problem.validate()?;
        schedule.validate()?;
        let closed = match problem.closed_form() {
            Ok(c) => Some(c),
            Err(Error::NotClosedForm(why)) => {
                if schedule.mode == VelocityMode::Population {
                    return Err(Error::NotClosedForm(why));
                }
                None
            }
            Err(e) => return Err(e),
        };
        let (data, batches) = if schedule.mode == VelocityMode::Empirical {
            let ds = sample_dataset(&problem.covariates, &problem.target, schedule.n_train, data_seed)?;
            let bs = BatchSchedule::new(schedule.n_train, schedule.batch_size, batch_seed);
            (Some(ds), Some(bs))
        } else {
            (None, None)
        };
        let eval = if closed.is_none() {
            let clean = TargetSpec {
                noise_std: 0.0,
                ..problem.target.clone()
            };
            Some(sample_dataset(
                &problem.covariates,
                &clean,
                EVAL_SAMPLES,
                data_seed ^ 0x5EED_E7A1,
            )?)
        } else {
            None
        };
        Ok(Simulator {
            problem,
            schedule,
            closed,
            data,
            eval,
            batches,
            loss_seed: data_seed,
        })
    }

    pub fn closed_form(&self) -> Option<&ClosedForm> {
        self.closed.as_ref()
    }

    pub fn dataset(&self) -> Option<&Dataset> {
        self.data.as_ref()
    }

    /// The batch used at `step` (empirical mode only).
    pub fn batch(&self, step: usize) -> Option<Batch> {
        let ds = self.data.as_ref()?;
        let bs = self.batches.as_ref()?;
        if bs.full_batch() {
            return Some(Batch {
                xs: ds.xs.clone(),
                ys: ds.ys.clone(),
            });
        }
        let idx = bs.batch(step);
        let mut xs = Vec::with_capacity(idx.len() * ds.d);
        let ys = idx.iter().map(|&i| ds.ys[i]).collect();
        for &i in &idx {
            xs.extend_from_slice(ds.row(i));
        }
        Some(Batch { xs, ys })
    }

    /// Velocities at `step`; `batch` must come from [`Simulator::batch`] in empirical mode.
    pub fn velocities(&self, system: &ParticleSystem, batch: Option<&Batch>) -> Vec<f64> {
        match (self.schedule.mode, batch) {
            (VelocityMode::Empirical, Some(b)) => {
                empirical_velocities(system, &self.problem.activation, &b.xs, &b.ys)
            }
            _ => self
                .closed
                .as_ref()
                .expect("population mode has a closed form")
                .velocities(system),
        }
    }

    /// Population velocity of a probe at `w`, or its batch estimate without a closed form.
    pub fn probe_velocity(&self, w: &[f64], b: f64, system: &ParticleSystem, batch: Option<&Batch>) -> Vec<f64> {
        match (&self.closed, self.schedule.mode, batch) {
            (_, VelocityMode::Empirical, Some(bt)) => {
                empirical_velocity(w, b, system, &self.problem.activation, &bt.xs, &bt.ys)
            }
            (Some(c), _, _) => c.velocity(w, b, system),
            _ => panic!("no velocity field available"),
        }
    }

    /// `‖f − f*‖²`, exact when a closed form exists, else on a fixed noise-free sample.
    pub fn risk(&self, system: &ParticleSystem) -> f64 {
        match (&self.closed, &self.eval) {
            (Some(c), _) => c.loss(system, self.loss_seed),
            (None, Some(ev)) => empirical_loss(system, &self.problem.activation, &ev.xs, &ev.ys),
            _ => unreachable!(),
        }
    }

    /// Training loss on the full training set, or NaN in population mode.
    pub fn train_loss(&self, system: &ParticleSystem) -> f64 {
        match &self.data {
            Some(ds) => empirical_loss(system, &self.problem.activation, &ds.xs, &ds.ys),
            None => f64::NAN,
        }
    }

    /// `‖f_a − f_b‖²`.
    pub fn function_distance(&self, a: &ParticleSystem, b: &ParticleSystem) -> f64 {
        match (&self.closed, &self.eval) {
            (Some(c), _) => c.function_distance(a, b),
            (None, Some(ev)) => {
                let act = &self.problem.activation;
                let fa = predict_batch(a, act, &ev.xs);
                let fb = predict_batch(b, act, &ev.xs);
                fa.iter().zip(&fb).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / fa.len() as f64
            }
            _ => unreachable!(),
        }
    }

    pub fn mean_alignment(&self, system: &ParticleSystem) -> f64 {
        let dirs = self.problem.alignment_directions();
        (0..system.m())
            .map(|i| crate::diagnostics::alignment(system.row(i), &dirs))
            .sum::<f64>()
            / system.m() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlowRecord {
    pub step: usize,
    pub time: f64,
    pub loss_pop: f64,
    pub loss_emp: f64,
    pub mean_alignment: f64,
}

#[derive(Clone, Debug)]
pub struct Trajectory {
    pub records: Vec<FlowRecord>,
    pub snapshots: Vec<(usize, ParticleSystem)>,
    pub final_system: ParticleSystem,
}

/// Hook called at every step before the update, and once after the last step.
pub trait FlowObserver {
    fn observe(&mut self, step: usize, system: &ParticleSystem, sim: &Simulator) -> Result<()>;
}

/// Which states a run keeps in memory.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SnapshotPolicy {
    None,
    Recorded,
    EveryStep,
}

pub(crate) fn check_finite(step: usize, values: &[f64], what: &str) -> Result<()> {
    if let Some(k) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NumericalAbort {
            step,
            reason: format!("non-finite {what} at entry {k}"),
            dump: None,
        });
    }
    Ok(())
}

/// Integrates the flow from `system`, recording metrics on the schedule's grid.
pub fn run_flow(
    sim: &Simulator,
    mut system: ParticleSystem,
    snapshots: SnapshotPolicy,
    observers: &mut [&mut dyn FlowObserver],
) -> Result<Trajectory> {
    let sched = sim.schedule;
    let mut records = Vec::new();
    let mut snaps = Vec::new();
    for step in 0..=sched.n_steps {
        let recorded = step % sched.record_every == 0 || step == sched.n_steps;
        if recorded {
            let rec = FlowRecord {
                step,
                time: step as f64 * sched.eta,
                loss_pop: sim.risk(&system),
                loss_emp: sim.train_loss(&system),
                mean_alignment: sim.mean_alignment(&system),
            };
            if !rec.loss_pop.is_finite() {
                return Err(Error::NumericalAbort {
                    step,
                    reason: "non-finite loss".into(),
                    dump: None,
                });
            }
            records.push(rec);
        }
        if snapshots == SnapshotPolicy::EveryStep || (recorded && snapshots == SnapshotPolicy::Recorded) {
            snaps.push((step, system.clone()));
        }
        for obs in observers.iter_mut() {
            obs.observe(step, &system, sim)?;
        }
        if step == sched.n_steps {
            break;
        }
        let batch = sim.batch(step);
        let v = sim.velocities(&system, batch.as_ref());
        check_finite(step, &v, "velocity")?;
        euler_step(&mut system, &v, sched.eta).map_err(|e| match e {
            Error::NonTangentVelocity { .. } | Error::DegenerateStep { .. } => Error::NumericalAbort {
                step,
                reason: e.to_string(),
                dump: None,
            },
            other => other,
        })?;
    }
    Ok(Trajectory {
        records,
        snapshots: snaps,
        final_system: system,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{basis_vector, TargetKind};
    use crate::kernels::LinkFunction;

    pub(crate) fn he4_problem(d: usize) -> Problem {
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

    #[test]
    fn he4_single_index_velocity_example() {
        // One particle at w = (α, sqrt(1−α²), 0...) with α = 0.5, d = 8.
        let d = 8;
        let cf = he4_problem(d).closed_form().unwrap();
        let a: f64 = 0.5;
        let mut w = vec![0.0; d];
        w[0] = a;
        w[1] = (1.0 - a * a).sqrt();
        let sys = ParticleSystem::new(d, w.clone(), None).unwrap();
        let v = cf.velocity(&w, 1.0, &sys);
        // Interaction with itself is killed by P⊥; remaining: 96 α³ P⊥ e1.
        let want0 = 96.0 * a.powi(3) * (1.0 - a * a);
        assert!((v[0] - want0).abs() < 1e-12);
        assert!(dot(&v, &w).abs() < 1e-12);
    }

    #[test]
    fn population_velocities_match_per_particle_formula() {
        let d = 5;
        let p = he4_problem(d);
        let cf = p.closed_form().unwrap();
        let sys = ParticleSystem::init(d, 300, 3, &SecondLayerSpec::Signed { magnitude: 1.5 }).unwrap();
        let all = cf.velocities(&sys);
        for i in [0, 17, 299] {
            let v = cf.velocity(sys.row(i), sys.b(i), &sys);
            for k in 0..d {
                assert!((all[i * d + k] - v[k]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn loss_is_zero_at_the_teacher_and_matches_monte_carlo() {
        let d = 4;
        let p = he4_problem(d);
        let cf = p.closed_form().unwrap();
        let at_teacher = ParticleSystem::new(d, basis_vector(d, 0), None).unwrap();
        assert!(cf.loss(&at_teacher, 0).abs() < 1e-12);
        // Compare against sampled risk for a random system.
        let sys = ParticleSystem::init(d, 6, 1, &SecondLayerSpec::Ones).unwrap();
        let ds = sample_dataset(&p.covariates, &p.target, 400_000, 2).unwrap();
        let act = &p.activation;
        let f = predict_batch(&sys, act, &ds.xs);
        let errs: Vec<f64> = f.iter().zip(&ds.ys).map(|(a, b)| (a - b).powi(2)).collect();
        let mean = errs.iter().sum::<f64>() / errs.len() as f64;
        let var = errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / errs.len() as f64;
        let se = (var / errs.len() as f64).sqrt();
        assert!((cf.loss(&sys, 0) - mean).abs() < 5.0 * se, "{} vs {mean} ± {se}", cf.loss(&sys, 0));
    }

    #[test]
    fn subsampled_loss_is_close_to_exact() {
        let d = 6;
        let cf = he4_problem(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, EXACT_LOSS_MAX_WIDTH + 500, 4, &SecondLayerSpec::Ones).unwrap();
        let exact = kernel_sum(sys.weights(), sys.weights(), d, None, None, |z| cf.q_net.eval(z))
            / (sys.m() as f64).powi(2);
        let approx = cf.self_energy(&sys, 1);
        assert!((exact - approx).abs() < 0.02 * exact, "{exact} {approx}");
    }

    #[test]
    fn euler_step_rejects_non_tangent_velocity() {
        let mut sys = ParticleSystem::new(2, vec![1.0, 0.0], None).unwrap();
        assert!(matches!(
            euler_step(&mut sys, &[0.5, 0.0], 0.1),
            Err(Error::NonTangentVelocity { particle: 0, .. })
        ));
        euler_step(&mut sys, &[0.0, 1.0], 0.1).unwrap();
        let w = sys.row(0);
        assert!((dot(w, w) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batch_schedule_covers_each_epoch_once() {
        let bs = BatchSchedule::new(100, 25, 3);
        let mut seen: Vec<usize> = (0..4).flat_map(|s| bs.batch(s)).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..100).collect::<Vec<_>>());
        assert_ne!(bs.batch(0), bs.batch(4));
        assert!(BatchSchedule::new(10, 0, 0).full_batch());
    }

    #[test]
    fn boolean_problems_have_no_closed_form() {
        let p = Problem {
            covariates: CovariateSpec::RademacherCube { d: 6 },
            target: TargetSpec::noiseless(TargetKind::Parity { coords: vec![0, 1, 2, 3] }),
            activation: Activation::Softplus { temp: 16.0 },
            second_layer: SecondLayerSpec::Signed { magnitude: 8.0 },
        };
        assert!(matches!(p.closed_form(), Err(Error::NotClosedForm(_))));
        let sched = FlowSchedule {
            eta: 0.05,
            n_steps: 2,
            record_every: 1,
            mode: VelocityMode::Population,
            n_train: 0,
            batch_size: 0,
        };
        assert!(matches!(Simulator::new(p, sched, 0, 0), Err(Error::NotClosedForm(_))));
    }

    #[test]
    fn invalid_schedule() {
        let mut s = FlowSchedule {
            eta: 1.5,
            n_steps: 2,
            record_every: 1,
            mode: VelocityMode::Population,
            n_train: 0,
            batch_size: 0,
        };
        assert!(s.validate().is_err());
        s.eta = 0.1;
        assert!(s.validate().is_ok());
        assert_eq!(s.recorded_steps(), vec![0, 1, 2]);
    }

    #[test]
    fn population_flow_decreases_loss() {
        let d = 6;
        let sched = FlowSchedule {
            eta: 0.01,
            n_steps: 400,
            record_every: 100,
            mode: VelocityMode::Population,
            n_train: 0,
            batch_size: 0,
        };
        let sim = Simulator::new(he4_problem(d), sched, 0, 0).unwrap();
        let sys = ParticleSystem::init(d, 64, 2, &SecondLayerSpec::Ones).unwrap();
        let traj = run_flow(&sim, sys, SnapshotPolicy::None, &mut []).unwrap();
        assert_eq!(traj.records.len(), 5);
        let first = traj.records[0].loss_pop;
        let last = traj.records.last().unwrap().loss_pop;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(traj.records.last().unwrap().mean_alignment > traj.records[0].mean_alignment);
    }
}
