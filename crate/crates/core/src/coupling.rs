//! Coupled training of several widths against a wide mean-field proxy.
//!
//! All widths start from prefixes of the proxy's initialisation and see the
//! same batches, so `Δ̂(i) = w_i^m − w_i^M` isolates the finite-width error.

use serde::{Deserialize, Serialize};

use crate::diagnostics::CoupledSnapshot;
use crate::dynamics::{check_finite, euler_step, ParticleSystem, Simulator};
use crate::kernels::dot;
use crate::{Error, Result};

/// Number of logarithmic bins in the `‖Δ̂(i)‖` histograms.
pub const HISTOGRAM_BINS: usize = 64;
/// Histogram range.
pub const HISTOGRAM_RANGE: (f64, f64) = (1e-8, 2.0);
/// Number of checkpoints carrying a histogram.
pub const HISTOGRAM_CHECKPOINTS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingConfig {
    pub widths: Vec<usize>,
    pub proxy_width: usize,
    pub init_seed: u64,
    /// Steps at which paired consecutive states are kept for residual analysis.
    #[serde(default)]
    pub snapshot_steps: Vec<usize>,
}

impl CouplingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() {
            return Err(Error::InvalidConfig("no widths".into()));
        }
        if let Some(&m) = self.widths.iter().find(|&&m| m == 0 || m > self.proxy_width) {
            return Err(Error::InvalidConfig(format!(
                "width {m} not in 1..={}",
                self.proxy_width
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingRow {
    pub step: usize,
    pub time: f64,
    /// `‖f_m − f*‖²`.
    pub risk: f64,
    /// `‖f_m − f_M‖²`.
    pub func_error: f64,
    /// `m · func_error`.
    pub scaled_func_error: f64,
    /// `E_i ‖Δ̂(i)‖`.
    pub mean_delta: f64,
    /// `m · (E_i ‖Δ̂(i)‖)²`.
    pub scaled_param_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaHistogram {
    pub step: usize,
    /// Bin edges, `HISTOGRAM_BINS + 1` values.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Values below the first edge (including exact zeros).
    pub underflow: usize,
    pub overflow: usize,
}

/// Log-spaced histogram of the values over [`HISTOGRAM_RANGE`].
pub fn delta_histogram(step: usize, values: &[f64]) -> DeltaHistogram {
    let (lo, hi) = HISTOGRAM_RANGE;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS)
        .map(|k| (llo + (lhi - llo) * k as f64 / HISTOGRAM_BINS as f64).exp())
        .collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    let (mut underflow, mut overflow) = (0, 0);
    for &v in values {
        if v < lo {
            underflow += 1;
        } else if v > hi {
            overflow += 1;
        } else {
            let k = ((v.ln() - llo) / (lhi - llo) * HISTOGRAM_BINS as f64) as usize;
            counts[k.min(HISTOGRAM_BINS - 1)] += 1;
        }
    }
    DeltaHistogram {
        step,
        edges,
        counts,
        underflow,
        overflow,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WidthRecord {
    pub m: usize,
    pub rows: Vec<CouplingRow>,
    pub histograms: Vec<DeltaHistogram>,
}

#[derive(Clone, Debug)]
pub struct CouplingRecord {
    pub proxy_width: usize,
    pub widths: Vec<WidthRecord>,
    /// `(step, ‖f_M − f*‖²)` at recorded steps.
    pub proxy_risk: Vec<(usize, f64)>,
    /// Paired states for the first listed width, at the configured snapshot steps.
    pub snapshots: Vec<CoupledSnapshot>,
    pub final_proxy: ParticleSystem,
    /// Final state of every width, in the order of `widths`.
    pub final_small: Vec<ParticleSystem>,
}

fn delta_norms(small: &ParticleSystem, proxy: &ParticleSystem) -> Vec<f64> {
    let d = small.d();
    small
        .weights()
        .chunks_exact(d)
        .zip(proxy.weights().chunks_exact(d))
        .map(|(a, b)| {
            let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
            dot(&diff, &diff).sqrt()
        })
        .collect()
}

/// Trains every width and the proxy side by side on shared batches.
pub fn run_coupled(sim: &Simulator, cfg: &CouplingConfig) -> Result<CouplingRecord> {
    cfg.validate()?;
    let sched = sim.schedule;
    let d = sim.problem.d();
    let mut proxy = ParticleSystem::init(d, cfg.proxy_width, cfg.init_seed, &sim.problem.second_layer)?;
    let mut smalls: Vec<ParticleSystem> = cfg.widths.iter().map(|&m| proxy.prefix(m)).collect();
    let recorded = sched.recorded_steps();
    let hist_steps: Vec<usize> = (0..HISTOGRAM_CHECKPOINTS)
        .map(|k| recorded[k * (recorded.len() - 1) / (HISTOGRAM_CHECKPOINTS - 1).max(1)])
        .collect();
    let mut widths: Vec<WidthRecord> = cfg
        .widths
        .iter()
        .map(|&m| WidthRecord {
            m,
            rows: Vec::new(),
            histograms: Vec::new(),
        })
        .collect();
    let mut proxy_risk = Vec::new();
    let mut snapshots = Vec::new();
    let mut pending: Option<(usize, ParticleSystem, ParticleSystem)> = None;
    for step in 0..=sched.n_steps {
        if let Some((s, p0, m0)) = pending.take() {
            snapshots.push(CoupledSnapshot {
                step: s,
                proxy: (p0, proxy.clone()),
                small: (m0, smalls[0].clone()),
            });
        }
        if cfg.snapshot_steps.contains(&step) && step < sched.n_steps {
            pending = Some((step, proxy.clone(), smalls[0].clone()));
        }
        if recorded.contains(&step) {
            let time = step as f64 * sched.eta;
            let self_energy = sim.closed_form().map(|cf| cf.pair_energy(&proxy, &proxy));
            for (rec, small) in widths.iter_mut().zip(&smalls) {
                let m = small.m() as f64;
                let fe = match (sim.closed_form(), self_energy) {
                    (Some(cf), Some(pp)) => {
                        cf.pair_energy(small, small) + pp - 2.0 * cf.pair_energy(small, &proxy)
                    }
                    _ => sim.function_distance(small, &proxy),
                };
                let norms = delta_norms(small, &proxy.prefix(small.m()));
                let mean_delta = norms.iter().sum::<f64>() / m;
                let row = CouplingRow {
                    step,
                    time,
                    risk: sim.risk(small),
                    func_error: fe,
                    scaled_func_error: m * fe,
                    mean_delta,
                    scaled_param_error: m * mean_delta * mean_delta,
                };
                if !(row.risk.is_finite() && row.func_error.is_finite()) {
                    return Err(Error::NumericalAbort {
                        step,
                        reason: format!("non-finite metrics at width {}", small.m()),
                        dump: None,
                    });
                }
                rec.rows.push(row);
                if hist_steps.contains(&step) && rec.histograms.last().map(|h| h.step) != Some(step) {
                    rec.histograms.push(delta_histogram(step, &norms));
                }
            }
            if self_energy.is_some() && cfg.proxy_width <= crate::dynamics::EXACT_LOSS_MAX_WIDTH {
                proxy_risk.push((step, sim.risk(&proxy)));
            }
        }
        if step == sched.n_steps {
            break;
        }
        let batch = sim.batch(step);
        let v = sim.velocities(&proxy, batch.as_ref());
        check_finite(step, &v, "proxy velocity")?;
        euler_step(&mut proxy, &v, sched.eta)?;
        for small in smalls.iter_mut() {
            let v = sim.velocities(small, batch.as_ref());
            check_finite(step, &v, "velocity")?;
            euler_step(small, &v, sched.eta)?;
        }
    }
    Ok(CouplingRecord {
        proxy_width: cfg.proxy_width,
        widths,
        proxy_risk,
        snapshots,
        final_proxy: proxy,
        final_small: smalls,
    })
}

/// Ratio `‖f_m − f_M‖² / ((E‖Δ̂‖)² + log(m)/m)` of a recorded row.
pub fn coupling_inequality_ratio(row: &CouplingRow, m: usize) -> f64 {
    let mf = m as f64;
    row.func_error / (row.mean_delta.powi(2) + mf.ln() / mf)
}

/// `E_{i,j} Δ_iᵀ b_i b_j H⊥(w_i, w_j) Δ_j`, the quadratic form of the interaction operator.
pub fn interaction_quadratic_form(
    system: &ParticleSystem,
    cf: &crate::dynamics::ClosedForm,
    deltas: &[f64],
) -> f64 {
    let h = crate::diagnostics::interaction_apply(system, cf, deltas);
    h.iter().zip(deltas).map(|(a, b)| a * b).sum::<f64>() / system.m() as f64
}

/// For each recorded time, `max/min` across widths of the selected scaled metric.
/// Rows where every width reports zero are skipped.
pub fn width_spread(
    record: &[WidthRecord],
    metric: impl Fn(&CouplingRow) -> f64,
) -> Vec<(usize, f64)> {
    let n = record.iter().map(|w| w.rows.len()).min().unwrap_or(0);
    (0..n)
        .filter_map(|k| {
            let vals: Vec<f64> = record.iter().map(|w| metric(&w.rows[k])).collect();
            let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
            if max == 0.0 {
                None
            } else {
                Some((record[0].rows[k].step, max / min))
            }
        })
        .collect()
}

/// Smaller of the total variation against an increasing and against a
/// decreasing trend, relative to the curve's range; 0 for a monotone curve.
pub fn monotonicity_defect(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let (mut up, mut down) = (0.0, 0.0);
    for w in values.windows(2) {
        let diff = w[1] - w[0];
        if diff > 0.0 {
            up += diff;
        } else {
            down -= diff;
        }
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    if max == min {
        return 0.0;
    }
    f64::min(up, down) / (max - min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{basis_vector, CovariateSpec, SecondLayerSpec, TargetKind, TargetSpec};
    use crate::dynamics::{FlowSchedule, Problem, VelocityMode};
    use crate::kernels::{Activation, LinkFunction};
    use rand::Rng;
    use rand_distr::StandardNormal;

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

    #[test]
    fn identical_systems_have_zero_error_at_the_start() {
        let sched = FlowSchedule {
            eta: 0.01,
            n_steps: 20,
            record_every: 10,
            mode: VelocityMode::Empirical,
            n_train: 512,
            batch_size: 128,
        };
        let sim = Simulator::new(he4(6), sched, 1, 2).unwrap();
        let cfg = CouplingConfig {
            widths: vec![8, 32],
            proxy_width: 64,
            init_seed: 3,
            snapshot_steps: vec![10],
        };
        let rec = run_coupled(&sim, &cfg).unwrap();
        for w in &rec.widths {
            assert_eq!(w.rows[0].mean_delta, 0.0);
            assert_eq!(w.rows.len(), 3);
            assert!(w.rows[2].mean_delta > 0.0);
            assert!(w.rows[0].func_error > 0.0);
            assert_eq!(w.histograms[0].underflow, w.m);
        }
        assert_eq!(rec.snapshots.len(), 1);
        assert_eq!(rec.snapshots[0].step, 10);
        // The proxy width itself couples with zero error.
        let cfg_self = CouplingConfig {
            widths: vec![64],
            ..cfg
        };
        let rec = run_coupled(&sim, &cfg_self).unwrap();
        assert!(rec.widths[0].rows.iter().all(|r| r.mean_delta == 0.0 && r.func_error.abs() < 1e-10));
    }

    #[test]
    fn perturbation_error_is_quadratic_and_the_form_scales() {
        let d = 8;
        let cf = he4(d).closed_form().unwrap();
        let sys = ParticleSystem::init(d, 64, 5, &SecondLayerSpec::Ones).unwrap();
        let mut r = crate::rng::stream(0, crate::rng::PROBE, 0);
        let mut u: Vec<f64> = (0..64 * d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        for (w, row) in sys.weights().chunks(d).zip(u.chunks_mut(d)) {
            crate::dynamics::project_tangent(w, row);
            let n = dot(row, row).sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        let moved = |eps: f64| {
            let mut w = sys.weights().to_vec();
            for (row, du) in w.chunks_mut(d).zip(u.chunks(d)) {
                row.iter_mut().zip(du).for_each(|(a, b)| *a += eps * b);
                let n = dot(row, row).sqrt();
                row.iter_mut().for_each(|a| *a /= n);
            }
            sys.with_weights(w)
        };
        let fe1 = cf.function_distance(&sys, &moved(1e-3));
        let fe2 = cf.function_distance(&sys, &moved(2e-3));
        assert!(fe1 > 0.0 && (fe2 / fe1 - 4.0).abs() < 0.05, "{fe1} {fe2}");
        let deltas: Vec<f64> = u.iter().map(|x| 1e-3 * x).collect();
        let doubled: Vec<f64> = deltas.iter().map(|x| 2.0 * x).collect();
        let q1 = interaction_quadratic_form(&sys, &cf, &deltas);
        let q2 = interaction_quadratic_form(&sys, &cf, &doubled);
        assert!(q1 > 0.0 && (q2 / q1 - 4.0).abs() < 0.04);
        // Function error of a small perturbation is the quadratic form to leading order.
        assert!((fe1 / q1 - 1.0).abs() < 0.05, "{fe1} {q1}");
    }

    #[test]
    fn histogram_bins() {
        let h = delta_histogram(0, &[0.0, 1e-9, 1e-8, 1.0, 2.0, 3.0]);
        assert_eq!(h.edges.len(), HISTOGRAM_BINS + 1);
        assert_eq!(h.underflow, 2);
        assert_eq!(h.overflow, 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[HISTOGRAM_BINS - 1], 1);
    }

    #[test]
    fn monotonicity_defect_examples() {
        assert_eq!(monotonicity_defect(&[1.0, 2.0, 3.0]), 0.0);
        assert_eq!(monotonicity_defect(&[3.0, 2.0, 1.0]), 0.0);
        assert!((monotonicity_defect(&[0.0, 2.0, 1.5, 3.0]) - 0.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn width_spread_skips_zero_rows() {
        let row = |s: usize, v: f64| CouplingRow {
            step: s,
            time: 0.0,
            risk: 0.0,
            func_error: 0.0,
            scaled_func_error: v,
            mean_delta: 0.0,
            scaled_param_error: 0.0,
        };
        let recs = vec![
            WidthRecord { m: 1, rows: vec![row(0, 0.0), row(1, 2.0)], histograms: vec![] },
            WidthRecord { m: 2, rows: vec![row(0, 0.0), row(1, 1.0)], histograms: vec![] },
        ];
        assert_eq!(width_spread(&recs, |r| r.scaled_func_error), vec![(1, 2.0)]);
    }
}
