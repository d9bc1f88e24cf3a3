//! The four named pipelines: flow, couple, reduce, potential.

use std::path::{Path, PathBuf};

use serde_json::json;

use super::checkpoint::write_checkpoint;
use super::svg::{Chart, Series};
use super::{fmt_f64, fmt_row, ExperimentConfig, Manifest, OutputDir, Pipeline, ProblemConfig, ReducedSection, Seeds};
use crate::coupling::{monotonicity_defect, run_coupled, width_spread, CouplingConfig, CouplingRecord};
use crate::data::{basis_vector, SecondLayerSpec, TargetKind, TargetSpec};
use crate::diagnostics::{sample_indices, ConcordanceProbe, StabilityTracker};
use crate::dynamics::{
    run_flow, FlowObserver, FlowSchedule, ParticleSystem, Problem, Simulator, SnapshotPolicy, VelocityMode,
};
use crate::kernels::{Activation, LinkFunction};
use crate::potential::{assign_xi_infinity, check_decomposition, lemma_checks, spectral_decompose};
use crate::reduced::{run_reduced, sweep_escape_times, AlphaEnsemble, QUANTILE_LEVELS};
use crate::{Error, Result};

/// Bound factor of the self-concordance probe, `3 (k* − 1)` for `k* = 4`.
const CONCORDANCE_FACTOR: f64 = 9.0;

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
}

/// Runs the configured pipeline and writes every artifact plus `manifest.json`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut out = OutputDir::create(&cfg.output_dir)?;
    let summary = match cfg.pipeline {
        Pipeline::Flow => flow(cfg, &mut out)?,
        Pipeline::Couple => {
            let (sim, record) = coupled(cfg)?;
            write_coupling(cfg, &sim, &record, &mut out)?
        }
        Pipeline::Reduce => reduce(cfg, &mut out)?,
        Pipeline::Potential => potential(cfg, &mut out)?,
    };
    let manifest = out.finish(cfg, summary)?;
    Ok(RunOutcome {
        dir: cfg.output_dir.clone(),
        manifest,
    })
}

/// A reduce-only config for `He_{k*}` over the given dimensions.
pub fn sweep_config(dims: &[usize], kstar: usize, delta: f64, output_dir: &Path) -> Result<ExperimentConfig> {
    let d = *dims.first().ok_or_else(|| Error::InvalidConfig("no dimensions".into()))?;
    let link = LinkFunction::he(kstar)?;
    let problem = Problem {
        covariates: crate::data::CovariateSpec::GaussianIso { d },
        target: TargetSpec::noiseless(TargetKind::SingleIndex {
            link: link.clone(),
            direction: basis_vector(d, 0),
        }),
        activation: Activation::Hermite(link),
        second_layer: SecondLayerSpec::Ones,
    };
    let cfg = ExperimentConfig {
        name: format!("reduce_he{kstar}"),
        pipeline: Pipeline::Reduce,
        problem: ProblemConfig::Custom { problem },
        widths: Vec::new(),
        proxy_width: None,
        schedule: FlowSchedule {
            eta: 0.0,
            n_steps: 0,
            record_every: 1,
            mode: VelocityMode::Population,
            n_train: 0,
            batch_size: 0,
        },
        diagnostics: Default::default(),
        reduced: ReducedSection {
            delta,
            sweep_dims: dims.to_vec(),
            ..Default::default()
        },
        seeds: Seeds { init: 0, data: 0, batch: 0 },
        checkpoint_every: 0,
        output_dir: output_dir.to_path_buf(),
    };
    cfg.validate()?;
    Ok(cfg)
}

fn simulator(cfg: &ExperimentConfig) -> Result<Simulator> {
    Simulator::new(cfg.problem.build()?, cfg.schedule, cfg.seeds.data, cfg.seeds.batch)
}

fn init(cfg: &ExperimentConfig, sim: &Simulator, m: usize) -> Result<ParticleSystem> {
    ParticleSystem::init(sim.problem.d(), m, cfg.seeds.init, &sim.problem.second_layer)
}

/// Keeps the latest state so an abort can be dumped, and writes periodic checkpoints.
struct Keeper<'a> {
    root: &'a Path,
    tag: String,
    every: usize,
    written: Vec<String>,
    last: Option<(usize, ParticleSystem)>,
}

impl FlowObserver for Keeper<'_> {
    fn observe(&mut self, step: usize, system: &ParticleSystem, _: &Simulator) -> Result<()> {
        if self.every > 0 && step % self.every == 0 {
            let rel = format!("checkpoints/{}_step{step}.bin", self.tag);
            let path = self.root.join(&rel);
            std::fs::create_dir_all(path.parent().unwrap())?;
            write_checkpoint(&path, step, system)?;
            self.written.push(rel);
        }
        self.last = Some((step, system.clone()));
        Ok(())
    }
}

impl Keeper<'_> {
    /// Attaches a dump of the last good state to a numerical abort.
    fn dump(&self, err: Error) -> Error {
        match (err, &self.last) {
            (Error::NumericalAbort { step, reason, .. }, Some((last, sys))) => {
                let path = self.root.join(format!("abort_{}.bin", self.tag));
                let dump = write_checkpoint(&path, *last, sys).ok().map(|_| path);
                Error::NumericalAbort { step, reason, dump }
            }
            (err, _) => err,
        }
    }
}

fn flow(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let sim = simulator(cfg)?;
    let diag = &cfg.diagnostics;
    let mut summary = Vec::new();
    let mut risk_series = Vec::new();
    for &m in &cfg.widths {
        let system = init(cfg, &sim, m)?;
        let tag = format!("m{m}");
        let mut keeper = Keeper {
            root: &cfg.output_dir,
            tag: tag.clone(),
            every: cfg.checkpoint_every,
            written: Vec::new(),
            last: Some((0, system.clone())),
        };
        let neurons = sample_indices(m, diag.neurons.min(m), cfg.seeds.init);
        let mut probe = ConcordanceProbe::new(neurons.clone(), diag.every, (0.0, 1.0), CONCORDANCE_FACTOR);
        let n = cfg.schedule.n_steps;
        let mut tracker = StabilityTracker::new(
            neurons,
            StabilityTracker::grid(n, diag.j_sources, diag.j_targets),
            diag.j_probes,
            diag.tau,
            sim.problem.alignment_directions(),
            cfg.seeds.init,
        );
        let traj = {
            let mut obs: Vec<&mut dyn FlowObserver> = vec![&mut keeper];
            if diag.hessians {
                obs.push(&mut probe);
            }
            if diag.j_stats && n > 0 {
                obs.push(&mut tracker);
            }
            run_flow(&sim, system.clone(), SnapshotPolicy::None, &mut obs)
        };
        let traj = traj.map_err(|e| keeper.dump(e))?;
        for rel in &keeper.written {
            out.register(rel);
        }
        let rows: Vec<Vec<String>> = traj
            .records
            .iter()
            .map(|r| {
                let mut row = vec![r.step.to_string()];
                row.extend(fmt_row(&[r.time, r.loss_pop, r.loss_emp, r.mean_alignment]));
                row
            })
            .collect();
        out.write_csv(
            &format!("flow_{tag}.csv"),
            &["step", "time", "loss_pop", "loss_emp", "mean_alignment"],
            &rows,
        )?;
        risk_series.push(Series {
            label: format!("m = {m}"),
            points: traj.records.iter().map(|r| (r.time, r.loss_pop)).collect(),
        });
        let mut entry = json!({
            "m": m,
            "final_loss": traj.records.last().map(|r| r.loss_pop),
        });
        if diag.hessians {
            let rows: Vec<Vec<String>> = probe
                .spectrum
                .iter()
                .map(|&(s, i, lam)| vec![s.to_string(), i.to_string(), fmt_f64(lam)])
                .collect();
            out.write_csv(&format!("hessian_{tag}.csv"), &["step", "particle", "lambda_max"], &rows)?;
        }
        if diag.j_stats && n > 0 {
            let stats = tracker.stats();
            entry["j_max"] = json!(stats.j_max);
            entry["j_avg"] = json!(stats.j_avg);
            out.write(&format!("jstats_{tag}.json"), serde_json::to_string_pretty(&stats)?.as_bytes())?;
        }
        if diag.reduced {
            let run = reduced_from_system(cfg, &sim, &system)?;
            entry["reduced_t_delta"] = json!(run.t_delta);
            write_reduced(&format!("reduced_{tag}.csv"), &run, out)?;
        }
        summary.push(entry);
    }
    let chart = Chart {
        title: cfg.name.clone(),
        x_label: "time".into(),
        y_label: "population risk".into(),
        log_y: true,
        series: risk_series,
    };
    out.write("risk.svg", chart.render().as_bytes())?;
    Ok(json!({ "widths": summary }))
}

fn hermite_link(sim: &Simulator) -> Result<LinkFunction> {
    sim.problem
        .activation
        .link()
        .cloned()
        .ok_or_else(|| Error::NotClosedForm("needs a Hermite activation".into()))
}

fn reduced_from_system(cfg: &ExperimentConfig, sim: &Simulator, system: &ParticleSystem) -> Result<crate::reduced::ReducedRun> {
    let link = hermite_link(sim)?;
    let teachers = sim.problem.alignment_directions();
    let alphas = (0..system.m())
        .map(|i| crate::diagnostics::alignment(system.row(i), &teachers))
        .collect();
    run_reduced(&link, AlphaEnsemble::from_alphas(system.d(), alphas)?, &cfg.reduced.config())
}

fn write_reduced(rel: &str, run: &crate::reduced::ReducedRun, out: &mut OutputDir) -> Result<()> {
    let rows: Vec<Vec<String>> = run
        .records
        .iter()
        .map(|r| {
            let mut row = vec![r.step.to_string()];
            row.extend(fmt_row(&[r.time, r.loss_proxy, r.r_kstar]));
            row.extend(fmt_row(&r.quantiles));
            row
        })
        .collect();
    let mut header = vec!["step", "time", "loss_proxy", "r_kstar"];
    let names: Vec<String> = QUANTILE_LEVELS.iter().map(|q| format!("alpha_q{:02}", (q * 100.0) as usize)).collect();
    header.extend(names.iter().map(String::as_str));
    out.write_csv(rel, &header, &rows)
}

fn reduce(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let problem = cfg.problem.build()?;
    let link = problem
        .activation
        .link()
        .cloned()
        .ok_or_else(|| Error::NotClosedForm("the reduced model needs a Hermite activation".into()))?;
    let rc = cfg.reduced.config();
    let mut summary = json!({});
    if cfg.reduced.sweep_dims.is_empty() {
        let ens = AlphaEnsemble::quantile_grid(problem.d(), cfg.reduced.grid)?;
        let run = run_reduced(&link, ens, &rc)?;
        write_reduced("reduced.csv", &run, out)?;
        summary["t_delta"] = json!(run.t_delta);
        summary["clamps"] = json!(run.clamps);
    } else {
        let kstar = link.information_exponent();
        if link != LinkFunction::he(kstar)? {
            return Err(Error::InvalidConfig("a T(delta) sweep needs a pure He_k link".into()));
        }
        let rows = sweep_escape_times(kstar, &cfg.reduced.sweep_dims, &rc, cfg.reduced.grid)?;
        let csv: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                vec![
                    r.d.to_string(),
                    r.kstar.to_string(),
                    fmt_f64(r.delta),
                    r.t_delta.map(fmt_f64).unwrap_or_default(),
                    r.clamps.to_string(),
                ]
            })
            .collect();
        out.write_csv("sweep.csv", &["d", "kstar", "delta", "t_delta", "clamps"], &csv)?;
        summary["sweep"] = serde_json::to_value(&rows)?;
    }
    Ok(summary)
}

fn coupled(cfg: &ExperimentConfig) -> Result<(Simulator, CouplingRecord)> {
    let sim = simulator(cfg)?;
    let cc = CouplingConfig {
        widths: cfg.widths.clone(),
        proxy_width: cfg.proxy_width(),
        init_seed: cfg.seeds.init,
        snapshot_steps: Vec::new(),
    };
    let record = run_coupled(&sim, &cc)?;
    Ok((sim, record))
}

fn write_coupling(
    cfg: &ExperimentConfig,
    sim: &Simulator,
    record: &CouplingRecord,
    out: &mut OutputDir,
) -> Result<serde_json::Value> {
    let mut risk = Vec::new();
    let mut func = Vec::new();
    let mut param = Vec::new();
    for w in &record.widths {
        let rows: Vec<Vec<String>> = w
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![r.step.to_string()];
                row.extend(fmt_row(&[
                    r.time,
                    r.risk,
                    r.func_error,
                    r.scaled_func_error,
                    r.mean_delta,
                    r.scaled_param_error,
                ]));
                row
            })
            .collect();
        out.write_csv(
            &format!("coupling_m{}.csv", w.m),
            &["step", "time", "risk", "func_error", "scaled_func_error", "mean_delta", "scaled_param_error"],
            &rows,
        )?;
        let mut hist = Vec::new();
        for h in &w.histograms {
            for (k, c) in h.counts.iter().enumerate() {
                hist.push(vec![h.step.to_string(), fmt_f64(h.edges[k]), fmt_f64(h.edges[k + 1]), c.to_string()]);
            }
            hist.push(vec![h.step.to_string(), "-inf".into(), fmt_f64(h.edges[0]), h.underflow.to_string()]);
            hist.push(vec![h.step.to_string(), fmt_f64(h.edges[h.counts.len()]), "inf".into(), h.overflow.to_string()]);
        }
        out.write_csv(&format!("histogram_m{}.csv", w.m), &["step", "lo", "hi", "count"], &hist)?;
        let label = format!("m = {}", w.m);
        let series = |f: &dyn Fn(&crate::coupling::CouplingRow) -> f64| Series {
            label: label.clone(),
            points: w.rows.iter().map(|r| (r.time, f(r))).collect(),
        };
        risk.push(series(&|r| r.risk));
        func.push(series(&|r| r.scaled_func_error));
        param.push(series(&|r| r.scaled_param_error));
    }
    let eta = sim.schedule.eta;
    let proxy: Vec<Vec<String>> = record
        .proxy_risk
        .iter()
        .map(|&(s, r)| vec![s.to_string(), fmt_f64(s as f64 * eta), fmt_f64(r)])
        .collect();
    out.write_csv("proxy_risk.csv", &["step", "time", "risk"], &proxy)?;
    risk.push(Series {
        label: format!("M = {}", record.proxy_width),
        points: record.proxy_risk.iter().map(|&(s, r)| (s as f64 * eta, r)).collect(),
    });
    for (file, y, series) in [
        ("risk.svg", "population risk", risk),
        ("scaled_func_error.svg", "m ‖f_m − f_M‖²", func),
        ("scaled_param_error.svg", "m (E‖Δ‖)²", param),
    ] {
        let chart = Chart {
            title: cfg.name.clone(),
            x_label: "time".into(),
            y_label: y.into(),
            log_y: true,
            series,
        };
        out.write(file, chart.render().as_bytes())?;
    }
    let spread = |f: fn(&crate::coupling::CouplingRow) -> f64| {
        width_spread(&record.widths, f)
            .iter()
            .map(|p| p.1)
            .fold(0.0, f64::max)
    };
    let trivial = record
        .widths
        .iter()
        .all(|w| w.rows.iter().all(|r| r.func_error == 0.0 && r.mean_delta == 0.0));
    let defects: Vec<f64> = record
        .widths
        .iter()
        .map(|w| monotonicity_defect(&w.rows.iter().map(|r| r.func_error).collect::<Vec<_>>()))
        .collect();
    Ok(json!({
        "trivial": trivial || eta == 0.0,
        "func_spread": spread(|r| r.scaled_func_error),
        "param_spread": spread(|r| r.scaled_param_error),
        "risk_monotonicity_defect": defects,
        "widths": record.widths.iter().map(|w| json!({
            "m": w.m,
            "final": w.rows.last(),
        })).collect::<Vec<_>>(),
    }))
}

fn potential(cfg: &ExperimentConfig, out: &mut OutputDir) -> Result<serde_json::Value> {
    let (sim, record) = coupled(cfg)?;
    let mut summary = write_coupling(cfg, &sim, &record, out)?;
    let cf = sim
        .closed_form()
        .ok_or_else(|| Error::NotClosedForm("the potential needs a closed form".into()))?;
    let link = hermite_link(&sim)?;
    let teachers = &cf.atoms.directions;
    let small = &record.final_small[0];
    let mean_field = record.final_proxy.prefix(small.m());
    let delta: Vec<f64> = small
        .weights()
        .iter()
        .zip(mean_field.weights())
        .map(|(a, b)| a - b)
        .collect();
    let assignment = assign_xi_infinity(&mean_field, teachers)?;
    let bsd = spectral_decompose(&assignment, teachers, &link)?;
    let check = check_decomposition(&bsd, &link);
    let lemmas = lemma_checks(&mean_field, &delta, cf, &bsd, &assignment, cfg.diagnostics.tau, cfg.seeds.init)?;
    out.write(
        "bsd.json",
        serde_json::to_string_pretty(&json!({ "decomposition": bsd, "check": check }))?.as_bytes(),
    )?;
    out.write("lemmas.json", serde_json::to_string_pretty(&lemmas)?.as_bytes())?;
    let text = format!(
        "m = {}\nphi = {}\nomega = {}\npsi = {}\nbalance = {} (bound {})\nperturbation: {}/{} passed, worst ratio {}\ninteraction constant = {}\nlocal contraction = {}\n",
        small.m(),
        fmt_f64(lemmas.potential.phi),
        fmt_f64(lemmas.potential.omega),
        fmt_f64(lemmas.potential.psi),
        fmt_f64(bsd.balance),
        fmt_f64(bsd.balance_bound),
        lemmas.perturbation.passed,
        lemmas.perturbation.trials,
        fmt_f64(lemmas.perturbation.worst_ratio),
        fmt_f64(lemmas.interaction.fitted_constant),
        fmt_f64(lemmas.local.contraction),
    );
    out.write("lemmas.txt", text.as_bytes())?;
    summary["phi"] = json!(lemmas.potential.phi);
    summary["balanced"] = json!(bsd.balanced());
    Ok(summary)
}
