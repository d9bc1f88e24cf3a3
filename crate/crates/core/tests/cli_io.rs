use std::fs;
use std::path::Path;
use std::process::Command;

use poc_lab::io::{read_checkpoint, report, run_experiment, sweep_config, ExperimentConfig, Manifest, Pipeline};
use poc_lab::Error;

fn config(pipeline: &str, out: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        r#"
name = "small"
pipeline = "{pipeline}"
widths = [8, 16]
proxy_width = 32
output_dir = "{}"
{extra}

[problem]
preset = "he4"
d = 6

[schedule]
eta = 0.02
n_steps = 40
record_every = 10
mode = "population"

[seeds]
init = 5
data = 6
batch = 7
"#,
        out.display()
    );
    ExperimentConfig::from_toml(&text).unwrap()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = walk(dir)
        .into_iter()
        .map(|p| (p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out
}

#[test]
fn couple_pipeline_is_reproducible_and_fully_listed() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config("couple", &tmp.path().join("a"), "");
    let first = run_experiment(&cfg).unwrap();
    let a = snapshot(&first.dir);
    run_experiment(&cfg).unwrap();
    assert_eq!(a, snapshot(&first.dir));

    let listed: Vec<&str> = first.manifest.files.iter().map(|f| f.path.as_str()).collect();
    for (name, _) in &a {
        assert!(name == "manifest.json" || listed.contains(&name.as_str()), "{name} not in manifest");
    }
    for svg in ["risk.svg", "scaled_func_error.svg", "scaled_param_error.svg"] {
        assert!(listed.contains(&svg));
    }
    let loaded = Manifest::load(&first.dir).unwrap();
    assert_eq!(loaded.config_hash, cfg.content_hash().unwrap());
    assert_eq!(loaded.config, cfg);
}

#[test]
fn flow_pipeline_with_diagnostics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config("flow", &tmp.path().join("f"), "checkpoint_every = 20");
    cfg.diagnostics.hessians = true;
    cfg.diagnostics.j_stats = true;
    cfg.diagnostics.reduced = true;
    cfg.diagnostics.neurons = 4;
    cfg.diagnostics.j_probes = 2;
    let out = run_experiment(&cfg).unwrap();
    let names: Vec<&str> = out.manifest.files.iter().map(|f| f.path.as_str()).collect();
    for n in ["flow_m8.csv", "hessian_m16.csv", "jstats_m8.json", "reduced_m16.csv", "checkpoints/m8_step40.bin"] {
        assert!(names.contains(&n), "{n} missing from {names:?}");
    }
    let ck = read_checkpoint(&out.dir.join("checkpoints/m16_step20.bin")).unwrap();
    assert_eq!((ck.step, ck.system.m(), ck.system.d()), (20, 16, 6));
}

#[test]
fn reduce_sweep_and_potential_pipelines() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = sweep_config(&[8, 16], 4, 0.3, &tmp.path().join("r")).unwrap();
    cfg.reduced.grid = 64;
    let out = run_experiment(&cfg).unwrap();
    let csv = fs::read_to_string(out.dir.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let cfg = config("potential", &tmp.path().join("p"), "");
    let out = run_experiment(&cfg).unwrap();
    assert!(out.dir.join("lemmas.txt").exists());
    assert!(out.manifest.summary["phi"].as_f64().unwrap() > 0.0);
}

#[test]
fn report_merges_seeds_and_flags_problems() {
    let tmp = tempfile::tempdir().unwrap();
    let base = config("couple", &tmp.path().join("runs"), "");
    let dirs: Vec<_> = (1..=3)
        .map(|s| run_experiment(&base.clone().with_seed(s)).unwrap().dir)
        .collect();
    let r = report(&dirs).unwrap();
    assert_eq!(r.pipeline, Pipeline::Couple);
    assert!(!r.trivial);
    assert_eq!(r.widths.len(), 2);
    let fe = r.widths[0].scaled_func_error.unwrap();
    assert!(fe.min <= fe.mean && fe.mean <= fe.max);
    assert!(r.func_stability.unwrap() >= 1.0);

    let mut frozen = config("couple", &tmp.path().join("frozen"), "");
    frozen.schedule.eta = 0.0;
    let d = run_experiment(&frozen).unwrap().dir;
    assert!(report(&[d]).unwrap().trivial);

    fs::remove_file(dirs[1].join("coupling_m8.csv")).unwrap();
    assert!(matches!(report(&dirs), Err(Error::Format(_))));
}

#[test]
fn cli_exit_codes_and_abort_dump() {
    let tmp = tempfile::tempdir().unwrap();
    let bin = env!("CARGO_BIN_EXE_poc-lab");
    let bad = tmp.path().join("bad.toml");
    fs::write(&bad, "name = \"x\"\npipeline = \"flow\"\n").unwrap();
    assert_eq!(Command::new(bin).args(["run", bad.to_str().unwrap()]).status().unwrap().code(), Some(2));

    // A link with an overflowing coefficient drives the velocity to infinity.
    let out = tmp.path().join("abort");
    let text = format!(
        r#"
name = "blowup"
pipeline = "flow"
widths = [4]
output_dir = "{}"

[problem]
preset = "custom"

[problem.problem]
covariates = {{ gaussian_iso = {{ d = 3 }} }}
activation = {{ hermite = [0, 0, 1e200] }}
target = {{ kind = {{ single_index = {{ link = [0, 0, 1], direction = [1, 0, 0] }} }} }}

[schedule]
eta = 0.1
n_steps = 5
record_every = 1
mode = "population"

[seeds]
init = 1
data = 1
batch = 1
"#,
        out.display()
    );
    let path = tmp.path().join("blowup.toml");
    fs::write(&path, text).unwrap();
    let res = Command::new(bin).args(["run", path.to_str().unwrap()]).output().unwrap();
    assert_eq!(res.status.code(), Some(3), "{}", String::from_utf8_lossy(&res.stderr));
    assert!(out.join("abort_m4.bin").exists());
}
