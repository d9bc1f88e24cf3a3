//! Experiment configuration, persistence and the named pipelines behind the CLI.

mod checkpoint;
mod pipeline;
mod report;
pub mod svg;

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{
    basis_vector, boolean_second_layer_magnitude, random_directions, CovariateSpec, SecondLayerSpec,
    TargetKind, TargetSpec, Teacher,
};
use crate::dynamics::{FlowSchedule, Problem};
use crate::kernels::{Activation, LinkFunction};
use crate::{Error, Result};

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint};
pub use pipeline::{run_experiment, sweep_config, RunOutcome};
pub use report::{report, Report, Spread, WidthSummary};

/// Fixed 17-significant-digit rendering used in every CSV.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Named problems from the experiment zoo, or a fully explicit one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemConfig {
    /// `He_4` single index along `e_1`, `He_4` network.
    He4 { d: usize },
    /// Target `0.8 He_4 + 0.6 He_6` along `e_1`, network `He_4 + He_6`.
    Misspecified { d: usize },
    /// `He_4` teachers evenly spaced on the circle in the first two coordinates.
    Circle {
        d: usize,
        #[serde(default = "default_circle_nodes")]
        nodes: usize,
    },
    /// `k` random `He_4` teachers in the span of the first `k` coordinates.
    RandomTeachers {
        d: usize,
        #[serde(default = "default_teachers")]
        k: usize,
        #[serde(default)]
        seed: u64,
    },
    /// `0.25 x_1 + 0.75 x_1 x_2 x_3 x_4` on the hypercube, softplus network.
    Staircase { d: usize },
    /// `x_1 x_2 x_3 x_4` on the hypercube, softplus network.
    Xor4 { d: usize },
    Custom { problem: Problem },
}

fn default_circle_nodes() -> usize {
    64
}

fn default_teachers() -> usize {
    6
}

/// Softplus temperature of the Boolean problems.
pub const SOFTPLUS_TEMP: f64 = 16.0;

impl ProblemConfig {
    pub fn build(&self) -> Result<Problem> {
        let he4 = || LinkFunction::he(4);
        let gaussian = |d| CovariateSpec::GaussianIso { d };
        let problem = match self {
            ProblemConfig::He4 { d } => Problem {
                covariates: gaussian(*d),
                target: TargetSpec::noiseless(TargetKind::SingleIndex {
                    link: he4()?,
                    direction: basis_vector(*d, 0),
                }),
                activation: Activation::Hermite(he4()?),
                second_layer: SecondLayerSpec::Ones,
            },
            ProblemConfig::Misspecified { d } => Problem {
                covariates: gaussian(*d),
                target: TargetSpec::noiseless(TargetKind::SingleIndex {
                    link: LinkFunction::new(vec![0.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.6])?,
                    direction: basis_vector(*d, 0),
                }),
                activation: Activation::Hermite(LinkFunction::new(vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 1.0])?),
                second_layer: SecondLayerSpec::Ones,
            },
            ProblemConfig::Circle { d, nodes } => Problem {
                covariates: gaussian(*d),
                target: TargetSpec::noiseless(TargetKind::ManifoldCircle {
                    link: he4()?,
                    basis: [basis_vector(*d, 0), basis_vector(*d, 1)],
                    nodes: *nodes,
                }),
                activation: Activation::Hermite(he4()?),
                second_layer: SecondLayerSpec::Ones,
            },
            ProblemConfig::RandomTeachers { d, k, seed } => {
                if k > d {
                    return Err(Error::InvalidConfig(format!("{k} teachers in dimension {d}")));
                }
                let teachers = random_directions(*d, *k, *k, *seed)
                    .into_iter()
                    .map(|direction| Teacher {
                        direction,
                        weight: 1.0 / *k as f64,
                    })
                    .collect();
                Problem {
                    covariates: gaussian(*d),
                    target: TargetSpec::noiseless(TargetKind::AtomicTeachers {
                        link: he4()?,
                        teachers,
                    }),
                    activation: Activation::Hermite(he4()?),
                    second_layer: SecondLayerSpec::Ones,
                }
            }
            ProblemConfig::Staircase { d } => Problem {
                covariates: CovariateSpec::RademacherCube { d: *d },
                target: TargetSpec::noiseless(TargetKind::Staircase {
                    coords: vec![0, 1, 2, 3],
                    levels: vec![1, 4],
                    weights: vec![0.25, 0.75],
                }),
                activation: Activation::Softplus { temp: SOFTPLUS_TEMP },
                second_layer: SecondLayerSpec::Signed {
                    magnitude: boolean_second_layer_magnitude(4),
                },
            },
            ProblemConfig::Xor4 { d } => Problem {
                covariates: CovariateSpec::RademacherCube { d: *d },
                target: TargetSpec::noiseless(TargetKind::Parity {
                    coords: vec![0, 1, 2, 3],
                }),
                activation: Activation::Softplus { temp: SOFTPLUS_TEMP },
                second_layer: SecondLayerSpec::Signed {
                    magnitude: boolean_second_layer_magnitude(4),
                },
            },
            ProblemConfig::Custom { problem } => problem.clone(),
        };
        problem.validate()?;
        Ok(problem)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pipeline {
    Flow,
    Couple,
    Reduce,
    Potential,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Seeds {
    pub init: u64,
    pub data: u64,
    pub batch: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagnosticsConfig {
    /// Local Hessian spectra along the flow.
    pub hessians: bool,
    /// Stability-matrix statistics.
    pub j_stats: bool,
    /// Reduced alignment model started from the simulator's own alignments.
    pub reduced: bool,
    /// Neurons sampled by the Hessian and stability probes.
    pub neurons: usize,
    /// Steps between Hessian samples.
    pub every: usize,
    /// Ball radius around the teachers.
    pub tau: f64,
    /// Source steps and targets per source of the stability grid.
    pub j_sources: usize,
    pub j_targets: usize,
    pub j_probes: usize,
}

impl Default for DiagnosticsConfig {
    fn default() -> Self {
        DiagnosticsConfig {
            hessians: false,
            j_stats: false,
            reduced: false,
            neurons: 32,
            every: 10,
            tau: 0.2,
            j_sources: 4,
            j_targets: 4,
            j_probes: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReducedSection {
    pub eta: f64,
    pub delta: f64,
    pub max_steps: usize,
    pub record_every: usize,
    /// Number of quantile-grid particles.
    pub grid: usize,
    /// Extra dimensions for a `T(δ)` sweep.
    pub sweep_dims: Vec<usize>,
}

impl Default for ReducedSection {
    fn default() -> Self {
        let base = crate::reduced::ReducedConfig::default();
        ReducedSection {
            eta: base.eta,
            delta: base.delta,
            max_steps: base.max_steps,
            record_every: base.record_every,
            grid: 1024,
            sweep_dims: Vec::new(),
        }
    }
}

impl ReducedSection {
    pub fn config(&self) -> crate::reduced::ReducedConfig {
        crate::reduced::ReducedConfig {
            eta: self.eta,
            delta: self.delta,
            max_steps: self.max_steps,
            record_every: self.record_every,
        }
    }
}

/// A complete, reproducible experiment description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub pipeline: Pipeline,
    pub problem: ProblemConfig,
    #[serde(default)]
    pub widths: Vec<usize>,
    /// Mean-field proxy width; defaults to four times the largest width.
    #[serde(default)]
    pub proxy_width: Option<usize>,
    pub schedule: FlowSchedule,
    #[serde(default)]
    pub diagnostics: DiagnosticsConfig,
    #[serde(default)]
    pub reduced: ReducedSection,
    pub seeds: Seeds,
    /// Steps between binary checkpoints of the flow pipeline; 0 disables them.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidConfig("empty name".into()));
        }
        self.problem.build()?;
        self.schedule.validate()?;
        if self.pipeline != Pipeline::Reduce && self.widths.is_empty() {
            return Err(Error::InvalidConfig("no widths".into()));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("zero width".into()));
        }
        let top = self.widths.iter().copied().max().unwrap_or(0);
        if let Some(m) = self.proxy_width {
            if m < top {
                return Err(Error::InvalidConfig(format!("proxy width {m} below width {top}")));
            }
        }
        if self.diagnostics.every == 0 {
            return Err(Error::InvalidConfig("diagnostics.every = 0".into()));
        }
        self.reduced.config().validate()?;
        Ok(())
    }

    pub fn proxy_width(&self) -> usize {
        self.proxy_width
            .unwrap_or(4 * self.widths.iter().copied().max().unwrap_or(0))
    }

    /// Replaces every seed and moves the output into a per-seed subdirectory.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seeds = Seeds {
            init: seed,
            data: seed,
            batch: seed,
        };
        self.output_dir = self.output_dir.join(format!("seed{seed}"));
        self
    }

    /// SHA-256 of the canonical JSON rendering.
    pub fn content_hash(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// One output file listed in the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub pipeline: Pipeline,
    pub config_hash: String,
    pub crate_version: String,
    pub config: ExperimentConfig,
    pub files: Vec<ManifestEntry>,
    /// Problem-specific summary numbers.
    pub summary: serde_json::Value,
}

pub const MANIFEST: &str = "manifest.json";

impl Manifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        if !path.exists() {
            return Err(Error::Format(format!("{} has no {MANIFEST}", dir.display())));
        }
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

/// Collects output files so every artifact ends up in the manifest.
pub(crate) struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
}

impl OutputDir {
    pub(crate) fn create(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        Ok(OutputDir {
            root: root.to_path_buf(),
            files: Vec::new(),
        })
    }

    pub(crate) fn register(&mut self, rel: &str) {
        self.files.push(rel.to_string());
    }

    pub(crate) fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string());
        Ok(p)
    }

    pub(crate) fn write(&mut self, rel: &str, contents: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(p, contents)?;
        Ok(())
    }

    pub(crate) fn write_csv(&mut self, rel: &str, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
        let p = self.path(rel)?;
        let mut w = csv::Writer::from_path(p)?;
        w.write_record(header)?;
        for r in rows {
            w.write_record(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub(crate) fn finish(self, cfg: &ExperimentConfig, summary: serde_json::Value) -> Result<Manifest> {
        let mut files = Vec::new();
        for rel in &self.files {
            let bytes = fs::read(self.root.join(rel))?;
            files.push(ManifestEntry {
                path: rel.clone(),
                sha256: sha256_hex(&bytes),
            });
        }
        let manifest = Manifest {
            name: cfg.name.clone(),
            pipeline: cfg.pipeline,
            config_hash: cfg.content_hash()?,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            config: cfg.clone(),
            files,
            summary,
        };
        fs::write(
            self.root.join(MANIFEST),
            serde_json::to_string_pretty(&manifest)?,
        )?;
        Ok(manifest)
    }
}

pub(crate) fn fmt_row(values: &[f64]) -> Vec<String> {
    values.iter().map(|v| fmt_f64(*v)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const HE4: &str = r#"
name = "he4"
pipeline = "couple"
widths = [16, 32]
output_dir = "out"

[problem]
preset = "he4"
d = 8

[schedule]
eta = 0.01
n_steps = 10
record_every = 5
mode = "population"

[seeds]
init = 1
data = 2
batch = 3
"#;

    #[test]
    fn parses_and_defaults() {
        let cfg = ExperimentConfig::from_toml(HE4).unwrap();
        assert_eq!(cfg.proxy_width(), 128);
        assert_eq!(cfg.problem.build().unwrap().d(), 8);
        assert!(!cfg.diagnostics.hessians);
        let seeded = cfg.clone().with_seed(9);
        assert_eq!(seeded.seeds.batch, 9);
        assert!(seeded.output_dir.ends_with("seed9"));
        assert_ne!(cfg.content_hash().unwrap(), seeded.content_hash().unwrap());
    }

    #[test]
    fn rejects_bad_configs() {
        let unknown = HE4.replace("widths", "widthz");
        assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::TomlDe(_))));
        let no_seeds = HE4.replace("[seeds]\ninit = 1\ndata = 2\nbatch = 3\n", "");
        assert!(ExperimentConfig::from_toml(&no_seeds).is_err());
        let bad_eta = HE4.replace("eta = 0.01", "eta = 2.0");
        let err = ExperimentConfig::from_toml(&bad_eta).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        let small_proxy = HE4.replace("widths = [16, 32]", "widths = [16, 32]\nproxy_width = 20");
        assert!(ExperimentConfig::from_toml(&small_proxy).is_err());
    }

    #[test]
    fn every_preset_builds() {
        let presets = [
            ProblemConfig::He4 { d: 8 },
            ProblemConfig::Misspecified { d: 8 },
            ProblemConfig::Circle { d: 8, nodes: 16 },
            ProblemConfig::RandomTeachers { d: 8, k: 6, seed: 0 },
            ProblemConfig::Staircase { d: 8 },
            ProblemConfig::Xor4 { d: 8 },
        ];
        for p in &presets {
            let problem = p.build().unwrap();
            assert_eq!(problem.d(), 8);
            let gaussian = problem.covariates.is_gaussian();
            assert_eq!(problem.closed_form().is_ok(), gaussian, "{p:?}");
        }
        assert!(ProblemConfig::RandomTeachers { d: 4, k: 6, seed: 0 }.build().is_err());
    }

    #[test]
    fn floats_keep_seventeen_digits() {
        let x = 0.1 + 0.2;
        assert_eq!(fmt_f64(x).parse::<f64>().unwrap(), x);
        assert_eq!(fmt_f64(1.0), "1.0000000000000000e0");
    }
}
