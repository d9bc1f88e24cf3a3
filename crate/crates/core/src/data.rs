//! Covariate distributions, teacher targets, datasets and particle initialisation.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::kernels::{dot, LinkFunction};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovariateSpec {
    GaussianIso { d: usize },
    RademacherCube { d: usize },
}

impl CovariateSpec {
    pub fn dim(&self) -> usize {
        match *self {
            CovariateSpec::GaussianIso { d } | CovariateSpec::RademacherCube { d } => d,
        }
    }

    pub fn is_gaussian(&self) -> bool {
        matches!(self, CovariateSpec::GaussianIso { .. })
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim() < 2 {
            return Err(Error::InvalidDistribution(format!(
                "dimension {} is below 2",
                self.dim()
            )));
        }
        Ok(())
    }

    pub(crate) fn sample_into(&self, r: &mut ChaCha8Rng, x: &mut [f64]) {
        match self {
            CovariateSpec::GaussianIso { .. } => {
                x.iter_mut().for_each(|xi| *xi = r.sample(StandardNormal))
            }
            CovariateSpec::RademacherCube { .. } => x
                .iter_mut()
                .for_each(|xi| *xi = if r.gen::<bool>() { 1.0 } else { -1.0 }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Teacher {
    pub direction: Vec<f64>,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// `f*(x) = Σ a_j σ*(w*_j·x)`.
    AtomicTeachers {
        link: LinkFunction,
        teachers: Vec<Teacher>,
    },
    /// `f*(x) = σ*(w*·x)`.
    SingleIndex {
        link: LinkFunction,
        direction: Vec<f64>,
    },
    /// Teacher measure uniform on the great circle spanned by an orthonormal pair,
    /// discretised with `nodes` equally spaced atoms.
    ManifoldCircle {
        link: LinkFunction,
        basis: [Vec<f64>; 2],
        nodes: usize,
    },
    /// `f*(x) = Π_{j ∈ coords} x_j` on the hypercube.
    Parity { coords: Vec<usize> },
    /// `f*(x) = Σ_l weights[l] Π_{j ∈ coords[..levels[l]]} x_j` on the hypercube.
    Staircase {
        coords: Vec<usize>,
        levels: Vec<usize>,
        weights: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetSpec {
    pub kind: TargetKind,
    #[serde(default)]
    pub noise_std: f64,
}

/// Teacher atoms with a common link, the form every Gaussian closed form needs.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherAtoms {
    pub link: LinkFunction,
    pub directions: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

impl TargetSpec {
    pub fn noiseless(kind: TargetKind) -> Self {
        TargetSpec {
            kind,
            noise_std: 0.0,
        }
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidTarget(format!("noise_std {}", self.noise_std)));
        }
        let unit = |v: &[f64]| -> Result<()> {
            if v.len() != d {
                return Err(Error::InvalidTarget(format!(
                    "direction of length {} in dimension {d}",
                    v.len()
                )));
            }
            let n = dot(v, v).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::InvalidTarget(format!("direction has norm {n}")));
            }
            Ok(())
        };
        let coords_ok = |coords: &[usize]| -> Result<()> {
            let mut seen = coords.to_vec();
            seen.sort_unstable();
            seen.dedup();
            if coords.is_empty() || seen.len() != coords.len() || seen.iter().any(|&c| c >= d) {
                return Err(Error::InvalidTarget(format!("bad coordinate set {coords:?}")));
            }
            Ok(())
        };
        match &self.kind {
            TargetKind::AtomicTeachers { teachers, .. } => {
                if teachers.is_empty() {
                    return Err(Error::InvalidTarget("no teachers".into()));
                }
                for t in teachers {
                    unit(&t.direction)?;
                }
                let total: f64 = teachers.iter().map(|t| t.weight).sum();
                if (total - 1.0).abs() > 1e-9 {
                    return Err(Error::InvalidTarget(format!(
                        "teacher weights sum to {total}"
                    )));
                }
            }
            TargetKind::SingleIndex { direction, .. } => unit(direction)?,
            TargetKind::ManifoldCircle { basis, nodes, .. } => {
                unit(&basis[0])?;
                unit(&basis[1])?;
                if dot(&basis[0], &basis[1]).abs() > 1e-9 {
                    return Err(Error::InvalidTarget("circle basis not orthogonal".into()));
                }
                if *nodes < 3 {
                    return Err(Error::InvalidTarget("circle needs at least 3 nodes".into()));
                }
            }
            TargetKind::Parity { coords } => coords_ok(coords)?,
            TargetKind::Staircase {
                coords,
                levels,
                weights,
            } => {
                coords_ok(coords)?;
                if levels.len() != weights.len()
                    || levels.is_empty()
                    || levels.iter().any(|&l| l == 0 || l > coords.len())
                {
                    return Err(Error::InvalidTarget("bad staircase levels".into()));
                }
            }
        }
        Ok(())
    }

    /// The atomic form of a Gaussian-family target, if it has one.
    pub fn atoms(&self) -> Option<TeacherAtoms> {
        match &self.kind {
            TargetKind::AtomicTeachers { link, teachers } => Some(TeacherAtoms {
                link: link.clone(),
                directions: teachers.iter().map(|t| t.direction.clone()).collect(),
                weights: teachers.iter().map(|t| t.weight).collect(),
            }),
            TargetKind::SingleIndex { link, direction } => Some(TeacherAtoms {
                link: link.clone(),
                directions: vec![direction.clone()],
                weights: vec![1.0],
            }),
            TargetKind::ManifoldCircle { link, basis, nodes } => {
                let q = *nodes;
                let directions = (0..q)
                    .map(|j| {
                        let th = std::f64::consts::TAU * j as f64 / q as f64;
                        basis[0]
                            .iter()
                            .zip(&basis[1])
                            .map(|(u, v)| th.cos() * u + th.sin() * v)
                            .collect()
                    })
                    .collect();
                Some(TeacherAtoms {
                    link: link.clone(),
                    directions,
                    weights: vec![1.0 / q as f64; q],
                })
            }
            TargetKind::Parity { .. } | TargetKind::Staircase { .. } => None,
        }
    }
}

/// Noiseless target value `f*(x)`.
pub fn eval_target(target: &TargetSpec, x: &[f64]) -> f64 {
    let parity = |coords: &[usize]| coords.iter().map(|&j| x[j]).product::<f64>();
    match &target.kind {
        TargetKind::Parity { coords } => parity(coords),
        TargetKind::Staircase {
            coords,
            levels,
            weights,
        } => levels
            .iter()
            .zip(weights)
            .map(|(&l, &a)| a * parity(&coords[..l]))
            .sum(),
        _ => {
            let atoms = target.atoms().expect("gaussian family has atoms");
            atoms
                .directions
                .iter()
                .zip(&atoms.weights)
                .map(|(w, a)| a * atoms.link.eval(dot(w, x)))
                .sum()
        }
    }
}

/// Row-major samples `xs` (`n × d`) with labels `ys`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub d: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    pub seed: u64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.xs[i * self.d..(i + 1) * self.d]
    }
}

/// Draws `n` labelled samples; sample `i` depends only on `(seed, i)`.
pub fn sample_dataset(
    cov: &CovariateSpec,
    target: &TargetSpec,
    n: usize,
    seed: u64,
) -> Result<Dataset> {
    cov.validate()?;
    let d = cov.dim();
    target.validate(d)?;
    if matches!(
        target.kind,
        TargetKind::Parity { .. } | TargetKind::Staircase { .. }
    ) != !cov.is_gaussian()
    {
        return Err(Error::InvalidTarget(
            "Boolean targets need hypercube covariates and vice versa".into(),
        ));
    }
    let blocks = n.div_ceil(rng::BLOCK);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, rng::DATA, b as u64);
            let len = rng::BLOCK.min(n - b * rng::BLOCK);
            let mut xs = vec![0.0; len * d];
            let mut ys = Vec::with_capacity(len);
            for x in xs.chunks_exact_mut(d) {
                cov.sample_into(&mut r, x);
                let noise: f64 = if target.noise_std > 0.0 {
                    target.noise_std * r.sample::<f64, _>(StandardNormal)
                } else {
                    0.0
                };
                ys.push(eval_target(target, x) + noise);
            }
            (xs, ys)
        })
        .collect();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for (x, y) in parts {
        xs.extend(x);
        ys.extend(y);
    }
    Ok(Dataset { d, xs, ys, seed })
}

/// Second-layer weights held fixed during training.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SecondLayerSpec {
    Ones,
    /// Independent uniform signs times `magnitude`.
    Signed { magnitude: f64 },
}

impl Default for SecondLayerSpec {
    fn default() -> Self {
        SecondLayerSpec::Ones
    }
}

/// `2^k / sqrt(k)`, the second-layer scale used for degree-`k` Boolean targets.
pub fn boolean_second_layer_magnitude(k: usize) -> f64 {
    2f64.powi(k as i32) / (k as f64).sqrt()
}

/// Uniform points on the sphere; row `i` depends only on `(seed, i)`, so a
/// smaller width is always a prefix of a larger one.
pub fn init_weights(d: usize, m: usize, seed: u64) -> Result<Vec<f64>> {
    if d < 2 || m == 0 {
        return Err(Error::InvalidArgument(format!("d={d}, m={m}")));
    }
    let rows: Vec<Vec<f64>> = (0..m)
        .into_par_iter()
        .map(|i| {
            let mut r = rng::stream(seed, rng::INIT_ROWS, i as u64);
            loop {
                let v: Vec<f64> = (0..d).map(|_| r.sample(StandardNormal)).collect();
                let n = dot(&v, &v).sqrt();
                if n > 1e-12 {
                    return v.into_iter().map(|x| x / n).collect();
                }
            }
        })
        .collect();
    Ok(rows.concat())
}

/// Second-layer values for `m` particles; prefix-stable like [`init_weights`].
pub fn init_second_layer(spec: &SecondLayerSpec, m: usize, seed: u64) -> Option<Vec<f64>> {
    match *spec {
        SecondLayerSpec::Ones => None,
        SecondLayerSpec::Signed { magnitude } => Some(
            (0..m)
                .map(|i| {
                    let mut r = rng::stream(seed, rng::INIT_SIGNS, i as u64);
                    if r.gen::<bool>() {
                        magnitude
                    } else {
                        -magnitude
                    }
                })
                .collect(),
        ),
    }
}

/// `k` independent uniform unit vectors in the span of the first `span` coordinates of `R^d`.
pub fn random_directions(d: usize, span: usize, k: usize, seed: u64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|i| {
            let mut r = rng::stream(seed, rng::PROBE, i as u64);
            let mut v = vec![0.0; d];
            v[..span]
                .iter_mut()
                .for_each(|x| *x = r.sample(StandardNormal));
            let n = dot(&v, &v).sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            v
        })
        .collect()
}

/// The `j`-th standard basis vector of `R^d`.
pub fn basis_vector(d: usize, j: usize) -> Vec<f64> {
    let mut e = vec![0.0; d];
    e[j] = 1.0;
    e
}

const DATASET_MAGIC: &[u8; 4] = b"PCDS";
const FORMAT_VERSION: u32 = 1;

/// Little-endian binary: `magic, version, n, d` (u32 each), then `xs`, then `ys`.
pub fn write_dataset_bin(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DATASET_MAGIC)?;
    for v in [FORMAT_VERSION, ds.len() as u32, ds.d as u32] {
        w.write_all(&v.to_le_bytes())?;
    }
    for v in ds.xs.iter().chain(&ds.ys) {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset_bin(path: &Path, seed: u64) -> Result<Dataset> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 16];
    r.read_exact(&mut header)?;
    if &header[..4] != DATASET_MAGIC {
        return Err(Error::Format("not a dataset file".into()));
    }
    let field = |k: usize| u32::from_le_bytes(header[4 * k..4 * k + 4].try_into().unwrap());
    if field(1) != FORMAT_VERSION {
        return Err(Error::Format(format!("dataset version {}", field(1))));
    }
    let (n, d) = (field(2) as usize, field(3) as usize);
    let mut body = Vec::new();
    r.read_to_end(&mut body)?;
    if body.len() != 8 * n * (d + 1) {
        return Err(Error::Format("dataset body has the wrong length".into()));
    }
    let vals: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Dataset {
        d,
        xs: vals[..n * d].to_vec(),
        ys: vals[n * d..].to_vec(),
        seed,
    })
}

/// CSV with columns `x0..x{d-1},y`.
pub fn write_dataset_csv(ds: &Dataset, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..ds.d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    w.write_record(&header)?;
    for i in 0..ds.len() {
        let mut rec: Vec<String> = ds.row(i).iter().map(|v| crate::io::fmt_f64(*v)).collect();
        rec.push(crate::io::fmt_f64(ds.ys[i]));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn he4_target(d: usize) -> TargetSpec {
        TargetSpec::noiseless(TargetKind::SingleIndex {
            link: LinkFunction::he(4).unwrap(),
            direction: basis_vector(d, 0),
        })
    }

    #[test]
    fn init_is_prefix_stable() {
        let big = init_weights(16, 64, 7).unwrap();
        let small = init_weights(16, 8, 7).unwrap();
        assert_eq!(&big[..8 * 16], &small[..]);
        let sb = init_second_layer(&SecondLayerSpec::Signed { magnitude: 8.0 }, 64, 7).unwrap();
        let ss = init_second_layer(&SecondLayerSpec::Signed { magnitude: 8.0 }, 8, 7).unwrap();
        assert_eq!(&sb[..8], &ss[..]);
    }

    #[test]
    fn init_rows_are_unit() {
        let w = init_weights(5, 100, 1).unwrap();
        for row in w.chunks(5) {
            assert!((dot(row, row) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn dataset_is_deterministic_and_labelled_by_target() {
        let cov = CovariateSpec::GaussianIso { d: 4 };
        let t = he4_target(4);
        let a = sample_dataset(&cov, &t, 3000, 5).unwrap();
        let b = sample_dataset(&cov, &t, 3000, 5).unwrap();
        assert_eq!(a, b);
        for i in 0..a.len() {
            let x0 = a.row(i)[0];
            let he4 = x0.powi(4) - 6.0 * x0 * x0 + 3.0;
            assert!((a.ys[i] - he4).abs() < 1e-9 * he4.abs().max(1.0));
        }
        let c = sample_dataset(&cov, &t, 3000, 6).unwrap();
        assert_ne!(a.xs, c.xs);
    }

    #[test]
    fn boolean_targets() {
        let x = [1.0, -1.0, -1.0, 1.0, -1.0];
        let xor = TargetSpec::noiseless(TargetKind::Parity {
            coords: vec![0, 1, 2, 3],
        });
        assert_eq!(eval_target(&xor, &x), 1.0);
        let stair = TargetSpec::noiseless(TargetKind::Staircase {
            coords: vec![0, 1, 2, 3],
            levels: vec![1, 4],
            weights: vec![0.25, 0.75],
        });
        assert_eq!(eval_target(&stair, &x), 1.0);
        let x2 = [-1.0, -1.0, -1.0, 1.0, 1.0];
        assert_eq!(eval_target(&stair, &x2), -0.25 - 0.75);
        assert!(stair.validate(5).is_ok());
        assert!(stair.validate(3).is_err());
    }

    #[test]
    fn mismatched_covariates_are_rejected() {
        let xor = TargetSpec::noiseless(TargetKind::Parity { coords: vec![0, 1] });
        assert!(sample_dataset(&CovariateSpec::GaussianIso { d: 4 }, &xor, 10, 0).is_err());
        assert!(sample_dataset(&CovariateSpec::RademacherCube { d: 4 }, &he4_target(4), 10, 0).is_err());
    }

    #[test]
    fn target_validation() {
        let bad = TargetSpec::noiseless(TargetKind::SingleIndex {
            link: LinkFunction::he(4).unwrap(),
            direction: vec![1.0, 1.0],
        });
        assert!(bad.validate(2).is_err());
        let teachers = TargetSpec::noiseless(TargetKind::AtomicTeachers {
            link: LinkFunction::he(4).unwrap(),
            teachers: vec![
                Teacher {
                    direction: basis_vector(3, 0),
                    weight: 0.5,
                },
                Teacher {
                    direction: basis_vector(3, 1),
                    weight: 0.25,
                },
            ],
        });
        assert!(teachers.validate(3).is_err());
    }

    #[test]
    fn circle_atoms_lie_on_the_circle() {
        let t = TargetSpec::noiseless(TargetKind::ManifoldCircle {
            link: LinkFunction::he(4).unwrap(),
            basis: [basis_vector(3, 0), basis_vector(3, 1)],
            nodes: 256,
        });
        let atoms = t.atoms().unwrap();
        assert_eq!(atoms.directions.len(), 256);
        assert!((atoms.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for w in &atoms.directions {
            assert!((dot(w, w) - 1.0).abs() < 1e-12);
            assert_eq!(w[2], 0.0);
        }
    }

    #[test]
    fn dataset_binary_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let cov = CovariateSpec::GaussianIso { d: 3 };
        let ds = sample_dataset(&cov, &he4_target(3), 50, 1).unwrap();
        let p = dir.path().join("ds.bin");
        write_dataset_bin(&ds, &p).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 16 + 8 * 50 * 4);
        assert_eq!(read_dataset_bin(&p, 1).unwrap(), ds);
        let c = dir.path().join("ds.csv");
        write_dataset_csv(&ds, &c).unwrap();
        let text = std::fs::read_to_string(&c).unwrap();
        assert!(text.starts_with("x0,x1,x2,y\n"));
        assert_eq!(text.lines().count(), 51);
    }

    #[test]
    fn random_directions_stay_in_span() {
        let dirs = random_directions(64, 6, 6, 3);
        for v in &dirs {
            assert!((dot(v, v) - 1.0).abs() < 1e-12);
            assert!(v[6..].iter().all(|&x| x == 0.0));
        }
    }
}
