//! Hermite links, their closed-form pair kernels, and Monte-Carlo fallbacks.
//!
//! For a link `σ = Σ c_k He_k` and unit vectors `w, w'` under isotropic
//! Gaussian covariates, `E σ(w·x) σ(w'·x) = Σ k! c_k² (w·w')^k`. The
//! derivative kernels follow by formal differentiation in `z = w·w'`.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::CovariateSpec;
use crate::{rng, Error, Result};

/// Largest Hermite order accepted by [`hermite`].
pub const MAX_HERMITE_ORDER: usize = 64;
/// Largest link degree; `k!` stays exact in `f64` up to here.
pub const MAX_LINK_DEGREE: usize = 20;

/// Probabilists' Hermite polynomial `He_k(z)`.
///
/// ```
/// use poc_lab::kernels::hermite;
/// assert_eq!(hermite(4, 0.0).unwrap(), 3.0);
/// assert!((hermite(4, 2f64.sqrt()).unwrap() + 5.0).abs() < 1e-12);
/// ```
pub fn hermite(k: usize, z: f64) -> Result<f64> {
    if k > MAX_HERMITE_ORDER {
        return Err(Error::DegreeTooLarge {
            order: k,
            max: MAX_HERMITE_ORDER,
        });
    }
    let (mut prev, mut cur) = (1.0, z);
    if k == 0 {
        return Ok(prev);
    }
    for j in 1..k {
        let next = z * cur - j as f64 * prev;
        prev = cur;
        cur = next;
    }
    Ok(cur)
}

fn hermite_table(kmax: usize, z: f64, out: &mut [f64]) {
    out[0] = 1.0;
    if kmax >= 1 {
        out[1] = z;
    }
    for j in 1..kmax {
        out[j + 1] = z * out[j] - j as f64 * out[j - 1];
    }
}

pub(crate) fn factorial(k: usize) -> f64 {
    (1..=k).fold(1.0, |acc, j| acc * j as f64)
}

/// A polynomial link `σ(z) = Σ_k c_k He_k(z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct LinkFunction {
    coeffs: Vec<f64>,
    /// Power-basis coefficients of `σ, σ', σ'', σ'''`.
    #[serde(skip)]
    power: [Vec<f64>; 4],
}

impl TryFrom<Vec<f64>> for LinkFunction {
    type Error = Error;
    fn try_from(coeffs: Vec<f64>) -> Result<Self> {
        LinkFunction::new(coeffs)
    }
}

/// Links up to this degree are evaluated by Horner's rule in the power basis.
const POWER_BASIS_MAX_DEGREE: usize = 10;

impl From<LinkFunction> for Vec<f64> {
    fn from(link: LinkFunction) -> Self {
        link.coeffs
    }
}

impl LinkFunction {
    /// Trailing zero coefficients are dropped.
    pub fn new(mut coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(Error::InvalidLink("non-finite coefficient".into()));
        }
        while coeffs.last() == Some(&0.0) {
            coeffs.pop();
        }
        if coeffs.len() <= 1 {
            return Err(Error::InvalidLink(
                "link needs a non-zero coefficient of order at least 1".into(),
            ));
        }
        if coeffs.len() - 1 > MAX_LINK_DEGREE {
            return Err(Error::DegreeTooLarge {
                order: coeffs.len() - 1,
                max: MAX_LINK_DEGREE,
            });
        }
        let mut power = [vec![0.0; coeffs.len()], Vec::new(), Vec::new(), Vec::new()];
        let (mut prev, mut cur) = (vec![1.0], vec![0.0, 1.0]);
        for (k, &c) in coeffs.iter().enumerate() {
            let he = if k == 0 { &prev } else { &cur };
            for (j, h) in he.iter().enumerate() {
                power[0][j] += c * h;
            }
            if k >= 1 {
                // He_{k+1} = z He_k − k He_{k−1}
                let mut next = vec![0.0; cur.len() + 1];
                for (j, h) in cur.iter().enumerate() {
                    next[j + 1] += h;
                }
                for (j, h) in prev.iter().enumerate() {
                    next[j] -= k as f64 * h;
                }
                prev = std::mem::replace(&mut cur, next);
            }
        }
        for o in 1..4 {
            power[o] = power[o - 1]
                .iter()
                .enumerate()
                .skip(1)
                .map(|(j, a)| j as f64 * a)
                .collect();
        }
        Ok(LinkFunction { coeffs, power })
    }

    /// The single Hermite polynomial `He_k`.
    pub fn he(k: usize) -> Result<Self> {
        let mut coeffs = vec![0.0; k + 1];
        coeffs[k] = 1.0;
        LinkFunction::new(coeffs)
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn degree(&self) -> usize {
        self.coeffs.len() - 1
    }

    /// Smallest `k ≥ 1` with `c_k ≠ 0`.
    pub fn information_exponent(&self) -> usize {
        (1..self.coeffs.len())
            .find(|&k| self.coeffs[k] != 0.0)
            .expect("constructor guarantees a non-zero coefficient")
    }

    /// True when every odd coefficient vanishes, so `σ(−z) = σ(z)`.
    pub fn is_even(&self) -> bool {
        self.coeffs.iter().skip(1).step_by(2).all(|&c| c == 0.0)
    }

    /// `σ^{(order)}(z)` for `order ≤ 3`.
    pub fn eval_derivative(&self, order: usize, z: f64) -> f64 {
        if self.degree() <= POWER_BASIS_MAX_DEGREE {
            return self.power[order].iter().rev().fold(0.0, |acc, &a| acc * z + a);
        }
        self.eval_derivative_recurrence(order, z)
    }

    /// Same as [`LinkFunction::eval_derivative`] through `He_k' = k He_{k−1}`.
    pub fn eval_derivative_recurrence(&self, order: usize, z: f64) -> f64 {
        let kmax = self.degree();
        let mut he = [0.0; MAX_LINK_DEGREE + 1];
        hermite_table(kmax, z, &mut he);
        let mut acc = 0.0;
        for k in order..=kmax {
            let falling = ((k + 1 - order)..=k).fold(1.0, |a, j| a * j as f64);
            acc += self.coeffs[k] * falling * he[k - order];
        }
        acc
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.eval_derivative(0, z)
    }
}

/// A power series `q(z) = Σ_k a_k z^k` in the inner product `z = w·w'`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairKernel {
    coeffs: Vec<f64>,
}

impl PairKernel {
    pub fn from_coeffs(coeffs: Vec<f64>) -> Self {
        PairKernel { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.coeffs.iter().rev().fold(0.0, |acc, &a| acc * z + a)
    }

    pub fn derivative(&self) -> PairKernel {
        let coeffs = self
            .coeffs
            .iter()
            .enumerate()
            .skip(1)
            .map(|(k, &a)| k as f64 * a)
            .collect();
        PairKernel { coeffs }
    }
}

/// `q_σ(z) = Σ k! c_k² z^k`.
///
/// ```
/// use poc_lab::kernels::{pair_kernel_sigma, LinkFunction};
/// let link = LinkFunction::new(vec![0.0, 0.0, 0.0, 0.0, 0.8, 0.0, 0.6]).unwrap();
/// assert!((pair_kernel_sigma(&link).eval(1.0) - 274.56).abs() < 1e-9);
/// ```
pub fn pair_kernel_sigma(link: &LinkFunction) -> PairKernel {
    cross_pair_kernel(link, link)
}

/// `q_{σ'}(z) = Σ_k c_{k+1}² (k+1)(k+1)! z^k`, the derivative of `q_σ`.
pub fn pair_kernel_dsigma(link: &LinkFunction) -> PairKernel {
    pair_kernel_sigma(link).derivative()
}

/// `q_{σ''}`, the derivative of `q_{σ'}`.
pub fn pair_kernel_ddsigma(link: &LinkFunction) -> PairKernel {
    pair_kernel_dsigma(link).derivative()
}

/// `E σ_a(w·x) σ_b(w'·x) = Σ k! a_k b_k z^k` for two different links.
pub fn cross_pair_kernel(a: &LinkFunction, b: &LinkFunction) -> PairKernel {
    let n = a.coeffs.len().min(b.coeffs.len());
    let coeffs = (0..n)
        .map(|k| factorial(k) * a.coeffs[k] * b.coeffs[k])
        .collect();
    PairKernel { coeffs }
}

/// Network activation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Hermite(LinkFunction),
    /// `(1/τ) log(1 + exp(τ z))`.
    Softplus { temp: f64 },
}

impl Activation {
    pub fn validate(&self) -> Result<()> {
        match self {
            Activation::Hermite(_) => Ok(()),
            Activation::Softplus { temp } if temp.is_finite() && *temp > 0.0 => Ok(()),
            Activation::Softplus { temp } => {
                Err(Error::InvalidLink(format!("softplus temperature {temp}")))
            }
        }
    }

    pub fn link(&self) -> Option<&LinkFunction> {
        match self {
            Activation::Hermite(link) => Some(link),
            Activation::Softplus { .. } => None,
        }
    }

    pub fn is_even(&self) -> bool {
        self.link().is_some_and(LinkFunction::is_even)
    }

    /// `σ^{(order)}(z)` for `order ≤ 3`.
    pub fn eval_derivative(&self, order: usize, z: f64) -> f64 {
        match self {
            Activation::Hermite(link) => link.eval_derivative(order, z),
            Activation::Softplus { temp } => {
                let t = *temp;
                let s = logistic(t * z);
                match order {
                    0 => {
                        let u = t * z;
                        (u.max(0.0) + (-u.abs()).exp().ln_1p()) / t
                    }
                    1 => s,
                    2 => t * s * (1.0 - s),
                    _ => t * t * s * (1.0 - s) * (1.0 - 2.0 * s),
                }
            }
        }
    }

    pub fn eval(&self, z: f64) -> f64 {
        self.eval_derivative(0, z)
    }

    pub fn eval_d1(&self, z: f64) -> f64 {
        self.eval_derivative(1, z)
    }
}

fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Which pair moment a Monte-Carlo estimate targets.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PairMoment {
    /// `E σ(w·x) σ(v·x)`
    Sigma,
    /// `E σ'(w·x) σ'(v·x)`
    DSigma,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    /// Number of independent terms averaged (antithetic pairs count once).
    pub terms: usize,
}

/// Monte-Carlo estimate of a pair moment under `cov`.
///
/// For even Hermite links the draws are antithetic pairs `(x, −x)`.
pub fn mc_pair_expectation(
    act: &Activation,
    cov: &CovariateSpec,
    w: &[f64],
    v: &[f64],
    moment: PairMoment,
    n: usize,
    seed: u64,
) -> Result<McEstimate> {
    cov.validate()?;
    act.validate()?;
    let d = cov.dim();
    if w.len() != d || v.len() != d {
        return Err(Error::InvalidDistribution(format!(
            "vectors of length {}/{} under a {d}-dimensional distribution",
            w.len(),
            v.len()
        )));
    }
    if n < 4 {
        return Err(Error::InvalidArgument("need at least 4 samples".into()));
    }
    let antithetic = act.is_even();
    let terms = if antithetic { n / 2 } else { n };
    let order = match moment {
        PairMoment::Sigma => 0,
        PairMoment::DSigma => 1,
    };
    let g = |x: &[f64]| {
        let (a, b) = (dot(w, x), dot(v, x));
        act.eval_derivative(order, a) * act.eval_derivative(order, b)
    };
    let blocks = terms.div_ceil(rng::BLOCK);
    let partial: Vec<(f64, f64)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, rng::MONTE_CARLO, b as u64);
            let len = rng::BLOCK.min(terms - b * rng::BLOCK);
            let mut x = vec![0.0; d];
            let (mut s1, mut s2) = (0.0, 0.0);
            for _ in 0..len {
                cov.sample_into(&mut r, &mut x);
                let mut val = g(&x);
                if antithetic {
                    x.iter_mut().for_each(|xi| *xi = -*xi);
                    val = 0.5 * (val + g(&x));
                }
                s1 += val;
                s2 += val * val;
            }
            (s1, s2)
        })
        .collect();
    let (s1, s2) = partial
        .iter()
        .fold((0.0, 0.0), |(a, b), (c, e)| (a + c, b + e));
    let nt = terms as f64;
    let mean = s1 / nt;
    let var = ((s2 - nt * mean * mean) / (nt - 1.0)).max(0.0);
    Ok(McEstimate {
        mean,
        std_err: (var / nt).sqrt(),
        terms,
    })
}

/// Empirical regularity constant `11 · max_{j≤3} (E|σ^{(j)}(X)|⁵)^{1/5}` for `X ~ N(0,1)`.
pub fn creg_estimate(act: &Activation, n: usize, seed: u64) -> Result<f64> {
    act.validate()?;
    let blocks = n.div_ceil(rng::BLOCK);
    let partial: Vec<[f64; 4]> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut r = rng::stream(seed, rng::MONTE_CARLO, b as u64);
            let len = rng::BLOCK.min(n - b * rng::BLOCK);
            let mut acc = [0.0; 4];
            for _ in 0..len {
                let x: f64 = r.sample(StandardNormal);
                for (j, a) in acc.iter_mut().enumerate() {
                    *a += act.eval_derivative(j, x).abs().powi(5);
                }
            }
            acc
        })
        .collect();
    let mut tot = [0.0; 4];
    for p in &partial {
        for j in 0..4 {
            tot[j] += p[j];
        }
    }
    let best = tot
        .iter()
        .map(|s| (s / n as f64).powf(0.2))
        .fold(0.0, f64::max);
    Ok(11.0 * best)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
