//! Offspring distributions and environments.
//!
//! An [`OffspringDist`] is a finite-support pmf on `{0, ..., d}`. Its
//! generating function `f`, the functional `phi(s) = 1/(1-f(s)) - 1/(1-s)`
//! and the modulus `omega(eps)` of `phi` near 1 are evaluated exactly.
//!
//! An [`EnvStream`] realizes a sequence `(mu_k)` from an [`EnvSpec`]:
//! constant, periodic, or an i.i.d. mixture addressed by `hash(seed, k)`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{derive_key, unit_from_key};

/// Largest child count accepted by default.
pub const DEFAULT_SUPPORT_CAP: usize = 64;

/// Tolerance on `|mean - 1|` for a pmf to count as strictly critical.
pub const CRITICAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error("weight {index} is negative or not finite ({value})")]
    NegativeWeight { index: usize, value: f64 },
    #[error("all weights are zero")]
    AllZero,
    #[error("support {max_child} exceeds cap {cap}")]
    SupportTooLarge { max_child: usize, cap: usize },
    #[error("size-biasing requires a positive mean")]
    ZeroMean,
    #[error("argument {0} outside [0, 1]")]
    OutOfDomain(f64),
    #[error("distribution is not strictly critical (mean {mean})")]
    NotCritical { mean: f64 },
    #[error("phi is undefined for the Dirac mass at 1")]
    DegenerateAtOne,
    #[error("epsilon {0} outside (0, 1]")]
    BadEpsilon(f64),
    #[error("grid must have at least one interval")]
    BadGrid,
    #[error("invalid environment spec: {0}")]
    InvalidSpec(String),
}

/// Finite-support offspring distribution.
///
/// Trailing zero weights are trimmed so `max_child()` is the true support
/// maximum. Derived moments and the coefficient tables used by `phi` are
/// computed once at construction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct OffspringDist {
    probs: Vec<f64>,
    cdf: Vec<f64>,
    mean: f64,
    variance: f64,
    // tail[m] = P(xi > m), m = 0..d-1
    tail: Vec<f64>,
    // phi_num[l] = sum_{m > l} tail[m]
    phi_num: Vec<f64>,
}

impl OffspringDist {
    pub fn new(weights: &[f64]) -> Result<Self, EnvError> {
        Self::with_cap(weights, DEFAULT_SUPPORT_CAP)
    }

    pub fn with_cap(weights: &[f64], cap: usize) -> Result<Self, EnvError> {
        if let Some((index, &value)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(EnvError::NegativeWeight { index, value });
        }
        let last = weights.iter().rposition(|&w| w > 0.0).ok_or(EnvError::AllZero)?;
        if last > cap {
            return Err(EnvError::SupportTooLarge { max_child: last, cap });
        }
        let total: f64 = weights[..=last].iter().sum();
        let probs: Vec<f64> = weights[..=last].iter().map(|w| w / total).collect();
        Ok(Self::from_normalized(probs))
    }

    /// Dirac mass at `k`.
    pub fn dirac(k: usize) -> Self {
        let mut probs = vec![0.0; k + 1];
        probs[k] = 1.0;
        Self::from_normalized(probs)
    }

    fn from_normalized(probs: Vec<f64>) -> Self {
        let mean: f64 = probs.iter().enumerate().map(|(i, p)| i as f64 * p).sum();
        let variance: f64 = probs
            .iter()
            .enumerate()
            .map(|(i, p)| (i as f64 - mean).powi(2) * p)
            .sum();
        let mut cdf = Vec::with_capacity(probs.len());
        let mut acc = 0.0;
        for p in &probs {
            acc += p;
            cdf.push(acc);
        }
        // sampling relies on the last cumulative weight exceeding every uniform draw
        if let Some(c) = cdf.last_mut() {
            *c = 1.0;
        }
        let d = probs.len() - 1;
        let mut tail = vec![0.0; d];
        let mut acc = 0.0;
        for m in (0..d).rev() {
            acc += probs[m + 1];
            tail[m] = acc;
        }
        let mut phi_num = vec![0.0; d.saturating_sub(1)];
        let mut acc = 0.0;
        for l in (0..phi_num.len()).rev() {
            acc += tail[l + 1];
            phi_num[l] = acc;
        }
        OffspringDist { probs, cdf, mean, variance, tail, phi_num }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Probability of exactly `i` children.
    pub fn prob(&self, i: usize) -> f64 {
        self.probs.get(i).copied().unwrap_or(0.0)
    }

    pub fn max_child(&self) -> usize {
        self.probs.len() - 1
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn is_strictly_critical(&self) -> bool {
        (self.mean - 1.0).abs() <= CRITICAL_TOL
    }

    /// Draws a child count by inversion of the cumulative weights.
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        self.cdf.partition_point(|&c| c <= u)
    }

    /// Size-biased law `i * p_i / mean`.
    pub fn size_biased(&self) -> Result<OffspringDist, EnvError> {
        if self.mean <= 0.0 {
            return Err(EnvError::ZeroMean);
        }
        let probs: Vec<f64> = self
            .probs
            .iter()
            .enumerate()
            .map(|(i, p)| i as f64 * p / self.mean)
            .collect();
        Ok(Self::from_normalized(probs))
    }

    /// Generating function `f(s) = sum_i p_i s^i`.
    pub fn pgf(&self, s: f64) -> Result<f64, EnvError> {
        check_unit(s)?;
        if s == 1.0 {
            return Ok(1.0);
        }
        Ok(horner(&self.probs, s))
    }

    /// `(1 - f(s)) / (1 - s) = sum_m P(xi > m) s^m`, finite on all of `[0, 1]`.
    pub fn survival_ratio(&self, s: f64) -> f64 {
        horner(&self.tail, s)
    }

    /// `phi(s) = 1/(1-f(s)) - 1/(1-s)`, with `phi(1) = sigma^2 / 2`.
    ///
    /// For a mean-one pmf, `f(s) - s = (1-s)^2 A(s)` and `1 - f(s) = (1-s) C(s)`
    /// where `A` and `C` are polynomials with nonnegative coefficients built
    /// from the tail probabilities, so `phi = A / C` with no cancellation
    /// anywhere on `[0, 1]`.
    pub fn phi(&self, s: f64) -> Result<f64, EnvError> {
        check_unit(s)?;
        self.require_critical()?;
        if self.variance <= f64::EPSILON {
            return Err(EnvError::DegenerateAtOne);
        }
        Ok(horner(&self.phi_num, s) / horner(&self.tail, s))
    }

    /// Modulus `sup |phi(s) - phi(t)|` over `1 - eps <= s <= t <= 1`,
    /// evaluated on `grid_points` equal intervals (a lower bound for the true
    /// supremum that converges under refinement).
    pub fn omega(&self, eps: f64, grid_points: usize) -> Result<f64, EnvError> {
        if !(eps > 0.0 && eps <= 1.0) {
            return Err(EnvError::BadEpsilon(eps));
        }
        if grid_points == 0 {
            return Err(EnvError::BadGrid);
        }
        self.require_critical()?;
        if self.variance <= f64::EPSILON {
            return Err(EnvError::DegenerateAtOne);
        }
        let step = eps / grid_points as f64;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for j in 0..=grid_points {
            let s = if j == grid_points { 1.0 } else { (1.0 - eps + j as f64 * step).max(0.0) };
            let v = self.phi(s)?;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        Ok(hi - lo)
    }

    /// `E[xi^2 1{xi^2 >= threshold}]`.
    pub fn truncated_second_moment(&self, threshold: f64) -> f64 {
        self.probs
            .iter()
            .enumerate()
            .map(|(i, p)| ((i * i) as f64, p))
            .filter(|(sq, _)| *sq >= threshold)
            .map(|(sq, p)| sq * p)
            .sum()
    }

    fn require_critical(&self) -> Result<(), EnvError> {
        if self.is_strictly_critical() {
            Ok(())
        } else {
            Err(EnvError::NotCritical { mean: self.mean })
        }
    }
}

impl TryFrom<Vec<f64>> for OffspringDist {
    type Error = EnvError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        OffspringDist::new(&value)
    }
}

impl From<OffspringDist> for Vec<f64> {
    fn from(d: OffspringDist) -> Self {
        d.probs
    }
}

fn check_unit(s: f64) -> Result<(), EnvError> {
    if (0.0..=1.0).contains(&s) {
        Ok(())
    } else {
        Err(EnvError::OutOfDomain(s))
    }
}

fn horner(coeffs: &[f64], s: f64) -> f64 {
    coeffs.iter().rev().fold(0.0, |acc, c| acc * s + c)
}

/// Declarative environment description, as read from JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "lowercase", deny_unknown_fields)]
pub enum EnvSpec {
    Constant { dist: Vec<f64> },
    Periodic { dists: Vec<Vec<f64>> },
    Mixture { components: Vec<Vec<f64>>, weights: Vec<f64>, seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Constant,
    Periodic,
    Mixture,
}

#[derive(Debug)]
struct EnvInner {
    kind: Kind,
    components: Vec<OffspringDist>,
    weights: Vec<f64>,
    cum_weights: Vec<f64>,
    seed: u64,
}

/// Random-access view of the environment `(mu_k)_{k >= 0}`.
///
/// Mixture draws are a pure function of `(seed, k)`, so the stream is
/// idempotent without caching and cheap to clone or share across threads.
#[derive(Clone, Debug)]
pub struct EnvStream {
    inner: Arc<EnvInner>,
    offset: u64,
}

impl EnvStream {
    pub fn new(spec: &EnvSpec) -> Result<Self, EnvError> {
        let parse = |ws: &[Vec<f64>]| -> Result<Vec<OffspringDist>, EnvError> {
            if ws.is_empty() {
                return Err(EnvError::InvalidSpec("no distributions given".into()));
            }
            ws.iter().map(|w| OffspringDist::new(w)).collect()
        };
        let (kind, components, weights, seed) = match spec {
            EnvSpec::Constant { dist } => (Kind::Constant, vec![OffspringDist::new(dist)?], vec![1.0], 0),
            EnvSpec::Periodic { dists } => {
                let comps = parse(dists)?;
                let w = vec![1.0 / comps.len() as f64; comps.len()];
                (Kind::Periodic, comps, w, 0)
            }
            EnvSpec::Mixture { components, weights, seed } => {
                let comps = parse(components)?;
                if weights.len() != comps.len() {
                    return Err(EnvError::InvalidSpec(format!(
                        "{} weights for {} components",
                        weights.len(),
                        comps.len()
                    )));
                }
                if let Some((index, &value)) =
                    weights.iter().enumerate().find(|(_, w)| !w.is_finite() || **w < 0.0)
                {
                    return Err(EnvError::NegativeWeight { index, value });
                }
                let total: f64 = weights.iter().sum();
                if total <= 0.0 {
                    return Err(EnvError::AllZero);
                }
                (Kind::Mixture, comps, weights.iter().map(|w| w / total).collect(), *seed)
            }
        };
        let mut acc = 0.0;
        let mut cum_weights: Vec<f64> = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        if let Some(c) = cum_weights.last_mut() {
            *c = 1.0;
        }
        Ok(EnvStream {
            inner: Arc::new(EnvInner { kind, components, weights, cum_weights, seed }),
            offset: 0,
        })
    }

    pub fn constant(dist: OffspringDist) -> Self {
        EnvStream {
            inner: Arc::new(EnvInner {
                kind: Kind::Constant,
                components: vec![dist],
                weights: vec![1.0],
                cum_weights: vec![1.0],
                seed: 0,
            }),
            offset: 0,
        }
    }

    /// Index into `components()` of `mu_k`.
    #[inline]
    pub fn component_index(&self, k: u64) -> usize {
        let k = k + self.offset;
        let inner = &*self.inner;
        match inner.kind {
            Kind::Constant => 0,
            Kind::Periodic => (k % inner.components.len() as u64) as usize,
            Kind::Mixture => {
                let u = unit_from_key(derive_key(inner.seed, &[k]));
                inner.cum_weights.partition_point(|&c| c <= u).min(inner.components.len() - 1)
            }
        }
    }

    /// `mu_k`.
    #[inline]
    pub fn dist(&self, k: u64) -> &OffspringDist {
        &self.inner.components[self.component_index(k)]
    }

    pub fn variance(&self, k: u64) -> f64 {
        self.dist(k).variance()
    }

    pub fn mean(&self, k: u64) -> f64 {
        self.dist(k).mean()
    }

    /// `sigma_{k0}^2 + ... + sigma_{k0+len-1}^2`.
    pub fn variance_sum(&self, k0: u64, len: u64) -> f64 {
        (k0..k0 + len).map(|k| self.variance(k)).sum()
    }

    /// The environment `(mu_{k0 + k})_k`.
    pub fn shifted(&self, k0: u64) -> EnvStream {
        EnvStream { inner: Arc::clone(&self.inner), offset: self.offset + k0 }
    }

    /// Same law `Lambda`, fresh environment draw. Deterministic variants are returned unchanged.
    pub fn reseeded(&self, seed: u64) -> EnvStream {
        if self.inner.kind != Kind::Mixture {
            return self.clone();
        }
        let inner = &*self.inner;
        EnvStream {
            inner: Arc::new(EnvInner {
                kind: inner.kind,
                components: inner.components.clone(),
                weights: inner.weights.clone(),
                cum_weights: inner.cum_weights.clone(),
                seed,
            }),
            offset: self.offset,
        }
    }

    pub fn offset(&self) -> u64 {
        self.offset
    }

    pub fn components(&self) -> &[OffspringDist] {
        &self.inner.components
    }

    /// Component weights: `Lambda` for a mixture, uniform over the period, or `[1]`.
    pub fn weights(&self) -> &[f64] {
        &self.inner.weights
    }

    pub fn is_random(&self) -> bool {
        self.inner.kind == Kind::Mixture
    }

    /// `sigma^2 = sum_j w_j Var(component_j)`: the Cesaro limit of `sigma_k^2`.
    pub fn annealed_variance(&self) -> f64 {
        self.weighted(|d| d.variance())
    }

    /// `c = sum_j w_j component_j({0})`.
    pub fn annealed_zero_mass(&self) -> f64 {
        self.weighted(|d| d.prob(0))
    }

    fn weighted(&self, f: impl Fn(&OffspringDist) -> f64) -> f64 {
        self.inner.components.iter().zip(&self.inner.weights).map(|(d, w)| w * f(d)).sum()
    }

    pub fn max_support(&self) -> usize {
        self.inner.components.iter().map(|d| d.max_child()).max().unwrap_or(0)
    }

    pub fn is_strictly_critical(&self) -> bool {
        self.inner.components.iter().all(|d| d.is_strictly_critical())
    }

    pub fn require_strictly_critical(&self) -> Result<(), EnvError> {
        match self.inner.components.iter().find(|d| !d.is_strictly_critical()) {
            Some(d) => Err(EnvError::NotCritical { mean: d.mean() }),
            None => Ok(()),
        }
    }
}
