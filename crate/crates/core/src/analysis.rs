//! Exact computations: survival up to a height, variance of generation
//! sizes, and numerical checks of the environment conditions.

use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::env::{EnvError, EnvStream, OffspringDist};
use crate::rng::substream;
use crate::tree::{sample_generation_sizes, TreeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// Extinction-before-height probabilities for a fixed horizon `m`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SurvivalTable {
    pub horizon: usize,
    /// `q[k]`: probability that a vertex at height `k` has no descendant at
    /// height `m`; `q[m] = 0`.
    pub q: Vec<f64>,
    /// `phi_k(q[k+1])` for `k < m`.
    pub phi_terms: Vec<f64>,
    /// `1 - q[0]`.
    pub survival_direct: f64,
    /// `1 / (1 + sum_k phi_k(q[k+1]))`.
    pub survival_phi: f64,
}

impl SurvivalTable {
    pub fn survival(&self) -> f64 {
        self.survival_direct
    }
}

/// `phi` with the value 0 for the Dirac mass at 1, where `f(s) = s`.
fn phi_or_zero(d: &OffspringDist, s: f64) -> Result<f64, EnvError> {
    match d.phi(s) {
        Err(EnvError::DegenerateAtOne) => Ok(0.0),
        r => r,
    }
}

fn require_critical_prefix(env: &EnvStream, m: usize) -> Result<(), EnvError> {
    if env.is_strictly_critical() {
        return Ok(());
    }
    for k in 0..m as u64 {
        let d = env.dist(k);
        if !d.is_strictly_critical() {
            return Err(EnvError::NotCritical { mean: d.mean() });
        }
    }
    Ok(())
}

/// `P(h(T) >= m)` by the backward recursion `q_{k,m} = f_k(q_{k+1,m})`,
/// together with the `phi` representation of the same probability.
pub fn survival_exact(env: &EnvStream, m: usize) -> Result<SurvivalTable, AnalysisError> {
    if m == 0 {
        return Err(AnalysisError::BadParameters("horizon must be at least 1".into()));
    }
    require_critical_prefix(env, m)?;
    let mut q = vec![0.0; m + 1];
    let mut phi_terms = vec![0.0; m];
    for k in (0..m).rev() {
        let d = env.dist(k as u64);
        phi_terms[k] = phi_or_zero(d, q[k + 1])?;
        q[k] = d.pgf(q[k + 1])?;
    }
    let sum: f64 = phi_terms.iter().sum();
    Ok(SurvivalTable {
        horizon: m,
        survival_direct: 1.0 - q[0],
        survival_phi: 1.0 / (1.0 + sum),
        q,
        phi_terms,
    })
}

/// `P(h(T) >= m)` alone, accumulated in survival space:
/// `1 - q_k = (1 - q_{k+1}) (1 - f_k(q_{k+1})) / (1 - q_{k+1})`.
pub fn survival_probability(env: &EnvStream, m: usize) -> f64 {
    let mut surv = 1.0;
    for k in (0..m).rev() {
        surv *= env.dist(k as u64).survival_ratio(1.0 - surv);
    }
    surv
}

/// `(1 / (2 sigma2 m), 4 / (c m))`.
pub fn kolmogorov_bounds(m: usize, c: f64, sigma2: f64) -> Result<(f64, f64), AnalysisError> {
    if m == 0 || !(c > 0.0) || !(sigma2 > 0.0) {
        return Err(AnalysisError::BadParameters("need m >= 1, c > 0, sigma2 > 0".into()));
    }
    let m = m as f64;
    Ok((1.0 / (2.0 * sigma2 * m), 4.0 / (c * m)))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SandwichReport {
    pub m_max: usize,
    pub c: f64,
    pub sigma2: f64,
    /// Smallest `M` such that the bounds hold for every `M <= m <= m_max`.
    pub threshold: Option<usize>,
    /// Horizons in `1..=m_max` where the exact value leaves the bounds.
    pub violations: Vec<usize>,
}

/// Checks `1/(2 sigma2 m) <= P(h >= m) <= 4/(c m)` for `m = 1..=m_max`.
pub fn kolmogorov_sandwich(
    env: &EnvStream,
    m_max: usize,
    c: f64,
    sigma2: f64,
) -> Result<SandwichReport, AnalysisError> {
    kolmogorov_bounds(1, c, sigma2)?;
    require_critical_prefix(env, m_max)?;
    let violations: Vec<usize> = (1..=m_max)
        .into_par_iter()
        .filter(|&m| {
            let p = survival_probability(env, m);
            let (lo, hi) = kolmogorov_bounds(m, c, sigma2).expect("validated");
            !(lo <= p && p <= hi)
        })
        .collect();
    let threshold = match violations.last() {
        None => Some(1),
        Some(&v) if v < m_max => Some(v + 1),
        Some(_) => None,
    };
    Ok(SandwichReport { m_max, c, sigma2, threshold, violations })
}

/// `Var(Z_{k1})` for a process started from `z0` individuals at generation
/// `k0`: `z0 (sigma_{k0}^2 + ... + sigma_{k0+k1-1}^2)`.
pub fn variance_exact(env: &EnvStream, z0: u64, k0: u64, k1: u64) -> f64 {
    z0 as f64 * env.variance_sum(k0, k1)
}

/// Doob's `L^2` bound `4 Var(Z_{k1}) / K^2` on `P(max_{k <= k1} |Z_k - z0| > K)`.
pub fn doob_bound(env: &EnvStream, z0: u64, k0: u64, k1: u64, big_k: f64) -> Result<f64, AnalysisError> {
    if !(big_k > 0.0) {
        return Err(AnalysisError::BadParameters("K must be positive".into()));
    }
    Ok(4.0 * variance_exact(env, z0, k0, k1) / (big_k * big_k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DoobCheck {
    pub bound: f64,
    pub empirical: f64,
    pub se: f64,
    pub pass: bool,
}

/// Empirical frequency of `max_{k <= k1} |Z_k - z0| > K` against the bound (plus 4 SE).
pub fn doob_check(
    env: &EnvStream,
    z0: u64,
    k0: u64,
    k1: u64,
    big_k: f64,
    reps: usize,
    seed: u64,
) -> Result<DoobCheck, AnalysisError> {
    let bound = doob_bound(env, z0, k0, k1, big_k)?;
    let shifted = env.shifted(k0);
    let hits: Vec<bool> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(seed, &[r]);
            let z = sample_generation_sizes(&shifted, z0, k1 as usize, u64::MAX, &mut rng)?;
            Ok(z.iter().any(|&x| (x as f64 - z0 as f64).abs() > big_k))
        })
        .collect::<Result<_, TreeError>>()?;
    let p = hits.iter().filter(|&&h| h).count() as f64 / reps as f64;
    let se = (p * (1.0 - p) / reps as f64).sqrt();
    Ok(DoobCheck { bound, empirical: p, se, pass: p <= bound + 4.0 * se })
}

/// Parameters for [`check_conditions`]. Unset targets default to the
/// annealed constants of the environment.
#[derive(Clone, Debug, PartialEq, Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConditionParams {
    pub sigma2: Option<f64>,
    pub c: Option<f64>,
    /// Truncation level in the large-degree sum.
    pub eps_degrees: f64,
    /// Height scale `h_n`; defaults to `n^{1/6}`.
    pub h_n: Option<f64>,
    pub eps_grid: Vec<f64>,
    /// Prefix lengths for the `omega` matrix; defaults to `n/100, n/10, n`.
    pub n_grid: Option<Vec<usize>>,
    pub omega_grid_points: usize,
    pub seed: u64,
    pub tol_variance: f64,
    pub tol_zero_mass: f64,
    pub tol_degrees: f64,
    pub tol_spine: f64,
    pub tol_omega: f64,
}

impl Default for ConditionParams {
    fn default() -> Self {
        ConditionParams {
            sigma2: None,
            c: None,
            eps_degrees: 0.01,
            h_n: None,
            eps_grid: vec![0.5, 0.25, 0.1, 0.05, 0.01],
            n_grid: None,
            omega_grid_points: 200,
            seed: 0,
            tol_variance: 0.05,
            tol_zero_mass: 0.05,
            tol_degrees: 0.05,
            tol_spine: 0.03,
            tol_omega: 0.05,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionResult {
    pub condition: String,
    pub statistic: f64,
    pub target: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
    pub params: serde_json::Value,
}

impl ConditionResult {
    fn new(condition: &str, statistic: f64, target: f64, deviation: f64, tolerance: f64, params: serde_json::Value) -> Self {
        ConditionResult {
            condition: condition.into(),
            statistic,
            target,
            deviation,
            tolerance,
            pass: deviation <= tolerance,
            params,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OmegaMatrix {
    pub eps: Vec<f64>,
    pub n: Vec<usize>,
    /// `values[i][j] = (1/n_i) sum_{k < n_i} omega_k(eps_j)`.
    pub values: Vec<Vec<f64>>,
    /// True when, at the largest prefix, the averages shrink with `eps`.
    pub decreasing_in_eps: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub n: usize,
    pub conditions: Vec<ConditionResult>,
    pub omega: OmegaMatrix,
    /// `(1/n) sum_{k < n} sigma_k^2 / 2`, the mean of the spine statistic.
    pub spine_mean_exact: f64,
}

impl ConditionReport {
    pub fn all_pass(&self) -> bool {
        self.conditions.iter().all(|c| c.pass)
    }
}

/// Grid `{0, 1/4, ..., 2}` of window endpoints.
fn window_grid() -> Vec<(f64, f64)> {
    let pts: Vec<f64> = (0..=8).map(|j| j as f64 / 4.0).collect();
    let mut out = Vec::new();
    for (i, &a) in pts.iter().enumerate() {
        for &b in &pts[i + 1..] {
            out.push((a, b));
        }
    }
    out
}

/// Draws `zeta_0, ..., zeta_{n-1}`: `zeta_k` uniform on `{0, ..., xibar_k - 1}`
/// with `xibar_k` size-biased from `mu_k`. Returns their sum.
pub fn spine_sum<R: Rng + ?Sized>(env: &EnvStream, n: usize, rng: &mut R) -> Result<u64, EnvError> {
    let biased: Vec<OffspringDist> =
        env.components().iter().map(|d| d.size_biased()).collect::<Result<_, _>>()?;
    let mut total = 0u64;
    for k in 0..n as u64 {
        let xi = biased[env.component_index(k)].sample(rng) as u64;
        total += rng.random_range(0..xi);
    }
    Ok(total)
}

/// Numerical evidence for the five environment conditions on a prefix of length `n`.
pub fn check_conditions(env: &EnvStream, n: usize, p: &ConditionParams) -> Result<ConditionReport, AnalysisError> {
    if n == 0 {
        return Err(AnalysisError::BadParameters("prefix length must be positive".into()));
    }
    if p.eps_grid.iter().any(|&e| !(e > 0.0 && e <= 1.0)) {
        return Err(AnalysisError::BadParameters("eps_grid entries must lie in (0, 1]".into()));
    }
    env.require_strictly_critical()?;
    let sigma2 = p.sigma2.unwrap_or_else(|| env.annealed_variance());
    let c = p.c.unwrap_or_else(|| env.annealed_zero_mass());
    let nf = n as f64;
    let mut conditions = Vec::with_capacity(5);

    let avg_var = env.variance_sum(0, n as u64) / nf;
    conditions.push(ConditionResult::new(
        "I",
        avg_var,
        sigma2,
        (avg_var - sigma2).abs(),
        p.tol_variance,
        serde_json::json!({ "n": n }),
    ));

    // prefix[j] = sum_{i < j} mu_i({0})
    let top = 2 * n + 1;
    let mut prefix = Vec::with_capacity(top + 1);
    prefix.push(0.0);
    for k in 0..top as u64 {
        prefix.push(prefix[prefix.len() - 1] + env.dist(k).prob(0));
    }
    let min_window = window_grid()
        .into_iter()
        .map(|(a, b)| {
            let lo = (a * nf).floor() as usize;
            let hi = (b * nf).floor() as usize;
            (prefix[hi + 1] - prefix[lo + 1]) / ((b - a) * nf)
        })
        .fold(f64::INFINITY, f64::min);
    conditions.push(ConditionResult::new(
        "II",
        min_window,
        c,
        (c - min_window).max(0.0),
        p.tol_zero_mass,
        serde_json::json!({ "grid": "a < b in {0, 1/4, ..., 2}" }),
    ));

    let h_n = p.h_n.unwrap_or_else(|| nf.powf(1.0 / 6.0));
    let k_top = (h_n * nf.sqrt()).floor() as u64;
    let threshold = p.eps_degrees * nf;
    let large = (0..=k_top).map(|k| env.dist(k).truncated_second_moment(threshold)).sum::<f64>() / nf.sqrt();
    conditions.push(ConditionResult::new(
        "III",
        large,
        0.0,
        large,
        p.tol_degrees,
        serde_json::json!({ "h_n": h_n, "eps": p.eps_degrees }),
    ));

    let mut rng = substream(p.seed, &[crate::rng::tag("spine")]);
    let spine_avg = spine_sum(env, n, &mut rng)? as f64 / nf;
    conditions.push(ConditionResult::new(
        "IV",
        spine_avg,
        sigma2 / 2.0,
        (spine_avg - sigma2 / 2.0).abs(),
        p.tol_spine,
        serde_json::json!({ "seed": p.seed }),
    ));

    let omega = omega_matrix(env, n, p)?;
    let last = omega.values.last().expect("nonempty n grid");
    let smallest = omega
        .eps
        .iter()
        .zip(last)
        .min_by(|a, b| a.0.total_cmp(b.0))
        .map_or(0.0, |(_, &v)| v);
    conditions.push(ConditionResult::new(
        "V",
        smallest,
        0.0,
        smallest,
        p.tol_omega,
        serde_json::json!({ "eps_grid": p.eps_grid, "decreasing_in_eps": omega.decreasing_in_eps }),
    ));

    Ok(ConditionReport {
        n,
        conditions,
        omega,
        spine_mean_exact: env.variance_sum(0, n as u64) / (2.0 * nf),
    })
}

fn omega_matrix(env: &EnvStream, n: usize, p: &ConditionParams) -> Result<OmegaMatrix, AnalysisError> {
    let n_grid = p.n_grid.clone().unwrap_or_else(|| {
        let mut g: Vec<usize> = vec![(n / 100).max(1), (n / 10).max(1), n];
        g.dedup();
        g
    });
    let comps = env.components();
    // per_comp[j][e] = omega of component j at eps_grid[e]
    let per_comp: Vec<Vec<f64>> = comps
        .iter()
        .map(|d| {
            p.eps_grid
                .iter()
                .map(|&e| match d.omega(e, p.omega_grid_points) {
                    Err(EnvError::DegenerateAtOne) => Ok(0.0),
                    r => r,
                })
                .collect::<Result<Vec<f64>, EnvError>>()
        })
        .collect::<Result<_, _>>()?;
    let n_max = n_grid.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; comps.len()];
    let mut values = Vec::with_capacity(n_grid.len());
    let mut sorted: Vec<usize> = n_grid.clone();
    sorted.sort_unstable();
    let mut at: std::collections::BTreeMap<usize, Vec<f64>> = Default::default();
    let mut next = sorted.iter().peekable();
    for k in 0..=n_max {
        while next.peek().is_some_and(|&&m| m == k) {
            let m = *next.next().unwrap();
            let row = (0..p.eps_grid.len())
                .map(|e| counts.iter().zip(&per_comp).map(|(&c, w)| c as f64 * w[e]).sum::<f64>() / m.max(1) as f64)
                .collect();
            at.insert(m, row);
        }
        if k < n_max {
            counts[env.component_index(k as u64)] += 1;
        }
    }
    for m in &n_grid {
        values.push(at[m].clone());
    }
    let last = values.last().cloned().unwrap_or_default();
    let mut order: Vec<usize> = (0..p.eps_grid.len()).collect();
    order.sort_by(|&a, &b| p.eps_grid[b].total_cmp(&p.eps_grid[a]));
    let decreasing_in_eps = order.windows(2).all(|w| last[w[1]] <= last[w[0]] + 1e-15);
    Ok(OmegaMatrix { eps: p.eps_grid.clone(), n: n_grid, values, decreasing_in_eps })
}
