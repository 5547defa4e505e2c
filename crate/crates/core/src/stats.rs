//! Monte Carlo experiments and goodness-of-fit utilities.
//!
//! Every experiment is a pure function of its [`ExperimentConfig`]: replicate
//! `r` draws from the substream `(seed, [experiment tag, r, ...])`, replicates
//! run in parallel, and results are collected in replicate order, so reports
//! are identical for any number of worker threads.

use std::collections::BTreeMap;
use std::io::{self, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};
use thiserror::Error;

use crate::analysis::spine_sum;
use crate::env::{EnvError, EnvSpec, EnvStream};
use crate::explore::{
    bad_vertices, blocks, conditioned_tree, dfs_encode, ConditionOptions, ExplorationPath, ExploreError,
};
use crate::rng::{derive_key, substream, tag, SimRng};
use crate::tree::{sample_explored_prefix, sample_geiger, sample_truncated_tree, TreeError, DEFAULT_TREE_CAP};

pub const SCHEMA_VERSION: u32 = 1;

/// Upper limit on the number of shapes enumerated by the Geiger experiment.
pub const MAX_SHAPES: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("empty sample")]
    EmptySample,
    #[error("invalid configuration: {0}")]
    BadConfig(String),
    #[error("more than {limit} shapes to enumerate")]
    EnumerationTooLarge { limit: usize },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Explore(#[from] ExploreError),
}

impl StatsError {
    /// True for errors caused by the configuration rather than by a run.
    pub fn is_config_error(&self) -> bool {
        matches!(self, StatsError::BadConfig(_) | StatsError::Env(_))
    }
}

// ---------------------------------------------------------------------------
// Distribution functions and KS statistics

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// CDF of `|N(0, 1)|`.
pub fn half_normal_cdf(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        erf(x / std::f64::consts::SQRT_2)
    }
}

/// One-sample statistic `sup_x |F_n(x) - F(x)|`, evaluated on both sides of every jump.
pub fn ks_statistic(sample: &[f64], cdf: impl Fn(f64) -> f64) -> Result<f64, StatsError> {
    if sample.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = cdf(x);
        d = d.max(f - i as f64 / n).max((i + 1) as f64 / n - f);
    }
    Ok(d)
}

/// Two-sample statistic `sup_x |F_a(x) - F_b(x)|`.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<f64, StatsError> {
    if a.is_empty() || b.is_empty() {
        return Err(StatsError::EmptySample);
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(ks_sorted(&a, &b))
}

fn ks_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0f64;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    d
}

/// Asymptotic p-value `Q_KS((sqrt(n) + 0.12 + 0.11/sqrt(n)) d)` for effective size `n`.
pub fn kolmogorov_pvalue(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    let lambda = (s + 0.12 + 0.11 / s) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    let mut sign = 1.0;
    for j in 1..=100 {
        let term = sign * (-2.0 * (j * j) as f64 * lambda * lambda).exp();
        sum += term;
        if term.abs() < 1e-12 {
            break;
        }
        sign = -sign;
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// One environment for every replicate.
    #[default]
    Quenched,
    /// A fresh environment draw per replicate.
    Annealed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentParams {
    /// Limiting variance; defaults to the annealed variance of the environment.
    pub sigma2: Option<f64>,
    /// Bad-vertex and good-block threshold.
    pub eps: f64,
    pub delta: f64,
    pub gamma: f64,
    /// Path lengths for the discrepancy experiment; defaults to `n/100, n/10, n`.
    pub n_values: Option<Vec<usize>>,
    /// Times in `(0, 1]` at which the rescaled path is recorded.
    pub time_grid: Vec<f64>,
    /// Comparison height for the Geiger identity.
    pub depth: usize,
    /// Conditioned trees are kept when `n <= |T| <= max_size_factor * n`.
    pub max_size_factor: Option<f64>,
    /// Second tree-size threshold for the scaling self-consistency check.
    pub scaling_n: Option<usize>,
    /// Random splits used to calibrate the control distribution.
    pub permutations: usize,
    /// Control-distribution quantile used as the KS threshold.
    pub control_quantile: f64,
    pub tolerance: Option<f64>,
    pub min_frequency: Option<f64>,
}

impl Default for ExperimentParams {
    fn default() -> Self {
        ExperimentParams {
            sigma2: None,
            eps: 0.2,
            delta: 0.5,
            gamma: 0.5,
            n_values: None,
            time_grid: vec![0.25, 0.5, 0.75],
            depth: 1,
            max_size_factor: Some(100.0),
            scaling_n: None,
            permutations: 500,
            control_quantile: 0.99,
            tolerance: None,
            min_frequency: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub env: EnvSpec,
    /// Reference environment for the CRT comparison.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle_env: Option<EnvSpec>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    #[serde(default)]
    pub mode: Mode,
    #[serde(default)]
    pub params: ExperimentParams,
}

impl ExperimentConfig {
    pub fn new(env: EnvSpec, n: usize, replicates: usize, seed: u64) -> Self {
        ExperimentConfig {
            schema_version: SCHEMA_VERSION,
            env,
            oracle_env: None,
            n,
            replicates,
            seed,
            mode: Mode::Quenched,
            params: ExperimentParams::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, StatsError> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| StatsError::BadConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Full check for Monte Carlo experiments, which need `n >= 10`.
    pub fn validate(&self) -> Result<(), StatsError> {
        if self.n < 10 {
            return Err(StatsError::BadConfig("n must be at least 10".into()));
        }
        self.validate_fields()
    }

    /// Checks everything except the experiment lower bound on `n` (`n >= 1` suffices).
    pub fn validate_fields(&self) -> Result<(), StatsError> {
        let bad = |m: &str| Err(StatsError::BadConfig(m.to_string()));
        if self.schema_version != SCHEMA_VERSION {
            return bad(&format!("schema_version must be {SCHEMA_VERSION}"));
        }
        if self.replicates == 0 {
            return bad("replicates must be at least 1");
        }
        if self.n == 0 {
            return bad("n must be at least 1");
        }
        let p = &self.params;
        if !(p.eps > 0.0 && p.delta > 0.0 && p.gamma > 0.0) {
            return bad("eps, delta and gamma must be positive");
        }
        if p.sigma2.is_some_and(|s| !(s > 0.0)) {
            return bad("sigma2 must be positive");
        }
        if p.time_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return bad("time_grid entries must lie in (0, 1]");
        }
        if p.max_size_factor.is_some_and(|f| !(f >= 1.0)) {
            return bad("max_size_factor must be at least 1");
        }
        if !(p.control_quantile > 0.0 && p.control_quantile < 1.0) {
            return bad("control_quantile must lie in (0, 1)");
        }
        EnvStream::new(&self.env)?;
        if let Some(o) = &self.oracle_env {
            EnvStream::new(o)?;
        }
        Ok(())
    }

    fn env(&self) -> Result<EnvStream, StatsError> {
        let env = EnvStream::new(&self.env)?;
        env.require_strictly_critical()?;
        Ok(env)
    }

    fn sigma2(&self, env: &EnvStream) -> f64 {
        self.params.sigma2.unwrap_or_else(|| env.annealed_variance())
    }

    /// Environment seen by replicate `r` of the stream labelled `label`.
    fn replicate_env(&self, env: &EnvStream, label: u64, r: u64) -> EnvStream {
        match self.mode {
            Mode::Quenched => env.clone(),
            Mode::Annealed => env.reseeded(derive_key(self.seed, &[tag("environment"), label, r])),
        }
    }
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub name: String,
    pub count: usize,
    pub mean: f64,
    pub se: f64,
    pub q05: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub q95: f64,
}

impl Summary {
    pub fn of(name: &str, xs: &[f64]) -> Summary {
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n.max(1) as f64;
        let var = if n > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64 } else { 0.0 };
        let mut sorted = xs.to_vec();
        sorted.sort_by(f64::total_cmp);
        Summary {
            name: name.into(),
            count: n,
            mean,
            se: (var / n.max(1) as f64).sqrt(),
            q05: quantile(&sorted, 0.05),
            q25: quantile(&sorted, 0.25),
            median: quantile(&sorted, 0.5),
            q75: quantile(&sorted, 0.75),
            q95: quantile(&sorted, 0.95),
        }
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct KsResult {
    pub name: String,
    pub statistic: f64,
    pub p_value: f64,
    pub sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: f64,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    fn below(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Check {
        Check { name: name.into(), value, threshold, pass: value < threshold, detail: detail.into() }
    }

    fn at_least(name: &str, value: f64, threshold: f64, detail: impl Into<String>) -> Check {
        Check { name: name.into(), value, threshold, pass: value >= threshold, detail: detail.into() }
    }
}

/// Scientific output of an experiment; contains nothing that depends on the host or timing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Report {
    pub experiment: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    pub columns: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub row_labels: Option<Vec<String>>,
    pub rows: Vec<Vec<f64>>,
    pub summaries: Vec<Summary>,
    pub ks: Vec<KsResult>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Report {
    fn new(experiment: Experiment, cfg: &ExperimentConfig, columns: &[&str]) -> Report {
        Report {
            experiment: experiment.name().into(),
            seed: cfg.seed,
            config: cfg.clone(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            row_labels: None,
            rows: Vec::new(),
            summaries: Vec::new(),
            ks: Vec::new(),
            checks: Vec::new(),
            notes: vec!["finite-n thresholds are engineering calibrations".into()],
        }
    }

    pub fn all_pass(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Per-replicate (or per-shape) rows with a header line.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        let mut header: Vec<String> = Vec::new();
        if self.row_labels.is_some() {
            header.push("label".into());
        } else {
            header.push("replicate".into());
        }
        header.extend(self.columns.iter().cloned());
        writeln!(w, "{}", header.join(","))?;
        for (r, row) in self.rows.iter().enumerate() {
            let first = match &self.row_labels {
                Some(l) => format!("\"{}\"", l[r].replace('"', "\"\"")),
                None => r.to_string(),
            };
            let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            writeln!(w, "{},{}", first, cells.join(","))?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Experiments

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Experiment {
    Donsker,
    Ratio,
    VarianceAveraging,
    SpineLln,
    GeigerIdentity,
    CrtFunctional,
}

impl Experiment {
    pub const ALL: [Experiment; 6] = [
        Experiment::Donsker,
        Experiment::Ratio,
        Experiment::VarianceAveraging,
        Experiment::SpineLln,
        Experiment::GeigerIdentity,
        Experiment::CrtFunctional,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::Donsker => "donsker",
            Experiment::Ratio => "ratio",
            Experiment::VarianceAveraging => "variance-averaging",
            Experiment::SpineLln => "spine-lln",
            Experiment::GeigerIdentity => "geiger-identity",
            Experiment::CrtFunctional => "crt-functional",
        }
    }

    pub fn run(self, cfg: &ExperimentConfig) -> Result<Report, StatsError> {
        cfg.validate()?;
        match self {
            Experiment::Donsker => donsker_experiment(cfg),
            Experiment::Ratio => ratio_experiment(cfg),
            Experiment::VarianceAveraging => variance_averaging_experiment(cfg),
            Experiment::SpineLln => spine_lln_experiment(cfg),
            Experiment::GeigerIdentity => geiger_identity_experiment(cfg),
            Experiment::CrtFunctional => crt_functional_experiment(cfg),
        }
    }
}

fn rng_for(cfg: &ExperimentConfig, exp: Experiment, path: &[u64]) -> SimRng {
    let mut full = vec![tag(exp.name())];
    full.extend_from_slice(path);
    substream(cfg.seed, &full)
}

fn explored_path(env: &EnvStream, n: usize, rng: &mut SimRng) -> (crate::tree::Forest, ExplorationPath) {
    let f = sample_explored_prefix(env, n, rng);
    let p = dfs_encode(&f, None);
    (f, p)
}

fn frequency(xs: &[f64], pred: impl Fn(f64) -> bool) -> f64 {
    xs.iter().filter(|&&x| pred(x)).count() as f64 / xs.len() as f64
}

/// Rescaled Łukasiewicz path and its reflection at the end of the path and on a time grid.
pub fn donsker_experiment(cfg: &ExperimentConfig) -> Result<Report, StatsError> {
    let exp = Experiment::Donsker;
    let env = cfg.env()?;
    let sigma2 = cfg.sigma2(&env);
    let sigma = sigma2.sqrt();
    let n = cfg.n;
    let scale = sigma * (n as f64).sqrt();
    let grid = &cfg.params.time_grid;
    let half = n / 2;

    let rows: Vec<Vec<f64>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let env = cfg.replicate_env(&env, 0, r);
            let mut rng = rng_for(cfg, exp, &[r]);
            let (_, p) = explored_path(&env, n, &mut rng);
            let mut row = vec![p.x[n] as f64 / scale, p.reflected(n) as f64 / scale, p.x[half] as f64 / (n as f64).sqrt()];
            row.extend(grid.iter().map(|&t| p.x[(t * n as f64).floor() as usize] as f64 / scale));
            row
        })
        .collect();

    let mut cols = vec!["x_end".to_string(), "reflected_end".into(), "x_half_unscaled".into()];
    cols.extend(grid.iter().map(|t| format!("x_t{t}")));
    let mut rep = Report::new(exp, cfg, &[]);
    rep.columns = cols;
    rep.rows = rows;

    let x = rep.column("x_end").unwrap();
    let refl = rep.column("reflected_end").unwrap();
    let xh = rep.column("x_half_unscaled").unwrap();
    let tol = cfg.params.tolerance.unwrap_or(0.05);
    let reps = x.len();
    let ks_x = ks_statistic(&x, normal_cdf)?;
    let ks_r = ks_statistic(&refl, half_normal_cdf)?;
    rep.ks.push(KsResult { name: "x_end vs normal".into(), statistic: ks_x, p_value: kolmogorov_pvalue(ks_x, reps as f64), sizes: vec![reps] });
    rep.ks.push(KsResult { name: "reflected_end vs half-normal".into(), statistic: ks_r, p_value: kolmogorov_pvalue(ks_r, reps as f64), sizes: vec![reps] });
    rep.checks.push(Check::below("ks_x_end", ks_x, tol, "KS distance of X_n/(sigma sqrt n) to N(0,1)"));
    rep.checks.push(Check::below("ks_reflected_end", ks_r, tol, "KS distance of (X_n-I_n)/(sigma sqrt n) to |N(0,1)|"));

    let half_var = Summary::of("", &xh).se.powi(2) * reps as f64;
    rep.checks.push(Check::below(
        "half_time_variance",
        (half_var / (sigma2 / 2.0) - 1.0).abs(),
        0.1,
        format!("relative error of Var(X_(n/2)/sqrt n) = {half_var} against sigma^2/2"),
    ));
    // E[(X_n / sqrt n)^2] against sigma^2
    let sq: Vec<f64> = x.iter().map(|v| v * v * sigma2).collect();
    let s = Summary::of("x_end_squared_unscaled", &sq);
    rep.checks.push(Check::below(
        "second_moment",
        (s.mean - sigma2).abs() / s.se,
        3.0,
        format!("|E[X_n^2/n] - sigma^2| in standard errors (mean {})", s.mean),
    ));
    rep.summaries = rep.columns.iter().map(|c| Summary::of(c, &rep.column(c).unwrap())).collect();
    rep.summaries.push(s);
    Ok(rep)
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    sab / (saa * sbb).sqrt()
}

/// Discrepancy between the height process and the rescaled reflected path.
pub fn ratio_experiment(cfg: &ExperimentConfig) -> Result<Report, StatsError> {
    let exp = Experiment::Ratio;
    let env = cfg.env()?;
    let sigma2 = cfg.sigma2(&env);
    let ns = cfg.params.n_values.clone().unwrap_or_else(|| vec![cfg.n / 100, cfg.n / 10, cfg.n]);
    if ns.iter().any(|&m| m < 10) {
        return Err(StatsError::BadConfig("every path length must be at least 10".into()));
    }
    let eps = cfg.params.eps;
    let last = ns.len() - 1;

    let rows: Vec<Vec<f64>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let env = cfg.replicate_env(&env, 0, r);
            let mut row = Vec::with_capacity(ns.len() + 2);
            let mut tail = (0.0, 0.0);
            for (j, &m) in ns.iter().enumerate() {
                let mut rng = rng_for(cfg, exp, &[r, j as u64]);
                let (_, p) = explored_path(&env, m, &mut rng);
                row.push(p.height_discrepancy(sigma2));
                if j == last {
                    let h: Vec<f64> = p.h.iter().map(|&v| v as f64).collect();
                    let x: Vec<f64> = (0..p.len()).map(|k| 2.0 * p.reflected(k) as f64 / sigma2).collect();
                    tail = (pearson(&h, &x), bad_vertices(&p, eps, sigma2).fraction);
                }
            }
            row.push(tail.0);
            row.push(tail.1);
            row
        })
        .collect();

    let mut rep = Report::new(exp, cfg, &[]);
    rep.columns = ns.iter().map(|m| format!("discrepancy_n{m}")).collect();
    rep.columns.push("correlation".into());
    rep.columns.push("bad_fraction".into());
    rep.rows = rows;
    rep.summaries = rep.columns.iter().map(|c| Summary::of(c, &rep.column(c).unwrap())).collect();

    let medians: Vec<f64> = rep.summaries[..ns.len()].iter().map(|s| s.median).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    rep.checks.push(Check {
        name: "median_discrepancy_decreasing".into(),
        value: if decreasing { 1.0 } else { 0.0 },
        threshold: 1.0,
        pass: decreasing,
        detail: format!("medians {medians:?} at n = {ns:?}"),
    });
    let min_freq = cfg.params.min_frequency.unwrap_or(0.9);
    let bad = rep.column("bad_fraction").unwrap();
    rep.checks.push(Check::at_least(
        "bad_fraction_below_eps",
        frequency(&bad, |b| b < eps),
        min_freq,
        format!("share of replicates with eps-bad fraction < {eps} at n = {}", ns[last]),
    ));
    Ok(rep)
}

/// Average of `sigma^2` along the height process, plus the share of good blocks.
pub fn variance_averaging_experiment(cfg: &ExperimentConfig) -> Result<Report, StatsError> {
    let exp = Experiment::VarianceAveraging;
    let env = cfg.env()?;
    let sigma2 = cfg.sigma2(&env);
    let n = cfg.n;
    let p = &cfg.params;

    let rows: Vec<Vec<f64>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let env = cfg.replicate_env(&env, 0, r);
            let mut rng = rng_for(cfg, exp, &[r]);
            let (f, path) = explored_path(&env, n, &mut rng);
            let avg = path.h.iter().map(|&h| env.variance(u64::from(h))).sum::<f64>() / n as f64;
            let table = blocks(&f, &env, n, p.delta, p.gamma, sigma2, p.eps)?;
            Ok(vec![avg, (avg - sigma2).abs(), table.good_fraction()])
        })
        .collect::<Result<_, ExploreError>>()?;

    let mut rep = Report::new(exp, cfg, &["average_variance", "deviation", "good_block_fraction"]);
    rep.rows = rows;
    rep.summaries = rep.columns.iter().map(|c| Summary::of(c, &rep.column(c).unwrap())).collect();
    let tol = p.tolerance.unwrap_or(0.05);
    let min_freq = p.min_frequency.unwrap_or(0.9);
    let dev = rep.column("deviation").unwrap();
    rep.checks.push(Check::at_least(
        "deviation_within_tolerance",
        frequency(&dev, |d| d < tol),
        min_freq,
        format!("share of replicates with |avg sigma^2_H - {sigma2}| < {tol}"),
    ));
    Ok(rep)
}

/// Law of large numbers for the spine statistic `(1/n) sum zeta_k`.
pub fn spine_lln_experiment(cfg: &ExperimentConfig) -> Result<Report, StatsError> {
    let exp = Experiment::SpineLln;
    let env = cfg.env()?;
    let sigma2 = cfg.sigma2(&env);
    let n = cfg.n;

    let rows: Vec<Vec<f64>> = (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let env = cfg.replicate_env(&env, 0, r);
            let mut rng = rng_for(cfg, exp, &[r]);
            let avg = spine_sum(&env, n, &mut rng)? as f64 / n as f64;
            let exact = env.variance_sum(0, n as u64) / (2.0 * n as f64);
            Ok(vec![avg, (avg - sigma2 / 2.0).abs(), exact])
        })
        .collect::<Result<_, EnvError>>()?;

    let mut rep = Report::new(exp, cfg, &["spine_average", "deviation", "exact_mean"]);
    rep.rows = rows;
    rep.summaries = rep.columns.iter().map(|c| Summary::of(c, &rep.column(c).unwrap())).collect();
    let tol = cfg.params.tolerance.unwrap_or(0.03);
    let min_freq = cfg.params.min_frequency.unwrap_or(0.95);
    let dev = rep.column("deviation").unwrap();
    rep.checks.push(Check::at_least(
        "deviation_within_tolerance",
        frequency(&dev, |d| d < tol),
        min_freq,
        format!("share of replicates with |avg zeta - {}| < {tol}", sigma2 / 2.0),
    ));
    Ok(rep)
}

/// Every profile of child counts at heights `< depth` with positive probability,
/// with its probability and the number of vertices at height `depth`.
pub fn enumerate_shapes(env: &EnvStream, depth: usize) -> Result<Vec<(Vec<u32>, f64, u64)>, StatsError> {
    let mut partial: Vec<(Vec<u32>, f64, u64)> = vec![(Vec::new(), 1.0, 1)];
    for h in 0..depth {
        let dist = env.dist(h as u64);
        let support: Vec<u32> = (0..=dist.max_child()).filter(|&c| dist.prob(c) > 0.0).map(|c| c as u32).collect();
        let mut next = Vec::new();
        for (profile, prob, width) in partial {
            // all assignments of child counts to the `width` vertices at height h
            let mut level: Vec<(Vec<u32>, f64, u64)> = vec![(profile, prob, 0)];
            for _ in 0..width {
                let mut grown = Vec::with_capacity(level.len() * support.len());
                for (p, q, w) in &level {
                    for &c in &support {
                        let mut p2 = p.clone();
                        p2.push(c);
                        grown.push((p2, q * dist.prob(c as usize), w + u64::from(c)));
                    }
                }
                if grown.len() > MAX_SHAPES {
                    return Err(StatsError::EnumerationTooLarge { limit: MAX_SHAPES });
                }
                level = grown;
            }
            next.extend(level);
            if next.len() > MAX_SHAPES {
                return Err(StatsError::EnumerationTooLarge { limit: MAX_SHAPES });
            }
        }
        partial = next;
    }
    Ok(partial)
}

fn shape_label(profile: &[u32]) -> String {
    profile.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ")
}

/// Compares `P(T =_m S)` with `P(T* =_m S) / Z_m(S)` for every shape `S`.
pub fn geiger_identity_experiment(cfg: &ExperimentConfig) -> Result<Report, StatsError> {
    let exp = Experiment::GeigerIdentity;
    let env = cfg.env()?;
    if cfg.mode == Mode::Annealed {
        return Err(StatsError::BadConfig("the Geiger identity is checked in a fixed environment".into()));
    }
    let m = cfg.params.depth;
    let shapes = enumerate_shapes(&env, m)?;
    let reps = cfg.replicates;

    let draws: Vec<(Vec<u32>, Vec<u32>)> = (0..reps as u64)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng_for(cfg, exp, &[0, r]);
            let plain = sample_truncated_tree(&env, 0, m, DEFAULT_TREE_CAP, &mut rng)?;
            let mut rng = rng_for(cfg, exp, &[1, r]);
            let spine = sample_geiger(&env, m, DEFAULT_TREE_CAP, &mut rng)?;
            Ok((plain.generation_profile(m), spine.tree.generation_profile(m)))
        })
        .collect::<Result<_, TreeError>>()?;
    let mut plain_counts: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    let mut spine_counts: BTreeMap<Vec<u32>, u64> = BTreeMap::new();
    for (a, b) in draws {
        *plain_counts.entry(a).or_default() += 1;
        *spine_counts.entry(b).or_default() += 1;
    }

    let mut rep = Report::new(
        exp,
        cfg,
        &["width_at_depth", "exact", "plain", "spine_over_width", "se", "difference_in_se"],
    );
    let mut labels = Vec::new();
    let rf = reps as f64;
    let mut worst: f64 = 0.0;
    let mut tested = 0usize;
    for (profile, exact, width) in &shapes {
        let a = *plain_counts.get(profile).unwrap_or(&0) as f64 / rf;
        let b = *spine_counts.get(profile).unwrap_or(&0) as f64 / rf;
        let (ratio, se, z) = if *width == 0 {
            (f64::NAN, f64::NAN, f64::NAN)
        } else {
            let w = *width as f64;
            let se = (a * (1.0 - a) / rf + b * (1.0 - b) / rf / (w * w)).sqrt();
            let diff = (a - b / w).abs();
            let z = if se > 0.0 { diff / se } else if diff == 0.0 { 0.0 } else { f64::INFINITY };
            tested += 1;
            worst = worst.max(z);
            (b / w, se, z)
        };
        labels.push(shape_label(profile));
        rep.rows.push(vec![*width as f64, *exact, a, ratio, se, z]);
    }
    rep.row_labels = Some(labels);
    rep.notes.push(format!(
        "shapes are child counts at heights < {m} in lexicographic order; shapes with no vertex at height {m} are listed but not tested"
    ));
    let unseen = plain_counts.keys().chain(spine_counts.keys()).filter(|k| !shapes.iter().any(|s| &s.0 == *k)).count();
    rep.checks.push(Check::below("observed_shapes_enumerated", unseen as f64, 0.5, "sampled shapes missing from the enumeration"));
    rep.checks.push(Check::below(
        "max_difference_in_se",
        worst,
        cfg.params.tolerance.unwrap_or(4.0),
        format!("largest |P(T=S) - P(T*=S)/Z(S)| over {tested} surviving shapes, in standard errors"),
    ));
    for (label, row) in rep.row_labels.as_ref().unwrap().iter().zip(&rep.rows) {
        if row[0] > 0.0 {
            rep.checks.push(Check::below(&format!("shape [{label}]"), row[5], cfg.params.tolerance.unwrap_or(4.0), "difference in standard errors"));
        }
    }
    Ok(rep)
}

/// Functionals of a conditioned tree: normalized height of a uniform vertex,
/// normalized tree height, and the normalized height process at a uniform time.
fn crt_functionals(t: &crate::tree::PlaneTree, sigma: f64, rng: &mut SimRng) -> [f64; 3] {
    let size = t.len();
    let scale = sigma * (size as f64).sqrt();
    let u = rng.random_range(0..size);
    let v = rng.random_range(0..size);
    let path = dfs_encode(t.as_forest(), None);
    [t.height(u) as f64 / scale, t.tree_height() as f64 / scale, path.h[v] as f64 / scale]
}

const CRT_FUNCTIONALS: [&str; 3] = ["vertex_height", "tree_height", "height_process"];

fn conditioned_sample(
    cfg: &ExperimentConfig,
    env: &EnvStream,
    n: usize,
    side: u64,
) -> Result<Vec<[f64; 3]>, StatsError> {
    let sigma = cfg.sigma2(env).sqrt();
    let opts = ConditionOptions {
        max_size: cfg.params.max_size_factor.map(|f| (f * n as f64).floor() as usize),
        ..Default::default()
    };
    (0..cfg.replicates as u64)
        .into_par_iter()
        .map(|r| {
            let env = cfg.replicate_env(env, side, r);
            let mut rng = rng_for(cfg, Experiment::CrtFunctional, &[side, n as u64, r]);
            let t = conditioned_tree(&env, n, opts, &mut rng)?;
            Ok(crt_functionals(&t, sigma, &mut rng))
        })
        .collect()
}

fn column_of(xs: &[[f64; 3]], j: usize) -> Vec<f64> {
    xs.iter().map(|x| x[j]).collect()
}

/// Quantile of the two-sample KS statistic over random equal splits of `pooled`.
fn permutation_quantile(pooled: &[f64], na: usize, perms: usize, q: f64, rng: &mut SimRng) -> f64 {
    let mut work = pooled.to_vec();
    let mut stats: Vec<f64> = (0..perms)
        .map(|_| {
            work.shuffle(rng);
            let (a, b) = work.split_at(na);
            let mut a = a.to_vec();
            let mut b = b.to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            ks_sorted(&a, &b)
        })
        .collect();
    stats.sort_by(f64::total_cmp);
    quantile(&stats, q)
}

/// Two-sample comparison of conditioned-tree functionals between a test
/// environment and a reference, against a same-law control run.
pub fn crt_functional_experiment(cfg: &ExperimentConfig) -> Result<Report, StatsError> {
    let exp = Experiment::CrtFunctional;
    let env = cfg.env()?;
    let oracle_spec = cfg
        .oracle_env
        .as_ref()
        .ok_or_else(|| StatsError::BadConfig("crt-functional needs oracle_env".into()))?;
    let oracle = EnvStream::new(oracle_spec)?;
    oracle.require_strictly_critical()?;
    let n = cfg.n;

    let test = conditioned_sample(cfg, &env, n, 0)?;
    let reference = conditioned_sample(cfg, &oracle, n, 1)?;
    let control = conditioned_sample(cfg, &oracle, n, 2)?;

    let mut rep = Report::new(exp, cfg, &[]);
    rep.columns = ["test", "reference", "control"]
        .iter()
        .flat_map(|s| CRT_FUNCTIONALS.iter().map(move |f| format!("{s}_{f}")))
        .collect();
    rep.rows = (0..cfg.replicates)
        .map(|r| test[r].iter().chain(&reference[r]).chain(&control[r]).copied().collect())
        .collect();
    rep.summaries = rep.columns.iter().map(|c| Summary::of(c, &rep.column(c).unwrap())).collect();

    let reps = cfg.replicates;
    let n_eff = (reps * reps) as f64 / (2 * reps) as f64;
    let mut perm_rng = rng_for(cfg, exp, &[tag("permutation")]);
    for (j, name) in CRT_FUNCTIONALS.iter().enumerate() {
        let (a, b, c) = (column_of(&test, j), column_of(&reference, j), column_of(&control, j));
        let d = ks_two_sample(&a, &b)?;
        let d_control = ks_two_sample(&b, &c)?;
        let mut pooled = b.clone();
        pooled.extend_from_slice(&c);
        let threshold = permutation_quantile(&pooled, reps, cfg.params.permutations, cfg.params.control_quantile, &mut perm_rng);
        rep.ks.push(KsResult { name: format!("{name}: test vs reference"), statistic: d, p_value: kolmogorov_pvalue(d, n_eff), sizes: vec![reps, reps] });
        rep.ks.push(KsResult { name: format!("{name}: control"), statistic: d_control, p_value: kolmogorov_pvalue(d_control, n_eff), sizes: vec![reps, reps] });
        if j < 2 {
            rep.checks.push(Check::below(
                &format!("ks_{name}"),
                d,
                threshold,
                format!("test vs reference against the {} quantile of the control split distribution", cfg.params.control_quantile),
            ));
        }
    }
    if let Some(n2) = cfg.params.scaling_n {
        let other = conditioned_sample(cfg, &env, n2, 3)?;
        let d = ks_two_sample(&column_of(&test, 0), &column_of(&other, 0))?;
        rep.ks.push(KsResult { name: format!("vertex_height: n={n} vs n={n2}"), statistic: d, p_value: kolmogorov_pvalue(d, n_eff), sizes: vec![reps, reps] });
        rep.checks.push(Check::below("scaling_consistency", d, cfg.params.tolerance.unwrap_or(0.08), "KS between tree-size thresholds"));
    }
    if let Some(f) = cfg.params.max_size_factor {
        rep.notes.push(format!("trees conditioned on {n} <= |T| <= {}", (f * n as f64).floor()));
    }
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    const B: [f64; 3] = [0.5, 0.0, 0.5];
    const G: [f64; 3] = [0.25, 0.5, 0.25];

    fn constant(p: &[f64]) -> EnvSpec {
        EnvSpec::Constant { dist: p.to_vec() }
    }

    fn mixture(seed: u64) -> EnvSpec {
        EnvSpec::Mixture { components: vec![B.to_vec(), G.to_vec()], weights: vec![0.5, 0.5], seed }
    }

    #[test]
    fn ks_examples() {
        let d = ks_statistic(&[0.5; 10], |x| x.clamp(0.0, 1.0)).unwrap();
        assert!((d - 0.5).abs() < 1e-15);
        assert_eq!(ks_statistic(&[], |x| x), Err(StatsError::EmptySample));
        assert_eq!(ks_two_sample(&[], &[1.0]), Err(StatsError::EmptySample));
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(ks_two_sample(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 1.0);
        assert!((ks_two_sample(&[1.0, 3.0], &[2.0, 4.0]).unwrap() - 0.5).abs() < 1e-15);
    }

    /// Direct definition: maximise over a dense set of evaluation points.
    fn brute_two_sample(a: &[f64], b: &[f64]) -> f64 {
        let ecdf = |s: &[f64], x: f64| s.iter().filter(|&&v| v <= x).count() as f64 / s.len() as f64;
        a.iter().chain(b).map(|&x| (ecdf(a, x) - ecdf(b, x)).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn two_sample_matches_definition() {
        let mut rng = substream(1, &[]);
        for _ in 0..50 {
            let a: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..10) as f64).collect();
            let b: Vec<f64> = (0..rng.random_range(1..40)).map(|_| rng.random_range(0..10) as f64).collect();
            assert!((ks_two_sample(&a, &b).unwrap() - brute_two_sample(&a, &b)).abs() < 1e-12);
        }
    }

    #[test]
    fn uniform_samples_pass_ks_at_critical_value() {
        let mut passes = 0;
        for r in 0..200u64 {
            let mut rng = substream(2, &[r]);
            let xs: Vec<f64> = (0..10_000).map(|_| rng.random::<f64>()).collect();
            if ks_statistic(&xs, |x| x).unwrap() < 1.63 / 100.0 {
                passes += 1;
            }
        }
        // expected 99% pass; binomial 200 draws
        assert!(passes >= 193, "passes = {passes}");
    }

    #[test]
    fn distribution_functions() {
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-15);
        assert!((normal_cdf(1.959963984540054) - 0.975).abs() < 1e-10);
        assert!((half_normal_cdf(1.959963984540054) - 0.95).abs() < 1e-10);
        assert_eq!(half_normal_cdf(-1.0), 0.0);
        // Q_KS(1.36) is about 0.049 and Q_KS(1.63) about 0.0098
        assert!((kolmogorov_pvalue(1.36 / 1e3, 1e6) - 0.0494).abs() < 1e-3);
        assert!((kolmogorov_pvalue(1.63 / 1e3, 1e6) - 0.0098).abs() < 1e-3);
        assert_eq!(kolmogorov_pvalue(0.0, 100.0), 1.0);
    }

    #[test]
    fn summary_quantiles() {
        let s = Summary::of("x", &[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!((s.mean, s.median, s.q25, s.q75), (3.0, 3.0, 2.0, 4.0));
        assert!((s.se - (2.5f64 / 5.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let good = r#"{"schema_version":1,"env":{"variant":"constant","dist":[0.5,0,0.5]},"n":100,"replicates":2,"seed":1}"#;
        assert!(ExperimentConfig::from_json(good).is_ok());
        for bad in [
            good.replace("\"n\":100", "\"n\":5"),
            good.replace("\"replicates\":2", "\"replicates\":0"),
            good.replace("\"schema_version\":1", "\"schema_version\":2"),
            good.replace("\"seed\":1", "\"seed\":1,\"bogus\":3"),
            good.replace("[0.5,0,0.5]", "[-1,2]"),
        ] {
            assert!(ExperimentConfig::from_json(&bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn constant_binary_variance_average_is_exact() {
        let mut cfg = ExperimentConfig::new(constant(&B), 2000, 4, 3);
        cfg.params.sigma2 = Some(1.0);
        let rep = Experiment::VarianceAveraging.run(&cfg).unwrap();
        assert!(rep.column("average_variance").unwrap().iter().all(|&v| v == 1.0));
        assert!(rep.column("good_block_fraction").unwrap().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn unit_offspring_spine_sum_vanishes() {
        let cfg = ExperimentConfig::new(constant(&[0.0, 1.0]), 1000, 3, 3);
        let rep = Experiment::SpineLln.run(&cfg).unwrap();
        assert!(rep.column("spine_average").unwrap().iter().all(|&v| v == 0.0));
        assert!(rep.all_pass());
    }

    #[test]
    fn spine_lln_binary() {
        let cfg = ExperimentConfig::new(constant(&B), 100_000, 10, 4);
        let rep = Experiment::SpineLln.run(&cfg).unwrap();
        assert!(rep.column("deviation").unwrap().iter().all(|&d| d < 0.02));
    }

    #[test]
    fn shapes_enumeration() {
        let env = EnvStream::new(&constant(&G)).unwrap();
        let s = enumerate_shapes(&env, 1).unwrap();
        assert_eq!(s.len(), 3);
        let total: f64 = s.iter().map(|x| x.1).sum();
        assert!((total - 1.0).abs() < 1e-15);
        let s2 = enumerate_shapes(&env, 2).unwrap();
        assert_eq!(s2.len(), 1 + 3 + 9);
        assert!((s2.iter().map(|x| x.1).sum::<f64>() - 1.0).abs() < 1e-14);
        let b = EnvStream::new(&constant(&B)).unwrap();
        assert_eq!(enumerate_shapes(&b, 2).unwrap().len(), 1 + 4);
        let mut heavy = vec![0.0; 21];
        heavy[0] = 0.95;
        heavy[20] = 0.05;
        let heavy = EnvStream::new(&constant(&heavy)).unwrap();
        assert_eq!(enumerate_shapes(&heavy, 2), Err(StatsError::EnumerationTooLarge { limit: MAX_SHAPES }));
    }

    #[test]
    fn geiger_identity_binary_and_geometric() {
        let cfg = ExperimentConfig::new(constant(&B), 10, 20_000, 5);
        let rep = Experiment::GeigerIdentity.run(&cfg).unwrap();
        assert!(rep.all_pass(), "{:#?}", rep.checks);
        let labels = rep.row_labels.as_ref().unwrap();
        let two = labels.iter().position(|l| l == "2").unwrap();
        assert_eq!(rep.rows[two][3], 0.5);
        let cfg = ExperimentConfig::new(constant(&G), 10, 20_000, 6);
        let rep = Experiment::GeigerIdentity.run(&cfg).unwrap();
        assert!(rep.all_pass(), "{:#?}", rep.checks);
        let mut deep = ExperimentConfig::new(constant(&G), 10, 5000, 7);
        deep.params.depth = 2;
        assert!(Experiment::GeigerIdentity.run(&deep).unwrap().all_pass());
    }

    #[test]
    fn reports_are_deterministic_and_thread_independent() {
        let mut cfg = ExperimentConfig::new(mixture(7), 500, 8, 11);
        cfg.params.n_values = Some(vec![50, 500]);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        for exp in [Experiment::Donsker, Experiment::Ratio, Experiment::VarianceAveraging, Experiment::SpineLln] {
            let a = one.install(|| exp.run(&cfg)).unwrap().to_json();
            let b = four.install(|| exp.run(&cfg)).unwrap().to_json();
            assert_eq!(a, b, "{}", exp.name());
        }
    }

    #[test]
    fn annealed_mode_changes_environment() {
        let mut cfg = ExperimentConfig::new(mixture(7), 1000, 4, 11);
        let q = Experiment::VarianceAveraging.run(&cfg).unwrap();
        cfg.mode = Mode::Annealed;
        let a = Experiment::VarianceAveraging.run(&cfg).unwrap();
        assert_ne!(q.rows, a.rows);
    }

    #[test]
    fn crt_requires_oracle() {
        let cfg = ExperimentConfig::new(constant(&B), 10, 2, 1);
        assert!(matches!(Experiment::CrtFunctional.run(&cfg), Err(StatsError::BadConfig(_))));
    }

    #[test]
    fn crt_same_law_control() {
        let mut cfg = ExperimentConfig::new(constant(&B), 50, 400, 9);
        cfg.oracle_env = Some(constant(&B));
        cfg.params.permutations = 200;
        let rep = Experiment::CrtFunctional.run(&cfg).unwrap();
        let control = rep.ks.iter().find(|k| k.name == "vertex_height: control").unwrap();
        assert!(control.p_value > 0.01);
        let s = rep.summaries.iter().find(|s| s.name == "test_tree_height").unwrap();
        assert!(s.mean > 0.0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let cfg = ExperimentConfig::new(constant(&B), 100, 3, 1);
        let rep = Experiment::SpineLln.run(&cfg).unwrap();
        let mut out = Vec::new();
        rep.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("replicate,spine_average,deviation,exact_mean"));
        assert_eq!(text.lines().count(), 4);
    }
}
