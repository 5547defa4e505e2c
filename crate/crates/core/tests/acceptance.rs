//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p bpre-core --test acceptance`.

use std::path::PathBuf;
use std::time::{Duration, Instant};

use bpre_core::analysis::{kolmogorov_bounds, survival_exact, survival_probability, variance_exact};
use bpre_core::rng::substream;
use bpre_core::stats::{Experiment, ExperimentConfig, Report};
use bpre_core::tree::sample_generation_sizes;
use bpre_core::{EnvSpec, EnvStream};
use rayon::prelude::*;

const B: [f64; 3] = [0.5, 0.0, 0.5];

fn config(name: &str) -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    ExperimentConfig::from_json(&text).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn constant(p: &[f64]) -> EnvStream {
    EnvStream::new(&EnvSpec::Constant { dist: p.to_vec() }).unwrap()
}

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

/// Runs an experiment and keeps its scientific JSON for the determinism rerun.
struct Runs(Vec<(Experiment, ExperimentConfig, String)>);

impl Runs {
    fn run(&mut self, exp: Experiment, cfg: ExperimentConfig) -> Report {
        let rep = exp.run(&cfg).unwrap_or_else(|e| panic!("{}: {e}", exp.name()));
        self.0.push((exp, cfg, rep.to_json()));
        rep
    }
}

fn criterion_1() -> Outcome {
    let env = constant(&B);
    let mut worst_golden: f64 = 0.0;
    let mut worst_routes: f64 = 0.0;
    for (m, want) in [(1, 0.5), (2, 3.0 / 8.0), (3, 39.0 / 128.0)] {
        let t = survival_exact(&env, m).unwrap();
        worst_golden = worst_golden.max((t.survival_direct - want).abs()).max((t.survival_phi - want).abs());
        worst_routes = worst_routes.max((t.survival_direct - t.survival_phi).abs());
    }
    outcome(
        worst_golden <= 1e-12 && worst_routes <= 1e-10,
        format!("max golden error {worst_golden:.2e} (tol 1e-12), route gap {worst_routes:.2e} (tol 1e-10)"),
    )
}

fn criterion_2() -> Outcome {
    let cases = [
        ("constant", constant(&B), 0.5, 1.0),
        ("mixture", EnvStream::new(&config("mixture.json").env).unwrap(), 0.375, 0.75),
    ];
    let mut pass = true;
    let mut parts = Vec::new();
    for (name, env, c, sigma2) in cases {
        let bad: Vec<usize> = (100..=10_000usize)
            .into_par_iter()
            .filter(|&m| {
                let p = survival_probability(&env, m);
                let (lo, hi) = kolmogorov_bounds(m, c, sigma2).unwrap();
                !(lo <= p && p <= hi)
            })
            .collect();
        pass &= bad.is_empty();
        let m_p = 10_000.0 * survival_probability(&env, 10_000);
        parts.push(format!("{name}: {} violations, m P(h>=m) at 10^4 = {m_p:.4}", bad.len()));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_3() -> Outcome {
    let env = EnvStream::new(&config("periodic.json").env).unwrap();
    let (z0, k1, reps) = (10u64, 20usize, 200_000u64);
    let exact = variance_exact(&env, z0, 0, k1 as u64);
    let finals: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = substream(3, &[r]);
            sample_generation_sizes(&env, z0, k1, u64::MAX, &mut rng).unwrap()[k1] as f64
        })
        .collect();
    let n = reps as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let var = finals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = finals.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    let se = ((m4 - var * var) / n).sqrt();
    let z = (var - exact).abs() / se;
    outcome(z < 4.0, format!("Var(Z_20) = {var:.3} vs exact {exact} ({z:.2} SE, limit 4)"))
}

fn criterion_4(runs: &mut Runs) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["donsker-binary.json", "donsker-mixture.json"] {
        let rep = runs.run(Experiment::Donsker, config(name));
        let kx = rep.check("ks_x_end").unwrap().value;
        let kr = rep.check("ks_reflected_end").unwrap().value;
        pass &= kx < 0.05 && kr < 0.05;
        parts.push(format!("{name}: KS(X) {kx:.4}, KS(X-I) {kr:.4}"));
    }
    outcome(pass, format!("{} (limit 0.05)", parts.join("; ")))
}

fn criterion_5(runs: &mut Runs) -> Outcome {
    let rep = runs.run(Experiment::VarianceAveraging, config("variance-avg-mixture.json"));
    let dev = rep.column("deviation").unwrap();
    let ok = dev.iter().filter(|&&d| d < 0.05).count();
    outcome(ok >= 45, format!("{ok}/50 replicates within 0.05 of 0.75 (need 45)"))
}

fn criterion_6(runs: &mut Runs) -> Outcome {
    let rep = runs.run(Experiment::SpineLln, config("spine-lln-mixture.json"));
    let dev = rep.column("deviation").unwrap();
    let ok = dev.iter().filter(|&&d| d < 0.03).count();
    let worst = dev.iter().copied().fold(0.0, f64::max);
    outcome(ok >= 19, format!("{ok}/20 seeds within 0.03 of 0.375 (need 19), worst {worst:.4}"))
}

fn criterion_7(runs: &mut Runs) -> Outcome {
    let rep = runs.run(Experiment::GeigerIdentity, config("geiger-geometric.json"));
    let labels = rep.row_labels.clone().unwrap();
    let mut pass = true;
    let mut parts = Vec::new();
    for (label, row) in labels.iter().zip(&rep.rows) {
        if row[0] > 0.0 {
            pass &= row[5] < 4.0;
            parts.push(format!("shape [{label}]: {:.4} vs {:.4} ({:.2} SE)", row[2], row[3], row[5]));
        }
    }
    pass &= parts.len() == 2;
    outcome(pass, parts.join("; "))
}

fn criterion_8(runs: &mut Runs) -> Outcome {
    let rep = runs.run(Experiment::Ratio, config("ratio-mixture.json"));
    let medians: Vec<f64> = rep.summaries.iter().take(3).map(|s| s.median).collect();
    let decreasing = medians.windows(2).all(|w| w[1] < w[0]);
    let bad = rep.column("bad_fraction").unwrap();
    let ok = bad.iter().filter(|&&b| b < 0.2).count();
    outcome(
        decreasing && ok >= 45,
        format!(
            "median discrepancy {:.4} > {:.4} > {:.4}: {decreasing}; bad fraction < 0.2 in {ok}/50 (need 45)",
            medians[0], medians[1], medians[2]
        ),
    )
}

fn criterion_9(runs: &mut Runs) -> Outcome {
    let rep = runs.run(Experiment::CrtFunctional, config("crt-mixture.json"));
    let mut pass = true;
    let mut parts = Vec::new();
    for name in ["ks_vertex_height", "ks_tree_height"] {
        let c = rep.check(name).unwrap();
        pass &= c.pass;
        parts.push(format!("{name} {:.4} vs control q99 {:.4}", c.value, c.threshold));
    }
    outcome(pass, parts.join("; "))
}

fn criterion_10(runs: &Runs) -> Outcome {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
    let mut mismatched = Vec::new();
    for (exp, cfg, json) in &runs.0 {
        let again = pool.install(|| exp.run(cfg)).unwrap().to_json();
        if &again != json {
            mismatched.push(exp.name());
        }
    }
    outcome(
        mismatched.is_empty(),
        format!("{} reports rerun on 3 threads, mismatches: {mismatched:?}", runs.0.len()),
    )
}

fn main() {
    let mut runs = Runs(Vec::new());
    let mut results: Vec<(usize, Outcome, Duration, Duration)> = Vec::new();
    let limits = [1, 10, 30, 120, 120, 30, 30, 300, 600].map(Duration::from_secs);
    let mut record = |k: usize, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let limit = limits.get(k - 1).copied().unwrap_or(Duration::MAX);
        let line = (k, o, elapsed, limit);
        println!(
            "criterion {:>2}: {} ({:.1}s) {}",
            line.0,
            if line.1.pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            line.1.detail
        );
        results.push(line);
    };
    record(1, &mut criterion_1);
    record(2, &mut criterion_2);
    record(3, &mut criterion_3);
    record(4, &mut || criterion_4(&mut runs));
    record(5, &mut || criterion_5(&mut runs));
    record(6, &mut || criterion_6(&mut runs));
    record(7, &mut || criterion_7(&mut runs));
    record(8, &mut || criterion_8(&mut runs));
    record(9, &mut || criterion_9(&mut runs));
    record(10, &mut || criterion_10(&runs));

    for (k, _, elapsed, limit) in &results {
        if elapsed > limit {
            println!("criterion {k:>2}: FAIL runtime {:.1}s exceeds budget {:.0}s", elapsed.as_secs_f64(), limit.as_secs_f64());
        }
    }
    let failed: Vec<usize> =
        results.iter().filter(|r| !r.1.pass || r.2 > r.3).map(|r| r.0).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
