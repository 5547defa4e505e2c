//! Depth-first coding of forests and the diagnostics built on it.
//!
//! For the depth-first sequence of nodes `0, 1, ..., N-1` with child counts
//! `L_n` and heights `H_n`, the Łukasiewicz path is `X_0 = 0`,
//! `X_{n+1} = X_n + L_n - 1`, and `I_n = min_{j <= n} X_j`. The value `X_n`
//! is read before node `n` is visited, so `X_n - I_n` counts the announced
//! but unvisited siblings along the ancestry of node `n`.

use std::io::{self, Write};

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::env::{EnvError, EnvStream};
use crate::tree::{sample_tree, Forest, PlaneTree, TreeError, DEFAULT_TREE_CAP};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExploreError {
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error("retry budget of {budget} attempts exhausted")]
    RetryBudgetExceeded { budget: u64 },
    #[error(transparent)]
    Tree(#[from] TreeError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Łukasiewicz path, running minimum and height process of a forest prefix.
///
/// `l` and `h` have one entry per visited node; `x` and `i` have one more.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExplorationPath {
    pub l: Vec<u32>,
    pub x: Vec<i64>,
    pub i: Vec<i64>,
    pub h: Vec<u32>,
}

impl ExplorationPath {
    /// Number of visited nodes.
    pub fn len(&self) -> usize {
        self.l.len()
    }

    pub fn is_empty(&self) -> bool {
        self.l.is_empty()
    }

    /// Reflected value `X_n - I_n`.
    #[inline]
    pub fn reflected(&self, n: usize) -> i64 {
        self.x[n] - self.i[n]
    }

    /// `sup_{k < N} |H_k - (2/sigma2)(X_k - I_k)| / sqrt(N)`.
    pub fn height_discrepancy(&self, sigma2: f64) -> f64 {
        let scale = 2.0 / sigma2;
        let sup = (0..self.len())
            .map(|k| (self.h[k] as f64 - scale * self.reflected(k) as f64).abs())
            .fold(0.0, f64::max);
        sup / (self.len() as f64).sqrt()
    }

    /// Rows `step,L,X,I,H` for every visited node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "step,L,X,I,H")?;
        for n in 0..self.len() {
            writeln!(w, "{},{},{},{},{}", n, self.l[n], self.x[n], self.i[n], self.h[n])?;
        }
        Ok(())
    }
}

/// Encodes the first `min(limit, |f|)` nodes of `f` in depth-first order.
pub fn dfs_encode(f: &Forest, limit: Option<usize>) -> ExplorationPath {
    let n = limit.map_or(f.len(), |m| m.min(f.len()));
    let l = f.degrees()[..n].to_vec();
    let h = f.heights()[..n].to_vec();
    let mut x = Vec::with_capacity(n + 1);
    let mut i = Vec::with_capacity(n + 1);
    let (mut xv, mut iv) = (0i64, 0i64);
    x.push(xv);
    i.push(iv);
    for &c in &l {
        xv += i64::from(c) - 1;
        iv = iv.min(xv);
        x.push(xv);
        i.push(iv);
    }
    ExplorationPath { l, x, i, h }
}

/// Number of right siblings of `v` and of each of its non-root ancestors,
/// counted from the child counts of the parents.
pub fn spine_statistic(f: &Forest, v: usize) -> i64 {
    let mut total = 0i64;
    let mut cur = v;
    while let Some(p) = f.parent(cur) {
        total += (f.child_count(p) - 1 - f.sibling_rank(cur)) as i64;
        cur = p;
    }
    total
}

/// One `(n, delta, gamma)` block.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Block {
    pub i: usize,
    pub k: usize,
    pub size: usize,
    pub weight: f64,
    pub good: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockTable {
    /// Number of lexicographic roots per block, `ceil(delta sqrt(n))`.
    pub roots_per_block: usize,
    /// Height of each block window, `ceil(gamma sqrt(n))`.
    pub window: usize,
    /// Blocks ordered by `(k, i)`; every index whose roots exist appears.
    pub blocks: Vec<Block>,
}

impl BlockTable {
    pub fn get(&self, i: usize, k: usize) -> Option<&Block> {
        self.blocks.iter().find(|b| b.i == i && b.k == k)
    }

    pub fn good_fraction(&self) -> f64 {
        let nonempty: Vec<_> = self.blocks.iter().filter(|b| b.size > 0).collect();
        if nonempty.is_empty() {
            return 1.0;
        }
        nonempty.iter().filter(|b| b.good).count() as f64 / nonempty.len() as f64
    }
}

/// Partitions the forest into blocks: block `(i, k)` holds the lexicographic
/// vertices `v_{j, kG}` with `iD <= j < (i+1)D` together with their
/// descendants of height `< (k+1)G`. Its weight is the sum of `sigma^2_{h(v)}`
/// over its vertices, and it is `eps`-good when
/// `|W / (|B| sigma2) - 1| <= 16 eps`. Empty blocks count as good.
pub fn blocks(
    f: &Forest,
    env: &EnvStream,
    n: usize,
    delta: f64,
    gamma: f64,
    sigma2: f64,
    eps: f64,
) -> Result<BlockTable, ExploreError> {
    let positive = |x: f64| x.is_finite() && x > 0.0;
    if n == 0 || !positive(delta) || !positive(gamma) || !positive(sigma2) || !positive(eps) {
        return Err(ExploreError::BadParameters(
            "n, delta, gamma, sigma2 and eps must be positive".into(),
        ));
    }
    let root_n = (n as f64).sqrt();
    let d = (delta * root_n).ceil() as usize;
    let g = (gamma * root_n).ceil() as usize;
    let lex = f.lex_positions();

    let mut widths: Vec<usize> = Vec::new();
    for &h in f.heights() {
        let h = h as usize;
        if widths.len() <= h {
            widths.resize(h + 1, 0);
        }
        widths[h] += 1;
    }
    let levels = widths.len().div_ceil(g);
    let mut offsets = Vec::with_capacity(levels + 1);
    offsets.push(0);
    for k in 0..levels {
        let count = widths[k * g].div_ceil(d);
        offsets.push(offsets[k] + count);
    }
    let mut size = vec![0usize; offsets[levels]];
    let mut weight = vec![0.0f64; offsets[levels]];

    let mut path: Vec<usize> = Vec::new();
    for v in 0..f.len() {
        let h = f.height(v);
        path.truncate(h);
        path.push(v);
        let k = h / g;
        let idx = offsets[k] + lex[path[k * g]] as usize / d;
        size[idx] += 1;
        weight[idx] += env.variance(h as u64);
    }

    let mut out = Vec::with_capacity(size.len());
    for k in 0..levels {
        for (i, idx) in (offsets[k]..offsets[k + 1]).enumerate() {
            let (s, w) = (size[idx], weight[idx]);
            let good = s == 0 || (w / (s as f64 * sigma2) - 1.0).abs() <= 16.0 * eps;
            out.push(Block { i, k, size: s, weight: w, good });
        }
    }
    Ok(BlockTable { roots_per_block: d, window: g, blocks: out })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BadVertices {
    pub count: usize,
    pub indices: Vec<usize>,
    /// Bad vertices over all vertices, per height (height 0 is always 0).
    pub per_generation: Vec<f64>,
    /// `count / N` with `N` the number of encoded vertices, roots included.
    pub fraction: f64,
}

/// Vertices `x` of height `h > 0` with `|X~_x / h - sigma2/2| >= eps`.
pub fn bad_vertices(path: &ExplorationPath, eps: f64, sigma2: f64) -> BadVertices {
    let mut indices = Vec::new();
    let mut seen: Vec<usize> = Vec::new();
    let mut bad: Vec<usize> = Vec::new();
    for n in 0..path.len() {
        let h = path.h[n] as usize;
        if seen.len() <= h {
            seen.resize(h + 1, 0);
            bad.resize(h + 1, 0);
        }
        seen[h] += 1;
        if h == 0 {
            continue;
        }
        if (path.reflected(n) as f64 / h as f64 - sigma2 / 2.0).abs() >= eps {
            indices.push(n);
            bad[h] += 1;
        }
    }
    let per_generation = bad.iter().zip(&seen).map(|(&b, &s)| b as f64 / s as f64).collect();
    let count = indices.len();
    let fraction = if path.is_empty() { 0.0 } else { count as f64 / path.len() as f64 };
    BadVertices { count, indices, per_generation, fraction }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Excursion {
    pub start: usize,
    pub end: usize,
    pub length: usize,
    pub tree_index: usize,
}

/// Depth-first intervals `[start, end)` of the trees whose exploration
/// completed within the path, longest first, ties by earlier start.
pub fn excursions(path: &ExplorationPath) -> Vec<Excursion> {
    let roots: Vec<usize> = (0..path.len()).filter(|&n| path.h[n] == 0).collect();
    let mut out: Vec<Excursion> = roots
        .iter()
        .enumerate()
        .filter_map(|(t, &start)| {
            let end = roots.get(t + 1).copied().unwrap_or(path.len());
            (path.x[end] == path.x[start] - 1).then_some(Excursion {
                start,
                end,
                length: end - start,
                tree_index: t,
            })
        })
        .collect();
    out.sort_by(|a, b| b.length.cmp(&a.length).then(a.start.cmp(&b.start)));
    out
}

pub fn write_excursions_csv<W: Write>(exc: &[Excursion], mut w: W) -> io::Result<()> {
    writeln!(w, "start,end,length,tree_index")?;
    for e in exc {
        writeln!(w, "{},{},{},{}", e.start, e.end, e.length, e.tree_index)?;
    }
    Ok(())
}

/// Rejection sampling options for [`conditioned_tree`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionOptions {
    /// Upper size bound; trees larger than this are rejected rather than
    /// reported as runaway. `None` conditions on `|T| >= n` only.
    pub max_size: Option<usize>,
    /// Attempts allowed; defaults to `1e4 * sqrt(n)`.
    pub budget: Option<u64>,
    pub node_cap: usize,
}

impl Default for ConditionOptions {
    fn default() -> Self {
        ConditionOptions { max_size: None, budget: None, node_cap: DEFAULT_TREE_CAP }
    }
}

/// A tree distributed as the BPVE tree conditioned on `|T| >= n`
/// (and `|T| <= max_size` when given), by resampling.
pub fn conditioned_tree<R: Rng + ?Sized>(
    env: &EnvStream,
    n: usize,
    opts: ConditionOptions,
    rng: &mut R,
) -> Result<PlaneTree, ExploreError> {
    if n == 0 || opts.max_size.is_some_and(|m| m < n) {
        return Err(ExploreError::BadParameters("need 1 <= n <= max_size".into()));
    }
    let budget = opts.budget.unwrap_or_else(|| (1e4 * (n as f64).sqrt()).ceil() as u64);
    let cap = opts.max_size.unwrap_or(opts.node_cap);
    for _ in 0..budget {
        match sample_tree(env, 0, cap, rng) {
            Ok(t) if t.len() >= n => return Ok(t),
            Ok(_) => {}
            Err(TreeError::NodeCapExceeded { .. }) if opts.max_size.is_some() => {}
            Err(e) => return Err(e.into()),
        }
    }
    Err(ExploreError::RetryBudgetExceeded { budget })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::OffspringDist;
    use crate::rng::substream;
    use crate::tree::sample_explored_prefix;

    fn hand_forest() -> Forest {
        Forest::from_degrees(&[2, 0, 0, 0]).unwrap()
    }

    fn binary() -> OffspringDist {
        OffspringDist::new(&[0.5, 0.0, 0.5]).unwrap()
    }

    #[test]
    fn encode_hand_forest() {
        let p = dfs_encode(&hand_forest(), None);
        assert_eq!(p.l, vec![2, 0, 0, 0]);
        assert_eq!(p.x, vec![0, 1, 0, -1, -2]);
        assert_eq!(p.i, vec![0, 0, 0, -1, -2]);
        assert_eq!(p.h, vec![0, 1, 1, 0]);
        let single = dfs_encode(&Forest::from_degrees(&[0]).unwrap(), None);
        assert_eq!((single.x, single.h), (vec![0, -1], vec![0]));
        assert_eq!(dfs_encode(&hand_forest(), Some(2)).x, vec![0, 1, 0]);
    }

    #[test]
    fn spine_statistic_hand_values() {
        let f = hand_forest();
        assert_eq!(spine_statistic(&f, 1), 1);
        assert_eq!(spine_statistic(&f, 2), 0);
        assert_eq!(spine_statistic(&f, 0), 0);
        assert_eq!(spine_statistic(&f, 3), 0);
    }

    fn check_path_invariants(f: &Forest, p: &ExplorationPath) {
        for n in 0..p.len() {
            assert_eq!(p.x[n + 1] - p.x[n], i64::from(p.l[n]) - 1);
            assert!(p.i[n + 1] <= p.i[n]);
            assert!(p.reflected(n) >= 0);
            let starts_tree = n == 0 || p.x[n] < p.i[n - 1];
            assert_eq!(p.h[n] == 0, starts_tree, "root characterisation at {n}");
            assert_eq!(spine_statistic(f, n), p.reflected(n), "identity at {n}");
        }
    }

    #[test]
    fn sampled_prefixes_satisfy_identities() {
        let envs = [
            EnvStream::constant(binary()),
            EnvStream::new(&crate::env::EnvSpec::Mixture {
                components: vec![vec![0.5, 0.0, 0.5], vec![0.25, 0.5, 0.25]],
                weights: vec![0.5, 0.5],
                seed: 7,
            })
            .unwrap(),
        ];
        for (e, env) in envs.iter().enumerate() {
            for rep in 0..20u64 {
                let f = sample_explored_prefix(env, 1000, &mut substream(11, &[e as u64, rep]));
                check_path_invariants(&f, &dfs_encode(&f, None));
            }
        }
    }

    #[test]
    fn bad_vertex_hand_values() {
        let p = dfs_encode(&hand_forest(), None);
        let b = bad_vertices(&p, 0.4, 1.0);
        assert_eq!(b.indices, vec![1, 2]);
        assert!(!bad_vertices(&p, 0.6, 1.0).indices.contains(&1));
        assert_eq!(b.fraction, 0.5);
        assert_eq!(b.per_generation, vec![0.0, 1.0]);
        // X~ = 1 at height 1 matches sigma^2/2 with sigma^2 = 2
        let q = dfs_encode(&Forest::from_degrees(&[2, 0, 0]).unwrap(), None);
        assert!(!bad_vertices(&q, 1e-12, 2.0).indices.contains(&1));
    }

    #[test]
    fn excursion_examples() {
        let f = Forest::from_degrees(&[2, 0, 0, 0]).unwrap();
        let e = excursions(&dfs_encode(&f, None));
        assert_eq!(
            e,
            vec![
                Excursion { start: 0, end: 3, length: 3, tree_index: 0 },
                Excursion { start: 3, end: 4, length: 1, tree_index: 1 },
            ]
        );
        let dots = Forest::from_degrees(&[0; 5]).unwrap();
        let e = excursions(&dfs_encode(&dots, None));
        assert_eq!(e.len(), 5);
        assert!(e.windows(2).all(|w| w[0].start < w[1].start));
        // an unfinished tree yields no excursion
        assert!(excursions(&dfs_encode(&f, Some(2))).is_empty());
    }

    #[test]
    fn excursions_partition_completed_trees() {
        let env = EnvStream::constant(binary());
        for rep in 0..20u64 {
            let f = sample_explored_prefix(&env, 2000, &mut substream(12, &[rep]));
            let p = dfs_encode(&f, None);
            let e = excursions(&p);
            let complete = (0..f.tree_count())
                .filter(|&t| {
                    let r = f.tree_range(t);
                    r.end < f.len() || f.is_complete()
                })
                .count();
            assert_eq!(e.len(), complete);
            let total: usize = e.iter().map(|x| x.length).sum();
            let last_start = f.roots()[f.tree_count() - 1] as usize;
            assert_eq!(total, if f.is_complete() { f.len() } else { last_start });
            assert!(e.windows(2).all(|w| w[0].length >= w[1].length));
        }
    }

    #[test]
    fn csv_layout() {
        let mut out = Vec::new();
        dfs_encode(&hand_forest(), None).write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert_eq!(text.lines().next(), Some("step,L,X,I,H"));
        assert_eq!(text.lines().nth(1), Some("0,2,0,0,0"));
        let mut out = Vec::new();
        write_excursions_csv(&excursions(&dfs_encode(&hand_forest(), None)), &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "start,end,length,tree_index\n0,3,3,0\n3,4,1,1\n");
    }

    /// Block membership straight from the definition: walk up to height `kG`
    /// and read the lexicographic index there.
    fn brute_blocks(f: &Forest, d: usize, g: usize) -> std::collections::BTreeMap<(usize, usize), usize> {
        let lex = f.lex_positions();
        let mut out = std::collections::BTreeMap::new();
        for v in 0..f.len() {
            let k = f.height(v) / g;
            let mut a = v;
            while f.height(a) > k * g {
                a = f.parent(a).unwrap();
            }
            *out.entry((lex[a] as usize / d, k)).or_insert(0) += 1;
        }
        out
    }

    #[test]
    fn blocks_match_brute_force() {
        let env = EnvStream::constant(binary());
        // two trees: heights up to 3 in the first
        let f = Forest::from_degrees(&[2, 2, 0, 1, 0, 2, 0, 0, 2, 0, 0]).unwrap();
        let t = blocks(&f, &env, 4, 1.0, 1.0, 1.0, 0.01).unwrap();
        assert_eq!((t.roots_per_block, t.window), (2, 2));
        let brute = brute_blocks(&f, 2, 2);
        for b in &t.blocks {
            assert_eq!(b.size, brute.get(&(b.i, b.k)).copied().unwrap_or(0), "block {:?}", (b.i, b.k));
            assert_eq!(b.weight, b.size as f64);
            assert!(b.good);
        }
        assert_eq!(t.blocks.iter().map(|b| b.size).sum::<usize>(), f.len());
        for rep in 0..10u64 {
            let f = sample_explored_prefix(&env, 3000, &mut substream(13, &[rep]));
            let t = blocks(&f, &env, 400, 0.3, 0.25, 1.0, 0.01).unwrap();
            let brute = brute_blocks(&f, t.roots_per_block, t.window);
            let nonempty: std::collections::BTreeMap<_, _> =
                t.blocks.iter().filter(|b| b.size > 0).map(|b| ((b.i, b.k), b.size)).collect();
            assert_eq!(nonempty, brute);
        }
    }

    #[test]
    fn single_vertex_block() {
        let env = EnvStream::new(&crate::env::EnvSpec::Periodic {
            dists: vec![vec![0.25, 0.5, 0.25], vec![0.5, 0.0, 0.5]],
        })
        .unwrap();
        let f = Forest::from_degrees(&[2, 0, 0]).unwrap();
        let t = blocks(&f, &env, 1, 1.0, 1.0, 0.75, 0.1).unwrap();
        let b = t.get(0, 0).unwrap();
        assert_eq!((b.size, b.weight), (1, 0.5));
        assert!(blocks(&f, &env, 1, 0.0, 1.0, 1.0, 0.1).is_err());
    }

    #[test]
    fn conditioning() {
        let env = EnvStream::constant(binary());
        let mut rng = substream(14, &[]);
        let t = conditioned_tree(&env, 1, ConditionOptions::default(), &mut rng).unwrap();
        assert!(!t.is_empty());
        // binary trees have size 2k+1 with probability Catalan(k) / 2^(2k+1)
        let mut term = 0.5;
        let mut below = 0.0;
        for k in 0..500u32 {
            below += term;
            term *= f64::from(2 * (2 * k + 1)) / f64::from(k + 2) / 4.0;
        }
        let target = 0.125 / (below - 0.5);
        let window = ConditionOptions { max_size: Some(999), ..Default::default() };
        let reps = 40_000;
        let hits =
            (0..reps).filter(|_| conditioned_tree(&env, 2, window, &mut rng).unwrap().len() == 3).count();
        let p = hits as f64 / reps as f64;
        let se = (target * (1.0 - target) / reps as f64).sqrt();
        assert!((p - target).abs() < 3.0 * se, "p = {p}, target = {target}");
        let dead = EnvStream::constant(OffspringDist::dirac(0));
        let opts = ConditionOptions { budget: Some(10), ..Default::default() };
        assert_eq!(
            conditioned_tree(&dead, 2, opts, &mut rng),
            Err(ExploreError::RetryBudgetExceeded { budget: 10 })
        );
        let windowed = ConditionOptions { max_size: Some(50), ..Default::default() };
        for _ in 0..100 {
            let t = conditioned_tree(&env, 20, windowed, &mut rng).unwrap();
            assert!((20..=50).contains(&t.len()));
        }
    }
}
