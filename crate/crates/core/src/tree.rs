//! Plane trees, forests and their samplers.
//!
//! Trees are stored as flat arrays in depth-first order: per node the child
//! count, parent, height and next sibling. The first child of `v`, when it
//! exists, is `v + 1`. A [`Forest`] is an ordered sequence of such trees in a
//! single arena; a [`PlaneTree`] is a forest with exactly one root.
//!
//! Generations are sampled left to right (breadth first), so each individual
//! draws its offspring in lexicographic order, and the result is then laid
//! out depth first.

use std::io::{self, Write};
use std::ops::{Deref, Range};

use rand::Rng;
use rand_distr::{Binomial, Distribution};
use thiserror::Error;

use crate::env::{EnvError, EnvStream, OffspringDist};

pub const NONE: u32 = u32::MAX;

/// Default node budget for a single tree.
pub const DEFAULT_TREE_CAP: usize = 10_000_000;
/// Default node budget for a forest.
pub const DEFAULT_FOREST_CAP: usize = 100_000_000;
/// Default number of individuals simulated by [`sample_generation_sizes`].
pub const DEFAULT_POPULATION_CAP: u64 = 100_000_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeError {
    #[error("population cap of {cap} individuals exceeded")]
    PopulationCapExceeded { cap: u64 },
    #[error("node cap of {cap} exceeded")]
    NodeCapExceeded { cap: usize },
    #[error("invalid degree sequence: {0}")]
    InvalidDegreeSequence(String),
    #[error("bad parameters: {0}")]
    BadParameters(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Ordered sequence of plane trees in depth-first layout.
///
/// A forest is `complete` when every node's children are present. Prefixes
/// of a depth-first exploration (see [`sample_explored_prefix`]) are
/// incomplete: the last tree may have announced children that were not
/// visited yet.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Forest {
    child_count: Vec<u32>,
    parent: Vec<u32>,
    height: Vec<u32>,
    next_sibling: Vec<u32>,
    roots: Vec<u32>,
    complete: bool,
}

impl Forest {
    pub fn len(&self) -> usize {
        self.child_count.len()
    }

    pub fn is_empty(&self) -> bool {
        self.child_count.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.complete
    }

    pub fn tree_count(&self) -> usize {
        self.roots.len()
    }

    /// Depth-first labels of the roots.
    pub fn roots(&self) -> &[u32] {
        &self.roots
    }

    /// Node range of tree `i`.
    pub fn tree_range(&self, i: usize) -> Range<usize> {
        let start = self.roots[i] as usize;
        let end = self.roots.get(i + 1).map_or(self.len(), |&r| r as usize);
        start..end
    }

    /// Index of the tree containing node `v`.
    pub fn tree_of(&self, v: usize) -> usize {
        self.roots.partition_point(|&r| r as usize <= v) - 1
    }

    /// Child counts in depth-first order.
    pub fn degrees(&self) -> &[u32] {
        &self.child_count
    }

    pub fn heights(&self) -> &[u32] {
        &self.height
    }

    #[inline]
    pub fn child_count(&self, v: usize) -> usize {
        self.child_count[v] as usize
    }

    #[inline]
    pub fn height(&self, v: usize) -> usize {
        self.height[v] as usize
    }

    #[inline]
    pub fn parent(&self, v: usize) -> Option<usize> {
        opt(self.parent[v])
    }

    #[inline]
    pub fn next_sibling(&self, v: usize) -> Option<usize> {
        opt(self.next_sibling[v])
    }

    pub fn first_child(&self, v: usize) -> Option<usize> {
        (v + 1 < self.len() && self.parent[v + 1] == v as u32).then_some(v + 1)
    }

    /// Children of `v` that are present, left to right.
    pub fn children(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(self.first_child(v), move |&c| self.next_sibling(c))
    }

    /// Position of `v` among its siblings, counted from the left.
    pub fn sibling_rank(&self, v: usize) -> usize {
        match self.parent(v) {
            None => 0,
            Some(p) => self.children(p).position(|c| c == v).expect("child of its parent"),
        }
    }

    /// For every node, its index within its generation across the forest
    /// (the lexicographic label `v_{i,k}` with `i` counted from 0).
    pub fn lex_positions(&self) -> Vec<u32> {
        let mut counter: Vec<u32> = Vec::new();
        self.height
            .iter()
            .map(|&h| {
                let h = h as usize;
                if counter.len() <= h {
                    counter.resize(h + 1, 0);
                }
                counter[h] += 1;
                counter[h] - 1
            })
            .collect()
    }

    /// Node labels grouped by generation, each generation left to right.
    pub fn generations(&self) -> Vec<Vec<u32>> {
        let mut gens: Vec<Vec<u32>> = Vec::new();
        for (v, &h) in self.height.iter().enumerate() {
            let h = h as usize;
            if gens.len() <= h {
                gens.resize_with(h + 1, Vec::new);
            }
            gens[h].push(v as u32);
        }
        gens
    }

    /// Child counts of the nodes at heights `< depth`, in lexicographic order.
    /// Two trees agree up to height `depth` iff their profiles are equal.
    pub fn generation_profile(&self, depth: usize) -> Vec<u32> {
        self.generations()
            .into_iter()
            .take(depth)
            .flatten()
            .map(|v| self.child_count[v as usize])
            .collect()
    }

    /// Rebuilds a complete forest from its depth-first degree sequence.
    pub fn from_degrees(degrees: &[usize]) -> Result<Forest, TreeError> {
        let mut b = DfsBuilder::with_capacity(degrees.len());
        for &d in degrees {
            let d = u32::try_from(d)
                .map_err(|_| TreeError::InvalidDegreeSequence(format!("degree {d} too large")))?;
            b.push(d);
        }
        if !b.at_tree_boundary() {
            return Err(TreeError::InvalidDegreeSequence(
                "sequence ends inside an unfinished tree".into(),
            ));
        }
        Ok(b.finish())
    }

    /// Appends the trees of `other` after the trees of `self`.
    pub fn append(&mut self, other: &Forest) {
        let base = self.len() as u32;
        let shift = |x: u32| if x == NONE { NONE } else { x + base };
        self.child_count.extend_from_slice(&other.child_count);
        self.height.extend_from_slice(&other.height);
        self.parent.extend(other.parent.iter().map(|&p| shift(p)));
        self.next_sibling.extend(other.next_sibling.iter().map(|&s| shift(s)));
        self.roots.extend(other.roots.iter().map(|&r| r + base));
        self.complete = (self.complete || base == 0) && other.complete;
    }

    /// Writes `label parent height children` lines (parent `-1` for roots).
    pub fn write_dump<W: Write>(&self, mut w: W) -> io::Result<()> {
        for v in 0..self.len() {
            let parent = self.parent(v).map_or(-1, |p| p as i64);
            writeln!(w, "{} {} {} {}", v, parent, self.height[v], self.child_count[v])?;
        }
        Ok(())
    }

    /// Space-separated depth-first degree sequence.
    pub fn degree_string(&self) -> String {
        self.child_count.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
    }
}

#[inline]
fn opt(x: u32) -> Option<usize> {
    (x != NONE).then_some(x as usize)
}

/// A forest with exactly one tree.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PlaneTree(Forest);

impl PlaneTree {
    pub fn from_degrees(degrees: &[usize]) -> Result<PlaneTree, TreeError> {
        let f = Forest::from_degrees(degrees)?;
        PlaneTree::try_from(f)
    }

    pub fn as_forest(&self) -> &Forest {
        &self.0
    }

    pub fn into_forest(self) -> Forest {
        self.0
    }

    pub fn tree_height(&self) -> usize {
        self.0.height.iter().copied().max().unwrap_or(0) as usize
    }
}

impl TryFrom<Forest> for PlaneTree {
    type Error = TreeError;

    fn try_from(f: Forest) -> Result<Self, Self::Error> {
        if f.tree_count() != 1 {
            return Err(TreeError::InvalidDegreeSequence(format!(
                "expected one tree, found {}",
                f.tree_count()
            )));
        }
        Ok(PlaneTree(f))
    }
}

impl Deref for PlaneTree {
    type Target = Forest;

    fn deref(&self) -> &Forest {
        &self.0
    }
}

struct Frame {
    node: u32,
    remaining: u32,
    last_child: u32,
}

/// Appends nodes in depth-first order, wiring parents, heights and siblings.
pub struct DfsBuilder {
    forest: Forest,
    stack: Vec<Frame>,
}

impl DfsBuilder {
    pub fn new() -> Self {
        Self::with_capacity(0)
    }

    pub fn with_capacity(n: usize) -> Self {
        let forest = Forest {
            child_count: Vec::with_capacity(n),
            parent: Vec::with_capacity(n),
            height: Vec::with_capacity(n),
            next_sibling: Vec::with_capacity(n),
            roots: Vec::new(),
            complete: true,
        };
        DfsBuilder { forest, stack: Vec::new() }
    }

    fn drop_exhausted(&mut self) {
        while self.stack.last().is_some_and(|f| f.remaining == 0) {
            self.stack.pop();
        }
    }

    /// Height of the next node to be pushed (0 when it starts a new tree).
    pub fn next_height(&mut self) -> u32 {
        self.drop_exhausted();
        self.stack.last().map_or(0, |f| self.forest.height[f.node as usize] + 1)
    }

    /// True when no announced child is pending.
    pub fn at_tree_boundary(&mut self) -> bool {
        self.drop_exhausted();
        self.stack.is_empty()
    }

    pub fn len(&self) -> usize {
        self.forest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forest.is_empty()
    }

    /// Pushes the next node in depth-first order with `children` announced children.
    pub fn push(&mut self, children: u32) -> usize {
        self.drop_exhausted();
        let v = self.forest.len() as u32;
        let f = &mut self.forest;
        match self.stack.last_mut() {
            None => {
                f.roots.push(v);
                f.parent.push(NONE);
                f.height.push(0);
            }
            Some(top) => {
                f.parent.push(top.node);
                f.height.push(f.height[top.node as usize] + 1);
                if top.last_child != NONE {
                    f.next_sibling[top.last_child as usize] = v;
                }
                top.last_child = v;
                top.remaining -= 1;
            }
        }
        f.child_count.push(children);
        f.next_sibling.push(NONE);
        if children > 0 {
            self.stack.push(Frame { node: v, remaining: children, last_child: NONE });
        }
        v as usize
    }

    pub fn finish(mut self) -> Forest {
        let done = self.at_tree_boundary();
        self.forest.complete = done;
        self.forest
    }
}

impl Default for DfsBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Child counts of one tree listed generation by generation, left to right.
#[derive(Clone, Debug, Default)]
struct Generations {
    counts: Vec<u32>,
    starts: Vec<usize>,
}

impl Generations {
    fn len(&self) -> usize {
        self.counts.len()
    }

    /// Emits the tree depth first into `b`, below whatever node `b` expects next.
    fn emit(&self, b: &mut DfsBuilder) {
        let base = b.next_height();
        let mut cursor = self.starts.clone();
        for _ in 0..self.counts.len() {
            let rel = (b.next_height() - base) as usize;
            let idx = cursor[rel];
            cursor[rel] += 1;
            b.push(self.counts[idx]);
        }
    }
}

/// Samples one tree breadth first in environment `env` (root at env index 0).
/// Nodes at relative height `max_depth` get no children drawn.
fn sample_generations<R: Rng + ?Sized>(
    env: &EnvStream,
    max_depth: Option<usize>,
    max_nodes: usize,
    rng: &mut R,
) -> Result<Generations, TreeError> {
    let mut g = Generations::default();
    let mut size = 1usize;
    let mut depth = 0usize;
    loop {
        g.starts.push(g.counts.len());
        if max_depth == Some(depth) {
            g.counts.extend(std::iter::repeat_n(0, size));
            return Ok(g);
        }
        let dist = env.dist(depth as u64);
        let mut next = 0usize;
        for _ in 0..size {
            let c = dist.sample(rng);
            next += c;
            g.counts.push(c as u32);
            if g.counts.len() + next > max_nodes {
                return Err(TreeError::NodeCapExceeded { cap: max_nodes });
            }
        }
        if next == 0 {
            return Ok(g);
        }
        size = next;
        depth += 1;
    }
}

/// Generation sizes `Z_0 = z0, ..., Z_{k_max}` of a BPVE in `env`.
///
/// Small generations draw each individual; large ones draw the multinomial
/// counts of each offspring value, which has the same law.
pub fn sample_generation_sizes<R: Rng + ?Sized>(
    env: &EnvStream,
    z0: u64,
    k_max: usize,
    population_cap: u64,
    rng: &mut R,
) -> Result<Vec<u64>, TreeError> {
    if z0 == 0 {
        return Err(TreeError::BadParameters("z0 must be positive".into()));
    }
    let mut sizes = Vec::with_capacity(k_max + 1);
    sizes.push(z0);
    let mut z = z0;
    let mut simulated = 0u64;
    for k in 0..k_max {
        if z > 0 {
            simulated += z;
            if simulated > population_cap {
                return Err(TreeError::PopulationCapExceeded { cap: population_cap });
            }
            z = offspring_total(env.dist(k as u64), z, rng);
        }
        sizes.push(z);
    }
    Ok(sizes)
}

fn offspring_total<R: Rng + ?Sized>(dist: &OffspringDist, z: u64, rng: &mut R) -> u64 {
    if z <= 64 {
        return (0..z).map(|_| dist.sample(rng) as u64).sum();
    }
    let mut left = z;
    let mut mass = 1.0;
    let mut total = 0u64;
    let probs = dist.probs();
    for (i, &p) in probs.iter().enumerate() {
        if left == 0 {
            break;
        }
        let n_i = if i + 1 == probs.len() || mass <= p {
            left
        } else {
            Binomial::new(left, (p / mass).clamp(0.0, 1.0)).expect("valid binomial").sample(rng)
        };
        total += i as u64 * n_i;
        left -= n_i;
        mass -= p;
    }
    total
}

/// A complete `(mu_{root_height + k})_k`-BPVE family tree.
pub fn sample_tree<R: Rng + ?Sized>(
    env: &EnvStream,
    root_height: u64,
    node_cap: usize,
    rng: &mut R,
) -> Result<PlaneTree, TreeError> {
    let g = sample_generations(&env.shifted(root_height), None, node_cap, rng)?;
    let mut b = DfsBuilder::with_capacity(g.len());
    g.emit(&mut b);
    Ok(PlaneTree(b.finish()))
}

/// The tree restricted to heights `<= max_depth`; nodes at `max_depth` carry no children.
pub fn sample_truncated_tree<R: Rng + ?Sized>(
    env: &EnvStream,
    root_height: u64,
    max_depth: usize,
    node_cap: usize,
    rng: &mut R,
) -> Result<PlaneTree, TreeError> {
    let g = sample_generations(&env.shifted(root_height), Some(max_depth), node_cap, rng)?;
    let mut b = DfsBuilder::with_capacity(g.len());
    g.emit(&mut b);
    let mut f = b.finish();
    f.complete = false;
    Ok(PlaneTree(f))
}

/// Samples i.i.d. trees until the depth-first exploration has visited at
/// least `n` nodes. Every tree begun is sampled completely.
pub fn sample_forest_until<R: Rng + ?Sized>(
    env: &EnvStream,
    n: usize,
    tree_cap: usize,
    forest_cap: usize,
    rng: &mut R,
) -> Result<Forest, TreeError> {
    if n == 0 {
        return Err(TreeError::BadParameters("n must be positive".into()));
    }
    let mut b = DfsBuilder::with_capacity(n);
    while b.len() < n {
        let budget = tree_cap.min(forest_cap.saturating_sub(b.len()));
        let g = sample_generations(env, None, budget, rng).map_err(|e| match e {
            TreeError::NodeCapExceeded { .. } if budget < tree_cap => {
                TreeError::NodeCapExceeded { cap: forest_cap }
            }
            e => e,
        })?;
        g.emit(&mut b);
    }
    Ok(b.finish())
}

/// The first `n` nodes of the depth-first exploration of an infinite
/// sequence of i.i.d. trees, drawing each child count when its node is
/// visited. The last tree is usually unfinished.
pub fn sample_explored_prefix<R: Rng + ?Sized>(env: &EnvStream, n: usize, rng: &mut R) -> Forest {
    let mut b = DfsBuilder::with_capacity(n);
    for _ in 0..n {
        let h = b.next_height();
        let c = env.dist(u64::from(h)).sample(rng);
        b.push(c as u32);
    }
    b.finish()
}

/// Geiger (size-biased spine) tree truncated at height `depth`.
#[derive(Clone, Debug)]
pub struct GeigerTree {
    pub tree: PlaneTree,
    pub depth: usize,
    /// Depth-first labels of the spine vertices `v_0, ..., v_depth`.
    pub spine: Vec<u32>,
    /// Spine offspring counts, one per level `0..depth`.
    pub spine_offspring: Vec<u32>,
    /// Position of `v_{k+1}` among the children of `v_k`, from the left.
    pub spine_rank: Vec<u32>,
}

impl GeigerTree {
    /// Number of children of `v_k` to the right of `v_{k+1}`.
    pub fn zeta(&self, k: usize) -> u32 {
        self.spine_offspring[k] - 1 - self.spine_rank[k]
    }
}

/// Builds the Geiger tree up to height `depth`: the spine vertex at level `k`
/// gets a size-biased number of children, the next spine vertex is uniform
/// among them, and every other child roots an independent BPVE in the
/// environment shifted to its height. Nodes at height `depth` carry no children.
pub fn sample_geiger<R: Rng + ?Sized>(
    env: &EnvStream,
    depth: usize,
    node_cap: usize,
    rng: &mut R,
) -> Result<GeigerTree, TreeError> {
    env.require_strictly_critical()?;
    let biased: Vec<OffspringDist> =
        env.components().iter().map(|d| d.size_biased()).collect::<Result<_, _>>()?;
    let mut spine_offspring = Vec::with_capacity(depth);
    let mut spine_rank = Vec::with_capacity(depth);
    for k in 0..depth {
        let xi = biased[env.component_index(k as u64)].sample(rng) as u32;
        spine_offspring.push(xi);
        spine_rank.push(rng.random_range(0..xi));
    }

    let mut b = DfsBuilder::new();
    let mut spine = Vec::with_capacity(depth + 1);
    let mut budget = node_cap;
    let mut hang = |b: &mut DfsBuilder, level: usize, rng: &mut R| -> Result<(), TreeError> {
        let h = level + 1;
        let g = sample_generations(&env.shifted(h as u64), Some(depth - h), budget, rng)?;
        budget = budget.saturating_sub(g.len());
        g.emit(b);
        Ok(())
    };
    for k in 0..=depth {
        let count = if k < depth { spine_offspring[k] } else { 0 };
        spine.push(b.push(count) as u32);
        if b.len() > node_cap {
            return Err(TreeError::NodeCapExceeded { cap: node_cap });
        }
        if k < depth {
            for _ in 0..spine_rank[k] {
                hang(&mut b, k, rng)?;
            }
        }
    }
    for k in (0..depth).rev() {
        for _ in spine_rank[k] + 1..spine_offspring[k] {
            hang(&mut b, k, rng)?;
        }
    }
    let mut forest = b.finish();
    forest.complete = false;
    Ok(GeigerTree { tree: PlaneTree(forest), depth, spine, spine_offspring, spine_rank })
}

/// Height, width and generation profile of a tree or forest.
#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize)]
pub struct TreeStats {
    pub height: usize,
    pub width: u64,
    pub size: usize,
    pub generation_sizes: Vec<u64>,
    pub tree_count: usize,
}

pub fn tree_stats(f: &Forest) -> TreeStats {
    let mut gens: Vec<u64> = Vec::new();
    for &h in f.heights() {
        let h = h as usize;
        if gens.len() <= h {
            gens.resize(h + 1, 0);
        }
        gens[h] += 1;
    }
    TreeStats {
        height: gens.len().saturating_sub(1),
        width: gens.iter().copied().max().unwrap_or(0),
        size: f.len(),
        generation_sizes: gens,
        tree_count: f.tree_count(),
    }
}
