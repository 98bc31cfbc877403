//! Renormalization: blocks and towns, favored cones and the favored graph,
//! block routes, the woven majority-set scheme and the multiscale path
//! family with its measured constants (B, M, λ).
//!
//! A family on a ball with N points carries O(N²) paths, so paths are never
//! stored. Each pair is resolved on demand to a (group, woven path, entry
//! column, exit column) descriptor; usage counts and length ratios are
//! accumulated from those descriptors in a single streaming pass.

use crate::configuration::{reduce_configuration, reference_cones, ConfigError, Configuration, Point, ReferenceFamily};
use crate::geometry::DoubleCone;
use crate::lattice_graph::{diff, dist, dist2, format_point, GraphError, LatticeBall};
use rayon::prelude::*;
use serde::Serialize;
use std::collections::{HashMap, VecDeque};
use std::io::{self, Write};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("empty block")]
    EmptyBlock,
    #[error("town with scale {h} and side {side} is not sparsely populated (eta = {eta})")]
    NotSparse { h: i64, side: i64, eta: f64 },
    #[error("block centered at {0:?} is unreachable in the favored graph")]
    Unreachable(Point),
    #[error("majority sets need a >= 1 points")]
    ZeroMajority,
    #[error("majority set at column {column} has {found} points, fewer than a = {a}")]
    ShortMajority { column: usize, found: usize, a: usize },
    #[error("no first-jump block for {point:?} at scale {n} within {cap} scale units")]
    NoFirstJump { point: Point, n: u32, cap: f64 },
    #[error("route radius exceeded its cap at scale {n} around {z:?}")]
    RouteCap { n: u32, z: Point },
    #[error("scale step {delta} must be even, exceed max(eta, R0, 4) = {floor} and be divisible by L = {l}")]
    InvalidDelta { delta: i64, floor: f64, l: usize },
    #[error("coordinates too large to pack into an edge key")]
    CoordinateOverflow,
    #[error("configuration is not reduced")]
    NotReduced,
}

/// Z^d ∩ closed cube of side `side` centered at a lattice point.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct Block {
    pub center: Point,
    pub side: i64,
}

impl Block {
    pub fn new(center: Point, side: i64) -> Self {
        Self { center, side }
    }

    /// Lattice half-width ⌊side/2⌋.
    pub fn half(&self) -> i64 {
        self.side / 2
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn len(&self) -> usize {
        ((2 * self.half() + 1) as usize).pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, p: &[i64]) -> bool {
        let w = self.half();
        p.iter().zip(&self.center).all(|(a, c)| (a - c).abs() <= w)
    }

    /// Lexicographically ordered points.
    pub fn points(&self) -> Vec<Point> {
        cube_points(&self.center, self.half())
    }

    /// Largest distance from `x` to a point of the block.
    pub fn max_dist(&self, x: &[i64]) -> f64 {
        let w = self.half();
        let s: i64 = self
            .center
            .iter()
            .zip(x)
            .map(|(c, v)| {
                let a = (c - w - v).abs().max((c + w - v).abs());
                a * a
            })
            .sum();
        (s as f64).sqrt()
    }

    /// Smallest distance from `x` to a point of the block.
    pub fn min_dist(&self, x: &[i64]) -> f64 {
        let w = self.half();
        let s: i64 = self
            .center
            .iter()
            .zip(x)
            .map(|(c, v)| {
                let t = (v - c).abs() - w;
                if t > 0 {
                    t * t
                } else {
                    0
                }
            })
            .sum();
        (s as f64).sqrt()
    }
}

/// Lattice points of `center + [-w, w]^d`, lexicographic.
pub fn cube_points(center: &[i64], w: i64) -> Vec<Point> {
    let d = center.len();
    let mut out = Vec::with_capacity(((2 * w + 1) as usize).pow(d as u32));
    let mut off = vec![-w; d];
    loop {
        out.push(center.iter().zip(&off).map(|(c, o)| c + o).collect());
        let mut k = d;
        loop {
            if k == 0 {
                return out;
            }
            k -= 1;
            if off[k] < w {
                off[k] += 1;
                break;
            }
            off[k] = -w;
        }
    }
}

/// Blocks of side `side` at every center of `h` Z^d.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Town {
    pub h: i64,
    pub side: i64,
    pub dim: usize,
    pub eta: f64,
}

impl Town {
    pub fn new(h: i64, side: i64, dim: usize, eta: f64) -> Self {
        Self { h, side, dim, eta }
    }

    /// Sparsely populated iff η < h/ℓ.
    pub fn is_sparse(&self) -> bool {
        self.eta < self.h as f64 / self.side as f64
    }

    pub fn block(&self, center: Point) -> Block {
        Block::new(center, self.side)
    }

    /// Blocks lying entirely inside the closed ball, lexicographic by center.
    pub fn blocks_inside(&self, center: &[i64], radius: f64) -> Vec<Block> {
        let lo: Vec<i64> = center.iter().map(|c| ((*c as f64 - radius) / self.h as f64).ceil() as i64).collect();
        let hi: Vec<i64> = center.iter().map(|c| ((*c as f64 + radius) / self.h as f64).floor() as i64).collect();
        let mut out = Vec::new();
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return out;
        }
        let mut k_idx = lo.clone();
        loop {
            let c: Point = k_idx.iter().map(|k| k * self.h).collect();
            let b = self.block(c);
            if b.max_dist(center) <= radius {
                out.push(b);
            }
            let mut k = self.dim;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if k_idx[k] < hi[k] {
                    k_idx[k] += 1;
                    break;
                }
                k_idx[k] = lo[k];
            }
        }
    }
}

/// The cone favored by majority in a block, with the per-type counts.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Favored {
    pub index: usize,
    #[serde(skip)]
    pub cone: DoubleCone,
    pub count: usize,
    pub counts: Vec<usize>,
}

/// Majority type of a block under a reduced configuration; ties go to the
/// smallest family index.
pub fn favored_cone(block: &Block, reduced: &Configuration) -> Result<Favored, ChainError> {
    let fam = reduced.family().ok_or(ChainError::NotReduced)?;
    let pts = block.points();
    if pts.is_empty() {
        return Err(ChainError::EmptyBlock);
    }
    let mut counts = vec![0usize; fam.len()];
    for p in &pts {
        counts[reduced.reduced_index(p)?.1] += 1;
    }
    let (index, count) = counts
        .iter()
        .enumerate()
        .fold((0, 0), |best, (i, &c)| if c > best.1 { (i, c) } else { best });
    Ok(Favored {
        index,
        cone: fam.cones()[index].clone(),
        count,
        counts,
    })
}

/// q - p ∈ `cone` for every p in `from` and q in `to` (exact).
///
/// The differences form the lattice cube `(c_to - c_from) + [-2w, 2w]^d`.
/// A nappe of the cone is convex, so corners in one nappe settle the
/// question; a corner outside refutes it; mixed nappes fall back to
/// enumeration.
pub fn block_edge(cone: &DoubleCone, from: &Block, to: &Block) -> bool {
    let w = from.half() + to.half();
    let c = diff(&to.center, &from.center);
    if w == 0 {
        return cone.contains_lattice_offset(&c);
    }
    let d = c.len();
    let mut nappe = 0i8;
    let mut mixed = false;
    let mut corner = vec![0i64; d];
    for mask in 0..(1u32 << d) {
        for k in 0..d {
            corner[k] = c[k] + if mask >> k & 1 == 1 { w } else { -w };
        }
        if !cone.contains_lattice_offset(&corner) {
            return false;
        }
        let s = cone.nappe_of_lattice_offset(&corner);
        if nappe == 0 {
            nappe = s;
        } else if s != nappe {
            mixed = true;
        }
    }
    if !mixed {
        return true;
    }
    cube_points(&c, w).iter().all(|h| cone.contains_lattice_offset(h))
}

/// Undirected block graph of a town restricted to blocks inside a ball.
#[derive(Debug, Clone)]
pub struct FavoredGraph {
    pub town: Town,
    pub blocks: Vec<Block>,
    pub favored: Vec<Favored>,
    pub adj: Vec<Vec<u32>>,
    index: HashMap<Point, usize>,
}

impl FavoredGraph {
    pub fn index_of(&self, center: &[i64]) -> Option<usize> {
        self.index.get(center).copied()
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i].binary_search(&(j as u32)).is_ok()
    }
}

pub fn build_favored_graph(town: &Town, reduced: &Configuration, center: &[i64], radius: f64) -> Result<FavoredGraph, ChainError> {
    let blocks = town.blocks_inside(center, radius);
    let favored = blocks
        .par_iter()
        .map(|b| favored_cone(b, reduced))
        .collect::<Result<Vec<_>, _>>()?;
    favored_graph_from(town, blocks, favored)
}

fn favored_graph_from(town: &Town, blocks: Vec<Block>, favored: Vec<Favored>) -> Result<FavoredGraph, ChainError> {
    if !town.is_sparse() {
        return Err(ChainError::NotSparse {
            h: town.h,
            side: town.side,
            eta: town.eta,
        });
    }
    let n = blocks.len();
    let adj: Vec<Vec<u32>> = (0..n)
        .into_par_iter()
        .map(|i| {
            (0..n)
                .filter(|&j| {
                    j != i
                        && (block_edge(&favored[i].cone, &blocks[i], &blocks[j])
                            || block_edge(&favored[j].cone, &blocks[j], &blocks[i]))
                })
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    let index = blocks.iter().enumerate().map(|(i, b)| (b.center.clone(), i)).collect();
    Ok(FavoredGraph {
        town: town.clone(),
        blocks,
        favored,
        adj,
        index,
    })
}

/// Route through every block inside B_{Δ^n r}(z), staying in the favored
/// graph (which already holds only blocks inside B_{Δ^n R}(z)).
///
/// Greedy: start at the required block nearest z, then repeatedly append
/// the BFS path to the nearest unvisited required block.
pub fn block_route(z: &[i64], n: u32, delta: i64, r: f64, fav: &FavoredGraph) -> Result<Vec<usize>, ChainError> {
    let scale = (delta as f64).powi(n as i32);
    let required: Vec<usize> = (0..fav.blocks.len())
        .filter(|&i| fav.blocks[i].max_dist(z) <= scale * r)
        .collect();
    if required.is_empty() {
        return Ok(Vec::new());
    }
    let mut is_required = vec![false; fav.blocks.len()];
    for &i in &required {
        is_required[i] = true;
    }
    let start = *required
        .iter()
        .min_by(|&&a, &&b| {
            dist2(&fav.blocks[a].center, z)
                .cmp(&dist2(&fav.blocks[b].center, z))
                .then_with(|| a.cmp(&b))
        })
        .expect("nonempty");
    let mut remaining = required.len() - 1;
    let mut done = vec![false; fav.blocks.len()];
    done[start] = true;
    let mut route = vec![start];
    let mut parent = vec![u32::MAX; fav.blocks.len()];
    while remaining > 0 {
        let cur = *route.last().unwrap();
        parent.iter_mut().for_each(|p| *p = u32::MAX);
        parent[cur] = cur as u32;
        let mut queue = VecDeque::from([cur]);
        let mut found = None;
        'bfs: while let Some(u) = queue.pop_front() {
            for &v in &fav.adj[u] {
                let v = v as usize;
                if parent[v] == u32::MAX {
                    parent[v] = u as u32;
                    if is_required[v] && !done[v] {
                        found = Some(v);
                        break 'bfs;
                    }
                    queue.push_back(v);
                }
            }
        }
        let Some(target) = found else {
            let missing = required.iter().find(|&&i| !done[i]).expect("remaining > 0");
            return Err(ChainError::Unreachable(fav.blocks[*missing].center.clone()));
        };
        let mut hop = vec![target];
        let mut v = target;
        while parent[v] as usize != cur {
            v = parent[v] as usize;
            hop.push(v);
        }
        for &b in hop.iter().rev() {
            if is_required[b] && !done[b] {
                done[b] = true;
                remaining -= 1;
            }
            route.push(b);
        }
    }
    Ok(route)
}

/// Majority index used by woven path `w = (i, j)` at column `k`:
/// i on even columns, (i + j) mod a on odd ones.
#[inline]
pub fn woven_index(w: usize, k: usize, a: usize) -> usize {
    let (i, j) = (w / a, w % a);
    if k.is_multiple_of(2) {
        i
    } else {
        (i + j) % a
    }
}

/// The a² woven paths through the route's majority sets, row w = (i, j).
pub fn weave_paths(majority: &[Vec<Point>], a: usize) -> Result<Vec<Vec<Point>>, ChainError> {
    if a == 0 {
        return Err(ChainError::ZeroMajority);
    }
    for (column, m) in majority.iter().enumerate() {
        if m.len() < a {
            return Err(ChainError::ShortMajority {
                column,
                found: m.len(),
                a,
            });
        }
    }
    Ok((0..a * a)
        .map(|w| {
            majority
                .iter()
                .enumerate()
                .map(|(k, m)| m[woven_index(w, k, a)].clone())
                .collect()
        })
        .collect())
}

/// First-jump target: a block of T_n inside x + Γ(x).
#[derive(Debug, Clone, PartialEq)]
pub struct FirstJump {
    pub block: Block,
    /// Largest distance from x to a point of the block.
    pub reach: f64,
}

/// Nearest (by center distance, then lex) block of T_n lying in x + Γ(x)
/// whose points are all at distance >= Δ^{n-1} and > R₀ from x.
pub fn first_jump(config: &Configuration, x: &[i64], n: u32, delta: i64, r0: f64, cap: f64) -> Result<FirstJump, ChainError> {
    let cone = config.cone_at(x)?;
    first_jump_with(&cone, x, n, delta, r0, cap)
}

fn first_jump_with(cone: &DoubleCone, x: &[i64], n: u32, delta: i64, r0: f64, cap: f64) -> Result<FirstJump, ChainError> {
    let h = delta.pow(n);
    let side = delta.pow(n - 1);
    let xs: Vec<f64> = x.iter().map(|&c| c as f64 / h as f64).collect();
    let ball = LatticeBall::new(xs, cap)?;
    let tip = Block::new(x.to_vec(), 1);
    for k in ball.points_by_distance() {
        let block = Block::new(k.iter().map(|c| c * h).collect(), side);
        let min = block.min_dist(x);
        if min < side as f64 || min <= r0 {
            continue;
        }
        if block_edge(cone, &tip, &block) {
            let reach = block.max_dist(x);
            return Ok(FirstJump { block, reach });
        }
    }
    Err(ChainError::NoFirstJump {
        point: x.to_vec(),
        n,
        cap,
    })
}

/// Parameters shared by every scale of a family.
#[derive(Debug, Clone)]
pub struct ChainingSetup {
    pub family: ReferenceFamily,
    pub reduced: Configuration,
    /// L.
    pub l: usize,
    /// Apex of the reduced configuration, ϑ/3.
    pub theta: f64,
    /// Town sparsity constant 3√d / (2 sin(θ/2)).
    pub eta: f64,
    /// Δ.
    pub delta: i64,
}

/// 3√d / (2 sin(θ/2)): beyond this center distance (in block sides), a
/// center inside a cone of apex θ/2 sees whole blocks through apex θ.
pub fn sparsity_constant(dim: usize, theta: f64) -> f64 {
    3.0 * (dim as f64).sqrt() / (2.0 * (theta / 2.0).sin())
}

/// Smallest even integer above max(η, R₀, 4) divisible by L.
pub fn choose_delta(eta: f64, r0: f64, l: usize) -> i64 {
    let floor = eta.max(r0).max(4.0);
    let l = l as i64;
    let step = if l % 2 == 0 { l } else { 2 * l };
    let mut delta = step;
    while delta as f64 <= floor {
        delta += step;
    }
    delta
}

pub fn chaining_setup(config: &Configuration, r0: f64, delta: Option<i64>) -> Result<ChainingSetup, ChainError> {
    let family = reference_cones(config.dim(), config.theta_min())?;
    let reduced = reduce_configuration(config, &family)?;
    let l = family.len();
    let theta = family.apex();
    let eta = sparsity_constant(config.dim(), theta);
    let floor = eta.max(r0).max(4.0);
    let delta = match delta {
        Some(d) => {
            if d % 2 != 0 || (d as f64) <= floor || d % l as i64 != 0 {
                return Err(ChainError::InvalidDelta { delta: d, floor, l });
            }
            d
        }
        None => choose_delta(eta, r0, l),
    };
    Ok(ChainingSetup {
        family,
        reduced,
        l,
        theta,
        eta,
        delta,
    })
}

/// Tuning knobs of the family construction.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyOptions {
    /// Search cap for first jumps, in units of Δ^n.
    pub first_jump_cap: f64,
    /// Cap on the route radius R, as a multiple of r.
    pub route_cap_factor: f64,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self {
            first_jump_cap: 32.0,
            route_cap_factor: 64.0,
        }
    }
}

/// Per-scale measurements.
#[derive(Debug, Clone, Serialize)]
pub struct ScaleStats {
    pub n: u32,
    /// Majority-set size a = max(1, Δ^{d(n-1)}/L).
    pub a: usize,
    /// Smallest untruncated majority count over route blocks.
    pub min_majority: usize,
    /// Measured first-jump radius R₁ in units of Δ^n.
    pub r1: f64,
    /// r = 2√d + R₁.
    pub r: f64,
    /// Largest route radius used, in units of Δ^n.
    pub big_r: f64,
    pub groups: usize,
    pub max_route_len: usize,
    /// K = max over groups of ⌈#pairs / a²⌉.
    pub k: u64,
    /// Largest number of times a block pair recurs along one route.
    pub max_occurrence: usize,
}

/// Measured and a-priori constants of a family.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyStats {
    pub pairs: u64,
    /// Max edges per path.
    pub b: usize,
    /// Max usage of an (unoriented) edge over unordered pairs.
    pub m: u64,
    /// Max of edge length / |x-y| and its reciprocal.
    pub lambda: f64,
    /// Max nodes per path, B + 1.
    pub n_nodes: usize,
    pub distinct_edges: usize,
    /// Largest route radius R over all scales.
    pub r_used: f64,
    pub b_bound: f64,
    pub m_bound: f64,
    pub lambda_bound: f64,
    pub scales: Vec<ScaleStats>,
}

#[derive(Debug, Clone)]
struct Group {
    n: u32,
    z: Point,
    big_r: f64,
    required: usize,
    allowed: usize,
    a: usize,
    /// Majority sets (truncated to a) of the distinct route blocks.
    majority: Vec<Vec<Point>>,
    route: Vec<u32>,
    /// First route column per ball point index, u32::MAX if not resolved.
    column: Vec<u32>,
    pairs: u64,
}

impl Group {
    #[inline]
    fn point(&self, w: usize, k: usize) -> &Point {
        &self.majority[self.route[k] as usize][woven_index(w, k, self.a)]
    }

    fn slot_len(&self, w: usize, k: usize) -> f64 {
        dist(self.point(w, k), self.point(w, k + 1))
    }
}

#[derive(Debug, Clone)]
struct ScaleTables {
    n: u32,
    zs: Vec<Point>,
    words: usize,
    masks: Vec<u64>,
    /// Group id per candidate z, filled on first use.
    group_of: Vec<u32>,
}

/// Implicit path family on a lattice ball.
#[derive(Debug, Clone)]
pub struct PathFamily {
    pub dim: usize,
    pub center: Point,
    pub radius: f64,
    pub r0: f64,
    pub delta: i64,
    pub l: usize,
    pub eta: f64,
    pub stats: FamilyStats,
    points: Vec<Point>,
    scales: Vec<ScaleTables>,
    groups: Vec<Group>,
    usage: HashMap<u128, u32>,
    endpoints_ok: bool,
    config: Configuration,
}

/// One admissible pair as seen by the streaming passes.
#[derive(Debug, Clone, Copy)]
struct PairRef {
    i: usize,
    j: usize,
    group: usize,
    rank: u64,
    d2: i64,
}

fn pack_point(p: &[i64]) -> Result<u64, ChainError> {
    let bits = 64 / p.len() as u32;
    let bias = 1i64 << (bits - 1);
    let mut key = 0u64;
    for &c in p {
        let v = c + bias;
        if v < 0 || (bits < 64 && v >= 1i64 << bits) {
            return Err(ChainError::CoordinateOverflow);
        }
        key = (key << bits) | v as u64;
    }
    Ok(key)
}

fn unpack_point(mut key: u64, dim: usize) -> Point {
    let bits = 64 / dim as u32;
    let bias = 1i64 << (bits - 1);
    let mask = if bits == 64 { u64::MAX } else { (1u64 << bits) - 1 };
    let mut p = vec![0i64; dim];
    for k in (0..dim).rev() {
        p[k] = (key & mask) as i64 - bias;
        key >>= bits;
    }
    p
}

/// Order-independent key of the unoriented edge {u, v}.
pub fn edge_key(u: &[i64], v: &[i64]) -> Result<u128, ChainError> {
    let (a, b) = (pack_point(u)?, pack_point(v)?);
    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
    Ok((lo as u128) << 64 | hi as u128)
}

pub fn edge_from_key(key: u128, dim: usize) -> (Point, Point) {
    (unpack_point((key >> 64) as u64, dim), unpack_point(key as u64, dim))
}

impl PathFamily {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    /// Unoriented edges with their usage counts, in key order.
    pub fn edges(&self) -> Vec<(Point, Point, u32)> {
        let mut keys: Vec<_> = self.usage.iter().map(|(k, v)| (*k, *v)).collect();
        keys.sort_unstable();
        keys.into_iter()
            .map(|(k, v)| {
                let (a, b) = edge_from_key(k, self.dim);
                (a, b, v)
            })
            .collect()
    }

    /// (scale, center z, route radius in units of Δ^n, route length, pairs) per group.
    pub fn group_summaries(&self) -> Vec<(u32, Point, f64, usize, u64)> {
        self.groups
            .iter()
            .map(|g| (g.n, g.z.clone(), g.big_r, g.route.len(), g.pairs))
            .collect()
    }

    pub fn usage_of(&self, u: &[i64], v: &[i64]) -> u32 {
        edge_key(u, v).ok().and_then(|k| self.usage.get(&k).copied()).unwrap_or(0)
    }

    fn scale_of(&self, d2: i64) -> usize {
        let dd = self.delta * self.delta;
        let mut bound = dd;
        let mut s = 0;
        while d2 >= bound {
            bound *= dd;
            s += 1;
        }
        s
    }

    // Streams every admissible pair (i < j, |x - y| > R₀) in lexicographic
    // order with its group and within-group rank.
    fn for_each_pair(&self, mut f: impl FnMut(PairRef)) {
        let mut counters = vec![0u64; self.groups.len()];
        let r02 = self.r0 * self.r0;
        for i in 0..self.points.len() {
            for j in i + 1..self.points.len() {
                let d2 = dist2(&self.points[i], &self.points[j]);
                if (d2 as f64) <= r02 {
                    continue;
                }
                let s = self.scale_of(d2);
                let t = &self.scales[s];
                let zi = first_common(&t.masks, t.words, i, j).expect("a common center always exists");
                let group = t.group_of[zi] as usize;
                let rank = counters[group];
                counters[group] += 1;
                f(PairRef { i, j, group, rank, d2 });
            }
        }
    }

    fn descriptor(&self, p: &PairRef) -> (usize, usize, usize) {
        let g = &self.groups[p.group];
        let w = (p.rank % (g.a * g.a) as u64) as usize;
        (w, g.column[p.i] as usize, g.column[p.j] as usize)
    }

    fn materialize(&self, p: &PairRef) -> Vec<Point> {
        let g = &self.groups[p.group];
        let (w, kx, ky) = self.descriptor(p);
        let mut path = vec![self.points[p.i].clone()];
        if kx <= ky {
            path.extend((kx..=ky).map(|k| g.point(w, k).clone()));
        } else {
            path.extend((ky..=kx).rev().map(|k| g.point(w, k).clone()));
        }
        path.push(self.points[p.j].clone());
        path
    }

    /// Calls `f(x, y, path)` for every admissible pair x < y, lexicographically.
    pub fn for_each_path(&self, mut f: impl FnMut(&Point, &Point, Vec<Point>)) {
        self.for_each_pair(|p| f(&self.points[p.i], &self.points[p.j], self.materialize(&p)));
    }

    /// Path between two ball points; reversed when asked for (y, x).
    pub fn path(&self, x: &[i64], y: &[i64]) -> Option<Vec<Point>> {
        let (a, b, flip) = if x < y { (x, y, false) } else { (y, x, true) };
        let mut out = None;
        self.for_each_pair(|p| {
            if out.is_none() && self.points[p.i] == a && self.points[p.j] == b {
                out = Some(self.materialize(&p));
            }
        });
        out.map(|mut v| {
            if flip {
                v.reverse();
            }
            v
        })
    }

    /// `B= M= lambda=` header, then `x | y | z1 z2 ... zN` per pair.
    pub fn export<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "B={} M={} lambda={}", self.stats.b, self.stats.m, self.stats.lambda)?;
        let mut err = Ok(());
        self.for_each_path(|x, y, path| {
            if err.is_err() {
                return;
            }
            let nodes: Vec<String> = path.iter().map(|p| format_point(p)).collect();
            err = writeln!(out, "{} | {} | {}", format_point(x), format_point(y), nodes.join(" "));
        });
        err
    }
}

fn first_common(masks: &[u64], words: usize, i: usize, j: usize) -> Option<usize> {
    let (a, b) = (&masks[i * words..(i + 1) * words], &masks[j * words..(j + 1) * words]);
    for k in 0..words {
        let m = a[k] & b[k];
        if m != 0 {
            return Some(k * 64 + m.trailing_zeros() as usize);
        }
    }
    None
}

// Sparse table of argmax/argmin slot indices over one row of slot lengths.
struct SlotTables {
    t: usize,
    levels: usize,
    argmax: Vec<u16>,
    argmin: Vec<u16>,
    len: Vec<f64>,
}

impl SlotTables {
    fn build(g: &Group) -> Self {
        let a2 = g.a * g.a;
        let t = g.route.len().saturating_sub(1).max(1);
        let levels = (usize::BITS - t.leading_zeros()) as usize;
        let mut len = vec![0.0; a2 * t];
        let mut argmax = vec![0u16; a2 * t * levels];
        let mut argmin = vec![0u16; a2 * t * levels];
        for w in 0..a2 {
            for k in 0..g.route.len().saturating_sub(1) {
                len[w * t + k] = g.slot_len(w, k);
            }
            let base = w * t * levels;
            for k in 0..t {
                argmax[base + k] = k as u16;
                argmin[base + k] = k as u16;
            }
            for lv in 1..levels {
                let half = 1 << (lv - 1);
                for k in 0..t {
                    let (p, q) = (base + (lv - 1) * t + k, base + (lv - 1) * t + (k + half).min(t - 1));
                    let (mp, mq) = (argmax[p] as usize, argmax[q] as usize);
                    argmax[base + lv * t + k] = if len[w * t + mq] > len[w * t + mp] { mq } else { mp } as u16;
                    let (np, nq) = (argmin[p] as usize, argmin[q] as usize);
                    argmin[base + lv * t + k] = if len[w * t + nq] < len[w * t + np] { nq } else { np } as u16;
                }
            }
        }
        Self {
            t,
            levels,
            argmax,
            argmin,
            len,
        }
    }

    /// (max, min) slot length over slots lo..hi (exclusive), hi > lo.
    fn range(&self, w: usize, lo: usize, hi: usize) -> (f64, f64) {
        let span = hi - lo;
        let lv = (usize::BITS - 1 - span.leading_zeros()) as usize;
        let base = w * self.t * self.levels + lv * self.t;
        let row = &self.len[w * self.t..(w + 1) * self.t];
        let (a, b) = (lo, hi - (1 << lv));
        let mx = row[self.argmax[base + a] as usize].max(row[self.argmax[base + b] as usize]);
        let mn = row[self.argmin[base + a] as usize].min(row[self.argmin[base + b] as usize]);
        (mx, mn)
    }
}

fn ratio(len: f64, d: f64) -> f64 {
    (len / d).max(d / len)
}

/// Builds the family of Theorem-5.14 type on the ball B_radius(center).
pub fn build_path_family(
    config: &Configuration,
    center: &[i64],
    radius: f64,
    delta: Option<i64>,
    r0: f64,
    options: &FamilyOptions,
) -> Result<PathFamily, ChainError> {
    let setup = chaining_setup(config, r0, delta)?;
    let dim = config.dim();
    let delta = setup.delta;
    let ball = LatticeBall::around(center, radius)?;
    let points = ball.points();
    let np = points.len();
    let max_d2 = (0..np)
        .flat_map(|i| (i + 1..np).map(move |j| (i, j)))
        .map(|(i, j)| dist2(&points[i], &points[j]))
        .max()
        .unwrap_or(0);

    // Candidate centers z ∈ Δ^n Z^d and per-point membership masks.
    let mut scales = Vec::new();
    let mut n = 1u32;
    loop {
        let h = delta.pow(n);
        let reach2 = 4 * dim as i64 * h * h;
        let reach = (reach2 as f64).sqrt();
        let zball = LatticeBall::new(center.iter().map(|&c| c as f64 / h as f64).collect(), (radius + reach) / h as f64)?;
        let zs: Vec<Point> = zball.points().into_iter().map(|k| k.iter().map(|c| c * h).collect()).collect();
        let words = zs.len().div_ceil(64);
        let mut masks = vec![0u64; np * words];
        for (i, p) in points.iter().enumerate() {
            for (k, z) in zs.iter().enumerate() {
                if dist2(p, z) <= reach2 {
                    masks[i * words + k / 64] |= 1 << (k % 64);
                }
            }
        }
        scales.push(ScaleTables {
            n,
            group_of: vec![u32::MAX; zs.len()],
            zs,
            words,
            masks,
        });
        if max_d2 < h * h {
            break;
        }
        n += 1;
    }

    let mut fam = PathFamily {
        dim,
        center: center.to_vec(),
        radius,
        r0,
        delta,
        l: setup.l,
        eta: setup.eta,
        stats: FamilyStats {
            pairs: 0,
            b: 0,
            m: 0,
            lambda: 1.0,
            n_nodes: 0,
            distinct_edges: 0,
            r_used: 0.0,
            b_bound: 0.0,
            m_bound: 0.0,
            lambda_bound: 0.0,
            scales: Vec::new(),
        },
        points,
        scales,
        groups: Vec::new(),
        usage: HashMap::new(),
        endpoints_ok: true,
        config: config.clone(),
    };

    // Pass 1: discover groups and their pair counts.
    let mut keys: Vec<(usize, usize)> = Vec::new();
    let mut counts: Vec<u64> = Vec::new();
    {
        let r02 = r0 * r0;
        for i in 0..np {
            for j in i + 1..np {
                let d2 = dist2(&fam.points[i], &fam.points[j]);
                if (d2 as f64) <= r02 {
                    continue;
                }
                let s = fam.scale_of(d2);
                let t = &mut fam.scales[s];
                let zi = first_common(&t.masks, t.words, i, j).expect("both points lie within reach of a center");
                if t.group_of[zi] == u32::MAX {
                    t.group_of[zi] = keys.len() as u32;
                    keys.push((s, zi));
                    counts.push(0);
                }
                counts[t.group_of[zi] as usize] += 1;
            }
        }
    }

    // First jumps per used scale, then routes per group.
    let used_scales: Vec<usize> = {
        let mut v: Vec<usize> = keys.iter().map(|k| k.0).collect();
        v.sort_unstable();
        v.dedup();
        v
    };
    let base_cones = config.cones_at(&fam.points)?;
    let mut scale_stats = Vec::new();
    let mut groups: Vec<Option<Group>> = vec![None; keys.len()];
    for &s in &used_scales {
        let n = fam.scales[s].n;
        let jumps = (0..np)
            .into_par_iter()
            .map(|i| first_jump_with(&base_cones[i], &fam.points[i], n, delta, r0, options.first_jump_cap))
            .collect::<Result<Vec<_>, _>>()?;
        let h = delta.pow(n) as f64;
        let r1 = jumps.iter().map(|j| j.reach / h).fold(0.0, f64::max);
        let r = 2.0 * (dim as f64).sqrt() + r1;
        let a = (delta.pow(dim as u32 * (n - 1)) as usize / setup.l).max(1);
        let town = Town::new(delta.pow(n), delta.pow(n - 1), dim, setup.eta);
        let mut cache: HashMap<Point, Favored> = HashMap::new();
        let mut st = ScaleStats {
            n,
            a,
            min_majority: usize::MAX,
            r1,
            r,
            big_r: 0.0,
            groups: 0,
            max_route_len: 0,
            k: 0,
            max_occurrence: 0,
        };
        for (gid, &(gs, zi)) in keys.iter().enumerate() {
            if gs != s {
                continue;
            }
            let z = fam.scales[s].zs[zi].clone();
            let mut big_r = r;
            let (fav, route) = loop {
                if big_r > r * options.route_cap_factor {
                    return Err(ChainError::RouteCap { n, z });
                }
                let blocks = town.blocks_inside(&z, h * big_r);
                let missing: Vec<Block> = blocks.iter().filter(|b| !cache.contains_key(&b.center)).cloned().collect();
                let fresh = missing
                    .par_iter()
                    .map(|b| favored_cone(b, &setup.reduced))
                    .collect::<Result<Vec<_>, _>>()?;
                for (b, f) in missing.into_iter().zip(fresh) {
                    cache.insert(b.center, f);
                }
                let favored = blocks.iter().map(|b| cache[&b.center].clone()).collect();
                let fav = favored_graph_from(&town, blocks, favored)?;
                match block_route(&z, n, delta, r, &fav) {
                    Ok(route) => break (fav, route),
                    Err(ChainError::Unreachable(_)) => big_r *= 2.0,
                    Err(e) => return Err(e),
                }
            };
            // Distinct route blocks and their truncated majority sets.
            let mut local: HashMap<usize, u32> = HashMap::new();
            let mut majority = Vec::new();
            let mut route_local = Vec::with_capacity(route.len());
            for &b in &route {
                let next = local.len() as u32;
                let id = *local.entry(b).or_insert_with(|| {
                    let fi = fav.favored[b].index;
                    let mut m: Vec<Point> = fav.blocks[b]
                        .points()
                        .into_iter()
                        .filter(|p| setup.reduced.reduced_index(p).map(|x| x.1) == Ok(fi))
                        .collect();
                    st.min_majority = st.min_majority.min(m.len());
                    m.truncate(a);
                    majority.push(m);
                    next
                });
                route_local.push(id);
            }
            if let Some((column, m)) = majority.iter().enumerate().find(|(_, m)| m.len() < a) {
                return Err(ChainError::ShortMajority {
                    column,
                    found: m.len(),
                    a,
                });
            }
            let mut first_col: HashMap<&Point, u32> = HashMap::new();
            for (k, &b) in route.iter().enumerate() {
                first_col.entry(&fav.blocks[b].center).or_insert(k as u32);
            }
            let column: Vec<u32> = jumps
                .iter()
                .map(|jmp| first_col.get(&jmp.block.center).copied().unwrap_or(u32::MAX))
                .collect();
            let mut occ: HashMap<(u32, u32), usize> = HashMap::new();
            for wdw in route.windows(2) {
                let key = (wdw[0].min(wdw[1]) as u32, wdw[0].max(wdw[1]) as u32);
                *occ.entry(key).or_insert(0) += 1;
            }
            st.max_occurrence = st.max_occurrence.max(occ.values().copied().max().unwrap_or(1));
            let required = fav.blocks.iter().filter(|b| b.max_dist(&z) <= h * r).count();
            st.big_r = st.big_r.max(big_r);
            st.groups += 1;
            st.max_route_len = st.max_route_len.max(route.len());
            st.k = st.k.max(counts[gid].div_ceil((a * a) as u64));
            groups[gid] = Some(Group {
                n,
                z,
                big_r,
                required,
                allowed: fav.blocks.len(),
                a,
                majority,
                route: route_local,
                column,
                pairs: counts[gid],
            });
        }
        scale_stats.push(st);
    }
    fam.groups = groups.into_iter().map(|g| g.expect("every key gets a group")).collect();

    // Pass 2: stream the pairs once more, accumulating usage and ratios.
    let tables: Vec<SlotTables> = fam.groups.iter().map(SlotTables::build).collect();
    let mut diffs: Vec<Vec<i32>> = fam.groups.iter().map(|g| vec![0i32; g.a * g.a * g.route.len().max(1)]).collect();
    let mut jump_use: Vec<Vec<u32>> = fam.groups.iter().map(|g| vec![0u32; np * g.a]).collect();
    let mut b_max = 0usize;
    let mut lambda: f64 = 1.0;
    let mut pairs = 0u64;
    let mut endpoints_ok = true;
    fam.for_each_pair(|p| {
        pairs += 1;
        let g = &fam.groups[p.group];
        let (w, kx, ky) = fam.descriptor(&p);
        if kx == u32::MAX as usize || ky == u32::MAX as usize {
            endpoints_ok = false;
            return;
        }
        let d = (p.d2 as f64).sqrt();
        let (lo, hi) = (kx.min(ky), kx.max(ky));
        b_max = b_max.max(hi - lo + 2);
        let t = g.route.len();
        let row = &mut diffs[p.group][w * t..(w + 1) * t];
        if hi > lo {
            row[lo] += 1;
            row[hi] -= 1;
            let (mx, mn) = tables[p.group].range(w, lo, hi);
            lambda = lambda.max(ratio(mx, d)).max(ratio(mn, d));
        }
        let (ix, iy) = (woven_index(w, kx, g.a), woven_index(w, ky, g.a));
        jump_use[p.group][p.i * g.a + ix] += 1;
        jump_use[p.group][p.j * g.a + iy] += 1;
        lambda = lambda
            .max(ratio(dist(&fam.points[p.i], g.point(w, kx)), d))
            .max(ratio(dist(&fam.points[p.j], g.point(w, ky)), d));
    });
    fam.endpoints_ok = endpoints_ok;

    // Merge usage into the global unoriented edge map.
    let mut usage: HashMap<u128, u32> = HashMap::new();
    for (gi, g) in fam.groups.iter().enumerate() {
        let t = g.route.len();
        for w in 0..g.a * g.a {
            let mut run = 0i64;
            for k in 0..t.saturating_sub(1) {
                run += diffs[gi][w * t + k] as i64;
                if run > 0 {
                    *usage.entry(edge_key(g.point(w, k), g.point(w, k + 1))?).or_insert(0) += run as u32;
                }
            }
        }
        for (x, chunk) in jump_use[gi].chunks(g.a).enumerate() {
            for (idx, &c) in chunk.iter().enumerate() {
                if c > 0 {
                    let col = g.column[x] as usize;
                    let q = &g.majority[g.route[col] as usize][idx];
                    *usage.entry(edge_key(&fam.points[x], q)?).or_insert(0) += c;
                }
            }
        }
    }
    let m = usage.values().copied().max().unwrap_or(0) as u64;

    let b_bound = fam
        .groups
        .iter()
        .map(|g| (g.required * g.allowed) as f64 + 2.0)
        .fold(0.0, f64::max);
    let m_bound: f64 = scale_stats
        .iter()
        .map(|s| {
            let ball2 = LatticeBall::new(vec![0.0; dim], 2.0 * s.big_r)
                .map(|b| b.points().len())
                .unwrap_or(0) as f64;
            ball2 * s.k as f64 * (s.max_occurrence + 2 * s.a) as f64
        })
        .sum();
    let r_used = scale_stats.iter().map(|s| s.big_r).fold(0.0, f64::max);
    fam.stats = FamilyStats {
        pairs,
        b: b_max,
        m,
        lambda,
        n_nodes: b_max + 1,
        distinct_edges: usage.len(),
        r_used,
        b_bound,
        m_bound,
        lambda_bound: 2.0 * r_used * delta as f64,
        scales: scale_stats,
    };
    fam.usage = usage;
    Ok(fam)
}

/// Outcome of checking the four properties of a family.
#[derive(Debug, Clone, Serialize)]
pub struct FamilyReport {
    pub b: usize,
    pub m: u64,
    pub lambda: f64,
    pub b_bound: f64,
    pub m_bound: f64,
    pub lambda_bound: f64,
    /// (1) every admissible pair has a path from x to y.
    pub endpoints_ok: bool,
    /// (2) edge counts within the a-priori bound.
    pub edges_ok: bool,
    /// (3) edge usage within the a-priori bound.
    pub usage_ok: bool,
    /// (4) edge lengths comparable to |x - y| within 2RΔ.
    pub lengths_ok: bool,
    /// Every used edge is a directed edge of G(Γ) and longer than R₀.
    pub edges_in_graph: bool,
    pub violations: Vec<String>,
}

impl FamilyReport {
    pub fn all_pass(&self) -> bool {
        self.endpoints_ok && self.edges_ok && self.usage_ok && self.lengths_ok && self.edges_in_graph
    }
}

pub fn verify_path_family(fam: &PathFamily) -> FamilyReport {
    let mut violations = Vec::new();
    let np = fam.points.len();
    let r02 = fam.r0 * fam.r0;
    let expected: u64 = (0..np)
        .map(|i| {
            (i + 1..np)
                .filter(|&j| dist2(&fam.points[i], &fam.points[j]) as f64 > r02)
                .count() as u64
        })
        .sum();
    let endpoints_ok = fam.endpoints_ok && expected == fam.stats.pairs;
    if !endpoints_ok {
        violations.push(format!("paths for {} of {expected} pairs", fam.stats.pairs));
    }
    let mut bad_edges = 0usize;
    let keys: Vec<u128> = fam.usage.keys().copied().collect();
    let bad: Vec<String> = keys
        .par_iter()
        .filter_map(|&k| {
            let (u, v) = edge_from_key(k, fam.dim);
            let ok = dist2(&u, &v) as f64 > r02
                && match (fam.config.cone_at(&u), fam.config.cone_at(&v)) {
                    (Ok(cu), Ok(cv)) => cu.contains_lattice_offset(&diff(&v, &u)) || cv.contains_lattice_offset(&diff(&u, &v)),
                    _ => false,
                };
            (!ok).then(|| format!("edge {} -- {} not in G", format_point(&u), format_point(&v)))
        })
        .collect();
    bad_edges += bad.len();
    let mut bad = bad;
    bad.sort();
    violations.extend(bad.into_iter().take(20));
    let s = &fam.stats;
    let edges_ok = (s.b as f64) <= s.b_bound;
    let usage_ok = (s.m as f64) <= s.m_bound;
    let lengths_ok = s.lambda <= s.lambda_bound;
    if !edges_ok {
        violations.push(format!("B = {} exceeds {}", s.b, s.b_bound));
    }
    if !usage_ok {
        violations.push(format!("M = {} exceeds {}", s.m, s.m_bound));
    }
    if !lengths_ok {
        violations.push(format!("lambda = {} exceeds {}", s.lambda, s.lambda_bound));
    }
    FamilyReport {
        b: s.b,
        m: s.m,
        lambda: s.lambda,
        b_bound: s.b_bound,
        m_bound: s.m_bound,
        lambda_bound: s.lambda_bound,
        endpoints_ok,
        edges_ok,
        usage_ok,
        lengths_ok,
        edges_in_graph: bad_edges == 0,
        violations,
    }
}

/// Independent recount from fully materialized paths; feasible only on
/// small balls.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub pairs: u64,
    pub b: usize,
    pub m: u64,
    pub lambda: f64,
    pub usage: HashMap<u128, u32>,
}

pub fn audit_path_family(fam: &PathFamily) -> Result<Audit, ChainError> {
    let mut usage: HashMap<u128, u32> = HashMap::new();
    let (mut pairs, mut b, mut lambda) = (0u64, 0usize, 1.0f64);
    let mut err = None;
    fam.for_each_path(|x, y, path| {
        pairs += 1;
        b = b.max(path.len() - 1);
        let d = dist(x, y);
        for e in path.windows(2) {
            lambda = lambda.max(ratio(dist(&e[0], &e[1]), d));
            match edge_key(&e[0], &e[1]) {
                Ok(k) => *usage.entry(k).or_insert(0) += 1,
                Err(e) => err = Some(e),
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    let m = usage.values().copied().max().unwrap_or(0) as u64;
    Ok(Audit {
        pairs,
        b,
        m,
        lambda,
        usage,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Direction;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_6};

    #[test]
    fn delta_for_pi_over_six() {
        let eta = sparsity_constant(2, FRAC_PI_6 / 3.0);
        assert!((eta - 24.33).abs() < 0.01, "{eta}");
        assert_eq!(choose_delta(eta, 1.0, 19), 38);
        assert_eq!(choose_delta(3.0, 1.0, 2), 6);
    }

    #[test]
    fn block_geometry() {
        let b = Block::new(vec![10, 0], 4);
        assert_eq!(b.len(), 25);
        assert_eq!(b.points().len(), 25);
        assert!(b.contains(&[12, -2]));
        assert!(!b.contains(&[13, 0]));
        assert_eq!(b.min_dist(&[0, 0]), 8.0);
        assert_eq!(b.max_dist(&[0, 0]), (144.0f64 + 4.0).sqrt());
        assert_eq!(Block::new(vec![3, 3], 1).points(), vec![vec![3, 3]]);
    }

    #[test]
    fn weave_small() {
        let cols: Vec<Vec<Point>> = (0..4).map(|k| (0..2).map(|i| vec![k, i]).collect()).collect();
        let paths = weave_paths(&cols, 2).unwrap();
        let idx: Vec<Vec<i64>> = paths.iter().map(|p| p.iter().map(|q| q[1]).collect()).collect();
        assert_eq!(idx, vec![vec![0, 0, 0, 0], vec![0, 1, 0, 1], vec![1, 1, 1, 1], vec![1, 0, 1, 0]]);
        assert_eq!(weave_paths(&cols, 0), Err(ChainError::ZeroMajority));
    }

    #[test]
    fn edge_keys_round_trip() {
        let k = edge_key(&[-5, 7], &[3, -2]).unwrap();
        assert_eq!(k, edge_key(&[3, -2], &[-5, 7]).unwrap());
        assert_eq!(edge_from_key(k, 2), (vec![-5, 7], vec![3, -2]));
        let k3 = edge_key(&[-1, 0, 9], &[1, 1, 1]).unwrap();
        assert_eq!(edge_from_key(k3, 3), (vec![-1, 0, 9], vec![1, 1, 1]));
    }

    #[test]
    fn first_jump_along_axis() {
        let c = Configuration::constant(DoubleCone::new(Direction::basis(2, 0), FRAC_PI_2).unwrap());
        let j = first_jump(&c, &[0, 0], 1, 38, 1.0, 4.0).unwrap();
        assert_eq!(j.block.center, vec![-38, 0]);
    }
}
