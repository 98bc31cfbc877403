//! The directed cone graph G(Γ) on lattice balls, undirected connectivity,
//! r-R-connectivity and lattice-point-in-cone searches.

use crate::configuration::{ConfigError, Configuration, Point};
use crate::geometry::{half_cone_contains, DoubleCone, GeometryError};
use rayon::prelude::*;
use std::collections::{BTreeSet, HashMap, VecDeque};
use std::fmt::Write as _;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("point {0:?} is not a vertex of the graph")]
    NotAVertex(Point),
    #[error("inner radius {r} exceeds outer radius {big_r}")]
    RadiusOrder { r: f64, big_r: f64 },
    #[error("no lattice point with the required margin inside the cone within radius {0}")]
    NoLatticePoint(f64),
    #[error("points {0:?} and {1:?} carry different cones")]
    DifferentTypes(Point, Point),
    #[error("no connectivity radius up to the cap {cap} for r = {r} at {center:?}")]
    RadiusCapExceeded { center: Point, r: f64, cap: f64 },
    #[error("invalid radius {0}")]
    InvalidRadius(f64),
}

/// {z ∈ Z^d : |z - center| <= radius}, enumerated lexicographically.
#[derive(Debug, Clone, PartialEq)]
pub struct LatticeBall {
    center: Vec<f64>,
    radius: f64,
}

impl LatticeBall {
    pub fn new(center: Vec<f64>, radius: f64) -> Result<Self, GraphError> {
        if center.is_empty() || center.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::NonFinite.into());
        }
        if !(radius >= 0.0 && radius.is_finite()) {
            return Err(GraphError::InvalidRadius(radius));
        }
        Ok(Self { center, radius })
    }

    pub fn around(x: &[i64], radius: f64) -> Result<Self, GraphError> {
        Self::new(x.iter().map(|&c| c as f64).collect(), radius)
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, z: &[i64]) -> bool {
        dist2_real(z, &self.center) <= self.radius * self.radius
    }

    pub fn points(&self) -> Vec<Point> {
        let d = self.dim();
        let lo: Vec<i64> = self.center.iter().map(|c| (c - self.radius).ceil() as i64).collect();
        let hi: Vec<i64> = self.center.iter().map(|c| (c + self.radius).floor() as i64).collect();
        let mut out = Vec::new();
        if lo.iter().zip(&hi).any(|(l, h)| l > h) {
            return out;
        }
        let mut z = lo.clone();
        loop {
            if self.contains(&z) {
                out.push(z.clone());
            }
            let mut k = d;
            loop {
                if k == 0 {
                    return out;
                }
                k -= 1;
                if z[k] < hi[k] {
                    z[k] += 1;
                    break;
                }
                z[k] = lo[k];
            }
        }
    }

    /// Points ordered by (distance from the center, lexicographic).
    pub fn points_by_distance(&self) -> Vec<Point> {
        let mut pts = self.points();
        sort_by_distance(&mut pts, &self.center);
        pts
    }
}

pub fn dist2_real(z: &[i64], c: &[f64]) -> f64 {
    z.iter().zip(c).map(|(&a, b)| (a as f64 - b) * (a as f64 - b)).sum()
}

pub fn dist2(a: &[i64], b: &[i64]) -> i64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn dist(a: &[i64], b: &[i64]) -> f64 {
    (dist2(a, b) as f64).sqrt()
}

pub fn diff(a: &[i64], b: &[i64]) -> Point {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Stable sort by (distance to `c`, lexicographic); input assumed lexicographic.
pub fn sort_by_distance(pts: &mut [Point], c: &[f64]) {
    pts.sort_by(|a, b| {
        dist2_real(a, c)
            .partial_cmp(&dist2_real(b, c))
            .expect("finite distances")
            .then_with(|| a.cmp(b))
    });
}

/// Comma-joined coordinates, the token format of every text export.
pub fn format_point(p: &[i64]) -> String {
    let mut s = String::new();
    for (i, c) in p.iter().enumerate() {
        if i > 0 {
            s.push(',');
        }
        write!(s, "{c}").unwrap();
    }
    s
}

/// Directed graph with an edge x -> y iff y ∈ x + Γ(x), on a lattice ball.
#[derive(Debug, Clone)]
pub struct ConeGraph {
    points: Vec<Point>,
    index: HashMap<Point, usize>,
    out: Vec<Vec<u32>>,
    inc: Vec<Vec<u32>>,
}

impl ConeGraph {
    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn index_of(&self, x: &[i64]) -> Option<usize> {
        self.index.get(x).copied()
    }

    /// Sorted out-neighbors of vertex `i`.
    pub fn out_neighbors(&self, i: usize) -> &[u32] {
        &self.out[i]
    }

    pub fn in_neighbors(&self, i: usize) -> &[u32] {
        &self.inc[i]
    }

    pub fn edge_count(&self) -> usize {
        self.out.iter().map(Vec::len).sum()
    }

    pub fn has_edge(&self, x: &[i64], y: &[i64]) -> bool {
        match (self.index_of(x), self.index_of(y)) {
            (Some(i), Some(j)) => self.out[i].binary_search(&(j as u32)).is_ok(),
            _ => false,
        }
    }

    /// `x -> y` per line, lexicographic in (x, y).
    pub fn edge_list(&self) -> String {
        let mut s = String::new();
        for (i, outs) in self.out.iter().enumerate() {
            for &j in outs {
                writeln!(s, "{} -> {}", format_point(&self.points[i]), format_point(&self.points[j as usize])).unwrap();
            }
        }
        s
    }
}

pub fn build_graph(config: &Configuration, ball: &LatticeBall) -> Result<ConeGraph, GraphError> {
    if config.dim() != ball.dim() {
        return Err(ConfigError::DimensionMismatch {
            expected: config.dim(),
            found: ball.dim(),
        }
        .into());
    }
    let points = ball.points();
    let cones = config.cones_at(&points)?;
    let out: Vec<Vec<u32>> = (0..points.len())
        .into_par_iter()
        .map(|i| {
            let mut h = vec![0i64; points[i].len()];
            (0..points.len())
                .filter(|&j| {
                    for (k, hk) in h.iter_mut().enumerate() {
                        *hk = points[j][k] - points[i][k];
                    }
                    cones[i].contains_lattice_offset(&h)
                })
                .map(|j| j as u32)
                .collect()
        })
        .collect();
    let mut inc = vec![Vec::new(); points.len()];
    for (i, outs) in out.iter().enumerate() {
        for &j in outs {
            inc[j as usize].push(i as u32);
        }
    }
    let index = points.iter().enumerate().map(|(i, p)| (p.clone(), i)).collect();
    Ok(ConeGraph {
        points,
        index,
        out,
        inc,
    })
}

/// Vertices reachable from `x` by undirected paths staying in B_{r_limit}(x).
pub fn connected_within(g: &ConeGraph, x: &[i64], r_limit: f64) -> Result<BTreeSet<Point>, GraphError> {
    let s = g.index_of(x).ok_or_else(|| GraphError::NotAVertex(x.to_vec()))?;
    let lim2 = r_limit * r_limit;
    let allowed = |j: usize| (dist2(&g.points[j], x) as f64) <= lim2;
    let mut seen = vec![false; g.len()];
    let mut queue = VecDeque::from([s]);
    seen[s] = true;
    let mut nbrs: Vec<u32> = Vec::new();
    while let Some(u) = queue.pop_front() {
        nbrs.clear();
        nbrs.extend_from_slice(&g.out[u]);
        nbrs.extend_from_slice(&g.inc[u]);
        nbrs.sort_unstable();
        nbrs.dedup();
        for &v in &nbrs {
            let v = v as usize;
            if !seen[v] && allowed(v) {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    Ok(seen
        .iter()
        .enumerate()
        .filter(|(_, s)| **s)
        .map(|(i, _)| g.points[i].clone())
        .collect())
}

/// Is every lattice point of B_r(x) joined to x inside B_R(x)?
pub fn check_rr_connected(config: &Configuration, x: &[i64], r: f64, big_r: f64) -> Result<bool, GraphError> {
    if r > big_r {
        return Err(GraphError::RadiusOrder { r, big_r });
    }
    if !(r >= 0.0) {
        return Err(GraphError::InvalidRadius(r));
    }
    let ball = LatticeBall::around(x, big_r)?;
    let points = ball.points();
    let cones = config.cones_at(&points)?;
    Ok(bfs_reaches_all(&points, &cones, x, r))
}

// BFS from x over the implicit undirected graph; stops as soon as every
// target inside B_r(x) is reached.
fn bfs_reaches_all(points: &[Point], cones: &[DoubleCone], x: &[i64], r: f64) -> bool {
    let r2 = r * r;
    let is_target = |p: &Point| (dist2(p, x) as f64) <= r2;
    let mut remaining_targets = points.iter().filter(|p| is_target(p)).count();
    let start = points.iter().position(|p| p.as_slice() == x).expect("x is its own ball's center");
    let mut unvisited: Vec<usize> = (0..points.len()).filter(|&i| i != start).collect();
    let mut queue = VecDeque::from([start]);
    remaining_targets -= 1;
    let d = x.len();
    let mut h = vec![0i64; d];
    let mut g = vec![0i64; d];
    while let Some(u) = queue.pop_front() {
        if remaining_targets == 0 {
            return true;
        }
        let pu = &points[u];
        let mut k = 0;
        while k < unvisited.len() {
            let v = unvisited[k];
            let pv = &points[v];
            for i in 0..d {
                h[i] = pv[i] - pu[i];
                g[i] = -h[i];
            }
            if cones[u].contains_lattice_offset(&h) || cones[v].contains_lattice_offset(&g) {
                if is_target(pv) {
                    remaining_targets -= 1;
                }
                queue.push_back(v);
                unvisited.swap_remove(k);
            } else {
                k += 1;
            }
        }
    }
    remaining_targets == 0
}

/// Smallest R = r * 2^k (k >= 0) making x r-R-connected, up to `cap`.
pub fn connectivity_radius(config: &Configuration, x: &[i64], r: f64, cap: f64) -> Result<f64, GraphError> {
    if !(r > 0.0) {
        return Err(GraphError::InvalidRadius(r));
    }
    let mut big_r = r;
    while big_r <= cap {
        if check_rr_connected(config, x, r, big_r)? {
            return Ok(big_r);
        }
        big_r *= 2.0;
    }
    Err(GraphError::RadiusCapExceeded {
        center: x.to_vec(),
        r,
        cap,
    })
}

/// First y in B_R(x) ∩ Z^d, by (distance, lex), whose closed r-ball lies in x + cone.
pub fn lattice_point_in_cone(cone: &DoubleCone, x: &[f64], r: f64, big_r: f64) -> Result<Point, GraphError> {
    if x.len() != cone.dim() {
        return Err(GeometryError::DimensionMismatch {
            expected: cone.dim(),
            found: x.len(),
        }
        .into());
    }
    let ball = LatticeBall::new(x.to_vec(), big_r)?;
    for y in ball.points_by_distance() {
        let yf: Vec<f64> = y.iter().map(|&c| c as f64).collect();
        if half_cone_contains(cone, r, x, &yf)? {
            return Ok(y);
        }
    }
    Err(GraphError::NoLatticePoint(big_r))
}

/// Radius of the two-edge connection between same-type points at distance < r.
pub fn same_type_radius(r: f64, dim: usize, apex: f64) -> f64 {
    (r + (dim as f64).sqrt()) / apex.sin() + r
}

/// Two-edge path x -> z <- y between points carrying the same cone.
pub fn connect_same_type(config: &Configuration, x: &[i64], y: &[i64]) -> Result<Vec<Point>, GraphError> {
    if x == y {
        return Ok(vec![x.to_vec()]);
    }
    let cone = config.cone_at(x)?;
    if config.cone_at(y)? != cone {
        return Err(GraphError::DifferentTypes(x.to_vec(), y.to_vec()));
    }
    let r = dist(x, y) + 1.0;
    let big_r = same_type_radius(r, x.len(), cone.apex());
    let z = intersection_point(&cone, x, y, big_r)?;
    Ok(vec![x.to_vec(), z, y.to_vec()])
}

// Nearest lattice z (from a, then lex) in (a + cone) ∩ (b + cone) with both
// distances at most `big_r`.
fn intersection_point(cone: &DoubleCone, a: &[i64], b: &[i64], big_r: f64) -> Result<Point, GraphError> {
    let ball = LatticeBall::around(a, big_r)?;
    for z in ball.points_by_distance() {
        if cone.contains_lattice_offset(&diff(&z, a))
            && cone.contains_lattice_offset(&diff(&z, b))
            && dist(&z, b) <= big_r
        {
            return Ok(z);
        }
    }
    Err(GraphError::NoLatticePoint(big_r))
}

/// Radius used for the bank-shot path of [`bank_shot_path`].
pub fn bank_shot_radius(r: f64, dim: usize, apex: f64) -> f64 {
    (2.0 * r + (dim as f64).sqrt()) / apex.sin() + 3.0 * r
}

/// Path from y to x through a witness w ∈ B_r(x) ∩ (x + Γ(y)) of type Γ(y):
/// y -> z <- w -> x. The witness is searched for, and its absence reported.
pub fn bank_shot_path(config: &Configuration, x: &[i64], y: &[i64], r: f64) -> Result<Option<Vec<Point>>, GraphError> {
    let cone = config.cone_at(y)?;
    let near = LatticeBall::around(x, r)?;
    let mut witness = None;
    for w in near.points_by_distance() {
        if (dist2(&w, x) as f64) < r * r && cone.contains_lattice_offset(&diff(&w, x)) && config.cone_at(&w)? == cone {
            witness = Some(w);
            break;
        }
    }
    let Some(w) = witness else {
        return Ok(None);
    };
    if w.as_slice() == y {
        return Ok(Some(vec![y.to_vec(), x.to_vec()]));
    }
    let big_r = (2.0 * r + (x.len() as f64).sqrt()) / cone.apex().sin() + 2.0 * r;
    let z = intersection_point(&cone, &w, y, big_r)?;
    Ok(Some(vec![y.to_vec(), z, w, x.to_vec()]))
}

/// Measured jump bound J for one cone: the largest gap, over lattice points
/// y of the cone within `scan` of the tip that are not of minimal norm, to
/// the nearest lattice point of the cone strictly closer to the tip.
pub fn measure_jump_max(cone: &DoubleCone, scan: f64) -> Result<f64, GraphError> {
    let origin = vec![0i64; cone.dim()];
    let pts: Vec<Point> = LatticeBall::around(&origin, scan)?
        .points()
        .into_iter()
        .filter(|p| cone.contains_lattice_offset(p))
        .collect();
    let Some(min_n2) = pts.iter().map(|p| dist2(p, &origin)).min() else {
        return Ok(0.0);
    };
    let mut worst: f64 = 0.0;
    for y in &pts {
        let n2 = dist2(y, &origin);
        if n2 == min_n2 {
            continue;
        }
        let gap = pts
            .iter()
            .filter(|p| dist2(p, &origin) < n2)
            .map(|p| dist(p, y))
            .fold(f64::INFINITY, f64::min);
        worst = worst.max(gap);
    }
    Ok(worst)
}
