//! Continuous kernels and their cube-average discretization ω_h^k,
//! piecewise-constant averages, Monte-Carlo seminorms, convergence tables
//! and Whitney ball families.

use crate::configuration::{mix64, reduce_configuration, reference_cones, ConfigError, Configuration, Point};
use crate::forms::{cone_indicators, custom_kernel, DiscreteKernel, FormsError};
use crate::geometry::{boundary_distance, dot, norm, DoubleCone, Direction, GeometryError};
use crate::lattice_graph::{dist, GraphError, LatticeBall};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::io::{self, Write};
use std::sync::{Arc, RwLock};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContinuumError {
    #[error(transparent)]
    Forms(#[from] FormsError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("quadrature needs at least one point per axis")]
    EmptyQuadrature,
    #[error("spacing h = {0} must be positive")]
    InvalidSpacing(f64),
    #[error("spacings must be strictly decreasing")]
    UnorderedSpacings,
    #[error("{rejected} of {draws} Monte-Carlo draws hit a singular point")]
    TooManySingular { rejected: u64, draws: u64 },
    #[error("unsupported domain: {0}")]
    UnsupportedDomain(String),
    #[error("kappa = {0} must be at least 1")]
    InvalidKappa(f64),
    #[error("region dimension {found} differs from {expected}")]
    DimensionMismatch { expected: usize, found: usize },
}

pub type RealKernelFn = Arc<dyn Fn(&[f64], &[f64]) -> f64 + Send + Sync>;

/// k(s, t) on R^d × R^d.
#[derive(Clone)]
pub enum ContinuousKernel {
    /// |s - t|^{-d-α}.
    Fractional { dim: usize, alpha: f64 },
    /// k ≡ value.
    Constant { dim: usize, value: f64 },
    /// Λ^{-1}(1_{Γ(s)}(t - s) + 1_{Γ(t)}(s - t))|s - t|^{-d-α}, where the
    /// lattice configuration is extended to R^d by rounding to the nearest
    /// lattice point.
    Cone {
        config: Configuration,
        alpha: f64,
        lambda: f64,
    },
    Custom {
        dim: usize,
        alpha: f64,
        lambda: f64,
        symmetric: bool,
        f: RealKernelFn,
    },
}

impl fmt::Debug for ContinuousKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Fractional { dim, alpha } => write!(f, "Fractional(d={dim}, alpha={alpha})"),
            Self::Constant { dim, value } => write!(f, "Constant(d={dim}, {value})"),
            Self::Cone { alpha, lambda, .. } => write!(f, "Cone(alpha={alpha}, Lambda={lambda})"),
            Self::Custom { dim, alpha, .. } => write!(f, "Custom(d={dim}, alpha={alpha})"),
        }
    }
}

fn real_power(s: &[f64], t: &[f64], exponent: f64) -> f64 {
    let d2: f64 = s.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum();
    d2.sqrt().powf(exponent)
}

impl ContinuousKernel {
    pub fn dim(&self) -> usize {
        match self {
            Self::Fractional { dim, .. } | Self::Constant { dim, .. } | Self::Custom { dim, .. } => *dim,
            Self::Cone { config, .. } => config.dim(),
        }
    }

    /// α; the constant kernel reports 1.
    pub fn alpha(&self) -> f64 {
        match self {
            Self::Fractional { alpha, .. } | Self::Cone { alpha, .. } | Self::Custom { alpha, .. } => *alpha,
            Self::Constant { .. } => 1.0,
        }
    }

    pub fn lambda(&self) -> f64 {
        match self {
            Self::Cone { lambda, .. } | Self::Custom { lambda, .. } => *lambda,
            Self::Constant { value, .. } => value.max(1.0 / value).max(1.0),
            Self::Fractional { .. } => 1.0,
        }
    }

    pub fn is_symmetric(&self) -> bool {
        match self {
            Self::Custom { symmetric, .. } => *symmetric,
            _ => true,
        }
    }

    pub fn eval(&self, s: &[f64], t: &[f64]) -> Result<f64, ContinuumError> {
        let d = self.dim() as f64;
        Ok(match self {
            Self::Fractional { alpha, .. } => real_power(s, t, -d - alpha),
            Self::Constant { value, .. } => *value,
            Self::Cone { config, alpha, lambda } => {
                let (gs, gt) = (config.cone_at_real(s)?, config.cone_at_real(t)?);
                real_cone_value(&gs, &gt, s, t, d + alpha, *lambda)
            }
            Self::Custom { f, .. } => f(s, t),
        })
    }
}

fn real_cone_value(gs: &DoubleCone, gt: &DoubleCone, s: &[f64], t: &[f64], exp: f64, lambda: f64) -> f64 {
    let ts: Vec<f64> = t.iter().zip(s).map(|(a, b)| a - b).collect();
    let st: Vec<f64> = ts.iter().map(|v| -v).collect();
    let ind = gs.contains_offset(&ts) as u8 + gt.contains_offset(&st) as u8;
    if ind == 0 {
        0.0
    } else {
        ind as f64 * real_power(s, t, -exp) / lambda
    }
}

/// Tensor midpoint rule with `m` points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub m: usize,
}

impl Default for QuadratureSpec {
    fn default() -> Self {
        Self { m: 4 }
    }
}

impl QuadratureSpec {
    pub fn new(m: usize) -> Result<Self, ContinuumError> {
        if m == 0 {
            return Err(ContinuumError::EmptyQuadrature);
        }
        Ok(Self { m })
    }

    /// Offsets of the m^d nodes inside [-1/2, 1/2)^d.
    pub fn nodes(&self, dim: usize) -> Vec<Vec<f64>> {
        let axis: Vec<f64> = (0..self.m).map(|i| (i as f64 + 0.5) / self.m as f64 - 0.5).collect();
        let mut out = vec![Vec::with_capacity(dim)];
        for _ in 0..dim {
            out = out
                .into_iter()
                .flat_map(|p| {
                    axis.iter().map(move |a| {
                        let mut q = p.clone();
                        q.push(*a);
                        q
                    })
                })
                .collect();
        }
        out
    }
}

// Per-point node cones for cone kernels, filled lazily.
type NodeCache = Arc<RwLock<HashMap<Point, Arc<Vec<DoubleCone>>>>>;

fn node_cones(cache: &NodeCache, config: &Configuration, x: &[i64], h: f64, nodes: &[Vec<f64>]) -> Result<Arc<Vec<DoubleCone>>, ConfigError> {
    if let Some(v) = cache.read().expect("cache lock").get(x) {
        return Ok(v.clone());
    }
    let cones = nodes
        .iter()
        .map(|u| {
            let s: Vec<f64> = x.iter().zip(u).map(|(c, o)| h * (*c as f64 + o)).collect();
            config.cone_at_real(&s)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let v = Arc::new(cones);
    cache.write().expect("cache lock").insert(x.to_vec(), v.clone());
    Ok(v)
}

/// ω_h^k(x, y) = h^{-2d} ∫∫_{A_h(hx) × A_h(hy)} k, by tensor midpoint
/// quadrature of the symmetrized integrand. `x`, `y` are indices in Z^d.
pub fn omega_h(k: &ContinuousKernel, h: f64, q: &QuadratureSpec, x: &[i64], y: &[i64]) -> Result<f64, ContinuumError> {
    let nodes = q.nodes(k.dim());
    omega_h_nodes(k, h, &nodes, x, y, None)
}

fn omega_h_nodes(
    k: &ContinuousKernel,
    h: f64,
    nodes: &[Vec<f64>],
    x: &[i64],
    y: &[i64],
    cache: Option<&NodeCache>,
) -> Result<f64, ContinuumError> {
    let place = |c: &[i64], u: &[f64]| -> Vec<f64> { c.iter().zip(u).map(|(a, o)| h * (*a as f64 + o)).collect() };
    let xs: Vec<Vec<f64>> = nodes.iter().map(|u| place(x, u)).collect();
    let ys: Vec<Vec<f64>> = nodes.iter().map(|u| place(y, u)).collect();
    let mut sum = 0.0;
    match (k, cache) {
        (ContinuousKernel::Cone { config, alpha, lambda }, Some(cache)) => {
            let exp = k.dim() as f64 + alpha;
            let (cx, cy) = (node_cones(cache, config, x, h, nodes)?, node_cones(cache, config, y, h, nodes)?);
            for (i, s) in xs.iter().enumerate() {
                for (j, t) in ys.iter().enumerate() {
                    sum += real_cone_value(&cx[i], &cy[j], s, t, exp, *lambda);
                }
            }
        }
        _ => {
            let sym = k.is_symmetric();
            for s in &xs {
                for t in &ys {
                    sum += if sym {
                        k.eval(s, t)?
                    } else {
                        0.5 * (k.eval(s, t)? + k.eval(t, s)?)
                    };
                }
            }
        }
    }
    Ok(sum / (nodes.len() * nodes.len()) as f64)
}

/// ω_h^k as a discrete kernel on h Z^d (indices); pairs with
/// |x - y| <= √d (in index units) are refused.
pub fn discretize_kernel(k: &ContinuousKernel, h: f64, q: &QuadratureSpec) -> Result<DiscreteKernel, ContinuumError> {
    if !(h > 0.0) {
        return Err(ContinuumError::InvalidSpacing(h));
    }
    let q = QuadratureSpec::new(q.m)?;
    let dim = k.dim();
    let nodes = Arc::new(q.nodes(dim));
    let cache: NodeCache = Arc::new(RwLock::new(HashMap::new()));
    let kk = k.clone();
    let limit = dim as i64;
    let f = move |x: &[i64], y: &[i64]| -> Result<f64, FormsError> {
        let d2: i64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
        if d2 <= limit {
            return Err(FormsError::ExcludedPair(x.to_vec(), y.to_vec()));
        }
        omega_h_nodes(&kk, h, &nodes, x, y, Some(&cache)).map_err(|e| match e {
            ContinuumError::Forms(f) => f,
            ContinuumError::Config(c) => FormsError::Config(c),
            other => FormsError::Unverified(other.to_string()),
        })
    };
    let alpha = k.alpha();
    Ok(custom_kernel(dim, alpha, k.lambda(), h, Arc::new(f))?)
}

/// Apex-shrunk cone attached to each reference cone: V(v, θ') with every
/// lattice point of it inside the √d-half-cone of the reference cone.
#[derive(Debug, Clone, PartialEq)]
pub struct ShrunkFamily {
    pub cones: Vec<DoubleCone>,
    /// ϑ' = smallest shrunk apex.
    pub theta_prime: f64,
}

fn shrink_one(reference: &DoubleCone, dim: usize) -> Result<DoubleCone, ContinuumError> {
    let margin = (dim as f64).sqrt();
    let theta = reference.apex();
    let vm = reference.axis().coords().to_vec();
    // A fixed generic direction for the perturbed candidate.
    let mut w: Vec<f64> = (0..dim).map(|i| ((i + 2) as f64).sqrt().fract() - 0.5).collect();
    let p = dot(&w, &vm);
    w.iter_mut().zip(&vm).for_each(|(a, b)| *a -= p * b);
    let wn = norm(&w);
    let mut candidates = vec![(vm.clone(), 0.0)];
    if wn > 0.0 && dim > 1 {
        let delta = theta / 4.0;
        let v: Vec<f64> = vm.iter().zip(&w).map(|(a, b)| a * delta.cos() + b / wn * delta.sin()).collect();
        candidates.push((v, delta));
    }
    let mut best: Option<DoubleCone> = None;
    for (v, delta) in candidates {
        let phi = (theta - delta) / 2.0;
        let rho = margin / phi.sin();
        let dir = Direction::new(v.clone())?;
        let mut apex = phi;
        for h in LatticeBall::new(vec![0.0; dim], rho)?.points() {
            if h.iter().all(|c| *c == 0) {
                continue;
            }
            let hf: Vec<f64> = h.iter().map(|c| *c as f64).collect();
            let inside = reference.contains_offset(&hf) && boundary_distance(reference, &hf) > margin;
            if !inside {
                let hd = Direction::new(hf)?;
                apex = apex.min(hd.angle_to(&dir)?);
            }
        }
        if apex > 0.0 && best.as_ref().is_none_or(|b| apex > b.apex()) {
            best = Some(DoubleCone::new(dir, apex)?);
        }
    }
    best.ok_or(ContinuumError::Geometry(GeometryError::InvalidApex(0.0)))
}

pub fn shrunk_family(dim: usize, theta_min: f64) -> Result<ShrunkFamily, ContinuumError> {
    let fam = reference_cones(dim, theta_min)?;
    let cones = fam.cones().iter().map(|c| shrink_one(c, dim)).collect::<Result<Vec<_>, _>>()?;
    let theta_prime = cones.iter().map(|c| c.apex()).fold(f64::INFINITY, f64::min);
    Ok(ShrunkFamily { cones, theta_prime })
}

/// C = ((2√d)^{d+2} L²)^{-1}.
pub fn sandwich_constant(dim: usize, l: usize) -> f64 {
    let d = dim as f64;
    1.0 / ((2.0 * d.sqrt()).powf(d + 2.0) * (l * l) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichViolation {
    pub x: Point,
    pub y: Point,
    pub omega: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SandwichReport {
    pub c: f64,
    pub l: usize,
    pub theta_prime: f64,
    pub checked: usize,
    /// Pairs where the shrunk configuration sees the pair.
    pub lower_active: usize,
    pub violations: Vec<SandwichViolation>,
}

/// Checks C Λ^{-1}(1_{Γ'(x)}(y - x) + 1_{Γ'(y)}(x - y))|h(x - y)|^{-d-α}
/// <= ω <= Λ(2√d)^{d+α}|h(x - y)|^{-d-α} on `sample` (indices in Z^d).
///
/// Γ'(x) is the shrunk cone of the reference cone favored by majority over
/// the quadrature nodes of A_h(hx), types taken from `config` extended to
/// R^d by rounding.
pub fn verify_discretized_sandwich(
    omega: &DiscreteKernel,
    config: &Configuration,
    q: &QuadratureSpec,
    sample: &[(Point, Point)],
) -> Result<SandwichReport, ContinuumError> {
    let dim = config.dim();
    let (h, alpha, lambda) = (omega.spacing, omega.alpha, omega.lambda);
    let fam = reference_cones(dim, config.theta_min())?;
    let reduced = reduce_configuration(config, &fam)?;
    let shrunk = shrunk_family(dim, config.theta_min())?;
    let c = sandwich_constant(dim, fam.len());
    let nodes = q.nodes(dim);
    let d = dim as f64;
    let favored = |x: &[i64]| -> Result<usize, ContinuumError> {
        let mut counts = vec![0usize; fam.len()];
        for u in &nodes {
            let s: Point = x.iter().zip(u).map(|(a, o)| (h * (*a as f64 + o) + 0.5).floor() as i64).collect();
            counts[reduced.reduced_index(&s)?.1] += 1;
        }
        Ok(counts.iter().enumerate().fold((0, 0), |b, (i, &n)| if n > b.1 { (i, n) } else { b }).0)
    };
    let rows = sample
        .par_iter()
        .filter(|(x, y)| crate::lattice_graph::dist2(x, y) > dim as i64)
        .map(|(x, y)| -> Result<(bool, Option<SandwichViolation>), ContinuumError> {
            let w = omega.eval(x, y)?;
            let p = (h * dist(x, y)).powf(-d - alpha);
            let (gx, gy) = (&shrunk.cones[favored(x)?], &shrunk.cones[favored(y)?]);
            let ind = cone_indicators(gx, gy, x, y);
            let lower = c / lambda * ind * p;
            let upper = lambda * (2.0 * d.sqrt()).powf(d + alpha) * p;
            let bad = w < lower || w > upper;
            Ok((
                ind > 0.0,
                bad.then(|| SandwichViolation {
                    x: x.clone(),
                    y: y.clone(),
                    omega: w,
                    lower,
                    upper,
                }),
            ))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(SandwichReport {
        c,
        l: fam.len(),
        theta_prime: shrunk.theta_prime,
        checked: rows.len(),
        lower_active: rows.iter().filter(|r| r.0).count(),
        violations: rows.into_iter().filter_map(|r| r.1).collect(),
    })
}

/// A bounded region of R^d.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "lowercase")]
pub enum Domain {
    Ball { center: Vec<f64>, radius: f64 },
    Box { lo: Vec<f64>, hi: Vec<f64> },
}

impl Domain {
    pub fn unit_ball(dim: usize) -> Self {
        Domain::Ball {
            center: vec![0.0; dim],
            radius: 1.0,
        }
    }

    pub fn unit_box(dim: usize) -> Self {
        Domain::Box {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Domain::Ball { center, .. } => center.len(),
            Domain::Box { lo, .. } => lo.len(),
        }
    }

    pub fn validate(&self) -> Result<(), ContinuumError> {
        match self {
            Domain::Ball { center, radius } => {
                if center.is_empty() || !(*radius > 0.0) {
                    return Err(ContinuumError::UnsupportedDomain("ball needs a center and a positive radius".into()));
                }
            }
            Domain::Box { lo, hi } => {
                if lo.is_empty() || lo.len() != hi.len() || lo.iter().zip(hi).any(|(a, b)| !(a < b)) {
                    return Err(ContinuumError::UnsupportedDomain("box needs lo < hi componentwise".into()));
                }
            }
        }
        Ok(())
    }

    pub fn contains(&self, s: &[f64]) -> bool {
        match self {
            Domain::Ball { center, radius } => real_power(s, center, 1.0) <= *radius,
            Domain::Box { lo, hi } => s.iter().zip(lo.iter().zip(hi)).all(|(v, (a, b))| a <= v && v <= b),
        }
    }

    /// Distance from an interior point to the boundary.
    pub fn boundary_dist(&self, s: &[f64]) -> f64 {
        match self {
            Domain::Ball { center, radius } => radius - real_power(s, center, 1.0),
            Domain::Box { lo, hi } => s
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(v, (a, b))| (v - a).min(b - v))
                .fold(f64::INFINITY, f64::min),
        }
    }

    /// Axis-aligned bounding box.
    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        match self {
            Domain::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            Domain::Box { lo, hi } => (lo.clone(), hi.clone()),
        }
    }

    pub fn volume(&self) -> f64 {
        match self {
            Domain::Ball { center, radius } => unit_ball_volume(center.len()) * radius.powi(center.len() as i32),
            Domain::Box { lo, hi } => lo.iter().zip(hi).map(|(a, b)| b - a).product(),
        }
    }

    /// Uniform point by rejection from the bounding box.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        let (lo, hi) = self.bounds();
        loop {
            let s: Vec<f64> = lo.iter().zip(&hi).map(|(a, b)| rng.random_range(*a..*b)).collect();
            if self.contains(&s) {
                return s;
            }
        }
    }

    /// The dilate by `factor` about the center.
    pub fn dilate(&self, factor: f64) -> Domain {
        match self {
            Domain::Ball { center, radius } => Domain::Ball {
                center: center.clone(),
                radius: radius * factor,
            },
            Domain::Box { lo, hi } => {
                let mid: Vec<f64> = lo.iter().zip(hi).map(|(a, b)| 0.5 * (a + b)).collect();
                Domain::Box {
                    lo: lo.iter().zip(&mid).map(|(a, m)| m + factor * (a - m)).collect(),
                    hi: hi.iter().zip(&mid).map(|(b, m)| m + factor * (b - m)).collect(),
                }
            }
        }
    }
}

pub fn unit_ball_volume(dim: usize) -> f64 {
    // V_d = π^{d/2} / Γ(d/2 + 1), by the two-step recurrence.
    let mut v = [1.0, 2.0];
    for d in 2..=dim {
        v = [v[1], v[0] * 2.0 * std::f64::consts::PI / d as f64];
    }
    if dim == 0 {
        1.0
    } else {
        v[1]
    }
}

/// f_h(x) = average of f over A_h(hx) ∩ region, for every x with hx in the region.
pub fn piecewise_average(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    h: f64,
    region: &Domain,
    q: &QuadratureSpec,
) -> Result<Vec<(Point, f64)>, ContinuumError> {
    if !(h > 0.0) {
        return Err(ContinuumError::InvalidSpacing(h));
    }
    region.validate()?;
    let q = QuadratureSpec::new(q.m)?;
    let dim = region.dim();
    let (lo, hi) = region.bounds();
    let ilo: Vec<i64> = lo.iter().map(|v| (v / h).ceil() as i64).collect();
    let ihi: Vec<i64> = hi.iter().map(|v| (v / h).floor() as i64).collect();
    let mut idx = Vec::new();
    let mut cur = ilo.clone();
    if ilo.iter().zip(&ihi).all(|(a, b)| a <= b) {
        loop {
            let s: Vec<f64> = cur.iter().map(|c| *c as f64 * h).collect();
            if region.contains(&s) {
                idx.push(cur.clone());
            }
            let mut k = dim;
            let mut done = true;
            while k > 0 {
                k -= 1;
                if cur[k] < ihi[k] {
                    cur[k] += 1;
                    done = false;
                    break;
                }
                cur[k] = ilo[k];
            }
            if done {
                break;
            }
        }
    }
    let nodes = q.nodes(dim);
    let out: Vec<Option<(Point, f64)>> = idx
        .into_par_iter()
        .map(|x| {
            let center: Vec<f64> = x.iter().map(|c| *c as f64 * h).collect();
            match region {
                // Exact clipping of the cube to the box, then the midpoint rule.
                Domain::Box { lo, hi } => {
                    let a: Vec<f64> = center.iter().zip(lo).map(|(c, l)| (c - h / 2.0).max(*l)).collect();
                    let b: Vec<f64> = center.iter().zip(hi).map(|(c, u)| (c + h / 2.0).min(*u)).collect();
                    if a.iter().zip(&b).any(|(p, q)| p >= q) {
                        return None;
                    }
                    let sum: f64 = nodes
                        .iter()
                        .map(|u| {
                            let s: Vec<f64> = a.iter().zip(&b).zip(u).map(|((p, q), o)| p + (q - p) * (o + 0.5)).collect();
                            f(&s)
                        })
                        .sum();
                    Some((x, sum / nodes.len() as f64))
                }
                Domain::Ball { .. } if dim == 1 => {
                    let (lo, hi) = region.bounds();
                    let (a, b) = ((center[0] - h / 2.0).max(lo[0]), (center[0] + h / 2.0).min(hi[0]));
                    if a >= b {
                        return None;
                    }
                    let sum: f64 = nodes.iter().map(|u| f(&[a + (b - a) * (u[0] + 0.5)])).sum();
                    Some((x, sum / nodes.len() as f64))
                }
                Domain::Ball { .. } => {
                    let inside: Vec<f64> = nodes
                        .iter()
                        .map(|u| center.iter().zip(u).map(|(c, o)| c + h * o).collect::<Vec<f64>>())
                        .filter(|s| region.contains(s))
                        .map(|s| f(&s))
                        .collect();
                    if inside.is_empty() {
                        None
                    } else {
                        Some((x, inside.iter().sum::<f64>() / inside.len() as f64))
                    }
                }
            }
        })
        .collect();
    Ok(out.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: u64,
    /// Draws discarded because s = t.
    pub rejected: u64,
}

const MC_CHUNK: u64 = 4096;

/// ∫∫_{Ω×Ω} (f(s) - f(t))² k(s, t) by uniform pairs, with standard error.
pub fn continuous_energy(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    region: &Domain,
    k: &ContinuousKernel,
    seed: u64,
    n_samples: u64,
) -> Result<McEstimate, ContinuumError> {
    region.validate()?;
    if region.dim() != k.dim() {
        return Err(ContinuumError::DimensionMismatch {
            expected: k.dim(),
            found: region.dim(),
        });
    }
    let chunks = n_samples.div_ceil(MC_CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| -> Result<(f64, f64, u64), ContinuumError> {
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ mix64(c)));
            let count = MC_CHUNK.min(n_samples - c * MC_CHUNK);
            let (mut s1, mut s2, mut rejected) = (0.0, 0.0, 0u64);
            let mut taken = 0;
            while taken < count {
                let (s, t) = (region.sample(&mut rng), region.sample(&mut rng));
                let df = f(&s) - f(&t);
                let v = if df == 0.0 { 0.0 } else { df * df * k.eval(&s, &t)? };
                if !v.is_finite() {
                    rejected += 1;
                    continue;
                }
                s1 += v;
                s2 += v * v;
                taken += 1;
            }
            Ok((s1, s2, rejected))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (s1, s2, rejected) = parts.iter().fold((0.0, 0.0, 0u64), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    if rejected as f64 > 1e-3 * n_samples as f64 {
        return Err(ContinuumError::TooManySingular {
            rejected,
            draws: n_samples + rejected,
        });
    }
    let n = n_samples as f64;
    let mean = s1 / n;
    let var = (s2 / n - mean * mean).max(0.0) * n / (n - 1.0).max(1.0);
    let vol2 = region.volume().powi(2);
    Ok(McEstimate {
        value: mean * vol2,
        stderr: (var / n).sqrt() * vol2,
        samples: n_samples,
        rejected,
    })
}

/// Discrete energies of f_h over the lattice points of a region:
/// (Σ h^{2d} ω_h^k (Δf_h)², Σ h^{2d}|h(x - y)|^{-d-α}(Δf_h)²), both over
/// ordered pairs with |x - y| > √d (index units).
pub fn discrete_energies(
    values: &[(Point, f64)],
    omega: &DiscreteKernel,
) -> Result<(f64, f64), ContinuumError> {
    let h = omega.spacing;
    let dim = omega.dim;
    let scale = h.powi(2 * dim as i32);
    let exp = -(dim as f64) - omega.alpha;
    let n = values.len();
    let rows = (0..n)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64), ContinuumError> {
            let (mut eo, mut ef) = (0.0, 0.0);
            let (x, fx) = (&values[i].0, values[i].1);
            for (y, fy) in &values[i + 1..] {
                if crate::lattice_graph::dist2(x, y) <= dim as i64 {
                    continue;
                }
                let df = fx - fy;
                if df == 0.0 {
                    continue;
                }
                eo += omega.eval(x, y)? * df * df;
                ef += (h * dist(x, y)).powf(exp) * df * df;
            }
            Ok((eo, ef))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let (eo, ef) = rows.iter().fold((0.0, 0.0), |a, r| (a.0 + r.0, a.1 + r.1));
    Ok((2.0 * scale * eo, 2.0 * scale * ef))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConvergenceRow {
    pub h: f64,
    pub e_omega: f64,
    pub e_frac: f64,
    pub mc_ref: f64,
    pub mc_stderr: f64,
}

#[allow(clippy::too_many_arguments)]
pub fn convergence_study(
    f: &(dyn Fn(&[f64]) -> f64 + Sync),
    k: &ContinuousKernel,
    region: &Domain,
    hs: &[f64],
    q: &QuadratureSpec,
    mc_samples: u64,
    seed: u64,
) -> Result<Vec<ConvergenceRow>, ContinuumError> {
    if hs.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(ContinuumError::UnorderedSpacings);
    }
    let mc = continuous_energy(f, region, k, seed, mc_samples)?;
    hs.iter()
        .map(|&h| {
            let values = piecewise_average(f, h, region, q)?;
            let omega = discretize_kernel(k, h, q)?;
            let (e_omega, e_frac) = discrete_energies(&values, &omega)?;
            Ok(ConvergenceRow {
                h,
                e_omega,
                e_frac,
                mc_ref: mc.value,
                mc_stderr: mc.stderr,
            })
        })
        .collect()
}

pub fn write_convergence_csv<W: Write>(rows: &[ConvergenceRow], out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["h", "E_omega", "E_frac", "mc_ref", "mc_stderr"])?;
    for r in rows {
        w.write_record([r.h, r.e_omega, r.e_frac, r.mc_ref, r.mc_stderr].map(|v| format!("{v:.12e}")))?;
    }
    w.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhitneyBall {
    pub center: Vec<f64>,
    pub radius: f64,
    /// Side of the dyadic cube it came from.
    pub side: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhitneyFamily {
    pub domain: Domain,
    pub kappa: f64,
    /// Acceptance: diam(Q) <= dist(Q, ∂Ω) / tau.
    pub tau: f64,
    pub max_depth: u32,
    pub balls: Vec<WhitneyBall>,
}

/// Dyadic Whitney cubes of the domain's bounding cube, down to `max_depth`
/// halvings; each accepted cube Q gives the ball B(center(Q), diam(Q)).
pub fn whitney_balls(domain: &Domain, kappa: f64, max_depth: u32) -> Result<WhitneyFamily, ContinuumError> {
    domain.validate()?;
    if !(kappa >= 1.0) {
        return Err(ContinuumError::InvalidKappa(kappa));
    }
    let tau = if kappa <= 2.0 { 4.0 } else { 2.0 * kappa };
    let dim = domain.dim();
    let (lo, hi) = domain.bounds();
    let side0 = lo.iter().zip(&hi).map(|(a, b)| b - a).fold(0.0, f64::max);
    let mut balls = Vec::new();
    let mut stack = vec![(lo.clone(), side0, 0u32)];
    let sqrt_d = (dim as f64).sqrt();
    while let Some((corner, side, depth)) = stack.pop() {
        let diam = side * sqrt_d;
        // Cube vertices lie inside a convex domain iff the cube does.
        let (inside, gap) = cube_inside(domain, &corner, side);
        if inside && diam <= gap / tau {
            let center: Vec<f64> = corner.iter().map(|c| c + side / 2.0).collect();
            balls.push(WhitneyBall { center, radius: diam, side });
            continue;
        }
        if depth >= max_depth || !cube_meets(domain, &corner, side) {
            continue;
        }
        let half = side / 2.0;
        for mask in (0..1u32 << dim).rev() {
            let c: Vec<f64> = corner
                .iter()
                .enumerate()
                .map(|(k, v)| v + if mask >> k & 1 == 1 { half } else { 0.0 })
                .collect();
            stack.push((c, half, depth + 1));
        }
    }
    balls.sort_by(|a, b| a.center.partial_cmp(&b.center).expect("finite centers"));
    Ok(WhitneyFamily {
        domain: domain.clone(),
        kappa,
        tau,
        max_depth,
        balls,
    })
}

// (inside, distance from the closed cube to the boundary); convex domains only.
fn cube_inside(domain: &Domain, corner: &[f64], side: f64) -> (bool, f64) {
    match domain {
        Domain::Box { lo, hi } => {
            let gap = corner
                .iter()
                .zip(lo.iter().zip(hi))
                .map(|(c, (a, b))| (c - a).min(b - c - side))
                .fold(f64::INFINITY, f64::min);
            (gap > 0.0, gap)
        }
        Domain::Ball { center, radius } => {
            // Farthest cube point from the center.
            let far: f64 = corner
                .iter()
                .zip(center)
                .map(|(c, z)| {
                    let a = (c - z).abs().max((c + side - z).abs());
                    a * a
                })
                .sum::<f64>()
                .sqrt();
            (far < *radius, radius - far)
        }
    }
}

fn cube_meets(domain: &Domain, corner: &[f64], side: f64) -> bool {
    match domain {
        Domain::Box { lo, hi } => corner.iter().zip(lo.iter().zip(hi)).all(|(c, (a, b))| c + side > *a && *c < *b),
        Domain::Ball { center, radius } => {
            let near: f64 = corner
                .iter()
                .zip(center)
                .map(|(c, z)| {
                    let t = (z.clamp(*c, c + side)) - z;
                    t * t
                })
                .sum::<f64>()
                .sqrt();
            near < *radius
        }
    }
}

/// Measured Whitney properties.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WhitneyReport {
    pub balls: usize,
    /// (ii): every κB inside the domain, checked exactly.
    pub dilates_inside: bool,
    /// (i): measured c, smallest over covered samples of (diam/2)/dist(x, ∂Ω).
    pub capture_c: f64,
    /// (i) held on every sampled pair with |x - y| < c dist(x, ∂Ω).
    pub capture_ok: bool,
    /// (iii): largest number of dilates κB containing a sampled point.
    pub overlap_m: usize,
    /// Fraction of sampled points covered by some accepted cube.
    pub coverage: f64,
    pub samples: usize,
}

fn cube_of(b: &WhitneyBall, s: &[f64]) -> bool {
    s.iter().zip(&b.center).all(|(v, c)| (v - c).abs() <= b.side / 2.0)
}

fn in_ball(center: &[f64], radius: f64, s: &[f64]) -> bool {
    real_power(s, center, 1.0) < radius
}

pub fn dilate_inside(domain: &Domain, b: &WhitneyBall, kappa: f64) -> bool {
    let r = kappa * b.radius;
    match domain {
        Domain::Ball { center, radius } => real_power(&b.center, center, 1.0) + r < *radius,
        Domain::Box { lo, hi } => b.center.iter().zip(lo.iter().zip(hi)).all(|(c, (a, h))| c - r > *a && c + r < *h),
    }
}

pub fn check_whitney(fam: &WhitneyFamily, samples: usize, seed: u64) -> WhitneyReport {
    let dilates_inside = fam.balls.iter().all(|b| dilate_inside(&fam.domain, b, fam.kappa));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<Vec<f64>> = (0..samples).map(|_| fam.domain.sample(&mut rng)).collect();
    let owner: Vec<Option<usize>> = pts.par_iter().map(|s| fam.balls.iter().position(|b| cube_of(b, s))).collect();
    let covered = owner.iter().filter(|o| o.is_some()).count();
    let capture_c = pts
        .iter()
        .zip(&owner)
        .filter_map(|(s, o)| o.map(|i| fam.balls[i].radius / 2.0 / fam.domain.boundary_dist(s)))
        .fold(f64::INFINITY, f64::min);
    // Pairs: a covered x and a y drawn uniformly from B(x, c·dist(x)).
    let dim = fam.domain.dim();
    let capture_ok = pts
        .iter()
        .zip(&owner)
        .enumerate()
        .filter(|(_, (_, o))| o.is_some())
        .all(|(i, (x, _))| {
            let mut r = ChaCha8Rng::seed_from_u64(mix64(seed ^ i as u64));
            let rad = capture_c * fam.domain.boundary_dist(x);
            let y: Vec<f64> = loop {
                let u: Vec<f64> = (0..dim).map(|_| r.random_range(-1.0..1.0)).collect();
                if norm(&u) < 1.0 {
                    break x.iter().zip(&u).map(|(a, b)| a + rad * b).collect();
                }
            };
            fam.balls.iter().any(|b| in_ball(&b.center, b.radius, x) && in_ball(&b.center, b.radius, &y))
        });
    let overlap_m = pts
        .par_iter()
        .map(|s| fam.balls.iter().filter(|b| in_ball(&b.center, fam.kappa * b.radius, s)).count())
        .max()
        .unwrap_or(0);
    WhitneyReport {
        balls: fam.balls.len(),
        dilates_inside,
        capture_c,
        capture_ok,
        overlap_m,
        coverage: covered as f64 / samples.max(1) as f64,
        samples,
    }
}

/// `cx,cy,...,radius` rows.
pub fn write_whitney_csv<W: Write>(fam: &WhitneyFamily, out: W) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = fam.domain.dim();
    let names = ["cx", "cy", "cz"];
    let mut header: Vec<String> = (0..dim).map(|k| names.get(k).map(|s| s.to_string()).unwrap_or(format!("c{k}"))).collect();
    header.push("radius".into());
    w.write_record(&header)?;
    for b in &fam.balls {
        let mut row: Vec<String> = b.center.iter().map(|v| format!("{v:.12e}")).collect();
        row.push(format!("{:.12e}", b.radius));
        w.write_record(&row)?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nodes_are_midpoints() {
        let n = QuadratureSpec::new(2).unwrap().nodes(2);
        assert_eq!(n, vec![vec![-0.25, -0.25], vec![-0.25, 0.25], vec![0.25, -0.25], vec![0.25, 0.25]]);
        assert!(QuadratureSpec::new(0).is_err());
    }

    #[test]
    fn constant_kernel_averages_to_one() {
        let k = ContinuousKernel::Constant { dim: 2, value: 1.0 };
        let w = discretize_kernel(&k, 0.5, &QuadratureSpec::default()).unwrap();
        assert_eq!(w.eval(&[0, 0], &[3, 1]).unwrap(), 1.0);
        assert!(matches!(w.eval(&[0, 0], &[1, 1]), Err(FormsError::ExcludedPair(..))));
    }

    #[test]
    fn ball_volumes() {
        assert!((unit_ball_volume(1) - 2.0).abs() < 1e-15);
        assert!((unit_ball_volume(2) - std::f64::consts::PI).abs() < 1e-15);
        assert!((unit_ball_volume(3) - 4.0 / 3.0 * std::f64::consts::PI).abs() < 1e-14);
    }

    #[test]
    fn sandwich_constant_instance() {
        // d = 2, L = 19: ((2√2)^4 · 361)^{-1} = 1/23104.
        assert!((sandwich_constant(2, 19) - 1.0 / 23104.0).abs() < 1e-18);
    }
}
