//! Discrete quadratic energies on lattice balls, kernels with their
//! two-sided bounds, comparability ratios and the chaining constant.

use crate::chaining::{edge_key, verify_path_family, PathFamily};
use crate::configuration::{point_rng, ConfigError, Configuration, Point};
use crate::geometry::DoubleCone;
use crate::lattice_graph::{diff, dist, dist2, GraphError, LatticeBall};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FormsError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("alpha = {0} outside (0, 2)")]
    InvalidAlpha(f64),
    #[error("Lambda = {0} must be at least 1")]
    InvalidLambda(f64),
    #[error("cutoff R0 = {0} must be positive")]
    InvalidCutoff(f64),
    #[error("kappa = {0} must be at least 1")]
    InvalidKappa(f64),
    #[error("function has no value at {0:?}")]
    MissingValue(Point),
    #[error("kernel is not finite at ({0:?}, {1:?})")]
    NonFinite(Point, Point),
    #[error("kernel is not evaluated at the excluded pair ({0:?}, {1:?})")]
    ExcludedPair(Point, Point),
    #[error("path family failed verification: {0}")]
    Unverified(String),
    #[error("chained inequality failed for function {index}: {left} > {right}")]
    ChainBroken { index: usize, left: f64, right: f64 },
}

pub type KernelFn = Arc<dyn Fn(&[i64], &[i64]) -> Result<f64, FormsError> + Send + Sync>;

#[derive(Clone)]
pub enum KernelKind {
    /// |x - y|^{-d-α}.
    Fractional,
    /// Λ^{-1}(1_{x+Γ(x)}(y) + 1_{y+Γ(y)}(x))|x - y|^{-d-α}.
    Cone(Configuration),
    Scaled(Box<DiscreteKernel>, f64),
    Custom(KernelFn),
    /// `inner` with the value on one unordered pair forced to zero.
    Zeroed(Box<DiscreteKernel>, Point, Point),
}

/// ω on h Z^d, evaluated at lattice indices; distances are h|x - y|.
#[derive(Clone)]
pub struct DiscreteKernel {
    pub dim: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub spacing: f64,
    pub kind: KernelKind,
}

impl fmt::Debug for DiscreteKernel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.kind {
            KernelKind::Fractional => "fractional".to_string(),
            KernelKind::Cone(_) => "cone".to_string(),
            KernelKind::Scaled(k, s) => format!("{s} * {k:?}"),
            KernelKind::Custom(_) => "custom".to_string(),
            KernelKind::Zeroed(k, x, y) => format!("{k:?} zeroed at {x:?}, {y:?}"),
        };
        write!(f, "DiscreteKernel({kind}, d={}, alpha={}, Lambda={})", self.dim, self.alpha, self.lambda)
    }
}

fn check_alpha(alpha: f64) -> Result<(), FormsError> {
    if alpha > 0.0 && alpha < 2.0 {
        Ok(())
    } else {
        Err(FormsError::InvalidAlpha(alpha))
    }
}

fn check_lambda(lambda: f64) -> Result<(), FormsError> {
    if lambda >= 1.0 {
        Ok(())
    } else {
        Err(FormsError::InvalidLambda(lambda))
    }
}

pub fn fractional_kernel(dim: usize, alpha: f64) -> Result<DiscreteKernel, FormsError> {
    check_alpha(alpha)?;
    Ok(DiscreteKernel {
        dim,
        alpha,
        lambda: 1.0,
        spacing: 1.0,
        kind: KernelKind::Fractional,
    })
}

pub fn cone_kernel(config: &Configuration, alpha: f64, lambda: f64) -> Result<DiscreteKernel, FormsError> {
    check_alpha(alpha)?;
    check_lambda(lambda)?;
    Ok(DiscreteKernel {
        dim: config.dim(),
        alpha,
        lambda,
        spacing: 1.0,
        kind: KernelKind::Cone(config.clone()),
    })
}

pub fn custom_kernel(dim: usize, alpha: f64, lambda: f64, spacing: f64, f: KernelFn) -> Result<DiscreteKernel, FormsError> {
    check_alpha(alpha)?;
    check_lambda(lambda)?;
    Ok(DiscreteKernel {
        dim,
        alpha,
        lambda,
        spacing,
        kind: KernelKind::Custom(f),
    })
}

/// Indicator part of the lower bound: 1_{x+Γ(x)}(y) + 1_{y+Γ(y)}(x).
pub fn cone_indicators(gx: &DoubleCone, gy: &DoubleCone, x: &[i64], y: &[i64]) -> f64 {
    let a = gx.contains_lattice_offset(&diff(y, x)) as u8;
    let b = gy.contains_lattice_offset(&diff(x, y)) as u8;
    (a + b) as f64
}

impl DiscreteKernel {
    pub fn scaled(&self, factor: f64) -> DiscreteKernel {
        DiscreteKernel {
            kind: KernelKind::Scaled(Box::new(self.clone()), factor),
            lambda: self.lambda * factor.max(1.0 / factor),
            ..self.clone()
        }
    }

    pub fn zeroed_at(&self, x: Point, y: Point) -> DiscreteKernel {
        DiscreteKernel {
            kind: KernelKind::Zeroed(Box::new(self.clone()), x, y),
            ..self.clone()
        }
    }

    /// |h(x - y)|^{-d-α}.
    pub fn power(&self, x: &[i64], y: &[i64]) -> f64 {
        (self.spacing * dist(x, y)).powf(-(self.dim as f64) - self.alpha)
    }

    pub fn eval(&self, x: &[i64], y: &[i64]) -> Result<f64, FormsError> {
        match &self.kind {
            KernelKind::Fractional => Ok(self.power(x, y)),
            KernelKind::Cone(c) => {
                let (gx, gy) = (c.cone_at(x)?, c.cone_at(y)?);
                Ok(cone_indicators(&gx, &gy, x, y) * self.power(x, y) / self.lambda)
            }
            KernelKind::Scaled(k, s) => Ok(s * k.eval(x, y)?),
            KernelKind::Custom(f) => f(x, y),
            KernelKind::Zeroed(k, a, b) => {
                if (x == a.as_slice() && y == b.as_slice()) || (x == b.as_slice() && y == a.as_slice()) {
                    Ok(0.0)
                } else {
                    k.eval(x, y)
                }
            }
        }
    }

    fn cones(&self) -> Option<&Configuration> {
        match &self.kind {
            KernelKind::Cone(c) => Some(c),
            _ => None,
        }
    }

    /// Weights ω(x_i, x_j) for i < j with |x_i - x_j| > R₀, packed row-major
    /// over the strict upper triangle; excluded pairs carry 0.
    pub fn pair_weights(&self, points: &[Point], r0: f64) -> Result<PairWeights, FormsError> {
        let cones = match self.cones() {
            Some(c) => Some(c.cones_at(points)?),
            None => None,
        };
        let r02 = r0 * r0;
        let n = points.len();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                (i + 1..n)
                    .map(|j| {
                        let (x, y) = (&points[i], &points[j]);
                        if dist2(x, y) as f64 <= r02 {
                            return Ok(0.0);
                        }
                        let w = match &cones {
                            Some(cs) => cone_indicators(&cs[i], &cs[j], x, y) * self.power(x, y) / self.lambda,
                            None => self.eval(x, y)?,
                        };
                        if !w.is_finite() {
                            return Err(FormsError::NonFinite(x.clone(), y.clone()));
                        }
                        Ok(w)
                    })
                    .collect::<Result<Vec<f64>, FormsError>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(PairWeights {
            n,
            w: rows.concat(),
        })
    }
}

/// Packed strict upper triangle of pair weights.
#[derive(Debug, Clone, PartialEq)]
pub struct PairWeights {
    pub n: usize,
    pub w: Vec<f64>,
}

impl PairWeights {
    #[inline]
    fn row_start(&self, i: usize) -> usize {
        i * (2 * self.n - i - 1) / 2
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        if i == j {
            return 0.0;
        }
        self.w[self.row_start(i) + j - i - 1]
    }

    /// Σ over ordered pairs of (f_i - f_j)² w_ij, rows summed in parallel
    /// and combined in row order.
    pub fn energy(&self, f: &[f64]) -> f64 {
        let parts: Vec<f64> = (0..self.n)
            .into_par_iter()
            .map(|i| {
                let row = &self.w[self.row_start(i)..self.row_start(i) + self.n - i - 1];
                row.iter()
                    .zip(&f[i + 1..])
                    .map(|(w, fj)| {
                        let d = f[i] - fj;
                        w * d * d
                    })
                    .sum::<f64>()
            })
            .collect();
        2.0 * parts.iter().sum::<f64>()
    }

    /// Dense matrix A with fᵀAf = energy(f).
    pub fn matrix(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n, self.n);
        for i in 0..self.n {
            for j in i + 1..self.n {
                let w = 2.0 * self.get(i, j);
                a[(i, j)] -= w;
                a[(j, i)] -= w;
                a[(i, i)] += w;
                a[(j, j)] += w;
            }
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EnergyReport {
    pub value: f64,
    /// Ordered pairs summed over.
    pub pairs: u64,
    pub center: Vec<f64>,
    pub radius: f64,
    pub cutoff: f64,
}

/// Values of `f` at the ball points, in ball order.
pub fn sample_function(points: &[Point], f: &dyn Fn(&[i64]) -> Option<f64>) -> Result<Vec<f64>, FormsError> {
    points
        .iter()
        .map(|p| f(p).ok_or_else(|| FormsError::MissingValue(p.clone())))
        .collect()
}

pub fn energy(
    f: &dyn Fn(&[i64]) -> Option<f64>,
    ball: &LatticeBall,
    kernel: &DiscreteKernel,
    r0: f64,
) -> Result<EnergyReport, FormsError> {
    if r0 <= 0.0 {
        return Err(FormsError::InvalidCutoff(r0));
    }
    let points = ball.points();
    let values = sample_function(&points, f)?;
    let w = kernel.pair_weights(&points, r0)?;
    let r02 = r0 * r0;
    let pairs: u64 = (0..points.len())
        .map(|i| (i + 1..points.len()).filter(|&j| dist2(&points[i], &points[j]) as f64 > r02).count() as u64)
        .sum::<u64>()
        * 2;
    Ok(EnergyReport {
        value: w.energy(&values),
        pairs,
        center: ball.center().to_vec(),
        radius: ball.radius(),
        cutoff: r0,
    })
}

/// One sampled pair where the kernel leaves its two-sided bound.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundViolation {
    pub x: Point,
    pub y: Point,
    pub omega: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Checks Λ^{-1}(indicators)|x-y|^{-d-α} <= ω <= Λ|x-y|^{-d-α} on `sample`.
pub fn verify_kernel_bounds(
    kernel: &DiscreteKernel,
    config: &Configuration,
    lambda: f64,
    alpha: f64,
    r0: f64,
    sample: &[(Point, Point)],
) -> Result<Vec<BoundViolation>, FormsError> {
    let d = config.dim() as f64;
    let out = sample
        .par_iter()
        .map(|(x, y)| {
            if dist(x, y) <= r0 {
                return Ok(None);
            }
            let omega = kernel.eval(x, y)?;
            let p = (kernel.spacing * dist(x, y)).powf(-d - alpha);
            let ind = cone_indicators(&config.cone_at(x)?, &config.cone_at(y)?, x, y);
            let (lower, upper) = (ind * p / lambda, lambda * p);
            Ok((omega < lower || omega > upper).then(|| BoundViolation {
                x: x.clone(),
                y: y.clone(),
                omega,
                lower,
                upper,
            }))
        })
        .collect::<Result<Vec<_>, FormsError>>()?;
    Ok(out.into_iter().flatten().collect())
}

/// Seeded pairs from a ball with |x - y| > R₀.
pub fn sample_pairs(ball: &LatticeBall, r0: f64, count: usize, seed: u64) -> Vec<(Point, Point)> {
    let points = ball.points();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    if points.len() < 2 {
        return out;
    }
    while out.len() < count {
        let i = rng.random_range(0..points.len());
        let j = rng.random_range(0..points.len());
        if dist(&points[i], &points[j]) > r0 {
            out.push((points[i].clone(), points[j].clone()));
        }
    }
    out
}

/// f(x) uniform in [-1, 1], keyed by (seed, x) so it is defined on all of Z^d.
pub fn random_function(seed: u64) -> impl Fn(&[i64]) -> f64 + Send + Sync + Clone {
    move |x: &[i64]| point_rng(seed, x).random_range(-1.0..=1.0)
}

/// Outcome of a comparability search.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioEstimate {
    pub ratio: f64,
    /// Which probe attained the maximum.
    pub source: String,
    pub iterations: usize,
    pub inner_points: usize,
    pub outer_points: usize,
}

/// Largest ball size that is assembled densely.
pub const DENSE_LIMIT: usize = 2000;

/// Lower estimate of sup_f E_frac,B_R(f) / E_ω,B_κR(f) from random,
/// indicator and iterative probes.
#[allow(clippy::too_many_arguments)]
pub fn comparability_ratio(
    kernel: &DiscreteKernel,
    center: &[i64],
    radius: f64,
    kappa: f64,
    r0: f64,
    budget: usize,
    seed: u64,
) -> Result<RatioEstimate, FormsError> {
    if kappa < 1.0 {
        return Err(FormsError::InvalidKappa(kappa));
    }
    if r0 <= 0.0 {
        return Err(FormsError::InvalidCutoff(r0));
    }
    let inner = LatticeBall::around(center, radius)?;
    let outer = LatticeBall::around(center, kappa * radius)?;
    let points = outer.points();
    let n = points.len();
    let frac = fractional_kernel(kernel.dim, kernel.alpha)?;
    let mut w_frac = frac.pair_weights(&points, r0)?;
    // A_frac only sees pairs inside the inner ball.
    let in_inner: Vec<bool> = points.iter().map(|p| inner.contains(p)).collect();
    for i in 0..n {
        for j in i + 1..n {
            if !(in_inner[i] && in_inner[j]) {
                let k = w_frac.row_start(i) + j - i - 1;
                w_frac.w[k] = 0.0;
            }
        }
    }
    let w_omega = kernel.pair_weights(&points, r0)?;
    let mut best = RatioEstimate {
        ratio: 0.0,
        source: "none".into(),
        iterations: 0,
        inner_points: in_inner.iter().filter(|b| **b).count(),
        outer_points: n,
    };
    let consider = |f: &[f64], source: &str, best: &mut RatioEstimate| {
        let (ef, eo) = (w_frac.energy(f), w_omega.energy(f));
        let r = if eo > 0.0 {
            ef / eo
        } else if ef > 0.0 {
            f64::INFINITY
        } else {
            return;
        };
        if r > best.ratio {
            best.ratio = r;
            best.source = source.to_string();
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..200 {
        let f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
        consider(&f, "random", &mut best);
    }
    for i in 0..n {
        let mut f = vec![0.0; n];
        f[i] = 1.0;
        consider(&f, "indicator", &mut best);
    }
    if best.ratio.is_infinite() {
        return Ok(best);
    }
    if !omega_connected(&w_omega) {
        // Some nonconstant f has E_ω = 0; if E_frac sees it, the ratio is infinite.
        let comp = components(&w_omega);
        let f: Vec<f64> = comp.iter().map(|&c| if c == comp[0] { 0.0 } else { 1.0 }).collect();
        consider(&f, "component", &mut best);
        return Ok(best);
    }
    let (f, iters) = if n <= DENSE_LIMIT {
        pencil_power(&w_frac, &w_omega, budget, &mut rng)
    } else {
        rayleigh_ascent(&w_frac, &w_omega, budget, &mut rng)
    };
    best.iterations = iters;
    consider(&f, "ascent", &mut best);
    Ok(best)
}

fn components(w: &PairWeights) -> Vec<usize> {
    let n = w.n;
    let mut comp = vec![usize::MAX; n];
    let mut next = 0;
    for s in 0..n {
        if comp[s] != usize::MAX {
            continue;
        }
        comp[s] = next;
        let mut stack = vec![s];
        while let Some(u) = stack.pop() {
            for (v, c) in comp.iter_mut().enumerate() {
                if *c == usize::MAX && w.get(u, v) > 0.0 {
                    *c = next;
                    stack.push(v);
                }
            }
        }
        next += 1;
    }
    comp
}

fn omega_connected(w: &PairWeights) -> bool {
    components(w).iter().all(|&c| c == 0)
}

fn deflate(v: &mut DVector<f64>) {
    let mean = v.mean();
    v.add_scalar_mut(-mean);
}

// Power iteration on L^{-1} A L^{-T}, where L Lᵀ = B + (σ/n)11ᵀ. The rank-one
// term removes the shared null direction without changing the other
// eigenvalues of the pencil.
fn pencil_power(a: &PairWeights, b: &PairWeights, budget: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let n = a.n;
    let am = a.matrix();
    let mut bm = b.matrix();
    let sigma = bm.trace() / n as f64;
    bm.add_scalar_mut(sigma / n as f64);
    let Some(chol) = bm.cholesky() else {
        return rayleigh_ascent(a, b, budget, rng);
    };
    let l = chol.l();
    let mut x = DVector::from_fn(n, |_, _| rng.random_range(-1.0..=1.0));
    let mut mu = 0.0;
    let mut iters = 0;
    for it in 0..budget {
        iters = it + 1;
        let y = l.tr_solve_lower_triangular(&x).unwrap_or_else(|| x.clone());
        let y = &am * y;
        let mut z = l.solve_lower_triangular(&y).unwrap_or(y);
        let nz = z.norm();
        if nz == 0.0 {
            break;
        }
        z /= nz;
        let new_mu = z.dot(&{
            let t = l.tr_solve_lower_triangular(&z).unwrap_or_else(|| z.clone());
            l.solve_lower_triangular(&(&am * t)).unwrap_or_else(|| z.clone())
        });
        x = z;
        if (new_mu - mu).abs() <= 1e-8 * new_mu.abs() {
            mu = new_mu;
            break;
        }
        mu = new_mu;
    }
    let _ = mu;
    let mut f = l.tr_solve_lower_triangular(&x).unwrap_or(x);
    deflate(&mut f);
    (f.iter().copied().collect(), iters)
}

fn apply(w: &PairWeights, f: &[f64]) -> Vec<f64> {
    // Gradient of energy: 4 Σ_j w_ij (f_i - f_j).
    let n = w.n;
    (0..n)
        .into_par_iter()
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { 4.0 * w.get(i, j) * (f[i] - f[j]) }).sum())
        .collect()
}

fn rayleigh_ascent(a: &PairWeights, b: &PairWeights, budget: usize, rng: &mut ChaCha8Rng) -> (Vec<f64>, usize) {
    let n = a.n;
    let mut f: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let ratio = |f: &[f64]| {
        let eb = b.energy(f);
        if eb > 0.0 {
            a.energy(f) / eb
        } else {
            0.0
        }
    };
    let mut mu = ratio(&f);
    let mut step = 1.0;
    let mut iters = 0;
    for it in 0..budget {
        iters = it + 1;
        let (ga, gb) = (apply(a, &f), apply(b, &f));
        let eb = b.energy(&f);
        let g: Vec<f64> = ga.iter().zip(&gb).map(|(x, y)| (x - mu * y) / eb).collect();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        let fnorm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if gn == 0.0 {
            break;
        }
        let mut improved = false;
        while step > 1e-12 {
            let cand: Vec<f64> = f.iter().zip(&g).map(|(x, d)| x + step * fnorm * d / gn).collect();
            let r = ratio(&cand);
            if r > mu {
                let old = mu;
                f = cand;
                mu = r;
                step *= 2.0;
                improved = true;
                if (mu - old).abs() <= 1e-8 * mu {
                    return (f, iters);
                }
                break;
            }
            step /= 2.0;
        }
        if !improved {
            break;
        }
    }
    (f, iters)
}

/// Largest generalized eigenvalue of the deflated pencil, by full
/// eigendecomposition; an independent oracle for small balls.
pub fn exact_pencil_max(a: &PairWeights, b: &PairWeights) -> Option<f64> {
    let n = a.n;
    let am = a.matrix();
    let mut bm = b.matrix();
    let sigma = bm.trace() / n as f64;
    bm.add_scalar_mut(sigma / n as f64);
    let l = bm.cholesky()?.l();
    let linv = l.clone().try_inverse()?;
    let c = &linv * am * linv.transpose();
    let c = (&c + c.transpose()) * 0.5;
    Some(c.symmetric_eigenvalues().max())
}

/// Edge statistics of a family that the chained inequality needs.
#[derive(Debug, Clone)]
pub struct EdgeTally {
    pub edges: Vec<(Point, Point)>,
    /// Paths (unordered pairs) through each edge.
    pub usage: Vec<u64>,
    /// Σ over paths through the edge of that path's edge count.
    pub weighted: Vec<u64>,
    /// Largest distance from the ball center to a path node.
    pub node_reach: f64,
}

pub fn edge_tally(fam: &PathFamily) -> Result<EdgeTally, FormsError> {
    let mut map: HashMap<u128, (u64, u64)> = HashMap::new();
    let mut reach2 = 0i64;
    let mut err = None;
    fam.for_each_path(|_, _, path| {
        let k = (path.len() - 1) as u64;
        for p in &path {
            reach2 = reach2.max(dist2(p, &fam.center));
        }
        for e in path.windows(2) {
            match edge_key(&e[0], &e[1]) {
                Ok(key) => {
                    let slot = map.entry(key).or_insert((0, 0));
                    slot.0 += 1;
                    slot.1 += k;
                }
                Err(e) => err = Some(e),
            }
        }
    });
    if err.is_some() {
        return Err(FormsError::Unverified("coordinates overflow edge keys".into()));
    }
    let mut keys: Vec<_> = map.into_iter().collect();
    keys.sort_unstable_by_key(|(k, _)| *k);
    let mut tally = EdgeTally {
        edges: Vec::with_capacity(keys.len()),
        usage: Vec::with_capacity(keys.len()),
        weighted: Vec::with_capacity(keys.len()),
        node_reach: (reach2 as f64).sqrt(),
    };
    for (k, (u, w)) in keys {
        tally.edges.push(crate::chaining::edge_from_key(k, fam.dim));
        tally.usage.push(u);
        tally.weighted.push(w);
    }
    Ok(tally)
}

/// One replay of the chained inequality for a single function.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainReplay {
    pub seed: u64,
    /// E_frac,B(f).
    pub e_frac: f64,
    /// After Cauchy-Schwarz along paths and the edge-length comparison.
    pub s1: f64,
    /// After the kernel lower bound on each edge.
    pub s2: f64,
    /// After bounding usage by M and path length by N - 1.
    pub s3: f64,
    /// Σ over distinct path edges, both orientations, of ω(Δf)²; at most E_ω,B_κR.
    pub e_edges: f64,
    /// c^{-1} · e_edges.
    pub bound: f64,
    pub holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ChainingConstant {
    pub c: f64,
    pub kappa: f64,
    pub n_nodes: usize,
    pub lambda: f64,
    pub m: u64,
    pub big_lambda: f64,
    pub alpha: f64,
    /// All path nodes lie in B_κR.
    pub nodes_inside: bool,
    pub replays: Vec<ChainReplay>,
}

/// c = (2Λλ^{d+α}(N-1)M)^{-1}, κ = (N-1)λ from the measured family constants.
pub fn chaining_formula(n_nodes: usize, lambda: f64, m: u64, big_lambda: f64, alpha: f64, dim: usize) -> (f64, f64) {
    let nm1 = (n_nodes.max(2) - 1) as f64;
    let c = 1.0 / (2.0 * big_lambda * lambda.powf(dim as f64 + alpha) * nm1 * m.max(1) as f64);
    (c, nm1 * lambda)
}

/// Computes c and κ and replays the chained inequality on `n_functions`
/// random functions, failing if any link breaks.
pub fn chaining_constant(fam: &PathFamily, kernel: &DiscreteKernel, n_functions: usize, seed: u64) -> Result<ChainingConstant, FormsError> {
    let report = verify_path_family(fam);
    if !report.all_pass() {
        return Err(FormsError::Unverified(report.violations.join("; ")));
    }
    let tally = edge_tally(fam)?;
    chaining_constant_with(fam, &tally, kernel, n_functions, seed)
}

pub fn chaining_constant_with(
    fam: &PathFamily,
    tally: &EdgeTally,
    kernel: &DiscreteKernel,
    n_functions: usize,
    seed: u64,
) -> Result<ChainingConstant, FormsError> {
    let s = &fam.stats;
    let (d, alpha, big_lambda) = (fam.dim as f64, kernel.alpha, kernel.lambda);
    let (c, kappa) = chaining_formula(s.n_nodes, s.lambda, s.m, big_lambda, alpha, fam.dim);
    let nodes_inside = tally.node_reach <= kappa * fam.radius;
    let frac = fractional_kernel(fam.dim, alpha)?;
    let wf = frac.pair_weights(fam.points(), fam.r0)?;
    let lam_pow = s.lambda.powf(d + alpha);
    let omega: Vec<f64> = tally
        .edges
        .par_iter()
        .map(|(u, v)| kernel.eval(u, v))
        .collect::<Result<_, _>>()?;
    let power: Vec<f64> = tally.edges.iter().map(|(u, v)| frac.power(u, v)).collect();
    let nm1 = (s.n_nodes - 1) as f64;
    let mut replays = Vec::with_capacity(n_functions);
    for k in 0..n_functions {
        let fseed = crate::configuration::mix64(seed ^ k as u64);
        let f = random_function(fseed);
        let vals: Vec<f64> = fam.points().iter().map(|p| f(p)).collect();
        let e_frac = wf.energy(&vals);
        let (mut s1, mut s2, mut e_edges) = (0.0, 0.0, 0.0);
        for (i, (u, v)) in tally.edges.iter().enumerate() {
            let df = f(u) - f(v);
            let df2 = df * df;
            s1 += tally.weighted[i] as f64 * df2 * power[i];
            s2 += tally.weighted[i] as f64 * df2 * omega[i];
            e_edges += omega[i] * df2;
        }
        // Both orientations of every pair and of every edge.
        let s1 = 2.0 * lam_pow * s1;
        let s2 = 2.0 * lam_pow * big_lambda * s2;
        let e_edges = 2.0 * e_edges;
        let s3 = nm1 * lam_pow * big_lambda * s.m as f64 * e_edges;
        let bound = e_edges / c;
        let holds = e_frac <= s1 * (1.0 + 1e-12) && s1 <= s2 * (1.0 + 1e-12) && s2 <= s3 * (1.0 + 1e-12) && s3 <= bound * (1.0 + 1e-12) && e_frac <= bound;
        replays.push(ChainReplay {
            seed: fseed,
            e_frac,
            s1,
            s2,
            s3,
            e_edges,
            bound,
            holds,
        });
        if !holds {
            return Err(FormsError::ChainBroken {
                index: k,
                left: e_frac,
                right: bound,
            });
        }
    }
    Ok(ChainingConstant {
        c,
        kappa,
        n_nodes: s.n_nodes,
        lambda: s.lambda,
        m: s.m,
        big_lambda,
        alpha,
        nodes_inside,
        replays,
    })
}
