//! Cones, double cones, half-cones and cubes in R^d.
//!
//! Every predicate here is conservative with respect to the open sets it
//! models: a query that lands within [`ANGLE_TOL`] of a cone boundary is
//! classified as outside.

use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;
use thiserror::Error;

/// Absolute tolerance used when comparing cosines of angles.
pub const ANGLE_TOL: f64 = 1e-12;

/// Tolerance on the Euclidean norm of a [`Direction`].
pub const UNIT_TOL: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("zero vector has no direction")]
    ZeroVector,
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("apex angle {0} outside (0, pi/2]")]
    InvalidApex(f64),
    #[error("margin {0} must be positive")]
    NonPositiveMargin(f64),
    #[error("cube side {0} must be positive")]
    NonPositiveSide(f64),
}

fn check_finite(v: &[f64]) -> Result<(), GeometryError> {
    if v.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(GeometryError::NonFinite)
    }
}

fn check_dim(expected: usize, found: usize) -> Result<(), GeometryError> {
    if expected == found {
        Ok(())
    } else {
        Err(GeometryError::DimensionMismatch { expected, found })
    }
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|c| c * c).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Unit vector identified with its negation.
///
/// Stored canonically: the first nonzero coordinate is positive, so two
/// projectively equal directions compare and hash equal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Direction {
    coords: Vec<f64>,
}

impl Direction {
    /// Normalizes and canonicalizes `coords`.
    pub fn new(coords: Vec<f64>) -> Result<Self, GeometryError> {
        if coords.is_empty() {
            return Err(GeometryError::ZeroDimension);
        }
        check_finite(&coords)?;
        let n = norm(&coords);
        if n == 0.0 {
            return Err(GeometryError::ZeroVector);
        }
        let sign = match coords.iter().find(|c| **c != 0.0) {
            Some(c) if *c < 0.0 => -1.0,
            _ => 1.0,
        };
        // Already-unit input (e.g. a serialized axis) is kept bit for bit.
        let n = if (n - 1.0).abs() <= 4.0 * f64::EPSILON { 1.0 } else { n };
        let coords = coords.into_iter().map(|c| sign * c / n).collect();
        Ok(Self { coords })
    }

    /// The standard basis vector e_i in dimension `dim`.
    pub fn basis(dim: usize, i: usize) -> Self {
        let mut coords = vec![0.0; dim];
        coords[i] = 1.0;
        Self { coords }
    }

    /// Planar direction at polar angle `phi`.
    pub fn planar(phi: f64) -> Self {
        Self::new(vec![phi.cos(), phi.sin()]).expect("cos and sin never vanish together")
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Projective angle in [0, pi/2] between two axes.
    ///
    /// Uses the chord formula instead of `acos`, which loses half the
    /// significant digits near 1.
    pub fn angle_to(&self, other: &Direction) -> Result<f64, GeometryError> {
        check_dim(self.dim(), other.dim())?;
        let (mut minus, mut plus) = (0.0, 0.0);
        for (a, b) in self.coords.iter().zip(&other.coords) {
            minus += (a - b) * (a - b);
            plus += (a + b) * (a + b);
        }
        let (minus, plus) = (minus.sqrt(), plus.sqrt());
        let angle = 2.0 * minus.atan2(plus);
        Ok(angle.min(std::f64::consts::PI - angle))
    }
}

impl TryFrom<Vec<f64>> for Direction {
    type Error = GeometryError;
    fn try_from(v: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(v)
    }
}

impl From<Direction> for Vec<f64> {
    fn from(d: Direction) -> Self {
        d.coords
    }
}

/// The double cone V(v, apex) with its tip at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCone", into = "RawCone")]
pub struct DoubleCone {
    axis: Direction,
    apex: f64,
    // cos(apex) + ANGLE_TOL, cached for the hot membership loop
    threshold: f64,
}

#[derive(Serialize, Deserialize)]
struct RawCone {
    axis: Vec<f64>,
    apex: f64,
}

impl TryFrom<RawCone> for DoubleCone {
    type Error = GeometryError;
    fn try_from(raw: RawCone) -> Result<Self, Self::Error> {
        DoubleCone::new(Direction::new(raw.axis)?, raw.apex)
    }
}

impl From<DoubleCone> for RawCone {
    fn from(c: DoubleCone) -> Self {
        RawCone {
            axis: c.axis.coords,
            apex: c.apex,
        }
    }
}

impl DoubleCone {
    pub fn new(axis: Direction, apex: f64) -> Result<Self, GeometryError> {
        if !(apex > 0.0 && apex <= FRAC_PI_2) {
            return Err(GeometryError::InvalidApex(apex));
        }
        Ok(Self {
            axis,
            apex,
            threshold: apex.cos() + ANGLE_TOL,
        })
    }

    pub fn dim(&self) -> usize {
        self.axis.dim()
    }

    pub fn axis(&self) -> &Direction {
        &self.axis
    }

    pub fn apex(&self) -> f64 {
        self.apex
    }

    /// Same axis, different apex.
    pub fn with_apex(&self, apex: f64) -> Result<Self, GeometryError> {
        Self::new(self.axis.clone(), apex)
    }

    /// Membership of the offset `h` in the cone with tip at the origin.
    /// No dimension or finiteness checks; callers on hot paths validate once.
    #[inline]
    pub fn contains_offset(&self, h: &[f64]) -> bool {
        let n = norm(h);
        n > 0.0 && dot(&self.axis.coords, h).abs() > self.threshold * n
    }

    /// Integer-offset variant of [`DoubleCone::contains_offset`].
    #[inline]
    pub fn contains_lattice_offset(&self, h: &[i64]) -> bool {
        let mut nn = 0.0;
        let mut ip = 0.0;
        for (a, &c) in self.axis.coords.iter().zip(h) {
            let c = c as f64;
            nn += c * c;
            ip += a * c;
        }
        nn > 0.0 && ip.abs() > self.threshold * nn.sqrt()
    }

    /// Sign of the nappe holding `h`: +1, -1, or 0 on the orthogonal plane.
    pub fn nappe_of_lattice_offset(&self, h: &[i64]) -> i8 {
        let ip: f64 = self
            .axis
            .coords
            .iter()
            .zip(h)
            .map(|(a, &c)| a * c as f64)
            .sum();
        if ip > 0.0 {
            1
        } else if ip < 0.0 {
            -1
        } else {
            0
        }
    }
}

/// Is `query` in the shifted double cone `apex_point + cone`?
pub fn cone_contains(
    cone: &DoubleCone,
    apex_point: &[f64],
    query: &[f64],
) -> Result<bool, GeometryError> {
    check_dim(cone.dim(), apex_point.len())?;
    check_dim(cone.dim(), query.len())?;
    check_finite(apex_point)?;
    check_finite(query)?;
    let h: Vec<f64> = query.iter().zip(apex_point).map(|(q, p)| q - p).collect();
    Ok(cone.contains_offset(&h))
}

/// Is the closed `margin`-ball around `query` inside the open shifted cone?
pub fn half_cone_contains(
    cone: &DoubleCone,
    margin: f64,
    apex_point: &[f64],
    query: &[f64],
) -> Result<bool, GeometryError> {
    if !(margin > 0.0) {
        return Err(GeometryError::NonPositiveMargin(margin));
    }
    if !cone_contains(cone, apex_point, query)? {
        return Ok(false);
    }
    let h: Vec<f64> = query.iter().zip(apex_point).map(|(q, p)| q - p).collect();
    Ok(boundary_distance(cone, &h) > margin)
}

/// Distance from a point `h` inside the cone to the cone's boundary.
pub fn boundary_distance(cone: &DoubleCone, h: &[f64]) -> f64 {
    let n = norm(h);
    if n == 0.0 {
        return 0.0;
    }
    let cos_beta = (dot(cone.axis.coords(), h).abs() / n).min(1.0);
    let beta = cos_beta.acos();
    if beta >= cone.apex {
        return 0.0;
    }
    n * (cone.apex - beta).sin()
}

/// Does `inner` sit inside `outer` (both with tip at the origin)?
pub fn cone_subset(inner: &DoubleCone, outer: &DoubleCone) -> Result<bool, GeometryError> {
    let delta = inner.axis.angle_to(&outer.axis)?;
    Ok(delta + inner.apex <= outer.apex + ANGLE_TOL)
}

/// Axis-parallel cube of side `side`, open or half-closed.
///
/// The half-closed variant is `[c - h/2, c + h/2)` in every coordinate, so
/// the cubes of a grid tile space without overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cube {
    center: Vec<f64>,
    side: f64,
    half_closed: bool,
}

impl Cube {
    pub fn new(center: Vec<f64>, side: f64, half_closed: bool) -> Result<Self, GeometryError> {
        if center.is_empty() {
            return Err(GeometryError::ZeroDimension);
        }
        check_finite(&center)?;
        if !(side > 0.0 && side.is_finite()) {
            return Err(GeometryError::NonPositiveSide(side));
        }
        Ok(Self {
            center,
            side,
            half_closed,
        })
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn side(&self) -> f64 {
        self.side
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    pub fn contains(&self, x: &[f64]) -> Result<bool, GeometryError> {
        check_dim(self.dim(), x.len())?;
        let r = self.side / 2.0;
        Ok(self.center.iter().zip(x).all(|(c, v)| {
            let t = v - c;
            if self.half_closed {
                -r <= t && t < r
            } else {
                -r < t && t < r
            }
        }))
    }

    /// Euclidean diameter, side times sqrt(d).
    pub fn diameter(&self) -> f64 {
        self.side * (self.dim() as f64).sqrt()
    }
}
