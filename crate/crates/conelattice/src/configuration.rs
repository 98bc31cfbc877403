//! Configurations Γ: Z^d -> double cones, reference-cone families and
//! reduction of a configuration to a finite image.

use crate::geometry::{cone_subset, DoubleCone, Direction, GeometryError, ANGLE_TOL};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI};
use std::fmt;
use std::sync::Arc;
use thiserror::Error;

/// A lattice point of Z^d.
pub type Point = Vec<i64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("minimum apex {0} outside (0, pi/2]")]
    InvalidThetaMin(f64),
    #[error("dimension must be at least 1")]
    ZeroDimension,
    #[error("point has dimension {found}, configuration has {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cone at {point:?} has apex {apex} below the minimum {theta_min}")]
    NotBounded { point: Point, apex: f64, theta_min: f64 },
    #[error("no reference cone fits inside the cone at {0:?}; the covering is broken")]
    BrokenCovering(Point),
    #[error("reference family was built for apex {family} but the configuration allows {config}")]
    FamilyMismatch { family: f64, config: f64 },
    #[error("backend `{0}` cannot be serialized")]
    NotSerializable(&'static str),
    #[error("invalid configuration document: {0}")]
    Document(String),
}

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Counter-based hash of `(seed, point)`; the per-point RNG seed.
pub fn point_hash(seed: u64, x: &[i64]) -> u64 {
    let mut h = mix64(seed);
    for &c in x {
        h = mix64(h ^ (c as u64));
    }
    h
}

/// Per-point deterministic RNG.
pub fn point_rng(seed: u64, x: &[i64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(point_hash(seed, x))
}

/// Uniform direction on the sphere via normalized Gaussians.
pub fn random_direction<R: Rng>(rng: &mut R, dim: usize) -> Direction {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if let Ok(d) = Direction::new(v) {
            return d;
        }
    }
}

/// Axis-aligned lattice box `lo <= x <= hi` carrying one cone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub lo: Point,
    pub hi: Point,
    /// Index into the configuration's cone list.
    pub cone: usize,
}

impl Region {
    fn contains(&self, x: &[i64]) -> bool {
        x.iter()
            .zip(self.lo.iter().zip(&self.hi))
            .all(|(v, (lo, hi))| lo <= v && v <= hi)
    }
}

pub type ConeCallback = Arc<dyn Fn(&[i64]) -> DoubleCone + Send + Sync>;

#[derive(Clone)]
pub enum Backend {
    Constant(DoubleCone),
    /// First matching region wins; `default` elsewhere.
    Table {
        cones: Vec<DoubleCone>,
        default: usize,
        regions: Vec<Region>,
    },
    /// Seeded i.i.d. choice from a finite list.
    Choice(Vec<DoubleCone>),
    /// Seeded i.i.d. axis uniform on the sphere, apex uniform in [theta_min, pi/2].
    Random,
    Callback(ConeCallback),
    Reduced {
        base: Arc<Configuration>,
        family: Arc<ReferenceFamily>,
    },
}

impl fmt::Debug for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Backend::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Backend::Table { cones, .. } => write!(f, "Table({} cones)", cones.len()),
            Backend::Choice(c) => write!(f, "Choice({} cones)", c.len()),
            Backend::Random => f.write_str("Random"),
            Backend::Callback(_) => f.write_str("Callback"),
            Backend::Reduced { base, family } => {
                write!(f, "Reduced({:?}, L={})", base.backend, family.len())
            }
        }
    }
}

/// Assignment of a double cone to every lattice point.
#[derive(Debug, Clone)]
pub struct Configuration {
    dim: usize,
    theta_min: f64,
    seed: u64,
    backend: Backend,
}

fn check_theta(theta: f64) -> Result<(), ConfigError> {
    if theta > 0.0 && theta <= FRAC_PI_2 {
        Ok(())
    } else {
        Err(ConfigError::InvalidThetaMin(theta))
    }
}

impl Configuration {
    pub fn new(dim: usize, theta_min: f64, seed: u64, backend: Backend) -> Result<Self, ConfigError> {
        if dim == 0 {
            return Err(ConfigError::ZeroDimension);
        }
        check_theta(theta_min)?;
        let listed: &[DoubleCone] = match &backend {
            Backend::Constant(c) => std::slice::from_ref(c),
            Backend::Table { cones, .. } | Backend::Choice(cones) => cones,
            _ => &[],
        };
        for c in listed {
            if c.dim() != dim {
                return Err(ConfigError::DimensionMismatch {
                    expected: dim,
                    found: c.dim(),
                });
            }
            if c.apex() < theta_min {
                return Err(ConfigError::NotBounded {
                    point: vec![],
                    apex: c.apex(),
                    theta_min,
                });
            }
        }
        match &backend {
            Backend::Table {
                cones,
                default,
                regions,
            } => {
                let bad = |i: usize| ConfigError::Document(format!("cone index {i} out of range"));
                if *default >= cones.len() {
                    return Err(bad(*default));
                }
                for r in regions {
                    if r.cone >= cones.len() {
                        return Err(bad(r.cone));
                    }
                    if r.lo.len() != dim || r.hi.len() != dim {
                        return Err(ConfigError::Document("region corner dimension".into()));
                    }
                }
            }
            Backend::Choice(cones) if cones.is_empty() => {
                return Err(ConfigError::Document("choice backend needs cones".into()))
            }
            _ => {}
        }
        Ok(Self {
            dim,
            theta_min,
            seed,
            backend,
        })
    }

    pub fn constant(cone: DoubleCone) -> Self {
        let dim = cone.dim();
        let theta = cone.apex();
        Self::new(dim, theta, 0, Backend::Constant(cone)).expect("a single valid cone is a valid configuration")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn theta_min(&self) -> f64 {
        self.theta_min
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn backend(&self) -> &Backend {
        &self.backend
    }

    /// Γ(x).
    pub fn cone_at(&self, x: &[i64]) -> Result<DoubleCone, ConfigError> {
        if x.len() != self.dim {
            return Err(ConfigError::DimensionMismatch {
                expected: self.dim,
                found: x.len(),
            });
        }
        match &self.backend {
            Backend::Constant(c) => Ok(c.clone()),
            Backend::Table {
                cones,
                default,
                regions,
            } => {
                let i = regions
                    .iter()
                    .find(|r| r.contains(x))
                    .map_or(*default, |r| r.cone);
                Ok(cones[i].clone())
            }
            Backend::Choice(cones) => {
                let mut rng = point_rng(self.seed, x);
                Ok(cones[rng.random_range(0..cones.len())].clone())
            }
            Backend::Random => {
                let mut rng = point_rng(self.seed, x);
                let axis = random_direction(&mut rng, self.dim);
                let apex = if self.theta_min < FRAC_PI_2 {
                    rng.random_range(self.theta_min..=FRAC_PI_2)
                } else {
                    FRAC_PI_2
                };
                Ok(DoubleCone::new(axis, apex)?)
            }
            Backend::Callback(f) => {
                let c = f(x);
                if c.dim() != self.dim {
                    return Err(ConfigError::DimensionMismatch {
                        expected: self.dim,
                        found: c.dim(),
                    });
                }
                if c.apex() < self.theta_min {
                    return Err(ConfigError::NotBounded {
                        point: x.to_vec(),
                        apex: c.apex(),
                        theta_min: self.theta_min,
                    });
                }
                Ok(c)
            }
            Backend::Reduced { .. } => {
                let (fam, m) = self.reduced_index(x)?;
                Ok(fam.cones[m].clone())
            }
        }
    }

    /// Family index of Γ̃(x) for a reduced configuration.
    pub fn reduced_index(&self, x: &[i64]) -> Result<(&ReferenceFamily, usize), ConfigError> {
        match &self.backend {
            Backend::Reduced { base, family } => {
                let cone = base.cone_at(x)?;
                let m = family
                    .fitting_index(&cone)?
                    .ok_or_else(|| ConfigError::BrokenCovering(x.to_vec()))?;
                Ok((family, m))
            }
            _ => Err(ConfigError::Document("not a reduced configuration".into())),
        }
    }

    /// The reference family of a reduced configuration.
    pub fn family(&self) -> Option<&ReferenceFamily> {
        match &self.backend {
            Backend::Reduced { family, .. } => Some(family),
            _ => None,
        }
    }

    /// Γ at many points, in input order.
    pub fn cones_at(&self, points: &[Point]) -> Result<Vec<DoubleCone>, ConfigError> {
        points.par_iter().map(|p| self.cone_at(p)).collect()
    }

    /// Γ on R^d, piecewise constant on half-closed unit cells around lattice points.
    pub fn cone_at_real(&self, s: &[f64]) -> Result<DoubleCone, ConfigError> {
        let x: Point = s.iter().map(|v| (v + 0.5).floor() as i64).collect();
        self.cone_at(&x)
    }

    pub fn to_document(&self) -> Result<ConfigDocument, ConfigError> {
        let (backend, cones, default, regions) = match &self.backend {
            Backend::Constant(c) => ("constant", vec![c.clone()], None, None),
            Backend::Table {
                cones,
                default,
                regions,
            } => ("table", cones.clone(), Some(*default), Some(regions.clone())),
            Backend::Choice(c) => ("choice", c.clone(), None, None),
            Backend::Random => ("random", vec![], None, None),
            Backend::Callback(_) => return Err(ConfigError::NotSerializable("callback")),
            Backend::Reduced { .. } => return Err(ConfigError::NotSerializable("reduced")),
        };
        Ok(ConfigDocument {
            dim: self.dim,
            theta_min: self.theta_min,
            backend: backend.to_string(),
            seed: self.seed,
            cones,
            default,
            regions,
        })
    }

    pub fn from_document(doc: &ConfigDocument) -> Result<Self, ConfigError> {
        let backend = match doc.backend.as_str() {
            "constant" => match doc.cones.as_slice() {
                [c] => Backend::Constant(c.clone()),
                _ => {
                    return Err(ConfigError::Document(
                        "constant backend needs exactly one cone".into(),
                    ))
                }
            },
            "table" => Backend::Table {
                cones: doc.cones.clone(),
                default: doc.default.unwrap_or(0),
                regions: doc.regions.clone().unwrap_or_default(),
            },
            "choice" => Backend::Choice(doc.cones.clone()),
            "random" => Backend::Random,
            other => return Err(ConfigError::Document(format!("unknown backend `{other}`"))),
        };
        Self::new(doc.dim, doc.theta_min, doc.seed, backend)
    }

    pub fn to_json(&self) -> Result<String, ConfigError> {
        serde_json::to_string_pretty(&self.to_document()?).map_err(|e| ConfigError::Document(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self, ConfigError> {
        let doc: ConfigDocument = serde_json::from_str(s).map_err(|e| ConfigError::Document(e.to_string()))?;
        Self::from_document(&doc)
    }
}

/// JSON form of a configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub dim: usize,
    pub theta_min: f64,
    pub backend: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cones: Vec<DoubleCone>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub default: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<Vec<Region>>,
}

/// Finite family of apex-θ cones covering the sphere, θ = ϑ/3.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceFamily {
    dim: usize,
    source_apex: f64,
    apex: f64,
    cones: Vec<DoubleCone>,
}

impl ReferenceFamily {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// ϑ the family was built for.
    pub fn source_apex(&self) -> f64 {
        self.source_apex
    }

    /// Common apex θ = ϑ/3.
    pub fn apex(&self) -> f64 {
        self.apex
    }

    pub fn cones(&self) -> &[DoubleCone] {
        &self.cones
    }

    /// L.
    pub fn len(&self) -> usize {
        self.cones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cones.is_empty()
    }

    /// First family cone containing the direction `h`.
    pub fn covering_index(&self, h: &[f64]) -> Option<usize> {
        self.cones.iter().position(|c| c.contains_offset(h))
    }

    /// Smallest index m with V^m ⊂ `target`.
    pub fn fitting_index(&self, target: &DoubleCone) -> Result<Option<usize>, ConfigError> {
        if target.dim() != self.dim {
            return Err(ConfigError::DimensionMismatch {
                expected: self.dim,
                found: target.dim(),
            });
        }
        // Fast path on |<u,v>| = cos δ; only near-ties go through the exact test.
        let slack = target.apex() - self.apex;
        if slack < -ANGLE_TOL {
            return Ok(None);
        }
        let cut = slack.max(0.0).cos();
        let axis = target.axis().coords();
        for (m, c) in self.cones.iter().enumerate() {
            let ip: f64 = c
                .axis()
                .coords()
                .iter()
                .zip(axis)
                .map(|(a, b)| a * b)
                .sum::<f64>()
                .abs();
            if ip > cut + 1e-9 {
                return Ok(Some(m));
            }
            if ip >= cut - 1e-9 && cone_subset(c, target)? {
                return Ok(Some(m));
            }
        }
        Ok(None)
    }
}

/// Reference cones for dimension `dim` and minimum apex `theta`.
pub fn reference_cones(dim: usize, theta: f64) -> Result<ReferenceFamily, ConfigError> {
    if dim == 0 {
        return Err(ConfigError::ZeroDimension);
    }
    check_theta(theta)?;
    let apex = theta / 3.0;
    let axes: Vec<Direction> = match dim {
        1 => vec![Direction::basis(1, 0)],
        2 => {
            let m = (PI / apex).ceil() as usize + 1;
            (0..m).map(|k| Direction::planar(k as f64 * PI / m as f64)).collect()
        }
        _ => greedy_axes(dim, theta),
    };
    let cones = axes
        .into_iter()
        .map(|a| DoubleCone::new(a, apex))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ReferenceFamily {
        dim,
        source_apex: theta,
        apex,
        cones,
    })
}

/// Greedy cover of a cube-face net whose angular resolution is below ϑ/12.
fn greedy_axes(dim: usize, theta: f64) -> Vec<Direction> {
    let resolution = theta / 12.0;
    let spacing = 0.99 * 2.0 * resolution.sin() / ((dim - 1) as f64).sqrt();
    let steps = (2.0 / spacing).ceil() as usize;
    let grid: Vec<f64> = (0..=steps).map(|k| -1.0 + 2.0 * k as f64 / steps as f64).collect();
    // Projective directions only need the faces x_i = +1.
    let mut net: Vec<Direction> = Vec::new();
    let mut idx = vec![0usize; dim - 1];
    for face in 0..dim {
        idx.iter_mut().for_each(|i| *i = 0);
        loop {
            let mut v = Vec::with_capacity(dim);
            let mut it = idx.iter();
            for j in 0..dim {
                if j == face {
                    v.push(1.0);
                } else {
                    v.push(grid[*it.next().unwrap()]);
                }
            }
            net.push(Direction::new(v).expect("face points are nonzero"));
            let mut k = 0;
            while k < idx.len() {
                idx[k] += 1;
                if idx[k] <= steps {
                    break;
                }
                idx[k] = 0;
                k += 1;
            }
            if k == idx.len() {
                break;
            }
        }
    }
    let mark = (theta / 3.0 - resolution).cos();
    let mut covered = vec![false; net.len()];
    let mut axes = Vec::new();
    for i in 0..net.len() {
        if covered[i] {
            continue;
        }
        let a = net[i].coords().to_vec();
        for (j, c) in covered.iter_mut().enumerate() {
            if !*c {
                let ip: f64 = net[j].coords().iter().zip(&a).map(|(x, y)| x * y).sum();
                if ip.abs() >= mark {
                    *c = true;
                }
            }
        }
        axes.push(net[i].clone());
    }
    axes
}

/// Γ̃(x) = V^m for the smallest m with V^m ⊂ Γ(x).
pub fn reduce_configuration(
    config: &Configuration,
    family: &ReferenceFamily,
) -> Result<Configuration, ConfigError> {
    if family.dim != config.dim {
        return Err(ConfigError::DimensionMismatch {
            expected: config.dim,
            found: family.dim,
        });
    }
    // Reducing a reduced configuration reduces its base again, which is the same map.
    let base = match &config.backend {
        Backend::Reduced { base, .. } => base.clone(),
        _ => Arc::new(config.clone()),
    };
    if family.source_apex > base.theta_min + ANGLE_TOL {
        return Err(ConfigError::FamilyMismatch {
            family: family.source_apex,
            config: base.theta_min,
        });
    }
    Configuration::new(
        config.dim,
        family.apex,
        config.seed,
        Backend::Reduced {
            base,
            family: Arc::new(family.clone()),
        },
    )
}

/// i.i.d. random configuration: uniform axis, apex uniform in [ϑ, pi/2].
pub fn random_configuration(dim: usize, theta: f64, seed: u64) -> Result<Configuration, ConfigError> {
    Configuration::new(dim, theta, seed, Backend::Random)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_6;

    #[test]
    fn family_sizes() {
        let f1 = reference_cones(1, 0.3).unwrap();
        assert_eq!(f1.len(), 1);
        assert_eq!(f1.cones()[0].axis().coords(), &[1.0]);
        // θ = π/18 gives m = 18 + 1
        assert_eq!(reference_cones(2, FRAC_PI_6).unwrap().len(), 19);
        assert!(reference_cones(2, 0.0).is_err());
        assert!(reference_cones(2, 2.0).is_err());
    }

    #[test]
    fn constant_reduction_is_constant() {
        let c = DoubleCone::new(Direction::basis(2, 0), FRAC_PI_2).unwrap();
        let g = Configuration::constant(c);
        let fam = reference_cones(2, FRAC_PI_2).unwrap();
        let red = reduce_configuration(&g, &fam).unwrap();
        let a = red.cone_at(&[0, 0]).unwrap();
        for x in [[3, 4], [-7, 1], [100, -100]] {
            assert_eq!(red.cone_at(&x).unwrap(), a);
        }
    }

    #[test]
    fn reduce_is_idempotent() {
        let g = random_configuration(2, FRAC_PI_6, 7).unwrap();
        let fam = reference_cones(2, FRAC_PI_6).unwrap();
        let once = reduce_configuration(&g, &fam).unwrap();
        let twice = reduce_configuration(&once, &fam).unwrap();
        for i in -20..20 {
            let x = [i, 3 * i - 5];
            assert_eq!(once.cone_at(&x).unwrap(), twice.cone_at(&x).unwrap());
        }
    }

    #[test]
    fn random_is_deterministic_and_bounded() {
        let a = random_configuration(3, 0.4, 11).unwrap();
        let b = random_configuration(3, 0.4, 11).unwrap();
        let c = random_configuration(3, 0.4, 12).unwrap();
        let mut differs = false;
        for i in -5..5 {
            let x = [i, -i, 2 * i];
            let ca = a.cone_at(&x).unwrap();
            assert_eq!(ca, b.cone_at(&x).unwrap());
            assert!(ca.apex() >= 0.4);
            differs |= ca != c.cone_at(&x).unwrap();
        }
        assert!(differs);
    }

    #[test]
    fn callback_is_validated() {
        let cb: ConeCallback = Arc::new(|_x: &[i64]| DoubleCone::new(Direction::basis(2, 1), 0.2).unwrap());
        let g = Configuration::new(2, 0.3, 0, Backend::Callback(cb)).unwrap();
        assert!(matches!(g.cone_at(&[0, 0]), Err(ConfigError::NotBounded { .. })));
        assert!(matches!(g.cone_at(&[0]), Err(ConfigError::DimensionMismatch { .. })));
    }

    #[test]
    fn table_regions() {
        let c0 = DoubleCone::new(Direction::basis(2, 0), 1.0).unwrap();
        let c1 = DoubleCone::new(Direction::basis(2, 1), 1.2).unwrap();
        let g = Configuration::new(
            2,
            1.0,
            0,
            Backend::Table {
                cones: vec![c0.clone(), c1.clone()],
                default: 0,
                regions: vec![Region {
                    lo: vec![0, 0],
                    hi: vec![2, 2],
                    cone: 1,
                }],
            },
        )
        .unwrap();
        assert_eq!(g.cone_at(&[1, 2]).unwrap(), c1);
        assert_eq!(g.cone_at(&[3, 2]).unwrap(), c0);
        let back = Configuration::from_json(&g.to_json().unwrap()).unwrap();
        assert_eq!(back.cone_at(&[1, 2]).unwrap(), c1);
    }

    #[test]
    fn real_points_round_to_cells() {
        let g = random_configuration(2, 0.5, 3).unwrap();
        assert_eq!(g.cone_at_real(&[0.49, -0.5]).unwrap(), g.cone_at(&[0, 0]).unwrap());
        assert_eq!(g.cone_at_real(&[0.5, 0.0]).unwrap(), g.cone_at(&[1, 0]).unwrap());
    }

    #[test]
    fn documents_reject_unknown_fields() {
        let bad = r#"{"dim":2,"theta_min":0.5,"backend":"random","seed":1,"cones":[],"extra":1}"#;
        assert!(Configuration::from_json(bad).is_err());
        let unknown = r#"{"dim":2,"theta_min":0.5,"backend":"warp","seed":1}"#;
        assert!(Configuration::from_json(unknown).is_err());
    }
}
