//! Experiment configs, one JSON document per subcommand.

use conelattice::configuration::{random_configuration, ConfigDocument, Configuration};
use conelattice::continuum::Domain;
use serde::{Deserialize, Serialize};
use std::f64::consts::FRAC_PI_2;

/// A usage error; the message names the offending field.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

fn bad(field: &str, why: &str) -> UsageError {
    UsageError(format!("field `{field}`: {why}"))
}

pub fn check_alpha(field: &str, a: f64) -> Result<(), UsageError> {
    if a > 0.0 && a < 2.0 {
        Ok(())
    } else {
        Err(bad(field, "must lie in (0, 2)"))
    }
}

pub fn check_theta(field: &str, t: f64) -> Result<(), UsageError> {
    if t > 0.0 && t <= FRAC_PI_2 {
        Ok(())
    } else {
        Err(bad(field, "must lie in (0, pi/2]"))
    }
}

pub fn check_positive(field: &str, v: f64) -> Result<(), UsageError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, "must be positive"))
    }
}

pub fn check_at_least_one(field: &str, v: f64) -> Result<(), UsageError> {
    if v >= 1.0 && v.is_finite() {
        Ok(())
    } else {
        Err(bad(field, "must be at least 1"))
    }
}

fn check_count(field: &str, v: u64) -> Result<(), UsageError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(bad(field, "must be at least 1"))
    }
}

fn check_dim(field: &str, d: usize) -> Result<(), UsageError> {
    if (1..=8).contains(&d) {
        Ok(())
    } else {
        Err(bad(field, "must lie in 1..=8"))
    }
}

/// Either an explicit configuration or `count` random ones with seeds
/// seed, seed + 1, ...
pub fn configurations(
    explicit: &Option<ConfigDocument>,
    dim: usize,
    theta_min: f64,
    seed: u64,
    count: u64,
) -> Result<Vec<(u64, Configuration)>, UsageError> {
    match explicit {
        Some(doc) => {
            let c = Configuration::from_document(doc).map_err(|e| bad("configuration", &e.to_string()))?;
            Ok(vec![(doc.seed, c)])
        }
        None => (0..count)
            .map(|k| {
                let s = seed.wrapping_add(k);
                random_configuration(dim, theta_min, s)
                    .map(|c| (s, c))
                    .map_err(|e| bad("theta_min", &e.to_string()))
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverConfig {
    pub seed: u64,
    pub dims: Vec<usize>,
    pub thetas: Vec<f64>,
    pub samples: u64,
}

impl CoverConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        for d in &self.dims {
            check_dim("dims", *d)?;
        }
        for t in &self.thetas {
            check_theta("thetas", *t)?;
        }
        check_count("samples", self.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectivityConfig {
    pub seed: u64,
    pub dim: usize,
    pub theta_min: f64,
    pub configs: u64,
    pub radii: Vec<f64>,
    pub centers: u64,
    /// Centers are drawn from [-spread, spread]^d.
    pub spread: i64,
    /// R is searched by doubling up to cap_factor · r.
    pub cap_factor: f64,
    #[serde(default)]
    pub configuration: Option<ConfigDocument>,
}

impl ConnectivityConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        check_dim("dim", self.dim)?;
        check_theta("theta_min", self.theta_min)?;
        check_count("configs", self.configs)?;
        check_count("centers", self.centers)?;
        for r in &self.radii {
            check_positive("radii", *r)?;
        }
        if self.spread < 0 {
            return Err(bad("spread", "must be nonnegative"));
        }
        check_at_least_one("cap_factor", self.cap_factor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub seed: u64,
    pub dim: usize,
    pub theta_min: f64,
    pub configs: u64,
    pub radius: f64,
    pub r0: f64,
    /// Scale step Δ; chosen automatically when absent.
    #[serde(default)]
    pub delta: Option<i64>,
    /// Write the edge list and path family of the first configuration.
    #[serde(default)]
    pub export: bool,
    #[serde(default)]
    pub configuration: Option<ConfigDocument>,
}

impl PathsConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        check_dim("dim", self.dim)?;
        check_theta("theta_min", self.theta_min)?;
        check_count("configs", self.configs)?;
        check_positive("radius", self.radius)?;
        check_positive("r0", self.r0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelChoice {
    Cone,
    Fractional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    pub seed: u64,
    pub dim: usize,
    pub theta_min: f64,
    pub alpha: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    pub kernel: KernelChoice,
    pub configs: u64,
    /// Radius of the inner ball B.
    pub radius: f64,
    pub r0: f64,
    /// Dilation used for the ratio; the chaining κ capped by `kappa_cap` when absent.
    #[serde(default)]
    pub kappa: Option<f64>,
    pub kappa_cap: f64,
    /// Build path families and report the chaining constant.
    pub chain: bool,
    /// Random functions replayed through the chained inequality.
    pub functions: usize,
    /// Iteration budget of the ascent probe.
    pub budget: usize,
    #[serde(default)]
    pub configuration: Option<ConfigDocument>,
}

impl CompareConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        check_dim("dim", self.dim)?;
        check_theta("theta_min", self.theta_min)?;
        check_alpha("alpha", self.alpha)?;
        check_at_least_one("Lambda", self.lambda)?;
        check_count("configs", self.configs)?;
        check_positive("radius", self.radius)?;
        check_positive("r0", self.r0)?;
        if let Some(k) = self.kappa {
            check_at_least_one("kappa", k)?;
        }
        check_at_least_one("kappa_cap", self.kappa_cap)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscretizeConfig {
    pub seed: u64,
    pub dim: usize,
    pub theta_min: f64,
    pub alpha: f64,
    #[serde(rename = "Lambda")]
    pub lambda: f64,
    pub h: Vec<f64>,
    pub m: usize,
    pub samples: usize,
    /// Pairs are drawn from the lattice ball of this radius (index units).
    pub radius: f64,
    /// Multiply ω by 10^6 on the first sampled pair.
    #[serde(default)]
    pub inject_fault: bool,
    #[serde(default)]
    pub configuration: Option<ConfigDocument>,
}

impl DiscretizeConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        check_dim("dim", self.dim)?;
        check_theta("theta_min", self.theta_min)?;
        check_alpha("alpha", self.alpha)?;
        check_at_least_one("Lambda", self.lambda)?;
        for h in &self.h {
            check_positive("h", *h)?;
        }
        if self.m == 0 {
            return Err(bad("m", "must be at least 1"));
        }
        check_count("samples", self.samples as u64)?;
        check_positive("radius", self.radius)
    }
}

/// Test function for convergence studies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum FunctionSpec {
    /// amplitude · exp(-|s|² / width²).
    Gaussian { amplitude: f64, width: f64 },
    Constant { value: f64 },
}

impl FunctionSpec {
    pub fn eval(&self, s: &[f64]) -> f64 {
        match self {
            FunctionSpec::Gaussian { amplitude, width } => {
                let r2: f64 = s.iter().map(|v| v * v).sum();
                amplitude * (-r2 / (width * width)).exp()
            }
            FunctionSpec::Constant { value } => *value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergeConfig {
    pub seed: u64,
    pub alpha: f64,
    pub function: FunctionSpec,
    pub domain: Domain,
    pub h: Vec<f64>,
    pub m: usize,
    pub mc_samples: u64,
}

impl ConvergeConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        check_alpha("alpha", self.alpha)?;
        self.domain.validate().map_err(|e| bad("domain", &e.to_string()))?;
        if self.h.is_empty() {
            return Err(bad("h", "needs at least one spacing"));
        }
        for h in &self.h {
            check_positive("h", *h)?;
        }
        if self.h.windows(2).any(|w| w[1] >= w[0] || w[1].is_nan()) {
            return Err(bad("h", "must be strictly decreasing"));
        }
        if let FunctionSpec::Gaussian { width, .. } = &self.function {
            check_positive("function.width", *width)?;
        }
        if self.m == 0 {
            return Err(bad("m", "must be at least 1"));
        }
        check_count("mc_samples", self.mc_samples.saturating_sub(1))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WhitneyConfig {
    pub seed: u64,
    pub domain: Domain,
    pub kappa: f64,
    pub max_depth: u32,
    pub samples: usize,
}

impl WhitneyConfig {
    pub fn validate(&self) -> Result<(), UsageError> {
        self.domain.validate().map_err(|e| bad("domain", &e.to_string()))?;
        check_at_least_one("kappa", self.kappa)?;
        if self.max_depth > 16 {
            return Err(bad("max_depth", "must be at most 16"));
        }
        check_count("samples", self.samples as u64)
    }
}
