//! Experiment harness: `conelattice <subcommand> --config <json> --out <dir>`.
//!
//! Every subcommand writes `<cmd>.csv` and `<cmd>_report.txt` into the
//! output directory. Exit codes: 0 all checks pass, 1 some property
//! failed, 2 usage error.

pub mod config;

use clap::{Parser, Subcommand};
use config::*;
use conelattice::chaining::{build_path_family, verify_path_family, FamilyOptions};
use conelattice::configuration::{mix64, point_rng, random_direction, reference_cones, Configuration};
use conelattice::continuum::{
    check_whitney, convergence_study, discretize_kernel, verify_discretized_sandwich, whitney_balls, write_convergence_csv,
    write_whitney_csv, ContinuousKernel, QuadratureSpec,
};
use conelattice::forms::{
    chaining_constant, comparability_ratio, cone_kernel, custom_kernel, fractional_kernel, sample_pairs, DiscreteKernel,
};
use conelattice::lattice_graph::{build_graph, connectivity_radius, dist2, format_point, LatticeBall};
use rand::{Rng, SeedableRng};
use serde::de::DeserializeOwned;
use serde_json::Value;
use sha2::{Digest, Sha256};
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// Environment variable overriding the config's `seed`.
pub const SEED_ENV: &str = "CONELATTICE_SEED";

#[derive(Parser, Debug)]
#[command(name = "conelattice", version, about = "Cone-configured lattice graph experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true, default_value = "conelattice-out")]
    out: PathBuf,
    /// Worker threads; defaults to available parallelism.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[arg(long, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy, PartialEq, Eq)]
enum Command {
    /// Reference families and the sphere-covering check.
    Cover,
    /// r-R connectivity searches.
    Connectivity,
    /// Build and verify path families.
    Paths,
    /// Comparability ratios and the chaining constant.
    Compare,
    /// Discretized-kernel sandwich verification.
    Discretize,
    /// Convergence of discrete energies as h -> 0.
    Converge,
    /// Whitney ball covering.
    Whitney,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Cover => "cover",
            Command::Connectivity => "connectivity",
            Command::Paths => "paths",
            Command::Compare => "compare",
            Command::Discretize => "discretize",
            Command::Converge => "converge",
            Command::Whitney => "whitney",
        }
    }
}

/// Collected results of one subcommand.
#[derive(Debug, Default)]
pub struct Report {
    pub lines: Vec<String>,
    pub checks: Vec<(String, bool)>,
    pub violations: Vec<String>,
    pub csv: Vec<u8>,
    /// Extra artifacts: (file name, bytes).
    pub extra: Vec<(String, Vec<u8>)>,
}

impl Report {
    fn line(&mut self, s: impl Into<String>) {
        self.lines.push(s.into());
    }

    fn check(&mut self, name: impl Into<String>, ok: bool) {
        self.checks.push((name.into(), ok));
    }

    pub fn all_pass(&self) -> bool {
        self.violations.is_empty() && self.checks.iter().all(|c| c.1)
    }

    pub fn render(&self, command: &str, hash: &str, seed: Option<u64>) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "conelattice {command} report");
        let _ = writeln!(s, "config-sha256: {hash}");
        if let Some(seed) = seed {
            let _ = writeln!(s, "seed: {seed}");
        }
        s.push('\n');
        for l in &self.lines {
            let _ = writeln!(s, "{l}");
        }
        s.push_str("\nCHECKS\n");
        for (name, ok) in &self.checks {
            let _ = writeln!(s, "{} {name}", if *ok { "PASS" } else { "FAIL" });
        }
        if !self.violations.is_empty() {
            s.push_str("\nVIOLATIONS\n");
            for v in &self.violations {
                let _ = writeln!(s, "{v}");
            }
        }
        s
    }
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

/// Fixed-precision float formatting shared by every CSV.
pub fn fmt_f(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.12e}")
    } else if v.is_nan() {
        "nan".into()
    } else if v > 0.0 {
        "inf".into()
    } else {
        "-inf".into()
    }
}

fn parse_config<T: DeserializeOwned>(value: Value) -> Result<T, UsageError> {
    serde_json::from_value(value).map_err(|e| UsageError(format!("invalid config: {e}")))
}

/// Reads the config, applies the seed override and returns (value, sha256).
fn load_config(path: &Path) -> Result<(Value, String), UsageError> {
    let text = fs::read_to_string(path).map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let mut value: Value = serde_json::from_str(&text).map_err(|e| UsageError(format!("config is not valid JSON: {e}")))?;
    if let Ok(s) = std::env::var(SEED_ENV) {
        let seed: u64 = s
            .trim()
            .parse()
            .map_err(|_| UsageError(format!("{SEED_ENV} must be an unsigned integer, got {s:?}")))?;
        match value.as_object_mut() {
            Some(obj) => {
                obj.insert("seed".into(), Value::from(seed));
            }
            None => return Err(UsageError("config must be a JSON object".into())),
        }
    }
    let canonical = serde_json::to_string(&value).expect("values serialize");
    let hash = hex::encode(Sha256::digest(canonical.as_bytes()));
    Ok((value, hash))
}

/// Runs the CLI on `args` (including the program name) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(&cli) {
        Ok(report) => {
            if report.all_pass() {
                0
            } else {
                1
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn run_cli(cli: &Cli) -> Result<Report, UsageError> {
    let path = cli.config.as_ref().ok_or_else(|| UsageError("--config <path> is required".into()))?;
    let (value, hash) = load_config(path)?;
    let seed = value.get("seed").and_then(Value::as_u64);
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be at least 1".into()));
        }
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| UsageError(format!("thread pool: {e}")))?;
    let verbose = cli.verbose;
    let report = pool.install(|| execute(cli.command, value, verbose))?;
    fs::create_dir_all(&cli.out).map_err(|e| UsageError(format!("cannot create {}: {e}", cli.out.display())))?;
    let name = cli.command.name();
    let write = |file: String, bytes: &[u8]| {
        let p = cli.out.join(&file);
        fs::write(&p, bytes).map_err(|e| UsageError(format!("cannot write {}: {e}", p.display())))
    };
    write(format!("{name}.csv"), &report.csv)?;
    write(format!("{name}_report.txt"), report.render(name, &hash, seed).as_bytes())?;
    for (file, bytes) in &report.extra {
        write(file.clone(), bytes)?;
    }
    if verbose {
        eprintln!("{name}: wrote results to {}", cli.out.display());
    }
    Ok(report)
}

/// Runs one subcommand on an already-loaded config value.
pub fn execute_named(command: &str, value: Value, verbose: bool) -> Result<Report, UsageError> {
    let cmd = match command {
        "cover" => Command::Cover,
        "connectivity" => Command::Connectivity,
        "paths" => Command::Paths,
        "compare" => Command::Compare,
        "discretize" => Command::Discretize,
        "converge" => Command::Converge,
        "whitney" => Command::Whitney,
        other => return Err(UsageError(format!("unknown subcommand {other:?}"))),
    };
    execute(cmd, value, verbose)
}

fn execute(cmd: Command, value: Value, verbose: bool) -> Result<Report, UsageError> {
    match cmd {
        Command::Cover => {
            let c: CoverConfig = parse_config(value)?;
            c.validate()?;
            Ok(cover(&c))
        }
        Command::Connectivity => {
            let c: ConnectivityConfig = parse_config(value)?;
            c.validate()?;
            connectivity(&c, verbose)
        }
        Command::Paths => {
            let c: PathsConfig = parse_config(value)?;
            c.validate()?;
            paths(&c, verbose)
        }
        Command::Compare => {
            let c: CompareConfig = parse_config(value)?;
            c.validate()?;
            compare(&c, verbose)
        }
        Command::Discretize => {
            let c: DiscretizeConfig = parse_config(value)?;
            c.validate()?;
            discretize(&c)
        }
        Command::Converge => {
            let c: ConvergeConfig = parse_config(value)?;
            c.validate()?;
            converge(&c)
        }
        Command::Whitney => {
            let c: WhitneyConfig = parse_config(value)?;
            c.validate()?;
            whitney(&c)
        }
    }
}

fn cover(c: &CoverConfig) -> Report {
    let mut rep = Report::default();
    let mut rows = Vec::new();
    for &d in &c.dims {
        for &theta in &c.thetas {
            let fam = match reference_cones(d, theta) {
                Ok(f) => f,
                Err(e) => {
                    rep.violations.push(format!("d={d} theta_min={theta}: {e}"));
                    continue;
                }
            };
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(mix64(c.seed ^ mix64(d as u64) ^ theta.to_bits()));
            let misses = (0..c.samples)
                .filter(|_| fam.covering_index(random_direction(&mut rng, d).coords()).is_none())
                .count();
            let apex_ok = fam.apex() == theta / 3.0;
            rep.check(format!("d={d} theta_min={theta}: apex = theta_min/3"), apex_ok);
            rep.check(format!("d={d} theta_min={theta}: {} samples covered", c.samples), misses == 0);
            rep.line(format!("d={d} theta_min={theta} L={} misses={misses}", fam.len()));
            rows.push(vec![
                d.to_string(),
                fmt_f(theta),
                fmt_f(fam.apex()),
                fam.len().to_string(),
                c.samples.to_string(),
                misses.to_string(),
            ]);
        }
    }
    rep.csv = csv_bytes(&["d", "theta_min", "theta", "L", "samples", "misses"], &rows);
    rep
}

fn connectivity(c: &ConnectivityConfig, verbose: bool) -> Result<Report, UsageError> {
    let mut rep = Report::default();
    let mut rows = Vec::new();
    let mut worst: f64 = 0.0;
    for (seed, config) in configurations(&c.configuration, c.dim, c.theta_min, c.seed, c.configs)? {
        if verbose {
            eprintln!("connectivity: configuration seed {seed}");
        }
        for &r in &c.radii {
            for k in 0..c.centers {
                let mut rng = point_rng(mix64(c.seed ^ seed), &[k as i64, r.to_bits() as i64]);
                let x: Vec<i64> = (0..c.dim).map(|_| rng.random_range(-c.spread..=c.spread)).collect();
                let cap = c.cap_factor * r;
                let found = connectivity_radius(&config, &x, r, cap);
                let big = match &found {
                    Ok(big) => {
                        worst = worst.max(big / r);
                        fmt_f(*big)
                    }
                    Err(e) => {
                        rep.violations.push(format!("seed {seed} r={r} center {}: {e}", format_point(&x)));
                        "inf".into()
                    }
                };
                rows.push(vec![seed.to_string(), fmt_f(r), format_point(&x), big]);
            }
        }
    }
    rep.line(format!("largest R/r found: {worst}"));
    rep.check(format!("every search finished with R <= {} r", c.cap_factor), rep.violations.is_empty());
    rep.csv = csv_bytes(&["seed", "r", "center", "R"], &rows);
    Ok(rep)
}

fn paths(c: &PathsConfig, verbose: bool) -> Result<Report, UsageError> {
    let mut rep = Report::default();
    let mut rows = Vec::new();
    let center = vec![0i64; c.dim];
    let mut all = [true; 6];
    let options = FamilyOptions::default();
    for (i, (seed, config)) in configurations(&c.configuration, c.dim, c.theta_min, c.seed, c.configs)?.into_iter().enumerate() {
        if verbose {
            eprintln!("paths: configuration seed {seed}");
        }
        let fam = match build_path_family(&config, &center, c.radius, c.delta, c.r0, &options) {
            Ok(f) => f,
            Err(e) => {
                rep.violations.push(format!("seed {seed}: {e}"));
                all[0] = false;
                continue;
            }
        };
        let v = verify_path_family(&fam);
        let flags = [v.endpoints_ok, v.edges_ok, v.usage_ok, v.lengths_ok, v.edges_in_graph];
        for (a, f) in all.iter_mut().zip(flags) {
            *a &= f;
        }
        for msg in &v.violations {
            rep.violations.push(format!("seed {seed}: {msg}"));
        }
        let s = &fam.stats;
        rep.line(format!(
            "seed {seed}: Delta={} L={} pairs={} B={} M={} lambda={} R_used={}",
            fam.delta, fam.l, s.pairs, s.b, s.m, s.lambda, s.r_used
        ));
        let yn = |b: bool| if b { "PASS" } else { "FAIL" }.to_string();
        rows.push(vec![
            seed.to_string(),
            c.dim.to_string(),
            fmt_f(c.theta_min),
            fmt_f(c.radius),
            fam.delta.to_string(),
            fam.l.to_string(),
            s.pairs.to_string(),
            s.b.to_string(),
            s.m.to_string(),
            fmt_f(s.lambda),
            fmt_f(s.b_bound),
            fmt_f(s.m_bound),
            fmt_f(s.lambda_bound),
            yn(v.endpoints_ok),
            yn(v.edges_ok),
            yn(v.usage_ok),
            yn(v.lengths_ok),
            yn(v.edges_in_graph),
        ]);
        if c.export && i == 0 {
            let ball = LatticeBall::around(&center, c.radius).map_err(|e| UsageError(format!("field `radius`: {e}")))?;
            match build_graph(&config, &ball) {
                Ok(g) => rep.extra.push(("paths_graph_edges.txt".into(), g.edge_list().into_bytes())),
                Err(e) => rep.violations.push(format!("seed {seed}: graph export: {e}")),
            }
            let mut buf = Vec::new();
            fam.export(&mut buf).expect("in-memory write");
            rep.extra.push(("paths_family.txt".into(), buf));
        }
    }
    let names = [
        "(1) every admissible pair has a path from x to y",
        "(2) edges per path B within its a-priori bound",
        "(3) edge usage M within its a-priori bound",
        "(4) edge lengths within lambda <= 2 R_used Delta",
        "every path edge is an edge of G(Gamma) longer than R0",
    ];
    for (n, ok) in names.iter().zip(all) {
        rep.check(*n, ok);
    }
    rep.csv = csv_bytes(
        &[
            "seed", "d", "theta", "radius", "delta", "L", "pairs", "B", "M", "lambda", "B_bound", "M_bound", "lambda_bound",
            "endpoints", "edges", "usage", "lengths", "in_graph",
        ],
        &rows,
    );
    Ok(rep)
}

fn compare(c: &CompareConfig, verbose: bool) -> Result<Report, UsageError> {
    let mut rep = Report::default();
    let mut rows = Vec::new();
    let center = vec![0i64; c.dim];
    let ball = LatticeBall::around(&center, c.radius).map_err(|e| UsageError(format!("field `radius`: {e}")))?;
    let pts = ball.points();
    let r02 = c.r0 * c.r0;
    let pairs: usize = (0..pts.len())
        .map(|i| (i + 1..pts.len()).filter(|&j| dist2(&pts[i], &pts[j]) as f64 > r02).count())
        .sum();
    let (mut finite, mut below, mut replays) = (true, true, true);
    for (seed, config) in configurations(&c.configuration, c.dim, c.theta_min, c.seed, c.configs)? {
        if verbose {
            eprintln!("compare: configuration seed {seed}");
        }
        let kernel: DiscreteKernel = match c.kernel {
            KernelChoice::Cone => cone_kernel(&config, c.alpha, c.lambda),
            KernelChoice::Fractional => fractional_kernel(c.dim, c.alpha),
        }
        .map_err(|e| UsageError(format!("field `alpha`/`Lambda`: {e}")))?;
        let mut c_chain = None;
        let mut kappa = c.kappa.unwrap_or(c.kappa_cap);
        if c.chain {
            let chained = build_path_family(&config, &center, c.radius, None, c.r0, &FamilyOptions::default())
                .map_err(|e| e.to_string())
                .and_then(|fam| chaining_constant(&fam, &kernel, c.functions, mix64(c.seed ^ seed)).map_err(|e| e.to_string()));
            match chained {
                Ok(cc) => {
                    if !cc.nodes_inside {
                        rep.violations.push(format!("seed {seed}: path nodes leave B_(kappa R)"));
                        replays = false;
                    }
                    if c.kappa.is_none() {
                        kappa = cc.kappa.min(c.kappa_cap);
                    }
                    c_chain = Some(cc.c);
                }
                Err(e) => {
                    rep.violations.push(format!("seed {seed}: {e}"));
                    replays = false;
                }
            }
        }
        let est = comparability_ratio(&kernel, &center, c.radius, kappa, c.r0, c.budget, mix64(c.seed ^ seed))
            .map_err(|e| UsageError(format!("comparability: {e}")))?;
        finite &= est.ratio.is_finite();
        if let Some(cc) = c_chain {
            if est.ratio > 1.0 / cc {
                below = false;
                rep.violations.push(format!("seed {seed}: ratio {} exceeds 1/c = {}", est.ratio, 1.0 / cc));
            }
        }
        rep.line(format!("seed {seed}: ratio={} via {} kappa={kappa}", est.ratio, est.source));
        rows.push(vec![
            seed.to_string(),
            c.dim.to_string(),
            fmt_f(c.alpha),
            fmt_f(c.theta_min),
            fmt_f(c.radius),
            fmt_f(kappa),
            fmt_f(est.ratio),
            c_chain.map(fmt_f).unwrap_or_default(),
            pairs.to_string(),
        ]);
    }
    rep.check("comparability ratio finite", finite);
    if c.chain {
        rep.check("chained inequality holds on every replayed function", replays);
        rep.check("ratio below 1/c from the chaining constant", below);
    }
    rep.csv = csv_bytes(&["seed", "d", "alpha", "theta", "R", "kappa", "ratio", "c_chain", "pairs"], &rows);
    Ok(rep)
}

fn discretize(c: &DiscretizeConfig) -> Result<Report, UsageError> {
    let mut rep = Report::default();
    let mut rows = Vec::new();
    let configs = configurations(&c.configuration, c.dim, c.theta_min, c.seed, 1)?;
    let config: Configuration = configs[0].1.clone();
    let q = QuadratureSpec { m: c.m };
    let k = ContinuousKernel::Cone {
        config: config.clone(),
        alpha: c.alpha,
        lambda: c.lambda,
    };
    let ball = LatticeBall::around(&vec![0; c.dim], c.radius).map_err(|e| UsageError(format!("field `radius`: {e}")))?;
    let sample = sample_pairs(&ball, (c.dim as f64).sqrt(), c.samples, c.seed);
    let mut clean = true;
    for &h in &c.h {
        let mut omega = discretize_kernel(&k, h, &q).map_err(|e| UsageError(format!("field `h`: {e}")))?;
        if c.inject_fault {
            let (fx, fy) = sample[0].clone();
            let inner = omega.clone();
            let f = move |x: &[i64], y: &[i64]| {
                let v = inner.eval(x, y)?;
                let hit = (x == fx.as_slice() && y == fy.as_slice()) || (x == fy.as_slice() && y == fx.as_slice());
                Ok(if hit { v * 1e6 } else { v })
            };
            omega = custom_kernel(c.dim, c.alpha, c.lambda, h, Arc::new(f)).map_err(|e| UsageError(e.to_string()))?;
        }
        let r = verify_discretized_sandwich(&omega, &config, &q, &sample).map_err(|e| UsageError(e.to_string()))?;
        clean &= r.violations.is_empty();
        for v in &r.violations {
            rep.violations.push(format!(
                "h={h} x={} y={} omega={} lower={} upper={}",
                format_point(&v.x),
                format_point(&v.y),
                v.omega,
                v.lower,
                v.upper
            ));
        }
        rep.line(format!(
            "h={h}: C={} L={} theta'={} checked={} lower-active={} violations={}",
            r.c,
            r.l,
            r.theta_prime,
            r.checked,
            r.lower_active,
            r.violations.len()
        ));
        rows.push(vec![
            fmt_f(h),
            r.checked.to_string(),
            r.lower_active.to_string(),
            r.violations.len().to_string(),
            fmt_f(r.c),
            r.l.to_string(),
            fmt_f(r.theta_prime),
        ]);
    }
    rep.check("discretized sandwich holds on every sampled pair", clean);
    rep.csv = csv_bytes(&["h", "checked", "lower_active", "violations", "C", "L", "theta_prime"], &rows);
    Ok(rep)
}

fn converge(c: &ConvergeConfig) -> Result<Report, UsageError> {
    let mut rep = Report::default();
    let dim = c.domain.dim();
    let k = ContinuousKernel::Fractional { dim, alpha: c.alpha };
    let spec = c.function.clone();
    let f = move |s: &[f64]| spec.eval(s);
    let rows = convergence_study(&f, &k, &c.domain, &c.h, &QuadratureSpec { m: c.m }, c.mc_samples, c.seed)
        .map_err(|e| UsageError(e.to_string()))?;
    let mut buf = Vec::new();
    write_convergence_csv(&rows, &mut buf).expect("in-memory write");
    rep.csv = buf;
    let diffs: Vec<f64> = rows.windows(2).map(|w| (w[1].e_omega - w[0].e_omega).abs()).collect();
    for r in &rows {
        rep.line(format!("h={}: E_omega={} E_frac={}", r.h, r.e_omega, r.e_frac));
    }
    if let Some(last) = rows.last() {
        rep.line(format!("continuous estimate {} +- {}", last.mc_ref, last.mc_stderr));
        let decreasing = diffs.windows(2).all(|w| w[1] < w[0]);
        rep.check("successive differences |E(h/2) - E(h)| strictly decreasing", decreasing);
        let gap = (last.e_omega - last.mc_ref).abs();
        let within = gap <= 3.0 * last.mc_stderr;
        rep.line(format!("finest gap {gap} = {} standard errors", gap / last.mc_stderr.max(f64::MIN_POSITIVE)));
        rep.check("finest discrete energy within 3 standard errors of the continuous estimate", within);
    }
    Ok(rep)
}

fn whitney(c: &WhitneyConfig) -> Result<Report, UsageError> {
    let mut rep = Report::default();
    let fam = whitney_balls(&c.domain, c.kappa, c.max_depth).map_err(|e| UsageError(format!("field `domain`: {e}")))?;
    let r = check_whitney(&fam, c.samples, c.seed);
    let mut buf = Vec::new();
    write_whitney_csv(&fam, &mut buf).expect("in-memory write");
    rep.csv = buf;
    rep.line(format!("balls={} tau={} coverage={}", r.balls, fam.tau, r.coverage));
    rep.line(format!("measured c={} measured M={}", r.capture_c, r.overlap_m));
    rep.check("(ii) every dilate kappa B lies inside the domain", r.dilates_inside);
    rep.check("(i) nearby sampled pairs share a ball", r.capture_ok && r.capture_c.is_finite() && r.capture_c > 0.0);
    rep.check("(iii) overlap of the dilates is finite", r.overlap_m > 0 && r.overlap_m < r.balls.max(1));
    Ok(rep)
}
