//! Acceptance run: one PASS/FAIL line per criterion, runtime included.
//!
//! Exits 0 regardless of outcome so the workspace test suite reports
//! honestly without aborting; set CONELATTICE_STRICT=1 to turn any FAIL
//! into a nonzero exit.

use conelattice::chaining::{build_path_family, verify_path_family, FamilyOptions};
use conelattice::configuration::{mix64, random_configuration, random_direction, reference_cones};
use conelattice::continuum::{
    check_whitney, convergence_study, discretize_kernel, verify_discretized_sandwich, whitney_balls,
    ContinuousKernel, Domain, QuadratureSpec,
};
use conelattice::forms::{
    chaining_constant_with, cone_kernel, edge_tally, energy, fractional_kernel, random_function,
    sample_pairs,
};
use conelattice::geometry::{boundary_distance, DoubleCone};
use conelattice::lattice_graph::{connectivity_radius, LatticeBall};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

struct Outcome {
    ok: bool,
    detail: String,
}

fn pass(ok: bool, detail: impl Into<String>) -> Outcome {
    Outcome { ok, detail: detail.into() }
}

// Criterion 1: reference covering.
fn covering() -> Outcome {
    const SAMPLES: usize = 100_000;
    let mut details = Vec::new();
    let mut ok = true;
    for d in [2usize, 3] {
        for theta in [PI / 2.0, PI / 4.0, PI / 8.0] {
            let fam = match reference_cones(d, theta) {
                Ok(f) => f,
                Err(e) => return pass(false, format!("d={d}: {e}")),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(mix64(d as u64) ^ theta.to_bits());
            let misses = (0..SAMPLES)
                .filter(|_| fam.covering_index(random_direction(&mut rng, d).coords()).is_none())
                .count();
            ok &= misses == 0 && fam.apex() == theta / 3.0;
            details.push(format!("d={d} L={} misses={misses}", fam.len()));
        }
    }
    pass(ok, details.join(", "))
}

fn unit<R: Rng>(rng: &mut R, d: usize) -> Vec<f64> {
    random_direction(rng, d).coords().to_vec()
}

/// A point of the open cone `v` at distance `r` from its tip.
fn inside<R: Rng>(rng: &mut R, cone: &DoubleCone, r: f64) -> Vec<f64> {
    let d = cone.dim();
    let a = cone.axis().coords();
    let mut w = unit(rng, d);
    let p: f64 = w.iter().zip(a).map(|(x, y)| x * y).sum();
    w.iter_mut().zip(a).for_each(|(x, y)| *x -= p * y);
    let wn = w.iter().map(|x| x * x).sum::<f64>().sqrt();
    let beta = rng.random::<f64>() * cone.apex();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    (0..d)
        .map(|i| sign * r * (a[i] * beta.cos() + w[i] / wn * beta.sin()))
        .collect()
}

/// Is z in the r-half-cone V_r[p]?
fn in_half(cone: &DoubleCone, r: f64, p: &[f64], z: &[f64]) -> bool {
    let h: Vec<f64> = z.iter().zip(p).map(|(a, b)| a - b).collect();
    cone.contains_offset(&h) && boundary_distance(cone, &h) > r
}

// Criterion 2: cone-intersection chain and cube distance bounds.
fn geometry_lemmas() -> Outcome {
    const TRIALS: usize = 10_000;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut chain_fail, mut chain_active) = (0usize, [0usize; 2]);
    for _ in 0..TRIALS {
        let d = rng.random_range(2..=3usize);
        let sd = (d as f64).sqrt();
        let cone = DoubleCone::new(random_direction(&mut rng, d), rng.random_range(0.05..PI / 2.0)).expect("valid cone");
        let h = rng.random_range(0.05..2.0);
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();
        let xi: Vec<f64> = x.iter().map(|c| c + h * (rng.random::<f64>() - 0.5)).collect();
        let scale = rng.random_range(0.0..40.0 * h / cone.apex().sin());
        // V_{h√d}[ξ] ⊂ V_{h√d/2}[x]
        let z: Vec<f64> = inside(&mut rng, &cone, scale).iter().zip(&xi).map(|(a, b)| a + b).collect();
        if in_half(&cone, h * sd, &xi, &z) {
            chain_active[0] += 1;
            chain_fail += usize::from(!in_half(&cone, h * sd / 2.0, &x, &z));
        }
        // V_{h√d/2}[x] ⊂ V[ξ]
        let z: Vec<f64> = inside(&mut rng, &cone, scale).iter().zip(&x).map(|(a, b)| a + b).collect();
        if in_half(&cone, h * sd / 2.0, &x, &z) {
            chain_active[1] += 1;
            let hz: Vec<f64> = z.iter().zip(&xi).map(|(a, b)| a - b).collect();
            chain_fail += usize::from(!cone.contains_offset(&hz));
        }
    }
    let mut dist_fail = 0usize;
    for _ in 0..TRIALS {
        let d = rng.random_range(1..=3usize);
        let sd = (d as f64).sqrt();
        let h = rng.random_range(0.01..3.0);
        let (x, y) = loop {
            let x: Vec<i64> = (0..d).map(|_| rng.random_range(-6..=6)).collect();
            let y: Vec<i64> = (0..d).map(|_| rng.random_range(-6..=6)).collect();
            let n2: i64 = x.iter().zip(&y).map(|(a, b)| (a - b) * (a - b)).sum();
            if n2 > d as i64 {
                break (x, y);
            }
        };
        let s: Vec<f64> = x.iter().map(|c| h * (*c as f64 + rng.random::<f64>() - 0.5)).collect();
        let t: Vec<f64> = y.iter().map(|c| h * (*c as f64 + rng.random::<f64>() - 0.5)).collect();
        let xy = h * x.iter().zip(&y).map(|(a, b)| ((a - b) * (a - b)) as f64).sum::<f64>().sqrt();
        let st = s.iter().zip(&t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if !(xy / (2.0 * sd) < st && st < 2.0 * sd * xy) {
            dist_fail += 1;
        }
    }
    pass(
        chain_fail == 0 && dist_fail == 0 && chain_active.iter().all(|&a| a > TRIALS / 10),
        format!(
            "chain failures={chain_fail} (premise held {}+{} times), distance failures={dist_fail}",
            chain_active[0], chain_active[1]
        ),
    )
}

// Criterion 3: connectivity by doubling.
fn connectivity() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for seed in 0..50u64 {
        let config = random_configuration(2, PI / 6.0, seed).expect("configuration");
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(seed ^ 3));
        for r in [2.0, 4.0, 8.0] {
            for _ in 0..20 {
                let x = vec![rng.random_range(-1000..=1000i64), rng.random_range(-1000..=1000i64)];
                match connectivity_radius(&config, &x, r, 1024.0 * r) {
                    Ok(big) => worst = worst.max(big / r),
                    Err(_) => failures += 1,
                }
            }
        }
    }
    pass(failures == 0, format!("3000 searches, failures={failures}, largest R/r={worst}"))
}

// Criterion 4: path families.
fn path_families() -> Outcome {
    let opts = FamilyOptions::default();
    let mut all = true;
    let mut lambda_ok = true;
    let mut ms = Vec::new();
    for seed in 0..20u64 {
        let config = random_configuration(2, PI / 6.0, seed).expect("configuration");
        let fam = match build_path_family(&config, &[0, 0], 32.0, None, 1.0, &opts) {
            Ok(f) => f,
            Err(e) => return pass(false, format!("seed {seed}: {e}")),
        };
        let v = verify_path_family(&fam);
        all &= v.all_pass();
        lambda_ok &= fam.stats.lambda <= 2.0 * fam.stats.r_used * fam.delta as f64;
        if seed == 0 {
            ms.push(fam.stats.m);
        }
    }
    // M stability across radii, on the first configuration.
    let config = random_configuration(2, PI / 6.0, 0).expect("configuration");
    for radius in [16.0, 64.0] {
        match build_path_family(&config, &[0, 0], radius, None, 1.0, &opts) {
            Ok(f) => ms.push(f.stats.m),
            Err(e) => return pass(false, format!("radius {radius}: {e}")),
        }
    }
    ms.sort();
    let stable = ms[2] as f64 <= 2.0 * ms[0] as f64;
    pass(
        all && lambda_ok && stable,
        format!("four properties={all}, lambda bound={lambda_ok}, M over radii 16/32/64 (sorted)={ms:?}, stable={stable}"),
    )
}

// Criterion 5: discrete comparability with the chaining constant.
fn comparability() -> Outcome {
    let opts = FamilyOptions::default();
    let mut violations = 0;
    let mut replays = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let config = random_configuration(2, PI / 6.0, seed).expect("configuration");
        let fam = build_path_family(&config, &[0, 0], 16.0, None, 1.0, &opts).expect("path family");
        if !verify_path_family(&fam).all_pass() {
            return pass(false, format!("seed {seed}: path family failed verification"));
        }
        let tally = edge_tally(&fam).expect("tally");
        for alpha in [0.5, 1.0, 1.5] {
            let kernel = cone_kernel(&config, alpha, 1.0).expect("kernel");
            let cc = chaining_constant_with(&fam, &tally, &kernel, 20, mix64(seed) ^ alpha.to_bits()).expect("chaining");
            replays += cc.replays.len();
            violations += cc.replays.iter().filter(|r| !r.holds).count() + usize::from(!cc.nodes_inside);
            worst = worst.max(cc.replays.iter().map(|r| r.e_frac / r.e_edges * cc.c).fold(0.0, f64::max));
        }
    }
    pass(
        violations == 0 && replays == 20 * 3 * 20,
        format!("{replays} replays, violations={violations}, max c*E_frac/E_omega={worst:.3e}"),
    )
}

// Criterion 6: explicit sandwich constant.
fn sandwich() -> Outcome {
    let config = random_configuration(2, PI / 6.0, 6).expect("configuration");
    let k = ContinuousKernel::Cone {
        config: config.clone(),
        alpha: 1.0,
        lambda: 2.0,
    };
    let q = QuadratureSpec::default();
    let ball = LatticeBall::around(&[0, 0], 24.0).expect("ball");
    let sample = sample_pairs(&ball, 2f64.sqrt(), 10_000, 6);
    let mut details = Vec::new();
    let mut ok = true;
    for h in [1.0, 0.5] {
        let omega = discretize_kernel(&k, h, &q).expect("discretize");
        let r = verify_discretized_sandwich(&omega, &config, &q, &sample).expect("sandwich");
        let c_expected = 1.0 / ((2.0 * 2f64.sqrt()).powi(4) * (r.l * r.l) as f64);
        ok &= r.violations.is_empty() && r.c == c_expected && r.checked == sample.len();
        details.push(format!(
            "h={h}: C={:.6e} L={} checked={} lower-active={} violations={}",
            r.c,
            r.l,
            r.checked,
            r.lower_active,
            r.violations.len()
        ));
    }
    pass(ok, details.join("; "))
}

// Criterion 7: convergence.
fn convergence() -> Outcome {
    let domain = Domain::unit_ball(1);
    let k = ContinuousKernel::Fractional { dim: 1, alpha: 1.0 };
    let f = |s: &[f64]| (-s[0] * s[0] / 0.25).exp();
    let hs = [0.5, 0.25, 0.125, 0.0625];
    let rows = convergence_study(&f, &k, &domain, &hs, &QuadratureSpec::default(), 1_000_000, 7).expect("study");
    let diffs: Vec<f64> = rows.windows(2).map(|w| (w[1].e_omega - w[0].e_omega).abs()).collect();
    let decreasing = diffs.windows(2).all(|w| w[1] < w[0]);
    let last = rows.last().expect("rows");
    let gap = (last.e_frac - last.mc_ref).abs();
    let within = gap <= 3.0 * last.mc_stderr;
    pass(
        decreasing && within,
        format!(
            "diffs=[{}] decreasing={decreasing}; finest E_frac={:.5} vs continuous {:.5} +- {:.5} ({:.1} SE)",
            diffs.iter().map(|v| format!("{v:.4e}")).collect::<Vec<_>>().join(", "),
            last.e_frac,
            last.mc_ref,
            last.mc_stderr,
            gap / last.mc_stderr
        ),
    )
}

// Criterion 8: Whitney covering.
fn whitney() -> Outcome {
    let mut ok = true;
    let mut details = Vec::new();
    for (name, domain) in [("ball", Domain::unit_ball(2)), ("box", Domain::unit_box(2))] {
        let fam = whitney_balls(&domain, 2.0, 8).expect("whitney");
        let r = check_whitney(&fam, 10_000, 8);
        let finite = r.capture_c.is_finite() && r.capture_c > 0.0 && r.overlap_m > 0;
        ok &= r.dilates_inside && r.capture_ok && finite;
        details.push(format!("{name}: balls={} c={:.4} M={}", r.balls, r.capture_c, r.overlap_m));
    }
    pass(ok, details.join("; "))
}

// Criterion 9: the trivial direction E_omega <= Λ E_frac.
fn trivial_direction() -> Outcome {
    let lambda = 2.0;
    let config = random_configuration(2, PI / 6.0, 9).expect("configuration");
    let omega = cone_kernel(&config, 1.0, lambda).expect("kernel");
    let frac = fractional_kernel(2, 1.0).expect("kernel");
    let ball = LatticeBall::around(&[0, 0], 8.0).expect("ball");
    let points = ball.points();
    let wo = omega.pair_weights(&points, 1.0).expect("weights");
    let wf = frac.pair_weights(&points, 1.0).expect("weights");
    let mut bad = 0;
    for k in 0..100u64 {
        let g = random_function(mix64(k));
        let values: Vec<f64> = points.iter().map(|p| g(p)).collect();
        if wo.energy(&values) > lambda * wf.energy(&values) {
            bad += 1;
        }
    }
    // Cross-check one function through the public energy entry point.
    let g = random_function(1);
    let e_o = energy(&|p: &[i64]| Some(g(p)), &ball, &omega, 1.0).expect("energy").value;
    let e_f = energy(&|p: &[i64]| Some(g(p)), &ball, &frac, 1.0).expect("energy").value;
    pass(bad == 0 && e_o <= lambda * e_f, format!("100 functions, violations={bad}, Lambda={lambda}"))
}

// Criterion 10: CLI determinism.
fn determinism() -> Outcome {
    let configs: [(&str, &str); 7] = [
        ("cover", r#"{"seed":1,"dims":[2,3],"thetas":[0.7853981633974483],"samples":5000}"#),
        (
            "connectivity",
            r#"{"seed":2,"dim":2,"theta_min":0.5235987755982988,"configs":2,"radii":[2.0,4.0],"centers":3,"spread":40,"cap_factor":64.0}"#,
        ),
        (
            "paths",
            r#"{"seed":3,"dim":2,"theta_min":0.5235987755982988,"configs":1,"radius":8.0,"r0":1.0,"export":true}"#,
        ),
        (
            "compare",
            r#"{"seed":4,"dim":2,"theta_min":0.5235987755982988,"alpha":1.0,"Lambda":1.0,"kernel":"cone","configs":1,"radius":5.0,"r0":1.0,"kappa_cap":3.0,"chain":true,"functions":3,"budget":30}"#,
        ),
        (
            "discretize",
            r#"{"seed":5,"dim":2,"theta_min":0.5235987755982988,"alpha":1.0,"Lambda":2.0,"h":[1.0,0.5],"m":2,"samples":300,"radius":10.0}"#,
        ),
        (
            "converge",
            r#"{"seed":6,"alpha":1.0,"function":{"kind":"gaussian","amplitude":1.0,"width":0.5},"domain":{"shape":"ball","center":[0.0],"radius":1.0},"h":[0.5,0.25],"m":2,"mc_samples":20000}"#,
        ),
        (
            "whitney",
            r#"{"seed":7,"domain":{"shape":"box","lo":[0.0,0.0],"hi":[1.0,1.0]},"kappa":2.0,"max_depth":6,"samples":2000}"#,
        ),
    ];
    let dir = tempfile::tempdir().expect("tempdir");
    let mut mismatched = Vec::new();
    for (cmd, json) in configs {
        let cfg = dir.path().join(format!("{cmd}.json"));
        std::fs::write(&cfg, json).expect("write config");
        let mut outputs = Vec::new();
        for (run, threads) in [(0, "1"), (1, "2")] {
            let out = dir.path().join(format!("{cmd}-{run}"));
            let code = conelattice_cli::run([
                "conelattice",
                cmd,
                "--config",
                cfg.to_str().expect("utf8 path"),
                "--out",
                out.to_str().expect("utf8 path"),
                "--threads",
                threads,
            ]);
            if code == 2 {
                return pass(false, format!("{cmd}: usage error"));
            }
            outputs.push(std::fs::read(out.join(format!("{cmd}.csv"))).expect("csv written"));
        }
        if outputs[0] != outputs[1] {
            mismatched.push(cmd);
        }
    }
    pass(mismatched.is_empty(), format!("7 subcommands rerun (1 and 2 threads), mismatched={mismatched:?}"))
}

type Criterion = (&'static str, Duration, fn() -> Outcome);

fn main() {
    let criteria: [Criterion; 10] = [
        ("reference covering", Duration::from_secs(10), covering),
        ("geometry lemmas", Duration::from_secs(5), geometry_lemmas),
        ("connectivity", Duration::from_secs(120), connectivity),
        ("path families", Duration::from_secs(300), path_families),
        ("discrete comparability", Duration::from_secs(300), comparability),
        ("explicit sandwich constant", Duration::from_secs(60), sandwich),
        ("convergence", Duration::from_secs(120), convergence),
        ("Whitney covering", Duration::from_secs(30), whitney),
        ("trivial direction", Duration::from_secs(10), trivial_direction),
        ("determinism", Duration::from_secs(60), determinism),
    ];
    let only: Option<usize> = std::env::var("CONELATTICE_CRITERION").ok().and_then(|s| s.parse().ok());
    let mut failed = 0;
    for (i, (name, budget, f)) in criteria.iter().enumerate() {
        if only.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let out = f();
        let took = start.elapsed();
        let ok = out.ok && took <= *budget;
        failed += usize::from(!ok);
        println!(
            "{} criterion {:>2} {name}: {} [{:.1}s of {}s]",
            if ok { "PASS" } else { "FAIL" },
            i + 1,
            out.detail,
            took.as_secs_f64(),
            budget.as_secs()
        );
    }
    println!("acceptance: {failed} failing");
    if failed > 0 && std::env::var("CONELATTICE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
