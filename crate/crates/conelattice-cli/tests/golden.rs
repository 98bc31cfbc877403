//! Output formats against docs/formats and the frozen files in tests/golden.

use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// `## <name>.csv` heading followed by a ```csv block holding the header.
fn documented_headers() -> BTreeMap<String, String> {
    let text = fs::read_to_string(root().join("docs/formats/csv.md")).unwrap();
    let mut out = BTreeMap::new();
    let mut current = None;
    let mut lines = text.lines();
    while let Some(l) = lines.next() {
        if let Some(name) = l.strip_prefix("## ").and_then(|s| s.strip_suffix(".csv")) {
            current = Some(name.to_string());
        } else if l.trim() == "```csv" {
            let header = lines.next().unwrap().to_string();
            out.insert(current.clone().expect("csv block under a heading"), header);
        }
    }
    out
}

fn small_configs() -> Vec<(&'static str, Value)> {
    let theta = 0.5235987755982988;
    vec![
        ("cover", json!({"seed": 1, "dims": [2], "thetas": [theta], "samples": 200})),
        ("connectivity", json!({"seed": 1, "dim": 2, "theta_min": theta, "configs": 1, "radii": [1.0],
                                "centers": 2, "spread": 3, "cap_factor": 64.0})),
        ("paths", json!({"seed": 1, "dim": 2, "theta_min": theta, "configs": 1, "radius": 2.0, "r0": 1.5})),
        ("compare", json!({"seed": 1, "dim": 2, "theta_min": theta, "alpha": 1.0, "Lambda": 1.0, "kernel": "fractional",
                           "configs": 1, "radius": 2.0, "r0": 1.0, "kappa": 1.0, "kappa_cap": 1.0, "chain": false,
                           "functions": 0, "budget": 10})),
        ("discretize", json!({"seed": 1, "dim": 2, "theta_min": theta, "alpha": 1.0, "Lambda": 2.0, "h": [0.5],
                              "m": 1, "samples": 10, "radius": 5.0})),
        ("converge", json!({"seed": 1, "alpha": 1.0, "function": {"kind": "constant", "value": 1.0},
                            "domain": {"shape": "box", "lo": [-1.0], "hi": [1.0]}, "h": [0.5, 0.25], "m": 2,
                            "mc_samples": 1000})),
        ("whitney", json!({"seed": 1, "domain": {"shape": "ball", "center": [0.0, 0.0], "radius": 1.0},
                           "kappa": 2.0, "max_depth": 4, "samples": 200})),
    ]
}

fn run(cmd: &str, config: &Value, dir: &Path) -> PathBuf {
    let cfg = dir.join(format!("{cmd}.json"));
    fs::write(&cfg, config.to_string()).unwrap();
    let out = dir.join("out");
    let o = Command::new(env!("CARGO_BIN_EXE_conelattice"))
        .env_remove("CONELATTICE_SEED")
        .args([cmd, "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert!(matches!(o.status.code(), Some(0 | 1)), "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
    out
}

#[test]
fn csv_headers_match_the_docs() {
    let docs = documented_headers();
    let configs = small_configs();
    assert_eq!(docs.len(), configs.len());
    let dir = tempfile::tempdir().unwrap();
    for (cmd, cfg) in configs {
        let out = run(cmd, &cfg, dir.path());
        let csv = fs::read_to_string(out.join(format!("{cmd}.csv"))).unwrap();
        assert_eq!(csv.lines().next().unwrap(), docs[cmd], "{cmd}");
        let report = fs::read_to_string(out.join(format!("{cmd}_report.txt"))).unwrap();
        assert!(report.starts_with(&format!("conelattice {cmd} report\nconfig-sha256: ")));
        assert!(report.contains("\nCHECKS\n"));
    }
}

#[test]
fn float_columns_use_fixed_exponent_form() {
    let dir = tempfile::tempdir().unwrap();
    let (_, cfg) = small_configs().into_iter().find(|c| c.0 == "cover").unwrap();
    let out = run("cover", &cfg, dir.path());
    let csv = fs::read_to_string(out.join("cover.csv")).unwrap();
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[1], "5.235987755983e-1");
    assert_eq!(row[3], "19");
}

#[test]
fn exports_match_golden_files() {
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let cfg: Value = serde_json::from_str(&fs::read_to_string(golden.join("paths_tiny.json")).unwrap()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = run("paths", &cfg, dir.path());
    for file in ["paths_family.txt", "paths_graph_edges.txt"] {
        let got = fs::read_to_string(out.join(file)).unwrap();
        let want = fs::read_to_string(golden.join(file)).unwrap();
        assert_eq!(got, want, "{file}");
    }
}

/// Every example config uses only fields its schema declares and supplies
/// every required one.
#[test]
fn example_configs_fit_their_schemas() {
    let mut seen = 0;
    for entry in fs::read_dir(root().join("configs")).unwrap() {
        let path = entry.unwrap().path();
        let stem = path.file_stem().unwrap().to_str().unwrap();
        let cmd = stem.split('_').next().unwrap();
        let schema: Value =
            serde_json::from_str(&fs::read_to_string(root().join(format!("schema/{cmd}.schema.json"))).unwrap()).unwrap();
        let config: Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let props = schema["properties"].as_object().unwrap();
        for key in config.as_object().unwrap().keys() {
            assert!(props.contains_key(key), "{stem}: {key} not in schema");
        }
        for req in schema["required"].as_array().unwrap() {
            assert!(config.get(req.as_str().unwrap()).is_some(), "{stem}: {req} missing");
        }
        seen += 1;
    }
    assert!(seen >= 7);
}
