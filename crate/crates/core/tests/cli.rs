use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const MODEL: &str = r#""r":0.05,"lambda":1.0,"K":100.0,"T":1.0,
    "vol":{"kind":"hobson_rogers","eta":0.2,"eps":1.0,"cap":0.4},"x0":100.0,"z0":1.0"#;

/// Small sections so every command finishes in about a second.
const SMALL: &str = r#""pde":{"n_w":128,"n_v":32},
    "lsmc":{"basis_degree":2,"n_paths":4000,"n_steps":20},
    "sim":{"n_paths":20,"n_steps":50},
    "boundary":{"n_paths":10},
    "verify":{"martingale_paths":4000,"martingale_steps":10,"consistency_paths":50,"consistency_steps":80,
              "zone_points":100,"occupation_paths":100,"occupation_steps":50}"#;

fn config(dir: &Path, body: &str) -> String {
    let path = dir.join("config.json");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn small(dir: &Path) -> String {
    config(dir, &format!("{{{MODEL},{SMALL}}}"))
}

fn hrpricer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hrpricer")).args(args).output().unwrap()
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn price_with_each_method() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path());
    for method in ["pde", "lsmc"] {
        let out = dir.path().join(method);
        let o = hrpricer(&["price", "--config", &cfg, "--out", out.to_str().unwrap(), "--method", method]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        let rec = read_json(&out.join("price.json"));
        assert_eq!(rec["method"], method);
        let price = rec["price"].as_f64().unwrap();
        assert!(price > 6.0 && price < 13.7, "{price}");
        assert!(rec["std_error"].as_f64().unwrap() >= 0.0);
    }
}

#[test]
fn binomial_needs_constant_volatility() {
    let dir = TempDir::new().unwrap();
    let o = hrpricer(&["price", "--config", &small(dir.path()), "--method", "binomial", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("[config]"));

    let body = format!("{{{},{SMALL}}}", MODEL.replace(r#""kind":"hobson_rogers","eta":0.2,"eps":1.0,"cap":0.4"#, r#""kind":"constant","sigma":0.2"#));
    let cfg = config(dir.path(), &body);
    let o = hrpricer(&["price", "--config", &cfg, "--method", "binomial", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let price = read_json(&dir.path().join("price.json"))["price"].as_f64().unwrap();
    assert!((price - 6.0904).abs() < 5e-3, "{price}");
}

#[test]
fn simulate_is_reproducible_per_seed() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path());
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = hrpricer(&["simulate", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        fs::read(out.join("paths.csv")).unwrap()
    };
    let a = run("a", "11");
    assert_eq!(a, run("b", "11"));
    assert_ne!(a, run("c", "12"));
    let text = String::from_utf8(a).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,path_id,x,y,z");
    assert_eq!(text.lines().count(), 1 + 20 * 51);
}

#[test]
fn boundary_writes_curves_and_report() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b");
    let o = hrpricer(&["boundary", "--config", &small(dir.path()), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(out.join("boundary.csv")).unwrap().starts_with("t,z,b\n"));
    assert!(fs::read_to_string(out.join("striking_curve_noise_free.csv")).unwrap().starts_with("t,z_t,b\n"));
    let report = read_json(&out.join("monotonicity.json"));
    assert_eq!(report["paths"].as_array().unwrap().len(), 10);
    assert_eq!(report["summary"]["noise_floor"].as_f64().unwrap(), 0.01);
    let written = fs::read_dir(out.join("striking_curves")).unwrap().count();
    let outside = report["summary"]["paths_outside_grid"].as_u64().unwrap() as usize;
    assert_eq!(written + outside, 10);
}

#[test]
fn verify_report_is_complete_and_reproducible() {
    let dir = TempDir::new().unwrap();
    let cfg = small(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = hrpricer(&["verify", "--config", &cfg, "--out", out.to_str().unwrap(), "--seed", "3"]);
        let code = o.status.code().unwrap();
        assert!(code == 0 || code == 1, "{}", String::from_utf8_lossy(&o.stderr));
        let mut report = read_json(&out.join("verification_report.json"));
        for c in report["checks"].as_array_mut().unwrap() {
            c.as_object_mut().unwrap().remove("runtime_seconds");
        }
        (code, report)
    };
    let (code, report) = run("a");
    assert_eq!(run("b"), (code, report.clone()));

    let ids: Vec<&str> = report["checks"].as_array().unwrap().iter().map(|c| c["check_id"].as_str().unwrap()).collect();
    let registry: Vec<&str> = hrpricer::harness::check_registry().iter().map(|d| d.id).collect();
    assert_eq!(ids, registry);
    for c in report["checks"].as_array().unwrap() {
        for key in ["paper_claim", "status", "measured", "tolerances", "input_hash"] {
            assert!(c.get(key).is_some(), "{key} missing in {c}");
        }
        assert_eq!(c["input_hash"], report["input_hash"]);
    }
    assert_eq!(report["all_passed"].as_bool().unwrap(), code == 0);
}

#[test]
fn malformed_input_exits_2_without_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("never");
    let cases = [
        String::new(),
        "{}".to_string(),
        format!("{{{MODEL},\"color\":\"red\"}}"),
        format!("{{{MODEL},\"lsmc\":{{\"basis_degree\":0,\"n_paths\":100,\"n_steps\":5}}}}"),
        format!("{{{MODEL},\"pde\":{{\"n_w\":512,\"n_v\":64,\"n_t\":10}}}}"),
    ];
    for body in &cases {
        let cfg = config(dir.path(), body);
        for cmd in ["price", "boundary", "simulate", "verify"] {
            let o = hrpricer(&[cmd, "--config", &cfg, "--out", out.to_str().unwrap()]);
            assert_eq!(o.status.code(), Some(2), "{cmd} {body}");
            assert!(String::from_utf8_lossy(&o.stderr).starts_with("error ["));
            assert!(!out.exists());
        }
    }
    let o = hrpricer(&["price", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(hrpricer(&["price"]).status.code(), Some(2));
    assert_eq!(hrpricer(&["launch", "--config", "x"]).status.code(), Some(2));
}
