//! Acceptance run on the desk profile: one PASS/FAIL line per criterion.

use std::process::ExitCode;

use hrpricer::baseline::{crr_american_put, BinomialConfig};
use hrpricer::harness::{verify, CheckRecord, CheckStatus, Settings, VerificationReport};
use hrpricer::model::Model;
use hrpricer::pde::{solve, GridResolution, GridSpec};

struct Criterion {
    pass: bool,
    name: String,
    detail: String,
}

fn from_checks(report: &VerificationReport, ids: &[&str]) -> Criterion {
    let records: Vec<&CheckRecord> = ids.iter().map(|id| report.check(id).expect("registered check")).collect();
    Criterion {
        pass: records.iter().all(|r| r.status == CheckStatus::Pass),
        name: ids.join(" / "),
        detail: records
            .iter()
            .map(|r| format!("{}", serde_json::json!(r.measured)))
            .collect::<Vec<_>>()
            .join(" "),
    }
}

fn sci(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.2e}")).collect::<Vec<_>>().join(", ")
}

fn strictly_decreasing(deltas: &[f64]) -> bool {
    deltas.windows(2).all(|w| w[1] < w[0])
}

fn oracle_convergence() -> Criterion {
    let model = Model::desk_profile();
    let p = &model.params;
    let mut detail = String::new();
    let mut pass = true;
    for sigma in [0.2, 0.4] {
        let prices: Vec<f64> = [500, 1000, 2000, 4000]
            .iter()
            .map(|&n| crr_american_put(sigma, p, 100.0, &BinomialConfig { n_steps: n }).unwrap())
            .collect();
        let deltas: Vec<f64> = prices.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
        pass &= strictly_decreasing(&deltas);
        detail += &format!("crr(sigma={sigma}) deltas [{}]; ", sci(&deltas));
    }
    let mut values = Vec::new();
    for (n_w, n_v, n_t) in [(256, 32, 256), (512, 64, 512), (1024, 128, 1024)] {
        let grid = GridSpec::around(&model, &GridResolution::new(n_w, n_v, n_t)).unwrap();
        let surface = solve(p, &model.vol, &grid).unwrap();
        values.push(surface.value_at(0.0, model.state.x, model.state.z).unwrap());
    }
    let deltas: Vec<f64> = values.windows(2).map(|w| (w[1] - w[0]).abs()).collect();
    pass &= strictly_decreasing(&deltas);
    detail += &format!("pde V0 {values:.5?} deltas [{}]", sci(&deltas));
    Criterion {
        pass,
        name: "oracle convergence".into(),
        detail,
    }
}

fn main() -> ExitCode {
    let report = verify(&Settings::desk()).expect("verification runs");
    let mut criteria: Vec<Criterion> = [
        &["L31_envelope"][..],
        &["L32_bounds"],
        &["L32_convexity", "L32_monotone"],
        &["P33_boundary_exists", "P33_partition"],
        &["P34_endpoint"],
        &["P34_nonmonotone"],
        &["Z_meanreversion_zone"],
        &["Y_Z_consistency"],
        &["CONST_sigma_reduction"],
        &["MARTINGALE_discounted_X"],
    ]
    .iter()
    .map(|ids| from_checks(&report, ids))
    .collect();
    criteria.push(oracle_convergence());

    for (i, c) in criteria.iter().enumerate() {
        println!("{} {:>2} {}: {}", if c.pass { "PASS" } else { "FAIL" }, i + 1, c.name, c.detail);
    }
    let passed = criteria.iter().filter(|c| c.pass).count();
    println!("acceptance: {passed}/{} criteria passed", criteria.len());
    if passed == criteria.len() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
