//! The fixed registry of property checks behind `verify`.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use super::{solve_boundary, striking_curves, Settings, SolvedBoundary};
use crate::baseline::{crr_american_put, crr_boundary};
use crate::boundary::noise_free_striking_curve;
use crate::error::{Error, Result};
use crate::lsmc::price_american_put;
use crate::model::{Model, VolatilityFn};
use crate::pde::{GridResolution, ValueSurface};
use crate::sim::{fnv1a, mean_and_std_error, simulate, SimConfig};

/// Seed of one randomized check, so the checks draw independent streams
/// from a single configured seed.
fn check_seed(base: u64, id: &str) -> u64 {
    let mut bytes = base.to_le_bytes().to_vec();
    bytes.extend_from_slice(id.as_bytes());
    fnv1a(&bytes)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CheckDescriptor {
    #[serde(rename = "check_id")]
    pub id: &'static str,
    /// The statement being checked.
    #[serde(rename = "paper_claim")]
    pub claim: &'static str,
}

const REGISTRY: [CheckDescriptor; 12] = [
    CheckDescriptor {
        id: "L31_envelope",
        claim: "V_2(x) <= V(x, z) <= V_1(x): the price lies between the constant-volatility prices at inf sigma and sup sigma",
    },
    CheckDescriptor {
        id: "L32_bounds",
        claim: "(K - x)^+ <= V(t, x, z) <= K",
    },
    CheckDescriptor {
        id: "L32_convexity",
        claim: "x -> V(t, x, z) is convex",
    },
    CheckDescriptor {
        id: "L32_monotone",
        claim: "x -> V(t, x, z) is non-increasing",
    },
    CheckDescriptor {
        id: "P33_boundary_exists",
        claim: "b(z) = sup{x <= K : V(x, z) = (K - x)^+} exists for every z, is continuous in z and lies between the constant-volatility boundaries",
    },
    CheckDescriptor {
        id: "P33_partition",
        claim: "stopping is optimal exactly when X(t) <= b(Z(t))",
    },
    CheckDescriptor {
        id: "P34_nonmonotone",
        claim: "t -> b(t, z(t)) is not monotone increasing when sigma(z) varies",
    },
    CheckDescriptor {
        id: "P34_endpoint",
        claim: "every striking curve ends at (T, K)",
    },
    CheckDescriptor {
        id: "Z_meanreversion_zone",
        claim: "ln Z drifts down above 1 + r/lambda - inf sigma^2/(2 lambda) and up below 1 + r/lambda - sup sigma^2/(2 lambda)",
    },
    CheckDescriptor {
        id: "Y_Z_consistency",
        claim: "Z = X / Y along every path",
    },
    CheckDescriptor {
        id: "CONST_sigma_reduction",
        claim: "with constant sigma the price does not depend on z and equals the one-factor American put",
    },
    CheckDescriptor {
        id: "MARTINGALE_discounted_X",
        claim: "e^{-rt} X(t) is a martingale",
    },
];

pub fn check_registry() -> &'static [CheckDescriptor] {
    &REGISTRY
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CheckRecord {
    pub check_id: &'static str,
    pub paper_claim: &'static str,
    pub status: CheckStatus,
    pub measured: BTreeMap<&'static str, Value>,
    pub tolerances: BTreeMap<&'static str, f64>,
    pub runtime_seconds: f64,
    pub input_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerificationReport {
    pub input_hash: String,
    pub config: Value,
    pub all_passed: bool,
    pub checks: Vec<CheckRecord>,
}

impl VerificationReport {
    pub fn check(&self, id: &str) -> Option<&CheckRecord> {
        self.checks.iter().find(|c| c.check_id == id)
    }
}

/// Result of one check before it is stamped with id and timing.
struct Finding {
    pass: bool,
    measured: BTreeMap<&'static str, Value>,
    tolerances: BTreeMap<&'static str, f64>,
}

impl Finding {
    fn new(pass: bool) -> Self {
        Self {
            pass,
            measured: BTreeMap::new(),
            tolerances: BTreeMap::new(),
        }
    }

    fn measure(mut self, key: &'static str, value: impl Serialize) -> Self {
        self.measured.insert(key, json!(value));
        self
    }

    fn tol(mut self, key: &'static str, value: f64) -> Self {
        self.tolerances.insert(key, value);
        self
    }
}

/// Solved surfaces shared between checks, computed on first use.
struct Context<'a> {
    s: &'a Settings,
    main: Option<SolvedBoundary>,
    control: Option<SolvedBoundary>,
}

impl<'a> Context<'a> {
    fn control_model(&self) -> Model {
        self.s.model.with_vol(VolatilityFn::constant(self.s.model.vol.sigma_lo()).expect("positive sigma"))
    }

    fn main(&mut self) -> Result<&SolvedBoundary> {
        if self.main.is_none() {
            self.main = Some(solve_boundary(&self.s.model, &self.s.pde, self.s.boundary.tolerance_rel)?);
        }
        Ok(self.main.as_ref().expect("just set"))
    }

    fn control(&mut self) -> Result<&SolvedBoundary> {
        if self.control.is_none() {
            let model = self.control_model();
            self.control = Some(solve_boundary(&model, &self.s.pde, self.s.boundary.tolerance_rel)?);
        }
        Ok(self.control.as_ref().expect("just set"))
    }
}

/// `V(0, x0, z)` on every `z` column.
fn price_across_columns(surface: &ValueSurface, x0: f64) -> Result<Vec<f64>> {
    (0..surface.n_v_nodes())
        .map(|j| surface.value_at(0.0, x0, surface.grid.v_node(j).exp()))
        .collect()
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(*v), hi.max(*v)))
}

fn envelope(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let m = &s.model;
    let k = m.params.strike;
    let x0 = m.state.x;
    let lo = crr_american_put(m.vol.sigma_lo(), &m.params, x0, &s.binomial)?;
    let hi = crr_american_put(m.vol.sigma_hi(), &m.params, x0, &s.binomial)?;
    let est = price_american_put(&m.params, &m.vol, x0, m.state.z, &s.lsmc)?;
    let (pde_min, pde_max) = min_max(&price_across_columns(&ctx.main()?.surface, x0)?);
    let tol = (3.0 * est.std_error).max(0.005 * k);
    let inside = |v: f64| v >= lo - tol && v <= hi + tol;
    Ok(Finding::new(inside(pde_min) && inside(pde_max) && inside(est.price))
        .measure("crr_sigma_lo", lo)
        .measure("crr_sigma_hi", hi)
        .measure("pde_min_over_z", pde_min)
        .measure("pde_max_over_z", pde_max)
        .measure("lsmc_price", est.price)
        .measure("lsmc_std_error", est.std_error)
        .tol("envelope", tol))
}

fn bounds(ctx: &mut Context) -> Result<Finding> {
    let surface = &ctx.main()?.surface;
    let k = surface.strike;
    let (mut min_gap, mut max_v) = (f64::INFINITY, f64::NEG_INFINITY);
    for slice in &surface.values {
        for i in 0..surface.n_w_nodes() {
            for j in 0..surface.n_v_nodes() {
                let v = slice[surface.index(i, j)];
                min_gap = min_gap.min(v - surface.payoff_at(i, j));
                max_v = max_v.max(v);
            }
        }
    }
    let tol = 1e-10 * k;
    Ok(Finding::new(min_gap >= -tol && max_v <= k + tol)
        .measure("min_value_minus_payoff", min_gap)
        .measure("max_value", max_v)
        .tol("obstacle", -tol)
        .tol("upper", k + tol))
}

/// Smallest second difference and largest first difference of `V` along
/// `x` at fixed `(t, z)`; the second difference is the change of slope
/// times the mean spacing, so it is in currency units.
fn shape(surface: &ValueSurface) -> (f64, f64) {
    let (mut min_second, mut max_first) = (f64::INFINITY, f64::NEG_INFINITY);
    for slice in &surface.values {
        for j in 0..surface.n_v_nodes() {
            for i in 1..surface.n_w_nodes() {
                let (x0, x1) = (surface.x_at(i - 1, j), surface.x_at(i, j));
                let (v0, v1) = (slice[surface.index(i - 1, j)], slice[surface.index(i, j)]);
                max_first = max_first.max(v1 - v0);
                if i + 1 < surface.n_w_nodes() {
                    let x2 = surface.x_at(i + 1, j);
                    let v2 = slice[surface.index(i + 1, j)];
                    let bend = ((v2 - v1) / (x2 - x1) - (v1 - v0) / (x1 - x0)) * 0.5 * (x2 - x0);
                    min_second = min_second.min(bend);
                }
            }
        }
    }
    (min_second, max_first)
}

fn convexity(ctx: &mut Context) -> Result<Finding> {
    let surface = &ctx.main()?.surface;
    let (min_second, _) = shape(surface);
    let tol = 1e-6 * surface.strike;
    Ok(Finding::new(min_second >= -tol)
        .measure("min_second_difference", min_second)
        .tol("second_difference", -tol))
}

fn monotone(ctx: &mut Context) -> Result<Finding> {
    let surface = &ctx.main()?.surface;
    let (_, max_first) = shape(surface);
    let tol = 1e-8 * surface.strike;
    Ok(Finding::new(max_first <= tol)
        .measure("max_first_difference", max_first)
        .tol("first_difference", tol))
}

/// Growth factor of the continuity constant allowed when the grid is
/// halved; a jump in `z` would make it double.
const CONTINUITY_GROWTH: f64 = 1.5;

fn boundary_exists(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let m = &s.model;
    if s.pde.n_w < 32 || s.pde.n_v < 32 {
        return Err(Error::Config(format!(
            "the continuity check solves on a half grid and needs n_w, n_v >= 32, got {} and {}",
            s.pde.n_w, s.pde.n_v
        )));
    }
    let coarse_res = GridResolution {
        n_w: s.pde.n_w / 2,
        n_v: s.pde.n_v / 2,
        n_t: s.pde.n_t.map(|n| n / 2),
        ..s.pde
    };
    let coarse = solve_boundary(m, &coarse_res, s.boundary.tolerance_rel)?.boundary.continuity_constant();
    let bc = crate::baseline::BinomialConfig {
        n_steps: s.binomial.n_steps.min(2000),
    };
    let b_hi_vol = crr_boundary(m.vol.sigma_hi(), &m.params, &bc)?;
    let b_lo_vol = crr_boundary(m.vol.sigma_lo(), &m.params, &bc)?;
    let main = ctx.main()?;
    let eb = &main.boundary;
    let c = eb.continuity_constant();
    let env_tol = 0.005 * m.params.strike;
    let excess = eb.envelope_excess(&b_hi_vol, &b_lo_vol, env_tol);
    let interior_ok = eb.b[..eb.b.len() - 1].iter().flatten().all(|b| *b > 0.0 && *b < m.params.strike);
    let columns = eb.b.iter().map(Vec::len).sum::<usize>();
    Ok(Finding::new(interior_ok && excess == 0.0 && c <= CONTINUITY_GROWTH * coarse)
        .measure("columns_extracted", columns)
        .measure("continuity_constant", c)
        .measure("continuity_constant_half_grid", coarse)
        .measure("envelope_excess", excess)
        .tol("continuity_growth", CONTINUITY_GROWTH)
        .tol("envelope", env_tol))
}

fn partition(ctx: &mut Context) -> Result<Finding> {
    let main = ctx.main()?;
    let (surface, eb) = (&main.surface, &main.boundary);
    let violations = eb.partition_violations(surface);
    let g = &surface.grid;
    // bilinear error of the payoff across one (w, v) cell
    let interp_tol = surface.strike * (g.dw() + g.dv()).powi(2) / 8.0;
    let mid = eb.times.len() / 2;
    let mut anti = 0;
    for slice in [0, mid] {
        anti += eb.anti_comonotone_violations(surface, slice, interp_tol)?;
    }
    Ok(Finding::new(violations == 0 && anti == 0)
        .measure("partition_violations", violations)
        .measure("anti_comonotone_violations", anti)
        .tol("partition_cells", 1.0)
        .tol("interpolation", interp_tol))
}

fn count_non_monotone(
    model: &Model,
    solved: &SolvedBoundary,
    n_paths: usize,
    seed: u64,
    floor: f64,
) -> Result<(usize, usize, f64)> {
    let mut non_monotone = 0;
    let mut outside = 0;
    let mut largest = 0.0f64;
    for curve in striking_curves(model, &solved.boundary, n_paths, seed)? {
        match curve {
            Ok(c) => {
                let r = c.monotonicity(floor);
                largest = largest.max(r.max_decrease);
                non_monotone += usize::from(!r.is_monotone_increasing);
            }
            Err(_) => outside += 1,
        }
    }
    Ok((non_monotone, outside, largest))
}

fn non_monotone(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let floor = s.boundary.noise_floor_rel * s.model.params.strike;
    let (n, seed) = (s.boundary.n_paths, s.boundary.seed);
    let control_model = ctx.control_model();
    let control = count_non_monotone(&control_model, ctx.control()?, n, seed, floor)?;
    let noise_free = {
        let main = ctx.main()?;
        noise_free_striking_curve(&main.boundary, &s.model.params, s.model.state.z)?.monotonicity(floor)
    };
    let mut finding = if s.model.vol.is_constant() {
        Finding::new(control.0 == 0 && control.1 == 0)
    } else {
        let main = count_non_monotone(&s.model, ctx.main()?, n, seed, floor)?;
        Finding::new(main.0 >= 1 && control.0 == 0 && control.1 == 0 && main.1 == 0)
            .measure("non_monotone_paths", main.0)
            .measure("paths_outside_grid", main.1)
            .measure("largest_decrease", main.2)
    };
    finding = finding
        .measure("paths", n)
        .measure("control_sigma", control_model.vol.sigma_lo())
        .measure("control_non_monotone_paths", control.0)
        .measure("control_paths_outside_grid", control.1)
        .measure("control_largest_decrease", control.2)
        .measure("noise_free_non_monotone", !noise_free.is_monotone_increasing)
        .measure("noise_free_largest_decrease", noise_free.max_decrease)
        .tol("noise_floor", floor);
    Ok(finding)
}

fn endpoint(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let k = s.model.params.strike;
    let main = ctx.main()?;
    let eb = &main.boundary;
    let last = eb.times.len() - 1;
    let one_cell = k * (main.grid.dw().exp() - 1.0);
    let worst = eb.b[last].iter().map(|b| (b - k).abs()).fold(0.0, f64::max);
    let curves = striking_curves(&s.model, eb, s.boundary.n_paths, s.boundary.seed)?;
    let mut worst_curve = 0.0f64;
    for c in curves.iter().flatten() {
        worst_curve = worst_curve.max((c.b.last().expect("non-empty") - k).abs());
    }
    Ok(Finding::new(worst <= one_cell && worst_curve <= one_cell)
        .measure("max_terminal_gap", worst)
        .measure("max_curve_terminal_gap", worst_curve)
        .tol("one_x_cell", one_cell))
}

fn mean_reversion(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let (p, vol) = (&s.model.params, &s.model.vol);
    let (lo, hi) = p.reversion_zone(vol);
    let seed = check_seed(s.verify.seed, "Z_meanreversion_zone");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wrong = 0usize;
    for _ in 0..s.verify.zone_points {
        let above = hi.max(0.0) * (1.0 + 1e-9) + 1e-9 + rng.random::<f64>() * 5.0;
        if p.drift_ln_z(vol, above)? >= 0.0 {
            wrong += 1;
        }
        if lo > 0.0 {
            let below = lo * (1.0 - rng.random::<f64>()) * (1.0 - 1e-9);
            if below > 0.0 && p.drift_ln_z(vol, below)? <= 0.0 {
                wrong += 1;
            }
        }
    }

    let v = &s.verify;
    let paths = simulate(
        p,
        vol,
        s.model.state.x,
        s.model.state.z,
        &SimConfig::new(v.occupation_paths, v.occupation_steps, seed),
    )?;
    let mut up = Vec::new();
    let mut down = Vec::new();
    for path in 0..paths.n_paths {
        for w in paths.z_path(path).windows(2) {
            let step = (w[1] / w[0]).ln();
            if w[0] > hi {
                down.push(step);
            } else if w[0] < lo {
                up.push(step);
            }
        }
    }
    let (mean_above, se_above) = mean_and_std_error(down.iter().copied());
    let (mean_below, se_below) = mean_and_std_error(up.iter().copied());
    let occupation_ok = mean_above + 3.0 * se_above < 0.0 && mean_below - 3.0 * se_below > 0.0;
    Ok(Finding::new(wrong == 0 && occupation_ok)
        .measure("seed", seed)
        .measure("zone", [lo, hi])
        .measure("wrong_drift_signs", wrong)
        .measure("points_per_side", v.zone_points)
        .measure("steps_above_zone", down.len())
        .measure("mean_log_step_above_zone", mean_above)
        .measure("steps_below_zone", up.len())
        .measure("mean_log_step_below_zone", mean_below)
        .tol("drift_sign", 0.0)
        .tol("occupation_std_errors", 3.0))
}

fn consistency(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let m = &s.model;
    let v = &s.verify;
    let steps = [v.consistency_steps / 4, v.consistency_steps / 2, v.consistency_steps];
    let seed = check_seed(v.seed, "Y_Z_consistency");
    let mut gaps = Vec::new();
    let mut dts = Vec::new();
    for n in steps {
        let ps = simulate(&m.params, &m.vol, m.state.x, m.state.z, &SimConfig::new(v.consistency_paths, n, seed))?;
        gaps.push(ps.consistency_gap());
        dts.push(ps.dt());
    }
    // least-squares first-order constant through the origin
    let c1 = gaps.iter().zip(&dts).map(|(g, d)| g * d).sum::<f64>() / dts.iter().map(|d| d * d).sum::<f64>();
    let ratio = gaps[1] / gaps[2];
    let finest_ok = gaps[2] <= 5.0 * c1 * dts[2];
    Ok(Finding::new(finest_ok && (1.5..=2.5).contains(&ratio))
        .measure("seed", seed)
        .measure("steps", steps)
        .measure("gaps", &gaps)
        .measure("first_order_constant", c1)
        .measure("halving_ratio", ratio)
        .tol("gap_over_constant_dt", 5.0)
        .tol("ratio_min", 1.5)
        .tol("ratio_max", 2.5))
}

fn constant_sigma(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let model = ctx.control_model();
    let k = model.params.strike;
    let sigma = model.vol.sigma_lo();
    let crr = crr_american_put(sigma, &model.params, model.state.x, &s.binomial)?;
    let prices = price_across_columns(&ctx.control()?.surface, model.state.x)?;
    let (lo, hi) = min_max(&prices);
    let worst = (lo - crr).abs().max((hi - crr).abs());
    Ok(Finding::new(worst <= 0.005 * k && hi - lo <= 0.0025 * k)
        .measure("sigma", sigma)
        .measure("crr", crr)
        .measure("max_abs_error_over_z", worst)
        .measure("variation_over_z", hi - lo)
        .tol("error", 0.005 * k)
        .tol("variation", 0.0025 * k))
}

fn martingale(ctx: &mut Context) -> Result<Finding> {
    let s = ctx.s;
    let m = &s.model;
    let v = &s.verify;
    let seed = check_seed(v.seed, "MARTINGALE_discounted_X");
    let ps = simulate(
        &m.params,
        &m.vol,
        m.state.x,
        m.state.z,
        &SimConfig::new(v.martingale_paths, v.martingale_steps, seed),
    )?;
    let (mean, se) = ps.discounted_terminal_mean(m.params.r);
    Ok(Finding::new((mean - m.state.x).abs() <= 3.0 * se)
        .measure("seed", seed)
        .measure("mean", mean)
        .measure("std_error", se)
        .measure("x0", m.state.x)
        .tol("std_errors", 3.0))
}

type CheckFn = fn(&mut Context) -> Result<Finding>;

fn implementation(id: &str) -> CheckFn {
    match id {
        "L31_envelope" => envelope,
        "L32_bounds" => bounds,
        "L32_convexity" => convexity,
        "L32_monotone" => monotone,
        "P33_boundary_exists" => boundary_exists,
        "P33_partition" => partition,
        "P34_nonmonotone" => non_monotone,
        "P34_endpoint" => endpoint,
        "Z_meanreversion_zone" => mean_reversion,
        "Y_Z_consistency" => consistency,
        "CONST_sigma_reduction" => constant_sigma,
        "MARTINGALE_discounted_X" => martingale,
        other => unreachable!("unregistered check {other}"),
    }
}

/// Run every registered check. Numerical failures abort with the error;
/// failed properties are recorded and the run continues.
pub fn verify(settings: &Settings) -> Result<VerificationReport> {
    let hash = settings.input_hash();
    let mut ctx = Context {
        s: settings,
        main: None,
        control: None,
    };
    let mut checks = Vec::with_capacity(REGISTRY.len());
    for d in &REGISTRY {
        let started = Instant::now();
        let f = implementation(d.id)(&mut ctx)?;
        checks.push(CheckRecord {
            check_id: d.id,
            paper_claim: d.claim,
            status: if f.pass { CheckStatus::Pass } else { CheckStatus::Fail },
            measured: f.measured,
            tolerances: f.tolerances,
            runtime_seconds: started.elapsed().as_secs_f64(),
            input_hash: hash.clone(),
        });
    }
    Ok(VerificationReport {
        input_hash: hash,
        config: settings.to_json(),
        all_passed: checks.iter().all(|c| c.status == CheckStatus::Pass),
        checks,
    })
}
