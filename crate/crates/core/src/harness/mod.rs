//! Configuration, command dispatch and artifact writing for the CLI.

mod checks;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

pub use checks::{check_registry, verify, CheckDescriptor, CheckRecord, CheckStatus, VerificationReport};

use crate::baseline::{crr_american_put, BinomialConfig};
use crate::boundary::{
    noise_free_striking_curve, striking_curve_along, ExerciseBoundary, MonotonicityReport, StrikingCurve, Trajectory,
};
use crate::error::{Error, Result};
use crate::lsmc::{price_american_put, LsmcConfig};
use crate::model::{Model, ModelSpec};
use crate::pde::{solve, GridResolution, GridSpec, ValueSurface};
use crate::sim::{fnv1a, simulate, SimConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Price,
    Boundary,
    Simulate,
    Verify,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Pde,
    Lsmc,
    /// Constant volatility only.
    Binomial,
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pde" => Ok(Method::Pde),
            "lsmc" => Ok(Method::Lsmc),
            "binomial" => Ok(Method::Binomial),
            other => Err(Error::Config(format!("unknown method {other:?} (pde, lsmc, binomial)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundaryConfig {
    /// Stopping tolerance as a fraction of `K`.
    pub tolerance_rel: f64,
    /// Monotonicity noise floor as a fraction of `K`.
    pub noise_floor_rel: f64,
    /// Simulated `Z` trajectories to follow.
    pub n_paths: usize,
    pub seed: u64,
}

impl Default for BoundaryConfig {
    fn default() -> Self {
        Self {
            tolerance_rel: crate::boundary::DEFAULT_TOL_REL,
            noise_floor_rel: crate::boundary::DEFAULT_NOISE_FLOOR_REL,
            n_paths: 100,
            seed: 0,
        }
    }
}

/// Sample sizes of the simulation-based checks.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub martingale_paths: usize,
    pub martingale_steps: usize,
    pub consistency_paths: usize,
    /// Finest step count; the coarser runs use a half and a quarter of it.
    pub consistency_steps: usize,
    pub zone_points: usize,
    pub occupation_paths: usize,
    pub occupation_steps: usize,
    pub seed: u64,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        Self {
            martingale_paths: 100_000,
            martingale_steps: 50,
            consistency_paths: 1000,
            consistency_steps: 1000,
            zone_points: 1000,
            occupation_paths: 2000,
            occupation_steps: 250,
            seed: 0,
        }
    }
}

/// Everything read from the JSON config: the model keys at top level plus
/// optional per-command sections.
#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub model: Model,
    pub method: Method,
    pub pde: GridResolution,
    pub lsmc: LsmcConfig,
    pub sim: SimConfig,
    pub binomial: BinomialConfig,
    pub boundary: BoundaryConfig,
    pub verify: VerifyConfig,
}

const SECTIONS: [&str; 7] = ["method", "pde", "lsmc", "sim", "binomial", "boundary", "verify"];

fn section<T: for<'de> Deserialize<'de>>(doc: &mut Map<String, Value>, key: &str, default: T) -> Result<T> {
    match doc.remove(key) {
        None => Ok(default),
        Some(v) => serde_json::from_value(v).map_err(|e| Error::Config(format!("section {key:?}: {e}"))),
    }
}

impl Settings {
    pub fn desk() -> Self {
        Self {
            model: Model::desk_profile(),
            method: Method::Pde,
            pde: GridResolution::desk(),
            lsmc: LsmcConfig::default(),
            sim: SimConfig::new(1000, 250, 0),
            binomial: BinomialConfig::default(),
            boundary: BoundaryConfig::default(),
            verify: VerifyConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let parsed = serde_json::from_str::<Value>(text).map_err(|e| Error::Config(format!("config is not valid JSON: {e}")))?;
        let Value::Object(mut doc) = parsed else {
            return Err(Error::Config("config must be a JSON object".into()));
        };
        let method = section(&mut doc, "method", Method::Pde)?;
        let pde = section(&mut doc, "pde", GridResolution::desk())?;
        let lsmc = section(&mut doc, "lsmc", LsmcConfig::default())?;
        let sim = section(&mut doc, "sim", SimConfig::new(1000, 250, 0))?;
        let binomial = section(&mut doc, "binomial", BinomialConfig::default())?;
        let boundary = section(&mut doc, "boundary", BoundaryConfig::default())?;
        let verify = section(&mut doc, "verify", VerifyConfig::default())?;
        let model: ModelSpec =
            serde_json::from_value(Value::Object(doc)).map_err(|e| Error::Config(format!("model: {e}")))?;
        let settings = Self {
            model: model.build()?,
            method,
            pde,
            lsmc,
            sim,
            binomial,
            boundary,
            verify,
        };
        settings.validate()?;
        Ok(settings)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Reject section values that the modules would only refuse later.
    pub fn validate(&self) -> Result<()> {
        GridSpec::around(&self.model, &self.pde)?;
        self.lsmc.validate(&self.model.vol)?;
        self.sim.validate()?;
        if self.binomial.n_steps == 0 {
            return Err(Error::Config("binomial.n_steps must be at least 1".into()));
        }
        let b = &self.boundary;
        if !(b.tolerance_rel > 0.0 && b.noise_floor_rel >= 0.0) || b.n_paths == 0 {
            return Err(Error::Config(format!("invalid boundary section {b:?}")));
        }
        let v = &self.verify;
        if [v.martingale_paths, v.martingale_steps, v.consistency_paths, v.zone_points, v.occupation_paths, v.occupation_steps]
            .contains(&0)
            || v.consistency_steps < 4
        {
            return Err(Error::Config(format!("invalid verify section {v:?}")));
        }
        Ok(())
    }

    /// Use `seed` for every randomized component.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.lsmc.seed = seed;
        self.sim.seed = seed;
        self.boundary.seed = seed;
        self.verify.seed = seed;
        self
    }

    pub fn to_json(&self) -> Value {
        let mut doc = match serde_json::to_value(self.model.to_spec()).expect("serializable") {
            Value::Object(m) => m,
            _ => unreachable!("model spec is an object"),
        };
        let sections = [
            json!(self.method),
            json!(self.pde),
            json!(self.lsmc),
            json!(self.sim),
            json!(self.binomial),
            json!(self.boundary),
            json!(self.verify),
        ];
        for (key, v) in SECTIONS.iter().zip(sections) {
            doc.insert(key.to_string(), v);
        }
        Value::Object(doc)
    }

    /// FNV-1a hash of the canonical JSON form, as 16 hex digits.
    pub fn input_hash(&self) -> String {
        format!("{:016x}", fnv1a(self.to_json().to_string().as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub settings: Settings,
    pub out_dir: PathBuf,
    /// Overrides every seed in `settings` when present.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn effective_settings(&self) -> Settings {
        match self.seed {
            Some(seed) => self.settings.clone().with_seed(seed),
            None => self.settings.clone(),
        }
    }
}

/// What a finished command produced.
#[derive(Clone, Debug, PartialEq)]
pub struct Outcome {
    pub success: bool,
    pub artifacts: Vec<PathBuf>,
    pub summary: Value,
}

impl Outcome {
    pub fn exit_code(&self) -> i32 {
        if self.success {
            0
        } else {
            1
        }
    }
}

/// Exit code for an error raised while running a command.
pub fn error_exit_code(err: &Error) -> i32 {
    if err.is_usage() {
        2
    } else {
        3
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PriceRecord {
    pub method: Method,
    pub x0: f64,
    pub z0: f64,
    pub price: f64,
    pub std_error: f64,
    pub n_paths: Option<usize>,
    pub flags: Vec<String>,
    pub runtime_seconds: f64,
}

pub fn price(settings: &Settings, method: Method) -> Result<PriceRecord> {
    let started = Instant::now();
    let m = &settings.model;
    let (x0, z0) = (m.state.x, m.state.z);
    let (price, std_error, n_paths, flags) = match method {
        Method::Pde => {
            let grid = GridSpec::around(m, &settings.pde)?;
            let surface = solve(&m.params, &m.vol, &grid)?;
            (surface.value_at(0.0, x0, z0)?, 0.0, None, Vec::new())
        }
        Method::Lsmc => {
            let est = price_american_put(&m.params, &m.vol, x0, z0, &settings.lsmc)?;
            let flags = est
                .flags
                .iter()
                .map(|f| json!(f).as_str().unwrap_or_default().to_string())
                .collect();
            (est.price, est.std_error, Some(est.n_paths), flags)
        }
        Method::Binomial => {
            if !m.vol.is_constant() {
                return Err(Error::Config("the binomial method needs a constant volatility".into()));
            }
            let p = crr_american_put(m.vol.sigma_lo(), &m.params, x0, &settings.binomial)?;
            (p, 0.0, None, Vec::new())
        }
    };
    Ok(PriceRecord {
        method,
        x0,
        z0,
        price,
        std_error,
        n_paths,
        flags,
        runtime_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Surface and boundary of one model, with the grid that produced them.
pub struct SolvedBoundary {
    pub grid: GridSpec,
    pub surface: ValueSurface,
    pub boundary: ExerciseBoundary,
}

pub fn solve_boundary(model: &Model, res: &GridResolution, tolerance_rel: f64) -> Result<SolvedBoundary> {
    let grid = GridSpec::around(model, res)?;
    let surface = solve(&model.params, &model.vol, &grid)?;
    let boundary = ExerciseBoundary::extract(&surface, tolerance_rel * model.params.strike)?;
    Ok(SolvedBoundary { grid, surface, boundary })
}

/// Striking curves along `n_paths` simulated `Z` trajectories sampled at
/// the stored slice times. Trajectories leaving the grid are returned as
/// errors in place.
pub fn striking_curves(
    model: &Model,
    boundary: &ExerciseBoundary,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Result<StrikingCurve>>> {
    let n_steps = boundary.times.len() - 1;
    let paths = simulate(
        &model.params,
        &model.vol,
        model.state.x,
        model.state.z,
        &SimConfig::new(n_paths, n_steps, seed),
    )?;
    Ok((0..n_paths)
        .map(|p| {
            striking_curve_along(
                boundary,
                &paths.times,
                paths.z_path(p),
                Trajectory::Simulated { seed, path_id: p },
            )
        })
        .collect())
}

fn create_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

#[derive(Serialize)]
struct CurveReport {
    trajectory: Trajectory,
    report: Option<MonotonicityReport>,
    error: Option<String>,
}

fn run_boundary(settings: &Settings, out: &Path) -> Result<Outcome> {
    let m = &settings.model;
    let cfg = &settings.boundary;
    let solved = solve_boundary(m, &settings.pde, cfg.tolerance_rel)?;
    let floor = cfg.noise_floor_rel * m.params.strike;
    create_out_dir(out)?;
    let mut artifacts = Vec::new();

    let path = out.join("boundary.csv");
    solved.boundary.write_csv(BufWriter::new(File::create(&path)?))?;
    artifacts.push(path);

    let noise_free = noise_free_striking_curve(&solved.boundary, &m.params, m.state.z)?;
    let path = out.join("striking_curve_noise_free.csv");
    noise_free.write_csv(BufWriter::new(File::create(&path)?))?;
    artifacts.push(path);

    let curve_dir = out.join("striking_curves");
    create_out_dir(&curve_dir)?;
    let mut reports = Vec::new();
    for (p, curve) in striking_curves(m, &solved.boundary, cfg.n_paths, cfg.seed)?.into_iter().enumerate() {
        match curve {
            Ok(curve) => {
                let path = curve_dir.join(format!("path_{p:04}.csv"));
                curve.write_csv(BufWriter::new(File::create(&path)?))?;
                artifacts.push(path);
                reports.push(CurveReport {
                    trajectory: curve.trajectory,
                    report: Some(curve.monotonicity(floor)),
                    error: None,
                });
            }
            Err(e) => reports.push(CurveReport {
                trajectory: Trajectory::Simulated { seed: cfg.seed, path_id: p },
                report: None,
                error: Some(e.to_string()),
            }),
        }
    }
    let non_monotone = reports
        .iter()
        .filter(|r| r.report.is_some_and(|r| !r.is_monotone_increasing))
        .count();
    let outside = reports.iter().filter(|r| r.error.is_some()).count();
    let summary = json!({
        "noise_floor": floor,
        "n_paths": cfg.n_paths,
        "non_monotone_paths": non_monotone,
        "paths_outside_grid": outside,
        "continuity_constant": solved.boundary.continuity_constant(),
        "noise_free": noise_free.monotonicity(floor),
    });
    let path = out.join("monotonicity.json");
    write_json(&path, &json!({ "summary": summary, "paths": reports }))?;
    artifacts.push(path);
    Ok(Outcome {
        success: true,
        artifacts,
        summary,
    })
}

fn run_simulate(settings: &Settings, out: &Path) -> Result<Outcome> {
    let m = &settings.model;
    let paths = simulate(&m.params, &m.vol, m.state.x, m.state.z, &settings.sim)?;
    create_out_dir(out)?;
    let path = out.join("paths.csv");
    paths.write_csv(BufWriter::new(File::create(&path)?))?;
    let summary = json!({
        "n_paths": paths.n_paths,
        "n_steps": paths.n_nodes() - 1,
        "seed": settings.sim.seed,
        "increments_digest": format!("{:016x}", paths.increments_digest),
        "consistency_gap": paths.consistency_gap(),
    });
    Ok(Outcome {
        success: true,
        artifacts: vec![path],
        summary,
    })
}

/// Execute one command, writing its artifacts under `cfg.out_dir`.
pub fn run(cfg: &RunConfig, method: Method) -> Result<Outcome> {
    let settings = cfg.effective_settings();
    let out = cfg.out_dir.as_path();
    match cfg.command {
        Command::Price => {
            let record = price(&settings, method)?;
            create_out_dir(out)?;
            let path = out.join("price.json");
            write_json(&path, &record)?;
            Ok(Outcome {
                success: true,
                artifacts: vec![path],
                summary: json!(record),
            })
        }
        Command::Boundary => run_boundary(&settings, out),
        Command::Simulate => run_simulate(&settings, out),
        Command::Verify => {
            let report = verify(&settings)?;
            create_out_dir(out)?;
            let path = out.join("verification_report.json");
            write_json(&path, &report)?;
            let summary = json!({
                "all_passed": report.all_passed,
                "failed": report.checks.iter().filter(|c| c.status == CheckStatus::Fail).map(|c| c.check_id).collect::<Vec<_>>(),
            });
            Ok(Outcome {
                success: report.all_passed,
                artifacts: vec![path],
                summary,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DESK: &str = r#"{"r":0.05,"lambda":1.0,"K":100.0,"T":1.0,
        "vol":{"kind":"hobson_rogers","eta":0.2,"eps":1.0,"cap":0.4},"x0":100.0,"z0":1.0}"#;

    #[test]
    fn model_keys_alone_give_desk_settings() {
        let s = Settings::from_json(DESK).unwrap();
        assert_eq!(s, Settings::desk());
    }

    #[test]
    fn sections_override_defaults() {
        let text = DESK.replace(
            "\"x0\"",
            r#""method":"lsmc","lsmc":{"basis_degree":2,"n_paths":500,"n_steps":10},"pde":{"n_w":128,"n_v":32},"x0""#,
        );
        let s = Settings::from_json(&text).unwrap();
        assert_eq!(s.method, Method::Lsmc);
        assert_eq!(s.lsmc.basis_degree, 2);
        assert!(s.lsmc.itm_only);
        assert_eq!(s.pde.n_w, 128);
        assert_eq!(s.pde.n_t, None);
    }

    #[test]
    fn malformed_configs_are_usage_errors() {
        for text in [
            "",
            "[]",
            r#"{"r":0.05}"#,
            &DESK.replace("\"x0\"", "\"typo\":1,\"x0\""),
            &DESK.replace("\"x0\"", r#""lsmc":{"basis_degree":9,"n_paths":500,"n_steps":10},"x0""#),
            &DESK.replace("\"lambda\":1.0", "\"lambda\":-1.0"),
        ] {
            let err = Settings::from_json(text).unwrap_err();
            assert_eq!(error_exit_code(&err), 2, "{text}: {err}");
        }
        assert_eq!(error_exit_code(&Error::Psor { step: 0, line: 0, residual: 1.0, iterations: 1 }), 3);
    }

    #[test]
    fn seed_override_and_hash() {
        let s = Settings::desk();
        let seeded = s.clone().with_seed(42);
        assert_eq!((seeded.lsmc.seed, seeded.sim.seed, seeded.boundary.seed, seeded.verify.seed), (42, 42, 42, 42));
        assert_ne!(s.input_hash(), seeded.input_hash());
        assert_eq!(s.input_hash(), Settings::from_json(&s.to_json().to_string()).unwrap().input_hash());
    }

    #[test]
    fn method_names() {
        assert_eq!("lsmc".parse::<Method>().unwrap(), Method::Lsmc);
        assert!("fft".parse::<Method>().is_err());
    }
}
