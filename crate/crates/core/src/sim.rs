//! Seeded simulation of the joint system `(X, Y, Z)` on a uniform grid.
//!
//! `X` and `Z` are driven by the same Brownian increment each step. `Z` is
//! advanced by its own SDE rather than recovered as `X / Y`; `Y` is carried
//! along with an exponential integrator so that `|Z - X/Y|` measures the
//! discretisation error of the pair.
//!
//! Every path draws its normals from its own ChaCha stream, keyed by
//! `(seed, path_index)`, so results do not depend on how paths are scheduled
//! across threads.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelParams, VolatilityFn};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Euler-Maruyama on `ln X` and `ln Z`; positive by construction.
    #[default]
    LogEuler,
    /// Euler-Maruyama on `X` and `Z` directly.
    Euler,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_paths: usize,
    pub n_steps: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub scheme: Scheme,
    /// Pair path `2k+1` with the negated increments of path `2k`.
    #[serde(default)]
    pub antithetic: bool,
}

impl SimConfig {
    pub fn new(n_paths: usize, n_steps: usize, seed: u64) -> Self {
        Self {
            n_paths,
            n_steps,
            seed,
            scheme: Scheme::LogEuler,
            antithetic: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_paths == 0 || self.n_steps == 0 {
            return Err(Error::Config(format!(
                "n_paths and n_steps must be at least 1, got {} and {}",
                self.n_paths, self.n_steps
            )));
        }
        Ok(())
    }
}

/// Simulated trajectories stored row-major: path `i` occupies
/// `[i * n_nodes, (i + 1) * n_nodes)` in each of `x`, `y`, `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSet {
    pub times: Vec<f64>,
    pub n_paths: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    /// FNV-1a digest over the bit patterns of every Brownian increment, in
    /// path-major order.
    pub increments_digest: u64,
}

impl PathSet {
    pub fn n_nodes(&self) -> usize {
        self.times.len()
    }

    pub fn dt(&self) -> f64 {
        self.times[1] - self.times[0]
    }

    pub fn x_path(&self, path: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.x[path * n..(path + 1) * n]
    }

    pub fn y_path(&self, path: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.y[path * n..(path + 1) * n]
    }

    pub fn z_path(&self, path: usize) -> &[f64] {
        let n = self.n_nodes();
        &self.z[path * n..(path + 1) * n]
    }

    /// Values of `x` at node `k` across all paths.
    pub fn x_at(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.x.iter().skip(k).step_by(self.n_nodes()).copied()
    }

    pub fn z_at(&self, k: usize) -> impl Iterator<Item = f64> + '_ {
        self.z.iter().skip(k).step_by(self.n_nodes()).copied()
    }

    /// Largest `|z - x/y|` over every path and node.
    pub fn consistency_gap(&self) -> f64 {
        self.x
            .iter()
            .zip(&self.y)
            .zip(&self.z)
            .map(|((x, y), z)| (z - x / y).abs())
            .fold(0.0, f64::max)
    }

    /// Sample mean and standard error of `e^{-rT} X(T)`.
    pub fn discounted_terminal_mean(&self, r: f64) -> (f64, f64) {
        let t = *self.times.last().expect("non-empty grid");
        let disc = (-r * t).exp();
        let last = self.n_nodes() - 1;
        mean_and_std_error(self.x_at(last).map(|x| disc * x))
    }

    /// CSV dump with columns `t, path_id, x, y, z`, path-major, 17
    /// significant digits.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "path_id", "x", "y", "z"])?;
        for p in 0..self.n_paths {
            let (xs, ys, zs) = (self.x_path(p), self.y_path(p), self.z_path(p));
            for (k, t) in self.times.iter().enumerate() {
                w.write_record(&[
                    format!("{t:.16e}"),
                    p.to_string(),
                    format!("{:.16e}", xs[k]),
                    format!("{:.16e}", ys[k]),
                    format!("{:.16e}", zs[k]),
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn mean_and_std_error(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut n, mut mean, mut m2) = (0usize, 0.0f64, 0.0f64);
    for v in values {
        n += 1;
        let d = v - mean;
        mean += d / n as f64;
        m2 += d * (v - mean);
    }
    if n < 2 {
        return (mean, 0.0);
    }
    let var = m2 / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv_mix(mut h: u64, word: u64) -> u64 {
    for b in word.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// FNV-1a over a byte string.
pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(FNV_OFFSET, |h, b| (h ^ *b as u64).wrapping_mul(FNV_PRIME))
}

/// Normal generator for one path: stream `path` (or `path / 2` when
/// antithetic) of the ChaCha generator seeded by `seed`.
pub(crate) fn path_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Simulate `cfg.n_paths` trajectories of `(X, Y, Z)` from `(x0, y0 = x0/z0, z0)`.
pub fn simulate(
    params: &ModelParams,
    vol: &VolatilityFn,
    x0: f64,
    z0: f64,
    cfg: &SimConfig,
) -> Result<PathSet> {
    cfg.validate()?;
    if !(x0.is_finite() && x0 > 0.0 && z0.is_finite() && z0 > 0.0) {
        return Err(Error::Domain(format!(
            "x0 and z0 must be positive and finite, got {x0} and {z0}"
        )));
    }
    let n_nodes = cfg.n_steps + 1;
    let dt = params.maturity / cfg.n_steps as f64;
    let times: Vec<f64> = (0..n_nodes)
        .map(|k| {
            if k == cfg.n_steps {
                params.maturity
            } else {
                k as f64 * dt
            }
        })
        .collect();

    let len = cfg.n_paths * n_nodes;
    let mut x = vec![0.0; len];
    let mut y = vec![0.0; len];
    let mut z = vec![0.0; len];

    let digests: Vec<Result<u64>> = x
        .par_chunks_mut(n_nodes)
        .zip(y.par_chunks_mut(n_nodes))
        .zip(z.par_chunks_mut(n_nodes))
        .enumerate()
        .map(|(path, ((xs, ys), zs))| {
            let stepper = Stepper::new(params, vol, dt, cfg.scheme);
            let (stream, sign) = if cfg.antithetic {
                ((path / 2) as u64, if path % 2 == 0 { 1.0 } else { -1.0 })
            } else {
                (path as u64, 1.0)
            };
            let mut rng = path_rng(cfg.seed, stream);
            stepper.run(path, x0, z0, xs, ys, zs, || {
                let xi: f64 = StandardNormal.sample(&mut rng);
                sign * xi
            })
        })
        .collect();

    let mut digest = FNV_OFFSET;
    for d in digests {
        digest = fnv_mix(digest, d?);
    }

    Ok(PathSet {
        times,
        n_paths: cfg.n_paths,
        x,
        y,
        z,
        increments_digest: digest,
    })
}

struct Stepper<'a> {
    params: &'a ModelParams,
    vol: &'a VolatilityFn,
    dt: f64,
    sqrt_dt: f64,
    decay: f64,
    scheme: Scheme,
}

impl<'a> Stepper<'a> {
    fn new(params: &'a ModelParams, vol: &'a VolatilityFn, dt: f64, scheme: Scheme) -> Self {
        Self {
            params,
            vol,
            dt,
            sqrt_dt: dt.sqrt(),
            decay: (-params.lambda * dt).exp(),
            scheme,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run(
        &self,
        path: usize,
        x0: f64,
        z0: f64,
        xs: &mut [f64],
        ys: &mut [f64],
        zs: &mut [f64],
        mut normal: impl FnMut() -> f64,
    ) -> Result<u64> {
        let (r, lambda, dt) = (self.params.r, self.params.lambda, self.dt);
        xs[0] = x0;
        zs[0] = z0;
        ys[0] = x0 / z0;
        let mut digest = FNV_OFFSET;
        for k in 0..xs.len() - 1 {
            let (xk, zk) = (xs[k], zs[k]);
            let sigma = self.vol.eval_unchecked(zk);
            let db = self.sqrt_dt * normal();
            digest = fnv_mix(digest, db.to_bits());
            let (xn, zn) = match self.scheme {
                Scheme::LogEuler => {
                    let half_var = 0.5 * sigma * sigma;
                    let xn = xk * ((r - half_var) * dt + sigma * db).exp();
                    let zn = zk * ((r + lambda - lambda * zk - half_var) * dt + sigma * db).exp();
                    (xn, zn)
                }
                Scheme::Euler => {
                    let xn = xk + r * xk * dt + sigma * xk * db;
                    let zn = zk + (r + lambda - lambda * zk) * zk * dt + sigma * zk * db;
                    if xn.is_finite() && zn.is_finite() && (xn <= 0.0 || zn <= 0.0) {
                        return Err(Error::Positivity { path, step: k + 1 });
                    }
                    (xn, zn)
                }
            };
            // trapezoidal step average inside the exact exponential integrator
            let yn = self.decay * ys[k] + (1.0 - self.decay) * 0.5 * (xk + xn);
            if !(xn.is_finite() && zn.is_finite() && yn.is_finite()) || xn <= 0.0 || zn <= 0.0 {
                return Err(Error::Simulation {
                    path,
                    step: k + 1,
                    reason: format!("state left the positive reals: x={xn}, y={yn}, z={zn}"),
                });
            }
            xs[k + 1] = xn;
            ys[k + 1] = yn;
            zs[k + 1] = zn;
        }
        Ok(digest)
    }
}
