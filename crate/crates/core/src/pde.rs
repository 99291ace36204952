//! Finite-difference solver for the American put variational inequality
//! under the two-dimensional generator of `(X, Z)`.
//!
//! `X` and `Z` are driven by the same Brownian motion, so the diffusion
//! matrix of `(ln X, ln Z)` has rank one. In the coordinates
//!
//! ```text
//! w = ln x - ln z   (= ln y, the log memory average)
//! v = ln z
//! ```
//!
//! the `w` direction carries no noise at all and the value solves
//!
//! ```text
//! max(V_t + a_w V_w + a_v V_v + d_vv V_vv - r V,  (K - e^{w+v})^+ - V) = 0
//! a_w = lambda (e^v - 1),  a_v = r + lambda - lambda e^v - sigma^2 / 2,  d_vv = sigma^2 / 2
//! ```
//!
//! Each backward step splits into an explicit upwind transport in `w` and a
//! theta-weighted solve in `v`, the latter posed as a tridiagonal linear
//! complementarity problem per `w`-line and solved by projected SOR.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelParams, VolatilityFn};

/// Coefficients of the generator at `v = ln z`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeneratorCoefficients {
    pub a_w: f64,
    pub a_v: f64,
    pub d_vv: f64,
    pub discount: f64,
}

pub fn generator_coefficients(params: &ModelParams, vol: &VolatilityFn, v: f64) -> GeneratorCoefficients {
    let z = v.exp();
    let sigma = vol.eval_unchecked(z);
    GeneratorCoefficients {
        a_w: params.lambda * (z - 1.0),
        a_v: params.r + params.lambda - params.lambda * z - 0.5 * sigma * sigma,
        d_vv: 0.5 * sigma * sigma,
        discount: params.r,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsorConfig {
    pub omega: f64,
    /// Convergence threshold on the largest update, as a fraction of `K`.
    pub tol_rel: f64,
    /// Iteration cap as a multiple of the number of `v` nodes.
    pub max_iter_factor: usize,
}

impl Default for PsorConfig {
    fn default() -> Self {
        Self {
            omega: 1.2,
            tol_rel: 1e-9,
            max_iter_factor: 10,
        }
    }
}

/// Tensor grid over `(w, v)` and the time stepping. `n_w` and `n_v` count
/// intervals, so there are `n_w + 1` by `n_v + 1` nodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub w_min: f64,
    pub w_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub n_w: usize,
    pub n_v: usize,
    pub n_t: usize,
    #[serde(default = "default_theta")]
    pub theta: f64,
    /// Number of stored time slices minus one; must divide `n_t`.
    pub n_slices: usize,
    /// Extra `v` intervals solved beyond each edge and dropped from the
    /// result, keeping the edge condition away from the reported columns.
    #[serde(default)]
    pub v_buffer: usize,
    #[serde(default)]
    pub psor: PsorConfig,
}

fn default_theta() -> f64 {
    1.0
}

/// Node counts and domain widths used to place a grid around a model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridResolution {
    pub n_w: usize,
    pub n_v: usize,
    /// Time steps; when absent, the smallest multiple of `n_slices` that
    /// satisfies the transport step limit.
    #[serde(default)]
    pub n_t: Option<usize>,
    #[serde(default = "default_slices")]
    pub n_slices: usize,
    /// Half-width of the `ln x` band around `[min(x0, K), max(x0, K)]`, in
    /// units of `sigma_hi * sqrt(T)`.
    #[serde(default = "default_x_width")]
    pub x_width: f64,
    /// Half-width of the `ln z` band around the reversion zone, in units of
    /// the stationary standard deviation `sigma_hi * sqrt(min(T, 1 / (2 lambda)))`.
    #[serde(default = "default_z_width")]
    pub z_width: f64,
    /// Width in `v` of the hidden buffer beyond each edge.
    #[serde(default = "default_v_buffer")]
    pub v_buffer: f64,
    #[serde(default = "default_theta")]
    pub theta: f64,
}

fn default_v_buffer() -> f64 {
    0.15
}

fn default_slices() -> usize {
    64
}

fn default_x_width() -> f64 {
    4.0
}

fn default_z_width() -> f64 {
    3.0
}

impl GridResolution {
    /// Explicit time step count.
    pub fn new(n_w: usize, n_v: usize, n_t: usize) -> Self {
        Self {
            n_t: Some(n_t),
            n_slices: default_slices().min(n_t),
            ..Self::auto(n_w, n_v)
        }
    }

    /// Time step count chosen from the transport step limit.
    pub fn auto(n_w: usize, n_v: usize) -> Self {
        Self {
            n_w,
            n_v,
            n_t: None,
            n_slices: default_slices(),
            x_width: default_x_width(),
            z_width: default_z_width(),
            v_buffer: default_v_buffer(),
            theta: 1.0,
        }
    }

    /// Resolution used by the desk-scale profile.
    pub fn desk() -> Self {
        Self::auto(512, 64)
    }

    /// Every count doubled, keeping the stored slice count.
    pub fn refined(&self) -> Self {
        Self {
            n_w: 2 * self.n_w,
            n_v: 2 * self.n_v,
            n_t: self.n_t.map(|n| 2 * n),
            ..*self
        }
    }
}

impl Default for GridResolution {
    fn default() -> Self {
        Self::desk()
    }
}

/// Snap `[lo, hi]` onto `n` intervals such that `anchor` is a node.
fn anchored_axis(lo: f64, hi: f64, n: usize, anchor: f64) -> (f64, f64) {
    let h = (hi - lo) / n as f64;
    let k = ((anchor - lo) / h).round().clamp(1.0, (n - 1) as f64);
    let lo = anchor - k * h;
    (lo, lo + n as f64 * h)
}

impl GridSpec {
    /// Grid covering the reversion zone, the initial state and the strike,
    /// with `(ln x0 - ln z0, ln z0)` placed exactly on a node.
    pub fn around(model: &Model, res: &GridResolution) -> Result<Self> {
        let p = &model.params;
        let s_hi = model.vol.sigma_hi();
        let (zone_lo, zone_hi) = p.reversion_zone(&model.vol);
        let v0 = model.state.z.ln();
        let stat_sd = s_hi * p.maturity.min(0.5 / p.lambda).sqrt();
        let half_v = res.z_width * stat_sd.max(0.05);
        let v_lo = v0.min(zone_lo.max(1e-3).ln()) - half_v;
        let v_hi = v0.max(zone_hi.max(1e-3).ln()) + half_v;

        let x_lo = model.state.x.min(p.strike).ln() - res.x_width * s_hi * p.maturity.sqrt();
        let x_hi = model.state.x.max(p.strike).ln() + res.x_width * s_hi * p.maturity.sqrt();
        let v_mid = 0.5 * (v_lo + v_hi);
        let v_half = 0.5 * (v_hi - v_lo);
        let w_lo = x_lo - v_mid - v_half;
        let w_hi = x_hi - v_mid + v_half;

        let w0 = model.state.x.ln() - v0;
        let (w_min, w_max) = anchored_axis(w_lo, w_hi, res.n_w.max(2), w0);
        // dv a whole number of dw steps: every column then sees the same x
        // lattice, so the discrete boundary does not alias between columns
        let n_v = res.n_v.max(2);
        let dw = (w_max - w_min) / res.n_w.max(2) as f64;
        let dv = ((v_hi - v_lo) / (n_v as f64 * dw)).ceil().max(1.0) * dw;
        let pad = 0.5 * (n_v as f64 * dv - (v_hi - v_lo));
        let (v_min, v_max) = anchored_axis(v_lo - pad, v_hi + pad, n_v, v0);
        let mut grid = GridSpec {
            w_min,
            w_max,
            v_min,
            v_max,
            n_w: res.n_w,
            n_v: res.n_v,
            n_t: res.n_t.unwrap_or(res.n_slices),
            theta: res.theta,
            n_slices: res.n_slices,
            v_buffer: (res.v_buffer.max(0.0) / dv).ceil() as usize,
            psor: PsorConfig::default(),
        };
        match res.n_t {
            Some(n_t) => grid.n_slices = grid.n_slices.min(n_t),
            None => {
                let limit = grid.solver_grid().transport_dt_limit(p);
                let steps = (p.maturity / limit * (1.0 + 1e-12)).ceil().max(1.0) as usize;
                grid.n_t = steps.div_ceil(grid.n_slices).max(1) * grid.n_slices;
            }
        }
        grid.validate(p, &model.vol)?;
        Ok(grid)
    }

    pub fn dw(&self) -> f64 {
        (self.w_max - self.w_min) / self.n_w as f64
    }

    pub fn dv(&self) -> f64 {
        (self.v_max - self.v_min) / self.n_v as f64
    }

    pub fn w_node(&self, i: usize) -> f64 {
        self.w_min + i as f64 * self.dw()
    }

    pub fn v_node(&self, j: usize) -> f64 {
        self.v_min + j as f64 * self.dv()
    }

    /// The grid actually stepped: `v_buffer` extra intervals on each side.
    pub fn solver_grid(&self) -> GridSpec {
        let pad = self.v_buffer as f64 * self.dv();
        GridSpec {
            v_min: self.v_min - pad,
            v_max: self.v_max + pad,
            n_v: self.n_v + 2 * self.v_buffer,
            v_buffer: 0,
            ..*self
        }
    }

    /// Largest stable time step for the explicit transport in `w`.
    pub fn transport_dt_limit(&self, params: &ModelParams) -> f64 {
        let speed = params.lambda * (self.v_max.exp() - 1.0).abs().max((self.v_min.exp() - 1.0).abs());
        if speed == 0.0 {
            f64::INFINITY
        } else {
            self.dw() / speed
        }
    }

    pub fn validate(&self, params: &ModelParams, vol: &VolatilityFn) -> Result<()> {
        let finite = [self.w_min, self.w_max, self.v_min, self.v_max].iter().all(|v| v.is_finite());
        if !finite || self.w_min >= self.w_max || self.v_min >= self.v_max {
            return Err(Error::Config(format!(
                "grid bounds must be finite and increasing: w [{}, {}], v [{}, {}]",
                self.w_min, self.w_max, self.v_min, self.v_max
            )));
        }
        if self.n_w < 16 || self.n_v < 16 || self.n_t < 8 {
            return Err(Error::Config(format!(
                "grid too coarse: n_w = {}, n_v = {} (>= 16), n_t = {} (>= 8)",
                self.n_w, self.n_v, self.n_t
            )));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::Config(format!("theta must lie in [0, 1], got {}", self.theta)));
        }
        if self.n_slices == 0 || !self.n_t.is_multiple_of(self.n_slices) {
            return Err(Error::Config(format!(
                "n_slices = {} must be positive and divide n_t = {}",
                self.n_slices, self.n_t
            )));
        }
        if !(self.psor.omega > 0.0 && self.psor.omega < 2.0) || self.psor.tol_rel <= 0.0 || self.psor.max_iter_factor == 0 {
            return Err(Error::Config(format!("invalid PSOR settings {:?}", self.psor)));
        }
        let (zone_lo, zone_hi) = params.reversion_zone(vol);
        if zone_lo <= 0.0 || !(zone_lo.ln() > self.v_min && zone_hi.ln() < self.v_max) {
            return Err(Error::Config(format!(
                "v range [{}, {}] must contain the log reversion zone [{}, {}]",
                self.v_min,
                self.v_max,
                zone_lo.ln(),
                zone_hi.ln()
            )));
        }
        let dt = params.maturity / self.n_t as f64;
        let limit = self.solver_grid().transport_dt_limit(params);
        if dt > limit {
            return Err(Error::Stability {
                dt,
                admissible_dt: limit,
                reason: "explicit upwind transport in w".into(),
            });
        }
        if self.theta < 0.5 {
            let d_max = (0..=self.n_v)
                .map(|j| generator_coefficients(params, vol, self.v_node(j)).d_vv)
                .fold(0.0, f64::max);
            let limit = self.dv() * self.dv() / (2.0 * (1.0 - 2.0 * self.theta) * d_max);
            if dt > limit {
                return Err(Error::Stability {
                    dt,
                    admissible_dt: limit,
                    reason: format!("diffusion in v with theta = {}", self.theta),
                });
            }
        }
        Ok(())
    }
}

/// The American value on stored time slices, each `(n_w + 1) x (n_v + 1)`
/// with `v` varying fastest.
#[derive(Clone, Debug)]
pub struct ValueSurface {
    pub grid: GridSpec,
    pub strike: f64,
    /// Stored slice times, ascending from 0 to `T`.
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    /// `true` where the node sits on the obstacle with positive payoff.
    pub exercised: Vec<Vec<bool>>,
    /// Largest final PSOR update over the whole solve.
    pub psor_residual: f64,
    pub psor_max_iterations: usize,
}

impl ValueSurface {
    pub fn n_v_nodes(&self) -> usize {
        self.grid.n_v + 1
    }

    pub fn n_w_nodes(&self) -> usize {
        self.grid.n_w + 1
    }

    #[inline]
    pub fn index(&self, i_w: usize, j_v: usize) -> usize {
        i_w * self.n_v_nodes() + j_v
    }

    pub fn x_at(&self, i_w: usize, j_v: usize) -> f64 {
        (self.grid.w_node(i_w) + self.grid.v_node(j_v)).exp()
    }

    pub fn payoff_at(&self, i_w: usize, j_v: usize) -> f64 {
        (self.strike - self.x_at(i_w, j_v)).max(0.0)
    }

    pub fn node(&self, slice: usize, i_w: usize, j_v: usize) -> f64 {
        self.values[slice][self.index(i_w, j_v)]
    }

    /// `V(t, x, z)`: bilinear in `(w, v)` on the two slices around `t`,
    /// blended linearly in time.
    pub fn value_at(&self, t: f64, x: f64, z: f64) -> Result<f64> {
        let g = &self.grid;
        let t_max = *self.times.last().expect("non-empty");
        if !(x > 0.0 && z > 0.0) || !(0.0..=t_max).contains(&t) {
            return Err(Error::Extrapolation(format!("(t, x, z) = ({t}, {x}, {z})")));
        }
        let (w, v) = (x.ln() - z.ln(), z.ln());
        let eps = 1e-12;
        if w < g.w_min - eps || w > g.w_max + eps || v < g.v_min - eps || v > g.v_max + eps {
            return Err(Error::Extrapolation(format!(
                "(x, z) = ({x}, {z}) maps to (w, v) = ({w}, {v}) outside [{}, {}] x [{}, {}]",
                g.w_min, g.w_max, g.v_min, g.v_max
            )));
        }
        let (iw, fw) = cell(w, g.w_min, g.dw(), g.n_w);
        let (jv, fv) = cell(v, g.v_min, g.dv(), g.n_v);
        let bilinear = |s: usize| {
            let at = |i, j| self.node(s, i, j);
            (1.0 - fw) * ((1.0 - fv) * at(iw, jv) + fv * at(iw, jv + 1))
                + fw * ((1.0 - fv) * at(iw + 1, jv) + fv * at(iw + 1, jv + 1))
        };
        let n = self.times.len() - 1;
        let s = t / t_max * n as f64;
        let k = (s.floor() as usize).min(n - 1);
        let ft = s - k as f64;
        if ft == 0.0 {
            return Ok(bilinear(k));
        }
        Ok((1.0 - ft) * bilinear(k) + ft * bilinear(k + 1))
    }

    /// CSV export with columns `t, x, z, value, exercised`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "x", "z", "value", "exercised"])?;
        for (s, t) in self.times.iter().enumerate() {
            for i in 0..self.n_w_nodes() {
                for j in 0..self.n_v_nodes() {
                    let idx = self.index(i, j);
                    w.write_record(&[
                        format!("{t:.16e}"),
                        format!("{:.16e}", self.x_at(i, j)),
                        format!("{:.16e}", self.grid.v_node(j).exp()),
                        format!("{:.16e}", self.values[s][idx]),
                        (self.exercised[s][idx] as u8).to_string(),
                    ])?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Cell index and fractional offset of `u` on a uniform axis with `n` intervals.
fn cell(u: f64, lo: f64, h: f64, n: usize) -> (usize, f64) {
    let s = ((u - lo) / h).clamp(0.0, n as f64);
    let i = (s.floor() as usize).min(n - 1);
    (i, s - i as f64)
}

/// Tridiagonal row of the `v` operator `a_v D_v + d_vv D_vv - r`.
#[derive(Clone, Copy, Debug)]
struct Stencil {
    lower: f64,
    diag: f64,
    upper: f64,
}

fn v_operator(params: &ModelParams, vol: &VolatilityFn, grid: &GridSpec) -> Vec<Stencil> {
    let dv = grid.dv();
    let n = grid.n_v;
    (0..=n)
        .map(|j| {
            let c = generator_coefficients(params, vol, grid.v_node(j));
            let r = c.discount;
            if j == 0 || j == n {
                // zero curvature: only the inward-pointing drift survives
                let inward = if j == 0 { c.a_v.max(0.0) } else { (-c.a_v).max(0.0) };
                let k = inward / dv;
                return if j == 0 {
                    Stencil { lower: 0.0, diag: -k - r, upper: k }
                } else {
                    Stencil { lower: k, diag: -k - r, upper: 0.0 }
                };
            }
            let diff = c.d_vv / (dv * dv);
            let half = c.a_v / (2.0 * dv);
            if diff >= half.abs() {
                Stencil { lower: diff - half, diag: -2.0 * diff - r, upper: diff + half }
            } else if c.a_v > 0.0 {
                // cell Peclet number above 2: upwind keeps the M-matrix
                let k = c.a_v / dv;
                Stencil { lower: diff, diag: -2.0 * diff - k - r, upper: diff + k }
            } else {
                let k = -c.a_v / dv;
                Stencil { lower: diff + k, diag: -2.0 * diff - k - r, upper: diff }
            }
        })
        .collect()
}

/// Backward time stepping of the complementarity problem from `V(T) = payoff`.
pub fn solve(params: &ModelParams, vol: &VolatilityFn, grid: &GridSpec) -> Result<ValueSurface> {
    grid.validate(params, vol)?;
    let full = solve_padded(params, vol, &grid.solver_grid())?;
    if grid.v_buffer == 0 {
        return Ok(full);
    }
    let (nw, nv_full, nv) = (grid.n_w + 1, full.n_v_nodes(), grid.n_v + 1);
    let lo = grid.v_buffer;
    let crop_values = |s: &Vec<f64>| -> Vec<f64> {
        (0..nw).flat_map(|i| s[i * nv_full + lo..i * nv_full + lo + nv].iter().copied()).collect()
    };
    let crop_mask = |s: &Vec<bool>| -> Vec<bool> {
        (0..nw).flat_map(|i| s[i * nv_full + lo..i * nv_full + lo + nv].iter().copied()).collect()
    };
    let exercised: Vec<Vec<bool>> = full.exercised.iter().map(crop_mask).collect();
    let mut surface = ValueSurface {
        grid: *grid,
        values: full.values.iter().map(crop_values).collect(),
        exercised,
        ..full
    };
    // the terminal slice and exercised nodes carry the payoff of the returned
    // grid's own nodes, not the padded grid's, which can differ in the last bit
    let payoff: Vec<f64> = (0..nw)
        .flat_map(|i| (0..nv).map(move |j| (i, j)))
        .map(|(i, j)| surface.payoff_at(i, j))
        .collect();
    surface.values.last_mut().expect("terminal slice").copy_from_slice(&payoff);
    for (values, mask) in surface.values.iter_mut().zip(&surface.exercised) {
        for ((v, g), m) in values.iter_mut().zip(&payoff).zip(mask) {
            if *m {
                *v = *g;
            }
        }
    }
    Ok(surface)
}

fn solve_padded(params: &ModelParams, vol: &VolatilityFn, grid: &GridSpec) -> Result<ValueSurface> {
    let (nw, nv) = (grid.n_w + 1, grid.n_v + 1);
    let dt = params.maturity / grid.n_t as f64;
    let (dw, theta) = (grid.dw(), grid.theta);
    let k = params.strike;
    let tol = grid.psor.tol_rel * k;
    let max_iter = grid.psor.max_iter_factor * nv;
    let omega = grid.psor.omega;

    let payoff: Vec<f64> = (0..nw)
        .flat_map(|i| (0..nv).map(move |j| (i, j)))
        .map(|(i, j)| (k - (grid.w_node(i) + grid.v_node(j)).exp()).max(0.0))
        .collect();
    let courant: Vec<f64> = (0..nv)
        .map(|j| generator_coefficients(params, vol, grid.v_node(j)).a_w * dt / dw)
        .collect();
    let op = v_operator(params, vol, grid);
    let implicit: Vec<Stencil> = op
        .iter()
        .map(|s| Stencil {
            lower: -theta * dt * s.lower,
            diag: 1.0 - theta * dt * s.diag,
            upper: -theta * dt * s.upper,
        })
        .collect();

    let stride = grid.n_t / grid.n_slices;
    let mut slices = vec![Vec::new(); grid.n_slices + 1];
    let mut masks = vec![Vec::new(); grid.n_slices + 1];
    let mask_of = |u: &[f64]| -> Vec<bool> {
        u.iter().zip(&payoff).map(|(v, g)| *g > 0.0 && *v - *g <= 1e-12 * k).collect()
    };

    let mut u = payoff.clone();
    let mut transported = vec![0.0; nw * nv];
    let mut rhs = vec![0.0; nv];
    let mut residual_max = 0.0f64;
    let mut iter_max = 0usize;
    slices[grid.n_slices] = u.clone();
    masks[grid.n_slices] = mask_of(&u);

    for step in (0..grid.n_t).rev() {
        // explicit upwind transport along w; Dirichlet payoff at both ends
        for i in 0..nw {
            for (j, &c) in courant.iter().enumerate() {
                let idx = i * nv + j;
                transported[idx] = if i == 0 || i == nw - 1 {
                    payoff[idx]
                } else if c > 0.0 {
                    (1.0 - c) * u[idx] + c * u[idx + nv]
                } else {
                    (1.0 + c) * u[idx] - c * u[idx - nv]
                };
            }
        }
        u.copy_from_slice(&transported);

        for i in 1..nw - 1 {
            let base = i * nv;
            let line_old = &transported[base..base + nv];
            for j in 0..nv {
                let s = &op[j];
                let mut lv = s.diag * line_old[j];
                if j > 0 {
                    lv += s.lower * line_old[j - 1];
                }
                if j + 1 < nv {
                    lv += s.upper * line_old[j + 1];
                }
                rhs[j] = line_old[j] + (1.0 - theta) * dt * lv;
            }
            let line = &mut u[base..base + nv];
            let obstacle = &payoff[base..base + nv];
            let mut iterations = 0;
            let mut change;
            loop {
                change = 0.0f64;
                for j in 0..nv {
                    let a = &implicit[j];
                    let mut off = 0.0;
                    if j > 0 {
                        off += a.lower * line[j - 1];
                    }
                    if j + 1 < nv {
                        off += a.upper * line[j + 1];
                    }
                    let gs = (rhs[j] - off) / a.diag;
                    let updated = (line[j] + omega * (gs - line[j])).max(obstacle[j]);
                    change = change.max((updated - line[j]).abs());
                    line[j] = updated;
                }
                iterations += 1;
                if change <= tol {
                    break;
                }
                if iterations >= max_iter {
                    return Err(Error::Psor {
                        step,
                        line: i,
                        residual: change,
                        iterations,
                    });
                }
            }
            residual_max = residual_max.max(change);
            iter_max = iter_max.max(iterations);
        }

        if step % stride == 0 {
            let s = step / stride;
            masks[s] = mask_of(&u);
            slices[s] = u.clone();
        }
    }

    let times = (0..=grid.n_slices)
        .map(|s| {
            if s == grid.n_slices {
                params.maturity
            } else {
                (s * stride) as f64 * dt
            }
        })
        .collect();
    Ok(ValueSurface {
        grid: *grid,
        strike: k,
        times,
        values: slices,
        exercised: masks,
        psor_residual: residual_max,
        psor_max_iterations: iter_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn desk() -> ModelParams {
        ModelParams::new(0.05, 1.0, 100.0, 1.0).unwrap()
    }

    #[test]
    fn coefficient_examples() {
        let p = desk();
        let vol = VolatilityFn::constant(0.2).unwrap();
        assert_eq!(generator_coefficients(&p, &vol, 0.0).a_w, 0.0);
        for v in [-1.0, 0.0, 0.7] {
            assert_abs_diff_eq!(generator_coefficients(&p, &vol, v).d_vv, 0.02, epsilon = 1e-15);
        }
        let c = generator_coefficients(&p, &vol, 2f64.ln());
        assert_abs_diff_eq!(c.a_w, 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(c.a_v, -0.97, epsilon = 1e-14);
        assert_abs_diff_eq!(c.a_v, p.drift_ln_z(&vol, 2.0).unwrap(), epsilon = 1e-14);
        assert_eq!(c.discount, 0.05);
    }

    #[test]
    fn anchored_grid_places_initial_state_on_a_node() {
        let model = Model::desk_profile();
        let g = GridSpec::around(&model, &GridResolution::new(64, 32, 64)).unwrap();
        let w0 = 100f64.ln();
        let i = ((w0 - g.w_min) / g.dw()).round() as usize;
        assert_abs_diff_eq!(g.w_node(i), w0, epsilon = 1e-12);
        let j = ((0.0 - g.v_min) / g.dv()).round() as usize;
        assert_abs_diff_eq!(g.v_node(j), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn grid_validation() {
        let model = Model::desk_profile();
        let g = GridSpec::around(&model, &GridResolution::new(64, 32, 64)).unwrap();
        let (p, vol) = (&model.params, &model.vol);
        assert!(GridSpec { n_w: 8, ..g }.validate(p, vol).is_err());
        assert!(GridSpec { n_t: 4, ..g }.validate(p, vol).is_err());
        assert!(GridSpec { theta: 1.5, ..g }.validate(p, vol).is_err());
        assert!(GridSpec { n_slices: 7, ..g }.validate(p, vol).is_err());
        assert!(GridSpec { v_min: 0.02, ..g }.validate(p, vol).is_err());
        match (GridSpec { n_t: 8, n_slices: 8, ..g }).validate(p, vol) {
            Err(Error::Stability { admissible_dt, dt, .. }) => assert!(admissible_dt < dt),
            other => panic!("expected CFL error, got {other:?}"),
        }
        match (GridSpec { theta: 0.0, n_v: 512, ..g }).validate(p, vol) {
            Err(Error::Stability { reason, .. }) => assert!(reason.contains("theta")),
            other => panic!("expected diffusion stability error, got {other:?}"),
        }
    }

    fn small_surface(vol: VolatilityFn) -> ValueSurface {
        let model = Model::desk_profile().with_vol(vol);
        let g = GridSpec::around(&model, &GridResolution::new(256, 32, 256)).unwrap();
        solve(&model.params, &model.vol, &g).unwrap()
    }

    #[test]
    fn terminal_slice_is_payoff_and_bounds_hold() {
        let s = small_surface(VolatilityFn::default_smile());
        let last = s.times.len() - 1;
        for i in 0..s.n_w_nodes() {
            for j in 0..s.n_v_nodes() {
                assert_eq!(s.node(last, i, j), s.payoff_at(i, j));
            }
        }
        for slice in &s.values {
            for i in 0..s.n_w_nodes() {
                for j in 0..s.n_v_nodes() {
                    let v = slice[s.index(i, j)];
                    assert!(v >= s.payoff_at(i, j) - 1e-10 * 100.0);
                    assert!(v <= 100.0 * (1.0 + 1e-10));
                }
            }
        }
        assert!(s.psor_residual <= 1e-9 * 100.0);
    }

    #[test]
    fn worthless_far_out_of_the_money() {
        let s = small_surface(VolatilityFn::default_smile());
        let top = s.n_w_nodes() - 1;
        for j in 0..s.n_v_nodes() {
            if s.x_at(top - 1, j) > 400.0 {
                assert!(s.node(0, top - 1, j) <= 1.0);
            }
        }
    }

    #[test]
    fn value_at_nodes_and_midpoints() {
        let s = small_surface(VolatilityFn::default_smile());
        let (i, j) = (100, 10);
        let (x, z) = (s.x_at(i, j), s.grid.v_node(j).exp());
        assert_abs_diff_eq!(s.value_at(0.0, x, z).unwrap(), s.node(0, i, j), epsilon = 1e-9);
        assert_abs_diff_eq!(s.value_at(1.0, x, z).unwrap(), s.payoff_at(i, j), epsilon = 1e-12);
        assert_abs_diff_eq!(s.value_at(1.0, 80.0, 1.0).unwrap(), 20.0, epsilon = 0.5 * s.grid.dw() * s.grid.dw() * 80.0);
        // midpoint in w on a slice: bilinear identity
        let w_mid = s.grid.w_node(i) + 0.5 * s.grid.dw();
        let v = s.grid.v_node(j);
        let mid = s.value_at(0.0, (w_mid + v).exp(), v.exp()).unwrap();
        assert_abs_diff_eq!(mid, 0.5 * (s.node(0, i, j) + s.node(0, i + 1, j)), epsilon = 1e-9);
        assert!(matches!(s.value_at(0.0, 100.0, 1e3), Err(Error::Extrapolation(_))));
        assert!(matches!(s.value_at(1.5, 100.0, 1.0), Err(Error::Extrapolation(_))));
    }

    #[test]
    fn psor_cap_reports_residual() {
        let model = Model::desk_profile();
        let mut g = GridSpec::around(&model, &GridResolution::new(64, 32, 64)).unwrap();
        g.psor.max_iter_factor = 1;
        g.psor.omega = 1.99;
        g.psor.tol_rel = 1e-15;
        assert!(matches!(solve(&model.params, &model.vol, &g), Err(Error::Psor { .. })));
    }
}
