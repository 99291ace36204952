//! Constant-volatility American put baselines on a Cox-Ross-Rubinstein tree.
//!
//! These prices and exercise boundaries bracket the ratio-dependent model:
//! with `sigma_lo <= sigma(z) <= sigma_hi` the American value lies between
//! the constant-volatility values at `sigma_lo` and `sigma_hi`, and its
//! exercise boundary between theirs.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::model::ModelParams;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinomialConfig {
    pub n_steps: usize,
}

impl Default for BinomialConfig {
    fn default() -> Self {
        Self { n_steps: 5000 }
    }
}

/// Exercise boundary of the constant-volatility put on a uniform time grid.
#[derive(Clone, Debug, PartialEq)]
pub struct ConstantVolBoundary {
    pub times: Vec<f64>,
    pub b: Vec<f64>,
}

impl ConstantVolBoundary {
    /// Linear interpolation in time, clamped to `[0, T]`.
    pub fn at(&self, t: f64) -> f64 {
        let n = self.times.len() - 1;
        let t_max = self.times[n];
        let s = (t / t_max).clamp(0.0, 1.0) * n as f64;
        let i = (s.floor() as usize).min(n - 1);
        let w = s - i as f64;
        (1.0 - w) * self.b[i] + w * self.b[i + 1]
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "b"])?;
        for (t, b) in self.times.iter().zip(&self.b) {
            w.write_record(&[format!("{t:.16e}"), format!("{b:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Lattice {
    up: f64,
    p_up: f64,
    disc: f64,
}

fn lattice(sigma: f64, r: f64, dt: f64) -> Result<Lattice> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Domain(format!("sigma must be positive, got {sigma}")));
    }
    let up = (sigma * dt.sqrt()).exp();
    let down = 1.0 / up;
    if up <= down {
        return Err(Error::Config(format!(
            "binomial tree degenerates (u = {up} <= d = {down}); sigma * sqrt(dt) underflows"
        )));
    }
    let p_up = ((r * dt).exp() - down) / (up - down);
    if !(p_up > 0.0 && p_up < 1.0) {
        return Err(Error::Config(format!(
            "risk-neutral probability {p_up} outside (0, 1); increase the number of tree steps"
        )));
    }
    Ok(Lattice {
        up,
        p_up,
        disc: (-r * dt).exp(),
    })
}

/// American put under constant volatility by CRR backward induction.
pub fn crr_american_put(sigma: f64, params: &ModelParams, x0: f64, cfg: &BinomialConfig) -> Result<f64> {
    if !(x0.is_finite() && x0 > 0.0) {
        return Err(Error::Domain(format!("x0 must be positive, got {x0}")));
    }
    if cfg.n_steps == 0 {
        return Err(Error::Config("binomial tree needs at least one step".into()));
    }
    let n = cfg.n_steps;
    let k = params.strike;
    let lat = lattice(sigma, params.r, params.maturity / n as f64)?;
    let (pu, pd) = (lat.disc * lat.p_up, lat.disc * (1.0 - lat.p_up));
    let u2 = lat.up * lat.up;

    let mut values: Vec<f64> = {
        let mut s = x0 * lat.up.powi(-(n as i32));
        (0..=n)
            .map(|_| {
                let v = (k - s).max(0.0);
                s *= u2;
                v
            })
            .collect()
    };
    for level in (0..n).rev() {
        let mut s = x0 * lat.up.powi(-(level as i32));
        for j in 0..=level {
            let cont = pd * values[j] + pu * values[j + 1];
            values[j] = cont.max(k - s);
            s *= u2;
        }
    }
    Ok(values[0])
}

/// Black-Scholes European put with `t_remaining` years to expiry.
pub fn european_put_closed_form(sigma: f64, params: &ModelParams, x0: f64, t_remaining: f64) -> f64 {
    let k = params.strike;
    if t_remaining <= 0.0 || sigma <= 0.0 {
        return (k * (-params.r * t_remaining.max(0.0)).exp() - x0).max(0.0);
    }
    let std_norm = Normal::new(0.0, 1.0).expect("standard normal");
    let vol_t = sigma * t_remaining.sqrt();
    let d1 = ((x0 / k).ln() + (params.r + 0.5 * sigma * sigma) * t_remaining) / vol_t;
    let d2 = d1 - vol_t;
    k * (-params.r * t_remaining).exp() * std_norm.cdf(-d2) - x0 * std_norm.cdf(-d1)
}

/// Exercise boundary of the constant-volatility put, one value per tree
/// level at times `i * T / n`.
///
/// The boundary does not depend on the spot, so the tree is rooted at `K`
/// and started early enough that every level spans the boundary. At each
/// level the boundary is placed where `continuation - intrinsic` crosses
/// zero, interpolating linearly between the highest exercised node and the
/// node above it.
pub fn crr_boundary(sigma: f64, params: &ModelParams, cfg: &BinomialConfig) -> Result<ConstantVolBoundary> {
    if cfg.n_steps == 0 {
        return Err(Error::Config("binomial tree needs at least one step".into()));
    }
    let n = cfg.n_steps;
    let k = params.strike;
    let dt = params.maturity / n as f64;
    let lat = lattice(sigma, params.r, dt)?;
    let (pu, pd) = (lat.disc * lat.p_up, lat.disc * (1.0 - lat.p_up));
    let u2 = lat.up * lat.up;
    // levels before t = 0 so that level `lead` spans K e^{-3} .. K e^{3}
    let lead = (3.0 / (sigma * dt.sqrt())).ceil() as usize;
    let total = n + lead;

    let node = |level: usize, j: usize| k * lat.up.powi(2 * j as i32 - level as i32);
    let mut values: Vec<f64> = (0..=total).map(|j| (k - node(total, j)).max(0.0)).collect();
    let mut b = vec![k; n + 1];

    for level in (lead..total).rev() {
        let mut s = node(level, 0);
        let mut highest: Option<(usize, f64, f64)> = None;
        for j in 0..=level {
            let cont = pd * values[j] + pu * values[j + 1];
            let intrinsic = k - s;
            let gap = cont - intrinsic;
            if intrinsic > 0.0 && gap <= 0.0 {
                highest = Some((j, s, gap));
            }
            values[j] = cont.max(intrinsic);
            s *= u2;
        }
        let i = level - lead;
        match highest {
            Some((j, s_ex, gap_ex)) if j < level => {
                let s_up = s_ex * u2;
                let intrinsic_up = k - s_up;
                // values[j + 1] already holds max(cont, intrinsic) at the node above
                let gap_up = values[j + 1] - intrinsic_up;
                let w = if gap_up > gap_ex { -gap_ex / (gap_up - gap_ex) } else { 0.0 };
                b[i] = (s_ex + w * (s_up - s_ex)).min(k);
            }
            Some(_) => b[i] = k,
            None => {
                return Err(Error::Config(format!(
                    "exercise boundary below tree coverage at level {i}"
                )))
            }
        }
    }
    // lattice effects can leave sub-node wiggles; the true boundary is non-decreasing
    for i in (0..n).rev() {
        b[i] = b[i].min(b[i + 1]);
    }
    let times = (0..=n).map(|i| if i == n { params.maturity } else { i as f64 * dt }).collect();
    Ok(ConstantVolBoundary { times, b })
}
