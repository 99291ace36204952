//! Model parameters, the ratio-dependent volatility function and closed-form
//! drift diagnostics for the ratio process `Z = X / Y`.
//!
//! The asset follows `dX = r X dt + sigma(Z) X dB` where `Y` is the
//! exponentially weighted average of past prices, `dY = lambda (X - Y) dt`.
//! The ratio then satisfies
//!
//! ```text
//! dZ = (r + lambda - lambda Z) Z dt + sigma(Z) Z dB
//! d ln Z = (r + lambda - lambda Z - sigma(Z)^2 / 2) dt + sigma(Z) dB
//! ```
//!
//! and, because `sigma` is bounded between `sigma_lo` and `sigma_hi`, the
//! drift of `ln Z` is positive below `1 + r/lambda - sigma_hi^2/(2 lambda)`
//! and negative above `1 + r/lambda - sigma_lo^2/(2 lambda)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn require_positive(name: &str, value: f64) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "{name} must be positive and finite, got {value}"
        )))
    }
}

/// Rates and horizon shared by every pricer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ModelParams {
    pub r: f64,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub strike: f64,
    #[serde(rename = "T")]
    pub maturity: f64,
}

impl ModelParams {
    pub fn new(r: f64, lambda: f64, strike: f64, maturity: f64) -> Result<Self> {
        require_positive("r", r)?;
        require_positive("lambda", lambda)?;
        require_positive("K", strike)?;
        require_positive("T", maturity)?;
        Ok(Self {
            r,
            lambda,
            strike,
            maturity,
        })
    }

    /// Put payoff `(K - x)^+`.
    #[inline]
    pub fn payoff(&self, x: f64) -> f64 {
        (self.strike - x).max(0.0)
    }

    /// Drift of `ln Z` at `Z = z`:
    /// `-lambda (z - (1 + r/lambda - sigma(z)^2 / (2 lambda)))`.
    pub fn drift_ln_z(&self, vol: &VolatilityFn, z: f64) -> Result<f64> {
        if !(z.is_finite() && z > 0.0) {
            return Err(Error::Domain(format!("z must be positive and finite, got {z}")));
        }
        let s = vol.eval(z)?;
        Ok(self.r + self.lambda - self.lambda * z - 0.5 * s * s)
    }

    /// Interval of `Z` values toward which `ln Z` reverts. Outside of it the
    /// drift of `ln Z` points back toward the interval whatever `sigma(z)` is.
    pub fn reversion_zone(&self, vol: &VolatilityFn) -> (f64, f64) {
        let centre = 1.0 + self.r / self.lambda;
        let lo = centre - vol.sigma_hi() * vol.sigma_hi() / (2.0 * self.lambda);
        let hi = centre - vol.sigma_lo() * vol.sigma_lo() / (2.0 * self.lambda);
        (lo, hi)
    }

    /// Fixed point of the noise-free ratio dynamics `z' = (r + lambda - lambda z) z`.
    pub fn noise_free_fixed_point(&self) -> f64 {
        1.0 + self.r / self.lambda
    }

    /// Closed-form solution of `z' = (r + lambda - lambda z) z` at time `t`.
    pub fn noise_free_z(&self, z0: f64, t: f64) -> f64 {
        let z_inf = self.noise_free_fixed_point();
        z_inf / (1.0 + (z_inf / z0 - 1.0) * (-(self.r + self.lambda) * t).exp())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum VolKind {
    Constant { sigma: f64 },
    /// `sigma(z) = min(eta * sqrt(1 + eps z^2), cap)`.
    HobsonRogersSmile { eta: f64, eps: f64, cap: f64 },
}

/// Volatility as a function of the ratio `z`, carrying certified bounds
/// `sigma_lo = inf sigma` and `sigma_hi = sup sigma` over `z > 0`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VolatilityFn {
    kind: VolKind,
    sigma_lo: f64,
    sigma_hi: f64,
}

impl VolatilityFn {
    pub fn constant(sigma: f64) -> Result<Self> {
        require_positive("sigma", sigma)?;
        Ok(Self {
            kind: VolKind::Constant { sigma },
            sigma_lo: sigma,
            sigma_hi: sigma,
        })
    }

    pub fn hobson_rogers(eta: f64, eps: f64, cap: f64) -> Result<Self> {
        require_positive("eta", eta)?;
        if !(eps.is_finite() && eps >= 0.0) {
            return Err(Error::Config(format!(
                "eps must be non-negative and finite, got {eps}"
            )));
        }
        if !(cap.is_finite() && cap >= eta) {
            return Err(Error::Config(format!(
                "cap must be finite and at least eta = {eta}, got {cap}"
            )));
        }
        let sigma_hi = if eps > 0.0 { cap } else { eta };
        Ok(Self {
            kind: VolKind::HobsonRogersSmile { eta, eps, cap },
            sigma_lo: eta,
            sigma_hi,
        })
    }

    /// Zero volatility. Violates the bounded-below volatility assumption and
    /// is only accepted by the pricers in test mode; it yields deterministic
    /// paths with exactly known prices.
    pub fn noise_free() -> Self {
        Self {
            kind: VolKind::Constant { sigma: 0.0 },
            sigma_lo: 0.0,
            sigma_hi: 0.0,
        }
    }

    /// Defaults used throughout the desk-scale profile: `eta = 0.2`,
    /// `eps = 1`, `cap = 0.4`.
    pub fn default_smile() -> Self {
        Self::hobson_rogers(0.2, 1.0, 0.4).expect("default smile is valid")
    }

    pub fn kind(&self) -> VolKind {
        self.kind
    }

    pub fn sigma_lo(&self) -> f64 {
        self.sigma_lo
    }

    pub fn sigma_hi(&self) -> f64 {
        self.sigma_hi
    }

    pub fn is_constant(&self) -> bool {
        self.sigma_lo == self.sigma_hi
    }

    pub fn is_degenerate(&self) -> bool {
        self.sigma_lo <= 0.0
    }

    /// Evaluate `sigma(z)`. `z = 0` is accepted as the closure of the domain.
    pub fn eval(&self, z: f64) -> Result<f64> {
        if !(z.is_finite() && z >= 0.0) {
            return Err(Error::Domain(format!(
                "z must be non-negative and finite, got {z}"
            )));
        }
        Ok(self.eval_unchecked(z))
    }

    /// `sigma(z)` without argument validation, for hot loops whose state is
    /// positive by construction.
    #[inline]
    pub fn eval_unchecked(&self, z: f64) -> f64 {
        match self.kind {
            VolKind::Constant { sigma } => sigma,
            VolKind::HobsonRogersSmile { eta, eps, cap } => {
                (eta * (1.0 + eps * z * z).sqrt()).min(cap)
            }
        }
    }
}

/// Current state `(X(t), Z(t))`; the memory average is `y = x / z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MarketState {
    pub x: f64,
    pub z: f64,
}

impl MarketState {
    pub fn new(x: f64, z: f64) -> Result<Self> {
        require_positive("x0", x)?;
        require_positive("z0", z)?;
        Ok(Self { x, z })
    }

    pub fn y(&self) -> f64 {
        self.x / self.z
    }
}

/// JSON form of a volatility function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolSpec {
    Constant { sigma: f64 },
    HobsonRogers { eta: f64, eps: f64, cap: f64 },
}

impl VolSpec {
    pub fn build(&self) -> Result<VolatilityFn> {
        match *self {
            VolSpec::Constant { sigma } => VolatilityFn::constant(sigma),
            VolSpec::HobsonRogers { eta, eps, cap } => VolatilityFn::hobson_rogers(eta, eps, cap),
        }
    }
}

impl From<&VolatilityFn> for VolSpec {
    fn from(vol: &VolatilityFn) -> Self {
        match vol.kind {
            VolKind::Constant { sigma } => VolSpec::Constant { sigma },
            VolKind::HobsonRogersSmile { eta, eps, cap } => VolSpec::HobsonRogers { eta, eps, cap },
        }
    }
}

/// The model document: `{"r","lambda","K","T","vol":{...},"x0","z0"}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub r: f64,
    pub lambda: f64,
    #[serde(rename = "K")]
    pub strike: f64,
    #[serde(rename = "T")]
    pub maturity: f64,
    pub vol: VolSpec,
    pub x0: f64,
    pub z0: f64,
}

/// Validated model: parameters, volatility and initial state.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub vol: VolatilityFn,
    pub state: MarketState,
}

impl ModelSpec {
    pub fn build(&self) -> Result<Model> {
        Ok(Model {
            params: ModelParams::new(self.r, self.lambda, self.strike, self.maturity)?,
            vol: self.vol.build()?,
            state: MarketState::new(self.x0, self.z0)?,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

impl Model {
    /// `K=100, r=0.05, lambda=1, T=1, x0=100, z0=1` with the default smile.
    pub fn desk_profile() -> Self {
        Self {
            params: ModelParams::new(0.05, 1.0, 100.0, 1.0).expect("valid"),
            vol: VolatilityFn::default_smile(),
            state: MarketState::new(100.0, 1.0).expect("valid"),
        }
    }

    pub fn with_vol(mut self, vol: VolatilityFn) -> Self {
        self.vol = vol;
        self
    }

    pub fn to_spec(&self) -> ModelSpec {
        ModelSpec {
            r: self.params.r,
            lambda: self.params.lambda,
            strike: self.params.strike,
            maturity: self.params.maturity,
            vol: VolSpec::from(&self.vol),
            x0: self.state.x,
            z0: self.state.z,
        }
    }
}
