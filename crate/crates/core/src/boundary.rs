//! Free boundary `b(t, z)` of a solved surface and the striking curves
//! `t -> b(t, z(t))` along trajectories of `Z`.

use std::io::Write;

use serde::Serialize;

use crate::baseline::ConstantVolBoundary;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::pde::ValueSurface;

/// Default stopping tolerance as a fraction of `K`.
pub const DEFAULT_TOL_REL: f64 = 1e-6;
/// Default monotonicity noise floor as a fraction of `K`.
pub const DEFAULT_NOISE_FLOOR_REL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ExerciseBoundary {
    pub times: Vec<f64>,
    /// `z` at each grid column.
    pub z: Vec<f64>,
    /// `b[slice][column]`.
    pub b: Vec<Vec<f64>>,
    /// Width of the `x` cell holding `b`, same layout as `b`.
    pub cell: Vec<Vec<f64>>,
    pub tolerance: f64,
    pub strike: f64,
}

/// Place the boundary between the last stopped node `x_s` and the first
/// continued node `x_c`, using the next continued node `x_c2` and the
/// quadratic contact `V - payoff ~ c (x - b)^2` on the continuation side.
fn locate(x_s: f64, x_c: f64, g_c: f64, next: Option<(f64, f64)>) -> f64 {
    if let Some((x_c2, g_c2)) = next {
        let (r1, r2) = (g_c.max(0.0).sqrt(), g_c2.max(0.0).sqrt());
        if r2 > r1 {
            let b = x_c - r1 * (x_c2 - x_c) / (r2 - r1);
            return b.clamp(x_s, x_c);
        }
    }
    0.5 * (x_s + x_c)
}

/// Boundary on one `(slice, column)`.
fn column_boundary(surface: &ValueSurface, slice: usize, j: usize, tol: f64) -> Result<(f64, f64)> {
    let k = surface.strike;
    let nw = surface.n_w_nodes();
    let gap = |i: usize| surface.node(slice, i, j) - surface.payoff_at(i, j);
    // highest node strictly below the strike
    let Some(top) = (0..nw).rev().find(|&i| surface.x_at(i, j) < k) else {
        return Err(Error::BoundaryNotBracketed { slice, column: j });
    };
    let Some(stop) = (0..=top).rev().find(|&i| gap(i) <= tol) else {
        return Err(Error::BoundaryNotBracketed { slice, column: j });
    };
    if stop == 0 {
        // only the Dirichlet edge is stopped: the grid does not reach the boundary
        return Err(Error::BoundaryNotBracketed { slice, column: j });
    }
    let x_s = surface.x_at(stop, j);
    if stop == top {
        // stopped all the way up to the strike
        let x_c = surface.x_at(top + 1, j).min(k).max(x_s);
        return Ok((x_c, x_c - x_s));
    }
    let x_c = surface.x_at(stop + 1, j);
    let next = (stop + 2 < nw).then(|| (surface.x_at(stop + 2, j), gap(stop + 2)));
    let b = locate(x_s, x_c, gap(stop + 1), next).min(k);
    Ok((b, x_c - x_s))
}

impl ExerciseBoundary {
    /// Scan each `(t, z)` column down from `K` for the first node on the
    /// obstacle and place `b` inside the bracketing cell.
    pub fn extract(surface: &ValueSurface, tolerance: f64) -> Result<Self> {
        if !(tolerance.is_finite() && tolerance > 0.0) {
            return Err(Error::Domain(format!("tolerance must be positive, got {tolerance}")));
        }
        let nv = surface.n_v_nodes();
        let last = surface.times.len() - 1;
        let mut b = Vec::with_capacity(last + 1);
        let mut cell = Vec::with_capacity(last + 1);
        for s in 0..=last {
            let (mut bs, mut cs) = (Vec::with_capacity(nv), Vec::with_capacity(nv));
            for j in 0..nv {
                let (bj, cj) = column_boundary(surface, s, j, tolerance)?;
                bs.push(bj);
                cs.push(cj);
            }
            b.push(bs);
            cell.push(cs);
        }
        Ok(Self {
            times: surface.times.clone(),
            z: (0..nv).map(|j| surface.grid.v_node(j).exp()).collect(),
            b,
            cell,
            tolerance,
            strike: surface.strike,
        })
    }

    pub fn extract_default(surface: &ValueSurface) -> Result<Self> {
        Self::extract(surface, DEFAULT_TOL_REL * surface.strike)
    }

    /// `b(t_slice, z)`, linear in `ln z` between columns.
    pub fn at_slice(&self, slice: usize, z: f64) -> Result<f64> {
        let (lo, hi) = (self.z[0], *self.z.last().expect("non-empty"));
        let eps = 1e-12;
        if !(z.is_finite() && z > 0.0) || z < lo * (1.0 - eps) || z > hi * (1.0 + eps) {
            return Err(Error::Extrapolation(format!("z = {z} outside [{lo}, {hi}]")));
        }
        let v = z.ln();
        let (v0, dv) = (lo.ln(), (hi.ln() - lo.ln()) / (self.z.len() - 1) as f64);
        let s = ((v - v0) / dv).clamp(0.0, (self.z.len() - 1) as f64);
        let j = (s.floor() as usize).min(self.z.len() - 2);
        let f = s - j as f64;
        Ok((1.0 - f) * self.b[slice][j] + f * self.b[slice][j + 1])
    }

    /// `b(t, z)` with linear blending between stored slices.
    pub fn at(&self, t: f64, z: f64) -> Result<f64> {
        let n = self.times.len() - 1;
        let t_max = self.times[n];
        if !(0.0..=t_max * (1.0 + 1e-12)).contains(&t) {
            return Err(Error::Extrapolation(format!("t = {t} outside [0, {t_max}]")));
        }
        let s = (t / t_max * n as f64).clamp(0.0, n as f64);
        let k = (s.round() as usize).min(n);
        if (s - k as f64).abs() < 1e-9 {
            return self.at_slice(k, z);
        }
        let k = (s.floor() as usize).min(n - 1);
        let f = s - k as f64;
        Ok((1.0 - f) * self.at_slice(k, z)? + f * self.at_slice(k + 1, z)?)
    }

    /// Largest `|b(t, z_{j+1}) - b(t, z_j)| / (z_{j+1} - z_j)` over slices
    /// before expiry.
    pub fn continuity_constant(&self) -> f64 {
        let last = self.times.len() - 1;
        self.b[..last]
            .iter()
            .flat_map(|row| {
                row.windows(2)
                    .zip(self.z.windows(2))
                    .map(|(b, z)| (b[1] - b[0]).abs() / (z[1] - z[0]))
            })
            .fold(0.0, f64::max)
    }

    /// Worst violation of `lower(t) - tol <= b(t, z) <= upper(t) + tol`, with
    /// `tol` widened by the local cell. Zero when the envelope holds.
    pub fn envelope_excess(&self, lower: &ConstantVolBoundary, upper: &ConstantVolBoundary, tol: f64) -> f64 {
        let mut worst = 0.0f64;
        for (s, t) in self.times.iter().enumerate() {
            let (lo, hi) = (lower.at(*t), upper.at(*t));
            for (j, b) in self.b[s].iter().enumerate() {
                let slack = tol + self.cell[s][j];
                worst = worst.max(lo - slack - b).max(b - hi - slack);
            }
        }
        worst
    }

    /// Count of nodes below the strike that break the stopping/continuation
    /// partition by more than one `x` cell.
    pub fn partition_violations(&self, surface: &ValueSurface) -> usize {
        let mut bad = 0;
        for s in 0..self.times.len() {
            for j in 0..surface.n_v_nodes() {
                let (b, cell) = (self.b[s][j], self.cell[s][j]);
                for i in 0..surface.n_w_nodes() {
                    let x = surface.x_at(i, j);
                    if x >= self.strike {
                        break;
                    }
                    let stopped = surface.node(s, i, j) - surface.payoff_at(i, j) <= self.tolerance;
                    if (stopped && x > b + cell) || (!stopped && x < b - cell) {
                        bad += 1;
                    }
                }
            }
        }
        bad
    }

    /// Pairs `(z, z')` at slice `s` with `b(z) < b(z')`: every grid `x`
    /// strictly between the two boundaries must satisfy
    /// `V(t, x, z) > V(t, x, z') - tol`. Returns the number of failures.
    pub fn anti_comonotone_violations(&self, surface: &ValueSurface, slice: usize, tol: f64) -> Result<usize> {
        let t = self.times[slice];
        let nv = self.z.len();
        let mut bad = 0;
        for a in 0..nv {
            for c in 0..nv {
                let (lo, hi) = (self.b[slice][a], self.b[slice][c]);
                if lo >= hi {
                    continue;
                }
                for i in 0..surface.n_w_nodes() {
                    let x = surface.x_at(i, a);
                    if x > lo && x < hi {
                        let va = surface.node(slice, i, a);
                        let vc = surface.value_at(t, x, self.z[c])?;
                        if va <= vc - tol {
                            bad += 1;
                        }
                    }
                }
            }
        }
        Ok(bad)
    }

    /// CSV with columns `t, z, b`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "z", "b"])?;
        for (s, t) in self.times.iter().enumerate() {
            for (j, z) in self.z.iter().enumerate() {
                w.write_record(&[format!("{t:.16e}"), format!("{z:.16e}"), format!("{:.16e}", self.b[s][j])])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Which trajectory a striking curve follows.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Trajectory {
    Simulated { seed: u64, path_id: usize },
    NoiseFree,
    Given,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StrikingCurve {
    pub trajectory: Trajectory,
    pub times: Vec<f64>,
    pub z: Vec<f64>,
    pub b: Vec<f64>,
}

pub fn striking_curve_along(
    boundary: &ExerciseBoundary,
    times: &[f64],
    z_path: &[f64],
    trajectory: Trajectory,
) -> Result<StrikingCurve> {
    if times.len() != z_path.len() || times.is_empty() {
        return Err(Error::Domain(format!(
            "{} times for {} z values",
            times.len(),
            z_path.len()
        )));
    }
    let b = times
        .iter()
        .zip(z_path)
        .map(|(t, z)| boundary.at(*t, *z))
        .collect::<Result<Vec<_>>>()?;
    Ok(StrikingCurve {
        trajectory,
        times: times.to_vec(),
        z: z_path.to_vec(),
        b,
    })
}

/// Striking curve along the deterministic flow of `Z` with the noise removed.
pub fn noise_free_striking_curve(
    boundary: &ExerciseBoundary,
    params: &ModelParams,
    z0: f64,
) -> Result<StrikingCurve> {
    let z: Vec<f64> = boundary.times.iter().map(|t| params.noise_free_z(z0, *t)).collect();
    striking_curve_along(boundary, &boundary.times, &z, Trajectory::NoiseFree)
}

impl StrikingCurve {
    /// CSV with columns `t, z_t, b`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["t", "z_t", "b"])?;
        for ((t, z), b) in self.times.iter().zip(&self.z).zip(&self.b) {
            w.write_record(&[format!("{t:.16e}"), format!("{z:.16e}"), format!("{b:.16e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MonotonicityReport {
    pub is_monotone_increasing: bool,
    /// Largest single-step decrease, zero if none.
    pub max_decrease: f64,
    /// Index of the point ending the largest decrease.
    pub index: Option<usize>,
    pub time: Option<f64>,
    pub noise_floor: f64,
}

pub fn monotonicity_report(times: &[f64], values: &[f64], noise_floor: f64) -> Result<MonotonicityReport> {
    if values.is_empty() || times.len() != values.len() {
        return Err(Error::Domain("monotonicity report needs a non-empty curve".into()));
    }
    let mut worst: Option<(usize, f64)> = None;
    for k in 1..values.len() {
        let drop = values[k - 1] - values[k];
        if drop > 0.0 && worst.is_none_or(|(_, d)| drop > d) {
            worst = Some((k, drop));
        }
    }
    let max_decrease = worst.map_or(0.0, |(_, d)| d);
    Ok(MonotonicityReport {
        is_monotone_increasing: max_decrease <= noise_floor,
        max_decrease,
        index: worst.map(|(k, _)| k),
        time: worst.map(|(k, _)| times[k]),
        noise_floor,
    })
}

impl StrikingCurve {
    pub fn monotonicity(&self, noise_floor: f64) -> MonotonicityReport {
        monotonicity_report(&self.times, &self.b, noise_floor).expect("curves are non-empty")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baseline::{crr_boundary, BinomialConfig};
    use crate::model::{Model, VolatilityFn};
    use crate::pde::{solve, GridResolution, GridSpec};
    use approx::assert_abs_diff_eq;

    fn surface(vol: VolatilityFn) -> ValueSurface {
        let model = Model::desk_profile().with_vol(vol);
        let g = GridSpec::around(&model, &GridResolution::auto(256, 32)).unwrap();
        solve(&model.params, &model.vol, &g).unwrap()
    }

    #[test]
    fn locate_recovers_quadratic_contact() {
        let gap = |x: f64| if x > 80.0 { 0.3 * (x - 80.0).powi(2) } else { 0.0 };
        let b = locate(79.5, 80.4, gap(80.4), Some((81.3, gap(81.3))));
        assert_abs_diff_eq!(b, 80.0, epsilon = 1e-12);
        assert_eq!(locate(79.0, 81.0, 0.1, None), 80.0);
    }

    #[test]
    fn monotonicity_fixtures() {
        let t: Vec<f64> = (0..6).map(|k| k as f64).collect();
        let rising = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let r = monotonicity_report(&t, &rising, 0.01).unwrap();
        assert!(r.is_monotone_increasing);
        assert_eq!(r.max_decrease, 0.0);
        assert_eq!(r.index, None);

        let dip = [1.0, 2.0, 3.0, 2.5, 4.0, 5.0];
        let r = monotonicity_report(&t, &dip, 0.01).unwrap();
        assert!(!r.is_monotone_increasing);
        assert_abs_diff_eq!(r.max_decrease, 0.5, epsilon = 1e-15);
        assert_eq!(r.index, Some(3));
        assert_eq!(r.time, Some(3.0));

        assert!(monotonicity_report(&[], &[], 0.01).is_err());
        let flat = monotonicity_report(&t[..2], &[1.0, 0.995], 0.01).unwrap();
        assert!(flat.is_monotone_increasing);
    }

    #[test]
    fn terminal_slice_is_strike_and_interior_below() {
        let s = surface(VolatilityFn::default_smile());
        let eb = ExerciseBoundary::extract_default(&s).unwrap();
        let last = eb.times.len() - 1;
        assert!(eb.b[last].iter().all(|b| *b == 100.0));
        let one_cell = 100.0 * (s.grid.dw().exp() - 1.0);
        assert!(eb.cell[last].iter().all(|c| *c > 0.0 && *c <= one_cell));
        for row in &eb.b[..last] {
            assert!(row.iter().all(|b| *b > 0.0 && *b < 100.0));
        }
        assert_eq!(eb.partition_violations(&s), 0);
    }

    #[test]
    fn constant_vol_boundary_is_flat_in_z_and_matches_tree() {
        let s = surface(VolatilityFn::constant(0.2).unwrap());
        let eb = ExerciseBoundary::extract_default(&s).unwrap();
        let p = Model::desk_profile().params;
        let tree = crr_boundary(0.2, &p, &BinomialConfig { n_steps: 2000 }).unwrap();
        for s_idx in [0, eb.times.len() / 2] {
            let t = eb.times[s_idx];
            for (j, b) in eb.b[s_idx].iter().enumerate() {
                // upwind smearing widens with |z - 1|; a cell and a half plus 1% of K
                let tol = 1.5 * eb.cell[s_idx][j] + 1.0;
                assert!((b - tree.at(t)).abs() <= tol, "t {t} z {}: {b} vs {}", eb.z[j], tree.at(t));
            }
        }
    }

    #[test]
    fn rejects_nonpositive_tolerance_and_unbracketed_columns() {
        let s = surface(VolatilityFn::default_smile());
        assert!(ExerciseBoundary::extract(&s, 0.0).is_err());
        // a tolerance below zero gap everywhere cannot find a stopped node
        let mut fake = s.clone();
        for slice in fake.values.iter_mut() {
            for v in slice.iter_mut() {
                *v += 1.0;
            }
        }
        assert!(matches!(
            ExerciseBoundary::extract_default(&fake),
            Err(Error::BoundaryNotBracketed { slice: 0, .. })
        ));
    }

    #[test]
    fn striking_curves() {
        let s = surface(VolatilityFn::constant(0.2).unwrap());
        let eb = ExerciseBoundary::extract_default(&s).unwrap();
        let times = eb.times.clone();
        let ones = vec![1.0; times.len()];
        let flat = striking_curve_along(&eb, &times, &ones, Trajectory::Given).unwrap();
        assert_eq!(*flat.b.last().unwrap(), 100.0);
        for (t, b) in flat.times.iter().zip(&flat.b) {
            assert_abs_diff_eq!(*b, eb.at(*t, 1.0).unwrap(), epsilon = 1e-12);
        }
        assert!(flat.monotonicity(0.01).is_monotone_increasing);

        let p = Model::desk_profile().params;
        let nf = noise_free_striking_curve(&eb, &p, 1.0).unwrap();
        assert_eq!(nf.trajectory, Trajectory::NoiseFree);
        assert!(striking_curve_along(&eb, &times, &vec![1e3; times.len()], Trajectory::Given).is_err());
        assert!(striking_curve_along(&eb, &times[..2], &ones, Trajectory::Given).is_err());

        let mut buf = Vec::new();
        flat.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t,z_t,b\n"));
        assert_eq!(text.lines().count(), times.len() + 1);
    }
}
