use hrpricer::baseline::{crr_american_put, BinomialConfig};
use hrpricer::lsmc::{price_american_put, LsmcConfig};
use hrpricer::model::{Model, VolatilityFn};
use hrpricer::pde::{solve, GridResolution, GridSpec};
use hrpricer::sim::{simulate, SimConfig};

#[test]
fn pde_and_lsmc_agree_on_a_state_grid() {
    let model = Model::desk_profile();
    let p = &model.params;
    let grid = GridSpec::around(&model, &GridResolution::desk()).unwrap();
    let surface = solve(p, &model.vol, &grid).unwrap();
    let cfg = LsmcConfig {
        n_paths: 40_000,
        ..LsmcConfig::default()
    };
    for x0 in [90.0, 100.0, 110.0] {
        for z0 in [0.8, 1.0, 1.2] {
            let pde = surface.value_at(0.0, x0, z0).unwrap();
            let est = price_american_put(p, &model.vol, x0, z0, &cfg).unwrap();
            let tol = (3.0 * est.std_error).max(0.01 * p.strike);
            assert!((pde - est.price).abs() <= tol, "x0 {x0} z0 {z0}: pde {pde} lsmc {} se {}", est.price, est.std_error);
        }
    }
}

#[test]
fn constant_volatility_pde_matches_the_lattice_off_center() {
    let model = Model::desk_profile().with_vol(VolatilityFn::constant(0.3).unwrap());
    let p = &model.params;
    let grid = GridSpec::around(&model, &GridResolution::desk()).unwrap();
    let surface = solve(p, &model.vol, &grid).unwrap();
    for x0 in [85.0, 100.0, 120.0] {
        let crr = crr_american_put(0.3, p, x0, &BinomialConfig::default()).unwrap();
        for z0 in [0.8, 1.0, 1.25] {
            let v = surface.value_at(0.0, x0, z0).unwrap();
            assert!((v - crr).abs() <= 0.005 * p.strike, "x0 {x0} z0 {z0}: {v} vs {crr}");
        }
    }
}

#[test]
fn discounted_asset_is_a_martingale_under_constant_volatility() {
    let model = Model::desk_profile();
    let p = &model.params;
    let vol = VolatilityFn::constant(0.2).unwrap();
    let ps = simulate(p, &vol, 100.0, 1.0, &SimConfig::new(100_000, 50, 1)).unwrap();
    let (mean, se) = ps.discounted_terminal_mean(p.r);
    assert!((mean - 100.0).abs() <= 3.0 * se, "mean {mean} se {se}");
}

#[test]
fn smile_price_lies_between_the_constant_volatility_prices() {
    let model = Model::desk_profile();
    let p = &model.params;
    let cfg = BinomialConfig::default();
    let est = price_american_put(p, &model.vol, 95.0, 1.1, &LsmcConfig { n_paths: 20_000, ..LsmcConfig::default() }).unwrap();
    let lo = crr_american_put(model.vol.sigma_lo(), p, 95.0, &cfg).unwrap();
    let hi = crr_american_put(model.vol.sigma_hi(), p, 95.0, &cfg).unwrap();
    let tol = 3.0 * est.std_error;
    assert!(est.price >= lo - tol && est.price <= hi + tol, "{lo} <= {} <= {hi}", est.price);
}
