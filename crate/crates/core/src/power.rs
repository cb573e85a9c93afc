//! Expected per-inference power cost of a network split by a gated
//! compression layer.
//!
//! With compute coefficient `a`, transmission coefficient `b` (`a + b = 1`),
//! positive probability `rho`, prefix depth fraction `mu`, transmitted
//! sparsity `nu` and negative gating rate `gamma`:
//!
//! ```text
//! baseline = a + b
//! gc       = mu*a + [rho + (1-rho)(1-gamma)] * [(1-mu)*a + (1-nu)*b]
//! dE/da    = mu + [rho + (1-rho)(1-gamma)] * (1-mu)
//! dE/db    =      [rho + (1-rho)(1-gamma)] * (1-nu)
//! ```
//!
//! The gate head and mask cost nothing in this model.

use serde::{Deserialize, Serialize};

use crate::error::{check_range, Error, Result};

/// Tolerance on `a + b = 1`.
const SUM_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub a: f64,
    pub b: f64,
}

impl SystemConfig {
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let c = SystemConfig { a, b };
        c.validate()?;
        Ok(c)
    }

    /// `b = 1 - a`.
    pub fn from_compute_share(a: f64) -> Result<Self> {
        check_range("a", a, 0.0, 1.0)?;
        Self::new(a, 1.0 - a)
    }

    pub fn validate(&self) -> Result<()> {
        check_range("a", self.a, 0.0, f64::MAX)?;
        check_range("b", self.b, 0.0, f64::MAX)?;
        if (self.a + self.b - 1.0).abs() > SUM_TOL {
            return Err(Error::OutOfRange {
                name: "a + b",
                value: self.a + self.b,
                reason: "compute and transmission coefficients must sum to 1",
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GcPowerParams {
    pub rho: f64,
    pub mu: f64,
    pub nu: f64,
    pub gamma: f64,
}

impl GcPowerParams {
    pub fn validate(&self) -> Result<()> {
        check_range("rho", self.rho, 0.0, 1.0)?;
        check_range("mu", self.mu, 0.0, 1.0)?;
        check_range("nu", self.nu, 0.0, 1.0)?;
        check_range("gamma", self.gamma, 0.0, 1.0)
    }

    /// Probability that a sample continues past the gate:
    /// `rho + (1 - rho)(1 - gamma)`.
    pub fn survival(&self) -> f64 {
        self.rho + (1.0 - self.rho) * (1.0 - self.gamma)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PowerReport {
    pub a: f64,
    pub b: f64,
    pub baseline_cost: f64,
    pub gc_cost: f64,
    pub reduction_factor: f64,
    pub d_cost_da: f64,
    pub d_cost_db: f64,
}

pub fn baseline_cost(config: &SystemConfig) -> Result<f64> {
    config.validate()?;
    Ok(config.a + config.b)
}

pub fn gc_cost(params: &GcPowerParams, config: &SystemConfig) -> Result<f64> {
    params.validate()?;
    config.validate()?;
    Ok(gc_cost_unchecked(params, config.a, config.b))
}

/// Cost formula without the `a + b = 1` constraint, for use as a function
/// of independent `(a, b)`.
pub fn gc_cost_unchecked(p: &GcPowerParams, a: f64, b: f64) -> f64 {
    p.mu * a + p.survival() * ((1.0 - p.mu) * a + (1.0 - p.nu) * b)
}

/// `(dE/da, dE/db)`.
pub fn gc_cost_partials(params: &GcPowerParams, config: &SystemConfig) -> Result<(f64, f64)> {
    params.validate()?;
    config.validate()?;
    let s = params.survival();
    Ok((params.mu + s * (1.0 - params.mu), s * (1.0 - params.nu)))
}

pub fn report(params: &GcPowerParams, config: &SystemConfig) -> Result<PowerReport> {
    let baseline = baseline_cost(config)?;
    let cost = gc_cost(params, config)?;
    let (da, db) = gc_cost_partials(params, config)?;
    Ok(PowerReport {
        a: config.a,
        b: config.b,
        baseline_cost: baseline,
        gc_cost: cost,
        reduction_factor: baseline / cost,
        d_cost_da: da,
        d_cost_db: db,
    })
}

/// One report per grid value of `a`, with `b = 1 - a`.
pub fn sweep(params: &GcPowerParams, grid: &[f64]) -> Result<Vec<PowerReport>> {
    if grid.is_empty() {
        return Err(Error::Empty("sweep grid"));
    }
    grid.iter()
        .map(|&a| report(params, &SystemConfig::from_compute_share(a)?))
        .collect()
}

/// Compute-share values for the computation-expensive, balanced and
/// IO-expensive regimes.
pub const DEFAULT_REGIMES: [(&str, f64); 3] = [
    ("computation-expensive", 0.9),
    ("balanced", 0.5),
    ("io-expensive", 0.1),
];

/// Reduction-factor band reported for always-on deployments.
pub const REFERENCE_REDUCTION_BAND: (f64, f64) = (158.0, 30_000.0);

pub fn in_reference_band(reduction_factor: f64) -> bool {
    let (lo, hi) = REFERENCE_REDUCTION_BAND;
    reduction_factor >= lo && reduction_factor <= hi
}

/// Parameter sets (on the supplied axes) whose reduction factor lands in
/// `[lo, hi]`, evaluated at every compute share in `a_grid`.
#[derive(Clone, Debug, Default)]
pub struct SearchAxes {
    pub rho: Vec<f64>,
    pub mu: Vec<f64>,
    pub nu: Vec<f64>,
    pub gamma: Vec<f64>,
    pub a: Vec<f64>,
}

pub fn search_reduction_band(
    axes: &SearchAxes,
    lo: f64,
    hi: f64,
) -> Result<Vec<(GcPowerParams, PowerReport)>> {
    let mut hits = Vec::new();
    for &rho in &axes.rho {
        for &mu in &axes.mu {
            for &nu in &axes.nu {
                for &gamma in &axes.gamma {
                    let p = GcPowerParams { rho, mu, nu, gamma };
                    for &a in &axes.a {
                        let r = report(&p, &SystemConfig::from_compute_share(a)?)?;
                        if r.reduction_factor >= lo && r.reduction_factor <= hi {
                            hits.push((p, r));
                        }
                    }
                }
            }
        }
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(rho: f64, mu: f64, nu: f64, gamma: f64) -> GcPowerParams {
        GcPowerParams { rho, mu, nu, gamma }
    }

    #[test]
    fn baseline_is_one() {
        for (a, b) in [(0.5, 0.5), (1.0, 0.0), (0.3, 0.7)] {
            assert_eq!(baseline_cost(&SystemConfig { a, b }).unwrap(), 1.0);
        }
        assert!(baseline_cost(&SystemConfig { a: 0.5, b: 0.6 }).is_err());
        assert!(SystemConfig::new(-0.1, 1.1).is_err());
    }

    #[test]
    fn hand_evaluated_costs() {
        let half = SystemConfig::new(0.5, 0.5).unwrap();
        for a in [0.0, 0.25, 0.9, 1.0] {
            let c = SystemConfig::from_compute_share(a).unwrap();
            assert_eq!(gc_cost(&p(0.37, 1.0, 0.0, 0.0), &c).unwrap(), 1.0);
        }
        assert_eq!(gc_cost(&p(0.0, 0.2, 0.5, 1.0), &half).unwrap(), 0.1);
        // 0.1 + 0.2 * (0.4 + 0.05)
        assert!((gc_cost(&p(0.2, 0.2, 0.9, 1.0), &half).unwrap() - 0.19).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_partials() {
        let half = SystemConfig::new(0.5, 0.5).unwrap();
        let (da, db) = gc_cost_partials(&p(0.2, 0.2, 0.9, 1.0), &half).unwrap();
        assert!((da - 0.36).abs() < 1e-15);
        assert!((db - 0.02).abs() < 1e-15);
        let (_, db) = gc_cost_partials(&p(0.0, 0.2, 0.3, 1.0), &half).unwrap();
        assert_eq!(db, 0.0);
    }

    #[test]
    fn out_of_range_names_the_parameter() {
        let half = SystemConfig::new(0.5, 0.5).unwrap();
        let err = gc_cost(&p(0.2, 0.2, 1.5, 1.0), &half).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { name: "nu", .. }), "{err}");
        let err = gc_cost(&p(0.2, f64::NAN, 0.5, 1.0), &half).unwrap_err();
        assert!(matches!(err, Error::OutOfRange { name: "mu", .. }));
    }

    #[test]
    fn sweep_rows_are_affine_in_a() {
        let params = p(0.2, 0.3, 0.8, 0.95);
        let rows = sweep(&params, &[0.0, 0.5, 1.0]).unwrap();
        assert_eq!(rows.len(), 3);
        assert!(rows.iter().all(|r| r.gc_cost <= 1.0));
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let rows = sweep(&params, &grid).unwrap();
        for w in rows.windows(3) {
            let second = w[2].gc_cost - 2.0 * w[1].gc_cost + w[0].gc_cost;
            assert!(second.abs() < 1e-15);
        }
        assert!(sweep(&params, &[]).is_err());
    }

    #[test]
    fn band_search_finds_always_on_regime() {
        let axes = SearchAxes {
            rho: vec![0.004],
            mu: vec![0.02, 0.06],
            nu: vec![0.98],
            gamma: vec![0.999, 1.0],
            a: vec![0.1],
        };
        let hits = search_reduction_band(&axes, 158.0, 30_000.0).unwrap();
        assert!(!hits.is_empty());
        assert!(hits
            .iter()
            .all(|(_, r)| in_reference_band(r.reduction_factor)));
    }
}
