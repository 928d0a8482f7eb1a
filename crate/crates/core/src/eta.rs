//! Blind estimation of the CSI error level η by matching free cumulants of
//! the observed Gram spectrum.

use serde::{Deserialize, Serialize};

use crate::channel::{alpha_of, CorruptionMode, SystemDims};
use crate::error::{Error, Result};
use crate::linalg::{gram_eigenvalues, CMatrix};
use crate::rmt::{
    free_cumulants, noisy_gram_cumulants_theory, scaled_mp_cumulants, AspectRatio, CumulantTriple, MomentTriple,
    TheoryMode,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorConfig {
    /// Highest cumulant matched, 1..=3.
    pub order: u8,
    pub mode: TheoryMode,
    /// How the observation was generated; fixes the η → scale map.
    pub data_mode: CorruptionMode,
    pub c: f64,
    pub grid_points: usize,
    pub tol: f64,
    /// Search interval is [0, 1 − delta].
    pub delta: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            order: 3,
            mode: TheoryMode::GaussianEquivalent,
            data_mode: CorruptionMode::Additive,
            c: 1.0,
            grid_points: 200,
            tol: 1e-6,
            delta: 1e-3,
        }
    }
}

impl EstimatorConfig {
    pub fn with_order(order: u8) -> Self {
        EstimatorConfig {
            order,
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.order) {
            return Err(Error::Config(format!("estimator order must be 1, 2 or 3, got {}", self.order)));
        }
        if self.grid_points < 3 || !(self.tol > 0.0) || !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::Config("estimator grid, tolerance or delta out of range".into()));
        }
        if !(self.c > 0.0) {
            return Err(Error::Config(format!("noise scale c must be positive, got {}", self.c)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaEstimate {
    pub eta_hat: f64,
    pub alpha_hat: f64,
    pub objective_value: f64,
    /// False when the data carry no information about η (damped, c = 1).
    pub identifiable: bool,
}

/// Order 1 below 10⁴ channel entries, order 3 otherwise.
pub fn default_order(dims: SystemDims) -> u8 {
    if dims.users * dims.antennas < 10_000 {
        1
    } else {
        3
    }
}

/// (1/U)·tr((X Xᴴ)ᵏ), k = 1, 2, 3, from the Gram eigenvalues.
pub fn empirical_moments(x: &CMatrix) -> Result<MomentTriple> {
    let (u, a) = x.shape();
    if u == 0 || u > a {
        return Err(Error::Shape(format!("moment estimate needs 0 < U <= A, got {u}×{a}")));
    }
    let w = gram_eigenvalues(x);
    let n = w.len() as f64;
    Ok(MomentTriple {
        m1: w.iter().sum::<f64>() / n,
        m2: w.iter().map(|v| v * v).sum::<f64>() / n,
        m3: w.iter().map(|v| v * v * v).sum::<f64>() / n,
    })
}

/// Theoretical Gram cumulants of the observation at noise level η.
pub fn model_cumulants(eta: f64, q: AspectRatio, cfg: &EstimatorConfig) -> Result<CumulantTriple> {
    match cfg.mode {
        TheoryMode::Printed => noisy_gram_cumulants_theory(eta, q, TheoryMode::Printed),
        TheoryMode::GaussianEquivalent => {
            if !(0.0..1.0).contains(&eta) {
                return Err(Error::Domain(format!("eta must lie in [0, 1), got {eta}")));
            }
            let s = match cfg.data_mode {
                CorruptionMode::Additive => 1.0 + eta * cfg.c / (1.0 - eta),
                CorruptionMode::Damped => 1.0 - eta + eta * cfg.c,
            };
            Ok(scaled_mp_cumulants(s, q.value()))
        }
    }
}

fn objective(k_hat: &CumulantTriple, eta: f64, q: AspectRatio, cfg: &EstimatorConfig) -> Result<f64> {
    let k = model_cumulants(eta, q, cfg)?;
    let (a, b) = (k_hat.as_array(), k.as_array());
    Ok((0..cfg.order as usize).map(|i| (a[i] - b[i]).powi(2)).sum())
}

pub fn estimate_eta(x: &CMatrix, q: AspectRatio, cfg: &EstimatorConfig) -> Result<EtaEstimate> {
    estimate_eta_traced(x, q, cfg).map(|(e, _)| e)
}

/// As [`estimate_eta`], also returning the best objective value after the
/// coarse grid and after each refinement step.
pub fn estimate_eta_traced(x: &CMatrix, q: AspectRatio, cfg: &EstimatorConfig) -> Result<(EtaEstimate, Vec<f64>)> {
    cfg.validate()?;
    let moments = empirical_moments(x)?;
    if moments.m1 <= 0.0 {
        return Err(Error::Domain("observation is the zero matrix".into()));
    }
    let k_hat = free_cumulants(moments);
    let (eta_hat, objective_value, trace) = minimize(&k_hat, q, cfg)?;
    let (u, a) = x.shape();
    let identifiable = !(cfg.data_mode == CorruptionMode::Damped
        && cfg.c == 1.0
        && (k_hat.k1 - 1.0).abs() < 2.0 / ((u * a) as f64).sqrt());
    Ok((
        EtaEstimate {
            eta_hat,
            alpha_hat: alpha_of(eta_hat, cfg.c),
            objective_value,
            identifiable,
        },
        trace,
    ))
}

const GOLDEN_CAP: usize = 200;

fn minimize(k_hat: &CumulantTriple, q: AspectRatio, cfg: &EstimatorConfig) -> Result<(f64, f64, Vec<f64>)> {
    let hi = 1.0 - cfg.delta;
    let n = cfg.grid_points;
    let grid: Vec<f64> = (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect();
    let mut best = (0usize, f64::INFINITY);
    for (i, &e) in grid.iter().enumerate() {
        let v = objective(k_hat, e, q, cfg)?;
        if v < best.1 {
            best = (i, v);
        }
    }
    let coarse_eta = grid[best.0];
    if !best.1.is_finite() {
        return Err(Error::NotConverged { coarse_eta });
    }
    let mut lo = grid[best.0.saturating_sub(1)];
    let mut up = grid[(best.0 + 1).min(n - 1)];
    let mut trace = vec![best.1];
    let (mut best_eta, mut best_val) = (coarse_eta, best.1);

    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = up - invphi * (up - lo);
    let mut x2 = lo + invphi * (up - lo);
    let mut f1 = objective(k_hat, x1, q, cfg)?;
    let mut f2 = objective(k_hat, x2, q, cfg)?;
    let mut iters = 0;
    while up - lo > cfg.tol {
        iters += 1;
        if iters > GOLDEN_CAP || !f1.is_finite() || !f2.is_finite() {
            return Err(Error::NotConverged { coarse_eta });
        }
        if f1 <= f2 {
            up = x2;
            x2 = x1;
            f2 = f1;
            x1 = up - invphi * (up - lo);
            f1 = objective(k_hat, x1, q, cfg)?;
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + invphi * (up - lo);
            f2 = objective(k_hat, x2, q, cfg)?;
        }
        for (x, f) in [(x1, f1), (x2, f2)] {
            if f < best_val {
                best_val = f;
                best_eta = x;
            }
        }
        trace.push(best_val);
    }
    Ok((best_eta.clamp(0.0, hi), best_val, trace))
}

/// |η − η̂|.
pub fn delta_eta(true_eta: f64, est: &EtaEstimate) -> f64 {
    (true_eta - est.eta_hat).abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{corrupt, gen_channel, CorruptionModel};
    use crate::linalg::c;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn moments_from_known_singular_values() {
        // Rows with norms 1 and 2, orthogonal: Gram eigenvalues {1, 4}.
        let mut x = CMatrix::zeros(2, 3);
        x[(0, 0)] = c(1.0, 0.0);
        x[(1, 1)] = c(0.0, 2.0);
        let m = empirical_moments(&x).unwrap();
        assert!((m.m1 - 2.5).abs() < 1e-12);
        assert!((m.m2 - 8.5).abs() < 1e-12);
        assert!((m.m3 - 32.5).abs() < 1e-12);
        let z = empirical_moments(&CMatrix::zeros(2, 3)).unwrap();
        assert_eq!((z.m1, z.m2, z.m3), (0.0, 0.0, 0.0));
    }

    #[test]
    fn moments_follow_mp() {
        let dims = SystemDims::new(128, 512).unwrap();
        let h = gen_channel(dims, &mut ChaCha8Rng::seed_from_u64(3)).h;
        let m = empirical_moments(&h).unwrap();
        let q = 0.25;
        assert!((m.m1 - 1.0).abs() < 0.05);
        assert!((m.m2 / (1.0 + q) - 1.0).abs() < 0.05);
        assert!((m.m3 / (1.0 + 3.0 * q + q * q) - 1.0).abs() < 0.05);
    }

    #[test]
    fn closed_form_order_one() {
        // Row norms chosen so that κ̂₁ = (1/U)·‖X‖² = 2 exactly.
        let mut x = CMatrix::zeros(2, 4);
        x[(0, 0)] = c(1.0, 0.0);
        x[(1, 1)] = c(3f64.sqrt(), 0.0);
        let q = AspectRatio::new(0.5).unwrap();
        let est = estimate_eta(&x, q, &EstimatorConfig::with_order(1)).unwrap();
        assert!((est.eta_hat - 0.5).abs() < 1e-6, "{}", est.eta_hat);
        assert!((est.alpha_hat - 1.0).abs() < 1e-5);
        assert!(est.objective_value >= 0.0);
    }

    #[test]
    fn trace_is_nonincreasing() {
        let dims = SystemDims::new(30, 256).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let h = gen_channel(dims, &mut r);
        let m = CorruptionModel::new(0.3, CorruptionMode::Additive, 1.0).unwrap();
        let obs = corrupt(&h, &m, &mut r).h;
        let (est, trace) = estimate_eta_traced(&obs, dims.q(), &EstimatorConfig::default()).unwrap();
        assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*trace.last().unwrap(), est.objective_value);
        assert!((0.0..=0.999).contains(&est.eta_hat));
    }

    #[test]
    fn damped_unit_scale_is_flagged() {
        let dims = SystemDims::new(30, 256).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let h = gen_channel(dims, &mut r);
        let m = CorruptionModel::new(0.5, CorruptionMode::Damped, 1.0).unwrap();
        let obs = corrupt(&h, &m, &mut r).h;
        let cfg = EstimatorConfig {
            data_mode: CorruptionMode::Damped,
            ..Default::default()
        };
        let est = estimate_eta(&obs, dims.q(), &cfg).unwrap();
        assert!(!est.identifiable);
        let add = EstimatorConfig::default();
        let m = CorruptionModel::new(0.5, CorruptionMode::Additive, 1.0).unwrap();
        let obs = corrupt(&h, &m, &mut r).h;
        assert!(estimate_eta(&obs, dims.q(), &add).unwrap().identifiable);
    }

    #[test]
    fn rejects_bad_config() {
        let x = CMatrix::from_element(2, 3, c(1.0, 0.0));
        let q = AspectRatio::new(2.0 / 3.0).unwrap();
        assert!(matches!(
            estimate_eta(&x, q, &EstimatorConfig::with_order(4)),
            Err(Error::Config(_))
        ));
        assert!(estimate_eta(&CMatrix::zeros(2, 3), q, &EstimatorConfig::default()).is_err());
    }

    #[test]
    fn delta_arithmetic() {
        let e = |v| EtaEstimate {
            eta_hat: v,
            alpha_hat: 0.0,
            objective_value: 0.0,
            identifiable: true,
        };
        assert_eq!(delta_eta(0.5, &e(0.5)), 0.0);
        assert!((delta_eta(0.5, &e(0.47)) - 0.03).abs() < 1e-15);
    }

    #[test]
    fn default_order_policy() {
        assert_eq!(default_order(SystemDims::new(30, 256).unwrap()), 1);
        assert_eq!(default_order(SystemDims::new(40, 256).unwrap()), 3);
    }
}
