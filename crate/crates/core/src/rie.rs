//! Rotation-invariant cleaning of a noisy channel through its BSCA.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::channel::{alpha_of, build_bsca, normalize_observation, BscaMatrix, CorruptionMode, SystemDims};
use crate::error::{Error, Result};
use crate::linalg::{eigh_desc, frobenius_sq, CMatrix};
use crate::rmt::AspectRatio;

/// Eigen-decomposition of a BSCA with its ± pairing.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    /// Descending.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal columns matching `eigenvalues`.
    pub eigenvectors: CMatrix,
    /// (index of +ω, index of −ω).
    pub pairs: Vec<(usize, usize)>,
    pub null: Vec<usize>,
    pub dims: SystemDims,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShrinkageInputs {
    /// Noisy Gram eigenvalue.
    pub omega: f64,
    pub h: f64,
    pub rho: f64,
    pub q: AspectRatio,
    pub alpha: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkVariant {
    /// φ₁φ₂ + φ₃ verbatim.
    Printed,
    /// φ₁φ₂ + φ₃ − h·ω, so that α = 0 leaves ω unchanged.
    Anchored,
}

const NULL_REL: f64 = 1e-10;
const PAIR_REL: f64 = 1e-8;

pub fn eig_bsca(b: &BscaMatrix) -> Result<SpectralDecomp> {
    let (w, v) = eigh_desc(&b.b);
    let scale = w.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let null: Vec<usize> = (0..w.len()).filter(|&i| w[i].abs() <= NULL_REL * scale).collect();
    let pos: Vec<usize> = (0..w.len()).filter(|&i| w[i] > NULL_REL * scale).collect();
    let neg: Vec<usize> = (0..w.len()).rev().filter(|&i| w[i] < -NULL_REL * scale).collect();
    if pos.len() != neg.len() {
        return Err(Error::Pairing(format!(
            "{} positive versus {} negative eigenvalues",
            pos.len(),
            neg.len()
        )));
    }
    let mut pairs = Vec::with_capacity(pos.len());
    for (&p, &n) in pos.iter().zip(&neg) {
        if (w[p] + w[n]).abs() > PAIR_REL * scale {
            return Err(Error::Pairing(format!("{} has no partner (nearest {})", w[p], w[n])));
        }
        pairs.push((p, n));
    }
    Ok(SpectralDecomp {
        eigenvalues: w,
        eigenvectors: v,
        pairs,
        null,
        dims: b.dims,
    })
}

/// Leave-one-out empirical Stieltjes transform at ω + iε, excluding one
/// occurrence of ω from `gram_eigs`. Returns (Re g, Im g).
pub fn local_stieltjes(gram_eigs: &[f64], omega: f64, epsilon: f64) -> (f64, f64) {
    let skip = gram_eigs.iter().position(|&l| l == omega);
    let n = gram_eigs.len() - skip.map_or(0, |_| 1);
    if n == 0 {
        return (0.0, 0.0);
    }
    let z = Complex64::new(omega, epsilon);
    let sum: Complex64 = gram_eigs
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != skip)
        .map(|(_, &l)| 1.0 / (l - z))
        .sum();
    let g = sum / n as f64;
    (g.re, g.im)
}

pub fn shrink_eigenvalue(inp: &ShrinkageInputs, variant: ShrinkVariant) -> f64 {
    let ShrinkageInputs { omega, h, rho, alpha, .. } = *inp;
    let q = inp.q.value();
    let a2 = alpha * alpha;
    let phi1 = 1.0 - q * a2 * h;
    let phi2 = omega - a2 * (1.0 - q) - 2.0 * q * a2 * h;
    let phi3 = h * (omega - a2 * (1.0 - q) + q * a2 * omega * (rho - h));
    let raw = phi1 * phi2 + phi3;
    let v = match variant {
        ShrinkVariant::Printed => raw,
        ShrinkVariant::Anchored => raw - h * omega,
    };
    v.max(0.0)
}

/// Off-diagonal block of V·diag(λ̂)·Vᴴ.
pub fn reconstruct(decomp: &SpectralDecomp, lambda_hat: &[f64]) -> Result<CMatrix> {
    let n = decomp.eigenvalues.len();
    if lambda_hat.len() != n {
        return Err(Error::Shape(format!("{} shrunk values for {n} eigenvalues", lambda_hat.len())));
    }
    let scale = lambda_hat.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let tol = PAIR_REL * scale.max(f64::MIN_POSITIVE);
    for &(p, m) in &decomp.pairs {
        if (lambda_hat[p] + lambda_hat[m]).abs() > tol {
            return Err(Error::Pairing(format!(
                "shrunk pair ({}, {}) is not sign-symmetric",
                lambda_hat[p], lambda_hat[m]
            )));
        }
    }
    if decomp.null.iter().any(|&i| lambda_hat[i].abs() > tol) {
        return Err(Error::Pairing("nonzero value assigned to the null space".into()));
    }
    let SystemDims { users: u, antennas: a } = decomp.dims;
    let active: Vec<usize> = (0..n).filter(|&i| lambda_hat[i] != 0.0).collect();
    let top = CMatrix::from_fn(u, active.len(), |r, k| decomp.eigenvectors[(r, active[k])] * lambda_hat[active[k]]);
    let bottom = CMatrix::from_fn(a, active.len(), |r, k| decomp.eigenvectors[(u + r, active[k])]);
    Ok(top * bottom.adjoint())
}

/// How the observation was produced and which shrinkage to apply.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CleanSettings {
    pub data_mode: CorruptionMode,
    pub c: f64,
    pub variant: ShrinkVariant,
}

impl Default for CleanSettings {
    fn default() -> Self {
        CleanSettings {
            data_mode: CorruptionMode::Additive,
            c: 1.0,
            variant: ShrinkVariant::Anchored,
        }
    }
}

/// Shrinks every noisy Gram eigenvalue of `x` at noise level α.
pub fn shrink_spectrum(gram_eigs: &[f64], q: AspectRatio, alpha: f64, variant: ShrinkVariant, eps: f64) -> Vec<f64> {
    gram_eigs
        .iter()
        .map(|&omega| {
            // Resolvent-sign auxiliaries: h = Re G, ρ = −Im G with G = −g.
            let (re, im) = local_stieltjes(gram_eigs, omega, eps);
            shrink_eigenvalue(
                &ShrinkageInputs {
                    omega,
                    h: -re,
                    rho: im,
                    q,
                    alpha,
                },
                variant,
            )
        })
        .collect()
}

/// Estimates H from the observation H̃ at estimated noise level η̂.
///
/// Damped observations are first divided by √(1−η̂) so both corruption
/// modes reach the shrinkage as H + αE; the result targets H itself and is
/// not rescaled afterwards.
pub fn clean_channel(x: &CMatrix, eta_hat: f64, settings: &CleanSettings) -> Result<CMatrix> {
    if !(0.0..1.0).contains(&eta_hat) {
        return Err(Error::Domain(format!("eta_hat must lie in [0, 1), got {eta_hat}")));
    }
    let alpha = alpha_of(eta_hat, settings.c);
    if alpha == 0.0 && settings.variant == ShrinkVariant::Anchored {
        return Ok(x.clone());
    }
    let obs = match settings.data_mode {
        CorruptionMode::Damped => normalize_observation(x, eta_hat)?,
        CorruptionMode::Additive => x.clone(),
    };
    let bsca = build_bsca(&obs)?;
    let dims = bsca.dims;
    let decomp = eig_bsca(&bsca)?;
    let q = dims.q();
    let gram: Vec<f64> = decomp.pairs.iter().map(|&(p, _)| decomp.eigenvalues[p].powi(2)).collect();
    let eps = 1.0 / ((dims.users + dims.antennas) as f64).sqrt();
    let shrunk = shrink_spectrum(&gram, q, alpha, settings.variant, eps);
    let mut lambda_hat = vec![0.0; decomp.eigenvalues.len()];
    for (k, &(p, m)) in decomp.pairs.iter().enumerate() {
        let s = shrunk[k].sqrt();
        lambda_hat[p] = s;
        lambda_hat[m] = -s;
    }
    reconstruct(&decomp, &lambda_hat)
}

/// √(1−η)·H̃, the Gaussian conditional mean under damped corruption with c = 1.
pub fn linear_mmse_baseline(x: &CMatrix, eta: f64) -> CMatrix {
    x * Complex64::from((1.0 - eta).sqrt())
}

/// (1/(U·A))·‖H − Ĥ‖²_F.
pub fn mse(h: &CMatrix, h_hat: &CMatrix) -> Result<f64> {
    if h.shape() != h_hat.shape() {
        return Err(Error::Shape(format!("{:?} versus {:?}", h.shape(), h_hat.shape())));
    }
    Ok(frobenius_sq(&(h - h_hat)) / h.len() as f64)
}
