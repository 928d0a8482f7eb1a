//! Spectral transforms of the Gram, block-diagonal and block-symmetric
//! (BSCA) laws of i.i.d. rectangular channels.
//!
//! Stieltjes convention throughout: g(z) = ∫ ρ(λ)/(λ − z) dλ, so g ~ −1/z at
//! infinity and Im z > 0 implies Im g > 0.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, poly_add, poly_mul, poly_roots};

/// Users over antennas, restricted to (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectRatio(f64);

impl AspectRatio {
    pub fn new(q: f64) -> Result<Self> {
        if q > 0.0 && q < 1.0 {
            Ok(AspectRatio(q))
        } else {
            Err(Error::Domain(format!("aspect ratio must lie in (0, 1), got {q}")))
        }
    }

    pub fn from_dims(users: usize, antennas: usize) -> Result<Self> {
        Self::new(users as f64 / antennas as f64)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Normalized-trace power sums (1/n)·tr(Xᵏ), k = 1, 2, 3.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentTriple {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CumulantTriple {
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl CumulantTriple {
    pub fn as_array(&self) -> [f64; 3] {
        [self.k1, self.k2, self.k3]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SupportInterval {
    pub a: f64,
    pub b: f64,
    pub zero_atom: f64,
}

/// Which closed form supplies the noisy-Gram cumulants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TheoryMode {
    /// The three printed expressions, kept verbatim for comparison.
    Printed,
    /// Exact cumulants of the Gram of H + αE for i.i.d. Gaussian H and E.
    GaussianEquivalent,
}

/// Solver behind [`noisy_gram_stieltjes_with`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoisyGramEvaluator {
    /// Degree-8 polynomial obtained by squaring away both radicals of the
    /// printed implicit equation; roots filtered by residual and branch.
    PrintedEquation,
    /// Fixed point R(G) + 1/G = ζ on the symmetrized auxiliary law,
    /// with R the sum of the clean and scaled-noise auxiliary R transforms.
    AdditionLaw,
    /// Scaled Marchenko-Pastur law s⁻¹·g_MP(z/s, q), s = 1 + α².
    GaussianEquivalent,
}

/// Form of the auxiliary noisy R transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RTransformVariant {
    /// R_clean(z) + α·R_clean(αz); reduces to the clean transform at α = 0.
    AdditionLaw,
    /// (−1 + qz² + h(z))/(2z) with h the sum of both radicals, as printed.
    Printed,
}

fn require_offaxis(z: Complex64) -> Result<()> {
    if z.im == 0.0 || !z.is_finite() {
        return Err(Error::Domain(format!(
            "Stieltjes evaluation needs Im z != 0 (got {z}); use a boundary limit with eps > 0"
        )));
    }
    Ok(())
}

/// Both roots of a z² + b z + c = 0 without cancellation.
fn quadratic_roots(a: Complex64, b: Complex64, cc: Complex64) -> [Complex64; 2] {
    let d = (b * b - 4.0 * a * cc).sqrt();
    let t = if (b.conj() * d).re >= 0.0 {
        -(b + d) / 2.0
    } else {
        -(b - d) / 2.0
    };
    [t / a, cc / t]
}

/// Picks the Herglotz root; ties are broken by the −1/z asymptote.
fn herglotz_pick(z: Complex64, roots: &[Complex64]) -> Result<Complex64> {
    let mut best: Option<Complex64> = None;
    for &g in roots.iter().filter(|g| g.is_finite() && g.im * z.im > 0.0) {
        best = match best {
            Some(b) if (z * b + 1.0).norm() <= (z * g + 1.0).norm() => Some(b),
            _ => Some(g),
        };
    }
    best.ok_or_else(|| Error::NoRoot {
        z,
        candidates: roots.to_vec(),
    })
}

/// Marchenko-Pastur Stieltjes transform of HHᴴ (unit-mean law, ratio q).
///
/// Solves q z g² + (z − 1 + q) g + 1 = 0 on the Herglotz branch.
pub fn mp_stieltjes(z: Complex64, q: AspectRatio) -> Result<Complex64> {
    require_offaxis(z)?;
    let q = q.value();
    let roots = quadratic_roots(c(q, 0.0) * z, z - 1.0 + q, c(1.0, 0.0));
    herglotz_pick(z, &roots)
}

/// Boundary value g(x + iε), ε > 0.
pub fn mp_stieltjes_limit(x: f64, eps: f64, q: AspectRatio) -> Result<Complex64> {
    if eps <= 0.0 {
        return Err(Error::Domain(format!("boundary limit needs eps > 0, got {eps}")));
    }
    mp_stieltjes(c(x, eps), q)
}

/// Marchenko-Pastur density of HHᴴ (no atom since q < 1).
pub fn mp_density(x: f64, q: AspectRatio) -> f64 {
    let q = q.value();
    let lo = (1.0 - q.sqrt()).powi(2);
    let hi = (1.0 + q.sqrt()).powi(2);
    if x <= lo || x >= hi {
        return 0.0;
    }
    ((hi - x) * (x - lo)).sqrt() / (2.0 * std::f64::consts::PI * q * x)
}

/// Continuous part of the BSCA eigenvalue density.
pub fn bsca_density(x: f64, q: AspectRatio) -> f64 {
    let qv = q.value();
    let a = 1.0 - qv.sqrt();
    let b = 1.0 + qv.sqrt();
    let ax = x.abs();
    if ax < a || ax > b {
        return 0.0;
    }
    let v = (b * b - ax * ax) * (ax * ax - a * a);
    v.max(0.0).sqrt() / ((qv + 1.0) * std::f64::consts::PI * ax)
}

pub fn bsca_support(q: f64) -> Result<SupportInterval> {
    let q = AspectRatio::new(q)?.value();
    Ok(SupportInterval {
        a: 1.0 - q.sqrt(),
        b: 1.0 + q.sqrt(),
        zero_atom: (1.0 - q) / (1.0 + q),
    })
}

/// Mass of the continuous BSCA density over [x0, x1].
///
/// Integrates in the squared variable t = x² with a cosine substitution that
/// removes both edge square-root singularities.
pub fn bsca_mass(x0: f64, x1: f64, q: AspectRatio) -> f64 {
    if x1 <= x0 {
        return 0.0;
    }
    if x0 < 0.0 && x1 > 0.0 {
        return bsca_mass(x0, 0.0, q) + bsca_mass(0.0, x1, q);
    }
    if x1 <= 0.0 {
        return bsca_mass(-x1, -x0, q);
    }
    let qv = q.value();
    let a2 = (1.0 - qv.sqrt()).powi(2);
    let b2 = (1.0 + qv.sqrt()).powi(2);
    let t0 = (x0 * x0).clamp(a2, b2);
    let t1 = (x1 * x1).clamp(a2, b2);
    if t1 <= t0 {
        return 0.0;
    }
    let half = (b2 - a2) / 2.0;
    let theta = |t: f64| ((1.0 - (t - a2) / half).clamp(-1.0, 1.0)).acos();
    let (th0, th1) = (theta(t0), theta(t1));
    // After t = a² + half·(1 − cos θ) the integrand is smooth in θ.
    let f = |th: f64| {
        let t = a2 + half * (1.0 - th.cos());
        let s = th.sin();
        half * half * s * s / (2.0 * (qv + 1.0) * std::f64::consts::PI * t)
    };
    simpson(f, th0, th1, 400)
}

fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> f64 {
    let n = n + n % 2;
    let h = (hi - lo) / n as f64;
    let mut acc = f(lo) + f(hi);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * i as f64);
    }
    acc * h / 3.0
}

/// Weight of the nonzero part of the block-diagonal D = diag(HHᴴ, HᴴH) law.
fn d_weight(q: f64) -> f64 {
    2.0 * q / (q + 1.0)
}

/// g_D(z) = (2q/(q+1))·g_gram + ((q−1)/(q+1))/z.
pub fn stieltjes_d_from_gram(g_gram: Complex64, z: Complex64, q: AspectRatio) -> Result<Complex64> {
    if z == c(0.0, 0.0) {
        return Err(Error::Domain("z = 0".into()));
    }
    let q = q.value();
    Ok(d_weight(q) * g_gram + ((q - 1.0) / (q + 1.0)) / z)
}

/// Inverse of [`stieltjes_d_from_gram`].
pub fn gram_from_stieltjes_d(g_d: Complex64, z: Complex64, q: AspectRatio) -> Result<Complex64> {
    if z == c(0.0, 0.0) {
        return Err(Error::Domain("z = 0".into()));
    }
    let q = q.value();
    Ok(((q + 1.0) / (2.0 * q)) * g_d - ((q - 1.0) / (2.0 * q)) / z)
}

/// g_B(z) = z·g_D(z²).
pub fn stieltjes_b_from_d(g_d_at_z2: Complex64, z: Complex64) -> Complex64 {
    z * g_d_at_z2
}

/// Analytic BSCA Stieltjes transform through the Gram → D → B chain.
pub fn bsca_stieltjes(z: Complex64, q: AspectRatio) -> Result<Complex64> {
    require_offaxis(z)?;
    let z2 = z * z;
    if z2.im == 0.0 {
        return Err(Error::Domain(format!("z² is real for z = {z}")));
    }
    let g_gram = mp_stieltjes(z2, q)?;
    Ok(stieltjes_b_from_d(stieltjes_d_from_gram(g_gram, z2, q)?, z))
}

pub fn s_transform_gram(z: f64, q: AspectRatio) -> f64 {
    1.0 / (1.0 + q.value() * z)
}

/// S transform of the D law w·MP + (1 − w)·δ₀, w = 2q/(1+q).
pub fn s_transform_d(z: f64, q: AspectRatio) -> f64 {
    let w = d_weight(q.value());
    (1.0 + z) / ((w + z) * (1.0 + q.value() * z / w))
}

/// S transform of the BSCA law, the positive root of
/// S_B(z)² = ((1+z)/z)·S_D(z). Real only for z > 0.
pub fn s_transform_bsca(z: f64, q: AspectRatio) -> Result<f64> {
    if !(z > 0.0) || !z.is_finite() {
        return Err(Error::Domain(format!(
            "BSCA S transform is real only for z > 0, got {z}"
        )));
    }
    let sq = (1.0 + z) / z * s_transform_d(z, q);
    if sq < 0.0 {
        return Err(Error::Domain(format!("S_B(z)² < 0 at z = {z}")));
    }
    Ok(sq.sqrt())
}

fn radical(z: Complex64, q: f64) -> Complex64 {
    let z2 = z * z;
    (1.0 + z2 * (4.0 + q * (-2.0 + q * z2))).sqrt()
}

/// R transform of the symmetrized clean singular-value law,
/// (−1 + qz² + √(1 + 4z² − 2qz² + q²z⁴))/(2z). R(0) = 0.
pub fn r_transform_clean_aux(z: Complex64, q: AspectRatio) -> Result<Complex64> {
    let qv = q.value();
    if z == c(0.0, 0.0) {
        return Ok(c(0.0, 0.0));
    }
    let r = radical(z, qv);
    if r.norm() < 1e-12 {
        return Err(Error::Domain(format!("branch point at z = {z}")));
    }
    Ok((-1.0 + qv * z * z + r) / (2.0 * z))
}

/// R transform of the symmetrized noisy singular-value law.
pub fn r_transform_noisy_aux(
    z: Complex64,
    q: AspectRatio,
    alpha: f64,
    variant: RTransformVariant,
) -> Result<Complex64> {
    let qv = q.value();
    if z == c(0.0, 0.0) {
        return match variant {
            RTransformVariant::AdditionLaw => Ok(c(0.0, 0.0)),
            RTransformVariant::Printed => Err(Error::Domain("printed form has a pole at z = 0".into())),
        };
    }
    let r1 = radical(z, qv);
    let r2 = radical(alpha * z, qv);
    if r1.norm() < 1e-12 || r2.norm() < 1e-12 {
        return Err(Error::Domain(format!("branch point at z = {z}")));
    }
    let h = r1 + r2;
    Ok(match variant {
        RTransformVariant::AdditionLaw => (-2.0 + qv * (1.0 + alpha * alpha) * z * z + h) / (2.0 * z),
        RTransformVariant::Printed => (-1.0 + qv * z * z + h) / (2.0 * z),
    })
}

/// Stieltjes transform of the noisy Gram law of H + αE. Backed by the
/// Gaussian-equivalent evaluator; see [`noisy_gram_stieltjes_with`].
pub fn noisy_gram_stieltjes(z: Complex64, q: AspectRatio, alpha: f64) -> Result<Complex64> {
    noisy_gram_stieltjes_with(z, q, alpha, NoisyGramEvaluator::GaussianEquivalent)
}

pub fn noisy_gram_stieltjes_with(
    z: Complex64,
    q: AspectRatio,
    alpha: f64,
    evaluator: NoisyGramEvaluator,
) -> Result<Complex64> {
    require_offaxis(z)?;
    if !(alpha >= 0.0) || !alpha.is_finite() {
        return Err(Error::Domain(format!("alpha must be finite and >= 0, got {alpha}")));
    }
    match evaluator {
        NoisyGramEvaluator::GaussianEquivalent => {
            let s = 1.0 + alpha * alpha;
            Ok(mp_stieltjes(z / s, q)? / s)
        }
        NoisyGramEvaluator::PrintedEquation => printed_equation_root(z, q.value(), alpha),
        NoisyGramEvaluator::AdditionLaw => addition_law_fixed_point(z, q, alpha),
    }
}

/// The printed implicit equation is written for the resolvent-sign
/// transform G = −g. Isolating L = 2Gz − (1+α²)qzG² = √P₁ + √P₂ and squaring
/// twice gives (L² − P₁ − P₂)² − 4P₁P₂ = 0, a degree-8 polynomial in G.
fn printed_equation_root(z: Complex64, q: f64, alpha: f64) -> Result<Complex64> {
    let a2 = alpha * alpha;
    let zero = c(0.0, 0.0);
    let p1 = [c(1.0, 0.0), zero, (4.0 - 2.0 * q) * z, zero, q * q * z * z];
    let p2 = [c(1.0, 0.0), zero, a2 * (4.0 - 2.0 * q) * z, zero, q * q * a2 * a2 * z * z];
    let l = [zero, 2.0 * z, -(1.0 + a2) * q * z];
    let l2 = poly_mul(&l, &l);
    let t = poly_add(&poly_add(&l2, &p1, -1.0), &p2, -1.0);
    let poly = poly_add(&poly_mul(&t, &t), &poly_mul(&p1, &p2), -4.0);
    let roots = poly_roots(&poly)?;

    let eval = |p: &[Complex64], x: Complex64| p.iter().rev().fold(zero, |acc, &k| acc * x + k);
    let residual = |gs: Complex64| {
        -2.0 * gs * z + gs * gs * (1.0 + a2) * q * z + eval(&p1, gs).sqrt() + eval(&p2, gs).sqrt()
    };
    let candidates: Vec<Complex64> = roots.iter().map(|&gs| -gs).collect();
    let admissible: Vec<Complex64> = roots
        .iter()
        .filter(|&&gs| {
            let scale = 1.0 + (gs * z).norm() + (gs * gs * z).norm();
            residual(gs).norm() <= 1e-8 * scale
        })
        .map(|&gs| -gs)
        .collect();
    herglotz_pick(z, &admissible).map_err(|_| Error::NoRoot { z, candidates })
}

fn addition_law_fixed_point(z: Complex64, q: AspectRatio, alpha: f64) -> Result<Complex64> {
    // Auxiliary law at ζ = √z (first quadrant when Im z > 0, mirrored below).
    let mut zeta = z.sqrt();
    if zeta.im * z.im < 0.0 {
        zeta = -zeta;
    }
    // Standard-sign transform G = −g solves F(G) = G·(ζ − R(G)) − 1 = 0 with
    // R(G) = (−2 + q(1+α²)G² + r₁ + r₂)/(2G), r₁ = √P(G), r₂ = √P(αG).
    // Newton continuation from far above the axis keeps the Herglotz branch;
    // both radicals follow the branch that is 1 at G = 0.
    let qv = q.value();
    let pick = |v: Complex64, prev: Complex64| if (v - prev).norm() <= (v + prev).norm() { v } else { -v };
    let eval = |g: Complex64, at: Complex64, b: (Complex64, Complex64)| {
        let r1 = pick(radical(g, qv), b.0);
        let r2 = pick(radical(alpha * g, qv), b.1);
        let r = (-2.0 + qv * (1.0 + alpha * alpha) * g * g + r1 + r2) / (2.0 * g);
        (g * (at - r) - 1.0, (r1, r2))
    };
    let lift = 10.0 + zeta.norm();
    let steps = 200;
    let top = zeta + c(0.0, lift * zeta.im.signum());
    let mut gs = 1.0 / top;
    let mut branch = (c(1.0, 0.0), c(1.0, 0.0));
    for k in 0..=steps {
        let t = 1.0 - k as f64 / steps as f64;
        let at = zeta + c(0.0, lift * zeta.im.signum() * t * t);
        let mut converged = false;
        for _ in 0..50 {
            let (fv, b) = eval(gs, at, branch);
            let h = 1e-7 * (1.0 + gs.norm());
            let df = (eval(gs + h, at, b).0 - fv) / h;
            let step = fv / df;
            if !step.is_finite() {
                break;
            }
            gs -= step;
            branch = b;
            if step.norm() <= 1e-13 * (1.0 + gs.norm()) {
                converged = true;
                break;
            }
        }
        let (res, b) = eval(gs, at, branch);
        branch = b;
        if !converged && res.norm() > 1e-9 {
            return Err(Error::Numerical(format!(
                "addition-law fixed point did not converge at z = {z}"
            )));
        }
    }
    // g_gram(z) = g_aux(ζ)/ζ and g_aux = −G.
    let g = -gs / zeta;
    if g.im * z.im <= 0.0 {
        return Err(Error::Numerical(format!(
            "addition-law solution left the Herglotz branch at z = {z}"
        )));
    }
    Ok(g)
}

/// (1/n)·Σ 1/(λᵢ − z).
pub fn empirical_stieltjes(eigs: &[f64], z: Complex64) -> Result<Complex64> {
    if eigs.is_empty() {
        return Err(Error::Domain("empty eigenvalue list".into()));
    }
    require_offaxis(z)?;
    let sum: Complex64 = eigs.iter().map(|&l| 1.0 / (l - z)).sum();
    Ok(sum / eigs.len() as f64)
}

pub fn free_cumulants(m: MomentTriple) -> CumulantTriple {
    CumulantTriple {
        k1: m.m1,
        k2: m.m2 - m.m1 * m.m1,
        k3: m.m3 - 3.0 * m.m2 * m.m1 + 2.0 * m.m1.powi(3),
    }
}

/// κ₃ with the printed 2m₁² term; agrees with [`free_cumulants`] only when
/// m₁ = 1.
pub fn free_cumulants_printed(m: MomentTriple) -> CumulantTriple {
    CumulantTriple {
        k1: m.m1,
        k2: m.m2 - m.m1 * m.m1,
        k3: m.m3 - 3.0 * m.m2 * m.m1 + 2.0 * m.m1 * m.m1,
    }
}

pub fn moments_from_cumulants(k: CumulantTriple) -> MomentTriple {
    MomentTriple {
        m1: k.k1,
        m2: k.k2 + k.k1 * k.k1,
        m3: k.k3 + 3.0 * k.k2 * k.k1 + k.k1.powi(3),
    }
}

/// Free cumulants of the noisy Gram law as a function of η (c = 1).
pub fn noisy_gram_cumulants_theory(eta: f64, q: AspectRatio, mode: TheoryMode) -> Result<CumulantTriple> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::Domain(format!("eta must lie in [0, 1), got {eta}")));
    }
    let q = q.value();
    let om = 1.0 - eta;
    Ok(match mode {
        TheoryMode::Printed => CumulantTriple {
            k1: 1.0 / om,
            k2: (2.0 * om * eta * (1.0 - q) + q) / (om * om),
            k3: q * (3.0 * om * eta * (1.0 - q) + q) / om.powi(3),
        },
        TheoryMode::GaussianEquivalent => scaled_mp_cumulants(1.0 / om, q),
    })
}

/// Free cumulants (s, q s², q² s³) of the s-scaled Marchenko-Pastur law.
pub fn scaled_mp_cumulants(s: f64, q: f64) -> CumulantTriple {
    CumulantTriple {
        k1: s,
        k2: q * s * s,
        k3: q * q * s.powi(3),
    }
}
