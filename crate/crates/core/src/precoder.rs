//! Low-resolution DAC models, Bussgang linearization and linear precoders.

use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::sync::OnceLock;

use nalgebra::DVector;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{c, eigvalsh_desc, frobenius_sq, solve_hpd, CMatrix};

/// B-bit symmetric mid-rise uniform quantizer for one real component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: u8,
    pub step: f64,
    /// 2^B output levels Δ(k − (2^B − 1)/2), ascending.
    pub labels: Vec<f64>,
    /// 2^B − 1 thresholds Δ(l − 2^{B−1}), ascending; inputs on a threshold
    /// map up.
    pub thresholds: Vec<f64>,
}

impl QuantizerSpec {
    pub fn quantize_real(&self, x: f64) -> f64 {
        self.labels[self.thresholds.partition_point(|&t| t <= x)]
    }

    pub fn quantize_complex(&self, x: Complex64) -> Complex64 {
        Complex64::new(self.quantize_real(x.re), self.quantize_real(x.im))
    }

    /// E[Q(x)²] for real x ~ N(0, var).
    pub fn gaussian_output_power(&self, var: f64) -> f64 {
        let sd = var.sqrt();
        let cdf = |t: f64| phi_cdf(t / sd);
        let mut lo = 0.0;
        let mut acc = 0.0;
        for (k, &l) in self.labels.iter().enumerate() {
            let hi = self.thresholds.get(k).map_or(1.0, |&t| cdf(t));
            acc += l * l * (hi - lo);
            lo = hi;
        }
        acc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StepRule {
    Fixed(f64),
    /// Gaussian-optimal step for a real input of standard deviation `sigma_in`.
    Auto { sigma_in: f64 },
}

pub const MAX_BITS: u8 = 8;

pub fn make_quantizer(bits: u8, rule: StepRule) -> Result<QuantizerSpec> {
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!("quantizer bits must be in 1..=8, got {bits}")));
    }
    let step = match rule {
        StepRule::Fixed(d) => d,
        StepRule::Auto { sigma_in } => optimal_gaussian_step(bits)? * sigma_in,
    };
    if !(step > 0.0) || !step.is_finite() {
        return Err(Error::Config(format!("quantizer step must be positive, got {step}")));
    }
    let levels = 1usize << bits;
    let half = (levels / 2) as f64;
    let labels = (0..levels).map(|k| step * (k as f64 - (levels as f64 - 1.0) / 2.0)).collect();
    let thresholds = (1..levels).map(|l| step * (l as f64 - half)).collect();
    Ok(QuantizerSpec {
        bits,
        step,
        labels,
        thresholds,
    })
}

/// Re and Im quantized separately.
pub fn quantize(x: &[Complex64], spec: &QuantizerSpec) -> Vec<Complex64> {
    x.iter().map(|&v| spec.quantize_complex(v)).collect()
}

fn phi_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x * FRAC_1_SQRT_2)
}

fn phi_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

/// E(Q(x) − x)² for x ~ N(0, 1) and step `step`.
pub fn gaussian_distortion(bits: u8, step: f64) -> f64 {
    let levels = 1usize << bits;
    let half = (levels / 2) as f64;
    let mut acc = 0.0;
    for k in 0..levels {
        let l = step * (k as f64 - (levels as f64 - 1.0) / 2.0);
        let a = if k == 0 { f64::NEG_INFINITY } else { step * (k as f64 - half) };
        let b = if k == levels - 1 { f64::INFINITY } else { step * (k as f64 + 1.0 - half) };
        let (pa, pb) = (phi_pdf(a), phi_pdf(b));
        let mass = phi_cdf(b) - phi_cdf(a);
        let apa = if a.is_finite() { a * pa } else { 0.0 };
        let bpb = if b.is_finite() { b * pb } else { 0.0 };
        let second = mass + apa - bpb;
        let first = pa - pb;
        acc += second - 2.0 * l * first + l * l * mass;
    }
    acc
}

/// Distortion-minimizing step for a unit-variance Gaussian, cached per B.
pub fn optimal_gaussian_step(bits: u8) -> Result<f64> {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    if !(1..=MAX_BITS).contains(&bits) {
        return Err(Error::Config(format!("quantizer bits must be in 1..=8, got {bits}")));
    }
    let table = TABLE.get_or_init(|| (1..=MAX_BITS).map(minimize_step).collect());
    Ok(table[bits as usize - 1])
}

fn minimize_step(bits: u8) -> f64 {
    let f = |d: f64| gaussian_distortion(bits, d);
    let (lo, hi) = (1e-3f64.ln(), 4f64.ln());
    let n = 400;
    let grid: Vec<f64> = (0..=n).map(|i| (lo + (hi - lo) * i as f64 / n as f64).exp()).collect();
    let i = (0..=n).min_by(|&a, &b| f(grid[a]).total_cmp(&f(grid[b]))).unwrap();
    let (mut a, mut b) = (grid[i.saturating_sub(1)], grid[(i + 1).min(n)]);
    let invphi = (5f64.sqrt() - 1.0) / 2.0;
    while b - a > 1e-12 * b {
        let x1 = b - invphi * (b - a);
        let x2 = a + invphi * (b - a);
        if f(x1) <= f(x2) {
            b = x2;
        } else {
            a = x1;
        }
    }
    0.5 * (a + b)
}

/// Closed-form Bussgang gain for complex input of variance σ_u².
pub fn bussgang_gain(spec: &QuantizerSpec, sigma_u2: f64) -> f64 {
    let levels = 1i64 << spec.bits;
    let d = spec.step;
    let sum: f64 = (1..levels)
        .map(|l| {
            let k = (l - levels / 2) as f64;
            (-d * d * k * k / sigma_u2).exp()
        })
        .sum();
    d / (PI * sigma_u2).sqrt() * sum
}

/// Transmit-side DAC behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dac {
    /// Unquantized.
    Ideal,
    /// Per-antenna uniform quantizer; `step: None` selects the Gaussian-optimal
    /// step for that antenna's input variance.
    Uniform { bits: u8, step: Option<f64> },
    /// Constant modulus √(P/A) with phase snapped to the centres of 2^B
    /// sectors.
    ConstantEnvelope { bits: u8 },
}

impl Dac {
    pub fn uniform(bits: u8) -> Self {
        if bits == 0 {
            Dac::Ideal
        } else {
            Dac::Uniform { bits, step: None }
        }
    }

    /// Quantizer for an antenna whose complex input variance is `sigma_m2`.
    pub fn spec_for(&self, sigma_m2: f64) -> Result<Option<QuantizerSpec>> {
        match *self {
            Dac::Uniform { bits, step } => {
                let rule = match step {
                    Some(d) => StepRule::Fixed(d),
                    None => StepRule::Auto {
                        sigma_in: (sigma_m2 / 2.0).sqrt(),
                    },
                };
                make_quantizer(bits, rule).map(Some)
            }
            _ => Ok(None),
        }
    }
}

/// One antenna's quantizer under a given DAC, ready to apply.
#[derive(Debug, Clone)]
enum AntennaQuantizer {
    Ideal,
    Uniform(QuantizerSpec),
    Phase { modulus: f64, sectors: u32 },
}

impl AntennaQuantizer {
    fn apply(&self, x: Complex64) -> Complex64 {
        match self {
            AntennaQuantizer::Ideal => x,
            AntennaQuantizer::Uniform(s) => s.quantize_complex(x),
            AntennaQuantizer::Phase { modulus, sectors } => {
                let k = *sectors as f64;
                let width = 2.0 * PI / k;
                let theta = x.arg().rem_euclid(2.0 * PI);
                let idx = (theta / width).floor().min(k - 1.0);
                Complex64::from_polar(*modulus, (idx + 0.5) * width)
            }
        }
    }
}

fn antenna_quantizers(p: &CMatrix, dac: &Dac) -> Result<Vec<AntennaQuantizer>> {
    let a = p.nrows();
    let total = frobenius_sq(p);
    (0..a)
        .map(|m| {
            let sigma_m2 = p.row(m).iter().map(|v| v.norm_sqr()).sum::<f64>();
            Ok(match *dac {
                Dac::Ideal => AntennaQuantizer::Ideal,
                Dac::Uniform { .. } => {
                    if sigma_m2 == 0.0 {
                        AntennaQuantizer::Ideal
                    } else {
                        AntennaQuantizer::Uniform(dac.spec_for(sigma_m2)?.expect("uniform dac"))
                    }
                }
                Dac::ConstantEnvelope { bits } => {
                    if !(1..=MAX_BITS).contains(&bits) {
                        return Err(Error::Config(format!("phase bits must be in 1..=8, got {bits}")));
                    }
                    AntennaQuantizer::Phase {
                        modulus: (total / a as f64).sqrt(),
                        sectors: 1 << bits,
                    }
                }
            })
        })
        .collect()
}

/// Diagonal Bussgang model of the DAC driven by z = P s, E[ssᴴ] = I.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BussgangModel {
    /// Diagonal of F, one entry per antenna.
    pub gains: Vec<f64>,
    /// (1 − F_mm)(U σ² + 1), the distortion term entering the WFQ
    /// regularizer.
    pub sigma_d2: Vec<f64>,
    /// [P Pᴴ]_mm.
    pub sigma_m2: Vec<f64>,
    /// Exact Gaussian-input distortion E|Q(z) − F z|² per antenna.
    pub distortion: Vec<f64>,
    /// Expected E|Q(z)|² per antenna.
    pub output_power: Vec<f64>,
}

impl BussgangModel {
    pub fn f_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_diagonal(&DVector::from_vec(self.gains.clone()))
    }
}

pub fn bussgang_model(p: &CMatrix, dac: &Dac, sigma2: f64, users: usize) -> Result<BussgangModel> {
    if frobenius_sq(p) == 0.0 {
        return Err(Error::Domain("precoder is the zero matrix".into()));
    }
    let quant = antenna_quantizers(p, dac)?;
    let a = p.nrows();
    let mut out = BussgangModel {
        gains: Vec::with_capacity(a),
        sigma_d2: Vec::with_capacity(a),
        sigma_m2: Vec::with_capacity(a),
        distortion: Vec::with_capacity(a),
        output_power: Vec::with_capacity(a),
    };
    for (m, q) in quant.iter().enumerate() {
        let s2 = p.row(m).iter().map(|v| v.norm_sqr()).sum::<f64>();
        let (gain, power) = if s2 == 0.0 {
            (1.0, 0.0)
        } else {
            match q {
                AntennaQuantizer::Ideal => (1.0, s2),
                AntennaQuantizer::Uniform(spec) => (bussgang_gain(spec, s2), 2.0 * spec.gaussian_output_power(s2 / 2.0)),
                AntennaQuantizer::Phase { modulus, sectors } => {
                    let k = *sectors as f64;
                    let g = modulus * PI.sqrt() / (2.0 * s2.sqrt()) * (k / PI) * (PI / k).sin();
                    (g, modulus * modulus)
                }
            }
        };
        out.gains.push(gain);
        out.sigma_m2.push(s2);
        out.sigma_d2.push((1.0 - gain) * (users as f64 * sigma2 + 1.0));
        out.distortion.push((power - gain * gain * s2).max(0.0));
        out.output_power.push(power);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecoderKind {
    Mrt,
    Zf,
    Wf,
    Wfq,
    Qce,
}

impl PrecoderKind {
    pub fn name(&self) -> &'static str {
        match self {
            PrecoderKind::Mrt => "mrt",
            PrecoderKind::Zf => "zf",
            PrecoderKind::Wf => "wf",
            PrecoderKind::Wfq => "wfq",
            PrecoderKind::Qce => "qce",
        }
    }

    /// The DAC this precoder drives when the link runs at `bits` bits
    /// (0 = ideal).
    pub fn dac(&self, bits: u8) -> Dac {
        match (self, bits) {
            (_, 0) => Dac::Ideal,
            (PrecoderKind::Qce, b) => Dac::ConstantEnvelope { bits: b },
            (_, b) => Dac::uniform(b),
        }
    }
}

/// A×U precoding matrix with tr(PPᴴ) = P_total.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecodeOutput {
    pub p: CMatrix,
    /// Receiver scalar minimizing E‖s − β Ĥ P s − β n‖² under the estimated
    /// channel and ideal DACs.
    pub beta: f64,
    pub kind: PrecoderKind,
}

fn normalize_power(p: CMatrix, p_total: f64) -> Result<CMatrix> {
    let tr = frobenius_sq(&p);
    if !(tr > 0.0) || !tr.is_finite() {
        return Err(Error::Numerical(format!("precoder power {tr} cannot be normalized")));
    }
    Ok(p * Complex64::from((p_total / tr).sqrt()))
}

fn mmse_beta(h: &CMatrix, p: &CMatrix, sigma2: f64) -> f64 {
    let hp = h * p;
    let num = hp.trace().re;
    let den = frobenius_sq(&hp) + h.nrows() as f64 * sigma2;
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

fn finish(p: CMatrix, h: &CMatrix, sigma2: f64, p_total: f64, kind: PrecoderKind) -> Result<PrecodeOutput> {
    let p = normalize_power(p, p_total)?;
    let beta = mmse_beta(h, &p, sigma2);
    Ok(PrecodeOutput { p, beta, kind })
}

/// Ĥᴴ(ĤĤᴴ + U θ I)⁻¹ for scalar θ.
fn regularized_inverse(h: &CMatrix, theta: f64) -> Result<CMatrix> {
    let u = h.nrows();
    let mut gram = h * h.adjoint();
    for i in 0..u {
        gram[(i, i)] += c(u as f64 * theta, 0.0);
    }
    Ok(solve_hpd(&gram, h)?.adjoint())
}

/// (ĤᴴĤ + U·diag(θ))⁻¹ Ĥᴴ, the antenna-domain form for per-antenna θ.
fn regularized_inverse_diag(h: &CMatrix, theta: &[f64]) -> Result<CMatrix> {
    let u = h.nrows();
    let mut gram = h.adjoint() * h;
    for (i, t) in theta.iter().enumerate() {
        gram[(i, i)] += c(u as f64 * t, 0.0);
    }
    solve_hpd(&gram, &h.adjoint())
}

pub fn wf_precode(h: &CMatrix, sigma2: f64, p_total: f64) -> Result<PrecodeOutput> {
    if !(sigma2 >= 0.0) {
        return Err(Error::Domain(format!("noise variance must be >= 0, got {sigma2}")));
    }
    let p = regularized_inverse(h, sigma2)?;
    finish(p, h, sigma2, p_total, PrecoderKind::Wf)
}

#[derive(Debug, Clone)]
pub struct WfqResult {
    pub output: PrecodeOutput,
    pub model: BussgangModel,
    /// Relative change of σ_d² at each iteration.
    pub trace: Vec<f64>,
    pub converged: bool,
}

const WFQ_MAX_ITERS: usize = 10;
const WFQ_TOL: f64 = 1e-6;

/// Quantization-aware Wiener filter: θ = σ² + σ_d² iterated to a fixed point.
pub fn wfq_precode(h: &CMatrix, sigma2: f64, p_total: f64, dac: &Dac) -> Result<WfqResult> {
    let users = h.nrows();
    let mut out = wf_precode(h, sigma2, p_total)?;
    out.kind = PrecoderKind::Wfq;
    let mut model = bussgang_model(&out.p, dac, sigma2, users)?;
    if *dac == Dac::Ideal {
        return Ok(WfqResult {
            output: out,
            model,
            trace: vec![0.0],
            converged: true,
        });
    }
    let mut sd2 = vec![0.0; h.ncols()];
    let mut trace = Vec::new();
    let mut converged = false;
    for _ in 0..WFQ_MAX_ITERS {
        let next = model.sigma_d2.clone();
        let diff: f64 = next.iter().zip(&sd2).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rel = if norm > 0.0 { diff / norm } else { diff };
        trace.push(rel);
        sd2 = next;
        if rel < WFQ_TOL {
            converged = true;
            break;
        }
        let uniform = sd2.iter().all(|&v| (v - sd2[0]).abs() <= 1e-12 * sd2[0].abs().max(1e-300));
        let p = if uniform {
            regularized_inverse(h, sigma2 + sd2[0])?
        } else {
            let theta: Vec<f64> = sd2.iter().map(|v| sigma2 + v).collect();
            regularized_inverse_diag(h, &theta)?
        };
        out = finish(p, h, sigma2, p_total, PrecoderKind::Wfq)?;
        model = bussgang_model(&out.p, dac, sigma2, users)?;
    }
    Ok(WfqResult {
        output: out,
        model,
        trace,
        converged,
    })
}

/// MRT, ZF and QCE. QCE returns the WF matrix; its constant-envelope
/// quantization happens at transmission through [`Dac::ConstantEnvelope`].
pub fn baseline_precode(kind: PrecoderKind, h: &CMatrix, sigma2: f64, p_total: f64) -> Result<PrecodeOutput> {
    match kind {
        PrecoderKind::Mrt => finish(h.adjoint(), h, sigma2, p_total, kind),
        PrecoderKind::Zf => {
            let gram = h * h.adjoint();
            let ev = eigvalsh_desc(&gram);
            let (hi, lo) = (ev[0], *ev.last().unwrap());
            if !(lo > 1e-12 * hi) {
                return Err(Error::Numerical(format!(
                    "zero-forcing needs full row rank (eigenvalue ratio {:e})",
                    lo / hi
                )));
            }
            let p = solve_hpd(&gram, h)?.adjoint();
            finish(p, h, sigma2, p_total, kind)
        }
        PrecoderKind::Wf => wf_precode(h, sigma2, p_total),
        PrecoderKind::Qce => {
            let mut out = wf_precode(h, sigma2, p_total)?;
            out.kind = PrecoderKind::Qce;
            Ok(out)
        }
        PrecoderKind::Wfq => Err(Error::Config("wfq is built by wfq_precode".into())),
    }
}

/// Q(P s).
pub fn transmit(out: &PrecodeOutput, s: &[Complex64], dac: &Dac) -> Result<Vec<Complex64>> {
    if s.len() != out.p.ncols() {
        return Err(Error::Shape(format!("{} symbols for {} users", s.len(), out.p.ncols())));
    }
    let x = &out.p * CMatrix::from_column_slice(s.len(), 1, s);
    let quant = antenna_quantizers(&out.p, dac)?;
    Ok((0..x.nrows()).map(|m| quant[m].apply(x[(m, 0)])).collect())
}

/// Q(P S) for a block of symbol vectors (columns of `s`).
pub fn transmit_block(p: &CMatrix, s: &CMatrix, dac: &Dac) -> Result<CMatrix> {
    let mut x = p * s;
    let quant = antenna_quantizers(p, dac)?;
    for (m, q) in quant.iter().enumerate() {
        if let AntennaQuantizer::Ideal = q {
            continue;
        }
        for t in 0..x.ncols() {
            x[(m, t)] = q.apply(x[(m, t)]);
        }
    }
    Ok(x)
}

/// Scalar applied after the DAC so that expected radiated power is P_total.
pub fn output_renormalization(model: &BussgangModel, p_total: f64) -> f64 {
    let power: f64 = model.output_power.iter().sum();
    if power > 0.0 {
        (p_total / power).sqrt()
    } else {
        1.0
    }
}

/// Receiver scalar β minimizing E‖s − β H x‖² − with x = r·Q(P s) linearized
/// as r(F P s + d) − evaluated with the propagation channel `h`.
pub fn receiver_gain(h: &CMatrix, p: &CMatrix, model: &BussgangModel, renorm: f64, sigma2: f64) -> f64 {
    let f = CMatrix::from_diagonal(&DVector::from_iterator(model.gains.len(), model.gains.iter().map(|&g| c(g, 0.0))));
    let hfp = h * f * p;
    let distortion: f64 = (0..h.ncols())
        .map(|m| model.distortion[m] * h.column(m).iter().map(|v| v.norm_sqr()).sum::<f64>())
        .sum();
    let num = renorm * hfp.trace().re;
    let den = renorm * renorm * (frobenius_sq(&hfp) + distortion) + h.nrows() as f64 * sigma2;
    if den > 0.0 {
        num / den
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{complex_gaussian, gen_channel, SystemDims};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;
    use rand::Rng;

    #[test]
    fn two_bit_levels() {
        let q = make_quantizer(2, StepRule::Fixed(1.0)).unwrap();
        assert_eq!(q.labels, vec![-1.5, -0.5, 0.5, 1.5]);
        assert_eq!(q.thresholds, vec![-1.0, 0.0, 1.0]);
        assert_eq!(q.quantize_real(0.3), 0.5);
        assert_eq!(q.quantize_real(-1.2), -1.5);
        assert_eq!(q.quantize_real(2.9), 1.5);
        assert_eq!(q.quantize_real(0.0), 0.5);
    }

    #[test]
    fn one_bit_is_sign() {
        let q = make_quantizer(1, StepRule::Fixed(2.0)).unwrap();
        assert_eq!(q.labels, vec![-1.0, 1.0]);
        for x in [-3.0, -0.1, 0.2, 7.0] {
            assert_eq!(q.quantize_real(x), if x < 0.0 { -1.0 } else { 1.0 });
        }
        assert!(make_quantizer(0, StepRule::Fixed(1.0)).is_err());
        assert!(make_quantizer(9, StepRule::Fixed(1.0)).is_err());
    }

    #[test]
    fn optimal_steps() {
        let d3 = make_quantizer(3, StepRule::Auto { sigma_in: 1.0 }).unwrap().step;
        assert!((d3 - 0.586).abs() < 0.01, "{d3}");
        // Independent Monte-Carlo oracle: the optimum beats its neighbours.
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let xs: Vec<f64> = (0..200_000).map(|_| r.sample(StandardNormal)).collect();
        let mc = |d: f64| {
            let q = make_quantizer(3, StepRule::Fixed(d)).unwrap();
            xs.iter().map(|&x| (q.quantize_real(x) - x).powi(2)).sum::<f64>() / xs.len() as f64
        };
        assert!(mc(d3) < mc(d3 * 0.85) && mc(d3) < mc(d3 * 1.15));
        assert!((mc(d3) - gaussian_distortion(3, d3)).abs() < 1e-3);
    }

    #[test]
    fn four_bit_distortion() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Complex64> = (0..100_000)
            .map(|_| Complex64::new(r.sample(StandardNormal), r.sample(StandardNormal)))
            .collect();
        let q = make_quantizer(4, StepRule::Auto { sigma_in: 1.0 }).unwrap();
        let y = quantize(&x, &q);
        let num: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).norm_sqr()).sum();
        let den: f64 = x.iter().map(|a| a.norm_sqr()).sum();
        assert!(num / den < 0.012, "{}", num / den);
    }

    #[test]
    fn gain_increases_with_bits() {
        let g: Vec<f64> = (1..=8)
            .map(|b| {
                let spec = make_quantizer(b, StepRule::Auto { sigma_in: FRAC_1_SQRT_2 }).unwrap();
                bussgang_gain(&spec, 1.0)
            })
            .collect();
        assert!(g.windows(2).all(|w| w[1] > w[0]), "{g:?}");
        assert!((g[7] - 1.0).abs() < 1e-3);
        assert!(g.iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn one_bit_gain_closed_form() {
        let spec = make_quantizer(1, StepRule::Fixed(0.7)).unwrap();
        let s2 = 1.9;
        assert!((bussgang_gain(&spec, s2) - 0.7 / (PI * s2).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn gain_matches_correlation() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let s2: f64 = 2.3;
        for bits in [1, 2, 3, 4] {
            let spec = make_quantizer(bits, StepRule::Auto { sigma_in: (s2 / 2.0).sqrt() }).unwrap();
            let (mut num, mut den) = (Complex64::default(), 0.0);
            for _ in 0..1_000_000 {
                let re: f64 = r.sample(StandardNormal);
                let im: f64 = r.sample(StandardNormal);
                let u = Complex64::new(re, im) * (s2 / 2.0).sqrt();
                num += spec.quantize_complex(u) * u.conj();
                den += u.norm_sqr();
            }
            let g = bussgang_gain(&spec, s2);
            assert!((num.re / den / g - 1.0).abs() < 0.01, "B={bits}");
        }
    }

    #[test]
    fn zero_input_maps_to_upper_labels() {
        let dims = SystemDims::new(3, 8).unwrap();
        let h = gen_channel(dims, &mut ChaCha8Rng::seed_from_u64(4)).h;
        let out = wf_precode(&h, 0.1, 1.0).unwrap();
        let dac = Dac::Uniform { bits: 2, step: Some(0.2) };
        let z = transmit(&out, &[Complex64::default(); 3], &dac).unwrap();
        assert!(z.iter().all(|v| *v == Complex64::new(0.1, 0.1)));
        let s = [c(1.0, 0.0), c(0.0, 1.0), c(-1.0, 0.5)];
        let lin = transmit(&out, &s, &Dac::Ideal).unwrap();
        let direct = &out.p * CMatrix::from_column_slice(3, 1, &s);
        assert!(lin.iter().zip(direct.iter()).all(|(a, b)| (a - b).norm() < 1e-15));
    }

    #[test]
    fn wf_zero_noise_is_zf() {
        let dims = SystemDims::new(4, 5).unwrap();
        let h = gen_channel(dims, &mut ChaCha8Rng::seed_from_u64(5)).h;
        let out = wf_precode(&h, 1e-14, 1.0).unwrap();
        let hp = &h * &out.p;
        let cc = hp.trace() / 4.0;
        let err = frobenius_sq(&(hp - CMatrix::identity(4, 4) * cc)).sqrt() / (4.0f64.sqrt() * cc.norm());
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn zf_contract_and_rank_check() {
        let dims = SystemDims::new(6, 20).unwrap();
        let h = gen_channel(dims, &mut ChaCha8Rng::seed_from_u64(6)).h;
        let out = baseline_precode(PrecoderKind::Zf, &h, 0.1, 1.0).unwrap();
        let hp = &h * &out.p;
        let cc = hp.trace() / 6.0;
        let err = frobenius_sq(&(hp - CMatrix::identity(6, 6) * cc)).sqrt() / (6.0f64.sqrt() * cc.norm());
        assert!(err < 1e-8);
        let mut low = h.clone();
        let r0 = low.row(0).into_owned();
        low.row_mut(1).copy_from(&r0);
        assert!(baseline_precode(PrecoderKind::Zf, &low, 0.1, 1.0).is_err());
    }

    #[test]
    fn single_user_collinear() {
        let dims = SystemDims::new(1, 8).unwrap();
        let h = gen_channel(dims, &mut ChaCha8Rng::seed_from_u64(7)).h;
        let mrt = baseline_precode(PrecoderKind::Mrt, &h, 0.1, 1.0).unwrap().p;
        let zf = baseline_precode(PrecoderKind::Zf, &h, 0.1, 1.0).unwrap().p;
        assert!(frobenius_sq(&(mrt - zf)) < 1e-24);
    }

    #[test]
    fn power_contract() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..5 {
            let h = complex_gaussian(10, 40, 1.0 / 40.0, &mut r);
            for kind in [PrecoderKind::Mrt, PrecoderKind::Zf, PrecoderKind::Wf, PrecoderKind::Qce] {
                let out = baseline_precode(kind, &h, 0.3, 2.5).unwrap();
                assert!((frobenius_sq(&out.p) - 2.5).abs() < 1e-10);
            }
            let w = wfq_precode(&h, 0.3, 2.5, &Dac::uniform(3)).unwrap();
            assert!((frobenius_sq(&w.output.p) - 2.5).abs() < 1e-10);
        }
    }

    #[test]
    fn qce_constant_envelope() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let h = complex_gaussian(8, 32, 1.0 / 32.0, &mut r);
        let out = baseline_precode(PrecoderKind::Qce, &h, 0.1, 1.0).unwrap();
        let s: Vec<Complex64> = (0..8).map(|k| Complex64::from_polar(1.0, k as f64)).collect();
        let dac = PrecoderKind::Qce.dac(3);
        let z = transmit(&out, &s, &dac).unwrap();
        let target = (1.0f64 / 32.0).sqrt();
        for v in &z {
            assert!((v.norm() / target - 1.0).abs() < 1e-12);
            // Phase on a sector centre.
            let k = v.arg().rem_euclid(2.0 * PI) / (2.0 * PI / 8.0) - 0.5;
            assert!((k - k.round()).abs() < 1e-9);
        }
    }

    #[test]
    fn ideal_wfq_equals_wf() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let h = complex_gaussian(8, 32, 1.0 / 32.0, &mut r);
        let wf = wf_precode(&h, 0.2, 1.0).unwrap();
        let wfq = wfq_precode(&h, 0.2, 1.0, &Dac::Ideal).unwrap();
        assert_eq!(wf.p, wfq.output.p);
        assert!(wfq.model.sigma_d2.iter().all(|&v| v == 0.0));
        assert!(wfq.model.gains.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn wfq_trace_contracts() {
        let dims = SystemDims::new(30, 256).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let h = gen_channel(dims, &mut r).h;
            let w = wfq_precode(&h, 0.1, 1.0, &Dac::uniform(3)).unwrap();
            assert!(w.converged);
            assert!(w.trace.windows(2).all(|p| p[1] <= p[0]), "{:?}", w.trace);
        }
    }

    #[test]
    fn zero_row_has_unit_gain() {
        let mut p = CMatrix::from_element(3, 2, c(0.3, 0.1));
        p.row_mut(1).fill(Complex64::default());
        let m = bussgang_model(&p, &Dac::uniform(2), 0.1, 2).unwrap();
        assert_eq!(m.gains[1], 1.0);
        assert_eq!(m.sigma_d2[1], 0.0);
    }

    #[test]
    fn expected_output_power_matches_monte_carlo() {
        let dims = SystemDims::new(30, 256).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let h = gen_channel(dims, &mut r).h;
        let out = wf_precode(&h, 0.1, 1.0).unwrap();
        let dac = Dac::uniform(2);
        let model = bussgang_model(&out.p, &dac, 0.1, 30).unwrap();
        let expect: f64 = model.output_power.iter().sum();
        let trials = 2000;
        let s = CMatrix::from_fn(30, trials, |_, _| {
            let b: u8 = r.gen_range(0..4);
            Complex64::new(1.0 - 2.0 * (b & 1) as f64, 1.0 - 2.0 * (b >> 1) as f64) * FRAC_1_SQRT_2
        });
        let z = transmit_block(&out.p, &s, &dac).unwrap();
        let mc = frobenius_sq(&z) / trials as f64;
        assert!((mc / expect - 1.0).abs() < 0.02, "{mc} vs {expect}");
    }
}
