//! Seeded Monte-Carlo harness for the quantized downlink.

pub mod experiment;
pub mod modulation;
pub mod rng;

use num_complex::Complex64;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};

use crate::channel::{complex_gaussian, gen_channel, CorruptionMode, CorruptionModel, SystemDims};
use crate::error::{Error, Result};
use crate::eta::{default_order, estimate_eta, EstimatorConfig};
use crate::linalg::CMatrix;
use crate::precoder::{
    baseline_precode, bussgang_model, output_renormalization, receiver_gain, transmit_block, wfq_precode,
    PrecoderKind,
};
use crate::rie::{clean_channel, mse, CleanSettings, ShrinkVariant};
use crate::rmt::TheoryMode;

pub use experiment::{run_experiment, ExperimentKind, ExperimentResult, Table};
pub use modulation::{demodulate, modulate, Modulation};
use rng::{substream, Purpose};

/// Which channel the transmitter precodes with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CsiMode {
    Perfect,
    NoisyRaw,
    EiCleaned,
    EiCleanedKnownEta,
}

impl CsiMode {
    pub fn name(self) -> &'static str {
        match self {
            CsiMode::Perfect => "perfect",
            CsiMode::NoisyRaw => "noisy_raw",
            CsiMode::EiCleaned => "ei_cleaned",
            CsiMode::EiCleanedKnownEta => "ei_cleaned_known_eta",
        }
    }
}

#[derive(Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

fn one_or_many<'de, D, T>(d: D) -> std::result::Result<Vec<T>, D::Error>
where
    D: Deserializer<'de>,
    T: Deserialize<'de>,
{
    Ok(match OneOrMany::deserialize(d)? {
        OneOrMany::One(v) => vec![v],
        OneOrMany::Many(v) => v,
    })
}

fn d_eta() -> Vec<f64> {
    vec![0.0]
}
fn d_mode() -> CorruptionMode {
    CorruptionMode::Additive
}
fn d_c() -> f64 {
    1.0
}
fn d_precoder() -> Vec<PrecoderKind> {
    vec![PrecoderKind::Wfq]
}
fn d_csi() -> Vec<CsiMode> {
    vec![CsiMode::EiCleaned]
}
fn d_bits() -> Vec<u8> {
    vec![4]
}
fn d_modulation() -> Modulation {
    Modulation::Qpsk
}
fn d_snr() -> Vec<f64> {
    vec![10.0]
}
fn d_trials() -> u64 {
    100
}
fn d_symbols() -> usize {
    100
}
fn d_min_errors() -> u64 {
    100
}
fn d_max_bits() -> u64 {
    10_000_000
}
fn d_theory() -> TheoryMode {
    TheoryMode::GaussianEquivalent
}
fn d_shrink() -> ShrinkVariant {
    ShrinkVariant::Anchored
}
fn d_spectrum_samples() -> usize {
    8
}
fn d_bins() -> usize {
    50
}

/// Flat experiment description. List-valued keys also accept a scalar.
///
/// SNR(dB) = 10·log10(P_total/σ²) with P_total = 1 and unit-variance
/// channel entries on the radiated link; σ² is each user's noise variance.
/// CSI estimation and cleaning use the same channel scaled to variance 1/A.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub users: usize,
    #[serde(deserialize_with = "one_or_many")]
    pub antennas: Vec<usize>,
    #[serde(default = "d_eta", deserialize_with = "one_or_many")]
    pub eta: Vec<f64>,
    #[serde(default = "d_mode")]
    pub corruption: CorruptionMode,
    #[serde(default = "d_c")]
    pub c: f64,
    #[serde(default = "d_precoder", deserialize_with = "one_or_many")]
    pub precoder: Vec<PrecoderKind>,
    #[serde(default = "d_csi", deserialize_with = "one_or_many")]
    pub csi: Vec<CsiMode>,
    /// DAC resolution; 0 bypasses quantization.
    #[serde(default = "d_bits", deserialize_with = "one_or_many")]
    pub bits: Vec<u8>,
    #[serde(default = "d_modulation")]
    pub modulation: Modulation,
    #[serde(default = "d_snr", deserialize_with = "one_or_many")]
    pub snr_db: Vec<f64>,
    /// Upper bound on trials; BER runs stop earlier once every point is
    /// resolved.
    #[serde(default = "d_trials")]
    pub trials: u64,
    #[serde(default = "d_symbols")]
    pub symbols_per_trial: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_min_errors")]
    pub min_errors: u64,
    #[serde(default = "d_max_bits")]
    pub max_bits: u64,
    /// Cumulant matching order; unset picks by system size.
    #[serde(default)]
    pub estimator_order: Option<u8>,
    #[serde(default = "d_theory")]
    pub theory: TheoryMode,
    #[serde(default = "d_shrink")]
    pub shrink: ShrinkVariant,
    #[serde(default = "d_spectrum_samples")]
    pub spectrum_samples: usize,
    #[serde(default = "d_bins")]
    pub histogram_bins: usize,
}

impl SimConfig {
    /// Defaults for everything except the dimensions.
    pub fn new(users: usize, antennas: usize) -> Self {
        SimConfig {
            users,
            antennas: vec![antennas],
            eta: d_eta(),
            corruption: d_mode(),
            c: d_c(),
            precoder: d_precoder(),
            csi: d_csi(),
            bits: d_bits(),
            modulation: d_modulation(),
            snr_db: d_snr(),
            trials: d_trials(),
            symbols_per_trial: d_symbols(),
            seed: 0,
            min_errors: d_min_errors(),
            max_bits: d_max_bits(),
            estimator_order: None,
            theory: d_theory(),
            shrink: d_shrink(),
            spectrum_samples: d_spectrum_samples(),
            histogram_bins: d_bins(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let empty = |name: &str, len: usize| {
            if len == 0 {
                Err(Error::Config(format!("`{name}` must list at least one value")))
            } else {
                Ok(())
            }
        };
        empty("antennas", self.antennas.len())?;
        empty("eta", self.eta.len())?;
        empty("precoder", self.precoder.len())?;
        empty("csi", self.csi.len())?;
        empty("bits", self.bits.len())?;
        empty("snr_db", self.snr_db.len())?;
        for &a in &self.antennas {
            SystemDims::new(self.users, a).map_err(|e| Error::Config(format!("`antennas`/`users`: {e}")))?;
        }
        for &e in &self.eta {
            CorruptionModel::new(e, self.corruption, self.c).map_err(|e| Error::Config(format!("`eta`/`c`: {e}")))?;
        }
        if let Some(&b) = self.bits.iter().find(|&&b| b > crate::precoder::MAX_BITS) {
            return Err(Error::Config(format!("`bits` must be 0..=8, got {b}")));
        }
        if let Some(s) = self.snr_db.iter().find(|s| !s.is_finite()) {
            return Err(Error::Config(format!("`snr_db` must be finite, got {s}")));
        }
        if self.trials == 0 || self.trials > rng::MAX_TRIALS {
            return Err(Error::Config(format!("`trials` must be in 1..={}", rng::MAX_TRIALS)));
        }
        if self.symbols_per_trial == 0 {
            return Err(Error::Config("`symbols_per_trial` must be at least 1".into()));
        }
        if self.max_bits == 0 {
            return Err(Error::Config("`max_bits` must be at least 1".into()));
        }
        if let Some(o) = self.estimator_order {
            if !(1..=3).contains(&o) {
                return Err(Error::Config(format!("`estimator_order` must be 1, 2 or 3, got {o}")));
            }
        }
        if self.spectrum_samples == 0 || self.histogram_bins == 0 {
            return Err(Error::Config("`spectrum_samples` and `histogram_bins` must be positive".into()));
        }
        Ok(())
    }

    fn estimator(&self, dims: SystemDims) -> EstimatorConfig {
        EstimatorConfig {
            order: self.estimator_order.unwrap_or_else(|| default_order(dims)),
            mode: self.theory,
            data_mode: self.corruption,
            c: self.c,
            ..Default::default()
        }
    }

    fn clean_settings(&self) -> CleanSettings {
        CleanSettings {
            data_mode: self.corruption,
            c: self.c,
            variant: self.shrink,
        }
    }

    /// BER grid in canonical order: antennas, η, CSI, precoder, bits, SNR.
    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &antennas in &self.antennas {
            for &eta in &self.eta {
                for &csi in &self.csi {
                    for &precoder in &self.precoder {
                        for &bits in &self.bits {
                            for &snr_db in &self.snr_db {
                                out.push(GridPoint {
                                    antennas,
                                    eta,
                                    csi,
                                    precoder,
                                    bits,
                                    snr_db,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn csi_cells(&self) -> Vec<(usize, f64, CsiMode)> {
        let mut out = Vec::new();
        for &a in &self.antennas {
            for &e in &self.eta {
                for &c in &self.csi {
                    out.push((a, e, c));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GridPoint {
    pub antennas: usize,
    pub eta: f64,
    pub csi: CsiMode,
    pub precoder: PrecoderKind,
    pub bits: u8,
    pub snr_db: f64,
}

/// Per-point outcome of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointMetrics {
    /// None when the point was already resolved and skipped.
    pub counts: Option<(u64, u64)>,
    /// WFQ fixed-point convergence, when applicable.
    pub converged: Option<bool>,
}

/// CSI quality for one (antennas, η, CSI mode) cell of one trial.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsiMetrics {
    pub antennas: usize,
    pub eta: f64,
    pub csi: CsiMode,
    /// MSE of the channel used for precoding.
    pub mse: f64,
    /// MSE of the raw observation H̃.
    pub raw_mse: f64,
    pub eta_hat: Option<f64>,
    pub delta_eta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialMetrics {
    pub trial: u64,
    pub master_seed: u64,
    /// Aligned with [`SimConfig::grid`]; empty for CSI-only workloads.
    pub points: Vec<PointMetrics>,
    /// Aligned with the (antennas, η, CSI) cells in config order.
    pub csi: Vec<CsiMetrics>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Workload {
    /// Channel estimation and cleaning plus the BER link.
    Full,
    /// Channel estimation and cleaning only.
    CsiOnly,
}

fn sample_bits<R: Rng>(n: usize, rng: &mut R) -> Vec<u8> {
    (0..n).map(|_| rng.gen_range(0..2u8)).collect()
}

fn csi_estimate(
    cfg: &SimConfig,
    h: &CMatrix,
    observed: &CMatrix,
    eta: f64,
    mode: CsiMode,
    dims: SystemDims,
) -> Result<(CMatrix, Option<f64>)> {
    match mode {
        CsiMode::Perfect => Ok((h.clone(), None)),
        CsiMode::NoisyRaw => Ok((observed.clone(), None)),
        CsiMode::EiCleanedKnownEta => Ok((clean_channel(observed, eta, &cfg.clean_settings())?, None)),
        CsiMode::EiCleaned => {
            let est = estimate_eta(observed, dims.q(), &cfg.estimator(dims))?;
            Ok((clean_channel(observed, est.eta_hat, &cfg.clean_settings())?, Some(est.eta_hat)))
        }
    }
}

/// One independent realization: channel, corruption, CSI handling and, for
/// the full workload, the quantized downlink at every grid point.
///
/// The true channel always propagates; the configured CSI only shapes the
/// precoder. Channel, error, symbol and noise draws come from separate
/// substreams, so they do not depend on the CSI mode or precoder.
pub fn downlink_trial(cfg: &SimConfig, trial: u64) -> Result<TrialMetrics> {
    cfg.validate()?;
    trial_impl(cfg, trial, Workload::Full, None)
}

fn trial_impl(cfg: &SimConfig, trial: u64, workload: Workload, active: Option<&[bool]>) -> Result<TrialMetrics> {
    let grid = cfg.grid();
    let per_cell = cfg.precoder.len() * cfg.bits.len() * cfg.snr_db.len();
    let mut points = Vec::new();
    let mut csi_out = Vec::new();
    let t = cfg.symbols_per_trial;
    let bps = cfg.modulation.bits_per_symbol();
    let mut cell = 0usize;
    for &antennas in &cfg.antennas {
        let dims = SystemDims::new(cfg.users, antennas)?;
        let u = dims.users;
        let h = gen_channel(dims, &mut substream(cfg.seed, trial, Purpose::Channel));
        // Estimation and cleaning work on the 1/A-normalized channel; the
        // radiated link sees unit-variance entries, so SNR = P_total/σ² is
        // the per-antenna transmit SNR before array gain.
        let link_gain = Complex64::from((antennas as f64).sqrt());
        let h_link = &h.h * link_gain;
        let e_unit = complex_gaussian(u, antennas, 1.0 / antennas as f64, &mut substream(cfg.seed, trial, Purpose::CsiError));
        let (tx_bits, s, noise) = if workload == Workload::Full {
            let bits = sample_bits(u * t * bps, &mut substream(cfg.seed, trial, Purpose::Symbols));
            let sym = modulate(&bits, cfg.modulation)?;
            // Column j holds the U symbols of channel use j.
            let s = CMatrix::from_column_slice(u, t, &sym);
            let n = complex_gaussian(u, t, 1.0, &mut substream(cfg.seed, trial, Purpose::Noise));
            (bits, s, n)
        } else {
            (Vec::new(), CMatrix::zeros(0, 0), CMatrix::zeros(0, 0))
        };
        for &eta in &cfg.eta {
            let model = CorruptionModel::new(eta, cfg.corruption, cfg.c)?;
            let observed = crate::channel::corrupt_with(&h, &model, &e_unit).h;
            let raw_mse = mse(&h.h, &observed)?;
            for &mode in &cfg.csi {
                let (h_csi, eta_hat) = csi_estimate(cfg, &h.h, &observed, eta, mode, dims)?;
                csi_out.push(CsiMetrics {
                    antennas,
                    eta,
                    csi: mode,
                    mse: mse(&h.h, &h_csi)?,
                    raw_mse,
                    eta_hat,
                    delta_eta: eta_hat.map(|v| (v - eta).abs()),
                });
                if workload == Workload::Full {
                    let csi_link = &h_csi * link_gain;
                    for k in 0..per_cell {
                        let idx = cell * per_cell + k;
                        if active.is_some_and(|a| !a[idx]) {
                            points.push(PointMetrics {
                                counts: None,
                                converged: None,
                            });
                            continue;
                        }
                        points.push(link_point(&grid[idx], &h_link, &csi_link, &s, &noise, &tx_bits, cfg.modulation)?);
                    }
                }
                cell += 1;
            }
        }
    }
    Ok(TrialMetrics {
        trial,
        master_seed: cfg.seed,
        points,
        csi: csi_out,
    })
}

fn link_point(
    pt: &GridPoint,
    h: &CMatrix,
    h_csi: &CMatrix,
    s: &CMatrix,
    noise: &CMatrix,
    tx_bits: &[u8],
    scheme: Modulation,
) -> Result<PointMetrics> {
    let sigma2 = 10f64.powf(-pt.snr_db / 10.0);
    let users = h.nrows();
    let dac = pt.precoder.dac(pt.bits);
    let (p, model, converged) = match pt.precoder {
        PrecoderKind::Wfq => {
            let w = wfq_precode(h_csi, sigma2, 1.0, &dac)?;
            (w.output.p, w.model, Some(w.converged))
        }
        kind => {
            let out = baseline_precode(kind, h_csi, sigma2, 1.0)?;
            let model = bussgang_model(&out.p, &dac, sigma2, users)?;
            (out.p, model, None)
        }
    };
    let renorm = output_renormalization(&model, 1.0);
    let beta = receiver_gain(h, &p, &model, renorm, sigma2);
    let x = transmit_block(&p, s, &dac)? * Complex64::from(renorm);
    let y = h * x + noise * Complex64::from(sigma2.sqrt());
    let s_hat = y * Complex64::from(beta);
    let rx = demodulate(s_hat.as_slice(), scheme);
    let errors = rx.iter().zip(tx_bits).filter(|(a, b)| a != b).count() as u64;
    Ok(PointMetrics {
        counts: Some((errors, tx_bits.len() as u64)),
        converged,
    })
}

/// Wilson score interval at 95 % confidence.
pub fn wilson_interval(errors: u64, n: u64) -> (f64, f64) {
    if n == 0 {
        return (0.0, 1.0);
    }
    const Z: f64 = 1.959_963_984_540_054;
    let n = n as f64;
    let p = errors as f64 / n;
    let z2 = Z * Z;
    let centre = (p + z2 / (2.0 * n)) / (1.0 + z2 / n);
    let half = Z / (1.0 + z2 / n) * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt();
    ((centre - half).max(0.0), (centre + half).min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BerPoint {
    pub point: GridPoint,
    pub errors: u64,
    pub bits: u64,
    pub trials: u64,
    pub ber: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    /// Fewer than the target number of errors were observed.
    pub below_resolution: bool,
    pub unconverged: u64,
}

/// Per-trial samples for one (antennas, η, CSI) cell, in trial order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CsiSamples {
    pub antennas: usize,
    pub eta: f64,
    pub csi: CsiMode,
    pub mse: Vec<f64>,
    pub raw_mse: Vec<f64>,
    pub delta_eta: Vec<f64>,
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let rank = ((p * sorted.len() as f64).ceil() as usize).clamp(1, sorted.len());
    sorted[rank - 1]
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

impl CsiSamples {
    pub fn mse_mean(&self) -> f64 {
        self.mse.iter().sum::<f64>() / self.mse.len() as f64
    }

    pub fn raw_mse_mean(&self) -> f64 {
        self.raw_mse.iter().sum::<f64>() / self.raw_mse.len() as f64
    }

    pub fn mse_percentile(&self, p: f64) -> f64 {
        percentile(&sorted(&self.mse), p)
    }

    /// Fraction of trials where the precoding channel is no worse than H̃.
    pub fn improved_fraction(&self) -> f64 {
        let k = self.mse.iter().zip(&self.raw_mse).filter(|(m, r)| m <= r).count();
        k as f64 / self.mse.len() as f64
    }

    /// Empirical CDF of |η̂ − η| at each grid value (fraction ≤ x).
    pub fn delta_eta_cdf(&self, grid: &[f64]) -> Vec<f64> {
        let s = sorted(&self.delta_eta);
        grid.iter()
            .map(|&x| s.partition_point(|&v| v <= x) as f64 / s.len().max(1) as f64)
            .collect()
    }

    /// Fraction of trials with |η̂ − η| strictly below `x`.
    pub fn delta_eta_below(&self, x: f64) -> f64 {
        self.delta_eta.iter().filter(|&&v| v < x).count() as f64 / self.delta_eta.len().max(1) as f64
    }
}

/// Pooled Monte-Carlo statistics, reduced in trial-index order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Aggregate {
    pub trials_run: u64,
    pub ber: Vec<BerPoint>,
    pub csi: Vec<CsiSamples>,
}

impl Aggregate {
    fn empty(cfg: &SimConfig, workload: Workload) -> Self {
        let ber = if workload == Workload::Full {
            cfg.grid()
                .into_iter()
                .map(|point| BerPoint {
                    point,
                    errors: 0,
                    bits: 0,
                    trials: 0,
                    ber: 0.0,
                    ci_lo: 0.0,
                    ci_hi: 1.0,
                    below_resolution: true,
                    unconverged: 0,
                })
                .collect()
        } else {
            Vec::new()
        };
        let csi = cfg
            .csi_cells()
            .into_iter()
            .map(|(antennas, eta, csi)| CsiSamples {
                antennas,
                eta,
                csi,
                mse: Vec::new(),
                raw_mse: Vec::new(),
                delta_eta: Vec::new(),
            })
            .collect();
        Aggregate {
            trials_run: 0,
            ber,
            csi,
        }
    }

    fn absorb(&mut self, m: &TrialMetrics, min_errors: u64) {
        self.trials_run += 1;
        for (b, p) in self.ber.iter_mut().zip(&m.points) {
            if let Some((e, n)) = p.counts {
                b.errors += e;
                b.bits += n;
                b.trials += 1;
                b.ber = b.errors as f64 / b.bits as f64;
                (b.ci_lo, b.ci_hi) = wilson_interval(b.errors, b.bits);
                b.below_resolution = b.errors < min_errors;
            }
            if p.converged == Some(false) {
                b.unconverged += 1;
            }
        }
        for (c, m) in self.csi.iter_mut().zip(&m.csi) {
            c.mse.push(m.mse);
            c.raw_mse.push(m.raw_mse);
            if let Some(d) = m.delta_eta {
                c.delta_eta.push(d);
            }
        }
    }

    pub fn find_ber(&self, f: impl Fn(&GridPoint) -> bool) -> Option<&BerPoint> {
        self.ber.iter().find(|b| f(&b.point))
    }

    pub fn find_csi(&self, antennas: usize, eta: f64, csi: CsiMode) -> Option<&CsiSamples> {
        self.csi
            .iter()
            .find(|c| c.antennas == antennas && c.eta == eta && c.csi == csi)
    }
}

/// Trials per scheduling batch. Early stopping is decided only at batch
/// boundaries, which keeps results independent of the thread count.
pub const BATCH: u64 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub workload: Workload,
    /// Worker threads; None uses the global pool.
    pub threads: Option<usize>,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            workload: Workload::Full,
            threads: None,
        }
    }
}

pub fn monte_carlo(cfg: &SimConfig) -> Result<Aggregate> {
    monte_carlo_with(cfg, RunOptions::default())
}

/// Runs up to `cfg.trials` trials. For the full workload, a grid point stops
/// receiving trials once it has `min_errors` errors or `max_bits` bits.
/// On failure the error carries every completed trial below the failing
/// index, pooled.
pub fn monte_carlo_with(cfg: &SimConfig, opts: RunOptions) -> Result<Aggregate> {
    cfg.validate()?;
    match opts.threads {
        Some(0) => Err(Error::Config("thread count must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(|| run_batches(cfg, opts.workload, trial_impl)),
        None => run_batches(cfg, opts.workload, trial_impl),
    }
}

type TrialFn = fn(&SimConfig, u64, Workload, Option<&[bool]>) -> Result<TrialMetrics>;

fn run_batches(cfg: &SimConfig, workload: Workload, trial_fn: TrialFn) -> Result<Aggregate> {
    let mut agg = Aggregate::empty(cfg, workload);
    let mut next = 0u64;
    while next < cfg.trials {
        let active: Vec<bool> = agg
            .ber
            .iter()
            .map(|b| b.errors < cfg.min_errors && b.bits < cfg.max_bits)
            .collect();
        if workload == Workload::Full && !active.iter().any(|&a| a) {
            break;
        }
        let end = (next + BATCH).min(cfg.trials);
        let results: Vec<Result<TrialMetrics>> = (next..end)
            .into_par_iter()
            .map(|t| trial_fn(cfg, t, workload, Some(&active)))
            .collect();
        for (t, r) in (next..end).zip(results) {
            match r {
                Ok(m) => agg.absorb(&m, cfg.min_errors),
                Err(e) => {
                    return Err(Error::Trial {
                        trial: t,
                        source: Box::new(e),
                        partial: Some(Box::new(agg)),
                    })
                }
            }
        }
        next = end;
    }
    Ok(agg)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SimConfig {
        let mut c = SimConfig::new(4, 16);
        c.eta = vec![0.3];
        c.csi = vec![CsiMode::Perfect, CsiMode::NoisyRaw, CsiMode::EiCleaned];
        c.precoder = vec![PrecoderKind::Zf, PrecoderKind::Wfq];
        c.bits = vec![0, 2];
        c.snr_db = vec![0.0, 10.0];
        c.trials = 40;
        c.symbols_per_trial = 20;
        c
    }

    #[test]
    fn unquantized_wf_sanity_link() {
        let mut c = SimConfig::new(30, 256);
        c.csi = vec![CsiMode::Perfect];
        c.precoder = vec![PrecoderKind::Wf];
        c.bits = vec![0];
        c.snr_db = vec![10.0];
        c.trials = 20;
        c.symbols_per_trial = 1000;
        let agg = monte_carlo(&c).unwrap();
        let b = &agg.ber[0];
        assert!(b.bits >= 1_000_000, "{}", b.bits);
        assert!(b.ber < 1e-4, "{}", b.ber);
    }

    #[test]
    fn zf_noiseless_is_error_free() {
        let mut c = SimConfig::new(8, 32);
        c.csi = vec![CsiMode::Perfect];
        c.precoder = vec![PrecoderKind::Zf];
        c.bits = vec![0];
        c.snr_db = vec![300.0];
        c.symbols_per_trial = 10_000;
        let m = downlink_trial(&c, 0).unwrap();
        assert_eq!(m.points[0].counts, Some((0, 8 * 10_000 * 2)));
    }

    #[test]
    fn trial_is_deterministic() {
        let c = small();
        assert_eq!(downlink_trial(&c, 5).unwrap(), downlink_trial(&c, 5).unwrap());
    }

    #[test]
    fn csi_mode_does_not_change_draws() {
        let mut a = small();
        a.csi = vec![CsiMode::Perfect];
        let mut b = small();
        b.csi = vec![CsiMode::NoisyRaw, CsiMode::Perfect];
        let ma = downlink_trial(&a, 3).unwrap();
        let mb = downlink_trial(&b, 3).unwrap();
        let n = a.precoder.len() * a.bits.len() * a.snr_db.len();
        assert_eq!(ma.points[..n], mb.points[n..]);
        assert_eq!(ma.csi[0].raw_mse, mb.csi[0].raw_mse);
    }

    #[test]
    fn scheduling_independent() {
        let c = small();
        let one = monte_carlo_with(&c, RunOptions { threads: Some(1), ..Default::default() }).unwrap();
        let four = monte_carlo_with(&c, RunOptions { threads: Some(4), ..Default::default() }).unwrap();
        assert_eq!(one, four);
    }

    #[test]
    fn pooled_counts_are_exact() {
        let c = small();
        let agg = monte_carlo(&c).unwrap();
        for b in &agg.ber {
            assert!(b.errors <= b.bits);
            assert_eq!(b.bits, b.trials * (4 * 20 * 2) as u64);
            if b.bits > 0 {
                assert_eq!(b.ber, b.errors as f64 / b.bits as f64);
            }
        }
    }

    #[test]
    fn early_stop_respects_budget() {
        let mut c = small();
        c.min_errors = 10;
        c.max_bits = 100_000;
        c.trials = 10_000;
        let agg = monte_carlo(&c).unwrap();
        assert!(agg.trials_run < c.trials);
        for b in &agg.ber {
            assert!(b.errors >= 10 || b.bits >= c.max_bits || b.trials == agg.trials_run);
        }
    }

    #[test]
    fn wilson_shrinks_with_budget() {
        let widths: Vec<f64> = [10_000u64, 40_000, 160_000]
            .iter()
            .map(|&n| {
                let (lo, hi) = wilson_interval(n / 100, n);
                hi - lo
            })
            .collect();
        assert!((widths[0] / widths[1] - 2.0).abs() < 0.1);
        assert!((widths[1] / widths[2] - 2.0).abs() < 0.1);
        let (lo, hi) = wilson_interval(0, 1000);
        assert!(lo < 1e-12 && hi > 0.0 && hi < 0.01);
    }

    #[test]
    fn cdf_is_valid() {
        let mut c = small();
        c.csi = vec![CsiMode::EiCleaned];
        c.trials = 20;
        let agg = monte_carlo_with(&c, RunOptions { workload: Workload::CsiOnly, threads: None }).unwrap();
        let cell = &agg.csi[0];
        let grid: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
        let cdf = cell.delta_eta_cdf(&grid);
        assert!(cdf.windows(2).all(|w| w[1] >= w[0]));
        assert!(cdf.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(*cdf.last().unwrap(), 1.0);
        assert!(agg.ber.is_empty());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut c = small();
        c.snr_db.clear();
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("snr_db")));
        let mut c = small();
        c.antennas = vec![2];
        assert!(matches!(c.validate(), Err(Error::Config(m)) if m.contains("antennas")));
    }

    #[test]
    fn failing_trial_reports_partial() {
        fn fail_at_37(cfg: &SimConfig, t: u64, w: Workload, a: Option<&[bool]>) -> Result<TrialMetrics> {
            if t == 37 {
                return Err(Error::Numerical("injected".into()));
            }
            trial_impl(cfg, t, w, a)
        }
        let mut c = small();
        c.trials = 64;
        c.min_errors = u64::MAX;
        let e = run_batches(&c, Workload::Full, fail_at_37).unwrap_err();
        match e {
            Error::Trial { trial, partial, .. } => {
                assert_eq!(trial, 37);
                assert_eq!(partial.unwrap().trials_run, 37);
            }
            other => panic!("{other}"),
        }
    }
}
