//! Experiment families and their plot-ready tables.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::rng::{substream, Purpose};
use super::{monte_carlo_with, Aggregate, BerPoint, CsiMode, RunOptions, SimConfig, Workload};
use crate::channel::{build_bsca, gen_channel, SystemDims};
use crate::error::{Error, Result};
use crate::linalg::eigvalsh_desc;
use crate::rmt::{bsca_density, bsca_mass, bsca_support};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    EtaCdf,
    MseVsAntennas,
    BerVsSnr,
    BerVsEta,
    SpectrumCheck,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::EtaCdf => "eta_cdf",
            ExperimentKind::MseVsAntennas => "mse_vs_antennas",
            ExperimentKind::BerVsSnr => "ber_vs_snr",
            ExperimentKind::BerVsEta => "ber_vs_eta",
            ExperimentKind::SpectrumCheck => "spectrum_check",
        }
    }
}

/// Header plus rows of already-formatted cells.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    fn new(columns: &[&str]) -> Self {
        Table {
            columns: columns.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let i = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[i].as_str()).collect())
    }
}

/// Shortest round-trip formatting, so identical runs give identical bytes.
pub fn fmt(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    pub table: Table,
    /// Named headline numbers, in emission order.
    pub headline: Vec<(String, f64)>,
    pub aggregate: Option<Aggregate>,
}

impl ExperimentResult {
    pub fn headline(&self, key: &str) -> Option<f64> {
        self.headline.iter().find(|(k, _)| k == key).map(|(_, v)| *v)
    }
}

pub fn run_experiment(kind: ExperimentKind, cfg: &SimConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    cfg.validate()?;
    match kind {
        ExperimentKind::SpectrumCheck => spectrum_check(cfg, threads),
        ExperimentKind::EtaCdf => eta_cdf(cfg, threads),
        ExperimentKind::MseVsAntennas => mse_vs_antennas(cfg, threads),
        ExperimentKind::BerVsSnr | ExperimentKind::BerVsEta => ber(kind, cfg, threads),
    }
}

fn in_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> Result<T> {
    match threads {
        Some(0) => Err(Error::Config("thread count must be at least 1".into())),
        Some(n) => Ok(rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(f)),
        None => Ok(f()),
    }
}

/// Pooled nonzero BSCA eigenvalues of clean channels against the analytic
/// law. Densities are conditional on the nonzero part.
fn spectrum_check(cfg: &SimConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    let &[antennas] = cfg.antennas.as_slice() else {
        return Err(Error::Config("`antennas` must hold exactly one value for spectrum_check".into()));
    };
    let dims = SystemDims::new(cfg.users, antennas)?;
    let q = dims.q();
    let sup = bsca_support(q.value())?;
    let samples: Vec<Result<(Vec<f64>, usize)>> = in_pool(threads, || {
        (0..cfg.spectrum_samples as u64)
            .into_par_iter()
            .map(|k| {
                let h = gen_channel(dims, &mut substream(cfg.seed, k, Purpose::Spectrum));
                let ev = eigvalsh_desc(&build_bsca(&h.h)?.b);
                let scale = ev.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let (zero, nonzero): (Vec<f64>, Vec<f64>) = ev.into_iter().partition(|v| v.abs() <= 1e-10 * scale);
                Ok((nonzero, zero.len()))
            })
            .collect()
    })?;
    let mut pooled = Vec::new();
    let mut zero_exact = true;
    for s in samples {
        let (nz, zeros) = s?;
        zero_exact &= zeros == dims.antennas - dims.users;
        pooled.extend(nz);
    }
    let bins = cfg.histogram_bins;
    let width = 2.0 * sup.b / bins as f64;
    let mut counts = vec![0u64; bins];
    for v in &pooled {
        let k = (((v + sup.b) / width).floor() as isize).clamp(0, bins as isize - 1) as usize;
        counts[k] += 1;
    }
    let w = 1.0 - sup.zero_atom;
    let mut table = Table::new(&[
        "bin_center",
        "empirical_density",
        "analytic_density",
        "analytic_density_at_center",
    ]);
    let mut l1 = 0.0;
    for (k, &n) in counts.iter().enumerate() {
        let x0 = -sup.b + k as f64 * width;
        let centre = x0 + width / 2.0;
        let emp = n as f64 / (pooled.len() as f64 * width);
        let ana = bsca_mass(x0, x0 + width, q) / (w * width);
        l1 += (emp - ana).abs() * width;
        table.push(vec![fmt(centre), fmt(emp), fmt(ana), fmt(bsca_density(centre, q) / w)]);
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::SpectrumCheck,
        table,
        headline: vec![
            ("l1_distance".into(), l1),
            ("zero_count_exact".into(), if zero_exact { 1.0 } else { 0.0 }),
            ("samples".into(), cfg.spectrum_samples as f64),
            ("q".into(), q.value()),
        ],
        aggregate: None,
    })
}

/// Δη grid of the emitted CDF table.
pub fn delta_eta_grid() -> Vec<f64> {
    (0..=100).map(|i| i as f64 * 0.0025).collect()
}

fn eta_cdf(cfg: &SimConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    if !cfg.csi.contains(&CsiMode::EiCleaned) {
        return Err(Error::Config("`csi` must include ei_cleaned for eta_cdf".into()));
    }
    let agg = monte_carlo_with(
        cfg,
        RunOptions {
            workload: Workload::CsiOnly,
            threads,
        },
    )?;
    let grid = delta_eta_grid();
    let mut table = Table::new(&["eta", "antennas", "users", "delta_eta", "cdf", "trials", "seed"]);
    let mut headline = Vec::new();
    for cell in agg.csi.iter().filter(|c| c.csi == CsiMode::EiCleaned) {
        for (x, p) in grid.iter().zip(cell.delta_eta_cdf(&grid)) {
            table.push(vec![
                fmt(cell.eta),
                cell.antennas.to_string(),
                cfg.users.to_string(),
                fmt(*x),
                fmt(p),
                agg.trials_run.to_string(),
                cfg.seed.to_string(),
            ]);
        }
        let tag = format!("[eta={},A={}]", cell.eta, cell.antennas);
        let mut s = cell.delta_eta.clone();
        s.sort_by(f64::total_cmp);
        headline.push((format!("p_delta_below_0.05{tag}"), cell.delta_eta_below(0.05)));
        headline.push((format!("delta_eta_p95{tag}"), super::percentile(&s, 0.95)));
        headline.push((format!("delta_eta_max{tag}"), *s.last().unwrap_or(&f64::NAN)));
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::EtaCdf,
        table,
        headline,
        aggregate: Some(agg),
    })
}

/// Per-entry MMSE of H from H̃ for Gaussian H and noise.
pub fn mmse_floor(eta: f64, c: f64, antennas: usize) -> f64 {
    let a2 = eta * c / (1.0 - eta);
    a2 / ((1.0 + a2) * antennas as f64)
}

fn mse_vs_antennas(cfg: &SimConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    let agg = monte_carlo_with(
        cfg,
        RunOptions {
            workload: Workload::CsiOnly,
            threads,
        },
    )?;
    let mut table = Table::new(&[
        "eta",
        "antennas",
        "users",
        "csi_mode",
        "mse_mean",
        "mse_p50",
        "mse_p95",
        "raw_mse_mean",
        "mmse_floor",
        "improved_fraction",
        "trials",
        "seed",
    ]);
    let mut headline = Vec::new();
    let mut cells: Vec<_> = agg.csi.iter().collect();
    // Rows grouped by η, then CSI mode, then antennas.
    cells.sort_by(|a, b| {
        a.eta
            .total_cmp(&b.eta)
            .then((a.csi as u8).cmp(&(b.csi as u8)))
            .then(a.antennas.cmp(&b.antennas))
    });
    for cell in &cells {
        let floor = mmse_floor(cell.eta, cfg.c, cell.antennas);
        table.push(vec![
            fmt(cell.eta),
            cell.antennas.to_string(),
            cfg.users.to_string(),
            cell.csi.name().into(),
            fmt(cell.mse_mean()),
            fmt(cell.mse_percentile(0.5)),
            fmt(cell.mse_percentile(0.95)),
            fmt(cell.raw_mse_mean()),
            fmt(floor),
            fmt(cell.improved_fraction()),
            agg.trials_run.to_string(),
            cfg.seed.to_string(),
        ]);
        let tag = format!("[eta={},A={},csi={}]", cell.eta, cell.antennas, cell.csi.name());
        headline.push((format!("mse_mean{tag}"), cell.mse_mean()));
        headline.push((format!("improved_fraction{tag}"), cell.improved_fraction()));
    }
    for &eta in &cfg.eta {
        for &csi in &cfg.csi {
            let col: Vec<f64> = cells
                .iter()
                .filter(|c| c.eta == eta && c.csi == csi)
                .map(|c| c.mse_mean())
                .collect();
            let dec = col.windows(2).all(|w| w[1] < w[0]);
            headline.push((
                format!("strictly_decreasing[eta={eta},csi={}]", csi.name()),
                if dec { 1.0 } else { 0.0 },
            ));
        }
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::MseVsAntennas,
        table,
        headline,
        aggregate: Some(agg),
    })
}

/// SNR at which a BER curve first falls to `target`, interpolating log BER
/// linearly between the bracketing points. `points` must share everything
/// but the SNR.
pub fn snr_at_target(points: &[&BerPoint], target: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = points.iter().map(|p| (p.point.snr_db, p.ber)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if let Some(&(s, b)) = pts.first() {
        if b <= target {
            return Some(s);
        }
    }
    for w in pts.windows(2) {
        let ((s0, b0), (s1, b1)) = (w[0], w[1]);
        if b0 > target && b1 <= target {
            if b1 == 0.0 {
                return Some(s1);
            }
            let t = (b0.ln() - target.ln()) / (b0.ln() - b1.ln());
            return Some(s0 + t * (s1 - s0));
        }
    }
    None
}

fn ber(kind: ExperimentKind, cfg: &SimConfig, threads: Option<usize>) -> Result<ExperimentResult> {
    let agg = monte_carlo_with(
        cfg,
        RunOptions {
            workload: Workload::Full,
            threads,
        },
    )?;
    let mut table = Table::new(&[
        "snr_db",
        "eta",
        "antennas",
        "users",
        "precoder",
        "csi_mode",
        "bits",
        "modulation",
        "ber",
        "ber_lo",
        "ber_hi",
        "errors",
        "bits_sent",
        "trials",
        "below_resolution",
        "unconverged",
        "seed",
    ]);
    for b in &agg.ber {
        let p = &b.point;
        table.push(vec![
            fmt(p.snr_db),
            fmt(p.eta),
            p.antennas.to_string(),
            cfg.users.to_string(),
            p.precoder.name().into(),
            p.csi.name().into(),
            p.bits.to_string(),
            cfg.modulation.name().into(),
            fmt(b.ber),
            fmt(b.ci_lo),
            fmt(b.ci_hi),
            b.errors.to_string(),
            b.bits.to_string(),
            b.trials.to_string(),
            b.below_resolution.to_string(),
            b.unconverged.to_string(),
            cfg.seed.to_string(),
        ]);
    }
    let mut headline = Vec::new();
    const TARGET: f64 = 1e-3;
    for &a in &cfg.antennas {
        for &csi in &cfg.csi {
            for &pre in &cfg.precoder {
                for &bits in &cfg.bits {
                    let curve = |eta: Option<f64>, snr: Option<f64>| -> Vec<&BerPoint> {
                        agg.ber
                            .iter()
                            .filter(|b| {
                                let p = &b.point;
                                p.antennas == a
                                    && p.csi == csi
                                    && p.precoder == pre
                                    && p.bits == bits
                                    && eta.is_none_or(|e| p.eta == e)
                                    && snr.is_none_or(|s| p.snr_db == s)
                            })
                            .collect()
                    };
                    let base = format!("precoder={},csi={},bits={bits},A={a}", pre.name(), csi.name());
                    if kind == ExperimentKind::BerVsSnr {
                        for &eta in &cfg.eta {
                            let v = snr_at_target(&curve(Some(eta), None), TARGET).unwrap_or(f64::NAN);
                            headline.push((format!("snr_at_1e-3[{base},eta={eta}]"), v));
                        }
                    } else {
                        for &snr in &cfg.snr_db {
                            let mut pts = curve(None, Some(snr));
                            pts.sort_by(|x, y| x.point.eta.total_cmp(&y.point.eta));
                            let mut best = f64::NAN;
                            for p in pts {
                                if p.ber > TARGET {
                                    break;
                                }
                                best = p.point.eta;
                            }
                            headline.push((format!("max_eta_meeting_1e-3[{base},snr_db={snr}]"), best));
                        }
                    }
                }
            }
        }
    }
    headline.push(("trials_run".into(), agg.trials_run as f64));
    Ok(ExperimentResult {
        kind,
        table,
        headline,
        aggregate: Some(agg),
    })
}
