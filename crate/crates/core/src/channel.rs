//! Channel generation, CSI corruption and the block-symmetric augmentation.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::CMatrix;
use crate::rmt::AspectRatio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemDims {
    pub users: usize,
    pub antennas: usize,
}

impl SystemDims {
    pub fn new(users: usize, antennas: usize) -> Result<Self> {
        if users == 0 || users >= antennas {
            return Err(Error::Config(format!(
                "need 0 < users < antennas, got users = {users}, antennas = {antennas}"
            )));
        }
        Ok(SystemDims { users, antennas })
    }

    pub fn q(&self) -> AspectRatio {
        AspectRatio::from_dims(self.users, self.antennas).expect("validated dims")
    }
}

/// U×A channel with i.i.d. entries of variance `entry_variance` = 1/A.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelMatrix {
    pub h: CMatrix,
    pub entry_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionMode {
    /// H̃ = √(1−η)·H + √η·E, E entries of variance c/A.
    Damped,
    /// H̃ = H + α·E′, E′ entries of variance 1/A.
    Additive,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorruptionModel {
    pub eta: f64,
    pub mode: CorruptionMode,
    pub c: f64,
}

impl CorruptionModel {
    pub fn new(eta: f64, mode: CorruptionMode, c: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1), got {eta}")));
        }
        if !(c > 0.0) || !c.is_finite() {
            return Err(Error::Config(format!("noise scale c must be positive, got {c}")));
        }
        Ok(CorruptionModel { eta, mode, c })
    }

    /// Additive noise level of the normalized observation, √(ηc/(1−η)).
    pub fn alpha(&self) -> f64 {
        alpha_of(self.eta, self.c)
    }
}

pub fn alpha_of(eta: f64, c: f64) -> f64 {
    (eta * c / (1.0 - eta)).sqrt()
}

/// Hermitian (U+A)×(U+A) matrix [0 X; Xᴴ 0].
#[derive(Debug, Clone, PartialEq)]
pub struct BscaMatrix {
    pub b: CMatrix,
    pub dims: SystemDims,
}

/// Circularly-symmetric complex Gaussian matrix with entry variance `var`.
pub fn complex_gaussian<R: Rng + ?Sized>(rows: usize, cols: usize, var: f64, rng: &mut R) -> CMatrix {
    let sd = (var / 2.0).sqrt();
    // Column-major fill; the draw order is part of the determinism contract.
    DMatrix::from_fn(rows, cols, |_, _| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        Complex64::new(sd * re, sd * im)
    })
}

pub fn gen_channel<R: Rng + ?Sized>(dims: SystemDims, rng: &mut R) -> ChannelMatrix {
    let var = 1.0 / dims.antennas as f64;
    ChannelMatrix {
        h: complex_gaussian(dims.users, dims.antennas, var, rng),
        entry_variance: var,
    }
}

/// Draws the error matrix E′ (variance 1/A) from `rng` and applies it.
pub fn corrupt<R: Rng + ?Sized>(h: &ChannelMatrix, model: &CorruptionModel, rng: &mut R) -> ChannelMatrix {
    let (u, a) = h.h.shape();
    let e = complex_gaussian(u, a, 1.0 / a as f64, rng);
    corrupt_with(h, model, &e)
}

/// Corruption with an explicit unit-scale error draw E′ (variance 1/A).
pub fn corrupt_with(h: &ChannelMatrix, model: &CorruptionModel, e_unit: &CMatrix) -> ChannelMatrix {
    if model.eta == 0.0 {
        return h.clone();
    }
    let out = match model.mode {
        CorruptionMode::Damped => {
            &h.h * Complex64::from((1.0 - model.eta).sqrt()) + e_unit * Complex64::from((model.eta * model.c).sqrt())
        }
        CorruptionMode::Additive => &h.h + e_unit * Complex64::from(model.alpha()),
    };
    ChannelMatrix {
        h: out,
        entry_variance: h.entry_variance,
    }
}

pub fn build_bsca(x: &CMatrix) -> Result<BscaMatrix> {
    let (u, a) = x.shape();
    let dims = SystemDims::new(u, a).map_err(|_| Error::Shape(format!("BSCA needs U < A, got {u}×{a}")))?;
    let n = u + a;
    let mut b = CMatrix::zeros(n, n);
    b.view_mut((0, u), (u, a)).copy_from(x);
    b.view_mut((u, 0), (a, u)).copy_from(&x.adjoint());
    Ok(BscaMatrix { b, dims })
}

/// Upper-right U×A block of a (U+A)×(U+A) matrix.
pub fn extract_channel(b: &CMatrix, dims: SystemDims) -> Result<CMatrix> {
    let n = dims.users + dims.antennas;
    if b.shape() != (n, n) {
        return Err(Error::Shape(format!(
            "expected {n}×{n} augmentation, got {}×{}",
            b.nrows(),
            b.ncols()
        )));
    }
    Ok(b.view((0, dims.users), (dims.users, dims.antennas)).into_owned())
}

/// H̃ / √(1 − η̂).
pub fn normalize_observation(x: &CMatrix, eta_hat: f64) -> Result<CMatrix> {
    if !(0.0..1.0).contains(&eta_hat) {
        return Err(Error::Domain(format!("eta_hat must lie in [0, 1), got {eta_hat}")));
    }
    if eta_hat == 0.0 {
        return Ok(x.clone());
    }
    Ok(x / Complex64::from((1.0 - eta_hat).sqrt()))
}

/// Binary matrix layout: little-endian u64 rows, u64 cols, then rows·cols
/// pairs of little-endian f64 (re, im) in row-major order.
pub mod io {
    use std::io::{Read, Write};

    use super::*;

    /// Refuse to allocate beyond this many entries when decoding.
    pub const MAX_ENTRIES: u64 = 1 << 26;

    pub fn encode_matrix(m: &CMatrix) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 16 * m.len());
        out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                out.extend_from_slice(&m[(r, c)].re.to_le_bytes());
                out.extend_from_slice(&m[(r, c)].im.to_le_bytes());
            }
        }
        out
    }

    fn header(bytes: &[u8]) -> Result<(usize, usize)> {
        if bytes.len() < 16 {
            return Err(Error::Shape("matrix header shorter than 16 bytes".into()));
        }
        let rows = u64::from_le_bytes(bytes[0..8].try_into().unwrap());
        let cols = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
        match rows.checked_mul(cols) {
            Some(n) if n <= MAX_ENTRIES => Ok((rows as usize, cols as usize)),
            _ => Err(Error::Shape(format!("matrix {rows}×{cols} exceeds the size limit"))),
        }
    }

    pub fn decode_matrix(bytes: &[u8]) -> Result<CMatrix> {
        let (rows, cols) = header(bytes)?;
        let body = &bytes[16..];
        if body.len() != 16 * rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}×{cols} needs {} payload bytes, found {}",
                16 * rows * cols,
                body.len()
            )));
        }
        let f = |k: usize| f64::from_le_bytes(body[8 * k..8 * k + 8].try_into().unwrap());
        Ok(CMatrix::from_fn(rows, cols, |r, c| {
            let k = 2 * (r * cols + c);
            Complex64::new(f(k), f(k + 1))
        }))
    }

    pub fn write_matrix<W: Write>(w: &mut W, m: &CMatrix) -> Result<()> {
        w.write_all(&encode_matrix(m))?;
        Ok(())
    }

    pub fn read_matrix<R: Read>(r: &mut R) -> Result<CMatrix> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head)?;
        let (rows, cols) = header(&head)?;
        let need = 16 * rows * cols;
        let mut bytes = head.to_vec();
        // Grow with the data actually present, not with the header's claim.
        r.take(need as u64).read_to_end(&mut bytes)?;
        if bytes.len() != 16 + need {
            return Err(Error::Shape(format!(
                "matrix {rows}×{cols} needs {need} payload bytes, found {}",
                bytes.len() - 16
            )));
        }
        decode_matrix(&bytes)
    }
}
