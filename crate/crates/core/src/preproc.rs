//! Log relative mapping of HDR reflectance and the per-texel median
//! reference table it is taken against.
//!
//! The mapping is `rho' = ln((rho + eps) / (rho_ref + eps) + 1)` with
//! `eps = 0.002`; the reference is the per-texel, per-channel median over a
//! dataset of materials.

use crate::merl::{GridRes, MaterialRecord};

/// Small constant avoiding division by zero in the mapping.
pub const EPSILON: f64 = 0.002;

const REFERENCE_MAGIC: &[u8; 4] = b"BRF1";

#[derive(Debug, thiserror::Error)]
pub enum PreprocError {
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("mixed grid resolutions in dataset")]
    MixedResolutions,
    #[error("bad reference table magic")]
    BadMagic,
    #[error("reference table length mismatch: expected {expected} bytes, got {got}")]
    LengthMismatch { expected: usize, got: usize },
}

/// Per-texel, per-channel reference values, in the same layout as
/// [`BrdfGrid`] channel planes.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    res: GridRes,
    values: Vec<f64>,
}

impl ReferenceTable {
    pub fn new(res: GridRes, values: Vec<f64>) -> Result<Self, PreprocError> {
        let expected = 3 * res.texel_count();
        if values.len() != expected {
            return Err(PreprocError::LengthMismatch {
                expected,
                got: values.len(),
            });
        }
        debug_assert!(values.iter().all(|&v| v >= 0.0));
        Ok(Self { res, values })
    }

    pub fn zeros(res: GridRes) -> Self {
        let n = 3 * res.texel_count();
        Self {
            res,
            values: vec![0.0; n],
        }
    }

    pub fn res(&self) -> GridRes {
        self.res
    }

    pub fn at(&self, texel: usize, channel: usize) -> f64 {
        self.values[channel * self.res.texel_count() + texel]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Standalone serialization: magic tag, resolution header, then the
    /// channel planes as little-endian 64-bit reals (MERL layout).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 8 * self.values.len());
        out.extend_from_slice(REFERENCE_MAGIC);
        for dim in [self.res.theta_h, self.res.theta_d, self.res.phi_d] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, PreprocError> {
        if bytes.len() < 16 || &bytes[..4] != REFERENCE_MAGIC {
            return Err(PreprocError::BadMagic);
        }
        let dim = |i: usize| {
            u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize
        };
        let res = GridRes {
            theta_h: dim(0),
            theta_d: dim(1),
            phi_d: dim(2),
        };
        let expected = 16 + 8 * 3 * res.texel_count();
        if bytes.len() != expected {
            return Err(PreprocError::LengthMismatch {
                expected,
                got: bytes.len(),
            });
        }
        let values = bytes[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(res, values)
    }
}

/// Builds the reference table as the per-texel, per-channel median of the
/// valid linear values over the dataset. Even counts take the mean of the
/// two middle values; texels invalid in every material get reference 0.
pub fn compute_reference_median(
    dataset: &[MaterialRecord],
) -> Result<ReferenceTable, PreprocError> {
    let first = dataset.first().ok_or(PreprocError::EmptyDataset)?;
    let res = first.grid.res();
    if dataset.iter().any(|m| m.grid.res() != res) {
        return Err(PreprocError::MixedResolutions);
    }
    let t = res.texel_count();
    let mut values = vec![0.0; 3 * t];
    let mut pool = Vec::with_capacity(dataset.len());
    for texel in 0..t {
        for c in 0..3 {
            pool.clear();
            for m in dataset {
                if m.grid.is_valid_texel(texel) {
                    pool.push(m.grid.linear_at(texel, c));
                }
            }
            values[c * t + texel] = median(&mut pool);
        }
    }
    ReferenceTable::new(res, values)
}

fn median(vals: &mut [f64]) -> f64 {
    if vals.is_empty() {
        return 0.0;
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    }
}

/// Maps linear reflectance into compressed log-relative space.
pub fn log_relative_map(rho: f64, rho_ref: f64) -> f64 {
    ((rho + EPSILON) / (rho_ref + EPSILON) + 1.0).ln()
}

/// Analytic inverse of [`log_relative_map`], clamped to nonnegative
/// reflectance.
pub fn log_relative_unmap(rho_prime: f64, rho_ref: f64) -> f64 {
    ((rho_prime.exp() - 1.0) * (rho_ref + EPSILON) - EPSILON).max(0.0)
}
