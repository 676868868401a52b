//! Reading and writing of MERL binary BRDF tables and plain-text sample
//! files, plus dataset assembly.
//!
//! A MERL file starts with three little-endian 32-bit integers giving the
//! (theta_h, theta_d, phi_d) resolution, followed by three channel planes of
//! little-endian 64-bit reals (all red, then all green, then all blue). The
//! stored values carry the dataset's per-channel scale; [`BrdfGrid`] keeps
//! them in file space so that read/write round trips are bit-exact, and
//! exposes linear reflectance through accessors.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

/// De-facto MERL per-channel scale: linear reflectance = stored * scale.
pub const CHANNEL_SCALE: [f64; 3] = [1.0 / 1500.0, 1.15 / 1500.0, 1.66 / 1500.0];

/// Full-resolution MERL grid dimensions.
pub const FULL_RES: GridRes = GridRes {
    theta_h: 90,
    theta_d: 90,
    phi_d: 180,
};

/// Reduced grid used throughout the tests; production files are 90/90/180.
pub const REDUCED_RES: GridRes = GridRes {
    theta_h: 15,
    theta_d: 15,
    phi_d: 30,
};

#[derive(Debug, thiserror::Error)]
pub enum MerlError {
    #[error("header mismatch: got {0}x{1}x{2}, expected 90x90x180 or a reduced n/n/2n grid")]
    HeaderMismatch(u32, u32, u32),
    #[error("truncated or oversized file: expected {expected} bytes, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("value plane length {got} does not match resolution (expected {expected})")]
    BadPlaneLength { expected: usize, got: usize },
    #[error("line {line}: {msg}")]
    ParseError { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    ValidationError { line: usize, msg: String },
    #[error("missing material '{0}'")]
    MissingMaterial(String),
    #[error("duplicate material name '{0}'")]
    DuplicateName(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Grid resolution along the three Rusinkiewicz axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridRes {
    pub theta_h: usize,
    pub theta_d: usize,
    pub phi_d: usize,
}

impl GridRes {
    /// Texels per channel plane.
    pub fn texel_count(&self) -> usize {
        self.theta_h * self.theta_d * self.phi_d
    }

    /// MERL layout: theta_h-major, then theta_d, then phi_d.
    pub fn linear_index(&self, i_theta_h: usize, i_theta_d: usize, i_phi_d: usize) -> usize {
        debug_assert!(i_theta_h < self.theta_h && i_theta_d < self.theta_d && i_phi_d < self.phi_d);
        i_theta_h * (self.theta_d * self.phi_d) + i_theta_d * self.phi_d + i_phi_d
    }

    /// Headers accepted by `read_merl`: the production 90/90/180 grid or a
    /// reduced n/n/2n grid for tests.
    pub fn is_supported(&self) -> bool {
        self.theta_h >= 1
            && self.theta_h <= 90
            && self.theta_d == self.theta_h
            && self.phi_d == 2 * self.theta_h
    }
}

/// Dense reflectance table in MERL layout. Values are stored in file space
/// (pre-scale); negative stored values mark invalid texels.
#[derive(Debug, Clone, PartialEq)]
pub struct BrdfGrid {
    res: GridRes,
    /// Channel-major planes: all red, all green, all blue.
    raw: Vec<f64>,
}

impl BrdfGrid {
    /// Builds a grid from file-space (stored) values.
    pub fn from_raw(res: GridRes, raw: Vec<f64>) -> Result<Self, MerlError> {
        let expected = 3 * res.texel_count();
        if raw.len() != expected {
            return Err(MerlError::BadPlaneLength {
                expected,
                got: raw.len(),
            });
        }
        Ok(Self { res, raw })
    }

    /// Builds a grid from linear reflectance values (channel-major planes).
    pub fn from_linear(res: GridRes, linear: Vec<f64>) -> Result<Self, MerlError> {
        let t = res.texel_count();
        if linear.len() != 3 * t {
            return Err(MerlError::BadPlaneLength {
                expected: 3 * t,
                got: linear.len(),
            });
        }
        let mut raw = linear;
        for c in 0..3 {
            for v in &mut raw[c * t..(c + 1) * t] {
                *v /= CHANNEL_SCALE[c];
            }
        }
        Ok(Self { res, raw })
    }

    pub fn zeros(res: GridRes) -> Self {
        let n = 3 * res.texel_count();
        Self {
            res,
            raw: vec![0.0; n],
        }
    }

    pub fn res(&self) -> GridRes {
        self.res
    }

    pub fn texel_count(&self) -> usize {
        self.res.texel_count()
    }

    /// Stored (file-space) value at texel `t`, channel `c`.
    pub fn raw_at(&self, t: usize, c: usize) -> f64 {
        self.raw[c * self.res.texel_count() + t]
    }

    /// Linear reflectance at texel `t`, channel `c`. Negative results mark
    /// invalid texels and must not be fed to training.
    pub fn linear_at(&self, t: usize, c: usize) -> f64 {
        self.raw_at(t, c) * CHANNEL_SCALE[c]
    }

    pub fn set_linear(&mut self, t: usize, c: usize, v: f64) {
        let n = self.res.texel_count();
        self.raw[c * n + t] = v / CHANNEL_SCALE[c];
    }

    /// Marks every channel of texel `t` invalid.
    pub fn set_invalid(&mut self, t: usize) {
        let n = self.res.texel_count();
        for c in 0..3 {
            self.raw[c * n + t] = -1.0;
        }
    }

    /// A texel is valid when all three stored channels are nonnegative.
    pub fn is_valid_texel(&self, t: usize) -> bool {
        (0..3).all(|c| self.raw_at(t, c) >= 0.0)
    }
}

/// One named material in a dataset.
#[derive(Debug, Clone)]
pub struct MaterialRecord {
    pub name: String,
    pub grid: BrdfGrid,
}

/// One row of a plain-text sample file: unit half/difference vectors and a
/// nonnegative linear reflectance triple.
#[derive(Debug, Clone, PartialEq)]
pub struct RawSample {
    pub h: [f64; 3],
    pub d: [f64; 3],
    pub rho: [f64; 3],
}

/// Decodes a MERL binary stream. Accepts the production 90/90/180 header or
/// a reduced n/n/2n test header; the payload length must match exactly.
pub fn read_merl(bytes: &[u8]) -> Result<BrdfGrid, MerlError> {
    if bytes.len() < 12 {
        return Err(MerlError::TruncatedFile {
            expected: 12,
            got: bytes.len(),
        });
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    let (th, td, pd) = (dim(0), dim(1), dim(2));
    let res = GridRes {
        theta_h: th as usize,
        theta_d: td as usize,
        phi_d: pd as usize,
    };
    if !res.is_supported() {
        return Err(MerlError::HeaderMismatch(th, td, pd));
    }
    let n_vals = 3 * res.texel_count();
    let expected = 12 + 8 * n_vals;
    if bytes.len() != expected {
        return Err(MerlError::TruncatedFile {
            expected,
            got: bytes.len(),
        });
    }
    let raw = bytes[12..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    BrdfGrid::from_raw(res, raw)
}

/// Encodes a grid as a MERL binary stream; exact inverse of [`read_merl`].
pub fn write_merl(grid: &BrdfGrid) -> Vec<u8> {
    let res = grid.res;
    let mut out = Vec::with_capacity(12 + 8 * grid.raw.len());
    for dim in [res.theta_h, res.theta_d, res.phi_d] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for v in &grid.raw {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses a plain-text sample stream: whitespace-separated, 9 decimal fields
/// per row, `#` comment lines and blank lines ignored. Directions must be
/// unit length within 1e-6 and reflectance nonnegative.
pub fn read_samples(text: &str) -> Result<Vec<RawSample>, MerlError> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let body = line.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let fields: Vec<&str> = body.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(MerlError::ParseError {
                line: line_no,
                msg: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let mut vals = [0.0f64; 9];
        for (k, f) in fields.iter().enumerate() {
            vals[k] = f.parse().map_err(|e| MerlError::ParseError {
                line: line_no,
                msg: format!("field {}: {e}", k + 1),
            })?;
        }
        let h = [vals[0], vals[1], vals[2]];
        let d = [vals[3], vals[4], vals[5]];
        let rho = [vals[6], vals[7], vals[8]];
        for (label, v) in [("H", h), ("D", d)] {
            let norm = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(MerlError::ValidationError {
                    line: line_no,
                    msg: format!("{label} is not unit length (|{label}| = {norm})"),
                });
            }
        }
        if rho.iter().any(|&v| v < 0.0) {
            return Err(MerlError::ValidationError {
                line: line_no,
                msg: "negative reflectance".into(),
            });
        }
        rows.push(RawSample { h, d, rho });
    }
    Ok(rows)
}

fn resolve_material(dir: &Path, name: &str) -> Option<PathBuf> {
    let direct = dir.join(name);
    if direct.is_file() {
        return Some(direct);
    }
    let with_ext = dir.join(format!("{name}.binary"));
    with_ext.is_file().then_some(with_ext)
}

/// Loads the named materials from `directory`, in the order given. Names may
/// be given with or without the conventional `.binary` extension.
pub fn load_dataset(directory: &Path, names: &[String]) -> Result<Vec<MaterialRecord>, MerlError> {
    let mut seen = HashSet::new();
    let mut records = Vec::with_capacity(names.len());
    for name in names {
        if !seen.insert(name.as_str()) {
            return Err(MerlError::DuplicateName(name.clone()));
        }
        let path = resolve_material(directory, name)
            .ok_or_else(|| MerlError::MissingMaterial(name.clone()))?;
        let bytes = std::fs::read(path)?;
        let grid = read_merl(&bytes)?;
        records.push(MaterialRecord {
            name: name.clone(),
            grid,
        });
    }
    Ok(records)
}
