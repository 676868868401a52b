//! Rusinkiewicz half/difference parameterization, angle/grid-index warping,
//! direction algebra and uniform texel sampling.
//!
//! Conventions: the surface normal is +z, isotropic BRDFs are lifted to
//! Cartesian (H, D) with the half-vector azimuth fixed to zero, phi_d is
//! folded into [0, pi) by Helmholtz reciprocity, and the theta_h axis uses
//! the MERL square-root index warp.

use std::f64::consts::{FRAC_PI_2, PI};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::merl::{BrdfGrid, GridRes};
use crate::preproc::{log_relative_map, ReferenceTable};

#[derive(Debug, thiserror::Error)]
pub enum ParamError {
    #[error("direction ({0}, {1}, {2}) is not unit length")]
    NotUnit(f64, f64, f64),
    #[error("half vector is degenerate (wi = -wo)")]
    DegenerateHalfVector,
    #[error("configuration lies below the horizon")]
    BelowHorizon,
    #[error("no valid texels among the requested indices")]
    EmptyResult,
    #[error("requested {requested} samples but the grid has only {available} texels")]
    CountTooLarge { requested: usize, available: usize },
}

/// Unit vector in the shading frame (+z is the surface normal).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Direction {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Direction {
    pub const Z: Direction = Direction {
        x: 0.0,
        y: 0.0,
        z: 1.0,
    };

    /// Requires the components to be unit length within 1e-6.
    pub fn new(x: f64, y: f64, z: f64) -> Result<Self, ParamError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(ParamError::NotUnit(x, y, z));
        }
        Ok(Self {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    /// Normalizes an arbitrary nonzero vector.
    pub fn normalized(x: f64, y: f64, z: f64) -> Result<Self, ParamError> {
        let norm = (x * x + y * y + z * z).sqrt();
        if norm < 1e-12 {
            return Err(ParamError::DegenerateHalfVector);
        }
        Ok(Self {
            x: x / norm,
            y: y / norm,
            z: z / norm,
        })
    }

    pub fn dot(&self, other: &Direction) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    fn rotate_z(&self, angle: f64) -> Direction {
        let (s, c) = angle.sin_cos();
        Direction {
            x: c * self.x - s * self.y,
            y: s * self.x + c * self.y,
            z: self.z,
        }
    }

    fn rotate_y(&self, angle: f64) -> Direction {
        let (s, c) = angle.sin_cos();
        Direction {
            x: c * self.x + s * self.z,
            y: self.y,
            z: -s * self.x + c * self.z,
        }
    }
}

/// Rusinkiewicz angles: theta_h, theta_d in [0, pi/2], phi_d in [0, pi).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RusinAngles {
    pub theta_h: f64,
    pub theta_d: f64,
    pub phi_d: f64,
}

/// Discrete texel coordinate in a MERL-layout grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridIndex {
    pub i_theta_h: usize,
    pub i_theta_d: usize,
    pub i_phi_d: usize,
}

impl GridIndex {
    pub fn linear(&self, res: &GridRes) -> usize {
        res.linear_index(self.i_theta_h, self.i_theta_d, self.i_phi_d)
    }

    pub fn from_linear(t: usize, res: &GridRes) -> GridIndex {
        let per_th = res.theta_d * res.phi_d;
        GridIndex {
            i_theta_h: t / per_th,
            i_theta_d: (t % per_th) / res.phi_d,
            i_phi_d: t % res.phi_d,
        }
    }
}

/// One directional measurement in mapped (log-relative) space.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    pub h: Direction,
    pub d: Direction,
    pub rho_mapped: [f64; 3],
    pub cos_theta: f64,
}

impl Sample {
    /// The 6-vector of coordinates fed to the hyponet.
    pub fn coords(&self) -> [f64; 6] {
        [self.h.x, self.h.y, self.h.z, self.d.x, self.d.y, self.d.z]
    }

    /// The 9-vector fed to the set encoder: coordinates first, then values.
    pub fn encoder_input(&self) -> [f64; 9] {
        [
            self.h.x,
            self.h.y,
            self.h.z,
            self.d.x,
            self.d.y,
            self.d.z,
            self.rho_mapped[0],
            self.rho_mapped[1],
            self.rho_mapped[2],
        ]
    }
}

/// An unordered set of directional samples.
#[derive(Debug, Clone, Default)]
pub struct SampleSet {
    pub samples: Vec<Sample>,
}

impl SampleSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Samples extracted from a grid, along with the texels that had to be
/// skipped (invalid values or below-horizon geometry).
#[derive(Debug, Clone)]
pub struct Extraction {
    pub set: SampleSet,
    pub skipped: Vec<GridIndex>,
}

fn half_azimuth_polar(h: &Direction) -> (f64, f64) {
    let theta_h = h.z.clamp(-1.0, 1.0).acos();
    let phi_h = if h.x == 0.0 && h.y == 0.0 {
        0.0
    } else {
        h.y.atan2(h.x)
    };
    (phi_h, theta_h)
}

/// Converts incident/outgoing directions to the half/difference pair.
pub fn io_to_halfdiff(wi: &Direction, wo: &Direction) -> Result<(Direction, Direction), ParamError> {
    let h = Direction::normalized(wi.x + wo.x, wi.y + wo.y, wi.z + wo.z)
        .map_err(|_| ParamError::DegenerateHalfVector)?;
    let (phi_h, theta_h) = half_azimuth_polar(&h);
    let d = wi.rotate_z(-phi_h).rotate_y(-theta_h);
    Ok((h, d))
}

/// Inverse of [`io_to_halfdiff`]. Errors with `BelowHorizon` when the pair
/// encodes a physically invalid texel.
pub fn halfdiff_to_io(h: &Direction, d: &Direction) -> Result<(Direction, Direction), ParamError> {
    let (phi_h, theta_h) = half_azimuth_polar(h);
    let wi = d.rotate_y(theta_h).rotate_z(phi_h);
    let k = 2.0 * wi.dot(h);
    let wo = Direction::normalized(k * h.x - wi.x, k * h.y - wi.y, k * h.z - wi.z)?;
    if wi.z <= 0.0 || wo.z <= 0.0 {
        return Err(ParamError::BelowHorizon);
    }
    Ok((wi, wo))
}

/// Cosine of the incidence angle implied by (H, D); may be nonpositive for
/// below-horizon configurations, which callers filter out.
pub fn incidence_cosine(h: &Direction, d: &Direction) -> f64 {
    let (phi_h, theta_h) = half_azimuth_polar(h);
    d.rotate_y(theta_h).rotate_z(phi_h).z
}

/// Maps angles to the texel index: square-root warp on theta_h, linear on
/// the other two axes, clamped at the upper edge.
pub fn angles_to_index(a: &RusinAngles, res: &GridRes) -> GridIndex {
    let warp = (a.theta_h / FRAC_PI_2).max(0.0).sqrt();
    let bin = |x: f64, n: usize| ((x * n as f64) as usize).min(n - 1);
    GridIndex {
        i_theta_h: bin(warp, res.theta_h),
        i_theta_d: bin(a.theta_d / FRAC_PI_2, res.theta_d),
        i_phi_d: bin(a.phi_d / PI, res.phi_d),
    }
}

/// Bin-center angles for a texel index; inverse of [`angles_to_index`].
pub fn index_to_angles(g: &GridIndex, res: &GridRes) -> RusinAngles {
    let center = |i: usize, n: usize| (i as f64 + 0.5) / n as f64;
    let u = center(g.i_theta_h, res.theta_h);
    RusinAngles {
        theta_h: FRAC_PI_2 * u * u,
        theta_d: FRAC_PI_2 * center(g.i_theta_d, res.theta_d),
        phi_d: PI * center(g.i_phi_d, res.phi_d),
    }
}

/// Lifts an isotropic angle triple to Cartesian (H, D) with phi_h = 0.
pub fn angles_to_halfdiff(a: &RusinAngles) -> (Direction, Direction) {
    let (sh, ch) = a.theta_h.sin_cos();
    let (sd, cd) = a.theta_d.sin_cos();
    let (sp, cp) = a.phi_d.sin_cos();
    let h = Direction {
        x: sh,
        y: 0.0,
        z: ch,
    };
    let d = Direction {
        x: sd * cp,
        y: sd * sp,
        z: cd,
    };
    (h, d)
}

/// Folds (H, D) back to Rusinkiewicz angles, with phi_d wrapped into
/// [0, pi) by reciprocity.
pub fn halfdiff_to_angles(h: &Direction, d: &Direction) -> RusinAngles {
    let theta_h = h.z.clamp(-1.0, 1.0).acos();
    let theta_d = d.z.clamp(-1.0, 1.0).acos();
    let mut phi_d = if d.x == 0.0 && d.y == 0.0 {
        0.0
    } else {
        d.y.atan2(d.x)
    };
    if phi_d < 0.0 {
        phi_d += PI;
    }
    if phi_d >= PI {
        phi_d -= PI;
    }
    RusinAngles {
        theta_h,
        theta_d,
        phi_d,
    }
}

/// Pulls the requested texels out of a grid as mapped samples. Invalid
/// texels and below-horizon configurations are skipped and reported.
pub fn extract_samples(
    grid: &BrdfGrid,
    reference: &ReferenceTable,
    indices: &[GridIndex],
) -> Result<Extraction, ParamError> {
    let res = grid.res();
    let mut set = SampleSet::default();
    let mut skipped = Vec::new();
    for g in indices {
        let t = g.linear(&res);
        if !grid.is_valid_texel(t) {
            skipped.push(*g);
            continue;
        }
        let angles = index_to_angles(g, &res);
        let (h, d) = angles_to_halfdiff(&angles);
        let cos_theta = incidence_cosine(&h, &d);
        if cos_theta <= 0.0 || halfdiff_to_io(&h, &d).is_err() {
            skipped.push(*g);
            continue;
        }
        let mut rho_mapped = [0.0; 3];
        for c in 0..3 {
            rho_mapped[c] = log_relative_map(grid.linear_at(t, c), reference.at(t, c));
        }
        set.samples.push(Sample {
            h,
            d,
            rho_mapped,
            cos_theta,
        });
    }
    if set.is_empty() {
        return Err(ParamError::EmptyResult);
    }
    Ok(Extraction { set, skipped })
}

/// Draws `n` distinct texel indices uniformly without replacement from the
/// grid; deterministic for a fixed seed.
pub fn sample_uniform(res: &GridRes, n: usize, seed: u64) -> Result<Vec<GridIndex>, ParamError> {
    let total = res.texel_count();
    if n > total {
        return Err(ParamError::CountTooLarge {
            requested: n,
            available: total,
        });
    }
    let mut pool: Vec<u32> = (0..total as u32).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Partial Fisher-Yates: after i swaps, pool[..i] is the draw.
    for i in 0..n {
        let j = rng.gen_range(i..total);
        pool.swap(i, j);
    }
    Ok(pool[..n]
        .iter()
        .map(|&t| GridIndex::from_linear(t as usize, res))
        .collect())
}

/// All texel indices of a grid, in layout order.
pub fn all_indices(res: &GridRes) -> Vec<GridIndex> {
    (0..res.texel_count())
        .map(|t| GridIndex::from_linear(t, res))
        .collect()
}
