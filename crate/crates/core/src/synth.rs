//! Synthetic analytic materials written as MERL grids, used for toy
//! experiments and tests. Texels whose geometry falls below the horizon are
//! marked invalid, matching how measured files are treated downstream.

use crate::merl::{BrdfGrid, GridRes, MaterialRecord};
use crate::param::{
    angles_to_halfdiff, halfdiff_to_io, index_to_angles, GridIndex, RusinAngles,
};

/// Fills a grid by evaluating `eval` at every valid texel center.
pub fn analytic_grid(res: GridRes, eval: impl Fn(&RusinAngles) -> [f64; 3]) -> BrdfGrid {
    let mut grid = BrdfGrid::zeros(res);
    for t in 0..res.texel_count() {
        let g = GridIndex::from_linear(t, &res);
        let angles = index_to_angles(&g, &res);
        let (h, d) = angles_to_halfdiff(&angles);
        if halfdiff_to_io(&h, &d).is_err() {
            grid.set_invalid(t);
            continue;
        }
        let rho = eval(&angles);
        for (c, &v) in rho.iter().enumerate() {
            grid.set_linear(t, c, v);
        }
    }
    grid
}

/// Constant diffuse reflectance `albedo / pi`.
pub fn lambertian(res: GridRes, albedo: [f64; 3]) -> BrdfGrid {
    analytic_grid(res, |_| {
        [
            albedo[0] / std::f64::consts::PI,
            albedo[1] / std::f64::consts::PI,
            albedo[2] / std::f64::consts::PI,
        ]
    })
}

/// Diffuse term plus a half-angle specular lobe `ks * cos(theta_h)^p`.
pub fn phong_like(res: GridRes, diffuse: [f64; 3], specular: [f64; 3], exponent: f64) -> BrdfGrid {
    analytic_grid(res, |a| {
        let lobe = a.theta_h.cos().max(0.0).powf(exponent);
        [
            diffuse[0] / std::f64::consts::PI + specular[0] * lobe,
            diffuse[1] / std::f64::consts::PI + specular[1] * lobe,
            diffuse[2] / std::f64::consts::PI + specular[2] * lobe,
        ]
    })
}

/// The three-material toy dataset used by the overfit experiments: one
/// Lambertian and two Phong-like lobes. Reflectance is strictly ordered
/// per channel at every texel (lambert < mid < bright = 2 x mid), so the
/// per-texel median reference is the mid material everywhere and the
/// mapped targets stay smooth.
pub fn toy_dataset(res: GridRes) -> Vec<MaterialRecord> {
    vec![
        MaterialRecord {
            name: "toy-lambert".into(),
            grid: lambertian(res, [0.09, 0.12, 0.15]),
        },
        MaterialRecord {
            name: "toy-phong-mid".into(),
            grid: phong_like(res, [0.25, 0.3, 0.35], [0.3, 0.3, 0.3], 12.0),
        },
        MaterialRecord {
            name: "toy-phong-bright".into(),
            grid: phong_like(res, [0.5, 0.6, 0.7], [0.6, 0.6, 0.6], 12.0),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::merl::REDUCED_RES;

    #[test]
    fn lambertian_is_constant_on_valid_texels() {
        let grid = lambertian(REDUCED_RES, [0.3, 0.3, 0.3]);
        let expected = 0.3 / std::f64::consts::PI;
        let mut valid = 0;
        for t in 0..grid.texel_count() {
            if grid.is_valid_texel(t) {
                valid += 1;
                assert!((grid.linear_at(t, 0) - expected).abs() < 1e-12);
            }
        }
        assert!(valid > grid.texel_count() / 2);
    }

    #[test]
    fn phong_lobe_decays_with_theta_h() {
        let res = REDUCED_RES;
        let grid = phong_like(res, [0.0, 0.0, 0.0], [1.0, 1.0, 1.0], 10.0);
        let near = res.linear_index(0, 0, 0);
        let far = res.linear_index(10, 0, 0);
        assert!(grid.linear_at(near, 0) > grid.linear_at(far, 0));
    }
}
