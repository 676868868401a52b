//! Orthographic sphere renderer under directional lights, display tonemap,
//! image metrics (PSNR, SSIM, CIEDE2000) and PFM/PPM image I/O.

use crate::merl::BrdfGrid;
use crate::param::{angles_to_index, halfdiff_to_angles, io_to_halfdiff, Direction};
use crate::threading::parallel_map_ranges;

#[derive(Debug, thiserror::Error)]
pub enum RenderError {
    #[error("image dimensions {0}x{1} are invalid")]
    BadDimensions(usize, usize),
    #[error("image data length {got} does not match {expected}")]
    BadDataLength { expected: usize, got: usize },
    #[error("images have different dimensions")]
    DimensionMismatch,
    #[error("image is too small for an 11x11 SSIM window")]
    TooSmallForSsim,
    #[error("malformed image stream: {0}")]
    Malformed(String),
}

/// Row-major HDR image with interleaved RGB triples.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRgb {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageRgb {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self, RenderError> {
        if width == 0 || height == 0 {
            return Err(RenderError::BadDimensions(width, height));
        }
        if data.len() != 3 * width * height {
            return Err(RenderError::BadDataLength {
                expected: 3 * width * height,
                got: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 3 * width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = 3 * (y * self.width + x);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Directional light: `direction` points from the surface toward the light.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DirectionalLight {
    pub direction: Direction,
    pub radiance: [f64; 3],
}

/// Looks a reflectance triple up from a dense grid for local incident and
/// outgoing directions. Invalid or below-horizon texels read as black.
pub fn eval_grid(grid: &BrdfGrid, wi: &Direction, wo: &Direction) -> [f64; 3] {
    let Ok((h, d)) = io_to_halfdiff(wi, wo) else {
        return [0.0; 3];
    };
    let res = grid.res();
    let t = angles_to_index(&halfdiff_to_angles(&h, &d), &res).linear(&res);
    if !grid.is_valid_texel(t) {
        return [0.0; 3];
    }
    [
        grid.linear_at(t, 0).max(0.0),
        grid.linear_at(t, 1).max(0.0),
        grid.linear_at(t, 2).max(0.0),
    ]
}

fn local_frame(n: &Direction) -> (Direction, Direction) {
    let up = if n.y.abs() < 0.999 {
        Direction { x: 0.0, y: 1.0, z: 0.0 }
    } else {
        Direction { x: 1.0, y: 0.0, z: 0.0 }
    };
    // t = normalize(up x n), b = n x t.
    let t = Direction::normalized(
        up.y * n.z - up.z * n.y,
        up.z * n.x - up.x * n.z,
        up.x * n.y - up.y * n.x,
    )
    .unwrap();
    let b = Direction {
        x: n.y * t.z - n.z * t.y,
        y: n.z * t.x - n.x * t.z,
        z: n.x * t.y - n.y * t.x,
    };
    (t, b)
}

fn to_local(v: &Direction, t: &Direction, b: &Direction, n: &Direction) -> Direction {
    Direction {
        x: v.dot(t),
        y: v.dot(b),
        z: v.dot(n),
    }
}

/// Renders a unit sphere under the given lights with an orthographic camera
/// on the +z axis. The shading sum is `brdf * radiance * max(0, n . l)` per
/// light; pixels off the sphere stay black.
pub fn render_sphere<F>(
    brdf: &F,
    lights: &[DirectionalLight],
    width: usize,
    height: usize,
    threads: usize,
) -> Result<ImageRgb, RenderError>
where
    F: Fn(&Direction, &Direction) -> [f64; 3] + Sync,
{
    if width == 0 || height == 0 {
        return Err(RenderError::BadDimensions(width, height));
    }
    let view = Direction::Z;
    let rows = parallel_map_ranges(height, threads, |start, len| {
        let mut out = vec![0.0; 3 * len * width];
        for (dy, y) in (start..start + len).enumerate() {
            for x in 0..width {
                let u = (2.0 * (x as f64 + 0.5) / width as f64) - 1.0;
                let v = 1.0 - (2.0 * (y as f64 + 0.5) / height as f64);
                let r2 = u * u + v * v;
                if r2 > 1.0 {
                    continue;
                }
                let n = Direction {
                    x: u,
                    y: v,
                    z: (1.0 - r2).sqrt(),
                };
                let (t, b) = local_frame(&n);
                let wo = to_local(&view, &t, &b, &n);
                if wo.z <= 0.0 {
                    continue;
                }
                let mut rgb = [0.0; 3];
                for light in lights {
                    let cos = n.dot(&light.direction);
                    if cos <= 0.0 {
                        continue;
                    }
                    let wi = to_local(&light.direction, &t, &b, &n);
                    let f = brdf(&wi, &wo);
                    for c in 0..3 {
                        rgb[c] += f[c] * light.radiance[c] * cos;
                    }
                }
                let i = 3 * (dy * width + x);
                out[i..i + 3].copy_from_slice(&rgb);
            }
        }
        out
    });
    let data = rows.into_iter().flatten().collect();
    ImageRgb::new(width, height, data)
}

/// Display transform: `clip(exposure * v, 0, 1) ^ (1 / gamma)` per channel.
pub fn tonemap(image: &ImageRgb, exposure: f64, gamma: f64) -> ImageRgb {
    let data = image
        .data
        .iter()
        .map(|&v| (exposure * v).clamp(0.0, 1.0).powf(1.0 / gamma))
        .collect();
    ImageRgb {
        width: image.width,
        height: image.height,
        data,
    }
}

/// The reported PSNR ceiling for (near-)identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB over all channels, capped at 99 dB.
pub fn psnr(a: &ImageRgb, b: &ImageRgb, peak: f64) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::DimensionMismatch);
    }
    let mse: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

fn luma(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

fn gaussian_kernel_11() -> [f64; 11] {
    let sigma = 1.5;
    let mut k = [0.0; 11];
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Mean structural similarity of the luma planes: 11x11 Gaussian windows
/// (sigma 1.5), k1 = 0.01, k2 = 0.03, dynamic range 1, valid windows only.
pub fn ssim(a: &ImageRgb, b: &ImageRgb) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::DimensionMismatch);
    }
    if a.width < 11 || a.height < 11 {
        return Err(RenderError::TooSmallForSsim);
    }
    let (w, h) = (a.width, a.height);
    let la: Vec<f64> = (0..w * h).map(|i| luma(a.pixel(i % w, i / w))).collect();
    let lb: Vec<f64> = (0..w * h).map(|i| luma(b.pixel(i % w, i / w))).collect();
    let kernel = gaussian_kernel_11();
    // Separable blur of the five moment planes.
    let blur = |plane: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; w * h];
        for y in 0..h {
            for x in 5..w - 5 {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * plane[y * w + x + k - 5];
                }
                tmp[y * w + x] = acc;
            }
        }
        let mut out = vec![0.0; w * h];
        for y in 5..h - 5 {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    acc += kv * tmp[(y + k - 5) * w + x];
                }
                out[y * w + x] = acc;
            }
        }
        out
    };
    let aa: Vec<f64> = la.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = lb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = la.iter().zip(&lb).map(|(x, y)| x * y).collect();
    let mu_a = blur(&la);
    let mu_b = blur(&lb);
    let m_aa = blur(&aa);
    let m_bb = blur(&bb);
    let m_ab = blur(&ab);

    let c1 = (0.01f64).powi(2);
    let c2 = (0.03f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for y in 5..h - 5 {
        for x in 5..w - 5 {
            let i = y * w + x;
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = m_aa[i] - ma * ma;
            let vb = m_bb[i] - mb * mb;
            let cov = m_ab[i] - ma * mb;
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

/// CIE Lab coordinates under D65.
pub fn srgb_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let r = srgb_to_linear(rgb[0]);
    let g = srgb_to_linear(rgb[1]);
    let b = srgb_to_linear(rgb[2]);
    let x = 0.4124564 * r + 0.3575761 * g + 0.1804375 * b;
    let y = 0.2126729 * r + 0.7151522 * g + 0.0721750 * b;
    let z = 0.0193339 * r + 0.1191920 * g + 0.9503041 * b;
    let f = |t: f64| {
        let delta = 6.0 / 29.0;
        if t > delta * delta * delta {
            t.cbrt()
        } else {
            t / (3.0 * delta * delta) + 4.0 / 29.0
        }
    };
    let (fx, fy, fz) = (f(x / 0.95047), f(y), f(z / 1.08883));
    [116.0 * fy - 16.0, 500.0 * (fx - fy), 200.0 * (fy - fz)]
}

/// CIEDE2000 color difference with unit parametric factors.
pub fn ciede2000(lab1: [f64; 3], lab2: [f64; 3]) -> f64 {
    let (l1, a1, b1) = (lab1[0], lab1[1], lab1[2]);
    let (l2, a2, b2) = (lab2[0], lab2[1], lab2[2]);
    let c1 = (a1 * a1 + b1 * b1).sqrt();
    let c2 = (a2 * a2 + b2 * b2).sqrt();
    let cbar = 0.5 * (c1 + c2);
    let cbar7 = cbar.powi(7);
    let g = 0.5 * (1.0 - (cbar7 / (cbar7 + 25f64.powi(7))).sqrt());
    let a1p = (1.0 + g) * a1;
    let a2p = (1.0 + g) * a2;
    let c1p = (a1p * a1p + b1 * b1).sqrt();
    let c2p = (a2p * a2p + b2 * b2).sqrt();
    let hue = |a: f64, b: f64| {
        if a == 0.0 && b == 0.0 {
            0.0
        } else {
            let h = b.atan2(a).to_degrees();
            if h < 0.0 {
                h + 360.0
            } else {
                h
            }
        }
    };
    let h1p = hue(a1p, b1);
    let h2p = hue(a2p, b2);

    let dlp = l2 - l1;
    let dcp = c2p - c1p;
    let dhp_angle = if c1p * c2p == 0.0 {
        0.0
    } else {
        let d = h2p - h1p;
        if d > 180.0 {
            d - 360.0
        } else if d < -180.0 {
            d + 360.0
        } else {
            d
        }
    };
    let dhp = 2.0 * (c1p * c2p).sqrt() * (dhp_angle.to_radians() / 2.0).sin();

    let lbar = 0.5 * (l1 + l2);
    let cbarp = 0.5 * (c1p + c2p);
    let hbarp = if c1p * c2p == 0.0 {
        h1p + h2p
    } else {
        let sum = h1p + h2p;
        if (h1p - h2p).abs() <= 180.0 {
            0.5 * sum
        } else if sum < 360.0 {
            0.5 * (sum + 360.0)
        } else {
            0.5 * (sum - 360.0)
        }
    };
    let t = 1.0 - 0.17 * (hbarp - 30.0).to_radians().cos()
        + 0.24 * (2.0 * hbarp).to_radians().cos()
        + 0.32 * (3.0 * hbarp + 6.0).to_radians().cos()
        - 0.20 * (4.0 * hbarp - 63.0).to_radians().cos();
    let dtheta = 30.0 * (-((hbarp - 275.0) / 25.0).powi(2)).exp();
    let cbarp7 = cbarp.powi(7);
    let rc = 2.0 * (cbarp7 / (cbarp7 + 25f64.powi(7))).sqrt();
    let l50 = (lbar - 50.0) * (lbar - 50.0);
    let sl = 1.0 + 0.015 * l50 / (20.0 + l50).sqrt();
    let sc = 1.0 + 0.045 * cbarp;
    let sh = 1.0 + 0.015 * cbarp * t;
    let rt = -(2.0 * dtheta).to_radians().sin() * rc;

    let (tl, tc, th) = (dlp / sl, dcp / sc, dhp / sh);
    (tl * tl + tc * tc + th * th + rt * tc * th).sqrt()
}

/// Mean CIEDE2000 over two display-referred ([0, 1] sRGB) images.
pub fn mean_delta_e(a: &ImageRgb, b: &ImageRgb) -> Result<f64, RenderError> {
    if a.width != b.width || a.height != b.height {
        return Err(RenderError::DimensionMismatch);
    }
    let n = a.width * a.height;
    let total: f64 = (0..n)
        .map(|i| {
            let (x, y) = (i % a.width, i / a.width);
            ciede2000(srgb_to_lab(a.pixel(x, y)), srgb_to_lab(b.pixel(x, y)))
        })
        .sum();
    Ok(total / n as f64)
}

/// Encodes an HDR image as a little-endian color PFM (rows bottom-to-top).
pub fn write_pfm(image: &ImageRgb) -> Vec<u8> {
    let mut out = format!("PF\n{} {}\n-1.0\n", image.width, image.height).into_bytes();
    for y in (0..image.height).rev() {
        for x in 0..image.width {
            for v in image.pixel(x, y) {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    out
}

fn pfm_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a str, RenderError> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(RenderError::Malformed("truncated header".into()));
    }
    let token = std::str::from_utf8(&bytes[start..*pos])
        .map_err(|_| RenderError::Malformed("non-ascii header".into()))?;
    // Consume exactly one whitespace byte after the token.
    *pos += 1;
    Ok(token)
}

pub fn read_pfm(bytes: &[u8]) -> Result<ImageRgb, RenderError> {
    let mut pos = 0usize;
    if pfm_token(bytes, &mut pos)? != "PF" {
        return Err(RenderError::Malformed("not a color PFM stream".into()));
    }
    let parse = |s: &str| {
        s.parse::<f64>()
            .map_err(|e| RenderError::Malformed(format!("bad header number: {e}")))
    };
    let width = parse(pfm_token(bytes, &mut pos)?)? as usize;
    let height = parse(pfm_token(bytes, &mut pos)?)? as usize;
    let scale = parse(pfm_token(bytes, &mut pos)?)?;
    if scale >= 0.0 {
        return Err(RenderError::Malformed(
            "big-endian PFM is not supported".into(),
        ));
    }
    let body = bytes
        .get(pos..)
        .ok_or_else(|| RenderError::Malformed("truncated header".into()))?;
    let expected = 4 * 3 * width * height;
    if body.len() != expected {
        return Err(RenderError::Malformed(format!(
            "payload is {} bytes, expected {expected}",
            body.len()
        )));
    }
    let mut image = ImageRgb::zeros(width, height);
    let mut floats = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    for y in (0..height).rev() {
        for x in 0..width {
            let rgb = [
                floats.next().unwrap(),
                floats.next().unwrap(),
                floats.next().unwrap(),
            ];
            image.set_pixel(x, y, rgb);
        }
    }
    Ok(image)
}

/// Encodes a display-referred ([0, 1]) image as a binary PPM.
pub fn write_ppm(image: &ImageRgb) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", image.width, image.height).into_bytes();
    for v in &image.data {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out
}
