//! Second-order real spherical harmonics lighting.
//!
//! Basis order and constants (unit normal `n = (x, y, z)`):
//!
//! | b | H_b(n)                      | constant                |
//! |---|-----------------------------|-------------------------|
//! | 0 | c0                          | c0 = 1 / (2 sqrt(pi))   |
//! | 1 | c1 * y                      | c1 = sqrt(3) / (2 sqrt(pi)) |
//! | 2 | c1 * z                      |                         |
//! | 3 | c1 * x                      |                         |
//! | 4 | c2 * x y                    | c2 = sqrt(15) / (2 sqrt(pi)) |
//! | 5 | c2 * y z                    |                         |
//! | 6 | c3 * (3 z^2 - 1)            | c3 = sqrt(5) / (4 sqrt(pi)) |
//! | 7 | c2 * x z                    |                         |
//! | 8 | c4 * (x^2 - y^2)            | c4 = sqrt(15) / (4 sqrt(pi)) |
//!
//! Lighting coefficients are 27 reals laid out channel-major:
//! `theta[9 * c + b]` for channel `c` in (R, G, B).

use std::f64::consts::PI;

use nalgebra::Vector3;

pub const SH_BANDS: usize = 9;
pub const SH_COEFFS: usize = 27;

pub const C0: f64 = 0.282_094_791_773_878_14;
pub const C1: f64 = 0.488_602_511_902_919_9;
pub const C2: f64 = 1.092_548_430_592_079_2;
pub const C3: f64 = 0.315_391_565_252_520_05;
pub const C4: f64 = 0.546_274_215_296_039_6;

/// Band-0 coefficient that yields unit irradiance: `1 / C0 = 2 sqrt(pi)`.
pub fn unit_irradiance_dc() -> f64 {
    2.0 * PI.sqrt()
}

/// Lighting that shades every normal with factor 1 in all channels.
pub fn unit_irradiance() -> [f64; SH_COEFFS] {
    let mut theta = [0.0; SH_COEFFS];
    for c in 0..3 {
        theta[9 * c] = unit_irradiance_dc();
    }
    theta
}

#[inline]
pub fn sh_basis(n: &Vector3<f64>) -> [f64; SH_BANDS] {
    let (x, y, z) = (n.x, n.y, n.z);
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2 * x * y,
        C2 * y * z,
        C3 * (3.0 * z * z - 1.0),
        C2 * x * z,
        C4 * (x * x - y * y),
    ]
}

/// Shading factor per channel: `sum_b theta[c][b] * H_b(n)`.
#[inline]
pub fn irradiance(n: &Vector3<f64>, theta: &[f64; SH_COEFFS]) -> [f64; 3] {
    let h = sh_basis(n);
    let mut out = [0.0; 3];
    for (c, o) in out.iter_mut().enumerate() {
        *o = theta[9 * c..9 * c + 9].iter().zip(h.iter()).map(|(t, h)| t * h).sum();
    }
    out
}

/// Shaded color `albedo_c * sum_b theta[c][b] * H_b(n)`, unclamped.
#[inline]
pub fn sh_shade(normal: &Vector3<f64>, albedo: [f64; 3], theta: &[f64; SH_COEFFS]) -> [f64; 3] {
    let e = irradiance(normal, theta);
    [albedo[0] * e[0], albedo[1] * e[1], albedo[2] * e[2]]
}
