//! sRGB to CIE Lab conversion (D65 white point).
//!
//! Constants follow the widely used 6-decimal sRGB matrix and the
//! 0.008856 / 7.787 knee, so values agree with the common reference
//! implementations to ~1e-4.

use crate::scalar::Real;

const XYZ_FROM_RGB: [[f64; 3]; 3] = [
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
];
const WHITE_D65: [f64; 3] = [0.95047, 1.0, 1.08883];

#[inline]
fn srgb_linearize(c: f64) -> f64 {
    if c <= 0.04045 {
        c / 12.92
    } else {
        ((c + 0.055) / 1.055).powf(2.4)
    }
}

#[inline]
fn lab_f(t: f64) -> f64 {
    if t > 0.008856 {
        t.cbrt()
    } else {
        7.787 * t + 16.0 / 116.0
    }
}

/// Convert one sRGB pixel (components in [0, 1]) to (L, a, b);
/// L in [0, 100], a and b roughly in [-128, 127].
pub fn rgb_to_lab<T: Real>(rgb: [T; 3]) -> [T; 3] {
    let lin: Vec<f64> = rgb
        .iter()
        .map(|c| srgb_linearize(c.as_f64().clamp(0.0, 1.0)))
        .collect();
    let mut xyz = [0.0f64; 3];
    for (i, row) in XYZ_FROM_RGB.iter().enumerate() {
        xyz[i] = row[0] * lin[0] + row[1] * lin[1] + row[2] * lin[2];
    }
    let fx = lab_f(xyz[0] / WHITE_D65[0]);
    let fy = lab_f(xyz[1] / WHITE_D65[1]);
    let fz = lab_f(xyz[2] / WHITE_D65[2]);
    [
        T::of(116.0 * fy - 16.0),
        T::of(500.0 * (fx - fy)),
        T::of(200.0 * (fy - fz)),
    ]
}

/// Rescale an a or b component into [0, 1] for use as a feature channel:
/// `(v + 128) / 255`. Neutral gray lands near 0.502.
#[inline]
pub fn ab_to_unit<T: Real>(v: T) -> T {
    ((v + T::of(128.0)) / T::of(255.0)).max(T::zero()).min(T::one())
}
