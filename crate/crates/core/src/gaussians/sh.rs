//! Real spherical harmonics up to degree 3, in the ordering used by splat
//! renderers: one DC term, then bands 1..3. Colors are stored as per-channel
//! coefficients; evaluation adds a 0.5 offset so a zero tail renders gray.

use crate::scalar::Scalar;
use nalgebra::Vector3;

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const SH_C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const MAX_DEGREE: usize = 3;
pub const MAX_COEFFS: usize = 16;

/// Coefficient count for a band-limited expansion.
#[inline]
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Coefficient for the DC band that evaluates to `rgb` (with the 0.5 offset).
#[inline]
pub fn channel_to_dc<T: Scalar>(value: T) -> T {
    (value - T::of(0.5)) / T::of(SH_C0)
}

/// Basis values at a unit direction. Entries past `coeff_count(degree)` are
/// zero.
pub fn basis<T: Scalar>(degree: usize, dir: &Vector3<T>) -> [T; MAX_COEFFS] {
    let mut b = [T::zero(); MAX_COEFFS];
    b[0] = T::of(SH_C0);
    if degree == 0 {
        return b;
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let c1 = T::of(SH_C1);
    b[1] = -c1 * y;
    b[2] = c1 * z;
    b[3] = -c1 * x;
    if degree == 1 {
        return b;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let (xy, yz, xz) = (x * y, y * z, x * z);
    let two = T::of(2.0);
    b[4] = T::of(SH_C2[0]) * xy;
    b[5] = T::of(SH_C2[1]) * yz;
    b[6] = T::of(SH_C2[2]) * (two * zz - xx - yy);
    b[7] = T::of(SH_C2[3]) * xz;
    b[8] = T::of(SH_C2[4]) * (xx - yy);
    if degree == 2 {
        return b;
    }
    let three = T::of(3.0);
    let four = T::of(4.0);
    b[9] = T::of(SH_C3[0]) * y * (three * xx - yy);
    b[10] = T::of(SH_C3[1]) * xy * z;
    b[11] = T::of(SH_C3[2]) * y * (four * zz - xx - yy);
    b[12] = T::of(SH_C3[3]) * z * (two * zz - three * xx - three * yy);
    b[13] = T::of(SH_C3[4]) * x * (four * zz - xx - yy);
    b[14] = T::of(SH_C3[5]) * z * (xx - yy);
    b[15] = T::of(SH_C3[6]) * x * (xx - three * yy);
    b
}

/// Basis values plus their gradients w.r.t. the (unnormalized-input) unit
/// direction components.
pub fn basis_with_gradient<T: Scalar>(
    degree: usize,
    dir: &Vector3<T>,
) -> ([T; MAX_COEFFS], [Vector3<T>; MAX_COEFFS]) {
    let b = basis(degree, dir);
    let mut g = [Vector3::zeros(); MAX_COEFFS];
    if degree == 0 {
        return (b, g);
    }
    let (x, y, z) = (dir.x, dir.y, dir.z);
    let c1 = T::of(SH_C1);
    g[1] = Vector3::new(T::zero(), -c1, T::zero());
    g[2] = Vector3::new(T::zero(), T::zero(), c1);
    g[3] = Vector3::new(-c1, T::zero(), T::zero());
    if degree == 1 {
        return (b, g);
    }
    let two = T::of(2.0);
    g[4] = Vector3::new(y, x, T::zero()) * T::of(SH_C2[0]);
    g[5] = Vector3::new(T::zero(), z, y) * T::of(SH_C2[1]);
    g[6] = Vector3::new(-two * x, -two * y, T::of(4.0) * z) * T::of(SH_C2[2]);
    g[7] = Vector3::new(z, T::zero(), x) * T::of(SH_C2[3]);
    g[8] = Vector3::new(two * x, -two * y, T::zero()) * T::of(SH_C2[4]);
    if degree == 2 {
        return (b, g);
    }
    let three = T::of(3.0);
    let four = T::of(4.0);
    let six = T::of(6.0);
    let eight = T::of(8.0);
    let (xx, yy, zz) = (x * x, y * y, z * z);
    g[9] = Vector3::new(six * x * y, three * xx - three * yy, T::zero()) * T::of(SH_C3[0]);
    g[10] = Vector3::new(y * z, x * z, x * y) * T::of(SH_C3[1]);
    g[11] = Vector3::new(
        -two * x * y,
        four * zz - xx - three * yy,
        eight * y * z,
    ) * T::of(SH_C3[2]);
    g[12] = Vector3::new(
        -six * x * z,
        -six * y * z,
        six * zz - three * xx - three * yy,
    ) * T::of(SH_C3[3]);
    g[13] = Vector3::new(
        four * zz - three * xx - yy,
        -two * x * y,
        eight * x * z,
    ) * T::of(SH_C3[4]);
    g[14] = Vector3::new(two * x * z, -two * y * z, xx - yy) * T::of(SH_C3[5]);
    g[15] = Vector3::new(three * xx - three * yy, -six * x * y, T::zero()) * T::of(SH_C3[6]);
    (b, g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn random_unit(rng: &mut StdRng) -> Vector3<f64> {
        loop {
            let v = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let n = v.norm();
            if n > 0.1 {
                return v / n;
            }
        }
    }

    #[test]
    fn coeff_counts() {
        assert_eq!(coeff_count(0), 1);
        assert_eq!(coeff_count(1), 4);
        assert_eq!(coeff_count(2), 9);
        assert_eq!(coeff_count(3), 16);
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(9);
        let h = 1e-6;
        for _ in 0..30 {
            let d = random_unit(&mut rng);
            let (_, grad) = basis_with_gradient(3, &d);
            for axis in 0..3 {
                let mut dp = d;
                let mut dm = d;
                dp[axis] += h;
                dm[axis] -= h;
                // Treat the basis as a function of the raw components.
                let bp = basis(3, &dp);
                let bm = basis(3, &dm);
                for k in 0..16 {
                    let fd = (bp[k] - bm[k]) / (2.0 * h);
                    assert_relative_eq!(grad[k][axis], fd, epsilon = 1e-6, max_relative = 1e-5);
                }
            }
        }
    }

    #[test]
    fn degree_limits_zero_out_higher_bands() {
        let d = Vector3::new(0.0, 0.0, 1.0);
        let b = basis::<f64>(1, &d);
        assert_relative_eq!(b[2], SH_C1);
        for v in &b[4..] {
            assert_eq!(*v, 0.0);
        }
    }
}
