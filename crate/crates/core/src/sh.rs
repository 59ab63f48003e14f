//! Real spherical harmonics up to degree 2.
//!
//! Basis functions are ordered by degree `l`, then by order `m = -l..=l`, and
//! use the orthonormal convention with the Condon-Shortley phase (the layout
//! used by common Gaussian-splat files).

use nalgebra::Vector3;

use crate::scalar::Real;

pub const MAX_DEGREE: usize = 2;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Number of basis functions for degree `l`.
pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Evaluates all basis functions of degree `<= degree` at unit direction `d`.
pub fn basis<T: Real>(degree: usize, d: &Vector3<T>) -> [T; 9] {
    assert!(degree <= MAX_DEGREE, "spherical harmonics degree {degree} unsupported");
    let mut out = [T::zero(); 9];
    out[0] = T::lit(C0);
    if degree >= 1 {
        let c1 = T::lit(C1);
        out[1] = -c1 * d.y;
        out[2] = c1 * d.z;
        out[3] = -c1 * d.x;
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        out[4] = T::lit(C2[0]) * x * y;
        out[5] = T::lit(C2[1]) * y * z;
        out[6] = T::lit(C2[2]) * (T::lit(2.0) * z * z - x * x - y * y);
        out[7] = T::lit(C2[3]) * x * z;
        out[8] = T::lit(C2[4]) * (x * x - y * y);
    }
    out
}

/// Gradients of the basis polynomials with respect to the (unnormalized)
/// direction components, evaluated at `d`.
pub fn basis_gradient<T: Real>(degree: usize, d: &Vector3<T>) -> [Vector3<T>; 9] {
    assert!(degree <= MAX_DEGREE, "spherical harmonics degree {degree} unsupported");
    let z0 = T::zero();
    let mut g = [Vector3::zeros(); 9];
    if degree >= 1 {
        let c1 = T::lit(C1);
        g[1] = Vector3::new(z0, -c1, z0);
        g[2] = Vector3::new(z0, z0, c1);
        g[3] = Vector3::new(-c1, z0, z0);
    }
    if degree >= 2 {
        let (x, y, z) = (d.x, d.y, d.z);
        let two = T::lit(2.0);
        g[4] = Vector3::new(y, x, z0) * T::lit(C2[0]);
        g[5] = Vector3::new(z0, z, y) * T::lit(C2[1]);
        g[6] = Vector3::new(-two * x, -two * y, T::lit(4.0) * z) * T::lit(C2[2]);
        g[7] = Vector3::new(z, z0, x) * T::lit(C2[3]);
        g[8] = Vector3::new(two * x, -two * y, z0) * T::lit(C2[4]);
    }
    g
}

/// RGB color `sum_k coeffs[k] * Y_k(d)`.
pub fn eval_color<T: Real>(degree: usize, coeffs: &[Vector3<T>], d: &Vector3<T>) -> Vector3<T> {
    let y = basis(degree, d);
    coeffs
        .iter()
        .zip(y.iter())
        .fold(Vector3::zeros(), |acc, (c, &b)| acc + c * b)
}

/// DC coefficient that produces `rgb` for degree-0 evaluation.
pub fn dc_from_rgb<T: Real>(rgb: Vector3<T>) -> Vector3<T> {
    rgb / T::lit(C0)
}

pub fn rgb_from_dc<T: Real>(dc: Vector3<T>) -> Vector3<T> {
    dc * T::lit(C0)
}
