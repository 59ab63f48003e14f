//! Gaussian-mixture radiance fields and their pointwise evaluation.
//!
//! Each primitive stores its covariance in factored form (per-axis scale and
//! a rotation quaternion), so `Σ = R diag(s²) Rᵀ` is positive definite for
//! every admissible parameter value.

use nalgebra::{Matrix3, Vector3, Vector4};
use thiserror::Error;

use crate::scalar::Real;
use crate::sh;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("primitive {index}: {reason}")]
    InvalidPrimitive { index: usize, reason: String },
    #[error("spherical harmonics degree {0} unsupported (max {max})", max = sh::MAX_DEGREE)]
    UnsupportedDegree(usize),
    #[error("mixture is empty")]
    Empty,
    /// Color is a ratio of opacity-weighted sums and is undefined where the
    /// total opacity vanishes.
    #[error("color is undefined at a point with zero total opacity")]
    ZeroOpacity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPrimitive<T: Real> {
    /// Opacity scale `σ_i >= 0`.
    pub opacity: T,
    pub mean: Vector3<T>,
    /// Positive per-axis standard deviations.
    pub scale: Vector3<T>,
    /// Orientation quaternion `(w, x, y, z)`; unit norm.
    pub rotation: Vector4<T>,
    /// One RGB coefficient per spherical-harmonics basis function.
    pub sh: Vec<Vector3<T>>,
}

fn unit_tolerance<T: Real>() -> T {
    T::lit((T::default_epsilon().as_f64() * 100.0).max(1e-9))
}

/// Rotation matrix of the normalized quaternion `(w, x, y, z)`.
pub fn quat_to_matrix<T: Real>(q: &Vector4<T>) -> Matrix3<T> {
    let q = q.normalize();
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let one = T::one();
    let two = T::lit(2.0);
    Matrix3::new(
        one - two * (y * y + z * z), two * (x * y - w * z), two * (x * z + w * y),
        two * (x * y + w * z), one - two * (x * x + z * z), two * (y * z - w * x),
        two * (x * z - w * y), two * (y * z + w * x), one - two * (x * x + y * y),
    )
}

impl<T: Real> GaussianPrimitive<T> {
    /// Isotropic primitive with a direction-independent color.
    pub fn isotropic(mean: Vector3<T>, radius: T, opacity: T, rgb: Vector3<T>) -> Self {
        Self {
            opacity,
            mean,
            scale: Vector3::repeat(radius),
            rotation: Vector4::new(T::one(), T::zero(), T::zero(), T::zero()),
            sh: vec![sh::dc_from_rgb(rgb)],
        }
    }

    pub fn degree(&self) -> usize {
        match self.sh.len() {
            1 => 0,
            4 => 1,
            9 => 2,
            _ => usize::MAX,
        }
    }

    pub fn validate(&self, index: usize, degree: usize) -> Result<(), FieldError> {
        let fail = |reason: &str| Err(FieldError::InvalidPrimitive { index, reason: reason.into() });
        if !(self.opacity >= T::zero()) || !self.opacity.is_finite() {
            return fail("opacity must be finite and non-negative");
        }
        if self.mean.iter().any(|v| !v.is_finite()) {
            return fail("mean must be finite");
        }
        if self.scale.iter().any(|&v| !(v > T::zero()) || !v.is_finite()) {
            return fail("scales must be finite and positive");
        }
        if (self.rotation.norm() - T::one()).abs() > unit_tolerance::<T>() {
            return fail("rotation quaternion must have unit norm");
        }
        if self.sh.len() != sh::coeff_count(degree) {
            return fail("spherical harmonics coefficient count does not match degree");
        }
        if self.sh.iter().any(|c| c.iter().any(|v| !v.is_finite())) {
            return fail("spherical harmonics coefficients must be finite");
        }
        Ok(())
    }

    pub fn rotation_matrix(&self) -> Matrix3<T> {
        quat_to_matrix(&self.rotation)
    }

    /// Re-establishes the type invariants after an unconstrained update.
    pub fn project_to_valid(&mut self) {
        if !(self.opacity >= T::zero()) {
            self.opacity = T::zero();
        }
        let floor = T::lit(1e-6);
        for s in self.scale.iter_mut() {
            if !(*s >= floor) {
                *s = floor;
            }
        }
        let n = self.rotation.norm();
        if n > T::zero() {
            self.rotation /= n;
        } else {
            self.rotation = Vector4::new(T::one(), T::zero(), T::zero(), T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> GaussianPrimitive<U> {
        let c = |v: T| U::lit(v.as_f64());
        GaussianPrimitive {
            opacity: c(self.opacity),
            mean: self.mean.map(c),
            scale: self.scale.map(c),
            rotation: self.rotation.map(c),
            sh: self.sh.iter().map(|v| v.map(c)).collect(),
        }
    }
}

/// `Σ = R diag(s²) Rᵀ`.
pub fn covariance<T: Real>(prim: &GaussianPrimitive<T>) -> Matrix3<T> {
    let r = prim.rotation_matrix();
    r * Matrix3::from_diagonal(&prim.scale.component_mul(&prim.scale)) * r.transpose()
}

/// `Σ⁻¹ = R diag(s⁻²) Rᵀ`, computed from the factors.
pub fn inverse_covariance<T: Real>(prim: &GaussianPrimitive<T>) -> Matrix3<T> {
    let r = prim.rotation_matrix();
    let inv = prim.scale.map(|s| T::one() / (s * s));
    r * Matrix3::from_diagonal(&inv) * r.transpose()
}

/// Squared Mahalanobis distance `(x-μ)ᵀ Σ⁻¹ (x-μ)` via the factored inverse.
pub fn mahalanobis_sq<T: Real>(prim: &GaussianPrimitive<T>, x: &Vector3<T>) -> T {
    let local = prim.rotation_matrix().transpose() * (x - prim.mean);
    (0..3).fold(T::zero(), |acc, k| {
        let u = local[k] / prim.scale[k];
        acc + u * u
    })
}

/// `g_i(x) = exp(-½ (x-μ)ᵀ Σ⁻¹ (x-μ))`.
pub fn gaussian_eval<T: Real>(prim: &GaussianPrimitive<T>, x: &Vector3<T>) -> T {
    (-T::lit(0.5) * mahalanobis_sq(prim, x)).exp()
}

/// Directional color `c_i(ν)` of one primitive.
pub fn sh_color<T: Real>(prim: &GaussianPrimitive<T>, nu: &Vector3<T>) -> Vector3<T> {
    sh::eval_color(prim.degree(), &prim.sh, nu)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianMixture<T: Real> {
    pub primitives: Vec<GaussianPrimitive<T>>,
    pub sh_degree: usize,
}

impl<T: Real> GaussianMixture<T> {
    pub fn new(primitives: Vec<GaussianPrimitive<T>>, sh_degree: usize) -> Result<Self, FieldError> {
        let mix = Self { primitives, sh_degree };
        mix.validate()?;
        Ok(mix)
    }

    pub fn validate(&self) -> Result<(), FieldError> {
        if self.sh_degree > sh::MAX_DEGREE {
            return Err(FieldError::UnsupportedDegree(self.sh_degree));
        }
        for (i, p) in self.primitives.iter().enumerate() {
            p.validate(i, self.sh_degree)?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.primitives.len()
    }

    pub fn is_empty(&self) -> bool {
        self.primitives.is_empty()
    }

    /// Centroid of the means and the largest distance of a mean from it.
    pub fn bounds(&self) -> (Vector3<T>, T) {
        if self.primitives.is_empty() {
            return (Vector3::zeros(), T::zero());
        }
        let n = T::of_usize(self.primitives.len());
        let center = self.primitives.iter().fold(Vector3::zeros(), |acc, p| acc + p.mean) / n;
        let radius = self
            .primitives
            .iter()
            .map(|p| (p.mean - center).norm())
            .fold(T::zero(), |a, b| a.max(b));
        (center, radius)
    }

    pub fn cast<U: Real>(&self) -> GaussianMixture<U> {
        GaussianMixture { primitives: self.primitives.iter().map(|p| p.cast()).collect(), sh_degree: self.sh_degree }
    }
}

/// `σ(x) = Σ_i σ_i g_i(x)`, summed in primitive order.
pub fn field_opacity<T: Real>(mix: &GaussianMixture<T>, x: &Vector3<T>) -> T {
    mix.primitives
        .iter()
        .fold(T::zero(), |acc, p| acc + p.opacity * gaussian_eval(p, x))
}

/// Opacity-weighted average of the primitive colors at `x`.
pub fn field_color<T: Real>(
    mix: &GaussianMixture<T>,
    x: &Vector3<T>,
    nu: &Vector3<T>,
) -> Result<Vector3<T>, FieldError> {
    let mut total = T::zero();
    let mut color = Vector3::zeros();
    for p in &mix.primitives {
        let w = p.opacity * gaussian_eval(p, x);
        total += w;
        color += sh_color(p, nu) * w;
    }
    if !(total > T::zero()) {
        return Err(FieldError::ZeroOpacity);
    }
    Ok(color / total)
}
