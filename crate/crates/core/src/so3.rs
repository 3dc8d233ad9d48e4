//! Rotation algebra on SO(3).
//!
//! Rotations are stored as unit quaternions. `q` and `-q` describe the same
//! element and compare equal. The tangent space is represented by
//! [`RotationVector`] (axis times angle, radians), with `log` always returning
//! the principal branch (angle in `[0, π]`).

use std::f64::consts::PI;
use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Quaternion, Rotation3, Unit, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Angles this close to π make the axis sign of `log` unreliable.
pub const BRANCH_AMBIGUITY_EPS: f64 = 1e-7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum So3Error {
    #[error("rotation average of an empty sample set")]
    EmptyInput,
    #[error("invalid weights: {0}")]
    InvalidWeights(String),
    #[error("karcher mean did not converge after {iterations} iterations (gradient norm {gradient_norm:.3e})")]
    NotConverged {
        best: Rotation,
        gradient_norm: f64,
        iterations: usize,
    },
    #[error("outlier trimming at {threshold:.4} rad removed every sample")]
    AllSamplesTrimmed { threshold: f64 },
    #[error("not a rotation: {0}")]
    InvalidRotation(String),
}

/// An element of SO(3).
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(into = "[f64; 4]", try_from = "[f64; 4]")]
pub struct Rotation {
    q: UnitQuaternion<f64>,
}

/// Tangent vector at the identity: axis scaled by angle in radians.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotationVector(pub Vector3<f64>);

/// Result of `log` together with the near-π branch flag.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogMap {
    pub vector: RotationVector,
    /// Set when the angle is within [`BRANCH_AMBIGUITY_EPS`] of π, where the
    /// sign of the axis is not well defined.
    pub branch_ambiguous: bool,
}

impl RotationVector {
    pub fn new(x: f64, y: f64, z: f64) -> Self {
        Self(Vector3::new(x, y, z))
    }

    pub fn zero() -> Self {
        Self(Vector3::zeros())
    }

    pub fn angle(&self) -> f64 {
        self.0.norm()
    }

    pub fn exp(&self) -> Rotation {
        Rotation::exp(self)
    }
}

impl From<Vector3<f64>> for RotationVector {
    fn from(v: Vector3<f64>) -> Self {
        Self(v)
    }
}

impl Rotation {
    pub fn identity() -> Self {
        Self {
            q: UnitQuaternion::identity(),
        }
    }

    /// Normalizes `(w, x, y, z)`; fails on a zero or non-finite quaternion.
    pub fn from_quaternion(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(So3Error::InvalidRotation(format!(
                "quaternion ({w}, {x}, {y}, {z}) cannot be normalized"
            )));
        }
        Ok(Self {
            q: UnitQuaternion::new_unchecked(q / n),
        })
    }

    /// Wraps components that are already unit norm (within 1e-9) without
    /// renormalizing them, so stored values round-trip bit for bit.
    pub fn from_unit_components(w: f64, x: f64, y: f64, z: f64) -> Result<Self, So3Error> {
        let q = Quaternion::new(w, x, y, z);
        let n = q.norm();
        if !n.is_finite() || (n - 1.0).abs() > 1e-9 {
            return Err(So3Error::InvalidRotation(format!(
                "quaternion norm {n} is not unit"
            )));
        }
        Ok(Self {
            q: UnitQuaternion::new_unchecked(q),
        })
    }

    pub fn from_unit_quaternion(q: UnitQuaternion<f64>) -> Self {
        Self { q }
    }

    /// Accepts a matrix orthonormal within 1e-9 with determinant +1.
    pub fn from_matrix(m: &Matrix3<f64>) -> Result<Self, So3Error> {
        let err = (m * m.transpose() - Matrix3::identity()).abs().max();
        let det = m.determinant();
        if !(err <= 1e-9) || (det - 1.0).abs() > 1e-9 {
            return Err(So3Error::InvalidRotation(format!(
                "orthonormality error {err:.3e}, determinant {det}"
            )));
        }
        let r = Rotation3::from_matrix_unchecked(*m);
        Ok(Self {
            q: UnitQuaternion::from_rotation_matrix(&r),
        })
    }

    pub fn from_axis_angle(axis: &Vector3<f64>, angle: f64) -> Self {
        let axis = Unit::new_normalize(*axis);
        Self::exp(&RotationVector(axis.into_inner() * angle))
    }

    pub fn rx(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::x(), angle)
    }

    pub fn ry(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::y(), angle)
    }

    pub fn rz(angle: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), angle)
    }

    pub fn exp(v: &RotationVector) -> Self {
        let theta = v.0.norm();
        let half = 0.5 * theta;
        // sin(θ/2)/θ, with its Taylor series near zero
        let s = if theta < 1e-6 {
            0.5 - theta * theta / 48.0
        } else {
            half.sin() / theta
        };
        let q = Quaternion::new(half.cos(), s * v.0.x, s * v.0.y, s * v.0.z);
        Self {
            q: UnitQuaternion::new_normalize(q),
        }
    }

    pub fn log(&self) -> RotationVector {
        self.log_map().vector
    }

    pub fn log_map(&self) -> LogMap {
        let q = self.canonical_quaternion();
        let v = Vector3::new(q.i, q.j, q.k);
        let n = v.norm();
        let angle = 2.0 * n.atan2(q.w);
        let scale = if n < 1e-9 {
            // atan2(n, w)/n ≈ 1/w for tiny n
            2.0 / q.w
        } else {
            angle / n
        };
        LogMap {
            vector: RotationVector(v * scale),
            branch_ambiguous: angle > PI - BRANCH_AMBIGUITY_EPS,
        }
    }

    /// Rotation angle in `[0, π]`.
    pub fn angle(&self) -> f64 {
        let q = self.q.quaternion();
        let n = Vector3::new(q.i, q.j, q.k).norm();
        2.0 * n.atan2(q.w.abs())
    }

    pub fn inverse(&self) -> Self {
        Self {
            q: self.q.inverse(),
        }
    }

    /// `self · other`: the frame transform `self` followed by `other`.
    pub fn compose(&self, other: &Rotation) -> Self {
        Self { q: self.q * other.q }
    }

    pub fn geodesic_distance(&self, other: &Rotation) -> f64 {
        (self.inverse() * *other).angle()
    }

    pub fn apply(&self, v: &Vector3<f64>) -> Vector3<f64> {
        self.q * v
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        self.q.to_rotation_matrix().into_inner()
    }

    pub fn unit_quaternion(&self) -> &UnitQuaternion<f64> {
        &self.q
    }

    /// Stored quaternion components `(w, x, y, z)`, sign as stored.
    pub fn wxyz(&self) -> [f64; 4] {
        let q = self.q.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    /// Quaternion with `w >= 0`.
    pub fn canonical_quaternion(&self) -> Quaternion<f64> {
        let q = *self.q.quaternion();
        if q.w < 0.0 {
            -q
        } else {
            q
        }
    }

    /// `(unit axis, angle)`; the axis is `+z` for the identity.
    pub fn axis_angle(&self) -> (Vector3<f64>, f64) {
        let v = self.log().0;
        let angle = v.norm();
        if angle < 1e-15 {
            (Vector3::z(), 0.0)
        } else {
            (v / angle, angle)
        }
    }

    pub fn approx_eq(&self, other: &Rotation, tol: f64) -> bool {
        self.geodesic_distance(other) <= tol
    }

    /// Point at fraction `t` along the shortest geodesic from `self` to `other`.
    pub fn slerp(&self, other: &Rotation, t: f64) -> Rotation {
        let d = (self.inverse() * *other).log();
        *self * Rotation::exp(&RotationVector(d.0 * t))
    }
}

impl Default for Rotation {
    fn default() -> Self {
        Self::identity()
    }
}

impl PartialEq for Rotation {
    fn eq(&self, other: &Self) -> bool {
        let a = self.q.quaternion();
        let b = other.q.quaternion();
        a == b || *a == -*b
    }
}

impl Mul for Rotation {
    type Output = Rotation;
    fn mul(self, rhs: Rotation) -> Rotation {
        self.compose(&rhs)
    }
}

impl Mul<&Rotation> for &Rotation {
    type Output = Rotation;
    fn mul(self, rhs: &Rotation) -> Rotation {
        self.compose(rhs)
    }
}

impl fmt::Display for Rotation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let [w, x, y, z] = self.wxyz();
        write!(f, "Rotation(w: {w:.6}, x: {x:.6}, y: {y:.6}, z: {z:.6})")
    }
}

impl From<Rotation> for [f64; 4] {
    fn from(r: Rotation) -> Self {
        r.wxyz()
    }
}

impl TryFrom<[f64; 4]> for Rotation {
    type Error = So3Error;
    /// Unit input is kept bit for bit; anything else is normalized.
    fn try_from(c: [f64; 4]) -> Result<Self, Self::Error> {
        Rotation::from_unit_components(c[0], c[1], c[2], c[3])
            .or_else(|_| Rotation::from_quaternion(c[0], c[1], c[2], c[3]))
    }
}

pub fn compose(a: &Rotation, b: &Rotation) -> Rotation {
    a.compose(b)
}

pub fn geodesic_distance(a: &Rotation, b: &Rotation) -> f64 {
    a.geodesic_distance(b)
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian: `exp(v + δ) ≈ exp(v) · exp(Jr(v) δ)`.
pub fn right_jacobian(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = skew(v);
    let (a, b) = if theta2 < 1e-10 {
        (0.5 - theta2 / 24.0, 1.0 / 6.0 - theta2 / 120.0)
    } else {
        let theta = theta2.sqrt();
        (
            (1.0 - theta.cos()) / theta2,
            (theta - theta.sin()) / (theta2 * theta),
        )
    };
    Matrix3::identity() - k * a + k * k * b
}

/// Inverse of [`right_jacobian`].
pub fn right_jacobian_inv(v: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = v.norm_squared();
    let k = skew(v);
    let c = if theta2 < 1e-10 {
        1.0 / 12.0 + theta2 / 720.0
    } else {
        let theta = theta2.sqrt();
        1.0 / theta2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin())
    };
    Matrix3::identity() + k * 0.5 + k * k * c
}

/// Inverse left Jacobian: `log(exp(u) · exp(v)) ≈ v + Jl⁻¹(v) u`.
pub fn left_jacobian_inv(v: &Vector3<f64>) -> Matrix3<f64> {
    right_jacobian_inv(&(-v))
}

/// Options for [`karcher_mean`].
#[derive(Clone, Debug)]
pub struct KarcherOptions {
    pub weights: Option<Vec<f64>>,
    /// Drop samples farther than this (radians) from the first mean and
    /// re-average. `None` disables trimming.
    pub trim_threshold: Option<f64>,
    pub max_iterations: usize,
    /// Convergence threshold on the tangent step norm (radians).
    pub tolerance: f64,
}

impl Default for KarcherOptions {
    fn default() -> Self {
        Self {
            weights: None,
            trim_threshold: None,
            max_iterations: 100,
            tolerance: 1e-10,
        }
    }
}

impl KarcherOptions {
    /// Default trimming threshold used when callers opt in: 15°.
    pub const DEFAULT_TRIM: f64 = 15.0 * PI / 180.0;

    pub fn trimmed(threshold: f64) -> Self {
        Self {
            trim_threshold: Some(threshold),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KarcherDiagnostics {
    pub iterations: usize,
    /// Norm of the Riemannian gradient of `Σ wⱼ d²` at the returned mean.
    pub gradient_norm: f64,
    /// Largest geodesic distance from the mean to a retained sample.
    pub max_residual: f64,
    /// Samples removed by the trim pass.
    pub trimmed: usize,
    pub used: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KarcherMean {
    pub mean: Rotation,
    pub diagnostics: KarcherDiagnostics,
}

/// `Σ wⱼ d_g(mean, Rⱼ)²`.
pub fn karcher_cost(mean: &Rotation, samples: &[Rotation], weights: Option<&[f64]>) -> f64 {
    samples
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let w = weights.map_or(1.0, |w| w[j]);
            let d = mean.geodesic_distance(s);
            w * d * d
        })
        .sum()
}

/// Riemannian gradient of [`karcher_cost`] under right perturbation
/// `mean · exp(δ)`: `-2 Σ wⱼ log(meanᵀ Rⱼ)`.
pub fn karcher_gradient(
    mean: &Rotation,
    samples: &[Rotation],
    weights: Option<&[f64]>,
) -> Vector3<f64> {
    let inv = mean.inverse();
    samples
        .iter()
        .enumerate()
        .fold(Vector3::zeros(), |acc, (j, s)| {
            let w = weights.map_or(1.0, |w| w[j]);
            acc - (inv * *s).log().0 * (2.0 * w)
        })
}

/// Weighted Karcher mean (barycenter) on SO(3).
///
/// Fixed-point iteration `R ← R · exp(Σ wⱼ log(Rᵀ Rⱼ) / Σ wⱼ)` started at the
/// sample with the least summed distance to the others.
pub fn karcher_mean(samples: &[Rotation], opts: &KarcherOptions) -> Result<KarcherMean, So3Error> {
    if samples.is_empty() {
        return Err(So3Error::EmptyInput);
    }
    let weights: Vec<f64> = match &opts.weights {
        Some(w) => {
            if w.len() != samples.len() {
                return Err(So3Error::InvalidWeights(format!(
                    "{} weights for {} samples",
                    w.len(),
                    samples.len()
                )));
            }
            if w.iter().any(|x| !x.is_finite() || *x < 0.0) {
                return Err(So3Error::InvalidWeights(
                    "weights must be finite and nonnegative".into(),
                ));
            }
            if w.iter().sum::<f64>() <= 0.0 {
                return Err(So3Error::InvalidWeights("weights sum to zero".into()));
            }
            w.clone()
        }
        None => vec![1.0; samples.len()],
    };

    let init = medoid(samples, &weights);
    let first = fixed_point(samples, &weights, init, opts)?;

    let Some(threshold) = opts.trim_threshold else {
        return Ok(first);
    };
    let keep: Vec<usize> = (0..samples.len())
        .filter(|&j| first.mean.geodesic_distance(&samples[j]) <= threshold)
        .collect();
    if keep.len() == samples.len() {
        return Ok(first);
    }
    let kept_samples: Vec<Rotation> = keep.iter().map(|&j| samples[j]).collect();
    let kept_weights: Vec<f64> = keep.iter().map(|&j| weights[j]).collect();
    if kept_samples.is_empty() || kept_weights.iter().sum::<f64>() <= 0.0 {
        return Err(So3Error::AllSamplesTrimmed { threshold });
    }
    let mut second = fixed_point(&kept_samples, &kept_weights, first.mean, opts)?;
    second.diagnostics.iterations += first.diagnostics.iterations;
    second.diagnostics.trimmed = samples.len() - kept_samples.len();
    Ok(second)
}

fn medoid(samples: &[Rotation], weights: &[f64]) -> Rotation {
    let mut best = (f64::INFINITY, 0);
    for (i, a) in samples.iter().enumerate() {
        if weights[i] <= 0.0 {
            continue;
        }
        let mut total = 0.0;
        for (j, b) in samples.iter().enumerate() {
            total += weights[j] * a.geodesic_distance(b);
            if total >= best.0 {
                break;
            }
        }
        if total < best.0 {
            best = (total, i);
        }
    }
    samples[best.1]
}

fn fixed_point(
    samples: &[Rotation],
    weights: &[f64],
    init: Rotation,
    opts: &KarcherOptions,
) -> Result<KarcherMean, So3Error> {
    let total: f64 = weights.iter().sum();
    let mut mean = init;
    let mut iterations = 0;
    loop {
        let grad = karcher_gradient(&mean, samples, Some(weights));
        let step = -grad / (2.0 * total);
        let step_norm = step.norm();
        if step_norm < opts.tolerance {
            let max_residual = samples
                .iter()
                .zip(weights)
                .filter(|(_, w)| **w > 0.0)
                .map(|(s, _)| mean.geodesic_distance(s))
                .fold(0.0, f64::max);
            return Ok(KarcherMean {
                mean,
                diagnostics: KarcherDiagnostics {
                    iterations,
                    gradient_norm: grad.norm(),
                    max_residual,
                    trimmed: 0,
                    used: samples.len(),
                },
            });
        }
        if iterations >= opts.max_iterations {
            return Err(So3Error::NotConverged {
                best: mean,
                gradient_norm: grad.norm(),
                iterations,
            });
        }
        mean = mean * Rotation::exp(&RotationVector(step));
        iterations += 1;
    }
}

/// Closest rotation about `axis` to a given rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct YawProjection {
    pub rotation: Rotation,
    /// The input's axis is orthogonal to `axis` with angle near π, so every
    /// yaw is equally close; the identity is returned.
    pub ambiguous: bool,
}

/// Projects `r` onto the one-parameter subgroup of rotations about `axis`
/// (the twist of a swing-twist decomposition). This is the geodesically
/// closest such rotation.
pub fn yaw_project(r: &Rotation, axis: &Vector3<f64>) -> YawProjection {
    let g = axis.normalize();
    let q = r.q.quaternion();
    let s = Vector3::new(q.i, q.j, q.k).dot(&g);
    let n = s.hypot(q.w);
    if n < 1e-9 {
        return YawProjection {
            rotation: Rotation::identity(),
            ambiguous: true,
        };
    }
    let (w, s) = (q.w / n, s / n);
    YawProjection {
        rotation: Rotation {
            q: UnitQuaternion::new_normalize(Quaternion::new(w, s * g.x, s * g.y, s * g.z)),
        },
        ambiguous: false,
    }
}

/// Signed angle of a rotation about `axis`, assuming it is (close to) a yaw.
pub fn yaw_angle(r: &Rotation, axis: &Vector3<f64>) -> f64 {
    let y = yaw_project(r, axis).rotation;
    let q = y.q.quaternion();
    let s = Vector3::new(q.i, q.j, q.k).dot(&axis.normalize());
    let a = 2.0 * s.atan2(q.w);
    // wrap to (-π, π]
    if a > PI {
        a - 2.0 * PI
    } else if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}
