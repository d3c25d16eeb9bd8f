//! Gaussian kernels in the unnormalized form `exp(-(x-mu)^T Sigma^-1 (x-mu))`.
//!
//! There is no `1/2` in the exponent and no normalization constant, so the
//! isotropic `sigma` here is `sqrt(2)` times the conventional standard
//! deviation. Amplitudes carried by particles absorb the normalization.

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];
pub type Vec3 = [f64; 3];
pub type Mat2 = [[f64; 2]; 2];
pub type Mat3 = [[f64; 3]; 3];

/// Smallest/largest eigenvalue ratio below which a covariance is treated as singular.
pub const SINGULAR_RATIO: f64 = 1e-12;

/// Condition number above which anisotropic gradients are flagged and clamped.
pub const ILL_CONDITIONED: f64 = 1e12;

/// Magnitude cap applied to gradient components of ill-conditioned kernels.
pub const GRAD_CLAMP: f64 = 1e6;

fn check_finite(values: &[f64], what: &'static str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

fn check_positive(value: f64, name: &'static str) -> Result<()> {
    if value.is_finite() && value > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(name, format!("must be finite and > 0, got {value}")))
    }
}

#[inline]
fn dist2<const N: usize>(x: &[f64; N], mu: &[f64; N]) -> f64 {
    let mut acc = 0.0;
    for i in 0..N {
        let d = x[i] - mu[i];
        acc += d * d;
    }
    acc
}

/// Isotropic kernel: center and scale. `N` is the spatial dimension.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoKernelParams<const N: usize> {
    pub mu: [f64; N],
    pub sigma: f64,
}

impl<const N: usize> IsoKernelParams<N> {
    /// Location (`N`) plus one scale.
    pub const GEOMETRIC_DOF: usize = N + 1;

    pub fn new(mu: [f64; N], sigma: f64) -> Result<Self> {
        let p = Self { mu, sigma };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.mu, "kernel center")?;
        check_positive(self.sigma, "sigma")
    }

    pub fn geometric_dof(&self) -> usize {
        Self::GEOMETRIC_DOF
    }

    pub fn covariance_2d(&self) -> Mat2 {
        let s2 = self.sigma * self.sigma;
        [[s2, 0.0], [0.0, s2]]
    }
}

/// `exp(-|x - mu|^2 / sigma^2)`.
pub fn eval_iso<const N: usize>(x: &[f64; N], p: &IsoKernelParams<N>) -> Result<f64> {
    check_finite(x, "sample point")?;
    p.validate()?;
    Ok(iso_weight(dist2(x, &p.mu), p.sigma * p.sigma))
}

/// Kernel value from a precomputed squared distance and `sigma^2`.
///
/// Every isotropic evaluation in the crate goes through this expression so
/// fast paths stay bit-identical to the per-point reference.
#[inline(always)]
pub fn iso_weight(dist2: f64, sigma2: f64) -> f64 {
    (-dist2 / sigma2).exp()
}

/// Partial derivatives of the isotropic kernel with respect to its parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoGradient<const N: usize> {
    pub d_mu: [f64; N],
    pub d_sigma: f64,
}

pub fn grad_iso<const N: usize>(x: &[f64; N], p: &IsoKernelParams<N>) -> Result<IsoGradient<N>> {
    check_finite(x, "sample point")?;
    p.validate()?;
    let s2 = p.sigma * p.sigma;
    let r2 = dist2(x, &p.mu);
    let g = iso_weight(r2, s2);
    let mut d_mu = [0.0; N];
    for i in 0..N {
        d_mu[i] = g * 2.0 * (x[i] - p.mu[i]) / s2;
    }
    Ok(IsoGradient {
        d_mu,
        d_sigma: g * 2.0 * r2 / (s2 * p.sigma),
    })
}

/// 2D anisotropic kernel parametrized by rotation angle and two axis scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisoKernelParams2D {
    pub mu: Vec2,
    pub theta: f64,
    pub s1: f64,
    pub s2: f64,
}

impl AnisoKernelParams2D {
    /// Location (2) plus the three free entries of a symmetric 2x2 covariance.
    pub const GEOMETRIC_DOF: usize = 5;

    pub fn new(mu: Vec2, theta: f64, s1: f64, s2: f64) -> Result<Self> {
        let p = Self { mu, theta, s1, s2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.mu, "kernel center")?;
        check_finite(&[self.theta], "rotation angle")?;
        check_positive(self.s1, "s1")?;
        check_positive(self.s2, "s2")
    }

    pub fn geometric_dof(&self) -> usize {
        Self::GEOMETRIC_DOF
    }

    pub fn covariance(&self) -> Mat2 {
        build_cov_2d(self)
    }
}

/// `R(theta) diag(s1^2, s2^2) R(theta)^T`.
pub fn build_cov_2d(p: &AnisoKernelParams2D) -> Mat2 {
    let (s, c) = p.theta.sin_cos();
    let a = p.s1 * p.s1;
    let b = p.s2 * p.s2;
    let xy = (a - b) * c * s;
    [[a * c * c + b * s * s, xy], [xy, a * s * s + b * c * c]]
}

/// 3D anisotropic kernel: unit quaternion `(w, x, y, z)` and three axis scales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisoKernelParams3D {
    pub mu: Vec3,
    pub rotation: [f64; 4],
    pub scales: Vec3,
}

impl AnisoKernelParams3D {
    /// Location (3) plus the six free entries of a symmetric 3x3 covariance.
    pub const GEOMETRIC_DOF: usize = 9;

    pub fn new(mu: Vec3, rotation: [f64; 4], scales: Vec3) -> Result<Self> {
        let p = Self {
            mu,
            rotation,
            scales,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_finite(&self.mu, "kernel center")?;
        check_finite(&self.rotation, "rotation quaternion")?;
        let norm = self.rotation.iter().map(|q| q * q).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "rotation",
                format!("quaternion norm must be 1 within 1e-9, got {norm}"),
            ));
        }
        for (s, name) in self.scales.iter().zip(["s1", "s2", "s3"]) {
            check_positive(*s, name)?;
        }
        Ok(())
    }

    pub fn geometric_dof(&self) -> usize {
        Self::GEOMETRIC_DOF
    }

    pub fn covariance(&self) -> Mat3 {
        build_cov_3d(self)
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn quat_to_rotation(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

/// `R S S^T R^T` with `S = diag(scales)`.
pub fn build_cov_3d(p: &AnisoKernelParams3D) -> Mat3 {
    let r = quat_to_rotation(p.rotation);
    let d = [
        p.scales[0] * p.scales[0],
        p.scales[1] * p.scales[1],
        p.scales[2] * p.scales[2],
    ];
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in i..3 {
            let v = (0..3).map(|k| r[i][k] * d[k] * r[j][k]).sum::<f64>();
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    out
}

/// Eigenvalues of a symmetric 2x2 matrix, ascending.
pub fn sym2_eigenvalues(m: &Mat2) -> [f64; 2] {
    let mean = 0.5 * (m[0][0] + m[1][1]);
    let half_diff = 0.5 * (m[0][0] - m[1][1]);
    let r = half_diff.hypot(m[0][1]);
    [mean - r, mean + r]
}

/// Eigenvalues of a symmetric 3x3 matrix, ascending (trigonometric closed form).
pub fn sym3_eigenvalues(m: &Mat3) -> [f64; 3] {
    let p1 = m[0][1] * m[0][1] + m[0][2] * m[0][2] + m[1][2] * m[1][2];
    let q = (m[0][0] + m[1][1] + m[2][2]) / 3.0;
    if p1 == 0.0 {
        let mut e = [m[0][0], m[1][1], m[2][2]];
        e.sort_by(f64::total_cmp);
        return e;
    }
    let p2 = (m[0][0] - q).powi(2) + (m[1][1] - q).powi(2) + (m[2][2] - q).powi(2) + 2.0 * p1;
    let p = (p2 / 6.0).sqrt();
    let mut b = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            b[i][j] = (m[i][j] - if i == j { q } else { 0.0 }) / p;
        }
    }
    let det_b = b[0][0] * (b[1][1] * b[2][2] - b[1][2] * b[2][1])
        - b[0][1] * (b[1][0] * b[2][2] - b[1][2] * b[2][0])
        + b[0][2] * (b[1][0] * b[2][1] - b[1][1] * b[2][0]);
    let r = (det_b / 2.0).clamp(-1.0, 1.0);
    let phi = r.acos() / 3.0;
    let largest = q + 2.0 * p * phi.cos();
    let smallest = q + 2.0 * p * (phi + 2.0 * std::f64::consts::PI / 3.0).cos();
    let middle = 3.0 * q - largest - smallest;
    [smallest, middle, largest]
}

fn check_conditioning(smallest: f64, largest: f64) -> Result<()> {
    if !(smallest > 0.0) || smallest < SINGULAR_RATIO * largest {
        Err(Error::NotPositiveDefinite {
            smallest_eigenvalue: smallest,
        })
    } else {
        Ok(())
    }
}

/// Inverse of a symmetric positive definite 2x2 matrix.
pub fn inverse_2d(cov: &Mat2) -> Result<Mat2> {
    check_finite(&[cov[0][0], cov[0][1], cov[1][0], cov[1][1]], "covariance")?;
    let [lo, hi] = sym2_eigenvalues(cov);
    check_conditioning(lo, hi)?;
    let det = cov[0][0] * cov[1][1] - cov[0][1] * cov[1][0];
    Ok([
        [cov[1][1] / det, -cov[0][1] / det],
        [-cov[1][0] / det, cov[0][0] / det],
    ])
}

/// `exp(-(x-mu)^T cov^-1 (x-mu))` in 2D.
pub fn eval_aniso_2d(x: &Vec2, cov: &Mat2, mu: &Vec2) -> Result<f64> {
    check_finite(x, "sample point")?;
    check_finite(mu, "kernel center")?;
    let inv = inverse_2d(cov)?;
    let d = [x[0] - mu[0], x[1] - mu[1]];
    let q = d[0] * (inv[0][0] * d[0] + inv[0][1] * d[1]) + d[1] * (inv[1][0] * d[0] + inv[1][1] * d[1]);
    Ok((-q).exp())
}

/// `exp(-(x-mu)^T cov^-1 (x-mu))` in 3D, solved through a Cholesky factor.
pub fn eval_aniso_3d(x: &Vec3, cov: &Mat3, mu: &Vec3) -> Result<f64> {
    check_finite(x, "sample point")?;
    check_finite(mu, "kernel center")?;
    check_finite(&cov.concat(), "covariance")?;
    let eig = sym3_eigenvalues(cov);
    check_conditioning(eig[0], eig[2])?;
    let l = cholesky_3d(cov).ok_or(Error::NotPositiveDefinite {
        smallest_eigenvalue: eig[0],
    })?;
    let d = [x[0] - mu[0], x[1] - mu[1], x[2] - mu[2]];
    // Forward substitution: L y = d, then q = |y|^2.
    let y0 = d[0] / l[0][0];
    let y1 = (d[1] - l[1][0] * y0) / l[1][1];
    let y2 = (d[2] - l[2][0] * y0 - l[2][1] * y1) / l[2][2];
    Ok((-(y0 * y0 + y1 * y1 + y2 * y2)).exp())
}

fn cholesky_3d(m: &Mat3) -> Option<Mat3> {
    let mut l = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..=i {
            let s: f64 = (0..j).map(|k| l[i][k] * l[j][k]).sum();
            if i == j {
                let v = m[i][i] - s;
                if v <= 0.0 {
                    return None;
                }
                l[i][i] = v.sqrt();
            } else {
                l[i][j] = (m[i][j] - s) / l[j][j];
            }
        }
    }
    Some(l)
}

/// Per-particle constants of a 2D anisotropic kernel for repeated evaluation.
#[derive(Debug, Clone, Copy)]
pub struct AnisoShape2D {
    cos: f64,
    sin: f64,
    inv_a: f64,
    inv_b: f64,
    s1: f64,
    s2: f64,
}

impl AnisoShape2D {
    pub fn new(theta: f64, s1: f64, s2: f64) -> Self {
        let (sin, cos) = theta.sin_cos();
        Self {
            cos,
            sin,
            inv_a: 1.0 / (s1 * s1),
            inv_b: 1.0 / (s2 * s2),
            s1,
            s2,
        }
    }

    /// Offset rotated into the kernel frame.
    #[inline(always)]
    pub fn local(&self, dx: f64, dy: f64) -> (f64, f64) {
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    #[inline(always)]
    pub fn weight(&self, dx: f64, dy: f64) -> f64 {
        let (u, v) = self.local(dx, dy);
        (-(u * u * self.inv_a + v * v * self.inv_b)).exp()
    }

    /// Derivatives of the kernel at offset `(dx, dy) = x - mu` with respect to
    /// `(mu_x, mu_y, theta, s1, s2)`, given the kernel value `g` there.
    #[inline(always)]
    pub fn gradient(&self, dx: f64, dy: f64, g: f64) -> [f64; 5] {
        let (u, v) = self.local(dx, dy);
        let a = u * self.inv_a;
        let b = v * self.inv_b;
        // dq/dx = 2 Sigma^-1 d, expressed through the local frame.
        let gx = 2.0 * (self.cos * a - self.sin * b);
        let gy = 2.0 * (self.sin * a + self.cos * b);
        [
            g * gx,
            g * gy,
            -g * 2.0 * u * v * (self.inv_a - self.inv_b),
            g * 2.0 * u * a / self.s1,
            g * 2.0 * v * b / self.s2,
        ]
    }
}

/// Partial derivatives of the 2D anisotropic kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisoGradient {
    pub d_mu: Vec2,
    pub d_theta: f64,
    pub d_s1: f64,
    pub d_s2: f64,
    /// Set when the covariance condition number exceeds [`ILL_CONDITIONED`];
    /// the components are then clamped to `[-GRAD_CLAMP, GRAD_CLAMP]`.
    pub ill_conditioned: bool,
}

pub fn grad_aniso(x: &Vec2, p: &AnisoKernelParams2D) -> Result<AnisoGradient> {
    check_finite(x, "sample point")?;
    p.validate()?;
    let shape = AnisoShape2D::new(p.theta, p.s1, p.s2);
    let dx = x[0] - p.mu[0];
    let dy = x[1] - p.mu[1];
    let g = shape.weight(dx, dy);
    let mut d = shape.gradient(dx, dy, g);
    let (a, b) = (p.s1 * p.s1, p.s2 * p.s2);
    let ill_conditioned = a.max(b) / a.min(b) > ILL_CONDITIONED;
    if ill_conditioned {
        for v in &mut d {
            *v = if v.is_nan() { 0.0 } else { v.clamp(-GRAD_CLAMP, GRAD_CLAMP) };
        }
    }
    Ok(AnisoGradient {
        d_mu: [d[0], d[1]],
        d_theta: d[2],
        d_s1: d[3],
        d_s2: d[4],
        ill_conditioned,
    })
}
