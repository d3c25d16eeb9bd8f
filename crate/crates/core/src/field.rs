//! Particle fields on a pixel grid: reconstruction
//! `fhat(x) = sum_{|mu_k - x| < D} A_k g_k(x)` and per-particle loss gradients.
//!
//! Pixel `(i, j)` (column, row) is sampled at its center `(i + 0.5, j + 0.5)`.
//! Every pixel accumulates particles in list order starting from `0.0`, in
//! both the sequential and the parallel paths, so the two are bit-identical.
//! Isotropic weights are formed as `exp(-dx^2/s^2) * exp(-dy^2/s^2)` from
//! per-row and per-column tables, which matches the direct exponential to
//! rounding.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::kernels::{iso_weight, AnisoKernelParams2D, AnisoShape2D, IsoKernelParams, Vec2};
use crate::loss::{loss_with_image_grad, LossValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelKind {
    Iso,
    Aniso,
}

impl KernelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            KernelKind::Iso => "iso",
            KernelKind::Aniso => "aniso",
        }
    }
}

impl std::fmt::Display for KernelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IsoParticle2D {
    pub mu: Vec2,
    pub sigma: f64,
    /// One amplitude per image channel.
    pub amplitude: Vec<f64>,
}

impl IsoParticle2D {
    pub fn new(mu: Vec2, sigma: f64, amplitude: Vec<f64>) -> Result<Self> {
        let p = Self { mu, sigma, amplitude };
        p.validate()?;
        Ok(p)
    }

    pub fn kernel_params(&self) -> IsoKernelParams<2> {
        IsoKernelParams {
            mu: self.mu,
            sigma: self.sigma,
        }
    }

    /// Integral of `A exp(-|x - mu|^2 / sigma^2)` over the plane, per channel.
    pub fn mass(&self) -> Vec<f64> {
        let area = std::f64::consts::PI * self.sigma * self.sigma;
        self.amplitude.iter().map(|a| a * area).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnisoParticle2D {
    pub mu: Vec2,
    pub theta: f64,
    pub s1: f64,
    pub s2: f64,
    pub amplitude: Vec<f64>,
}

impl AnisoParticle2D {
    pub fn new(mu: Vec2, theta: f64, s1: f64, s2: f64, amplitude: Vec<f64>) -> Result<Self> {
        let p = Self {
            mu,
            theta,
            s1,
            s2,
            amplitude,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn kernel_params(&self) -> AnisoKernelParams2D {
        AnisoKernelParams2D {
            mu: self.mu,
            theta: self.theta,
            s1: self.s1,
            s2: self.s2,
        }
    }
}

/// Which optimizer learning rate applies to an unconstrained parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    Position,
    Shape,
    Amplitude,
}

/// Gradient of a scalar loss with respect to one particle.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleGrad {
    pub d_mu: Vec2,
    /// `[d sigma, 0, 0]` for isotropic particles, `[d theta, d s1, d s2]` for anisotropic ones.
    pub d_shape: [f64; 3],
    pub d_amp: Vec<f64>,
}

impl ParticleGrad {
    pub fn zeros(channels: usize) -> Self {
        Self {
            d_mu: [0.0; 2],
            d_shape: [0.0; 3],
            d_amp: vec![0.0; channels],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.d_mu.iter().chain(&self.d_shape).chain(&self.d_amp).all(|v| v.is_finite())
    }
}

/// Per-particle constants evaluated at many pixels.
pub trait PixelKernel: Copy + Send + Sync {
    /// Whether `weight(dx, dy) == axis_weight(dx) * axis_weight(dy)`, letting
    /// the splat loops evaluate one exponential per row and column.
    const SEPARABLE: bool = false;

    fn weight(&self, dx: f64, dy: f64, d2: f64) -> f64;

    fn axis_weight(&self, _t: f64) -> f64 {
        unreachable!("kernel is not separable")
    }

    /// Adds the contribution of one pixel, where `w = sum_c A_c dL/dfhat_c`.
    fn accumulate(&self, dx: f64, dy: f64, d2: f64, g: f64, w: f64, acc: &mut [f64; 5]);
    /// Converts accumulated sums to `(d mu, d shape)`.
    fn finish(&self, acc: &[f64; 5]) -> (Vec2, [f64; 3]);
}

#[derive(Debug, Clone, Copy)]
pub struct IsoPixelKernel {
    sigma: f64,
    sigma2: f64,
}

impl PixelKernel for IsoPixelKernel {
    const SEPARABLE: bool = true;

    #[inline(always)]
    fn weight(&self, _dx: f64, _dy: f64, d2: f64) -> f64 {
        iso_weight(d2, self.sigma2)
    }

    #[inline(always)]
    fn axis_weight(&self, t: f64) -> f64 {
        iso_weight(t * t, self.sigma2)
    }

    #[inline(always)]
    fn accumulate(&self, dx: f64, dy: f64, d2: f64, g: f64, w: f64, acc: &mut [f64; 5]) {
        let wg = w * g;
        acc[0] += wg * dx;
        acc[1] += wg * dy;
        acc[2] += wg * d2;
    }

    fn finish(&self, acc: &[f64; 5]) -> (Vec2, [f64; 3]) {
        let k = 2.0 / self.sigma2;
        (
            [k * acc[0], k * acc[1]],
            [k * acc[2] / self.sigma, 0.0, 0.0],
        )
    }
}

impl PixelKernel for AnisoShape2D {
    #[inline(always)]
    fn weight(&self, dx: f64, dy: f64, _d2: f64) -> f64 {
        AnisoShape2D::weight(self, dx, dy)
    }

    #[inline(always)]
    fn accumulate(&self, dx: f64, dy: f64, _d2: f64, g: f64, w: f64, acc: &mut [f64; 5]) {
        let d = self.gradient(dx, dy, g);
        for (a, v) in acc.iter_mut().zip(d) {
            *a += w * v;
        }
    }

    fn finish(&self, acc: &[f64; 5]) -> (Vec2, [f64; 3]) {
        ([acc[0], acc[1]], [acc[2], acc[3], acc[4]])
    }
}

/// A particle that can be splatted onto an image grid and optimized.
pub trait Particle2D: Clone + std::fmt::Debug + Send + Sync {
    type Kernel: PixelKernel;
    const KIND: KernelKind;
    /// Number of shape parameters (1 for `sigma`, 3 for `theta, s1, s2`).
    const SHAPE_PARAMS: usize;

    fn mu(&self) -> Vec2;
    fn amplitude(&self) -> &[f64];
    fn amplitude_mut(&mut self) -> &mut Vec<f64>;
    fn kernel(&self) -> Self::Kernel;
    fn validate(&self) -> Result<()>;
    /// A single representative length, for histograms and split triggers.
    fn scale(&self) -> f64;
    /// Spatial degrees of freedom (position and shape, excluding amplitudes).
    fn geometric_dof(&self) -> usize;

    fn num_params(&self) -> usize {
        2 + Self::SHAPE_PARAMS + self.amplitude().len()
    }

    fn param_group(&self, index: usize) -> ParamGroup {
        match index {
            0 | 1 => ParamGroup::Position,
            i if i < 2 + Self::SHAPE_PARAMS => ParamGroup::Shape,
            _ => ParamGroup::Amplitude,
        }
    }

    /// Writes the gradient with respect to the unconstrained parameters
    /// (`mu`, angles, log-scales, amplitudes) into `out`.
    fn unconstrained_grad(&self, grad: &ParticleGrad, out: &mut [f64]);

    /// Applies a descent step `params <- params - delta` in unconstrained space.
    /// Scales move multiplicatively, so a zero step leaves them bit-identical.
    fn apply_step(&mut self, delta: &[f64]);
}

fn check_amplitude(amplitude: &[f64]) -> Result<()> {
    if amplitude.is_empty() {
        return Err(Error::invalid("amplitude", "needs at least one channel"));
    }
    if amplitude.iter().any(|a| !a.is_finite()) {
        return Err(Error::NonFinite("amplitude"));
    }
    Ok(())
}

impl Particle2D for IsoParticle2D {
    type Kernel = IsoPixelKernel;
    const KIND: KernelKind = KernelKind::Iso;
    const SHAPE_PARAMS: usize = 1;

    fn mu(&self) -> Vec2 {
        self.mu
    }

    fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    fn amplitude_mut(&mut self) -> &mut Vec<f64> {
        &mut self.amplitude
    }

    fn kernel(&self) -> IsoPixelKernel {
        IsoPixelKernel {
            sigma: self.sigma,
            sigma2: self.sigma * self.sigma,
        }
    }

    fn validate(&self) -> Result<()> {
        self.kernel_params().validate()?;
        check_amplitude(&self.amplitude)
    }

    fn scale(&self) -> f64 {
        self.sigma
    }

    fn geometric_dof(&self) -> usize {
        IsoKernelParams::<2>::GEOMETRIC_DOF
    }

    fn unconstrained_grad(&self, grad: &ParticleGrad, out: &mut [f64]) {
        out[0] = grad.d_mu[0];
        out[1] = grad.d_mu[1];
        out[2] = self.sigma * grad.d_shape[0];
        out[3..].copy_from_slice(&grad.d_amp);
    }

    fn apply_step(&mut self, delta: &[f64]) {
        self.mu[0] -= delta[0];
        self.mu[1] -= delta[1];
        self.sigma *= (-delta[2]).exp();
        for (a, d) in self.amplitude.iter_mut().zip(&delta[3..]) {
            *a -= d;
        }
    }
}

impl Particle2D for AnisoParticle2D {
    type Kernel = AnisoShape2D;
    const KIND: KernelKind = KernelKind::Aniso;
    const SHAPE_PARAMS: usize = 3;

    fn mu(&self) -> Vec2 {
        self.mu
    }

    fn amplitude(&self) -> &[f64] {
        &self.amplitude
    }

    fn amplitude_mut(&mut self) -> &mut Vec<f64> {
        &mut self.amplitude
    }

    fn kernel(&self) -> AnisoShape2D {
        AnisoShape2D::new(self.theta, self.s1, self.s2)
    }

    fn validate(&self) -> Result<()> {
        self.kernel_params().validate()?;
        check_amplitude(&self.amplitude)
    }

    fn scale(&self) -> f64 {
        (self.s1 * self.s2).sqrt()
    }

    fn geometric_dof(&self) -> usize {
        AnisoKernelParams2D::GEOMETRIC_DOF
    }

    fn unconstrained_grad(&self, grad: &ParticleGrad, out: &mut [f64]) {
        out[0] = grad.d_mu[0];
        out[1] = grad.d_mu[1];
        out[2] = grad.d_shape[0];
        out[3] = self.s1 * grad.d_shape[1];
        out[4] = self.s2 * grad.d_shape[2];
        out[5..].copy_from_slice(&grad.d_amp);
    }

    fn apply_step(&mut self, delta: &[f64]) {
        self.mu[0] -= delta[0];
        self.mu[1] -= delta[1];
        self.theta -= delta[2];
        self.s1 *= (-delta[3]).exp();
        self.s2 *= (-delta[4]).exp();
        for (a, d) in self.amplitude.iter_mut().zip(&delta[5..]) {
            *a -= d;
        }
    }
}

/// Grid geometry and support radius shared by reconstruction and gradients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Support radius `D` in pixels; `f64::INFINITY` disables the cutoff.
    pub support: f64,
}

impl GridSpec {
    pub fn new(width: usize, height: usize, channels: usize, support: f64) -> Result<Self> {
        ImageGrid::zeros(width, height, channels)?;
        if !(support > 0.0) {
            return Err(Error::invalid("support radius D", format!("must be > 0, got {support}")));
        }
        Ok(Self {
            width,
            height,
            channels,
            support,
        })
    }

    pub fn of(image: &ImageGrid, support: f64) -> Result<Self> {
        Self::new(image.width(), image.height(), image.channels(), support)
    }
}

/// Half-open index range of pixels whose centers may lie within `radius` of `center`.
#[inline]
fn span(center: f64, radius: f64, n: usize) -> (usize, usize) {
    let n = n as f64;
    let lo = (center - radius - 0.5).floor().clamp(0.0, n);
    let hi = ((center + radius - 0.5).ceil() + 1.0).clamp(0.0, n);
    (lo as usize, hi as usize)
}

fn validate_particles<P: Particle2D>(particles: &[P], channels: usize) -> Result<()> {
    for p in particles {
        p.validate()?;
        if p.amplitude().len() != channels {
            return Err(Error::invalid(
                "amplitude",
                format!("particle has {} channels, image has {channels}", p.amplitude().len()),
            ));
        }
    }
    Ok(())
}

/// Adds every particle's contribution to rows `[row0, row0 + rows)` of `out`.
fn splat_rows<P: Particle2D>(particles: &[P], grid: &GridSpec, row0: usize, out: &mut [f64]) {
    let (w, c) = (grid.width, grid.channels);
    let rows = out.len() / (w * c);
    let d2max = grid.support * grid.support;
    let mut gx = Vec::new();
    for p in particles {
        let kernel = p.kernel();
        let [mx, my] = p.mu();
        let amp = p.amplitude();
        let (y0, y1) = span(my, grid.support, grid.height);
        let (x0, x1) = span(mx, grid.support, w);
        let (ya, yb) = (y0.max(row0), y1.min(row0 + rows));
        if ya >= yb {
            continue;
        }
        axis_table(&kernel, mx, x0, x1, &mut gx);
        for y in ya..yb {
            let dy = (y as f64 + 0.5) - my;
            let gy = if P::Kernel::SEPARABLE { kernel.axis_weight(dy) } else { 0.0 };
            let row = &mut out[(y - row0) * w * c..(y - row0 + 1) * w * c];
            for x in x0..x1 {
                let dx = (x as f64 + 0.5) - mx;
                let d2 = dx * dx + dy * dy;
                if d2 < d2max {
                    let g = if P::Kernel::SEPARABLE { gx[x - x0] * gy } else { kernel.weight(dx, dy, d2) };
                    let px = &mut row[x * c..(x + 1) * c];
                    for (v, a) in px.iter_mut().zip(amp) {
                        *v += a * g;
                    }
                }
            }
        }
    }
}

/// Per-column factors of a separable kernel over `x0..x1`; left empty otherwise.
#[inline]
fn axis_table<K: PixelKernel>(kernel: &K, mx: f64, x0: usize, x1: usize, out: &mut Vec<f64>) {
    out.clear();
    if K::SEPARABLE {
        out.extend((x0..x1).map(|x| kernel.axis_weight((x as f64 + 0.5) - mx)));
    }
}

pub fn reconstruct<P: Particle2D>(particles: &[P], grid: &GridSpec) -> Result<ImageGrid> {
    validate_particles(particles, grid.channels)?;
    let mut data = vec![0.0; grid.width * grid.height * grid.channels];
    splat_rows(particles, grid, 0, &mut data);
    ImageGrid::from_data(grid.width, grid.height, grid.channels, data)
}

/// Row-band parallel [`reconstruct`]; same per-pixel summation order, same bits.
pub fn reconstruct_par<P: Particle2D>(particles: &[P], grid: &GridSpec) -> Result<ImageGrid> {
    validate_particles(particles, grid.channels)?;
    let mut data = vec![0.0; grid.width * grid.height * grid.channels];
    let band = 16;
    let stride = grid.width * grid.channels * band;
    data.par_chunks_mut(stride)
        .enumerate()
        .for_each(|(i, chunk)| splat_rows(particles, grid, i * band, chunk));
    ImageGrid::from_data(grid.width, grid.height, grid.channels, data)
}

/// Chain rule from an image-space gradient `dL/dfhat` to one particle.
pub fn particle_grad<P: Particle2D>(p: &P, grid: &GridSpec, image_grad: &[f64]) -> ParticleGrad {
    let (w, c) = (grid.width, grid.channels);
    let kernel = p.kernel();
    let [mx, my] = p.mu();
    let amp = p.amplitude();
    let d2max = grid.support * grid.support;
    let (y0, y1) = span(my, grid.support, grid.height);
    let (x0, x1) = span(mx, grid.support, w);
    let mut gx = Vec::new();
    axis_table(&kernel, mx, x0, x1, &mut gx);
    let mut acc = [0.0; 5];
    let mut d_amp = vec![0.0; c];
    for y in y0..y1 {
        let dy = (y as f64 + 0.5) - my;
        let gy = if P::Kernel::SEPARABLE { kernel.axis_weight(dy) } else { 0.0 };
        let row = &image_grad[y * w * c..(y + 1) * w * c];
        for x in x0..x1 {
            let dx = (x as f64 + 0.5) - mx;
            let d2 = dx * dx + dy * dy;
            if d2 < d2max {
                let g = if P::Kernel::SEPARABLE { gx[x - x0] * gy } else { kernel.weight(dx, dy, d2) };
                let px = &row[x * c..(x + 1) * c];
                let mut wsum = 0.0;
                for ((da, gi), a) in d_amp.iter_mut().zip(px).zip(amp) {
                    *da += g * gi;
                    wsum += a * gi;
                }
                kernel.accumulate(dx, dy, d2, g, wsum, &mut acc);
            }
        }
    }
    let (d_mu, d_shape) = kernel.finish(&acc);
    ParticleGrad { d_mu, d_shape, d_amp }
}

/// Loss settings for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub support: f64,
    pub lambda: f64,
    /// Use the rayon pool for reconstruction and gradients. Results do not depend on it.
    pub parallel: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub reconstruction: ImageGrid,
    pub loss: LossValue,
    pub grads: Vec<ParticleGrad>,
}

/// Reconstruction, loss and the gradient of the loss with respect to every particle.
pub fn loss_gradients<P: Particle2D>(particles: &[P], target: &ImageGrid, config: &LossConfig) -> Result<Evaluation> {
    let grid = GridSpec::of(target, config.support)?;
    let reconstruction = if config.parallel {
        reconstruct_par(particles, &grid)?
    } else {
        reconstruct(particles, &grid)?
    };
    let (loss, image_grad) = loss_with_image_grad(target, &reconstruction, config.lambda)?;
    let grads = if config.parallel {
        particles.par_iter().map(|p| particle_grad(p, &grid, &image_grad)).collect()
    } else {
        particles.iter().map(|p| particle_grad(p, &grid, &image_grad)).collect()
    };
    Ok(Evaluation {
        reconstruction,
        loss,
        grads,
    })
}

/// Loss of a particle set without gradients.
pub fn evaluate_loss<P: Particle2D>(particles: &[P], target: &ImageGrid, config: &LossConfig) -> Result<LossValue> {
    let grid = GridSpec::of(target, config.support)?;
    let fhat = if config.parallel {
        reconstruct_par(particles, &grid)?
    } else {
        reconstruct(particles, &grid)?
    };
    crate::loss::loss_value(target, &fhat, config.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::eval_iso;

    fn iso(x: f64, y: f64, sigma: f64, a: &[f64]) -> IsoParticle2D {
        IsoParticle2D::new([x, y], sigma, a.to_vec()).unwrap()
    }

    #[test]
    fn empty_field_is_zero() {
        let grid = GridSpec::new(7, 5, 3, 4.0).unwrap();
        let img = reconstruct::<IsoParticle2D>(&[], &grid).unwrap();
        assert!(img.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn value_at_center_is_amplitude() {
        let grid = GridSpec::new(9, 9, 1, 2.5).unwrap();
        let img = reconstruct(&[iso(4.5, 3.5, 1.7, &[0.7])], &grid).unwrap();
        assert_eq!(img.get(4, 3, 0), 0.7);
        // Outside the support radius everything is exactly zero.
        assert_eq!(img.get(0, 8, 0), 0.0);
        assert_eq!(img.get(8, 3, 0), 0.0);
    }

    #[test]
    fn overlapping_particles_match_direct_sum() {
        let ps = [iso(3.2, 4.1, 2.0, &[0.4]), iso(5.0, 4.6, 1.3, &[0.9])];
        let grid = GridSpec::new(10, 8, 1, 6.0).unwrap();
        let img = reconstruct(&ps, &grid).unwrap();
        for y in 0..8 {
            for x in 0..10 {
                let pt = [x as f64 + 0.5, y as f64 + 0.5];
                let mut want = 0.0;
                for p in &ps {
                    let d2 = (pt[0] - p.mu[0]).powi(2) + (pt[1] - p.mu[1]).powi(2);
                    if d2 < 36.0 {
                        want += p.amplitude[0] * eval_iso(&pt, &p.kernel_params()).unwrap();
                    }
                }
                assert!((img.get(x, y, 0) - want).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn parallel_is_bit_identical() {
        let ps: Vec<_> = (0..40)
            .map(|i| iso((i * 7 % 37) as f64 + 0.3, (i * 11 % 41) as f64, 1.0 + (i % 5) as f64, &[0.1, 0.2, 0.3]))
            .collect();
        let grid = GridSpec::new(37, 41, 3, 6.0).unwrap();
        assert_eq!(reconstruct(&ps, &grid).unwrap(), reconstruct_par(&ps, &grid).unwrap());
    }

    #[test]
    fn rejects_bad_config() {
        assert!(GridSpec::new(4, 4, 1, 0.0).is_err());
        assert!(GridSpec::new(4, 4, 1, f64::NAN).is_err());
        let grid = GridSpec::new(4, 4, 3, 1.0).unwrap();
        assert!(reconstruct(&[iso(1.0, 1.0, 1.0, &[0.5])], &grid).is_err());
    }

    #[test]
    fn zero_residual_gives_zero_l1_gradient() {
        let ps = vec![iso(3.0, 3.0, 1.5, &[0.6]), iso(5.0, 4.0, 2.0, &[0.3])];
        let grid = GridSpec::new(8, 8, 1, 5.0).unwrap();
        let target = reconstruct(&ps, &grid).unwrap();
        let cfg = LossConfig {
            support: 5.0,
            lambda: 0.0,
            parallel: false,
        };
        let eval = loss_gradients(&ps, &target, &cfg).unwrap();
        assert_eq!(eval.loss.total, 0.0);
        for g in &eval.grads {
            assert_eq!(g, &ParticleGrad::zeros(1));
        }
    }

    #[test]
    fn amplitude_gradient_sign() {
        // fhat < f under the particle, so raising A lowers the loss.
        let ps = vec![iso(4.0, 4.0, 1.5, &[0.2])];
        let target = ImageGrid::filled(8, 8, 1, 0.9).unwrap();
        let cfg = LossConfig {
            support: 4.0,
            lambda: 0.0,
            parallel: false,
        };
        let eval = loss_gradients(&ps, &target, &cfg).unwrap();
        assert!(eval.grads[0].d_amp[0] < 0.0);
    }

    #[test]
    fn zero_step_is_identity() {
        let mut p = iso(1.25, 2.5, 2.0, &[0.3, 0.1, 0.9]);
        let before = p.clone();
        p.apply_step(&[0.0; 6]);
        assert_eq!(p, before);
        let mut q = AnisoParticle2D::new([1.0, 2.0], 0.3, 2.0, 0.5, vec![0.2]).unwrap();
        let before = q.clone();
        q.apply_step(&[0.0; 6]);
        assert_eq!(q, before);
    }
}
