//! Forward rendering of 3D Gaussian splats: perspective projection of
//! centers and covariances, depth ordering, and front-to-back alpha
//! compositing `C = sum_k c_k a_k prod_{j<k} (1 - a_j)`.
//!
//! A splat's screen-space opacity at a pixel is its opacity times the
//! projected kernel value there, and only pixels inside three projected
//! sigmas (`q <= 9`) are touched.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::kernels::{build_cov_3d, inverse_2d, quat_to_rotation, AnisoKernelParams3D, IsoKernelParams, Mat2, Mat3, Vec2, Vec3};

pub type Mat2x3 = [[f64; 3]; 2];

/// Camera-space depth at or below which a splat is culled.
pub const NEAR_PLANE: f64 = 1e-3;

/// Footprint cutoff in squared projected sigmas.
pub const FOOTPRINT_Q: f64 = 9.0;

const TILE: usize = 16;

fn check_unit_interval(v: f64, what: &'static str) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::invalid(what, format!("{v} outside [0, 1]")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IsoSplat3D {
    pub mu: Vec3,
    pub sigma: f64,
    pub color: Vec3,
    pub opacity: f64,
}

impl IsoSplat3D {
    pub const GEOMETRIC_DOF: usize = IsoKernelParams::<3>::GEOMETRIC_DOF;

    pub fn new(mu: Vec3, sigma: f64, color: Vec3, opacity: f64) -> Result<Self> {
        let s = Self { mu, sigma, color, opacity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        IsoKernelParams { mu: self.mu, sigma: self.sigma }.validate()?;
        for c in self.color {
            check_unit_interval(c, "splat color")?;
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::AlphaOutOfRange(self.opacity));
        }
        Ok(())
    }

    pub fn geometric_dof(&self) -> usize {
        Self::GEOMETRIC_DOF
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnisoSplat3D {
    pub kernel: AnisoKernelParams3D,
    pub color: Vec3,
    pub opacity: f64,
}

impl AnisoSplat3D {
    pub const GEOMETRIC_DOF: usize = AnisoKernelParams3D::GEOMETRIC_DOF;

    pub fn new(kernel: AnisoKernelParams3D, color: Vec3, opacity: f64) -> Result<Self> {
        let s = Self { kernel, color, opacity };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.kernel.validate()?;
        for c in self.color {
            check_unit_interval(c, "splat color")?;
        }
        if !(0.0..=1.0).contains(&self.opacity) {
            return Err(Error::AlphaOutOfRange(self.opacity));
        }
        Ok(())
    }

    pub fn geometric_dof(&self) -> usize {
        Self::GEOMETRIC_DOF
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Splat3D {
    Iso(IsoSplat3D),
    Aniso(AnisoSplat3D),
}

impl Splat3D {
    pub fn geometric_dof(&self) -> usize {
        match self {
            Splat3D::Iso(s) => s.geometric_dof(),
            Splat3D::Aniso(s) => s.geometric_dof(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Splat3D::Iso(s) => s.validate(),
            Splat3D::Aniso(s) => s.validate(),
        }
    }
}

/// Pinhole camera with a rigid world-to-camera transform `x_cam = R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub rotation: Mat3,
    pub translation: Vec3,
    pub focal: f64,
    pub principal_point: Vec2,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    pub fn new(rotation: Mat3, translation: Vec3, focal: f64, principal_point: Vec2, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            rotation,
            translation,
            focal,
            principal_point,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn from_quaternion(q: [f64; 4], translation: Vec3, focal: f64, principal_point: Vec2, width: usize, height: usize) -> Result<Self> {
        let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-9 {
            return Err(Error::invalid("camera rotation", format!("quaternion norm {norm} is not 1")));
        }
        Self::new(quat_to_rotation(q), translation, focal, principal_point, width, height)
    }

    pub fn validate(&self) -> Result<()> {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if !((dot - want).abs() <= 1e-9) {
                    return Err(Error::invalid("camera rotation", "matrix is not orthonormal within 1e-9"));
                }
            }
        }
        if det3(r) < 0.0 {
            return Err(Error::invalid("camera rotation", "matrix is a reflection"));
        }
        if !self.translation.iter().chain(&self.principal_point).all(|v| v.is_finite()) {
            return Err(Error::NonFinite("camera"));
        }
        if !(self.focal > 0.0) || !self.focal.is_finite() {
            return Err(Error::invalid("focal length", format!("must be > 0, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("image size", "camera image has no pixels"));
        }
        Ok(())
    }

    pub fn to_camera(&self, x: &Vec3) -> Vec3 {
        let r = &self.rotation;
        let mut out = self.translation;
        for i in 0..3 {
            out[i] += r[i][0] * x[0] + r[i][1] * x[1] + r[i][2] * x[2];
        }
        out
    }

    /// Pixel coordinates of a camera-space point.
    pub fn project_point(&self, p: &Vec3) -> Vec2 {
        [
            self.focal * p[0] / p[2] + self.principal_point[0],
            self.focal * p[1] / p[2] + self.principal_point[1],
        ]
    }
}

fn det3(m: &Mat3) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Jacobian of `(x, y, z) -> (f x / z, f y / z)` at a camera-space point;
/// `None` when the point is at or behind the near plane.
pub fn projection_jacobian(mu_cam: &Vec3, focal: f64) -> Option<Mat2x3> {
    let [x, y, z] = *mu_cam;
    if !(z > NEAR_PLANE) {
        return None;
    }
    let iz = 1.0 / z;
    Some([
        [focal * iz, 0.0, -focal * x * iz * iz],
        [0.0, focal * iz, -focal * y * iz * iz],
    ])
}

/// `J V Sigma V^T J^T`, evaluated left to right and symmetrized.
pub fn project_cov(cov: &Mat3, view: &Mat3, jac: &Mat2x3) -> Mat2 {
    let mut jv = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            jv[i][k] = (0..3).map(|m| jac[i][m] * view[m][k]).sum();
        }
    }
    let mut jvs = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            jvs[i][k] = (0..3).map(|m| jv[i][m] * cov[m][k]).sum();
        }
    }
    // (J V Sigma) V^T
    let mut jvsv = [[0.0; 3]; 2];
    for i in 0..2 {
        for k in 0..3 {
            jvsv[i][k] = (0..3).map(|m| jvs[i][m] * view[k][m]).sum();
        }
    }
    let mut out = [[0.0; 2]; 2];
    for i in 0..2 {
        for k in 0..2 {
            out[i][k] = (0..3).map(|m| jvsv[i][m] * jac[k][m]).sum();
        }
    }
    let off = 0.5 * (out[0][1] + out[1][0]);
    out[0][1] = off;
    out[1][0] = off;
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedIso {
    pub mu_2d: Vec2,
    pub sigma_2d: f64,
    pub depth: f64,
}

/// Isotropic shortcut: the projected scale is `sigma f / z`, independent of
/// the camera's orientation about the ray through the center.
pub fn project_iso(splat: &IsoSplat3D, cam: &Camera) -> Option<ProjectedIso> {
    let p = cam.to_camera(&splat.mu);
    if !(p[2] > NEAR_PLANE) {
        return None;
    }
    Some(ProjectedIso {
        mu_2d: cam.project_point(&p),
        sigma_2d: splat.sigma * cam.focal / p[2],
        depth: p[2],
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedAniso {
    pub mu_2d: Vec2,
    pub cov_2d: Mat2,
    pub depth: f64,
}

pub fn project_aniso(splat: &AnisoSplat3D, cam: &Camera) -> Option<ProjectedAniso> {
    let p = cam.to_camera(&splat.kernel.mu);
    let jac = projection_jacobian(&p, cam.focal)?;
    Some(ProjectedAniso {
        mu_2d: cam.project_point(&p),
        cov_2d: project_cov(&build_cov_3d(&splat.kernel), &cam.rotation, &jac),
        depth: p[2],
    })
}

/// Screen-space footprint of one splat.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Footprint {
    pub index: usize,
    pub depth: f64,
    pub mu_2d: Vec2,
    /// Inverse projected covariance `[xx, xy, yy]`.
    pub conic: [f64; 3],
    /// Half extents of the `q <= 9` ellipse.
    pub radius: Vec2,
    pub color: Vec3,
    pub opacity: f64,
}

impl Footprint {
    pub fn of(index: usize, splat: &Splat3D, cam: &Camera) -> Option<Self> {
        match splat {
            Splat3D::Iso(s) => {
                let p = project_iso(s, cam)?;
                let inv = 1.0 / (p.sigma_2d * p.sigma_2d);
                let r = FOOTPRINT_Q.sqrt() * p.sigma_2d;
                Some(Self {
                    index,
                    depth: p.depth,
                    mu_2d: p.mu_2d,
                    conic: [inv, 0.0, inv],
                    radius: [r, r],
                    color: s.color,
                    opacity: s.opacity,
                })
            }
            Splat3D::Aniso(s) => {
                let p = project_aniso(s, cam)?;
                let inv = inverse_2d(&p.cov_2d).ok()?;
                Some(Self {
                    index,
                    depth: p.depth,
                    mu_2d: p.mu_2d,
                    conic: [inv[0][0], inv[0][1], inv[1][1]],
                    radius: [(FOOTPRINT_Q * p.cov_2d[0][0]).sqrt(), (FOOTPRINT_Q * p.cov_2d[1][1]).sqrt()],
                    color: s.color,
                    opacity: s.opacity,
                })
            }
        }
    }

    /// Effective opacity at a pixel center, or `None` outside the footprint.
    #[inline]
    pub fn alpha_at(&self, px: f64, py: f64) -> Option<f64> {
        let dx = px - self.mu_2d[0];
        let dy = py - self.mu_2d[1];
        let [a, b, c] = self.conic;
        let q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy;
        (q <= FOOTPRINT_Q).then(|| self.opacity * (-q).exp())
    }

    /// Inclusive pixel index bounds guaranteed to contain the footprint, clipped to the image.
    fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let lo_x = (self.mu_2d[0] - self.radius[0] - 0.5).floor() - 1.0;
        let hi_x = (self.mu_2d[0] + self.radius[0] - 0.5).ceil() + 1.0;
        let lo_y = (self.mu_2d[1] - self.radius[1] - 0.5).floor() - 1.0;
        let hi_y = (self.mu_2d[1] + self.radius[1] - 0.5).ceil() + 1.0;
        if !(hi_x >= 0.0 && hi_y >= 0.0 && lo_x < width as f64 && lo_y < height as f64) {
            return None;
        }
        let clip = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
        Some((clip(lo_x, width), clip(hi_x, width), clip(lo_y, height), clip(hi_y, height)))
    }
}

/// Front-to-back accumulator.
#[derive(Debug, Clone, Copy)]
pub struct Compositor {
    pub color: Vec3,
    pub transmittance: f64,
}

impl Default for Compositor {
    fn default() -> Self {
        Self {
            color: [0.0; 3],
            transmittance: 1.0,
        }
    }
}

impl Compositor {
    #[inline]
    pub fn add(&mut self, color: &Vec3, alpha: f64) {
        let w = alpha * self.transmittance;
        for (acc, c) in self.color.iter_mut().zip(color) {
            *acc += c * w;
        }
        self.transmittance *= 1.0 - alpha;
    }

    pub fn finish(&self, background: &Vec3) -> Vec3 {
        let mut out = self.color;
        for (o, b) in out.iter_mut().zip(background) {
            *o += self.transmittance * b;
        }
        out
    }
}

/// Composites a front-to-back ordered list of `(color, alpha)`.
pub fn composite(ordered: &[(Vec3, f64)]) -> Result<Vec3> {
    Ok(composite_with_transmittance(ordered)?.0)
}

/// Like [`composite`], also returning the transmittance after each term.
pub fn composite_with_transmittance(ordered: &[(Vec3, f64)]) -> Result<(Vec3, Vec<f64>)> {
    let mut acc = Compositor::default();
    let mut trans = Vec::with_capacity(ordered.len());
    for (c, a) in ordered {
        if !(0.0..=1.0).contains(a) {
            return Err(Error::AlphaOutOfRange(*a));
        }
        acc.add(c, *a);
        trans.push(acc.transmittance);
    }
    Ok((acc.color, trans))
}

fn validate_scene(splats: &[Splat3D], cam: &Camera) -> Result<()> {
    cam.validate()?;
    splats.iter().try_for_each(Splat3D::validate)
}

fn sorted_footprints(splats: &[Splat3D], cam: &Camera) -> Vec<Footprint> {
    let mut fps: Vec<Footprint> = splats.iter().enumerate().filter_map(|(i, s)| Footprint::of(i, s, cam)).collect();
    // Stable: equal depths keep index order.
    fps.sort_by(|a, b| a.depth.total_cmp(&b.depth));
    fps
}

/// Tile-binned renderer. Returns a 3-channel image; `background` shows
/// through wherever transmittance remains.
pub fn render(splats: &[Splat3D], cam: &Camera, background: Vec3, parallel: bool) -> Result<ImageGrid> {
    validate_scene(splats, cam)?;
    let (w, h) = (cam.width, cam.height);
    let fps = sorted_footprints(splats, cam);
    let tiles_x = w.div_ceil(TILE);
    let tiles_y = h.div_ceil(TILE);
    let mut bins: Vec<Vec<(usize, [usize; 4])>> = vec![Vec::new(); tiles_x * tiles_y];
    for (k, fp) in fps.iter().enumerate() {
        if let Some((x0, x1, y0, y1)) = fp.pixel_bounds(w, h) {
            for ty in y0 / TILE..=y1 / TILE {
                for tx in x0 / TILE..=x1 / TILE {
                    bins[ty * tiles_x + tx].push((k, [x0, x1, y0, y1]));
                }
            }
        }
    }

    let mut data = vec![0.0; w * h * 3];
    let shade_row = |y: usize, row: &mut [f64]| {
        let py = y as f64 + 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let mut acc = Compositor::default();
            for &(k, [x0, x1, y0, y1]) in &bins[(y / TILE) * tiles_x + x / TILE] {
                if x < x0 || x > x1 || y < y0 || y > y1 {
                    continue;
                }
                if let Some(alpha) = fps[k].alpha_at(px, py) {
                    acc.add(&fps[k].color, alpha);
                }
            }
            row[x * 3..x * 3 + 3].copy_from_slice(&acc.finish(&background));
        }
    };
    if parallel {
        data.par_chunks_mut(w * 3).enumerate().for_each(|(y, row)| shade_row(y, row));
    } else {
        data.chunks_mut(w * 3).enumerate().for_each(|(y, row)| shade_row(y, row));
    }
    ImageGrid::from_data(w, h, 3, data)
}

/// Reference renderer: every pixel projects every splat, keeps those whose
/// footprint covers it, sorts them by depth and composites.
pub fn render_reference(splats: &[Splat3D], cam: &Camera, background: Vec3) -> Result<ImageGrid> {
    validate_scene(splats, cam)?;
    let (w, h) = (cam.width, cam.height);
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        for x in 0..w {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut hits: Vec<(f64, usize, Vec3, f64)> = splats
                .iter()
                .enumerate()
                .filter_map(|(i, s)| {
                    let fp = Footprint::of(i, s, cam)?;
                    fp.alpha_at(px, py).map(|a| (fp.depth, i, fp.color, a))
                })
                .collect();
            hits.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let ordered: Vec<(Vec3, f64)> = hits.into_iter().map(|(_, _, c, a)| (c, a)).collect();
            let mut acc = Compositor::default();
            for (c, a) in &ordered {
                acc.add(c, *a);
            }
            data.extend_from_slice(&acc.finish(&background));
        }
    }
    ImageGrid::from_data(w, h, 3, data)
}
