//! Mean structural similarity over the valid region of an 11x11 Gaussian
//! window (sigma 1.5, K1 = 0.01, K2 = 0.03, dynamic range 1), computed per
//! channel and averaged. Also provides the exact gradient with respect to the
//! second image, used by the fitting loss.

use crate::error::{Error, Result};
use crate::image::ImageGrid;

pub const WINDOW: usize = 11;
pub const WINDOW_SIGMA: f64 = 1.5;
pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const DYNAMIC_RANGE: f64 = 1.0;

const C1: f64 = (K1 * DYNAMIC_RANGE) * (K1 * DYNAMIC_RANGE);
const C2: f64 = (K2 * DYNAMIC_RANGE) * (K2 * DYNAMIC_RANGE);

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub fn window_taps() -> [f64; WINDOW] {
    let r = (WINDOW / 2) as f64;
    let mut taps = [0.0; WINDOW];
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - r;
        *t = (-0.5 * d * d / (WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    taps
}

/// Separable "valid" correlation of a `h x w` plane with the window.
fn filter_valid(plane: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let wv = w - WINDOW + 1;
    let hv = h - WINDOW + 1;
    let mut tmp = vec![0.0; h * wv];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        let out = &mut tmp[y * wv..(y + 1) * wv];
        for (i, o) in out.iter_mut().enumerate() {
            *o = taps.iter().zip(&row[i..i + WINDOW]).map(|(t, v)| t * v).sum();
        }
    }
    let mut out = vec![0.0; hv * wv];
    for j in 0..hv {
        for (k, t) in taps.iter().enumerate() {
            let src = &tmp[(j + k) * wv..(j + k + 1) * wv];
            for (o, s) in out[j * wv..(j + 1) * wv].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a `hv x wv` map back onto `h x w`.
fn filter_valid_adjoint(grad: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> Vec<f64> {
    let wv = w - WINDOW + 1;
    let hv = h - WINDOW + 1;
    let mut tmp = vec![0.0; h * wv];
    for j in 0..hv {
        let src = &grad[j * wv..(j + 1) * wv];
        for (k, t) in taps.iter().enumerate() {
            for (o, s) in tmp[(j + k) * wv..(j + k + 1) * wv].iter_mut().zip(src) {
                *o += t * s;
            }
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let src = &tmp[y * wv..(y + 1) * wv];
        let row = &mut out[y * w..(y + 1) * w];
        for (i, s) in src.iter().enumerate() {
            for (k, t) in taps.iter().enumerate() {
                row[i + k] += t * s;
            }
        }
    }
    out
}

fn check_inputs(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    a.same_shape(b)?;
    if a.width() < WINDOW || a.height() < WINDOW {
        return Err(Error::ImageTooSmall {
            width: a.width(),
            height: a.height(),
            window: WINDOW,
        });
    }
    Ok(())
}

struct LocalStats {
    mu_x: Vec<f64>,
    mu_y: Vec<f64>,
    var_x: Vec<f64>,
    var_y: Vec<f64>,
    cov_xy: Vec<f64>,
}

fn local_stats(x: &[f64], y: &[f64], w: usize, h: usize, taps: &[f64; WINDOW]) -> LocalStats {
    let mu_x = filter_valid(x, w, h, taps);
    let mu_y = filter_valid(y, w, h, taps);
    let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(a, b)| a * b).collect::<Vec<_>>();
    let xx = filter_valid(&sq(x, x), w, h, taps);
    let yy = filter_valid(&sq(y, y), w, h, taps);
    let xy = filter_valid(&sq(x, y), w, h, taps);
    let var_x = xx.iter().zip(&mu_x).map(|(s, m)| s - m * m).collect();
    let var_y = yy.iter().zip(&mu_y).map(|(s, m)| s - m * m).collect();
    let cov_xy = xy.iter().zip(mu_x.iter().zip(&mu_y)).map(|(s, (mx, my))| s - mx * my).collect();
    LocalStats {
        mu_x,
        mu_y,
        var_x,
        var_y,
        cov_xy,
    }
}

#[inline]
fn local_ssim(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    ((2.0 * mx * my + C1) * (2.0 * cxy + C2)) / ((mx * mx + my * my + C1) * (vx + vy + C2))
}

pub fn ssim(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_inputs(a, b)?;
    let (w, h, channels) = a.shape();
    let taps = window_taps();
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..channels {
        let s = local_stats(&a.plane(c), &b.plane(c), w, h, &taps);
        for i in 0..s.mu_x.len() {
            total += local_ssim(s.mu_x[i], s.mu_y[i], s.var_x[i], s.var_y[i], s.cov_xy[i]);
        }
        count += s.mu_x.len();
    }
    Ok(total / count as f64)
}

/// SSIM of `(a, b)` and its gradient with respect to every value of `b`,
/// laid out like `b.data()`.
pub fn ssim_with_grad(a: &ImageGrid, b: &ImageGrid) -> Result<(f64, Vec<f64>)> {
    check_inputs(a, b)?;
    let (w, h, channels) = a.shape();
    let taps = window_taps();
    let mut grad = vec![0.0; w * h * channels];
    let mut total = 0.0;
    let valid = (w - WINDOW + 1) * (h - WINDOW + 1);
    let norm = 1.0 / (valid * channels) as f64;

    for c in 0..channels {
        let x = a.plane(c);
        let y = b.plane(c);
        let s = local_stats(&x, &y, w, h, &taps);
        // Per-window partials of the local index with respect to mu_y,
        // var_y and cov_xy, folded so that
        //   dS/dy_q = W^T(m)_q + 2 y_q W^T(v)_q + x_q W^T(k)_q.
        let mut dm = vec![0.0; valid];
        let mut dv = vec![0.0; valid];
        let mut dk = vec![0.0; valid];
        for i in 0..valid {
            let (mx, my) = (s.mu_x[i], s.mu_y[i]);
            let a1 = 2.0 * mx * my + C1;
            let a2 = 2.0 * s.cov_xy[i] + C2;
            let b1 = mx * mx + my * my + C1;
            let b2 = s.var_x[i] + s.var_y[i] + C2;
            let den = b1 * b2;
            let val = a1 * a2 / den;
            total += val;
            let d_mu_y = 2.0 * mx * a2 / den - val * 2.0 * my / b1;
            let d_var_y = -val / b2;
            let d_cov = 2.0 * a1 / den;
            dm[i] = norm * (d_mu_y - 2.0 * d_var_y * my - d_cov * mx);
            dv[i] = norm * d_var_y;
            dk[i] = norm * d_cov;
        }
        let gm = filter_valid_adjoint(&dm, w, h, &taps);
        let gv = filter_valid_adjoint(&dv, w, h, &taps);
        let gk = filter_valid_adjoint(&dk, w, h, &taps);
        for q in 0..w * h {
            grad[q * channels + c] = gm[q] + 2.0 * y[q] * gv[q] + x[q] * gk[q];
        }
    }
    Ok((total * norm, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hashed(w: usize, h: usize, c: usize, salt: u64) -> ImageGrid {
        ImageGrid::from_fn(w, h, c, |x, y, k| {
            let v = (y as u64 * 73856093) ^ (x as u64 * 19349663) ^ (k as u64 * 83492791) ^ (salt * 2654435761);
            (v % 1000) as f64 / 999.0
        })
        .unwrap()
    }

    fn pair(w: usize, h: usize, c: usize) -> (ImageGrid, ImageGrid) {
        let a = hashed(w, h, c, 1);
        let n = hashed(w, h, c, 2);
        let b = ImageGrid::from_data(
            w,
            h,
            c,
            a.data().iter().zip(n.data()).map(|(p, q)| 0.6 * p + 0.4 * q).collect(),
        )
        .unwrap();
        (a, b)
    }

    /// Direct 2D-window evaluation, no separability, no shared helpers.
    fn naive_ssim(a: &ImageGrid, b: &ImageGrid) -> f64 {
        let r = 5i64;
        let mut win = vec![0.0; 121];
        for dy in -r..=r {
            for dx in -r..=r {
                win[((dy + r) * 11 + dx + r) as usize] = (-((dx * dx + dy * dy) as f64) / (2.0 * 1.5 * 1.5)).exp();
            }
        }
        let s: f64 = win.iter().sum();
        win.iter_mut().for_each(|v| *v /= s);
        let (c1, c2) = (1e-4, 9e-4);
        let mut total = 0.0;
        let mut n = 0;
        for c in 0..a.channels() {
            for y in 5..a.height() - 5 {
                for x in 5..a.width() - 5 {
                    let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let wv = win[((dy + r) * 11 + dx + r) as usize];
                            let px = a.get((x as i64 + dx) as usize, (y as i64 + dy) as usize, c);
                            let py = b.get((x as i64 + dx) as usize, (y as i64 + dy) as usize, c);
                            mx += wv * px;
                            my += wv * py;
                            sxx += wv * px * px;
                            syy += wv * py * py;
                            sxy += wv * px * py;
                        }
                    }
                    let (vx, vy, cxy) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
                    total += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
                    n += 1;
                }
            }
        }
        total / n as f64
    }

    #[test]
    fn self_similarity_is_one() {
        let (a, _) = pair(16, 13, 3);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        let flat = ImageGrid::filled(12, 12, 1, 0.5).unwrap();
        assert_eq!(ssim(&flat, &flat.clone()).unwrap(), 1.0);
    }

    #[test]
    fn matches_scikit_image_reference() {
        // Values from tests/oracles/ssim_reference.py (skimage 0.25, gaussian weights).
        let (a, b) = pair(16, 16, 1);
        assert!((ssim(&a, &b).unwrap() - 0.7590548917716774).abs() < 1e-6);
        let (a, b) = pair(24, 20, 3);
        assert!((ssim(&a, &b).unwrap() - 0.7981375447652536).abs() < 1e-6);
    }

    #[test]
    fn matches_naive_window() {
        let (a, b) = pair(19, 14, 3);
        assert!((ssim(&a, &b).unwrap() - naive_ssim(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let (a, b) = pair(15, 17, 1);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn small_images_rejected() {
        let a = ImageGrid::zeros(10, 40, 1).unwrap();
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
        let b = ImageGrid::zeros(40, 10, 1).unwrap();
        assert!(matches!(ssim(&a, &b), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let (a, b) = pair(13, 12, 3);
        let (value, grad) = ssim_with_grad(&a, &b).unwrap();
        assert!((value - ssim(&a, &b).unwrap()).abs() < 1e-14);
        let h = 1e-6;
        for idx in [0usize, 7, 50, 123, 200, 311, 467] {
            let mut plus = b.clone();
            plus.data_mut()[idx] += h;
            let mut minus = b.clone();
            minus.data_mut()[idx] -= h;
            let fd = (ssim(&a, &plus).unwrap() - ssim(&a, &minus).unwrap()) / (2.0 * h);
            assert!((fd - grad[idx]).abs() <= 1e-6 * grad[idx].abs().max(1e-3), "idx {idx}: fd {fd} vs {}", grad[idx]);
        }
    }
}
