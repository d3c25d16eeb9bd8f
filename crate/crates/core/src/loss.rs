//! Image-space losses: mean L1, the mixed L1 + D-SSIM objective, and PSNR.

use crate::error::{Error, Result};
use crate::image::ImageGrid;
use crate::ssim::{ssim, ssim_with_grad};

/// Mean absolute difference over every pixel-channel.
pub fn l1_term(f: &ImageGrid, fhat: &ImageGrid) -> Result<f64> {
    f.same_shape(fhat)?;
    let sum: f64 = f.data().iter().zip(fhat.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / f.data().len() as f64)
}

pub fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(Error::invalid("lambda", format!("must lie in [0, 1], got {lambda}")))
    }
}

/// Components of `(1 - lambda) * L1 + lambda * (1 - SSIM)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub total: f64,
    pub l1: f64,
    /// `None` when `lambda == 0`; SSIM is then never computed, so images
    /// smaller than the SSIM window remain usable.
    pub ssim: Option<f64>,
}

pub fn loss(f: &ImageGrid, fhat: &ImageGrid, lambda: f64) -> Result<f64> {
    Ok(loss_value(f, fhat, lambda)?.total)
}

pub fn loss_value(f: &ImageGrid, fhat: &ImageGrid, lambda: f64) -> Result<LossValue> {
    check_lambda(lambda)?;
    let l1 = l1_term(f, fhat)?;
    if lambda == 0.0 {
        return Ok(LossValue { total: l1, l1, ssim: None });
    }
    let s = ssim(f, fhat)?;
    Ok(LossValue {
        total: (1.0 - lambda) * l1 + lambda * (1.0 - s),
        l1,
        ssim: Some(s),
    })
}

/// Loss and its gradient with respect to each value of `fhat`.
///
/// The L1 subgradient at a zero residual is 0.
pub fn loss_with_image_grad(f: &ImageGrid, fhat: &ImageGrid, lambda: f64) -> Result<(LossValue, Vec<f64>)> {
    check_lambda(lambda)?;
    let l1 = l1_term(f, fhat)?;
    let n = f.data().len() as f64;
    let scale = (1.0 - lambda) / n;
    let mut grad: Vec<f64> = f
        .data()
        .iter()
        .zip(fhat.data())
        .map(|(t, r)| {
            let d = r - t;
            if d > 0.0 {
                scale
            } else if d < 0.0 {
                -scale
            } else {
                0.0
            }
        })
        .collect();
    if lambda == 0.0 {
        return Ok((LossValue { total: l1, l1, ssim: None }, grad));
    }
    let (s, sgrad) = ssim_with_grad(f, fhat)?;
    for (g, sg) in grad.iter_mut().zip(&sgrad) {
        *g -= lambda * sg;
    }
    Ok((
        LossValue {
            total: (1.0 - lambda) * l1 + lambda * (1.0 - s),
            l1,
            ssim: Some(s),
        },
        grad,
    ))
}

/// `10 log10(1 / MSE)` for unit dynamic range; `f64::INFINITY` when the images are identical.
pub fn psnr(f: &ImageGrid, fhat: &ImageGrid) -> Result<f64> {
    f.same_shape(fhat)?;
    let mse = f.data().iter().zip(fhat.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / f.data().len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise(w: usize, h: usize, c: usize, seed: u64) -> ImageGrid {
        let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ImageGrid::from_fn(w, h, c, |_, _, _| {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (state >> 11) as f64 / (1u64 << 53) as f64
        })
        .unwrap()
    }

    #[test]
    fn l1_examples() {
        let a = noise(5, 4, 3, 1);
        assert_eq!(l1_term(&a, &a).unwrap(), 0.0);
        let zeros = ImageGrid::zeros(5, 4, 3).unwrap();
        let ones = ImageGrid::filled(5, 4, 3, 1.0).unwrap();
        assert_eq!(l1_term(&zeros, &ones).unwrap(), 1.0);

        let b = noise(5, 4, 3, 2);
        let mut acc = 0.0;
        for i in 0..60 {
            acc += (a.data()[i] - b.data()[i]).abs();
        }
        assert!((l1_term(&a, &b).unwrap() - acc / 60.0).abs() < 1e-15);
        assert!(matches!(l1_term(&a, &zeros.to_gray()), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn loss_composition() {
        let a = noise(16, 14, 3, 3);
        let b = noise(16, 14, 3, 4);
        for lambda in [0.0, 0.2, 1.0] {
            assert_eq!(loss(&a, &a, lambda).unwrap(), 0.0);
        }
        assert_eq!(loss(&a, &b, 0.0).unwrap(), l1_term(&a, &b).unwrap());
        let want = 0.8 * l1_term(&a, &b).unwrap() + 0.2 * (1.0 - ssim(&a, &b).unwrap());
        assert!((loss(&a, &b, 0.2).unwrap() - want).abs() < 1e-15);
        assert!(loss(&a, &b, 1.5).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = noise(4, 4, 1, 5);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let zeros = ImageGrid::zeros(4, 4, 1).unwrap();
        let tenth = ImageGrid::filled(4, 4, 1, 0.1).unwrap();
        assert!((psnr(&zeros, &tenth).unwrap() - 20.0).abs() < 1e-12);
        let b = noise(4, 4, 1, 6);
        let mse: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / 16.0;
        assert!((psnr(&a, &b).unwrap() + 10.0 * mse.log10()).abs() < 1e-12);
    }

    #[test]
    fn image_gradient_matches_finite_differences() {
        let f = noise(12, 12, 1, 7);
        let fhat = noise(12, 12, 1, 8);
        let (value, grad) = loss_with_image_grad(&f, &fhat, 0.2).unwrap();
        assert_eq!(value.total, loss(&f, &fhat, 0.2).unwrap());
        let h = 1e-7;
        for idx in [3usize, 40, 77, 140] {
            let mut p = fhat.clone();
            p.data_mut()[idx] += h;
            let mut m = fhat.clone();
            m.data_mut()[idx] -= h;
            let fd = (loss(&f, &p, 0.2).unwrap() - loss(&f, &m, 0.2).unwrap()) / (2.0 * h);
            assert!((fd - grad[idx]).abs() < 1e-6 * grad[idx].abs().max(1e-4), "{fd} vs {}", grad[idx]);
        }
    }
}
