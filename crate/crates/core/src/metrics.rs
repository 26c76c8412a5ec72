//! Image quality metrics. All take images with channels in `[0, 1]`.

use crate::error::{Error, Result};
use crate::image::Image;

/// Reported in place of infinity for identical images.
pub const PSNR_IDENTICAL: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct QualityReport {
    pub psnr: f64,
    pub ssim: f64,
    pub l1: f64,
    pub mse: f64,
}

impl QualityReport {
    pub const CSV_HEADER: &'static str = "psnr,ssim,l1,mse";

    pub fn evaluate(rendered: &Image, target: &Image) -> Result<Self> {
        Ok(QualityReport {
            psnr: psnr(rendered, target)?,
            ssim: ssim(rendered, target)?,
            l1: l1(rendered, target)?,
            mse: mse(rendered, target)?,
        })
    }

    pub fn csv_row(&self) -> String {
        format!("{:.6},{:.6},{:.8},{:.8}", self.psnr, self.ssim, self.l1, self.mse)
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / a.data().len() as f64)
}

pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let sum: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum();
    Ok(sum / a.data().len() as f64)
}

/// Peak signal-to-noise ratio with peak 1.0.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok(10.0 * (1.0 / m).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of a `width x height` plane.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let ow = width - SSIM_WINDOW + 1;
    let oh = height - SSIM_WINDOW + 1;
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        let src = &plane[y * width..(y + 1) * width];
        for x in 0..ow {
            rows[y * ow + x] = w.iter().zip(&src[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| w[k] * rows[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (sigma 1.5), averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.same_dims(b)?;
    let (width, height) = (a.width(), a.height());
    if width.min(height) < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width, height, min: SSIM_WINDOW });
    }
    let win = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data().iter().skip(ch).step_by(3).copied().collect();
        let pb: Vec<f64> = b.data().iter().skip(ch).step_by(3).copied().collect();
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, width, height, &win);
        let mu_b = filter_valid(&pb, width, height, &win);
        let e_aa = filter_valid(&aa, width, height, &win);
        let e_bb = filter_valid(&bb, width, height, &win);
        let e_ab = filter_valid(&ab, width, height, &win);
        let mut sum = 0.0;
        for k in 0..mu_a.len() {
            let (ma, mb) = (mu_a[k], mu_b[k]);
            let va = e_aa[k] - ma * ma;
            let vb = e_bb[k] - mb * mb;
            let cov = e_ab[k] - ma * mb;
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += sum / mu_a.len() as f64;
    }
    Ok((total / 3.0).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(n: usize) -> Image {
        Image::from_fn(n, n, |x, y| if (x + y) % 2 == 0 { [1.0; 3] } else { [0.0; 3] })
    }

    #[test]
    fn psnr_examples() {
        let z = Image::new(4, 4);
        assert_eq!(psnr(&z, &z).unwrap(), PSNR_IDENTICAL);
        assert!(psnr(&z, &Image::filled(4, 4, [1.0; 3])).unwrap().abs() < 1e-12);
        let p = psnr(&z, &Image::filled(4, 4, [0.5; 3])).unwrap();
        assert!((p - 6.0206).abs() < 1e-4);
        assert!(psnr(&z, &Image::new(4, 5)).is_err());
    }

    #[test]
    fn psnr_is_symmetric() {
        let a = Image::from_fn(5, 3, |x, y| [x as f64 / 5.0, y as f64 / 3.0, 0.2]);
        let b = Image::from_fn(5, 3, |x, _| [0.1, x as f64 / 7.0, 0.9]);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
    }

    #[test]
    fn ssim_identical_is_one() {
        let a = Image::from_fn(16, 13, |x, y| [(x * y % 7) as f64 / 7.0, x as f64 / 16.0, y as f64 / 13.0]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_inverted_checker_is_negative() {
        let a = checker(16);
        let inv = Image::from_fn(16, 16, |x, y| {
            let v = a.get(x, y);
            [1.0 - v[0], 1.0 - v[1], 1.0 - v[2]]
        });
        let s = ssim(&a, &inv).unwrap();
        assert!(s < 0.0 && s >= -1.0, "{s}");
    }

    #[test]
    fn ssim_constant_images_is_luminance_only() {
        let (l1, l2) = (0.2, 0.7);
        let a = Image::filled(12, 12, [l1; 3]);
        let b = Image::filled(12, 12, [l2; 3]);
        let c1 = SSIM_K1 * SSIM_K1;
        let want = (2.0 * l1 * l2 + c1) / (l1 * l1 + l2 * l2 + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = Image::new(10, 20);
        assert!(matches!(ssim(&a, &a), Err(Error::ImageTooSmall { .. })));
    }

    #[test]
    fn report_row() {
        let a = Image::filled(11, 11, [0.0; 3]);
        let b = Image::filled(11, 11, [0.5; 3]);
        let r = QualityReport::evaluate(&a, &b).unwrap();
        assert_eq!(r.l1, 0.5);
        assert_eq!(r.mse, 0.25);
        assert_eq!(r.csv_row().split(',').count(), QualityReport::CSV_HEADER.split(',').count());
    }
}
