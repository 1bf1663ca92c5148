//! PSNR, SSIM and their geometric-mean combination.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::raster::Image;

/// Reported for identical images, whose PSNR is unbounded.
pub const PSNR_MAX: f64 = 1000.0;

const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn check_same(a: &Image, b: &Image) -> Result<()> {
    if a.same_size(b) {
        Ok(())
    } else {
        Err(Error::invalid(
            "image pair",
            format!("{}x{} against {}x{}", a.width, a.height, b.width, b.height),
        ))
    }
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.data.is_empty() {
        return Err(Error::invalid("image pair", "empty images"));
    }
    let sum: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(sum / a.data.len() as f64)
}

/// `-10 log10(MSE)`, capped at [`PSNR_MAX`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_MAX
    } else {
        (-10.0 * mse.log10()).min(PSNR_MAX)
    }
}

fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Separable Gaussian filter over the positions where the window fits.
fn filter_valid(plane: &[f64], width: usize, height: usize, w: &[f64; WINDOW]) -> Vec<f64> {
    let (ow, oh) = (width - WINDOW + 1, height - WINDOW + 1);
    let mut rows = vec![0.0; ow * height];
    for y in 0..height {
        for x in 0..ow {
            rows[y * ow + x] = (0..WINDOW).map(|i| w[i] * plane[y * width + x + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..WINDOW).map(|i| w[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], width: usize, height: usize, w: &[f64; WINDOW]) -> f64 {
    let prod =
        |f: &dyn Fn(f64, f64) -> f64| a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
    let mu_a = filter_valid(a, width, height, w);
    let mu_b = filter_valid(b, width, height, w);
    let aa = filter_valid(&prod(&|x, _| x * x), width, height, w);
    let bb = filter_valid(&prod(&|_, y| y * y), width, height, w);
    let ab = filter_valid(&prod(&|x, y| x * y), width, height, w);
    let mut total = 0.0;
    for i in 0..mu_a.len() {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total +=
            ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
    }
    total / mu_a.len() as f64
}

/// Mean local SSIM with an 11×11 Gaussian window (σ = 1.5), averaged over
/// the colour channels.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_same(a, b)?;
    if a.width < WINDOW || a.height < WINDOW {
        return Err(Error::invalid(
            "ssim input",
            format!(
                "{}x{} is smaller than the {WINDOW}x{WINDOW} window",
                a.width, a.height
            ),
        ));
    }
    let w = gaussian_window();
    let total: f64 = (0..3)
        .map(|c| ssim_plane(&a.channel(c), &b.channel(c), a.width, a.height, &w))
        .sum();
    Ok(total / 3.0)
}

/// Geometric mean of `MSE = 10^(-PSNR/10)`, `sqrt(1 - SSIM)` and, when
/// supplied, LPIPS.
pub fn average_metric(psnr: f64, ssim: f64, lpips: Option<f64>) -> f64 {
    let mse = 10f64.powf(-psnr / 10.0);
    let structural = (1.0 - ssim).max(0.0).sqrt();
    match lpips {
        Some(l) => (mse * structural * l).cbrt(),
        None => (mse * structural).sqrt(),
    }
}

/// External perceptual metric, called with (rendered, reference).
pub type LpipsHook<'a> = &'a dyn Fn(&Image, &Image) -> f64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: Option<f64>,
    pub average: f64,
    /// Number of terms in `average`.
    pub terms: usize,
}

impl MetricReport {
    pub fn new(psnr: f64, ssim: f64, lpips: Option<f64>) -> Self {
        Self {
            psnr,
            ssim,
            lpips,
            average: average_metric(psnr, ssim, lpips),
            terms: if lpips.is_some() { 3 } else { 2 },
        }
    }

    pub fn measure(rendered: &Image, reference: &Image, lpips: Option<LpipsHook>) -> Result<Self> {
        let p = psnr(rendered, reference)?;
        let s = ssim(rendered, reference)?;
        Ok(Self::new(p, s, lpips.map(|f| f(rendered, reference))))
    }
}
