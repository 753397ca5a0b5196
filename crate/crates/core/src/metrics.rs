//! Image quality and trajectory metrics.

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::geometry::{umeyama, RigidTransform};
use crate::image::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

/// `10 log10(peak^2 / MSE)`; identical inputs give `f64::INFINITY`.
pub fn psnr(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR clamped to [`PSNR_CAP`] for reports.
pub fn psnr_capped(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    psnr(a, b, peak).map(|v| v.min(PSNR_CAP))
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut g = [0.0; SSIM_WINDOW];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable valid-mode correlation with the SSIM window.
fn filter_valid(src: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        for x in 0..ow {
            let row = &src[y * w + x..y * w + x + SSIM_WINDOW];
            tmp[y * ow + x] = row.iter().zip(g).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| g[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size map back to full size.
fn filter_valid_adjoint(map: &[f64], w: usize, h: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w + 1 - SSIM_WINDOW, h + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = map[y * ow + x];
            for k in 0..SSIM_WINDOW {
                tmp[(y + k) * ow + x] += g[k] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for k in 0..SSIM_WINDOW {
                out[y * w + x + k] += g[k] * v;
            }
        }
    }
    out
}

struct SsimPlane {
    value: f64,
    grad_a: Option<Vec<f64>>,
}

fn ssim_plane(a: &[f64], b: &[f64], w: usize, h: usize, peak: f64, want_grad: bool) -> SsimPlane {
    let g = gaussian_window();
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let mu_a = filter_valid(a, w, h, &g);
    let mu_b = filter_valid(b, w, h, &g);
    let e_aa = filter_valid(&aa, w, h, &g);
    let e_bb = filter_valid(&bb, w, h, &g);
    let e_ab = filter_valid(&ab, w, h, &g);
    let n = mu_a.len();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let (mut d_mu, mut d_aa, mut d_ab) = if want_grad {
        (vec![0.0; n], vec![0.0; n], vec![0.0; n])
    } else {
        (Vec::new(), Vec::new(), Vec::new())
    };
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let var_a = e_aa[i] - ma * ma;
        let var_b = e_bb[i] - mb * mb;
        let cov = e_ab[i] - ma * mb;
        let a1 = 2.0 * ma * mb + c1;
        let a2 = 2.0 * cov + c2;
        let b1 = ma * ma + mb * mb + c1;
        let b2 = var_a + var_b + c2;
        let s = a1 * a2 / (b1 * b2);
        total += s;
        if want_grad {
            // Partial derivatives w.r.t. (mu_a, E[a^2], E[ab]).
            d_mu[i] = inv_n * s * (2.0 * mb / a1 - 2.0 * mb / a2 - 2.0 * ma / b1 + 2.0 * ma / b2);
            d_aa[i] = inv_n * s * (-1.0 / b2);
            d_ab[i] = inv_n * s * (2.0 / a2);
        }
    }
    let grad_a = want_grad.then(|| {
        let g_mu = filter_valid_adjoint(&d_mu, w, h, &g);
        let g_aa = filter_valid_adjoint(&d_aa, w, h, &g);
        let g_ab = filter_valid_adjoint(&d_ab, w, h, &g);
        (0..w * h).map(|p| g_mu[p] + 2.0 * a[p] * g_aa[p] + b[p] * g_ab[p]).collect()
    });
    SsimPlane { value: total * inv_n, grad_a }
}

fn check_ssim_inputs(a: &Image, b: &Image) -> Result<()> {
    a.ensure_same_shape(b)?;
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(Error::ImageTooSmall { width: a.width(), height: a.height(), min: SSIM_WINDOW });
    }
    Ok(())
}

/// Mean SSIM over valid 11x11 Gaussian windows (sigma 1.5). Multi-channel
/// images average the per-channel values.
pub fn ssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    check_ssim_inputs(a, b)?;
    let ch = a.channels();
    let mut sum = 0.0;
    for c in 0..ch {
        let pa = a.channel(c);
        let pb = b.channel(c);
        sum += ssim_plane(pa.data(), pb.data(), a.width(), a.height(), peak, false).value;
    }
    Ok(sum / ch as f64)
}

/// SSIM and its gradient with respect to every value of `a`.
pub fn ssim_with_gradient(a: &Image, b: &Image, peak: f64) -> Result<(f64, Image)> {
    check_ssim_inputs(a, b)?;
    let ch = a.channels();
    let mut grad = Image::new(a.width(), a.height(), ch)?;
    let mut sum = 0.0;
    for c in 0..ch {
        let pa = a.channel(c);
        let pb = b.channel(c);
        let plane = ssim_plane(pa.data(), pb.data(), a.width(), a.height(), peak, true);
        sum += plane.value;
        for (p, v) in plane.grad_a.unwrap().into_iter().enumerate() {
            grad.data_mut()[p * ch + c] = v / ch as f64;
        }
    }
    Ok((sum / ch as f64, grad))
}

/// Structural dissimilarity `(1 - SSIM) / 2`.
pub fn dssim(a: &Image, b: &Image, peak: f64) -> Result<f64> {
    ssim(a, b, peak).map(|s| (1.0 - s) / 2.0)
}

/// Mean absolute difference over every value.
pub fn l1(a: &Image, b: &Image) -> Result<f64> {
    a.ensure_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimedPose {
    pub timestamp: f64,
    pub pose: RigidTransform,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AteAlignment {
    None,
    Rigid,
    #[default]
    Similarity,
}

/// Root-mean-square translational error after aligning the estimated
/// positions onto the reference ones.
pub fn ate(estimated: &[TimedPose], reference: &[TimedPose], align: AteAlignment) -> Result<f64> {
    if estimated.len() != reference.len() {
        return Err(Error::LengthMismatch(format!(
            "{} estimated vs {} reference poses",
            estimated.len(),
            reference.len()
        )));
    }
    if estimated.len() < 2 {
        return Err(Error::LengthMismatch("ATE needs at least two poses".into()));
    }
    for (e, r) in estimated.iter().zip(reference) {
        if (e.timestamp - r.timestamp).abs() > 1e-6 * r.timestamp.abs().max(1.0) {
            return Err(Error::LengthMismatch(format!(
                "timestamps differ: {} vs {}",
                e.timestamp, r.timestamp
            )));
        }
    }
    let est: Vec<Vector3<f64>> = estimated.iter().map(|p| p.pose.translation).collect();
    let rf: Vec<Vector3<f64>> = reference.iter().map(|p| p.pose.translation).collect();
    let mapped: Vec<Vector3<f64>> = match align {
        AteAlignment::None => est,
        AteAlignment::Rigid | AteAlignment::Similarity => {
            let sim = umeyama(&est, &rf, None, align == AteAlignment::Similarity)?;
            est.iter().map(|p| sim.apply(p)).collect()
        }
    };
    let mse = mapped.iter().zip(&rf).map(|(a, b)| (a - b).norm_squared()).sum::<f64>() / rf.len() as f64;
    Ok(mse.sqrt())
}

/// One row of an evaluation report. LPIPS is not computed; NaN image metrics
/// mean "not measured" and print as empty fields.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub label: String,
    pub psnr: f64,
    pub ssim: f64,
    pub ate_rmse: Option<f64>,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "label,psnr_db,ssim,lpips,ate_rmse";

    /// PSNR limited to the report cap; NaN stays NaN.
    pub fn capped_psnr(&self) -> f64 {
        if self.psnr.is_nan() {
            f64::NAN
        } else {
            self.psnr.min(PSNR_CAP)
        }
    }

    pub fn csv_row(&self) -> String {
        let field = |v: f64| if v.is_nan() { String::new() } else { format!("{v:.6}") };
        format!(
            "{},{},{},unavailable,{}",
            self.label,
            field(self.capped_psnr()),
            field(self.ssim),
            self.ate_rmse.map_or_else(String::new, |v| format!("{v:.9}"))
        )
    }

    pub fn table(rows: &[MetricReport]) -> String {
        let mut s = format!("{:<24} {:>10} {:>8} {:>8} {:>12}\n", "label", "PSNR(dB)", "SSIM", "LPIPS", "ATE");
        for r in rows {
            let cell = |v: f64, digits: usize| if v.is_nan() { "-".to_string() } else { format!("{v:.digits$}") };
            s.push_str(&format!(
                "{:<24} {:>10} {:>8} {:>8} {:>12}\n",
                r.label,
                cell(r.capped_psnr(), 3),
                cell(r.ssim, 4),
                "n/a",
                r.ate_rmse.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
            ));
        }
        s
    }
}
