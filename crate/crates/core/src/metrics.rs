//! PSNR, SSIM, MSE, and region-based SSIM.
//!
//! Evaluation follows the reference-through-FBP protocol: the comparison
//! target is not the raw ground truth but its full-view projection followed by
//! FBP (see [`make_reference`]). PSNR peaks and SSIM stabilizing constants are
//! taken from the reference image per channel.

use crate::error::{Error, Result};
use crate::projector::{fbp, forward_project, FanGeometry};
use crate::tensor::Tensor;

/// Per-channel quality metrics. `psnr_db` is `f64::INFINITY` when the two
/// images are identical.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub psnr_db: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mse: Vec<f64>,
}

impl MetricReport {
    /// Table row in the `PSNR/SSIM/MSE(1e-3)` convention, one line per channel.
    pub fn table_rows(&self) -> Vec<String> {
        (0..self.psnr_db.len())
            .map(|c| {
                format!(
                    "{:.2}/{:.4}/{:.3}",
                    self.psnr_db[c],
                    self.ssim[c],
                    self.mse[c] * 1e3
                )
            })
            .collect()
    }
}

/// Full-view projection of the ground truth followed by FBP; the evaluation
/// reference shares the projector's band limit with every reconstruction.
pub fn make_reference(gt: &Tensor, geom: &FanGeometry) -> Result<Tensor> {
    fbp(&forward_project(gt, geom)?, geom)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let mut w: Vec<f64> = (0..size * size)
        .map(|i| {
            let y = (i / size) as f64 - half;
            let x = (i % size) as f64 - half;
            (-(x * x + y * y) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= sum);
    w
}

fn channel_peak(t: &Tensor, c: usize) -> f64 {
    t.channel(c).iter().fold(0.0f32, |m, &v| m.max(v)) as f64
}

fn channel_mse(a: &Tensor, b: &Tensor, c: usize) -> f64 {
    let n = a.rows() * a.cols();
    a.channel(c)
        .iter()
        .zip(b.channel(c))
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / n as f64
}

/// SSIM over an 11x11 Gaussian window (sigma 1.5), averaged over valid
/// (fully inside) window positions. Falls back to the largest odd window
/// that fits when the image is smaller than 11 pixels.
fn channel_ssim(recon: &Tensor, reference: &Tensor, c: usize, peak: f64) -> f64 {
    let rows = recon.rows();
    let cols = recon.cols();
    let mut win = 11usize.min(rows).min(cols);
    if win % 2 == 0 {
        win -= 1;
    }
    let w = gaussian_window(win, 1.5);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let a = recon.channel(c);
    let b = reference.channel(c);
    let mut total = 0.0f64;
    let mut count = 0usize;
    for r0 in 0..=(rows - win) {
        for k0 in 0..=(cols - win) {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            for i in 0..win {
                for j in 0..win {
                    let wv = w[i * win + j];
                    ma += wv * a[(r0 + i) * cols + k0 + j] as f64;
                    mb += wv * b[(r0 + i) * cols + k0 + j] as f64;
                }
            }
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for i in 0..win {
                for j in 0..win {
                    let wv = w[i * win + j];
                    let da = a[(r0 + i) * cols + k0 + j] as f64 - ma;
                    let db = b[(r0 + i) * cols + k0 + j] as f64 - mb;
                    va += wv * da * da;
                    vb += wv * db * db;
                    cov += wv * da * db;
                }
            }
            total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Per-channel MSE, PSNR (peak from the reference channel), and SSIM.
pub fn evaluate(recon: &Tensor, reference: &Tensor) -> Result<MetricReport> {
    if !recon.same_shape(reference) {
        return Err(Error::shape(format!(
            "recon {}x{}x{} vs reference {}x{}x{}",
            recon.channels(),
            recon.rows(),
            recon.cols(),
            reference.channels(),
            reference.rows(),
            reference.cols()
        )));
    }
    let mut report = MetricReport {
        psnr_db: Vec::new(),
        ssim: Vec::new(),
        mse: Vec::new(),
    };
    for c in 0..recon.channels() {
        let mse = channel_mse(recon, reference, c);
        let peak = channel_peak(reference, c);
        let psnr = if mse == 0.0 {
            f64::INFINITY
        } else {
            10.0 * (peak * peak / mse).log10()
        };
        report.mse.push(mse);
        report.psnr_db.push(psnr);
        report.ssim.push(channel_ssim(recon, reference, c, peak));
    }
    Ok(report)
}

/// Mean PSNR across channels; -inf never occurs since MSE >= 0.
pub fn mean_psnr(report: &MetricReport) -> f64 {
    report.psnr_db.iter().sum::<f64>() / report.psnr_db.len() as f64
}

/// SSIM computed independently on non-overlapping `block_size` blocks of one
/// channel pair, with uniform (unweighted) block statistics. Images whose dims
/// are not multiples of the block size are edge-replicated up. Returns the
/// per-block SSIM matrix as a 1 x nbr x nbc tensor.
pub fn region_ssim(a: &Tensor, b: &Tensor, block_size: usize) -> Result<Tensor> {
    if !a.same_shape(b) {
        return Err(Error::shape("region_ssim inputs differ in shape"));
    }
    if a.channels() != 1 {
        return Err(Error::shape("region_ssim expects single-channel tensors"));
    }
    if block_size == 0 || block_size > a.rows() || block_size > a.cols() {
        return Err(Error::argument(format!(
            "block size {block_size} does not fit a {}x{} image",
            a.rows(),
            a.cols()
        )));
    }
    let peak = channel_peak(a, 0).max(1e-12);
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let nbr = a.rows().div_ceil(block_size);
    let nbc = a.cols().div_ceil(block_size);
    let mut out = Tensor::zeros(a.kind(), 1, nbr, nbc);
    let n = (block_size * block_size) as f64;
    for br in 0..nbr {
        for bc in 0..nbc {
            let (mut ma, mut mb) = (0.0f64, 0.0f64);
            let mut vals = Vec::with_capacity(block_size * block_size);
            for i in 0..block_size {
                for j in 0..block_size {
                    let r = (br * block_size + i).min(a.rows() - 1);
                    let k = (bc * block_size + j).min(a.cols() - 1);
                    let (x, y) = (a.at(0, r, k) as f64, b.at(0, r, k) as f64);
                    ma += x;
                    mb += y;
                    vals.push((x, y));
                }
            }
            ma /= n;
            mb /= n;
            let (mut va, mut vb, mut cov) = (0.0f64, 0.0f64, 0.0f64);
            for (x, y) in vals {
                va += (x - ma) * (x - ma);
                vb += (y - mb) * (y - mb);
                cov += (x - ma) * (y - mb);
            }
            va /= n;
            vb /= n;
            cov /= n;
            let ssim = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            out.set(0, br, bc, ssim as f32);
        }
    }
    Ok(out)
}
