//! Variance-exploding diffusion: noise schedule, forward perturbation, the
//! denoising-score-matching loss, the reverse-diffusion predictor, the
//! annealed-Langevin corrector, and the measurement-consistency projection.
//!
//! Score callbacks take `(x, sigma)`; time enters the VE-SDE only through the
//! noise level. Every stochastic operation consumes an explicit rng handle and
//! documents its draw order, so runs are bit-reproducible for a fixed seed.

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::projector::ViewMask;
use crate::tensor::Tensor;
use crate::vct::{vct, VirtualMask};

/// Geometric noise schedule `sigma(t) = sigma_min * (sigma_max/sigma_min)^t`.
#[derive(Debug, Clone, PartialEq)]
pub struct VESchedule {
    sigma_min: f64,
    sigma_max: f64,
    n_steps: usize,
}

impl VESchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, n_steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_max >= sigma_min) {
            return Err(Error::argument(format!(
                "need 0 < sigma_min <= sigma_max, got {sigma_min}, {sigma_max}"
            )));
        }
        if n_steps < 2 {
            return Err(Error::argument("schedule needs at least 2 levels"));
        }
        Ok(VESchedule { sigma_min, sigma_max, n_steps })
    }

    /// Paper-scale defaults: sigma in [0.01, 378].
    pub fn default_with_steps(n_steps: usize) -> Self {
        VESchedule::new(0.01, 378.0, n_steps).expect("defaults valid")
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }
    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }
    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn sigma_at(&self, t: f64) -> f64 {
        self.sigma_min * (self.sigma_max / self.sigma_min).powf(t)
    }

    /// Discrete level `sigma_i = sigma(i / (N-1))`, i in `0..N`.
    pub fn sigma_level(&self, i: usize) -> f64 {
        self.sigma_at(i as f64 / (self.n_steps - 1) as f64)
    }
}

/// Sampler hyperparameters; `snr` drives the Langevin step size.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerConfig {
    pub snr: f64,
    pub n_steps: usize,
    pub corrector_steps_per_level: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            snr: 0.075,
            n_steps: 200,
            corrector_steps_per_level: 1,
            seed: 42,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.snr <= 0.0 {
            return Err(Error::argument(format!("snr must be > 0, got {}", self.snr)));
        }
        if self.n_steps < 2 {
            return Err(Error::argument("sampler needs at least 2 levels"));
        }
        Ok(())
    }
}

/// One standard-normal draw per element, in the tensor's element order.
pub fn draw_noise_like(x: &Tensor, rng: &mut impl RngCore) -> Tensor {
    let mut z = x.zeros_like();
    for v in z.data_mut() {
        *v = rng.sample::<f64, _>(StandardNormal) as f32;
    }
    z
}

/// `x0 + sigma * z` for an explicit noise tensor.
pub fn perturb_with(x0: &Tensor, sigma: f64, z: &Tensor) -> Tensor {
    let mut out = x0.clone();
    for (o, n) in out.data_mut().iter_mut().zip(z.data()) {
        *o += (sigma * *n as f64) as f32;
    }
    out
}

/// Forward VE perturbation at time `t`; returns the sample and the noise.
pub fn perturb_recorded(
    x0: &Tensor,
    t: f64,
    schedule: &VESchedule,
    rng: &mut impl RngCore,
) -> Result<(Tensor, Tensor)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::argument(format!("t must be in [0,1], got {t}")));
    }
    let z = draw_noise_like(x0, rng);
    Ok((perturb_with(x0, schedule.sigma_at(t), &z), z))
}

/// Forward VE perturbation at time `t`.
pub fn perturb(x0: &Tensor, t: f64, schedule: &VESchedule, rng: &mut impl RngCore) -> Result<Tensor> {
    perturb_recorded(x0, t, schedule, rng).map(|(x, _)| x)
}

/// Denoising-score-matching loss: per sample, draw `t ~ U(0,1]` then `z`;
/// the contribution is `sigma(t)^2 * sum((s(x_t, sigma) - (x0-x_t)/sigma^2)^2)`
/// and the result is the mean over the batch.
pub fn dsm_loss(
    mut score_fn: impl FnMut(&Tensor, f64) -> Tensor,
    batch: &[Tensor],
    schedule: &VESchedule,
    rng: &mut impl RngCore,
) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::argument("dsm_loss on empty batch"));
    }
    let mut total = 0.0f64;
    for x0 in batch {
        let t = 1.0 - rng.gen::<f64>(); // (0, 1]
        let sigma = schedule.sigma_at(t);
        let (x_t, z) = perturb_recorded(x0, t, schedule, rng)?;
        let s = score_fn(&x_t, sigma);
        debug_assert!(s.same_shape(x0), "score output shape mismatch");
        // target = (x0 - x_t)/sigma^2 = -z/sigma
        let mut acc = 0.0f64;
        for (sv, zv) in s.data().iter().zip(z.data()) {
            let diff = *sv as f64 + *zv as f64 / sigma;
            acc += diff * diff;
        }
        total += sigma * sigma * acc;
    }
    Ok(total / batch.len() as f64)
}

/// Deterministic core of the reverse-diffusion predictor.
pub fn predictor_update(x: &Tensor, sigma_i: f64, sigma_prev: f64, g: &Tensor, z: &Tensor) -> Tensor {
    let delta = sigma_i * sigma_i - sigma_prev * sigma_prev;
    let root = delta.max(0.0).sqrt();
    let mut out = x.clone();
    for ((o, gv), zv) in out.data_mut().iter_mut().zip(g.data()).zip(z.data()) {
        *o = (*o as f64 + delta * *gv as f64 + root * *zv as f64) as f32;
    }
    out
}

/// Reverse-diffusion predictor from level `i` to `i-1`:
/// `x' = x + (sigma_i^2 - sigma_{i-1}^2) s(x, sigma_i) + sqrt(sigma_i^2 - sigma_{i-1}^2) z`.
pub fn predictor_step(
    x: &Tensor,
    i: usize,
    schedule: &VESchedule,
    mut score_fn: impl FnMut(&Tensor, f64) -> Tensor,
    rng: &mut impl RngCore,
) -> Result<Tensor> {
    if i == 0 || i >= schedule.n_steps() {
        return Err(Error::argument(format!(
            "predictor level {i} out of 1..{}",
            schedule.n_steps()
        )));
    }
    let sigma_i = schedule.sigma_level(i);
    let sigma_prev = schedule.sigma_level(i - 1);
    let g = score_fn(x, sigma_i);
    let z = draw_noise_like(x, rng);
    Ok(predictor_update(x, sigma_i, sigma_prev, &g, &z))
}

/// Deterministic core of the annealed-Langevin corrector. Returns the moved
/// tensor and `true`, or the input unchanged and `false` when the score is
/// identically zero.
pub fn corrector_update(x: &Tensor, g: &Tensor, z: &Tensor, snr: f64) -> (Tensor, bool) {
    let g_norm = g.norm();
    if g_norm == 0.0 {
        return (x.clone(), false);
    }
    let z_norm = z.norm();
    let eps = 2.0 * (snr * z_norm / g_norm).powi(2);
    let root = (2.0 * eps).sqrt();
    let mut out = x.clone();
    for ((o, gv), zv) in out.data_mut().iter_mut().zip(g.data()).zip(z.data()) {
        *o = (*o as f64 + eps * *gv as f64 + root * *zv as f64) as f32;
    }
    (out, true)
}

/// Langevin corrector at level `i` with step size
/// `eps = 2 (snr ||z|| / ||g||)^2`. Always consumes one noise draw; a zero
/// score yields a flagged no-op.
pub fn corrector_step(
    x: &Tensor,
    i: usize,
    schedule: &VESchedule,
    mut score_fn: impl FnMut(&Tensor, f64) -> Tensor,
    snr: f64,
    rng: &mut impl RngCore,
) -> Result<(Tensor, bool)> {
    if i >= schedule.n_steps() {
        return Err(Error::argument(format!(
            "corrector level {i} out of 0..{}",
            schedule.n_steps()
        )));
    }
    let z = draw_noise_like(x, rng);
    let g = score_fn(x, schedule.sigma_level(i));
    Ok(corrector_update(x, &g, &z, snr))
}

/// Measurement-consistency projection: kept view rows are replaced by the
/// measurements. A 2-channel state takes `y`'s rows directly; a 6-channel
/// (cross-energy stacked) state takes rows of `vct(y, vmask)`, re-expressing
/// the measurement under the current step's virtual mask. Idempotent and
/// bit-exact on replaced rows.
pub fn data_consistency(
    x_hat: &Tensor,
    y: &Tensor,
    mask: &ViewMask,
    vmask: Option<&VirtualMask>,
) -> Result<Tensor> {
    if y.channels() != 2 {
        return Err(Error::shape(format!(
            "measurement must have 2 channels, got {}",
            y.channels()
        )));
    }
    if x_hat.rows() != y.rows() || x_hat.cols() != y.cols() {
        return Err(Error::shape("state and measurement dims differ"));
    }
    if mask.n_views() != y.rows() {
        return Err(Error::shape(format!(
            "view mask has {} views, sinogram {}",
            mask.n_views(),
            y.rows()
        )));
    }
    let source = match x_hat.channels() {
        2 => y.clone(),
        6 => {
            let vm = vmask.ok_or_else(|| {
                Error::argument("6-channel data consistency needs the step's virtual mask")
            })?;
            vct(y, vm)?
        }
        other => {
            return Err(Error::shape(format!(
                "data consistency expects 2 or 6 channels, got {other}"
            )))
        }
    };
    let mut out = x_hat.clone();
    for c in 0..out.channels() {
        for v in 0..out.rows() {
            if mask.is_kept(v) {
                out.row_mut(c, v).copy_from_slice(source.row(c, v));
            }
        }
    }
    Ok(out)
}
