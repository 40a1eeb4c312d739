//! Dual-domain iterative reconstruction.
//!
//! Sweeping the noise levels from high to low, each iteration runs a
//! projection-domain update (cross-energy stack, predictor, corrector,
//! measurement consistency, inverse stack) followed by a wavelet-domain sweep
//! over the three high-frequency bands, each perturbed with its own virtual
//! mask. Low-frequency bands pass through untouched. The loop ends with a
//! final measurement-consistency projection and a filtered backprojection.
//!
//! Score models come either from trained network weights or from the analytic
//! mixture oracle; the oracle's references are plain 2-channel sinograms that
//! the loop transports through the same cross-energy stack (and wavelet
//! decomposition) as the state, so the whole sampling machinery is exercised
//! identically either way.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffusion::{
    corrector_step, data_consistency, draw_noise_like, predictor_step, SamplerConfig, VESchedule,
};
use crate::error::{Error, Result};
use crate::metrics::evaluate;
use crate::projector::{fbp, FanGeometry, ViewMask};
use crate::scorenet::{analytic_score, score_eval, ScoreNetParams};
use crate::tensor::{stack_channels, Tensor};
use crate::vct::{ivct, vct, VirtualMask};
use crate::wavelet::{dwt2, dwt2_per_energy, idwt2, HighBand, WaveletBands};

/// Which parts of the dual-domain loop run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReconMode {
    /// Projection and wavelet updates with cross-energy stacking.
    Full,
    /// Projection updates only (with cross-energy stacking).
    PpmOnly,
    /// Wavelet updates only (with cross-energy stacking).
    WpmOnly,
    /// Plain 2-channel projection-domain diffusion, no cross-energy stack.
    Baseline,
}

impl ReconMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(ReconMode::Full),
            "ppm" | "ppm_only" => Ok(ReconMode::PpmOnly),
            "wpm" | "wpm_only" => Ok(ReconMode::WpmOnly),
            "baseline" => Ok(ReconMode::Baseline),
            other => Err(Error::argument(format!("unknown recon mode '{other}'"))),
        }
    }

    fn uses_projection(self) -> bool {
        !matches!(self, ReconMode::WpmOnly)
    }

    fn uses_wavelet(self) -> bool {
        matches!(self, ReconMode::Full | ReconMode::WpmOnly)
    }

    fn uses_vct(self) -> bool {
        !matches!(self, ReconMode::Baseline)
    }
}

/// A score model for one domain.
#[derive(Clone)]
pub enum ScoreSource<'a> {
    Network(&'a ScoreNetParams),
    /// References in the plain 2-channel domain (full sinograms); the loop
    /// maps them through the state's current transform before evaluating the
    /// Gaussian-mixture score.
    AnalyticOracle(&'a [Tensor]),
}

#[derive(Debug, Clone)]
pub struct ReconConfig {
    pub mode: ReconMode,
    pub schedule: VESchedule,
    pub sampler: SamplerConfig,
    pub zeta: f64,
    pub geometry: FanGeometry,
}

impl ReconConfig {
    pub fn desk_default(mode: ReconMode) -> Self {
        let sampler = SamplerConfig::default();
        ReconConfig {
            mode,
            schedule: VESchedule::default_with_steps(sampler.n_steps),
            sampler,
            zeta: 2.81,
            geometry: FanGeometry::desk_default(),
        }
    }
}

/// Per-level bookkeeping; quality metrics are filled in when a reference
/// image is supplied.
#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub level: usize,
    pub sigma: f64,
    pub proj_updates: usize,
    pub band_updates: usize,
    pub psnr_db: Option<Vec<f64>>,
    pub ssim: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct ReconOutput {
    /// FBP of the completed sinogram.
    pub image: Tensor,
    /// The completed (pre-FBP) sinogram; kept view rows equal the
    /// measurements bit-exactly.
    pub sinogram: Tensor,
    pub trace: Vec<TraceEntry>,
}

/// Starting state: measured rows copied from `y`, missing rows filled with
/// `sigma_max`-scaled Gaussian noise. Draw order is channel-major over
/// missing rows.
pub fn initialize_state(
    y: &Tensor,
    mask: &ViewMask,
    sigma_max: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    if mask.n_views() != y.rows() {
        return Err(Error::shape(format!(
            "mask has {} views, sinogram {}",
            mask.n_views(),
            y.rows()
        )));
    }
    let mut x = y.clone();
    let noise = draw_noise_like(y, rng);
    for c in 0..x.channels() {
        for v in 0..x.rows() {
            if !mask.is_kept(v) {
                let cols = x.cols();
                let row = x.row_mut(c, v);
                let nrow = &noise.row(c, v)[..cols];
                for (o, n) in row.iter_mut().zip(nrow) {
                    *o = (*n as f64 * sigma_max) as f32;
                }
            }
        }
    }
    Ok(x)
}

/// Oracle references carried in every representation the loop needs.
struct OracleRefs {
    /// Plain 2-channel sinograms.
    proj: Vec<Tensor>,
    /// Per high band, the 2-channel [H, L] band tensors of each reference.
    bands: [Vec<Tensor>; 3],
}

fn band_index(b: HighBand) -> usize {
    match b {
        HighBand::Lh => 0,
        HighBand::Hl => 1,
        HighBand::Hh => 2,
    }
}

impl OracleRefs {
    fn build(refs: &[Tensor]) -> Result<Self> {
        let mut bands: [Vec<Tensor>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for r in refs {
            let (bh, bl) = dwt2_per_energy(r)?;
            for b in HighBand::ALL {
                bands[band_index(b)]
                    .push(stack_channels(&[bh.band(b).clone(), bl.band(b).clone()])?);
            }
        }
        Ok(OracleRefs { proj: refs.to_vec(), bands })
    }
}

enum DomainScore<'a> {
    Net(&'a ScoreNetParams),
    /// References already mapped into the state's representation.
    Mixture(Vec<Tensor>),
}

impl DomainScore<'_> {
    fn eval(&self, x: &Tensor, sigma: f64) -> Result<Tensor> {
        match self {
            DomainScore::Net(p) => score_eval(p, x, sigma),
            DomainScore::Mixture(refs) => analytic_score(refs, x, sigma),
        }
    }
}

fn check_network_channels(source: &ScoreSource, want: usize, what: &str) -> Result<()> {
    if let ScoreSource::Network(p) = source {
        if p.c_in() != want {
            return Err(Error::argument(format!(
                "{what} network has {} input channels, mode needs {want}",
                p.c_in()
            )));
        }
    }
    Ok(())
}

/// Builds the domain score for the current step: network weights pass
/// through; oracle references get the same transform as the state.
fn projection_score<'a>(
    source: &'a ScoreSource,
    oracle: &Option<OracleRefs>,
    vmask: Option<&VirtualMask>,
) -> Result<DomainScore<'a>> {
    match source {
        ScoreSource::Network(p) => Ok(DomainScore::Net(p)),
        ScoreSource::AnalyticOracle(_) => {
            let refs = &oracle.as_ref().expect("oracle refs built").proj;
            let mapped = match vmask {
                Some(m) => refs.iter().map(|r| vct(r, m)).collect::<Result<Vec<_>>>()?,
                None => refs.clone(),
            };
            Ok(DomainScore::Mixture(mapped))
        }
    }
}

fn band_score<'a>(
    source: &'a ScoreSource,
    oracle: &Option<OracleRefs>,
    band: HighBand,
    vmask: &VirtualMask,
) -> Result<DomainScore<'a>> {
    match source {
        ScoreSource::Network(p) => Ok(DomainScore::Net(p)),
        ScoreSource::AnalyticOracle(_) => {
            let refs = &oracle.as_ref().expect("oracle refs built").bands[band_index(band)];
            let mapped = refs.iter().map(|r| vct(r, vmask)).collect::<Result<Vec<_>>>()?;
            Ok(DomainScore::Mixture(mapped))
        }
    }
}

/// Eq.-27-style consistency for one perturbed band tensor: each of the three
/// channel-pair groups is expressed as plain [H, L] band content, re-assembled
/// with the other current bands, taken back to the projection domain, row-wise
/// constrained against the measurements, and re-decomposed.
#[allow(clippy::too_many_arguments)]
fn band_data_consistency(
    x6: &Tensor,
    band: HighBand,
    bands_h: &WaveletBands,
    bands_l: &WaveletBands,
    y: &Tensor,
    view_mask: &ViewMask,
    vmask: &VirtualMask,
) -> Result<Tensor> {
    let n = x6.rows() * x6.cols();
    let mask = vmask.entries();
    let mut out = x6.clone();

    // (channel pair, how the pair encodes [H, L])
    enum Enc {
        Direct,
        Selected,
        Swapped,
    }
    let groups = [(0usize, 1usize, Enc::Direct), (2, 5, Enc::Selected), (3, 4, Enc::Swapped)];

    for (ca, cb, enc) in groups {
        // decode the pair to [H, L] band content
        let (pa, pb) = (x6.channel(ca), x6.channel(cb));
        let mut h = vec![0.0f32; n];
        let mut l = vec![0.0f32; n];
        for i in 0..n {
            match enc {
                Enc::Direct => {
                    h[i] = pa[i];
                    l[i] = pb[i];
                }
                Enc::Selected => {
                    // pa = HL, pb = LH
                    if mask[i] == 1 {
                        h[i] = pa[i];
                        l[i] = pb[i];
                    } else {
                        h[i] = pb[i];
                        l[i] = pa[i];
                    }
                }
                Enc::Swapped => {
                    h[i] = pb[i];
                    l[i] = pa[i];
                }
            }
        }
        // substitute as the current band, go to projection domain, constrain
        let mut bh = bands_h.clone();
        let mut bl = bands_l.clone();
        *bh.band_mut(band) =
            Tensor::from_vec(x6.kind(), 1, x6.rows(), x6.cols(), h).expect("band dims");
        *bl.band_mut(band) =
            Tensor::from_vec(x6.kind(), 1, x6.rows(), x6.cols(), l).expect("band dims");
        let sino = stack_channels(&[idwt2(&bh)?, idwt2(&bl)?])?;
        let constrained = data_consistency(&sino, y, view_mask, None)?;
        let (nh, nl) = dwt2_per_energy(&constrained)?;
        let hb = nh.band(band);
        let lb = nl.band(band);
        // re-encode into the pair
        let (mut ea, mut eb) = (vec![0.0f32; n], vec![0.0f32; n]);
        for i in 0..n {
            let (hv, lv) = (hb.data()[i], lb.data()[i]);
            match enc {
                Enc::Direct => {
                    ea[i] = hv;
                    eb[i] = lv;
                }
                Enc::Selected => {
                    if mask[i] == 1 {
                        ea[i] = hv;
                        eb[i] = lv;
                    } else {
                        ea[i] = lv;
                        eb[i] = hv;
                    }
                }
                Enc::Swapped => {
                    ea[i] = lv;
                    eb[i] = hv;
                }
            }
        }
        out.channel_mut(ca).copy_from_slice(&ea);
        out.channel_mut(cb).copy_from_slice(&eb);
    }
    Ok(out)
}

/// Runs the dual-domain reconstruction. `reference` (the evaluation reference
/// image) enables per-level quality entries in the trace.
pub fn reconstruct(
    y: &Tensor,
    mask: &ViewMask,
    ppm: Option<&ScoreSource>,
    wpm: Option<&ScoreSource>,
    cfg: &ReconConfig,
    reference: Option<&Tensor>,
) -> Result<ReconOutput> {
    cfg.sampler.validate()?;
    cfg.geometry.validate()?;
    if y.channels() != 2 {
        return Err(Error::shape(format!(
            "measurement must have 2 channels, got {}",
            y.channels()
        )));
    }
    if y.rows() != cfg.geometry.n_views || y.cols() != cfg.geometry.n_detectors {
        return Err(Error::shape(format!(
            "measurement {}x{} does not match geometry {}x{}",
            y.rows(),
            y.cols(),
            cfg.geometry.n_views,
            cfg.geometry.n_detectors
        )));
    }
    let proj_channels = if cfg.mode.uses_vct() { 6 } else { 2 };
    let ppm = if cfg.mode.uses_projection() {
        let source = ppm.ok_or_else(|| {
            Error::argument("this mode needs a projection-domain score model")
        })?;
        check_network_channels(source, proj_channels, "projection")?;
        Some(source)
    } else {
        None
    };
    let wpm = if cfg.mode.uses_wavelet() {
        let source =
            wpm.ok_or_else(|| Error::argument("this mode needs a wavelet-domain score model"))?;
        check_network_channels(source, 6, "wavelet")?;
        Some(source)
    } else {
        None
    };

    // oracle references, pre-decomposed once
    let mut oracle_proj: Option<OracleRefs> = None;
    if let Some(ScoreSource::AnalyticOracle(refs)) = ppm {
        if refs.is_empty() {
            return Err(Error::argument("oracle needs at least one reference"));
        }
        oracle_proj = Some(OracleRefs::build(refs)?);
    }
    let mut oracle_wav: Option<OracleRefs> = None;
    if let Some(ScoreSource::AnalyticOracle(refs)) = wpm {
        if refs.is_empty() {
            return Err(Error::argument("oracle needs at least one reference"));
        }
        oracle_wav = Some(OracleRefs::build(refs)?);
    }

    let y = mask.apply(y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.seed);
    let mut x_p = initialize_state(&y, mask, cfg.schedule.sigma_max(), &mut rng)?;
    let y_norm = y.norm().max(1e-9);
    let n_levels = cfg.schedule.n_steps();
    let mut trace = Vec::with_capacity(n_levels - 1);

    for i in (1..n_levels).rev() {
        let mut proj_updates = 0usize;
        let mut band_updates = 0usize;

        if let Some(source) = ppm {
            if cfg.mode.uses_vct() {
                let vmask =
                    VirtualMask::generate(x_p.rows(), x_p.cols(), cfg.zeta, &mut rng)?;
                let score = projection_score(source, &oracle_proj, Some(&vmask))?;
                let mut state = vct(&x_p, &vmask)?;
                state = predictor_step(&state, i, &cfg.schedule, |x, s| {
                    score.eval(x, s).expect("score eval")
                }, &mut rng)?;
                for _ in 0..cfg.sampler.corrector_steps_per_level {
                    let (next, _) = corrector_step(&state, i - 1, &cfg.schedule, |x, s| {
                        score.eval(x, s).expect("score eval")
                    }, cfg.sampler.snr, &mut rng)?;
                    state = next;
                }
                state = data_consistency(&state, &y, mask, Some(&vmask))?;
                x_p = ivct(&state, &vmask)?;
            } else {
                let score = projection_score(source, &oracle_proj, None)?;
                let mut state = predictor_step(&x_p, i, &cfg.schedule, |x, s| {
                    score.eval(x, s).expect("score eval")
                }, &mut rng)?;
                for _ in 0..cfg.sampler.corrector_steps_per_level {
                    let (next, _) = corrector_step(&state, i - 1, &cfg.schedule, |x, s| {
                        score.eval(x, s).expect("score eval")
                    }, cfg.sampler.snr, &mut rng)?;
                    state = next;
                }
                x_p = data_consistency(&state, &y, mask, None)?;
            }
            proj_updates = 1;
        }

        if let Some(source) = wpm {
            let (mut bands_h, mut bands_l) = dwt2_per_energy(&x_p)?;
            for band in HighBand::ALL {
                let band2 = stack_channels(&[
                    bands_h.band(band).clone(),
                    bands_l.band(band).clone(),
                ])?;
                let vmask =
                    VirtualMask::generate(band2.rows(), band2.cols(), cfg.zeta, &mut rng)?;
                let score = band_score(source, &oracle_wav, band, &vmask)?;
                let mut state = vct(&band2, &vmask)?;
                state = predictor_step(&state, i, &cfg.schedule, |x, s| {
                    score.eval(x, s).expect("score eval")
                }, &mut rng)?;
                for _ in 0..cfg.sampler.corrector_steps_per_level {
                    let (next, _) = corrector_step(&state, i - 1, &cfg.schedule, |x, s| {
                        score.eval(x, s).expect("score eval")
                    }, cfg.sampler.snr, &mut rng)?;
                    state = next;
                }
                state =
                    band_data_consistency(&state, band, &bands_h, &bands_l, &y, mask, &vmask)?;
                let updated = ivct(&state, &vmask)?;
                *bands_h.band_mut(band) = crate::tensor::slice_channels(&updated, 0..1)?;
                *bands_l.band_mut(band) = crate::tensor::slice_channels(&updated, 1..2)?;
                band_updates += 1;
            }
            let reassembled = stack_channels(&[idwt2(&bands_h)?, idwt2(&bands_l)?])?;
            x_p = data_consistency(&reassembled, &y, mask, None)?;
        }

        if x_p.norm() > 1e3 * y_norm {
            return Err(Error::Divergence(format!(
                "state norm {:.3e} exceeded 1e3 x measurement norm at level {i}",
                x_p.norm()
            )));
        }

        let (psnr_db, ssim) = match reference {
            Some(r) => {
                let snap = fbp(&x_p, &cfg.geometry)?;
                let rep = evaluate(&snap, r)?;
                (Some(rep.psnr_db), Some(rep.ssim))
            }
            None => (None, None),
        };
        trace.push(TraceEntry {
            level: i,
            sigma: cfg.schedule.sigma_level(i),
            proj_updates,
            band_updates,
            psnr_db,
            ssim,
        });
    }

    // the last wavelet reassembly passes through float arithmetic, so pin the
    // measured rows one final time before inversion
    x_p = data_consistency(&x_p, &y, mask, None)?;
    let image = fbp(&x_p, &cfg.geometry)?;
    Ok(ReconOutput { image, sinogram: x_p, trace })
}
