//! Synthetic dual-energy phantoms: random ellipse material maps and the
//! polychromatic Beer-Lambert spectral model that turns them into H/L
//! attenuation images.
//!
//! The spectral model evaluates, per pixel and per energy channel j,
//!
//! ```text
//! x_j = -ln( sum_E S_j(E) * exp( -sum_k eps_k * tau_k(E) ) )
//! ```
//!
//! with a small discrete spectrum `S_j` and per-material attenuation tables
//! `tau_k`. The default two-bin spectra stand in for measured tube spectra:
//! peak bins at 50 keV (L-weighted) and 90 keV (H-weighted), with attenuation
//! chosen so the two output channels are strongly correlated.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorKind};

/// Material density maps: channel 0 is water-like, channel 1 bone-like.
#[derive(Debug, Clone)]
pub struct MaterialMap {
    densities: Tensor,
}

impl MaterialMap {
    pub fn new(densities: Tensor) -> Result<Self> {
        if densities.data().iter().any(|&v| v < 0.0) {
            return Err(Error::argument("material densities must be non-negative"));
        }
        Ok(MaterialMap { densities })
    }

    pub fn n_materials(&self) -> usize {
        self.densities.channels()
    }
    pub fn size(&self) -> usize {
        self.densities.rows()
    }
    pub fn densities(&self) -> &Tensor {
        &self.densities
    }
}

/// Discrete X-ray spectra and material attenuation tables.
#[derive(Debug, Clone)]
pub struct SpectrumModel {
    /// Energy bin labels in keV (informational).
    pub energies_kev: Vec<f64>,
    /// H-channel spectrum weights, normalized to sum 1.
    pub s_h: Vec<f64>,
    /// L-channel spectrum weights, normalized to sum 1.
    pub s_l: Vec<f64>,
    /// `tau[k][e]`: attenuation of material k at energy bin e.
    pub tau: Vec<Vec<f64>>,
}

impl SpectrumModel {
    /// Two-bin toy spectra: 50 keV (L-heavy) and 90 keV (H-heavy) with
    /// water-like and bone-like attenuation tables. The energy dependence is
    /// kept mild so the two channels share a comparable dynamic range.
    pub fn default_two_bin() -> Self {
        SpectrumModel {
            energies_kev: vec![50.0, 90.0],
            s_h: vec![0.2, 0.8],
            s_l: vec![0.8, 0.2],
            tau: vec![vec![0.20, 0.18], vec![0.34, 0.30]],
        }
    }

    pub fn validate(&self, n_materials: usize) -> Result<()> {
        let bins = self.energies_kev.len();
        if self.s_h.len() != bins || self.s_l.len() != bins {
            return Err(Error::argument("spectrum weight length != energy bin count"));
        }
        for s in [&self.s_h, &self.s_l] {
            if s.iter().any(|&v| v < 0.0) {
                return Err(Error::argument("spectrum weights must be non-negative"));
            }
            let sum: f64 = s.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::argument(format!(
                    "spectrum must be normalized to 1, sums to {sum}"
                )));
            }
        }
        if self.tau.len() != n_materials {
            return Err(Error::argument(format!(
                "need tau for {n_materials} materials, got {}",
                self.tau.len()
            )));
        }
        for t in &self.tau {
            if t.len() != bins {
                return Err(Error::argument("tau table length != energy bin count"));
            }
            if t.windows(2).any(|w| w[1] > w[0]) {
                return Err(Error::argument("tau must be non-increasing in energy"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    theta: f64,
    material: usize,
    density: f64,
}

impl Ellipse {
    /// Coverage fraction of the unit pixel at (x, y), 4x4 supersampled.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let (sin_t, cos_t) = self.theta.sin_cos();
        let mut hits = 0u32;
        for i in 0..4 {
            for j in 0..4 {
                let sx = x + (i as f64 + 0.5) / 4.0 - 0.5;
                let sy = y + (j as f64 + 0.5) / 4.0 - 0.5;
                let dx = sx - self.cx;
                let dy = sy - self.cy;
                let u = dx * cos_t + dy * sin_t;
                let v = -dx * sin_t + dy * cos_t;
                if (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0 {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    }
}

/// Random ellipse phantom: one big water-like body, one guaranteed bone-like
/// insert, and further random inserts of either material. Deterministic for a
/// given rng stream. All inserts stay well inside the reconstruction circle.
pub fn make_material_map(
    size: usize,
    n_ellipses: usize,
    rng: &mut impl RngCore,
) -> Result<MaterialMap> {
    if size < 16 {
        return Err(Error::argument(format!("phantom size must be >= 16, got {size}")));
    }
    if n_ellipses < 2 {
        return Err(Error::argument("need at least 2 ellipses (body + insert)"));
    }
    let half = size as f64 / 2.0;
    let mut ellipses = Vec::with_capacity(n_ellipses);
    ellipses.push(Ellipse {
        cx: half + rng.gen_range(-0.03..0.03) * half,
        cy: half + rng.gen_range(-0.03..0.03) * half,
        a: rng.gen_range(0.58..0.72) * half,
        b: rng.gen_range(0.58..0.72) * half,
        theta: rng.gen_range(0.0..std::f64::consts::PI),
        material: 0,
        density: rng.gen_range(0.9..1.1),
    });
    for i in 1..n_ellipses {
        let material = if i == 1 { 1 } else { usize::from(rng.gen_bool(0.4)) };
        let r_max = 0.45 * half;
        let cr = rng.gen_range(0.0..r_max);
        let ca = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
        ellipses.push(Ellipse {
            cx: half + cr * ca.cos(),
            cy: half + cr * ca.sin(),
            a: rng.gen_range(0.06..0.22) * half,
            b: rng.gen_range(0.06..0.22) * half,
            theta: rng.gen_range(0.0..std::f64::consts::PI),
            material,
            density: rng.gen_range(0.2..1.5),
        });
    }

    let mut densities = Tensor::zeros(TensorKind::Image, 2, size, size);
    for e in &ellipses {
        for r in 0..size {
            for c in 0..size {
                let frac = e.coverage(c as f64, r as f64) as f32;
                if frac > 0.0 {
                    let old = densities.at(e.material, r, c);
                    densities.set(e.material, r, c, frac * e.density as f32 + (1.0 - frac) * old);
                }
            }
        }
    }
    MaterialMap::new(densities)
}

/// Evaluates the polychromatic attenuation model per pixel for both energy
/// channels; output channel 0 is H, channel 1 is L.
pub fn spectral_image(map: &MaterialMap, spec: &SpectrumModel) -> Result<Tensor> {
    spec.validate(map.n_materials())?;
    let d = map.densities();
    let (rows, cols) = (d.rows(), d.cols());
    let bins = spec.energies_kev.len();
    let mut out = Tensor::zeros(TensorKind::Image, 2, rows, cols);
    for r in 0..rows {
        for c in 0..cols {
            let mut sum_h = 0.0f64;
            let mut sum_l = 0.0f64;
            for e in 0..bins {
                let mut a = 0.0f64;
                for k in 0..map.n_materials() {
                    a += d.at(k, r, c) as f64 * spec.tau[k][e];
                }
                let att = (-a).exp();
                sum_h += spec.s_h[e] * att;
                sum_l += spec.s_l[e] * att;
            }
            out.set(0, r, c, (-(sum_h.ln())) as f32);
            out.set(1, r, c, (-(sum_l.ln())) as f32);
        }
    }
    Ok(out)
}

/// Deterministic phantom suite: `count` two-channel spectral images of
/// `size x size` pixels, seeded per phantom from `base_seed`.
pub fn make_phantom_suite(count: usize, size: usize, base_seed: u64) -> Result<Vec<Tensor>> {
    let spec = SpectrumModel::default_two_bin();
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(base_seed.wrapping_add(i as u64));
            let n_ellipses = 4 + (i % 4);
            let map = make_material_map(size, n_ellipses, &mut rng)?;
            spectral_image(&map, &spec)
        })
        .collect()
}
