//! Fan-beam geometry, Siddon forward projection, its exact adjoint, ramp-filtered
//! backprojection (FBP), and the view-subsampling operator.
//!
//! The scanner is a flat equispaced detector rotating with the source over a
//! full 360-degree range. The image is a square pixel grid centered on the
//! rotation axis; `forward_project` computes exact ray/pixel intersection
//! lengths (Siddon), `back_project` scatters with the same weights so the pair
//! passes an adjoint dot-test to float precision, and `fbp` implements the
//! standard flat-detector fan-beam reconstruction: cosine pre-weighting,
//! band-limited ramp (Ram-Lak) filtering via zero-padded FFT convolution, and
//! distance-weighted backprojection masked to the reconstruction circle.

use rustfft::{num_complex::Complex64, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorFile, TensorKind};

/// Fan-beam acquisition geometry. Distances in cm, angles uniform over 360°.
#[derive(Debug, Clone, PartialEq)]
pub struct FanGeometry {
    pub n_views: usize,
    pub n_detectors: usize,
    /// Source to rotation center distance (SOD).
    pub src_to_center: f64,
    /// Detector center to rotation center distance.
    pub det_to_center: f64,
    /// Total flat-detector width.
    pub detector_width: f64,
    /// Image is `image_size x image_size` pixels.
    pub image_size: usize,
    /// Pixel edge length.
    pub pixel_size: f64,
}

impl FanGeometry {
    /// Desk-scale default: 64x64 image, 180 views, 128 detector bins, and the
    /// 40 cm / 41.3 cm source-detector layout.
    pub fn desk_default() -> Self {
        FanGeometry {
            n_views: 180,
            n_detectors: 128,
            src_to_center: 40.0,
            det_to_center: 40.0,
            detector_width: 41.3,
            image_size: 64,
            pixel_size: 0.3,
        }
    }

    /// Full-scale layout: 512x512 image, 720 views, 720 detector bins.
    pub fn full_scale() -> Self {
        FanGeometry {
            n_views: 720,
            n_detectors: 720,
            src_to_center: 40.0,
            det_to_center: 40.0,
            detector_width: 41.3,
            image_size: 512,
            pixel_size: 0.039,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_views < 1 {
            return Err(Error::geometry("n_views must be >= 1"));
        }
        if self.n_detectors < 1 {
            return Err(Error::geometry("n_detectors must be >= 1"));
        }
        if self.src_to_center <= 0.0
            || self.det_to_center <= 0.0
            || self.detector_width <= 0.0
            || self.pixel_size <= 0.0
        {
            return Err(Error::geometry("distances must be strictly positive"));
        }
        if self.image_size == 0 {
            return Err(Error::geometry("image_size must be >= 1"));
        }
        let covered = self.covered_radius();
        let needed = self.fov_radius();
        if covered + 1e-9 < needed {
            return Err(Error::geometry(format!(
                "fan covers radius {covered:.4} but the reconstruction circle has radius {needed:.4}"
            )));
        }
        Ok(())
    }

    pub fn sdd(&self) -> f64 {
        self.src_to_center + self.det_to_center
    }

    pub fn bin_width(&self) -> f64 {
        self.detector_width / self.n_detectors as f64
    }

    /// Radius of the reconstruction circle (inscribed in the image square).
    pub fn fov_radius(&self) -> f64 {
        0.5 * self.image_size as f64 * self.pixel_size
    }

    /// Radius of the circle around the rotation center seen by every fan.
    pub fn covered_radius(&self) -> f64 {
        let hw = 0.5 * self.detector_width;
        self.src_to_center * hw / (self.sdd().hypot(hw))
    }

    #[inline]
    pub fn view_angle(&self, v: usize) -> f64 {
        2.0 * std::f64::consts::PI * v as f64 / self.n_views as f64
    }

    /// Signed offset of a detector bin center along the detector axis.
    #[inline]
    pub fn det_offset(&self, k: usize) -> f64 {
        (k as f64 + 0.5 - 0.5 * self.n_detectors as f64) * self.bin_width()
    }

    /// Source position and detector-bin-center position for one ray.
    fn ray_endpoints(&self, view: usize, det: usize) -> ([f64; 2], [f64; 2]) {
        let beta = self.view_angle(view);
        let (sin_b, cos_b) = beta.sin_cos();
        let src = [self.src_to_center * cos_b, self.src_to_center * sin_b];
        let u = self.det_offset(det);
        let dst = [
            -self.det_to_center * cos_b - u * sin_b,
            -self.det_to_center * sin_b + u * cos_b,
        ];
        (src, dst)
    }
}

/// Walks one ray across the pixel grid, yielding `(flat_pixel_index, length)`
/// for every intersected pixel. Exact Siddon intersection lengths.
fn trace_ray(geom: &FanGeometry, view: usize, det: usize, mut emit: impl FnMut(usize, f64)) {
    let n = geom.image_size;
    let p = geom.pixel_size;
    let half = 0.5 * n as f64 * p;
    let (src, dst) = geom.ray_endpoints(view, det);
    let d = [dst[0] - src[0], dst[1] - src[1]];
    let len = d[0].hypot(d[1]);
    if len == 0.0 {
        return;
    }

    // Entry/exit parameters of the segment against the grid bounding box.
    let mut t0 = 0.0f64;
    let mut t1 = 1.0f64;
    for axis in 0..2 {
        if d[axis].abs() < 1e-300 {
            if src[axis].abs() > half {
                return;
            }
        } else {
            let ta = (-half - src[axis]) / d[axis];
            let tb = (half - src[axis]) / d[axis];
            t0 = t0.max(ta.min(tb));
            t1 = t1.min(ta.max(tb));
        }
    }
    if t0 >= t1 {
        return;
    }

    // Crossing parameters for the next x and y grid planes.
    let step_t = [
        if d[0] != 0.0 { p / d[0].abs() } else { f64::INFINITY },
        if d[1] != 0.0 { p / d[1].abs() } else { f64::INFINITY },
    ];
    let mut next_t = [f64::INFINITY; 2];
    for axis in 0..2 {
        if d[axis] != 0.0 {
            let pos = src[axis] + t0 * d[axis];
            let cell = ((pos + half) / p).floor();
            let boundary = if d[axis] > 0.0 { cell + 1.0 } else { cell };
            next_t[axis] = (boundary * p - half - src[axis]) / d[axis];
            if next_t[axis] <= t0 {
                next_t[axis] += step_t[axis];
            }
        }
    }

    let mut t = t0;
    while t < t1 - 1e-12 {
        let t_next = next_t[0].min(next_t[1]).min(t1);
        let seg = (t_next - t) * len;
        if seg > 0.0 {
            let mid = 0.5 * (t + t_next);
            let x = src[0] + mid * d[0];
            let y = src[1] + mid * d[1];
            let col = ((x + half) / p).floor();
            let row = ((half - y) / p).floor();
            if col >= 0.0 && col < n as f64 && row >= 0.0 && row < n as f64 {
                emit(row as usize * n + col as usize, seg);
            }
        }
        if next_t[0] <= next_t[1] {
            next_t[0] += step_t[0];
        } else {
            next_t[1] += step_t[1];
        }
        t = t_next;
    }
}

/// Siddon forward projection `X = A I`; channels are projected independently.
pub fn forward_project(image: &Tensor, geom: &FanGeometry) -> Result<Tensor> {
    geom.validate()?;
    if image.rows() != image.cols() {
        return Err(Error::shape(format!(
            "image must be square, got {}x{}",
            image.rows(),
            image.cols()
        )));
    }
    if image.rows() != geom.image_size {
        return Err(Error::shape(format!(
            "image size {} does not match geometry image_size {}",
            image.rows(),
            geom.image_size
        )));
    }
    let ch = image.channels();
    let mut out = Tensor::zeros(TensorKind::Sinogram, ch, geom.n_views, geom.n_detectors);
    let mut acc = vec![0.0f64; ch];
    for v in 0..geom.n_views {
        for k in 0..geom.n_detectors {
            acc.iter_mut().for_each(|a| *a = 0.0);
            trace_ray(geom, v, k, |pix, len| {
                for (c, a) in acc.iter_mut().enumerate() {
                    *a += len * image.channel(c)[pix] as f64;
                }
            });
            for (c, a) in acc.iter().enumerate() {
                out.set(c, v, k, *a as f32);
            }
        }
    }
    Ok(out)
}

/// Unfiltered backprojection, the exact adjoint of [`forward_project`].
pub fn back_project(sino: &Tensor, geom: &FanGeometry) -> Result<Tensor> {
    geom.validate()?;
    if sino.rows() != geom.n_views || sino.cols() != geom.n_detectors {
        return Err(Error::shape(format!(
            "sinogram {}x{} does not match geometry {}x{}",
            sino.rows(),
            sino.cols(),
            geom.n_views,
            geom.n_detectors
        )));
    }
    let ch = sino.channels();
    let n = geom.image_size;
    let mut acc = vec![0.0f64; ch * n * n];
    for v in 0..geom.n_views {
        for k in 0..geom.n_detectors {
            trace_ray(geom, v, k, |pix, len| {
                for c in 0..ch {
                    acc[c * n * n + pix] += len * sino.at(c, v, k) as f64;
                }
            });
        }
    }
    let mut out = Tensor::zeros(TensorKind::Image, ch, n, n);
    for (o, a) in out.data_mut().iter_mut().zip(&acc) {
        *o = *a as f32;
    }
    Ok(out)
}

/// Band-limited Ram-Lak kernel sampled at spacing `tau`, length `2*half+1`.
fn ramp_kernel(half: usize, tau: f64) -> Vec<f64> {
    let mut h = vec![0.0f64; 2 * half + 1];
    for (i, v) in h.iter_mut().enumerate() {
        let n = i as isize - half as isize;
        if n == 0 {
            *v = 1.0 / (4.0 * tau * tau);
        } else if n % 2 != 0 {
            let nn = n as f64;
            *v = -1.0 / (std::f64::consts::PI * std::f64::consts::PI * nn * nn * tau * tau);
        }
    }
    h
}

/// Ramp-filtered fan-beam backprojection. Deterministic, per-channel.
///
/// Missing (zeroed) views simply contribute nothing; the caller masks views
/// with [`subsample_views`] / [`ViewMask::apply`]. Output pixels outside the
/// reconstruction circle are zeroed since the fan never covers them.
pub fn fbp(sino: &Tensor, geom: &FanGeometry) -> Result<Tensor> {
    geom.validate()?;
    if geom.n_detectors < 2 {
        return Err(Error::geometry("fbp needs at least 2 detector bins"));
    }
    if sino.rows() != geom.n_views || sino.cols() != geom.n_detectors {
        return Err(Error::shape(format!(
            "sinogram {}x{} does not match geometry {}x{}",
            sino.rows(),
            sino.cols(),
            geom.n_views,
            geom.n_detectors
        )));
    }
    let ch = sino.channels();
    let nd = geom.n_detectors;
    let nv = geom.n_views;
    let sod = geom.src_to_center;

    // Rescale the physical detector to a virtual detector through the origin.
    let scale = sod / geom.sdd();
    let tau = geom.bin_width() * scale;
    let s_pos: Vec<f64> = (0..nd).map(|k| geom.det_offset(k) * scale).collect();

    // FFT-based zero-padded convolution with the ramp kernel.
    let kernel = ramp_kernel(nd - 1, tau);
    let conv_len = nd + kernel.len() - 1;
    let fft_len = conv_len.next_power_of_two();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(fft_len);
    let inv = planner.plan_fft_inverse(fft_len);
    let mut kernel_f: Vec<Complex64> = kernel
        .iter()
        .map(|&v| Complex64::new(v, 0.0))
        .chain(std::iter::repeat(Complex64::new(0.0, 0.0)))
        .take(fft_len)
        .collect();
    fwd.process(&mut kernel_f);

    let cos_w: Vec<f64> = s_pos.iter().map(|&s| sod / (sod.hypot(s))).collect();

    // Filter all rows; q[c][v][k] on the virtual detector grid.
    let mut filtered = vec![0.0f64; ch * nv * nd];
    let mut buf = vec![Complex64::new(0.0, 0.0); fft_len];
    for c in 0..ch {
        for v in 0..nv {
            let row = sino.row(c, v);
            for x in buf.iter_mut() {
                *x = Complex64::new(0.0, 0.0);
            }
            for (k, x) in row.iter().enumerate() {
                buf[k] = Complex64::new(*x as f64 * cos_w[k], 0.0);
            }
            fwd.process(&mut buf);
            for (x, kf) in buf.iter_mut().zip(&kernel_f) {
                *x *= kf;
            }
            inv.process(&mut buf);
            let off = nd - 1; // center of the linear convolution
            let inv_n = 1.0 / fft_len as f64;
            for k in 0..nd {
                filtered[(c * nv + v) * nd + k] = buf[off + k].re * inv_n * tau;
            }
        }
    }

    // Distance-weighted backprojection over the full 360° range; the factor
    // 1/2 accounts for every line being measured twice over 2π.
    let n = geom.image_size;
    let p = geom.pixel_size;
    let d_beta = 2.0 * std::f64::consts::PI / nv as f64;
    let norm = 0.5 * d_beta;
    let fov2 = geom.fov_radius() * geom.fov_radius();
    let s0 = s_pos[0];
    let inv_tau = 1.0 / tau;
    let mut out = Tensor::zeros(TensorKind::Image, ch, n, n);

    let mut trig = Vec::with_capacity(nv);
    for v in 0..nv {
        let (sin_b, cos_b) = geom.view_angle(v).sin_cos();
        trig.push((sin_b, cos_b));
    }

    for c in 0..ch {
        for r in 0..n {
            let y = (0.5 * n as f64 - r as f64 - 0.5) * p;
            for col in 0..n {
                let x = (col as f64 + 0.5 - 0.5 * n as f64) * p;
                if x * x + y * y > fov2 {
                    continue;
                }
                let mut acc = 0.0f64;
                for (v, &(sin_b, cos_b)) in trig.iter().enumerate() {
                    let proj_a = x * cos_b + y * sin_b; // P . a
                    let pe = -x * sin_b + y * cos_b; // P . e
                    let denom = sod - proj_a;
                    let u_w = denom / sod;
                    let s = sod * pe / denom;
                    let pos = (s - s0) * inv_tau;
                    if pos < 0.0 || pos > (nd - 1) as f64 {
                        continue;
                    }
                    let k0 = pos.floor() as usize;
                    let k1 = (k0 + 1).min(nd - 1);
                    let frac = pos - k0 as f64;
                    let base = (c * nv + v) * nd;
                    let q = filtered[base + k0] * (1.0 - frac) + filtered[base + k1] * frac;
                    acc += q / (u_w * u_w);
                }
                out.set(c, r, col, (acc * norm) as f32);
            }
        }
    }
    Ok(out)
}

/// Which views of a sinogram were acquired. At least one view is always kept.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewMask {
    kept: Vec<bool>,
}

impl ViewMask {
    pub fn from_flags(kept: Vec<bool>) -> Result<Self> {
        if kept.is_empty() || !kept.iter().any(|&k| k) {
            return Err(Error::argument("view mask must keep at least one view"));
        }
        Ok(ViewMask { kept })
    }

    pub fn full(n_views: usize) -> Self {
        ViewMask { kept: vec![true; n_views] }
    }

    pub fn n_views(&self) -> usize {
        self.kept.len()
    }

    pub fn n_kept(&self) -> usize {
        self.kept.iter().filter(|&&k| k).count()
    }

    #[inline]
    pub fn is_kept(&self, v: usize) -> bool {
        self.kept[v]
    }

    pub fn kept_indices(&self) -> Vec<usize> {
        (0..self.kept.len()).filter(|&v| self.kept[v]).collect()
    }

    /// Zeroes the rows of every channel whose view was not kept.
    pub fn apply(&self, sino: &Tensor) -> Result<Tensor> {
        if sino.rows() != self.kept.len() {
            return Err(Error::shape(format!(
                "sinogram has {} views, mask has {}",
                sino.rows(),
                self.kept.len()
            )));
        }
        let mut out = sino.clone();
        for c in 0..out.channels() {
            for v in 0..out.rows() {
                if !self.kept[v] {
                    out.row_mut(c, v).fill(0.0);
                }
            }
        }
        Ok(out)
    }

    /// Serializes as a rank-1 kind=2 VIPT file of 0.0/1.0 flags.
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        TensorFile {
            kind: TensorKind::Mask,
            dims: vec![self.kept.len() as u32],
            payload: self.kept.iter().map(|&k| k as u8 as f32).collect(),
        }
        .write(path.as_ref())
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let f = TensorFile::read(path.as_ref())?;
        if f.dims.len() != 1 {
            return Err(Error::format(format!(
                "view mask must be rank 1, file has rank {}",
                f.dims.len()
            )));
        }
        ViewMask::from_flags(f.payload.iter().map(|&v| v != 0.0).collect())
    }
}

/// Keeps `n_keep` evenly spaced views (indices `round(i * n_views / n_keep)`),
/// zeroing the rest, and returns the zeroed sinogram together with the mask.
pub fn subsample_views(sino: &Tensor, n_keep: usize) -> Result<(Tensor, ViewMask)> {
    let n_views = sino.rows();
    if n_keep < 1 || n_keep > n_views {
        return Err(Error::argument(format!(
            "n_keep {n_keep} out of range 1..={n_views}"
        )));
    }
    let mut kept = vec![false; n_views];
    for i in 0..n_keep {
        let idx = ((i as f64 * n_views as f64 / n_keep as f64).round() as usize).min(n_views - 1);
        kept[idx] = true;
    }
    let mask = ViewMask::from_flags(kept)?;
    let masked = mask.apply(sino)?;
    Ok((masked, mask))
}
