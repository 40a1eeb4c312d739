//! Single-level 2D orthonormal Haar transform for sinogram-domain tensors.
//!
//! `dwt2` splits each channel into the four half-resolution bands
//! `(ll, lh, hl, hh)`; `idwt2` is its exact inverse. Band naming: the first
//! letter is the filter applied along rows (views), the second along columns
//! (detectors). Odd spatial dims are edge-replicated to even length before the
//! transform; the pad flags travel with the bands so `idwt2` can crop back.

use rand::Rng;
use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::{slice_channels, stack_channels, Tensor};

const SQRT2_INV: f32 = std::f32::consts::FRAC_1_SQRT_2;

/// Identifies one of the three high-frequency bands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HighBand {
    Lh,
    Hl,
    Hh,
}

impl HighBand {
    pub const ALL: [HighBand; 3] = [HighBand::Lh, HighBand::Hl, HighBand::Hh];

    pub fn name(self) -> &'static str {
        match self {
            HighBand::Lh => "lh",
            HighBand::Hl => "hl",
            HighBand::Hh => "hh",
        }
    }
}

/// The four bands of one decomposition plus the padding bookkeeping.
#[derive(Debug, Clone)]
pub struct WaveletBands {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    orig_rows: usize,
    orig_cols: usize,
}

impl WaveletBands {
    pub fn band(&self, b: HighBand) -> &Tensor {
        match b {
            HighBand::Lh => &self.lh,
            HighBand::Hl => &self.hl,
            HighBand::Hh => &self.hh,
        }
    }

    pub fn band_mut(&mut self, b: HighBand) -> &mut Tensor {
        match b {
            HighBand::Lh => &mut self.lh,
            HighBand::Hl => &mut self.hl,
            HighBand::Hh => &mut self.hh,
        }
    }

    /// Sum of squared coefficients over all four bands.
    pub fn energy(&self) -> f64 {
        [&self.ll, &self.lh, &self.hl, &self.hh]
            .iter()
            .map(|t| t.data().iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>())
            .sum()
    }
}

fn pad_even(x: &Tensor) -> Tensor {
    let rows = x.rows() + x.rows() % 2;
    let cols = x.cols() + x.cols() % 2;
    if rows == x.rows() && cols == x.cols() {
        return x.clone();
    }
    let mut out = Tensor::zeros(x.kind(), x.channels(), rows, cols);
    for c in 0..x.channels() {
        for r in 0..rows {
            let src_r = r.min(x.rows() - 1);
            for k in 0..cols {
                let src_k = k.min(x.cols() - 1);
                out.set(c, r, k, x.at(c, src_r, src_k));
            }
        }
    }
    out
}

/// Single-level orthonormal Haar decomposition, per channel.
pub fn dwt2(x: &Tensor) -> Result<WaveletBands> {
    if x.is_empty() {
        return Err(Error::shape("dwt2 on empty tensor"));
    }
    let (orig_rows, orig_cols) = (x.rows(), x.cols());
    let p = pad_even(x);
    let (ch, rows, cols) = (p.channels(), p.rows(), p.cols());
    let (hr, hc) = (rows / 2, cols / 2);
    let mut ll = Tensor::zeros(p.kind(), ch, hr, hc);
    let mut lh = ll.zeros_like();
    let mut hl = ll.zeros_like();
    let mut hh = ll.zeros_like();
    for c in 0..ch {
        // rows pass: pairs of adjacent view rows -> (low, high)
        let mut low = vec![0.0f32; hr * cols];
        let mut high = vec![0.0f32; hr * cols];
        for r in 0..hr {
            let a = p.row(c, 2 * r);
            let b = p.row(c, 2 * r + 1);
            for k in 0..cols {
                low[r * cols + k] = (a[k] + b[k]) * SQRT2_INV;
                high[r * cols + k] = (a[k] - b[k]) * SQRT2_INV;
            }
        }
        // cols pass on each half
        for r in 0..hr {
            for k in 0..hc {
                let (l0, l1) = (low[r * cols + 2 * k], low[r * cols + 2 * k + 1]);
                let (h0, h1) = (high[r * cols + 2 * k], high[r * cols + 2 * k + 1]);
                ll.set(c, r, k, (l0 + l1) * SQRT2_INV);
                lh.set(c, r, k, (l0 - l1) * SQRT2_INV);
                hl.set(c, r, k, (h0 + h1) * SQRT2_INV);
                hh.set(c, r, k, (h0 - h1) * SQRT2_INV);
            }
        }
    }
    Ok(WaveletBands { ll, lh, hl, hh, orig_rows, orig_cols })
}

/// Exact inverse of [`dwt2`], including crop of any padding.
pub fn idwt2(bands: &WaveletBands) -> Result<Tensor> {
    let ll = &bands.ll;
    for t in [&bands.lh, &bands.hl, &bands.hh] {
        if !ll.same_shape(t) {
            return Err(Error::shape("wavelet bands have mismatched dims"));
        }
    }
    let (ch, hr, hc) = (ll.channels(), ll.rows(), ll.cols());
    let (rows, cols) = (2 * hr, 2 * hc);
    let mut out = Tensor::zeros(ll.kind(), ch, rows, cols);
    for c in 0..ch {
        let mut low = vec![0.0f32; hr * cols];
        let mut high = vec![0.0f32; hr * cols];
        for r in 0..hr {
            for k in 0..hc {
                let (a, d) = (bands.ll.at(c, r, k), bands.lh.at(c, r, k));
                low[r * cols + 2 * k] = (a + d) * SQRT2_INV;
                low[r * cols + 2 * k + 1] = (a - d) * SQRT2_INV;
                let (a, d) = (bands.hl.at(c, r, k), bands.hh.at(c, r, k));
                high[r * cols + 2 * k] = (a + d) * SQRT2_INV;
                high[r * cols + 2 * k + 1] = (a - d) * SQRT2_INV;
            }
        }
        for r in 0..hr {
            for k in 0..cols {
                let (l, h) = (low[r * cols + k], high[r * cols + k]);
                out.set(c, 2 * r, k, (l + h) * SQRT2_INV);
                out.set(c, 2 * r + 1, k, (l - h) * SQRT2_INV);
            }
        }
    }
    if bands.orig_rows == rows && bands.orig_cols == cols {
        return Ok(out);
    }
    let mut cropped = Tensor::zeros(out.kind(), ch, bands.orig_rows, bands.orig_cols);
    for c in 0..ch {
        for r in 0..bands.orig_rows {
            for k in 0..bands.orig_cols {
                cropped.set(c, r, k, out.at(c, r, k));
            }
        }
    }
    Ok(cropped)
}

/// Picks one high band uniformly at random and pairs the H and L channel of
/// that band into one 2-channel tensor.
///
/// `bands_h` and `bands_l` must come from matched decompositions (same dims).
pub fn select_random_highfreq(
    bands_h: &WaveletBands,
    bands_l: &WaveletBands,
    rng: &mut impl RngCore,
) -> Result<(HighBand, Tensor)> {
    if !bands_h.ll.same_shape(&bands_l.ll) {
        return Err(Error::shape("H and L band dims differ"));
    }
    let band = HighBand::ALL[rng.gen_range(0..3)];
    let x = stack_channels(&[bands_h.band(band).clone(), bands_l.band(band).clone()])?;
    Ok((band, x))
}

/// Convenience for 2-channel sinograms: decomposes channel 0 and 1 separately
/// and returns their band sets.
pub fn dwt2_per_energy(x2: &Tensor) -> Result<(WaveletBands, WaveletBands)> {
    if x2.channels() != 2 {
        return Err(Error::shape(format!(
            "expected a 2-channel tensor, got {}",
            x2.channels()
        )));
    }
    let h = slice_channels(x2, 0..1)?;
    let l = slice_channels(x2, 1..2)?;
    Ok((dwt2(&h)?, dwt2(&l)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(ch: usize, rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..ch * rows * cols).map(|_| rng.gen_range(-2.0f32..2.0)).collect();
        Tensor::from_vec(TensorKind::Sinogram, ch, rows, cols, data).unwrap()
    }

    #[test]
    fn constant_input_goes_to_ll_only() {
        let c = 0.7f32;
        let t = Tensor::from_vec(TensorKind::Sinogram, 1, 8, 8, vec![c; 64]).unwrap();
        let bands = dwt2(&t).unwrap();
        for v in bands.ll.data() {
            assert!((v - 2.0 * c).abs() < 1e-6, "ll should be 2c, got {v}");
        }
        for b in HighBand::ALL {
            assert!(bands.band(b).data().iter().all(|&v| v.abs() < 1e-6));
        }
    }

    #[test]
    fn roundtrip_random_2x8x8() {
        let t = random_tensor(2, 8, 8, 42);
        let back = idwt2(&dwt2(&t).unwrap()).unwrap();
        assert!(t.max_abs_diff(&back) < 1e-5);
    }

    #[test]
    fn parseval_on_even_dims() {
        let t = random_tensor(2, 16, 24, 7);
        let bands = dwt2(&t).unwrap();
        let ex: f64 = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
        let eb = bands.energy();
        assert!(((ex - eb) / ex).abs() < 1e-4, "energy {ex} vs bands {eb}");
    }

    #[test]
    fn band_dims_are_halved() {
        let t = random_tensor(2, 10, 14, 8);
        let bands = dwt2(&t).unwrap();
        assert_eq!((bands.ll.rows(), bands.ll.cols()), (5, 7));
    }

    #[test]
    fn odd_dims_roundtrip_exactly() {
        let t = random_tensor(2, 9, 13, 9);
        let bands = dwt2(&t).unwrap();
        assert_eq!((bands.ll.rows(), bands.ll.cols()), (5, 7));
        let back = idwt2(&bands).unwrap();
        assert_eq!((back.rows(), back.cols()), (9, 13));
        assert!(t.max_abs_diff(&back) < 1e-5);
    }

    #[test]
    fn dwt2_is_linear() {
        let a = random_tensor(1, 12, 12, 10);
        let b = random_tensor(1, 12, 12, 11);
        let sum = Tensor::from_vec(
            TensorKind::Sinogram,
            1,
            12,
            12,
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let (ba, bb, bsum) = (dwt2(&a).unwrap(), dwt2(&b).unwrap(), dwt2(&sum).unwrap());
        for (x, (y, z)) in bsum.ll.data().iter().zip(ba.ll.data().iter().zip(bb.ll.data())) {
            assert!((x - (y + z)).abs() < 1e-5);
        }
    }

    #[test]
    fn band_mismatch_is_shape_error() {
        let t = random_tensor(1, 8, 8, 12);
        let mut bands = dwt2(&t).unwrap();
        bands.hh = Tensor::zeros(TensorKind::Sinogram, 1, 2, 2);
        assert!(matches!(idwt2(&bands), Err(Error::Shape(_))));
    }

    #[test]
    fn random_band_selection_is_reproducible_and_shaped() {
        let t = random_tensor(2, 8, 8, 13);
        let (bh, bl) = dwt2_per_energy(&t).unwrap();
        let mut r1 = ChaCha8Rng::seed_from_u64(5);
        let mut r2 = ChaCha8Rng::seed_from_u64(5);
        let seq1: Vec<HighBand> = (0..20)
            .map(|_| select_random_highfreq(&bh, &bl, &mut r1).unwrap().0)
            .collect();
        let seq2: Vec<HighBand> = (0..20)
            .map(|_| select_random_highfreq(&bh, &bl, &mut r2).unwrap().0)
            .collect();
        assert_eq!(seq1, seq2);
        let (_, x) = select_random_highfreq(&bh, &bl, &mut r1).unwrap();
        assert_eq!((x.channels(), x.rows(), x.cols()), (2, 4, 4));
    }

    #[test]
    fn band_selection_is_uniform() {
        // Monte Carlo: each band should appear with frequency 1/3 +- 0.03.
        let t = random_tensor(2, 4, 4, 14);
        let (bh, bl) = dwt2_per_energy(&t).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let mut counts = [0usize; 3];
        let draws = 3000;
        for _ in 0..draws {
            let (b, _) = select_random_highfreq(&bh, &bl, &mut rng).unwrap();
            counts[match b {
                HighBand::Lh => 0,
                HighBand::Hl => 1,
                HighBand::Hh => 2,
            }] += 1;
        }
        for c in counts {
            let f = c as f64 / draws as f64;
            assert!((f - 1.0 / 3.0).abs() < 0.03, "band frequency {f}");
        }
    }

    proptest::proptest! {
        #[test]
        fn perfect_reconstruction_any_dims(
            rows in 2usize..20, cols in 2usize..20, seed in proptest::prelude::any::<u64>()
        ) {
            let t = random_tensor(2, rows, cols, seed);
            let back = idwt2(&dwt2(&t).unwrap()).unwrap();
            proptest::prop_assert!(t.max_abs_diff(&back) < 1e-5);
        }

        #[test]
        fn parseval_even_dims_property(
            hr in 1usize..10, hc in 1usize..10, seed in proptest::prelude::any::<u64>()
        ) {
            let t = random_tensor(2, 2 * hr, 2 * hc, seed);
            let bands = dwt2(&t).unwrap();
            let ex: f64 = t.data().iter().map(|&v| (v as f64) * (v as f64)).sum();
            proptest::prop_assert!((ex - bands.energy()).abs() <= 1e-4 * ex.max(1e-9));
        }
    }
}
