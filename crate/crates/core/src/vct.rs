//! Virtual masks and the cross-energy transform (VCT / i-VCT).
//!
//! A virtual mask is a binary matrix drawn by thresholding standard-normal
//! samples at the perturbation ratio `zeta`. VCT uses it to exchange pixels
//! between the H- and L-energy channels, stacking the originals and the two
//! perturbed channels into the six-channel tensor `[H, L, HL, L, H, LH]`.
//! Because the mask is binary the exchange is pure per-pixel selection, so
//! i-VCT inverts it exactly, bit for bit.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::{Tensor, TensorFile, TensorKind};

/// Binary perturbation mask plus the parameters that regenerate it.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualMask {
    rows: usize,
    cols: usize,
    zeta: f64,
    seed: u64,
    m: Vec<u8>,
}

impl VirtualMask {
    /// Draws one standard-normal sample per entry; the entry is 1 iff the
    /// sample is <= `zeta`. The mask seed is taken from `rng`, so the same
    /// caller stream always produces the same mask and
    /// [`VirtualMask::regenerate`] reproduces it bit-exactly.
    pub fn generate(rows: usize, cols: usize, zeta: f64, rng: &mut impl RngCore) -> Result<Self> {
        if !zeta.is_finite() {
            return Err(Error::argument(format!("zeta must be finite, got {zeta}")));
        }
        let seed = rng.next_u64();
        Self::from_seed(rows, cols, zeta, seed)
    }

    /// Deterministic construction from an explicit seed.
    pub fn from_seed(rows: usize, cols: usize, zeta: f64, seed: u64) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::shape(format!("mask dims must be >= 1, got {rows}x{cols}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = (0..rows * cols)
            .map(|_| {
                let x: f64 = rng.sample(StandardNormal);
                u8::from(x <= zeta)
            })
            .collect();
        Ok(VirtualMask { rows, cols, zeta, seed, m })
    }

    pub fn regenerate(&self) -> Self {
        Self::from_seed(self.rows, self.cols, self.zeta, self.seed).expect("stored dims valid")
    }

    pub fn rows(&self) -> usize {
        self.rows
    }
    pub fn cols(&self) -> usize {
        self.cols
    }
    pub fn zeta(&self) -> f64 {
        self.zeta
    }
    pub fn seed(&self) -> u64 {
        self.seed
    }
    pub fn entries(&self) -> &[u8] {
        &self.m
    }

    #[inline]
    pub fn is_one(&self, r: usize, c: usize) -> bool {
        self.m[r * self.cols + c] == 1
    }

    pub fn ones_fraction(&self) -> f64 {
        self.m.iter().map(|&b| b as u64).sum::<u64>() as f64 / self.m.len() as f64
    }

    /// Complement mask (used only by tests and demos).
    pub fn complement(&self) -> Self {
        VirtualMask {
            rows: self.rows,
            cols: self.cols,
            zeta: self.zeta,
            seed: self.seed,
            m: self.m.iter().map(|&b| 1 - b).collect(),
        }
    }

    /// Serializes as a rank-2 kind=2 VIPT file of 0.0/1.0 floats.
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        TensorFile {
            kind: TensorKind::Mask,
            dims: vec![self.rows as u32, self.cols as u32],
            payload: self.m.iter().map(|&b| b as f32).collect(),
        }
        .write(path.as_ref())
    }
}

/// Cross-energy transform: lifts a 2-channel tensor to the 6-channel
/// `[H, L, HL, L, H, LH]` stack, where `HL`/`LH` pick the H or L pixel
/// according to the mask.
pub fn vct(x2: &Tensor, mask: &VirtualMask) -> Result<Tensor> {
    if x2.channels() != 2 {
        return Err(Error::shape(format!("vct expects 2 channels, got {}", x2.channels())));
    }
    if x2.rows() != mask.rows || x2.cols() != mask.cols {
        return Err(Error::shape(format!(
            "mask {}x{} does not match tensor {}x{}",
            mask.rows,
            mask.cols,
            x2.rows(),
            x2.cols()
        )));
    }
    let n = x2.rows() * x2.cols();
    let h = x2.channel(0);
    let l = x2.channel(1);
    let mut data = Vec::with_capacity(6 * n);
    data.extend_from_slice(h);
    data.extend_from_slice(l);
    // HL = H where mask is 1, else L
    data.extend((0..n).map(|i| if mask.m[i] == 1 { h[i] } else { l[i] }));
    data.extend_from_slice(l);
    data.extend_from_slice(h);
    // LH = L where mask is 1, else H
    data.extend((0..n).map(|i| if mask.m[i] == 1 { l[i] } else { h[i] }));
    Tensor::from_vec(x2.kind(), 6, x2.rows(), x2.cols(), data)
}

/// Inverse transform: recovers `[H, L]` from channels 2 (HL) and 5 (LH)
/// of a 6-channel stack, using the same mask as the forward VCT.
pub fn ivct(x6: &Tensor, mask: &VirtualMask) -> Result<Tensor> {
    if x6.channels() != 6 {
        return Err(Error::shape(format!("ivct expects 6 channels, got {}", x6.channels())));
    }
    if x6.rows() != mask.rows || x6.cols() != mask.cols {
        return Err(Error::shape(format!(
            "mask {}x{} does not match tensor {}x{}",
            mask.rows,
            mask.cols,
            x6.rows(),
            x6.cols()
        )));
    }
    let n = x6.rows() * x6.cols();
    let hl = x6.channel(2);
    let lh = x6.channel(5);
    let mut data = Vec::with_capacity(2 * n);
    // H' = HL where mask is 1, else LH
    data.extend((0..n).map(|i| if mask.m[i] == 1 { hl[i] } else { lh[i] }));
    // L' = LH where mask is 1, else HL
    data.extend((0..n).map(|i| if mask.m[i] == 1 { lh[i] } else { hl[i] }));
    Tensor::from_vec(x6.kind(), 2, x6.rows(), x6.cols(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_2ch(rows: usize, cols: usize, seed: u64) -> Tensor {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..2 * rows * cols).map(|_| rng.gen_range(-5.0f32..5.0)).collect();
        Tensor::from_vec(TensorKind::Sinogram, 2, rows, cols, data).unwrap()
    }

    #[test]
    fn extreme_zeta_saturates_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ones = VirtualMask::generate(20, 20, 10.0, &mut rng).unwrap();
        assert_eq!(ones.ones_fraction(), 1.0);
        let zeros = VirtualMask::generate(20, 20, -10.0, &mut rng).unwrap();
        assert_eq!(zeros.ones_fraction(), 0.0);
    }

    #[test]
    fn ones_fraction_matches_normal_cdf_at_default_zeta() {
        // Oracle: Phi(2.81) via an independent erf implementation.
        let phi = |x: f64| 0.5 * (1.0 + statrs::function::erf::erf(x / std::f64::consts::SQRT_2));
        let expected = phi(2.81);
        assert!((expected - 0.99752).abs() < 5e-5);
        let mask = VirtualMask::from_seed(1000, 1000, 2.81, 99).unwrap();
        assert!(
            (mask.ones_fraction() - expected).abs() < 1e-3,
            "fraction {} vs Phi(2.81) {expected}",
            mask.ones_fraction()
        );
    }

    #[test]
    fn mask_regenerates_bit_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = VirtualMask::generate(17, 29, 0.5, &mut rng).unwrap();
        assert_eq!(m, m.regenerate());
    }

    #[test]
    fn zero_sized_mask_rejected() {
        assert!(matches!(VirtualMask::from_seed(0, 4, 1.0, 0), Err(Error::Shape(_))));
    }

    #[test]
    fn all_ones_mask_copies_channels() {
        let x = random_2ch(6, 7, 11);
        let mask = VirtualMask::from_seed(6, 7, 100.0, 0).unwrap();
        let x6 = vct(&x, &mask).unwrap();
        assert_eq!(x6.channel(2), x.channel(0)); // HL == H
        assert_eq!(x6.channel(5), x.channel(1)); // LH == L
        assert_eq!(x6.channel(0), x.channel(0));
        assert_eq!(x6.channel(3), x.channel(1));
    }

    #[test]
    fn all_zeros_mask_swaps_channels() {
        let x = random_2ch(6, 7, 12);
        let mask = VirtualMask::from_seed(6, 7, -100.0, 0).unwrap();
        let x6 = vct(&x, &mask).unwrap();
        assert_eq!(x6.channel(2), x.channel(1)); // HL == L
        assert_eq!(x6.channel(5), x.channel(0)); // LH == H
    }

    #[test]
    fn perturbed_pixels_are_selections() {
        // Every HL pixel must be exactly the H or the L pixel at that spot,
        // and {HL, LH} must equal {H, L} as a multiset per location.
        let x = random_2ch(16, 16, 13);
        let mask = VirtualMask::from_seed(16, 16, 0.0, 5).unwrap();
        let x6 = vct(&x, &mask).unwrap();
        let (h, l) = (x.channel(0), x.channel(1));
        let (hl, lh) = (x6.channel(2), x6.channel(5));
        for i in 0..h.len() {
            assert!(hl[i].to_bits() == h[i].to_bits() || hl[i].to_bits() == l[i].to_bits());
            let mut got = [hl[i].to_bits(), lh[i].to_bits()];
            let mut want = [h[i].to_bits(), l[i].to_bits()];
            got.sort_unstable();
            want.sort_unstable();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn ivct_inverts_vct_bit_exactly() {
        let x = random_2ch(10, 12, 14);
        let mask = VirtualMask::from_seed(10, 12, 1.0, 21).unwrap();
        let back = ivct(&vct(&x, &mask).unwrap(), &mask).unwrap();
        assert!(x
            .data()
            .iter()
            .zip(back.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn ivct_with_all_ones_mask_picks_hl_lh() {
        let x = random_2ch(4, 4, 15);
        let mask = VirtualMask::from_seed(4, 4, 100.0, 0).unwrap();
        let x6 = vct(&x, &mask).unwrap();
        let back = ivct(&x6, &mask).unwrap();
        assert_eq!(back.channel(0), x6.channel(2));
        assert_eq!(back.channel(1), x6.channel(5));
    }

    #[test]
    fn wrong_mask_swaps_where_masks_disagree() {
        let x = random_2ch(12, 12, 16);
        let mask = VirtualMask::from_seed(12, 12, 0.0, 33).unwrap();
        let x6 = vct(&x, &mask).unwrap();
        let bad = ivct(&x6, &mask.complement()).unwrap();
        let (h, l) = (x.channel(0), x.channel(1));
        // the complement disagrees everywhere, so channels come back swapped
        for i in 0..h.len() {
            assert_eq!(bad.channel(0)[i].to_bits(), l[i].to_bits());
            assert_eq!(bad.channel(1)[i].to_bits(), h[i].to_bits());
        }
    }

    #[test]
    fn channel_count_errors() {
        let x1 = Tensor::zeros(TensorKind::Sinogram, 1, 4, 4);
        let mask = VirtualMask::from_seed(4, 4, 1.0, 0).unwrap();
        assert!(matches!(vct(&x1, &mask), Err(Error::Shape(_))));
        let x2 = Tensor::zeros(TensorKind::Sinogram, 2, 4, 4);
        assert!(matches!(ivct(&x2, &mask), Err(Error::Shape(_))));
        let wrong = VirtualMask::from_seed(3, 4, 1.0, 0).unwrap();
        assert!(matches!(vct(&x2, &wrong), Err(Error::Shape(_))));
    }

    proptest::proptest! {
        #[test]
        fn vct_ivct_closed_loop(seed in proptest::prelude::any::<u64>(), zeta in -3.0f64..3.0) {
            let x = random_2ch(9, 11, seed);
            let mask = VirtualMask::from_seed(9, 11, zeta, seed ^ 0xabcd).unwrap();
            let back = ivct(&vct(&x, &mask).unwrap(), &mask).unwrap();
            proptest::prop_assert!(x.data().iter().zip(back.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        }
    }
}
