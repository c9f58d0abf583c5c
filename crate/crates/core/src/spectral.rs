//! 2-D discrete Fourier transforms and the frequency-domain global transform.
//!
//! The forward transform is unnormalized and the inverse carries the
//! `1/(H*W)` factor, so `idft2(dft2(x)) == x` up to floating-point noise.
//! The global transform scales the coefficients inside a centered low-pass
//! disk by `(1 + eps)` with `eps ~ N(0, 1)`; the noise field is mirrored
//! under `(u, v) -> (-u, -v)` so the perturbed spectrum stays Hermitian and
//! the output stays real.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use thiserror::Error;

use crate::raster::Raster;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("empty grid: {height}x{width}")]
    EmptyGrid { height: usize, width: usize },
    #[error("non-finite input value")]
    NonFinite,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("imaginary residue {residue:.3e} exceeds {limit:.1e}")]
    ImaginaryResidue { residue: f64, limit: f64 },
}

pub type Result<T> = std::result::Result<T, SpectralError>;

const RESIDUE_LIMIT: f64 = 1e-5;

/// Complex coefficients of one channel's unnormalized forward transform,
/// row-major with bin `(u, v)` at `u * width + v`.
#[derive(Debug, Clone)]
pub struct Spectrum {
    height: usize,
    width: usize,
    data: Vec<Complex64>,
}

impl Spectrum {
    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn get(&self, u: usize, v: usize) -> Complex64 {
        self.data[u * self.width + v]
    }

    /// Max deviation from Hermitian symmetry `X[u,v] = conj(X[-u,-v])`.
    pub fn hermitian_defect(&self) -> f64 {
        let mut worst = 0.0f64;
        for u in 0..self.height {
            for v in 0..self.width {
                let mirror = self.get((self.height - u) % self.height, (self.width - v) % self.width);
                worst = worst.max((self.get(u, v) - mirror.conj()).norm());
            }
        }
        worst
    }
}

/// Binary frequency mask passing bins within centered distance `radius`.
#[derive(Debug, Clone)]
pub struct BandPassMask {
    height: usize,
    width: usize,
    radius: f64,
    pass: Vec<bool>,
}

impl BandPassMask {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn passes(&self, u: usize, v: usize) -> bool {
        self.pass[u * self.width + v]
    }

    pub fn pass_count(&self) -> usize {
        self.pass.iter().filter(|&&p| p).count()
    }
}

/// Signed centered frequency of bin index `i` along an axis of length `n`.
fn signed_freq(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i > n / 2 {
        i - n
    } else {
        i
    }
}

/// Low-frequency disk: bin `(u, v)` passes iff its centered Euclidean
/// distance is `<= r`. `r = 0` passes only the DC bin; a negative radius
/// passes nothing.
pub fn band_pass_mask(height: usize, width: usize, radius: f64) -> BandPassMask {
    let mut pass = Vec::with_capacity(height * width);
    let r2 = radius * radius;
    for u in 0..height {
        let su = signed_freq(u, height);
        for v in 0..width {
            let sv = signed_freq(v, width);
            pass.push(radius >= 0.0 && ((su * su + sv * sv) as f64) <= r2);
        }
    }
    BandPassMask {
        height,
        width,
        radius,
        pass,
    }
}

fn fft_pass(planner: &mut FftPlanner<f64>, data: &mut [Complex64], height: usize, width: usize, inverse: bool) {
    let row_fft = if inverse {
        planner.plan_fft_inverse(width)
    } else {
        planner.plan_fft_forward(width)
    };
    for row in data.chunks_exact_mut(width) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(height)
    } else {
        planner.plan_fft_forward(height)
    };
    let mut col = vec![Complex64::default(); height];
    for v in 0..width {
        for u in 0..height {
            col[u] = data[u * width + v];
        }
        col_fft.process(&mut col);
        for u in 0..height {
            data[u * width + v] = col[u];
        }
    }
}

/// Unnormalized forward 2-D DFT of one real channel (row-major, `h * w`).
pub fn dft2(grid: &[f64], height: usize, width: usize) -> Result<Spectrum> {
    if height == 0 || width == 0 {
        return Err(SpectralError::EmptyGrid { height, width });
    }
    if grid.len() != height * width {
        return Err(SpectralError::ShapeMismatch(format!(
            "grid has {} values, expected {}",
            grid.len(),
            height * width
        )));
    }
    if grid.iter().any(|v| !v.is_finite()) {
        return Err(SpectralError::NonFinite);
    }
    let mut data: Vec<Complex64> = grid.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft_pass(&mut FftPlanner::new(), &mut data, height, width, false);
    Ok(Spectrum { height, width, data })
}

/// Inverse 2-D DFT scaled by `1/(H*W)`. The imaginary residue must stay
/// below `1e-5`; it is asserted and discarded.
pub fn idft2(s: &Spectrum) -> Result<Vec<f64>> {
    let mut data = s.data.clone();
    fft_pass(&mut FftPlanner::new(), &mut data, s.height, s.width, true);
    let scale = 1.0 / (s.height * s.width) as f64;
    let mut residue = 0.0f64;
    let mut out = Vec::with_capacity(data.len());
    for c in &data {
        let re = c.re * scale;
        let im = (c.im * scale).abs();
        residue = residue.max(im);
        out.push(re);
    }
    if residue > RESIDUE_LIMIT {
        return Err(SpectralError::ImaginaryResidue {
            residue,
            limit: RESIDUE_LIMIT,
        });
    }
    Ok(out)
}

/// Standard-normal noise field mirrored so `field[u,v] = field[-u,-v]`.
/// Mirror pairs share one draw; draws are consumed in row-major order of the
/// first-visited bin of each pair.
pub fn noise_field(height: usize, width: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut field = vec![0.0f64; height * width];
    let mut assigned = vec![false; height * width];
    for u in 0..height {
        for v in 0..width {
            let i = u * width + v;
            if assigned[i] {
                continue;
            }
            let j = ((height - u) % height) * width + (width - v) % width;
            let eps: f64 = StandardNormal.sample(&mut rng);
            field[i] = eps;
            assigned[i] = true;
            field[j] = eps;
            assigned[j] = true;
        }
    }
    field
}

/// Scales passed bins by `(1 + field[u,v])`; blocked bins are unchanged.
pub fn apply_noise_field(s: &Spectrum, mask: &BandPassMask, field: &[f64]) -> Result<Spectrum> {
    if mask.height != s.height || mask.width != s.width || field.len() != s.data.len() {
        return Err(SpectralError::ShapeMismatch(format!(
            "spectrum {}x{}, mask {}x{}, field {}",
            s.width,
            s.height,
            mask.width,
            mask.height,
            field.len()
        )));
    }
    let data = s
        .data
        .iter()
        .zip(mask.pass.iter().zip(field))
        .map(|(&c, (&p, &eps))| if p { c * (1.0 + eps) } else { c })
        .collect();
    Ok(Spectrum {
        height: s.height,
        width: s.width,
        data,
    })
}

/// Seeded form of [`apply_noise_field`]; the same seed yields the same
/// field for every channel, which keeps the perturbation shared across
/// channels.
pub fn randomize_spectrum(s: &Spectrum, mask: &BandPassMask, seed: u64) -> Result<Spectrum> {
    apply_noise_field(s, mask, &noise_field(s.height, s.width, seed))
}

/// Global transform with an explicit noise field, returning the raw
/// (unclamped) channel-interleaved values.
pub fn global_transform_field_unclamped(x: &Raster, mask: &BandPassMask, field: &[f64]) -> Result<Vec<f64>> {
    let (h, w) = (x.height(), x.width());
    let mut out = vec![0.0f64; h * w * Raster::CHANNELS];
    for c in 0..Raster::CHANNELS {
        let spectrum = dft2(&x.channel(c), h, w)?;
        let perturbed = apply_noise_field(&spectrum, mask, field)?;
        let plane = idft2(&perturbed)?;
        for (i, &v) in plane.iter().enumerate() {
            out[i * Raster::CHANNELS + c] = v;
        }
    }
    Ok(out)
}

/// Frequency-domain global transform: bins inside the radius-`r` disk are
/// scaled by `(1 + eps)`, the rest pass through, and the inverse transform
/// is clamped back to `[0, 1]`.
pub fn global_transform(x: &Raster, radius: f64, seed: u64) -> Result<Raster> {
    let mask = band_pass_mask(x.height(), x.width(), radius);
    let field = noise_field(x.height(), x.width(), seed);
    global_transform_with_field(x, &mask, &field)
}

/// [`global_transform`] with a caller-supplied mask and noise field.
pub fn global_transform_with_field(x: &Raster, mask: &BandPassMask, field: &[f64]) -> Result<Raster> {
    let raw = global_transform_field_unclamped(x, mask, field)?;
    Ok(Raster::from_data(x.height(), x.width(), raw).expect("idft2 output is finite"))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive O(N^4) reference DFT.
    fn naive_dft2(grid: &[f64], h: usize, w: usize) -> Vec<Complex64> {
        let mut out = vec![Complex64::default(); h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::default();
                for y in 0..h {
                    for x in 0..w {
                        let phase = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 / h as f64 + v as f64 * x as f64 / w as f64);
                        acc += grid[y * w + x] * Complex64::new(phase.cos(), phase.sin());
                    }
                }
                out[u * w + v] = acc;
            }
        }
        out
    }

    fn random_grid(n: usize, seed: u64) -> Vec<f64> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random::<f64>()).collect()
    }

    #[test]
    fn constant_grid_has_only_dc() {
        let s = dft2(&[1.0; 4], 2, 2).unwrap();
        assert!((s.get(0, 0) - Complex64::new(4.0, 0.0)).norm() < 1e-12);
        for (u, v) in [(0, 1), (1, 0), (1, 1)] {
            assert!(s.get(u, v).norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_transforms_to_all_ones() {
        let mut grid = vec![0.0; 9];
        grid[0] = 1.0;
        let s = dft2(&grid, 3, 3).unwrap();
        for c in s.data() {
            assert!((c - Complex64::new(1.0, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn inverse_of_forward_is_identity() {
        for &(h, w) in &[(8, 8), (7, 5), (16, 16), (1, 9)] {
            let grid = random_grid(h * w, 42 + h as u64);
            let back = idft2(&dft2(&grid, h, w).unwrap()).unwrap();
            let err = grid
                .iter()
                .zip(&back)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(err <= 1e-5, "{h}x{w}: max err {err:.3e}");
        }
    }

    #[test]
    fn matches_naive_dft() {
        for &(h, w) in &[(8, 8), (6, 10)] {
            let grid = random_grid(h * w, 7);
            let fast = dft2(&grid, h, w).unwrap();
            let slow = naive_dft2(&grid, h, w);
            let err = fast
                .data()
                .iter()
                .zip(&slow)
                .map(|(a, b)| (a - b).norm())
                .fold(0.0f64, f64::max);
            assert!(err <= 1e-5, "{h}x{w}: max err {err:.3e}");
        }
    }

    #[test]
    fn forward_of_real_input_is_hermitian() {
        let grid = random_grid(8 * 12, 3);
        let s = dft2(&grid, 8, 12).unwrap();
        assert!(s.hermitian_defect() < 1e-9);
    }

    #[test]
    fn parseval_holds() {
        for seed in 0..4 {
            let grid = random_grid(16 * 16, seed);
            let s = dft2(&grid, 16, 16).unwrap();
            let spatial: f64 = grid.iter().map(|v| v * v).sum();
            let spectral: f64 = s.data().iter().map(|c| c.norm_sqr()).sum::<f64>() / 256.0;
            assert!((spatial - spectral).abs() / spatial <= 1e-4);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        assert!(matches!(dft2(&[f64::NAN, 0.0], 1, 2), Err(SpectralError::NonFinite)));
    }

    #[test]
    fn band_pass_radius_zero_is_dc_only() {
        let m = band_pass_mask(8, 8, 0.0);
        assert_eq!(m.pass_count(), 1);
        assert!(m.passes(0, 0));
    }

    #[test]
    fn band_pass_large_radius_passes_everything() {
        let diag = (64.0f64 + 64.0).sqrt() / 2.0;
        let m = band_pass_mask(8, 8, diag);
        assert_eq!(m.pass_count(), 64);
    }

    #[test]
    fn band_pass_radius_one_on_8x8() {
        let m = band_pass_mask(8, 8, 1.0);
        // enumeration oracle: centered distance <= 1
        let mut count = 0;
        for u in 0..8 {
            for v in 0..8 {
                let su = signed_freq(u, 8);
                let sv = signed_freq(v, 8);
                let inside = su * su + sv * sv <= 1;
                assert_eq!(m.passes(u, v), inside, "bin ({u},{v})");
                count += inside as usize;
            }
        }
        assert_eq!(count, 5);
        assert_eq!(m.pass_count(), 5);
    }

    #[test]
    fn band_pass_is_symmetric() {
        let m = band_pass_mask(6, 9, 2.0);
        for u in 0..6 {
            for v in 0..9 {
                assert_eq!(m.passes(u, v), m.passes((6 - u) % 6, (9 - v) % 9));
            }
        }
    }

    #[test]
    fn zero_field_leaves_spectrum_unchanged() {
        let grid = random_grid(16, 5);
        let s = dft2(&grid, 4, 4).unwrap();
        let m = band_pass_mask(4, 4, 2.0);
        let out = apply_noise_field(&s, &m, &vec![0.0; 16]).unwrap();
        for (a, b) in s.data().iter().zip(out.data()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn blocking_mask_ignores_seed() {
        let grid = random_grid(16, 5);
        let s = dft2(&grid, 4, 4).unwrap();
        let m = band_pass_mask(4, 4, -1.0); // passes nothing
        assert_eq!(m.pass_count(), 0);
        for seed in [0u64, 1, 99] {
            let out = randomize_spectrum(&s, &m, seed).unwrap();
            for (a, b) in s.data().iter().zip(out.data()) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn noise_field_is_mirrored_and_deterministic() {
        let f1 = noise_field(6, 8, 11);
        let f2 = noise_field(6, 8, 11);
        assert_eq!(f1, f2);
        for u in 0..6 {
            for v in 0..8 {
                let m = ((6 - u) % 6) * 8 + (8 - v) % 8;
                assert_eq!(f1[u * 8 + v], f1[m]);
            }
        }
    }

    #[test]
    fn dc_only_noise_shifts_by_scaled_mean() {
        // r = 0: only DC is scaled by (1+eps), so the image becomes
        // x + eps * mean(x) per channel (linearity of the transform).
        let x = Raster::from_fn(8, 8, |y, xx, c| ((y * 3 + xx * 5 + c * 2) % 10) as f64 / 20.0);
        let mask = band_pass_mask(8, 8, 0.0);
        let field = noise_field(8, 8, 77);
        let eps = field[0];
        let raw = global_transform_field_unclamped(&x, &mask, &field).unwrap();
        for c in 0..3 {
            let mean: f64 = x.channel(c).iter().sum::<f64>() / 64.0;
            for y in 0..8 {
                for xx in 0..8 {
                    let got = raw[(y * 8 + xx) * 3 + c];
                    let want = x.get(y, xx, c) + eps * mean;
                    assert!((got - want).abs() < 1e-9, "c={c} ({y},{xx}): {got} vs {want}");
                }
            }
        }
    }

    #[test]
    fn noise_ablated_global_transform_is_identity() {
        let x = Raster::from_fn(9, 7, |y, xx, c| ((y + xx * 2 + c) % 13) as f64 / 13.0);
        let mask = band_pass_mask(9, 7, 3.0);
        let raw = global_transform_field_unclamped(&x, &mask, &vec![0.0; 63]).unwrap();
        let err = raw
            .iter()
            .zip(x.data())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(err <= 1e-5, "max err {err:.3e}");
    }

    #[test]
    fn constant_image_dc_noise_scales_uniformly() {
        let x = Raster::from_fn(4, 4, |_, _, _| 0.25);
        let mask = band_pass_mask(4, 4, 0.0);
        let field = noise_field(4, 4, 3);
        let eps = field[0];
        let out = global_transform_with_field(&x, &mask, &field).unwrap();
        let want = (0.25 * (1.0 + eps)).clamp(0.0, 1.0);
        for &v in out.data() {
            assert!((v - want).abs() < 1e-9);
        }
    }

    #[test]
    fn global_transform_is_deterministic() {
        let x = Raster::from_fn(12, 10, |y, xx, c| ((y * xx + c) % 7) as f64 / 7.0);
        let a = global_transform(&x, 2.0, 99).unwrap();
        let b = global_transform(&x, 2.0, 99).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn output_is_real_for_many_seeds() {
        let x = Raster::from_fn(8, 8, |y, xx, c| ((y * 5 + xx * 11 + c * 3) % 17) as f64 / 17.0);
        for seed in 0..100 {
            // idft2 errors if the imaginary residue exceeds 1e-5
            global_transform(&x, 2.0, seed).unwrap();
        }
    }

    #[test]
    fn r_zero_changes_only_channel_means() {
        let x = Raster::from_fn(8, 8, |y, xx, c| 0.3 + ((y + xx + c) % 5) as f64 / 25.0);
        let mask = band_pass_mask(8, 8, 0.0);
        for seed in 0..16 {
            let field = noise_field(8, 8, seed);
            let raw = global_transform_field_unclamped(&x, &mask, &field).unwrap();
            for c in 0..3 {
                let d0 = raw[c] - x.data()[c];
                for i in 0..64 {
                    let d = raw[i * 3 + c] - x.data()[i * 3 + c];
                    assert!((d - d0).abs() < 1e-9);
                }
            }
        }
    }
}
