//! Compressive acquisition operator `H = H̄ ∘ V`, its adjoint, measurement
//! noise and the data-consistency gradient step.
//!
//! FFTs are unitary in both directions, so `Hᴴ` is the exact adjoint and
//! `‖HᴴH‖ ≤ 1`. Because `V` acts on the temporal axis and the FFT on the
//! spatial axes, `H` transforms the `s` channels once and then mixes them per
//! sampled frequency, instead of running one FFT per frame.

use std::sync::Arc;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rustfft::{Fft, FftPlanner};

use crate::dict::Subspace;
use crate::error::{param_err, shape_err, Result};
use crate::sampling::{node_of, SamplingMask};

/// Time-series of magnetisation images in the subspace: `s` complex planes of
/// N × N, stored channel-major (`data[j * N * N + row * N + col]`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tsmi {
    pub grid_n: usize,
    pub s: usize,
    pub data: Vec<Complex64>,
}

impl Tsmi {
    pub fn zeros(grid_n: usize, s: usize) -> Self {
        Tsmi {
            grid_n,
            s,
            data: vec![Complex64::new(0.0, 0.0); grid_n * grid_n * s],
        }
    }

    pub fn from_real(grid_n: usize, s: usize, real: &[f64]) -> Result<Self> {
        if real.len() != grid_n * grid_n * s {
            return shape_err(format!("{} values for a {grid_n}x{grid_n}x{s} TSMI", real.len()));
        }
        Ok(Tsmi {
            grid_n,
            s,
            data: real.iter().map(|&r| Complex64::new(r, 0.0)).collect(),
        })
    }

    pub fn pixels(&self) -> usize {
        self.grid_n * self.grid_n
    }

    pub fn channel(&self, j: usize) -> &[Complex64] {
        let n = self.pixels();
        &self.data[j * n..(j + 1) * n]
    }

    /// Signal vector of voxel `v` across channels.
    pub fn voxel(&self, v: usize) -> Vec<Complex64> {
        let n = self.pixels();
        (0..self.s).map(|j| self.data[j * n + v]).collect()
    }

    pub fn set_voxel(&mut self, v: usize, values: &[Complex64]) {
        let n = self.pixels();
        for (j, &val) in values.iter().enumerate() {
            self.data[j * n + v] = val;
        }
    }

    pub fn real_part(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.re).collect()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scaled(&self, a: f64) -> Tsmi {
        Tsmi {
            grid_n: self.grid_n,
            s: self.s,
            data: self.data.iter().map(|c| c * a).collect(),
        }
    }

    pub fn axpy(&mut self, a: Complex64, other: &Tsmi) {
        for (d, o) in self.data.iter_mut().zip(&other.data) {
            *d += a * o;
        }
    }

    /// Complex inner product ⟨self, other⟩ = Σ conj(self)·other.
    pub fn dot(&self, other: &Tsmi) -> Complex64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// k-space samples, one vector per repetition, ordered as the mask frames.
#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceData {
    pub frames: Vec<Vec<Complex64>>,
}

impl KSpaceData {
    pub fn zeros_like(mask: &SamplingMask) -> Self {
        KSpaceData {
            frames: mask.frames.iter().map(|f| vec![Complex64::new(0.0, 0.0); f.len()]).collect(),
        }
    }

    pub fn norm_sqr(&self) -> f64 {
        self.frames.iter().flatten().map(|c| c.norm_sqr()).sum()
    }

    pub fn n_samples(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    pub fn dot(&self, other: &KSpaceData) -> Complex64 {
        self.frames
            .iter()
            .flatten()
            .zip(other.frames.iter().flatten())
            .map(|(a, b)| a.conj() * b)
            .sum()
    }

    pub fn sub(&self, other: &KSpaceData) -> KSpaceData {
        KSpaceData {
            frames: self
                .frames
                .iter()
                .zip(&other.frames)
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
                .collect(),
        }
    }

    pub fn lengths(&self) -> Vec<usize> {
        self.frames.iter().map(Vec::len).collect()
    }
}

/// Unitary 2-D FFT on N × N planes.
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
        }
    }

    pub fn forward(&self, plane: &mut [Complex64]) {
        self.run(plane, &self.fwd);
    }

    pub fn inverse(&self, plane: &mut [Complex64]) {
        self.run(plane, &self.inv);
    }

    fn run(&self, plane: &mut [Complex64], fft: &Arc<dyn Fft<f64>>) {
        let n = self.n;
        debug_assert_eq!(plane.len(), n * n);
        fft.process(plane);
        transpose_square(plane, n);
        fft.process(plane);
        transpose_square(plane, n);
        let scale = 1.0 / n as f64;
        plane.iter_mut().for_each(|c| *c *= scale);
    }
}

fn transpose_square(m: &mut [Complex64], n: usize) {
    for r in 0..n {
        for c in r + 1..n {
            m.swap(r * n + c, c * n + r);
        }
    }
}

/// `H := H̄ ∘ V` for a given mask and subspace.
pub struct AcquisitionModel {
    pub mask: SamplingMask,
    pub subspace: Subspace,
    pub grid_n: usize,
    /// per-frame sample positions in FFT (DC at 0) layout
    fft_index: Vec<Vec<usize>>,
    fft: Fft2,
}

impl Clone for AcquisitionModel {
    fn clone(&self) -> Self {
        AcquisitionModel::new(self.mask.clone(), self.subspace.clone()).expect("already validated")
    }
}

impl std::fmt::Debug for AcquisitionModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AcquisitionModel")
            .field("grid_n", &self.grid_n)
            .field("frames", &self.mask.len())
            .field("s", &self.subspace.s)
            .finish()
    }
}

impl AcquisitionModel {
    pub fn new(mask: SamplingMask, subspace: Subspace) -> Result<Self> {
        if mask.len() != subspace.l {
            return shape_err(format!(
                "mask has {} frames but subspace has {} rows",
                mask.len(),
                subspace.l
            ));
        }
        mask.validate()?;
        let n = mask.grid_n;
        let fft_index = mask
            .frames
            .iter()
            .map(|f| {
                f.iter()
                    .map(|&i| {
                        let (kx, ky) = node_of(i, n);
                        let row = ky.rem_euclid(n as i64) as usize;
                        let col = kx.rem_euclid(n as i64) as usize;
                        row * n + col
                    })
                    .collect()
            })
            .collect();
        Ok(AcquisitionModel {
            grid_n: n,
            fft_index,
            fft: Fft2::new(n),
            mask,
            subspace,
        })
    }

    pub fn s(&self) -> usize {
        self.subspace.s
    }

    pub fn frames(&self) -> usize {
        self.mask.len()
    }

    fn check_tsmi(&self, x: &Tsmi) -> Result<()> {
        if x.s != self.s() || x.grid_n != self.grid_n || x.data.len() != x.pixels() * x.s {
            return shape_err(format!(
                "TSMI {}x{}x{} does not match model {}x{}x{}",
                x.grid_n, x.grid_n, x.s, self.grid_n, self.grid_n, self.s()
            ));
        }
        Ok(())
    }

    fn check_kspace(&self, y: &KSpaceData) -> Result<()> {
        if y.frames.len() != self.frames() || y.frames.iter().zip(&self.fft_index).any(|(a, b)| a.len() != b.len()) {
            return shape_err("k-space frame lengths do not match the sampling mask");
        }
        Ok(())
    }

    pub fn apply(&self, x: &Tsmi) -> Result<KSpaceData> {
        self.check_tsmi(x)?;
        let np = x.pixels();
        let s = self.s();
        let mut spectra = x.data.clone();
        for plane in spectra.chunks_exact_mut(np) {
            self.fft.forward(plane);
        }
        let frames = self
            .fft_index
            .iter()
            .enumerate()
            .map(|(t, idx)| {
                let w = &self.subspace.v[t * s..(t + 1) * s];
                idx.iter()
                    .map(|&k| (0..s).map(|j| spectra[j * np + k] * w[j]).sum())
                    .collect()
            })
            .collect();
        Ok(KSpaceData { frames })
    }

    pub fn adjoint(&self, y: &KSpaceData) -> Result<Tsmi> {
        self.check_kspace(y)?;
        let n = self.grid_n;
        let np = n * n;
        let s = self.s();
        let mut out = Tsmi::zeros(n, s);
        for (t, (idx, frame)) in self.fft_index.iter().zip(&y.frames).enumerate() {
            let w = &self.subspace.v[t * s..(t + 1) * s];
            for (&k, &val) in idx.iter().zip(frame) {
                for j in 0..s {
                    out.data[j * np + k] += val * w[j];
                }
            }
        }
        for plane in out.data.chunks_exact_mut(np) {
            self.fft.inverse(plane);
        }
        Ok(out)
    }

    /// ‖y − Hx‖².
    pub fn data_fidelity(&self, x: &Tsmi, y: &KSpaceData) -> Result<f64> {
        Ok(y.sub(&self.apply(x)?).norm_sqr())
    }

    /// Re(HᴴH u) for a real image u (channel-major), the symmetric normal operator
    /// restricted to real inputs.
    pub fn normal_real(&self, u: &[f64]) -> Result<Vec<f64>> {
        let x = Tsmi::from_real(self.grid_n, self.s(), u)?;
        Ok(self.adjoint(&self.apply(&x)?)?.real_part())
    }
}

pub fn apply_h(x: &Tsmi, model: &AcquisitionModel) -> Result<KSpaceData> {
    model.apply(x)
}

pub fn apply_h_adjoint(y: &KSpaceData, model: &AcquisitionModel) -> Result<Tsmi> {
    model.adjoint(y)
}

/// Adds circular complex Gaussian noise with total power ‖y‖² / 10^(snr/10).
pub fn add_noise(y: &KSpaceData, snr_db: f64, seed: u64) -> Result<KSpaceData> {
    if snr_db.is_nan() || snr_db == f64::NEG_INFINITY {
        return param_err(format!("SNR must be finite or +inf, got {snr_db}"));
    }
    if snr_db == f64::INFINITY {
        return Ok(y.clone());
    }
    let count = y.n_samples();
    if count == 0 {
        return Ok(y.clone());
    }
    let noise_power = y.norm_sqr() / 10f64.powf(snr_db / 10.0);
    let sigma = (noise_power / count as f64 / 2.0).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = y
        .frames
        .iter()
        .map(|f| {
            f.iter()
                .map(|&c| {
                    let re: f64 = StandardNormal.sample(&mut rng);
                    let im: f64 = StandardNormal.sample(&mut rng);
                    c + Complex64::new(sigma * re, sigma * im)
                })
                .collect()
        })
        .collect();
    Ok(KSpaceData { frames })
}

/// x + α Hᴴ(y − Hx).
pub fn gradient_step(x: &Tsmi, y: &KSpaceData, alpha: f64, model: &AcquisitionModel) -> Result<Tsmi> {
    let residual = y.sub(&model.apply(x)?);
    let back = model.adjoint(&residual)?;
    let mut out = x.clone();
    out.axpy(Complex64::new(alpha, 0.0), &back);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::{default_masks, flat_index};

    fn random_tsmi(n: usize, s: usize, rng: &mut ChaCha8Rng) -> Tsmi {
        Tsmi {
            grid_n: n,
            s,
            data: (0..n * n * s)
                .map(|_| Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng)))
                .collect(),
        }
    }

    fn random_kspace(mask: &SamplingMask, rng: &mut ChaCha8Rng) -> KSpaceData {
        KSpaceData {
            frames: mask
                .frames
                .iter()
                .map(|f| {
                    f.iter()
                        .map(|_| Complex64::new(StandardNormal.sample(rng), StandardNormal.sample(rng)))
                        .collect()
                })
                .collect(),
        }
    }

    /// Random orthonormal L × s basis via Gram-Schmidt.
    fn random_subspace(l: usize, s: usize, rng: &mut ChaCha8Rng) -> Subspace {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < s {
            let mut c: Vec<f64> = (0..l).map(|_| StandardNormal.sample(rng)).collect();
            for p in &cols {
                let d: f64 = c.iter().zip(p).map(|(a, b)| a * b).sum();
                c.iter_mut().zip(p).for_each(|(a, b)| *a -= d * b);
            }
            let nrm = c.iter().map(|a| a * a).sum::<f64>().sqrt();
            c.iter_mut().for_each(|a| *a /= nrm);
            cols.push(c);
        }
        let mut v = vec![0.0; l * s];
        for t in 0..l {
            for j in 0..s {
                v[t * s + j] = cols[j][t];
            }
        }
        Subspace::from_basis(v, l, s).unwrap()
    }

    fn small_model(rng: &mut ChaCha8Rng) -> AcquisitionModel {
        let mask = default_masks(16, 12).unwrap();
        AcquisitionModel::new(mask, random_subspace(12, 4, rng)).unwrap()
    }

    #[test]
    fn zero_in_zero_out() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = small_model(&mut rng);
        let y = model.apply(&Tsmi::zeros(16, 4)).unwrap();
        assert!(y.frames.iter().flatten().all(|c| c.norm() == 0.0));
        let x = model.adjoint(&KSpaceData::zeros_like(&model.mask)).unwrap();
        assert!(x.data.iter().all(|c| c.norm() == 0.0));
    }

    #[test]
    fn adjoint_dot_product_test() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = small_model(&mut rng);
        for _ in 0..20 {
            let x = random_tsmi(16, 4, &mut rng);
            let y = random_kspace(&model.mask, &mut rng);
            let lhs = model.apply(&x).unwrap().dot(&y);
            let rhs = x.dot(&model.adjoint(&y).unwrap());
            assert!((lhs - rhs).norm() / (x.norm_sqr().sqrt() * y.norm_sqr().sqrt()) < 1e-12);
        }
    }

    #[test]
    fn impulse_matches_direct_dft() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = small_model(&mut rng);
        let n = 16;
        let (r, c, j) = (5usize, 11usize, 2usize);
        let mut x = Tsmi::zeros(n, 4);
        x.data[j * n * n + r * n + c] = Complex64::new(1.0, 0.0);
        let y = model.apply(&x).unwrap();
        for (t, frame) in model.mask.frames.iter().enumerate() {
            for (k, &idx) in frame.iter().enumerate() {
                let (kx, ky) = node_of(idx, n);
                let phase = -2.0 * std::f64::consts::PI * (r as f64 * ky as f64 + c as f64 * kx as f64) / n as f64;
                let expected = Complex64::from_polar(model.subspace.at(t, j) / n as f64, phase);
                assert!((y.frames[t][k] - expected).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn full_mask_identity_subspace_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let l = 5;
        let model = AcquisitionModel::new(SamplingMask::full(8, l), Subspace::identity(l)).unwrap();
        let x = random_tsmi(8, l, &mut rng);
        let back = model.adjoint(&model.apply(&x).unwrap()).unwrap();
        for (a, b) in back.data.iter().zip(&x.data) {
            assert!((a - b).norm() < 1e-10);
        }
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let model = small_model(&mut rng);
        let x = random_tsmi(16, 4, &mut rng);
        let z = random_tsmi(16, 4, &mut rng);
        let (a, b) = (Complex64::new(0.3, -1.2), Complex64::new(-2.0, 0.5));
        let mut comb = x.scaled(0.0);
        comb.axpy(a, &x);
        comb.axpy(b, &z);
        let lhs = model.apply(&comb).unwrap();
        let (hx, hz) = (model.apply(&x).unwrap(), model.apply(&z).unwrap());
        let scale = lhs.norm_sqr().sqrt();
        for ((l, p), q) in lhs.frames.iter().flatten().zip(hx.frames.iter().flatten()).zip(hz.frames.iter().flatten()) {
            assert!((l - (a * p + b * q)).norm() < 1e-12 * scale);
        }
    }

    #[test]
    fn normal_operator_is_non_expansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = small_model(&mut rng);
        let mut x = random_tsmi(16, 4, &mut rng);
        let mut est = 0.0;
        for _ in 0..50 {
            let nx = x.norm_sqr().sqrt();
            x = x.scaled(1.0 / nx);
            x = model.adjoint(&model.apply(&x).unwrap()).unwrap();
            est = x.norm_sqr().sqrt();
        }
        assert!(est <= 1.0 + 1e-6, "{est}");
    }

    #[test]
    fn noise_power_and_determinism() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = small_model(&mut rng);
        let y = model.apply(&random_tsmi(16, 4, &mut rng)).unwrap();
        assert_eq!(add_noise(&y, f64::INFINITY, 1).unwrap(), y);
        let a = add_noise(&y, 30.0, 9).unwrap();
        assert_eq!(a, add_noise(&y, 30.0, 9).unwrap());
        assert_ne!(a, add_noise(&y, 30.0, 10).unwrap());
        let snr = 10.0 * (y.norm_sqr() / a.sub(&y).norm_sqr()).log10();
        assert!((snr - 30.0).abs() < 0.5, "{snr}");
        assert!(add_noise(&y, f64::NAN, 1).is_err());
    }

    #[test]
    fn gradient_step_contracts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = small_model(&mut rng);
        let x = random_tsmi(16, 4, &mut rng);
        let consistent = model.apply(&x).unwrap();
        let same = gradient_step(&x, &consistent, 1.0, &model).unwrap();
        for (a, b) in same.data.iter().zip(&x.data) {
            assert!((a - b).norm() < 1e-12);
        }
        let y = random_kspace(&model.mask, &mut rng);
        assert_eq!(gradient_step(&x, &y, 0.0, &model).unwrap(), x);
        let before = model.data_fidelity(&x, &y).unwrap();
        let after = model.data_fidelity(&gradient_step(&x, &y, 1.0, &model).unwrap(), &y).unwrap();
        assert!(after < before);
    }

    #[test]
    fn shape_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let model = small_model(&mut rng);
        assert!(model.apply(&Tsmi::zeros(16, 3)).is_err());
        assert!(model.apply(&Tsmi::zeros(8, 4)).is_err());
        let bad = KSpaceData { frames: vec![vec![]; 12] };
        assert!(model.adjoint(&bad).is_err());
        let mask = default_masks(16, 10).unwrap();
        assert!(AcquisitionModel::new(mask, Subspace::identity(12)).is_err());
        let _ = flat_index(0, 0, 16);
    }
}
