//! Learned proximal gradient reconstruction.
//!
//! The prox is an auto-encoder: an encoder maps the real part of a TSMI to
//! normalized (T1, T2, PD) maps and a frozen pixel-wise Bloch decoder maps
//! (T1, T2) back to a compressed fingerprint, scaled by PD. PGD-Net unrolls
//! `g = x + α_t Hᴴ(y − Hx)`, `x = prox(g)` for T steps with shared encoder
//! weights and per-step scalars α_t.

use std::collections::BTreeMap;
use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::dict::CompressedDictionary;
use crate::error::{param_err, shape_err, MrfError, Result};
use crate::forward::{add_noise, AcquisitionModel, KSpaceData, Tsmi};
use crate::nn::{mse, Adam, Cache, LayerSpec, Network, NetworkSpec, Scalar, Tensor4};
use crate::recon_dm::QMaps;
use crate::seeds::derive_seed;
use crate::tensorfile::TensorFile;

pub const T1_MAX_MS: f64 = 4000.0;
pub const T2_MAX_MS: f64 = 600.0;
pub const ENCODER_WIDTH: usize = 64;
pub const DECODER_HIDDEN: usize = 300;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationSpec {
    pub t1_max: f64,
    pub t2_max: f64,
    pub pd_max: f64,
}

impl NormalizationSpec {
    pub fn new(pd_max: f64) -> Result<Self> {
        if !(pd_max > 0.0 && pd_max.is_finite()) {
            return param_err(format!("pd_max must be positive, got {pd_max}"));
        }
        Ok(NormalizationSpec {
            t1_max: T1_MAX_MS,
            t2_max: T2_MAX_MS,
            pd_max,
        })
    }

    pub fn scales(&self) -> [f64; 3] {
        [self.t1_max, self.t2_max, self.pd_max]
    }

    pub fn normalize(&self, q: &QMaps) -> NormMaps {
        let np = q.pixels();
        let mut data = Vec::with_capacity(3 * np);
        for (plane, scale) in [&q.t1_ms, &q.t2_ms, &q.pd].into_iter().zip(self.scales()) {
            data.extend(plane.iter().map(|v| v / scale));
        }
        NormMaps { grid_n: q.grid_n, data }
    }

    /// Denormalized maps with the PD foreground threshold applied.
    pub fn denormalize(&self, m: &NormMaps) -> QMaps {
        let np = m.grid_n * m.grid_n;
        let plane = |c: usize| -> Vec<f64> { m.data[c * np..(c + 1) * np].iter().map(|v| v * self.scales()[c]).collect() };
        let mut q = QMaps {
            grid_n: m.grid_n,
            t1_ms: plane(0),
            t2_ms: plane(1),
            pd: plane(2),
            foreground: vec![true; np],
        };
        q.apply_pd_threshold();
        q
    }
}

/// Normalized (T1, T2, PD) maps, channel-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormMaps {
    pub grid_n: usize,
    pub data: Vec<f64>,
}

impl NormMaps {
    pub fn channel(&self, c: usize) -> &[f64] {
        let np = self.grid_n * self.grid_n;
        &self.data[c * np..(c + 1) * np]
    }

    fn from_tensor<T: Scalar>(t: &Tensor4<T>) -> Self {
        NormMaps {
            grid_n: t.dims[2],
            data: t.data.iter().map(|v| v.f64()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub y: KSpaceData,
    pub x_target: Tsmi,
    pub m_target: NormMaps,
    pub qmaps: QMaps,
}

pub fn encoder_spec(s: usize) -> NetworkSpec {
    let w = ENCODER_WIDTH;
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv { k: 3, in_ch: s, out_ch: w },
            LayerSpec::Relu,
            LayerSpec::ResidualBlock { channels: w },
            LayerSpec::ResidualBlock { channels: w },
            LayerSpec::Conv { k: 1, in_ch: w, out_ch: w },
            LayerSpec::Relu,
            LayerSpec::Conv { k: 1, in_ch: w, out_ch: w },
            LayerSpec::Relu,
            LayerSpec::Conv { k: 1, in_ch: w, out_ch: 3 },
            LayerSpec::Sigmoid,
        ],
    }
}

pub fn decoder_spec(s: usize) -> NetworkSpec {
    NetworkSpec {
        layers: vec![
            LayerSpec::Conv { k: 1, in_ch: 2, out_ch: DECODER_HIDDEN },
            LayerSpec::Tanh,
            LayerSpec::Conv { k: 1, in_ch: DECODER_HIDDEN, out_ch: s },
        ],
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct DecoderHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for DecoderHyper {
    fn default() -> Self {
        DecoderHyper {
            epochs: 600,
            batch: 128,
            lr: 1e-2,
            holdout_fraction: 0.1,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecoderReport {
    pub train_nrmse: f64,
    pub holdout_nrmse: f64,
    pub epoch_losses: Vec<f64>,
}

fn grid_inputs<T: Scalar>(cdict: &CompressedDictionary, norm: &NormalizationSpec, idx: &[usize]) -> Tensor4<T> {
    let b = idx.len();
    let mut data = vec![T::zero(); 2 * b];
    for (k, &i) in idx.iter().enumerate() {
        let (t1, t2) = cdict.grid.entries[i];
        data[k] = T::of(t1 / norm.t1_max);
        data[b + k] = T::of(t2 / norm.t2_max);
    }
    Tensor4 { dims: [1, 2, 1, b], data }
}

fn grid_targets<T: Scalar>(cdict: &CompressedDictionary, idx: &[usize]) -> Tensor4<T> {
    let (b, s) = (idx.len(), cdict.s);
    let mut data = vec![T::zero(); s * b];
    for (k, &i) in idx.iter().enumerate() {
        for (j, &v) in cdict.atom(i).iter().enumerate() {
            data[j * b + k] = T::of(v);
        }
    }
    Tensor4 { dims: [1, s, 1, b], data }
}

/// ‖decoder(grid) − atoms‖ / ‖atoms‖ over the given grid entries.
pub fn decoder_nrmse<T: Scalar>(decoder: &Network<T>, cdict: &CompressedDictionary, norm: &NormalizationSpec, idx: &[usize]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for chunk in idx.chunks(4096) {
        let pred = decoder.infer(&grid_inputs::<T>(cdict, norm, chunk))?;
        let tgt = grid_targets::<T>(cdict, chunk);
        for (p, t) in pred.data.iter().zip(&tgt.data) {
            num += (p.f64() - t.f64()).powi(2);
            den += t.f64().powi(2);
        }
    }
    if den == 0.0 {
        return param_err("decoder targets are all zero");
    }
    Ok((num / den).sqrt())
}

/// Regression (T1n, T2n) → compressed fingerprint over the grid, with a
/// held-out split. Learning rate decays on a cosine schedule to 1% of `lr`.
pub fn train_bloch_decoder(cdict: &CompressedDictionary, norm: &NormalizationSpec, hyper: &DecoderHyper) -> Result<(Network<f32>, DecoderReport)> {
    if cdict.len() < 2 {
        return param_err("decoder training needs at least two grid entries");
    }
    if !(0.0..1.0).contains(&hyper.holdout_fraction) || hyper.batch == 0 {
        return param_err("invalid decoder hyper-parameters");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..cdict.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((cdict.len() as f64 * hyper.holdout_fraction).round() as usize).min(cdict.len() - 1);
    let (hold, train) = order.split_at(n_hold);
    let mut train = train.to_vec();

    let mut net = Network::<f32>::from_spec(&decoder_spec(cdict.s), derive_seed(hyper.seed, &[1]))?;
    let names = net.param_names();
    let mut opt = Adam::for_params(hyper.lr, &net.params());
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    for epoch in 0..hyper.epochs {
        opt.lr = cosine_lr(hyper.lr, epoch, hyper.epochs);
        train.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in train.chunks(hyper.batch).enumerate() {
            let x = grid_inputs::<f32>(cdict, norm, chunk);
            let tgt = grid_targets::<f32>(cdict, chunk);
            let (out, cache) = net.forward(&x)?;
            let (loss, g) = mse(&out.data, &tgt.data);
            if !loss.is_finite() {
                return Err(MrfError::Training(format!("decoder loss non-finite at epoch {epoch}, batch {b}")));
            }
            total += loss as f64 * chunk.len() as f64;
            let (grads, _) = net.backward(&cache, &Tensor4 { dims: out.dims, data: g })?;
            opt.update(&mut net.params_mut(), &grads, &names)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    let train_nrmse = decoder_nrmse(&net, cdict, norm, &train)?;
    let holdout_nrmse = if hold.is_empty() { train_nrmse } else { decoder_nrmse(&net, cdict, norm, hold)? };
    log::info!("decoder trained: train NRMSE {train_nrmse:.4}, held-out NRMSE {holdout_nrmse:.4}");
    Ok((
        net,
        DecoderReport {
            train_nrmse,
            holdout_nrmse,
            epoch_losses,
        },
    ))
}

fn clamp_unit(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// PD · decoder(T1n, T2n) per voxel; a real-valued TSMI.
pub fn decode_bloch<T: Scalar>(decoder: &Network<T>, m: &NormMaps, norm: &NormalizationSpec) -> Result<Tsmi> {
    let np = m.grid_n * m.grid_n;
    if m.data.len() != 3 * np {
        return shape_err("normalized maps must hold three channels");
    }
    if m.data.iter().any(|v| !(0.0..=1.0).contains(v)) {
        log::warn!("normalized maps outside [0, 1] were clamped before decoding");
    }
    let input = Tensor4 {
        dims: [1, 2, m.grid_n, m.grid_n],
        data: m.data[..2 * np].iter().map(|&v| T::of(clamp_unit(v))).collect(),
    };
    let b = decoder.infer(&input)?;
    let s = b.channels();
    let pd: Vec<f64> = m.data[2 * np..].iter().map(|&v| clamp_unit(v) * norm.pd_max).collect();
    let real: Vec<f64> = (0..s * np).map(|i| pd[i % np] * b.data[i].f64()).collect();
    Tsmi::from_real(m.grid_n, s, &real)
}

fn real_tensor<T: Scalar>(g: &Tsmi) -> Tensor4<T> {
    Tensor4 {
        dims: [1, g.s, g.grid_n, g.grid_n],
        data: g.data.iter().map(|c| T::of(c.re)).collect(),
    }
}

/// Encoder on Re(g), then the Bloch decoder.
pub fn prox_apply<T: Scalar>(encoder: &Network<T>, decoder: &Network<T>, g: &Tsmi, norm: &NormalizationSpec) -> Result<(NormMaps, Tsmi)> {
    if encoder.in_channels() != g.s || decoder.out_channels() != g.s {
        return shape_err(format!("prox networks expect {} channels, TSMI has {}", encoder.in_channels(), g.s));
    }
    let m = NormMaps::from_tensor(&encoder.infer(&real_tensor::<T>(g))?);
    let x = decode_bloch(decoder, &m, norm)?;
    Ok((m, x))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub gamma: f64,
    pub beta: [f64; 3],
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            gamma: 1e-3,
            beta: [1.0, 20.0, 2.5],
            lambda: 1e-2,
        }
    }
}

impl LossWeights {
    /// β-weighted map loss only (encoder pretraining).
    pub fn maps_only(&self) -> Self {
        LossWeights {
            gamma: 0.0,
            lambda: 0.0,
            beta: self.beta,
        }
    }

    fn validate(&self) -> Result<()> {
        if [self.gamma, self.lambda].iter().chain(&self.beta).any(|w| !(*w >= 0.0 && w.is_finite())) {
            return param_err("loss weights must be finite and non-negative");
        }
        Ok(())
    }
}

/// Encoder, frozen decoder and per-step scalars.
#[derive(Debug)]
pub struct PgdNet<T> {
    pub encoder: Network<T>,
    pub decoder: Network<T>,
    pub alphas: Vec<T>,
    pub norm: NormalizationSpec,
}

impl<T: Scalar> Clone for PgdNet<T> {
    fn clone(&self) -> Self {
        PgdNet {
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            alphas: self.alphas.clone(),
            norm: self.norm,
        }
    }
}

impl<T: Scalar> PartialEq for PgdNet<T> {
    fn eq(&self, other: &Self) -> bool {
        self.encoder == other.encoder && self.decoder == other.decoder && self.alphas == other.alphas && self.norm == other.norm
    }
}

impl<T: Scalar> PgdNet<T> {
    pub fn new(encoder: Network<T>, decoder: Network<T>, t: usize, norm: NormalizationSpec) -> Result<Self> {
        if t == 0 {
            return param_err("unroll depth T must be at least 1");
        }
        if encoder.out_channels() != 3 || decoder.in_channels() != 2 || encoder.in_channels() != decoder.out_channels() {
            return shape_err("encoder must map s→3 channels and decoder 2→s channels");
        }
        Ok(PgdNet {
            encoder,
            decoder,
            alphas: vec![T::one(); t],
            norm,
        })
    }

    pub fn depth(&self) -> usize {
        self.alphas.len()
    }

    pub fn s(&self) -> usize {
        self.encoder.in_channels()
    }

    /// Same parameters with a different unroll depth (new α initialized to 1).
    pub fn with_depth(&self, t: usize) -> Result<Self> {
        let mut out = PgdNet::new(self.encoder.clone(), self.decoder.clone(), t, self.norm)?;
        for (a, b) in out.alphas.iter_mut().zip(&self.alphas) {
            *a = *b;
        }
        Ok(out)
    }

    pub fn cast<U: Scalar>(&self) -> PgdNet<U> {
        PgdNet {
            encoder: self.encoder.cast(),
            decoder: self.decoder.cast(),
            alphas: self.alphas.iter().map(|a| U::of(a.f64())).collect(),
            norm: self.norm,
        }
    }
}

/// One unrolled step and what its reverse pass needs.
#[derive(Debug)]
pub struct Step<T> {
    pub g: Tsmi,
    pub m: Tensor4<T>,
    pub b: Tensor4<T>,
    pub x: Tsmi,
    /// Hᴴ(y − H x)
    pub residual_bp: Tsmi,
    /// ‖y − H x‖²
    pub fidelity: f64,
    pub enc_cache: Option<Cache<T>>,
    pub dec_cache: Option<Cache<T>>,
}

#[derive(Debug)]
pub struct Trajectory<T> {
    /// Hᴴ y, the residual back-projection at x⁰ = 0.
    pub bp0: Tsmi,
    pub steps: Vec<Step<T>>,
}

impl<T: Scalar> Trajectory<T> {
    pub fn last(&self) -> &Step<T> {
        self.steps.last().expect("T >= 1")
    }

    pub fn maps(&self) -> NormMaps {
        NormMaps::from_tensor(&self.last().m)
    }
}

fn check_model<T: Scalar>(net: &PgdNet<T>, model: &AcquisitionModel) -> Result<()> {
    if net.s() != model.s() {
        return shape_err(format!("network uses s = {}, acquisition model s = {}", net.s(), model.s()));
    }
    Ok(())
}

/// Runs the unrolled recurrence from x⁰ = 0. With `record` the activation
/// caches needed by [`pgdnet_backward`] are kept.
pub fn pgdnet_forward<T: Scalar>(net: &PgdNet<T>, y: &KSpaceData, model: &AcquisitionModel, record: bool) -> Result<Trajectory<T>> {
    check_model(net, model)?;
    let n = model.grid_n;
    let np = n * n;
    let s = model.s();
    let bp0 = model.adjoint(y)?;
    let mut steps: Vec<Step<T>> = Vec::with_capacity(net.depth());
    let mut x = Tsmi::zeros(n, s);
    for &alpha in &net.alphas {
        let prev_bp = steps.last().map_or(&bp0, |st| &st.residual_bp);
        let mut g = x.clone();
        g.axpy(Complex64::new(alpha.f64(), 0.0), prev_bp);
        let u = real_tensor::<T>(&g);
        let (m, enc_cache) = if record {
            let (m, c) = net.encoder.forward(&u)?;
            (m, Some(c))
        } else {
            (net.encoder.infer(&u)?, None)
        };
        let dec_in = Tensor4 {
            dims: [1, 2, n, n],
            data: m.data[..2 * np].to_vec(),
        };
        let (b, dec_cache) = if record {
            let (b, c) = net.decoder.forward(&dec_in)?;
            (b, Some(c))
        } else {
            (net.decoder.infer(&dec_in)?, None)
        };
        let pd_max = net.norm.pd_max;
        let real: Vec<f64> = (0..s * np).map(|i| pd_max * m.data[2 * np + i % np].f64() * b.data[i].f64()).collect();
        x = Tsmi::from_real(n, s, &real)?;
        let residual = y.sub(&model.apply(&x)?);
        let fidelity = residual.norm_sqr();
        let residual_bp = model.adjoint(&residual)?;
        steps.push(Step {
            g,
            m,
            b,
            x: x.clone(),
            residual_bp,
            fidelity,
            enc_cache,
            dec_cache,
        });
    }
    Ok(Trajectory { bp0, steps })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    /// γ · MSE(x_target, x^T)
    pub tsmi: f64,
    /// Σ_j β_j · MSE(m_target_j, m^T_j)
    pub maps: f64,
    /// λ · Σ_t MSE(y, H x^t)
    pub consistency: f64,
    pub total: f64,
}

/// Mean of |a − b|² over complex entries.
fn complex_mse(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).norm_sqr()).sum::<f64>() / a.len().max(1) as f64
}

pub fn pgdnet_loss<T: Scalar>(traj: &Trajectory<T>, sample: &TrainSample, w: &LossWeights, n_samples: usize) -> Result<LossTerms> {
    let last = traj.last();
    if last.x.data.len() != sample.x_target.data.len() || last.m.data.len() != sample.m_target.data.len() {
        return shape_err("trajectory and training sample disagree in shape");
    }
    let tsmi = w.gamma * complex_mse(&last.x.data, &sample.x_target.data);
    let np = last.m.plane();
    let maps: f64 = (0..3)
        .map(|j| {
            let est = &last.m.data[j * np..(j + 1) * np];
            let tgt = sample.m_target.channel(j);
            w.beta[j] * est.iter().zip(tgt).map(|(e, t)| (e.f64() - t).powi(2)).sum::<f64>() / np as f64
        })
        .sum();
    let consistency = w.lambda * traj.steps.iter().map(|st| st.fidelity).sum::<f64>() / n_samples.max(1) as f64;
    Ok(LossTerms {
        tsmi,
        maps,
        consistency,
        total: tsmi + maps + consistency,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PgdGrads<T> {
    pub encoder: Vec<Vec<T>>,
    pub alphas: Vec<T>,
}

/// Exact reverse pass of [`pgdnet_loss`] through the recorded trajectory,
/// including the gradient steps. Decoder gradients are not returned.
pub fn pgdnet_backward<T: Scalar>(
    net: &PgdNet<T>,
    traj: &Trajectory<T>,
    sample: &TrainSample,
    w: &LossWeights,
    model: &AcquisitionModel,
) -> Result<(LossTerms, PgdGrads<T>)> {
    check_model(net, model)?;
    if traj.steps.len() != net.depth() {
        return shape_err("trajectory depth differs from the network's");
    }
    let n_samples = sample.y.n_samples();
    let terms = pgdnet_loss(traj, sample, w, n_samples)?;
    let last = traj.last();
    let np = last.m.plane();
    let s = net.s();
    let nx = (s * np) as f64;
    let pd_max = net.norm.pd_max;
    let lam = 2.0 * w.lambda / n_samples.max(1) as f64;

    let mut enc_grads: Vec<Vec<T>> = net.encoder.params().iter().map(|p| vec![T::zero(); p.len()]).collect();
    let mut alpha_grads = vec![T::zero(); net.depth()];
    let mut xbar: Vec<f64> = last
        .x
        .data
        .iter()
        .zip(&sample.x_target.data)
        .map(|(x, t)| 2.0 * w.gamma * (x.re - t.re) / nx)
        .collect();

    for t in (0..traj.steps.len()).rev() {
        let st = &traj.steps[t];
        let (Some(enc_cache), Some(dec_cache)) = (&st.enc_cache, &st.dec_cache) else {
            return Err(MrfError::Usage("trajectory was recorded without caches".into()));
        };
        for (xb, r) in xbar.iter_mut().zip(&st.residual_bp.data) {
            *xb -= lam * r.re;
        }
        let mut mbar = vec![0.0; 3 * np];
        if t + 1 == traj.steps.len() {
            for j in 0..3 {
                let tgt = sample.m_target.channel(j);
                for v in 0..np {
                    mbar[j * np + v] = 2.0 * w.beta[j] * (st.m.data[j * np + v].f64() - tgt[v]) / np as f64;
                }
            }
        }
        let mut bbar = Tensor4::<T>::zeros(st.b.dims);
        for j in 0..s {
            for v in 0..np {
                let i = j * np + v;
                bbar.data[i] = T::of(pd_max * st.m.data[2 * np + v].f64() * xbar[i]);
                mbar[2 * np + v] += pd_max * xbar[i] * st.b.data[i].f64();
            }
        }
        let (_, din) = net.decoder.backward(dec_cache, &bbar)?;
        for (mb, d) in mbar.iter_mut().zip(&din.data) {
            *mb += d.f64();
        }
        let mbar_t = Tensor4 {
            dims: st.m.dims,
            data: mbar.iter().map(|&v| T::of(v)).collect(),
        };
        let (g, ubar) = net.encoder.backward(enc_cache, &mbar_t)?;
        for (acc, gi) in enc_grads.iter_mut().zip(g) {
            acc.iter_mut().zip(gi).for_each(|(a, b)| *a += b);
        }
        let ubar: Vec<f64> = ubar.data.iter().map(|v| v.f64()).collect();
        let prev_bp = if t == 0 { &traj.bp0 } else { &traj.steps[t - 1].residual_bp };
        alpha_grads[t] = T::of(ubar.iter().zip(&prev_bp.data).map(|(u, r)| u * r.re).sum());
        if t > 0 {
            let a = net.alphas[t].f64();
            let normal = model.normal_real(&ubar)?;
            xbar = ubar.iter().zip(&normal).map(|(u, n)| u - a * n).collect();
        }
    }
    Ok((
        terms,
        PgdGrads {
            encoder: enc_grads,
            alphas: alpha_grads,
        },
    ))
}

/// Cosine decay from `base` to `base / 100` over `epochs`.
pub fn cosine_lr(base: f64, epoch: usize, epochs: usize) -> f64 {
    base * (0.01 + 0.99 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainHyper {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Follow [`cosine_lr`] instead of a constant rate.
    pub cosine_decay: bool,
    /// Separate Adam rate for the step sizes; `None` shares `lr`.
    pub alpha_lr: Option<f64>,
    /// Fresh noise at this SNR is drawn on every epoch; `None` uses `sample.y` as is.
    pub snr_db: Option<f64>,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 2000,
            batch: 4,
            lr: 1e-4,
            cosine_decay: true,
            alpha_lr: None,
            snr_db: Some(30.0),
            weights: LossWeights::default(),
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub alphas: Vec<f64>,
}

fn epoch_kspace(sample: &TrainSample, model: &AcquisitionModel, hyper: &TrainHyper, epoch: usize, index: usize) -> Result<KSpaceData> {
    match hyper.snr_db {
        None => Ok(sample.y.clone()),
        Some(snr) => add_noise(&model.apply(&sample.x_target)?, snr, derive_seed(hyper.seed, &[0x7e, epoch as u64, index as u64])),
    }
}

fn run_training(net: &mut PgdNet<f32>, samples: &[TrainSample], model: &AcquisitionModel, hyper: &TrainHyper, train_alphas: bool) -> Result<TrainReport> {
    if samples.is_empty() || hyper.batch == 0 {
        return param_err("training needs samples and a positive batch size");
    }
    hyper.weights.validate()?;
    check_model(net, model)?;
    let names = net.encoder.param_names();
    let shapes: Vec<usize> = net.encoder.params().iter().map(|p| p.len()).collect();
    let mut opt = Adam::<f32>::new(hyper.lr, &shapes);
    let alpha_lr = hyper.alpha_lr.unwrap_or(hyper.lr);
    let mut opt_alpha = Adam::<f32>::new(alpha_lr, &[net.depth()]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(hyper.seed, &[0x5b]));
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut report = TrainReport::default();
    for epoch in 0..hyper.epochs {
        if hyper.cosine_decay {
            opt.lr = cosine_lr(hyper.lr, epoch, hyper.epochs);
            opt_alpha.lr = cosine_lr(alpha_lr, epoch, hyper.epochs);
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(hyper.batch).enumerate() {
            let mut grads: Vec<Vec<f32>> = shapes.iter().map(|&n| vec![0.0; n]).collect();
            let mut alpha_grads = vec![0.0f32; net.depth()];
            for &i in chunk {
                let y = epoch_kspace(&samples[i], model, hyper, epoch, i)?;
                let sample = TrainSample { y, ..samples[i].clone() };
                let traj = pgdnet_forward(net, &sample.y, model, true)?;
                let (terms, g) = pgdnet_backward(net, &traj, &sample, &hyper.weights, model)?;
                if !terms.total.is_finite() {
                    return Err(MrfError::Training(format!("non-finite loss at epoch {epoch}, batch {b}, sample {i}")));
                }
                epoch_loss += terms.total;
                let scale = 1.0 / chunk.len() as f32;
                for (acc, gi) in grads.iter_mut().zip(g.encoder) {
                    acc.iter_mut().zip(gi).for_each(|(a, v)| *a += scale * v);
                }
                alpha_grads.iter_mut().zip(g.alphas).for_each(|(a, v)| *a += scale * v);
            }
            let fail = |e: MrfError| MrfError::Training(format!("epoch {epoch}, batch {b}: {e}"));
            opt.update(&mut net.encoder.params_mut(), &grads, &names).map_err(fail)?;
            if train_alphas {
                opt_alpha.update(&mut [&mut net.alphas[..]], &[alpha_grads], &["alphas".to_string()]).map_err(fail)?;
            }
        }
        let mean = epoch_loss / samples.len() as f64;
        log::info!("epoch {epoch}: loss {mean:.6e}");
        report.epoch_losses.push(mean);
    }
    report.alphas = net.alphas.iter().map(|&a| a as f64).collect();
    Ok(report)
}

/// Supervised encoder regression on back-projected TSMIs (β-weighted map loss).
pub fn pretrain_encoder(
    encoder: &mut Network<f32>,
    decoder: &Network<f32>,
    norm: NormalizationSpec,
    samples: &[TrainSample],
    model: &AcquisitionModel,
    hyper: &TrainHyper,
) -> Result<TrainReport> {
    let mut net = PgdNet::new(encoder.clone(), decoder.clone(), 1, norm)?;
    let h = TrainHyper {
        weights: hyper.weights.maps_only(),
        ..hyper.clone()
    };
    let report = run_training(&mut net, samples, model, &h, false)?;
    *encoder = net.encoder;
    Ok(report)
}

/// End-to-end training of the encoder and step sizes; the decoder is untouched.
pub fn train_pgdnet(net: &mut PgdNet<f32>, samples: &[TrainSample], model: &AcquisitionModel, hyper: &TrainHyper) -> Result<TrainReport> {
    run_training(net, samples, model, hyper, true)
}

/// Denormalized maps (foreground-thresholded) and the final TSMI.
pub fn infer(net: &PgdNet<f32>, y: &KSpaceData, model: &AcquisitionModel) -> Result<(QMaps, Tsmi)> {
    let traj = pgdnet_forward(net, y, model, false)?;
    let m = traj.maps();
    let x = traj.steps.into_iter().last().expect("T >= 1").x;
    Ok((net.norm.denormalize(&m), x))
}

/// Hashes identifying the acquisition a model was trained for.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub subspace: String,
    pub mask: String,
    pub sequence: String,
}

/// Named networks, step sizes and metadata stored in one tensor file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: String,
    pub networks: BTreeMap<String, Network<f32>>,
    pub alphas: Vec<f32>,
    pub norm: NormalizationSpec,
    pub provenance: Provenance,
    pub config: Value,
}

impl Checkpoint {
    pub fn from_net(stage: &str, net: &PgdNet<f32>, provenance: Provenance, config: Value) -> Self {
        let mut networks = BTreeMap::new();
        networks.insert("encoder".to_string(), net.encoder.clone());
        networks.insert("decoder".to_string(), net.decoder.clone());
        Checkpoint {
            stage: stage.into(),
            networks,
            alphas: net.alphas.clone(),
            norm: net.norm,
            provenance,
            config,
        }
    }

    pub fn network(&self, name: &str) -> Result<&Network<f32>> {
        self.networks
            .get(name)
            .ok_or_else(|| MrfError::Usage(format!("checkpoint stage '{}' has no {name} network", self.stage)))
    }

    pub fn pgdnet(&self) -> Result<PgdNet<f32>> {
        let mut net = PgdNet::new(self.network("encoder")?.clone(), self.network("decoder")?.clone(), self.alphas.len().max(1), self.norm)?;
        if !self.alphas.is_empty() {
            net.alphas = self.alphas.clone();
        }
        Ok(net)
    }

    pub fn param_count(&self) -> usize {
        self.networks.values().map(|n| n.param_count()).sum::<usize>() + self.alphas.len()
    }

    pub fn to_tensor_file(&self) -> Result<TensorFile> {
        let mut flat: Vec<f32> = Vec::with_capacity(self.param_count());
        let mut layout = Vec::new();
        for (name, net) in &self.networks {
            layout.push(json!({"name": name, "spec": net.spec, "len": net.param_count()}));
            flat.extend(net.flat_params());
        }
        flat.extend(&self.alphas);
        let header = json!({
            "kind": "checkpoint",
            "format_version": 1,
            "stage": self.stage,
            "networks": layout,
            "alphas": self.alphas.len(),
            "normalization": self.norm,
            "provenance": self.provenance,
            "config": self.config,
        });
        TensorFile::from_f32(&[flat.len()], &flat, header)
    }

    pub fn from_tensor_file(tf: &TensorFile) -> Result<Self> {
        let h = &tf.header;
        if h.get("kind").and_then(Value::as_str) != Some("checkpoint") {
            return Err(MrfError::Format("tensor file is not a checkpoint".into()));
        }
        let bad = |what: &str| MrfError::Format(format!("checkpoint header: bad or missing {what}"));
        let flat = tf.to_f32()?;
        let mut offset = 0;
        let mut networks = BTreeMap::new();
        for entry in h.get("networks").and_then(Value::as_array).ok_or_else(|| bad("networks"))? {
            let name = entry.get("name").and_then(Value::as_str).ok_or_else(|| bad("network name"))?;
            let spec: NetworkSpec = serde_json::from_value(entry.get("spec").cloned().ok_or_else(|| bad("spec"))?)?;
            let mut net = Network::<f32>::from_spec(&spec, 0)?;
            let len = net.param_count();
            if offset + len > flat.len() {
                return Err(bad("payload length"));
            }
            net.set_flat_params(&flat[offset..offset + len])?;
            offset += len;
            networks.insert(name.to_string(), net);
        }
        let n_alpha = h.get("alphas").and_then(Value::as_u64).ok_or_else(|| bad("alphas"))? as usize;
        if offset + n_alpha != flat.len() {
            return Err(bad("payload length"));
        }
        Ok(Checkpoint {
            stage: h.get("stage").and_then(Value::as_str).ok_or_else(|| bad("stage"))?.to_string(),
            networks,
            alphas: flat[offset..].to_vec(),
            norm: serde_json::from_value(h.get("normalization").cloned().ok_or_else(|| bad("normalization"))?)?,
            provenance: serde_json::from_value(h.get("provenance").cloned().ok_or_else(|| bad("provenance"))?)?,
            config: h.get("config").cloned().unwrap_or(Value::Null),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_tensor_file()?.write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_tensor_file(&TensorFile::read(path)?)
    }

    /// Refuses deployment on a different acquisition.
    pub fn verify(&self, expected: &Provenance) -> Result<()> {
        for (what, a, b) in [
            ("subspace", &self.provenance.subspace, &expected.subspace),
            ("mask", &self.provenance.mask, &expected.mask),
            ("sequence", &self.provenance.sequence, &expected.sequence),
        ] {
            if a != b {
                return Err(MrfError::HashMismatch(format!("checkpoint {what} hash {a} differs from {b}")));
            }
        }
        Ok(())
    }
}
