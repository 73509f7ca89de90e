//! Bloch response of the inversion-recovery FISP sequence.
//!
//! [`epg_simulate`] runs the Extended Phase Graph recursion for a
//! gradient-spoiled sequence; [`isochromat_oracle`] integrates an ensemble of
//! dephased spins directly and serves as an independent check on it.
//!
//! All pulses are applied about a fixed transverse axis (the y axis) so the
//! echo signal F0 stays real; the configuration states are therefore stored
//! as real numbers throughout.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Maximum dephasing order retained by the EPG recursion.
pub const EPG_MAX_STATES: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceParams {
    pub flip_deg: Vec<f64>,
    pub tr_ms: f64,
    pub te_ms: f64,
    pub tinv_ms: f64,
    pub inversion: bool,
}

impl SequenceParams {
    pub fn len(&self) -> usize {
        self.flip_deg.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flip_deg.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.flip_deg.is_empty() {
            return param_err("sequence needs at least one repetition");
        }
        if let Some(bad) = self.flip_deg.iter().find(|a| !(0.0..=180.0).contains(*a)) {
            return param_err(format!("flip angle {bad} outside [0, 180] degrees"));
        }
        if !(self.te_ms >= 0.0 && self.tr_ms > self.te_ms) {
            return param_err(format!(
                "need tr_ms > te_ms >= 0, got tr={} te={}",
                self.tr_ms, self.te_ms
            ));
        }
        if !(self.tinv_ms >= 0.0) {
            return param_err(format!("tinv_ms must be >= 0, got {}", self.tinv_ms));
        }
        Ok(())
    }
}

impl Default for SequenceParams {
    fn default() -> Self {
        build_sequence(&SequenceConfig::default()).expect("default sequence is valid")
    }
}

/// JSON-facing sequence description. Missing keys fall back to the defaults
/// (200 repetitions, 1°→40° ramp, TR 10 ms, TE 0.46 ms, Tinv 18 ms).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceConfig {
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_start_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flip_end_deg: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tr_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub te_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tinv_ms: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inversion: Option<bool>,
}

impl SequenceConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Builds the linear flip-angle ramp, applying any overrides.
pub fn build_sequence(config: &SequenceConfig) -> Result<SequenceParams> {
    let l = config.l.unwrap_or(200);
    if l == 0 {
        return param_err("L must be >= 1");
    }
    let start = config.flip_start_deg.unwrap_or(1.0);
    let end = config.flip_end_deg.unwrap_or(40.0);
    let flip_deg = if l == 1 {
        vec![start]
    } else {
        (0..l)
            .map(|k| start + (end - start) * k as f64 / (l - 1) as f64)
            .collect()
    };
    let seq = SequenceParams {
        flip_deg,
        tr_ms: config.tr_ms.unwrap_or(10.0),
        te_ms: config.te_ms.unwrap_or(0.46),
        tinv_ms: config.tinv_ms.unwrap_or(18.0),
        inversion: config.inversion.unwrap_or(true),
    };
    seq.validate()?;
    Ok(seq)
}

/// Transverse echo signal per repetition (signed, not magnitude).
#[derive(Clone, Debug, PartialEq)]
pub struct Fingerprint {
    pub values: Vec<f64>,
}

impl Fingerprint {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn check_relaxation(t1_ms: f64, t2_ms: f64) -> Result<()> {
    if !(t1_ms > 0.0 && t2_ms > 0.0) || !t1_ms.is_finite() || !t2_ms.is_finite() {
        return param_err(format!(
            "relaxation times must be positive and finite, got T1={t1_ms} T2={t2_ms}"
        ));
    }
    if t2_ms > t1_ms {
        log::warn!("T2={t2_ms} ms exceeds T1={t1_ms} ms; simulating anyway");
    }
    Ok(())
}

struct Relax {
    e1: f64,
    e2: f64,
}

impl Relax {
    fn over(dt: f64, t1: f64, t2: f64) -> Self {
        Relax {
            e1: (-dt / t1).exp(),
            e2: (-dt / t2).exp(),
        }
    }
}

/// Longitudinal magnetisation at the first pulse.
fn initial_mz(seq: &SequenceParams, t1_ms: f64) -> f64 {
    if seq.inversion {
        let e = (-seq.tinv_ms / t1_ms).exp();
        -e + (1.0 - e)
    } else {
        1.0
    }
}

/// EPG simulation of the spoiled sequence with the default state truncation.
pub fn epg_simulate(seq: &SequenceParams, t1_ms: f64, t2_ms: f64) -> Result<Fingerprint> {
    epg_simulate_with_states(seq, t1_ms, t2_ms, seq.len().min(EPG_MAX_STATES))
}

/// EPG simulation keeping dephasing orders `0..n_states`.
pub fn epg_simulate_with_states(
    seq: &SequenceParams,
    t1_ms: f64,
    t2_ms: f64,
    n_states: usize,
) -> Result<Fingerprint> {
    seq.validate()?;
    check_relaxation(t1_ms, t2_ms)?;
    let n = n_states.max(1);
    let mut fp = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut z = vec![0.0; n];
    z[0] = initial_mz(seq, t1_ms);

    let echo = Relax::over(seq.te_ms, t1_ms, t2_ms);
    let rest = Relax::over(seq.tr_ms - seq.te_ms, t1_ms, t2_ms);
    let mut values = Vec::with_capacity(seq.len());
    // highest order that can be populated so far
    let mut active = 1usize;

    for &flip in &seq.flip_deg {
        let a = flip.to_radians();
        let (sa, ca) = a.sin_cos();
        let c2 = (0.5 * a).cos().powi(2);
        let s2 = (0.5 * a).sin().powi(2);
        for k in 0..active {
            let (p, m, l) = (fp[k], fm[k], z[k]);
            fp[k] = c2 * p - s2 * m + sa * l;
            fm[k] = -s2 * p + c2 * m + sa * l;
            z[k] = -0.5 * sa * (p + m) + ca * l;
        }

        relax(&mut fp, &mut fm, &mut z, &echo, active);
        values.push(fp[0]);
        relax(&mut fp, &mut fm, &mut z, &rest, active);

        // spoiler: F+ climbs one order, F- descends one order
        let top = active.min(n - 1);
        for k in (1..=top).rev() {
            fp[k] = fp[k - 1];
        }
        for k in 0..active {
            fm[k] = if k + 1 < n { fm[k + 1] } else { 0.0 };
        }
        fp[0] = fm[0];
        active = (active + 1).min(n);
    }
    Ok(Fingerprint { values })
}

fn relax(fp: &mut [f64], fm: &mut [f64], z: &mut [f64], r: &Relax, active: usize) {
    for k in 0..active {
        fp[k] *= r.e2;
        fm[k] *= r.e2;
        z[k] *= r.e1;
    }
    z[0] += 1.0 - r.e1;
}

/// Brute-force spin-ensemble simulation with ideal spoiling: spin `j`
/// accumulates a dephasing of 2π(j + ½)/n per repetition.
pub fn isochromat_oracle(
    seq: &SequenceParams,
    t1_ms: f64,
    t2_ms: f64,
    n_spins: usize,
) -> Result<Fingerprint> {
    seq.validate()?;
    check_relaxation(t1_ms, t2_ms)?;
    if n_spins < 100 {
        return param_err(format!("isochromat oracle needs >= 100 spins, got {n_spins}"));
    }
    let mz0 = initial_mz(seq, t1_ms);
    let mut spins: Vec<[f64; 3]> = vec![[0.0, 0.0, mz0]; n_spins];
    let precess: Vec<(f64, f64)> = (0..n_spins)
        .map(|j| (2.0 * std::f64::consts::PI * (j as f64 + 0.5) / n_spins as f64).sin_cos())
        .collect();
    let echo = Relax::over(seq.te_ms, t1_ms, t2_ms);
    let rest = Relax::over(seq.tr_ms - seq.te_ms, t1_ms, t2_ms);

    let mut values = Vec::with_capacity(seq.len());
    for &flip in &seq.flip_deg {
        let (sa, ca) = flip.to_radians().sin_cos();
        let mut acc = 0.0;
        for (m, &(sp, cp)) in spins.iter_mut().zip(&precess) {
            // rotation about y
            let (x, y, z) = (m[0], m[1], m[2]);
            let (x, z) = (ca * x + sa * z, -sa * x + ca * z);
            let (x, y, z) = (x * echo.e2, y * echo.e2, z * echo.e1 + 1.0 - echo.e1);
            acc += x;
            let (x, y, z) = (x * rest.e2, y * rest.e2, z * rest.e1 + 1.0 - rest.e1);
            // spoiler dephasing about z
            *m = [cp * x - sp * y, sp * x + cp * y, z];
        }
        values.push(acc / n_spins as f64);
    }
    Ok(Fingerprint { values })
}
