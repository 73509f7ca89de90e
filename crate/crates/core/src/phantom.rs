//! Procedural ellipse phantoms with brain-like tissue classes, augmentation
//! and training-set assembly.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dict::{Subspace, TissueGrid};
use crate::error::{param_err, Result};
use crate::forward::{add_noise, AcquisitionModel, Tsmi};
use crate::proxnet::{NormalizationSpec, TrainSample};
use crate::recon_dm::QMaps;
use crate::seeds::derive_seed;
use crate::seqsim::{epg_simulate, SequenceParams};

pub const T1_HULL: (f64, f64) = (100.0, 4000.0);
pub const T2_HULL: (f64, f64) = (20.0, 600.0);
pub const MAX_ROTATION_DEG: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TissueClass {
    Wm,
    Gm,
    Csf,
    Rim,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueValues {
    pub t1_ms: f64,
    pub t2_ms: f64,
    pub pd: f64,
}

impl TissueClass {
    pub fn nominal(self) -> TissueValues {
        let (t1_ms, t2_ms, pd) = match self {
            TissueClass::Wm => (800.0, 80.0, 0.75),
            TissueClass::Gm => (1300.0, 110.0, 0.85),
            TissueClass::Csf => (3500.0, 500.0, 1.0),
            TissueClass::Rim => (300.0, 40.0, 0.3),
        };
        TissueValues { t1_ms, t2_ms, pd }
    }
}

/// Ellipse in normalized coordinates: the field of view spans [−1, 1]².
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub angle_deg: f64,
    pub class: TissueClass,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle_deg.to_radians().sin_cos();
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let u = (dx * c + dy * s) / self.axes.0;
        let v = (-dx * s + dy * c) / self.axes.1;
        u * u + v * v <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_n: usize,
    /// Painted in order, later ellipses on top.
    pub ellipses: Vec<Ellipse>,
    /// Relative half-width of the uniform per-ellipse jitter.
    pub jitter: f64,
    pub seed: u64,
}

pub fn gen_phantom(spec: &PhantomSpec) -> Result<QMaps> {
    if spec.grid_n == 0 || !(0.0..1.0).contains(&spec.jitter) {
        return param_err("phantom needs a positive grid and jitter in [0, 1)");
    }
    let n = spec.grid_n;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut q = QMaps::background(n);
    for e in &spec.ellipses {
        if !(e.axes.0 > 0.0 && e.axes.1 > 0.0) {
            return param_err(format!("ellipse axes must be positive, got {:?}", e.axes));
        }
        let nom = e.class.nominal();
        let mut jit = |v: f64| v * (1.0 + rng.gen_range(-1.0..=1.0) * spec.jitter);
        let t1 = jit(nom.t1_ms).clamp(T1_HULL.0, T1_HULL.1);
        let t2 = jit(nom.t2_ms).clamp(T2_HULL.0, T2_HULL.1);
        let pd = jit(nom.pd).clamp(0.0, 1.0);
        for r in 0..n {
            let y = (r as f64 + 0.5) / n as f64 * 2.0 - 1.0;
            for c in 0..n {
                let x = (c as f64 + 0.5) / n as f64 * 2.0 - 1.0;
                if e.contains(x, y) {
                    let v = r * n + c;
                    q.t1_ms[v] = t1;
                    q.t2_ms[v] = t2;
                    q.pd[v] = pd;
                    q.foreground[v] = pd > 0.0;
                }
            }
        }
    }
    Ok(q)
}

/// Head-like slice: rim, CSF shell, cortex, white matter, deep grey nuclei,
/// ventricles and a few random lesion-sized blobs. `position` ∈ [0, 1] moves
/// through the head and shrinks the outline towards the ends.
pub fn brain_slice_spec(grid_n: usize, subject_seed: u64, position: f64, jitter: f64, seed: u64) -> PhantomSpec {
    let mut subj = ChaCha8Rng::seed_from_u64(subject_seed);
    let ax = subj.gen_range(0.72..0.84);
    let ay = subj.gen_range(0.84..0.95);
    let tilt = subj.gen_range(-6.0..6.0);
    let vent = subj.gen_range(0.8..1.2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sc = 0.6 + 0.4 * (std::f64::consts::PI * position.clamp(0.0, 1.0)).sin();
    let e = |cx: f64, cy: f64, a: f64, b: f64, ang: f64, class| Ellipse {
        center: (cx, cy),
        axes: (a, b),
        angle_deg: ang,
        class,
    };
    let (a, b) = (ax * sc, ay * sc);
    let mut ellipses = vec![
        e(0.0, 0.0, a, b, tilt, TissueClass::Rim),
        e(0.0, 0.0, a * 0.91, b * 0.92, tilt, TissueClass::Csf),
        e(0.0, 0.0, a * 0.85, b * 0.86, tilt, TissueClass::Gm),
        e(rng.gen_range(-0.03..0.03), rng.gen_range(-0.03..0.03), a * 0.66, b * 0.68, tilt, TissueClass::Wm),
    ];
    let mid = 1.0 - (2.0 * position - 1.0).abs();
    for side in [-1.0, 1.0] {
        ellipses.push(e(side * a * 0.32, b * 0.05, a * 0.12, b * 0.16, side * 15.0 + tilt, TissueClass::Gm));
        if mid > 0.3 {
            let v = vent * mid;
            ellipses.push(e(side * a * 0.12, -b * 0.1, a * 0.08 * v, b * 0.3 * v, side * 10.0 + tilt, TissueClass::Csf));
        }
    }
    for _ in 0..rng.gen_range(1..4) {
        let class = if rng.gen_bool(0.5) { TissueClass::Gm } else { TissueClass::Wm };
        let r = rng.gen_range(0.0..0.45);
        let th = rng.gen_range(0.0..std::f64::consts::TAU);
        ellipses.push(e(
            r * a * th.cos(),
            r * b * th.sin(),
            rng.gen_range(0.04..0.12),
            rng.gen_range(0.04..0.12),
            rng.gen_range(0.0..180.0),
            class,
        ));
    }
    PhantomSpec {
        grid_n,
        ellipses,
        jitter,
        seed: derive_seed(seed, &[0xe1]),
    }
}

/// Moves every foreground (T1, T2) onto its nearest grid node.
pub fn snap_to_grid(q: &QMaps, grid: &TissueGrid) -> QMaps {
    let mut out = q.clone();
    for v in 0..q.pixels() {
        if q.foreground[v] {
            let (t1, t2) = grid.entries[grid.nearest(q.t1_ms[v], q.t2_ms[v])];
            out.t1_ms[v] = t1;
            out.t2_ms[v] = t2;
        }
    }
    out
}

/// Rotation by `angle_deg` about the image centre (nearest neighbour) then
/// an optional left-right flip.
pub fn augment_with(q: &QMaps, angle_deg: f64, flip: bool) -> QMaps {
    let n = q.grid_n;
    let mut out = QMaps::background(n);
    let (s, c) = angle_deg.to_radians().sin_cos();
    let mid = (n as f64 - 1.0) / 2.0;
    for r in 0..n {
        for col in 0..n {
            let (x, y) = (col as f64 - mid, r as f64 - mid);
            let sx = (c * x + s * y + mid).round();
            let sy = (-s * x + c * y + mid).round();
            if sx < 0.0 || sy < 0.0 || sx >= n as f64 || sy >= n as f64 {
                continue;
            }
            let src = sy as usize * n + sx as usize;
            let dst = r * n + if flip { n - 1 - col } else { col };
            out.t1_ms[dst] = q.t1_ms[src];
            out.t2_ms[dst] = q.t2_ms[src];
            out.pd[dst] = q.pd[src];
            out.foreground[dst] = q.foreground[src];
        }
    }
    out
}

/// Uniform angle in ±8° and a fair-coin flip.
pub fn augment(q: &QMaps, rng: &mut impl Rng) -> QMaps {
    let angle = rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let flip = rng.gen_bool(0.5);
    augment_with(q, angle, flip)
}

/// PD-scaled compressed EPG fingerprints for every foreground voxel.
pub fn tsmi_from_maps(q: &QMaps, seq: &SequenceParams, subspace: &Subspace) -> Result<Tsmi> {
    if subspace.l != seq.len() {
        return param_err(format!("subspace has {} frames, sequence {}", subspace.l, seq.len()));
    }
    let s = subspace.s;
    let mut cache: HashMap<(u64, u64), Vec<f64>> = HashMap::new();
    let mut x = Tsmi::zeros(q.grid_n, s);
    for v in 0..q.pixels() {
        if !q.foreground[v] || q.pd[v] == 0.0 {
            continue;
        }
        let key = (q.t1_ms[v].to_bits(), q.t2_ms[v].to_bits());
        if !cache.contains_key(&key) {
            let f = epg_simulate(seq, q.t1_ms[v], q.t2_ms[v])?;
            let c: Vec<f64> = (0..s).map(|j| f.values.iter().enumerate().map(|(t, ft)| ft * subspace.at(t, j)).sum()).collect();
            cache.insert(key, c);
        }
        let atom: Vec<Complex64> = cache[&key].iter().map(|&c| Complex64::new(q.pd[v] * c, 0.0)).collect();
        x.set_voxel(v, &atom);
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub grid_n: usize,
    pub train_subjects: usize,
    pub test_subjects: usize,
    pub slices_per_subject: usize,
    /// Augmented copies added per training slice.
    pub augment_copies: usize,
    /// `None` for noiseless k-space.
    pub snr_db: Option<f64>,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            grid_n: 128,
            train_subjects: 7,
            test_subjects: 1,
            slices_per_subject: 16,
            augment_copies: 1,
            snr_db: Some(30.0),
            jitter: 0.05,
            seed: 1234,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleInfo {
    pub subject: usize,
    pub slice: usize,
    pub augmented: bool,
    pub test: bool,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub train: Vec<TrainSample>,
    pub test: Vec<TrainSample>,
    pub train_info: Vec<SampleInfo>,
    pub test_info: Vec<SampleInfo>,
    pub norm: NormalizationSpec,
}

/// Simulated acquisitions of procedural subjects. Test subjects come from a
/// separate seed stream; only the training split is augmented.
pub fn make_dataset(cfg: &DatasetConfig, model: &AcquisitionModel, seq: &SequenceParams, subspace: &Subspace) -> Result<Dataset> {
    if model.grid_n != cfg.grid_n || model.s() != subspace.s {
        return param_err("dataset grid/subspace disagree with the acquisition model");
    }
    if cfg.slices_per_subject == 0 || cfg.train_subjects == 0 {
        return param_err("dataset needs at least one training subject and slice");
    }
    let mut jobs = Vec::new();
    for (test, subjects, stream) in [(false, cfg.train_subjects, 1u64), (true, cfg.test_subjects, 2u64)] {
        for subject in 0..subjects {
            let subject_seed = derive_seed(cfg.seed, &[stream, subject as u64]);
            for slice in 0..cfg.slices_per_subject {
                let copies = if test { 0 } else { cfg.augment_copies };
                for copy in 0..=copies {
                    let seed = derive_seed(subject_seed, &[slice as u64, copy as u64]);
                    jobs.push((
                        SampleInfo {
                            subject,
                            slice,
                            augmented: copy > 0,
                            test,
                            seed,
                        },
                        subject_seed,
                    ));
                }
            }
        }
    }
    let maps: Vec<QMaps> = jobs
        .par_iter()
        .map(|(info, subject_seed)| {
            let position = (info.slice as f64 + 0.5) / cfg.slices_per_subject as f64;
            let spec = brain_slice_spec(cfg.grid_n, *subject_seed, position, cfg.jitter, derive_seed(*subject_seed, &[0x51, info.slice as u64]));
            let q = gen_phantom(&spec)?;
            Ok(if info.augmented {
                augment(&q, &mut ChaCha8Rng::seed_from_u64(info.seed))
            } else {
                q
            })
        })
        .collect::<Result<_>>()?;
    let pd_max = jobs
        .iter()
        .zip(&maps)
        .filter(|(j, _)| !j.0.test)
        .flat_map(|(_, q)| q.pd.iter().copied())
        .fold(0.0, f64::max);
    let norm = NormalizationSpec::new(if pd_max > 0.0 { pd_max } else { 1.0 })?;
    let samples: Vec<TrainSample> = jobs
        .par_iter()
        .zip(maps)
        .map(|((info, _), qmaps)| {
            let x_target = tsmi_from_maps(&qmaps, seq, subspace)?;
            let clean = model.apply(&x_target)?;
            let y = match cfg.snr_db {
                Some(snr) => add_noise(&clean, snr, derive_seed(info.seed, &[0x9]))?,
                None => clean,
            };
            Ok(TrainSample {
                y,
                x_target,
                m_target: norm.normalize(&qmaps),
                qmaps,
            })
        })
        .collect::<Result<_>>()?;
    let mut ds = Dataset {
        train: Vec::new(),
        test: Vec::new(),
        train_info: Vec::new(),
        test_info: Vec::new(),
        norm,
    };
    for ((info, _), sample) in jobs.into_iter().zip(samples) {
        if info.test {
            ds.test.push(sample);
            ds.test_info.push(info);
        } else {
            ds.train.push(sample);
            ds.train_info.push(info);
        }
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(ellipses: Vec<Ellipse>) -> PhantomSpec {
        PhantomSpec {
            grid_n: 24,
            ellipses,
            jitter: 0.05,
            seed: 3,
        }
    }

    fn full(class: TissueClass) -> Ellipse {
        Ellipse {
            center: (0.0, 0.0),
            axes: (3.0, 3.0),
            angle_deg: 0.0,
            class,
        }
    }

    #[test]
    fn empty_spec_is_background() {
        let q = gen_phantom(&spec(vec![])).unwrap();
        assert_eq!(q, QMaps::background(24));
    }

    #[test]
    fn full_field_ellipse_is_constant() {
        let q = gen_phantom(&spec(vec![full(TissueClass::Wm)])).unwrap();
        assert!(q.foreground.iter().all(|&f| f));
        assert!(q.t1_ms.iter().all(|&v| v == q.t1_ms[0]));
        assert!((q.t1_ms[0] / 800.0 - 1.0).abs() <= 0.05 + 1e-12);
        assert!((q.t2_ms[0] / 80.0 - 1.0).abs() <= 0.05 + 1e-12);
        assert!((q.pd[0] / 0.75 - 1.0).abs() <= 0.05 + 1e-12);
    }

    #[test]
    fn values_stay_in_hull() {
        let mut s = spec(vec![full(TissueClass::Csf)]);
        s.jitter = 0.5;
        for seed in 0..20 {
            s.seed = seed;
            let q = gen_phantom(&s).unwrap();
            assert!(q.t1_ms.iter().all(|&t| (100.0..=4000.0).contains(&t)));
            assert!(q.t2_ms.iter().all(|&t| (20.0..=600.0).contains(&t)));
            assert!(q.pd.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }

    #[test]
    fn augmentation_identities() {
        let q = gen_phantom(&brain_slice_spec(32, 5, 0.5, 0.05, 9)).unwrap();
        assert_eq!(augment_with(&q, 0.0, false), q);
        assert_eq!(augment_with(&augment_with(&q, 0.0, true), 0.0, true), q);
        let rotated = augment_with(&q, 7.0, false);
        let before = q.foreground_count() as f64;
        assert!((rotated.foreground_count() as f64 - before).abs() / before < 0.05);
        let values: std::collections::HashSet<u64> = q.t1_ms.iter().map(|v| v.to_bits()).collect();
        assert!(rotated.t1_ms.iter().all(|v| values.contains(&v.to_bits())));
    }

    #[test]
    fn brain_slices_have_all_classes() {
        let q = gen_phantom(&brain_slice_spec(64, 1, 0.5, 0.0, 2)).unwrap();
        let distinct: std::collections::BTreeSet<u64> = q.t1_ms.iter().map(|v| v.to_bits()).collect();
        for t1 in [800.0f64, 1300.0, 3500.0, 300.0] {
            assert!(distinct.contains(&t1.to_bits()), "{t1} missing");
        }
        assert!(q.foreground_count() > 64 * 64 / 4);
    }
}
