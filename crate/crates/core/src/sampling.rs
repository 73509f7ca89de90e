//! Variable-density spiral readout quantised onto the Cartesian FFT grid,
//! rotated from one repetition to the next.
//!
//! Grid coordinates are centred: node (0, 0) is the DC frequency and a flat
//! index is `(ky + N/2) * N + (kx + N/2)`. The FFT layout conversion lives in
//! [`crate::forward`].

use std::collections::HashSet;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

/// Outer spiral radius as a fraction of the grid side. At N = 128 this puts
/// the last sample at radius 40, where quantisation yields ≈654 unique nodes
/// per frame.
pub const SPIRAL_OUTER_FRACTION: f64 = 0.3125;
pub const DEFAULT_SPIRAL_POINTS: usize = 1000;
pub const DEFAULT_ROTATION_DEG: f64 = 7.5;

#[derive(Clone, Debug, PartialEq)]
pub struct SpiralTrajectory {
    pub points: Vec<(f64, f64)>,
}

impl SpiralTrajectory {
    pub fn n_points(&self) -> usize {
        self.points.len()
    }

    pub fn radii(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|&(x, y)| x.hypot(y))
    }
}

/// k(τ) ∝ 1.05^θ e^{iθ}, θ = 16πτ/1000, τ = 1..n_points, with the default
/// outer radius `SPIRAL_OUTER_FRACTION · N`.
pub fn gen_spiral(n_points: usize, grid_n: usize) -> Result<SpiralTrajectory> {
    gen_spiral_with_radius(n_points, grid_n, SPIRAL_OUTER_FRACTION * grid_n as f64)
}

pub fn gen_spiral_with_radius(n_points: usize, grid_n: usize, outer_radius: f64) -> Result<SpiralTrajectory> {
    if n_points < 1 {
        return param_err("spiral needs at least one point");
    }
    if grid_n < 4 {
        return param_err(format!("grid side must be >= 4, got {grid_n}"));
    }
    if !(outer_radius > 0.0 && outer_radius <= grid_n as f64 / 2.0) {
        return param_err(format!("outer radius {outer_radius} outside (0, N/2]"));
    }
    let angle = |tau: usize| 16.0 * PI * tau as f64 / 1000.0;
    let growth = |tau: usize| 1.05f64.powf(angle(tau));
    let scale = outer_radius / growth(n_points);
    let points = (1..=n_points)
        .map(|tau| {
            let r = scale * growth(tau);
            let (s, c) = angle(tau).sin_cos();
            (r * c, r * s)
        })
        .collect();
    Ok(SpiralTrajectory { points })
}

pub fn rotate_trajectory(traj: &SpiralTrajectory, angle_deg: f64) -> SpiralTrajectory {
    let (s, c) = angle_deg.to_radians().sin_cos();
    SpiralTrajectory {
        points: traj.points.iter().map(|&(x, y)| (c * x - s * y, s * x + c * y)).collect(),
    }
}

/// Flat centred index of integer grid node (kx, ky).
pub fn flat_index(kx: i64, ky: i64, grid_n: usize) -> usize {
    let h = (grid_n / 2) as i64;
    ((ky + h) as usize) * grid_n + (kx + h) as usize
}

/// Inverse of [`flat_index`].
pub fn node_of(index: usize, grid_n: usize) -> (i64, i64) {
    let h = (grid_n / 2) as i64;
    ((index % grid_n) as i64 - h, (index / grid_n) as i64 - h)
}

/// Rounds every point to its nearest grid node (ties away from zero) and
/// deduplicates, keeping first occurrences in trajectory order.
pub fn quantize(traj: &SpiralTrajectory, grid_n: usize) -> Vec<usize> {
    let lo = -((grid_n / 2) as i64);
    let hi = (grid_n as i64 - 1) + lo;
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for &(x, y) in &traj.points {
        let (mut kx, mut ky) = (x.round() as i64, y.round() as i64);
        if kx < lo || kx > hi || ky < lo || ky > hi {
            log::debug!("spiral point ({x}, {y}) clamped to the grid boundary");
            kx = kx.clamp(lo, hi);
            ky = ky.clamp(lo, hi);
        }
        let idx = flat_index(kx, ky, grid_n);
        if seen.insert(idx) {
            out.push(idx);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplingMask {
    pub grid_n: usize,
    pub frames: Vec<Vec<usize>>,
    pub delta_deg: f64,
    pub n_points: usize,
}

impl SamplingMask {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn m_per_frame(&self) -> Vec<usize> {
        self.frames.iter().map(Vec::len).collect()
    }

    pub fn total_samples(&self) -> usize {
        self.frames.iter().map(Vec::len).sum()
    }

    /// Every grid node in every frame.
    pub fn full(grid_n: usize, l: usize) -> Self {
        let all: Vec<usize> = (0..grid_n * grid_n).collect();
        SamplingMask {
            grid_n,
            frames: vec![all; l],
            delta_deg: 0.0,
            n_points: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.grid_n * self.grid_n;
        for (t, f) in self.frames.iter().enumerate() {
            let mut seen = HashSet::with_capacity(f.len());
            for &i in f {
                if i >= cells || !seen.insert(i) {
                    return param_err(format!("frame {t}: index {i} out of range or repeated"));
                }
            }
        }
        Ok(())
    }

    pub fn union_coverage(&self) -> f64 {
        let u: HashSet<usize> = self.frames.iter().flatten().copied().collect();
        u.len() as f64 / (self.grid_n * self.grid_n) as f64
    }
}

/// Frame t samples the spiral rotated by t·delta_deg.
pub fn build_masks(traj: &SpiralTrajectory, l: usize, delta_deg: f64, grid_n: usize) -> Result<SamplingMask> {
    if l < 1 {
        return param_err("need at least one frame");
    }
    let frames = (0..l)
        .map(|t| {
            // reduce in degrees so full turns are exact
            let angle = (t as f64 * delta_deg).rem_euclid(360.0);
            quantize(&rotate_trajectory(traj, angle), grid_n)
        })
        .collect();
    Ok(SamplingMask {
        grid_n,
        frames,
        delta_deg,
        n_points: traj.n_points(),
    })
}

pub fn default_masks(grid_n: usize, l: usize) -> Result<SamplingMask> {
    let traj = gen_spiral(DEFAULT_SPIRAL_POINTS, grid_n)?;
    build_masks(&traj, l, DEFAULT_ROTATION_DEG, grid_n)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spiral_geometry() {
        let traj = gen_spiral(1000, 128).unwrap();
        let r: Vec<f64> = traj.radii().collect();
        assert!((r[999] - 40.0).abs() < 1e-12);
        assert!(r.windows(2).all(|w| w[1] >= w[0]));
        let expected_first = 40.0 / 1.05f64.powf(16.0 * PI * 999.0 / 1000.0);
        assert!((r[0] - expected_first).abs() < 1e-12);
        assert!(r[0] > 0.0);
        // eight revolutions: final angle is 16π ≡ 0
        let (x, y) = traj.points[999];
        assert!(y.abs() < 1e-9 && x > 0.0);
        let custom = gen_spiral_with_radius(1000, 128, 63.0).unwrap();
        assert!((custom.radii().last().unwrap() - 63.0).abs() < 1e-12);
    }

    #[test]
    fn spiral_param_errors() {
        assert!(gen_spiral(0, 128).is_err());
        assert!(gen_spiral(10, 3).is_err());
        assert!(gen_spiral_with_radius(10, 128, 65.0).is_err());
    }

    #[test]
    fn quantize_rounding_and_dedup() {
        let t = SpiralTrajectory { points: vec![(0.4, 0.4)] };
        assert_eq!(quantize(&t, 8), vec![flat_index(0, 0, 8)]);
        let t = SpiralTrajectory { points: vec![(1.2, -0.7), (1.2, -0.7), (0.9, -1.1)] };
        assert_eq!(quantize(&t, 8), vec![flat_index(1, -1, 8)]);
        // ties away from zero
        let t = SpiralTrajectory { points: vec![(0.5, -0.5), (-1.5, 2.5)] };
        assert_eq!(quantize(&t, 8), vec![flat_index(1, -1, 8), flat_index(-2, 3, 8)]);
        // clamping at the boundary
        let t = SpiralTrajectory { points: vec![(3.8, 0.0)] };
        assert_eq!(quantize(&t, 8), vec![flat_index(3, 0, 8)]);
    }

    #[test]
    fn flat_index_roundtrip() {
        for idx in 0..64 {
            let (kx, ky) = node_of(idx, 8);
            assert_eq!(flat_index(kx, ky, 8), idx);
        }
    }

    #[test]
    fn rotation_is_isometry() {
        let traj = gen_spiral(1000, 128).unwrap();
        assert_eq!(rotate_trajectory(&traj, 0.0), traj);
        let full = rotate_trajectory(&traj, 360.0);
        for (a, b) in full.points.iter().zip(&traj.points) {
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
        }
        let rot = rotate_trajectory(&traj, 7.5);
        for (a, b) in rot.radii().zip(traj.radii()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn default_masks_properties() {
        let mask = default_masks(128, 200).unwrap();
        assert_eq!(mask.len(), 200);
        assert_eq!(mask.frames[48], mask.frames[0]);
        assert_eq!(mask.frames[96], mask.frames[0]);
        assert!(mask.m_per_frame().iter().all(|&m| (600..=700).contains(&m)));
        assert!(mask.union_coverage() > 0.15);
        mask.validate().unwrap();
        assert_eq!(mask, default_masks(128, 200).unwrap());
    }
}
