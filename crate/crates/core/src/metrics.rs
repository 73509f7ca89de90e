//! Map-quality metrics (NRMSE, MAE, SSIM) and Table-style reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::recon_dm::QMaps;

fn check(est: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<()> {
    if est.len() != gt.len() || mask.is_some_and(|m| m.len() != gt.len()) {
        return shape_err(format!("metric inputs differ in length ({} vs {})", est.len(), gt.len()));
    }
    Ok(())
}

fn selected<'a>(est: &'a [f64], gt: &'a [f64], mask: Option<&'a [bool]>) -> impl Iterator<Item = (f64, f64)> + 'a {
    est.iter()
        .zip(gt)
        .enumerate()
        .filter(move |(i, _)| mask.map_or(true, |m| m[*i]))
        .map(|(_, (&e, &g))| (e, g))
}

/// ‖est − gt‖ / ‖gt‖ over the masked voxels.
pub fn nrmse(est: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check(est, gt, mask)?;
    let (num, den) = selected(est, gt, mask).fold((0.0, 0.0), |(n, d), (e, g)| (n + (e - g).powi(2), d + g * g));
    if den == 0.0 {
        return param_err("NRMSE undefined for a zero reference");
    }
    Ok((num / den).sqrt())
}

/// Mean |est − gt| over the masked voxels, in the maps' own units.
pub fn mae(est: &[f64], gt: &[f64], mask: Option<&[bool]>) -> Result<f64> {
    check(est, gt, mask)?;
    let (sum, count) = selected(est, gt, mask).fold((0.0, 0usize), |(s, c), (e, g)| (s + (e - g).abs(), c + 1));
    if count == 0 {
        return param_err("MAE over an empty mask");
    }
    Ok(sum / count as f64)
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn gaussian_window(size: usize) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.into_iter().map(|v| v / total).collect()
}

/// Mean SSIM over all fully-contained Gaussian windows (11×11, σ = 1.5; the
/// window shrinks to the largest odd size on smaller images). The dynamic
/// range is max(gt) over `mask` (whole image when `None`).
pub fn ssim(est: &[f64], gt: &[f64], grid_n: usize, mask: Option<&[bool]>) -> Result<f64> {
    check(est, gt, mask)?;
    if gt.len() != grid_n * grid_n || grid_n == 0 {
        return shape_err(format!("{} values for a {grid_n}×{grid_n} image", gt.len()));
    }
    if est == gt {
        return Ok(1.0);
    }
    let mut range = selected(gt, gt, mask).map(|(g, _)| g).fold(0.0, f64::max);
    if range <= 0.0 {
        range = est.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    if range <= 0.0 {
        range = 1.0;
    }
    let c1 = (K1 * range).powi(2);
    let c2 = (K2 * range).powi(2);
    let size = if grid_n >= SSIM_WINDOW { SSIM_WINDOW } else if grid_n % 2 == 1 { grid_n } else { grid_n - 1 };
    let w1 = gaussian_window(size);
    let n = grid_n;
    let out = n - size + 1;
    // separable filtering: rows then columns, valid region only
    let filter = |img: &[f64]| -> Vec<f64> {
        let mut rows = vec![0.0; n * out];
        for r in 0..n {
            for c in 0..out {
                rows[r * out + c] = (0..size).map(|k| w1[k] * img[r * n + c + k]).sum();
            }
        }
        let mut res = vec![0.0; out * out];
        for r in 0..out {
            for c in 0..out {
                res[r * out + c] = (0..size).map(|k| w1[k] * rows[(r + k) * out + c]).sum();
            }
        }
        res
    };
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(x, y)| x * y).collect() };
    let mu_x = filter(est);
    let mu_y = filter(gt);
    let sxx = filter(&prod(est, est));
    let syy = filter(&prod(gt, gt));
    let sxy = filter(&prod(est, gt));
    let total: f64 = (0..out * out)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let vx = sxx[i] - mx * mx;
            let vy = syy[i] - my * my;
            let cxy = sxy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    Ok(total / (out * out) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapMetrics {
    pub nrmse: f64,
    pub ssim: f64,
    pub mae: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// keys "t1", "t2", "pd"
    pub maps: BTreeMap<String, MapMetrics>,
    pub runtime_s: Option<f64>,
    pub memory_bytes: Option<u64>,
    pub config_hash: String,
    pub masking: String,
}

pub const MASKING_NOTE: &str = "T1/T2 over the reference PD foreground; PD over the full slice";

/// Metrics over a stack of slices: NRMSE and MAE pool all voxels, SSIM is the
/// slice mean.
pub fn evaluate(est: &[QMaps], gt: &[QMaps], runtime_s: Option<f64>, memory_bytes: Option<u64>, config_hash: &str) -> Result<EvalReport> {
    if est.len() != gt.len() || est.is_empty() {
        return shape_err(format!("{} estimated vs {} reference slices", est.len(), gt.len()));
    }
    let mut maps = BTreeMap::new();
    for key in ["t1", "t2", "pd"] {
        let plane = |q: &QMaps| -> Vec<f64> {
            match key {
                "t1" => q.t1_ms.clone(),
                "t2" => q.t2_ms.clone(),
                _ => q.pd.clone(),
            }
        };
        let mut e_all = Vec::new();
        let mut g_all = Vec::new();
        let mut m_all = Vec::new();
        let mut ssim_sum = 0.0;
        for (e, g) in est.iter().zip(gt) {
            if e.grid_n != g.grid_n {
                return shape_err("slice grid sizes differ");
            }
            let mask: Vec<bool> = if key == "pd" { vec![true; g.pixels()] } else { g.foreground.clone() };
            let (ep, gp) = (plane(e), plane(g));
            ssim_sum += ssim(&ep, &gp, g.grid_n, Some(&mask))?;
            e_all.extend(ep);
            g_all.extend(gp);
            m_all.extend(mask);
        }
        maps.insert(
            key.to_string(),
            MapMetrics {
                nrmse: nrmse(&e_all, &g_all, Some(&m_all))?,
                ssim: ssim_sum / est.len() as f64,
                mae: mae(&e_all, &g_all, Some(&m_all))?,
            },
        );
    }
    Ok(EvalReport {
        maps,
        runtime_s,
        memory_bytes,
        config_hash: config_hash.to_string(),
        masking: MASKING_NOTE.to_string(),
    })
}

/// Aligned text table, one row per method, mirroring the NRMSE / SSIM / MAE
/// column groups plus memory and runtime.
pub fn format_table(rows: &[(String, EvalReport)]) -> String {
    let name_w = rows.iter().map(|r| r.0.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = write!(out, "{:<name_w$}", "method");
    for group in ["NRMSE", "SSIM", "MAE"] {
        for map in ["T1", "T2", "PD"] {
            let _ = write!(out, " {:>10}", format!("{group}-{map}"));
        }
    }
    let _ = writeln!(out, " {:>10} {:>10}", "mem(MB)", "time(s)");
    for (name, r) in rows {
        let _ = write!(out, "{name:<name_w$}");
        for pick in [|m: &MapMetrics| m.nrmse, |m: &MapMetrics| m.ssim, |m: &MapMetrics| m.mae] {
            for key in ["t1", "t2", "pd"] {
                let v = r.maps.get(key).map(pick).unwrap_or(f64::NAN);
                let _ = write!(out, " {v:>10.4}");
            }
        }
        let mem = r.memory_bytes.map_or("-".to_string(), |b| format!("{:.2}", b as f64 / 1e6));
        let time = r.runtime_s.map_or("-".to_string(), |t| format!("{t:.3}"));
        let _ = writeln!(out, " {mem:>10} {time:>10}");
    }
    out
}

/// Raw single-precision storage of an uncompressed dictionary.
pub fn dictionary_bytes(atoms: usize, l: usize) -> u64 {
    (atoms * l * 4) as u64
}

/// Complex single-precision storage of a compressed dictionary.
pub fn compressed_dictionary_bytes(atoms: usize, s: usize) -> u64 {
    (atoms * s * 8) as u64
}

pub fn network_bytes(params: usize) -> u64 {
    (params * 4) as u64
}

/// Binary portable graymap, values scaled from [0, max] to [0, 255].
pub fn to_pgm(values: &[f64], grid_n: usize, max: f64) -> Vec<u8> {
    let mut out = format!("P5\n{grid_n} {grid_n}\n255\n").into_bytes();
    let scale = if max > 0.0 { 255.0 / max } else { 0.0 };
    out.extend(values.iter().map(|v| (v * scale).round().clamp(0.0, 255.0) as u8));
    out
}
