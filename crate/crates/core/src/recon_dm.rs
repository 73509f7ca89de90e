//! Dictionary-matching reconstructions: exhaustive matching, Fast Group
//! Matching over a clustered dictionary, and BLIP (projected gradient with
//! dictionary projection and backtracking).
//!
//! Exhaustive and group matching share one scoring kernel and one tie rule
//! (highest score, then lowest atom index), so with every group kept they
//! return identical atom indices.

use std::collections::HashMap;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dict::CompressedDictionary;
use crate::error::{param_err, shape_err, Result};
use crate::forward::{gradient_step, AcquisitionModel, KSpaceData, Tsmi};

/// PD below this fraction of the slice maximum is treated as background.
pub const FOREGROUND_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QMaps {
    pub grid_n: usize,
    pub t1_ms: Vec<f64>,
    pub t2_ms: Vec<f64>,
    pub pd: Vec<f64>,
    pub foreground: Vec<bool>,
}

impl QMaps {
    pub fn background(grid_n: usize) -> Self {
        let n = grid_n * grid_n;
        QMaps {
            grid_n,
            t1_ms: vec![0.0; n],
            t2_ms: vec![0.0; n],
            pd: vec![0.0; n],
            foreground: vec![false; n],
        }
    }

    pub fn pixels(&self) -> usize {
        self.grid_n * self.grid_n
    }

    /// Marks voxels with PD under 1% of the maximum as background and zeroes their PD.
    pub fn apply_pd_threshold(&mut self) {
        let max = self.pd.iter().copied().fold(0.0, f64::max);
        let cut = FOREGROUND_FRACTION * max;
        for (pd, fg) in self.pd.iter_mut().zip(self.foreground.iter_mut()) {
            *fg = max > 0.0 && *pd >= cut;
            if !*fg {
                *pd = 0.0;
            }
        }
    }

    pub fn foreground_count(&self) -> usize {
        self.foreground.iter().filter(|&&f| f).count()
    }
}

/// Unit-norm copies of the compressed atoms (zero atoms stay zero).
#[derive(Clone, Debug)]
pub struct Matcher<'a> {
    pub cdict: &'a CompressedDictionary,
    unit: Vec<f64>,
}

impl<'a> Matcher<'a> {
    pub fn new(cdict: &'a CompressedDictionary) -> Result<Self> {
        if cdict.is_empty() {
            return param_err("cannot match against an empty dictionary");
        }
        let s = cdict.s;
        let mut unit = cdict.atoms_c.clone();
        for (row, &nrm) in unit.chunks_exact_mut(s).zip(&cdict.atom_c_norms) {
            let inv = if nrm > 0.0 { 1.0 / nrm } else { 0.0 };
            row.iter_mut().for_each(|v| *v *= inv);
        }
        Ok(Matcher { cdict, unit })
    }

    /// |⟨x, d̂_i⟩|², the squared normalised correlation.
    #[inline]
    fn score(&self, re: &[f64], im: &[f64], i: usize) -> f64 {
        let s = self.cdict.s;
        let a = &self.unit[i * s..(i + 1) * s];
        let (mut pr, mut pi) = (0.0, 0.0);
        for j in 0..s {
            pr += re[j] * a[j];
            pi += im[j] * a[j];
        }
        pr * pr + pi * pi
    }

    fn best<I: IntoIterator<Item = usize>>(&self, re: &[f64], im: &[f64], candidates: I) -> (usize, f64, usize) {
        let mut best = (0usize, -1.0f64);
        let mut count = 0;
        for i in candidates {
            count += 1;
            let sc = self.score(re, im, i);
            if sc > best.1 || (sc == best.1 && i < best.0) {
                best = (i, sc);
            }
        }
        (best.0, best.1.max(0.0), count)
    }

    fn finish(&self, x: &Tsmi, picks: Vec<(usize, f64)>) -> QMaps {
        let mut q = QMaps::background(x.grid_n);
        for (v, (i, sc)) in picks.into_iter().enumerate() {
            let (t1, t2) = self.cdict.grid.entries[i];
            let nrm = self.cdict.atom_c_norms[i];
            q.t1_ms[v] = t1;
            q.t2_ms[v] = t2;
            q.pd[v] = if nrm > 0.0 { sc.sqrt() / nrm } else { 0.0 };
        }
        q.apply_pd_threshold();
        q
    }
}

fn split_voxel(x: &Tsmi, v: usize, re: &mut [f64], im: &mut [f64]) {
    let np = x.pixels();
    for j in 0..x.s {
        let c = x.data[j * np + v];
        re[j] = c.re;
        im[j] = c.im;
    }
}

fn check_channels(x: &Tsmi, cdict: &CompressedDictionary) -> Result<()> {
    if x.s != cdict.s {
        return shape_err(format!("TSMI has {} channels, dictionary {}", x.s, cdict.s));
    }
    Ok(())
}

/// Exhaustive per-voxel matching.
pub fn dm_match(x: &Tsmi, cdict: &CompressedDictionary) -> Result<QMaps> {
    check_channels(x, cdict)?;
    let matcher = Matcher::new(cdict)?;
    Ok(dm_match_with(x, &matcher))
}

pub fn dm_match_with(x: &Tsmi, matcher: &Matcher<'_>) -> QMaps {
    let s = x.s;
    let (mut re, mut im) = (vec![0.0; s], vec![0.0; s]);
    let picks = (0..x.pixels())
        .map(|v| {
            split_voxel(x, v, &mut re, &mut im);
            let (i, sc, _) = matcher.best(&re, &im, 0..matcher.cdict.len());
            (i, sc)
        })
        .collect();
    matcher.finish(x, picks)
}

/// Spherical k-means clustering of the compressed dictionary.
#[derive(Clone, Debug, PartialEq)]
pub struct FgmIndex {
    pub n_groups: usize,
    /// n_groups × s, unit rows.
    pub centroids: Vec<f64>,
    pub assignment: Vec<usize>,
    pub group_members: Vec<Vec<usize>>,
    pub s: usize,
}

pub const FGM_MAX_ITERS: usize = 30;

pub fn build_fgm_index(cdict: &CompressedDictionary, n_groups: usize, seed: u64) -> Result<FgmIndex> {
    if n_groups < 1 {
        return param_err("need at least one group");
    }
    let d = cdict.len();
    if n_groups > d {
        return param_err(format!("{n_groups} groups for {d} atoms"));
    }
    let matcher = Matcher::new(cdict)?;
    let s = cdict.s;
    let unit = &matcher.unit;
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let row = |i: usize| &unit[i * s..(i + 1) * s];

    // k-means++ seeding on cosine distance 1 - cos
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids: Vec<f64> = Vec::with_capacity(n_groups * s);
    centroids.extend_from_slice(row(rng.gen_range(0..d)));
    let mut dist: Vec<f64> = (0..d).map(|i| (1.0 - dot(row(i), &centroids[0..s])).max(0.0)).collect();
    while centroids.len() < n_groups * s {
        let total: f64 = dist.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.gen::<f64>() * total;
            let mut chosen = d - 1;
            for (i, &w) in dist.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        } else {
            rng.gen_range(0..d)
        };
        let start = centroids.len();
        centroids.extend_from_slice(row(pick));
        let c = centroids[start..start + s].to_vec();
        for (i, dv) in dist.iter_mut().enumerate() {
            *dv = dv.min((1.0 - dot(row(i), &c)).max(0.0));
        }
    }

    let mut assignment = vec![0usize; d];
    for iter in 0..FGM_MAX_ITERS {
        let mut changed = 0usize;
        for (i, a) in assignment.iter_mut().enumerate() {
            let r = row(i);
            let mut best = (0usize, f64::NEG_INFINITY);
            for g in 0..n_groups {
                let c = dot(r, &centroids[g * s..(g + 1) * s]);
                if c > best.1 {
                    best = (g, c);
                }
            }
            if *a != best.0 || iter == 0 {
                changed += usize::from(*a != best.0);
                *a = best.0;
            }
        }
        let mut sums = vec![0.0; n_groups * s];
        let mut counts = vec![0usize; n_groups];
        for (i, &g) in assignment.iter().enumerate() {
            counts[g] += 1;
            for (acc, v) in sums[g * s..(g + 1) * s].iter_mut().zip(row(i)) {
                *acc += v;
            }
        }
        for g in 0..n_groups {
            let c = &mut sums[g * s..(g + 1) * s];
            let nrm = c.iter().map(|v| v * v).sum::<f64>().sqrt();
            if counts[g] == 0 || nrm == 0.0 {
                // keep the previous centroid for empty clusters
                c.copy_from_slice(&centroids[g * s..(g + 1) * s]);
            } else {
                c.iter_mut().for_each(|v| *v /= nrm);
            }
        }
        centroids = sums;
        if iter > 0 && changed == 0 {
            break;
        }
    }

    let mut group_members = vec![Vec::new(); n_groups];
    for (i, &g) in assignment.iter().enumerate() {
        group_members[g].push(i);
    }
    Ok(FgmIndex {
        n_groups,
        centroids,
        assignment,
        group_members,
        s,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MatchStats {
    /// Inner products evaluated, centroids included.
    pub correlations: usize,
    pub voxels: usize,
}

/// Group-pruned matching: keep the ⌈keep_fraction · n_groups⌉ best groups,
/// then search their members exhaustively.
pub fn fgm_match(x: &Tsmi, index: &FgmIndex, cdict: &CompressedDictionary, keep_fraction: f64) -> Result<(QMaps, MatchStats)> {
    check_channels(x, cdict)?;
    let matcher = Matcher::new(cdict)?;
    fgm_match_with(x, index, &matcher, keep_fraction)
}

pub fn fgm_match_with(x: &Tsmi, index: &FgmIndex, matcher: &Matcher<'_>, keep_fraction: f64) -> Result<(QMaps, MatchStats)> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return param_err(format!("keep_fraction {keep_fraction} outside (0, 1]"));
    }
    if index.assignment.len() != matcher.cdict.len() || index.s != x.s {
        return shape_err("group index was built for a different dictionary");
    }
    let s = x.s;
    let keep = ((keep_fraction * index.n_groups as f64).ceil() as usize).clamp(1, index.n_groups);
    let (mut re, mut im) = (vec![0.0; s], vec![0.0; s]);
    let mut stats = MatchStats::default();
    let mut group_scores: Vec<(usize, f64)> = Vec::with_capacity(index.n_groups);
    let picks = (0..x.pixels())
        .map(|v| {
            split_voxel(x, v, &mut re, &mut im);
            group_scores.clear();
            for g in 0..index.n_groups {
                let c = &index.centroids[g * s..(g + 1) * s];
                let (mut pr, mut pi) = (0.0, 0.0);
                for j in 0..s {
                    pr += re[j] * c[j];
                    pi += im[j] * c[j];
                }
                group_scores.push((g, pr * pr + pi * pi));
            }
            stats.correlations += index.n_groups;
            if keep < index.n_groups {
                group_scores.select_nth_unstable_by(keep - 1, |a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
            }
            let candidates = group_scores[..keep]
                .iter()
                .flat_map(|&(g, _)| index.group_members[g].iter().copied());
            let (i, sc, count) = matcher.best(&re, &im, candidates);
            stats.correlations += count;
            (i, sc)
        })
        .collect();
    stats.voxels = x.pixels();
    Ok((matcher.finish(x, picks), stats))
}

/// x_v = PD_v · (compressed atom of the voxel's grid entry); background is zero.
pub fn qmaps_to_tsmi(qmaps: &QMaps, cdict: &CompressedDictionary) -> Result<Tsmi> {
    let lookup: HashMap<(u64, u64), usize> = cdict
        .grid
        .entries
        .iter()
        .enumerate()
        .map(|(i, &(a, b))| ((a.to_bits(), b.to_bits()), i))
        .collect();
    let mut x = Tsmi::zeros(qmaps.grid_n, cdict.s);
    for v in 0..qmaps.pixels() {
        let pd = qmaps.pd[v];
        if !qmaps.foreground[v] || pd == 0.0 {
            continue;
        }
        let (t1, t2) = (qmaps.t1_ms[v], qmaps.t2_ms[v]);
        let i = match lookup.get(&(t1.to_bits(), t2.to_bits())) {
            Some(&i) => i,
            None => {
                log::warn!("({t1}, {t2}) is not a grid entry; using the nearest one");
                cdict.grid.nearest(t1, t2)
            }
        };
        let atom: Vec<Complex64> = cdict.atom(i).iter().map(|&a| Complex64::new(pd * a, 0.0)).collect();
        x.set_voxel(v, &atom);
    }
    Ok(x)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iter: usize,
    pub alpha: f64,
    pub objective: f64,
}

pub enum Projection<'a> {
    Exhaustive,
    Grouped { index: &'a FgmIndex, keep_fraction: f64 },
}

#[derive(Clone, Copy, Debug)]
pub struct BlipOptions {
    pub max_iter: usize,
    pub alpha0: f64,
    pub max_halvings: usize,
    pub rel_tol: f64,
}

impl Default for BlipOptions {
    fn default() -> Self {
        BlipOptions {
            max_iter: 20,
            alpha0: 1.0,
            max_halvings: 8,
            rel_tol: 1e-4,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlipResult {
    pub qmaps: QMaps,
    pub x: Tsmi,
    pub trace: Vec<TraceEntry>,
}

/// Iterative projected gradient: gradient step on ‖y − Hx‖², projection onto
/// the dictionary, step halving whenever the objective would increase.
pub fn blip(
    y: &KSpaceData,
    model: &AcquisitionModel,
    cdict: &CompressedDictionary,
    projection: Projection<'_>,
    opts: BlipOptions,
) -> Result<BlipResult> {
    if model.s() != cdict.s {
        return shape_err("acquisition subspace and dictionary disagree on s");
    }
    let matcher = Matcher::new(cdict)?;
    let project = |g: &Tsmi| -> Result<(QMaps, Tsmi)> {
        let q = match &projection {
            Projection::Exhaustive => dm_match_with(g, &matcher),
            Projection::Grouped { index, keep_fraction } => fgm_match_with(g, index, &matcher, *keep_fraction)?.0,
        };
        let xp = qmaps_to_tsmi(&q, cdict)?;
        Ok((q, xp))
    };

    let mut x = Tsmi::zeros(model.grid_n, model.s());
    let mut qmaps = QMaps::background(model.grid_n);
    let mut objective = y.norm_sqr();
    let mut alpha = opts.alpha0;
    let mut trace = Vec::new();
    for iter in 1..=opts.max_iter {
        let mut accepted = None;
        for _ in 0..=opts.max_halvings {
            let g = gradient_step(&x, y, alpha, model)?;
            let (q, xp) = project(&g)?;
            let f = model.data_fidelity(&xp, y)?;
            if f <= objective {
                accepted = Some((q, xp, f));
                break;
            }
            alpha *= 0.5;
        }
        let Some((q, xp, f)) = accepted else {
            log::info!("BLIP: no decrease after {} halvings, stopping at iteration {iter}", opts.max_halvings);
            break;
        };
        let rel = if objective > 0.0 { (objective - f) / objective } else { 0.0 };
        x = xp;
        qmaps = q;
        objective = f;
        trace.push(TraceEntry { iter, alpha, objective });
        if rel < opts.rel_tol {
            break;
        }
    }
    Ok(BlipResult { qmaps, x, trace })
}
