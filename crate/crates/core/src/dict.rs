//! MRF dictionary over a (T1, T2) grid and its low-rank temporal subspace.
//!
//! Row `i` of [`Dictionary::atoms`] and of [`CompressedDictionary::atoms_c`]
//! always corresponds to `grid.entries[i]`.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{param_err, shape_err, Result};
use crate::linalg;
use crate::seqsim::{epg_simulate, SequenceParams};

/// Inclusive arithmetic range `start, start+step, ..., <= stop`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub start: f64,
    pub step: f64,
    pub stop: f64,
}

impl GridAxis {
    pub const fn new(start: f64, step: f64, stop: f64) -> Self {
        GridAxis { start, step, stop }
    }

    pub fn values(&self) -> Result<Vec<f64>> {
        if !(self.step > 0.0) || !(self.start <= self.stop) || !self.start.is_finite() || !self.stop.is_finite() {
            return param_err(format!(
                "empty grid range {}:{}:{}",
                self.start, self.step, self.stop
            ));
        }
        let n = ((self.stop - self.start) / self.step + 1e-9).floor() as usize + 1;
        Ok((0..n).map(|k| self.start + k as f64 * self.step).collect())
    }

    /// Parses `start:step:stop`.
    pub fn parse(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split(':').collect();
        if parts.len() != 3 {
            return param_err(format!("grid axis must be start:step:stop, got {text:?}"));
        }
        let mut v = [0.0; 3];
        for (slot, p) in v.iter_mut().zip(&parts) {
            *slot = p
                .trim()
                .parse()
                .map_err(|_| crate::MrfError::Param(format!("bad number {p:?} in {text:?}")))?;
        }
        Ok(GridAxis::new(v[0], v[1], v[2]))
    }
}

pub const DEFAULT_T1_AXIS: GridAxis = GridAxis::new(100.0, 10.0, 4000.0);
pub const DEFAULT_T2_AXIS: GridAxis = GridAxis::new(20.0, 2.0, 600.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TissueGrid {
    pub t1_values: Vec<f64>,
    pub t2_values: Vec<f64>,
    /// (T1, T2) pairs; row-major over (t1_values, t2_values) when built by [`make_grid`].
    pub entries: Vec<(f64, f64)>,
}

impl TissueGrid {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Index of the entry closest to (t1, t2) in relative units of each axis range.
    pub fn nearest(&self, t1: f64, t2: f64) -> usize {
        let s1 = span(&self.t1_values);
        let s2 = span(&self.t2_values);
        let mut best = (f64::INFINITY, 0);
        for (i, &(a, b)) in self.entries.iter().enumerate() {
            let d = ((a - t1) / s1).powi(2) + ((b - t2) / s2).powi(2);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Exact lookup of an entry, tolerant to float noise from arithmetic grids.
    pub fn position(&self, t1: f64, t2: f64) -> Option<usize> {
        self.entries
            .iter()
            .position(|&(a, b)| (a - t1).abs() <= 1e-9 * a.abs().max(1.0) && (b - t2).abs() <= 1e-9 * b.abs().max(1.0))
    }

    /// Returns a new grid with the entries reordered by `perm` (entry k ← entries[perm[k]]).
    pub fn permuted(&self, perm: &[usize]) -> TissueGrid {
        TissueGrid {
            t1_values: self.t1_values.clone(),
            t2_values: self.t2_values.clone(),
            entries: perm.iter().map(|&p| self.entries[p]).collect(),
        }
    }
}

fn span(v: &[f64]) -> f64 {
    match (v.first(), v.last()) {
        (Some(a), Some(b)) if b > a => b - a,
        _ => 1.0,
    }
}

pub fn make_grid(t1: GridAxis, t2: GridAxis) -> Result<TissueGrid> {
    let t1_values = t1.values()?;
    let t2_values = t2.values()?;
    let entries = t1_values
        .iter()
        .flat_map(|&a| t2_values.iter().map(move |&b| (a, b)))
        .collect();
    Ok(TissueGrid {
        t1_values,
        t2_values,
        entries,
    })
}

pub fn default_grid() -> TissueGrid {
    make_grid(DEFAULT_T1_AXIS, DEFAULT_T2_AXIS).expect("default grid is valid")
}

/// Unnormalised fingerprints, one row per grid entry.
#[derive(Clone, Debug)]
pub struct Dictionary {
    /// d × L, row-major.
    pub atoms: Vec<f64>,
    pub l: usize,
    pub grid: TissueGrid,
    pub atom_norms: Vec<f64>,
}

impl Dictionary {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.l..(i + 1) * self.l]
    }

    pub fn from_atoms(atoms: Vec<f64>, l: usize, grid: TissueGrid) -> Result<Self> {
        if l == 0 || atoms.len() != grid.len() * l {
            return shape_err(format!(
                "{} values cannot hold {} atoms of length {l}",
                atoms.len(),
                grid.len()
            ));
        }
        let atom_norms = row_norms(&atoms, l);
        Ok(Dictionary {
            atoms,
            l,
            grid,
            atom_norms,
        })
    }
}

fn row_norms(m: &[f64], cols: usize) -> Vec<f64> {
    m.chunks_exact(cols)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

pub fn simulate_dictionary(grid: &TissueGrid, seq: &SequenceParams) -> Result<Dictionary> {
    seq.validate()?;
    let l = seq.len();
    let mut atoms = vec![0.0; grid.len() * l];
    atoms
        .par_chunks_mut(l)
        .zip(grid.entries.par_iter())
        .try_for_each(|(row, &(t1, t2))| {
            let fp = epg_simulate(seq, t1, t2)?;
            row.copy_from_slice(&fp.values);
            Ok::<(), crate::MrfError>(())
        })?;
    Dictionary::from_atoms(atoms, l, grid.clone())
}

/// Orthonormal temporal basis, L × s row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Subspace {
    pub v: Vec<f64>,
    pub l: usize,
    pub s: usize,
    pub singular_values: Vec<f64>,
}

impl Subspace {
    pub fn at(&self, t: usize, j: usize) -> f64 {
        self.v[t * self.s + j]
    }

    pub fn from_basis(v: Vec<f64>, l: usize, s: usize) -> Result<Self> {
        if v.len() != l * s || s == 0 {
            return shape_err(format!("basis of {} values is not {l}x{s}", v.len()));
        }
        Ok(Subspace {
            v,
            l,
            s,
            singular_values: Vec::new(),
        })
    }

    /// Identity basis (s = L), useful for exact round-trip checks.
    pub fn identity(l: usize) -> Self {
        let mut v = vec![0.0; l * l];
        for t in 0..l {
            v[t * l + t] = 1.0;
        }
        Subspace {
            v,
            l,
            s: l,
            singular_values: vec![1.0; l],
        }
    }

    /// max |VᵀV − I|.
    pub fn orthonormality_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.s {
            for b in 0..self.s {
                let dot: f64 = (0..self.l).map(|t| self.at(t, a) * self.at(t, b)).sum();
                let target = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
        worst
    }
}

/// First `s` right singular vectors of the (uncentred) atom matrix, obtained
/// from the eigendecomposition of the L × L Gram matrix.
pub fn compute_subspace(dictionary: &Dictionary, s: usize) -> Result<Subspace> {
    let (d, l) = (dictionary.len(), dictionary.l);
    if s < 1 || s > d.min(l) {
        return param_err(format!("subspace dimension {s} outside [1, {}]", d.min(l)));
    }
    let gram = linalg::gram(&dictionary.atoms, d, l);
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(l, l, &gram));
    let mut order: Vec<usize> = (0..l).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut v = vec![0.0; l * s];
    let mut singular_values = Vec::with_capacity(s);
    for (j, &col) in order.iter().take(s).enumerate() {
        let column = eig.eigenvectors.column(col);
        // deterministic sign: largest-magnitude component positive
        let pivot = column.iter().copied().fold(0.0f64, |acc, x| if x.abs() > acc.abs() { x } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        for t in 0..l {
            v[t * s + j] = sign * column[t];
        }
        singular_values.push(eig.eigenvalues[col].max(0.0).sqrt());
    }
    Ok(Subspace {
        v,
        l,
        s,
        singular_values,
    })
}

/// ‖A − A V Vᵀ‖_F / ‖A‖_F evaluated directly.
pub fn projection_error(dictionary: &Dictionary, subspace: &Subspace) -> Result<f64> {
    let c = compress(dictionary, subspace)?;
    let back = expand(&c, subspace);
    let num: f64 = dictionary.atoms.iter().zip(&back).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = dictionary.atoms.iter().map(|a| a * a).sum();
    Ok((num / den).sqrt())
}

#[derive(Clone, Debug)]
pub struct CompressedDictionary {
    /// d × s, row-major.
    pub atoms_c: Vec<f64>,
    pub s: usize,
    pub grid: TissueGrid,
    pub atom_c_norms: Vec<f64>,
}

impl CompressedDictionary {
    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms_c[i * self.s..(i + 1) * self.s]
    }

    pub fn from_atoms(atoms_c: Vec<f64>, s: usize, grid: TissueGrid) -> Result<Self> {
        if s == 0 || atoms_c.len() != grid.len() * s {
            return shape_err(format!(
                "{} values cannot hold {} compressed atoms of length {s}",
                atoms_c.len(),
                grid.len()
            ));
        }
        let atom_c_norms = row_norms(&atoms_c, s);
        Ok(CompressedDictionary {
            atoms_c,
            s,
            grid,
            atom_c_norms,
        })
    }
}

pub fn compress(dictionary: &Dictionary, subspace: &Subspace) -> Result<CompressedDictionary> {
    if subspace.l != dictionary.l {
        return shape_err(format!(
            "subspace has {} rows but atoms have length {}",
            subspace.l, dictionary.l
        ));
    }
    let atoms_c = linalg::matmul(&dictionary.atoms, dictionary.len(), dictionary.l, &subspace.v, subspace.s);
    CompressedDictionary::from_atoms(atoms_c, subspace.s, dictionary.grid.clone())
}

/// Maps compressed atoms back to time series: atoms_c · Vᵀ.
pub fn expand(cdict: &CompressedDictionary, subspace: &Subspace) -> Vec<f64> {
    linalg::matmul_bt(&cdict.atoms_c, cdict.len(), cdict.s, &subspace.v, subspace.l)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seqsim::{build_sequence, SequenceConfig};

    fn small_seq() -> SequenceParams {
        build_sequence(&SequenceConfig { l: Some(40), ..Default::default() }).unwrap()
    }

    #[test]
    fn default_grid_size() {
        let g = default_grid();
        assert_eq!(g.t1_values.len(), 391);
        assert_eq!(g.t2_values.len(), 291);
        assert_eq!(g.len(), 113_781);
        assert!(g.position(2550.0, 318.0).is_some());
        assert_eq!(g.entries[0], (100.0, 20.0));
        assert_eq!(g.entries[1], (100.0, 22.0));
    }

    #[test]
    fn degenerate_and_empty_ranges() {
        let g = make_grid(GridAxis::new(100.0, 10.0, 100.0), GridAxis::new(20.0, 2.0, 20.0)).unwrap();
        assert_eq!(g.len(), 1);
        assert!(make_grid(GridAxis::new(200.0, 10.0, 100.0), DEFAULT_T2_AXIS).is_err());
        assert!(make_grid(GridAxis::new(100.0, 0.0, 200.0), DEFAULT_T2_AXIS).is_err());
    }

    #[test]
    fn parse_axis() {
        assert_eq!(GridAxis::parse("100:100:200").unwrap(), GridAxis::new(100.0, 100.0, 200.0));
        assert!(GridAxis::parse("1:2").is_err());
        assert!(GridAxis::parse("a:b:c").is_err());
    }

    #[test]
    fn single_entry_dictionary_equals_simulation() {
        let seq = small_seq();
        let g = make_grid(GridAxis::new(800.0, 1.0, 800.0), GridAxis::new(80.0, 1.0, 80.0)).unwrap();
        let d = simulate_dictionary(&g, &seq).unwrap();
        assert_eq!(d.atoms, epg_simulate(&seq, 800.0, 80.0).unwrap().values);
        assert!(d.atom_norms[0] > 0.0);
    }

    #[test]
    fn permuted_grid_permutes_rows() {
        let seq = small_seq();
        let g = make_grid(GridAxis::new(300.0, 500.0, 1800.0), GridAxis::new(30.0, 40.0, 110.0)).unwrap();
        let perm: Vec<usize> = (0..g.len()).rev().collect();
        let a = simulate_dictionary(&g, &seq).unwrap();
        let b = simulate_dictionary(&g.permuted(&perm), &seq).unwrap();
        for (k, &p) in perm.iter().enumerate() {
            assert_eq!(b.atom(k), a.atom(p));
        }
    }

    #[test]
    fn subspace_orthonormal_and_complete() {
        let seq = small_seq();
        let g = make_grid(GridAxis::new(100.0, 150.0, 4000.0), GridAxis::new(20.0, 30.0, 600.0)).unwrap();
        let d = simulate_dictionary(&g, &seq).unwrap();
        let sub = compute_subspace(&d, 10).unwrap();
        assert!(sub.orthonormality_error() < 1e-10);
        assert!(sub.singular_values.windows(2).all(|w| w[0] >= w[1]));
        let full = compute_subspace(&d, seq.len()).unwrap();
        assert!(projection_error(&d, &full).unwrap() < 1e-8);
        assert!(compute_subspace(&d, 0).is_err());
        assert!(compute_subspace(&d, 41).is_err());
    }

    #[test]
    fn compress_expand_is_projection() {
        let seq = small_seq();
        let g = make_grid(GridAxis::new(500.0, 700.0, 2000.0), GridAxis::new(40.0, 60.0, 200.0)).unwrap();
        let d = simulate_dictionary(&g, &seq).unwrap();
        let sub = compute_subspace(&d, 3).unwrap();
        let c = compress(&d, &sub).unwrap();
        let back = expand(&c, &sub);
        // reference projection A V Vᵀ computed with explicit loops
        for i in 0..d.len() {
            for t in 0..d.l {
                let mut acc = 0.0;
                for j in 0..sub.s {
                    let coef: f64 = (0..d.l).map(|u| d.atom(i)[u] * sub.at(u, j)).sum();
                    acc += coef * sub.at(t, j);
                }
                assert!((back[i * d.l + t] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_atom_compresses_to_zero() {
        let g = make_grid(GridAxis::new(100.0, 1.0, 101.0), GridAxis::new(20.0, 1.0, 20.0)).unwrap();
        let d = Dictionary::from_atoms(vec![0.0, 0.0, 0.0, 1.0, 2.0, 3.0], 3, g).unwrap();
        let sub = compute_subspace(&d, 1).unwrap();
        let c = compress(&d, &sub).unwrap();
        assert_eq!(c.atom(0), &[0.0]);
        assert_eq!(c.atom_c_norms[0], 0.0);
    }

    #[test]
    fn compress_shape_mismatch() {
        let seq = small_seq();
        let g = make_grid(GridAxis::new(500.0, 1.0, 500.0), GridAxis::new(40.0, 1.0, 40.0)).unwrap();
        let d = simulate_dictionary(&g, &seq).unwrap();
        assert!(compress(&d, &Subspace::identity(7)).is_err());
    }
}
