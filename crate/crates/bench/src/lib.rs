//! Shared fixtures for the pipeline benchmarks.

use mrf_core::dict::{compress, compute_subspace, make_grid, simulate_dictionary, CompressedDictionary, GridAxis, Subspace};
use mrf_core::forward::{AcquisitionModel, KSpaceData};
use mrf_core::phantom::{brain_slice_spec, gen_phantom, tsmi_from_maps};
use mrf_core::sampling::default_masks;
use mrf_core::seqsim::SequenceParams;

pub struct Fixture {
    pub seq: SequenceParams,
    pub sub: Subspace,
    pub cdict: CompressedDictionary,
    pub model: AcquisitionModel,
    pub y: KSpaceData,
}

/// Decimated dictionary, s = 10, spiral masks and one simulated slice of side `n`.
pub fn fixture(n: usize) -> Fixture {
    let seq = SequenceParams::default();
    let grid = make_grid(GridAxis::new(100.0, 40.0, 4000.0), GridAxis::new(20.0, 8.0, 600.0)).expect("valid grid");
    let d = simulate_dictionary(&grid, &seq).expect("dictionary");
    let sub = compute_subspace(&d, 10).expect("subspace");
    let cdict = compress(&d, &sub).expect("compression");
    let model = AcquisitionModel::new(default_masks(n, seq.len()).expect("masks"), sub.clone()).expect("model");
    let q = gen_phantom(&brain_slice_spec(n, 1, 0.5, 0.05, 2)).expect("phantom");
    let y = model.apply(&tsmi_from_maps(&q, &seq, &sub).expect("tsmi")).expect("k-space");
    Fixture { seq, sub, cdict, model, y }
}
