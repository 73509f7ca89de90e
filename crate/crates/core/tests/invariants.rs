use approx::assert_relative_eq;
use mrf_core::dict::{compute_subspace, make_grid, simulate_dictionary, GridAxis, Subspace};
use mrf_core::forward::{AcquisitionModel, Fft2, KSpaceData, Tsmi};
use mrf_core::sampling::{default_masks, SamplingMask};
use mrf_core::seqsim::SequenceParams;
use mrf_core::tensorfile::TensorFile;
use num_complex::Complex64;
use proptest::prelude::*;
use serde_json::json;

/// Direct O(N⁴) unitary 2-D DFT.
fn naive_dft(plane: &[Complex64], n: usize, sign: f64) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); n * n];
    for (ku, o) in out.iter_mut().enumerate() {
        let (kr, kc) = (ku / n, ku % n);
        for (xu, v) in plane.iter().enumerate() {
            let (r, c) = (xu / n, xu % n);
            let phase = sign * 2.0 * std::f64::consts::PI * ((kr * r + kc * c) as f64) / n as f64;
            *o += v * Complex64::from_polar(1.0, phase);
        }
        *o /= n as f64;
    }
    out
}

fn complex_vec(len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| Complex64::new(a, b)), len)
}

fn small_subspace() -> Subspace {
    let grid = make_grid(GridAxis::new(200.0, 300.0, 3000.0), GridAxis::new(30.0, 60.0, 500.0)).unwrap();
    compute_subspace(&simulate_dictionary(&grid, &SequenceParams::default()).unwrap(), 4).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn fft_matches_direct_dft(plane in complex_vec(36)) {
        let fft = Fft2::new(6);
        let mut fwd = plane.clone();
        fft.forward(&mut fwd);
        for (a, b) in fwd.iter().zip(naive_dft(&plane, 6, -1.0)) {
            prop_assert!((a - b).norm() < 1e-12);
        }
        let mut back = fwd;
        fft.inverse(&mut back);
        for (a, b) in back.iter().zip(&plane) {
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn tensor_file_roundtrip(values in prop::collection::vec(-1e6f64..1e6, 1..64), key in "[a-z]{1,8}") {
        let tf = TensorFile::from_f64(&[values.len()], &values, json!({ "kind": key.clone() })).unwrap();
        let back = TensorFile::from_bytes(&tf.to_bytes()).unwrap();
        prop_assert_eq!(back.to_f64().unwrap(), values);
        prop_assert_eq!(back.header_str("kind"), Some(key.as_str()));
        prop_assert_eq!(back.content_hash(), tf.content_hash());
    }

    #[test]
    fn grid_axis_parse_inverts_display(start in 1u32..500, step in 1u32..50, count in 0u32..40) {
        let stop = start + step * count;
        let axis = GridAxis::parse(&format!("{start}:{step}:{stop}")).unwrap();
        let values = axis.values().unwrap();
        prop_assert_eq!(values.len(), count as usize + 1);
        prop_assert_eq!(*values.last().unwrap(), stop as f64);
    }
}

#[test]
fn adjoint_identity_on_random_pairs() {
    let sub = small_subspace();
    let mask = default_masks(16, sub.l).unwrap();
    let model = AcquisitionModel::new(mask.clone(), sub).unwrap();
    let n = 16 * 16 * 4;
    proptest!(ProptestConfig::with_cases(16), |(x in complex_vec(n), seed in any::<u64>())| {
        let x = Tsmi { grid_n: 16, s: 4, data: x };
        let mut state = seed | 1;
        let mut next = || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 - 0.5
        };
        let y = KSpaceData { frames: mask.frames.iter().map(|f| f.iter().map(|_| Complex64::new(next(), next())).collect()).collect() };
        let lhs = model.apply(&x).unwrap().dot(&y);
        let rhs = x.dot(&model.adjoint(&y).unwrap());
        let scale = x.norm_sqr().sqrt() * y.norm_sqr().sqrt();
        prop_assert!((lhs - rhs).norm() / scale < 1e-12);
    });
}

#[test]
fn full_sampling_inverts() {
    let sub = small_subspace();
    let model = AcquisitionModel::new(SamplingMask::full(8, sub.l), sub).unwrap();
    let x = Tsmi {
        grid_n: 8,
        s: 4,
        data: (0..256).map(|i| Complex64::new((i as f64 * 0.37).sin(), (i as f64 * 0.11).cos())).collect(),
    };
    let back = model.adjoint(&model.apply(&x).unwrap()).unwrap();
    for (a, b) in back.data.iter().zip(&x.data) {
        assert_relative_eq!(a.re, b.re, epsilon = 1e-12);
        assert_relative_eq!(a.im, b.im, epsilon = 1e-12);
    }
    // ‖H x‖ = ‖x‖ when every node of every frame is sampled and V is orthonormal
    assert_relative_eq!(model.apply(&x).unwrap().norm_sqr(), x.norm_sqr(), max_relative = 1e-12);
}
