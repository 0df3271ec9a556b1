use std::path::Path;

use gridbp::inference::BpOptions;
use gridbp::io::{encode_pfm, parse_pfm};
use gridbp::oracle::{brute_max_marginals, max_deviation_up_to_constants, TinyGraph};
use gridbp::pipeline::dense_jump;
use gridbp::{sweep_bp_forward, GridShape, JumpParams, PairwiseSpec, Plane, Volume};
use proptest::prelude::*;

fn volume(h: usize, w: usize, l: usize, vals: &[f64]) -> Volume {
    let shape = GridShape::new(h, w, l).unwrap();
    Volume::from_fn(shape, |y, x, s| vals[(y * w + x) * l + s])
}

fn jump() -> impl Strategy<Value = JumpParams> {
    proptest::array::uniform5(0.0f64..2.0).prop_map(|b| JumpParams::new(b[0], b[1], b[2], b[3], b[4]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn single_row_beliefs_are_exact_max_marginals(
        w in 1usize..6,
        l in 2usize..4,
        vals in proptest::collection::vec(-2.0f64..2.0, 18),
        p in jump(),
    ) {
        let g = volume(1, w, l, &vals);
        let spec = PairwiseSpec::TruncatedJump(p);
        let tape = sweep_bp_forward(&g, &spec, BpOptions::default()).unwrap();
        let exact = brute_max_marginals(&TinyGraph::from_grid(&g, &spec)).unwrap();
        prop_assert!(max_deviation_up_to_constants(tape.log_beliefs.data(), &exact, l) < 1e-9);
    }

    #[test]
    fn jump_kernel_agrees_with_its_dense_matrix(
        h in 1usize..5,
        w in 1usize..5,
        l in 2usize..7,
        vals in proptest::collection::vec(-2.0f64..2.0, 150),
        p in jump(),
    ) {
        let g = volume(h, w, l, &vals);
        let a = sweep_bp_forward(&g, &PairwiseSpec::TruncatedJump(p.clone()), BpOptions::default()).unwrap();
        let b = sweep_bp_forward(&g, &PairwiseSpec::FullMatrix(dense_jump(&p, l)), BpOptions::default()).unwrap();
        prop_assert!(a.log_beliefs.max_abs_diff(&b.log_beliefs) < 1e-9);
    }

    #[test]
    fn per_pixel_offsets_leave_beliefs_unchanged(
        vals in proptest::collection::vec(-2.0f64..2.0, 36),
        offsets in proptest::collection::vec(-5.0f64..5.0, 9),
        p in jump(),
    ) {
        let g = volume(3, 3, 4, &vals);
        let shifted = Volume::from_fn(g.shape(), |y, x, s| g.get(y, x, s) + offsets[y * 3 + x]);
        let spec = PairwiseSpec::TruncatedJump(p);
        let a = gridbp::read_beliefs(&sweep_bp_forward(&g, &spec, BpOptions::default()).unwrap().log_beliefs);
        let b = gridbp::read_beliefs(&sweep_bp_forward(&shifted, &spec, BpOptions::default()).unwrap().log_beliefs);
        prop_assert!(a.volume().max_abs_diff(b.volume()) < 1e-9);
        for px in a.volume().pixels() {
            prop_assert!((px.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn pfm_round_trips(h in 1usize..6, w in 1usize..6, vals in proptest::collection::vec(-1e3f32..1e3, 36)) {
        let img = Plane::from_fn(h, w, |y, x| vals[y * w + x]);
        let back = parse_pfm(&encode_pfm(&img), Path::new("mem.pfm")).unwrap();
        prop_assert_eq!(back, img);
    }
}
