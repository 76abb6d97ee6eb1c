use proptest::prelude::*;

use equiada::adapter::{zero_conv_apply, ZeroConv};
use equiada::backbone::{DenoiserModel, ModelConfig};
use equiada::diffusion::{anchor_mean, DenoiseInput, Denoiser};
use equiada::geometry::{com_project, fully_connected, translate, GeometricTrajectory, RigidMotion};
use equiada::harness::marginal_score;
use equiada::numerics::Tensor;
use equiada::simdata::{decode_records, encode_records};

fn tensor(shape: &'static [usize]) -> impl Strategy<Value = Tensor> {
    let len: usize = shape.iter().product();
    prop::collection::vec(-5.0..5.0f64, len).prop_map(move |v| Tensor::new(shape, v).unwrap())
}

fn small_model() -> DenoiserModel {
    DenoiserModel::init(
        ModelConfig {
            hidden: 8,
            time_dim: 8,
            frame_dim: 4,
            attn_dim: 4,
            frames: 3,
            ..ModelConfig::default()
        },
        3,
    )
    .unwrap()
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_ignores_translation(
        x in tensor(&[4, 3, 3]),
        d in prop::array::uniform3(-50.0..50.0f64),
    ) {
        let p = com_project(&x);
        prop_assert!(com_project(&p).max_abs_diff(&p).unwrap() <= 1e-12);
        prop_assert!(com_project(&translate(&x, &d)).max_abs_diff(&p).unwrap() <= 1e-12);
    }

    #[test]
    fn motions_compose(a in any::<u64>(), b in any::<u64>(), x in tensor(&[3, 2, 3])) {
        let (f, g) = (RigidMotion::random(a, 4.0), RigidMotion::random(b, 4.0));
        let two = g.apply_points(&f.apply_points(&x));
        prop_assert!(g.after(&f).apply_points(&x).max_abs_diff(&two).unwrap() <= 1e-10);
    }

    #[test]
    fn zero_conv_is_equivariant(
        x in tensor(&[3, 2, 3]),
        h in tensor(&[3, 4]),
        phi in -2.0..2.0f64,
        seed in any::<u64>(),
    ) {
        let zc = ZeroConv { phi_x: phi, phi_h: vec![0.5, -1.0, 0.25, 2.0] };
        let g = RigidMotion::random(seed, 10.0);
        let (a, ha) = zero_conv_apply(&x, &h, &zc).unwrap();
        let (b, hb) = zero_conv_apply(&g.apply_points(&x), &h, &zc).unwrap();
        prop_assert!(b.max_abs_diff(&g.apply_vectors(&a)).unwrap() <= 1e-12);
        prop_assert_eq!(ha, hb);
    }

    #[test]
    fn anchor_follows_translation(
        c in tensor(&[3, 3, 3]),
        h in prop::collection::vec(0.0..1.0f64, 6),
        gamma in prop::collection::vec(-2.0..2.0f64, 4),
        d in prop::array::uniform3(-20.0..20.0f64),
    ) {
        let hh = Tensor::new(&[3, 2], h).unwrap();
        let a = anchor_mean(&c, &gamma, &hh).unwrap();
        let b = anchor_mean(&translate(&c, &d), &gamma, &hh).unwrap();
        prop_assert!(translate(&a, &d).max_abs_diff(&b).unwrap() <= 1e-12);
    }

    #[test]
    fn marginal_score_is_symmetric_and_bounded(a in tensor(&[2, 2, 3]), b in tensor(&[2, 2, 3]), bins in 2usize..20) {
        let ab = marginal_score(std::slice::from_ref(&a), std::slice::from_ref(&b), bins).unwrap();
        let ba = marginal_score(std::slice::from_ref(&b), std::slice::from_ref(&a), bins).unwrap();
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=2.0 / bins as f64).contains(&ab));
        prop_assert_eq!(marginal_score(std::slice::from_ref(&a), std::slice::from_ref(&a), bins).unwrap(), 0.0);
    }

    #[test]
    fn dataset_encoding_round_trips(x in tensor(&[3, 2, 3]), f in tensor(&[3, 2])) {
        let rec = GeometricTrajectory::new(f, x, vec![(0, 1), (2, 0)]).unwrap();
        let back = decode_records(&encode_records(std::slice::from_ref(&rec)).unwrap()).unwrap();
        prop_assert_eq!(back, vec![rec]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn denoiser_is_equivariant(x in tensor(&[3, 3, 3]), f in tensor(&[3, 2]), seed in any::<u64>(), tau in 1usize..=100) {
        let m = small_model();
        let e = fully_connected(3);
        let input = DenoiseInput { features: &f, edges: &e, frames: 3, condition: None, control: None };
        let g = RigidMotion::random(seed, 5.0);
        let out = m.predict(&input, &x, tau).unwrap();
        let moved = m.predict(&input, &g.apply_points(&x), tau).unwrap();
        prop_assert!(moved.max_abs_diff(&g.apply_vectors(&out)).unwrap() <= 1e-8 * out.max_abs().max(1.0));
    }
}
