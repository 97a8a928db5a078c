use drfuse_core::config::RunConfig;
use drfuse_core::flow::{warp_bilinear, FlowField};
use drfuse_core::guidance::{compose_guidance, modulation_coefficients};
use drfuse_core::metrics::{cc, frame_diff_energy, ssim};
use drfuse_core::numerics::io::{decode_tensor, encode_tensor, Dtype};
use drfuse_core::numerics::Tensor;
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modulation_preserves_variance(lambda in 0.0f64..=1.0) {
        let (a, s) = modulation_coefficients(lambda).unwrap();
        prop_assert!((a * a + s * s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn guidance_is_affine_in_the_branches(
        v in tensor(vec![3, 4, 4], -5.0, 5.0),
        w in tensor(vec![3, 4, 4], -5.0, 5.0),
        u in tensor(vec![3, 4, 4], -5.0, 5.0),
        s in 0.0f64..8.0,
    ) {
        let g = compose_guidance(&v, &w, &u, s).unwrap();
        for i in 0..g.len() {
            let expect = v.data()[i] + s * (w.data()[i] - u.data()[i]);
            prop_assert!((g.data()[i] - expect).abs() <= 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn correlation_ignores_common_offsets(
        a in tensor(vec![8, 8], 0.0, 1.0),
        b in tensor(vec![8, 8], 0.0, 1.0),
        c in -3.0f64..3.0,
    ) {
        let r = cc(&a, &b).unwrap();
        let shifted = cc(&a.map(|x| x + c), &b.map(|x| x + c)).unwrap();
        prop_assert!((r - shifted).abs() < 1e-9);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&r));
    }

    #[test]
    fn ssim_is_one_on_identical_inputs(a in tensor(vec![12, 12], 0.0, 1.0)) {
        prop_assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn diff_energy_vanishes_only_for_constant_sequences(
        frames in prop::collection::vec(tensor(vec![4, 4], 0.0, 1.0), 2..6),
        constant in any::<bool>(),
    ) {
        let seq: Vec<Tensor> = if constant { vec![frames[0].clone(); frames.len()] } else { frames };
        let changes = seq.windows(2).any(|p| p[0] != p[1]);
        let e = frame_diff_energy(&seq).unwrap();
        prop_assert_eq!(e.iter().all(|&v| v == 0.0), !changes);
    }

    #[test]
    fn zero_flow_warp_is_the_identity(z in tensor(vec![2, 5, 7], -2.0, 2.0)) {
        prop_assert_eq!(warp_bilinear(&z, &FlowField::zeros(5, 7)).unwrap(), z);
    }

    #[test]
    fn tensor_files_round_trip(z in tensor(vec![3, 5], -1e6, 1e6)) {
        let bytes = encode_tensor(&z, Dtype::F64).unwrap();
        prop_assert_eq!(decode_tensor(&bytes).unwrap().0, z);
    }

    #[test]
    fn config_text_is_a_fixed_point(
        seed in 0u64..1_000_000,
        scale in 0.0f64..8.0,
        gamma in 0.0f64..=1.0,
        steps in 1usize..200,
    ) {
        let mut cfg = RunConfig::default();
        cfg.apply_overrides([
            format!("seed={seed}").as_str(),
            format!("scale={scale}").as_str(),
            format!("gamma={gamma}").as_str(),
            format!("steps={steps}").as_str(),
        ]).unwrap();
        let text = cfg.to_string();
        let back = RunConfig::from_text(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_string(), text);
    }
}
