mod common;

use asymgan::autograd::Graph;
use asymgan::model::{Architecture, Mode, ModelBundle};
use asymgan::nets::*;
use asymgan::Tensor;
use common::*;
use proptest::prelude::*;

fn default_bundle(mode: Mode) -> ModelBundle<f32> {
    ModelBundle::init(Architecture::new(mode, NetConfig::default()), 0).unwrap()
}

#[test]
fn default_parameter_counts() {
    // The G and D_X/D_Y figures coincide with the widely published counts
    // of the 6-block resnet generator (7,837,699) and the 3-layer PatchGAN
    // (2,764,737) at base width 64.
    let ext = default_bundle(Mode::AsymExt);
    assert_eq!(ext.g.param_count(), 7_837_699);
    assert_eq!(ext.d_x.param_count(), 2_764_737);
    assert_eq!(ext.d_y.param_count(), 2_764_737);
    // Three CIN blocks, two norms each, gamma and beta maps of 256×8 + 256.
    assert_eq!(ext.f.param_count(), 7_837_699 + 6 * 2 * (256 * 8 + 256));
    // Three convs (1,792 + 73,856 + 295,168), three plain residual blocks
    // (3 × 1,180,160) and the 256→8 head.
    assert_eq!(ext.e.as_ref().unwrap().param_count(), 3_913_352);
    // 8→64→64→1.
    assert_eq!(ext.d_z.as_ref().unwrap().param_count(), 576 + 4_160 + 65);
    assert_eq!(ext.phi.param_count(), 448 + 4_640 + 18_496 + 36_928);

    let mid = default_bundle(Mode::AsymNoExt);
    // k4 s2 8→128, k3 128→128, k2 128→1.
    assert_eq!(mid.d_z.as_ref().unwrap().param_count(), 16_512 + 147_584 + 513);
    let base = default_bundle(Mode::BaselineCyclegan);
    assert_eq!(base.f.param_count(), 7_837_699);
    assert!(base.e.is_none() && base.d_z.is_none());
}

#[test]
fn parameter_counts_are_pure_functions_of_config() {
    let a = ModelBundle::<f32>::init(Architecture::new(Mode::AsymExt, tiny_net(16)), 1).unwrap();
    let b = ModelBundle::<f32>::init(Architecture::new(Mode::AsymExt, tiny_net(16)), 2).unwrap();
    for ((na, x), (_, y)) in a.all_nets().into_iter().zip(b.all_nets()) {
        assert_eq!(x.param_count(), y.param_count(), "{na}");
        assert_eq!(x.params().names(), y.params().names(), "{na}");
    }
}

#[test]
fn generator_depth() {
    let bundle = default_bundle(Mode::AsymExt);
    let s = bundle.g.summary();
    assert_eq!((s.downsampling, s.residual_blocks, s.upsampling), (2, 6, 2));
    assert_eq!(s.conditional_norms, 0);
    let s = bundle.f.summary();
    assert_eq!((s.downsampling, s.residual_blocks, s.upsampling), (2, 6, 2));
    assert_eq!(s.conditional_norms, 6);
}

#[test]
fn generator_shapes_and_range() {
    let mut r = rng(1);
    let cfg = NetConfig {
        base_channels: 4,
        n_res_blocks: 2,
        ..NetConfig::default()
    };
    let g = build_generator_g::<f32, _>(&cfg, &mut r).unwrap();
    for size in [128, 125] {
        let x = Tensor::<f32>::rand_uniform([1, 3, size, size], -3.0, 3.0, &mut r);
        let y = g.apply(&x, None).unwrap();
        assert_eq!(y.shape(), &[1, 3, size, size]);
        assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn concat_mid_takes_code_on_quarter_grid() {
    let mut r = rng(2);
    let cfg = tiny_net(128);
    let f = build_generator_f::<f32, _>(&cfg, Some((ZForm::SPATIAL, ZInjection::ConcatMid)), &mut r).unwrap();
    assert_eq!(ZForm::SPATIAL.code_shape(1, 128, 128), vec![1, 8, 16, 16]);
    let y = Tensor::<f32>::rand_uniform([1, 3, 128, 128], -1.0, 1.0, &mut r);
    let z = Tensor::<f32>::randn(vec![1, 8, 16, 16], 1.0, &mut r);
    assert_eq!(f.apply(&y, Some(&z)).unwrap().shape(), &[1, 3, 128, 128]);
    let bad = Tensor::<f32>::randn(vec![1, 8, 15, 15], 1.0, &mut r);
    assert!(f.apply(&y, Some(&bad)).is_err());
    assert!(f.apply(&y, None).is_err());
}

#[test]
fn concat_all_decoder_runs() {
    let mut r = rng(3);
    let f = build_generator_f::<f32, _>(&tiny_net(16), Some((ZForm::VECTOR, ZInjection::ConcatAllDecoder)), &mut r)
        .unwrap();
    let y = Tensor::<f32>::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut r);
    let z = Tensor::<f32>::randn(vec![2, 8], 1.0, &mut r);
    assert_eq!(f.apply(&y, Some(&z)).unwrap().shape(), &[2, 3, 16, 16]);
    assert!(ZInjection::ConcatAllDecoder.check(ZForm::SPATIAL).is_err());
}

#[test]
fn cin_identity_at_init_is_bitwise() {
    let mut r = rng(4);
    let f = build_generator_f::<f32, _>(&tiny_net(16), Some((ZForm::VECTOR, ZInjection::Cin)), &mut r).unwrap();
    let plain = f.without_modulation();
    assert!(!plain.takes_code());
    let y = Tensor::<f32>::rand_uniform([2, 3, 16, 16], -1.0, 1.0, &mut r);
    let zero = Tensor::<f32>::zeros([2, 8]);
    let a = f.apply(&y, Some(&zero)).unwrap();
    let b = plain.apply(&y, None).unwrap();
    assert_eq!(a, b);
    // With all modulation maps at zero weight the code has no effect yet.
    let z = Tensor::<f32>::randn(vec![2, 8], 1.0, &mut r);
    assert_eq!(f.apply(&y, Some(&z)).unwrap(), a);
}

#[test]
fn cin_reacts_to_code_once_modulated() {
    let mut r = rng(5);
    let mut f = build_generator_f::<f64, _>(&tiny_net(16), Some((ZForm::VECTOR, ZInjection::Cin)), &mut r).unwrap();
    let name = f
        .params()
        .names()
        .iter()
        .find(|n| n.ends_with("gamma.w"))
        .unwrap()
        .clone();
    f.params_mut().get_mut(&name).unwrap().data_mut()[0] = 0.5;
    let y = Tensor::<f64>::rand_uniform([1, 3, 16, 16], -1.0, 1.0, &mut r);
    let z1 = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut r);
    let z2 = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut r);
    let a = f.apply(&y, Some(&z1)).unwrap();
    let b = f.apply(&y, Some(&z2)).unwrap();
    assert!(a.mean_abs_diff(&b).unwrap() > 0.0);
}

#[test]
fn encoder_code_shapes() {
    let mut r = rng(6);
    let cfg = tiny_net(128);
    let spatial = build_encoder::<f32, _>(&cfg, ZForm::SPATIAL, &mut r).unwrap();
    let vector = build_encoder::<f32, _>(&cfg, ZForm::VECTOR, &mut r).unwrap();
    let x = Tensor::<f32>::rand_uniform([1, 3, 128, 128], -1.0, 1.0, &mut r);
    assert_eq!(spatial.apply(&x, None).unwrap().shape(), &[1, 8, 16, 16]);
    assert_eq!(vector.apply(&x, None).unwrap().shape(), &[1, 8]);
}

#[test]
fn encoder_maps_zero_image_to_zero_code() {
    let mut r = rng(7);
    for zform in [ZForm::SPATIAL, ZForm::VECTOR] {
        let e = build_encoder::<f64, _>(&tiny_net(32), zform, &mut r).unwrap();
        let code = e.apply(&Tensor::zeros([1, 3, 32, 32]), None).unwrap();
        assert!(code.data().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn patch_discriminator_geometry() {
    let mut r = rng(8);
    let d = build_patch_discriminator::<f32, _>(&tiny_net(128), &mut r).unwrap();
    assert_eq!(d.receptive_field(), Some(70));
    let x = Tensor::<f32>::rand_uniform([1, 3, 128, 128], -1.0, 1.0, &mut r);
    assert_eq!(d.apply(&x, None).unwrap().shape(), &[1, 1, 16, 16]);
}

#[test]
fn patch_discriminator_is_translation_covariant() {
    // Instance norm sees the whole map, so equality holds up to the change in
    // normalization statistics; a wide input keeps that change small.
    let mut r = rng(9);
    let d = build_patch_discriminator::<f64, _>(&tiny_net(64), &mut r).unwrap();
    let (h, w) = (120, 520);
    let x = Tensor::<f64>::rand_uniform([1, 3, h, w + 8], -1.0, 1.0, &mut r);
    let a = d.apply(&x.crop(0, 0, h, w).unwrap(), None).unwrap();
    let b = d.apply(&x.crop(0, 8, h, w).unwrap(), None).unwrap();
    let (oh, ow) = (a.shape()[2], a.shape()[3]);
    let (mut aligned, mut unaligned, mut n) = (0.0, 0.0, 0.0);
    for oy in 5..oh - 5 {
        for ox in 5..ow - 6 {
            aligned += (at(&b, 0, 0, oy, ox) - at(&a, 0, 0, oy, ox + 1)).abs();
            unaligned += (at(&b, 0, 0, oy, ox) - at(&a, 0, 0, oy, ox)).abs();
            n += 1.0;
        }
    }
    assert!(aligned / n < 0.02 * unaligned / n, "{} vs {}", aligned / n, unaligned / n);
}

#[test]
fn code_discriminator_scores() {
    let mut r = rng(10);
    let cfg = tiny_net(128);
    let spatial = build_code_discriminator::<f64, _>(&cfg, ZForm::SPATIAL, &mut r).unwrap();
    let vector = build_code_discriminator::<f64, _>(&cfg, ZForm::VECTOR, &mut r).unwrap();
    let z = Tensor::<f64>::randn(vec![1, 8, 16, 16], 1.0, &mut r);
    let s = spatial.apply(&z, None).unwrap();
    assert_eq!(s.shape()[..2], [1, 1]);
    assert!(s.numel() > 1);
    for _ in 0..100 {
        let z = Tensor::<f64>::randn(vec![1, 8], 1.0, &mut r);
        let s = vector.apply(&z, None).unwrap();
        assert_eq!(s.numel(), 1);
        assert!(s.data()[0].is_finite());
    }
}

#[test]
fn instance_norm_statistics() {
    let mut r = rng(11);
    for shape in [[2, 3, 5, 7], [1, 4, 8, 8], [3, 1, 2, 3]] {
        let x = Tensor::<f64>::randn(shape.to_vec(), 3.0, &mut r).map(|v| v + 2.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let y = g.instance_norm(v, 1e-5).unwrap();
        let y = g.value(y);
        let plane = shape[2] * shape[3];
        for chunk in y.data().chunks(plane) {
            let mean = chunk.iter().sum::<f64>() / plane as f64;
            let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane as f64;
            assert!(mean.abs() < 1e-4, "mean {mean}");
            assert!((var - 1.0).abs() < 1e-3, "var {var}");
        }
    }
}

#[test]
fn feature_extractor_rejects_unknown_layer() {
    let phi = build_feature_extractor::<f32>();
    let x = Tensor::<f32>::zeros([1, 3, 16, 16]);
    assert!(asymgan::losses::feature_extractor(&phi, &x, 0).is_err());
    assert!(asymgan::losses::feature_extractor(&phi, &x, FEATURE_LAYERS + 1).is_err());
    assert!(asymgan::losses::feature_extractor(&phi, &x, FEATURE_LAYERS).is_ok());
}

#[test]
fn invalid_config_is_rejected() {
    let mut r = rng(12);
    let cfg = NetConfig {
        image_size: 30,
        ..tiny_net(16)
    };
    assert!(build_generator_g::<f32, _>(&cfg, &mut r).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn generator_outputs_stay_in_range(seed in any::<u64>(), scale in 0.1f32..50.0) {
        let mut r = rng(seed);
        let g = build_generator_g::<f32, _>(&tiny_net(16), &mut r).unwrap();
        let x = Tensor::<f32>::randn(vec![1, 3, 16, 16], scale as f64, &mut r);
        let y = g.apply(&x, None).unwrap();
        prop_assert!(y.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn fully_convolutional_sizes(seed in any::<u64>(), h in 2usize..9, w in 2usize..9) {
        let mut r = rng(seed);
        let cfg = tiny_net(16);
        let g = build_generator_g::<f32, _>(&cfg, &mut r).unwrap();
        let x = Tensor::<f32>::rand_uniform([1, 3, 4 * h, 4 * w], -1.0, 1.0, &mut r);
        let out = g.apply(&x, None).unwrap();
        prop_assert_eq!(out.shape(), &[1, 3, 4 * h, 4 * w]);
    }
}
