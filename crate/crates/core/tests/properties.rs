//! Property tests over random shapes, configurations and values.

use proptest::prelude::*;
use shapeconv::conv::{conv2d, conv2d_backward, conv2d_direct, ConvConfig};
use shapeconv::data::{generate_scene, random_recipe, SceneRecipe};
use shapeconv::gradcheck::random_shapeconv_params;
use shapeconv::metrics::{boundary_distance, fcn_metrics, trimap_curve, ConfusionMatrix};
use shapeconv::net::{build_model, LayerKind, ModelSpec};
use shapeconv::shapeconv::{decompose_kernel, fuse, identity_shape_weight, init_params, shapeconv_forward};
use shapeconv::tensor::{Axes, Scalar, Tensor};
use shapeconv::verify::random_layer;
use shapeconv::Rng;

fn uniform<T: Scalar>(shape: &[usize], rng: &mut Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::of(rng.range(-1.0, 1.0)))
}

fn he_kernel(cfg: &ConvConfig, rng: &mut Rng) -> Tensor<f64> {
    let std = (2.0 / (cfg.taps() * cfg.c_in) as f64).sqrt();
    Tensor::from_fn(&cfg.kernel_shape(), |_| rng.normal() * std)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mean_of_constant_is_the_constant(
        dims in prop::collection::vec(1usize..6, 1..5),
        c in -1e6f64..1e6,
    ) {
        let t = Tensor::full(&dims, c);
        let all: Vec<usize> = (0..dims.len()).collect();
        let m = t.reduce_mean(&Axes::new(&all).unwrap(), false).unwrap();
        prop_assert_eq!(m.data(), &[c]);
        let t32 = Tensor::full(&dims, c as f32);
        let m32 = t32.reduce_mean(&Axes::new(&all).unwrap(), true).unwrap();
        prop_assert_eq!(m32.data(), &[c as f32]);
    }

    #[test]
    fn conv_is_linear_in_the_kernel(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = Rng::new(seed);
        let (cfg, dims) = random_layer(&mut rng, true);
        let cfg = cfg.without_bias();
        let (k1, k2) = (he_kernel(&cfg, &mut rng), he_kernel(&cfg, &mut rng));
        let x = uniform::<f64>(&dims, &mut rng);
        let mixed = k1.scale(a).add(&k2.scale(b)).unwrap();
        let lhs = conv2d(&x, &mixed, None, &cfg).unwrap();
        let rhs = conv2d(&x, &k1, None, &cfg).unwrap().scale(a).add(&conv2d(&x, &k2, None, &cfg).unwrap().scale(b)).unwrap();
        let scale = lhs.max_abs().max(rhs.max_abs()).max(1e-300);
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() / scale <= 1e-6);
    }

    #[test]
    fn conv_backward_is_the_adjoint(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (cfg, dims) = random_layer(&mut rng, true);
        let k = he_kernel(&cfg, &mut rng);
        let x = uniform::<f64>(&dims, &mut rng);
        let bias = cfg.has_bias.then(|| Tensor::zeros(&[cfg.c_out]));
        let y = conv2d(&x, &k, bias.as_ref(), &cfg).unwrap();
        let g = uniform::<f64>(y.shape(), &mut rng);
        let grads = conv2d_backward(&x, &k, &cfg, &g).unwrap();
        let lhs = y.dot(&g).unwrap();
        prop_assert!((lhs - x.dot(&grads.grad_input).unwrap()).abs() <= 1e-10);
        prop_assert!((lhs - k.dot(&grads.grad_kernel).unwrap()).abs() <= 1e-10);
    }

    #[test]
    fn kernel_decomposition_reconstructs(seed in any::<u64>(), kh in 1usize..5, kw in 1usize..5, ci in 1usize..4, co in 1usize..4) {
        let mut rng = Rng::new(seed);
        let n = kh * kw;
        // On a dyadic grid with a representable mean every step is exact.
        let mut grid = Tensor::<f64>::zeros(&[kh, kw, ci, co]);
        for cc in 0..ci * co {
            let mean = (rng.below(512) as f64 - 256.0) / 32.0;
            let mut dev: Vec<i64> = (0..n).map(|_| rng.below(257) as i64 - 128).collect();
            let total: i64 = dev.iter().sum();
            dev[0] -= total;
            for (t, d) in dev.iter().enumerate() {
                grid.data_mut()[t * ci * co + cc] = mean + *d as f64 / 32.0;
            }
        }
        let d = decompose_kernel(&grid).unwrap();
        let back = Tensor::from_fn(grid.shape(), |i| d.base.data()[i % (ci * co)] + d.shape.data()[i]);
        prop_assert_eq!(&back, &grid);

        // Arbitrary values: one rounding of the residual, and a residual
        // whose spatial mean vanishes.
        let k = Tensor::from_fn(&[kh, kw, ci, co], |_| rng.normal());
        let d = decompose_kernel(&k).unwrap();
        for i in 0..k.len() {
            let (kv, bv) = (k.data()[i], d.base.data()[i % (ci * co)]);
            let recon = bv + d.shape.data()[i];
            prop_assert!((recon - kv).abs() <= 2.0 * f64::EPSILON * (kv.abs() + bv.abs()));
        }
        for cc in 0..ci * co {
            let mean = (0..n).map(|t| d.shape.data()[t * ci * co + cc]).sum::<f64>() / n as f64;
            prop_assert!(mean.abs() <= 1e-12);
        }
    }

    #[test]
    fn fresh_layer_is_vanilla(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (cfg, dims) = random_layer(&mut rng, true);
        let p = init_params::<f32>(&cfg, seed).unwrap();
        let x = uniform::<f32>(&dims, &mut rng);
        let vanilla = conv2d(&x, &p.kernel, p.bias.as_ref(), &cfg).unwrap();
        prop_assert!(shapeconv_forward(&x, &p).unwrap().max_abs_diff(&vanilla).unwrap() <= 1e-6);
    }

    #[test]
    fn fusion_matches_unfused_forward(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (cfg, dims) = random_layer(&mut rng, true);
        let p = random_shapeconv_params(cfg, &mut rng);
        let x = uniform::<f64>(&dims, &mut rng);
        let f = fuse(&p).unwrap();
        let fused = conv2d(&x, &f.kernel, f.bias.as_ref(), &f.cfg).unwrap();
        prop_assert!(fused.max_abs_diff(&shapeconv_forward(&x, &p).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn identity_shape_layer_ignores_channel_offsets(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (cfg, dims) = random_layer(&mut rng, false);
        let mut p = random_shapeconv_params(cfg, &mut rng);
        p.base_weight = 0.0;
        p.shape_weight = identity_shape_weight(cfg.taps(), cfg.c_in);
        let x = uniform::<f64>(&dims, &mut rng);
        let plane = dims[2] * dims[3];
        let offs: Vec<f64> = (0..dims[1]).map(|_| rng.range(-10.0, 10.0)).collect();
        let shifted = Tensor::from_fn(x.shape(), |i| x.data()[i] + offs[(i / plane) % dims[1]]);
        let gap = shapeconv_forward(&shifted, &p).unwrap().max_abs_diff(&shapeconv_forward(&x, &p).unwrap()).unwrap();
        prop_assert!(gap <= 1e-10);
    }

    #[test]
    fn class_permutation_permutes_ious_only(
        k in 2usize..7,
        cells in prop::collection::vec(0u64..50, 36),
        perm_seed in any::<u64>(),
    ) {
        let rows: Vec<Vec<u64>> = (0..k).map(|t| (0..k).map(|p| cells[t * 6 + p]).collect()).collect();
        let mut sigma: Vec<usize> = (0..k).collect();
        Rng::new(perm_seed).shuffle(&mut sigma);
        let mut permuted = vec![vec![0u64; k]; k];
        for t in 0..k {
            for p in 0..k {
                permuted[sigma[t]][sigma[p]] = rows[t][p];
            }
        }
        let cm = ConfusionMatrix::from_rows(&rows).unwrap();
        prop_assume!(cm.total() > 0);
        let a = fcn_metrics(&cm).unwrap();
        let b = fcn_metrics(&ConfusionMatrix::from_rows(&permuted).unwrap()).unwrap();
        for (x, y) in [(a.pixel_acc, b.pixel_acc), (a.mean_acc, b.mean_acc), (a.mean_iou, b.mean_iou), (a.fw_iou, b.fw_iou)] {
            prop_assert!((x - y).abs() <= 1e-12);
        }
        for (t, &s) in sigma.iter().enumerate() {
            prop_assert_eq!(a.class_iou[t], b.class_iou[s]);
        }
    }

    #[test]
    fn boundary_distance_matches_brute_force(
        h in 1usize..10,
        w in 1usize..10,
        raw in prop::collection::vec(0u8..4, 81),
    ) {
        // Label 3 plays the ignore label.
        let truth: Vec<u8> = raw[..h * w].iter().map(|&v| if v == 3 { 255 } else { v }).collect();
        let at = |i: usize, j: usize| truth[i * w + j];
        let is_edge = |i: usize, j: usize| {
            let t = at(i, j);
            let nb = [(i.wrapping_sub(1), j), (i + 1, j), (i, j.wrapping_sub(1)), (i, j + 1)];
            t != 255 && nb.iter().any(|&(a, b)| a < h && b < w && at(a, b) != 255 && at(a, b) != t)
        };
        let edges: Vec<(usize, usize)> = (0..h).flat_map(|i| (0..w).map(move |j| (i, j))).filter(|&(i, j)| is_edge(i, j)).collect();
        let dist = boundary_distance(&truth, h, w, 255);
        for i in 0..h {
            for j in 0..w {
                let expected = edges.iter().map(|&(a, b)| a.abs_diff(i).max(b.abs_diff(j))).min();
                prop_assert_eq!(dist[i * w + j], expected);
            }
        }
        // Bands grow with the width.
        let in_band = |width: usize| -> Vec<bool> { dist.iter().map(|d| d.is_some_and(|d| d < width)).collect() };
        for w1 in 1..6 {
            let (narrow, wide) = (in_band(w1), in_band(w1 + 1));
            prop_assert!(narrow.iter().zip(&wide).all(|(&a, &b)| !a || b));
        }
    }

    #[test]
    fn ignored_pixels_do_not_count(
        raw in prop::collection::vec(0u8..4, 64),
        pred in prop::collection::vec(0u8..3, 64),
        other in prop::collection::vec(0u8..3, 64),
    ) {
        let truth: Vec<u8> = raw.iter().map(|&v| if v == 3 { 255 } else { v }).collect();
        let pred2: Vec<u8> = pred.iter().zip(&other).zip(&truth).map(|((&p, &o), &t)| if t == 255 { o } else { p }).collect();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&pred, &truth, 255).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&pred2, &truth, 255).unwrap();
        prop_assert_eq!(&a, &b);
        let widths = [1, 2, 3];
        prop_assert_eq!(
            trimap_curve(&pred, &truth, 8, 8, &widths, 255).unwrap(),
            trimap_curve(&pred2, &truth, 8, 8, &widths, 255).unwrap()
        );
    }

    #[test]
    fn depth_shift_commutes_with_generation(seed in any::<u64>(), quarter_steps in 0u32..16) {
        let mut rng = Rng::new(seed);
        let recipe = random_recipe(&mut rng, 24, 24, 0.0);
        let delta = quarter_steps as f64 * 0.25;
        let base = generate_scene(&recipe, seed).unwrap();
        let shifted = generate_scene(&SceneRecipe { depth_offset: delta, ..recipe }, seed).unwrap();
        prop_assert_eq!(&base.rgb, &shifted.rgb);
        prop_assert_eq!(&base.labels, &shifted.labels);
        for (x, y) in base.depth.data().iter().zip(shifted.depth.data()) {
            prop_assert_eq!(*y, *x + delta as f32);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn production_and_reference_convolutions_agree(seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let (cfg, dims) = random_layer(&mut rng, true);
        let k = he_kernel(&cfg, &mut rng);
        let x = uniform::<f64>(&dims, &mut rng);
        let b = cfg.has_bias.then(|| uniform::<f64>(&[cfg.c_out], &mut rng));
        let gap64 = conv2d(&x, &k, b.as_ref(), &cfg).unwrap().max_abs_diff(&conv2d_direct(&x, &k, b.as_ref(), &cfg).unwrap()).unwrap();
        prop_assert!(gap64 <= 1e-12);
        let (k32, x32, b32) = (k.cast::<f32>(), x.cast::<f32>(), b.as_ref().map(|b| b.cast::<f32>()));
        let gap32 = conv2d(&x32, &k32, b32.as_ref(), &cfg).unwrap().max_abs_diff(&conv2d_direct(&x32, &k32, b32.as_ref(), &cfg).unwrap()).unwrap();
        prop_assert!(gap32 <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn twins_agree_at_step_zero(seed in any::<u64>()) {
        let vanilla = build_model::<f32>(&ModelSpec::toy(4, 6, 8, LayerKind::Conv), seed).unwrap();
        let shaped = build_model::<f32>(&ModelSpec::toy(4, 6, 8, LayerKind::ShapeConv), seed).unwrap();
        let mut rng = Rng::new(seed);
        let x = uniform::<f32>(&[1, 4, 16, 16], &mut rng);
        prop_assert!(shaped.forward(&x).unwrap().max_abs_diff(&vanilla.forward(&x).unwrap()).unwrap() <= 1e-6);
    }
}
