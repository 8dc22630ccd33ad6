//! Finite-difference checks of the differentiable pipeline.

mod common;

use common::*;
use nmvs_core::autodiff::{export_parameters, Parameters, Scalar, Tensor, Var};
use nmvs_core::encoders::UNet;
use nmvs_core::model::Model;
use nmvs_core::ray_marcher::{march, predict_step, MarchState, MarcherConfig, MarcherWeights, HIDDEN_DIM};
use nmvs_core::renderer::{blend, sample_color_features, BlendWeights, SAMPLE_DIM};
use nmvs_core::scene_io::Primitive;

const DOUBLE: f64 = 1e-4;
const SINGLE: f64 = 1e-2;

#[test]
fn bilinear_sampling() {
    let (uv, map) = bilinear_errors();
    assert!(uv <= DOUBLE && map <= DOUBLE, "{uv} {map}");
}

#[test]
fn projection_chain() {
    let e = projection_chain_error();
    assert!(e <= DOUBLE, "{e}");
}

#[test]
fn aggregation() {
    let e = aggregate_error();
    assert!(e <= DOUBLE, "{e}");
}

#[test]
fn confidence_loss_inputs() {
    let (pred, q) = confidence_loss_errors();
    assert!(pred <= DOUBLE && q <= DOUBLE, "{pred} {q}");
}

#[test]
fn full_forward_on_tiny_scene() {
    let e = full_forward_error();
    assert!(e <= DOUBLE, "{e}");
}

#[test]
fn colour_feature_sampling_wrt_points() {
    let ds = toy(Primitive::Sphere, 8, 6, 0);
    let model = Model::<f64>::new(small_config(), 0).unwrap();
    let srcs = source_images::<f64>(&ds, [1, 2, 3]);
    let feats = features(&model, &srcs);
    let views = source_views(&srcs, &feats);
    let points: Tensor<f64> = random_tensor(&mut rng(7), &[10, 3], -0.6, 0.6);
    let e = check_input_gradient(&points, |x| {
        let k = sample_color_features(x, &views);
        random_projection(&Var::concat_cols(&[&k[0], &k[1], &k[2]]), 8)
    });
    assert!(e <= DOUBLE, "{e}");
}

fn cast_module<M, N>(src: &M, mut dst: N) -> N
where
    M: Parameters<f64>,
    N: Parameters<f32>,
{
    nmvs_core::autodiff::import_parameters(&mut dst, &export_parameters(src)).unwrap();
    dst
}

/// Single-precision reverse-mode gradients of `f32_loss` against double
/// precision central differences of `f64_loss`, over every parameter.
fn module_error<M: Parameters<f64> + Clone, N: Parameters<f32>>(
    m64: &M,
    m32: &N,
    loss32: impl Fn(&N) -> Var<f32>,
    loss64: impl Fn(&M) -> f64,
    stride: usize,
) -> f64 {
    let mut leaves = Vec::new();
    m32.visit("", &mut |_, v| leaves.push(v.clone()));
    let grads = loss32(m32).backward();
    let (mut a, mut n) = (Vec::new(), Vec::new());
    for (g, leaf) in leaves.iter().enumerate() {
        let len = leaf.value().len();
        for i in (0..len).step_by(stride.min(len).max(1)) {
            a.push(grads.get_or_zeros(leaf).data()[i] as f64);
            let eval = |d: f64| {
                let mut m = m64.clone();
                let mut k = 0;
                m.visit_mut("", &mut |_, v| {
                    if k == g {
                        let mut t = v.value().clone();
                        t.data_mut()[i] += d;
                        *v = Var::leaf(t);
                    }
                    k += 1;
                });
                loss64(&m)
            };
            n.push((eval(1e-6) - eval(-1e-6)) / 2e-6);
        }
    }
    relative_error(&a, &n)
}

#[test]
fn blend_parameters_single_precision() {
    let w64: BlendWeights<f64> = BlendWeights::new(&mut rng(1));
    let w32 = cast_module(&w64, BlendWeights::<f32>::new(&mut rng(2)));
    let samples: Vec<Tensor<f64>> = (0..3).map(|i| random_tensor(&mut rng(10 + i), &[6, SAMPLE_DIM], 0.0, 1.0)).collect();
    let bary = [0.2, 0.5, 0.3];
    fn run<T: Scalar>(w: &BlendWeights<T>, s: &[Tensor<f64>], b: &[f64; 3]) -> Var<T> {
        let s: Vec<Var<T>> = s.iter().map(|t| Var::constant(t.cast())).collect();
        let (rgb, q) = blend(&s, b, w);
        random_projection(&Var::concat_cols(&[&rgb, &q]), 3)
    }
    let e = module_error(&w64, &w32, |w| run(w, &samples, &bary), |w| run(w, &samples, &bary).value().item(), 7);
    assert!(e <= SINGLE, "{e}");
}

#[test]
fn unet_patch_single_precision() {
    let cfg = small_config().unet;
    let u64_: UNet<f64> = UNet::new(&mut rng(3), cfg);
    let u32_ = cast_module(&u64_, UNet::<f32>::new(&mut rng(4), cfg));
    let img: Tensor<f64> = random_tensor(&mut rng(5), &[1, 8, 8, 3], 0.0, 1.0);
    fn run<T: Scalar>(u: &UNet<T>, img: &Tensor<f64>) -> Var<T> {
        random_projection(&u.forward(&Var::constant(img.cast())).unwrap(), 6)
    }
    let e = module_error(&u64_, &u32_, |u| run(u, &img), |u| run(u, &img).value().item(), 5);
    assert!(e <= SINGLE, "{e}");
}

#[test]
fn three_recurrent_steps_single_precision() {
    let cfg = MarcherConfig::default();
    let w64: MarcherWeights<f64> = MarcherWeights::new(&mut rng(6), cfg).unwrap();
    let w32 = cast_module(&w64, MarcherWeights::<f32>::new(&mut rng(7), cfg).unwrap());
    let refined: Tensor<f64> = random_tensor(&mut rng(8), &[4, 64], -1.0, 1.0);
    fn run<T: Scalar>(w: &MarcherWeights<T>, refined: &Tensor<f64>) -> Var<T> {
        let n = refined.rows();
        let mut s = MarchState {
            t: Var::constant(Tensor::full(&[n, 1], T::lit(0.5))),
            hidden: Var::constant(Tensor::zeros(&[n, HIDDEN_DIM])),
            cell: Var::constant(Tensor::zeros(&[n, HIDDEN_DIM])),
            level: 0,
            height: 2,
            width: 2,
        };
        let r = Var::constant(refined.cast());
        for _ in 0..3 {
            s = predict_step(&r, &s, w, 4.0, 4.8).1;
        }
        s.t.sum()
    }
    // The refinement convolutions are not on this path.
    let e = module_error(&w64, &w32, |w| run(w, &refined), |w| run(w, &refined).value().item(), 11);
    assert!(e <= SINGLE, "{e}");
}

#[test]
fn mean_depth_depends_on_feature_network() {
    let ds = toy(Primitive::Sphere, 8, 6, 0);
    let model = Model::<f64>::new(small_config(), 2).unwrap();
    let srcs = source_images::<f64>(&ds, [1, 2, 3]);
    let mean_depth = |m: &Model<f64>| {
        let feats = features(m, &srcs);
        let views = source_views(&srcs, &feats);
        march(&ds.views[0].camera, &views, &[0.4, 0.3, 0.3], &ds.bounds, &m.config.schedule, &m.config.march, &m.marcher)
            .unwrap()
            .depth
            .mean()
    };
    let mut leaves = Vec::new();
    model.unet.visit("", &mut |_, v| leaves.push(v.clone()));
    let grads = mean_depth(&model).backward();
    let total: f64 = leaves.iter().map(|l| grads.get_or_zeros(l).norm()).sum();
    assert!(total.is_finite() && total > 0.0, "{total}");
    // Bilinear lookups make depth piecewise smooth; the step stays inside one cell.
    let e = check_parameter_gradient::<f64>(&model, 1, 9, 1e-9, |m| mean_depth(m), |m| mean_depth(m).value().item());
    assert!(e <= DOUBLE, "{e}");
}
