#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use nmvs_core::autodiff::{export_parameters, Parameters, Scalar, Tensor, Var};
use nmvs_core::camera::{bilinear_sample, generate_rays, project_points, rays_at, Camera, CameraIntrinsics, CameraPose};
use nmvs_core::encoders::{extract_features, FeatureMap, UNetConfig};
use nmvs_core::model::{Model, ModelConfig};
use nmvs_core::objective::{confidence_loss, LossConfig};
use nmvs_core::ray_marcher::{aggregate, SourceView};
use nmvs_core::renderer::{render, SourceImage};
use nmvs_core::scene_io::{generate_toy_scene, Primitive, SceneDataset, Split, ToySceneSpec};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let d: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::from_f64(shape, &d)
}

/// `‖a - b‖ / max(‖a‖, ‖b‖, floor)`
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-12)
}

/// Central differences of `f` at `x` over the coordinates `idx`.
pub fn numeric_gradient(x: &Tensor<f64>, idx: &[usize], h: f64, f: impl Fn(&Tensor<f64>) -> f64) -> Vec<f64> {
    idx.iter()
        .map(|&i| {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            (f(&p) - f(&m)) / (2.0 * h)
        })
        .collect()
}

/// Relative error between the reverse-mode gradient of the scalar `f` and
/// central differences, over every coordinate of `x`.
pub fn check_input_gradient(x: &Tensor<f64>, f: impl Fn(&Var<f64>) -> Var<f64>) -> f64 {
    let leaf = Var::leaf(x.clone());
    let grads = f(&leaf).backward();
    let analytic = grads.get_or_zeros(&leaf).data().to_vec();
    let idx: Vec<usize> = (0..x.len()).collect();
    let numeric = numeric_gradient(x, &idx, 1e-6, |p| f(&Var::constant(p.clone())).value().item());
    relative_error(&analytic, &numeric)
}

/// A projection `[N, C] -> scalar` with fixed random weights, so every
/// output element contributes to the checked gradient.
pub fn random_projection<T: Scalar>(out: &Var<T>, seed: u64) -> Var<T> {
    let w: Tensor<T> = random_tensor(&mut rng(seed), out.shape(), -1.0, 1.0);
    out.mul(&Var::constant(w)).sum()
}

/// Up to `per_group` random coordinates of every parameter tensor of `model`.
pub fn parameter_sample(names: &[(String, usize)], per_group: usize, seed: u64) -> Vec<(usize, usize)> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for (g, (_, len)) in names.iter().enumerate() {
        for _ in 0..per_group.min(*len) {
            out.push((g, r.gen_range(0..*len)));
        }
    }
    out
}

/// Relative error of model-parameter gradients of `loss` over a random
/// subset of coordinates, with central differences of step `h`. The analytic side runs in `T`, the numeric side
/// always in double precision.
pub fn check_parameter_gradient<T: Scalar>(
    model: &Model<f64>,
    per_group: usize,
    seed: u64,
    h: f64,
    loss: impl Fn(&Model<T>) -> Var<T>,
    loss64: impl Fn(&Model<f64>) -> f64,
) -> f64 {
    let analytic_model: Model<T> = model.cast();
    let mut leaves = Vec::new();
    analytic_model.visit("", &mut |n, v| leaves.push((n.to_string(), v.clone())));
    let grads = loss(&analytic_model).backward();
    let params = export_parameters(model);
    let names: Vec<(String, usize)> = params.iter().map(|(n, t)| (n.clone(), t.len())).collect();
    let picks = parameter_sample(&names, per_group, seed);
    let mut analytic = Vec::with_capacity(picks.len());
    let mut numeric = Vec::with_capacity(picks.len());
    for &(g, i) in &picks {
        analytic.push(grads.get_or_zeros(&leaves[g].1).data()[i].as_f64());
        let eval = |delta: f64| {
            let mut m = model.clone();
            let mut k = 0;
            m.visit_mut("", &mut |_, v| {
                if k == g {
                    let mut t = v.value().clone();
                    t.data_mut()[i] += delta;
                    *v = Var::leaf(t);
                }
                k += 1;
            });
            loss64(&m)
        };
        numeric.push((eval(h) - eval(-h)) / (2.0 * h));
    }
    relative_error(&analytic, &numeric)
}

pub fn look_at_camera(eye: [f64; 3], size: usize, focal: f64) -> Camera {
    Camera::new(
        CameraIntrinsics {
            fx: focal,
            fy: focal,
            cx: size as f64 / 2.0,
            cy: size as f64 / 2.0,
            width: size,
            height: size,
        },
        CameraPose::look_at(Vector3::from(eye), Vector3::zeros(), Vector3::y()),
    )
}

pub fn toy(primitive: Primitive, size: usize, views: usize, seed: u64) -> SceneDataset {
    generate_toy_scene(
        &ToySceneSpec {
            primitive,
            width: size,
            height: size,
            num_views: views,
            seed,
            ..Default::default()
        },
        None,
    )
    .expect("toy scene")
    .dataset
}

/// A narrow model for double-precision checks on tiny images.
pub fn small_config() -> ModelConfig {
    ModelConfig {
        unet: UNetConfig {
            channels: [4, 4, 4],
            ..UNetConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn sources(ds: &SceneDataset, target: usize) -> Vec<usize> {
    ds.ids(Split::Train).into_iter().filter(|&i| i != target).collect()
}

/// Confidence loss of rendering view `target` of `ds`.
pub fn render_loss<T: Scalar>(model: &Model<T>, ds: &SceneDataset, target: usize) -> Var<T> {
    let out = render(model, ds, &ds.views[target].camera, &sources(ds, target)).expect("render");
    let gt = Var::constant(ds.views[target].image.cast::<T>());
    confidence_loss(&gt, &out.color, &out.confidence, &LossConfig::default()).expect("loss")
}

/// Three source views of `ds` with their cameras and images in `T`.
pub fn source_images<T: Scalar>(ds: &SceneDataset, ids: [usize; 3]) -> Vec<(usize, Camera, Tensor<T>)> {
    ids.iter().map(|&i| (i, ds.views[i].camera, ds.views[i].image.cast())).collect()
}

pub fn features<T: Scalar>(model: &Model<T>, srcs: &[(usize, Camera, Tensor<T>)]) -> Vec<FeatureMap<T>> {
    let imgs: Vec<(usize, &Tensor<T>)> = srcs.iter().map(|(i, _, t)| (*i, t)).collect();
    extract_features(&model.unet, &imgs).expect("features")
}

pub fn source_views<'a, T: Scalar>(srcs: &'a [(usize, Camera, Tensor<T>)], feats: &'a [FeatureMap<T>]) -> Vec<SourceView<'a, T>> {
    srcs.iter()
        .zip(feats)
        .map(|((_, c, img), f)| SourceView {
            camera: c,
            features: f,
            image: img,
        })
        .collect()
}

pub fn source_image_refs<T: Scalar>(srcs: &[(usize, Camera, Tensor<T>)]) -> [SourceImage<'_, T>; 3] {
    [0, 1, 2].map(|k| SourceImage {
        id: srcs[k].0,
        camera: &srcs[k].1,
        image: &srcs[k].2,
    })
}

/// Bilinear sampling: gradient w.r.t. the coordinates and the map.
pub fn bilinear_errors() -> (f64, f64) {
    let mut r = rng(11);
    let map: Tensor<f64> = random_tensor(&mut r, &[5, 6, 3], -1.0, 1.0);
    let coords: Tensor<f64> = random_tensor(&mut r, &[12, 2], 0.1, 4.3);
    let map_c = Var::constant(map.clone());
    let e_coords = check_input_gradient(&coords, |c| random_projection(&bilinear_sample(&map_c, c, None), 1));
    let coords_c = Var::constant(coords);
    let e_map = check_input_gradient(&map, |m| random_projection(&bilinear_sample(m, &coords_c, None), 2));
    (e_coords, e_map)
}

/// Depth along rays, through world points and projection into a second camera.
pub fn projection_chain_error() -> f64 {
    let target = look_at_camera([0.0, 0.5, 3.0], 8, 8.0);
    let source = look_at_camera([1.2, 0.8, 2.6], 8, 8.0);
    let rays = generate_rays(&target.intrinsics, &target.pose, 1).expect("rays");
    let mut r = rng(12);
    let t: Tensor<f64> = random_tensor(&mut r, &[rays.len(), 1], 2.0, 3.5);
    check_input_gradient(&t, |t| random_projection(&project_points(&rays_at(t, &rays), &source).0, 3))
}

/// Feature aggregation over three views w.r.t. the query points.
pub fn aggregate_error() -> f64 {
    let ds = toy(Primitive::Sphere, 8, 6, 0);
    let model = Model::<f64>::new(small_config(), 0).expect("model");
    let srcs = source_images::<f64>(&ds, [1, 2, 3]);
    let feats = features(&model, &srcs);
    let views = source_views(&srcs, &feats);
    let target = &ds.views[0].camera;
    let rays = generate_rays(&target.intrinsics, &target.pose, 2).expect("rays");
    let t: Tensor<f64> = random_tensor(&mut rng(13), &[rays.len(), 1], 2.2, 3.2);
    let bary = [0.5, 0.3, 0.2];
    let posenc = model.config.marcher.posenc;
    check_input_gradient(&t, |t| {
        random_projection(&aggregate(&rays_at(t, &rays), &bary, &views, &posenc, &ds.bounds).combined, 4)
    })
}

/// Confidence loss w.r.t. the prediction and the confidence.
pub fn confidence_loss_errors() -> (f64, f64) {
    let mut r = rng(14);
    let gt: Tensor<f64> = random_tensor(&mut r, &[4, 5, 3], 0.0, 1.0);
    let pred: Tensor<f64> = random_tensor(&mut r, &[4, 5, 3], 0.0, 1.0);
    let q: Tensor<f64> = random_tensor(&mut r, &[4, 5, 1], 0.05, 0.95);
    let cfg = LossConfig::default();
    let (gv, qv, pv) = (Var::constant(gt), Var::constant(q.clone()), Var::constant(pred.clone()));
    let e_pred = check_input_gradient(&pred, |p| confidence_loss(&gv, p, &qv, &cfg).expect("loss"));
    let e_q = check_input_gradient(&q, |q| confidence_loss(&gv, &pv, q, &cfg).expect("loss"));
    (e_pred, e_q)
}

/// Full render and loss on an 8×8 toy scene, w.r.t. sampled parameters of
/// every group, in double precision. The step is small because depth moves
/// by roughly 18·far·h and must not cross a bilinear cell boundary.
pub fn full_forward_error() -> f64 {
    let ds = toy(Primitive::Sphere, 8, 8, 0);
    let model = Model::<f64>::new(small_config(), 1).expect("model");
    check_parameter_gradient::<f64>(&model, 2, 5, 1e-8, |m| render_loss(m, &ds, 1), |m| render_loss(m, &ds, 1).value().item())
}
