//! Colour and confidence from the marched surface by learned blending.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{FlushDenormals, join_prefix, Linear, Parameters, Scalar, Tensor, Var};
use crate::camera::{bilinear_sample, project_points, Camera};
use crate::encoders::{extract_features, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ray_marcher::{march, weighted_moments, SceneBounds, SourceView};
use crate::scene_io::SceneDataset;
use crate::view_select::{select_views, WorkingSet};

/// `dim(k_i) = 3 + 64`
pub const SAMPLE_DIM: usize = 3 + FEATURE_DIM;
/// Width of the multi-view aware feature `k'_i`.
pub const VIEW_FEATURE_DIM: usize = 32;
pub const HIDDEN: usize = 64;
/// Guards the weight normalisation when every `w_i` vanishes.
pub const WEIGHT_EPS: f64 = 1e-6;

/// Per-view MLP `[k_i, μ, v] -> (k'_i, w_i)` and the final colour MLP.
#[derive(Clone, Debug)]
pub struct BlendWeights<T: Scalar> {
    pub view: [Linear<T>; 2],
    pub color: [Linear<T>; 3],
}

impl<T: Scalar> BlendWeights<T> {
    /// Initial confidence logit: training starts from `Q ≈ 0.95` so the
    /// colour branch receives gradient before the penalty and the error
    /// balance out.
    pub const CONFIDENCE_BIAS: f64 = 3.0;

    pub fn new<R: Rng>(rng: &mut R) -> Self {
        let head = Linear::new(rng, HIDDEN, 4);
        let mut bias = head.bias.value().clone();
        bias.data_mut()[3] = T::lit(Self::CONFIDENCE_BIAS);
        Self {
            view: [
                Linear::new(rng, 3 * SAMPLE_DIM, HIDDEN),
                Linear::new(rng, HIDDEN, VIEW_FEATURE_DIM + 1),
            ],
            color: [
                Linear::new(rng, 2 * VIEW_FEATURE_DIM, HIDDEN),
                Linear::new(rng, HIDDEN, HIDDEN),
                Linear::from_tensors(head.weight.value().clone(), bias),
            ],
        }
    }
}

impl<T: Scalar> Parameters<T> for BlendWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        for (i, l) in self.view.iter().enumerate() {
            l.visit(&join_prefix(prefix, &format!("view{i}")), f);
        }
        for (i, l) in self.color.iter().enumerate() {
            l.visit(&join_prefix(prefix, &format!("color{i}")), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        for (i, l) in self.view.iter_mut().enumerate() {
            l.visit_mut(&join_prefix(prefix, &format!("view{i}")), f);
        }
        for (i, l) in self.color.iter_mut().enumerate() {
            l.visit_mut(&join_prefix(prefix, &format!("color{i}")), f);
        }
    }
}

/// `k_i = [c_i, f_i]` for each view at `[N, 3]` surface points; zeros where
/// the point falls outside a view.
pub fn sample_color_features<T: Scalar>(points: &Var<T>, views: &[SourceView<'_, T>]) -> Vec<Var<T>> {
    views
        .iter()
        .map(|v| {
            let (uv, front) = project_points(points, v.camera);
            let color = bilinear_sample(&Var::constant(v.image.clone()), &uv, Some(&front));
            let feat = bilinear_sample(&v.features.values, &uv, Some(&front));
            Var::concat_cols(&[&color, &feat])
        })
        .collect()
}

/// Intermediate quantities of [`blend`].
#[derive(Clone, Debug)]
pub struct BlendParts<T: Scalar> {
    /// `μ`, `v` of the `k_i` under the barycentric weights.
    pub mu: Var<T>,
    pub var: Var<T>,
    /// `k'_i`, `[N, 32]` each.
    pub view_features: Vec<Var<T>>,
    /// Normalised `w_i`, `[N, 1]` each.
    pub view_weights: Vec<Var<T>>,
    pub pooled_mean: Var<T>,
    pub pooled_var: Var<T>,
    pub rgb: Var<T>,
    pub confidence: Var<T>,
}

/// Returns per-pixel `rgb` (`[N, 3]`) and confidence `q` (`[N, 1]`), both in `[0, 1]`.
pub fn blend<T: Scalar>(samples: &[Var<T>], bary: &[f64; 3], weights: &BlendWeights<T>) -> (Var<T>, Var<T>) {
    let p = blend_parts(samples, bary, weights);
    (p.rgb, p.confidence)
}

pub fn blend_parts<T: Scalar>(samples: &[Var<T>], bary: &[f64; 3], weights: &BlendWeights<T>) -> BlendParts<T> {
    assert_eq!(samples.len(), 3, "blend takes three views");
    let n = samples[0].rows();
    let (mu, var) = weighted_moments(samples, bary);
    let rows: Vec<Var<T>> = samples.iter().map(|k| Var::concat_cols(&[k, &mu, &var])).collect();
    let stacked = Var::concat_rows(&[&rows[0], &rows[1], &rows[2]]);
    let out = weights.view[1].forward(&weights.view[0].forward(&stacked).relu());
    let kp: Vec<Var<T>> = (0..3).map(|i| out.slice_rows(i * n, n).slice_cols(0, VIEW_FEATURE_DIM)).collect();
    let w: Vec<Var<T>> = (0..3)
        .map(|i| out.slice_rows(i * n, n).slice_cols(VIEW_FEATURE_DIM, 1).sigmoid())
        .collect();
    let norm = w[0].add(&w[1]).add(&w[2]).add_scalar(T::lit(WEIGHT_EPS)).recip();
    let w: Vec<Var<T>> = w.iter().map(|wi| wi.mul(&norm)).collect();
    let mut mean = kp[0].mul_col(&w[0]);
    for i in 1..3 {
        mean = mean.add(&kp[i].mul_col(&w[i]));
    }
    let mut spread = kp[0].sub(&mean).square().mul_col(&w[0]);
    for i in 1..3 {
        spread = spread.add(&kp[i].sub(&mean).square().mul_col(&w[i]));
    }
    let h = Var::concat_cols(&[&mean, &spread]);
    let h = weights.color[0].forward(&h).relu();
    let h = weights.color[1].forward(&h).relu();
    let out = weights.color[2].forward(&h);
    BlendParts {
        mu,
        var,
        view_features: kp,
        view_weights: w,
        pooled_mean: mean,
        pooled_var: spread,
        rgb: out.slice_cols(0, 3).sigmoid(),
        confidence: out.slice_cols(3, 1).sigmoid(),
    }
}

/// Instrumentation of one render call.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderStats {
    pub predict_step_calls: usize,
    pub blend_calls: usize,
    pub level_resolutions: Vec<(usize, usize)>,
    /// Pixels covered by the single forward pass.
    pub pixels: usize,
}

#[derive(Debug)]
pub struct RenderOutput<T: Scalar> {
    /// `[H, W, 3]`
    pub color: Var<T>,
    /// `[H, W, 1]` distance along the ray.
    pub depth: Var<T>,
    /// `[H, W, 1]`
    pub confidence: Var<T>,
    pub working_set: WorkingSet,
    pub stats: RenderStats,
}

impl<T: Scalar> RenderOutput<T> {
    pub fn height(&self) -> usize {
        self.color.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.color.shape()[1]
    }
}

/// A source image with its camera, in the element type of the model.
#[derive(Clone, Copy, Debug)]
pub struct SourceImage<'a, T: Scalar> {
    pub id: usize,
    pub camera: &'a Camera,
    pub image: &'a Tensor<T>,
}

/// Renders `target` from an explicit working set in one forward pass.
pub fn render_with_sources<T: Scalar>(
    model: &Model<T>,
    target: &Camera,
    sources: &[SourceImage<'_, T>; 3],
    working_set: WorkingSet,
    bounds: &SceneBounds,
) -> Result<RenderOutput<T>> {
    let (h, w) = (target.intrinsics.height, target.intrinsics.width);
    let scale = model.config.schedule.coarsest_scale();
    if h % scale != 0 || w % scale != 0 {
        return Err(Error::InvalidInput(format!("target size {w}x{h} is not divisible by {scale}")));
    }
    let imgs: Vec<(usize, &Tensor<T>)> = sources.iter().map(|s| (s.id, s.image)).collect();
    let features = extract_features(&model.unet, &imgs)?;
    let views: Vec<SourceView<'_, T>> = sources
        .iter()
        .zip(&features)
        .map(|(s, f)| SourceView {
            camera: s.camera,
            features: f,
            image: s.image,
        })
        .collect();
    let marched = march(
        target,
        &views,
        &working_set.weights,
        bounds,
        &model.config.schedule,
        &model.config.march,
        &model.marcher,
    )?;
    let samples = sample_color_features(&marched.points, &views);
    let (rgb, q) = blend(&samples, &working_set.weights, &model.blend);
    Ok(RenderOutput {
        color: rgb.reshape(&[h, w, 3]),
        depth: marched.depth.reshape(&[h, w, 1]),
        confidence: q.reshape(&[h, w, 1]),
        working_set,
        stats: RenderStats {
            predict_step_calls: marched.stats.predict_step_calls,
            blend_calls: 1,
            level_resolutions: marched.stats.level_resolutions,
            pixels: h * w,
        },
    })
}

/// Selects a working set among `source_ids` of `dataset` and renders `target`.
pub fn render<T: Scalar>(
    model: &Model<T>,
    dataset: &SceneDataset,
    target: &Camera,
    source_ids: &[usize],
) -> Result<RenderOutput<T>> {
    let candidates: Vec<_> = source_ids
        .iter()
        .map(|&i| (i, dataset.views[i].camera.center()))
        .collect();
    let _ftz = FlushDenormals::new();
    let ws = select_views(&candidates, &target.center(), model.config.selection)?;
    let images: Vec<Tensor<T>> = ws.view_ids.iter().map(|&i| dataset.views[i].image.cast()).collect();
    let sources = [0, 1, 2].map(|k| SourceImage {
        id: ws.view_ids[k],
        camera: &dataset.views[ws.view_ids[k]].camera,
        image: &images[k],
    });
    render_with_sources(model, target, &sources, ws, &dataset.bounds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_samples(n: usize, seed: u64) -> Vec<Var<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3)
            .map(|_| {
                let d: Vec<f64> = (0..n * SAMPLE_DIM).map(|_| rng.gen_range(-1.0..1.0)).collect();
                Var::constant(Tensor::new(&[n, SAMPLE_DIM], d))
            })
            .collect()
    }

    #[test]
    fn blend_is_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w: BlendWeights<f64> = BlendWeights::new(&mut rng);
        let s = random_samples(5, 4);
        let b = [0.2, 0.5, 0.3];
        let (rgb, q) = blend(&s, &b, &w);
        let perm = [s[2].clone(), s[0].clone(), s[1].clone()];
        let (rgb2, q2) = blend(&perm, &[0.3, 0.2, 0.5], &w);
        for (a, b) in rgb.data().iter().zip(rgb2.data()).chain(q.data().iter().zip(q2.data())) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn blend_outputs_are_in_unit_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for seed in 0..5 {
            let w: BlendWeights<f64> = BlendWeights::new(&mut rng);
            let s: Vec<Var<f64>> = random_samples(7, seed).iter().map(|v| v.scale(50.0)).collect();
            let (rgb, q) = blend(&s, &[0.6, 0.3, 0.1], &w);
            assert!(rgb.data().iter().chain(q.data()).all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn identical_samples_have_zero_spread() {
        let s = random_samples(4, 9);
        let same = vec![s[0].clone(), s[0].clone(), s[0].clone()];
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let w: BlendWeights<f64> = BlendWeights::new(&mut rng);
        let p = blend_parts(&same, &[0.1, 0.6, 0.3], &w);
        assert!(p.var.data().iter().all(|&v| v.abs() < 1e-24));
        assert_eq!(p.view_features[0].data(), p.view_features[1].data());
        assert_eq!(p.view_features[0].data(), p.view_features[2].data());
        // Only the weight-normalisation epsilon keeps this from being exactly 0.
        assert!(p.pooled_var.data().iter().all(|&v| v.abs() < 1e-9));
    }
}
