//! Learned coarse-to-fine sphere tracing over the whole target image.
//!
//! Every pixel is marched at once. Each step samples the three source feature
//! maps at the current ray points, pools them into `[μ, v, γ(x)]`, mixes
//! neighbouring pixels with two convolutions, and lets a shared LSTM cell
//! predict the next depth increment.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{join_prefix, Conv2d, Linear, LstmCell, Parameters, Scalar, Tensor, Var};
use crate::camera::{bilinear_sample, generate_rays, project_points, rays_at, upsample_bilinear2, Camera, RayBundle};
use crate::encoders::{positional_encode_var, FeatureMap, PosEncodingConfig, FEATURE_DIM};
use crate::error::{Error, Result};

pub const HIDDEN_DIM: usize = 32;

/// `(downsampling factor, steps)` per level, coarse to fine.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarchSchedule {
    pub levels: Vec<(usize, usize)>,
}

impl Default for MarchSchedule {
    fn default() -> Self {
        Self {
            levels: vec![(4, 10), (2, 5), (1, 3)],
        }
    }
}

impl MarchSchedule {
    /// The reduced schedule used by the "fewer steps" ablation.
    pub fn fewer() -> Self {
        Self {
            levels: vec![(4, 5), (2, 3), (1, 1)],
        }
    }

    pub fn total_steps(&self) -> usize {
        self.levels.iter().map(|l| l.1).sum()
    }

    pub fn coarsest_scale(&self) -> usize {
        self.levels.first().map_or(1, |l| l.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("march schedule {:?}: {m}", self.levels)));
        if self.levels.is_empty() {
            return bad("no levels");
        }
        for w in self.levels.windows(2) {
            if w[1].0 >= w[0].0 {
                return bad("scales must be strictly decreasing");
            }
        }
        if self.levels.iter().any(|&(s, n)| !s.is_power_of_two() || n == 0) {
            return bad("scales must be powers of two and every level needs at least one step");
        }
        if self.levels.last().unwrap().0 != 1 {
            return bad("the last level must run at full resolution");
        }
        Ok(())
    }
}

/// Depth bounds plus the similarity transform that maps the scene into
/// roughly `[-1, 1]³` for the position encoding.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub near: f64,
    pub far: f64,
    pub center: [f64; 3],
    pub radius: f64,
}

impl SceneBounds {
    /// Centre is the mean mid-depth point on the optical axes, radius the
    /// largest distance from it to a camera.
    pub fn from_cameras(cameras: &[Camera], near: f64, far: f64) -> Self {
        let mid = 0.5 * (near + far);
        let n = cameras.len().max(1) as f64;
        let center = cameras
            .iter()
            .map(|c| c.center() + c.pose.rotation.column(2) * mid)
            .fold(Vector3::zeros(), |a, b| a + b)
            / n;
        let radius = cameras
            .iter()
            .map(|c| (c.center() - center).norm())
            .fold(0.0, f64::max)
            .max(1e-6);
        Self {
            near,
            far,
            center: center.into(),
            radius,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarchConfig {
    /// `t_init = t_init_fraction · far`
    pub t_init_fraction: f64,
    /// `t_max = t_max_fraction · far`; `t_min` is 0.
    pub t_max_fraction: f64,
    /// Zero the recurrent state at each level instead of upsampling it.
    pub reset_recurrent: bool,
}

impl Default for MarchConfig {
    fn default() -> Self {
        Self {
            t_init_fraction: 0.05,
            t_max_fraction: 1.2,
            reset_recurrent: false,
        }
    }
}

impl MarchConfig {
    pub fn t_init(&self, b: &SceneBounds) -> f64 {
        self.t_init_fraction * b.far
    }

    pub fn t_max(&self, b: &SceneBounds) -> f64 {
        self.t_max_fraction * b.far
    }
}

/// Shape hyperparameters of the marcher network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarcherConfig {
    pub posenc: PosEncodingConfig,
    pub conv_kernel: usize,
}

impl Default for MarcherConfig {
    fn default() -> Self {
        Self {
            posenc: PosEncodingConfig::default(),
            conv_kernel: 3,
        }
    }
}

impl MarcherConfig {
    pub fn aggregate_dim(&self) -> usize {
        2 * FEATURE_DIM + self.posenc.output_dim()
    }
}

/// Refinement convolutions, recurrent cell and step head.
#[derive(Clone, Debug)]
pub struct MarcherWeights<T: Scalar> {
    pub config: MarcherConfig,
    pub refine: [Conv2d<T>; 2],
    pub lstm: LstmCell<T>,
    pub head: Linear<T>,
}

impl<T: Scalar> MarcherWeights<T> {
    /// Initial per-step advance as a fraction of the far bound.
    pub const HEAD_BIAS: f64 = 0.03;

    pub fn new<R: Rng>(rng: &mut R, config: MarcherConfig) -> Result<Self> {
        if config.conv_kernel.is_multiple_of(2) {
            return Err(Error::InvalidConfig(format!("conv kernel must be odd, got {}", config.conv_kernel)));
        }
        let k = config.conv_kernel;
        let refine = [
            Conv2d::new(rng, k, config.aggregate_dim(), FEATURE_DIM),
            Conv2d::new(rng, k, FEATURE_DIM, FEATURE_DIM),
        ];
        let lstm = LstmCell::new(rng, FEATURE_DIM, HIDDEN_DIM);
        let head = Linear::new(rng, HIDDEN_DIM, 1);
        // Start with a small, uniform forward step.
        let head = Linear::from_tensors(
            head.weight.value().map(|w| w * T::lit(0.01)),
            Tensor::full(&[1], T::lit(Self::HEAD_BIAS)),
        );
        Ok(Self {
            config,
            refine,
            lstm,
            head,
        })
    }
}

impl<T: Scalar> Parameters<T> for MarcherWeights<T> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Var<T>)) {
        self.refine[0].visit(&join_prefix(prefix, "refine0"), f);
        self.refine[1].visit(&join_prefix(prefix, "refine1"), f);
        self.lstm.visit(&join_prefix(prefix, "lstm"), f);
        self.head.visit(&join_prefix(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Var<T>)) {
        self.refine[0].visit_mut(&join_prefix(prefix, "refine0"), f);
        self.refine[1].visit_mut(&join_prefix(prefix, "refine1"), f);
        self.lstm.visit_mut(&join_prefix(prefix, "lstm"), f);
        self.head.visit_mut(&join_prefix(prefix, "head"), f);
    }
}

/// A source view as seen by the marcher and renderer.
#[derive(Clone, Copy, Debug)]
pub struct SourceView<'a, T: Scalar> {
    pub camera: &'a Camera,
    pub features: &'a FeatureMap<T>,
    /// `[H, W, 3]` colours in `[0, 1]`.
    pub image: &'a Tensor<T>,
}

/// Per-pixel `[μ, v, γ(x)]`, each `[N, ·]`.
#[derive(Clone, Debug)]
pub struct Aggregated<T: Scalar> {
    pub mu: Var<T>,
    pub var: Var<T>,
    pub posenc: Var<T>,
    pub combined: Var<T>,
}

/// Weighted mean and variance `Σ b_i f_i`, `Σ b_i (f_i - μ)²` with scalar weights.
pub fn weighted_moments<T: Scalar>(samples: &[Var<T>], weights: &[f64]) -> (Var<T>, Var<T>) {
    let mv = Var::weighted_moments(samples, weights);
    let c = samples[0].cols();
    (mv.slice_cols(0, c), mv.slice_cols(c, c))
}

/// Maps world points into the unit-ish cube used for position encoding.
pub fn normalize_points<T: Scalar>(x: &Var<T>, bounds: &SceneBounds) -> Var<T> {
    let shift = Var::constant(Tensor::from_f64(&[3], &bounds.center.map(|c| -c)));
    x.add_row(&shift).scale(T::lit(1.0 / bounds.radius))
}

/// Samples every view at `x` (`[N, 3]`) and pools with the barycentric weights.
pub fn aggregate<T: Scalar>(
    x: &Var<T>,
    bary: &[f64; 3],
    views: &[SourceView<'_, T>],
    posenc: &PosEncodingConfig,
    bounds: &SceneBounds,
) -> Aggregated<T> {
    let samples: Vec<Var<T>> = views
        .iter()
        .map(|v| {
            let (uv, front) = project_points(x, v.camera);
            bilinear_sample(&v.features.values, &uv, Some(&front))
        })
        .collect();
    let moments = Var::weighted_moments(&samples, bary);
    let posenc = positional_encode_var(&normalize_points(x, bounds), posenc);
    let combined = Var::concat_cols(&[&moments, &posenc]);
    let (mu, var) = (moments.slice_cols(0, FEATURE_DIM), moments.slice_cols(FEATURE_DIM, FEATURE_DIM));
    Aggregated {
        mu,
        var,
        posenc,
        combined,
    }
}

/// Two convolutions with ReLU on an `[H', W', dim(g)]` map; returns `[H'·W', 64]`.
pub fn refine_spatial<T: Scalar>(g: &Var<T>, height: usize, width: usize, weights: &MarcherWeights<T>) -> Var<T> {
    let x = g.reshape(&[1, height, width, g.cols()]);
    let x = weights.refine[0].forward(&x).relu();
    let x = weights.refine[1].forward(&x).relu();
    x.reshape(&[height * width, FEATURE_DIM])
}

/// Per-pixel marching state at one level.
#[derive(Clone, Debug)]
pub struct MarchState<T: Scalar> {
    /// `[N, 1]` distance along each ray.
    pub t: Var<T>,
    /// `[N, 32]`
    pub hidden: Var<T>,
    /// `[N, 32]`
    pub cell: Var<T>,
    pub level: usize,
    pub height: usize,
    pub width: usize,
}

impl<T: Scalar> MarchState<T> {
    fn initial(height: usize, width: usize, t_init: f64, hidden: usize) -> Self {
        let n = height * width;
        Self {
            t: Var::constant(Tensor::full(&[n, 1], T::lit(t_init))),
            hidden: Var::constant(Tensor::zeros(&[n, hidden])),
            cell: Var::constant(Tensor::zeros(&[n, hidden])),
            level: 0,
            height,
            width,
        }
    }

    /// Bilinearly upsamples depth (and recurrent state unless `reset`) by `factor`.
    fn upsampled(&self, factor: usize, reset: bool) -> Self {
        let up = |v: &Var<T>| {
            let c = v.cols();
            let mut x = v.reshape(&[self.height, self.width, c]);
            let mut f = factor;
            while f > 1 {
                x = upsample_bilinear2(&x);
                f /= 2;
            }
            x.reshape(&[self.height * self.width * factor * factor, c])
        };
        let (height, width) = (self.height * factor, self.width * factor);
        let (hidden, cell) = if reset {
            let z = Var::constant(Tensor::zeros(&[height * width, self.hidden.cols()]));
            (z.clone(), z)
        } else {
            (up(&self.hidden), up(&self.cell))
        };
        Self {
            t: up(&self.t),
            hidden,
            cell,
            level: self.level + 1,
            height,
            width,
        }
    }
}

/// Recurrent update and depth step: returns `δ` (`[N, 1]`) and the new state
/// with `t ← clamp(t + δ, 0, t_max)`.
pub fn predict_step<T: Scalar>(
    refined: &Var<T>,
    state: &MarchState<T>,
    weights: &MarcherWeights<T>,
    far: f64,
    t_max: f64,
) -> (Var<T>, MarchState<T>) {
    let (hidden, cell) = weights.lstm.forward(refined, &state.hidden, &state.cell);
    let delta = weights.head.forward(&hidden).scale(T::lit(far));
    let t = state.t.add(&delta).clamp(T::zero(), T::lit(t_max));
    (
        delta,
        MarchState {
            t,
            hidden,
            cell,
            ..*state
        },
    )
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarchStats {
    pub predict_step_calls: usize,
    pub level_resolutions: Vec<(usize, usize)>,
}

#[derive(Debug)]
pub struct MarchOutput<T: Scalar> {
    /// `[H·W, 1]` final distances.
    pub depth: Var<T>,
    /// `[H·W, 3]` final surface points.
    pub points: Var<T>,
    pub features: Aggregated<T>,
    pub state: MarchState<T>,
    pub rays: RayBundle,
    pub stats: MarchStats,
}

/// Runs the level loop; `step` advances the state by one iteration.
fn run_levels<T: Scalar>(
    target: &Camera,
    schedule: &MarchSchedule,
    cfg: &MarchConfig,
    bounds: &SceneBounds,
    mut step: impl FnMut(&RayBundle, &MarchState<T>) -> MarchState<T>,
) -> Result<(MarchState<T>, RayBundle, MarchStats)> {
    schedule.validate()?;
    let mut stats = MarchStats::default();
    let mut state: Option<MarchState<T>> = None;
    let mut prev_scale = 0;
    let mut last_rays = None;
    for &(scale, steps) in &schedule.levels {
        let rays = generate_rays(&target.intrinsics, &target.pose, scale)?;
        let mut s = match state.take() {
            None => MarchState::initial(rays.height, rays.width, cfg.t_init(bounds), HIDDEN_DIM),
            Some(prev) => prev.upsampled(prev_scale / scale, cfg.reset_recurrent),
        };
        debug_assert_eq!((s.height, s.width), (rays.height, rays.width));
        stats.level_resolutions.push((rays.height, rays.width));
        for _ in 0..steps {
            s = step(&rays, &s);
            stats.predict_step_calls += 1;
        }
        state = Some(s);
        prev_scale = scale;
        last_rays = Some(rays);
    }
    Ok((state.unwrap(), last_rays.unwrap(), stats))
}

/// Learned march from `t_init` to the surface for every target pixel.
#[allow(clippy::too_many_arguments)]
pub fn march<T: Scalar>(
    target: &Camera,
    views: &[SourceView<'_, T>],
    bary: &[f64; 3],
    bounds: &SceneBounds,
    schedule: &MarchSchedule,
    cfg: &MarchConfig,
    weights: &MarcherWeights<T>,
) -> Result<MarchOutput<T>> {
    if views.len() != 3 {
        return Err(Error::InvalidInput(format!("expected 3 source views, got {}", views.len())));
    }
    let posenc = weights.config.posenc;
    let t_max = cfg.t_max(bounds);
    let (state, rays, stats) = run_levels(target, schedule, cfg, bounds, |rays, s| {
        let x = rays_at(&s.t, rays);
        let g = aggregate(&x, bary, views, &posenc, bounds);
        let refined = refine_spatial(&g.combined, s.height, s.width, weights);
        predict_step(&refined, s, weights, bounds.far, t_max).1
    })?;
    let points = rays_at(&state.t, &rays);
    let features = aggregate(&points, bary, views, &posenc, bounds);
    Ok(MarchOutput {
        depth: state.t.clone(),
        points,
        features,
        state,
        rays,
        stats,
    })
}

/// The same schedule with `δ = sdf(x)`, i.e. classical sphere tracing.
/// Returns the full-resolution depth map.
pub fn march_oracle(
    target: &Camera,
    bounds: &SceneBounds,
    schedule: &MarchSchedule,
    cfg: &MarchConfig,
    sdf: &dyn Fn(&Vector3<f64>) -> f64,
) -> Result<(Vec<f64>, MarchStats)> {
    let t_max = cfg.t_max(bounds);
    let (state, _, stats) = run_levels::<f64>(target, schedule, cfg, bounds, |rays, s| {
        let t: Vec<f64> = s
            .t
            .data()
            .iter()
            .zip(rays.origins.iter().zip(&rays.directions))
            .map(|(&t, (o, d))| (t + sdf(&(o + d * t))).clamp(0.0, t_max))
            .collect();
        MarchState {
            t: Var::constant(Tensor::new(&[t.len(), 1], t)),
            ..s.clone()
        }
    })?;
    Ok((state.t.value().data().to_vec(), stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::{CameraIntrinsics, CameraPose};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sphere_camera(size: usize, f: f64) -> Camera {
        let c = size as f64 / 2.0;
        Camera::new(
            CameraIntrinsics {
                fx: f,
                fy: f,
                cx: c,
                cy: c,
                width: size,
                height: size,
            },
            CameraPose {
                rotation: nalgebra::Matrix3::identity(),
                translation: Vector3::new(0.0, 0.0, -3.0),
            },
        )
    }

    fn bounds() -> SceneBounds {
        SceneBounds {
            near: 2.0,
            far: 4.0,
            center: [0.0; 3],
            radius: 3.0,
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(MarchSchedule::default().validate().is_ok());
        assert_eq!(MarchSchedule::default().total_steps(), 18);
        let bad = MarchSchedule {
            levels: vec![(4, 10), (2, 5)],
        };
        assert!(bad.validate().is_err());
        let bad = MarchSchedule {
            levels: vec![(2, 10), (4, 5), (1, 3)],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn oracle_center_pixel_hits_sphere() {
        let cam = sphere_camera(64, 64.0);
        let (depth, stats) = march_oracle(
            &cam,
            &bounds(),
            &MarchSchedule::default(),
            &MarchConfig::default(),
            &|x| x.norm() - 1.0,
        )
        .unwrap();
        assert!((depth[32 * 64 + 32] - 2.0).abs() < 1e-3);
        assert_eq!(depth[0], MarchConfig::default().t_max(&bounds()));
        assert_eq!(stats.predict_step_calls, 18);
        assert_eq!(stats.level_resolutions, vec![(16, 16), (32, 32), (64, 64)]);
    }

    #[test]
    fn moments_example() {
        let f = |a: f64, b: f64| Var::constant(Tensor::<f64>::from_f64(&[1, 2], &[a, b]));
        let (mu, var) = weighted_moments(&[f(1.0, 0.0), f(0.0, 1.0), f(0.0, 0.0)], &[0.5, 0.25, 0.25]);
        assert_eq!(mu.data(), &[0.5, 0.25]);
        assert_eq!(var.data(), &[0.25, 0.1875]);
    }

    #[test]
    fn zero_weights_leave_depth_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut w: MarcherWeights<f64> = MarcherWeights::new(&mut rng, MarcherConfig::default()).unwrap();
        w.visit_mut("", &mut |_, v| *v = Var::leaf(Tensor::zeros(v.shape())));
        let state = MarchState::initial(2, 3, 0.7, HIDDEN_DIM);
        let refined = Var::constant(Tensor::full(&[6, FEATURE_DIM], 0.3));
        let (delta, next) = predict_step(&refined, &state, &w, 4.0, 4.8);
        assert!(delta.data().iter().all(|&d| d == 0.0));
        assert!(next.t.data().iter().all(|&t| t == 0.7));
    }

    #[test]
    fn refine_locality_toggle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = MarcherConfig {
            posenc: PosEncodingConfig {
                num_frequencies: 1,
                include_input: false,
            },
            conv_kernel: 1,
        };
        let probe = |cfg: MarcherConfig, rng: &mut ChaCha8Rng, dy: usize, dx: usize| {
            let w: MarcherWeights<f64> = MarcherWeights::new(rng, cfg).unwrap();
            let d = cfg.aggregate_dim();
            let base: Vec<f64> = (0..36 * d).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
            let mut moved = base.clone();
            let p = ((2 + dy) * 6 + 2 + dx) * d;
            for v in &mut moved[p..p + d] {
                *v += 1.0;
            }
            let run = |data: Vec<f64>| refine_spatial(&Var::constant(Tensor::new(&[36, d], data)), 6, 6, &w);
            let (a, b) = (run(base), run(moved));
            let px = (2 * 6 + 2) * FEATURE_DIM;
            a.data()[px..px + FEATURE_DIM] != b.data()[px..px + FEATURE_DIM]
        };
        assert!(!probe(cfg, &mut rng, 3, 3));
        assert!(!probe(cfg, &mut rng, 1, 1));
        let cfg3 = MarcherConfig { conv_kernel: 3, ..cfg };
        assert!(probe(cfg3, &mut rng, 1, 1));
        assert!(probe(cfg3, &mut rng, 0, 1));
    }
}
