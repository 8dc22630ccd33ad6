//! Optimisation loop, checkpoints and evaluation.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{export_parameters, FlushDenormals, import_parameters, Parameters, Tensor, Var};
use crate::encoders::{PosEncodingConfig, UNetConfig};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::objective::{confidence_loss, plain_l1, psnr, serialize_metric, ssim, LossConfig, MetricsReport, PenaltyNorm, ViewMetrics};
use crate::ray_marcher::{MarchConfig, MarchSchedule, MarcherConfig};
use crate::renderer::{render, RenderOutput};
use crate::scene_io::{append_line, write_bytes, write_render, SceneDataset, Split};
use crate::view_select::ViewSelection;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Toggles {
    pub use_posenc: bool,
    pub view_selection: ViewSelection,
    pub conv_kernel: usize,
    pub reset_recurrent_between_levels: bool,
    pub use_confidence_loss: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Self {
            use_posenc: true,
            view_selection: ViewSelection::Delaunay,
            conv_kernel: 3,
            reset_recurrent_between_levels: false,
            use_confidence_loss: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub lambda: f64,
    pub penalty: PenaltyNorm,
    pub schedule: MarchSchedule,
    pub toggles: Toggles,
    /// Save a checkpoint every this many steps (0 disables).
    pub checkpoint_every: usize,
    /// Evaluate the test split every this many steps (0 disables).
    pub eval_every: usize,
    /// Steps (counted from initialisation) trained with plain L1 before the
    /// confidence loss takes over; ignored when the confidence loss is off.
    pub confidence_warmup: usize,
    pub unet: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            learning_rate: 5e-4,
            seed: 0,
            lambda: 0.1,
            penalty: PenaltyNorm::Rms,
            schedule: MarchSchedule::default(),
            toggles: Toggles::default(),
            checkpoint_every: 0,
            eval_every: 0,
            confidence_warmup: 500,
            unet: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 && self.checkpoint_every > 0 {
            log::debug!("checkpoint_every has no effect with 0 steps");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if !matches!(self.toggles.conv_kernel, 1 | 3) {
            return Err(Error::InvalidConfig(format!("conv_kernel must be 1 or 3, got {}", self.toggles.conv_kernel)));
        }
        self.loss().validate()?;
        self.model_config().validate()
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            lambda: self.lambda,
            penalty: self.penalty,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let posenc = if self.toggles.use_posenc {
            PosEncodingConfig::default()
        } else {
            PosEncodingConfig {
                num_frequencies: 0,
                include_input: true,
            }
        };
        ModelConfig {
            unet: self.unet,
            marcher: MarcherConfig {
                posenc,
                conv_kernel: self.toggles.conv_kernel,
            },
            march: MarchConfig {
                reset_recurrent: self.toggles.reset_recurrent_between_levels,
                ..MarchConfig::default()
            },
            schedule: self.schedule.clone(),
            selection: self.toggles.view_selection,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::load(path, e))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl Adam {
    pub fn new<M: Parameters<f32>>(model: &M, learning_rate: f64) -> Self {
        let mut m = Vec::new();
        model.visit("", &mut |_, p| m.push(Tensor::zeros(p.shape())));
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            v: m.clone(),
            m,
        }
    }

    /// One update; parameters without a gradient are left untouched.
    pub fn step<M: Parameters<f32>>(&mut self, model: &mut M, grads: &crate::autodiff::Gradients<f32>) {
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let lr = (self.learning_rate * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        let (b1, b2) = (b1 as f32, b2 as f32);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            if let Some(g) = grads.get(p) {
                let mut value = p.value().clone();
                let (m, v) = (ms[i].data_mut(), vs[i].data_mut());
                for (((w, &g), m), v) in value.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *w -= lr * *m / (v.sqrt() + eps);
                }
                *p = Var::leaf(value);
            }
            i += 1;
        });
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"NMVSCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    step: usize,
    config: TrainConfig,
    model: ModelConfig,
    params: Vec<(String, Vec<usize>)>,
    adam_t: u64,
}

/// Model parameters, optimiser state and configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub step: usize,
    pub config: TrainConfig,
    pub model_config: ModelConfig,
    pub params: Vec<(String, Tensor<f32>)>,
    pub adam: Adam,
}

impl Checkpoint {
    pub fn new(model: &Model<f32>, adam: &Adam, step: usize, config: &TrainConfig) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            step,
            config: config.clone(),
            model_config: model.config.clone(),
            params: export_parameters(model),
            adam: adam.clone(),
        }
    }

    pub fn model(&self) -> Result<Model<f32>> {
        let mut m = Model::new(self.model_config.clone(), 0)?;
        import_parameters(&mut m, &self.params).map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(m)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            step: self.step,
            config: self.config.clone(),
            model: self.model_config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect(),
            adam_t: self.adam.t,
        };
        let json = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = self
            .params
            .iter()
            .map(|p| &p.1)
            .chain(&self.adam.m)
            .chain(&self.adam.v);
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        let mut r = bytes;
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header".into()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("not a checkpoint file".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(|_| bad("truncated header".into()))?;
        let version = u32::from_le_bytes(word);
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!(
                "unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})"
            )));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len).map_err(|_| bad("truncated header".into()))?;
        let len = u64::from_le_bytes(len) as usize;
        if r.len() < len {
            return Err(bad("truncated header".into()));
        }
        let header: CheckpointHeader =
            serde_json::from_slice(&r[..len]).map_err(|e| bad(format!("bad header: {e}")))?;
        r = &r[len..];
        let mut read_tensor = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if r.len() < 4 * n {
                return Err(bad("truncated tensor data".into()));
            }
            let data = r[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            r = &r[4 * n..];
            Ok(Tensor::new(shape, data))
        };
        let mut params = Vec::with_capacity(header.params.len());
        for (name, shape) in &header.params {
            params.push((name.clone(), read_tensor(shape)?));
        }
        let mut m = Vec::with_capacity(params.len());
        for (_, shape) in &header.params {
            m.push(read_tensor(shape)?);
        }
        let mut v = Vec::with_capacity(params.len());
        for (_, shape) in &header.params {
            v.push(read_tensor(shape)?);
        }
        if !r.is_empty() {
            return Err(bad("trailing bytes after tensor data".into()));
        }
        Ok(Self {
            version,
            step: header.step,
            adam: Adam {
                learning_rate: header.config.learning_rate,
                beta1: 0.9,
                beta2: 0.999,
                eps: 1e-8,
                t: header.adam_t,
                m,
                v,
            },
            config: header.config,
            model_config: header.model,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One line of the training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub loss: f64,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        serialize_with = "serialize_opt_metric"
    )]
    pub psnr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_psnr: Option<f64>,
}

fn serialize_opt_metric<S: serde::Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => serialize_metric(v, s),
        None => s.serialize_none(),
    }
}

/// Where (and whether) training writes artifacts.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Receives `history.jsonl`, periodic checkpoints and NaN dumps.
    pub out_dir: Option<PathBuf>,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<HistoryEntry>,
}

/// Loss of a render against its ground truth under `config`.
/// Training objective at global step `step` (1-based).
pub fn render_loss(gt: &Tensor<f32>, out: &RenderOutput<f32>, config: &TrainConfig, step: usize) -> Result<Var<f32>> {
    let gt = Var::constant(gt.clone());
    if config.toggles.use_confidence_loss && step > config.confidence_warmup {
        confidence_loss(&gt, &out.color, &out.confidence, &config.loss())
    } else {
        plain_l1(&gt, &out.color)
    }
}

fn sources_for(dataset: &SceneDataset, target: usize) -> Vec<usize> {
    dataset
        .ids(Split::Train)
        .into_iter()
        .filter(|&i| i != target)
        .collect()
}

#[derive(Serialize)]
struct NanDump<'a> {
    step: usize,
    target_view: usize,
    working_set: [usize; 3],
    barycentric: [f64; 3],
    #[serde(serialize_with = "serialize_metric")]
    loss: f64,
    non_finite_outputs: [usize; 3],
    parameter_norms: Vec<(&'a str, f64)>,
}

fn nan_diagnostics(
    step: usize,
    target: usize,
    out: &RenderOutput<f32>,
    loss: f64,
    model: &Model<f32>,
    dir: Option<&Path>,
) -> Error {
    let count = |v: &Var<f32>| v.data().iter().filter(|x| !x.is_finite()).count();
    let names: Vec<(String, f64)> = export_parameters(model)
        .into_iter()
        .map(|(n, t)| (n, t.norm() as f64))
        .collect();
    let dump = NanDump {
        step,
        target_view: target,
        working_set: out.working_set.view_ids,
        barycentric: out.working_set.weights,
        loss,
        non_finite_outputs: [count(&out.color), count(&out.depth), count(&out.confidence)],
        parameter_norms: names.iter().map(|(n, v)| (n.as_str(), *v)).collect(),
    };
    let json = serde_json::to_string_pretty(&dump).unwrap_or_default();
    let mut detail = format!(
        "target view {target}, working set {:?}, non-finite outputs (color, depth, confidence) = {:?}",
        dump.working_set, dump.non_finite_outputs
    );
    if let Some(dir) = dir {
        let path = dir.join(format!("nan_dump_step{step}.json"));
        match write_bytes(&path, json.as_bytes()) {
            Ok(()) => detail.push_str(&format!("; diagnostics written to {}", path.display())),
            Err(e) => detail.push_str(&format!("; could not write diagnostics: {e}")),
        }
    }
    log::error!("non-finite loss at step {step}: {json}");
    Error::NonFinite { step, detail }
}

fn run_loop(
    mut model: Model<f32>,
    mut adam: Adam,
    start_step: usize,
    dataset: &SceneDataset,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    let train_ids = dataset.ids(Split::Train);
    if train_ids.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "training needs at least 4 train views, got {}",
            train_ids.len()
        )));
    }
    let _ftz = FlushDenormals::new();
    let dir = opts.out_dir.as_deref();
    if let Some(d) = dir {
        std::fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
        let hist = d.join("history.jsonl");
        if hist.exists() {
            std::fs::remove_file(&hist).map_err(|e| Error::io(&hist, e))?;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut history = Vec::with_capacity(config.steps);
    for i in 0..config.steps {
        let step = start_step + i + 1;
        let target = train_ids[rng.gen_range(0..train_ids.len())];
        let view = &dataset.views[target];
        let out = render(&model, dataset, &view.camera, &sources_for(dataset, target))?;
        let loss = render_loss(&view.image, &out, config, step)?;
        let lv = loss.value().item() as f64;
        if !lv.is_finite() {
            return Err(nan_diagnostics(step, target, &out, lv, &model, dir));
        }
        let grads = loss.backward();
        adam.step(&mut model, &grads);
        let mut entry = HistoryEntry {
            step,
            loss: lv,
            psnr: Some(psnr(&view.image, out.color.value(), 1.0)),
            test_psnr: None,
        };
        drop(out);
        if config.eval_every > 0 && step.is_multiple_of(config.eval_every) && !dataset.ids(Split::Test).is_empty() {
            entry.test_psnr = Some(evaluate_model(&model, dataset, Split::Test, config, None)?.psnr_mean);
        }
        log::info!(
            "step {step} loss {lv:.5} psnr {:.2}{}",
            entry.psnr.unwrap_or(f64::NAN),
            entry.test_psnr.map(|p| format!(" test psnr {p:.2}")).unwrap_or_default()
        );
        if let Some(d) = dir {
            append_line(&d.join("history.jsonl"), &serde_json::to_string(&entry).unwrap_or_default())?;
            if config.checkpoint_every > 0 && step.is_multiple_of(config.checkpoint_every) {
                Checkpoint::new(&model, &adam, step, config).save(&d.join(format!("checkpoint_{step:06}.bin")))?;
            }
        }
        history.push(entry);
    }
    let checkpoint = Checkpoint::new(&model, &adam, start_step + config.steps, config);
    if let Some(d) = dir {
        checkpoint.save(&d.join("checkpoint.bin"))?;
    }
    Ok(TrainOutcome { checkpoint, history })
}

/// Trains a freshly initialised model.
pub fn train(dataset: &SceneDataset, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let model = Model::new(config.model_config(), config.seed)?;
    let adam = Adam::new(&model, config.learning_rate);
    run_loop(model, adam, 0, dataset, config, opts)
}

/// Continues from `checkpoint`'s parameters with a fresh optimiser. The
/// network shape comes from the checkpoint; the schedule, view selection and
/// optimisation settings come from `config`.
pub fn finetune(
    checkpoint: &Checkpoint,
    dataset: &SceneDataset,
    config: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if checkpoint.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {}", checkpoint.version)));
    }
    config.validate()?;
    let mut model = checkpoint.model()?;
    model.config.schedule = config.schedule.clone();
    model.config.selection = config.toggles.view_selection;
    model.config.march.reset_recurrent = config.toggles.reset_recurrent_between_levels;
    let adam = Adam::new(&model, config.learning_rate);
    run_loop(model, adam, checkpoint.step, dataset, config, opts)
}

/// Resumes training with the saved optimiser state.
pub fn resume(checkpoint: &Checkpoint, dataset: &SceneDataset, config: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    config.validate()?;
    let model = checkpoint.model()?;
    let mut adam = checkpoint.adam.clone();
    adam.learning_rate = config.learning_rate;
    run_loop(model, adam, checkpoint.step, dataset, config, opts)
}

/// Metrics of one prediction.
pub fn view_metrics(view: usize, gt: &Tensor<f32>, color: &Tensor<f32>, confidence: &Tensor<f32>, loss: &LossConfig) -> Result<ViewMetrics> {
    let l = confidence_loss(
        &Var::constant(gt.clone()),
        &Var::constant(color.clone()),
        &Var::constant(confidence.clone()),
        loss,
    )?;
    Ok(ViewMetrics {
        view,
        psnr: psnr(gt, color, 1.0),
        ssim: ssim(gt, color)?,
        loss: l.value().item() as f64,
    })
}

/// Evaluates arbitrary predictions `(color, confidence)` for every view of `split`.
pub fn evaluate_predictions(
    dataset: &SceneDataset,
    split: Split,
    loss: &LossConfig,
    mut predict: impl FnMut(usize) -> Result<(Tensor<f32>, Tensor<f32>)>,
) -> Result<MetricsReport> {
    let ids = dataset.ids(split);
    if ids.is_empty() {
        return Err(Error::InvalidInput(format!("split {split:?} has no views")));
    }
    let mut views = Vec::with_capacity(ids.len());
    for i in ids {
        let (color, conf) = predict(i)?;
        views.push(view_metrics(i, &dataset.views[i].image, &color, &conf, loss)?);
    }
    Ok(MetricsReport::from_views(views))
}

/// Renders every view of `split` from training views only and scores it.
/// Render artifacts are written to `render_dir` when given.
pub fn evaluate_model(
    model: &Model<f32>,
    dataset: &SceneDataset,
    split: Split,
    config: &TrainConfig,
    render_dir: Option<&Path>,
) -> Result<MetricsReport> {
    let _ftz = FlushDenormals::new();
    evaluate_predictions(dataset, split, &config.loss(), |i| {
        let out = render(model, dataset, &dataset.views[i].camera, &sources_for(dataset, i))?;
        if let Some(d) = render_dir {
            write_render(&out, d, &format!("view{i:03}"))?;
        }
        Ok((out.color.value().clone(), out.confidence.value().clone()))
    })
}

pub fn evaluate(checkpoint: &Checkpoint, dataset: &SceneDataset, split: Split, render_dir: Option<&Path>) -> Result<MetricsReport> {
    evaluate_model(&checkpoint.model()?, dataset, split, &checkpoint.config, render_dir)
}

/// Writes a report as pretty JSON.
pub fn write_metrics(report: &MetricsReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report).map_err(|e| Error::load(path, e))?;
    let mut bytes = json.into_bytes();
    bytes.write_all(b"\n").expect("vec write");
    write_bytes(path, &bytes)
}

/// Names of the ablation variants, complete model first.
pub const ABLATION_VARIANTS: [&str; 5] = ["complete", "no_posenc", "no_delaunay", "fewer_steps", "conv1x1"];

/// The complete configuration and its four single-component ablations.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    ABLATION_VARIANTS
        .iter()
        .map(|&name| {
            let mut c = base.clone();
            match name {
                "no_posenc" => c.toggles.use_posenc = false,
                "no_delaunay" => c.toggles.view_selection = ViewSelection::Proximity,
                "fewer_steps" => c.schedule = MarchSchedule::fewer(),
                "conv1x1" => c.toggles.conv_kernel = 1,
                _ => {}
            }
            (name, c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene_io::{generate_toy_scene, ToySceneSpec};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            steps: 2,
            unet: UNetConfig {
                channels: [4, 4, 4],
                out_dim: 64,
            },
            ..Default::default()
        }
    }

    fn tiny_scene() -> SceneDataset {
        generate_toy_scene(
            &ToySceneSpec {
                num_views: 9,
                width: 16,
                height: 16,
                ..Default::default()
            },
            None,
        )
        .unwrap()
        .dataset
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = TrainConfig::default();
        let json = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<TrainConfig>(&json).unwrap(), cfg);
        let partial: TrainConfig = serde_json::from_str(r#"{"steps": 5, "toggles": {"conv_kernel": 1}}"#).unwrap();
        assert_eq!(partial.steps, 5);
        assert_eq!(partial.toggles.conv_kernel, 1);
        assert!(partial.toggles.use_posenc);
        assert!(TrainConfig { learning_rate: 0.0, ..cfg.clone() }.validate().is_err());
    }

    #[test]
    fn zero_steps_returns_initialisation() {
        let ds = tiny_scene();
        let cfg = TrainConfig { steps: 0, ..tiny_config() };
        let out = train(&ds, &cfg, &TrainOptions::default()).unwrap();
        let init = Model::<f32>::new(cfg.model_config(), cfg.seed).unwrap();
        assert_eq!(out.checkpoint.params, export_parameters(&init));
        assert!(out.history.is_empty());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let ds = tiny_scene();
        let out = train(&ds, &tiny_config(), &TrainOptions::default()).unwrap();
        let back = Checkpoint::from_bytes(&out.checkpoint.to_bytes()).unwrap();
        assert_eq!(back, out.checkpoint);
        let mut bytes = out.checkpoint.to_bytes();
        bytes[8] = 9;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let ds = tiny_scene();
        let a = train(&ds, &tiny_config(), &TrainOptions::default()).unwrap();
        let b = train(&ds, &tiny_config(), &TrainOptions::default()).unwrap();
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn too_few_train_views_rejected() {
        let mut ds = tiny_scene();
        for v in ds.views.iter_mut().skip(3) {
            v.split = Split::Test;
        }
        assert!(train(&ds, &tiny_config(), &TrainOptions::default()).is_err());
    }

    #[test]
    fn ground_truth_injection_scores_perfectly() {
        let ds = tiny_scene();
        let r = evaluate_predictions(&ds, Split::Test, &LossConfig::default(), |i| {
            let img = ds.views[i].image.clone();
            Ok((img, Tensor::ones(&[16, 16, 1])))
        })
        .unwrap();
        assert_eq!(r.psnr_mean, f64::INFINITY);
        assert!((r.ssim_mean - 1.0).abs() < 1e-9);
    }
}
