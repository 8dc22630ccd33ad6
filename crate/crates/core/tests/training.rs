//! Optimisation, fine-tuning and checkpoint behaviour on tiny scenes.

mod common;

use common::*;
use nmvs_core::autodiff::export_parameters;
use nmvs_core::encoders::UNetConfig;
use nmvs_core::renderer::render;
use nmvs_core::scene_io::{Primitive, Split};
use nmvs_core::trainer::{evaluate_model, finetune, train, Checkpoint, TrainConfig, TrainOptions};

fn tiny(steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        learning_rate: 1e-3,
        unet: UNetConfig {
            channels: [4, 8, 8],
            ..UNetConfig::default()
        },
        confidence_warmup: 50,
        ..TrainConfig::default()
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v[v.len() / 2]
}

#[test]
fn one_step_updates_every_parameter_group() {
    let ds = toy(Primitive::Sphere, 16, 8, 0);
    let cfg = tiny(0);
    let before = train(&ds, &cfg, &TrainOptions::default()).unwrap().checkpoint;
    let after = train(&ds, &TrainConfig { steps: 1, ..cfg }, &TrainOptions::default()).unwrap().checkpoint;
    assert_eq!(after.step, 1);
    for ((name, a), (_, b)) in before.params.iter().zip(&after.params) {
        let moved = a.data().iter().zip(b.data()).any(|(x, y)| x != y);
        assert!(moved, "{name} was not updated");
    }
}

#[test]
fn zero_step_finetune_is_identity() {
    let ds = toy(Primitive::Sphere, 16, 8, 0);
    let base = train(&ds, &tiny(3), &TrainOptions::default()).unwrap().checkpoint;
    let tuned = finetune(&base, &ds, &tiny(0), &TrainOptions::default()).unwrap().checkpoint;
    assert_eq!(tuned.step, base.step);
    assert_eq!(tuned.params, base.params);
}

#[test]
fn finetuning_improves_a_new_scene() {
    let pretrain = toy(Primitive::Sphere, 16, 12, 0);
    let base = train(&pretrain, &tiny(150), &TrainOptions::default()).unwrap().checkpoint;

    let scene = toy(Primitive::TwoSpheres, 16, 12, 3);
    let cfg = tiny(200);
    let zero_shot = evaluate_model(&base.model().unwrap(), &scene, Split::Train, &cfg, None).unwrap();
    let out = finetune(&base, &scene, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.checkpoint.step, base.step + 200);
    assert_eq!(out.history.first().unwrap().step, base.step + 1);

    let mut early: Vec<f64> = out.history[..40].iter().map(|h| h.loss).collect();
    let mut late: Vec<f64> = out.history[160..].iter().map(|h| h.loss).collect();
    let (early, late) = (median(&mut early), median(&mut late));
    assert!(late <= early, "loss rose from {early} to {late}");

    let tuned = evaluate_model(&out.checkpoint.model().unwrap(), &scene, Split::Train, &cfg, None).unwrap();
    assert!(
        tuned.psnr_mean > zero_shot.psnr_mean,
        "zero-shot {} vs fine-tuned {}",
        zero_shot.psnr_mean,
        tuned.psnr_mean
    );
}

#[test]
fn checkpoint_round_trip_renders_identically() {
    let ds = toy(Primitive::Sphere, 16, 8, 1);
    let ckpt = train(&ds, &tiny(2), &TrainOptions::default()).unwrap().checkpoint;
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.step, ckpt.step);
    assert_eq!(export_parameters(&loaded.model().unwrap()), export_parameters(&ckpt.model().unwrap()));

    let (a, b) = (ckpt.model().unwrap(), loaded.model().unwrap());
    let srcs = sources(&ds, 0);
    let ra = render(&a, &ds, &ds.views[0].camera, &srcs).unwrap();
    let rb = render(&b, &ds, &ds.views[0].camera, &srcs).unwrap();
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(ra.color.data()), bits(rb.color.data()));
    assert_eq!(bits(ra.depth.data()), bits(rb.depth.data()));
    assert_eq!(bits(ra.confidence.data()), bits(rb.confidence.data()));
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let ds = toy(Primitive::Sphere, 16, 8, 2);
    let a = train(&ds, &tiny(3), &TrainOptions::default()).unwrap();
    let b = train(&ds, &tiny(3), &TrainOptions::default()).unwrap();
    assert_eq!(a.checkpoint.params, b.checkpoint.params);
    let losses = |h: &[nmvs_core::trainer::HistoryEntry]| h.iter().map(|e| e.loss.to_bits()).collect::<Vec<_>>();
    assert_eq!(losses(&a.history), losses(&b.history));
}

#[test]
fn history_is_written_to_the_output_directory() {
    let ds = toy(Primitive::Sphere, 16, 8, 0);
    let dir = tempfile::tempdir().unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.path().to_path_buf()),
    };
    train(&ds, &tiny(4), &opts).unwrap();
    let text = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 4);
}
