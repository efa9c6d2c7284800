//! Training-loop behaviour on the default synthetic fixture.

use vl_anomaly::aligner::{loss_value, AlignMode, LossWeights};
use vl_anomaly::config::RunConfig;
use vl_anomaly::embedding::encode_class_embeddings;
use vl_anomaly::inference::image_similarity;
use vl_anomaly::pipeline::Experiment;
use vl_anomaly::trainer::{Checkpoint, TrainStatus};
use vl_anomaly::SceneBundle;

fn experiment(text: &str) -> (Experiment, Vec<SceneBundle>) {
    let exp = Experiment::new(RunConfig::from_text(text).unwrap()).unwrap();
    let (train, _) = exp.scenes().unwrap();
    (exp, train)
}

/// Mean (pixel, mask) loss over the whole training split.
fn dataset_loss(exp: &Experiment, scenes: &[SceneBundle], ckpt: &Checkpoint) -> (f64, f64) {
    let w = LossWeights::default();
    let (mut p, mut m) = (0.0, 0.0);
    for s in scenes {
        let l = loss_value(s, &ckpt.prompts, &exp.provider, &ckpt.params, w).unwrap();
        p += l.pixel;
        m += l.mask;
    }
    (p / scenes.len() as f64, m / scenes.len() as f64)
}

#[test]
fn zero_iterations_return_the_initial_state() {
    let (mut exp, train) = experiment("data.scenes = 8\n");
    exp.config.train.iterations = 0;
    let init = exp.initial_checkpoint().unwrap();
    let out = exp.train(&train, init.clone()).unwrap();
    assert_eq!(out.checkpoint, init);
    assert!(out.trace.is_empty());
    assert_eq!(out.status, TrainStatus::Completed);
}

#[test]
fn same_seed_gives_identical_traces() {
    let text = "data.scenes = 8\ntrain.iterations = 20\n";
    let run = || {
        let (exp, train) = experiment(text);
        let out = exp.train(&train, exp.initial_checkpoint().unwrap()).unwrap();
        (out.trace, out.checkpoint)
    };
    let (a, ca) = run();
    let (b, cb) = run();
    assert_eq!(a, b);
    assert_eq!(ca, cb);

    let (exp, train) = experiment(&format!("{text}seed = 8\n"));
    let other = exp.train(&train, exp.initial_checkpoint().unwrap()).unwrap();
    assert_ne!(a, other.trace);
}

#[test]
fn trace_total_is_the_weighted_sum() {
    for (mode, lp, lm) in [("both", 0.5, 0.5), ("pixel", 0.5, 0.0), ("mask", 0.0, 0.5)] {
        let (exp, train) = experiment(&format!("data.scenes = 8\ntrain.iterations = 10\nmodel.align = {mode}\n"));
        let out = exp.train(&train, exp.initial_checkpoint().unwrap()).unwrap();
        assert_eq!(out.trace.len(), 10);
        for (i, r) in out.trace.iter().enumerate() {
            assert_eq!(r.iter, i);
            assert!((r.total - (lp * r.pixel + lm * r.mask)).abs() <= 1e-12, "{mode} {r:?}");
        }
    }
}

#[test]
fn training_leaves_frozen_inputs_untouched() {
    let (exp, train) = experiment("data.scenes = 8\ntrain.iterations = 15\n");
    let before = train.clone();
    let init = exp.initial_checkpoint().unwrap();
    let out = exp.train(&train, init.clone()).unwrap();
    assert_eq!(train, before);
    assert_eq!(out.checkpoint.prompts.class_tokens, init.prompts.class_tokens);
    assert_eq!(out.checkpoint.prompts.class_names, init.prompts.class_names);
    assert_ne!(out.checkpoint.prompts.context, init.prompts.context);
    assert_ne!(out.checkpoint.params, init.params);
}

#[test]
fn default_recipe_cuts_pixel_loss_fivefold() {
    let (exp, train) = experiment("");
    assert_eq!(exp.config.train.iterations, 500);
    assert_eq!(exp.config.train.lr, 1e-2);
    let init = exp.initial_checkpoint().unwrap();
    let (p0, m0) = dataset_loss(&exp, &train, &init);
    let out = exp.train(&train, init).unwrap();
    assert_eq!(out.status, TrainStatus::Completed);
    let (p1, m1) = dataset_loss(&exp, &train, &out.checkpoint);
    assert!(p1 < 0.2 * p0, "L_pixel {p0} -> {p1}");
    assert!(m1 < m0, "L_mask {m0} -> {m1}");
}

#[test]
fn checkpoint_round_trips_through_f32_storage() {
    let (exp, train) = experiment("data.scenes = 8\ntrain.iterations = 5\n");
    let out = exp.train(&train, exp.initial_checkpoint().unwrap()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    out.checkpoint.save(&a).unwrap();
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded.params.config, out.checkpoint.params.config);
    for (x, y) in loaded.params.tensors().iter().zip(out.checkpoint.params.tensors()) {
        assert_eq!(x.name, y.name);
        let rounded = y.tensor.cast::<f32>().cast::<f64>();
        assert_eq!(x.tensor, &rounded, "{}", x.name);
    }
    loaded.save(&b).unwrap();
    assert_eq!(Checkpoint::load(&b).unwrap(), loaded);
    for f in std::fs::read_dir(&a).unwrap() {
        let name = f.unwrap().file_name();
        assert_eq!(std::fs::read(a.join(&name)).unwrap(), std::fs::read(b.join(&name)).unwrap());
    }
}

#[test]
fn image_similarity_is_a_distribution() {
    let (exp, train) = experiment("data.scenes = 8\n");
    let ckpt = exp.initial_checkpoint().unwrap();
    let table = encode_class_embeddings(&ckpt.prompts, &exp.provider).unwrap();
    for s in &train {
        let sim = image_similarity(s, &table, &exp.provider, ckpt.params.tau(), false).unwrap();
        assert!((sim.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(sim.data().iter().all(|&v| v > 0.0));
    }
}

#[test]
fn mask_mode_checkpoint_records_its_mode() {
    let (exp, train) = experiment("data.scenes = 8\ntrain.iterations = 3\nmodel.align = mask\n");
    let out = exp.train(&train, exp.initial_checkpoint().unwrap()).unwrap();
    assert_eq!(out.checkpoint.params.config.mode, AlignMode::Mask);
    assert!(out.trace.iter().all(|r| r.total == 0.5 * r.mask));
}
