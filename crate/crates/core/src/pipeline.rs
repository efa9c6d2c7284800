//! In-memory wiring of the full run: synthetic world, split, initial
//! checkpoint, training, scoring and evaluation. The command-line tool adds
//! file I/O around these steps.

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::embedding::{build_prompts, encode_class_embeddings, EncoderProvider, SyntheticEncoder};
use crate::error::Result;
use crate::inference::{score_scene, InferenceOptions, ScoreStack};
use crate::metrics::{DatasetEval, DatasetReport};
use crate::scene::SceneBundle;
use crate::synth::{generate, split, SynthWorld};
use crate::aligner::AlignerParams;
use crate::tensor::Tensor;
use crate::trainer::{train, Checkpoint, TrainOutcome};

/// A validated configuration with its synthetic world and text encoder.
#[derive(Debug, Clone)]
pub struct Experiment {
    pub config: RunConfig,
    pub world: SynthWorld,
    pub provider: SyntheticEncoder,
}

impl Experiment {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let world = SynthWorld::new(config.synth.clone())?;
        let provider = world.encoder();
        Ok(Self {
            config,
            world,
            provider,
        })
    }

    /// Generates `data.scenes` scenes and splits them into train and eval.
    pub fn scenes(&self) -> Result<(Vec<SceneBundle>, Vec<SceneBundle>)> {
        let all = generate(&self.world, self.config.scenes)?.scenes;
        split(all, self.config.train_fraction, self.config.seed)
    }

    /// Seeded parameters and prompts before any training.
    pub fn initial_checkpoint(&self) -> Result<Checkpoint> {
        let c = &self.config;
        let prompts = build_prompts(
            &self.world.class_names(),
            c.context_len,
            c.synth.embed_dim,
            c.seed,
            &self.provider,
        )?;
        let params = AlignerParams::init(c.aligner_config(), c.seed)?;
        Ok(Checkpoint { params, prompts })
    }

    pub fn train(&self, scenes: &[SceneBundle], init: Checkpoint) -> Result<TrainOutcome> {
        train(scenes, &self.provider, init, &self.config.train)
    }

    /// Scores every scene; order follows `scenes`.
    pub fn score(
        &self,
        checkpoint: &Checkpoint,
        scenes: &[SceneBundle],
        opts: &InferenceOptions,
    ) -> Result<Vec<ScoreStack>> {
        score_all(checkpoint, scenes, &self.provider, opts)
    }

    pub fn evaluate(&self, scenes: &[SceneBundle], maps: &[Tensor<f64>]) -> Result<DatasetReport> {
        evaluate(scenes, maps, self.config.component_threshold)
    }
}

/// Scores scenes in parallel with deterministic output order.
pub fn score_all(
    checkpoint: &Checkpoint,
    scenes: &[SceneBundle],
    provider: &dyn EncoderProvider,
    opts: &InferenceOptions,
) -> Result<Vec<ScoreStack>> {
    let table = encode_class_embeddings(&checkpoint.prompts, provider)?;
    scenes
        .par_iter()
        .map(|s| score_scene(s, &table, &checkpoint.params, provider, opts))
        .collect()
}

/// Pools metrics over scenes and their `[H, W]` anomaly maps.
pub fn evaluate(scenes: &[SceneBundle], maps: &[Tensor<f64>], component_threshold: f64) -> Result<DatasetReport> {
    if scenes.len() != maps.len() {
        return Err(crate::Error::Metric(format!(
            "{} scenes but {} score maps",
            scenes.len(),
            maps.len()
        )));
    }
    let mut eval = DatasetEval::new(component_threshold);
    for (s, m) in scenes.iter().zip(maps) {
        eval.add(s, m)?;
    }
    eval.finish()
}
