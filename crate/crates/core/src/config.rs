//! Run configuration: every tunable of generation, training, scoring and
//! evaluation, read from `key = value` text with unknown keys rejected.

use std::path::Path;
use std::str::FromStr;

use crate::aligner::{AlignMode, AlignerConfig, LossWeights};
use crate::error::{Error, Result};
use crate::inference::{FusionWeights, InferenceOptions};
use crate::io::kv;
use crate::metrics::DEFAULT_COMPONENT_THRESHOLD;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

/// File name of the resolved configuration written next to every output.
pub const RESOLVED_CONFIG: &str = "config.resolved.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Master seed: drives the synthetic world, initialization and batching.
    pub seed: u64,
    pub synth: SynthConfig,
    pub scenes: usize,
    pub train_fraction: f64,
    /// Learnable context tokens per prompt (M).
    pub context_len: usize,
    pub heads: usize,
    pub tau_init: f64,
    pub align: AlignMode,
    pub train: TrainConfig,
    pub inference: InferenceOptions,
    pub component_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let seed = 7;
        Self {
            seed,
            synth: SynthConfig { seed, ..SynthConfig::default() },
            scenes: 64,
            train_fraction: 0.5,
            context_len: 4,
            heads: 2,
            tau_init: 0.07,
            align: AlignMode::Both,
            train: TrainConfig { seed, ..TrainConfig::default() },
            inference: InferenceOptions::default(),
            component_threshold: DEFAULT_COMPONENT_THRESHOLD,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

impl RunConfig {
    /// Defaults overridden by a config file's entries.
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = crate::io::read_text(path)?;
        let mut cfg = Self::default();
        for (k, v) in kv::parse(&text, path)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (k, v) in kv::parse(text, Path::new("<config>"))? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    /// Sets the master seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.synth.seed = seed;
        self.train.seed = seed;
    }

    /// Applies one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let s = &mut self.synth;
        let t = &mut self.train;
        let i = &mut self.inference;
        match key {
            "seed" => self.set_seed(parse(key, value)?),
            "synth.grid_h" => s.feature_size.0 = parse(key, value)?,
            "synth.grid_w" => s.feature_size.1 = parse(key, value)?,
            "synth.stride" => s.stride = parse(key, value)?,
            "synth.classes" => s.num_classes = parse(key, value)?,
            "synth.ood_prototypes" => s.num_ood = parse(key, value)?,
            "synth.feature_dim" => s.feature_dim = parse(key, value)?,
            "synth.query_dim" => s.query_dim = parse(key, value)?,
            "synth.embed_dim" => s.embed_dim = parse(key, value)?,
            "synth.noise_sigma" => s.noise_sigma = parse(key, value)?,
            "synth.regions_min" => s.regions.0 = parse(key, value)?,
            "synth.regions_max" => s.regions.1 = parse(key, value)?,
            "synth.blobs_min" => s.blobs.0 = parse(key, value)?,
            "synth.blobs_max" => s.blobs.1 = parse(key, value)?,
            "synth.blob_radius_min" => s.blob_radius.0 = parse(key, value)?,
            "synth.blob_radius_max" => s.blob_radius.1 = parse(key, value)?,
            "synth.queries" => s.num_queries = parse(key, value)?,
            "synth.margin_min" => s.margin.0 = parse(key, value)?,
            "synth.margin_max" => s.margin.1 = parse(key, value)?,
            "synth.hard_prob" => s.hard_prob = parse(key, value)?,
            "synth.hard_margin_min" => s.hard_margin.0 = parse(key, value)?,
            "synth.hard_margin_max" => s.hard_margin.1 = parse(key, value)?,
            "synth.absorb_prob" => s.absorb_prob = parse(key, value)?,
            "synth.mask_logit" => s.mask_logit = parse(key, value)?,
            "synth.absorbed_logit_min" => s.absorbed_logit.0 = parse(key, value)?,
            "synth.absorbed_logit_max" => s.absorbed_logit.1 = parse(key, value)?,
            "synth.ood_max_cosine" => s.ood_max_cosine = parse(key, value)?,
            "data.scenes" => self.scenes = parse(key, value)?,
            "data.train_fraction" => self.train_fraction = parse(key, value)?,
            "prompt.context_len" => self.context_len = parse(key, value)?,
            "model.heads" => self.heads = parse(key, value)?,
            "model.tau_init" => self.tau_init = parse(key, value)?,
            "model.align" => self.align = value.parse()?,
            "loss.lambda_pixel" => t.weights.pixel = parse(key, value)?,
            "loss.lambda_mask" => t.weights.mask = parse(key, value)?,
            "train.iterations" => t.iterations = parse(key, value)?,
            "train.batch_size" => t.batch_size = parse(key, value)?,
            "train.lr" => t.lr = parse(key, value)?,
            "train.weight_decay" => t.weight_decay = parse(key, value)?,
            "fusion.alpha" => i.weights.alpha = parse(key, value)?,
            "fusion.beta" => i.weights.beta = parse(key, value)?,
            "fusion.gamma" => i.weights.gamma = parse(key, value)?,
            "fusion.sources" => i.sources = value.parse()?,
            "fusion.renormalize" => i.renormalize = parse_bool(key, value)?,
            "fusion.raw_sim" => i.raw_sim = parse_bool(key, value)?,
            "eval.component_threshold" => self.component_threshold = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.synth;
        let t = &self.train;
        let i = &self.inference;
        vec![
            ("seed", self.seed.to_string()),
            ("synth.grid_h", s.feature_size.0.to_string()),
            ("synth.grid_w", s.feature_size.1.to_string()),
            ("synth.stride", s.stride.to_string()),
            ("synth.classes", s.num_classes.to_string()),
            ("synth.ood_prototypes", s.num_ood.to_string()),
            ("synth.feature_dim", s.feature_dim.to_string()),
            ("synth.query_dim", s.query_dim.to_string()),
            ("synth.embed_dim", s.embed_dim.to_string()),
            ("synth.noise_sigma", s.noise_sigma.to_string()),
            ("synth.regions_min", s.regions.0.to_string()),
            ("synth.regions_max", s.regions.1.to_string()),
            ("synth.blobs_min", s.blobs.0.to_string()),
            ("synth.blobs_max", s.blobs.1.to_string()),
            ("synth.blob_radius_min", s.blob_radius.0.to_string()),
            ("synth.blob_radius_max", s.blob_radius.1.to_string()),
            ("synth.queries", s.num_queries.to_string()),
            ("synth.margin_min", s.margin.0.to_string()),
            ("synth.margin_max", s.margin.1.to_string()),
            ("synth.hard_prob", s.hard_prob.to_string()),
            ("synth.hard_margin_min", s.hard_margin.0.to_string()),
            ("synth.hard_margin_max", s.hard_margin.1.to_string()),
            ("synth.absorb_prob", s.absorb_prob.to_string()),
            ("synth.mask_logit", s.mask_logit.to_string()),
            ("synth.absorbed_logit_min", s.absorbed_logit.0.to_string()),
            ("synth.absorbed_logit_max", s.absorbed_logit.1.to_string()),
            ("synth.ood_max_cosine", s.ood_max_cosine.to_string()),
            ("data.scenes", self.scenes.to_string()),
            ("data.train_fraction", self.train_fraction.to_string()),
            ("prompt.context_len", self.context_len.to_string()),
            ("model.heads", self.heads.to_string()),
            ("model.tau_init", self.tau_init.to_string()),
            ("model.align", self.align.to_string()),
            ("loss.lambda_pixel", t.weights.pixel.to_string()),
            ("loss.lambda_mask", t.weights.mask.to_string()),
            ("train.iterations", t.iterations.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.lr", t.lr.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("fusion.alpha", i.weights.alpha.to_string()),
            ("fusion.beta", i.weights.beta.to_string()),
            ("fusion.gamma", i.weights.gamma.to_string()),
            ("fusion.sources", i.sources.to_string()),
            ("fusion.renormalize", i.renormalize.to_string()),
            ("fusion.raw_sim", i.raw_sim.to_string()),
            ("eval.component_threshold", self.component_threshold.to_string()),
        ]
    }

    /// The fully resolved configuration as `key = value` text.
    pub fn render(&self) -> String {
        kv::render(self.entries())
    }

    pub fn aligner_config(&self) -> AlignerConfig {
        let s = &self.synth;
        let mut c = AlignerConfig::new(s.feature_dim, s.query_dim, s.embed_dim, self.heads);
        c.tau_init = self.tau_init;
        c.mode = self.align;
        c
    }

    pub fn loss_weights(&self) -> LossWeights {
        self.train.weights.for_mode(self.align)
    }

    pub fn fusion_weights(&self) -> FusionWeights {
        self.inference.weights
    }

    pub fn validate(&self) -> Result<()> {
        self.synth.validate()?;
        self.aligner_config().validate()?;
        self.train.validate()?;
        self.inference.weights.validate()?;
        if self.scenes < 2 {
            return Err(Error::Config("need at least 2 scenes to split".into()));
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::Config("data.train_fraction must lie in (0, 1)".into()));
        }
        if self.context_len == 0 {
            return Err(Error::Config("prompt.context_len must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.component_threshold) {
            return Err(Error::Config("eval.component_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }
}
