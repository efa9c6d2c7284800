//! Learnable prompts and the frozen encoders that turn them into class
//! text embeddings.
//!
//! Every class prompt is the shared context tokens followed by that class's
//! name token. An [`EncoderProvider`] stands in for the frozen vision-language
//! model: [`SyntheticEncoder`] is a differentiable toy (mean of the token rows),
//! [`FixtureEncoder`] replays recorded embeddings from VLT files.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::{kv, read_text, vlt, write_file};
use crate::scene::SceneBundle;
use crate::tensor::{dot, grad::l2_normalize_rows_backward, l2_normalize_rows, Tensor};

/// Standard deviation of the context-token initialization.
pub const CONTEXT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// `[M x d]` learnable context tokens shared by every class.
    pub context: Tensor<f64>,
    /// `[C_k x d]` frozen class-name tokens.
    pub class_tokens: Tensor<f64>,
    pub class_names: Vec<String>,
}

impl PromptSet {
    pub fn context_len(&self) -> usize {
        self.context.rows()
    }

    pub fn width(&self) -> usize {
        self.context.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    /// The `[(M+1) x d]` token sequence of class `i`.
    pub fn sequence(&self, i: usize) -> Tensor<f64> {
        let cls = self.class_tokens.slice_rows(i, i + 1);
        self.context.concat_rows(&cls).expect("equal widths")
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.width();
        if self.class_tokens.rank() != 2 || self.class_tokens.cols() != d {
            return Err(Error::shape(
                "prompt_set",
                self.context.shape(),
                self.class_tokens.shape(),
            ));
        }
        if self.class_tokens.rows() != self.class_names.len() {
            return Err(Error::Config(format!(
                "{} class tokens for {} class names",
                self.class_tokens.rows(),
                self.class_names.len()
            )));
        }
        check_class_names(&self.class_names)
    }
}

fn check_class_names(names: &[String]) -> Result<()> {
    if names.is_empty() {
        return Err(Error::Config("at least one class is required".into()));
    }
    for (i, n) in names.iter().enumerate() {
        if n.trim().is_empty() {
            return Err(Error::Config(format!("class {i} has an empty name")));
        }
        if names[..i].contains(n) {
            return Err(Error::Config(format!("duplicate class name `{n}`")));
        }
    }
    Ok(())
}

/// Deterministic RNG keyed by a string and a numeric seed.
pub(crate) fn keyed_rng(key: &str, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(key.as_bytes());
    h.update(seed.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 32];
    bytes.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(bytes)
}

/// Gaussian samples rounded through `f32`, so values survive a VLT round trip.
pub(crate) fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let dist = Normal::new(0.0, std).expect("positive std");
    (0..n).map(|_| dist.sample(rng) as f32 as f64).collect()
}

/// Unit-norm pseudo word embedding derived from a hash of `name`.
pub fn hashed_token(name: &str, d: usize) -> Tensor<f64> {
    let mut rng = keyed_rng(name, 0);
    let v = gaussian(&mut rng, d, 1.0);
    let n = dot(&v, &v).sqrt();
    Tensor::vector(v.iter().map(|x| (x / n) as f32 as f64).collect())
}

/// A frozen text/image encoder.
pub trait EncoderProvider: Send + Sync {
    fn width(&self) -> usize;

    /// Name token for a class. Defaults to [`hashed_token`].
    fn word_embedding(&self, class_name: &str) -> Result<Tensor<f64>> {
        Ok(hashed_token(class_name, self.width()))
    }

    /// Encodes a `[(M+1) x d]` prompt sequence into a `d` vector.
    fn encode_text(&self, class_name: &str, tokens: &Tensor<f64>) -> Result<Tensor<f64>>;

    /// Vector-Jacobian product of [`encode_text`](Self::encode_text) with
    /// respect to `tokens`.
    fn encode_text_backward(
        &self,
        class_name: &str,
        tokens: &Tensor<f64>,
        upstream: &Tensor<f64>,
    ) -> Result<Tensor<f64>>;

    /// Whether `encode_text` already returns unit vectors.
    fn text_is_normalized(&self) -> bool {
        false
    }

    /// Unit-norm global embedding of a scene.
    fn encode_image(&self, scene: &SceneBundle) -> Result<Tensor<f64>>;
}

/// Builds a prompt set with seeded context tokens and class-name tokens
/// supplied by `provider`.
pub fn build_prompts(
    class_names: &[String],
    context_len: usize,
    width: usize,
    seed: u64,
    provider: &dyn EncoderProvider,
) -> Result<PromptSet> {
    if context_len < 1 || width < 2 {
        return Err(Error::Config(format!(
            "prompt needs M >= 1 and d >= 2, got M={context_len}, d={width}"
        )));
    }
    check_class_names(class_names)?;
    if provider.width() != width {
        return Err(Error::Config(format!(
            "encoder width {} does not match prompt width {width}",
            provider.width()
        )));
    }
    let mut rng = keyed_rng("prompt-context", seed);
    let context = Tensor::new(
        vec![context_len, width],
        gaussian(&mut rng, context_len * width, CONTEXT_INIT_STD),
    )?;
    let mut tokens = Vec::with_capacity(class_names.len() * width);
    for name in class_names {
        let t = provider.word_embedding(name)?;
        if t.len() != width {
            return Err(Error::shape("word_embedding", &[width], t.shape()));
        }
        tokens.extend_from_slice(t.data());
    }
    Ok(PromptSet {
        context,
        class_tokens: Tensor::new(vec![class_names.len(), width], tokens)?,
        class_names: class_names.to_vec(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassEmbeddingTable {
    /// `[C_k x d]`, row `i` is the text embedding of class `i`.
    pub embeddings: Tensor<f64>,
    pub normalized: bool,
}

impl ClassEmbeddingTable {
    pub fn num_classes(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn width(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.embeddings.row(i)
    }
}

/// Encoder outputs kept for [`class_embeddings_backward`].
#[derive(Debug, Clone)]
pub struct EncodedClasses {
    pub table: ClassEmbeddingTable,
    norms: Option<Vec<f64>>,
}

pub fn encode_class_embeddings(
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
) -> Result<ClassEmbeddingTable> {
    encode_class_embeddings_cached(prompts, provider).map(|e| e.table)
}

pub fn encode_class_embeddings_cached(
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
) -> Result<EncodedClasses> {
    let d = prompts.width();
    if provider.width() != d {
        return Err(Error::Config(format!(
            "encoder width {} does not match prompt width {d}",
            provider.width()
        )));
    }
    let mut raw = Vec::with_capacity(prompts.num_classes() * d);
    for (i, name) in prompts.class_names.iter().enumerate() {
        let t = provider.encode_text(name, &prompts.sequence(i))?;
        if t.len() != d {
            return Err(Error::shape("encode_text", &[d], t.shape()));
        }
        raw.extend_from_slice(t.data());
    }
    let raw = Tensor::new(vec![prompts.num_classes(), d], raw)?;
    let (embeddings, norms) = if provider.text_is_normalized() {
        (raw, None)
    } else {
        let (y, n) = l2_normalize_rows(&raw)?;
        (y, Some(n))
    };
    Ok(EncodedClasses {
        table: ClassEmbeddingTable {
            embeddings,
            normalized: true,
        },
        norms,
    })
}

/// Gradient of the context tokens given a gradient on the embedding table.
pub fn class_embeddings_backward(
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    encoded: &EncodedClasses,
    d_table: &Tensor<f64>,
) -> Result<Tensor<f64>> {
    let d_raw = match &encoded.norms {
        Some(norms) => l2_normalize_rows_backward(&encoded.table.embeddings, norms, d_table),
        None => d_table.clone(),
    };
    let m = prompts.context_len();
    let mut d_context = Tensor::zeros(vec![m, prompts.width()]);
    for (i, name) in prompts.class_names.iter().enumerate() {
        let upstream = d_raw.slice_rows(i, i + 1).reshape(vec![prompts.width()])?;
        let d_tokens = provider.encode_text_backward(name, &prompts.sequence(i), &upstream)?;
        d_context.add_assign(&d_tokens.slice_rows(0, m));
    }
    Ok(d_context)
}

/// Desk-scale stand-in for a frozen vision-language model.
///
/// Text: mean of the prompt token rows. Image: mean pixel feature projected
/// to the embedding width, L2-normalized.
#[derive(Debug, Clone)]
pub struct SyntheticEncoder {
    width: usize,
    seed: u64,
    words: BTreeMap<String, Tensor<f64>>,
    image_projection: Option<Tensor<f64>>,
}

impl SyntheticEncoder {
    pub fn new(width: usize, seed: u64) -> Self {
        Self {
            width,
            seed,
            words: BTreeMap::new(),
            image_projection: None,
        }
    }

    /// Overrides the name token of a class.
    pub fn with_word(mut self, name: &str, token: Tensor<f64>) -> Self {
        assert_eq!(token.len(), self.width, "word token width");
        self.words.insert(name.to_string(), token);
        self
    }

    /// Fixes the `[d_v x d]` projection used by `encode_image`.
    pub fn with_image_projection(mut self, projection: Tensor<f64>) -> Self {
        assert_eq!(projection.cols(), self.width, "projection width");
        self.image_projection = Some(projection);
        self
    }

    fn projection(&self, feature_dim: usize) -> Result<Tensor<f64>> {
        match &self.image_projection {
            Some(p) if p.rows() == feature_dim => Ok(p.clone()),
            Some(p) => Err(Error::shape(
                "encode_image",
                &[feature_dim, self.width],
                p.shape(),
            )),
            None => {
                let mut rng = keyed_rng("image-projection", self.seed);
                let std = 1.0 / (feature_dim as f64).sqrt();
                Tensor::new(
                    vec![feature_dim, self.width],
                    gaussian(&mut rng, feature_dim * self.width, std),
                )
            }
        }
    }
}

impl EncoderProvider for SyntheticEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn word_embedding(&self, class_name: &str) -> Result<Tensor<f64>> {
        Ok(self
            .words
            .get(class_name)
            .cloned()
            .unwrap_or_else(|| hashed_token(class_name, self.width)))
    }

    fn encode_text(&self, _class_name: &str, tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        if tokens.rank() != 2 || tokens.cols() != self.width {
            return Err(Error::shape("encode_text", &[0, self.width], tokens.shape()));
        }
        let n = tokens.rows() as f64;
        Ok(tokens.sum_rows().scale(1.0 / n))
    }

    fn encode_text_backward(
        &self,
        _class_name: &str,
        tokens: &Tensor<f64>,
        upstream: &Tensor<f64>,
    ) -> Result<Tensor<f64>> {
        let n = tokens.rows();
        let row: Vec<f64> = upstream.data().iter().map(|g| g / n as f64).collect();
        Ok(Tensor::from_fn(vec![n, self.width], |i| row[i % self.width]))
    }

    fn encode_image(&self, scene: &SceneBundle) -> Result<Tensor<f64>> {
        let dv = scene.feature_dim();
        let feats = scene.pixel_features.as_matrix().cast::<f64>();
        let mean = feats.sum_rows().scale(1.0 / feats.rows() as f64);
        let proj = self.projection(dv)?;
        let mean = mean.reshape(vec![1, dv])?;
        let e = crate::tensor::matmul(&mean, &proj)?;
        let (e, _) = l2_normalize_rows(&e).map_err(|_| Error::ZeroNorm("encode_image"))?;
        e.reshape(vec![self.width])
    }
}

/// Replays recorded text and image embeddings.
#[derive(Debug, Clone)]
pub struct FixtureEncoder {
    width: usize,
    text: BTreeMap<String, Vec<f64>>,
    images: BTreeMap<String, Vec<f64>>,
}

const TEXT_TABLE: &str = "text_embeddings";
const IMAGE_TABLE: &str = "image_embeddings";

impl FixtureEncoder {
    /// Records `provider`'s outputs for the given prompts and scenes.
    pub fn record(
        prompts: &PromptSet,
        provider: &dyn EncoderProvider,
        scenes: &[SceneBundle],
    ) -> Result<Self> {
        let table = encode_class_embeddings(prompts, provider)?;
        let text = prompts
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), round_f32(table.row(i))))
            .collect();
        let images = scenes
            .iter()
            .map(|s| Ok((s.id.clone(), round_f32(provider.encode_image(s)?.data()))))
            .collect::<Result<_>>()?;
        Ok(Self {
            width: prompts.width(),
            text,
            images,
        })
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, map) in [(TEXT_TABLE, &self.text), (IMAGE_TABLE, &self.images)] {
            if map.is_empty() {
                continue;
            }
            let data: Vec<f32> = map.values().flatten().map(|&v| v as f32).collect();
            vlt::write(
                dir.join(format!("{name}.vlt")),
                &Tensor::new(vec![map.len(), self.width], data)?,
            )?;
            let manifest = kv::render(map.keys().enumerate().map(|(i, k)| (k.as_str(), i.to_string())));
            write_file(&dir.join(format!("{name}.txt")), manifest.as_bytes())?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut width = None;
        let mut tables = Vec::new();
        for name in [TEXT_TABLE, IMAGE_TABLE] {
            let data_path = dir.join(format!("{name}.vlt"));
            if !data_path.exists() {
                tables.push(BTreeMap::new());
                continue;
            }
            let t = vlt::read(&data_path)?;
            if t.rank() != 2 {
                return Err(Error::format(&data_path, "embedding table must be a matrix"));
            }
            if *width.get_or_insert(t.cols()) != t.cols() {
                return Err(Error::format(&data_path, "embedding widths differ between tables"));
            }
            let manifest_path = dir.join(format!("{name}.txt"));
            let mut map = BTreeMap::new();
            for (key, idx) in kv::parse(&read_text(&manifest_path)?, &manifest_path)? {
                let row: usize = idx
                    .parse()
                    .ok()
                    .filter(|&r| r < t.rows())
                    .ok_or_else(|| Error::format(&manifest_path, format!("bad row index `{idx}`")))?;
                let v: Vec<f64> = t.row(row).iter().map(|&x| x as f64).collect();
                let norm = dot(&v, &v).sqrt();
                if (norm - 1.0).abs() > 1e-5 {
                    return Err(Error::format(
                        &data_path,
                        format!("row for `{key}` is not unit norm ({norm})"),
                    ));
                }
                map.insert(key, v);
            }
            tables.push(map);
        }
        let images = tables.pop().unwrap();
        let text = tables.pop().unwrap();
        Ok(Self {
            width: width.ok_or_else(|| Error::format(dir, "no embedding tables found"))?,
            text,
            images,
        })
    }
}

fn round_f32(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| x as f32 as f64).collect()
}

impl EncoderProvider for FixtureEncoder {
    fn width(&self) -> usize {
        self.width
    }

    fn encode_text(&self, class_name: &str, _tokens: &Tensor<f64>) -> Result<Tensor<f64>> {
        self.text
            .get(class_name)
            .map(|v| Tensor::vector(v.clone()))
            .ok_or_else(|| Error::MissingFixture(format!("class `{class_name}`")))
    }

    fn encode_text_backward(
        &self,
        _class_name: &str,
        tokens: &Tensor<f64>,
        _upstream: &Tensor<f64>,
    ) -> Result<Tensor<f64>> {
        Ok(Tensor::zeros(tokens.shape().to_vec()))
    }

    fn text_is_normalized(&self) -> bool {
        true
    }

    fn encode_image(&self, scene: &SceneBundle) -> Result<Tensor<f64>> {
        self.images
            .get(&scene.id)
            .map(|v| Tensor::vector(v.clone()))
            .ok_or_else(|| Error::MissingFixture(format!("scene `{}`", scene.id)))
    }
}
