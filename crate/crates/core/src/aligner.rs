//! Prompt-driven aligner: pixel-level then mask-level alignment of
//! segmentation features to class text embeddings, trained with
//! temperature-scaled contrastive losses.
//!
//! Pixel stage: backbone features are projected to the text width, stacked
//! with the class embeddings into one token sequence and passed through a
//! self-attention block (attention, residual, layer norm, ReLU FFN,
//! residual, layer norm). The pixel-token outputs, L2-normalized, are
//! `v_align`.
//!
//! Mask stage: projected decoder queries cross-attend to `v_align` through
//! a block of the same form; normalized outputs are `q_align`.
//!
//! All gradients are written out by hand and checked against finite
//! differences in the trainer's grad-check harness.

use std::fmt;
use std::str::FromStr;

use crate::embedding::{
    class_embeddings_backward, encode_class_embeddings_cached, gaussian, keyed_rng,
    ClassEmbeddingTable, EncodedClasses, EncoderProvider, PromptSet,
};
use crate::error::{Error, Result};
use crate::scene::{SceneBundle, IGNORE};
use crate::tensor::grad::{
    l2_normalize_rows_backward, layer_norm_backward, matmul_backward, mh_attention_backward,
    mh_attention_cached, relu_backward,
};
use crate::tensor::{
    add_row_bias, dot, l2_normalize_rows, layer_norm_cached, matmul, matmul_tn, relu,
    AttentionCache, LayerNormCache, MhaWeights, Tensor,
};

/// Which alignment stages are trained and used for text similarity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AlignMode {
    /// Pixel-level alignment only (`lambda_mask` forced to 0).
    Pixel,
    /// Mask-level alignment only: no pixel attention block, queries attend
    /// to the normalized projected features (`lambda_pixel` forced to 0).
    Mask,
    #[default]
    Both,
}

impl fmt::Display for AlignMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AlignMode::Pixel => "pixel",
            AlignMode::Mask => "mask",
            AlignMode::Both => "both",
        })
    }
}

impl FromStr for AlignMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(AlignMode::Pixel),
            "mask" => Ok(AlignMode::Mask),
            "both" => Ok(AlignMode::Both),
            _ => Err(Error::Config(format!(
                "alignment mode must be pixel, mask or both, got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignerConfig {
    pub feature_dim: usize,
    pub query_dim: usize,
    pub width: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub tau_init: f64,
    pub mode: AlignMode,
}

impl AlignerConfig {
    /// FFN hidden width defaults to `2 * width`.
    pub fn new(feature_dim: usize, query_dim: usize, width: usize, heads: usize) -> Self {
        Self {
            feature_dim,
            query_dim,
            width,
            heads,
            ffn_hidden: 2 * width,
            tau_init: 0.07,
            mode: AlignMode::Both,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.query_dim == 0 || self.width < 2 || self.ffn_hidden == 0 {
            return Err(Error::Config("aligner widths must be positive".into()));
        }
        if self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} is not divisible into {} heads",
                self.width, self.heads
            )));
        }
        if !(self.tau_init > 0.0 && self.tau_init.is_finite()) {
            return Err(Error::Config(format!("tau_init must be positive, got {}", self.tau_init)));
        }
        Ok(())
    }
}

/// One attention + FFN block with post-norm residuals.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub attn: MhaWeights<f64>,
    pub norm1_gain: Tensor<f64>,
    pub norm1_bias: Tensor<f64>,
    pub ffn_w1: Tensor<f64>,
    pub ffn_b1: Tensor<f64>,
    pub ffn_w2: Tensor<f64>,
    pub ffn_b2: Tensor<f64>,
    pub norm2_gain: Tensor<f64>,
    pub norm2_bias: Tensor<f64>,
}

const BLOCK_FIELDS: [&str; 12] = [
    "attn.wq",
    "attn.wk",
    "attn.wv",
    "attn.wo",
    "norm1.gain",
    "norm1.bias",
    "ffn.w1",
    "ffn.b1",
    "ffn.w2",
    "ffn.b2",
    "norm2.gain",
    "norm2.bias",
];

impl Block {
    fn init(width: usize, hidden: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let mut mat = |r: usize, c: usize, std: f64| {
            Tensor::new(vec![r, c], gaussian(rng, r * c, std)).expect("shape")
        };
        let s = 1.0 / (width as f64).sqrt();
        Self {
            attn: MhaWeights {
                wq: mat(width, width, s),
                wk: mat(width, width, s),
                wv: mat(width, width, s),
                wo: mat(width, width, s),
            },
            norm1_gain: Tensor::full(vec![width], 1.0),
            norm1_bias: Tensor::zeros(vec![width]),
            ffn_w1: mat(width, hidden, (2.0 / width as f64).sqrt()),
            ffn_b1: Tensor::zeros(vec![hidden]),
            ffn_w2: mat(hidden, width, 1.0 / (hidden as f64).sqrt()),
            ffn_b2: Tensor::zeros(vec![width]),
            norm2_gain: Tensor::full(vec![width], 1.0),
            norm2_bias: Tensor::zeros(vec![width]),
        }
    }

    fn tensors(&self) -> [&Tensor<f64>; 12] {
        [
            &self.attn.wq,
            &self.attn.wk,
            &self.attn.wv,
            &self.attn.wo,
            &self.norm1_gain,
            &self.norm1_bias,
            &self.ffn_w1,
            &self.ffn_b1,
            &self.ffn_w2,
            &self.ffn_b2,
            &self.norm2_gain,
            &self.norm2_bias,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<f64>; 12] {
        [
            &mut self.attn.wq,
            &mut self.attn.wk,
            &mut self.attn.wv,
            &mut self.attn.wo,
            &mut self.norm1_gain,
            &mut self.norm1_bias,
            &mut self.ffn_w1,
            &mut self.ffn_b1,
            &mut self.ffn_w2,
            &mut self.ffn_b2,
            &mut self.norm2_gain,
            &mut self.norm2_bias,
        ]
    }
}

#[derive(Debug, Clone)]
struct BlockCache {
    attn: AttentionCache<f64>,
    norm1: LayerNormCache<f64>,
    y1: Tensor<f64>,
    pre: Tensor<f64>,
    hidden: Tensor<f64>,
    norm2: LayerNormCache<f64>,
    self_attention: bool,
}

fn block_forward(
    b: &Block,
    x: &Tensor<f64>,
    kv: Option<&Tensor<f64>>,
    heads: usize,
) -> Result<(Tensor<f64>, BlockCache)> {
    let kv_in = kv.unwrap_or(x);
    let (a, attn) = mh_attention_cached(x, kv_in, kv_in, &b.attn, heads)?;
    let (y1, norm1) = layer_norm_cached(&x.add(&a), &b.norm1_gain, &b.norm1_bias)?;
    let pre = add_row_bias(&matmul(&y1, &b.ffn_w1)?, &b.ffn_b1)?;
    let hidden = relu(&pre);
    let f = add_row_bias(&matmul(&hidden, &b.ffn_w2)?, &b.ffn_b2)?;
    let (y2, norm2) = layer_norm_cached(&y1.add(&f), &b.norm2_gain, &b.norm2_bias)?;
    Ok((
        y2,
        BlockCache {
            attn,
            norm1,
            y1,
            pre,
            hidden,
            norm2,
            self_attention: kv.is_none(),
        },
    ))
}

/// Returns `(d_x, d_kv, grads)`; for self-attention `d_kv` is already folded
/// into `d_x` and returned as `None`.
fn block_backward(
    b: &Block,
    cache: &BlockCache,
    dy: &Tensor<f64>,
) -> Result<(Tensor<f64>, Option<Tensor<f64>>, Block)> {
    let (dr2, norm2_gain, norm2_bias) = layer_norm_backward(&cache.norm2, &b.norm2_gain, dy);
    let (dh, ffn_w2) = matmul_backward(&cache.hidden, &b.ffn_w2, &dr2)?;
    let ffn_b2 = dr2.sum_rows();
    let dpre = relu_backward(&cache.pre, &dh);
    let (dy1_ffn, ffn_w1) = matmul_backward(&cache.y1, &b.ffn_w1, &dpre)?;
    let ffn_b1 = dpre.sum_rows();
    let dy1 = dr2.add(&dy1_ffn);
    let (dr1, norm1_gain, norm1_bias) = layer_norm_backward(&cache.norm1, &b.norm1_gain, &dy1);
    let ag = mh_attention_backward(&cache.attn, &b.attn, &dr1)?;
    let mut dx = dr1.add(&ag.dq_in);
    let dkv = ag.dk_in.add(&ag.dv_in);
    let dkv = if cache.self_attention {
        dx.add_assign(&dkv);
        None
    } else {
        Some(dkv)
    };
    let grads = Block {
        attn: ag.weights,
        norm1_gain,
        norm1_bias,
        ffn_w1,
        ffn_b1,
        ffn_w2,
        ffn_b2,
        norm2_gain,
        norm2_bias,
    };
    Ok((dx, dkv, grads))
}

/// All trainable aligner parameters, including the temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignerParams {
    pub config: AlignerConfig,
    /// `[d_v x d]`
    pub pixel_proj: Tensor<f64>,
    pub pixel: Block,
    /// `[d_q x d]`
    pub mask_query_proj: Tensor<f64>,
    pub mask: Block,
    /// Natural log of the temperature, shape `[1]`.
    pub log_tau: Tensor<f64>,
}

/// A named view of one parameter tensor.
pub struct ParamRef<'a> {
    pub name: String,
    pub tensor: &'a Tensor<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

pub struct ParamMut<'a> {
    pub name: String,
    pub tensor: &'a mut Tensor<f64>,
    pub decay: bool,
}

fn decays(name: &str) -> bool {
    !(name == "log_tau" || name.contains("norm"))
}

impl AlignerParams {
    /// Seeded initialization. Values are rounded through `f32` so a fresh
    /// checkpoint reloads bit-exactly.
    pub fn init(config: AlignerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng("aligner-params", seed);
        let (dv, dq, d) = (config.feature_dim, config.query_dim, config.width);
        let pixel_proj = Tensor::new(vec![dv, d], gaussian(&mut rng, dv * d, 1.0 / (dv as f64).sqrt()))?;
        let pixel = Block::init(d, config.ffn_hidden, &mut rng);
        let mask_query_proj =
            Tensor::new(vec![dq, d], gaussian(&mut rng, dq * d, 1.0 / (dq as f64).sqrt()))?;
        let mask = Block::init(d, config.ffn_hidden, &mut rng);
        let log_tau = Tensor::vector(vec![config.tau_init.ln() as f32 as f64]);
        Ok(Self {
            config,
            pixel_proj,
            pixel,
            mask_query_proj,
            mask,
            log_tau,
        })
    }

    /// A same-shaped set of zeros, used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.tensors_mut() {
            p.tensor.data_mut().fill(0.0);
        }
        z
    }

    pub fn tau(&self) -> f64 {
        self.log_tau.data()[0].exp()
    }

    pub fn width(&self) -> usize {
        self.config.width
    }

    pub fn heads(&self) -> usize {
        self.config.heads
    }

    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut out = vec![named("pixel_proj", &self.pixel_proj)];
        for (f, t) in BLOCK_FIELDS.iter().zip(self.pixel.tensors()) {
            out.push(named(&format!("pixel.{f}"), t));
        }
        out.push(named("mask_query_proj", &self.mask_query_proj));
        for (f, t) in BLOCK_FIELDS.iter().zip(self.mask.tensors()) {
            out.push(named(&format!("mask.{f}"), t));
        }
        out.push(named("log_tau", &self.log_tau));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut out = vec![named_mut("pixel_proj", &mut self.pixel_proj)];
        for (f, t) in BLOCK_FIELDS.iter().zip(self.pixel.tensors_mut()) {
            out.push(named_mut(&format!("pixel.{f}"), t));
        }
        out.push(named_mut("mask_query_proj", &mut self.mask_query_proj));
        for (f, t) in BLOCK_FIELDS.iter().zip(self.mask.tensors_mut()) {
            out.push(named_mut(&format!("mask.{f}"), t));
        }
        out.push(named_mut("log_tau", &mut self.log_tau));
        out
    }

    fn check_scene(&self, scene: &SceneBundle) -> Result<()> {
        if scene.feature_dim() != self.config.feature_dim {
            return Err(Error::shape(
                "pixel features vs pixel_proj",
                scene.pixel_features.shape(),
                self.pixel_proj.shape(),
            ));
        }
        if scene.query_dim() != self.config.query_dim {
            return Err(Error::shape(
                "mask queries vs mask_query_proj",
                scene.mask_queries.shape(),
                self.mask_query_proj.shape(),
            ));
        }
        Ok(())
    }

    fn check_table(&self, table: &ClassEmbeddingTable) -> Result<()> {
        if table.width() != self.config.width {
            return Err(Error::shape(
                "class embeddings vs aligner width",
                table.embeddings.shape(),
                &[self.config.width],
            ));
        }
        if !table.normalized {
            return Err(Error::Config("class embedding table must be L2-normalized".into()));
        }
        Ok(())
    }
}

fn named<'a>(name: &str, tensor: &'a Tensor<f64>) -> ParamRef<'a> {
    ParamRef {
        name: name.to_string(),
        tensor,
        decay: decays(name),
    }
}

fn named_mut<'a>(name: &str, tensor: &'a mut Tensor<f64>) -> ParamMut<'a> {
    ParamMut {
        name: name.to_string(),
        tensor,
        decay: decays(name),
    }
}

/// Pixel- and mask-aligned features of one scene, rows unit-norm.
#[derive(Debug, Clone)]
pub struct AlignedFeatures {
    /// `[h, w, d]`
    pub v_align: Tensor<f64>,
    /// `[N_q, d]`
    pub q_align: Tensor<f64>,
}

#[derive(Debug, Clone)]
struct PixelCache {
    features: Tensor<f64>,
    projected: Tensor<f64>,
    block: Option<BlockCache>,
    v_align: Tensor<f64>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone)]
struct MaskCache {
    queries: Tensor<f64>,
    block: BlockCache,
    q_align: Tensor<f64>,
    norms: Vec<f64>,
}

fn pixel_forward(
    scene: &SceneBundle,
    table: &ClassEmbeddingTable,
    params: &AlignerParams,
) -> Result<PixelCache> {
    params.check_scene(scene)?;
    params.check_table(table)?;
    let features = scene.pixel_features.as_matrix().cast::<f64>();
    let projected = matmul(&features, &params.pixel_proj)?;
    let p = projected.rows();
    let (tokens, block) = match params.config.mode {
        AlignMode::Mask => (projected.clone(), None),
        AlignMode::Pixel | AlignMode::Both => {
            let seq = projected.concat_rows(&table.embeddings)?;
            let (out, cache) = block_forward(&params.pixel, &seq, None, params.heads())?;
            (out.slice_rows(0, p), Some(cache))
        }
    };
    let (v_align, norms) = l2_normalize_rows(&tokens)?;
    Ok(PixelCache {
        features,
        projected,
        block,
        v_align,
        norms,
    })
}

fn mask_forward(v_align: &Tensor<f64>, scene: &SceneBundle, params: &AlignerParams) -> Result<MaskCache> {
    params.check_scene(scene)?;
    if scene.num_queries() == 0 {
        return Err(Error::Empty("mask_align"));
    }
    if v_align.last_dim() != params.width() {
        return Err(Error::shape("mask_align", v_align.shape(), &[params.width()]));
    }
    let queries = scene.mask_queries.cast::<f64>();
    let projected = matmul(&queries, &params.mask_query_proj)?;
    let (out, block) = block_forward(&params.mask, &projected, Some(&v_align.as_matrix()), params.heads())?;
    let (q_align, norms) = l2_normalize_rows(&out)?;
    Ok(MaskCache {
        queries,
        block,
        q_align,
        norms,
    })
}

/// Pixel-aligned features `[h, w, d]`, unit-norm per location.
pub fn pixel_align(
    scene: &SceneBundle,
    table: &ClassEmbeddingTable,
    params: &AlignerParams,
) -> Result<Tensor<f64>> {
    let (h, w) = scene.feature_size();
    pixel_forward(scene, table, params)?
        .v_align
        .reshape(vec![h, w, params.width()])
}

/// Mask-aligned queries `[N_q, d]`, unit-norm per row.
pub fn mask_align(
    pixel_aligned: &Tensor<f64>,
    scene: &SceneBundle,
    params: &AlignerParams,
) -> Result<Tensor<f64>> {
    Ok(mask_forward(pixel_aligned, scene, params)?.q_align)
}

pub fn align(
    scene: &SceneBundle,
    table: &ClassEmbeddingTable,
    params: &AlignerParams,
) -> Result<AlignedFeatures> {
    let v_align = pixel_align(scene, table, params)?;
    let q_align = mask_align(&v_align, scene, params)?;
    Ok(AlignedFeatures { v_align, q_align })
}

struct Contrastive {
    loss: f64,
    d_rows: Tensor<f64>,
    d_table: Tensor<f64>,
    d_log_tau: f64,
}

/// Mean over labeled rows of `-log softmax(<row, t_k> / tau)_label`. Rows and
/// table rows are unit vectors, so the dot product is the cosine similarity.
fn contrastive(
    rows: &Tensor<f64>,
    table: &Tensor<f64>,
    labels: &[u16],
    tau: f64,
    what: &'static str,
) -> Result<Contrastive> {
    let rows = rows.as_matrix();
    if labels.len() != rows.rows() {
        return Err(Error::shape(what, rows.shape(), &[labels.len()]));
    }
    if rows.cols() != table.cols() {
        return Err(Error::shape(what, rows.shape(), table.shape()));
    }
    let c = table.rows();
    if let Some(&bad) = labels.iter().find(|&&l| l != IGNORE && l as usize >= c) {
        return Err(Error::Config(format!("{what}: label {bad} out of range for {c} classes")));
    }
    let n = labels.iter().filter(|&&l| l != IGNORE).count();
    if n == 0 {
        return Err(Error::Empty(what));
    }
    let mut loss = 0.0;
    let mut d_sims = Tensor::zeros(vec![rows.rows(), c]);
    let mut d_log_tau = 0.0;
    let mut logits = vec![0.0f64; c];
    for (i, &label) in labels.iter().enumerate() {
        if label == IGNORE {
            continue;
        }
        let r = rows.row(i);
        let sims: Vec<f64> = (0..c).map(|k| dot(r, table.row(k))).collect();
        for (l, s) in logits.iter_mut().zip(&sims) {
            *l = s / tau;
        }
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        loss += lse - logits[label as usize];
        let g = d_sims.row_mut(i);
        for k in 0..c {
            let mut dl = (logits[k] - lse).exp();
            if k == label as usize {
                dl -= 1.0;
            }
            dl /= n as f64;
            g[k] = dl / tau;
            d_log_tau -= dl * logits[k];
        }
    }
    Ok(Contrastive {
        loss: loss / n as f64,
        d_rows: matmul(&d_sims, table)?,
        d_table: matmul_tn(&d_sims, &rows)?,
        d_log_tau,
    })
}

/// Pixel-level contrastive loss over non-ignored locations.
pub fn loss_pixel(
    v_align: &Tensor<f64>,
    table: &ClassEmbeddingTable,
    gt_labels: &[u16],
    tau: f64,
) -> Result<f64> {
    contrastive(v_align, &table.embeddings, gt_labels, tau, "loss_pixel").map(|c| c.loss)
}

/// Mask-level contrastive loss over queries with a real class label.
pub fn loss_mask(
    q_align: &Tensor<f64>,
    table: &ClassEmbeddingTable,
    gt_query_labels: &[u16],
    tau: f64,
) -> Result<f64> {
    contrastive(q_align, &table.embeddings, gt_query_labels, tau, "loss_mask").map(|c| c.loss)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub pixel: f64,
    pub mask: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { pixel: 0.5, mask: 0.5 }
    }
}

impl LossWeights {
    /// Zeroes the weight of the stage an alignment mode does not train.
    pub fn for_mode(self, mode: AlignMode) -> Self {
        match mode {
            AlignMode::Pixel => Self { mask: 0.0, ..self },
            AlignMode::Mask => Self { pixel: 0.0, ..self },
            AlignMode::Both => self,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub pixel: f64,
    pub mask: f64,
    pub total: f64,
}

/// Gradients of the alignment loss, shaped like the trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub params: AlignerParams,
    pub context: Tensor<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &AlignerParams, prompts: &PromptSet) -> Self {
        Self {
            params: params.zeros_like(),
            context: Tensor::zeros(prompts.context.shape().to_vec()),
        }
    }

    pub fn tensors(&self) -> Vec<ParamRef<'_>> {
        let mut t = self.params.tensors();
        t.push(named("prompt.context", &self.context));
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<ParamMut<'_>> {
        let mut t = self.params.tensors_mut();
        t.push(named_mut("prompt.context", &mut self.context));
        t
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        let others = other.tensors();
        for (a, b) in self.tensors_mut().into_iter().zip(others) {
            a.tensor.add_assign(b.tensor);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in self.tensors_mut() {
            for v in t.tensor.data_mut() {
                *v *= s;
            }
        }
    }
}

/// Every trainable tensor: aligner parameters then the prompt context.
pub fn trainable_mut<'a>(params: &'a mut AlignerParams, prompts: &'a mut PromptSet) -> Vec<ParamMut<'a>> {
    let mut t = params.tensors_mut();
    t.push(named_mut("prompt.context", &mut prompts.context));
    t
}

struct Forward {
    encoded: EncodedClasses,
    pix: PixelCache,
    msk: MaskCache,
    lp: Contrastive,
    lm: Contrastive,
    loss: LossBreakdown,
}

fn forward(
    scene: &SceneBundle,
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    params: &AlignerParams,
    weights: LossWeights,
) -> Result<Forward> {
    if !(weights.pixel >= 0.0 && weights.mask >= 0.0) {
        return Err(Error::Config(format!(
            "loss weights must be non-negative, got {weights:?}"
        )));
    }
    let encoded = encode_class_embeddings_cached(prompts, provider)?;
    let table = &encoded.table;
    let tau = params.tau();
    let pix = pixel_forward(scene, table, params)?;
    let msk = mask_forward(&pix.v_align, scene, params)?;
    let lp = contrastive(&pix.v_align, &table.embeddings, &scene.gt_labels, tau, "loss_pixel")?;
    let lm = contrastive(&msk.q_align, &table.embeddings, &scene.gt_query_labels, tau, "loss_mask")?;
    let loss = LossBreakdown {
        pixel: lp.loss,
        mask: lm.loss,
        total: weights.pixel * lp.loss + weights.mask * lm.loss,
    };
    Ok(Forward {
        encoded,
        pix,
        msk,
        lp,
        lm,
        loss,
    })
}

/// Weighted alignment loss and its gradient with respect to all aligner
/// parameters and the prompt context. The frozen segmentation loss is a
/// constant here and is not included.
pub fn loss_align(
    scene: &SceneBundle,
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    params: &AlignerParams,
    weights: LossWeights,
) -> Result<(LossBreakdown, Gradients)> {
    let Forward {
        encoded,
        pix,
        msk,
        lp,
        lm,
        loss,
    } = forward(scene, prompts, provider, params, weights)?;
    let mut grads = Gradients::zeros_like(params, prompts);
    grads.params.log_tau.data_mut()[0] = weights.pixel * lp.d_log_tau + weights.mask * lm.d_log_tau;
    let mut d_table = lp.d_table.scale(weights.pixel);
    d_table.add_assign(&lm.d_table.scale(weights.mask));

    // Mask stage.
    let dq = lm.d_rows.scale(weights.mask);
    let d_out = l2_normalize_rows_backward(&msk.q_align, &msk.norms, &dq);
    let (d_proj_q, d_kv, block_g) = block_backward(&params.mask, &msk.block, &d_out)?;
    grads.params.mask = block_g;
    grads.params.mask_query_proj = matmul_tn(&msk.queries, &d_proj_q)?;
    let mut dv = lp.d_rows.scale(weights.pixel);
    dv.add_assign(&d_kv.expect("cross-attention returns a key/value gradient"));

    // Pixel stage.
    let d_tokens = l2_normalize_rows_backward(&pix.v_align, &pix.norms, &dv);
    let d_projected = match &pix.block {
        None => d_tokens,
        Some(cache) => {
            let p = pix.projected.rows();
            let pad = Tensor::zeros(vec![encoded.table.num_classes(), params.width()]);
            let d_seq = d_tokens.concat_rows(&pad)?;
            let (dx, _, block_g) = block_backward(&params.pixel, cache, &d_seq)?;
            grads.params.pixel = block_g;
            d_table.add_assign(&dx.slice_rows(p, dx.rows()));
            dx.slice_rows(0, p)
        }
    };
    grads.params.pixel_proj = matmul_tn(&pix.features, &d_projected)?;
    grads.context = class_embeddings_backward(prompts, provider, &encoded, &d_table)?;
    Ok((loss, grads))
}

/// Loss only, without gradients.
pub fn loss_value(
    scene: &SceneBundle,
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    params: &AlignerParams,
    weights: LossWeights,
) -> Result<LossBreakdown> {
    forward(scene, prompts, provider, params, weights).map(|f| f.loss)
}

/// Loss plus the on/off pattern of every FFN ReLU unit. Finite-difference
/// checks use the pattern to spot perturbations that cross a kink.
pub fn loss_with_relu_pattern(
    scene: &SceneBundle,
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    params: &AlignerParams,
    weights: LossWeights,
) -> Result<(LossBreakdown, Vec<bool>)> {
    let f = forward(scene, prompts, provider, params, weights)?;
    let mut pattern: Vec<bool> = Vec::new();
    for cache in f.pix.block.iter().chain(std::iter::once(&f.msk.block)) {
        pattern.extend(cache.pre.data().iter().map(|&x| x > 0.0));
    }
    Ok((f.loss, pattern))
}
