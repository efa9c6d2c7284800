//! Multi-source anomaly scoring: per-class detector confidence, text-guided
//! similarity and image-text similarity, fused into one anomaly map where
//! higher means more anomalous.

use std::fmt;
use std::str::FromStr;

use crate::aligner::{align, AlignMode, AlignerParams};
use crate::embedding::{ClassEmbeddingTable, EncoderProvider};
use crate::error::{Error, Result};
use crate::scene::SceneBundle;
use crate::tensor::{dot, sigmoid_scalar, Tensor};

/// Fusion weights for detector confidence, text and image similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for FusionWeights {
    fn default() -> Self {
        Self {
            alpha: 0.7,
            beta: 0.2,
            gamma: 0.1,
        }
    }
}

impl FusionWeights {
    pub fn sum(&self) -> f64 {
        self.alpha + self.beta + self.gamma
    }

    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|w| *w >= 0.0 && w.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("fusion weights must be non-negative, got {self:?}")))
        }
    }
}

/// Which score sources enter the fusion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Sources {
    pub conf: bool,
    pub text: bool,
    pub img: bool,
}

impl Sources {
    pub const ALL: Sources = Sources {
        conf: true,
        text: true,
        img: true,
    };

    pub fn is_empty(&self) -> bool {
        !(self.conf || self.text || self.img)
    }
}

impl Default for Sources {
    fn default() -> Self {
        Self::ALL
    }
}

impl fmt::Display for Sources {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = [(self.conf, "conf"), (self.text, "text"), (self.img, "img")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        f.write_str(&names.join(","))
    }
}

impl FromStr for Sources {
    type Err = Error;
    /// Comma-separated subset of `conf`, `text`, `img`.
    fn from_str(s: &str) -> Result<Self> {
        let mut out = Sources {
            conf: false,
            text: false,
            img: false,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "conf" => out.conf = true,
                "text" => out.text = true,
                "img" => out.img = true,
                _ => {
                    return Err(Error::Config(format!(
                        "unknown score source `{part}` (expected conf, text, img)"
                    )))
                }
            }
        }
        if out.is_empty() {
            return Err(Error::Config("at least one score source must be enabled".into()));
        }
        Ok(out)
    }
}

/// Per-class detector confidence `[C, H, W]`: for each class, the sum over
/// queries of the class probability times the mask probability, clamped
/// at 1.
pub fn detector_confidence(scene: &SceneBundle) -> Result<Tensor<f64>> {
    let nq = scene.num_queries();
    if nq == 0 {
        return Err(Error::Empty("detector_confidence"));
    }
    let c = scene.num_classes();
    let (hh, ww) = scene.output_size();
    let n = hh * ww;
    let mut out: Tensor<f64> = Tensor::zeros(vec![c, hh, ww]);
    let probs = crate::tensor::softmax_rows(&scene.class_logits.cast::<f64>());
    let masks = scene.mask_logits.data();
    let data = out.data_mut();
    for q in 0..nq {
        let mask: Vec<f64> = masks[q * n..(q + 1) * n].iter().map(|&m| sigmoid_scalar(m as f64)).collect();
        for (k, &p) in probs.row(q).iter().enumerate() {
            for (o, &m) in data[k * n..(k + 1) * n].iter_mut().zip(&mask) {
                *o += p * m;
            }
        }
    }
    Ok(out.map(|v| v.min(1.0)))
}

/// Bilinear resize of `[C, h, w]` maps to `[C, H, W]` with half-pixel
/// centres (align-corners off). Equal sizes copy the input exactly.
pub fn upsample_bilinear(maps: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    if maps.rank() != 3 || out_h == 0 || out_w == 0 {
        return Err(Error::shape("upsample_bilinear", maps.shape(), &[out_h, out_w]));
    }
    let (c, h, w) = (maps.shape()[0], maps.shape()[1], maps.shape()[2]);
    if (h, w) == (out_h, out_w) {
        return Ok(maps.clone());
    }
    let axis = |dst: usize, src_len: usize, dst_len: usize| -> (usize, usize, f64) {
        let s = ((dst as f64 + 0.5) * src_len as f64 / dst_len as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(src_len - 1);
        let i1 = (i0 + 1).min(src_len - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..out_h).map(|y| axis(y, h, out_h)).collect();
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, w, out_w)).collect();
    let src = maps.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for k in 0..c {
        let m = &src[k * h * w..(k + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = m[y0 * w + x0] * (1.0 - fx) + m[y0 * w + x1] * fx;
                let bot = m[y1 * w + x0] * (1.0 - fx) + m[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}

/// Per-row class scores: softmax of cosine / tau, or the raw cosine.
fn class_scores(rows: &Tensor<f64>, table: &ClassEmbeddingTable, tau: f64, raw: bool) -> Result<Tensor<f64>> {
    if rows.last_dim() != table.width() {
        return Err(Error::shape("class similarity", rows.shape(), table.embeddings.shape()));
    }
    if !table.normalized {
        return Err(Error::Config("class embedding table must be L2-normalized".into()));
    }
    let c = table.num_classes();
    let n = rows.outer();
    let mut sims = Tensor::zeros(vec![n, c]);
    for i in 0..n {
        let r = rows.row(i);
        let norm = dot(r, r).sqrt();
        if norm == 0.0 {
            return Err(Error::ZeroNorm("class similarity"));
        }
        for (k, s) in sims.row_mut(i).iter_mut().enumerate() {
            *s = dot(r, table.row(k)) / norm;
        }
    }
    Ok(if raw {
        sims
    } else {
        crate::tensor::softmax_rows(&sims.scale(1.0 / tau))
    })
}

/// Transposes `[n, C]` rows into `[C, h, w]` maps.
fn to_class_maps(scores: &Tensor<f64>, h: usize, w: usize) -> Tensor<f64> {
    let c = scores.cols();
    Tensor::from_fn(vec![c, h, w], |i| scores.row(i % (h * w))[i / (h * w)])
}

/// Text-guided similarity `[C, H, W]` from pixel-aligned features
/// `[h, w, d]`, upsampled bilinearly to the output size.
pub fn text_similarity(
    v_align: &Tensor<f64>,
    table: &ClassEmbeddingTable,
    tau: f64,
    out_size: (usize, usize),
    raw: bool,
) -> Result<Tensor<f64>> {
    if v_align.rank() != 3 {
        return Err(Error::shape("text_similarity", v_align.shape(), &[0, 0, table.width()]));
    }
    let (h, w) = (v_align.shape()[0], v_align.shape()[1]);
    let scores = class_scores(&v_align.as_matrix(), table, tau, raw)?;
    let maps = upsample_bilinear(&to_class_maps(&scores, h, w), out_size.0, out_size.1)?;
    if maps.shape()[1..] != [out_size.0, out_size.1] {
        return Err(Error::shape("text_similarity", maps.shape(), &[out_size.0, out_size.1]));
    }
    Ok(maps)
}

/// Text-guided similarity painted from mask-aligned queries, used when only
/// mask-level alignment is trained: each query's class scores spread over
/// its soft mask, summed over queries and clamped to the score range.
pub fn text_similarity_from_queries(
    q_align: &Tensor<f64>,
    scene: &SceneBundle,
    table: &ClassEmbeddingTable,
    tau: f64,
    raw: bool,
) -> Result<Tensor<f64>> {
    let nq = scene.num_queries();
    if q_align.rows() != nq {
        return Err(Error::shape("text_similarity_from_queries", q_align.shape(), &[nq]));
    }
    let scores = class_scores(q_align, table, tau, raw)?;
    let (hh, ww) = scene.output_size();
    let n = hh * ww;
    let c = table.num_classes();
    let mut out: Tensor<f64> = Tensor::zeros(vec![c, hh, ww]);
    let masks = scene.mask_logits.data();
    let data = out.data_mut();
    for q in 0..nq {
        let mask: Vec<f64> = masks[q * n..(q + 1) * n].iter().map(|&m| sigmoid_scalar(m as f64)).collect();
        for (k, &s) in scores.row(q).iter().enumerate() {
            for (o, &m) in data[k * n..(k + 1) * n].iter_mut().zip(&mask) {
                *o += s * m;
            }
        }
    }
    let lo = if raw { -1.0 } else { 0.0 };
    Ok(out.map(|v| v.clamp(lo, 1.0)))
}

/// Image-text similarity `[C]`: the global image embedding against each
/// class embedding, softmax-normalized with `tau` unless `raw`.
pub fn image_similarity(
    scene: &SceneBundle,
    table: &ClassEmbeddingTable,
    provider: &dyn EncoderProvider,
    tau: f64,
    raw: bool,
) -> Result<Tensor<f64>> {
    let e = provider.encode_image(scene)?;
    let row = e.reshape(vec![1, table.width()])?;
    class_scores(&row, table, tau, raw)?.reshape(vec![table.num_classes()])
}

/// Fusion restricted to the given sources. `None` disables a source; with
/// `renormalize` the surviving weights are rescaled to the full weight sum.
/// `S_final(p) = 1 - max_k sum_src w_src * S_src^(k)(p)`.
pub fn ablate(
    conf: Option<&Tensor<f64>>,
    text: Option<&Tensor<f64>>,
    img: Option<&Tensor<f64>>,
    weights: FusionWeights,
    renormalize: bool,
) -> Result<Tensor<f64>> {
    weights.validate()?;
    let maps: Vec<(&Tensor<f64>, f64)> = [(conf, weights.alpha), (text, weights.beta)]
        .into_iter()
        .filter_map(|(m, w)| m.map(|m| (m, w)))
        .collect();
    if maps.is_empty() && img.is_none() {
        return Err(Error::Config("ablation needs at least one score source".into()));
    }
    let mut enabled = maps.iter().map(|(_, w)| *w).sum::<f64>();
    if img.is_some() {
        enabled += weights.gamma;
    }
    let scale = if renormalize && enabled > 0.0 { weights.sum() / enabled } else { 1.0 };

    let (c, hh, ww) = match maps.first() {
        Some((m, _)) if m.rank() == 3 => (m.shape()[0], m.shape()[1], m.shape()[2]),
        Some((m, _)) => return Err(Error::shape("fuse", m.shape(), &[0, 0, 0])),
        None => {
            return Err(Error::Config(
                "image similarity alone has no spatial extent; enable conf or text".into(),
            ))
        }
    };
    for (m, _) in &maps {
        if m.shape() != [c, hh, ww] {
            return Err(Error::shape("fuse: class maps", m.shape(), &[c, hh, ww]));
        }
    }
    if let Some(g) = img {
        if g.shape() != [c] {
            return Err(Error::shape("fuse: image similarity", g.shape(), &[c]));
        }
    }
    let n = hh * ww;
    let mut best = vec![f64::NEG_INFINITY; n];
    for k in 0..c {
        let base = img.map_or(0.0, |g| scale * weights.gamma * g.data()[k]);
        for (p, b) in best.iter_mut().enumerate() {
            let mut s = base;
            for (m, w) in &maps {
                s += scale * w * m.data()[k * n + p];
            }
            if s > *b {
                *b = s;
            }
        }
    }
    Tensor::new(vec![hh, ww], best.into_iter().map(|b| 1.0 - b).collect())
}

/// Full three-source fusion.
pub fn fuse(
    conf: &Tensor<f64>,
    text: &Tensor<f64>,
    img: &Tensor<f64>,
    weights: FusionWeights,
) -> Result<Tensor<f64>> {
    ablate(Some(conf), Some(text), Some(img), weights, false)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOptions {
    pub weights: FusionWeights,
    pub sources: Sources,
    pub renormalize: bool,
    /// Use raw cosine similarities instead of temperature softmax.
    pub raw_sim: bool,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            weights: FusionWeights::default(),
            sources: Sources::ALL,
            renormalize: false,
            raw_sim: false,
        }
    }
}

/// Score maps of one scene. Disabled sources are `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreStack {
    /// `[C, H, W]`
    pub s_conf: Option<Tensor<f64>>,
    /// `[C, H, W]`
    pub s_text: Option<Tensor<f64>>,
    /// `[C]`
    pub s_img: Option<Tensor<f64>>,
    /// `[H, W]`
    pub s_final: Tensor<f64>,
    pub weights: FusionWeights,
}

/// Scores one scene with trained aligner parameters and class table. The
/// text source follows the aligner's mode: pixel-aligned features for
/// pixel and joint alignment, aligned queries for mask-only alignment.
pub fn score_scene(
    scene: &SceneBundle,
    table: &ClassEmbeddingTable,
    params: &AlignerParams,
    provider: &dyn EncoderProvider,
    opts: &InferenceOptions,
) -> Result<ScoreStack> {
    if opts.sources.is_empty() {
        return Err(Error::Config("at least one score source must be enabled".into()));
    }
    if scene.num_classes() != table.num_classes() {
        return Err(Error::shape(
            "scene classes vs class embeddings",
            scene.class_logits.shape(),
            table.embeddings.shape(),
        ));
    }
    let tau = params.tau();
    let s_conf = opts.sources.conf.then(|| detector_confidence(scene)).transpose()?;
    let s_text = if opts.sources.text {
        let f = align(scene, table, params)?;
        Some(match params.config.mode {
            AlignMode::Mask => text_similarity_from_queries(&f.q_align, scene, table, tau, opts.raw_sim)?,
            AlignMode::Pixel | AlignMode::Both => {
                text_similarity(&f.v_align, table, tau, scene.output_size(), opts.raw_sim)?
            }
        })
    } else {
        None
    };
    let s_img = opts
        .sources
        .img
        .then(|| image_similarity(scene, table, provider, tau, opts.raw_sim))
        .transpose()?;
    let s_final = ablate(
        s_conf.as_ref(),
        s_text.as_ref(),
        s_img.as_ref(),
        opts.weights,
        opts.renormalize,
    )?;
    Ok(ScoreStack {
        s_conf,
        s_text,
        s_img,
        s_final,
        weights: opts.weights,
    })
}
