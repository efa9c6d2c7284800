//! Optimization of the prompt context and aligner parameters: AdamW with
//! decoupled weight decay, seeded mini-batch training, checkpoints, the loss
//! trace, and a finite-difference gradient checker.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;

use crate::aligner::{
    loss_align, loss_with_relu_pattern, trainable_mut, AlignMode, AlignerConfig, AlignerParams,
    Gradients, LossBreakdown, LossWeights, ParamMut, ParamRef,
};
use crate::embedding::{build_prompts, keyed_rng, EncoderProvider, PromptSet};
use crate::error::{Error, Result};
use crate::io::{kv, read_text, vlt, write_file};
use crate::scene::SceneBundle;
use crate::synth::{generate, SynthConfig, SynthWorld};
use crate::tensor::Tensor;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every trainable tensor, in trainable order.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub hyper: AdamW,
    pub step: u64,
    pub m: Vec<Tensor<f64>>,
    pub v: Vec<Tensor<f64>>,
}

impl OptimizerState {
    pub fn new<'a>(hyper: AdamW, params: impl IntoIterator<Item = &'a Tensor<f64>>) -> Self {
        let m: Vec<Tensor<f64>> = params
            .into_iter()
            .map(|p| Tensor::zeros(p.shape().to_vec()))
            .collect();
        Self {
            hyper,
            step: 0,
            v: m.clone(),
            m,
        }
    }
}

/// One bias-corrected AdamW update:
/// `theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta`, the decay
/// term applying only to tensors flagged for decay.
pub fn adamw_step(params: Vec<ParamMut<'_>>, grads: &[ParamRef<'_>], state: &mut OptimizerState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Config(format!(
            "optimizer expects {} tensors, got {} parameters and {} gradients",
            state.m.len(),
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.tensor.shape() != g.tensor.shape() {
            return Err(Error::shape("adamw_step", p.tensor.shape(), g.tensor.shape()));
        }
        if !g.tensor.is_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", g.name)));
        }
    }
    let AdamW {
        lr,
        weight_decay,
        beta1,
        beta2,
        eps,
    } = state.hyper;
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - beta1.powi(t), 1.0 - beta2.powi(t));
    for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
        let wd = if p.decay { weight_decay } else { 0.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        for (j, (theta, &gj)) in p.tensor.data_mut().iter_mut().zip(g.tensor.data()).enumerate() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
            v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
            let (mh, vh) = (m[j] / c1, v[j] / c2);
            *theta -= lr * mh / (vh.sqrt() + eps) + lr * wd * *theta;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        Self {
            iterations: 500,
            batch_size: 4,
            lr: 1e-2,
            weight_decay: 0.05,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// The large-scale recipe: 5000 iterations of batch 8 at lr 1e-4.
    pub fn full_scale() -> Self {
        Self {
            iterations: 5000,
            batch_size: 8,
            lr: 1e-4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if !(self.weights.pixel >= 0.0 && self.weights.mask >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Trainable state: aligner parameters and the prompt set.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: AlignerParams,
    pub prompts: PromptSet,
}

const MANIFEST: &str = "checkpoint.txt";

impl Checkpoint {
    fn tensors(&self) -> Vec<(String, &Tensor<f64>)> {
        let mut t: Vec<(String, &Tensor<f64>)> =
            self.params.tensors().into_iter().map(|p| (p.name, p.tensor)).collect();
        t.push(("prompt.context".into(), &self.prompts.context));
        t.push(("prompt.class_tokens".into(), &self.prompts.class_tokens));
        t
    }

    /// Writes one VLT file per tensor plus a `key = value` manifest. Values
    /// are stored as `f32`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let c = &self.params.config;
        let mut entries = vec![
            ("feature_dim".to_string(), c.feature_dim.to_string()),
            ("query_dim".into(), c.query_dim.to_string()),
            ("width".into(), c.width.to_string()),
            ("heads".into(), c.heads.to_string()),
            ("ffn_hidden".into(), c.ffn_hidden.to_string()),
            ("tau_init".into(), c.tau_init.to_string()),
            ("mode".into(), c.mode.to_string()),
            ("class_names".into(), self.prompts.class_names.join(",")),
        ];
        for (name, t) in self.tensors() {
            let file = format!("{name}.vlt");
            vlt::write(dir.join(&file), &t.cast::<f32>())?;
            entries.push((format!("tensor.{name}"), file));
        }
        write_file(
            &dir.join(MANIFEST),
            kv::render(entries.iter().map(|(k, v)| (k.as_str(), v.clone()))).as_bytes(),
        )
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(MANIFEST);
        let entries = kv::parse(&read_text(&path)?, &path)?;
        let get = |k: &str| -> Result<&str> {
            entries
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::format(&path, format!("missing key `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::format(&path, format!("`{k}` is not an integer")))
        };
        let config = AlignerConfig {
            feature_dim: num("feature_dim")?,
            query_dim: num("query_dim")?,
            width: num("width")?,
            heads: num("heads")?,
            ffn_hidden: num("ffn_hidden")?,
            tau_init: get("tau_init")?
                .parse()
                .map_err(|_| Error::format(&path, "`tau_init` is not a number"))?,
            mode: get("mode")?.parse()?,
        };
        let class_names: Vec<String> = get("class_names")?.split(',').map(str::to_string).collect();
        let read = |name: &str| -> Result<Tensor<f64>> {
            Ok(vlt::read(dir.join(get(&format!("tensor.{name}"))?))?.cast::<f64>())
        };
        let mut params = AlignerParams::init(config, 0)?;
        for p in params.tensors_mut() {
            let t = read(&p.name)?;
            if t.shape() != p.tensor.shape() {
                return Err(Error::format(
                    &path,
                    format!("tensor `{}` has shape {:?}, expected {:?}", p.name, t.shape(), p.tensor.shape()),
                ));
            }
            *p.tensor = t;
        }
        let prompts = PromptSet {
            context: read("prompt.context")?,
            class_tokens: read("prompt.class_tokens")?,
            class_names,
        };
        prompts.validate()?;
        if prompts.width() != params.width() {
            return Err(Error::format(&path, "prompt width differs from aligner width"));
        }
        Ok(Self { params, prompts })
    }
}

/// One line of the loss trace: losses of the batch seen at `iter`, before
/// that iteration's update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    pub iter: usize,
    pub pixel: f64,
    pub mask: f64,
    pub total: f64,
    pub tau: f64,
}

pub const TRACE_HEADER: &str = "iter,L_pixel,L_mask,total,tau";

impl TraceRow {
    /// `iter,L_pixel,L_mask,total,tau`, nine significant digits.
    pub fn to_line(&self) -> String {
        format!(
            "{},{:.8e},{:.8e},{:.8e},{:.8e}",
            self.iter, self.pixel, self.mask, self.total, self.tau
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Config(format!("malformed trace line `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        Ok(Self {
            iter: f[0].parse().map_err(|_| bad())?,
            pixel: num(f[1])?,
            mask: num(f[2])?,
            total: num(f[3])?,
            tau: num(f[4])?,
        })
    }
}

pub fn render_trace(rows: &[TraceRow]) -> String {
    let mut s = String::from(TRACE_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{}", r.to_line());
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainStatus {
    Completed,
    /// A non-finite loss or gradient appeared at this iteration; the
    /// returned checkpoint is the last finite state.
    Diverged { iteration: usize },
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: Vec<TraceRow>,
    pub status: TrainStatus,
}

/// Seeded shuffle-and-draw batches over `n` scenes.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: rand_chacha::ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            rng: keyed_rng("trainer-batches", seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        for i in (1..self.order.len()).rev() {
            self.order.swap(i, self.rng.random_range(0..=i));
        }
        self.pos = 0;
    }

    fn next(&mut self, size: usize) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.pos == self.order.len() {
                    self.reshuffle();
                }
                self.pos += 1;
                self.order[self.pos - 1]
            })
            .collect()
    }
}

/// Trains from `init` on `dataset`. Per-scene gradients run in parallel
/// and are summed in batch order, so results do not depend on the thread
/// count.
pub fn train(
    dataset: &[SceneBundle],
    provider: &dyn EncoderProvider,
    init: Checkpoint,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Empty("training dataset"));
    }
    let weights = config.weights.for_mode(init.params.config.mode);
    let mut ckpt = init;
    let mut state = OptimizerState::new(
        AdamW::new(config.lr, config.weight_decay),
        Gradients::zeros_like(&ckpt.params, &ckpt.prompts)
            .tensors()
            .into_iter()
            .map(|p| p.tensor)
            .collect::<Vec<_>>(),
    );
    let mut batches = Batcher::new(dataset.len(), config.seed);
    let mut trace = Vec::with_capacity(config.iterations);
    for iter in 0..config.iterations {
        let idx = batches.next(config.batch_size);
        let per_scene: Vec<(LossBreakdown, Gradients)> = idx
            .par_iter()
            .map(|&i| loss_align(&dataset[i], &ckpt.prompts, provider, &ckpt.params, weights))
            .collect::<Result<_>>()?;
        let n = per_scene.len() as f64;
        let mut grads = Gradients::zeros_like(&ckpt.params, &ckpt.prompts);
        let (mut pixel, mut mask) = (0.0, 0.0);
        for (loss, g) in &per_scene {
            pixel += loss.pixel;
            mask += loss.mask;
            grads.add_assign(g);
        }
        grads.scale(1.0 / n);
        let (pixel, mask) = (pixel / n, mask / n);
        let row = TraceRow {
            iter,
            pixel,
            mask,
            total: weights.pixel * pixel + weights.mask * mask,
            tau: ckpt.params.tau(),
        };
        let finite = row.total.is_finite() && grads.tensors().iter().all(|g| g.tensor.is_finite());
        if !finite {
            return Ok(TrainOutcome {
                checkpoint: ckpt,
                trace,
                status: TrainStatus::Diverged { iteration: iter },
            });
        }
        trace.push(row);
        let mut next = ckpt.clone();
        adamw_step(
            trainable_mut(&mut next.params, &mut next.prompts),
            &grads.tensors(),
            &mut state,
        )?;
        let params_finite = next.params.tensors().iter().all(|p| p.tensor.is_finite())
            && next.prompts.context.is_finite();
        if !params_finite {
            return Ok(TrainOutcome {
                checkpoint: ckpt,
                trace,
                status: TrainStatus::Diverged { iteration: iter },
            });
        }
        ckpt = next;
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        trace,
        status: TrainStatus::Completed,
    })
}

/// Finite-difference check settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-3,
            rel_tol: 1e-4,
            abs_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU unit; central
    /// differences straddle the kink there and are not comparable.
    pub skipped: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub violations: Vec<Violation>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for t in &self.tensors {
            let _ = writeln!(
                s,
                "{:<24} checked {:>5}  skipped {:>3}  max abs {:.2e}  max rel {:.2e}",
                t.name, t.checked, t.skipped, t.max_abs_err, t.max_rel_err
            );
        }
        let _ = writeln!(s, "violations: {}", self.violations.len());
        s
    }
}

/// Compares analytic gradients of the alignment loss with central finite
/// differences for every trainable scalar.
pub fn grad_check(
    scene: &SceneBundle,
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    params: &AlignerParams,
    weights: LossWeights,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = loss_align(scene, prompts, provider, params, weights)?;
    check_gradients(scene, prompts, provider, params, weights, &analytic, opts)
}

/// Like [`grad_check`] but against caller-supplied gradients.
pub fn check_gradients(
    scene: &SceneBundle,
    prompts: &PromptSet,
    provider: &dyn EncoderProvider,
    params: &AlignerParams,
    weights: LossWeights,
    analytic: &Gradients,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, base_pattern) = loss_with_relu_pattern(scene, prompts, provider, params, weights)?;
    let shapes: Vec<(String, usize)> = analytic
        .tensors()
        .iter()
        .map(|t| (t.name.clone(), t.tensor.len()))
        .collect();
    let eval = |slot: usize, index: usize, delta: f64| -> Result<(f64, bool)> {
        let mut p = params.clone();
        let mut pr = prompts.clone();
        {
            let mut all = trainable_mut(&mut p, &mut pr);
            all[slot].tensor.data_mut()[index] += delta;
        }
        let (loss, pattern) = loss_with_relu_pattern(scene, &pr, provider, &p, weights)?;
        Ok((loss.total, pattern == base_pattern))
    };
    let grads = analytic.tensors();
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut violations = Vec::new();
    for (slot, (name, len)) in shapes.into_iter().enumerate() {
        let results: Vec<Option<(f64, f64)>> = (0..len)
            .into_par_iter()
            .map(|i| -> Result<Option<(f64, f64)>> {
                let (fp, same_p) = eval(slot, i, opts.step)?;
                let (fm, same_m) = eval(slot, i, -opts.step)?;
                Ok((same_p && same_m).then_some((fp - fm) / (2.0 * opts.step)))
                    .map(|n| n.map(|n| (grads[slot].tensor.data()[i], n)))
            })
            .collect::<Result<_>>()?;
        let mut check = TensorCheck {
            name: name.clone(),
            checked: 0,
            skipped: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
        };
        for (i, r) in results.into_iter().enumerate() {
            let Some((a, n)) = r else {
                check.skipped += 1;
                continue;
            };
            check.checked += 1;
            let abs = (a - n).abs();
            let rel = abs / a.abs().max(n.abs()).max(f64::MIN_POSITIVE);
            check.max_abs_err = check.max_abs_err.max(abs);
            if abs > opts.abs_tol {
                check.max_rel_err = check.max_rel_err.max(rel);
            }
            if abs > opts.abs_tol && rel > opts.rel_tol {
                violations.push(Violation {
                    name: name.clone(),
                    index: i,
                    analytic: a,
                    numeric: n,
                });
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tensors, violations })
}

/// A seeded toy problem for gradient checks: one 4x4 scene with 3 classes,
/// 3 queries, width 8, 2 heads, 4 context tokens, and randomized
/// parameters (norm affines and biases included).
#[derive(Debug, Clone)]
pub struct ToyProblem {
    pub scene: SceneBundle,
    pub prompts: PromptSet,
    pub provider: crate::embedding::SyntheticEncoder,
    pub params: AlignerParams,
}

pub fn toy_problem(seed: u64, mode: AlignMode) -> Result<ToyProblem> {
    let world = SynthWorld::new(SynthConfig::toy(seed))?;
    let scene = generate(&world, 1)?.scenes.remove(0);
    let provider = world.encoder();
    let cfg = &world.config;
    let mut prompts = build_prompts(&world.class_names(), 4, cfg.embed_dim, seed, &provider)?;
    let mut rng = keyed_rng("toy-perturb", seed);
    for v in prompts.context.data_mut() {
        *v = rng.random_range(-0.3..0.3);
    }
    let mut config = AlignerConfig::new(cfg.feature_dim, cfg.query_dim, cfg.embed_dim, 2);
    config.tau_init = 0.5;
    config.mode = mode;
    let mut params = AlignerParams::init(config, seed)?;
    for p in params.tensors_mut() {
        if p.name.contains("norm") || p.name.contains(".b") {
            let base = if p.name.ends_with("gain") { 1.0 } else { 0.0 };
            for v in p.tensor.data_mut() {
                *v = base + rng.random_range(-0.2..0.2);
            }
        }
    }
    Ok(ToyProblem {
        scene,
        prompts,
        provider,
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::vector(vec![v])
    }

    fn step_once(theta: f64, g: f64, lr: f64, wd: f64, decay: bool) -> f64 {
        let mut p = scalar(theta);
        let grad = scalar(g);
        let mut state = OptimizerState::new(AdamW::new(lr, wd), [&p]);
        adamw_step(
            vec![ParamMut {
                name: "x".into(),
                tensor: &mut p,
                decay,
            }],
            &[ParamRef {
                name: "x".into(),
                tensor: &grad,
                decay,
            }],
            &mut state,
        )
        .unwrap();
        assert_eq!(state.step, 1);
        p.data()[0]
    }

    #[test]
    fn first_adam_step() {
        let theta = step_once(0.0, 1.0, 0.1, 0.0, true);
        assert!((theta + 0.1).abs() < 1e-6, "{theta}");
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        assert_eq!(step_once(0.7, 0.0, 0.1, 0.0, true), 0.7);
        assert_eq!(step_once(0.7, 0.0, 0.1, 0.05, false), 0.7);
    }

    #[test]
    fn decoupled_decay() {
        assert!((step_once(1.0, 0.0, 0.1, 0.05, true) - 0.995).abs() < 1e-12);
    }

    #[test]
    fn non_finite_gradient_names_tensor() {
        let mut p = scalar(0.0);
        let g = scalar(f64::NAN);
        let mut state = OptimizerState::new(AdamW::new(0.1, 0.0), [&p]);
        let err = adamw_step(
            vec![ParamMut {
                name: "pixel_proj".into(),
                tensor: &mut p,
                decay: true,
            }],
            &[ParamRef {
                name: "pixel_proj".into(),
                tensor: &g,
                decay: true,
            }],
            &mut state,
        )
        .unwrap_err();
        assert!(err.to_string().contains("pixel_proj"));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = scalar(1.0);
        let mut state = OptimizerState::new(AdamW::new(0.05, 0.0), [&p]);
        for _ in 0..2000 {
            let g = p.clone();
            adamw_step(
                vec![ParamMut {
                    name: "x".into(),
                    tensor: &mut p,
                    decay: true,
                }],
                &[ParamRef {
                    name: "x".into(),
                    tensor: &g,
                    decay: true,
                }],
                &mut state,
            )
            .unwrap();
        }
        assert!(p.data()[0].abs() < 1e-3, "{}", p.data()[0]);
        assert_eq!(state.step, 2000);
    }

    #[test]
    fn trace_line_round_trip() {
        let r = TraceRow {
            iter: 3,
            pixel: 1.0 / 3.0,
            mask: 0.25,
            total: 0.291666666,
            tau: 0.07,
        };
        let line = r.to_line();
        assert_eq!(line, "3,3.33333333e-1,2.50000000e-1,2.91666666e-1,7.00000000e-2");
        let back = TraceRow::parse(&line).unwrap();
        assert_eq!(back.iter, 3);
        assert!((back.pixel - r.pixel).abs() < 1e-9);
    }

    #[test]
    fn toy_gradients_match_finite_differences() {
        for mode in [AlignMode::Both, AlignMode::Pixel, AlignMode::Mask] {
            let t = toy_problem(11, mode).unwrap();
            let w = LossWeights::default().for_mode(mode);
            let report =
                grad_check(&t.scene, &t.prompts, &t.provider, &t.params, w, GradCheckOptions::default()).unwrap();
            assert!(report.passed(), "{mode}:\n{}\n{:?}", report.summary(), &report.violations[..report.violations.len().min(5)]);
            assert!(report.checked() > 1000);
        }
    }

    #[test]
    fn corrupted_gradient_is_reported() {
        let t = toy_problem(5, AlignMode::Both).unwrap();
        let w = LossWeights::default();
        let (_, mut g) = loss_align(&t.scene, &t.prompts, &t.provider, &t.params, w).unwrap();
        g.params.pixel_proj.data_mut()[3] += 1.0;
        let report =
            check_gradients(&t.scene, &t.prompts, &t.provider, &t.params, w, &g, GradCheckOptions::default())
                .unwrap();
        assert_eq!(report.violations.len(), 1);
        assert_eq!(report.violations[0].name, "pixel_proj");
        assert_eq!(report.violations[0].index, 3);
    }
}
