//! The `vla` commands: generate scenes, train, score and evaluate. Each
//! command reads its inputs from directories written by the previous one
//! and writes the fully resolved configuration next to its outputs.
//!
//! Directory layouts:
//!
//! ```text
//! scenes/   config.resolved.txt  train.txt  eval.txt  blobs.csv  <id>/*.vlt
//! model/    config.resolved.txt  checkpoint.txt  *.vlt  trace.csv  train.json
//! maps/     config.resolved.txt  manifest.txt  <id>.final.{vlt,pgm}
//!           [<id>.conf.vlt <id>.text.vlt <id>.img.vlt with all sources]
//! report/   config.resolved.txt  report.json  report.txt
//! ```
//!
//! The synthetic world (prototypes and text encoder) is always rebuilt from
//! the scene directory's `synth.*` entries, so later commands cannot drift
//! from the data they read.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::Serialize;

use crate::aligner::AlignMode;
use crate::config::{RunConfig, RESOLVED_CONFIG};
use crate::error::{Error, Result};
use crate::inference::{ScoreStack, Sources};
use crate::io::{pgm, vlt, write_file};
use crate::metrics::{ComponentMetrics, PixelMetrics, SceneReport};
use crate::pipeline::{evaluate, Experiment};
use crate::scene::SceneBundle;
use crate::synth::generate;
use crate::tensor::Tensor;
use crate::trainer::{grad_check, render_trace, toy_problem, Checkpoint, GradCheckOptions, TrainStatus};

pub const TRAIN_LIST: &str = "train.txt";
pub const EVAL_LIST: &str = "eval.txt";
pub const BLOB_LOG: &str = "blobs.csv";
pub const TRACE_FILE: &str = "trace.csv";
pub const TRAIN_SUMMARY: &str = "train.json";
pub const MAP_MANIFEST: &str = "manifest.txt";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

/// Command-line overrides applied on top of the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub align: Option<AlignMode>,
    pub sources: Option<Sources>,
    pub raw_sim: bool,
    pub iterations: Option<usize>,
}

/// Defaults, then the config file, then flags.
pub fn resolve_config(file: Option<&Path>, o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = o.seed {
        cfg.set_seed(seed);
    }
    if let Some(align) = o.align {
        cfg.align = align;
    }
    if let Some(sources) = o.sources {
        cfg.inference.sources = sources;
    }
    if o.raw_sim {
        cfg.inference.raw_sim = true;
    }
    if let Some(n) = o.iterations {
        cfg.train.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Creates `out`, clearing a previous run only with `force`. Only
/// directories that hold a resolved config (written by an earlier command)
/// are ever cleared.
fn prepare_output(out: &Path, force: bool) -> Result<()> {
    let non_empty = out.is_dir()
        && fs::read_dir(out)
            .map_err(|e| Error::io(out, e))?
            .next()
            .is_some();
    if non_empty {
        if !force {
            return Err(Error::OutputExists(out.to_path_buf()));
        }
        if !out.join(RESOLVED_CONFIG).is_file() {
            return Err(Error::Config(format!(
                "{}: refusing to clear a directory that was not written by vla",
                out.display()
            )));
        }
        fs::remove_dir_all(out).map_err(|e| Error::io(out, e))?;
    } else if out.exists() && !out.is_dir() {
        return Err(Error::OutputExists(out.to_path_buf()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))
}

fn write_text(path: PathBuf, text: &str) -> Result<()> {
    write_file(&path, text.as_bytes())
}

fn read_list(path: &Path) -> Result<Vec<String>> {
    Ok(crate::io::read_text(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

/// Replaces the synthetic-world section of `cfg` with the one the scenes
/// were generated from.
fn adopt_world(cfg: &mut RunConfig, scenes: &Path) -> Result<()> {
    cfg.synth = RunConfig::from_file(scenes.join(RESOLVED_CONFIG))?.synth;
    cfg.validate()
}

/// Loads the scenes listed in `train.txt` or `eval.txt`, in list order.
pub fn load_split(scenes: &Path, list: &str) -> Result<Vec<SceneBundle>> {
    read_list(&scenes.join(list))?
        .par_iter()
        .map(|id| SceneBundle::load(scenes.join(id), id))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct GenSummary {
    pub train: usize,
    pub eval: usize,
    pub blobs: usize,
}

/// Generates and splits synthetic scenes into `out`.
pub fn cmd_gen(cfg: &RunConfig, out: &Path, force: bool) -> Result<GenSummary> {
    let exp = Experiment::new(cfg.clone())?;
    let generated = generate(&exp.world, cfg.scenes)?;
    let (train, eval) = crate::synth::split(generated.scenes, cfg.train_fraction, cfg.seed)?;
    prepare_output(out, force)?;
    for s in train.iter().chain(&eval) {
        s.save(out.join(&s.id))?;
    }
    let ids = |v: &[SceneBundle]| v.iter().map(|s| format!("{}\n", s.id)).collect::<String>();
    write_text(out.join(TRAIN_LIST), &ids(&train))?;
    write_text(out.join(EVAL_LIST), &ids(&eval))?;
    let mut log = String::from("scene,center_y,center_x,radius_y,radius_x,prototype,cells,area,absorbed\n");
    for b in &generated.blobs {
        let _ = writeln!(
            log,
            "scene_{:04},{},{},{},{},{},{},{},{}",
            b.scene, b.center.0, b.center.1, b.radii.0, b.radii.1, b.prototype, b.cells, b.area, b.absorbed
        );
    }
    write_text(out.join(BLOB_LOG), &log)?;
    write_text(out.join(RESOLVED_CONFIG), &cfg.render())?;
    Ok(GenSummary {
        train: train.len(),
        eval: eval.len(),
        blobs: generated.blobs.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainSummary {
    pub iterations: usize,
    pub status: String,
    pub initial: Option<[f64; 3]>,
    pub last: Option<[f64; 3]>,
    pub tau: f64,
    /// The segmentation loss is constant: the backbone is frozen.
    pub l_seg: &'static str,
    pub grad_check: Option<String>,
}

/// Trains on the scene directory's training split.
pub fn cmd_train(cfg: &RunConfig, scenes: &Path, out: &Path, force: bool, check: bool) -> Result<TrainSummary> {
    let mut cfg = cfg.clone();
    adopt_world(&mut cfg, scenes)?;
    let grad_report = if check {
        let t = toy_problem(cfg.seed, cfg.align)?;
        let report = grad_check(
            &t.scene,
            &t.prompts,
            &t.provider,
            &t.params,
            cfg.loss_weights(),
            GradCheckOptions::default(),
        )?;
        if !report.passed() {
            return Err(Error::GradCheck(report.summary()));
        }
        Some(format!(
            "passed: {} coordinates checked, {} skipped at ReLU kinks",
            report.checked(),
            report.skipped()
        ))
    } else {
        None
    };
    let data = load_split(scenes, TRAIN_LIST)?;
    let exp = Experiment::new(cfg)?;
    let outcome = exp.train(&data, exp.initial_checkpoint()?)?;
    prepare_output(out, force)?;
    outcome.checkpoint.save(out)?;
    write_text(out.join(TRACE_FILE), &render_trace(&outcome.trace))?;
    let row = |r: &crate::trainer::TraceRow| [r.pixel, r.mask, r.total];
    let summary = TrainSummary {
        iterations: outcome.trace.len(),
        status: match outcome.status {
            TrainStatus::Completed => "completed".into(),
            TrainStatus::Diverged { iteration } => format!("diverged at iteration {iteration}"),
        },
        initial: outcome.trace.first().map(row),
        last: outcome.trace.last().map(row),
        tau: outcome.checkpoint.params.tau(),
        l_seg: "n/a (frozen backbone)",
        grad_check: grad_report,
    };
    write_text(out.join(TRAIN_SUMMARY), &(serde_json::to_string_pretty(&summary)? + "\n"))?;
    write_text(out.join(RESOLVED_CONFIG), &exp.config.render())?;
    Ok(summary)
}

fn to_f32(t: &Tensor<f64>) -> Tensor<f32> {
    t.cast()
}

fn write_maps(out: &Path, id: &str, stack: &ScoreStack, all_sources: bool) -> Result<()> {
    let fin = to_f32(&stack.s_final);
    vlt::write(out.join(format!("{id}.final.vlt")), &fin)?;
    pgm::write(out.join(format!("{id}.final.pgm")), &fin)?;
    if all_sources {
        let conf = stack.s_conf.as_ref().expect("all sources enabled");
        let text = stack.s_text.as_ref().expect("all sources enabled");
        let img = stack.s_img.as_ref().expect("all sources enabled");
        vlt::write(out.join(format!("{id}.conf.vlt")), &to_f32(conf))?;
        vlt::write(out.join(format!("{id}.text.vlt")), &to_f32(text))?;
        vlt::write(out.join(format!("{id}.img.vlt")), &to_f32(img))?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferSummary {
    pub scenes: usize,
    pub align: AlignMode,
    pub sources: Sources,
}

/// Scores the evaluation split with a trained checkpoint. The alignment
/// mode is the checkpoint's; `expect_align` (the `--align` flag) must agree
/// with it when given.
pub fn cmd_infer(
    cfg: &RunConfig,
    scenes: &Path,
    checkpoint: &Path,
    out: &Path,
    force: bool,
    expect_align: Option<AlignMode>,
) -> Result<InferSummary> {
    let mut cfg = cfg.clone();
    adopt_world(&mut cfg, scenes)?;
    let ckpt = Checkpoint::load(checkpoint)?;
    let have = &ckpt.params.config;
    if let Some(mode) = expect_align {
        if mode != have.mode {
            return Err(Error::Config(format!(
                "--align {mode} does not match the checkpoint's alignment mode {}",
                have.mode
            )));
        }
    }
    cfg.align = have.mode;
    let want = cfg.aligner_config();
    if (want.feature_dim, want.query_dim, want.width) != (have.feature_dim, have.query_dim, have.width) {
        return Err(Error::Config(format!(
            "checkpoint widths (d_v {}, d_q {}, d {}) do not match the configuration (d_v {}, d_q {}, d {})",
            have.feature_dim, have.query_dim, have.width, want.feature_dim, want.query_dim, want.width
        )));
    }
    let exp = Experiment::new(cfg)?;
    let data = load_split(scenes, EVAL_LIST)?;
    let stacks = exp.score(&ckpt, &data, &exp.config.inference)?;
    prepare_output(out, force)?;
    let all = exp.config.inference.sources == Sources::ALL;
    for (scene, stack) in data.iter().zip(&stacks) {
        write_maps(out, &scene.id, stack, all)?;
    }
    let manifest: String = data.iter().map(|s| format!("{}\n", s.id)).collect();
    write_text(out.join(MAP_MANIFEST), &manifest)?;
    write_text(out.join(RESOLVED_CONFIG), &exp.config.render())?;
    Ok(InferSummary {
        scenes: data.len(),
        align: exp.config.align,
        sources: exp.config.inference.sources,
    })
}

/// How the evaluated maps were produced, copied from the maps directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoringEcho {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub sources: String,
    pub renormalize: bool,
    pub raw_sim: bool,
    pub align: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scoring: ScoringEcho,
    pub component_threshold: f64,
    pub aggregation: &'static str,
    pub pixel: PixelMetrics,
    pub component: ComponentMetrics,
    pub scenes: Vec<SceneReport>,
}

const AGGREGATION: &str = "pixels and 8-connected components pooled over all evaluation scenes; \
void pixels (unlabeled and not anomalous) excluded";

impl EvalReport {
    /// Fixed-width table in percent, one row per run.
    pub fn table(&self) -> String {
        let s = &self.scoring;
        let mut t = String::new();
        let _ = writeln!(
            t,
            "align {}  sources {}  weights {}/{}/{}  raw_sim {}",
            s.align, s.sources, s.alpha, s.beta, s.gamma, s.raw_sim
        );
        let _ = writeln!(t, "{:>8} {:>8} {:>8} | {:>8} {:>8} {:>8}", "AuROC", "AuPRC", "FPR95", "sIoU", "PPV", "F1*");
        let (p, c) = (&self.pixel, &self.component);
        let _ = writeln!(
            t,
            "{:>8.2} {:>8.2} {:>8.2} | {:>8.2} {:>8.2} {:>8.2}",
            100.0 * p.auroc,
            100.0 * p.auprc,
            100.0 * p.fpr95,
            100.0 * c.siou,
            100.0 * c.ppv,
            100.0 * c.f1_star
        );
        t
    }
}

/// Evaluates `<id>.final.vlt` maps against the evaluation split.
pub fn cmd_eval(cfg: &RunConfig, scenes: &Path, maps: &Path, out: &Path, force: bool) -> Result<EvalReport> {
    let mut cfg = cfg.clone();
    adopt_world(&mut cfg, scenes)?;
    let data = load_split(scenes, EVAL_LIST)?;
    let scored = RunConfig::from_file(maps.join(RESOLVED_CONFIG))?;
    let finals: Vec<Tensor<f64>> = data
        .iter()
        .map(|s| {
            let path = maps.join(format!("{}.final.vlt", s.id));
            if !path.is_file() {
                return Err(Error::Config(format!("missing score map {}", path.display())));
            }
            Ok(vlt::read(&path)?.cast())
        })
        .collect::<Result<_>>()?;
    let r = evaluate(&data, &finals, cfg.component_threshold)?;
    let w = scored.inference.weights;
    let report = EvalReport {
        scoring: ScoringEcho {
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            sources: scored.inference.sources.to_string(),
            renormalize: scored.inference.renormalize,
            raw_sim: scored.inference.raw_sim,
            align: scored.align.to_string(),
        },
        component_threshold: r.component_threshold,
        aggregation: AGGREGATION,
        pixel: r.pixel,
        component: r.component,
        scenes: r.scenes,
    };
    prepare_output(out, force)?;
    write_text(out.join(REPORT_JSON), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    write_text(out.join(REPORT_TEXT), &report.table())?;
    write_text(out.join(RESOLVED_CONFIG), &cfg.render())?;
    Ok(report)
}
