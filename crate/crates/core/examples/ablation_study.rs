//! Trains the aligner on synthetic scenes in each alignment mode and
//! reports pixel and component metrics for every score-source subset.
//!
//! ```text
//! cargo run --release --example ablation_study -- [key=value ...]
//! cargo run --release --example ablation_study -- train.iterations=200 seed=3
//! ```

use vl_anomaly::aligner::AlignMode;
use vl_anomaly::config::RunConfig;
use vl_anomaly::inference::{InferenceOptions, Sources};
use vl_anomaly::pipeline::Experiment;

fn main() -> vl_anomaly::Result<()> {
    let mut config = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').ok_or_else(|| {
            vl_anomaly::Error::Config(format!("expected key=value, got `{arg}`"))
        })?;
        config.set(k, v)?;
    }
    let rows: [(&str, &str); 5] = [
        ("conf", "conf"),
        ("text", "text"),
        ("conf,text", "conf,text"),
        ("conf,img", "conf,img"),
        ("full", "conf,text,img"),
    ];
    println!("{:<6} {:<10} {:>7} {:>7} {:>7} {:>6} {:>6} {:>6}", "align", "sources", "AuROC", "AuPRC", "FPR95", "sIoU", "PPV", "F1*");
    for mode in [AlignMode::Pixel, AlignMode::Mask, AlignMode::Both] {
        let mut cfg = config.clone();
        cfg.align = mode;
        let exp = Experiment::new(cfg)?;
        let (train, eval) = exp.scenes()?;
        let t0 = std::time::Instant::now();
        let outcome = exp.train(&train, exp.initial_checkpoint()?)?;
        let first = outcome.trace.first().map(|r| r.total).unwrap_or(f64::NAN);
        let last = outcome.trace.last().map(|r| r.total).unwrap_or(f64::NAN);
        eprintln!(
            "{mode}: {} iterations in {:.1?}, loss {first:.4} -> {last:.4}, tau {:.4}",
            outcome.trace.len(),
            t0.elapsed(),
            outcome.checkpoint.params.tau()
        );
        for (label, sources) in rows {
            let opts = InferenceOptions {
                sources: sources.parse::<Sources>()?,
                ..exp.config.inference
            };
            let stacks = exp.score(&outcome.checkpoint, &eval, &opts)?;
            let maps: Vec<_> = stacks.into_iter().map(|s| s.s_final).collect();
            let r = exp.evaluate(&eval, &maps)?;
            println!(
                "{:<6} {:<10} {:>7.4} {:>7.4} {:>7.4} {:>6.3} {:>6.3} {:>6.3}",
                mode.to_string(),
                label,
                r.pixel.auroc,
                r.pixel.auprc,
                r.pixel.fpr95,
                r.component.siou,
                r.component.ppv,
                r.component.f1_star
            );
        }
    }
    Ok(())
}
