//! Scores one evaluation scene with a briefly trained aligner and shows how
//! each score source separates anomalous from known pixels, alone and
//! fused.
//!
//! ```text
//! cargo run --release --example score_fusion -- [iterations] [--raw-sim]
//! ```

use vl_anomaly::config::RunConfig;
use vl_anomaly::inference::Sources;
use vl_anomaly::metrics::{pixel_metrics, PixelEval};
use vl_anomaly::pipeline::Experiment;

fn main() -> vl_anomaly::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut config = RunConfig::default();
    if let Some(n) = args.iter().find_map(|a| a.parse().ok()) {
        config.train.iterations = n;
    }
    config.inference.raw_sim = args.iter().any(|a| a == "--raw-sim");
    let exp = Experiment::new(config)?;
    let (train, eval) = exp.scenes()?;
    let ckpt = exp.train(&train, exp.initial_checkpoint()?)?.checkpoint;
    let scene = &eval[0];
    println!("scene {} ({} anomalous pixels)", scene.id, scene.ood_mask.iter().filter(|&&o| o).count());
    println!("{:<14} {:>9} {:>9} {:>7} {:>7} {:>7}", "sources", "mean ood", "mean id", "AuROC", "AuPRC", "FPR95");
    for spec in ["conf", "text", "conf,text", "conf,img", "conf,text,img"] {
        let mut opts = exp.config.inference;
        opts.sources = spec.parse::<Sources>()?;
        let stack = &exp.score(&ckpt, std::slice::from_ref(scene), &opts)?[0];
        let s = stack.s_final.data();
        let mean = |want: bool| {
            let v: Vec<f64> = s.iter().zip(&scene.ood_mask).filter(|(_, &o)| o == want).map(|(x, _)| *x).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let m = pixel_metrics(&PixelEval::new(s.to_vec(), scene.ood_mask.clone())?);
        println!(
            "{spec:<14} {:>9.4} {:>9.4} {:>7.4} {:>7.4} {:>7.4}",
            mean(true),
            mean(false),
            m.auroc,
            m.auprc,
            m.fpr95
        );
    }
    Ok(())
}
