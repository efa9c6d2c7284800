//! Checks the hand-written backward pass of the aligner against central
//! finite differences on seeded toy problems.
//!
//! ```text
//! cargo run --release --example aligner_gradcheck -- [instances] [tau] [step]
//! ```

use vl_anomaly::aligner::{AlignMode, LossWeights};
use vl_anomaly::trainer::{grad_check, toy_problem, GradCheckOptions};

fn main() -> vl_anomaly::Result<()> {
    let mut args = std::env::args().skip(1);
    let instances: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(25);
    let tau: Option<f64> = args.next().and_then(|s| s.parse().ok());
    let opts = GradCheckOptions {
        step: args.next().and_then(|s| s.parse().ok()).unwrap_or(1e-3),
        ..GradCheckOptions::default()
    };

    let mut worst_rel = 0.0f64;
    let (mut checked, mut skipped, mut failed) = (0, 0, 0);
    for seed in 0..instances {
        let mode = [AlignMode::Both, AlignMode::Pixel, AlignMode::Mask][seed as usize % 3];
        let mut t = toy_problem(seed, mode)?;
        if let Some(tau) = tau {
            t.params.log_tau.data_mut()[0] = tau.ln();
        }
        let weights = LossWeights::default().for_mode(mode);
        let report = grad_check(&t.scene, &t.prompts, &t.provider, &t.params, weights, opts)?;
        let rel = report.tensors.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
        worst_rel = worst_rel.max(rel);
        checked += report.checked();
        skipped += report.skipped();
        if !report.passed() {
            failed += 1;
            println!("seed {seed} ({mode}) FAILED\n{}", report.summary());
        } else {
            println!(
                "seed {seed:>2} {mode:<5} checked {:>5} skipped {:>2} worst rel {rel:.2e}",
                report.checked(),
                report.skipped()
            );
        }
    }
    println!("{instances} instances, {checked} coordinates, {skipped} kink skips, {failed} failures, worst rel {worst_rel:.2e}");
    Ok(())
}
