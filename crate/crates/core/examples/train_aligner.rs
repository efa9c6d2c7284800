//! Trains prompt context and aligner on synthetic scenes and prints the
//! loss trace at regular intervals.
//!
//! ```text
//! cargo run --release --example train_aligner -- [key=value ...]
//! cargo run --release --example train_aligner -- model.align=mask train.iterations=300
//! ```

use vl_anomaly::config::RunConfig;
use vl_anomaly::pipeline::Experiment;

fn main() -> vl_anomaly::Result<()> {
    let mut config = RunConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg
            .split_once('=')
            .ok_or_else(|| vl_anomaly::Error::Config(format!("expected key=value, got `{arg}`")))?;
        config.set(k, v)?;
    }
    let exp = Experiment::new(config)?;
    let (train, _) = exp.scenes()?;
    let t0 = std::time::Instant::now();
    let out = exp.train(&train, exp.initial_checkpoint()?)?;
    let every = (out.trace.len() / 10).max(1);
    println!("{:>6} {:>10} {:>10} {:>10} {:>8}", "iter", "L_pixel", "L_mask", "total", "tau");
    for r in out.trace.iter().filter(|r| r.iter % every == 0 || r.iter + 1 == out.trace.len()) {
        println!("{:>6} {:>10.5} {:>10.5} {:>10.5} {:>8.5}", r.iter, r.pixel, r.mask, r.total, r.tau);
    }
    println!(
        "{} scenes, align {}, {:?} in {:.1?}",
        train.len(),
        exp.config.align,
        out.status,
        t0.elapsed()
    );
    Ok(())
}
