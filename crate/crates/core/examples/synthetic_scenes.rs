//! Generates a synthetic scene set and summarizes what was placed in it:
//! anomalous coverage, injected blobs and how many of them a detector mask
//! swallowed.
//!
//! ```text
//! cargo run --release --example synthetic_scenes -- [scenes] [seed] [save-dir]
//! ```

use vl_anomaly::synth::{generate, SynthConfig, SynthWorld};

fn main() -> vl_anomaly::Result<()> {
    let mut args = std::env::args().skip(1);
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(8);
    let seed: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(7);
    let save = args.next();

    let world = SynthWorld::new(SynthConfig { seed, ..SynthConfig::default() })?;
    let out = generate(&world, n)?;
    println!("{:<10} {:>9} {:>8} {:>6} {:>9}", "scene", "size", "ood %", "blobs", "absorbed");
    for (i, scene) in out.scenes.iter().enumerate() {
        let (h, w) = scene.output_size();
        let ood = scene.ood_mask.iter().filter(|&&o| o).count();
        let blobs: Vec<_> = out.blobs.iter().filter(|b| b.scene == i).collect();
        println!(
            "{:<10} {:>9} {:>8.2} {:>6} {:>9}",
            scene.id,
            format!("{h}x{w}"),
            100.0 * ood as f64 / (h * w) as f64,
            blobs.len(),
            blobs.iter().filter(|b| b.absorbed).count()
        );
    }
    let sizes: Vec<usize> = out.blobs.iter().map(|b| b.area).collect();
    if let (Some(lo), Some(hi)) = (sizes.iter().min(), sizes.iter().max()) {
        println!("{} blobs, area {lo}..{hi} pixels", sizes.len());
    }
    if let Some(dir) = save {
        for scene in &out.scenes {
            scene.save(std::path::Path::new(&dir).join(&scene.id))?;
        }
        println!("saved to {dir}");
    }
    Ok(())
}
