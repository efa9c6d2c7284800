//! Builds learnable prompts for the synthetic class vocabulary, encodes
//! them, and shows how close the resulting class embeddings are to each
//! other. Also records the encoder into a fixture and checks that the
//! fixture reproduces the table.
//!
//! ```text
//! cargo run --release --example prompt_embeddings -- [context_len]
//! ```

use vl_anomaly::embedding::{build_prompts, encode_class_embeddings, FixtureEncoder};
use vl_anomaly::synth::{SynthConfig, SynthWorld};

fn main() -> vl_anomaly::Result<()> {
    let context_len: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let world = SynthWorld::new(SynthConfig::default())?;
    let provider = world.encoder();
    let names = world.class_names();
    let prompts = build_prompts(&names, context_len, world.config.embed_dim, 7, &provider)?;
    let table = encode_class_embeddings(&prompts, &provider)?;
    println!(
        "{} classes, {} context tokens, width {}",
        table.num_classes(),
        prompts.context_len(),
        table.width()
    );

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    print!("{:>8}", "");
    for n in &names {
        print!(" {n:>8}");
    }
    println!();
    for (i, a) in names.iter().enumerate() {
        print!("{a:>8}");
        for j in 0..names.len() {
            print!(" {:>8.3}", dot(table.row(i), table.row(j)));
        }
        println!();
    }

    let fixture = FixtureEncoder::record(&prompts, &provider, &[])?;
    let replay = encode_class_embeddings(&prompts, &fixture)?;
    let worst = (0..names.len())
        .flat_map(|i| table.row(i).iter().zip(replay.row(i)).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>())
        .fold(0.0, f64::max);
    println!("fixture replay max abs difference {worst:.2e} (f32 storage)");
    Ok(())
}
