//! Writes a score map as a VLT tensor and a 16-bit PGM image, reads both
//! back and checks that nothing was lost beyond the documented precision.
//!
//! ```text
//! cargo run --release --example vlt_round_trip -- [dir]
//! ```

use vl_anomaly::io::{pgm, vlt};
use vl_anomaly::Tensor;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(std::env::temp_dir);
    let (h, w) = (32, 48);
    let map = Tensor::<f32>::from_fn(vec![h, w], |i| {
        let (y, x) = ((i / w) as f32 / h as f32, (i % w) as f32 / w as f32);
        (0.5 + 0.5 * (6.0 * x).sin() * (4.0 * y).cos()).clamp(0.0, 1.0)
    });

    let vlt_path = dir.join("round_trip.vlt");
    vlt::write(&vlt_path, &map)?;
    let back = vlt::read(&vlt_path)?;
    println!(
        "VLT {:?}: {} bytes, shape {:?}, exact {}",
        vlt_path,
        std::fs::metadata(&vlt_path)?.len(),
        back.shape(),
        back == map
    );

    let pgm_path = dir.join("round_trip.pgm");
    pgm::write(&pgm_path, &map)?;
    let bytes = std::fs::read(&pgm_path)?;
    let (ph, pw, samples) = pgm::decode(&bytes).expect("valid PGM");
    let worst = map
        .data()
        .iter()
        .zip(&samples)
        .map(|(&s, &q)| (s as f64 - q as f64 / 65535.0).abs())
        .fold(0.0, f64::max);
    println!("PGM {:?}: {ph}x{pw}, worst quantization error {worst:.2e} (bound {:.2e})", pgm_path, 0.5 / 65535.0);
    Ok(())
}
