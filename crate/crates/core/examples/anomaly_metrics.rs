//! Pixel-level and component-level anomaly metrics on a small hand-made
//! map: two anomalous objects, one found cleanly, one found partially,
//! plus a false alarm.

use vl_anomaly::metrics::{component_metrics, connected_components, pixel_metrics, PixelEval};

const MAP: &str = "\
..........
.AA.......
.AA....B..
......BB..
......BB..
..........
.X........
..........";

fn main() -> vl_anomaly::Result<()> {
    let rows: Vec<&str> = MAP.lines().collect();
    let (h, w) = (rows.len(), rows[0].len());
    let cells: Vec<char> = rows.iter().flat_map(|r| r.chars()).collect();
    // A is scored high everywhere, B only on its upper half, X is a false alarm.
    let ood: Vec<bool> = cells.iter().map(|&c| c == 'A' || c == 'B').collect();
    let scores: Vec<f64> = cells
        .iter()
        .enumerate()
        .map(|(i, &c)| match c {
            'A' => 0.9,
            'B' if i / w < 4 => 0.8,
            'B' => 0.3,
            'X' => 0.7,
            _ => 0.05 + 0.01 * ((i * 7) % 5) as f64,
        })
        .collect();

    let m = pixel_metrics(&PixelEval::new(scores.clone(), ood.clone())?);
    println!("AuROC {:.4}  AuPRC {:.4}  FPR95 {:.4}", m.auroc, m.auprc, m.fpr95);

    let (_, gt) = connected_components(&ood, h, w);
    println!("{gt} ground-truth components");
    for thr in [0.25, 0.5, 0.75] {
        let c = component_metrics(&scores, &ood, h, w, thr)?;
        println!(
            "threshold {thr:.2}: sIoU {:.3}  PPV {:.3}  F1* {:.3}  ({} predicted components)",
            c.siou, c.ppv, c.f1_star, c.pred_components
        );
    }
    Ok(())
}
