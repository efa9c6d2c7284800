//! Anomaly-segmentation metrics: pixel-level AuROC, AuPRC and FPR at 95%
//! TPR, and component-level sIoU, PPV and F1*.
//!
//! Component metrics follow the road-anomaly benchmark convention:
//!
//! * **sIoU** of a ground-truth component `K`: `|K ∩ P̂| / |(K ∪ P̂(K)) \ A(K)|`
//!   where `P̂(K)` is the union of predicted components touching `K` and
//!   `A(K)` the pixels of all other ground-truth components. Averaged over
//!   ground-truth components.
//! * **PPV** of a predicted component `P`: the fraction of its pixels that
//!   lie in any ground-truth component. Averaged over predicted components;
//!   0 when nothing is predicted.
//! * **F1(t)**: TP = ground-truth components with sIoU > t, FN = the rest,
//!   FP = predicted components with PPV <= t; `2TP / (2TP + FN + FP)`.
//!   **F1\*** is the mean over `t ∈ {0.25, 0.5, 0.75}`.
//!
//! Components are 8-connected and pooled across all scenes.

use crate::error::{Error, Result};
use crate::scene::{SceneBundle, IGNORE};
use crate::tensor::Tensor;

/// Detection thresholds averaged by F1*.
pub const F1_THRESHOLDS: [f64; 3] = [0.25, 0.5, 0.75];

/// Flat scores with binary labels (true = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct PixelEval {
    scores: Vec<f64>,
    labels: Vec<bool>,
    positives: usize,
}

impl PixelEval {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::Metric(format!(
                "{} scores but {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
            return Err(Error::Metric(format!("non-finite score {s}")));
        }
        let positives = labels.iter().filter(|&&l| l).count();
        if positives == 0 || positives == labels.len() {
            return Err(Error::Metric(
                "need at least one anomalous and one normal pixel".into(),
            ));
        }
        Ok(Self {
            scores,
            labels,
            positives,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.positives
    }

    pub fn negatives(&self) -> usize {
        self.scores.len() - self.positives
    }

    /// Cumulative `(tp, fp)` after each distinct threshold, highest first.
    fn sweep(&self) -> Vec<(usize, usize)> {
        let mut idx: Vec<usize> = (0..self.scores.len()).collect();
        idx.sort_by(|&a, &b| self.scores[b].total_cmp(&self.scores[a]));
        let mut out = Vec::new();
        let (mut tp, mut fp) = (0, 0);
        for (i, &j) in idx.iter().enumerate() {
            if self.labels[j] {
                tp += 1;
            } else {
                fp += 1;
            }
            let last_of_tie = idx.get(i + 1).is_none_or(|&n| self.scores[n] != self.scores[j]);
            if last_of_tie {
                out.push((tp, fp));
            }
        }
        out
    }
}

/// Area under the ROC curve by trapezoids over tie groups (tied
/// positive/negative pairs earn half credit).
pub fn auroc(eval: &PixelEval) -> f64 {
    let (p, n) = (eval.positives() as f64, eval.negatives() as f64);
    let mut area = 0.0;
    let (mut tp0, mut fp0) = (0usize, 0usize);
    for (tp, fp) in eval.sweep() {
        area += (fp - fp0) as f64 * (tp + tp0) as f64 / 2.0;
        (tp0, fp0) = (tp, fp);
    }
    area / (p * n)
}

/// Average precision: `sum_i (R_i - R_{i-1}) * P_i` over descending
/// distinct thresholds.
pub fn auprc(eval: &PixelEval) -> f64 {
    let p = eval.positives() as f64;
    let mut ap = 0.0;
    let mut tp0 = 0usize;
    for (tp, fp) in eval.sweep() {
        if tp > tp0 {
            ap += (tp - tp0) as f64 / p * (tp as f64 / (tp + fp) as f64);
        }
        tp0 = tp;
    }
    ap
}

/// `20 * tp >= 19 * p`, i.e. TPR >= 0.95 without rounding.
fn reaches_95(tp: usize, p: usize) -> bool {
    20 * tp >= 19 * p
}

/// False positive rate at the first (highest) threshold whose TPR reaches
/// 0.95. No interpolation between thresholds.
pub fn fpr_at_95tpr(eval: &PixelEval) -> f64 {
    let (p, n) = (eval.positives(), eval.negatives() as f64);
    eval.sweep()
        .into_iter()
        .find(|&(tp, _)| reaches_95(tp, p))
        .map(|(_, fp)| fp as f64 / n)
        .expect("the lowest threshold has TPR 1")
}

/// All three pixel-level metrics.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct PixelMetrics {
    pub auroc: f64,
    pub auprc: f64,
    pub fpr95: f64,
}

pub fn pixel_metrics(eval: &PixelEval) -> PixelMetrics {
    PixelMetrics {
        auroc: auroc(eval),
        auprc: auprc(eval),
        fpr95: fpr_at_95tpr(eval),
    }
}

/// 8-connected component labels of a binary map: 0 for background, `1..=n`
/// for components in raster order of their first pixel.
pub fn connected_components(mask: &[bool], height: usize, width: usize) -> (Vec<u32>, usize) {
    assert_eq!(mask.len(), height * width);
    let mut labels = vec![0u32; mask.len()];
    let mut n = 0u32;
    let mut stack = Vec::new();
    for start in 0..mask.len() {
        if !mask[start] || labels[start] != 0 {
            continue;
        }
        n += 1;
        labels[start] = n;
        stack.push(start);
        while let Some(p) = stack.pop() {
            let (y, x) = ((p / width) as isize, (p % width) as isize);
            for dy in -1..=1 {
                for dx in -1..=1 {
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    let q = ny as usize * width + nx as usize;
                    if mask[q] && labels[q] == 0 {
                        labels[q] = n;
                        stack.push(q);
                    }
                }
            }
        }
    }
    (labels, n as usize)
}

/// Per-scene component statistics, to be pooled with [`ComponentTally`].
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ComponentTally {
    /// sIoU of each ground-truth component.
    pub siou: Vec<f64>,
    /// Precision of each predicted component.
    pub ppv: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ComponentMetrics {
    pub siou: f64,
    pub ppv: f64,
    pub f1_star: f64,
    pub gt_components: usize,
    pub pred_components: usize,
}

impl ComponentTally {
    /// Adds one scene. `valid` marks pixels taking part in evaluation;
    /// predictions on other pixels are dropped.
    pub fn add_scene(
        &mut self,
        scores: &[f64],
        ood: &[bool],
        valid: &[bool],
        height: usize,
        width: usize,
        threshold: f64,
    ) -> Result<()> {
        let n = height * width;
        if scores.len() != n || ood.len() != n || valid.len() != n {
            return Err(Error::Metric(format!(
                "component maps must have {n} pixels, got {}/{}/{}",
                scores.len(),
                ood.len(),
                valid.len()
            )));
        }
        let pred: Vec<bool> = (0..n).map(|p| valid[p] && scores[p] >= threshold).collect();
        let (gt_lab, n_gt) = connected_components(ood, height, width);
        let (pr_lab, n_pr) = connected_components(&pred, height, width);

        let mut gt_area = vec![0usize; n_gt + 1];
        let mut pr_area = vec![0usize; n_pr + 1];
        let mut pr_hits_gt = vec![0usize; n_pr + 1];
        // Intersections (gt, pred) in a sparse list.
        let mut inter: std::collections::BTreeMap<(u32, u32), usize> = Default::default();
        for p in 0..n {
            let (g, r) = (gt_lab[p], pr_lab[p]);
            gt_area[g as usize] += 1;
            pr_area[r as usize] += 1;
            if g != 0 && r != 0 {
                *inter.entry((g, r)).or_default() += 1;
                pr_hits_gt[r as usize] += 1;
            }
        }
        for g in 1..=n_gt as u32 {
            let touching: Vec<u32> = inter.keys().filter(|(a, _)| *a == g).map(|&(_, r)| r).collect();
            let i: usize = touching.iter().map(|&r| inter[&(g, r)]).sum();
            // |P̂(K) \ A(K)| = pixels of touching predictions outside every
            // other ground-truth component.
            let mut pred_outside_others = 0usize;
            for &r in &touching {
                let in_other_gt: usize = inter
                    .iter()
                    .filter(|((a, b), _)| *b == r && *a != g)
                    .map(|(_, &c)| c)
                    .sum();
                pred_outside_others += pr_area[r as usize] - in_other_gt;
            }
            let union = gt_area[g as usize] + pred_outside_others - i;
            self.siou.push(i as f64 / union as f64);
        }
        for r in 1..=n_pr {
            self.ppv.push(pr_hits_gt[r] as f64 / pr_area[r] as f64);
        }
        Ok(())
    }

    pub fn finish(&self) -> Result<ComponentMetrics> {
        if self.siou.is_empty() {
            return Err(Error::Metric("no ground-truth anomaly components".into()));
        }
        let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        let f1 = |t: f64| {
            let tp = self.siou.iter().filter(|&&s| s > t).count();
            let fneg = self.siou.len() - tp;
            let fp = self.ppv.iter().filter(|&&p| p <= t).count();
            2.0 * tp as f64 / (2 * tp + fneg + fp) as f64
        };
        Ok(ComponentMetrics {
            siou: mean(&self.siou),
            ppv: mean(&self.ppv),
            f1_star: F1_THRESHOLDS.iter().map(|&t| f1(t)).sum::<f64>() / F1_THRESHOLDS.len() as f64,
            gt_components: self.siou.len(),
            pred_components: self.ppv.len(),
        })
    }
}

/// Component metrics of a single map with every pixel valid.
pub fn component_metrics(
    scores: &[f64],
    ood: &[bool],
    height: usize,
    width: usize,
    threshold: f64,
) -> Result<ComponentMetrics> {
    let mut t = ComponentTally::default();
    t.add_scene(scores, ood, &vec![true; ood.len()], height, width, threshold)?;
    t.finish()
}

/// Threshold on `S_final` that turns scores into predicted components.
pub const DEFAULT_COMPONENT_THRESHOLD: f64 = 0.5;

/// Output-resolution mask of pixels that take part in evaluation: known
/// class pixels and anomaly pixels. Unsupervised non-anomalous pixels are
/// void.
pub fn evaluation_mask(scene: &SceneBundle) -> Vec<bool> {
    let (hh, ww) = scene.output_size();
    let (_, w) = scene.feature_size();
    let s = scene.stride();
    (0..hh * ww)
        .map(|p| scene.ood_mask[p] || scene.gt_labels[(p / ww / s) * w + (p % ww) / s] != IGNORE)
        .collect()
}

/// Metrics of one scene. Pixel metrics are absent for scenes without both
/// anomalous and normal pixels.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SceneReport {
    pub id: String,
    pub pixels: usize,
    pub anomalous_pixels: usize,
    pub pixel: Option<PixelMetrics>,
}

/// Pools pixels and components over a dataset in insertion order.
#[derive(Debug, Clone, Default)]
pub struct DatasetEval {
    scores: Vec<f64>,
    labels: Vec<bool>,
    components: ComponentTally,
    scenes: Vec<SceneReport>,
    threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct DatasetReport {
    pub pixel: PixelMetrics,
    pub component: ComponentMetrics,
    pub component_threshold: f64,
    pub scenes: Vec<SceneReport>,
}

impl DatasetEval {
    pub fn new(component_threshold: f64) -> Self {
        Self {
            threshold: Some(component_threshold),
            ..Self::default()
        }
    }

    fn threshold(&self) -> f64 {
        self.threshold.unwrap_or(DEFAULT_COMPONENT_THRESHOLD)
    }

    /// Adds one scene's `[H, W]` anomaly map.
    pub fn add(&mut self, scene: &SceneBundle, score: &Tensor<f64>) -> Result<()> {
        let (hh, ww) = scene.output_size();
        if score.shape() != [hh, ww] {
            return Err(Error::shape("score map vs scene output", score.shape(), &[hh, ww]));
        }
        let valid = evaluation_mask(scene);
        let (mut s, mut l) = (Vec::new(), Vec::new());
        for p in (0..hh * ww).filter(|&p| valid[p]) {
            s.push(score.data()[p]);
            l.push(scene.ood_mask[p]);
        }
        let anomalous = l.iter().filter(|&&b| b).count();
        let pixel = PixelEval::new(s.clone(), l.clone()).ok().map(|e| pixel_metrics(&e));
        if let Some(x) = s.iter().find(|x| !x.is_finite()) {
            return Err(Error::Metric(format!("scene {}: non-finite score {x}", scene.id)));
        }
        self.scenes.push(SceneReport {
            id: scene.id.clone(),
            pixels: s.len(),
            anomalous_pixels: anomalous,
            pixel,
        });
        self.scores.extend(s);
        self.labels.extend(l);
        let t = self.threshold();
        self.components
            .add_scene(score.data(), &scene.ood_mask, &valid, hh, ww, t)
    }

    pub fn finish(self) -> Result<DatasetReport> {
        let component_threshold = self.threshold();
        let eval = PixelEval::new(self.scores, self.labels)?;
        Ok(DatasetReport {
            pixel: pixel_metrics(&eval),
            component: self.components.finish()?,
            component_threshold,
            scenes: self.scenes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(scores: &[f64], labels: &[u8]) -> PixelEval {
        PixelEval::new(scores.to_vec(), labels.iter().map(|&l| l == 1).collect()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert!((auroc(&ev(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1])) - 0.75).abs() < 1e-15);
        assert_eq!(auroc(&ev(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])), 1.0);
        assert_eq!(auroc(&ev(&[0.5; 6], &[0, 1, 0, 1, 1, 0])), 0.5);
        assert!(PixelEval::new(vec![0.1, 0.2], vec![true, true]).is_err());
        assert!(PixelEval::new(vec![0.1], vec![true, false]).is_err());
    }

    #[test]
    fn auprc_examples() {
        assert_eq!(auprc(&ev(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])), 1.0);
        assert!((auprc(&ev(&[0.9, 0.8, 0.7], &[1, 0, 1])) - 5.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn fpr95_examples() {
        assert_eq!(fpr_at_95tpr(&ev(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1])), 0.0);
        assert_eq!(fpr_at_95tpr(&ev(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1])), 1.0);
        // 20 positives above 20 negatives except for stragglers below all
        // negatives. One straggler leaves TPR at exactly 0.95.
        let mut scores: Vec<f64> = (0..20).map(|i| 0.3 + i as f64 * 0.001).collect();
        scores.extend((0..20).map(|i| 0.9 + i as f64 * 0.001));
        let mut labels = vec![0u8; 20];
        labels.extend([1u8; 20]);
        scores[20] = 0.01;
        assert_eq!(fpr_at_95tpr(&ev(&scores, &labels)), 0.0);
        scores[21] = 0.02;
        assert_eq!(fpr_at_95tpr(&ev(&scores, &labels)), 1.0);
    }

    #[test]
    fn components_are_eight_connected() {
        #[rustfmt::skip]
        let m = [
            true, false, false,
            false, true, false,
            false, false, false,
            true, true, false,
        ];
        let (lab, n) = connected_components(&m, 4, 3);
        assert_eq!(n, 2);
        assert_eq!(lab[0], lab[4]);
        assert_eq!(lab[9], 2);
    }

    #[test]
    fn component_examples() {
        let ood = [false, true, true, false, false, true, true, false];
        let exact: Vec<f64> = ood.iter().map(|&o| if o { 1.0 } else { 0.0 }).collect();
        let m = component_metrics(&exact, &ood, 2, 4, 0.5).unwrap();
        assert_eq!((m.siou, m.ppv, m.f1_star), (1.0, 1.0, 1.0));

        let m = component_metrics(&[0.0; 8], &ood, 2, 4, 0.5).unwrap();
        assert_eq!((m.siou, m.ppv, m.f1_star, m.pred_components), (0.0, 0.0, 0.0, 0));

        // 2-pixel subset of the 4-pixel component.
        let half = [0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        let m = component_metrics(&half, &ood, 2, 4, 0.5).unwrap();
        assert_eq!(m.siou, 0.5);
        assert_eq!(m.ppv, 1.0);
        // sIoU 0.5 passes only t = 0.25; the prediction is never a FP.
        assert!((m.f1_star - 1.0 / 3.0).abs() < 1e-15);

        assert!(component_metrics(&half, &[false; 8], 2, 4, 0.5).is_err());
    }

    #[test]
    fn siou_discounts_other_components() {
        // Two GT components bridged by one prediction spanning both.
        let ood = [true, false, true];
        let m = component_metrics(&[1.0, 1.0, 1.0], &ood, 1, 3, 0.5).unwrap();
        // For each GT: intersection 1, union = {own, bridge} = 2.
        assert_eq!(m.siou, 0.5);
        assert!((m.ppv - 2.0 / 3.0).abs() < 1e-15);
    }

    /// Pairwise definition: P(s+ > s-) + 0.5 P(s+ = s-).
    fn auroc_oracle(s: &[f64], l: &[bool]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] && !l[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    /// Threshold-by-threshold definitions evaluated from scratch.
    fn thresholds(s: &[f64], l: &[bool]) -> Vec<(f64, f64)> {
        let mut ts: Vec<f64> = s.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let p = l.iter().filter(|&&x| x).count() as f64;
        let n = l.len() as f64 - p;
        ts.iter()
            .map(|&t| {
                let tp = (0..s.len()).filter(|&i| l[i] && s[i] >= t).count() as f64;
                let fp = (0..s.len()).filter(|&i| !l[i] && s[i] >= t).count() as f64;
                (tp / p, fp / n)
            })
            .collect()
    }

    fn fpr95_oracle(s: &[f64], l: &[bool]) -> f64 {
        thresholds(s, l).into_iter().find(|&(tpr, _)| tpr >= 0.95 - 1e-12).unwrap().1
    }

    fn auprc_oracle(s: &[f64], l: &[bool]) -> f64 {
        let p = l.iter().filter(|&&x| x).count() as f64;
        let mut ts: Vec<f64> = s.to_vec();
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let (mut ap, mut r0) = (0.0, 0.0);
        for t in ts {
            let tp = (0..s.len()).filter(|&i| l[i] && s[i] >= t).count() as f64;
            let k = (0..s.len()).filter(|&i| s[i] >= t).count() as f64;
            ap += (tp / p - r0) * tp / k;
            r0 = tp / p;
        }
        ap
    }

    fn instance() -> impl proptest::strategy::Strategy<Value = (Vec<f64>, Vec<bool>)> {
        use proptest::prelude::*;
        (2usize..60)
            .prop_flat_map(|n| {
                (
                    prop::collection::vec((0u8..12).prop_map(|q| q as f64 / 4.0), n),
                    prop::collection::vec(any::<bool>(), n),
                )
            })
            .prop_map(|(s, mut l)| {
                l[0] = true;
                l[1] = false;
                (s, l)
            })
    }

    proptest::proptest! {
        #[test]
        fn metrics_match_oracles((s, l) in instance()) {
            let e = PixelEval::new(s.clone(), l.clone()).unwrap();
            proptest::prop_assert!((auroc(&e) - auroc_oracle(&s, &l)).abs() < 1e-12);
            proptest::prop_assert!((auprc(&e) - auprc_oracle(&s, &l)).abs() < 1e-12);
            proptest::prop_assert_eq!(fpr_at_95tpr(&e), fpr95_oracle(&s, &l));
        }

        #[test]
        fn metrics_invariant_under_monotone_maps((s, l) in instance(), a in 0.1f64..10.0, b in -5.0f64..5.0) {
            let e = PixelEval::new(s.clone(), l.clone()).unwrap();
            let t: Vec<f64> = s.iter().map(|&x| (a * x + b).exp()).collect();
            let f = PixelEval::new(t, l.clone()).unwrap();
            proptest::prop_assert!((auroc(&e) - auroc(&f)).abs() < 1e-12);
            proptest::prop_assert!((auprc(&e) - auprc(&f)).abs() < 1e-12);
            proptest::prop_assert_eq!(fpr_at_95tpr(&e), fpr_at_95tpr(&f));
            let neg = PixelEval::new(s.iter().map(|&x| -x).collect(), l).unwrap();
            proptest::prop_assert!((auroc(&e) + auroc(&neg) - 1.0).abs() < 1e-12);
        }

        #[test]
        fn component_metrics_translation_invariant(
            cells in proptest::collection::vec(proptest::prelude::any::<(bool, bool)>(), 36),
            dy in 0usize..3, dx in 0usize..3,
        ) {
            let (h, w) = (6, 6);
            let ood: Vec<bool> = cells.iter().map(|c| c.0).collect();
            proptest::prop_assume!(ood.iter().any(|&o| o));
            let sc: Vec<f64> = cells.iter().map(|c| c.1 as u8 as f64).collect();
            let base = component_metrics(&sc, &ood, h, w, 0.5).unwrap();
            // Shift into a larger zero-padded canvas.
            let (bh, bw) = (h + 3, w + 3);
            let mut o2 = vec![false; bh * bw];
            let mut s2 = vec![0.0; bh * bw];
            for y in 0..h {
                for x in 0..w {
                    o2[(y + dy) * bw + x + dx] = ood[y * w + x];
                    s2[(y + dy) * bw + x + dx] = sc[y * w + x];
                }
            }
            let moved = component_metrics(&s2, &o2, bh, bw, 0.5).unwrap();
            proptest::prop_assert_eq!(base, moved);
            for v in [base.siou, base.ppv, base.f1_star] {
                proptest::prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
