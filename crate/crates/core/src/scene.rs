//! One image's worth of precomputed inputs: backbone features, decoder
//! queries and predictions, and ground truth.

use std::path::Path;

use crate::error::{Error, Result};
use crate::io::vlt;
use crate::tensor::{sigmoid_scalar, Tensor};

/// Label value for unsupervised pixels and for no-object queries.
pub const IGNORE: u16 = u16::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct SceneBundle {
    pub id: String,
    /// `[h, w, d_v]` backbone feature map.
    pub pixel_features: Tensor<f32>,
    /// `[N_q, d_q]` decoder queries.
    pub mask_queries: Tensor<f32>,
    /// `[N_q, C_k]` class logits per query.
    pub class_logits: Tensor<f32>,
    /// `[N_q, H, W]` mask logits per query.
    pub mask_logits: Tensor<f32>,
    /// `h * w` labels at feature resolution, [`IGNORE`] where unsupervised.
    pub gt_labels: Vec<u16>,
    /// `N_q` query labels, [`IGNORE`] for no-object.
    pub gt_query_labels: Vec<u16>,
    /// `H * W` anomaly ground truth. Evaluation only.
    pub ood_mask: Vec<bool>,
}

const FILES: [&str; 7] = [
    "pixel_features",
    "mask_queries",
    "class_logits",
    "mask_logits",
    "gt_labels",
    "gt_query_labels",
    "ood_mask",
];

impl SceneBundle {
    pub fn feature_size(&self) -> (usize, usize) {
        (self.pixel_features.shape()[0], self.pixel_features.shape()[1])
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.mask_logits.shape()[1], self.mask_logits.shape()[2])
    }

    pub fn feature_dim(&self) -> usize {
        self.pixel_features.last_dim()
    }

    pub fn query_dim(&self) -> usize {
        self.mask_queries.last_dim()
    }

    pub fn num_queries(&self) -> usize {
        self.mask_queries.rows()
    }

    pub fn num_classes(&self) -> usize {
        self.class_logits.cols()
    }

    /// Output-to-feature resolution ratio.
    pub fn stride(&self) -> usize {
        self.output_size().0 / self.feature_size().0
    }

    pub fn has_ood(&self) -> bool {
        self.ood_mask.iter().any(|&b| b)
    }

    /// Checks shape consistency and that no OOD pixel is supervised.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidTensor(format!("scene {}: {msg}", self.id)));
        if self.pixel_features.rank() != 3 || self.mask_logits.rank() != 3 {
            return bad("pixel_features and mask_logits must be rank 3".into());
        }
        if self.mask_queries.rank() != 2 || self.class_logits.rank() != 2 {
            return bad("mask_queries and class_logits must be matrices".into());
        }
        let (h, w) = self.feature_size();
        let (hh, ww) = self.output_size();
        let nq = self.num_queries();
        if hh % h != 0 || ww % w != 0 || hh / h != ww / w {
            return bad(format!("output {hh}x{ww} is not a uniform multiple of {h}x{w}"));
        }
        if self.class_logits.rows() != nq || self.mask_logits.shape()[0] != nq {
            return bad("query count differs between queries, class and mask logits".into());
        }
        if self.gt_labels.len() != h * w || self.ood_mask.len() != hh * ww {
            return bad("label map sizes do not match feature/output sizes".into());
        }
        if self.gt_query_labels.len() != nq {
            return bad("gt_query_labels length differs from query count".into());
        }
        let c = self.num_classes() as u16;
        if self
            .gt_labels
            .iter()
            .chain(&self.gt_query_labels)
            .any(|&l| l != IGNORE && l >= c)
        {
            return bad("label out of class range".into());
        }
        let s = hh / h;
        for (p, _) in self.ood_mask.iter().enumerate().filter(|(_, &o)| o) {
            let (y, x) = (p / ww, p % ww);
            if self.gt_labels[(y / s) * w + x / s] != IGNORE {
                return bad(format!("OOD pixel ({y},{x}) carries a class label"));
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let (h, w) = self.feature_size();
        let (hh, ww) = self.output_size();
        let labels = |v: &[u16], shape: Vec<usize>| {
            Tensor::new(shape, v.iter().map(|&l| l as f32).collect()).expect("label shape")
        };
        let tensors = [
            self.pixel_features.clone(),
            self.mask_queries.clone(),
            self.class_logits.clone(),
            self.mask_logits.clone(),
            labels(&self.gt_labels, vec![h, w]),
            labels(&self.gt_query_labels, vec![self.num_queries()]),
            Tensor::new(
                vec![hh, ww],
                self.ood_mask.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
            )?,
        ];
        for (name, t) in FILES.iter().zip(&tensors) {
            vlt::write(dir.join(format!("{name}.vlt")), t)?;
        }
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>, id: &str) -> Result<Self> {
        let dir = dir.as_ref();
        let mut t: Vec<Tensor<f32>> = FILES
            .iter()
            .map(|name| vlt::read(dir.join(format!("{name}.vlt"))))
            .collect::<Result<_>>()?;
        let to_labels = |t: Tensor<f32>| -> Result<Vec<u16>> {
            t.data()
                .iter()
                .map(|&v| {
                    if v >= 0.0 && v <= IGNORE as f32 && v.fract() == 0.0 {
                        Ok(v as u16)
                    } else {
                        Err(Error::format(dir, format!("invalid label value {v}")))
                    }
                })
                .collect()
        };
        let ood_mask = t.pop().unwrap().data().iter().map(|&v| v != 0.0).collect();
        let gt_query_labels = to_labels(t.pop().unwrap())?;
        let gt_labels = to_labels(t.pop().unwrap())?;
        let mask_logits = t.pop().unwrap();
        let class_logits = t.pop().unwrap();
        let mask_queries = t.pop().unwrap();
        let pixel_features = t.pop().unwrap();
        let scene = SceneBundle {
            id: id.to_string(),
            pixel_features,
            mask_queries,
            class_logits,
            mask_logits,
            gt_labels,
            gt_query_labels,
            ood_mask,
        };
        scene.validate()?;
        Ok(scene)
    }
}

/// Majority-vote downsampling of a full-resolution label map by an integer
/// stride. Ties go to the smallest label value, so [`IGNORE`] only wins a
/// cell it strictly dominates.
pub fn downsample_labels(labels: &[u16], height: usize, width: usize, stride: usize) -> Vec<u16> {
    assert_eq!(labels.len(), height * width);
    assert!(stride >= 1 && height % stride == 0 && width % stride == 0);
    let (h, w) = (height / stride, width / stride);
    let mut out = Vec::with_capacity(h * w);
    let mut votes: Vec<(u16, usize)> = Vec::new();
    for cy in 0..h {
        for cx in 0..w {
            votes.clear();
            for y in cy * stride..(cy + 1) * stride {
                for x in cx * stride..(cx + 1) * stride {
                    let l = labels[y * width + x];
                    match votes.iter_mut().find(|(v, _)| *v == l) {
                        Some((_, n)) => *n += 1,
                        None => votes.push((l, 1)),
                    }
                }
            }
            let best = votes
                .iter()
                .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("nonempty cell");
            out.push(best.0);
        }
    }
    out
}

/// Assigns each decoder query the class of the ground-truth class segment
/// with the highest IoU against its binarized mask (`sigmoid(m) > 0.5`), or
/// [`IGNORE`] when that IoU is below 0.5.
pub fn assign_query_labels(
    mask_logits: &Tensor<f32>,
    full_labels: &[u16],
    num_classes: usize,
) -> Vec<u16> {
    let (nq, hw) = (mask_logits.shape()[0], mask_logits.len() / mask_logits.shape()[0]);
    assert_eq!(full_labels.len(), hw);
    let mut class_area = vec![0usize; num_classes];
    for &l in full_labels {
        if (l as usize) < num_classes {
            class_area[l as usize] += 1;
        }
    }
    (0..nq)
        .map(|q| {
            let logits = &mask_logits.data()[q * hw..(q + 1) * hw];
            let mut inter = vec![0usize; num_classes];
            let mut pred_area = 0usize;
            for (&m, &l) in logits.iter().zip(full_labels) {
                if sigmoid_scalar(m as f64) > 0.5 {
                    pred_area += 1;
                    if (l as usize) < num_classes {
                        inter[l as usize] += 1;
                    }
                }
            }
            let mut best = (IGNORE, 0.0f64);
            for c in 0..num_classes {
                let union = pred_area + class_area[c] - inter[c];
                if union == 0 {
                    continue;
                }
                let iou = inter[c] as f64 / union as f64;
                if iou > best.1 {
                    best = (c as u16, iou);
                }
            }
            if best.1 >= 0.5 {
                best.0
            } else {
                IGNORE
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority_vote_breaks_ties_low() {
        #[rustfmt::skip]
        let full = [
            1, 1, 2, 0,
            2, 2, 0, 2,
            3, IGNORE, 5, 5,
            IGNORE, IGNORE, IGNORE, 5,
        ];
        assert_eq!(downsample_labels(&full, 4, 4, 2), vec![1, 0, IGNORE, 5]);
    }

    #[test]
    fn query_assignment_uses_iou_threshold() {
        // 1x4 image: classes [0, 0, 1, 1].
        let full = [0u16, 0, 1, 1];
        let logits = Tensor::new(
            vec![3, 1, 4],
            vec![
                9.0, 9.0, -9.0, -9.0, // exactly class 0
                -9.0, 9.0, 9.0, 9.0, // {1,2,3} vs class 1 = {2,3}: IoU 2/3
                -9.0, -9.0, -9.0, -9.0, // empty
            ],
        )
        .unwrap();
        assert_eq!(assign_query_labels(&logits, &full, 2), vec![0, 1, IGNORE]);
    }
}
