//! Seeded generator of small synthetic scenes: Voronoi class regions over a
//! feature grid, known-class features drawn around class prototypes, and
//! injected out-of-distribution blobs drawn around held-out prototypes.
//!
//! The decoder side is emulated too: one query per region (plus no-object
//! padding) with peaked class logits and saturated mask logits. Two knobs
//! make the detector imperfect in the way real mask classifiers are:
//! "hard" regions get a low class margin, and "absorbed" blobs are swallowed
//! by the mask of the region they sit in, so detector confidence alone cannot
//! see them.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::embedding::{gaussian, keyed_rng, SyntheticEncoder};
use crate::error::{Error, Result};
use crate::scene::{downsample_labels, SceneBundle, IGNORE};
use crate::tensor::{dot, Tensor};

/// Attempts allowed for placing one blob or drawing one prototype.
const MAX_RETRIES: usize = 200;
/// Largest allowed pairwise cosine similarity between prototypes.
pub const MAX_PROTOTYPE_COSINE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    /// Feature grid `(h, w)`.
    pub feature_size: (usize, usize),
    /// Output pixels per feature cell along each axis.
    pub stride: usize,
    pub num_classes: usize,
    /// Held-out prototypes available to OOD blobs.
    pub num_ood: usize,
    pub feature_dim: usize,
    pub query_dim: usize,
    /// Text embedding width.
    pub embed_dim: usize,
    pub noise_sigma: f64,
    /// Voronoi regions per scene, inclusive range.
    pub regions: (usize, usize),
    /// OOD blobs per scene, inclusive range.
    pub blobs: (usize, usize),
    /// Blob semi-axis range in feature cells.
    pub blob_radius: (f64, f64),
    pub num_queries: usize,
    /// Per-scene class-logit margin range.
    pub margin: (f64, f64),
    /// Probability that a region is hard, and the margin range it then uses.
    pub hard_prob: f64,
    pub hard_margin: (f64, f64),
    /// Probability that a blob is absorbed into its covering region's mask.
    pub absorb_prob: f64,
    /// Magnitude of the saturated mask logits.
    pub mask_logit: f64,
    /// Mask-logit range inside an absorbed blob: the covering query claims
    /// the blob, but with reduced certainty.
    pub absorbed_logit: (f64, f64),
    /// Largest cosine between a held-out prototype and any known one
    /// (at most [`MAX_PROTOTYPE_COSINE`]).
    pub ood_max_cosine: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            feature_size: (12, 12),
            stride: 2,
            num_classes: 4,
            num_ood: 2,
            feature_dim: 16,
            query_dim: 16,
            embed_dim: 16,
            noise_sigma: 0.15,
            regions: (3, 6),
            blobs: (0, 2),
            blob_radius: (1.0, 2.2),
            num_queries: 8,
            margin: (3.0, 5.0),
            hard_prob: 0.05,
            hard_margin: (0.5, 1.5),
            absorb_prob: 0.3,
            mask_logit: 8.0,
            absorbed_logit: (1.0, 4.0),
            ood_max_cosine: 0.2,
        }
    }
}

impl SynthConfig {
    /// Smallest useful instance, used by gradient checks: 4x4 grid, 3
    /// classes, 3 queries, width 8.
    pub fn toy(seed: u64) -> Self {
        Self {
            seed,
            feature_size: (4, 4),
            stride: 1,
            num_classes: 3,
            num_ood: 1,
            feature_dim: 8,
            query_dim: 8,
            embed_dim: 8,
            noise_sigma: 0.3,
            regions: (2, 3),
            blobs: (0, 1),
            blob_radius: (0.6, 0.9),
            num_queries: 3,
            margin: (2.0, 4.0),
            hard_prob: 0.0,
            hard_margin: (0.5, 1.0),
            absorb_prob: 0.0,
            mask_logit: 6.0,
            absorbed_logit: (6.0, 6.0),
            ood_max_cosine: MAX_PROTOTYPE_COSINE,
        }
    }

    pub fn output_size(&self) -> (usize, usize) {
        (self.feature_size.0 * self.stride, self.feature_size.1 * self.stride)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("synth: {m}")));
        let (h, w) = self.feature_size;
        if h == 0 || w == 0 || self.stride == 0 {
            return bad("grid size and stride must be positive".into());
        }
        if self.num_classes < 2 || self.num_ood == 0 {
            return bad("need at least 2 known classes and 1 OOD prototype".into());
        }
        if self.num_classes > IGNORE as usize {
            return bad("too many classes".into());
        }
        if self.feature_dim == 0 || self.query_dim == 0 || self.embed_dim == 0 {
            return bad("widths must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be finite and non-negative".into());
        }
        if self.regions.0 == 0 || self.regions.0 > self.regions.1 {
            return bad(format!("invalid region range {:?}", self.regions));
        }
        if self.regions.1 > self.num_queries {
            return bad(format!(
                "{} regions need at least as many queries, got {}",
                self.regions.1, self.num_queries
            ));
        }
        if self.blobs.0 > self.blobs.1 {
            return bad(format!("invalid blob range {:?}", self.blobs));
        }
        let (r0, r1) = self.blob_radius;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad(format!("invalid blob radius range {:?}", self.blob_radius));
        }
        for (name, (a, b)) in [
            ("margin", self.margin),
            ("hard_margin", self.hard_margin),
            ("absorbed_logit", self.absorbed_logit),
        ] {
            if !(a.is_finite() && b.is_finite() && a <= b) {
                return bad(format!("invalid {name} range ({a}, {b})"));
            }
        }
        if !(self.ood_max_cosine > -1.0 && self.ood_max_cosine <= MAX_PROTOTYPE_COSINE) {
            return bad(format!(
                "ood_max_cosine must lie in (-1, {MAX_PROTOTYPE_COSINE}], got {}",
                self.ood_max_cosine
            ));
        }
        for (name, p) in [("hard_prob", self.hard_prob), ("absorb_prob", self.absorb_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.mask_logit > 0.0 && self.mask_logit.is_finite()) {
            return bad("mask_logit must be positive".into());
        }
        Ok(())
    }
}

/// Prototypes shared by the feature generator and the text-encoder
/// stand-in, so perfect alignment is reachable in principle.
#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    /// `[C_k x d_v]` unit-norm known-class prototypes.
    pub known: Tensor<f64>,
    /// `[n_ood x d_v]` unit-norm held-out prototypes.
    pub ood: Tensor<f64>,
}

/// `[rows x cols]` matrix with ones on the leading diagonal.
fn rect_identity(rows: usize, cols: usize) -> Tensor<f64> {
    Tensor::from_fn(vec![rows, cols], |i| if i / cols == i % cols { 1.0 } else { 0.0 })
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = dot(&v, &v).sqrt();
    v.into_iter().map(|x| (x / n) as f32 as f64).collect()
}

impl SynthWorld {
    pub fn new(config: SynthConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = keyed_rng("synth-prototypes", config.seed);
        let total = config.num_classes + config.num_ood;
        let d = config.feature_dim;
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(total);
        let mut attempts = 0;
        while protos.len() < total {
            attempts += 1;
            if attempts > MAX_RETRIES * total {
                return Err(Error::Generation(format!(
                    "could not draw {total} prototypes in {d} dimensions with pairwise cosine < {MAX_PROTOTYPE_COSINE}"
                )));
            }
            let p = unit(gaussian(&mut rng, d, 1.0));
            let bound = |i: usize| {
                if protos.len() >= config.num_classes && i < config.num_classes {
                    config.ood_max_cosine
                } else {
                    MAX_PROTOTYPE_COSINE
                }
            };
            if protos.iter().enumerate().all(|(i, q)| dot(q, &p) < bound(i)) {
                protos.push(p);
            }
        }
        let ood = protos.split_off(config.num_classes);
        Ok(Self {
            known: Tensor::new(vec![config.num_classes, d], protos.concat())?,
            ood: Tensor::new(vec![config.num_ood, d], ood.concat())?,
            config,
        })
    }

    pub fn class_names(&self) -> Vec<String> {
        (0..self.config.num_classes).map(|k| format!("class{k:02}")).collect()
    }

    /// Feature-to-text map: the leading-diagonal identity.
    pub fn embedding_map(&self) -> Tensor<f64> {
        rect_identity(self.config.feature_dim, self.config.embed_dim)
    }

    /// Text/image encoder whose class-name tokens are the mapped known
    /// prototypes and whose image projection is the same map.
    pub fn encoder(&self) -> SyntheticEncoder {
        let map = self.embedding_map();
        let mut enc = SyntheticEncoder::new(self.config.embed_dim, self.config.seed)
            .with_image_projection(map.clone());
        for (k, name) in self.class_names().iter().enumerate() {
            let row = Tensor::new(vec![1, self.config.feature_dim], self.known.row(k).to_vec())
                .expect("prototype row");
            let token = crate::tensor::matmul(&row, &map).expect("map shape");
            enc = enc.with_word(name, Tensor::vector(unit(token.into_data())));
        }
        enc
    }
}

/// One injected blob, as placed.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobRecord {
    pub scene: usize,
    /// Centre in feature-cell coordinates.
    pub center: (f64, f64),
    pub radii: (f64, f64),
    pub prototype: usize,
    /// Feature cells covered.
    pub cells: usize,
    /// Output pixels covered (`cells * stride^2`).
    pub area: usize,
    /// Whether the covering region's mask swallows the blob.
    pub absorbed: bool,
}

#[derive(Debug, Clone)]
pub struct Generated {
    pub scenes: Vec<SceneBundle>,
    pub blobs: Vec<BlobRecord>,
}

/// Generates `n` scenes. Scene `i` depends only on `(config, i)`.
pub fn generate(world: &SynthWorld, n: usize) -> Result<Generated> {
    let per_scene: Vec<(SceneBundle, Vec<BlobRecord>)> = (0..n)
        .into_par_iter()
        .map(|i| generate_scene(world, i))
        .collect::<Result<_>>()?;
    let mut scenes = Vec::with_capacity(n);
    let mut blobs = Vec::new();
    for (s, b) in per_scene {
        scenes.push(s);
        blobs.extend(b);
    }
    Ok(Generated { scenes, blobs })
}

struct Blob {
    center: (f64, f64),
    radii: (f64, f64),
    cells: Vec<usize>,
}

/// Jittered ellipse over the feature grid; the centre cell is always in.
fn draw_blob(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> Blob {
    let (h, w) = cfg.feature_size;
    let (r0, r1) = cfg.blob_radius;
    let center = (rng.random_range(0.0..h as f64), rng.random_range(0.0..w as f64));
    let radii = (rng.random_range(r0..=r1), rng.random_range(r0..=r1));
    let (amp, phase) = (rng.random_range(0.0..0.25), rng.random_range(0.0..std::f64::consts::TAU));
    let mut cells = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let dy = (y as f64 + 0.5 - center.0) / radii.0;
            let dx = (x as f64 + 0.5 - center.1) / radii.1;
            let limit = 1.0 + amp * (3.0 * dy.atan2(dx) + phase).sin();
            let is_center = y == center.0 as usize && x == center.1 as usize;
            if is_center || dy * dy + dx * dx <= limit * limit {
                cells.push(y * w + x);
            }
        }
    }
    Blob { center, radii, cells }
}

/// True when `a` overlaps or 8-touches any cell in `taken`.
fn touches(a: &[usize], taken: &[bool], w: usize, h: usize) -> bool {
    a.iter().any(|&c| {
        let (y, x) = ((c / w) as isize, (c % w) as isize);
        (-1..=1).any(|dy| {
            (-1..=1).any(|dx| {
                let (ny, nx) = (y + dy, x + dx);
                ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w && taken[ny as usize * w + nx as usize]
            })
        })
    })
}

fn uniform(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.random_range(a..=b)
    }
}

fn generate_scene(world: &SynthWorld, index: usize) -> Result<(SceneBundle, Vec<BlobRecord>)> {
    let cfg = &world.config;
    let mut rng = keyed_rng(&format!("synth-scene-{index}"), cfg.seed);
    let (h, w) = cfg.feature_size;
    let s = cfg.stride;
    let (hh, ww) = cfg.output_size();
    let (dv, dq, c) = (cfg.feature_dim, cfg.query_dim, cfg.num_classes);

    // Voronoi regions at output resolution.
    let n_regions = rng.random_range(cfg.regions.0..=cfg.regions.1);
    let sites: Vec<(f64, f64)> = (0..n_regions)
        .map(|_| (rng.random_range(0.0..hh as f64), rng.random_range(0.0..ww as f64)))
        .collect();
    let classes: Vec<u16> = (0..n_regions).map(|_| rng.random_range(0..c) as u16).collect();
    let mut region = vec![0u16; hh * ww];
    for y in 0..hh {
        for x in 0..ww {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best = (0usize, f64::INFINITY);
            for (r, &(sy, sx)) in sites.iter().enumerate() {
                let d2 = (py - sy).powi(2) + (px - sx).powi(2);
                if d2 < best.1 {
                    best = (r, d2);
                }
            }
            region[y * ww + x] = best.0 as u16;
        }
    }

    // OOD blobs on the feature grid.
    let n_blobs = rng.random_range(cfg.blobs.0..=cfg.blobs.1);
    let mut taken = vec![false; h * w];
    let mut blob_of_cell = vec![usize::MAX; h * w];
    let mut records = Vec::with_capacity(n_blobs);
    let mut blob_logit = Vec::with_capacity(n_blobs);
    for b in 0..n_blobs {
        let mut placed = None;
        for _ in 0..MAX_RETRIES {
            let blob = draw_blob(&mut rng, cfg);
            if blob.cells.len() * 4 <= h * w && !touches(&blob.cells, &taken, w, h) {
                placed = Some(blob);
                break;
            }
        }
        let blob = placed.ok_or_else(|| {
            Error::Generation(format!(
                "scene {index}: could not place blob {b} after {MAX_RETRIES} attempts"
            ))
        })?;
        for &cell in &blob.cells {
            taken[cell] = true;
            blob_of_cell[cell] = b;
        }
        let absorbed = rng.random_bool(cfg.absorb_prob);
        blob_logit.push(uniform(&mut rng, cfg.absorbed_logit) as f32);
        records.push(BlobRecord {
            scene: index,
            center: blob.center,
            radii: blob.radii,
            prototype: rng.random_range(0..cfg.num_ood),
            cells: blob.cells.len(),
            area: blob.cells.len() * s * s,
            absorbed,
        });
    }

    // Full-resolution labels and OOD mask; blob pixels carry IGNORE.
    let cell_of = |y: usize, x: usize| (y / s) * w + x / s;
    let mut full_labels = vec![0u16; hh * ww];
    let mut ood_mask = vec![false; hh * ww];
    // Region membership used for masks and queries: absorbed blobs keep the
    // covering region's id, others are cut out.
    let mut mask_region = region.clone();
    let covering: Vec<u16> = records
        .iter()
        .map(|r| {
            let (y, x) = ((r.center.0 * s as f64) as usize, (r.center.1 * s as f64) as usize);
            region[y.min(hh - 1) * ww + x.min(ww - 1)]
        })
        .collect();
    for y in 0..hh {
        for x in 0..ww {
            let p = y * ww + x;
            let b = blob_of_cell[cell_of(y, x)];
            if b == usize::MAX {
                full_labels[p] = classes[region[p] as usize];
            } else {
                full_labels[p] = IGNORE;
                ood_mask[p] = true;
                mask_region[p] = if records[b].absorbed { covering[b] } else { IGNORE };
            }
        }
    }
    let gt_labels = downsample_labels(&full_labels, hh, ww, s);

    // Pixel features at feature resolution.
    let mut features = Vec::with_capacity(h * w * dv);
    for cell in 0..h * w {
        let proto = match blob_of_cell[cell] {
            usize::MAX => world.known.row(gt_labels[cell] as usize),
            b => world.ood.row(records[b].prototype),
        };
        let noise = gaussian(&mut rng, dv, cfg.noise_sigma.max(f64::MIN_POSITIVE));
        for (j, &p) in proto.iter().enumerate() {
            let n = if cfg.noise_sigma == 0.0 { 0.0 } else { noise[j] };
            features.push((p + n) as f32);
        }
    }
    let pixel_features = Tensor::new(vec![h, w, dv], features)?;

    // Decoder queries: one per region, then no-object padding.
    let cell_region = downsample_labels(&mask_region, hh, ww, s);
    let nq = cfg.num_queries;
    let scene_margin = uniform(&mut rng, cfg.margin);
    let mut queries = Vec::with_capacity(nq * dq);
    let mut class_logits = Vec::with_capacity(nq * c);
    let mut mask_logits = Vec::with_capacity(nq * hh * ww);
    let mut gt_query_labels = Vec::with_capacity(nq);
    for q in 0..nq {
        if q < n_regions {
            let cells: Vec<usize> = (0..h * w).filter(|&i| cell_region[i] == q as u16).collect();
            let mean: Vec<f64> = if cells.is_empty() {
                world.known.row(classes[q] as usize).to_vec()
            } else {
                (0..dv)
                    .map(|j| {
                        cells.iter().map(|&i| pixel_features.data()[i * dv + j] as f64).sum::<f64>()
                            / cells.len() as f64
                    })
                    .collect()
            };
            let noise = gaussian(&mut rng, dq, 0.5 * cfg.noise_sigma + 1e-3);
            queries.extend((0..dq).map(|j| (mean.get(j).copied().unwrap_or(0.0) + noise[j]) as f32));
            let margin = if rng.random_bool(cfg.hard_prob) {
                uniform(&mut rng, cfg.hard_margin)
            } else {
                scene_margin
            };
            let jitter = gaussian(&mut rng, c, 0.1);
            class_logits.extend((0..c).map(|k| {
                let peak = if k == classes[q] as usize { margin } else { 0.0 };
                (peak + jitter[k]) as f32
            }));
            let m = cfg.mask_logit as f32;
            mask_logits.extend(mask_region.iter().enumerate().map(|(p, &r)| {
                if r != q as u16 {
                    -m
                } else {
                    match blob_of_cell[cell_of(p / ww, p % ww)] {
                        usize::MAX => m,
                        b => blob_logit[b],
                    }
                }
            }));
            gt_query_labels.push(classes[q]);
        } else {
            queries.extend(gaussian(&mut rng, dq, 1.0 / (dq as f64).sqrt()).iter().map(|&v| v as f32));
            class_logits.extend(gaussian(&mut rng, c, 0.5).iter().map(|&v| v as f32));
            mask_logits.extend(std::iter::repeat_n(-cfg.mask_logit as f32, hh * ww));
            gt_query_labels.push(IGNORE);
        }
    }

    let scene = SceneBundle {
        id: format!("scene_{index:04}"),
        pixel_features,
        mask_queries: Tensor::new(vec![nq, dq], queries)?,
        class_logits: Tensor::new(vec![nq, c], class_logits)?,
        mask_logits: Tensor::new(vec![nq, hh, ww], mask_logits)?,
        gt_labels,
        gt_query_labels,
        ood_mask,
    };
    scene.validate()?;
    Ok((scene, records))
}

/// Deterministic train/eval split. Evaluation scenes are drawn only from
/// scenes containing at least one OOD pixel; both halves keep index order.
pub fn split(
    scenes: Vec<SceneBundle>,
    train_fraction: f64,
    seed: u64,
) -> Result<(Vec<SceneBundle>, Vec<SceneBundle>)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::Config(format!(
            "train fraction must lie strictly between 0 and 1, got {train_fraction}"
        )));
    }
    let n = scenes.len();
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_eval = n.saturating_sub(n_train);
    if n_train == 0 || n_eval == 0 {
        return Err(Error::Config(format!(
            "fraction {train_fraction} of {n} scenes leaves an empty split"
        )));
    }
    let mut candidates: Vec<usize> = (0..n).filter(|&i| scenes[i].has_ood()).collect();
    if candidates.len() < n_eval {
        return Err(Error::Generation(format!(
            "{n_eval} evaluation scenes need OOD content but only {} scenes have any",
            candidates.len()
        )));
    }
    let mut rng = keyed_rng("synth-split", seed);
    for i in (1..candidates.len()).rev() {
        candidates.swap(i, rng.random_range(0..=i));
    }
    let mut is_eval = vec![false; n];
    for &i in &candidates[..n_eval] {
        is_eval[i] = true;
    }
    let (mut train, mut eval) = (Vec::with_capacity(n_train), Vec::with_capacity(n_eval));
    for (i, s) in scenes.into_iter().enumerate() {
        if is_eval[i] {
            eval.push(s);
        } else {
            train.push(s);
        }
    }
    Ok((train, eval))
}
