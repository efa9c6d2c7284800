//! Acceptance run: one PASS/FAIL line per criterion. Exits non-zero when
//! any criterion fails.
//!
//! ```text
//! cargo test --test acceptance
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

use vl_anomaly::aligner::{loss_align, loss_pixel, AlignMode, LossWeights};
use vl_anomaly::embedding::ClassEmbeddingTable;
use vl_anomaly::inference::{fuse, FusionWeights};
use vl_anomaly::metrics::{auprc, auroc, fpr_at_95tpr, PixelEval};
use vl_anomaly::trainer::{grad_check, toy_problem, GradCheckOptions};
use vl_anomaly::Tensor;

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(n: usize, name: &str, elapsed: Duration, o: &Outcome) {
    println!(
        "criterion {n} {name:<34} {}  {} [{:.1}s]",
        if o.pass { "PASS" } else { "FAIL" },
        o.detail,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------- 1

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let (mut checked, mut skipped, mut failed, mut worst, mut worst_abs) = (0, 0, 0, 0.0f64, 0.0f64);
    for seed in 0..25u64 {
        let mode = [AlignMode::Both, AlignMode::Pixel, AlignMode::Mask][seed as usize % 3];
        let t = toy_problem(seed, mode).expect("toy problem");
        let weights = LossWeights::default().for_mode(mode);
        let r = grad_check(&t.scene, &t.prompts, &t.provider, &t.params, weights, GradCheckOptions::default())
            .expect("grad check");
        checked += r.checked();
        skipped += r.skipped();
        worst = r.tensors.iter().map(|c| c.max_rel_err).fold(worst, f64::max);
        worst_abs = r.tensors.iter().map(|c| c.max_abs_err).fold(worst_abs, f64::max);
        if !r.passed() {
            failed += 1;
            eprintln!("seed {seed} ({mode}):\n{}", r.summary());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        pass: failed == 0 && secs < 60.0,
        detail: format!(
            "25 instances, {checked} coordinates ({skipped} kink skips), {failed} failing, worst abs {worst_abs:.1e}, worst rel above abs floor {worst:.1e}"
        ),
    }
}

// ---------------------------------------------------------------- 2

/// Pairwise definition with half credit for ties.
fn auroc_pairs(s: &[f64], l: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in (0..s.len()).filter(|&i| l[i]) {
        for j in (0..s.len()).filter(|&j| !l[j]) {
            den += 1.0;
            if s[i] > s[j] {
                num += 1.0;
            } else if s[i] == s[j] {
                num += 0.5;
            }
        }
    }
    num / den
}

/// `(tp, fp, predicted)` at every distinct threshold, highest first,
/// each counted from scratch.
fn enumerate(s: &[f64], l: &[bool]) -> Vec<(f64, f64, f64)> {
    let mut ts = s.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    ts.into_iter()
        .map(|t| {
            let tp = (0..s.len()).filter(|&i| l[i] && s[i] >= t).count() as f64;
            let fp = (0..s.len()).filter(|&i| !l[i] && s[i] >= t).count() as f64;
            (tp, fp, tp + fp)
        })
        .collect()
}

fn ap_enumerated(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|&&x| x).count() as f64;
    let (mut ap, mut prev) = (0.0, 0.0);
    for (tp, _, k) in enumerate(s, l) {
        ap += (tp / p - prev) * tp / k;
        prev = tp / p;
    }
    ap
}

fn fpr95_enumerated(s: &[f64], l: &[bool]) -> f64 {
    let p = l.iter().filter(|&&x| x).count() as f64;
    let n = l.len() as f64 - p;
    enumerate(s, l)
        .into_iter()
        .find(|&(tp, _, _)| tp / p >= 0.95 - 1e-12)
        .map(|(_, fp, _)| fp / n)
        .expect("lowest threshold reaches TPR 1")
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = 0.0f64;
    let mut tied = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..=1000);
        let levels = rng.random_range(2..=50);
        let s: Vec<f64> = (0..n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let mut l: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        l[0] = true;
        l[1] = false;
        let mut sorted = s.clone();
        sorted.sort_by(|a, b| a.total_cmp(b));
        sorted.dedup();
        if sorted.len() < n {
            tied += 1;
        }
        let e = PixelEval::new(s.clone(), l.clone()).expect("valid instance");
        worst = worst
            .max((auroc(&e) - auroc_pairs(&s, &l)).abs())
            .max((auprc(&e) - ap_enumerated(&s, &l)).abs())
            .max((fpr_at_95tpr(&e) - fpr95_enumerated(&s, &l)).abs());
    }
    Outcome {
        pass: worst <= 1e-9,
        detail: format!("200 instances ({tied} with ties), max abs deviation {worst:.1e}"),
    }
}

// ---------------------------------------------------------------- 3

fn random_maps(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> (Tensor<f64>, Tensor<f64>, Tensor<f64>) {
    let mut unit = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| match rng.random_range(0..10) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random_range(0.0..=1.0),
            })
            .collect()
    };
    (
        Tensor::new(vec![c, h, w], unit(c * h * w)).unwrap(),
        Tensor::new(vec![c, h, w], unit(c * h * w)).unwrap(),
        Tensor::new(vec![c], unit(c)).unwrap(),
    )
}

fn permute(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let c = perm.len();
    let block = t.len() / c;
    let mut out = t.clone();
    for (k, &src) in perm.iter().enumerate() {
        out.data_mut()[k * block..(k + 1) * block].copy_from_slice(&t.data()[src * block..(src + 1) * block]);
    }
    out
}

fn fusion_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let w = FusionWeights::default();
    let (mut bounds, mut monotone, mut perm_ok) = (0, 0, 0);
    for _ in 0..1000 {
        let c = rng.random_range(1..=6);
        let (h, wd) = (rng.random_range(1..=5), rng.random_range(1..=5));
        let (conf, text, img) = random_maps(&mut rng, c, h, wd);
        let f = fuse(&conf, &text, &img, w).unwrap();
        if f.data().iter().all(|v| (0.0..=1.0).contains(v)) {
            bounds += 1;
        }
        // Raise one entry of one source.
        let mut bumped = [conf.clone(), text.clone(), img.clone()];
        let which = rng.random_range(0..3);
        let idx = rng.random_range(0..bumped[which].len());
        let v = &mut bumped[which].data_mut()[idx];
        *v = (*v + rng.random_range(0.0..=1.0)).min(1.0);
        let g = fuse(&bumped[0], &bumped[1], &bumped[2], w).unwrap();
        if g.data().iter().zip(f.data()).all(|(a, b)| a <= b) {
            monotone += 1;
        }
        let mut perm: Vec<usize> = (0..c).collect();
        for i in (1..c).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let p = fuse(&permute(&conf, &perm), &permute(&text, &perm), &permute(&img, &perm), w).unwrap();
        if p.data().iter().zip(f.data()).all(|(a, b)| a.to_bits() == b.to_bits()) {
            perm_ok += 1;
        }
    }
    Outcome {
        pass: bounds == 1000 && monotone == 1000 && perm_ok == 1000,
        detail: format!("1000 cases: bounds {bounds}, monotone {monotone}, permutation bit-identical {perm_ok}"),
    }
}

// ---------------------------------------------------------------- 4

fn loss_identities() -> Outcome {
    let mut ok = true;
    let mut worst_uniform = 0.0f64;
    for c in 2..=8usize {
        // Every pixel orthogonal to every class: all similarities equal.
        let d = c + 1;
        let table = ClassEmbeddingTable {
            embeddings: Tensor::from_fn(vec![c, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
            normalized: true,
        };
        let v = Tensor::from_fn(vec![2, 3, d], |i| if i % d == c { 1.0 } else { 0.0 });
        let labels: Vec<u16> = (0..6).map(|i| (i % c) as u16).collect();
        let loss = loss_pixel(&v, &table, &labels, 0.07).unwrap();
        worst_uniform = worst_uniform.max((loss - (c as f64).ln()).abs());
    }
    ok &= worst_uniform <= 1e-6;
    let mut exact = 0;
    for seed in 0..10 {
        let t = toy_problem(seed, AlignMode::Both).unwrap();
        let (b, _) = loss_align(&t.scene, &t.prompts, &t.provider, &t.params, LossWeights::default()).unwrap();
        if b.total == (b.pixel + b.mask) / 2.0 {
            exact += 1;
        }
    }
    ok &= exact == 10;
    Outcome {
        pass: ok,
        detail: format!("uniform |L - log C| max {worst_uniform:.1e}; 0.5/0.5 total exact on {exact}/10"),
    }
}

// ---------------------------------------------------------------- 5-7

fn vla(args: &[&str]) -> Result<String, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_vla"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!("vla {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

struct Runs {
    full: Value,
    conf_only: Value,
    mask_only: Value,
    both_seconds: f64,
}

/// gen, train (both and mask-only), infer (full and conf-only), eval.
fn run_pipeline(root: &Path) -> Result<Runs, String> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    let start = Instant::now();
    vla(&["gen", "--out", &p("scenes")])?;
    vla(&["train", "--scenes", &p("scenes"), "--out", &p("model")])?;
    vla(&["infer", "--scenes", &p("scenes"), "--checkpoint", &p("model"), "--out", &p("maps")])?;
    vla(&["eval", "--scenes", &p("scenes"), "--maps", &p("maps"), "--out", &p("report")])?;
    let both_seconds = start.elapsed().as_secs_f64();
    vla(&["infer", "--scenes", &p("scenes"), "--checkpoint", &p("model"), "--out", &p("maps_conf"), "--sources", "conf"])?;
    vla(&["eval", "--scenes", &p("scenes"), "--maps", &p("maps_conf"), "--out", &p("report_conf")])?;
    vla(&["train", "--scenes", &p("scenes"), "--out", &p("model_mask"), "--align", "mask"])?;
    vla(&["infer", "--scenes", &p("scenes"), "--checkpoint", &p("model_mask"), "--out", &p("maps_mask")])?;
    vla(&["eval", "--scenes", &p("scenes"), "--maps", &p("maps_mask"), "--out", &p("report_mask")])?;
    let read = |d: &str| -> Result<Value, String> {
        let text = std::fs::read_to_string(root.join(d).join("report.json")).map_err(|e| e.to_string())?;
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    Ok(Runs {
        full: read("report")?,
        conf_only: read("report_conf")?,
        mask_only: read("report_mask")?,
        both_seconds,
    })
}

fn metric(v: &Value, key: &str) -> f64 {
    v["pixel"][key].as_f64().expect("metric present")
}

fn synthetic_benchmark(r: &Runs) -> Outcome {
    let (auroc, fpr, ap) = (metric(&r.full, "auroc"), metric(&r.full, "fpr95"), metric(&r.full, "auprc"));
    let ap_conf = metric(&r.conf_only, "auprc");
    Outcome {
        pass: auroc >= 0.95 && fpr <= 0.10 && ap_conf < ap && r.both_seconds < 300.0,
        detail: format!(
            "AuROC {auroc:.4} (>= 0.95), FPR95 {fpr:.4} (<= 0.10), AuPRC conf-only {ap_conf:.4} < full {ap:.4}, gen+train+infer+eval {:.0}s",
            r.both_seconds
        ),
    }
}

fn ablation_direction(r: &Runs) -> Outcome {
    let (both, mask) = (metric(&r.full, "auroc"), metric(&r.mask_only, "auroc"));
    Outcome {
        pass: both > mask,
        detail: format!("AuROC pixel+mask {both:.4} > mask-only {mask:.4}"),
    }
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).expect("readable dir") {
            let path = entry.expect("dir entry").path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, std::fs::read(&path).expect("readable file"));
            }
        }
    }
    out
}

fn determinism(a: &Path, b: &Path) -> Outcome {
    let (fa, fb) = (files(a), files(b));
    let differing: Vec<_> = fa
        .iter()
        .filter(|(k, v)| fb.get(*k) != Some(*v))
        .map(|(k, _)| k.display().to_string())
        .collect();
    let same_set = fa.keys().eq(fb.keys());
    Outcome {
        pass: same_set && differing.is_empty() && !fa.is_empty(),
        detail: format!(
            "{} files across gen/train/infer/eval re-runs, {} differing{}",
            fa.len(),
            differing.len(),
            differing.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    }
}

fn main() {
    let mut all = true;
    let mut check = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let o = f();
        report(n, name, start.elapsed(), &o);
        all &= o.pass;
    };
    check(1, "gradient correctness", &mut gradient_correctness);
    check(2, "metric oracle equivalence", &mut metric_oracles);
    check(3, "fusion contract", &mut fusion_contract);
    check(4, "loss identities", &mut loss_identities);

    let tmp = tempfile::tempdir().expect("temp dir");
    let (a, b) = (tmp.path().join("run_a"), tmp.path().join("run_b"));
    let start = Instant::now();
    let first = run_pipeline(&a);
    let elapsed = start.elapsed();
    match &first {
        Ok(r) => {
            let o = synthetic_benchmark(r);
            report(5, "end-to-end synthetic benchmark", elapsed, &o);
            all &= o.pass;
            let o = ablation_direction(r);
            report(6, "ablation direction", Duration::ZERO, &o);
            all &= o.pass;
        }
        Err(e) => {
            for (n, name) in [(5, "end-to-end synthetic benchmark"), (6, "ablation direction")] {
                report(n, name, elapsed, &Outcome { pass: false, detail: e.clone() });
            }
            all = false;
        }
    }
    let start = Instant::now();
    let o = match run_pipeline(&b) {
        Ok(_) if first.is_ok() => determinism(&a, &b),
        Ok(_) => Outcome { pass: false, detail: "first run failed".into() },
        Err(e) => Outcome { pass: false, detail: e },
    };
    report(7, "determinism", start.elapsed(), &o);
    all &= o.pass;

    if !all {
        std::process::exit(1);
    }
}
