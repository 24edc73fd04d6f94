//! Acceptance suite. Every test prints one `ACCEPTANCE PASS|FAIL` line.
//!
//! Run with `cargo test -p chromoseg --test acceptance -- --test-threads=1`
//! to see the lines in order.

mod common;

use std::time::Instant;

use candle_core::{DType, Device, Tensor, Var};
use chromoseg::data::{ClassMap, PreparedSample};
use chromoseg::discriminator::{build_discriminator, DiscriminatorConfig};
use chromoseg::generator::{build_generator, channel_plan, node_order, GeneratorConfig};
use chromoseg::losses::{cross_entropy, dice_loss, lovasz_softmax, LossConfig, LossKind};
use chromoseg::metrics::{evaluate_sample, Status};
use chromoseg::train::{evaluate, load_generator, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const C: usize = 4;

fn verdict(name: &str, pass: bool, detail: &str) {
    let line = format!("ACCEPTANCE {} {name}: {detail}\n", if pass { "PASS" } else { "FAIL" });
    std::io::Write::write_all(&mut std::io::stderr(), line.as_bytes()).unwrap();
    assert!(pass, "{name}: {detail}");
}

// ---------------------------------------------------------------- Lovász

/// Mean over classes of `1 - |P∩G| / |P∪G|`, empty unions scoring 0.
fn jaccard_loss_by_counting(pred: &[u8], gt: &[u8]) -> f64 {
    let mut total = 0.0;
    for c in 0..C as u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt) {
            inter += usize::from(p == c && g == c);
            union += usize::from(p == c || g == c);
        }
        if union > 0 {
            total += 1.0 - inter as f64 / union as f64;
        }
    }
    total / C as f64
}

fn decode(mut code: u64, pixels: usize) -> Vec<u8> {
    (0..pixels)
        .map(|_| {
            let d = (code % C as u64) as u8;
            code /= C as u64;
            d
        })
        .collect()
}

/// Lovász loss of each vertex pair, one image per pair in a single batch.
fn lovasz_batch(pairs: &[(Vec<u8>, Vec<u8>)], pixels: usize) -> Vec<f64> {
    let n = pairs.len();
    let mut probs = vec![0f64; n * C * pixels];
    let mut labels = Vec::with_capacity(n * pixels);
    for (b, (pred, gt)) in pairs.iter().enumerate() {
        for (p, &k) in pred.iter().enumerate() {
            probs[(b * C + usize::from(k)) * pixels + p] = 1.0;
        }
        labels.extend_from_slice(gt);
    }
    let probs = Tensor::from_vec(probs, (n, C, 1, pixels), &Device::Cpu).unwrap();
    let cfg = LossConfig::default();
    // The batch loss is the mean of per-image losses; recover each by
    // evaluating images one at a time through narrow views.
    (0..n)
        .map(|b| {
            let one = probs.narrow(0, b, 1).unwrap();
            let l = lovasz_softmax(&one, &labels[b * pixels..(b + 1) * pixels], &cfg).unwrap();
            l.to_scalar::<f64>().unwrap()
        })
        .collect()
}

#[test]
fn lovasz_vertex_oracle() {
    let started = Instant::now();
    let mut worst = 0f64;
    let mut cases = 0usize;
    // Exhaustive over all prediction/label pairs for up to 3 pixels
    // (4^(2p) ≤ 4096 pairs), then 10^5 random pairs for each of 4..=8 pixels.
    for pixels in 1..=3usize {
        let total = (C as u64).pow(2 * pixels as u32);
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..total)
            .map(|code| {
                let all = decode(code, 2 * pixels);
                (all[..pixels].to_vec(), all[pixels..].to_vec())
            })
            .collect();
        for ((pred, gt), got) in pairs.iter().zip(lovasz_batch(&pairs, pixels)) {
            worst = worst.max((got - jaccard_loss_by_counting(pred, gt)).abs());
        }
        cases += pairs.len();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for pixels in 4..=8usize {
        let pairs: Vec<(Vec<u8>, Vec<u8>)> = (0..100_000)
            .map(|_| {
                let p = (0..pixels).map(|_| rng.random_range(0..C as u8)).collect();
                let g = (0..pixels).map(|_| rng.random_range(0..C as u8)).collect();
                (p, g)
            })
            .collect();
        for ((pred, gt), got) in pairs.iter().zip(lovasz_batch(&pairs, pixels)) {
            worst = worst.max((got - jaccard_loss_by_counting(pred, gt)).abs());
        }
        cases += pairs.len();
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        "lovasz_vertex_oracle",
        worst < 1e-9 && secs < 60.0,
        &format!("{cases} assignments, max |Δ| = {worst:.3e}, {secs:.1} s"),
    );
}

// ---------------------------------------------------------------- gradients

type LossFn = fn(&Tensor, &[u8]) -> Tensor;

fn lovasz_fn(p: &Tensor, y: &[u8]) -> Tensor {
    lovasz_softmax(p, y, &LossConfig::default()).unwrap()
}

fn ce_fn(p: &Tensor, y: &[u8]) -> Tensor {
    cross_entropy(p, y, None).unwrap()
}

fn dice_fn(p: &Tensor, y: &[u8]) -> Tensor {
    dice_loss(p, y, None).unwrap()
}

const SHAPE: (usize, usize, usize, usize) = (2, C, 3, 3);
const STEP: f64 = 1e-4;

/// Random softmax probabilities whose per-class error values (per image) are
/// separated by more than the finite-difference reach, so no perturbation
/// changes the sort order.
fn tie_free_input(rng: &mut ChaCha8Rng) -> (Vec<f64>, Vec<u8>) {
    let (n, c, h, w) = SHAPE;
    let plane = h * w;
    loop {
        let logits: Vec<f64> = (0..n * c * plane).map(|_| rng.random_range(-2.0..2.0)).collect();
        let labels: Vec<u8> = (0..n * plane).map(|_| rng.random_range(0..c as u8)).collect();
        let mut probs = vec![0f64; logits.len()];
        for b in 0..n {
            for p in 0..plane {
                let z: f64 = (0..c).map(|k| logits[(b * c + k) * plane + p].exp()).sum();
                for k in 0..c {
                    let i = (b * c + k) * plane + p;
                    probs[i] = logits[i].exp() / z;
                }
            }
        }
        let separated = (0..n).all(|b| {
            (0..c).all(|k| {
                let mut err: Vec<f64> = (0..plane)
                    .map(|p| {
                        let v = probs[(b * c + k) * plane + p];
                        if usize::from(labels[b * plane + p]) == k {
                            1.0 - v
                        } else {
                            v
                        }
                    })
                    .collect();
                err.sort_by(f64::total_cmp);
                err.windows(2).all(|d| d[1] - d[0] > 4.0 * STEP)
            })
        });
        if separated {
            return (probs, labels);
        }
    }
}

fn relative_gradient_error(f: LossFn, probs: &[f64], labels: &[u8]) -> f64 {
    let dev = Device::Cpu;
    let var = Var::from_tensor(&Tensor::from_vec(probs.to_vec(), SHAPE, &dev).unwrap()).unwrap();
    let grads = f(var.as_tensor(), labels).backward().unwrap();
    let analytic = grads.get(&var).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
    let eval = |v: Vec<f64>| -> f64 {
        let t = Tensor::from_vec(v, SHAPE, &dev).unwrap();
        f(&t, labels).to_scalar::<f64>().unwrap()
    };
    let mut diff2 = 0.0;
    let mut a2 = 0.0;
    let mut n2 = 0.0;
    for i in 0..probs.len() {
        let mut up = probs.to_vec();
        let mut down = probs.to_vec();
        up[i] += STEP;
        down[i] -= STEP;
        let numeric = (eval(up) - eval(down)) / (2.0 * STEP);
        diff2 += (analytic[i] - numeric).powi(2);
        a2 += analytic[i].powi(2);
        n2 += numeric.powi(2);
    }
    diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-12)
}

#[test]
fn gradient_checks() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let inputs: Vec<(Vec<f64>, Vec<u8>)> = (0..100).map(|_| tie_free_input(&mut rng)).collect();
    let mut details = Vec::new();
    let mut pass = true;
    for (name, f) in [("lovasz", lovasz_fn as LossFn), ("ce", ce_fn), ("dice", dice_fn)] {
        let worst = inputs
            .iter()
            .map(|(p, y)| relative_gradient_error(f, p, y))
            .fold(0f64, f64::max);
        pass &= worst < 1e-3;
        details.push(format!("{name} max rel err {worst:.2e}"));
    }
    let secs = started.elapsed().as_secs_f64();
    pass &= secs < 60.0;
    details.push(format!("100 inputs, {secs:.1} s"));
    verdict("gradient_checks", pass, &details.join(", "));
}

// ---------------------------------------------------------------- metrics

struct Brute {
    acc: f64,
    /// (dice, iou, precision, recall, fnr, fpr), `None` when undefined.
    ratios: Vec<[Option<f64>; 6]>,
    hausdorff: Vec<Option<f64>>,
}

fn brute_metrics(pred: &[u8], gt: &[u8], side: usize) -> Brute {
    let total = pred.len();
    let correct = pred.iter().zip(gt).filter(|(p, g)| p == g).count();
    let mut ratios = Vec::new();
    let mut hausdorff = Vec::new();
    let div = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    for c in 0..C as u8 {
        let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
        for i in 0..total {
            match (pred[i] == c, gt[i] == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => tn += 1,
            }
        }
        if tp + fp + fn_ == 0 {
            ratios.push([Some(1.0), Some(1.0), Some(1.0), Some(1.0), Some(0.0), div(fp, fp + tn)]);
        } else {
            ratios.push([
                div(2 * tp, 2 * tp + fp + fn_),
                div(tp, tp + fp + fn_),
                div(tp, tp + fp),
                div(tp, tp + fn_),
                div(fn_, tp + fn_),
                div(fp, fp + tn),
            ]);
        }
        let pts = |m: &[u8]| -> Vec<(f64, f64)> {
            (0..total)
                .filter(|&i| m[i] == c)
                .map(|i| ((i / side) as f64, (i % side) as f64))
                .collect()
        };
        let (a, b) = (pts(pred), pts(gt));
        let directed = |x: &[(f64, f64)], y: &[(f64, f64)]| {
            x.iter()
                .map(|p| {
                    y.iter()
                        .map(|q| ((p.0 - q.0).powi(2) + (p.1 - q.1).powi(2)).sqrt())
                        .fold(f64::INFINITY, f64::min)
                })
                .fold(0f64, f64::max)
        };
        hausdorff.push((!a.is_empty() && !b.is_empty()).then(|| directed(&a, &b).max(directed(&b, &a))));
    }
    Brute {
        acc: correct as f64 / total as f64,
        ratios,
        hausdorff,
    }
}

fn diff(a: Option<f64>, b: Option<f64>) -> f64 {
    match (a, b) {
        (Some(x), Some(y)) => (x - y).abs(),
        (None, None) => 0.0,
        _ => f64::INFINITY,
    }
}

#[test]
fn metric_oracle() {
    let side = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0f64;
    let mut identity_worst = 0f64;
    let mut recall_fnr_worst = 0f64;
    for k in 0..1000 {
        // Vary the class mix so absent and undefined cases occur.
        let classes = 1 + (k % C) as u8;
        let pred: Vec<u8> = (0..side * side).map(|_| rng.random_range(0..classes)).collect();
        let gt: Vec<u8> = (0..side * side).map(|_| rng.random_range(0..C as u8)).collect();
        let pm = ClassMap::new(side, side, pred.clone()).unwrap();
        let gm = ClassMap::new(side, side, gt.clone()).unwrap();
        let ours = evaluate_sample(&pm, &gm, C).unwrap();
        let brute = brute_metrics(&pred, &gt, side);
        worst = worst.max((ours.accuracy - brute.acc).abs());
        for c in 0..C {
            let m = &ours.classes[c];
            let mine = [m.dice, m.iou, m.precision, m.recall, m.fnr, m.fpr];
            for (s, b) in mine.iter().zip(&brute.ratios[c]) {
                worst = worst.max(diff(s.get(), *b));
            }
            worst = worst.max(diff(ours.hausdorff[c].get(), brute.hausdorff[c]));
            if m.dice.status == Status::Defined {
                let (d, j) = (m.dice.value, m.iou.value);
                identity_worst = identity_worst.max((d - 2.0 * j / (1.0 + j)).abs());
            }
            if m.recall.status == Status::Defined {
                recall_fnr_worst = recall_fnr_worst.max((m.recall.value + m.fnr.value - 1.0).abs());
            }
        }
    }
    // Ratios of integers below 2^53 agree up to one rounding each.
    let exact = 4.0 * f64::EPSILON;
    verdict(
        "metric_oracle",
        worst < 1e-12 && identity_worst <= exact && recall_fnr_worst <= exact,
        &format!(
            "1000 pairs, max |Δ| = {worst:.2e}, |Dice - 2IoU/(1+IoU)| ≤ {identity_worst:.1e}, |Recall + FNR - 1| ≤ {recall_fnr_worst:.1e}"
        ),
    );
}

// ---------------------------------------------------------------- architecture

#[test]
fn architecture_checks() {
    let cfg = GeneratorConfig::default();
    let f = [64usize, 128, 256, 512, 1024];
    let mut plan_ok = true;
    let nodes = node_order(5);
    for &(i, j) in &nodes {
        let p = channel_plan(i, j, &cfg).unwrap();
        let expected_in = match (i, j) {
            (0, 0) => 1,
            (i, 0) => f[i - 1],
            (i, j) => f[i] * j + f[i + 1],
        };
        plan_ok &= p.in_ch == expected_in && p.mid_ch == f[i] && p.out_ch == f[i];
    }
    plan_ok &= nodes.len() == 15;

    let g = build_generator(&cfg, 123, &Device::Cpu).unwrap();
    let count = g.trainable_parameter_count();
    let rel = (count as f64 - 36.63e6).abs() / 36.63e6;

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let image: Vec<f32> = (0..128 * 128).map(|_| rng.random_range(0.0..1.0)).collect();
    let x = Tensor::from_vec(image, (1, 1, 128, 128), &Device::Cpu).unwrap();
    let probs = g.forward(&x).unwrap();
    let dims_ok = probs.dims() == [1, 4, 128, 128];
    let sums = probs.sum_keepdim(1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
    let sum_err = sums.iter().map(|s| (s - 1.0).abs()).fold(0f32, f32::max);

    let d = build_discriminator(&DiscriminatorConfig::default(), 123, &Device::Cpu).unwrap();
    let pair = Tensor::zeros((1, 4, 128, 128), DType::F32, &Device::Cpu).unwrap();
    let scores = d.score(&x, &pair).unwrap();
    let d_ok = scores.dims() == [1, 1, 10, 10];

    verdict(
        "architecture_checks",
        plan_ok && rel <= 0.02 && dims_ok && sum_err <= 1e-5 && d_ok,
        &format!(
            "15-node plan {}, params {count} ({:+.3}% vs 36.63M), output {:?} max |Σp-1| {sum_err:.1e}, discriminator {:?}",
            if plan_ok { "matches" } else { "differs" },
            100.0 * (count as f64 - 36.63e6) / 36.63e6,
            probs.dims(),
            scores.dims()
        ),
    );
}

// ---------------------------------------------------------------- training

fn overlap_set(data: &common::Smoke) -> Vec<&PreparedSample> {
    data.split.overlap_test_indices.iter().map(|&i| &data.corpus[i]).collect()
}

/// Two-epoch moving average.
fn smoothed(values: &[f64]) -> Vec<f64> {
    values.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
}

#[test]
fn training_smoke() {
    let started = Instant::now();
    let data = common::smoke_data(common::SMOKE_CORPUS, common::SMOKE_TRAIN);
    let cfg = common::smoke_config(common::SMOKE_EPOCHS);
    let dir = tempfile::tempdir().unwrap();
    let outcome = common::run(&data, &cfg, dir.path());
    let g = load_generator(&outcome.best_checkpoint, &Device::Cpu).unwrap();
    let test = overlap_set(&data);
    let report = evaluate(&g, &test).unwrap();
    let dice = report.foreground.dice;
    let seg: Vec<f64> = outcome.state.loss_history.iter().map(|r| r.g_seg).collect();
    let first = &seg[..seg.len().min(5)];
    let sm = smoothed(first);
    let decreasing = first.len() == 5 && sm.windows(2).all(|w| w[1] < w[0]);
    verdict(
        "training_smoke",
        dice >= 0.90 && decreasing,
        &format!(
            "{} train / {} overlap-test samples, {} epochs, foreground Dice {:.4}, g_seg {:?}, smoothed {:?}, {:.0} s",
            data.split.train_indices.len(),
            test.len(),
            outcome.state.epoch,
            dice,
            first.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            sm.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>(),
            started.elapsed().as_secs_f64()
        ),
    );
}

#[test]
fn ablation_harness() {
    let data = common::smoke_data(40, 8);
    let test = overlap_set(&data);
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("ablation.csv");
    let mut arms = 0;
    for gan in [true, false] {
        for kind in LossKind::ALL {
            let mut cfg: TrainConfig = common::tiny_config(1);
            cfg.gan_enabled = gan;
            cfg.loss.kind = kind;
            let name = format!("{}-{}", kind.name(), if gan { "gan" } else { "nogan" });
            let out = common::run(&data, &cfg, &dir.path().join(&name));
            let g = load_generator(&out.best_checkpoint, &Device::Cpu).unwrap();
            evaluate(&g, &test).unwrap().append_csv(&csv, &name).unwrap();
            arms += 1;
        }
    }
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default().to_string();
    let columns = header.split(',').count();
    let rows: Vec<&str> = lines.collect();
    let uniform = rows.iter().all(|r| r.split(',').count() == columns);
    verdict(
        "ablation_harness",
        arms == 10 && rows.len() == 20 && uniform,
        &format!("{arms} arms, {} report rows with {columns} columns each", rows.len()),
    );
}

#[test]
fn determinism() {
    let data = common::smoke_data(40, 12);
    let cfg = common::tiny_config(2);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let runs: Vec<_> = dirs.iter().map(|d| common::run(&data, &cfg, d.path())).collect();
    let again = common::smoke_data(40, 12);
    let split_same = serde_json::to_string(&data.split).unwrap() == serde_json::to_string(&again.split).unwrap();
    let history_same = runs[0].state.loss_history == runs[1].state.loss_history;
    let files = ["best.json", "best.bin", "last.json", "last.bin", "state.json"];
    let bytes_same = files.iter().all(|f| {
        std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap()
    });
    verdict(
        "determinism",
        split_same && history_same && bytes_same,
        &format!(
            "split {}, loss history {}, checkpoints {}",
            if split_same { "identical" } else { "differs" },
            if history_same { "identical" } else { "differs" },
            if bytes_same { "byte-identical" } else { "differ" }
        ),
    );
}
