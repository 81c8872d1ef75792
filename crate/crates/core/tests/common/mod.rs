//! Oracles and criterion runners shared by the integration tests.
//!
//! Every oracle here is written from the definition of the operation, not
//! from the library code: brute-force loops, tent-kernel resampling and a
//! straight-line AP computation.

#![allow(dead_code)]

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use shotmask::anchors::{generate_anchors, match_anchors, AnchorConfig, AnchorLabel, AnchorSet, MatchParams};
use shotmask::autodiff::gradcheck::{check, GradCheckReport};
use shotmask::autodiff::{Graph, Var};
use shotmask::config::RunConfig;
use shotmask::data::{generate_dataset, DatasetConfig};
use shotmask::eval::{evaluate, EvalParams, GroundTruth, Prediction};
use shotmask::geometry::{iou, nms_boxes, BBox, Detection};
use shotmask::infer::{assign_rois, infer, mask_logits, InferenceConfig};
use shotmask::losses::{focal_loss, mask_bce, smooth_l1, smooth_l1_per_channel, ClsTarget, FocalParams, SelfAdjustState};
use shotmask::mask::{assign_level, roi_align, RoiAlignParams};
use shotmask::model::{Detector, ModelConfig, Network};
use shotmask::nn::{Bound, ParamStore};
use shotmask::train::Trainer;
use shotmask::Tensor;

/// One line of a criterion report.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

impl Check {
    pub fn new(name: impl Into<String>, pass: bool, detail: impl Into<String>) -> Self {
        Check {
            name: name.into(),
            pass,
            detail: detail.into(),
        }
    }
}

pub fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

pub fn describe(checks: &[Check]) -> String {
    checks
        .iter()
        .map(|c| format!("    [{}] {}: {}", if c.pass { "ok" } else { "FAIL" }, c.name, c.detail))
        .collect::<Vec<_>>()
        .join("\n")
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Sum of `x` weighted by fixed random coefficients, so every output
/// element receives a distinct upstream gradient.
fn weighted_sum(g: &mut Graph<f64>, x: Var, seed: u64) -> shotmask::Result<Var> {
    let mut r = rng(seed);
    let shape = g.shape(x).to_vec();
    let n = g.numel(x);
    let w = g.constant(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?;
    let p = g.mul(x, w)?;
    g.sum(p)
}

// ---------------------------------------------------------------- gradients

pub const STEP: f64 = 1e-5;
/// The whole network has thousands of relu units per probed weight; at
/// 1e-5 one of them occasionally sits inside the difference stencil with
/// a slope change too small for the kink detector. 1e-6 keeps round-off
/// near 1e-7 while making such hits rare.
pub const DEEP_STEP: f64 = 1e-6;
pub const KINK_TOL: f64 = 1e-3;

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub run: fn(u64) -> shotmask::Result<GradCheckReport>,
}

fn grad_focal(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, k) = (r.random_range(4..16), r.random_range(1..5));
    let targets: Vec<ClsTarget> = (0..n)
        .map(|_| match r.random_range(0..10) {
            0 | 1 => ClsTarget::Ignore,
            2..=4 => ClsTarget::Class(r.random_range(0..k)),
            _ => ClsTarget::Background,
        })
        .collect();
    let params = FocalParams {
        alpha: r.random_range(0.1..0.9),
        gamma: [0.0, 1.0, 2.0, 2.5][r.random_range(0..4)],
        ..FocalParams::default()
    };
    let logits = uniform(&mut r, &[n, k], -4.0, 4.0);
    check(|g, v| focal_loss(g, v[0], &targets, &params), &[logits], STEP, 64, KINK_TOL)
}

fn grad_smooth_l1(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let p = r.random_range(1..12);
    let residual = uniform(&mut r, &[p, 4], -1.5, 1.5);
    if r.random_bool(0.5) {
        let beta = r.random_range(0.05..1.0);
        check(|g, v| smooth_l1(g, v[0], beta), &[residual], STEP, 64, KINK_TOL)
    } else {
        let betas: [f64; 4] = std::array::from_fn(|_| r.random_range(0.05..1.0));
        let norm = r.random_range(1.0..8.0);
        check(|g, v| smooth_l1_per_channel(g, v[0], &betas, norm), &[residual], STEP, 64, KINK_TOL)
    }
}

fn grad_self_adjust(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let mut state = SelfAdjustState::new(r.random_range(0.05..1.0), r.random_bool(0.3));
    for _ in 0..r.random_range(1..30) {
        let batch: Vec<f64> = (0..4 * r.random_range(1..10)).map(|_| r.random_range(-0.6..0.6)).collect();
        state.update(&batch);
    }
    let p = r.random_range(1..12);
    let residual = uniform(&mut r, &[p, 4], -1.0, 1.0);
    check(
        |g, v| {
            let mut frozen = state;
            frozen.loss(g, v[0], false)
        },
        &[residual],
        STEP,
        64,
        KINK_TOL,
    )
}

fn grad_mask_bce(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let (m, k, s) = (r.random_range(1..4), r.random_range(1..4), r.random_range(3..8));
    let classes: Vec<usize> = (0..m).map(|_| r.random_range(0..k)).collect();
    let targets: Vec<f32> = (0..m * s * s)
        .map(|_| if r.random_bool(0.2) { r.random_range(0.0..1.0) } else { f32::from(r.random_bool(0.5)) })
        .collect();
    let logits = uniform(&mut r, &[m, k, s, s], -3.0, 3.0);
    check(|g, v| mask_bce(g, v[0], &targets, &classes), &[logits], STEP, 64, KINK_TOL)
}

fn grad_conv(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let k = [1, 3][r.random_range(0..2)];
    let stride = r.random_range(1..3);
    let padding = if r.random_bool(0.7) { k / 2 } else { 0 };
    let (h, w) = (r.random_range(k.max(3)..8), r.random_range(k.max(3)..8));
    let with_bias = r.random_bool(0.7);
    let inputs = vec![
        uniform(&mut r, &[n, cin, h, w], -1.0, 1.0),
        uniform(&mut r, &[cout, cin, k, k], -1.0, 1.0),
        uniform(&mut r, &[cout], -1.0, 1.0),
    ];
    check(
        |g, v| {
            let y = g.conv2d(v[0], v[1], with_bias.then_some(v[2]), stride, padding)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        STEP,
        48,
        KINK_TOL,
    )
}

fn grad_conv_transpose(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, cin, cout) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
    let (h, w) = (r.random_range(1..6), r.random_range(1..6));
    let inputs = vec![
        uniform(&mut r, &[n, cin, h, w], -1.0, 1.0),
        uniform(&mut r, &[cin, cout, 2, 2], -1.0, 1.0),
        uniform(&mut r, &[cout], -1.0, 1.0),
    ];
    check(
        |g, v| {
            let y = g.conv_transpose2d_2x2(v[0], v[1], Some(v[2]))?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        STEP,
        48,
        KINK_TOL,
    )
}

fn random_roi(r: &mut ChaCha8Rng, extent: f64) -> BBox {
    let x1 = r.random_range(-0.2 * extent..0.8 * extent);
    let y1 = r.random_range(-0.2 * extent..0.8 * extent);
    let w = r.random_range(0.05 * extent..0.7 * extent);
    let h = r.random_range(0.05 * extent..0.7 * extent);
    BBox::new(x1, y1, x1 + w, y1 + h)
}

fn grad_roi_align(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let (n, c) = (r.random_range(1..3), r.random_range(1..3));
    let (h, w) = (r.random_range(3..9), r.random_range(3..9));
    let stride = [1.0, 2.0, 4.0][r.random_range(0..3)];
    let params = RoiAlignParams {
        output: r.random_range(2..6),
        samples: r.random_range(1..3),
    };
    let rois: Vec<(usize, BBox)> = (0..r.random_range(1..4))
        .map(|_| (r.random_range(0..n), random_roi(&mut r, stride * h.min(w) as f64)))
        .collect();
    let feature = uniform(&mut r, &[n, c, h, w], -1.0, 1.0);
    check(
        |g, v| {
            let y = g.roi_align(v[0], &rois, stride, params)?;
            weighted_sum(g, y, seed)
        },
        &[feature],
        STEP,
        64,
        KINK_TOL,
    )
}

/// A deliberately narrow configuration for whole-network checks.
pub fn micro_model() -> ModelConfig {
    ModelConfig {
        stage_channels: vec![3, 4, 4, 5, 5],
        fpn_width: 4,
        head_depth: 1,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

/// Backbone, pyramid, both dense heads with their losses, ROI-Align and the
/// mask head with its loss, differentiated end to end in `f64`.
fn grad_end_to_end(seed: u64) -> shotmask::Result<GradCheckReport> {
    let mut r = rng(seed);
    let config = micro_model();
    let mask_p2 = r.random_bool(0.3);
    let config = ModelConfig { mask_p2, ..config };
    let mut store = ParamStore::<f64>::new();
    let net = Network::new(&config, true, &mut store, seed)?;
    let (size, k) = (32usize, config.num_classes);
    let image = uniform(&mut r, &[1, 1, size, size], -1.0, 1.0);
    let anchors = generate_anchors(&config.anchors, size, size)?;
    let a = anchors.len();
    let targets: Vec<ClsTarget> = (0..a)
        .map(|_| match r.random_range(0..20) {
            0 => ClsTarget::Class(r.random_range(0..k)),
            1 => ClsTarget::Ignore,
            _ => ClsTarget::Background,
        })
        .collect();
    let pos: Vec<usize> = (0..4).map(|_| r.random_range(0..a)).collect();
    let reg_target: Vec<f64> = (0..16).map(|_| r.random_range(-0.5..0.5)).collect();
    let boxes: Vec<(usize, BBox)> = (0..3).map(|_| (0, random_roi(&mut r, size as f64))).collect();
    let classes: Vec<usize> = (0..3).map(|_| r.random_range(0..k)).collect();
    let mask_targets: Vec<f32> = (0..3 * 28 * 28).map(|_| f32::from(r.random_bool(0.4))).collect();
    let rule = config.level_assignment();
    let mut inputs: Vec<Tensor<f64>> = store.iter().map(|(_, t)| t.clone()).collect();
    // small perturbations so relus are not sitting on exact zeros from zero biases
    for t in &mut inputs {
        for v in t.data_mut() {
            *v += r.random_range(-0.05..0.05);
        }
    }
    inputs.push(image);
    let np = store.len();
    check(
        |g, v| {
            let p = Bound::from_vars(v[..np].to_vec());
            let fwd = net.forward(g, &p, v[np], true)?;
            let cls = focal_loss(g, fwd.cls, &targets, &FocalParams::default())?;
            let rows = g.index_rows(fwd.reg, &pos)?;
            let t = g.constant([4, 4], reg_target.clone())?;
            let res = g.sub(rows, t)?;
            let reg = smooth_l1(g, res, 0.11)?;
            let rois = assign_rois(&boxes, &rule)?;
            let logits = mask_logits(g, &net, &p, &fwd, &rois)?.expect("three rois");
            let mask = mask_bce(g, logits, &mask_targets, &classes)?;
            let s = g.add(cls, reg)?;
            g.add(s, mask)
        },
        &inputs,
        DEEP_STEP,
        3,
        KINK_TOL,
    )
}

pub fn gradient_cases() -> Vec<GradCase> {
    vec![
        GradCase { name: "focal loss", tol: 1e-4, run: grad_focal },
        GradCase { name: "smooth L1", tol: 1e-4, run: grad_smooth_l1 },
        GradCase { name: "self-adjusting smooth L1, frozen beta", tol: 1e-4, run: grad_self_adjust },
        GradCase { name: "mask BCE", tol: 1e-4, run: grad_mask_bce },
        GradCase { name: "conv2d", tol: 1e-4, run: grad_conv },
        GradCase { name: "transposed conv 2x2", tol: 1e-4, run: grad_conv_transpose },
        GradCase { name: "ROI-Align", tol: 1e-4, run: grad_roi_align },
        GradCase { name: "end-to-end detector + mask head", tol: 1e-3, run: grad_end_to_end },
    ]
}

/// Runs every case on `instances` seeds; a case passes when every instance
/// checks at least one coordinate and stays within tolerance.
pub fn gradient_suite(instances: u64) -> Vec<Check> {
    gradient_cases()
        .into_iter()
        .map(|case| {
            let start = Instant::now();
            let (mut worst, mut checked, mut skipped, mut failures) = (0.0f64, 0usize, 0usize, Vec::new());
            for i in 0..instances {
                let seed = 1000 * (case.name.len() as u64) + i;
                match (case.run)(seed) {
                    Ok(rep) => {
                        worst = worst.max(rep.max_rel_error);
                        checked += rep.checked;
                        skipped += rep.skipped;
                        if !rep.passes(case.tol) {
                            failures.push(format!("seed {seed}: {:.2e} over {} coords", rep.max_rel_error, rep.checked));
                        }
                    }
                    Err(e) => failures.push(format!("seed {seed}: {e}")),
                }
            }
            Check::new(
                case.name,
                failures.is_empty(),
                format!(
                    "{instances} instances, {checked} coords ({skipped} kinks skipped), max rel err {worst:.2e} (tol {:.0e}), {:.1}s{}",
                    case.tol,
                    start.elapsed().as_secs_f64(),
                    if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
                ),
            )
        })
        .collect()
}

// ------------------------------------------------------------------ oracles

/// Greedy NMS straight from the definition: visit boxes by descending
/// score (ties by index) and keep one if it overlaps no kept box by more
/// than the threshold.
pub fn nms_oracle(boxes: &[BBox], scores: &[f64], thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Anchor assignment from an explicit IoU matrix.
pub fn match_oracle(anchors: &AnchorSet, gts: &[BBox], p: &MatchParams) -> (Vec<AnchorLabel>, Vec<Option<usize>>) {
    let n = anchors.len();
    let m: Vec<Vec<f64>> = anchors.boxes.iter().map(|a| gts.iter().map(|g| iou(a, g)).collect()).collect();
    let mut labels = vec![AnchorLabel::Negative; n];
    let mut owner = vec![None; n];
    for a in 0..n {
        if gts.is_empty() {
            break;
        }
        let mut best = 0;
        for g in 1..gts.len() {
            if m[a][g] > m[a][best] {
                best = g;
            }
        }
        if m[a][best] >= p.pos_thresh {
            labels[a] = AnchorLabel::Positive;
            owner[a] = Some(best);
        } else if m[a][best] >= p.neg_thresh {
            labels[a] = AnchorLabel::Ignore;
        }
    }
    let covered: Vec<bool> = (0..gts.len()).map(|g| owner.contains(&Some(g))).collect();
    for g in 0..gts.len() {
        if covered[g] {
            continue;
        }
        let mut best = 0;
        for a in 1..n {
            if m[a][g] > m[best][g] {
                best = a;
            }
        }
        if m[best][g] > p.best_match_thresh && labels[best] != AnchorLabel::Positive {
            labels[best] = AnchorLabel::Positive;
            owner[best] = Some(g);
        }
    }
    (labels, owner)
}

/// COCO box AP over all areas for one class and IoU threshold, with at
/// most `max_dets` detections per image. `None` when the class has no
/// ground truth.
pub fn reference_ap(preds: &[Prediction], gts: &[GroundTruth], class: usize, t: f64, max_dets: usize) -> Option<f64> {
    let npos: usize = gts.iter().map(|g| g.classes.iter().filter(|&&c| c == class).count()).sum();
    if npos == 0 {
        return None;
    }
    // (score, image, box), per-image cap applied by score first
    let mut dets: Vec<(f64, usize, BBox)> = Vec::new();
    for (img, p) in preds.iter().enumerate() {
        let mut mine: Vec<&Detection> = p.detections.iter().filter(|d| d.class_id == class).collect();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        dets.extend(mine.into_iter().take(max_dets).map(|d| (d.score, img, d.bbox)));
    }
    dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.boxes.len()]).collect();
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for (_, img, b) in &dets {
        let gt = &gts[*img];
        let mut best: Option<(f64, usize)> = None;
        for (j, gb) in gt.boxes.iter().enumerate() {
            if gt.classes[j] != class || used[*img][j] {
                continue;
            }
            let o = iou(b, gb);
            if o >= t && best.is_none_or(|(bo, _)| o > bo) {
                best = Some((o, j));
            }
        }
        match best {
            Some((_, j)) => {
                used[*img][j] = true;
                tp += 1;
            }
            None => fp += 1,
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let level = r as f64 / 100.0;
        if let Some(i) = recall.iter().position(|&x| x >= level) {
            total += precision[i];
        }
    }
    Some(total / 101.0)
}

/// Bilinear value at feature coordinates `(x, y)` as a tent-kernel sum
/// over every pixel; pixels outside the map contribute nothing.
fn tent_sample(f: &Tensor<f64>, c: usize, x: f64, y: f64) -> f64 {
    let (h, w) = (f.shape()[1], f.shape()[2]);
    let mut v = 0.0;
    for i in 0..h {
        for j in 0..w {
            let k = (1.0 - (x - j as f64).abs()).max(0.0) * (1.0 - (y - i as f64).abs()).max(0.0);
            v += k * f.data()[(c * h + i) * w + j];
        }
    }
    v
}

/// ROI-Align by dense resampling: the feature map is upsampled 16× with
/// the tent kernel, and each output bin averages the dense grid cells
/// that hold its sample points. Valid for boxes whose sample points lie
/// on the 1/16 grid.
pub fn roi_align_dense_oracle(f: &Tensor<f64>, b: &BBox, stride: f64, out: usize, samples: usize) -> Tensor<f64> {
    const UP: f64 = 16.0;
    let (c, h, w) = (f.shape()[0], f.shape()[1], f.shape()[2]);
    // dense grid over [-1, w] x [-1, h] in steps of 1/16
    let (dw, dh) = (((w + 1) as f64 * UP) as usize + 1, ((h + 1) as f64 * UP) as usize + 1);
    let mut dense = vec![0.0; c * dh * dw];
    for ch in 0..c {
        for yi in 0..dh {
            for xi in 0..dw {
                let (x, y) = (xi as f64 / UP - 1.0, yi as f64 / UP - 1.0);
                dense[(ch * dh + yi) * dw + xi] = tent_sample(f, ch, x, y);
            }
        }
    }
    let lookup = |ch: usize, x: f64, y: f64| -> f64 {
        let (xi, yi) = ((x + 1.0) * UP, (y + 1.0) * UP);
        assert!((xi - xi.round()).abs() < 1e-9 && (yi - yi.round()).abs() < 1e-9, "sample off the dense grid");
        let (xi, yi) = (xi.round() as i64, yi.round() as i64);
        if xi < 0 || yi < 0 || xi >= dw as i64 || yi >= dh as i64 {
            0.0
        } else {
            dense[(ch * dh + yi as usize) * dw + xi as usize]
        }
    };
    let (x1, y1) = (b.x1 / stride, b.y1 / stride);
    let (bw, bh) = (b.width() / stride / out as f64, b.height() / stride / out as f64);
    Tensor::from_fn([c, out, out], |idx| {
        let (ch, oy, ox) = (idx / (out * out), (idx / out) % out, idx % out);
        let mut acc = 0.0;
        for sy in 0..samples {
            for sx in 0..samples {
                let x = x1 + bw * (ox as f64 + (sx as f64 + 0.5) / samples as f64);
                let y = y1 + bh * (oy as f64 + (sy as f64 + 0.5) / samples as f64);
                acc += lookup(ch, x, y);
            }
        }
        acc / (samples * samples) as f64
    })
}

fn random_boxes(r: &mut ChaCha8Rng, n: usize, extent: f64) -> Vec<BBox> {
    // clustered so that suppression chains actually happen
    let centres: Vec<(f64, f64)> = (0..(n / 8).max(1))
        .map(|_| (r.random_range(0.0..extent), r.random_range(0.0..extent)))
        .collect();
    (0..n)
        .map(|_| {
            let (cx, cy) = centres[r.random_range(0..centres.len())];
            let (w, h) = (r.random_range(2.0..40.0), r.random_range(2.0..40.0));
            BBox::from_center(cx + r.random_range(-6.0..6.0), cy + r.random_range(-6.0..6.0), w, h)
        })
        .collect()
}

pub fn nms_oracle_check(instances: u64) -> Check {
    let mut mismatches = Vec::new();
    let mut total = 0;
    for i in 0..instances {
        let mut r = rng(50_000 + i);
        let n = if i == 0 { 1000 } else { r.random_range(0..=1000) };
        total += n;
        let boxes = random_boxes(&mut r, n, 300.0);
        // coarse scores force plenty of ties
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..60) as f64) / 60.0).collect();
        let thresh = [0.3, 0.4, 0.5, 0.7][r.random_range(0..4)];
        if nms_boxes(&boxes, &scores, thresh) != nms_oracle(&boxes, &scores, thresh) {
            mismatches.push(i);
        }
    }
    Check::new(
        "NMS vs brute force",
        mismatches.is_empty(),
        format!("{instances} instances, {total} boxes, exact mismatches: {mismatches:?}"),
    )
}

pub fn matching_oracle_check(instances: u64) -> Check {
    let mut mismatches = Vec::new();
    let mut positives = 0;
    for i in 0..instances {
        let mut r = rng(60_000 + i);
        let (w, h) = (r.random_range(48..160), r.random_range(48..160));
        let config = AnchorConfig {
            scale: [0.25, 0.5, 1.0][r.random_range(0..3)],
            ..AnchorConfig::default()
        };
        let anchors = generate_anchors(&config, w, h).unwrap();
        let gts: Vec<BBox> = (0..r.random_range(0..10))
            .map(|_| {
                let (bw, bh) = if r.random_bool(0.3) {
                    (r.random_range(2.0..5.0), r.random_range(20.0..60.0))
                } else {
                    (r.random_range(4.0..60.0), r.random_range(4.0..60.0))
                };
                let x = r.random_range(0.0..(w as f64 - bw).max(1.0));
                let y = r.random_range(0.0..(h as f64 - bh).max(1.0));
                BBox::new(x, y, x + bw, y + bh)
            })
            .collect();
        let params = match r.random_range(0..5) {
            0 => MatchParams::standard(),
            k => MatchParams::with_best_match([0.0, 0.2, 0.3, 0.4][k - 1]),
        };
        let got = match_anchors(&anchors, &gts, &params).unwrap();
        let (labels, owner) = match_oracle(&anchors, &gts, &params);
        positives += got.num_positives();
        if got.labels != labels || got.gt_index.iter().zip(&labels).zip(&owner).any(|((g, l), o)| *l == AnchorLabel::Positive && g != o) {
            mismatches.push(i);
        }
    }
    Check::new(
        "anchor matching vs brute force",
        mismatches.is_empty(),
        format!("{instances} instances, {positives} positives, exact mismatches: {mismatches:?}"),
    )
}

/// Random images with a handful of objects and detections scattered
/// around them; scores are distinct.
pub fn random_eval_instance(r: &mut ChaCha8Rng, classes: usize) -> (Vec<Prediction>, Vec<GroundTruth>) {
    let images = r.random_range(1..4);
    let mut gts: Vec<GroundTruth> = (0..images)
        .map(|_| GroundTruth {
            boxes: Vec::new(),
            classes: Vec::new(),
            masks: None,
        })
        .collect();
    for _ in 0..5 {
        let img = r.random_range(0..images);
        let (w, h) = (r.random_range(6.0..60.0), r.random_range(6.0..60.0));
        let (x, y) = (r.random_range(0.0..100.0), r.random_range(0.0..100.0));
        gts[img].boxes.push(BBox::new(x, y, x + w, y + h));
        gts[img].classes.push(r.random_range(0..classes));
    }
    let mut preds: Vec<Prediction> = (0..images)
        .map(|_| Prediction {
            detections: Vec::new(),
            masks: None,
        })
        .collect();
    for _ in 0..20 {
        let img = r.random_range(0..images);
        let gt = &gts[img];
        let (bbox, class_id) = if !gt.boxes.is_empty() && r.random_bool(0.7) {
            let j = r.random_range(0..gt.boxes.len());
            let b = gt.boxes[j];
            let j2 = |r: &mut ChaCha8Rng, s: f64| r.random_range(-0.3..0.3) * s;
            let (dw, dh) = (b.width(), b.height());
            let nb = BBox::new(b.x1 + j2(r, dw), b.y1 + j2(r, dh), b.x2 + j2(r, dw), b.y2 + j2(r, dh));
            let nb = if nb.is_valid() && nb.area() > 0.0 { nb } else { b };
            let c = if r.random_bool(0.85) { gt.classes[j] } else { r.random_range(0..classes) };
            (nb, c)
        } else {
            let (x, y) = (r.random_range(0.0..100.0), r.random_range(0.0..100.0));
            (BBox::new(x, y, x + r.random_range(5.0..50.0), y + r.random_range(5.0..50.0)), r.random_range(0..classes))
        };
        preds[img].detections.push(Detection {
            bbox,
            score: r.random_range(0.0..1.0),
            class_id,
            level: 3,
        });
    }
    for p in &mut preds {
        p.detections.sort_by(|a, b| b.score.total_cmp(&a.score));
    }
    (preds, gts)
}

pub fn ap_oracle_check(instances: u64) -> Check {
    let classes = 3;
    let mut worst = 0.0f64;
    let mut failures = Vec::new();
    for i in 0..instances {
        let mut r = rng(70_000 + i);
        let (preds, gts) = random_eval_instance(&mut r, classes);
        let params = EvalParams::for_image_size(128, 128);
        let got = evaluate(&preds, &gts, classes, &params).unwrap().bbox;
        let thresholds: Vec<f64> = (0..10).map(|k| 0.5 + 0.05 * k as f64).collect();
        let per_class: Vec<Option<f64>> = (0..classes)
            .map(|c| {
                let v: Option<Vec<f64>> = thresholds.iter().map(|&t| reference_ap(&preds, &gts, c, t, 100)).collect();
                v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let ap = present.iter().sum::<f64>() / present.len() as f64;
        let at = |t: f64| {
            let v: Vec<f64> = (0..classes).filter_map(|c| reference_ap(&preds, &gts, c, t, 100)).collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let mut diffs = vec![(got.ap - ap).abs(), (got.ap50 - at(0.5)).abs(), (got.ap75 - at(0.75)).abs()];
        for (a, b) in got.per_class_ap.iter().zip(&per_class) {
            match (a, b) {
                (Some(a), Some(b)) => diffs.push((a - b).abs()),
                (None, None) => {}
                _ => diffs.push(f64::INFINITY),
            }
        }
        let d = diffs.iter().copied().fold(0.0, f64::max);
        worst = worst.max(d);
        if d > 1e-9 {
            failures.push(i);
        }
    }
    Check::new(
        "AP vs reference evaluator",
        failures.is_empty(),
        format!("{instances} instances of 20 detections vs 5 objects, max |diff| {worst:.1e} (tol 1e-9), failing: {failures:?}"),
    )
}

pub fn roi_oracle_check(instances: u64) -> Check {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut r = rng(80_000 + i);
        let (c, h, w) = (r.random_range(1..3), r.random_range(3..10), r.random_range(3..10));
        let stride = [1.0, 2.0, 4.0, 8.0][r.random_range(0..4)];
        let f = uniform(&mut r, &[c, h, w], -1.0, 1.0);
        // feature-space origin on the 1/16 grid, extent a multiple of 3.5
        // so every 2x2 sample of a 14x14 output lands on the grid too
        let x1 = r.random_range(-16..(w as i64 * 16)) as f64 / 16.0;
        let y1 = r.random_range(-16..(h as i64 * 16)) as f64 / 16.0;
        let (bw, bh) = (3.5 * r.random_range(1..4) as f64, 3.5 * r.random_range(1..4) as f64);
        let b = BBox::new(x1 * stride, y1 * stride, (x1 + bw) * stride, (y1 + bh) * stride);
        let params = RoiAlignParams::default();
        let got = roi_align(&f, &b, stride, params).unwrap();
        let want = roi_align_dense_oracle(&f, &b, stride, params.output, params.samples);
        let d = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        worst = worst.max(d);
    }
    Check::new(
        "ROI-Align vs dense resampling",
        worst <= 1e-3,
        format!("{instances} grid-aligned instances, max |diff| {worst:.1e} (tol 1e-3)"),
    )
}

pub fn oracle_suite() -> Vec<Check> {
    vec![
        nms_oracle_check(100),
        matching_oracle_check(100),
        ap_oracle_check(100),
        roi_oracle_check(100),
    ]
}

// ---------------------------------------------------- running statistics

pub fn self_adjust_suite() -> Vec<Check> {
    let mut out = Vec::new();

    // bounds under random batch statistics
    let mut r = rng(90_000);
    let beta_hat = 0.11;
    let mut state = SelfAdjustState::new(beta_hat, false);
    let mut shared = SelfAdjustState::new(1.0, true);
    let mut violations = 0;
    for _ in 0..2000 {
        let scale = 10f64.powf(r.random_range(-3.0..1.0));
        let n = 4 * r.random_range(1..40);
        let batch: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0) * scale).collect();
        state.update(&batch);
        shared.update(&batch);
        for (s, hat) in [(&state, beta_hat), (&shared, 1.0)] {
            violations += s.betas().iter().filter(|&&b| !(0.0..=hat).contains(&b)).count();
        }
    }
    out.push(Check::new(
        "beta stays in [0, beta_hat]",
        violations == 0,
        format!("2000 random batches across 4 decades of scale, {violations} violations"),
    ));

    // convergence to stationary moments: alternating |r| = mu ± sigma has
    // batch mean mu and variance sigma^2 exactly
    let (mu, sigma) = (0.3, 0.2);
    let mut state = SelfAdjustState::new(1.0, false);
    let batch: Vec<f64> = (0..64).map(|i| if (i / 4) % 2 == 0 { mu + sigma } else { -(mu - sigma) }).collect();
    for _ in 0..200 {
        state.update(&batch);
    }
    let err = state
        .running_mean
        .iter()
        .map(|m| (m - mu).abs())
        .chain(state.running_var.iter().map(|v| (v - sigma * sigma).abs()))
        .fold(0.0, f64::max);
    out.push(Check::new(
        "momentum filter converges",
        err <= 1e-3,
        format!("after 200 steps max |error| {err:.1e} (tol 1e-3), beta {:.4}", state.beta(0)),
    ));

    // frozen control points reproduce fixed smooth L1 bit for bit
    let mut exact = true;
    for i in 0..20 {
        let mut r = rng(91_000 + i);
        let mut s = SelfAdjustState::new(r.random_range(0.05..1.0), i % 2 == 0);
        for _ in 0..5 {
            let b: Vec<f64> = (0..32).map(|_| r.random_range(-0.5..0.5)).collect();
            s.update(&b);
        }
        let betas = s.betas();
        let p = r.random_range(1..10);
        let res = uniform(&mut r, &[p, 4], -1.0, 1.0);
        let run = |adaptive: bool| {
            let mut g = Graph::<f64>::new();
            let x = g.leaf(res.clone().with_requires_grad(true));
            let before = s;
            let mut frozen = s;
            let l = if adaptive { frozen.loss(&mut g, x, false).unwrap() } else { smooth_l1_per_channel(&mut g, x, &betas, p as f64).unwrap() };
            assert_eq!(frozen, before, "frozen statistics moved");
            g.backward(l).unwrap();
            (g.item(l), g.grad(x).unwrap().to_vec())
        };
        exact &= run(true) == run(false);
    }
    out.push(Check::new(
        "frozen beta equals fixed smooth L1",
        exact,
        "20 instances, shared and per-channel, against the fixed loss used when adaptation is off; loss and gradient compared with ==",
    ));
    out
}

// ---------------------------------------------------------- level rule

pub fn level_suite() -> Vec<Check> {
    let cases = [(224.0, 4u8), (100.0, 3), (600.0, 5)];
    cases
        .iter()
        .map(|&(side, want)| {
            let got = assign_level(&BBox::new(0.0, 0.0, side, side), 4, 224.0, 3, 5).unwrap();
            Check::new(format!("{side}x{side} box"), got == want, format!("P{got}, expected P{want}"))
        })
        .collect()
}

// ------------------------------------------------------------------ parity

/// A detector trained for a few steps with the mask head, and an
/// identical copy of its detection weights without one.
pub fn parity_pair(mask_p2: bool) -> shotmask::Result<(Detector, Detector, shotmask::data::Dataset, RunConfig)> {
    let mut config = RunConfig {
        data: DatasetConfig {
            train_images: 16,
            val_images: 4,
            width: 64,
            height: 64,
            ..DatasetConfig::default()
        },
        ..RunConfig::default()
    };
    config.model.mask_p2 = mask_p2;
    config.train.iterations = 30;
    config.train.batch_size = 2;
    config.train.mask_head_enabled = true;
    let (train, val) = generate_dataset(&config.data)?;
    let mut trainer = Trainer::from_config(&config)?;
    trainer.fit(&train, |_| Ok(()))?;
    let with_mask = trainer.detector;
    let mut plain = Detector::new(&config.model, false, config.seed + 99)?;
    let ids: Vec<_> = plain.params.ids().collect();
    for id in ids {
        let name = plain.params.name(id).to_string();
        let src = with_mask.params.id_of(&name).expect("shared parameter");
        *plain.params.get_mut(id) = with_mask.params.get(src).clone();
    }
    Ok((with_mask, plain, val, config))
}

fn bits(d: &Detection) -> [u64; 5] {
    [d.bbox.x1.to_bits(), d.bbox.y1.to_bits(), d.bbox.x2.to_bits(), d.bbox.y2.to_bits(), d.score.to_bits()]
}

pub fn parity_suite() -> Vec<Check> {
    let mut out = Vec::new();
    for mask_p2 in [false, true] {
        let tag = if mask_p2 { "P2-P5" } else { "P3-P5" };
        let (with_mask, plain, val, config) = parity_pair(mask_p2).expect("parity setup");
        let infer_cfg = InferenceConfig {
            score_threshold: 0.01,
            ..config.inference
        };
        let (mut identical, mut ops_equal, mut dets, mut masks) = (true, true, 0, 0);
        let mut ops = (0, 0, 0);
        for scene in &val.scenes {
            let a = infer(&with_mask, &scene.image, scene.width, scene.height, &infer_cfg, true).unwrap();
            let b = infer(&plain, &scene.image, scene.width, scene.height, &infer_cfg, false).unwrap();
            let c = infer(&with_mask, &scene.image, scene.width, scene.height, &infer_cfg, false).unwrap();
            identical &= a.detections.len() == b.detections.len()
                && a.detections.iter().zip(&b.detections).all(|(x, y)| bits(x) == bits(y) && x.class_id == y.class_id)
                && c.detections == b.detections;
            ops_equal &= a.detection_ops == b.detection_ops && c.detection_ops == b.detection_ops;
            dets += a.detections.len();
            masks += a.masks.len();
            ops = (a.detection_ops, b.detection_ops, a.total_ops);
        }
        out.push(Check::new(
            format!("{tag}: detections bitwise identical"),
            identical && dets > 0,
            format!("{} images, {dets} detections, {masks} masks", val.len()),
        ));
        out.push(Check::new(
            format!("{tag}: detection op count unchanged"),
            ops_equal,
            format!("mask on {} / off {} ops (mask path adds {})", ops.0, ops.1, ops.2 - ops.0),
        ));
    }
    out
}
