//! COCO-style average precision for boxes and masks.
//!
//! Per class, IoU threshold and area range, detections are matched to
//! objects greedily in score order, each detection taking the unmatched
//! object of highest IoU at or above the threshold. Precision is made
//! monotone and read at 101 recall points. Detections with equal scores
//! are treated as one block: precision and recall are only read after the
//! whole block, so the result does not depend on how ties are ordered.

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox, Detection};
use crate::infer::{infer, InferenceConfig};
use crate::model::Detector;

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    /// Full-image binary masks, one per object, when mask AP is wanted.
    pub masks: Option<Vec<Vec<u8>>>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Prediction {
    pub detections: Vec<Detection>,
    /// Binary masks for the first `masks.len()` detections.
    pub masks: Option<Vec<Vec<u8>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IouKind {
    Box,
    Mask,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub iou_thresholds: Vec<f64>,
    /// Upper area bound of "small" objects.
    pub small_area: f64,
    /// Upper area bound of "medium" objects.
    pub medium_area: f64,
    pub max_detections: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        EvalParams {
            iou_thresholds: (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect(),
            small_area: 32.0 * 32.0,
            medium_area: 96.0 * 96.0,
            max_detections: 100,
        }
    }
}

impl EvalParams {
    /// Area buckets rescaled from 800-pixel images to `width × height`.
    pub fn for_image_size(width: usize, height: usize) -> Self {
        let f = (width.max(height) as f64 / 800.0).powi(2);
        let d = EvalParams::default();
        EvalParams {
            small_area: d.small_area * f,
            medium_area: d.medium_area * f,
            ..d
        }
    }

    fn ranges(&self) -> [(f64, f64); 4] {
        [
            (0.0, f64::INFINITY),
            (0.0, self.small_area),
            (self.small_area, self.medium_area),
            (self.medium_area, f64::INFINITY),
        ]
    }

    fn threshold_index(&self, t: f64) -> Option<usize> {
        self.iou_thresholds.iter().position(|&x| (x - t).abs() < 1e-9)
    }
}

/// Summary value for an area range (or whole evaluation) without any
/// objects, as in the COCO tools.
pub const NO_OBJECTS: f64 = -1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApSummary {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ap_small: f64,
    pub ap_medium: f64,
    pub ap_large: f64,
    /// AP over all thresholds per class; `None` when the class has no objects.
    pub per_class_ap: Vec<Option<f64>>,
    pub per_class_ap50: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub bbox: ApSummary,
    pub segm: Option<ApSummary>,
}

/// 101-point interpolated AP of detections given as `(score, is_tp)`
/// against `num_gt` objects. Entries sharing a score form one block.
pub fn average_precision(scored: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[b].0.total_cmp(&scored[a].0));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if scored[i].1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let block_end = order
            .get(pos + 1)
            .is_none_or(|&j| scored[j].0 != scored[i].0);
        if block_end {
            recall.push(tp as f64 / num_gt as f64);
            precision.push(tp as f64 / (tp + fp) as f64);
        }
    }
    for k in (1..precision.len()).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    let mut total = 0.0;
    for r in 0..=100 {
        let r = r as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

fn mask_iou(a: &[u8], b: &[u8]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += usize::from(x && y);
        union += usize::from(x || y);
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

fn mask_area(m: &[u8]) -> f64 {
    m.iter().filter(|&&v| v != 0).count() as f64
}

/// Per-image, per-class data prepared once and reused for every
/// threshold and area range.
struct ClassImage {
    det_scores: Vec<f64>,
    det_areas: Vec<f64>,
    gt_areas: Vec<f64>,
    /// `ious[d][g]`
    ious: Vec<Vec<f64>>,
}

/// Canonical detection order: score descending, then box coordinates.
fn canonical_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        let (da, db) = (&dets[a], &dets[b]);
        db.score
            .total_cmp(&da.score)
            .then(da.bbox.x1.total_cmp(&db.bbox.x1))
            .then(da.bbox.y1.total_cmp(&db.bbox.y1))
            .then(da.bbox.x2.total_cmp(&db.bbox.x2))
            .then(da.bbox.y2.total_cmp(&db.bbox.y2))
    });
    order
}

fn prepare(
    pred: &Prediction,
    gt: &GroundTruth,
    class: usize,
    kind: IouKind,
    max_dets: usize,
) -> Result<ClassImage> {
    let gt_idx: Vec<usize> = (0..gt.classes.len()).filter(|&i| gt.classes[i] == class).collect();
    let limit = match kind {
        IouKind::Box => pred.detections.len(),
        IouKind::Mask => pred.masks.as_ref().map_or(0, Vec::len),
    };
    let dets = &pred.detections[..limit];
    let mut det_idx: Vec<usize> = canonical_order(dets)
        .into_iter()
        .filter(|&i| dets[i].class_id == class)
        .collect();
    det_idx.truncate(max_dets);
    let gt_masks = gt.masks.as_ref();
    let det_masks = pred.masks.as_ref();
    if kind == IouKind::Mask && gt_masks.is_none() {
        return Err(invalid!("mask evaluation needs ground-truth masks"));
    }
    let gt_areas = gt_idx
        .iter()
        .map(|&g| match gt_masks {
            Some(m) => mask_area(&m[g]),
            None => gt.boxes[g].area(),
        })
        .collect();
    let det_areas = det_idx
        .iter()
        .map(|&d| match kind {
            IouKind::Box => dets[d].bbox.area(),
            IouKind::Mask => mask_area(&det_masks.expect("checked")[d]),
        })
        .collect();
    let ious = det_idx
        .iter()
        .map(|&d| {
            gt_idx
                .iter()
                .map(|&g| match kind {
                    IouKind::Box => iou(&dets[d].bbox, &gt.boxes[g]),
                    IouKind::Mask => mask_iou(&det_masks.expect("checked")[d], &gt_masks.expect("checked")[g]),
                })
                .collect()
        })
        .collect();
    Ok(ClassImage {
        det_scores: det_idx.iter().map(|&d| dets[d].score).collect(),
        det_areas,
        gt_areas,
        ious,
    })
}

/// Greedy matching of one image for one class, threshold and area range.
/// Appends `(score, tp)` of non-ignored detections to `out` and returns the
/// number of non-ignored objects.
fn match_image(ci: &ClassImage, t: f64, range: (f64, f64), out: &mut Vec<(f64, bool)>) -> usize {
    let in_range = |a: f64| a >= range.0 && a <= range.1;
    // objects inside the range first
    let mut gts: Vec<usize> = (0..ci.gt_areas.len()).collect();
    gts.sort_by_key(|&g| !in_range(ci.gt_areas[g]));
    let gt_ignore: Vec<bool> = gts.iter().map(|&g| !in_range(ci.gt_areas[g])).collect();
    let mut taken = vec![false; gts.len()];
    for (d, row) in ci.ious.iter().enumerate() {
        let mut best: Option<usize> = None;
        let mut best_iou = t.min(1.0 - 1e-10);
        for (k, &g) in gts.iter().enumerate() {
            if taken[k] {
                continue;
            }
            if let Some(b) = best {
                if !gt_ignore[b] && gt_ignore[k] {
                    break;
                }
            }
            if row[g] < best_iou {
                continue;
            }
            best_iou = row[g];
            best = Some(k);
        }
        match best {
            Some(k) => {
                taken[k] = true;
                if !gt_ignore[k] {
                    out.push((ci.det_scores[d], true));
                }
            }
            None => {
                if in_range(ci.det_areas[d]) {
                    out.push((ci.det_scores[d], false));
                }
            }
        }
    }
    gt_ignore.iter().filter(|&&i| !i).count()
}

fn summarize(
    preds: &[Prediction],
    gts: &[GroundTruth],
    num_classes: usize,
    params: &EvalParams,
    kind: IouKind,
) -> Result<ApSummary> {
    let ranges = params.ranges();
    let nt = params.iou_thresholds.len();
    // ap[class][range][threshold], None when no objects in that cell
    let mut ap = vec![vec![vec![None; nt]; ranges.len()]; num_classes];
    for (c, per_class) in ap.iter_mut().enumerate() {
        let prepared: Vec<ClassImage> = preds
            .iter()
            .zip(gts)
            .map(|(p, g)| prepare(p, g, c, kind, params.max_detections))
            .collect::<Result<_>>()?;
        for (r, &range) in ranges.iter().enumerate() {
            for (ti, &t) in params.iou_thresholds.iter().enumerate() {
                let mut scored = Vec::new();
                let mut npos = 0;
                for ci in &prepared {
                    npos += match_image(ci, t, range, &mut scored);
                }
                if npos > 0 {
                    per_class[r][ti] = Some(average_precision(&scored, npos));
                }
            }
        }
    }
    let mean = |vals: Vec<f64>| {
        if vals.is_empty() {
            NO_OBJECTS
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };
    let over = |r: usize, t: Option<usize>| {
        mean(
            ap.iter()
                .flat_map(|pc| {
                    pc[r].iter().enumerate().filter_map(move |(ti, v)| match t {
                        Some(only) if only != ti => None,
                        _ => *v,
                    })
                })
                .collect(),
        )
    };
    let t50 = params.threshold_index(0.5);
    let t75 = params.threshold_index(0.75);
    Ok(ApSummary {
        ap: over(0, None),
        ap50: t50.map_or(NO_OBJECTS, |i| over(0, Some(i))),
        ap75: t75.map_or(NO_OBJECTS, |i| over(0, Some(i))),
        ap_small: over(1, None),
        ap_medium: over(2, None),
        ap_large: over(3, None),
        per_class_ap: ap
            .iter()
            .map(|pc| {
                let v: Vec<f64> = pc[0].iter().flatten().copied().collect();
                (!v.is_empty()).then(|| mean(v))
            })
            .collect(),
        per_class_ap50: ap
            .iter()
            .map(|pc| t50.and_then(|i| pc[0][i]))
            .collect(),
    })
}

/// Box AP always; mask AP when every ground truth carries masks and every
/// prediction carries masks.
pub fn evaluate(preds: &[Prediction], gts: &[GroundTruth], num_classes: usize, params: &EvalParams) -> Result<EvalResult> {
    if preds.len() != gts.len() {
        return Err(invalid!("{} predictions for {} images", preds.len(), gts.len()));
    }
    for (p, g) in preds.iter().zip(gts) {
        if g.boxes.len() != g.classes.len() || g.masks.as_ref().is_some_and(|m| m.len() != g.boxes.len()) {
            return Err(invalid!("ground truth boxes, classes and masks disagree in length"));
        }
        if let Some(m) = &p.masks {
            if m.len() > p.detections.len() {
                return Err(invalid!("more masks than detections"));
            }
        }
        if let Some(d) = p.detections.iter().find(|d| d.class_id >= num_classes) {
            return Err(invalid!("detection class {} out of range", d.class_id));
        }
    }
    let bbox = summarize(preds, gts, num_classes, params, IouKind::Box)?;
    let with_masks = !preds.is_empty()
        && preds.iter().all(|p| p.masks.is_some())
        && gts.iter().all(|g| g.masks.is_some());
    let segm = if with_masks {
        Some(summarize(preds, gts, num_classes, params, IouKind::Mask)?)
    } else {
        None
    };
    Ok(EvalResult { bbox, segm })
}

pub fn ground_truth(data: &Dataset) -> Vec<GroundTruth> {
    data.scenes
        .iter()
        .map(|s| GroundTruth {
            boxes: s.boxes(),
            classes: s.classes(),
            masks: Some(s.objects.iter().map(|o| o.mask.clone()).collect()),
        })
        .collect()
}

/// Runs the detector over a split and scores it. Mask AP is included when
/// `with_masks` is set and the detector has a mask head.
pub fn evaluate_detector(det: &Detector, data: &Dataset, config: &InferenceConfig, with_masks: bool) -> Result<EvalResult> {
    let with_masks = with_masks && det.net.mask.is_some();
    let preds = data
        .scenes
        .iter()
        .map(|s| {
            let out = infer(det, &s.image, s.width, s.height, config, with_masks)?;
            let masks = with_masks.then(|| {
                out.masks
                    .iter()
                    .map(|m| m.paste(s.width, s.height, config.mask_threshold as f32))
                    .collect()
            });
            Ok(Prediction {
                detections: out.detections,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut gts = ground_truth(data);
    if !with_masks {
        gts.iter_mut().for_each(|g| g.masks = None);
    }
    evaluate(&preds, &gts, det.config().num_classes, &EvalParams::for_image_size(data.width, data.height))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(b: BBox, score: f64) -> Detection {
        Detection {
            bbox: b,
            score,
            class_id: 0,
            level: 3,
        }
    }

    fn gt(boxes: Vec<BBox>) -> GroundTruth {
        GroundTruth {
            classes: vec![0; boxes.len()],
            boxes,
            masks: None,
        }
    }

    #[test]
    fn perfect_detector() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = evaluate(
            &[Prediction {
                detections: vec![det(b, 1.0)],
                masks: None,
            }],
            &[gt(vec![b])],
            1,
            &EvalParams::default(),
        )
        .unwrap();
        assert_eq!(r.bbox.ap, 1.0);
        assert_eq!(r.bbox.ap50, 1.0);
        assert_eq!(r.bbox.ap75, 1.0);
        assert!(r.segm.is_none());
    }

    #[test]
    fn iou_point_six_counts_up_to_its_threshold() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let d = BBox::new(0.0, 0.0, 10.0, 6.0);
        assert_eq!(iou(&g, &d), 0.6);
        let r = evaluate(
            &[Prediction {
                detections: vec![det(d, 0.9)],
                masks: None,
            }],
            &[gt(vec![g])],
            1,
            &EvalParams::default(),
        )
        .unwrap();
        // TP at 0.50, 0.55, 0.60; FP at the remaining seven thresholds
        assert!((r.bbox.ap - 0.3).abs() < 1e-12);
        assert_eq!(r.bbox.ap50, 1.0);
        assert_eq!(r.bbox.ap75, 0.0);
    }

    #[test]
    fn empty_detections_and_missing_classes() {
        let b = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = evaluate(&[Prediction::default()], &[gt(vec![b])], 3, &EvalParams::default()).unwrap();
        assert_eq!(r.bbox.ap, 0.0);
        assert_eq!(r.bbox.per_class_ap, vec![Some(0.0), None, None]);
        // a 10x10 object is small; the other ranges are empty
        assert_eq!((r.bbox.ap_small, r.bbox.ap_medium, r.bbox.ap_large), (0.0, NO_OBJECTS, NO_OBJECTS));
    }

    #[test]
    fn ties_are_order_free() {
        assert_eq!(average_precision(&[(0.5, true), (0.5, false)], 1), average_precision(&[(0.5, false), (0.5, true)], 1));
        assert!((average_precision(&[(0.9, true), (0.8, false), (0.7, true)], 2) - (51.0 + 50.0 * 2.0 / 3.0) / 101.0).abs() < 1e-12);
    }

    #[test]
    fn mask_iou_counts_pixels() {
        assert_eq!(mask_iou(&[1, 1, 0, 0], &[0, 1, 1, 0]), 1.0 / 3.0);
        assert_eq!(mask_iou(&[0, 0], &[0, 0]), 0.0);
    }
}
