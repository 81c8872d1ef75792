//! Inference: dense-head post-processing and the mask path.
//!
//! Detection post-processing per image: sigmoid scores, a score threshold,
//! the top-k candidates of every level, decoding against anchors and
//! clipping, per-class NMS over all levels pooled, and a global top-k.
//! The mask head then runs on the best detections only, after every
//! detection-path operation has been recorded.

use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, AnchorConfig, AnchorSet};
use crate::autodiff::{sigmoid, Graph, Var};
use crate::error::{invalid, Result};
use crate::geometry::{clip_to_image, decode_clamped, nms_boxes, BBox, BoxDelta, Detection};
use crate::mask::{InstanceMask, LevelAssignment, RoiAlignParams, MASK_SIZE};
use crate::model::{Detector, Forward, Network};
use crate::nn::Bound;
use crate::tensor::Element;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    pub score_threshold: f64,
    pub per_level_topk: usize,
    pub nms_threshold: f64,
    pub max_detections: usize,
    pub mask_proposals: usize,
    /// Probability at which pasted masks are binarised.
    pub mask_threshold: f64,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            score_threshold: 0.05,
            per_level_topk: 1000,
            nms_threshold: 0.4,
            max_detections: 100,
            mask_proposals: 50,
            mask_threshold: 0.5,
        }
    }
}

impl InferenceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.mask_proposals > self.max_detections {
            return Err(invalid!(
                "mask_proposals {} exceeds max_detections {}",
                self.mask_proposals,
                self.max_detections
            ));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) || !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(invalid!("thresholds must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Normalises raw intensities for the network input.
pub fn preprocess(image: &[f32]) -> impl Iterator<Item = f32> + '_ {
    image.iter().map(|&v| (v - 0.4) / 0.3)
}

/// Turns one image's head outputs into detections.
///
/// `cls` is `[A, num_classes]` logits and `reg` `[A, 4]` deltas, both in
/// anchor order. Candidates are indexed `anchor * num_classes + class`;
/// equal scores resolve toward the lower candidate index at every stage.
#[allow(clippy::too_many_arguments)]
pub fn postprocess<T: Element>(
    cls: &[T],
    reg: &[T],
    anchors: &AnchorSet,
    num_classes: usize,
    config: &InferenceConfig,
    score_threshold: f64,
    width: usize,
    height: usize,
) -> Vec<Detection> {
    let mut cand: Vec<(usize, f64)> = Vec::new();
    let mut level_cand: Vec<(usize, f64)> = Vec::new();
    for grid in &anchors.grids {
        level_cand.clear();
        let lo = grid.offset * num_classes;
        let hi = (grid.offset + grid.count) * num_classes;
        for (i, z) in cls[lo..hi].iter().enumerate() {
            let s = sigmoid(z.as_f64());
            if s >= score_threshold {
                level_cand.push((lo + i, s));
            }
        }
        level_cand.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        level_cand.truncate(config.per_level_topk);
        cand.extend_from_slice(&level_cand);
    }

    let (wf, hf) = (width as f64, height as f64);
    let mut by_class: Vec<Vec<(usize, BBox, f64)>> = vec![Vec::new(); num_classes];
    for &(idx, score) in &cand {
        let (a, c) = (idx / num_classes, idx % num_classes);
        let d = &reg[a * 4..a * 4 + 4];
        let delta = BoxDelta {
            dx: d[0].as_f64(),
            dy: d[1].as_f64(),
            dw: d[2].as_f64(),
            dh: d[3].as_f64(),
        };
        let b = clip_to_image(&decode_clamped(&delta, &anchors.boxes[a]), wf, hf);
        if b.width() > 0.0 && b.height() > 0.0 {
            by_class[c].push((idx, b, score));
        }
    }

    let mut kept: Vec<(usize, Detection)> = Vec::new();
    for (c, items) in by_class.iter().enumerate() {
        let boxes: Vec<BBox> = items.iter().map(|t| t.1).collect();
        let scores: Vec<f64> = items.iter().map(|t| t.2).collect();
        for k in nms_boxes(&boxes, &scores, config.nms_threshold) {
            let (idx, bbox, score) = items[k];
            kept.push((
                idx,
                Detection {
                    bbox,
                    score,
                    class_id: c,
                    level: anchors.level_of[idx / num_classes],
                },
            ));
        }
    }
    kept.sort_by(|a, b| b.1.score.total_cmp(&a.1.score).then(a.0.cmp(&b.0)));
    kept.truncate(config.max_detections);
    kept.into_iter().map(|(_, d)| d).collect()
}

/// A region handed to the mask head.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskRoi {
    pub image: usize,
    pub bbox: BBox,
    pub level: u8,
}

/// Assigns levels to boxes; every box must have positive area.
pub fn assign_rois(boxes: &[(usize, BBox)], rule: &LevelAssignment) -> Result<Vec<MaskRoi>> {
    boxes
        .iter()
        .map(|&(image, bbox)| {
            Ok(MaskRoi {
                image,
                bbox,
                level: rule.assign(&bbox)?,
            })
        })
        .collect()
}

/// ROI-Align on each roi's assigned level followed by the mask head.
/// Returns `[M, num_classes, 28, 28]` logits in roi order, or `None` for
/// an empty roi list.
pub fn mask_logits<T: Element>(
    g: &mut Graph<T>,
    net: &Network,
    p: &Bound,
    fwd: &Forward,
    rois: &[MaskRoi],
) -> Result<Option<Var>> {
    let Some(head) = &net.mask else {
        return Err(invalid!("network has no mask head"));
    };
    if rois.is_empty() {
        return Ok(None);
    }
    let mut parts = Vec::new();
    let mut grouped_order = Vec::with_capacity(rois.len());
    for &(level, map) in &fwd.mask_levels {
        let picked: Vec<(usize, (usize, BBox))> = rois
            .iter()
            .enumerate()
            .filter(|(_, r)| r.level == level)
            .map(|(i, r)| (i, (r.image, r.bbox)))
            .collect();
        if picked.is_empty() {
            continue;
        }
        let boxes: Vec<(usize, BBox)> = picked.iter().map(|t| t.1).collect();
        let stride = AnchorConfig::stride(level) as f64;
        parts.push(g.roi_align(map, &boxes, stride, RoiAlignParams::default())?);
        grouped_order.extend(picked.iter().map(|t| t.0));
    }
    if grouped_order.len() != rois.len() {
        return Err(invalid!("some rois were assigned to levels without features"));
    }
    let pooled = g.concat0(&parts)?;
    // position of each roi inside the level-grouped batch
    let mut inverse = vec![0; rois.len()];
    for (pos, &i) in grouped_order.iter().enumerate() {
        inverse[i] = pos;
    }
    let pooled = g.index_rows(pooled, &inverse)?;
    head.forward(g, p, pooled).map(Some)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceOutput {
    pub detections: Vec<Detection>,
    pub masks: Vec<InstanceMask>,
    /// Operations recorded by backbone, pyramid and dense heads.
    pub detection_ops: u64,
    pub total_ops: u64,
}

/// Runs the detector on one single-channel image. With `with_mask` unset
/// (or no mask head) the mask path is skipped entirely.
pub fn infer(
    det: &Detector,
    image: &[f32],
    width: usize,
    height: usize,
    config: &InferenceConfig,
    with_mask: bool,
) -> Result<InferenceOutput> {
    config.validate()?;
    let cfg = det.config();
    if image.len() != width * height * cfg.in_channels {
        return Err(invalid!("image holds {} values, expected {}x{}", image.len(), width, height));
    }
    let anchors = generate_anchors(&cfg.anchors, width, height)?;
    let with_mask = with_mask && det.net.mask.is_some();
    let mut g = Graph::<f32>::new();
    let p = det.params.bind(&mut g, false);
    let x = g.constant([1, cfg.in_channels, height, width], preprocess(image).collect())?;
    let fwd = det.net.forward(&mut g, &p, x, with_mask)?;
    let detections = postprocess(
        g.value(fwd.cls),
        g.value(fwd.reg),
        &anchors,
        cfg.num_classes,
        config,
        config.score_threshold,
        width,
        height,
    );
    let detection_ops = fwd.detection_ops;

    let mut masks = Vec::new();
    if with_mask {
        let top = &detections[..detections.len().min(config.mask_proposals)];
        let boxes: Vec<(usize, BBox)> = top.iter().map(|d| (0, d.bbox)).collect();
        let rois = assign_rois(&boxes, &cfg.level_assignment())?;
        if let Some(logits) = mask_logits(&mut g, &det.net, &p, &fwd, &rois)? {
            let k = cfg.num_classes;
            let plane = MASK_SIZE * MASK_SIZE;
            let values = g.value(logits);
            for (i, d) in top.iter().enumerate() {
                let base = (i * k + d.class_id) * plane;
                masks.push(InstanceMask {
                    grid: values[base..base + plane]
                        .iter()
                        .map(|&z| sigmoid(z as f64) as f32)
                        .collect(),
                    bbox: d.bbox,
                    class_id: d.class_id,
                });
            }
        }
    }
    Ok(InferenceOutput {
        detections,
        masks,
        detection_ops,
        total_ops: g.op_count(),
    })
}
