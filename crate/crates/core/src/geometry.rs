//! Axis-aligned boxes: overlap, regression deltas, clipping and NMS.
//!
//! Boxes use continuous corner coordinates, so the width of `(x1, x2)` is
//! `x2 - x1` with no `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// Checked constructor: rejects inverted or non-finite corners.
    pub fn try_new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(invalid!("invalid box ({x1}, {y1}, {x2}, {y2})"));
        }
        Ok(b)
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn is_valid(&self) -> bool {
        [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite())
            && self.x2 >= self.x1
            && self.y2 >= self.y1
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }
}

/// Intersection over union. Two zero-area boxes have IoU 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Regression target of a box relative to an anchor: centre offsets in
/// units of the anchor size and log size ratios. Unit weights throughout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxDelta {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
}

impl BoxDelta {
    pub fn to_array(self) -> [f64; 4] {
        [self.dx, self.dy, self.dw, self.dh]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        BoxDelta {
            dx: v[0],
            dy: v[1],
            dw: v[2],
            dh: v[3],
        }
    }
}

pub fn encode(gt: &BBox, anchor: &BBox) -> Result<BoxDelta> {
    let (aw, ah) = (anchor.width(), anchor.height());
    if !(aw > 0.0 && ah > 0.0) {
        return Err(invalid!("anchor {:?} has non-positive extent", anchor));
    }
    let (gw, gh) = (gt.width(), gt.height());
    if !(gw > 0.0 && gh > 0.0) {
        return Err(invalid!("ground truth {:?} has non-positive extent", gt));
    }
    let (acx, acy) = anchor.center();
    let (gcx, gcy) = gt.center();
    Ok(BoxDelta {
        dx: (gcx - acx) / aw,
        dy: (gcy - acy) / ah,
        dw: (gw / aw).ln(),
        dh: (gh / ah).ln(),
    })
}

pub fn decode(delta: &BoxDelta, anchor: &BBox) -> BBox {
    let (aw, ah) = (anchor.width(), anchor.height());
    let (acx, acy) = anchor.center();
    BBox::from_center(
        acx + delta.dx * aw,
        acy + delta.dy * ah,
        aw * delta.dw.exp(),
        ah * delta.dh.exp(),
    )
}

/// Largest log size ratio applied when decoding network outputs.
pub const MAX_LOG_RATIO: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// `decode` with the size ratios clamped so raw predictions cannot overflow.
pub fn decode_clamped(delta: &BoxDelta, anchor: &BBox) -> BBox {
    let d = BoxDelta {
        dw: delta.dw.min(MAX_LOG_RATIO),
        dh: delta.dh.min(MAX_LOG_RATIO),
        ..*delta
    };
    decode(&d, anchor)
}

pub fn clip_to_image(b: &BBox, width: f64, height: f64) -> BBox {
    BBox {
        x1: b.x1.clamp(0.0, width),
        y1: b.y1.clamp(0.0, height),
        x2: b.x2.clamp(0.0, width),
        y2: b.y2.clamp(0.0, height),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub score: f64,
    pub class_id: usize,
    /// Pyramid level of the anchor that produced the box.
    pub level: u8,
}

/// Indices of `scores` ordered by descending score, ties by lower index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression over detections of a single class.
///
/// Returns kept indices in selection order. A detection is dropped when
/// its IoU with an already kept detection exceeds `iou_threshold`.
pub fn nms(dets: &[Detection], iou_threshold: f64) -> Vec<usize> {
    let boxes: Vec<BBox> = dets.iter().map(|d| d.bbox).collect();
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    nms_boxes(&boxes, &scores, iou_threshold)
}

pub fn nms_boxes(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(scores);
    let areas: Vec<f64> = boxes.iter().map(BBox::area).collect();
    let mut suppressed = vec![false; boxes.len()];
    let mut keep = Vec::new();
    for (pos, &i) in order.iter().enumerate() {
        if suppressed[i] {
            continue;
        }
        keep.push(i);
        let bi = &boxes[i];
        for &j in &order[pos + 1..] {
            if suppressed[j] {
                continue;
            }
            let inter = bi.intersection(&boxes[j]);
            if inter <= 0.0 {
                continue;
            }
            let union = areas[i] + areas[j] - inter;
            if union > 0.0 && inter / union > iou_threshold {
                suppressed[j] = true;
            }
        }
    }
    keep
}
