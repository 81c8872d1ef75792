//! Dense anchor grids over the pyramid levels and anchor-to-object
//! assignment, including the best-matching relaxation for objects that no
//! anchor overlaps well enough.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::geometry::{iou, BBox};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    pub levels: Vec<u8>,
    /// Anchor side at P3 before `scale`; doubles with every level.
    pub base_size_p3: f64,
    /// Global factor applied to every base size (shrinks anchors for small images).
    pub scale: f64,
    /// Width / height ratios.
    pub aspect_ratios: Vec<f64>,
    pub size_multipliers: Vec<f64>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            levels: vec![3, 4, 5, 6, 7],
            base_size_p3: 32.0,
            scale: 1.0,
            aspect_ratios: vec![0.5, 1.0, 2.0],
            size_multipliers: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_location(&self) -> usize {
        self.aspect_ratios.len() * self.size_multipliers.len()
    }

    pub fn base_size(&self, level: u8) -> f64 {
        self.base_size_p3 * 2f64.powi(level as i32 - 3) * self.scale
    }

    pub fn stride(level: u8) -> usize {
        1usize << level
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(invalid!("anchor config has no pyramid levels"));
        }
        if self.levels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(invalid!("anchor levels must be strictly increasing"));
        }
        if self.levels.iter().any(|&l| l > 12) {
            return Err(invalid!("anchor level above 12 is unsupported"));
        }
        if self.aspect_ratios.is_empty() || self.size_multipliers.is_empty() {
            return Err(invalid!("anchor config needs ratios and multipliers"));
        }
        if self
            .aspect_ratios
            .iter()
            .chain(&self.size_multipliers)
            .chain([&self.base_size_p3, &self.scale])
            .any(|v| !(*v > 0.0 && v.is_finite()))
        {
            return Err(invalid!("anchor sizes and ratios must be positive"));
        }
        Ok(())
    }
}

/// Feature-map extent of a pyramid level: `ceil(extent / 2^level)`.
pub fn level_extent(extent: usize, level: u8) -> usize {
    extent.div_ceil(AnchorConfig::stride(level))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelGrid {
    pub level: u8,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// Index of the first anchor of this level in the flat anchor list.
    pub offset: usize,
    pub count: usize,
}

/// All anchors of an image, enumerated level by level, then row, column,
/// and anchor shape (ratio-major, then size multiplier).
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub boxes: Vec<BBox>,
    pub level_of: Vec<u8>,
    /// `(row, column)` grid cell of each anchor.
    pub location_of: Vec<(usize, usize)>,
    pub grids: Vec<LevelGrid>,
    pub anchors_per_location: usize,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn grid(&self, level: u8) -> Option<&LevelGrid> {
        self.grids.iter().find(|g| g.level == level)
    }
}

pub fn generate_anchors(config: &AnchorConfig, image_width: usize, image_height: usize) -> Result<AnchorSet> {
    config.validate()?;
    if image_width == 0 || image_height == 0 {
        return Err(invalid!("image extent must be positive"));
    }
    let per_loc = config.anchors_per_location();
    let mut shapes = Vec::with_capacity(per_loc);
    let mut set = AnchorSet {
        boxes: Vec::new(),
        level_of: Vec::new(),
        location_of: Vec::new(),
        grids: Vec::new(),
        anchors_per_location: per_loc,
    };
    for &level in &config.levels {
        let stride = AnchorConfig::stride(level);
        let (h, w) = (level_extent(image_height, level), level_extent(image_width, level));
        let base = config.base_size(level);
        shapes.clear();
        for &r in &config.aspect_ratios {
            for &m in &config.size_multipliers {
                let side = base * m;
                shapes.push((side * r.sqrt(), side / r.sqrt()));
            }
        }
        let offset = set.boxes.len();
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                for &(aw, ah) in &shapes {
                    set.boxes.push(BBox::from_center(cx, cy, aw, ah));
                    set.level_of.push(level);
                    set.location_of.push((y, x));
                }
            }
        }
        set.grids.push(LevelGrid {
            level,
            stride,
            height: h,
            width: w,
            offset,
            count: h * w * per_loc,
        });
    }
    Ok(set)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MatchSource {
    Threshold,
    BestMatch,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchParams {
    pub pos_thresh: f64,
    pub neg_thresh: f64,
    /// An unmatched object's best anchor becomes positive when its IoU
    /// exceeds this value. `pos_thresh` disables the relaxation.
    pub best_match_thresh: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            pos_thresh: 0.5,
            neg_thresh: 0.4,
            best_match_thresh: 0.0,
        }
    }
}

impl MatchParams {
    /// Plain threshold assignment without the best-match step.
    pub fn standard() -> Self {
        MatchParams {
            best_match_thresh: 0.5,
            ..Default::default()
        }
    }

    pub fn with_best_match(best_match_thresh: f64) -> Self {
        MatchParams {
            best_match_thresh,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.pos_thresh >= self.neg_thresh) {
            return Err(invalid!(
                "positive threshold {} below negative threshold {}",
                self.pos_thresh,
                self.neg_thresh
            ));
        }
        if !(0.0..=self.pos_thresh).contains(&self.best_match_thresh) {
            return Err(invalid!(
                "best-match threshold {} outside [0, {}]",
                self.best_match_thresh,
                self.pos_thresh
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub labels: Vec<AnchorLabel>,
    pub gt_index: Vec<Option<usize>>,
    pub source: Vec<Option<MatchSource>>,
}

impl MatchResult {
    pub fn num_positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l == AnchorLabel::Positive).count()
    }

    /// `(anchor, ground truth)` pairs of all positive anchors.
    pub fn positives(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.labels.iter().enumerate().filter_map(|(a, l)| match l {
            AnchorLabel::Positive => self.gt_index[a].map(|g| (a, g)),
            _ => None,
        })
    }

    /// Ground truths that received at least one positive anchor.
    pub fn matched_gts(&self, num_gts: usize) -> Vec<bool> {
        let mut out = vec![false; num_gts];
        for (_, g) in self.positives() {
            out[g] = true;
        }
        out
    }
}

/// Assigns every anchor to at most one ground truth.
///
/// Anchors whose best IoU reaches `pos_thresh` become positive for their
/// argmax object, those below `neg_thresh` negative and the rest ignored.
/// Objects left without a positive then claim their single best anchor if
/// its IoU exceeds `best_match_thresh` and it is not already positive.
/// Ties resolve to the lower index.
pub fn match_anchors(anchors: &AnchorSet, gts: &[BBox], params: &MatchParams) -> Result<MatchResult> {
    params.validate()?;
    let n = anchors.len();
    let mut result = MatchResult {
        labels: vec![AnchorLabel::Negative; n],
        gt_index: vec![None; n],
        source: vec![None; n],
    };
    if gts.is_empty() {
        return Ok(result);
    }
    let gt_areas: Vec<f64> = gts.iter().map(BBox::area).collect();
    let mut best_anchor: Vec<(f64, usize)> = vec![(-1.0, 0); gts.len()];
    let mut has_positive = vec![false; gts.len()];

    for (a, anchor) in anchors.boxes.iter().enumerate() {
        let area = anchor.area();
        let mut best = (0.0f64, 0usize);
        let mut any = false;
        for (g, gt) in gts.iter().enumerate() {
            let inter = anchor.intersection(gt);
            let union = area + gt_areas[g] - inter;
            let overlap = if union > 0.0 { inter / union } else { 0.0 };
            if !any || overlap > best.0 {
                best = (overlap, g);
                any = true;
            }
            if overlap > best_anchor[g].0 {
                best_anchor[g] = (overlap, a);
            }
        }
        let (overlap, g) = best;
        if overlap >= params.pos_thresh {
            result.labels[a] = AnchorLabel::Positive;
            result.gt_index[a] = Some(g);
            result.source[a] = Some(MatchSource::Threshold);
            has_positive[g] = true;
        } else if overlap >= params.neg_thresh {
            result.labels[a] = AnchorLabel::Ignore;
        }
    }

    for (g, &(overlap, a)) in best_anchor.iter().enumerate() {
        if has_positive[g] || overlap < 0.0 || overlap <= params.best_match_thresh {
            continue;
        }
        if result.labels[a] == AnchorLabel::Positive {
            continue;
        }
        result.labels[a] = AnchorLabel::Positive;
        result.gt_index[a] = Some(g);
        result.source[a] = Some(MatchSource::BestMatch);
    }
    debug_assert!(result
        .positives()
        .all(|(a, g)| g < gts.len() && iou(&anchors.boxes[a], &gts[g]) > 0.0));
    Ok(result)
}
