//! Instance-mask branch: pyramid level assignment, ROI-Align, mask targets
//! and the small convolutional mask head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::geometry::BBox;
use crate::nn::{Bound, Conv2dLayer, ConvTranspose2x2Layer, Init, ParamStore};
use crate::tensor::{Element, Tensor};

/// Side of the mask head's output grid.
pub const MASK_SIZE: usize = 28;
/// Side of the pooled ROI features fed to the mask head.
pub const ROI_SIZE: usize = 14;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskProposal {
    pub bbox: BBox,
    pub class_id: usize,
    pub assigned_level: u8,
    pub is_ground_truth_injected: bool,
}

/// A predicted mask: per-cell probabilities over a box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstanceMask {
    /// `MASK_SIZE × MASK_SIZE` probabilities, row-major.
    pub grid: Vec<f32>,
    pub bbox: BBox,
    pub class_id: usize,
}

impl InstanceMask {
    /// Resamples the grid into a full-image binary mask.
    ///
    /// Pixel centres inside the box are mapped to grid coordinates and
    /// bilinearly interpolated (edge-clamped); probabilities ≥ `threshold`
    /// become 1.
    pub fn paste(&self, width: usize, height: usize, threshold: f32) -> Vec<u8> {
        let mut out = vec![0u8; width * height];
        let b = &self.bbox;
        let (bw, bh) = (b.width(), b.height());
        if !(bw > 0.0 && bh > 0.0) {
            return out;
        }
        let s = MASK_SIZE as f64;
        let x_lo = b.x1.floor().max(0.0) as usize;
        let y_lo = b.y1.floor().max(0.0) as usize;
        let x_hi = (b.x2.ceil().max(0.0) as usize).min(width);
        let y_hi = (b.y2.ceil().max(0.0) as usize).min(height);
        for py in y_lo..y_hi {
            let cy = py as f64 + 0.5;
            if cy < b.y1 || cy >= b.y2 {
                continue;
            }
            let v = (cy - b.y1) / bh * s - 0.5;
            for px in x_lo..x_hi {
                let cx = px as f64 + 0.5;
                if cx < b.x1 || cx >= b.x2 {
                    continue;
                }
                let u = (cx - b.x1) / bw * s - 0.5;
                let p = bilinear_clamped(&self.grid, MASK_SIZE, MASK_SIZE, u, v);
                if p >= threshold as f64 {
                    out[py * width + px] = 1;
                }
            }
        }
        out
    }
}

/// Parameters of the area-based pyramid level rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelAssignment {
    pub k0: i32,
    pub canonical: f64,
    pub min_level: u8,
    pub max_level: u8,
}

impl Default for LevelAssignment {
    fn default() -> Self {
        LevelAssignment {
            k0: 4,
            canonical: 224.0,
            min_level: 3,
            max_level: 5,
        }
    }
}

impl LevelAssignment {
    pub fn levels(&self) -> impl Iterator<Item = u8> {
        self.min_level..=self.max_level
    }

    pub fn validate(&self) -> Result<()> {
        if self.min_level > self.max_level || !(self.canonical > 0.0) {
            return Err(invalid!("bad level assignment {:?}", self));
        }
        Ok(())
    }

    pub fn assign(&self, b: &BBox) -> Result<u8> {
        assign_level(b, self.k0, self.canonical, self.min_level, self.max_level)
    }
}

/// `floor(k0 + log2(sqrt(w·h) / canonical))`, clamped to the level range.
pub fn assign_level(b: &BBox, k0: i32, canonical: f64, min_level: u8, max_level: u8) -> Result<u8> {
    let (w, h) = (b.width(), b.height());
    if !(w > 0.0 && h > 0.0) {
        return Err(invalid!("cannot assign a level to zero-area box {:?}", b));
    }
    let k = (k0 as f64 + ((w * h).sqrt() / canonical).log2()).floor();
    Ok(k.clamp(min_level as f64, max_level as f64) as u8)
}

/// Bilinear sample at continuous `(x, y)` where pixel `i` sits at
/// coordinate `i`; neighbours outside the map contribute zero.
/// Returns the four (index, weight) taps.
#[inline]
fn taps(width: usize, height: usize, x: f64, y: f64) -> [(usize, f64); 4] {
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut out = [(0usize, 0.0f64); 4];
    let mut k = 0;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            let (xi, yi) = (x0 + dx, y0 + dy);
            if xi >= 0 && yi >= 0 && (xi as usize) < width && (yi as usize) < height {
                out[k] = (yi as usize * width + xi as usize, wx * wy);
            }
            k += 1;
        }
    }
    out
}

fn bilinear_clamped(grid: &[f32], width: usize, height: usize, u: f64, v: f64) -> f64 {
    let u = u.clamp(0.0, (width - 1) as f64);
    let v = v.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
    let at = |x: usize, y: usize| grid[y * width + x] as f64;
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

/// Sampling layout shared by the ROI-Align forward and backward passes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiAlignParams {
    pub output: usize,
    pub samples: usize,
}

impl Default for RoiAlignParams {
    fn default() -> Self {
        RoiAlignParams {
            output: ROI_SIZE,
            samples: 2,
        }
    }
}

/// Visits every (output cell, feature tap, weight) of one ROI on one
/// channel plane. Weights already include the `1 / samples²` average.
fn for_each_tap(
    width: usize,
    height: usize,
    b: &BBox,
    stride: f64,
    p: RoiAlignParams,
    mut f: impl FnMut(usize, usize, f64),
) {
    let (x1, y1) = (b.x1 / stride, b.y1 / stride);
    let bin_w = (b.x2 - b.x1) / stride / p.output as f64;
    let bin_h = (b.y2 - b.y1) / stride / p.output as f64;
    let norm = 1.0 / (p.samples * p.samples) as f64;
    let s = p.samples as f64;
    for oy in 0..p.output {
        for ox in 0..p.output {
            let cell = oy * p.output + ox;
            for sy in 0..p.samples {
                let y = y1 + bin_h * (oy as f64 + (sy as f64 + 0.5) / s);
                for sx in 0..p.samples {
                    let x = x1 + bin_w * (ox as f64 + (sx as f64 + 0.5) / s);
                    for (idx, w) in taps(width, height, x, y) {
                        if w != 0.0 {
                            f(cell, idx, w * norm);
                        }
                    }
                }
            }
        }
    }
}

/// ROI-Align of one box over a `[C, H, W]` feature map. `stride` converts
/// image coordinates to feature coordinates.
pub fn roi_align<T: Element>(feature: &Tensor<T>, b: &BBox, stride: f64, params: RoiAlignParams) -> Result<Tensor<T>> {
    let s = feature.shape();
    if s.len() != 3 {
        return Err(shape_err!("roi_align expects [C, H, W], got {:?}", s));
    }
    check_roi(b, stride)?;
    let (c, h, w) = (s[0], s[1], s[2]);
    let cells = params.output * params.output;
    let mut out = vec![T::zero(); c * cells];
    for ch in 0..c {
        let plane = &feature.data()[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * cells..(ch + 1) * cells];
        for_each_tap(w, h, b, stride, params, |cell, idx, wt| {
            dst[cell] += plane[idx] * T::from_f64_lossy(wt);
        });
    }
    Tensor::new(vec![c, params.output, params.output], out)
}

/// Accumulates the gradient of [`roi_align`] into `grad_feature` (`[C, H, W]`).
pub fn roi_align_backward<T: Element>(
    grad_output: &[T],
    feature_shape: &[usize],
    b: &BBox,
    stride: f64,
    params: RoiAlignParams,
    grad_feature: &mut [T],
) {
    let (c, h, w) = (feature_shape[0], feature_shape[1], feature_shape[2]);
    let cells = params.output * params.output;
    for ch in 0..c {
        let go = &grad_output[ch * cells..(ch + 1) * cells];
        let gf = &mut grad_feature[ch * h * w..(ch + 1) * h * w];
        for_each_tap(w, h, b, stride, params, |cell, idx, wt| {
            gf[idx] += go[cell] * T::from_f64_lossy(wt);
        });
    }
}

fn check_roi(b: &BBox, stride: f64) -> Result<()> {
    if !(b.width() > 0.0 && b.height() > 0.0) || !b.is_valid() {
        return Err(invalid!("roi {:?} must have positive area", b));
    }
    if !(stride > 0.0) {
        return Err(invalid!("stride must be positive, got {stride}"));
    }
    Ok(())
}

impl<T: Element> Graph<T> {
    /// ROI-Align over a batched `[N, C, H, W]` feature map. Each roi names
    /// the image it samples from. Output is `[R, C, out, out]`.
    pub fn roi_align(&mut self, feature: Var, rois: &[(usize, BBox)], stride: f64, params: RoiAlignParams) -> Result<Var> {
        let s = self.shape(feature).to_vec();
        if s.len() != 4 {
            return Err(shape_err!("roi_align expects [N, C, H, W], got {:?}", s));
        }
        let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
        for (img, b) in rois {
            if *img >= n {
                return Err(invalid!("roi image index {img} out of range for batch {n}"));
            }
            check_roi(b, stride)?;
        }
        let plane = c * h * w;
        let cells = params.output * params.output;
        let mut out = vec![T::zero(); rois.len() * c * cells];
        {
            let src = self.value(feature);
            for (r, (img, b)) in rois.iter().enumerate() {
                let feat = &src[img * plane..(img + 1) * plane];
                let dst = &mut out[r * c * cells..(r + 1) * c * cells];
                for ch in 0..c {
                    let fp = &feat[ch * h * w..(ch + 1) * h * w];
                    let dp = &mut dst[ch * cells..(ch + 1) * cells];
                    for_each_tap(w, h, b, stride, params, |cell, idx, wt| {
                        dp[cell] += fp[idx] * T::from_f64_lossy(wt);
                    });
                }
            }
        }
        let rois = rois.to_vec();
        self.count_ops((rois.len() * c * cells * params.samples * params.samples * 4) as u64);
        self.record(
            &[feature],
            vec![rois.len(), c, params.output, params.output],
            out,
            move |_: &[&[T]], _: &[T], g: &[T], _: &[bool]| {
                let mut gf = vec![T::zero(); n * plane];
                for (r, (img, b)) in rois.iter().enumerate() {
                    roi_align_backward(
                        &g[r * c * cells..(r + 1) * c * cells],
                        &[c, h, w],
                        b,
                        stride,
                        params,
                        &mut gf[img * plane..(img + 1) * plane],
                    );
                }
                vec![Some(gf)]
            },
        )
    }
}

/// Training target for one mask proposal: the ground-truth mask inside
/// `b`, bilinearly resampled to `size × size` and binarised at 0.5.
///
/// `gt_mask` is a row-major `width × height` grid of 0/1 values whose
/// pixel `(i, j)` is centred at `(i + 0.5, j + 0.5)`. Sample points that
/// fall outside the image read as background.
pub fn rasterize_mask_target(gt_mask: &[u8], width: usize, height: usize, b: &BBox, size: usize) -> Result<Vec<f32>> {
    if gt_mask.len() != width * height {
        return Err(shape_err!("mask holds {} pixels, expected {}x{}", gt_mask.len(), width, height));
    }
    if !(b.width() > 0.0 && b.height() > 0.0) {
        return Err(invalid!("mask target box {:?} must have positive area", b));
    }
    let mut out = vec![0f32; size * size];
    if width == 0 || height == 0 {
        return Ok(out);
    }
    let (wf, hf) = (width as f64, height as f64);
    let at = |x: usize, y: usize| gt_mask[y * width + x] as f64;
    for j in 0..size {
        let y = b.y1 + (j as f64 + 0.5) * b.height() / size as f64;
        if y < 0.0 || y >= hf {
            continue;
        }
        let v = (y - 0.5).clamp(0.0, hf - 1.0);
        let y0 = v.floor() as usize;
        let y1 = (y0 + 1).min(height - 1);
        let fy = v - y0 as f64;
        for i in 0..size {
            let x = b.x1 + (i as f64 + 0.5) * b.width() / size as f64;
            if x < 0.0 || x >= wf {
                continue;
            }
            let u = (x - 0.5).clamp(0.0, wf - 1.0);
            let x0 = u.floor() as usize;
            let x1 = (x0 + 1).min(width - 1);
            let fx = u - x0 as f64;
            let val = (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0))
                + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1));
            if val >= 0.5 {
                out[j * size + i] = 1.0;
            }
        }
    }
    Ok(out)
}

/// Four 3×3 conv + relu layers at 14×14, a 2×2 stride-2 transposed conv +
/// relu to 28×28, and a 1×1 class-specific predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskHead {
    pub convs: [Conv2dLayer; 4],
    pub deconv: ConvTranspose2x2Layer,
    pub predictor: Conv2dLayer,
    pub width: usize,
    pub num_classes: usize,
}

impl MaskHead {
    pub fn new<T: Element, R: Rng>(store: &mut ParamStore<T>, width: usize, num_classes: usize, rng: &mut R) -> Self {
        let convs = std::array::from_fn(|i| {
            Conv2dLayer::new(store, &format!("mask.conv{i}"), width, width, 3, 1, Init::HeNormal, 0.0, rng)
        });
        let deconv = ConvTranspose2x2Layer::new(store, "mask.deconv", width, width, rng);
        let predictor = Conv2dLayer::new(store, "mask.predictor", width, num_classes, 1, 1, Init::Normal(0.01), 0.0, rng);
        MaskHead {
            convs,
            deconv,
            predictor,
            width,
            num_classes,
        }
    }

    /// `[M, width, 14, 14]` features to `[M, num_classes, 28, 28]` logits.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let s = g.shape(features);
        if s.len() != 4 || s[1] != self.width {
            return Err(shape_err!("mask head expects [M, {}, H, W], got {:?}", self.width, s));
        }
        let mut x = features;
        for conv in &self.convs {
            x = conv.forward_relu(g, p, x)?;
        }
        x = self.deconv.forward(g, p, x)?;
        x = g.relu(x)?;
        self.predictor.forward(g, p, x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sq(side: f64) -> BBox {
        BBox::new(0.0, 0.0, side, side)
    }

    fn level(side: f64) -> u8 {
        LevelAssignment::default().assign(&sq(side)).unwrap()
    }

    #[test]
    fn level_examples() {
        assert_eq!(level(224.0), 4);
        assert_eq!(level(100.0), 3);
        assert_eq!(level(600.0), 5);
        assert_eq!(level(447.9), 4);
        assert_eq!(level(448.0), 5);
        assert!(LevelAssignment::default().assign(&BBox::new(0.0, 0.0, 0.0, 5.0)).is_err());
    }

    #[test]
    fn constant_feature_pools_to_constant() {
        let f = Tensor::<f64>::full([2, 10, 12], 3.5);
        let b = BBox::new(8.0, 4.0, 30.0, 26.0);
        let out = roi_align(&f, &b, 4.0, RoiAlignParams::default()).unwrap();
        assert_eq!(out.shape(), &[2, 14, 14]);
        assert!(out.data().iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn unit_bins_average_their_corners() {
        let (h, w) = (16, 16);
        let f = Tensor::<f64>::from_fn([1, h, w], |i| ((i * 37) % 11) as f64);
        let b = BBox::new(1.0, 1.0, 15.0, 15.0); // stride 1, bins of one unit
        let out = roi_align(&f, &b, 1.0, RoiAlignParams::default()).unwrap();
        let at = |x: usize, y: usize| f.data()[y * w + x];
        for oy in 0..14 {
            for ox in 0..14 {
                let (x, y) = (1 + ox, 1 + oy);
                let expect = (at(x, y) + at(x + 1, y) + at(x, y + 1) + at(x + 1, y + 1)) / 4.0;
                assert!((out.data()[oy * 14 + ox] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn samples_outside_read_zero() {
        let f = Tensor::<f64>::ones([1, 4, 4]);
        let b = BBox::new(-100.0, -100.0, -50.0, -50.0);
        let out = roi_align(&f, &b, 1.0, RoiAlignParams::default()).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        assert!(roi_align(&f, &BBox::new(0.0, 0.0, 0.0, 2.0), 1.0, RoiAlignParams::default()).is_err());
    }

    #[test]
    fn rasterize_examples() {
        let (w, h) = (20, 10);
        let ones = vec![1u8; w * h];
        let t = rasterize_mask_target(&ones, w, h, &BBox::new(2.0, 1.0, 17.0, 9.0), 28).unwrap();
        assert!(t.iter().all(|&v| v == 1.0));

        let left: Vec<u8> = (0..w * h).map(|i| u8::from(i % w < w / 2)).collect();
        let t = rasterize_mask_target(&left, w, h, &BBox::new(0.0, 0.0, 10.0, 10.0), 28).unwrap();
        assert!(t.iter().all(|&v| v == 1.0));

        let t = rasterize_mask_target(&left, w, h, &BBox::new(11.0, 0.0, 20.0, 10.0), 28).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));

        let t = rasterize_mask_target(&ones, w, h, &BBox::new(30.0, 30.0, 40.0, 40.0), 28).unwrap();
        assert!(t.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paste_roundtrips_full_grid() {
        let m = InstanceMask {
            grid: vec![0.9; MASK_SIZE * MASK_SIZE],
            bbox: BBox::new(2.0, 3.0, 9.0, 7.0),
            class_id: 0,
        };
        let img = m.paste(12, 10, 0.5);
        let count: usize = img.iter().map(|&v| v as usize).sum();
        assert_eq!(count, 7 * 4);
        assert_eq!(img[3 * 12 + 2], 1);
        assert_eq!(img[2 * 12 + 2], 0);
    }

    #[test]
    fn mask_head_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::<f32>::new();
        let head = MaskHead::new(&mut store, 8, 4, &mut rng);
        for m in [0usize, 3] {
            let mut g = Graph::new();
            let p = store.bind(&mut g, false);
            let x = g.constant([m, 8, 14, 14], vec![0.1; m * 8 * 196]).unwrap();
            let y = head.forward(&mut g, &p, x).unwrap();
            assert_eq!(g.shape(y), &[m, 4, 28, 28]);
        }
    }
}
