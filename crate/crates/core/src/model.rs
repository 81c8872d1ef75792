//! The micro detector: a small strided backbone, a feature pyramid with
//! top-down connections, shared classification / box heads and the
//! optional mask head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{level_extent, AnchorConfig};
use crate::autodiff::{Graph, Var};
use crate::error::{invalid, shape_err, Result};
use crate::losses::FocalParams;
use crate::mask::{LevelAssignment, MaskHead};
use crate::nn::{Bound, Conv2dLayer, Init, ParamStore};
use crate::tensor::Element;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    /// Output channels of the stem (stride 2) and of stages C2..C5.
    pub stage_channels: Vec<usize>,
    /// Channel width of every pyramid level and of the heads.
    pub fpn_width: usize,
    /// Hidden 3×3 conv + relu layers in each dense head.
    pub head_depth: usize,
    pub anchors: AnchorConfig,
    pub prior_prob: f64,
    /// Sample mask features from P2..P5 instead of P3..P5.
    pub mask_p2: bool,
    /// Box side that maps to P4 under the level rule.
    pub mask_canonical: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            in_channels: 1,
            num_classes: 4,
            stage_channels: vec![16, 24, 32, 48, 64],
            fpn_width: 32,
            head_depth: 4,
            anchors: AnchorConfig {
                scale: 0.25,
                ..AnchorConfig::default()
            },
            prior_prob: 0.01,
            mask_p2: false,
            mask_canonical: 56.0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.anchors.validate()?;
        if self.anchors.levels.iter().any(|l| !(3..=7).contains(l)) {
            return Err(invalid!("pyramid levels must lie in 3..=7, got {:?}", self.anchors.levels));
        }
        if self.stage_channels.len() != 5 || self.stage_channels.contains(&0) {
            return Err(invalid!("stage_channels needs five positive widths"));
        }
        if self.in_channels == 0 || self.num_classes == 0 || self.fpn_width == 0 {
            return Err(invalid!("channel counts must be positive"));
        }
        if !(self.prior_prob > 0.0 && self.prior_prob < 1.0) {
            return Err(invalid!("prior_prob must lie in (0, 1)"));
        }
        self.level_assignment().validate()
    }

    pub fn level_assignment(&self) -> LevelAssignment {
        LevelAssignment {
            canonical: self.mask_canonical,
            min_level: if self.mask_p2 { 2 } else { 3 },
            ..LevelAssignment::default()
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.anchors_per_location()
    }
}

/// Layer descriptors; the weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    stem: Conv2dLayer,
    /// `(downsampling conv, refining conv)` for C2..C5.
    stages: Vec<(Conv2dLayer, Conv2dLayer)>,
    /// Lateral 1×1 convs for C2..C5 (C2 only when P2 is enabled).
    laterals: Vec<Option<Conv2dLayer>>,
    /// 3×3 output convs for P2..P5.
    outputs: Vec<Option<Conv2dLayer>>,
    p6: Conv2dLayer,
    p7: Conv2dLayer,
    cls_convs: Vec<Conv2dLayer>,
    cls_out: Conv2dLayer,
    reg_convs: Vec<Conv2dLayer>,
    reg_out: Conv2dLayer,
    pub mask: Option<MaskHead>,
}

/// Everything a forward pass produces.
#[derive(Clone, Debug)]
pub struct Forward {
    /// Pyramid maps used by the dense heads, one per anchor level.
    pub levels: Vec<(u8, Var)>,
    /// Maps the mask branch samples from.
    pub mask_levels: Vec<(u8, Var)>,
    /// `[N·A, num_classes]` logits, image-major in anchor order.
    pub cls: Var,
    /// `[N·A, 4]` box deltas in the same order.
    pub reg: Var,
    /// Operations recorded up to and including the dense heads.
    pub detection_ops: u64,
}

impl Network {
    /// Builds the layers and initialises their weights in `store`. The mask
    /// head exists only when `with_mask` is set.
    pub fn new<T: Element>(config: &ModelConfig, with_mask: bool, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rng = &mut rng;
        let ch = &config.stage_channels;
        let w = config.fpn_width;
        let he = Init::HeNormal;
        let stem = Conv2dLayer::new(store, "backbone.stem", config.in_channels, ch[0], 3, 2, he, 0.0, rng);
        let stages = (1..5)
            .map(|i| {
                let down = Conv2dLayer::new(store, &format!("backbone.c{}.down", i + 1), ch[i - 1], ch[i], 3, 2, he, 0.0, rng);
                let refine = Conv2dLayer::new(store, &format!("backbone.c{}.conv", i + 1), ch[i], ch[i], 3, 1, he, 0.0, rng);
                (down, refine)
            })
            .collect();
        let use_p2 = with_mask && config.mask_p2;
        let mut laterals = Vec::new();
        let mut outputs = Vec::new();
        for (i, level) in (2..=5).enumerate() {
            if level == 2 && !use_p2 {
                laterals.push(None);
                outputs.push(None);
                continue;
            }
            laterals.push(Some(Conv2dLayer::new(store, &format!("fpn.lateral{level}"), ch[i + 1], w, 1, 1, he, 0.0, rng)));
            outputs.push(Some(Conv2dLayer::new(store, &format!("fpn.output{level}"), w, w, 3, 1, he, 0.0, rng)));
        }
        let p6 = Conv2dLayer::new(store, "fpn.p6", ch[4], w, 3, 2, he, 0.0, rng);
        let p7 = Conv2dLayer::new(store, "fpn.p7", w, w, 3, 2, he, 0.0, rng);

        let a = config.num_anchors();
        let mut hidden = |name: &str, rng: &mut ChaCha8Rng| {
            (0..config.head_depth)
                .map(|i| Conv2dLayer::new(store, &format!("{name}.conv{i}"), w, w, 3, 1, he, 0.0, rng))
                .collect::<Vec<_>>()
        };
        let cls_convs = hidden("cls", rng);
        let reg_convs = hidden("reg", rng);
        let prior = FocalParams {
            prior_prob: config.prior_prob,
            ..FocalParams::default()
        }
        .prior_bias();
        let cls_out = Conv2dLayer::new(store, "cls.out", w, a * config.num_classes, 3, 1, Init::Normal(0.01), prior, rng);
        let reg_out = Conv2dLayer::new(store, "reg.out", w, a * 4, 3, 1, Init::Normal(0.01), 0.0, rng);
        let mask = with_mask.then(|| MaskHead::new(store, w, config.num_classes, rng));
        Ok(Network {
            config: config.clone(),
            stem,
            stages,
            laterals,
            outputs,
            p6,
            p7,
            cls_convs,
            cls_out,
            reg_convs,
            reg_out,
            mask,
        })
    }

    /// Applies the shared dense heads to one pyramid map.
    fn head<T: Element>(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        x: Var,
        convs: &[Conv2dLayer],
        out: &Conv2dLayer,
        row_width: usize,
    ) -> Result<Var> {
        let mut h = x;
        for c in convs {
            h = c.forward_relu(g, p, h)?;
        }
        let y = out.forward(g, p, h)?;
        g.nchw_to_rows(y, row_width)
    }

    /// Runs backbone, pyramid and dense heads on `[N, C, H, W]` images.
    /// With `mask_features` set, also returns the maps the mask branch
    /// samples from; everything that path adds is recorded after the dense
    /// heads.
    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &Bound, images: Var, mask_features: bool) -> Result<Forward> {
        let s = g.shape(images).to_vec();
        if s.len() != 4 || s[1] != self.config.in_channels {
            return Err(shape_err!("expected [N, {}, H, W] images, got {:?}", self.config.in_channels, s));
        }
        let (n, height, width) = (s[0], s[2], s[3]);
        let ops_before = g.op_count();

        let mut x = self.stem.forward_relu(g, p, images)?;
        let mut c = Vec::with_capacity(4); // C2..C5
        for (down, refine) in &self.stages {
            x = down.forward_relu(g, p, x)?;
            x = refine.forward_relu(g, p, x)?;
            c.push(x);
        }

        // top-down merge over C5..C3; P2 is only built for the mask branch
        let mut merged: [Option<Var>; 4] = [None; 4];
        for i in (1..4).rev() {
            let lat = self.laterals[i].as_ref().expect("C3..C5 laterals exist");
            let mut m = lat.forward(g, p, c[i])?;
            if let Some(up) = merged.get(i + 1).copied().flatten() {
                let (h, w) = (g.shape(m)[2], g.shape(m)[3]);
                let up = g.upsample_nearest2x_to(up, h, w)?;
                m = g.add(m, up)?;
            }
            merged[i] = Some(m);
        }
        let mut pyramid: Vec<(u8, Var)> = Vec::new();
        for (i, m) in merged.iter().enumerate().skip(1) {
            let out = self.outputs[i].as_ref().expect("P3..P5 outputs exist");
            pyramid.push((i as u8 + 2, out.forward(g, p, m.expect("merged above"))?));
        }
        let p6 = self.p6.forward(g, p, c[3])?;
        let p6_act = g.relu(p6)?;
        let p7 = self.p7.forward(g, p, p6_act)?;
        pyramid.push((6, p6));
        pyramid.push((7, p7));

        let levels: Vec<(u8, Var)> = self
            .config
            .anchors
            .levels
            .iter()
            .map(|l| *pyramid.iter().find(|(pl, _)| pl == l).expect("level built"))
            .collect();
        for &(l, v) in &levels {
            let sh = g.shape(v);
            if sh[2] != level_extent(height, l) || sh[3] != level_extent(width, l) {
                return Err(shape_err!("P{} has extent {:?}, anchors expect ceil division", l, sh));
            }
        }

        let k = self.config.num_classes;
        let mut cls_parts = Vec::with_capacity(levels.len());
        let mut reg_parts = Vec::with_capacity(levels.len());
        let mut counts = Vec::with_capacity(levels.len());
        for &(_, v) in &levels {
            cls_parts.push(self.head(g, p, v, &self.cls_convs, &self.cls_out, k)?);
            reg_parts.push(self.head(g, p, v, &self.reg_convs, &self.reg_out, 4)?);
            counts.push(g.shape(*reg_parts.last().unwrap())[0] / n);
        }
        let cls = g.concat0(&cls_parts)?;
        let reg = g.concat0(&reg_parts)?;
        // level-major → image-major rows
        let perm = image_major_order(&counts, n);
        let cls = g.index_rows(cls, &perm)?;
        let reg = g.index_rows(reg, &perm)?;
        let detection_ops = g.op_count() - ops_before;

        if !mask_features {
            return Ok(Forward {
                levels,
                mask_levels: Vec::new(),
                cls,
                reg,
                detection_ops,
            });
        }
        if let (Some(lat), Some(out)) = (&self.laterals[0], &self.outputs[0]) {
            let mut m = lat.forward(g, p, c[0])?;
            let (h, w) = (g.shape(m)[2], g.shape(m)[3]);
            let up = g.upsample_nearest2x_to(merged[1].unwrap(), h, w)?;
            m = g.add(m, up)?;
            pyramid.push((2, out.forward(g, p, m)?));
        }
        let mask_levels = self
            .config
            .level_assignment()
            .levels()
            .filter_map(|l| pyramid.iter().find(|(pl, _)| *pl == l).copied())
            .collect();
        Ok(Forward {
            levels,
            mask_levels,
            cls,
            reg,
            detection_ops,
        })
    }
}

/// Row permutation turning per-level blocks `[level][image][anchor]` into
/// `[image][level][anchor]`.
fn image_major_order(counts: &[usize], images: usize) -> Vec<usize> {
    let mut bases = Vec::with_capacity(counts.len());
    let mut acc = 0;
    for &c in counts {
        bases.push(acc);
        acc += c * images;
    }
    let mut perm = Vec::with_capacity(acc);
    for img in 0..images {
        for (&base, &c) in bases.iter().zip(counts) {
            perm.extend(base + img * c..base + (img + 1) * c);
        }
    }
    perm
}

/// A network together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Detector {
    pub net: Network,
    pub params: ParamStore<f32>,
}

impl Detector {
    pub fn new(config: &ModelConfig, with_mask: bool, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let net = Network::new(config, with_mask, &mut params, seed)?;
        Ok(Detector { net, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::generate_anchors;
    use crate::autodiff::sigmoid;

    fn run(config: &ModelConfig, with_mask: bool, n: usize, h: usize, w: usize) -> (Graph<f32>, Forward) {
        let det = Detector::new(config, with_mask, 7).unwrap();
        let mut g = Graph::new();
        let p = det.params.bind(&mut g, false);
        let img: Vec<f32> = (0..n * h * w).map(|i| ((i * 31) % 17) as f32 / 17.0).collect();
        let x = g.constant([n, 1, h, w], img).unwrap();
        let f = det.net.forward(&mut g, &p, x, with_mask).unwrap();
        (g, f)
    }

    #[test]
    fn head_channels() {
        let c = ModelConfig::default();
        assert_eq!(c.num_anchors() * c.num_classes, 36);
        assert_eq!(c.num_anchors() * 4, 36);
    }

    #[test]
    fn rows_match_anchor_count() {
        let c = ModelConfig::default();
        let (g, f) = run(&c, true, 2, 64, 96);
        let anchors = generate_anchors(&c.anchors, 96, 64).unwrap();
        assert_eq!(g.shape(f.cls), &[2 * anchors.len(), 4]);
        assert_eq!(g.shape(f.reg), &[2 * anchors.len(), 4]);
        assert_eq!(f.mask_levels.iter().map(|l| l.0).collect::<Vec<_>>(), vec![3, 4, 5]);
    }

    #[test]
    fn initial_probability_near_prior() {
        let (g, f) = run(&ModelConfig::default(), false, 1, 64, 64);
        let probs = g.value(f.cls);
        let mean = probs.iter().map(|&z| sigmoid(z as f64)).sum::<f64>() / probs.len() as f64;
        assert!((0.005..=0.02).contains(&mean), "mean prob {mean}");
    }

    #[test]
    fn p2_switch_adds_a_mask_level() {
        let c = ModelConfig {
            mask_p2: true,
            ..ModelConfig::default()
        };
        let (_, f) = run(&c, true, 1, 64, 64);
        assert_eq!(f.mask_levels.iter().map(|l| l.0).collect::<Vec<_>>(), vec![2, 3, 4, 5]);
    }

    #[test]
    fn permutation_is_image_major() {
        assert_eq!(image_major_order(&[2, 1], 2), vec![0, 1, 4, 2, 3, 5]);
    }
}
