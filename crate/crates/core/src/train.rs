//! Training: target assignment, the combined loss and SGD with momentum.
//!
//! One step: forward the dense heads on a batch; focal loss over every
//! non-ignored anchor; Smooth L1 (fixed or self-adjusting control point)
//! over positive anchors; optionally the mask loss on proposals built
//! from the current predictions plus the ground-truth boxes; backward;
//! SGD update.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::anchors::{generate_anchors, match_anchors, AnchorLabel, AnchorSet, MatchParams};
use crate::autodiff::{Graph, Var};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::{Dataset, Scene};
use crate::error::{invalid, Error, Result};
use crate::geometry::{encode, iou, BBox};
use crate::infer::{assign_rois, mask_logits, postprocess, preprocess, InferenceConfig};
use crate::losses::{
    focal_loss, mask_bce, smooth_l1_per_channel, ClsTarget, FocalParams, LossReport, SelfAdjustState,
};
use crate::mask::{rasterize_mask_target, MASK_SIZE};
use crate::model::Detector;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied at every drop point.
    pub lr_drop_factor: f64,
    /// Drop points as fractions of `iterations`.
    pub lr_drops: Vec<f64>,
    pub warmup_iters: usize,
    pub warmup_factor: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub clip_grad_norm: f64,
    pub best_match_enabled: bool,
    pub best_match_thresh: f64,
    pub self_adjust_enabled: bool,
    /// Fixed control point, or the cap of the self-adjusting one.
    pub beta: f64,
    pub shared_beta_channels: bool,
    pub beta_momentum: f64,
    pub mask_head_enabled: bool,
    /// Predicted boxes kept per image as mask proposals.
    pub proposal_budget: usize,
    /// Score threshold of the proposal chain during training.
    pub proposal_score_threshold: f64,
    /// Proposals need this IoU with an object to carry a mask target.
    pub mask_target_iou: f64,
    /// Cap on mask targets per image (injected ground truths first).
    pub mask_rois_per_image: usize,
    pub cls_loss_weight: f64,
    pub reg_loss_weight: f64,
    pub mask_loss_weight: f64,
    pub hflip: bool,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 2000,
            batch_size: 8,
            base_lr: 0.04,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_drop_factor: 0.1,
            lr_drops: vec![2.0 / 3.0, 8.0 / 9.0],
            warmup_iters: 100,
            warmup_factor: 1.0 / 3.0,
            clip_grad_norm: 2.0,
            best_match_enabled: true,
            best_match_thresh: 0.0,
            self_adjust_enabled: false,
            beta: 0.11,
            shared_beta_channels: false,
            beta_momentum: 0.9,
            mask_head_enabled: false,
            proposal_budget: 100,
            proposal_score_threshold: 0.0,
            mask_target_iou: 0.5,
            mask_rois_per_image: 16,
            cls_loss_weight: 1.0,
            reg_loss_weight: 1.0,
            mask_loss_weight: 1.0,
            hflip: true,
            focal: FocalParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn drop_iterations(&self) -> Vec<usize> {
        self.lr_drops
            .iter()
            .map(|f| (f * self.iterations as f64).floor() as usize)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        // fractions, so short runs may fold several drops into one iteration
        if self.lr_drops.windows(2).any(|w| w[1] <= w[0]) || self.lr_drops.iter().any(|f| !(0.0..1.0).contains(f)) {
            return Err(Error::Config(format!(
                "lr drop fractions {:?} must increase strictly within [0, 1)",
                self.lr_drops
            )));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch_size == 0 || !(self.base_lr > 0.0) || !(self.beta >= 0.0) {
            return Err(Error::Config("batch_size, base_lr and beta must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.beta_momentum) {
            return Err(Error::Config("momenta must lie in [0, 1)".into()));
        }
        self.match_params().validate()
    }

    pub fn match_params(&self) -> MatchParams {
        if self.best_match_enabled {
            MatchParams::with_best_match(self.best_match_thresh)
        } else {
            MatchParams::standard()
        }
    }

    /// Learning rate used at `iteration` (0-based).
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut lr = self.base_lr;
        if iteration < self.warmup_iters {
            let t = iteration as f64 / self.warmup_iters as f64;
            lr *= self.warmup_factor + (1.0 - self.warmup_factor) * t;
        }
        let passed = self.drop_iterations().iter().filter(|&&d| iteration >= d).count();
        lr * self.lr_drop_factor.powi(passed as i32)
    }
}

/// One training image after augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Vec<f32>,
    pub boxes: Vec<BBox>,
    pub classes: Vec<usize>,
    pub masks: Vec<Vec<u8>>,
}

impl Sample {
    pub fn from_scene(scene: &Scene, flip: bool) -> Self {
        let (w, h) = (scene.width, scene.height);
        let flip_grid = |src: &[u8]| -> Vec<u8> {
            let mut out = vec![0; w * h];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = src[y * w + (w - 1 - x)];
                }
            }
            out
        };
        if !flip {
            return Sample {
                image: scene.image.clone(),
                boxes: scene.boxes(),
                classes: scene.classes(),
                masks: scene.objects.iter().map(|o| o.mask.clone()).collect(),
            };
        }
        let mut image = vec![0f32; w * h];
        for y in 0..h {
            for x in 0..w {
                image[y * w + x] = scene.image[y * w + (w - 1 - x)];
            }
        }
        let wf = w as f64;
        Sample {
            image,
            boxes: scene
                .objects
                .iter()
                .map(|o| BBox::new(wf - o.bbox.x2, o.bbox.y1, wf - o.bbox.x1, o.bbox.y2))
                .collect(),
            classes: scene.classes(),
            masks: scene.objects.iter().map(|o| flip_grid(&o.mask)).collect(),
        }
    }
}

/// One row of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iteration: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub report: LossReport,
}

/// Shuffled passes over the training split.
#[derive(Clone, Debug)]
struct Sampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn next(&mut self, n: usize, batch: usize) -> Vec<(usize, bool)> {
        (0..batch)
            .map(|_| {
                if self.cursor >= self.order.len() {
                    self.order = (0..n).collect();
                    self.order.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                self.cursor += 1;
                (self.order[self.cursor - 1], self.rng.random_bool(0.5))
            })
            .collect()
    }
}

pub struct Trainer {
    pub detector: Detector,
    pub config: TrainConfig,
    pub beta_state: SelfAdjustState,
    pub iteration: usize,
    anchors: AnchorSet,
    width: usize,
    height: usize,
    velocity: Vec<Vec<f32>>,
    sampler: Sampler,
}

impl Trainer {
    /// `seed` drives the data order and flips; the detector arrives with
    /// its weights already initialised.
    pub fn new(detector: Detector, config: TrainConfig, width: usize, height: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.mask_head_enabled != detector.net.mask.is_some() {
            return Err(Error::Config("mask_head_enabled disagrees with the detector's mask head".into()));
        }
        let anchors = generate_anchors(&detector.config().anchors, width, height)?;
        let velocity = detector.params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let mut beta_state = SelfAdjustState::new(config.beta, config.shared_beta_channels);
        beta_state.momentum = config.beta_momentum;
        Ok(Trainer {
            detector,
            config,
            beta_state,
            iteration: 0,
            anchors,
            width,
            height,
            velocity,
            sampler: Sampler {
                rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a),
                order: Vec::new(),
                cursor: 0,
            },
        })
    }

    pub fn anchors(&self) -> &AnchorSet {
        &self.anchors
    }

    /// Draws the next batch from `data` (shuffled epochs, random flips).
    pub fn next_batch(&mut self, data: &Dataset) -> Result<Vec<Sample>> {
        if data.is_empty() {
            return Err(invalid!("empty training split"));
        }
        if data.width != self.width || data.height != self.height {
            return Err(invalid!("dataset is {}x{}, trainer expects {}x{}", data.width, data.height, self.width, self.height));
        }
        let picks = self.sampler.next(data.len(), self.config.batch_size);
        Ok(picks
            .into_iter()
            .map(|(i, flip)| Sample::from_scene(&data.scenes[i], flip && self.config.hflip))
            .collect())
    }

    /// Builds the loss graph for `batch`. With `training` set the
    /// self-adjusting statistics in `state` are updated first.
    fn build_loss(
        &self,
        g: &mut Graph<f32>,
        batch: &[Sample],
        state: &mut SelfAdjustState,
        training: bool,
    ) -> Result<(Var, LossReport, crate::nn::Bound)> {
        let cfg = self.detector.config();
        let (w, h) = (self.width, self.height);
        let n = batch.len();
        let a_count = self.anchors.len();
        let k = cfg.num_classes;
        let mut pixels = Vec::with_capacity(n * w * h);
        for s in batch {
            if s.image.len() != w * h {
                return Err(invalid!("sample image has {} pixels, expected {}", s.image.len(), w * h));
            }
            pixels.extend(preprocess(&s.image));
        }
        let p = self.detector.params.bind(g, true);
        let x = g.constant([n, 1, h, w], pixels)?;
        let mask_on = self.config.mask_head_enabled;
        let fwd = self.detector.net.forward(g, &p, x, mask_on)?;

        // anchor targets
        let params = self.config.match_params();
        let mut cls_targets = Vec::with_capacity(n * a_count);
        let mut pos_rows = Vec::new();
        let mut reg_targets = Vec::new();
        for (img, s) in batch.iter().enumerate() {
            if let Some(&c) = s.classes.iter().find(|&&c| c >= k) {
                return Err(invalid!("class {c} out of range for {k} classes"));
            }
            let m = match_anchors(&self.anchors, &s.boxes, &params)?;
            for (a, label) in m.labels.iter().enumerate() {
                cls_targets.push(match label {
                    AnchorLabel::Positive => {
                        let gi = m.gt_index[a].expect("positive anchors carry a match");
                        pos_rows.push(img * a_count + a);
                        let d = encode(&s.boxes[gi], &self.anchors.boxes[a])?;
                        reg_targets.extend(d.to_array().map(|v| v as f32));
                        ClsTarget::Class(s.classes[gi])
                    }
                    AnchorLabel::Negative => ClsTarget::Background,
                    AnchorLabel::Ignore => ClsTarget::Ignore,
                });
            }
        }
        let num_pos = pos_rows.len();

        let cls_loss = focal_loss(g, fwd.cls, &cls_targets, &self.config.focal)?;
        let reg_pred = g.index_rows(fwd.reg, &pos_rows)?;
        let reg_tgt = g.constant([num_pos, 4], reg_targets)?;
        let residual = g.sub(reg_pred, reg_tgt)?;
        let (reg_loss, betas) = if self.config.self_adjust_enabled {
            let l = state.loss(g, residual, training)?;
            (l, state.betas())
        } else {
            let b = [self.config.beta; 4];
            (smooth_l1_per_channel(g, residual, &b, num_pos.max(1) as f64)?, b)
        };

        let mut report = LossReport {
            cls_loss: g.item(cls_loss) as f64,
            reg_loss: g.item(reg_loss) as f64,
            mask_loss: 0.0,
            total: 0.0,
            beta_per_channel: betas,
            running_mean_per_channel: if self.config.self_adjust_enabled {
                state.running_mean
            } else {
                [0.0; 4]
            },
            num_positives: num_pos,
            mask_proposals: 0,
            mask_targets: 0,
        };
        let cls_term = g.scale(cls_loss, self.config.cls_loss_weight)?;
        let reg_term = g.scale(reg_loss, self.config.reg_loss_weight)?;
        let mut total = g.add(cls_term, reg_term)?;

        if mask_on {
            if let Some(mask_loss) = self.mask_loss(g, &p, &fwd, batch, &mut report)? {
                report.mask_loss = g.item(mask_loss) as f64;
                let term = g.scale(mask_loss, self.config.mask_loss_weight)?;
                total = g.add(total, term)?;
            }
        }
        report.total = g.item(total) as f64;
        Ok((total, report, p))
    }

    /// Mask loss on proposals from the current (detached) predictions plus
    /// the ground-truth boxes.
    fn mask_loss(
        &self,
        g: &mut Graph<f32>,
        p: &crate::nn::Bound,
        fwd: &crate::model::Forward,
        batch: &[Sample],
        report: &mut LossReport,
    ) -> Result<Option<Var>> {
        let cfg = self.detector.config();
        let (w, h) = (self.width, self.height);
        let a_count = self.anchors.len();
        let k = cfg.num_classes;
        let chain = InferenceConfig {
            max_detections: self.config.proposal_budget,
            mask_proposals: 0,
            ..InferenceConfig::default()
        };
        let mut boxes = Vec::new();
        let mut targets = Vec::new();
        let mut classes = Vec::new();
        for (img, s) in batch.iter().enumerate() {
            let cls = &g.value(fwd.cls)[img * a_count * k..(img + 1) * a_count * k];
            let reg = &g.value(fwd.reg)[img * a_count * 4..(img + 1) * a_count * 4];
            let dets = postprocess(cls, reg, &self.anchors, k, &chain, self.config.proposal_score_threshold, w, h);
            report.mask_proposals += dets.len() + s.boxes.len();

            // injected ground truths first, then predictions in score order
            let mut picked = 0;
            let candidates = s
                .boxes
                .iter()
                .copied()
                .chain(dets.iter().map(|d| d.bbox));
            for b in candidates {
                if picked >= self.config.mask_rois_per_image {
                    break;
                }
                let best = s
                    .boxes
                    .iter()
                    .enumerate()
                    .map(|(i, gt)| (iou(&b, gt), i))
                    .fold(None, |acc: Option<(f64, usize)>, cur| match acc {
                        Some(a) if a.0 >= cur.0 => Some(a),
                        _ => Some(cur),
                    });
                let Some((overlap, gi)) = best else { break };
                if overlap < self.config.mask_target_iou {
                    continue;
                }
                targets.extend(rasterize_mask_target(&s.masks[gi], w, h, &b, MASK_SIZE)?);
                classes.push(s.classes[gi]);
                boxes.push((img, b));
                picked += 1;
            }
        }
        report.mask_targets = boxes.len();
        let rois = assign_rois(&boxes, &cfg.level_assignment())?;
        let Some(logits) = mask_logits(g, &self.detector.net, p, fwd, &rois)? else {
            return Ok(None);
        };
        mask_bce(g, logits, &targets, &classes).map(Some)
    }

    /// Loss and parameter gradients for `batch` without touching the
    /// weights or the self-adjusting statistics.
    pub fn gradients(&self, batch: &[Sample]) -> Result<(LossReport, Vec<Vec<f32>>)> {
        let mut g = Graph::new();
        let mut state = self.beta_state;
        let (total, report, p) = self.build_loss(&mut g, batch, &mut state, false)?;
        g.backward(total)?;
        let grads = p
            .vars()
            .iter()
            .map(|&v| g.grad(v).map(<[f32]>::to_vec).unwrap_or_else(|| vec![0.0; g.numel(v)]))
            .collect();
        Ok((report, grads))
    }

    /// Loss of `batch` under the current weights and frozen control points.
    pub fn evaluate_loss(&self, batch: &[Sample]) -> Result<LossReport> {
        let mut g = Graph::new();
        let mut state = self.beta_state;
        Ok(self.build_loss(&mut g, batch, &mut state, false)?.1)
    }

    /// One optimisation step. The report describes the batch before the
    /// update.
    pub fn train_step(&mut self, batch: &[Sample]) -> Result<LossReport> {
        let mut g = Graph::new();
        let mut state = self.beta_state;
        let (total, report, p) = self.build_loss(&mut g, batch, &mut state, true)?;
        if !report.is_finite() {
            return Err(Error::Invariant(format!(
                "non-finite loss at iteration {}: {:?}",
                self.iteration, report
            )));
        }
        g.backward(total)?;
        self.beta_state = state;

        let lr = self.config.lr_at(self.iteration) as f32;
        let mu = self.config.momentum as f32;
        let wd = self.config.weight_decay as f32;
        let mut scale = 1.0f32;
        if self.config.clip_grad_norm > 0.0 {
            let norm = p
                .vars()
                .iter()
                .filter_map(|&v| g.grad(v))
                .flat_map(|gr| gr.iter())
                .map(|&x| (x as f64) * (x as f64))
                .sum::<f64>()
                .sqrt();
            if norm > self.config.clip_grad_norm {
                scale = (self.config.clip_grad_norm / norm) as f32;
            }
        }
        let ids: Vec<_> = self.detector.params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let decay = self.detector.params.name(id).ends_with(".weight");
            let Some(grad) = g.grad(p.vars()[slot]) else { continue };
            let vel = &mut self.velocity[slot];
            let w = self.detector.params.get_mut(id).data_mut();
            for ((wi, vi), &gi) in w.iter_mut().zip(vel.iter_mut()).zip(grad) {
                let mut d = gi * scale;
                if decay {
                    d += wd * *wi;
                }
                *vi = mu * *vi + d;
                *wi -= lr * *vi;
            }
        }
        if self.detector.params.iter().any(|(_, t)| !t.is_finite()) {
            return Err(Error::Invariant(format!("non-finite weights after iteration {}", self.iteration)));
        }
        self.iteration += 1;
        Ok(report)
    }

    /// Trains until `config.iterations`, reporting every step.
    pub fn fit(&mut self, data: &Dataset, mut on_step: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        while self.iteration < self.config.iterations {
            let batch = self.next_batch(data)?;
            let lr = self.config.lr_at(self.iteration);
            let iteration = self.iteration;
            let report = self.train_step(&batch)?;
            on_step(&StepRecord { iteration, lr, report })?;
        }
        Ok(())
    }
}

impl Trainer {
    /// Fresh detector and trainer for a run configuration.
    pub fn from_config(config: &RunConfig) -> Result<Self> {
        config.validate()?;
        let detector = Detector::new(&config.model, config.train.mask_head_enabled, config.seed)?;
        Trainer::new(detector, config.train.clone(), config.data.width, config.data.height, config.seed)
    }

    pub fn checkpoint(&self, config: &RunConfig) -> Checkpoint {
        Checkpoint {
            config: config.clone(),
            iteration: self.iteration as u64,
            beta_state: self.beta_state,
            detector: self.detector.clone(),
        }
    }
}
