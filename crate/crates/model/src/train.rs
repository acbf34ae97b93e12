//! The staged training loop: target assignment, the four task losses,
//! freezing, clipped momentum SGD and the per-epoch loss log.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mslayout_core::corpus::{CorpusManifest, DocumentAnnotation, Split};
use mslayout_core::detect::anchors::encode_box_deltas;
use mslayout_core::detect::losses::{
    focal_with_logits, smooth_l1, smooth_l1_grad, softmax_cross_entropy, total_loss, LossComponents, LossWeights,
    FOCAL_GAMMA, MASK_SIZE,
};
use mslayout_core::detect::rpn::{rpn_propose, ProposalConfig, RpnOutput};
use mslayout_core::detect::targets::{
    assign_anchor_targets, assign_roi_targets, mask_target_from_raster, sample_anchors, AnchorLabel, AnchorTarget,
};
use mslayout_core::geometry::{mask_to_box, rasterize_polygon, BBox, BinaryMask};
use mslayout_core::preprocess::{preprocess_image, RgbImage};

use crate::checkpoint;
use crate::net::{Network, NetworkConfig, DELTA_STD, NUM_CLASSES};
use crate::params::{ParamStore, TrainableScope};
use crate::tensor::Tensor;
use crate::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskLoss {
    Bce,
    Focal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub stage: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub scope: TrainableScope,
    pub mask_loss: MaskLoss,
}

impl StageConfig {
    /// 30 epochs of heads at 1e-3 with BCE masks, 20 epochs of stage 4 and
    /// up at 1e-3 with focal masks, 15 epochs of everything at 1e-4.
    pub fn default_schedule() -> Vec<StageConfig> {
        Self::schedule([30, 20, 15])
    }

    /// The default schedule with other epoch counts.
    pub fn schedule(epochs: [usize; 3]) -> Vec<StageConfig> {
        vec![
            StageConfig {
                stage: 1,
                epochs: epochs[0],
                learning_rate: 1e-3,
                scope: TrainableScope::HeadsOnly,
                mask_loss: MaskLoss::Bce,
            },
            StageConfig {
                stage: 2,
                epochs: epochs[1],
                learning_rate: 1e-3,
                scope: TrainableScope::Stage4AndUp,
                mask_loss: MaskLoss::Focal,
            },
            StageConfig {
                stage: 3,
                epochs: epochs[2],
                learning_rate: 1e-4,
                scope: TrainableScope::All,
                mask_loss: MaskLoss::Focal,
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub clip_norm: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 1,
            clip_norm: 0.5,
        }
    }
}

/// Everything a training run needs besides the data and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub network: NetworkConfig,
    pub stages: Vec<StageConfig>,
    pub optimizer: OptimizerConfig,
    pub loss_weights: LossWeights,
    /// Optimizer steps per epoch; `None` means one pass over the training split.
    pub steps_per_epoch: Option<usize>,
    /// Anchors sampled per image for the proposal loss.
    pub rpn_anchors_per_image: usize,
    /// RoIs sampled per image for the head losses.
    pub rois_per_image: usize,
    pub roi_positive_fraction: f64,
    pub roi_foreground_iou: f64,
    pub rpn_objectness_floor: f64,
    /// Weights file whose matching layers replace the random initialization.
    pub pretrained: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            network: NetworkConfig::full(),
            stages: StageConfig::default_schedule(),
            optimizer: OptimizerConfig::default(),
            loss_weights: LossWeights::default(),
            steps_per_epoch: None,
            rpn_anchors_per_image: 256,
            rois_per_image: 200,
            roi_positive_fraction: 0.33,
            roi_foreground_iou: 0.5,
            rpn_objectness_floor: 0.0,
            pretrained: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.stages.is_empty() {
            return err("stage list is empty".into());
        }
        for s in &self.stages {
            if !(1..=3).contains(&s.stage) {
                return err(format!("stage index {} outside 1..=3", s.stage));
            }
            if !(s.learning_rate > 0.0 && s.learning_rate.is_finite()) {
                return err(format!("stage {} learning rate must be positive", s.stage));
            }
        }
        let o = &self.optimizer;
        if !(o.momentum > 0.0 && o.momentum < 1.0) || o.weight_decay <= 0.0 || o.clip_norm <= 0.0 {
            return err("momentum must be in (0,1); weight decay and clip norm positive".into());
        }
        if o.batch_size != 1 {
            return err(format!("batch size {} unsupported; images are processed one at a time", o.batch_size));
        }
        if self.steps_per_epoch == Some(0) || self.rpn_anchors_per_image == 0 || self.rois_per_image == 0 {
            return err("step and sample counts must be positive".into());
        }
        if !(self.roi_positive_fraction > 0.0 && self.roi_positive_fraction <= 1.0) {
            return err("roi_positive_fraction must be in (0,1]".into());
        }
        Ok(())
    }
}

/// A training document with its decoded image.
#[derive(Debug, Clone)]
pub struct TrainingDocument {
    pub annotation: DocumentAnnotation,
    pub image: RgbImage,
}

/// One line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: usize,
    /// Epoch within the stage, from 1.
    pub epoch: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub total: f64,
    pub components: LossComponents,
    /// Largest global gradient norm before clipping.
    pub max_grad_norm: f64,
    /// Largest global gradient norm after clipping.
    pub max_clipped_norm: f64,
}

pub fn render_loss_log(records: &[EpochRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
        .collect()
}

#[derive(Debug)]
pub struct TrainingOutcome {
    pub network: Network,
    pub log: Vec<EpochRecord>,
}

/// Per-document data that does not change during training.
struct Prepared {
    doc_id: String,
    input: Tensor,
    content: (f64, f64),
    gt_boxes: Vec<BBox>,
    gt_classes: Vec<usize>,
    gt_polygons: Vec<Vec<[f64; 2]>>,
    anchor_targets: Vec<AnchorTarget>,
}

fn prepare(net: &Network, doc: &TrainingDocument, anchors: &[BBox]) -> Result<Prepared> {
    let canvas = net.config.canvas;
    let pre = preprocess_image(&doc.image, canvas)?;
    let input = net.input_tensor(&pre.canvas)?;
    let mut gt_boxes = Vec::new();
    let mut gt_classes = Vec::new();
    let mut gt_polygons = Vec::new();
    for region in &doc.annotation.regions {
        let verts: Vec<[f64; 2]> = region
            .boundary
            .vertices()
            .iter()
            .map(|&[x, y]| [x * pre.scale, y * pre.scale])
            .collect();
        let raster = rasterize_polygon(&verts, canvas, canvas)?;
        match mask_to_box(&raster) {
            Some(b) => {
                gt_boxes.push(b);
                gt_classes.push(region.region_class.index());
                gt_polygons.push(verts);
            }
            None => log::warn!(
                "{}: {} region covers no pixel centre at the network scale; not used for training",
                doc.annotation.doc_id,
                region.region_class.abbreviation()
            ),
        }
    }
    let anchor_targets = assign_anchor_targets(anchors, &gt_boxes);
    Ok(Prepared {
        doc_id: doc.annotation.doc_id.clone(),
        input,
        content: (pre.content_width as f64, pre.content_height as f64),
        gt_boxes,
        gt_classes,
        gt_polygons,
        anchor_targets,
    })
}

/// Momentum SGD with weight decay folded into the gradient and global-norm
/// clipping.
struct Sgd {
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    fn new(ps: &ParamStore) -> Self {
        Sgd {
            velocity: ps.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Returns the gradient norm before and after clipping.
    fn step(&mut self, ps: &mut ParamStore, lr: f64, opt: &OptimizerConfig) -> (f64, f64) {
        let wd = opt.weight_decay as f32;
        let ids: Vec<usize> = ps.iter_trainable().map(|(i, _)| i).collect();
        let mut sq = 0.0f64;
        for &i in &ids {
            let p = &mut ps.params[i];
            for (g, w) in p.grad.iter_mut().zip(&p.value) {
                *g += wd * w;
                sq += (*g as f64) * (*g as f64);
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > opt.clip_norm { (opt.clip_norm / norm) as f32 } else { 1.0 };
        let (mu, lr) = (opt.momentum as f32, lr as f32);
        let mut clipped = 0.0f64;
        for &i in &ids {
            let p = &mut ps.params[i];
            let v = &mut self.velocity[i];
            for ((w, g), v) in p.value.iter_mut().zip(&p.grad).zip(v.iter_mut()) {
                let g = g * scale;
                clipped += (g as f64) * (g as f64);
                *v = mu * *v + g;
                *w -= lr * *v;
            }
        }
        (norm, clipped.sqrt())
    }
}

/// Picks RoIs for the head losses: up to `fraction * total` positives, then
/// negatives in the matching proportion (all negatives up to `total` when no
/// positive exists). Positives come first.
fn sample_rois<R: rand::Rng>(
    labels: &[Option<usize>],
    total: usize,
    fraction: f64,
    rng: &mut R,
) -> (Vec<usize>, Vec<usize>) {
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_some()).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| labels[i].is_none()).collect();
    let n_pos = pos.len().min((fraction * total as f64).round() as usize);
    let n_neg = if n_pos == 0 {
        neg.len().min(total)
    } else {
        let wanted = ((n_pos as f64 / fraction).floor() as usize).saturating_sub(n_pos);
        neg.len().min(wanted).min(total - n_pos)
    };
    let mut p: Vec<usize> = pos.choose_multiple(rng, n_pos).copied().collect();
    let mut n: Vec<usize> = neg.choose_multiple(rng, n_neg).copied().collect();
    p.sort_unstable();
    n.sort_unstable();
    (p, n)
}

/// Smallest side a RoI may have to enter the heads.
const MIN_ROI_SIDE: f64 = 1.0;

/// One forward/backward pass; gradients are accumulated into the network.
fn train_step(
    net: &mut Network,
    doc: &Prepared,
    anchors: &[BBox],
    cfg: &TrainingConfig,
    mask_loss: MaskLoss,
    rng: &mut ChaCha8Rng,
) -> Result<LossComponents> {
    let w = cfg.loss_weights;
    let feats = net.features(&doc.input);
    let (raw, rpn_cache) = net.rpn(&feats.levels);

    // proposal loss over sampled anchors
    let sampled = sample_anchors(&doc.anchor_targets, cfg.rpn_anchors_per_image, rng);
    let mut d_logits = vec![[0.0f32; 2]; anchors.len()];
    let mut d_deltas = vec![[0.0f32; 4]; anchors.len()];
    let mut rpn_class = 0.0;
    let mut rpn_box = 0.0;
    let n_sampled = sampled.len().max(1) as f64;
    let positives: Vec<usize> = sampled
        .iter()
        .copied()
        .filter(|&a| doc.anchor_targets[a].label == AnchorLabel::Positive)
        .collect();
    for &a in &sampled {
        let target = usize::from(doc.anchor_targets[a].label == AnchorLabel::Positive);
        let logits = [raw.logits[a][0] as f64, raw.logits[a][1] as f64];
        let (loss, grad) = softmax_cross_entropy(&logits, target)?;
        rpn_class += loss / n_sampled;
        d_logits[a] = [(grad[0] / n_sampled * w.rpn) as f32, (grad[1] / n_sampled * w.rpn) as f32];
    }
    let n_pos = positives.len().max(1) as f64;
    for &a in &positives {
        let gt = doc.anchor_targets[a].gt.expect("positive anchors have a gt");
        let target = normalized_deltas(&anchors[a], &doc.gt_boxes[gt])?;
        let pred: Vec<f64> = raw.deltas[a].iter().map(|&v| v as f64).collect();
        rpn_box += smooth_l1(&pred, &target)? / n_pos;
        let g = smooth_l1_grad(&pred, &target)?;
        d_deltas[a] = std::array::from_fn(|k| (g[k] / n_pos * w.rpn) as f32);
    }

    // proposals for the heads, with the ground truth boxes appended
    let pcfg = ProposalConfig {
        objectness_floor: cfg.rpn_objectness_floor,
        ..ProposalConfig::training()
    };
    let rpn_out = RpnOutput {
        objectness: raw.objectness(),
        deltas: raw.box_deltas(),
    };
    let mut rois: Vec<BBox> = rpn_propose(&rpn_out, anchors, Some(doc.content), &pcfg)?
        .into_iter()
        .map(|p| p.bbox)
        .filter(|b| b.width() >= MIN_ROI_SIDE && b.height() >= MIN_ROI_SIDE)
        .collect();
    rois.extend(doc.gt_boxes.iter().copied());
    let labels = assign_roi_targets(&rois, &doc.gt_boxes, cfg.roi_foreground_iou);
    let (pos, neg) = sample_rois(&labels, cfg.rois_per_image, cfg.roi_positive_fraction, rng);
    let chosen: Vec<usize> = pos.iter().chain(&neg).copied().collect();
    let head_rois: Vec<BBox> = chosen.iter().map(|&i| rois[i]).collect();

    let mut d_levels = net.rpn_backward(&feats.levels, &rpn_cache, &d_logits, &d_deltas);

    // class and box heads
    let mut class_loss = 0.0;
    let mut box_loss = 0.0;
    if !head_rois.is_empty() {
        let out = net.box_head(&feats.levels, &head_rois)?;
        let n = head_rois.len();
        let mut d_class = vec![0.0f32; n * NUM_CLASSES];
        let mut d_box = vec![0.0f32; n * NUM_CLASSES * 4];
        for (row, &ri) in chosen.iter().enumerate() {
            let target = labels[ri].map_or(0, |g| doc.gt_classes[g] + 1);
            let logits: Vec<f64> = out.class_logits[row * NUM_CLASSES..(row + 1) * NUM_CLASSES]
                .iter()
                .map(|&v| v as f64)
                .collect();
            let (loss, grad) = softmax_cross_entropy(&logits, target)?;
            class_loss += loss / n as f64;
            for (k, g) in grad.iter().enumerate() {
                d_class[row * NUM_CLASSES + k] = (g / n as f64 * w.class) as f32;
            }
        }
        let n_pos = pos.len().max(1) as f64;
        for (row, &ri) in pos.iter().enumerate() {
            let g = labels[ri].expect("positive");
            let cls = doc.gt_classes[g] + 1;
            let target = normalized_deltas(&rois[ri], &doc.gt_boxes[g])?;
            let off = (row * NUM_CLASSES + cls) * 4;
            let pred: Vec<f64> = out.deltas[off..off + 4].iter().map(|&v| v as f64).collect();
            box_loss += smooth_l1(&pred, &target)? / n_pos;
            for (k, gk) in smooth_l1_grad(&pred, &target)?.iter().enumerate() {
                d_box[off + k] = (gk / n_pos * w.bbox) as f32;
            }
        }
        net.box_head_backward(&out, &d_class, &d_box, &mut d_levels);
    }

    // mask head on positives
    let mut mask_value = 0.0;
    if !pos.is_empty() {
        let pos_rois: Vec<BBox> = pos.iter().map(|&i| rois[i]).collect();
        let out = net.mask_head(&feats.levels, &pos_rois)?;
        let n = pos_rois.len();
        let cells = MASK_SIZE * MASK_SIZE;
        let mut d_mask = Tensor::zeros_like(&out.logits);
        let canvas = net.config.canvas;
        let mut rasters: Vec<Option<BinaryMask>> = vec![None; doc.gt_boxes.len()];
        let gamma = match mask_loss {
            MaskLoss::Bce => 0.0,
            MaskLoss::Focal => FOCAL_GAMMA,
        };
        for (row, &ri) in pos.iter().enumerate() {
            let g = labels[ri].expect("positive");
            if rasters[g].is_none() {
                rasters[g] = Some(rasterize_polygon(&doc.gt_polygons[g], canvas, canvas)?);
            }
            let target = mask_target_from_raster(rasters[g].as_ref().expect("rasterized"), &rois[ri])?;
            let ch = doc.gt_classes[g];
            let off = (ch * n + row) * cells;
            let logits: Vec<f64> = out.logits.data[off..off + cells].iter().map(|&v| v as f64).collect();
            let (loss, grad) = focal_with_logits(&logits, target.bits(), gamma)?;
            mask_value += loss / n as f64;
            for (k, gk) in grad.iter().enumerate() {
                d_mask.data[off + k] = (gk / n as f64 * w.mask) as f32;
            }
        }
        net.mask_head_backward(&out, &d_mask, &mut d_levels);
    }

    net.features_backward(&feats, d_levels);
    Ok(LossComponents {
        rpn: rpn_class + rpn_box,
        class: class_loss,
        bbox: box_loss,
        mask: mask_value,
    })
}

fn normalized_deltas(from: &BBox, to: &BBox) -> Result<Vec<f64>> {
    let d = encode_box_deltas(from, to)?;
    Ok((0..4).map(|k| d[k] / DELTA_STD[k]).collect())
}

/// Builds the initial network: seeded random weights, then any matching
/// pretrained layers.
pub fn initial_network(cfg: &TrainingConfig, seed: u64) -> Result<Network> {
    let mut net = Network::new(cfg.network.clone(), seed);
    match &cfg.pretrained {
        Some(path) => {
            let ckpt = checkpoint::read(path)?;
            let taken = checkpoint::load_matching(&mut net, &ckpt);
            log::info!(
                "loaded {taken} of {} layers from pretrained weights {}",
                net.params.params.len(),
                path.display()
            );
        }
        None => log::warn!(
            "NO PRETRAINED WEIGHTS: the network starts from seeded random initialization (seed {seed}); \
             expect far weaker results than a pretrained backbone"
        ),
    }
    Ok(net)
}

/// Runs the configured stages on the training split.
///
/// `on_epoch` sees each log record as soon as its epoch finishes.
pub fn run_training(
    docs: &[TrainingDocument],
    manifest: &CorpusManifest,
    cfg: &TrainingConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let mut train: Vec<&TrainingDocument> = docs
        .iter()
        .filter(|d| manifest.split_of(&d.annotation.doc_id) == Some(Split::Train))
        .collect();
    train.sort_by(|a, b| a.annotation.doc_id.cmp(&b.annotation.doc_id));
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let mut net = initial_network(cfg, seed)?;
    train_network(&mut net, &train, cfg, seed, &mut on_epoch).map(|log| TrainingOutcome { network: net, log })
}

/// Runs the configured stages on an existing network.
pub fn train_network(
    net: &mut Network,
    train: &[&TrainingDocument],
    cfg: &TrainingConfig,
    seed: u64,
    on_epoch: &mut dyn FnMut(&EpochRecord),
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyTrainSplit);
    }
    let anchors = net.config.anchors()?;
    let prepared: Vec<Prepared> = train
        .iter()
        .map(|d| prepare(net, d, &anchors))
        .collect::<Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7472_6169_6e00);
    let steps = cfg.steps_per_epoch.unwrap_or(prepared.len());
    let mut log = Vec::new();
    for stage in &cfg.stages {
        net.params.set_scope(stage.scope);
        let mut sgd = Sgd::new(&net.params);
        log::info!(
            "stage {}: {} epochs x {steps} steps, lr {}, {:?}, {:?} mask loss",
            stage.stage,
            stage.epochs,
            stage.learning_rate,
            stage.scope,
            stage.mask_loss
        );
        let mut order: Vec<usize> = Vec::new();
        for epoch in 1..=stage.epochs {
            let mut sum = [0.0f64; 4];
            let mut max_norm = 0.0f64;
            let mut max_clipped = 0.0f64;
            for step in 0..steps {
                if order.is_empty() {
                    order = (0..prepared.len()).collect();
                    order.shuffle(&mut rng);
                    order.reverse();
                }
                let doc = &prepared[order.pop().expect("refilled")];
                net.params.zero_grads();
                let c = train_step(net, doc, &anchors, cfg, stage.mask_loss, &mut rng)?;
                if let Some(component) = c.first_non_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        component,
                        stage: stage.stage,
                        epoch,
                        step,
                        doc_id: doc.doc_id.clone(),
                    });
                }
                let (norm, clipped) = sgd.step(&mut net.params, stage.learning_rate, &cfg.optimizer);
                if !norm.is_finite() {
                    return Err(ModelError::NonFiniteLoss {
                        component: "gradient",
                        stage: stage.stage,
                        epoch,
                        step,
                        doc_id: doc.doc_id.clone(),
                    });
                }
                for (s, v) in sum.iter_mut().zip(c.as_array()) {
                    *s += v;
                }
                max_norm = max_norm.max(norm);
                max_clipped = max_clipped.max(clipped);
            }
            let k = steps as f64;
            let components = LossComponents {
                rpn: sum[0] / k,
                class: sum[1] / k,
                bbox: sum[2] / k,
                mask: sum[3] / k,
            };
            let record = EpochRecord {
                stage: stage.stage,
                epoch,
                steps,
                learning_rate: stage.learning_rate,
                total: total_loss(&components, &cfg.loss_weights),
                components,
                max_grad_norm: max_norm,
                max_clipped_norm: max_clipped,
            };
            log::info!(
                "stage {} epoch {epoch}: total {:.4} (rpn {:.4}, class {:.4}, box {:.4}, mask {:.4})",
                stage.stage,
                record.total,
                components.rpn,
                components.class,
                components.bbox,
                components.mask
            );
            on_epoch(&record);
            log.push(record);
        }
    }
    net.params.set_scope(TrainableScope::All);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn schedule_defaults() {
        let s = StageConfig::default_schedule();
        assert_eq!(s.iter().map(|s| s.epochs).collect::<Vec<_>>(), vec![30, 20, 15]);
        assert_eq!(s.iter().map(|s| s.learning_rate).collect::<Vec<_>>(), vec![1e-3, 1e-3, 1e-4]);
        assert_eq!(s[0].mask_loss, MaskLoss::Bce);
        assert_eq!(s[1].mask_loss, MaskLoss::Focal);
        assert_eq!(s[2].scope, TrainableScope::All);
        let o = OptimizerConfig::default();
        assert_eq!((o.momentum, o.weight_decay, o.batch_size, o.clip_norm), (0.9, 1e-3, 1, 0.5));
    }

    #[test]
    fn config_json_round_trip_and_defaults() {
        let cfg = TrainingConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: TrainingConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        let partial: TrainingConfig = serde_json::from_str(r#"{"steps_per_epoch": 5}"#).unwrap();
        assert_eq!(partial.steps_per_epoch, Some(5));
        assert_eq!(partial.stages, StageConfig::default_schedule());
        assert!(serde_json::from_str::<TrainingConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = TrainingConfig::default();
        cfg.stages.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.optimizer.batch_size = 2;
        assert!(cfg.validate().is_err());
        let mut cfg = TrainingConfig::default();
        cfg.stages[0].learning_rate = 0.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn sgd_clips_global_norm_and_applies_momentum() {
        let mut ps = ParamStore::default();
        let a = ps.add("a", &[2], crate::params::ParamGroup::Heads, vec![1.0, -1.0]);
        ps.grad_mut(a).copy_from_slice(&[3.0, 4.0]);
        let opt = OptimizerConfig::default();
        let mut sgd = Sgd::new(&ps);
        let (pre, post) = sgd.step(&mut ps, 0.1, &opt);
        // g = (3.001, 3.999)
        let g: [f64; 2] = [3.0 + 1e-3, 4.0 - 1e-3];
        let n = (g[0] * g[0] + g[1] * g[1]).sqrt();
        assert!((pre - n).abs() < 1e-5);
        assert!((post - 0.5).abs() < 1e-6);
        let v0 = g[0] * 0.5 / n;
        assert!((ps.value(a)[0] as f64 - (1.0 - 0.1 * v0)).abs() < 1e-6);
        // second step: v = 0.9 v + g'
        ps.zero_grads();
        let w0 = ps.value(a)[0] as f64;
        let (pre2, _) = sgd.step(&mut ps, 0.1, &opt);
        let g2 = 1e-3 * w0;
        assert!(pre2 < 0.5);
        assert!((ps.value(a)[0] as f64 - (w0 - 0.1 * (0.9 * v0 + g2))).abs() < 1e-6);
    }

    #[test]
    fn roi_sampling_respects_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels: Vec<Option<usize>> = (0..300).map(|i| (i % 10 == 0).then_some(0)).collect();
        let (p, n) = sample_rois(&labels, 64, 0.33, &mut rng);
        assert_eq!(p.len(), 21);
        assert_eq!(n.len(), 42);
        assert!(p.iter().all(|&i| labels[i].is_some()) && n.iter().all(|&i| labels[i].is_none()));
        let none: Vec<Option<usize>> = vec![None; 100];
        let (p, n) = sample_rois(&none, 64, 0.33, &mut rng);
        assert_eq!((p.len(), n.len()), (0, 64));
        let few: Vec<Option<usize>> = (0..5).map(|i| (i < 2).then_some(0)).collect();
        let (p, n) = sample_rois(&few, 64, 0.33, &mut rng);
        assert_eq!((p.len(), n.len()), (2, 3));
        let _ = rng.gen::<u8>();
    }
}
