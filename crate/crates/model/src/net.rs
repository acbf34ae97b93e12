//! The instance-segmentation network: residual backbone, feature pyramid,
//! proposal head and the class, box and mask heads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use mslayout_core::detect::anchors::{generate_anchors, AnchorSpec};
use mslayout_core::detect::losses::MASK_SIZE;
use mslayout_core::geometry::BBox;

use crate::layers::{
    maxpool3s2, maxpool3s2_backward, relu_backward, relu_inplace, subsample2, subsample2_backward, upsample2,
    upsample2_backward, Conv2d, ConvCache, Deconv2x2, Linear,
};
use crate::params::{ParamGroup, ParamStore};
use crate::roi_align::{roi_align, roi_align_backward, RoiPlan};
use crate::tensor::Tensor;
use crate::{ModelError, Result};

/// Region classes plus background.
pub const NUM_CLASSES: usize = 10;
/// Foreground region classes (mask channels).
pub const NUM_REGION_CLASSES: usize = 9;
/// Anchor shapes per cell.
pub const ANCHORS_PER_CELL: usize = 3;
pub const BOX_POOL: usize = 7;
pub const MASK_POOL: usize = 14;
/// Scale applied to regression targets (centre x, centre y, log w, log h).
pub const DELTA_STD: [f64; 4] = [0.1, 0.1, 0.2, 0.2];

/// Largest log size change a predicted delta may apply.
pub const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Undoes the regression scale of normalized deltas and caps size changes.
pub fn scaled_deltas(d: &[f32]) -> [f64; 4] {
    std::array::from_fn(|k| {
        let v = d[k] as f64 * DELTA_STD[k];
        if k >= 2 {
            v.clamp(-MAX_LOG_SCALE, MAX_LOG_SCALE)
        } else {
            v
        }
    })
}

/// Input pixel normalization: `(v - PIXEL_MEAN) / PIXEL_SCALE`.
pub const PIXEL_MEAN: f32 = 127.5;
pub const PIXEL_SCALE: f32 = 64.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Side of the square input canvas.
    pub canvas: usize,
    pub stem_channels: usize,
    /// Residual blocks in the three bottleneck stages.
    pub stage_blocks: [usize; 3],
    /// Bottleneck widths; each stage outputs four times its width.
    pub stage_widths: [usize; 3],
    pub pyramid_channels: usize,
    pub box_hidden: usize,
    pub mask_convs: usize,
    pub mask_channels: usize,
    /// RoI size that maps to the middle pyramid level.
    pub canonical_roi: f64,
    pub anchors: AnchorSpec,
}

impl NetworkConfig {
    /// ResNet-50 conv1..conv4 widths on a 1024 canvas.
    pub fn full() -> Self {
        NetworkConfig {
            canvas: 1024,
            stem_channels: 64,
            stage_blocks: [3, 4, 6],
            stage_widths: [64, 128, 256],
            pyramid_channels: 256,
            box_hidden: 1024,
            mask_convs: 4,
            mask_channels: 256,
            canonical_roi: 224.0,
            anchors: AnchorSpec::default(),
        }
    }

    /// A narrow network on a 256 canvas for CPU-scale experiments.
    pub fn desk() -> Self {
        NetworkConfig {
            canvas: 256,
            stem_channels: 16,
            stage_blocks: [1, 1, 1],
            stage_widths: [8, 16, 32],
            pyramid_channels: 32,
            box_hidden: 128,
            mask_convs: 2,
            mask_channels: 32,
            canonical_roi: 56.0,
            anchors: AnchorSpec::default().scaled(0.5),
        }
    }

    /// `(h, w)` of `P2..P6` for this canvas.
    pub fn pyramid_dims(&self) -> Vec<(usize, usize)> {
        let stem = conv_out(self.canvas, 7, 2, 3);
        let mut side = conv_out(stem, 3, 2, 1);
        let mut dims = Vec::with_capacity(5);
        for _ in 0..5 {
            dims.push((side, side));
            side = side.div_ceil(2);
        }
        dims
    }

    pub fn anchors(&self) -> Result<Vec<BBox>> {
        Ok(generate_anchors(&self.pyramid_dims(), &self.anchors)?)
    }
}

fn conv_out(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

#[derive(Debug, Clone)]
struct Bottleneck {
    reduce: Conv2d,
    spatial: Conv2d,
    expand: Conv2d,
    shortcut: Option<Conv2d>,
}

struct BottleneckCache {
    reduce: ConvCache,
    a1: Vec<f32>,
    spatial: ConvCache,
    a2: Vec<f32>,
    expand: ConvCache,
    shortcut: Option<ConvCache>,
    out: Vec<f32>,
    in_shape: (usize, usize, usize, usize),
}

impl Bottleneck {
    fn forward(&self, ps: &ParamStore, x: &Tensor) -> (Tensor, BottleneckCache) {
        let (mut a1, reduce) = self.reduce.forward(ps, x);
        relu_inplace(&mut a1);
        let (mut a2, spatial) = self.spatial.forward(ps, &a1);
        relu_inplace(&mut a2);
        let (mut y, expand) = self.expand.forward(ps, &a2);
        let shortcut = match &self.shortcut {
            Some(conv) => {
                let (s, c) = conv.forward(ps, x);
                y.add_assign(&s);
                Some(c)
            }
            None => {
                y.add_assign(x);
                None
            }
        };
        relu_inplace(&mut y);
        let cache = BottleneckCache {
            reduce,
            a1: a1.data,
            spatial,
            a2: a2.data,
            expand,
            shortcut,
            out: y.data.clone(),
            in_shape: x.shape(),
        };
        (y, cache)
    }

    fn backward(&self, ps: &mut ParamStore, cache: &BottleneckCache, dy: &mut Tensor, need_dx: bool) -> Option<Tensor> {
        relu_backward(&cache.out, &mut dy.data);
        let mut da2 = self.expand.backward(ps, &cache.expand, dy, true).expect("dx");
        relu_backward(&cache.a2, &mut da2.data);
        let mut da1 = self.spatial.backward(ps, &cache.spatial, &da2, true).expect("dx");
        relu_backward(&cache.a1, &mut da1.data);
        let dx_main = self.reduce.backward(ps, &cache.reduce, &da1, need_dx);
        let dx_short = match (&self.shortcut, &cache.shortcut) {
            (Some(conv), Some(c)) => conv.backward(ps, c, dy, need_dx),
            _ => need_dx.then(|| dy.clone()),
        };
        match (dx_main, dx_short) {
            (Some(mut a), Some(b)) => {
                a.add_assign(&b);
                debug_assert_eq!(a.shape(), cache.in_shape);
                Some(a)
            }
            _ => None,
        }
    }
}

/// Raw proposal-head outputs for every anchor.
#[derive(Debug, Clone)]
pub struct RpnRaw {
    /// `(background, foreground)` logits per anchor.
    pub logits: Vec<[f32; 2]>,
    /// Normalized box deltas per anchor.
    pub deltas: Vec<[f32; 4]>,
}

impl RpnRaw {
    pub fn objectness(&self) -> Vec<f64> {
        self.logits
            .iter()
            .map(|&[b, f]| 1.0 / (1.0 + ((b - f) as f64).exp()))
            .collect()
    }

    /// Deltas with the regression scale undone and size changes capped.
    pub fn box_deltas(&self) -> Vec<[f64; 4]> {
        self.deltas.iter().map(|d| scaled_deltas(d)).collect()
    }
}

struct RpnLevelCache {
    conv: ConvCache,
    hidden: Vec<f32>,
    hidden_shape: (usize, usize, usize, usize),
    class: ConvCache,
    bbox: ConvCache,
}

pub struct RpnCache {
    levels: Vec<RpnLevelCache>,
}

/// Pyramid maps `P2..P6` plus whatever the backward pass needs.
pub struct Features {
    pub levels: Vec<Tensor>,
    cache: BackboneCache,
}

struct BackboneCache {
    stem: ConvCache,
    stem_out: Vec<f32>,
    stem_shape: (usize, usize, usize, usize),
    pool_arg: Vec<u32>,
    blocks: Vec<Vec<BottleneckCache>>,
    lateral: Vec<ConvCache>,
    smooth: Vec<ConvCache>,
    merged_dims: Vec<(usize, usize)>,
}

/// Box-head outputs per RoI.
pub struct BoxHeadOut {
    /// `n x NUM_CLASSES` logits.
    pub class_logits: Vec<f32>,
    /// `n x NUM_CLASSES*4` normalized deltas.
    pub deltas: Vec<f32>,
    cache: BoxHeadCache,
}

struct BoxHeadCache {
    plans: Vec<RoiPlan>,
    flat: Vec<f32>,
    h1: Vec<f32>,
    h2: Vec<f32>,
    n: usize,
}

/// Mask-head logits `NUM_REGION_CLASSES x n x 28 x 28`.
pub struct MaskHeadOut {
    pub logits: Tensor,
    cache: MaskHeadCache,
}

struct MaskHeadCache {
    plans: Vec<RoiPlan>,
    convs: Vec<(ConvCache, Vec<f32>)>,
    deconv_in: Tensor,
    up: Vec<f32>,
    out: ConvCache,
}

#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: ParamStore,
    stem: Conv2d,
    stages: Vec<Vec<Bottleneck>>,
    lateral: Vec<Conv2d>,
    smooth: Vec<Conv2d>,
    rpn_conv: Conv2d,
    rpn_class: Conv2d,
    rpn_bbox: Conv2d,
    box_fc1: Linear,
    box_fc2: Linear,
    box_class: Linear,
    box_bbox: Linear,
    mask_convs: Vec<Conv2d>,
    mask_deconv: Deconv2x2,
    mask_out: Conv2d,
}

impl Network {
    /// Seeded random initialization.
    pub fn new(config: NetworkConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = ParamStore::default();
        let rng = &mut rng;
        let early = ParamGroup::EarlyBackbone;
        let heads = ParamGroup::Heads;
        let stem = Conv2d::new(&mut ps, rng, "stem.conv", early, 3, config.stem_channels, 7, 2, 1.0);
        let mut stages = Vec::new();
        let mut in_c = config.stem_channels;
        let mut outs = Vec::new();
        for (si, (&blocks, &width)) in config.stage_blocks.iter().zip(&config.stage_widths).enumerate() {
            let group = if si == 2 { ParamGroup::Stage4 } else { early };
            let out_c = width * 4;
            let mut stage = Vec::new();
            for b in 0..blocks {
                let stride = if b == 0 && si > 0 { 2 } else { 1 };
                let name = format!("stage{}.block{b}", si + 2);
                let shortcut = (b == 0).then(|| {
                    let mut c = Conv2d::new(&mut ps, rng, &format!("{name}.shortcut"), group, in_c, out_c, 1, stride, 1.0);
                    c.pad = 0;
                    c
                });
                stage.push(Bottleneck {
                    reduce: Conv2d::new(&mut ps, rng, &format!("{name}.reduce"), group, in_c, width, 1, 1, 1.0),
                    spatial: Conv2d::new(&mut ps, rng, &format!("{name}.spatial"), group, width, width, 3, stride, 1.0),
                    expand: Conv2d::new(&mut ps, rng, &format!("{name}.expand"), group, width, out_c, 1, 1, 0.1),
                    shortcut,
                });
                in_c = out_c;
            }
            outs.push(out_c);
            stages.push(stage);
        }
        let f = config.pyramid_channels;
        let lateral = outs
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(&mut ps, rng, &format!("fpn.lateral{}", i + 2), heads, c, f, 1, 1, 1.0))
            .collect();
        let smooth = (0..3)
            .map(|i| Conv2d::new(&mut ps, rng, &format!("fpn.output{}", i + 2), heads, f, f, 3, 1, 1.0))
            .collect();
        let rpn_conv = Conv2d::new(&mut ps, rng, "rpn.conv", heads, f, f, 3, 1, 1.0);
        let mut rpn_class = Conv2d::new(&mut ps, rng, "rpn.class", heads, f, 2 * ANCHORS_PER_CELL, 1, 1, 1.0);
        let mut rpn_bbox = Conv2d::new(&mut ps, rng, "rpn.bbox", heads, f, 4 * ANCHORS_PER_CELL, 1, 1, 1.0);
        rescale(&mut ps, rpn_class.weight, 0.01);
        rescale(&mut ps, rpn_bbox.weight, 0.01);
        rpn_class.pad = 0;
        rpn_bbox.pad = 0;
        let flat = f * BOX_POOL * BOX_POOL;
        let hid = config.box_hidden;
        let box_fc1 = Linear::he(&mut ps, rng, "box.fc1", heads, flat, hid);
        let box_fc2 = Linear::he(&mut ps, rng, "box.fc2", heads, hid, hid);
        let box_class = Linear::new(&mut ps, rng, "box.class", heads, hid, NUM_CLASSES, 0.01);
        let box_bbox = Linear::new(&mut ps, rng, "box.bbox", heads, hid, NUM_CLASSES * 4, 0.001);
        let mc = config.mask_channels;
        let mut mask_convs = Vec::new();
        let mut c_in = f;
        for i in 0..config.mask_convs {
            mask_convs.push(Conv2d::new(&mut ps, rng, &format!("mask.conv{}", i + 1), heads, c_in, mc, 3, 1, 1.0));
            c_in = mc;
        }
        let mask_deconv = Deconv2x2::new(&mut ps, rng, "mask.deconv", heads, c_in, mc);
        let mask_out = Conv2d::new(&mut ps, rng, "mask.logits", heads, mc, NUM_REGION_CLASSES, 1, 1, 1.0);
        Network {
            config,
            params: ps,
            stem,
            stages,
            lateral,
            smooth,
            rpn_conv,
            rpn_class,
            rpn_bbox,
            box_fc1,
            box_fc2,
            box_class,
            box_bbox,
            mask_convs,
            mask_deconv,
            mask_out,
        }
    }

    /// Canvas strides of `P2..P6`.
    pub fn strides(&self) -> [f64; 5] {
        self.config.anchors.strides
    }

    /// Normalizes a planar `3 x canvas x canvas` raster into a network input.
    pub fn input_tensor(&self, canvas: &[f32]) -> Result<Tensor> {
        let s = self.config.canvas;
        if canvas.len() != 3 * s * s {
            return Err(ModelError::InputSize {
                expected: s,
                got: canvas.len(),
            });
        }
        let data = canvas.iter().map(|&v| (v - PIXEL_MEAN) / PIXEL_SCALE).collect();
        Ok(Tensor::from_vec(3, 1, s, s, data))
    }

    pub fn features(&self, x: &Tensor) -> Features {
        let ps = &self.params;
        let (mut stem_out, stem) = self.stem.forward(ps, x);
        relu_inplace(&mut stem_out);
        let (mut h, pool_arg) = maxpool3s2(&stem_out);
        let mut blocks = Vec::new();
        let mut c_maps = Vec::new();
        for stage in &self.stages {
            let mut caches = Vec::new();
            for block in stage {
                let (y, c) = block.forward(ps, &h);
                caches.push(c);
                h = y;
            }
            blocks.push(caches);
            c_maps.push(h.clone());
        }
        let mut lateral = Vec::new();
        let mut lat_out = Vec::new();
        for (conv, c) in self.lateral.iter().zip(&c_maps) {
            let (y, cache) = conv.forward(ps, c);
            lateral.push(cache);
            lat_out.push(y);
        }
        // top-down merge
        let mut merged = vec![lat_out[2].clone()];
        for i in (0..2).rev() {
            let above = merged.last().expect("level");
            let mut m = lat_out[i].clone();
            m.add_assign(&upsample2(above, m.h, m.w));
            merged.push(m);
        }
        merged.reverse();
        let mut smooth = Vec::new();
        let mut levels = Vec::new();
        for (conv, m) in self.smooth.iter().zip(&merged) {
            let (y, cache) = conv.forward(ps, m);
            smooth.push(cache);
            levels.push(y);
        }
        let p5 = subsample2(&levels[2]);
        let p6 = subsample2(&p5);
        levels.push(p5);
        levels.push(p6);
        Features {
            levels,
            cache: BackboneCache {
                stem,
                stem_shape: stem_out.shape(),
                stem_out: stem_out.data,
                pool_arg,
                blocks,
                lateral,
                smooth,
                merged_dims: merged.iter().map(|m| (m.h, m.w)).collect(),
            },
        }
    }

    /// Backpropagates pyramid gradients, stopping where nothing is trainable.
    pub fn features_backward(&mut self, feats: &Features, mut d_levels: Vec<Tensor>) {
        let cache = &feats.cache;
        let ps = &mut self.params;
        let train_s4 = ps.any_trainable(ParamGroup::Stage4);
        let train_early = ps.any_trainable(ParamGroup::EarlyBackbone);
        let d6 = d_levels.pop().expect("P6");
        let mut d5 = d_levels.pop().expect("P5");
        d5.add_assign(&subsample2_backward(&d6, d5.h, d5.w));
        let p4 = &feats.levels[2];
        d_levels[2].add_assign(&subsample2_backward(&d5, p4.h, p4.w));
        let mut d_merged: Vec<Tensor> = Vec::new();
        for (i, d) in d_levels.iter().enumerate() {
            d_merged.push(self.smooth[i].backward(ps, &cache.smooth[i], d, true).expect("dx"));
        }
        for i in 0..2 {
            let (h, w) = cache.merged_dims[i + 1];
            let up = upsample2_backward(&d_merged[i], h, w);
            d_merged[i + 1].add_assign(&up);
        }
        let need = [train_early, train_early, train_s4];
        let mut d_c: Vec<Option<Tensor>> = Vec::new();
        for i in 0..3 {
            d_c.push(self.lateral[i].backward(ps, &cache.lateral[i], &d_merged[i], need[i]));
        }
        if !train_s4 && !train_early {
            return;
        }
        let mut d = d_c[2].take();
        for si in (0..3).rev() {
            let Some(mut grad) = d.take() else { break };
            let stage_trainable = if si == 2 { train_s4 } else { train_early };
            if !stage_trainable {
                break;
            }
            let blocks = &self.stages[si];
            for (bi, block) in blocks.iter().enumerate().rev() {
                let need_dx = bi > 0 || train_early;
                match block.backward(ps, &cache.blocks[si][bi], &mut grad, need_dx) {
                    Some(g) => grad = g,
                    None => return,
                }
            }
            if si > 0 {
                if let Some(lat) = d_c[si - 1].take() {
                    grad.add_assign(&lat);
                }
                d = Some(grad);
            } else {
                let (c, n, h, w) = cache.stem_shape;
                let mut ds = maxpool3s2_backward((c, n, h, w), &cache.pool_arg, &grad);
                relu_backward(&cache.stem_out, &mut ds.data);
                self.stem.backward(ps, &cache.stem, &ds, false);
            }
        }
    }

    pub fn rpn(&self, levels: &[Tensor]) -> (RpnRaw, RpnCache) {
        let ps = &self.params;
        let mut logits = Vec::new();
        let mut deltas = Vec::new();
        let mut caches = Vec::new();
        for p in levels {
            let (mut hidden, conv) = self.rpn_conv.forward(ps, p);
            relu_inplace(&mut hidden);
            let (cls, class) = self.rpn_class.forward(ps, &hidden);
            let (bb, bbox) = self.rpn_bbox.forward(ps, &hidden);
            let cells = p.h * p.w;
            for cell in 0..cells {
                for r in 0..ANCHORS_PER_CELL {
                    logits.push([cls.data[2 * r * cells + cell], cls.data[(2 * r + 1) * cells + cell]]);
                    deltas.push(std::array::from_fn(|k| bb.data[(4 * r + k) * cells + cell]));
                }
            }
            caches.push(RpnLevelCache {
                conv,
                hidden_shape: hidden.shape(),
                hidden: hidden.data,
                class,
                bbox,
            });
        }
        (RpnRaw { logits, deltas }, RpnCache { levels: caches })
    }

    /// Gradients w.r.t. the per-anchor logits and deltas; returns the
    /// per-level pyramid gradients.
    pub fn rpn_backward(
        &mut self,
        levels: &[Tensor],
        cache: &RpnCache,
        d_logits: &[[f32; 2]],
        d_deltas: &[[f32; 4]],
    ) -> Vec<Tensor> {
        let ps = &mut self.params;
        let mut offset = 0;
        let mut out = Vec::new();
        for (p, lc) in levels.iter().zip(&cache.levels) {
            let cells = p.h * p.w;
            let mut dcls = Tensor::zeros(2 * ANCHORS_PER_CELL, 1, p.h, p.w);
            let mut dbb = Tensor::zeros(4 * ANCHORS_PER_CELL, 1, p.h, p.w);
            for cell in 0..cells {
                for r in 0..ANCHORS_PER_CELL {
                    let a = offset + cell * ANCHORS_PER_CELL + r;
                    dcls.data[2 * r * cells + cell] = d_logits[a][0];
                    dcls.data[(2 * r + 1) * cells + cell] = d_logits[a][1];
                    for k in 0..4 {
                        dbb.data[(4 * r + k) * cells + cell] = d_deltas[a][k];
                    }
                }
            }
            offset += cells * ANCHORS_PER_CELL;
            let mut dh = self.rpn_class.backward(ps, &lc.class, &dcls, true).expect("dx");
            dh.add_assign(&self.rpn_bbox.backward(ps, &lc.bbox, &dbb, true).expect("dx"));
            relu_backward(&lc.hidden, &mut dh.data);
            debug_assert_eq!(dh.shape(), lc.hidden_shape);
            out.push(self.rpn_conv.backward(ps, &lc.conv, &dh, true).expect("dx"));
        }
        out
    }

    pub fn box_head(&self, levels: &[Tensor], rois: &[BBox]) -> Result<BoxHeadOut> {
        let ps = &self.params;
        let strides = self.strides();
        let (pooled, plans) = roi_align(&levels[..4], &strides[..4], rois, BOX_POOL, self.config.canonical_roi)?;
        let n = rois.len();
        let flat = to_rows(&pooled);
        let mut h1 = self.box_fc1.forward(ps, &flat, n);
        h1.iter_mut().for_each(|v| *v = v.max(0.0));
        let mut h2 = self.box_fc2.forward(ps, &h1, n);
        h2.iter_mut().for_each(|v| *v = v.max(0.0));
        let class_logits = self.box_class.forward(ps, &h2, n);
        let deltas = self.box_bbox.forward(ps, &h2, n);
        Ok(BoxHeadOut {
            class_logits,
            deltas,
            cache: BoxHeadCache { plans, flat, h1, h2, n },
        })
    }

    pub fn box_head_backward(&mut self, out: &BoxHeadOut, d_class: &[f32], d_deltas: &[f32], d_levels: &mut [Tensor]) {
        let c = &out.cache;
        let ps = &mut self.params;
        let mut dh2 = self.box_class.backward(ps, &c.h2, d_class, c.n, true).expect("dx");
        let db = self.box_bbox.backward(ps, &c.h2, d_deltas, c.n, true).expect("dx");
        dh2.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
        relu_backward(&c.h2, &mut dh2);
        let mut dh1 = self.box_fc2.backward(ps, &c.h1, &dh2, c.n, true).expect("dx");
        relu_backward(&c.h1, &mut dh1);
        let dflat = self.box_fc1.backward(ps, &c.flat, &dh1, c.n, true).expect("dx");
        let f = self.config.pyramid_channels;
        let dpooled = from_rows(&dflat, f, c.n, BOX_POOL);
        roi_align_backward(d_levels, &c.plans, &dpooled);
    }

    pub fn mask_head(&self, levels: &[Tensor], rois: &[BBox]) -> Result<MaskHeadOut> {
        let ps = &self.params;
        let strides = self.strides();
        let (mut x, plans) = roi_align(&levels[..4], &strides[..4], rois, MASK_POOL, self.config.canonical_roi)?;
        let mut convs = Vec::new();
        for conv in &self.mask_convs {
            let (mut y, cache) = conv.forward(ps, &x);
            relu_inplace(&mut y);
            convs.push((cache, y.data.clone()));
            x = y;
        }
        let mut up = self.mask_deconv.forward(ps, &x);
        relu_inplace(&mut up);
        let (logits, out) = self.mask_out.forward(ps, &up);
        debug_assert_eq!((logits.h, logits.w), (MASK_SIZE, MASK_SIZE));
        Ok(MaskHeadOut {
            logits,
            cache: MaskHeadCache {
                plans,
                convs,
                deconv_in: x,
                up: up.data,
                out,
            },
        })
    }

    pub fn mask_head_backward(&mut self, out: &MaskHeadOut, d_logits: &Tensor, d_levels: &mut [Tensor]) {
        let c = &out.cache;
        let ps = &mut self.params;
        let mut dup = self.mask_out.backward(ps, &c.out, d_logits, true).expect("dx");
        relu_backward(&c.up, &mut dup.data);
        let mut dx = self.mask_deconv.backward(ps, &c.deconv_in, &dup, true).expect("dx");
        for (conv, (cache, act)) in self.mask_convs.iter().zip(&c.convs).rev() {
            relu_backward(act, &mut dx.data);
            dx = conv.backward(ps, cache, &dx, true).expect("dx");
        }
        roi_align_backward(d_levels, &c.plans, &dx);
    }
}

fn rescale(ps: &mut ParamStore, id: crate::params::ParamId, factor: f32) {
    ps.params[id.0].value.iter_mut().for_each(|v| *v *= factor);
}

/// `C x N x s x s` to row-major `N x (C*s*s)`.
fn to_rows(t: &Tensor) -> Vec<f32> {
    let cells = t.h * t.w;
    let mut out = vec![0.0; t.data.len()];
    for c in 0..t.c {
        for n in 0..t.n {
            let src = &t.data[(c * t.n + n) * cells..(c * t.n + n + 1) * cells];
            out[n * t.c * cells + c * cells..n * t.c * cells + (c + 1) * cells].copy_from_slice(src);
        }
    }
    out
}

fn from_rows(rows: &[f32], c: usize, n: usize, s: usize) -> Tensor {
    let cells = s * s;
    let mut t = Tensor::zeros(c, n, s, s);
    for ci in 0..c {
        for ni in 0..n {
            let src = &rows[ni * c * cells + ci * cells..ni * c * cells + (ci + 1) * cells];
            t.data[(ci * n + ni) * cells..(ci * n + ni + 1) * cells].copy_from_slice(src);
        }
    }
    t
}
