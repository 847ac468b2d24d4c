//! Miniature divided space-time transformer with per-task linear heads.
//!
//! Token 0 is the classification token; patch `p` of frame `t` is token `1 + t·P + p`.
//! Temporal attention groups one patch position across frames, spatial attention groups
//! the patches of one frame. The classification token joins every group and receives the
//! mean of its per-group outputs.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoClip;
use crate::error::{Error, Result};
use crate::numerics::{AttentionGroups, Tensor, Var};
use crate::params::{ParamId, ParamStore, Session};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BlockConfig {
    pub embed_dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub frames: usize,
    pub frame_size: usize,
    pub patch_size: usize,
    pub mlp_ratio: f64,
    pub bottleneck: usize,
    pub position_embeddings: bool,
    pub ln_eps: f64,
}

impl Default for BlockConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            heads: 4,
            blocks: 2,
            frames: 8,
            frame_size: 32,
            patch_size: 8,
            mlp_ratio: 2.0,
            bottleneck: 16,
            position_embeddings: true,
            ln_eps: 1e-5,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("blocks", self.blocks),
            ("frames", self.frames),
            ("frame_size", self.frame_size),
            ("patch_size", self.patch_size),
            ("bottleneck", self.bottleneck),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if !self.frame_size.is_multiple_of(self.patch_size) {
            return Err(Error::invalid(format!(
                "frame size {} is not divisible by patch size {}",
                self.frame_size, self.patch_size
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::invalid("mlp_ratio must be positive"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid("ln_eps must be positive"));
        }
        Ok(())
    }

    pub fn patches_per_frame(&self) -> usize {
        let side = self.frame_size / self.patch_size;
        side * side
    }

    pub fn tokens(&self) -> usize {
        self.frames * self.patches_per_frame() + 1
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    /// σ = √(d/h); attention logits are divided by it.
    pub fn sigma(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Where an adapter hook is invoked inside a block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    Temporal,
    Spatial,
    Mlp,
}

impl Site {
    pub fn name(self) -> &'static str {
        match self {
            Site::Temporal => "temporal",
            Site::Spatial => "spatial",
            Site::Mlp => "mlp",
        }
    }
}

/// Injection point for expansion modules. The defaults leave the backbone untouched.
pub trait AdapterHook {
    /// Maps the raw sub-layer output `f0` of `block` at `site` to the value added to the
    /// residual stream.
    fn adapt(&self, _s: &mut Session, _block: usize, _site: Site, f0: Var) -> Result<Var> {
        Ok(f0)
    }

    /// Post-processes the last block's adapted spatial output before the residual add.
    fn fuse_last(&self, _s: &mut Session, spatial: Var) -> Result<Var> {
        Ok(spatial)
    }
}

pub struct NullHook;

impl AdapterHook for NullHook {}

#[derive(Debug, Clone)]
pub struct MsaParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

impl MsaParams {
    fn ids(&self) -> Vec<ParamId> {
        vec![self.wq, self.bq, self.wk, self.bk, self.wv, self.bv, self.wo, self.bo]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln_temporal: LayerNormParams,
    pub temporal: MsaParams,
    pub ln_spatial: LayerNormParams,
    pub spatial: MsaParams,
    pub ln_mlp: LayerNormParams,
    pub fc1_w: ParamId,
    pub fc1_b: ParamId,
    pub fc2_w: ParamId,
    pub fc2_b: ParamId,
}

impl BlockParams {
    pub fn mlp_ids(&self) -> Vec<ParamId> {
        vec![self.fc1_w, self.fc1_b, self.fc2_w, self.fc2_b]
    }

    fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.ln_temporal.gamma, self.ln_temporal.beta];
        v.extend(self.temporal.ids());
        v.extend([self.ln_spatial.gamma, self.ln_spatial.beta]);
        v.extend(self.spatial.ids());
        v.extend([self.ln_mlp.gamma, self.ln_mlp.beta]);
        v.extend(self.mlp_ids());
        v
    }
}

/// Outputs of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    /// Token features after the last block, `[N, d]`.
    pub tokens: Var,
    /// Normalized classification token, `[1, d]`.
    pub full: Var,
    /// Classification token of the last block's adapted spatial attention output.
    pub spatial: Var,
    /// Classification token of the last block's adapted temporal attention output.
    pub temporal: Var,
    /// Last block's adapted spatial attention output over all tokens, before fusion.
    pub last_spatial: Var,
    /// `Clf_i(full)` for every head, each `[1, C_i]`.
    pub logits: Vec<Var>,
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("positive shape")
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub config: BlockConfig,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub cls: ParamId,
    pub pos_spatial: Option<ParamId>,
    pub pos_temporal: Option<ParamId>,
    pub blocks: Vec<BlockParams>,
    pub norm: LayerNormParams,
    temporal_groups: Rc<AttentionGroups>,
    spatial_groups: Rc<AttentionGroups>,
}

impl Backbone {
    /// Registers freshly initialized backbone parameters in `store`.
    pub fn build(config: &BlockConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let hidden = config.mlp_hidden();
        let mut add = |name: String, t: Tensor| store.add(name, t, false);
        let w = |rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize| {
            uniform(rng, &[fan_in, fan_out], 1.0 / (fan_in as f64).sqrt())
        };
        let pp = config.patch_pixels();
        let patch_w = add("embed.patch.weight".into(), w(rng, pp, d))?;
        let patch_b = add("embed.patch.bias".into(), Tensor::zeros(&[d]))?;
        let cls = add("embed.cls".into(), uniform(rng, &[1, d], 0.02))?;
        let (pos_spatial, pos_temporal) = if config.position_embeddings {
            (
                Some(add(
                    "embed.pos.spatial".into(),
                    uniform(rng, &[config.patches_per_frame(), d], 0.02),
                )?),
                Some(add("embed.pos.temporal".into(), uniform(rng, &[config.frames, d], 0.02))?),
            )
        } else {
            (None, None)
        };
        let mut blocks = Vec::with_capacity(config.blocks);
        for l in 0..config.blocks {
            let mut ln = |name: &str| -> Result<LayerNormParams> {
                Ok(LayerNormParams {
                    gamma: add(format!("block{l}.{name}.gamma"), Tensor::full(&[d], 1.0))?,
                    beta: add(format!("block{l}.{name}.beta"), Tensor::zeros(&[d]))?,
                })
            };
            let ln_temporal = ln("ln_temporal")?;
            let ln_spatial = ln("ln_spatial")?;
            let ln_mlp = ln("ln_mlp")?;
            let mut msa = |branch: &str, rng: &mut ChaCha8Rng| -> Result<MsaParams> {
                let mut pair = |p: &str, rng: &mut ChaCha8Rng| -> Result<(ParamId, ParamId)> {
                    Ok((
                        add(format!("block{l}.{branch}.{p}.weight"), w(rng, d, d))?,
                        add(format!("block{l}.{branch}.{p}.bias"), Tensor::zeros(&[d]))?,
                    ))
                };
                let (wq, bq) = pair("q", rng)?;
                let (wk, bk) = pair("k", rng)?;
                let (wv, bv) = pair("v", rng)?;
                let (wo, bo) = pair("o", rng)?;
                Ok(MsaParams {
                    wq,
                    bq,
                    wk,
                    bk,
                    wv,
                    bv,
                    wo,
                    bo,
                })
            };
            let temporal = msa("temporal", rng)?;
            let spatial = msa("spatial", rng)?;
            let fc1_w = add(format!("block{l}.mlp.fc1.weight"), w(rng, d, hidden))?;
            let fc1_b = add(format!("block{l}.mlp.fc1.bias"), Tensor::zeros(&[hidden]))?;
            let fc2_w = add(format!("block{l}.mlp.fc2.weight"), w(rng, hidden, d))?;
            let fc2_b = add(format!("block{l}.mlp.fc2.bias"), Tensor::zeros(&[d]))?;
            blocks.push(BlockParams {
                ln_temporal,
                temporal,
                ln_spatial,
                spatial,
                ln_mlp,
                fc1_w,
                fc1_b,
                fc2_w,
                fc2_b,
            });
        }
        let norm = LayerNormParams {
            gamma: add("norm.gamma".into(), Tensor::full(&[d], 1.0))?,
            beta: add("norm.beta".into(), Tensor::zeros(&[d]))?,
        };
        let (temporal_groups, spatial_groups) = attention_groups(config)?;
        Ok(Self {
            config: config.clone(),
            patch_w,
            patch_b,
            cls,
            pos_spatial,
            pos_temporal,
            blocks,
            norm,
            temporal_groups,
            spatial_groups,
        })
    }

    /// Every backbone parameter, in registration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.patch_w, self.patch_b, self.cls];
        v.extend(self.pos_spatial);
        v.extend(self.pos_temporal);
        for b in &self.blocks {
            v.extend(b.ids());
        }
        v.extend([self.norm.gamma, self.norm.beta]);
        v
    }

    pub fn mlp_param_ids(&self) -> Vec<ParamId> {
        self.blocks.iter().flat_map(BlockParams::mlp_ids).collect()
    }

    pub fn temporal_groups(&self) -> Rc<AttentionGroups> {
        self.temporal_groups.clone()
    }

    pub fn spatial_groups(&self) -> Rc<AttentionGroups> {
        self.spatial_groups.clone()
    }

    /// Rearranges a clip into `[T·P, patch²]` rows, frame-major then raster patch order.
    pub fn patchify(&self, clip: &VideoClip) -> Result<Tensor> {
        let c = &self.config;
        if clip.frames != c.frames || clip.height != c.frame_size || clip.width != c.frame_size {
            return Err(Error::shape(format!(
                "clip is {}×{}×{}, model expects {}×{}×{}",
                clip.frames, clip.height, clip.width, c.frames, c.frame_size, c.frame_size
            )));
        }
        let ps = c.patch_size;
        let side = c.frame_size / ps;
        let mut data = Vec::with_capacity(clip.pixels.len());
        for t in 0..c.frames {
            let frame = clip.frame(t);
            for py in 0..side {
                for px in 0..side {
                    for y in 0..ps {
                        let row = (py * ps + y) * c.frame_size + px * ps;
                        data.extend_from_slice(&frame[row..row + ps]);
                    }
                }
            }
        }
        Tensor::matrix(c.frames * c.patches_per_frame(), ps * ps, data)
    }

    /// Token matrix `[T·P + 1, d]`.
    pub fn patchify_embed(&self, s: &mut Session, clip: &VideoClip) -> Result<Var> {
        let patches = self.patchify(clip)?;
        let x = s.graph.constant(patches);
        let (w, b) = (s.param(self.patch_w), s.param(self.patch_b));
        let mut x = s.graph.linear(x, w, Some(b))?;
        if let (Some(ps), Some(pt)) = (self.pos_spatial, self.pos_temporal) {
            let p = self.config.patches_per_frame();
            let n = self.config.frames * p;
            let sp_idx: Vec<usize> = (0..n).map(|i| i % p).collect();
            let tp_idx: Vec<usize> = (0..n).map(|i| i / p).collect();
            let (ps, pt) = (s.param(ps), s.param(pt));
            let sp = s.graph.index_rows(ps, &sp_idx)?;
            let tp = s.graph.index_rows(pt, &tp_idx)?;
            x = s.graph.add(x, sp)?;
            x = s.graph.add(x, tp)?;
        }
        let cls = s.param(self.cls);
        s.graph.concat(&[cls, x], 0)
    }

    fn msa(&self, s: &mut Session, p: &MsaParams, x: Var, groups: Rc<AttentionGroups>) -> Result<Var> {
        let (wq, bq, wk, bk) = (s.param(p.wq), s.param(p.bq), s.param(p.wk), s.param(p.bk));
        let (wv, bv, wo, bo) = (s.param(p.wv), s.param(p.bv), s.param(p.wo), s.param(p.bo));
        let q = s.graph.linear(x, wq, Some(bq))?;
        let k = s.graph.linear(x, wk, Some(bk))?;
        let v = s.graph.linear(x, wv, Some(bv))?;
        let a = s
            .graph
            .attention(q, k, v, groups, self.config.heads, 1.0 / self.config.sigma())?;
        s.graph.linear(a, wo, Some(bo))
    }

    /// Temporal multi-head attention of `block` over already-normalized tokens.
    pub fn t_msa(&self, s: &mut Session, block: usize, x: Var) -> Result<Var> {
        let p = self.block(block)?.temporal.clone();
        self.msa(s, &p, x, self.temporal_groups())
    }

    /// Spatial multi-head attention of `block` over already-normalized tokens.
    pub fn s_msa(&self, s: &mut Session, block: usize, x: Var) -> Result<Var> {
        let p = self.block(block)?.spatial.clone();
        self.msa(s, &p, x, self.spatial_groups())
    }

    fn block(&self, l: usize) -> Result<&BlockParams> {
        self.blocks
            .get(l)
            .ok_or_else(|| Error::invalid(format!("block {l} of {}", self.blocks.len())))
    }

    fn layer_norm(&self, s: &mut Session, p: &LayerNormParams, x: Var) -> Result<Var> {
        let n = s.graph.layer_norm(x, self.config.ln_eps);
        let (g, b) = (s.param(p.gamma), s.param(p.beta));
        let y = s.graph.mul(n, g)?;
        s.graph.add(y, b)
    }

    /// Full forward pass. `hook` shapes every attention (and optionally MLP) output
    /// before its residual add.
    pub fn forward(
        &self,
        s: &mut Session,
        clip: &VideoClip,
        heads: &ClassifierBank,
        hook: &dyn AdapterHook,
    ) -> Result<FeatureBundle> {
        let mut x = self.patchify_embed(s, clip)?;
        let last = self.blocks.len() - 1;
        let mut feats = None;
        for (l, bp) in self.blocks.iter().enumerate() {
            let h = self.layer_norm(s, &bp.ln_temporal, x)?;
            let t0 = self.msa(s, &bp.temporal, h, self.temporal_groups())?;
            let t = hook.adapt(s, l, Site::Temporal, t0)?;
            x = s.graph.add(x, t)?;

            let h = self.layer_norm(s, &bp.ln_spatial, x)?;
            let s0 = self.msa(s, &bp.spatial, h, self.spatial_groups())?;
            let mut sp = hook.adapt(s, l, Site::Spatial, s0)?;
            if l == last {
                let sc = s.graph.index_rows(sp, &[0])?;
                let tc = s.graph.index_rows(t, &[0])?;
                feats = Some((sc, tc, sp));
                sp = hook.fuse_last(s, sp)?;
            }
            x = s.graph.add(x, sp)?;

            let h = self.layer_norm(s, &bp.ln_mlp, x)?;
            let (w1, b1, w2, b2) = (s.param(bp.fc1_w), s.param(bp.fc1_b), s.param(bp.fc2_w), s.param(bp.fc2_b));
            let m = s.graph.linear(h, w1, Some(b1))?;
            let m = s.graph.gelu(m);
            let m = s.graph.linear(m, w2, Some(b2))?;
            let m = hook.adapt(s, l, Site::Mlp, m)?;
            x = s.graph.add(x, m)?;
        }
        let (spatial, temporal, last_spatial) = feats.expect("at least one block");
        let cls = s.graph.index_rows(x, &[0])?;
        let full = self.layer_norm(s, &self.norm, cls)?;
        let logits = (0..heads.len())
            .map(|i| heads.classify(s, full, i))
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureBundle {
            tokens: x,
            full,
            spatial,
            temporal,
            last_spatial,
            logits,
        })
    }
}

fn attention_groups(c: &BlockConfig) -> Result<(Rc<AttentionGroups>, Rc<AttentionGroups>)> {
    let p = c.patches_per_frame();
    let n = c.tokens();
    let temporal = (0..p)
        .map(|pi| std::iter::once(0).chain((0..c.frames).map(|t| 1 + t * p + pi)).collect())
        .collect();
    let spatial = (0..c.frames)
        .map(|t| std::iter::once(0).chain((0..p).map(|pi| 1 + t * p + pi)).collect())
        .collect();
    Ok((
        Rc::new(AttentionGroups::new(n, temporal)?),
        Rc::new(AttentionGroups::new(n, spatial)?),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

/// Ordered per-task linear heads; prediction is over their concatenated outputs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassifierBank {
    pub heads: Vec<Head>,
}

impl ClassifierBank {
    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    /// Appends a head with weights uniform in `±1/√d` and zero bias.
    pub fn add_task_head(
        &mut self,
        store: &mut ParamStore,
        embed_dim: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<usize> {
        if classes == 0 {
            return Err(Error::invalid("a head needs at least one class"));
        }
        let i = self.heads.len();
        let bound = 1.0 / (embed_dim as f64).sqrt();
        let weight = store.add(format!("heads.{i}.weight"), uniform(rng, &[embed_dim, classes], bound), false)?;
        let bias = store.add(format!("heads.{i}.bias"), Tensor::zeros(&[classes]), false)?;
        self.heads.push(Head { weight, bias, classes });
        Ok(i)
    }

    pub fn head(&self, task: usize) -> Result<&Head> {
        self.heads.get(task).ok_or(Error::UnknownTask {
            index: task,
            known: self.heads.len(),
        })
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.heads.iter().map(|h| h.classes).collect()
    }

    pub fn total_classes(&self) -> usize {
        self.heads.iter().map(|h| h.classes).sum()
    }

    /// Offset of head `task`'s first class in the concatenated logits.
    pub fn offset(&self, task: usize) -> usize {
        self.heads[..task].iter().map(|h| h.classes).sum()
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| [h.weight, h.bias]).collect()
    }

    /// `Clf_task(feature)` for a pooled `[1, d]` (or `[d]`) feature.
    pub fn classify(&self, s: &mut Session, feature: Var, task: usize) -> Result<Var> {
        let h = self.head(task)?.clone();
        let d = s.store().value(h.weight).shape()[0];
        if s.graph.value(feature).len() != d {
            return Err(Error::shape(format!(
                "feature of shape {:?} for a head over {d} features",
                s.graph.shape(feature)
            )));
        }
        let f = s.graph.reshape(feature, &[1, d])?;
        let (w, b) = (s.param(h.weight), s.param(h.bias));
        s.graph.linear(f, w, Some(b))
    }
}
