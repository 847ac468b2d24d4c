//! Per-task adapter expansion, cross-task attention over earlier task representations,
//! logit distillation, and the freeze/expand lifecycle that wraps the backbone.

use std::cell::RefCell;
use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::rc::Rc;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{uniform, AdapterHook, Backbone, BlockConfig, ClassifierBank, FeatureBundle, Site};
use crate::datagen::{rng_for, VideoClip};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{ParamId, ParamStore, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConcatAxis {
    Token,
    Embedding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpansionConfig {
    /// Separate spatial and temporal adapters per task. When off (and `mlp_adapter` is
    /// off), later tasks train every block's MLP plus the new head instead.
    pub separate_adapters: bool,
    /// Attach one adapter after each block's MLP instead of two after the attentions.
    pub mlp_adapter: bool,
    pub cross_task_attention: bool,
    pub concat_axis: ConcatAxis,
    /// Bound of the uniform down-projection init; `None` means `1/√d`.
    pub adapter_init: Option<f64>,
    /// Reuse frozen snapshot forwards per sample within a task.
    pub memoize_snapshots: bool,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        Self {
            separate_adapters: true,
            mlp_adapter: false,
            cross_task_attention: true,
            concat_axis: ConcatAxis::Token,
            adapter_init: None,
            memoize_snapshots: true,
        }
    }
}

impl ExpansionConfig {
    pub fn uses_adapters(&self) -> bool {
        self.separate_adapters || self.mlp_adapter
    }

    fn adapter_sites(&self) -> &'static [Site] {
        if self.mlp_adapter {
            &[Site::Mlp]
        } else if self.separate_adapters {
            &[Site::Temporal, Site::Spatial]
        } else {
            &[]
        }
    }

    fn uses_cta(&self) -> bool {
        self.uses_adapters() && self.cross_task_attention
    }
}

/// Bottleneck adapter `x ↦ GeLU(x·W1)·W2`, without biases.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Adapter {
    pub down: ParamId,
    pub up: ParamId,
}

impl Adapter {
    pub fn apply(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (w1, w2) = (s.param(self.down), s.param(self.up));
        apply_adapter(&mut s.graph, x, w1, w2)
    }
}

pub fn apply_adapter(g: &mut Graph, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let h = g.matmul(x, w1)?;
    let h = g.gelu(h);
    g.matmul(h, w2)
}

/// `F0 + Σ Adapterⁱ(F0)`: every adapter consumes the base output, never the running sum.
pub fn adapt_msa(g: &mut Graph, f0: Var, adapters: &[(Var, Var)]) -> Result<Var> {
    let d = g.shape(f0).last().copied().unwrap_or(0);
    let mut out = f0;
    for &(w1, w2) in adapters {
        let (s1, s2) = (g.shape(w1).to_vec(), g.shape(w2).to_vec());
        if s1.len() != 2 || s2.len() != 2 || s1[0] != d || s2[1] != d || s1[1] != s2[0] {
            return Err(Error::shape(format!(
                "adapter {s1:?}/{s2:?} does not fit features of width {d}"
            )));
        }
        let a = apply_adapter(g, f0, w1, w2)?;
        out = g.add(out, a)?;
    }
    Ok(out)
}

/// Adapters of one task, keyed by `(block, site)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskAdapters {
    pub task: usize,
    pub adapters: Vec<((usize, Site), Adapter)>,
}

impl TaskAdapters {
    pub fn get(&self, block: usize, site: Site) -> Option<Adapter> {
        self.adapters
            .iter()
            .find(|(k, _)| *k == (block, site))
            .map(|(_, a)| *a)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdapterStack {
    pub tasks: Vec<TaskAdapters>,
}

impl AdapterStack {
    pub fn for_task(&self, task: usize) -> Option<&TaskAdapters> {
        self.tasks.iter().find(|t| t.task == task)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.tasks
            .iter()
            .flat_map(|t| t.adapters.iter().flat_map(|(_, a)| [a.down, a.up]))
            .collect()
    }
}

/// Projections of one cross-task attention instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CtaProjections {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossTaskAttention {
    pub gate: ParamId,
    /// Token axis: one shared instance. Embedding axis: one per task, indexed by task − 1.
    pub projections: Vec<CtaProjections>,
    pub axis: ConcatAxis,
}

impl CrossTaskAttention {
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.gate];
        for p in &self.projections {
            v.extend([p.wq, p.wk, p.wv]);
        }
        v
    }

    fn for_task(&self, task: usize) -> Result<CtaProjections> {
        let i = match self.axis {
            ConcatAxis::Token => 0,
            ConcatAxis::Embedding => task - 1,
        };
        self.projections
            .get(i)
            .copied()
            .ok_or_else(|| Error::invariant(format!("no cross-task projections for task {task}")))
    }
}

/// `softmax(q·kᵀ/σ)·v` with `q = F_n·W_q` and keys/values projected from the snapshots
/// concatenated along `axis`. Returns the attended features and the probability matrix.
#[allow(clippy::too_many_arguments)]
pub fn cross_task_attend(
    g: &mut Graph,
    f_n: Var,
    snapshots: &[Var],
    wq: Var,
    wk: Var,
    wv: Var,
    sigma: f64,
    axis: ConcatAxis,
) -> Result<(Var, Var)> {
    if snapshots.is_empty() {
        return Err(Error::invalid("cross-task attention needs at least one snapshot"));
    }
    let memory = match axis {
        ConcatAxis::Token => g.concat(snapshots, 0)?,
        ConcatAxis::Embedding => g.concat(snapshots, 1)?,
    };
    let q = g.matmul(f_n, wq)?;
    let k = g.matmul(memory, wk)?;
    let v = g.matmul(memory, wv)?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, 1.0 / sigma);
    let probs = g.softmax(scores);
    Ok((g.matmul(probs, v)?, probs))
}

/// `KL(softmax(reference) ‖ softmax(adapted))`, the reference treated as a fixed target.
pub fn logit_distillation(g: &mut Graph, adapted: Var, reference: Var) -> Result<Var> {
    g.kl_div(reference, adapted)
}

/// Which adapters and fusion a forward pass uses. Adapters of tasks `< upto` are always
/// on; the task-`upto` adapters follow the branch switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardSpec {
    pub upto: usize,
    pub spatial: bool,
    pub temporal: bool,
    pub cross_task: bool,
}

impl ForwardSpec {
    pub fn full(task: usize) -> Self {
        Self {
            upto: task,
            spatial: true,
            temporal: true,
            cross_task: true,
        }
    }

    /// Task-`task` adapters removed, everything else as in [`ForwardSpec::full`].
    pub fn without_current(task: usize) -> Self {
        Self {
            spatial: false,
            temporal: false,
            ..Self::full(task)
        }
    }

    fn site_on(&self, task: usize, site: Site) -> bool {
        if task < self.upto {
            return true;
        }
        match site {
            Site::Spatial => self.spatial,
            Site::Temporal => self.temporal,
            Site::Mlp => self.spatial || self.temporal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionManifest {
    pub task: usize,
    pub classes: usize,
    pub added: Vec<ParamRecord>,
    pub trainable: Vec<String>,
    pub trainable_count: usize,
    pub total_count: usize,
}

type SnapshotKey = (u64, u64);

/// Backbone plus heads, adapters and cross-task attention, with all weights in one store.
pub struct Model {
    pub block: BlockConfig,
    pub expansion: ExpansionConfig,
    pub store: ParamStore,
    pub backbone: Backbone,
    pub heads: ClassifierBank,
    pub adapters: AdapterStack,
    pub cta: Option<CrossTaskAttention>,
    pub manifests: Vec<ExpansionManifest>,
    rng: ChaCha8Rng,
    snapshot_memo: RefCell<HashMap<SnapshotKey, Rc<Vec<Tensor>>>>,
}

impl Model {
    pub fn new(block: &BlockConfig, expansion: &ExpansionConfig, seed: u64) -> Result<Self> {
        let mut rng = rng_for(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::build(block, &mut store, &mut rng)?;
        Ok(Self {
            block: block.clone(),
            expansion: expansion.clone(),
            store,
            backbone,
            heads: ClassifierBank::default(),
            adapters: AdapterStack::default(),
            cta: None,
            manifests: Vec::new(),
            rng,
            snapshot_memo: RefCell::new(HashMap::new()),
        })
    }

    /// Index of the most recently expanded task.
    pub fn current_task(&self) -> Option<usize> {
        self.heads.len().checked_sub(1)
    }

    /// Expands the model for `task` with a `classes`-wide head. Task 0 trains everything;
    /// later tasks freeze every existing parameter and open only the new adapters, the
    /// new head and the cross-task attention (or the MLPs when adapters are off).
    pub fn expand_for_task(&mut self, task: usize, classes: usize) -> Result<ExpansionManifest> {
        if task < self.heads.len() {
            return Err(Error::invalid(format!("task {task} has already been expanded")));
        }
        if task > self.heads.len() {
            return Err(Error::invalid(format!(
                "task {task} expanded before task {}",
                self.heads.len()
            )));
        }
        self.snapshot_memo.borrow_mut().clear();
        let before = self.store.len();
        let d = self.block.embed_dim;
        if task > 0 {
            self.store.freeze_all();
            let sites = self.expansion.adapter_sites();
            if !sites.is_empty() {
                let bound = self.expansion.adapter_init.unwrap_or(1.0 / (d as f64).sqrt());
                let b = self.block.bottleneck;
                let mut ta = TaskAdapters {
                    task,
                    adapters: Vec::new(),
                };
                for l in 0..self.block.blocks {
                    for &site in sites {
                        let prefix = format!("adapters.task{task}.block{l}.{}", site.name());
                        let down = self.store.add(
                            format!("{prefix}.down"),
                            uniform(&mut self.rng, &[d, b], bound),
                            false,
                        )?;
                        let up = self.store.add(format!("{prefix}.up"), Tensor::zeros(&[b, d]), false)?;
                        ta.adapters.push(((l, site), Adapter { down, up }));
                    }
                }
                self.adapters.tasks.push(ta);
            } else {
                for id in self.backbone.mlp_param_ids() {
                    self.store.set_frozen(id, false);
                }
            }
            if self.expansion.uses_cta() {
                self.expand_cta(task)?;
            }
        }
        self.heads.add_task_head(&mut self.store, d, classes, &mut self.rng)?;
        let added = self
            .store
            .iter()
            .skip(before)
            .map(|(_, p)| ParamRecord {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                count: p.value.len(),
            })
            .collect();
        let trainable_ids = self.store.trainable();
        let manifest = ExpansionManifest {
            task,
            classes,
            added,
            trainable: trainable_ids.iter().map(|id| self.store.get(*id).name.clone()).collect(),
            trainable_count: self.store.count(&trainable_ids),
            total_count: self.store.total_count(),
        };
        self.manifests.push(manifest.clone());
        Ok(manifest)
    }

    fn expand_cta(&mut self, task: usize) -> Result<()> {
        let d = self.block.embed_dim;
        let bound = 1.0 / (d as f64).sqrt();
        let axis = self.expansion.concat_axis;
        let new_proj = |store: &mut ParamStore, rng: &mut ChaCha8Rng, prefix: String, width: usize| -> Result<CtaProjections> {
            let wide_bound = 1.0 / (width as f64).sqrt();
            Ok(CtaProjections {
                wq: store.add(format!("{prefix}.q"), uniform(rng, &[d, d], bound), false)?,
                wk: store.add(format!("{prefix}.k"), uniform(rng, &[width, d], wide_bound), false)?,
                wv: store.add(format!("{prefix}.v"), uniform(rng, &[width, d], wide_bound), false)?,
            })
        };
        match &mut self.cta {
            None => {
                let (prefix, width) = match axis {
                    ConcatAxis::Token => ("cta".to_string(), d),
                    ConcatAxis::Embedding => (format!("cta.task{task}"), task * d),
                };
                let p = new_proj(&mut self.store, &mut self.rng, prefix, width)?;
                let gate = self.store.add("cta.gate", Tensor::scalar(0.0), false)?;
                self.cta = Some(CrossTaskAttention {
                    gate,
                    projections: vec![p],
                    axis,
                });
            }
            Some(cta) => {
                if axis == ConcatAxis::Embedding {
                    let p = new_proj(&mut self.store, &mut self.rng, format!("cta.task{task}"), task * d)?;
                    cta.projections.push(p);
                } else {
                    for id in [cta.projections[0].wq, cta.projections[0].wk, cta.projections[0].wv] {
                        self.store.set_frozen(id, false);
                    }
                }
                self.store.set_frozen(cta.gate, false);
            }
        }
        Ok(())
    }

    /// Names of the parameters that training on the current task may change.
    pub fn trainable_names(&self) -> Vec<String> {
        self.store
            .trainable()
            .iter()
            .map(|id| self.store.get(*id).name.clone())
            .collect()
    }

    /// Freezes everything except the classifier heads.
    pub fn open_heads_only(&mut self) -> Vec<ParamId> {
        self.store.freeze_all();
        let ids = self.heads.param_ids();
        for id in &ids {
            self.store.set_frozen(*id, false);
        }
        ids
    }

    /// Restores the trainable set declared by the last expansion.
    pub fn restore_task_trainable(&mut self) {
        let Some(m) = self.manifests.last() else { return };
        let names = m.trainable.clone();
        self.store.freeze_all();
        for n in names {
            if let Some(id) = self.store.id(&n) {
                self.store.set_frozen(id, false);
            }
        }
    }

    fn check_spec(&self, spec: &ForwardSpec) -> Result<()> {
        if spec.upto >= self.heads.len() {
            return Err(Error::UnknownTask {
                index: spec.upto,
                known: self.heads.len(),
            });
        }
        Ok(())
    }

    fn snapshot_key(clip: &VideoClip) -> SnapshotKey {
        let mut h = DefaultHasher::new();
        for v in &clip.pixels {
            v.to_bits().hash(&mut h);
        }
        (clip.sample_id, h.finish())
    }

    /// `F_i^MSA` for `i < task`: the last block's adapted spatial attention output of the
    /// model with adapters `≤ i` and no cross-task fusion.
    pub fn snapshots(&self, clip: &VideoClip, task: usize) -> Result<Rc<Vec<Tensor>>> {
        let key = Self::snapshot_key(clip);
        if self.expansion.memoize_snapshots {
            if let Some(v) = self.snapshot_memo.borrow().get(&key) {
                if v.len() == task {
                    return Ok(v.clone());
                }
            }
        }
        let mut out = Vec::with_capacity(task);
        for i in 0..task {
            let mut s = Session::new(&self.store, false);
            let spec = ForwardSpec {
                upto: i,
                spatial: true,
                temporal: true,
                cross_task: false,
            };
            let hook = ExpansionHook::new(self, spec, Vec::new());
            let fb = self.backbone.forward(&mut s, clip, &ClassifierBank::default(), &hook)?;
            out.push(s.graph.value(fb.last_spatial).clone());
        }
        let out = Rc::new(out);
        if self.expansion.memoize_snapshots {
            self.snapshot_memo.borrow_mut().insert(key, out.clone());
        }
        Ok(out)
    }

    pub fn clear_snapshot_memo(&self) {
        self.snapshot_memo.borrow_mut().clear();
    }

    fn cta_active(&self, spec: &ForwardSpec) -> bool {
        spec.cross_task && spec.upto >= 1 && self.cta.is_some()
    }

    pub fn forward(&self, s: &mut Session, clip: &VideoClip, spec: &ForwardSpec) -> Result<FeatureBundle> {
        self.check_spec(spec)?;
        let snaps = if self.cta_active(spec) {
            let t = self.snapshots(clip, spec.upto)?;
            t.iter().map(|x| s.graph.constant(x.clone())).collect()
        } else {
            Vec::new()
        };
        let hook = ExpansionHook::new(self, *spec, snaps);
        let heads = self.heads_upto(spec.upto);
        self.backbone.forward(s, clip, &heads, &hook)
    }

    fn heads_upto(&self, task: usize) -> ClassifierBank {
        ClassifierBank {
            heads: self.heads.heads[..=task].to_vec(),
        }
    }

    /// Forward with every adapter, head and fusion of the latest task, no gradients.
    pub fn predict(&self, clip: &VideoClip) -> Result<Vec<f64>> {
        let task = self.current_task().ok_or_else(|| Error::invalid("model has no heads"))?;
        let mut s = Session::new(&self.store, false);
        let fb = self.forward(&mut s, clip, &ForwardSpec::full(task))?;
        Ok(fb.logits.iter().flat_map(|v| s.graph.value(*v).data().to_vec()).collect())
    }

    /// Task-`task` head logits of the model without the task-`task` adapters, as values.
    pub fn reference_logits(&self, clip: &VideoClip, task: usize) -> Result<Tensor> {
        let mut s = Session::new(&self.store, false);
        let fb = self.forward(&mut s, clip, &ForwardSpec::without_current(task))?;
        Ok(s.graph.value(fb.logits[task]).clone())
    }

    /// Batch-mean logit distillation between the adapted forward and the forward
    /// without the current task's adapters.
    pub fn distill_loss(&self, s: &mut Session, clips: &[&VideoClip], task: usize) -> Result<Var> {
        if clips.is_empty() {
            return Err(Error::invalid("distillation over an empty batch"));
        }
        self.heads.head(task)?;
        let mut terms = Vec::with_capacity(clips.len());
        for clip in clips {
            let fb = self.forward(s, clip, &ForwardSpec::full(task))?;
            let reference = self.reference_logits(clip, task)?;
            let r = s.graph.constant(reference);
            terms.push(logit_distillation(&mut s.graph, fb.logits[task], r)?);
        }
        let all = s.graph.concat(&terms, 0)?;
        Ok(s.graph.mean(all))
    }

    /// Rebuilds the structure for the given per-task class counts and loads `store`'s
    /// values and freeze flags by name.
    pub fn restore(
        block: &BlockConfig,
        expansion: &ExpansionConfig,
        seed: u64,
        class_counts: &[usize],
        store: &ParamStore,
    ) -> Result<Self> {
        let mut m = Self::new(block, expansion, seed)?;
        for (t, &c) in class_counts.iter().enumerate() {
            m.expand_for_task(t, c)?;
        }
        if m.store.len() != store.len() {
            return Err(Error::invalid(format!(
                "checkpoint has {} parameters, structure needs {}",
                store.len(),
                m.store.len()
            )));
        }
        for (_, p) in store.iter() {
            let id = m
                .store
                .id(&p.name)
                .ok_or_else(|| Error::invalid(format!("unexpected parameter {}", p.name)))?;
            if m.store.value(id).shape() != p.value.shape() {
                return Err(Error::shape(format!("parameter {} has shape {:?}", p.name, p.value.shape())));
            }
            *m.store.value_mut(id) = p.value.clone();
            m.store.set_frozen(id, p.frozen);
        }
        Ok(m)
    }

    /// Parameters whose serialized weights form the storage budget: adapters plus
    /// cross-task attention.
    pub fn budget_param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.adapters.param_ids();
        if let Some(c) = &self.cta {
            ids.extend(c.param_ids());
        }
        ids
    }
}

/// Hook realizing [`ForwardSpec`] on top of the backbone.
pub struct ExpansionHook<'m> {
    model: &'m Model,
    spec: ForwardSpec,
    snapshots: Vec<Var>,
}

impl<'m> ExpansionHook<'m> {
    pub fn new(model: &'m Model, spec: ForwardSpec, snapshots: Vec<Var>) -> Self {
        Self {
            model,
            spec,
            snapshots,
        }
    }
}

impl AdapterHook for ExpansionHook<'_> {
    fn adapt(&self, s: &mut Session, block: usize, site: Site, f0: Var) -> Result<Var> {
        let mut out = f0;
        for ta in &self.model.adapters.tasks {
            if ta.task > self.spec.upto || !self.spec.site_on(ta.task, site) {
                continue;
            }
            if let Some(a) = ta.get(block, site) {
                let y = a.apply(s, f0)?;
                out = s.graph.add(out, y)?;
            }
        }
        Ok(out)
    }

    fn fuse_last(&self, s: &mut Session, spatial: Var) -> Result<Var> {
        if !self.model.cta_active(&self.spec) {
            return Ok(spatial);
        }
        let cta = self.model.cta.as_ref().expect("checked by cta_active");
        let p = cta.for_task(self.spec.upto)?;
        let (wq, wk, wv, gate) = (s.param(p.wq), s.param(p.wk), s.param(p.wv), s.param(cta.gate));
        let (act, _) = cross_task_attend(
            &mut s.graph,
            spatial,
            &self.snapshots,
            wq,
            wk,
            wv,
            self.model.block.sigma(),
            cta.axis,
        )?;
        let gated = s.graph.mul(act, gate)?;
        s.graph.add(spatial, gated)
    }
}
