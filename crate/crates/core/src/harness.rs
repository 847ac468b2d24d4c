//! The class-incremental protocol: per-task training, classifier fine-tuning,
//! evaluation, forgetting metrics, parameter budgets and the run directory.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analyzer::{probe_all, AnalyzerConfig, RelationCurve, Tracker};
use crate::backbone::{BlockConfig, Site};
use crate::causal::{
    compensation_effect, compensation_factors, hybrid_recovery_loss, mix_branch_feature, recovery_loss_var,
    relation_csv, relation_records, relation_vars, topk_select, Branch, CacheEntry, CausalConfig, CompensationFactors,
    RelationCache,
};
use crate::datagen::{make_task_stream, mix_seed, rng_for, Corpus, CorpusConfig, SplitStyle, TaskStream, VideoClip};
use crate::error::{Error, Result};
use crate::expansion::{ConcatAxis, ExpansionConfig, ForwardSpec, Model};
use crate::fmt_sig;
use crate::numerics::{argmax, Tensor, Var};
use crate::params::{checkpoint_size_of, save_checkpoint, ParamId, ParamStore, Session};

/// Label space of the training cross-entropy for tasks `n ≥ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeScope {
    /// Concatenated logits of every seen head.
    Seen,
    /// The current task's head only.
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub finetune: bool,
    pub finetune_epochs: usize,
    pub exemplars_per_class: usize,
    /// Learning rate for task 0, where the whole backbone trains.
    pub lr_initial: f64,
    /// Learning rate for tasks `n ≥ 1`.
    pub lr_incremental: f64,
    pub lr_finetune: f64,
    pub optimizer: OptimizerKind,
    pub momentum: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub batch_size: usize,
    pub ce_scope: CeScope,
    pub seed: u64,
    pub checkpoints: bool,
    pub expansion: ExpansionConfig,
    pub causal: CausalConfig,
    pub analyzer: AnalyzerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            finetune: true,
            finetune_epochs: 1,
            exemplars_per_class: 5,
            lr_initial: 0.0005,
            lr_incremental: 0.001,
            lr_finetune: 0.001,
            optimizer: OptimizerKind::Adam,
            momentum: 0.9,
            grad_clip: Some(1.0),
            batch_size: 4,
            ce_scope: CeScope::Current,
            seed: 42,
            checkpoints: true,
            expansion: ExpansionConfig::default(),
            causal: CausalConfig::default(),
            analyzer: AnalyzerConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Plain sequential fine-tuning of the MLPs and heads.
    pub fn baseline() -> Self {
        let mut c = Self::default();
        c.expansion.separate_adapters = false;
        c.expansion.cross_task_attention = false;
        c.causal.relation_recovery = false;
        c.causal.compensation = false;
        c
    }

    /// Separate spatial/temporal adapters without the causal mechanisms.
    pub fn adapters_only() -> Self {
        let mut c = Self::default();
        c.causal.relation_recovery = false;
        c.causal.compensation = false;
        c
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lr_initial", self.lr_initial),
            ("lr_incremental", self.lr_incremental),
            ("lr_finetune", self.lr_finetune),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::invalid(format!("grad_clip must be positive, got {c}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.finetune && self.finetune_epochs > 0 && self.exemplars_per_class == 0 {
            return Err(Error::invalid("fine-tuning needs at least one exemplar per class"));
        }
        if self.analyzer.cadence == 0 || self.analyzer.probe_batch == 0 {
            return Err(Error::invalid("analyzer cadence and probe batch must be at least 1"));
        }
        self.causal.validate()
    }

    fn causal_active(&self) -> bool {
        self.causal.relation_recovery || self.causal.compensation
    }

    pub fn label(&self) -> &'static str {
        if self.causal_active() {
            "causal"
        } else {
            "plain"
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Heavy-ball momentum SGD.
    Sgd,
    /// Adam with `β = (momentum, 0.999)`.
    Adam,
}

const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// First-order optimizer over the non-frozen parameters, with optional global-norm
/// gradient clipping.
#[derive(Debug, Clone)]
pub struct Optimizer {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub clip: Option<f64>,
    steps: i32,
    first: HashMap<ParamId, Vec<f64>>,
    second: HashMap<ParamId, Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64, momentum: f64) -> Self {
        Self {
            kind,
            lr,
            momentum,
            clip: None,
            steps: 0,
            first: HashMap::new(),
            second: HashMap::new(),
        }
    }

    pub fn sgd(lr: f64, momentum: f64) -> Self {
        Self::new(OptimizerKind::Sgd, lr, momentum)
    }

    pub fn with_clip(mut self, clip: Option<f64>) -> Self {
        self.clip = clip;
        self
    }

    /// Applies `grads` to every trainable parameter they cover; returns how many changed.
    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Tensor>) -> usize {
        let mut ids: Vec<ParamId> = grads.keys().copied().filter(|id| !store.get(*id).frozen).collect();
        ids.sort_unstable();
        let scale = match self.clip {
            Some(c) => {
                let sq: f64 = ids.iter().map(|id| grads[id].data().iter().map(|g| g * g).sum::<f64>()).sum();
                let n = sq.sqrt();
                if n > c {
                    c / n
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        self.steps += 1;
        let (b1, b2) = (self.momentum, ADAM_BETA2);
        let c1 = 1.0 - b1.powi(self.steps);
        let c2 = 1.0 - b2.powi(self.steps);
        for id in &ids {
            let g = grads[id].data();
            let m = self.first.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
            let w = store.value_mut(*id).data_mut();
            match self.kind {
                OptimizerKind::Sgd => {
                    for ((w, m), g) in w.iter_mut().zip(m.iter_mut()).zip(g) {
                        *m = b1 * *m + scale * g;
                        *w -= self.lr * *m;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(*id).or_insert_with(|| vec![0.0; g.len()]);
                    for (((w, m), v), g) in w.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g) {
                        let g = scale * g;
                        *m = b1 * *m + (1.0 - b1) * g;
                        *v = b2 * *v + (1.0 - b2) * g * g;
                        *w -= self.lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        ids.len()
    }
}

/// Task-start records: the candidate cache plus a query record for every training sample.
#[derive(Debug, Clone, Default)]
pub struct TaskCache {
    pub cache: RelationCache,
    pub queries: HashMap<u64, CacheEntry>,
}

pub fn populate_cache(model: &Model, task: usize, clips: &[&VideoClip], capacity_per_class: usize) -> Result<TaskCache> {
    let records = relation_records(model, task, clips)?;
    let cache = RelationCache::from_records(task, capacity_per_class, &records);
    let queries = records.into_iter().map(|r| (r.sample_id, r)).collect();
    Ok(TaskCache { cache, queries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub task: usize,
    pub phase: String,
    pub epoch: usize,
    pub lr: f64,
    pub mu: [f64; 3],
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub l_ce: f64,
    pub l_d: f64,
    pub l_t: f64,
    pub l_s: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TaskLog {
    pub epochs: Vec<EpochLog>,
    pub curve: Option<RelationCurve>,
    pub warnings: Vec<String>,
}

#[derive(Default, Clone, Copy)]
struct Parts {
    ce: f64,
    d: f64,
    t: f64,
    s: f64,
    total: f64,
}

struct StepContext<'a> {
    task: usize,
    cache: Option<&'a TaskCache>,
    alpha: CompensationFactors,
    mu: [f64; 3],
    cfg: &'a TrainConfig,
}

const ZERO_FACTORS: CompensationFactors = CompensationFactors {
    alpha_s: 0.0,
    alpha_t: 0.0,
    norm_s: 0.0,
    norm_t: 0.0,
    cosine: 0.0,
};

fn sample_loss(model: &Model, s: &mut Session, clip: &VideoClip, ctx: &StepContext, warnings: &mut BTreeSet<String>) -> Result<(Var, Parts)> {
    let task = ctx.task;
    let causal = &ctx.cfg.causal;
    let fb = model.forward(s, clip, &ForwardSpec::full(task))?;
    let local = task >= 1 && ctx.cfg.ce_scope == CeScope::Current;
    let (mut logits, base) = if local {
        (fb.logits[task], model.heads.offset(task))
    } else {
        (s.graph.concat(&fb.logits, 1)?, 0)
    };
    let label = clip
        .label
        .checked_sub(base)
        .ok_or_else(|| Error::invalid(format!("label {} is not a task-{task} class", clip.label)))?;
    let query = match ctx.cache {
        Some(c) if task >= 1 => Some(
            c.queries
                .get(&clip.sample_id)
                .ok_or_else(|| Error::invariant(format!("no task-start record for sample {}", clip.sample_id)))?,
        ),
        _ => None,
    };
    let exclude = |id: u64| causal.exclude_self.then_some(id);
    if let (true, Some(q), Some(c)) = (causal.compensation, query, ctx.cache) {
        let (es, w1) = compensation_effect(&c.cache, &q.benefit_s, ctx.alpha.alpha_s, causal.k1, Branch::Spatial, exclude(q.sample_id))?;
        let (et, w2) = compensation_effect(&c.cache, &q.benefit_t, ctx.alpha.alpha_t, causal.k1, Branch::Temporal, exclude(q.sample_id))?;
        warnings.extend(w1.into_iter().chain(w2));
        let total = s.graph.value(logits).len();
        let off = model.heads.offset(task) - base;
        let mut e = vec![0.0; total];
        for (i, v) in es.iter().flatten().enumerate() {
            e[off + i] += causal.lambda1 * v;
        }
        for (i, v) in et.iter().flatten().enumerate() {
            e[off + i] += causal.lambda2 * v;
        }
        let ev = s.graph.constant(Tensor::matrix(1, total, e)?);
        logits = s.graph.add(logits, ev)?;
    }
    let ce = s.graph.cross_entropy(logits, label)?;
    let mut parts = Parts {
        ce: s.graph.value(ce).item(),
        ..Parts::default()
    };
    let mut loss = ce;
    if task >= 1 && model.expansion.uses_adapters() {
        let r = model.reference_logits(clip, task)?;
        let r = s.graph.constant(r);
        let ld = s.graph.kl_div(r, fb.logits[task])?;
        parts.d = s.graph.value(ld).item();
        let w = s.graph.scale(ld, ctx.mu[0]);
        loss = s.graph.add(loss, w)?;
    }
    if let (true, Some(q), Some(c)) = (causal.relation_recovery, query, ctx.cache) {
        let ls = model.heads.classify(s, fb.spatial, task)?;
        let lt = model.heads.classify(s, fb.temporal, task)?;
        let lf = fb.logits[task];
        let (l_s, l_t) = if causal.hybrid && !c.cache.is_empty() {
            let sel_s = topk_select(&c.cache, &q.relation, causal.k, Branch::Spatial, exclude(q.sample_id))?;
            let sel_t = topk_select(&c.cache, &q.relation, causal.k, Branch::Temporal, exclude(q.sample_id))?;
            warnings.extend(sel_s.warning.clone().into_iter().chain(sel_t.warning.clone()));
            let ms = mix_branch_feature(&c.cache, &sel_s.candidates, Branch::Spatial, causal.normalized_mix);
            let mt = mix_branch_feature(&c.cache, &sel_t.candidates, Branch::Temporal, causal.normalized_mix);
            hybrid_recovery_loss(&mut s.graph, &ms, &mt, ls, lt, lf)?
        } else {
            let anchor = q.anchor()?;
            let (rs, rt) = relation_vars(&mut s.graph, ls, lt, lf)?;
            let a_s = s.graph.constant(Tensor::vector(anchor.spatial));
            let a_t = s.graph.constant(Tensor::vector(anchor.temporal));
            (recovery_loss_var(&mut s.graph, a_s, rs)?, recovery_loss_var(&mut s.graph, a_t, rt)?)
        };
        parts.s = s.graph.value(l_s).item();
        parts.t = s.graph.value(l_t).item();
        let wt = s.graph.scale(l_t, ctx.mu[1]);
        let ws = s.graph.scale(l_s, ctx.mu[2]);
        loss = s.graph.add(loss, wt)?;
        loss = s.graph.add(loss, ws)?;
    }
    parts.total = s.graph.value(loss).item();
    Ok((loss, parts))
}

/// Trains the current task with `L_CE + μ1·L_D + μ2·L_T + μ3·L_S`, the causal effects
/// folded into the logits used by `L_CE`.
pub fn run_task(
    model: &mut Model,
    task: usize,
    train: &[VideoClip],
    cache: Option<&TaskCache>,
    probe: &[VideoClip],
    cfg: &TrainConfig,
) -> Result<TaskLog> {
    if model.current_task() != Some(task) {
        return Err(Error::invalid(format!("model is not expanded for task {task}")));
    }
    if train.is_empty() {
        return Err(Error::invalid(format!("task {task} has no training data")));
    }
    if task >= 1 && cfg.causal_active() && cache.is_none() {
        return Err(Error::invalid(format!("relation cache missing for task {task}")));
    }
    let cache = if task >= 1 { cache } else { None };
    let probes_possible = task >= 1 && model.expansion.uses_adapters() && !probe.is_empty();
    let mut tracker = if probes_possible && cfg.analyzer.enabled {
        Some(Tracker::new(cfg.analyzer.cadence, cfg.analyzer.kl_reversed)?)
    } else {
        None
    };
    let mut warnings = BTreeSet::new();
    if task >= 1 && cfg.causal.compensation && !probes_possible {
        warnings.insert("compensation needs adapter probes; factors held at 0".to_string());
    }
    let probe_refs: Vec<&VideoClip> = probe.iter().collect();
    let lr = if task == 0 { cfg.lr_initial } else { cfg.lr_incremental };
    let mut opt = Optimizer::new(cfg.optimizer, lr, cfg.momentum).with_clip(cfg.grad_clip);
    let mut rng = rng_for(mix_seed(cfg.seed, 0x7EA1_0000 + task as u64));
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TaskLog::default();
    for epoch in 0..cfg.epochs {
        let mu = cfg.causal.mu_at(epoch, cfg.epochs);
        let mut snaps = None;
        if let Some(t) = tracker.as_mut() {
            snaps = t.observe(model, &probe_refs, epoch)?;
        }
        let mut alpha = ZERO_FACTORS;
        if task >= 1 && cfg.causal.compensation && probes_possible {
            let snaps = match snaps {
                Some(s) => s,
                None => probe_all(model, &probe_refs, cfg.analyzer.kl_reversed, epoch)?.0,
            };
            let (f, w) = compensation_factors(&snaps[0].values, &snaps[1].values)?;
            warnings.extend(w.into_iter().map(|w| format!("epoch {epoch}: {w}")));
            alpha = f;
        }
        order.shuffle(&mut rng);
        let ctx = StepContext {
            task,
            cache,
            alpha,
            mu,
            cfg,
        };
        let mut sum = Parts::default();
        for batch in order.chunks(cfg.batch_size) {
            let grads = {
                let mut s = Session::new(&model.store, true);
                let mut terms = Vec::with_capacity(batch.len());
                for &i in batch {
                    let (l, p) = sample_loss(model, &mut s, &train[i], &ctx, &mut warnings)?;
                    terms.push(l);
                    sum.ce += p.ce;
                    sum.d += p.d;
                    sum.t += p.t;
                    sum.s += p.s;
                    sum.total += p.total;
                }
                let all = s.graph.concat(&terms, 0)?;
                let loss = s.graph.mean(all);
                if !s.graph.value(loss).item().is_finite() {
                    return Err(Error::invariant(format!("non-finite loss at task {task} epoch {epoch}")));
                }
                s.graph.backward(loss)?;
                warnings.extend(s.graph.warnings().iter().cloned());
                s.grads()
            };
            opt.step(&mut model.store, &grads);
        }
        let n = train.len() as f64;
        log.epochs.push(EpochLog {
            task,
            phase: "train".into(),
            epoch,
            lr,
            mu,
            alpha_s: alpha.alpha_s,
            alpha_t: alpha.alpha_t,
            l_ce: sum.ce / n,
            l_d: sum.d / n,
            l_t: sum.t / n,
            l_s: sum.s / n,
            total: sum.total / n,
        });
    }
    if let Some(t) = tracker {
        warnings.extend(t.warnings.iter().cloned());
        log.curve = Some(t.curve);
    }
    log.warnings = warnings.into_iter().collect();
    Ok(log)
}

/// `per_class` random training clips of every class in `classes`, labeled by global index.
pub fn draw_exemplars(corpus: &Corpus, stream: &TaskStream, classes: &[usize], per_class: usize, seed: u64) -> Result<Vec<VideoClip>> {
    let mut rng = rng_for(mix_seed(seed, 0xE8E3));
    let mut out = Vec::with_capacity(classes.len() * per_class);
    for &c in classes {
        let mut pool = corpus.train_of(&[c]);
        pool.shuffle(&mut rng);
        for clip in pool.into_iter().take(per_class) {
            out.push(relabel(clip, stream)?);
        }
    }
    Ok(out)
}

fn relabel(clip: &VideoClip, stream: &TaskStream) -> Result<VideoClip> {
    let mut c = clip.clone();
    c.label = stream
        .global_index(clip.label)
        .ok_or_else(|| Error::invalid(format!("class {} is not in the task stream", clip.label)))?;
    Ok(c)
}

/// Tunes the classifier heads on exemplar features with the feature extractor frozen;
/// every other parameter keeps its bits.
pub fn finetune_classifier(model: &mut Model, exemplars: &[VideoClip], seen: &[usize], cfg: &TrainConfig) -> Result<Vec<EpochLog>> {
    for &c in seen {
        if !exemplars.iter().any(|e| e.label == c) {
            return Err(Error::invalid(format!("exemplar set has no sample of class {c}")));
        }
    }
    if cfg.finetune_epochs == 0 || exemplars.is_empty() {
        return Ok(Vec::new());
    }
    let task = model.current_task().ok_or_else(|| Error::invalid("model has no heads"))?;
    let mut features = Vec::with_capacity(exemplars.len());
    for e in exemplars {
        let mut s = Session::new(&model.store, false);
        let fb = model.forward(&mut s, e, &ForwardSpec::full(task))?;
        features.push(s.graph.value(fb.full).clone());
    }
    model.open_heads_only();
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr_finetune, cfg.momentum).with_clip(cfg.grad_clip);
    let mut rng = rng_for(mix_seed(cfg.seed, 0xF17E_0000 + task as u64));
    let mut order: Vec<usize> = (0..exemplars.len()).collect();
    let mut logs = Vec::new();
    let result = (|| -> Result<()> {
        for epoch in 0..cfg.finetune_epochs {
            order.shuffle(&mut rng);
            let mut sum = 0.0;
            for batch in order.chunks(cfg.batch_size) {
                let grads = {
                    let mut s = Session::new(&model.store, true);
                    let mut terms = Vec::with_capacity(batch.len());
                    for &i in batch {
                        let f = s.graph.constant(features[i].clone());
                        let heads: Vec<Var> = (0..=task)
                            .map(|t| model.heads.classify(&mut s, f, t))
                            .collect::<Result<_>>()?;
                        let logits = s.graph.concat(&heads, 1)?;
                        let ce = s.graph.cross_entropy(logits, exemplars[i].label)?;
                        sum += s.graph.value(ce).item();
                        terms.push(ce);
                    }
                    let all = s.graph.concat(&terms, 0)?;
                    let loss = s.graph.mean(all);
                    s.graph.backward(loss)?;
                    s.grads()
                };
                opt.step(&mut model.store, &grads);
            }
            let l = sum / exemplars.len() as f64;
            logs.push(EpochLog {
                task,
                phase: "finetune".into(),
                epoch,
                lr: cfg.lr_finetune,
                mu: [0.0; 3],
                alpha_s: 0.0,
                alpha_t: 0.0,
                l_ce: l,
                l_d: 0.0,
                l_t: 0.0,
                l_s: 0.0,
                total: l,
            });
        }
        Ok(())
    })();
    model.restore_task_trainable();
    result.map(|_| logs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyRow {
    pub per_task: Vec<f64>,
    pub pooled: f64,
}

/// Top-1 accuracy of the argmax over all heads. The causal effects are training-only,
/// so `causal` never changes the result.
pub fn evaluate(model: &Model, test: &[VideoClip], label_task: &[usize], _causal: &CausalConfig) -> Result<AccuracyRow> {
    let seen = model.heads.len();
    let mut hit = vec![0usize; seen];
    let mut count = vec![0usize; seen];
    for clip in test {
        let t = *label_task
            .get(clip.label)
            .ok_or_else(|| Error::invalid(format!("label {} has no task", clip.label)))?;
        if t >= seen {
            return Err(Error::invalid(format!("test label {} belongs to unseen task {t}", clip.label)));
        }
        let logits = model.predict(clip)?;
        count[t] += 1;
        if argmax(&logits) == clip.label {
            hit[t] += 1;
        }
    }
    let per_task = hit
        .iter()
        .zip(&count)
        .map(|(&h, &c)| if c == 0 { 0.0 } else { h as f64 / c as f64 })
        .collect();
    let total: usize = count.iter().sum();
    let pooled = if total == 0 {
        0.0
    } else {
        hit.iter().sum::<usize>() as f64 / total as f64
    };
    Ok(AccuracyRow { per_task, pooled })
}

/// `(1/(N−1))·Σ_{i<N}(Acc_i − Acc_N)` over pooled accuracies.
pub fn bwf(acc: &[f64]) -> Result<f64> {
    let n = acc.len();
    if n < 2 {
        return Err(Error::invalid(format!("forgetting needs at least 2 tasks, got {n}")));
    }
    let last = acc[n - 1];
    Ok(acc[..n - 1].iter().map(|a| a - last).sum::<f64>() / (n - 1) as f64)
}

/// Mean pooled accuracy over all checkpoints, or with `exclude_last` over the first
/// `N−1` (a single checkpoint then gives `Acc_1`).
pub fn avg_acc(acc: &[f64], exclude_last: bool) -> Result<f64> {
    if acc.is_empty() {
        return Err(Error::invalid("no accuracies"));
    }
    let slice = if exclude_last && acc.len() > 1 { &acc[..acc.len() - 1] } else { acc };
    Ok(slice.iter().sum::<f64>() / slice.len() as f64)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `rows[i][j]`: accuracy on task `j` after task `i`, `j ≤ i`.
    pub rows: Vec<Vec<f64>>,
    pub pooled: Vec<f64>,
}

pub const ACCURACY_HEADER: &str = "after_task,acc_pooled";

impl AccuracyMatrix {
    pub fn push(&mut self, row: AccuracyRow) -> Result<()> {
        if row.per_task.len() != self.rows.len() + 1 {
            return Err(Error::invalid(format!(
                "row after task {} has {} entries",
                self.rows.len(),
                row.per_task.len()
            )));
        }
        self.rows.push(row.per_task);
        self.pooled.push(row.pooled);
        Ok(())
    }

    pub fn acc_n(&self) -> Option<f64> {
        self.pooled.last().copied()
    }

    pub fn bwf(&self) -> Result<f64> {
        bwf(&self.pooled)
    }

    pub fn avg_acc(&self, exclude_last: bool) -> Result<f64> {
        avg_acc(&self.pooled, exclude_last)
    }

    pub fn to_csv(&self) -> String {
        let n = self.rows.len();
        let mut out = String::from(ACCURACY_HEADER);
        for j in 0..n {
            let _ = write!(out, ",task_{j}");
        }
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{i},{}", fmt_sig(self.pooled[i]));
            for j in 0..n {
                out.push(',');
                if let Some(v) = row.get(j) {
                    out.push_str(&fmt_sig(*v));
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: String| Error::Format {
            path: "accuracy matrix".into(),
            reason: format!("line {line}: {why}"),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| bad(1, "empty file".into()))?;
        if !header.starts_with(ACCURACY_HEADER) {
            return Err(bad(1, format!("header must start with {ACCURACY_HEADER}")));
        }
        let mut m = Self::default();
        for (k, (i, line)) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() < 2 || f[0].trim().parse::<usize>().ok() != Some(k) {
                return Err(bad(i + 1, format!("expected row for task {k}")));
            }
            let num = |s: &str| s.trim().parse::<f64>().map_err(|_| bad(i + 1, format!("bad number {s:?}")));
            let pooled = num(f[1])?;
            let per_task = f[2..]
                .iter()
                .filter(|s| !s.trim().is_empty())
                .map(|s| num(s))
                .collect::<Result<Vec<_>>>()?;
            m.rows.push(per_task);
            m.pooled.push(pooled);
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBudget {
    pub task: usize,
    pub classes: usize,
    pub added: usize,
    pub trainable: usize,
    pub total: usize,
    /// Trainable count relative to task 0's.
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetReport {
    pub tasks: Vec<TaskBudget>,
    /// Adapter and cross-task attention weights.
    pub storage_params: usize,
    pub storage_bytes: usize,
    pub storage_overhead_bytes: usize,
    pub exemplar_count: usize,
    pub exemplar_bytes: usize,
}

/// Bytes per stored exemplar pixel (`f32`, as exported).
pub const EXEMPLAR_PIXEL_BYTES: usize = 4;

pub fn account(model: &Model, exemplar_count: usize) -> Result<BudgetReport> {
    let first = model
        .manifests
        .first()
        .ok_or_else(|| Error::invalid("no completed task to account"))?;
    let base = first.trainable_count as f64;
    let tasks = model
        .manifests
        .iter()
        .map(|m| TaskBudget {
            task: m.task,
            classes: m.classes,
            added: m.added.iter().map(|p| p.count).sum(),
            trainable: m.trainable_count,
            total: m.total_count,
            ratio: m.trainable_count as f64 / base,
        })
        .collect();
    let ids = model.budget_param_ids();
    let storage_params = model.store.count(&ids);
    let storage_bytes = checkpoint_size_of(ids.iter().map(|id| model.store.get(*id)));
    let b = &model.block;
    Ok(BudgetReport {
        tasks,
        storage_params,
        storage_bytes,
        storage_overhead_bytes: storage_bytes - 8 * storage_params,
        exemplar_count,
        exemplar_bytes: exemplar_count * b.frames * b.frame_size * b.frame_size * EXEMPLAR_PIXEL_BYTES,
    })
}

/// `(trainable, total)` per task computed from the configuration alone.
pub fn analytic_counts(block: &BlockConfig, exp: &ExpansionConfig, class_counts: &[usize]) -> Vec<(usize, usize)> {
    let d = block.embed_dim;
    let h = block.mlp_hidden();
    let l = block.blocks;
    let pos = if block.position_embeddings {
        (block.patches_per_frame() + block.frames) * d
    } else {
        0
    };
    let mlp = l * (d * h + h + h * d + d);
    let per_block = 3 * 2 * d + 2 * 4 * (d * d + d);
    let backbone = block.patch_pixels() * d + d + d + pos + l * per_block + mlp + 2 * d;
    let sites = if exp.mlp_adapter {
        1
    } else if exp.separate_adapters {
        2
    } else {
        0
    };
    let adapters = l * sites * 2 * d * block.bottleneck;
    let cta = sites > 0 && exp.cross_task_attention;
    let mut out = Vec::with_capacity(class_counts.len());
    let mut total = 0;
    for (n, &c) in class_counts.iter().enumerate() {
        let head = d * c + c;
        if n == 0 {
            total = backbone + head;
            out.push((total, total));
            continue;
        }
        let (cta_added, cta_open) = match (cta, exp.concat_axis) {
            (false, _) => (0, 0),
            (true, ConcatAxis::Token) => (if n == 1 { 3 * d * d + 1 } else { 0 }, 3 * d * d + 1),
            (true, ConcatAxis::Embedding) => {
                let p = d * d + 2 * n * d * d;
                (p + usize::from(n == 1), p + 1)
            }
        };
        total += adapters + cta_added + head;
        let trainable = if sites > 0 { adapters + cta_open + head } else { mlp + head };
        out.push((trainable, total));
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StreamConfig {
    pub tasks: usize,
    pub split: SplitStyle,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            tasks: 5,
            split: SplitStyle::Balanced,
            seed: 42,
        }
    }
}

pub const SCHEMA_VERSION: u32 = 1;

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    pub train: TrainConfig,
    pub block: BlockConfig,
    pub corpus: CorpusConfig,
    pub stream: StreamConfig,
    pub output: PathBuf,
    /// Exported corpus to load instead of generating one.
    pub corpus_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            train: TrainConfig::default(),
            block: BlockConfig::default(),
            corpus: CorpusConfig::default(),
            stream: StreamConfig::default(),
            output: PathBuf::from("runs/default"),
            corpus_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        self.train.validate()?;
        self.block.validate()?;
        self.corpus.validate()?;
        let r = &self.corpus.render;
        if r.frames != self.block.frames || r.size != self.block.frame_size {
            return Err(Error::invalid(format!(
                "corpus renders {}×{}² clips but the backbone expects {}×{}²",
                r.frames, r.size, self.block.frames, self.block.frame_size
            )));
        }
        Ok(())
    }

    /// Sets every seed in the document.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.corpus.seed = seed;
        self.stream.seed = seed;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub tasks: usize,
    pub acc_n: f64,
    pub bwf: Option<f64>,
    pub avg_acc: f64,
    pub avg_acc_excl_last: f64,
    pub label: String,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub matrix: AccuracyMatrix,
    pub budget: BudgetReport,
    pub summary: RunSummary,
    pub logs: Vec<EpochLog>,
    pub curves: Vec<(usize, RelationCurve)>,
}

/// Files a run directory needs for reporting.
pub const RUN_FILES: [&str; 4] = ["config.json", "metrics.csv", "accuracy_matrix.csv", "budget.json"];

pub const METRICS_HEADER: &str = "task,phase,epoch,lr,mu1,mu2,mu3,alpha_s,alpha_t,l_ce,l_d,l_t,l_s,total";

pub fn metrics_csv(logs: &[EpochLog]) -> String {
    let mut out = format!("{METRICS_HEADER}\n");
    for e in logs {
        let _ = write!(out, "{},{},{}", e.task, e.phase, e.epoch);
        for v in [e.lr, e.mu[0], e.mu[1], e.mu[2], e.alpha_s, e.alpha_t, e.l_ce, e.l_d, e.l_t, e.l_s, e.total] {
            let _ = write!(out, ",{}", fmt_sig(v));
        }
        out.push('\n');
    }
    out
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(Error::from)
}

fn json<T: Serialize>(v: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// First `n` training clips after a seeded shuffle.
fn probe_batch(train: &[VideoClip], n: usize, seed: u64, task: usize) -> Vec<VideoClip> {
    let mut idx: Vec<usize> = (0..train.len()).collect();
    idx.shuffle(&mut rng_for(mix_seed(seed, 0x9B0B_0000 + task as u64)));
    idx.into_iter().take(n).map(|i| train[i].clone()).collect()
}

/// Runs expand → cache → train → fine-tune → evaluate over every task and writes the run
/// directory. `progress` receives one line per finished stage.
pub fn run_experiment(cfg: &ExperimentConfig, corpus: &Corpus, out: &Path, progress: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    cfg.validate()?;
    let tc = &cfg.train;
    let classes: Vec<usize> = corpus.specs.iter().map(|s| s.class_id).collect();
    let stream = make_task_stream(&classes, cfg.stream.tasks, cfg.stream.split, cfg.stream.seed)?;
    let mut label_task = vec![0; classes.len()];
    for (t, cs) in stream.tasks.iter().enumerate() {
        for &c in cs {
            label_task[stream.global_index(c).expect("class in stream")] = t;
        }
    }
    for dir in ["", "relation_curves", "relations", "checkpoints", "manifests"] {
        fs::create_dir_all(out.join(dir))?;
    }
    write(&out.join("config.json"), json(cfg)?)?;
    write(&out.join("stream.json"), json(&stream)?)?;

    let mut model = Model::new(&cfg.block, &tc.expansion, tc.seed)?;
    let mut matrix = AccuracyMatrix::default();
    let mut logs = Vec::new();
    let mut curves = Vec::new();
    let mut warnings = Vec::new();
    let mut exemplar_count = 0;
    for (task, task_classes) in stream.tasks.iter().enumerate() {
        let manifest = model
            .expand_for_task(task, task_classes.len())
            .map_err(|e| e.at_stage("expand", task))?;
        write(&out.join(format!("manifests/task{task}.json")), json(&manifest)?)?;
        let train = corpus
            .train_of(task_classes)
            .into_iter()
            .map(|c| relabel(c, &stream))
            .collect::<Result<Vec<_>>>()?;
        let cache = if task >= 1 && tc.causal_active() {
            let refs: Vec<&VideoClip> = train.iter().collect();
            let c = populate_cache(&model, task, &refs, tc.causal.cache_per_class).map_err(|e| e.at_stage("cache", task))?;
            write(&out.join(format!("relations/task{task}.csv")), relation_csv(&c.cache))?;
            Some(c)
        } else {
            None
        };
        let probe = probe_batch(&train, tc.analyzer.probe_batch, tc.seed, task);
        let before = model.store.clone();
        let log = run_task(&mut model, task, &train, cache.as_ref(), &probe, tc).map_err(|e| e.at_stage("train", task))?;
        check_frozen(&before, &model.store).map_err(|e| e.at_stage("train", task))?;
        warnings.extend(log.warnings.iter().map(|w| format!("task {task} train: {w}")));
        logs.extend(log.epochs);
        if let Some(c) = log.curve {
            write(&out.join(format!("relation_curves/task{task}_{}.csv", tc.label())), c.to_csv())?;
            curves.push((task, c));
        }
        progress(&format!("task {task}: trained on {} clips", train.len()));

        let seen: Vec<usize> = stream.seen_classes(task);
        if tc.finetune && tc.finetune_epochs > 0 {
            let ex = draw_exemplars(corpus, &stream, &seen, tc.exemplars_per_class, mix_seed(tc.seed, task as u64))?;
            exemplar_count = ex.len();
            let global: Vec<usize> = seen.iter().map(|c| stream.global_index(*c).expect("seen class")).collect();
            let ft = finetune_classifier(&mut model, &ex, &global, tc).map_err(|e| e.at_stage("finetune", task))?;
            logs.extend(ft);
        }

        let test = corpus
            .test_of(&seen)
            .into_iter()
            .map(|c| relabel(c, &stream))
            .collect::<Result<Vec<_>>>()?;
        let row = evaluate(&model, &test, &label_task, &tc.causal).map_err(|e| e.at_stage("evaluate", task))?;
        model.clear_snapshot_memo();
        progress(&format!("task {task}: pooled accuracy {}", fmt_sig(row.pooled)));
        matrix.push(row)?;
        if tc.checkpoints {
            save_checkpoint(&model.store, &out.join(format!("checkpoints/task{task}.ckpt")))
                .map_err(|e| e.at_stage("checkpoint", task))?;
        }
    }
    let budget = account(&model, exemplar_count)?;
    let summary = RunSummary {
        tasks: stream.len(),
        acc_n: matrix.acc_n().unwrap_or(0.0),
        bwf: matrix.bwf().ok(),
        avg_acc: matrix.avg_acc(false)?,
        avg_acc_excl_last: matrix.avg_acc(true)?,
        label: tc.label().into(),
    };
    write(&out.join("metrics.csv"), metrics_csv(&logs))?;
    write(&out.join("accuracy_matrix.csv"), matrix.to_csv())?;
    write(&out.join("budget.json"), json(&budget)?)?;
    write(&out.join("summary.json"), json(&summary)?)?;
    let mut wl = String::new();
    for w in &warnings {
        wl.push_str(w);
        wl.push('\n');
    }
    write(&out.join("warnings.log"), wl)?;
    Ok(RunOutcome {
        matrix,
        budget,
        summary,
        logs,
        curves,
    })
}

/// Errors when a parameter frozen in `before` changed bits in `after`.
pub fn check_frozen(before: &ParamStore, after: &ParamStore) -> Result<()> {
    let changed: Vec<String> = before
        .bitwise_diff(after)
        .into_iter()
        .filter(|name| before.id(name).is_some_and(|id| before.get(id).frozen))
        .collect();
    if changed.is_empty() {
        Ok(())
    } else {
        Err(Error::invariant(format!("frozen parameters changed: {}", changed.join(", "))))
    }
}

/// Sites receiving adapters under `exp`, for reporting.
pub fn adapter_sites(exp: &ExpansionConfig) -> Vec<Site> {
    if exp.mlp_adapter {
        vec![Site::Mlp]
    } else if exp.separate_adapters {
        vec![Site::Temporal, Site::Spatial]
    } else {
        Vec::new()
    }
}

/// Files missing from a run directory.
pub fn missing_run_files(dir: &Path) -> Vec<String> {
    RUN_FILES
        .iter()
        .filter(|f| !dir.join(f).is_file())
        .map(|f| f.to_string())
        .collect()
}
