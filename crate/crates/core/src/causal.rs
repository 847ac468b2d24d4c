//! Spatial/temporal relation vectors, relation-guided recovery losses, mapping influence
//! factors, compensation effects and the combined prediction/objective.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datagen::VideoClip;
use crate::error::{Error, Result};
use crate::expansion::{ForwardSpec, Model};
use crate::numerics::{cosine, norm, softmax, Graph, Tensor, Var};
use crate::params::Session;

/// Floor for the denominator of the branch/full probability ratio.
pub const RATIO_FLOOR: f64 = 1e-8;
/// Gradient norms below this make a mapping influence factor zero.
pub const GRAD_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Spatial,
    Temporal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CausalConfig {
    pub relation_recovery: bool,
    pub compensation: bool,
    /// Hybrid (top-K mixed) recovery; when off the naive per-sample loss is used.
    pub hybrid: bool,
    pub k: usize,
    pub k1: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub mu3: f64,
    /// Linear decay of the μ weights to half their value across a task's epochs.
    pub mu_decay: bool,
    pub cache_per_class: usize,
    /// Normalize mixing similarities to sum to one.
    pub normalized_mix: bool,
    /// Keep a sample from retrieving its own cache entry.
    pub exclude_self: bool,
}

impl Default for CausalConfig {
    fn default() -> Self {
        Self {
            relation_recovery: true,
            compensation: true,
            hybrid: true,
            k: 5,
            k1: 5,
            lambda1: 0.2,
            lambda2: 0.2,
            mu1: 0.15,
            mu2: 0.15,
            mu3: 0.15,
            mu_decay: true,
            cache_per_class: 32,
            normalized_mix: false,
            exclude_self: true,
        }
    }
}

impl CausalConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("mu1", self.mu1),
            ("mu2", self.mu2),
            ("mu3", self.mu3),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::invalid(format!("{name} must be a nonnegative number, got {v}")));
            }
        }
        if self.k == 0 || self.k1 == 0 {
            return Err(Error::invalid("K and K1 must be at least 1"));
        }
        if self.cache_per_class == 0 {
            return Err(Error::invalid("cache_per_class must be at least 1"));
        }
        Ok(())
    }

    /// `(μ1, μ2, μ3)` for `epoch` of `epochs`.
    pub fn mu_at(&self, epoch: usize, epochs: usize) -> [f64; 3] {
        let f = mu_schedule(epoch, epochs, self.mu_decay);
        [self.mu1 * f, self.mu2 * f, self.mu3 * f]
    }
}

/// Multiplier on the μ weights: 1 at the first epoch, falling linearly to 0.5 at the last.
pub fn mu_schedule(epoch: usize, epochs: usize, decay: bool) -> f64 {
    if !decay || epochs <= 1 {
        return 1.0;
    }
    1.0 - 0.5 * epoch.min(epochs - 1) as f64 / (epochs - 1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelationVector {
    pub spatial: Vec<f64>,
    pub temporal: Vec<f64>,
}

impl RelationVector {
    pub fn branch(&self, b: Branch) -> &[f64] {
        match b {
            Branch::Spatial => &self.spatial,
            Branch::Temporal => &self.temporal,
        }
    }
}

/// `R_S = [softmax(S)/max(softmax(F), ε), cos(S, T)]` and `R_T` likewise.
pub fn compute_relation(logits_s: &[f64], logits_t: &[f64], logits_f: &[f64]) -> Result<RelationVector> {
    if logits_s.len() != logits_f.len() || logits_t.len() != logits_f.len() || logits_f.is_empty() {
        return Err(Error::shape(format!(
            "relation needs equal-length logits, got {}, {}, {}",
            logits_s.len(),
            logits_t.len(),
            logits_f.len()
        )));
    }
    let (ps, pt, pf) = (softmax(logits_s), softmax(logits_t), softmax(logits_f));
    let c = cosine(logits_s, logits_t).0;
    let ratio = |p: &[f64]| -> Vec<f64> {
        p.iter()
            .zip(&pf)
            .map(|(a, b)| a / b.max(RATIO_FLOOR))
            .chain(std::iter::once(c))
            .collect()
    };
    Ok(RelationVector {
        spatial: ratio(&ps),
        temporal: ratio(&pt),
    })
}

/// Differentiable [`compute_relation`]; returns `(R_S, R_T)` as rank-1 vars.
pub fn relation_vars(g: &mut Graph, logits_s: Var, logits_t: Var, logits_f: Var) -> Result<(Var, Var)> {
    let n = g.value(logits_f).len();
    if g.value(logits_s).len() != n || g.value(logits_t).len() != n {
        return Err(Error::shape("relation needs equal-length logits"));
    }
    let flat = |g: &mut Graph, v: Var| g.reshape(v, &[n]);
    let (ls, lt, lf) = (flat(g, logits_s)?, flat(g, logits_t)?, flat(g, logits_f)?);
    let (ps, pt, pf) = (g.softmax(ls), g.softmax(lt), g.softmax(lf));
    let c = g.cosine(ls, lt)?;
    let rs = g.div_floor(ps, pf, RATIO_FLOOR)?;
    let rt = g.div_floor(pt, pf, RATIO_FLOOR)?;
    Ok((g.concat(&[rs, c], 0)?, g.concat(&[rt, c], 0)?))
}

/// `1 − cos(R_prev, R_cur)`; a zero vector gives 1 and a warning flag.
pub fn naive_recovery_loss(prev: &[f64], cur: &[f64]) -> Result<(f64, bool)> {
    if prev.len() != cur.len() {
        return Err(Error::shape(format!("relations of length {} and {}", prev.len(), cur.len())));
    }
    let (c, zero) = cosine(prev, cur);
    Ok((1.0 - c, zero))
}

/// Graph form of `1 − cos(a, b)`.
pub fn recovery_loss_var(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let c = g.cosine(a, b)?;
    let neg = g.scale(c, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// One sample's record under the previous-task model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub sample_id: u64,
    pub class: usize,
    /// Relation under the previous task's head.
    pub relation: RelationVector,
    /// `Clf_n(S)` and `Clf_n(T)` at task start.
    pub branch_s: Vec<f64>,
    pub branch_t: Vec<f64>,
    /// `Clf_n(F)` at task start.
    pub full: Vec<f64>,
    /// `Clf_{n−1}(F) − Clf_{n−1}(S)` and `Clf_{n−1}(F) − Clf_{n−1}(T)`.
    pub benefit_s: Vec<f64>,
    pub benefit_t: Vec<f64>,
}

impl CacheEntry {
    pub fn branch_logits(&self, b: Branch) -> &[f64] {
        match b {
            Branch::Spatial => &self.branch_s,
            Branch::Temporal => &self.branch_t,
        }
    }

    /// Relation of the task-start model under the current head, the naive recovery anchor.
    pub fn anchor(&self) -> Result<RelationVector> {
        compute_relation(&self.branch_s, &self.branch_t, &self.full)
    }

    pub fn benefit(&self, b: Branch) -> &[f64] {
        match b {
            Branch::Spatial => &self.benefit_s,
            Branch::Temporal => &self.benefit_t,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RelationCache {
    pub task: usize,
    pub capacity_per_class: usize,
    pub entries: Vec<CacheEntry>,
}

impl RelationCache {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Keeps the first `capacity_per_class` records of every class, in input order.
    pub fn from_records(task: usize, capacity_per_class: usize, records: &[CacheEntry]) -> Self {
        let mut per_class: HashMap<usize, usize> = HashMap::new();
        let mut entries = Vec::new();
        for r in records {
            let n = per_class.entry(r.class).or_default();
            if *n < capacity_per_class {
                *n += 1;
                entries.push(r.clone());
            }
        }
        Self {
            task,
            capacity_per_class,
            entries,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub index: usize,
    pub sample_id: u64,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub candidates: Vec<Candidate>,
    pub warning: Option<String>,
}

/// The `k` entries whose `key` vectors are most cosine-similar to `query`, ties broken by
/// lower sample id. `exclude` drops one sample id from consideration.
pub fn select_by<'a, F>(entries: &'a [CacheEntry], query: &[f64], k: usize, exclude: Option<u64>, key: F) -> Result<Selection>
where
    F: Fn(&'a CacheEntry) -> &'a [f64],
{
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut scored = Vec::with_capacity(entries.len());
    for (i, e) in entries.iter().enumerate() {
        if Some(e.sample_id) == exclude {
            continue;
        }
        let v = key(e);
        if v.len() != query.len() {
            return Err(Error::shape(format!("cache vector of length {} vs query {}", v.len(), query.len())));
        }
        scored.push(Candidate {
            index: i,
            sample_id: e.sample_id,
            similarity: cosine(v, query).0,
        });
    }
    if scored.is_empty() {
        return Err(Error::invalid("selection from an empty cache"));
    }
    let warning = (k > scored.len()).then(|| format!("K = {k} exceeds the {} cache entries; using all", scored.len()));
    scored.sort_by(|a, b| {
        b.similarity
            .partial_cmp(&a.similarity)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.sample_id.cmp(&b.sample_id))
    });
    scored.truncate(k);
    Ok(Selection {
        candidates: scored,
        warning,
    })
}

/// Top-K cache entries by relation similarity on `branch`.
pub fn topk_select(cache: &RelationCache, query: &RelationVector, k: usize, branch: Branch, exclude: Option<u64>) -> Result<Selection> {
    select_by(&cache.entries, query.branch(branch), k, exclude, |e| e.relation.branch(branch))
}

/// `Σ_k Clf_n(branch_k)·sim_k`, optionally with similarities normalized to sum to one.
pub fn mix_branch_feature(cache: &RelationCache, candidates: &[Candidate], branch: Branch, normalized: bool) -> Vec<f64> {
    let Some(first) = candidates.first() else {
        return Vec::new();
    };
    let width = cache.entries[first.index].branch_logits(branch).len();
    let total: f64 = candidates.iter().map(|c| c.similarity).sum();
    let mut out = vec![0.0; width];
    for c in candidates {
        let w = if normalized && total != 0.0 { c.similarity / total } else { c.similarity };
        for (o, v) in out.iter_mut().zip(cache.entries[c.index].branch_logits(branch)) {
            *o += w * v;
        }
    }
    out
}

/// `(L_S, L_T)` = `1 − cos(R^K, R)` per branch, where `R^K` is the relation of the mixed
/// branch logits against the current full logits.
pub fn hybrid_recovery_loss(
    g: &mut Graph,
    mixed_s: &[f64],
    mixed_t: &[f64],
    logits_s: Var,
    logits_t: Var,
    logits_f: Var,
) -> Result<(Var, Var)> {
    let ms = g.constant(Tensor::vector(mixed_s.to_vec()));
    let mt = g.constant(Tensor::vector(mixed_t.to_vec()));
    let (rks, rkt) = relation_vars(g, ms, mt, logits_f)?;
    let (rs, rt) = relation_vars(g, logits_s, logits_t, logits_f)?;
    Ok((recovery_loss_var(g, rks, rs)?, recovery_loss_var(g, rkt, rt)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CompensationFactors {
    pub alpha_s: f64,
    pub alpha_t: f64,
    pub norm_s: f64,
    pub norm_t: f64,
    pub cosine: f64,
}

/// `α_T = (‖g_S‖/‖g_T‖)·cos(g_S, g_T)`; zero with a warning when `‖g_T‖ < ε`.
pub fn mapping_influence_factor(grad_s: &[f64], grad_t: &[f64]) -> Result<(f64, Option<String>)> {
    if grad_s.len() != grad_t.len() {
        return Err(Error::shape(format!("gradients of length {} and {}", grad_s.len(), grad_t.len())));
    }
    let (ns, nt) = (norm(grad_s), norm(grad_t));
    if nt < GRAD_EPS {
        return Ok((0.0, Some(format!("reference gradient norm {nt:e} below {GRAD_EPS:e}; factor set to 0"))));
    }
    Ok(((ns / nt) * cosine(grad_s, grad_t).0, None))
}

/// Both factors from the spatial- and temporal-increment gradients.
pub fn compensation_factors(grad_s: &[f64], grad_t: &[f64]) -> Result<(CompensationFactors, Vec<String>)> {
    let (alpha_t, w1) = mapping_influence_factor(grad_s, grad_t)?;
    let (alpha_s, w2) = mapping_influence_factor(grad_t, grad_s)?;
    Ok((
        CompensationFactors {
            alpha_s,
            alpha_t,
            norm_s: norm(grad_s),
            norm_t: norm(grad_t),
            cosine: cosine(grad_s, grad_t).0,
        },
        w1.into_iter().chain(w2).collect(),
    ))
}

/// `E = α·Σ_{k≤K1} Clf_n(branch_k)·sim_k` over the `K1` entries whose `branch` benefit
/// vectors are most similar to `benefit`. An empty cache yields `None` (no effect).
pub fn compensation_effect(
    cache: &RelationCache,
    benefit: &[f64],
    alpha: f64,
    k1: usize,
    branch: Branch,
    exclude: Option<u64>,
) -> Result<(Option<Vec<f64>>, Option<String>)> {
    if cache.is_empty() {
        return Ok((None, Some("empty relation cache; compensation skipped".into())));
    }
    let sel = select_by(&cache.entries, benefit, k1, exclude, |e| e.benefit(branch))?;
    let mut e = mix_branch_feature(cache, &sel.candidates, branch, false);
    e.iter_mut().for_each(|v| *v *= alpha);
    Ok((Some(e), sel.warning))
}

/// `Ŷ = Ŷ′ + λ1·E_S + λ2·E_T`.
pub fn combined_prediction(y: &[f64], e_s: &[f64], e_t: &[f64], lambda1: f64, lambda2: f64) -> Result<Vec<f64>> {
    if e_s.len() != y.len() || e_t.len() != y.len() {
        return Err(Error::shape(format!(
            "prediction of length {} with effects of length {} and {}",
            y.len(),
            e_s.len(),
            e_t.len()
        )));
    }
    Ok(y.iter()
        .zip(e_s)
        .zip(e_t)
        .map(|((a, s), t)| a + lambda1 * s + lambda2 * t)
        .collect())
}

/// `L_CE + μ1·L_D + μ2·L_T + μ3·L_S`.
pub fn total_loss(l_ce: f64, l_d: f64, l_t: f64, l_s: f64, mu: [f64; 3]) -> Result<f64> {
    if mu.iter().any(|m| !(*m >= 0.0)) {
        return Err(Error::invalid(format!("negative loss weight in {mu:?}")));
    }
    Ok(l_ce + mu[0] * l_d + mu[1] * l_t + mu[2] * l_s)
}

/// Previous-model records of `clips` for task `task ≥ 1`, computed with the task-start
/// model (current adapters still zero).
pub fn relation_records(model: &Model, task: usize, clips: &[&VideoClip]) -> Result<Vec<CacheEntry>> {
    if task == 0 {
        return Err(Error::invalid("relation records need a previous task"));
    }
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let mut s = Session::new(&model.store, false);
        let fb = model.forward(&mut s, clip, &ForwardSpec::full(task))?;
        let prev_s = model.heads.classify(&mut s, fb.spatial, task - 1)?;
        let prev_t = model.heads.classify(&mut s, fb.temporal, task - 1)?;
        let cur_s = model.heads.classify(&mut s, fb.spatial, task)?;
        let cur_t = model.heads.classify(&mut s, fb.temporal, task)?;
        let v = |x: Var| s.graph.value(x).data().to_vec();
        let (ps, pt, pf) = (v(prev_s), v(prev_t), v(fb.logits[task - 1]));
        let relation = compute_relation(&ps, &pt, &pf)?;
        let diff = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        out.push(CacheEntry {
            sample_id: clip.sample_id,
            class: clip.label,
            relation,
            branch_s: v(cur_s),
            branch_t: v(cur_t),
            full: v(fb.logits[task]),
            benefit_s: diff(&pf, &ps),
            benefit_t: diff(&pf, &pt),
        });
    }
    Ok(out)
}

/// CSV dump of cached relations: `sample_id,task,class,r_s_0..,r_t_0..`.
pub fn relation_csv(cache: &RelationCache) -> String {
    let width = cache.entries.first().map_or(0, |e| e.relation.spatial.len());
    let mut out = String::from("sample_id,task,class");
    for i in 0..width {
        let _ = write!(out, ",r_s_{i}");
    }
    for i in 0..width {
        let _ = write!(out, ",r_t_{i}");
    }
    out.push('\n');
    for e in &cache.entries {
        let _ = write!(out, "{},{},{}", e.sample_id, cache.task, e.class);
        for v in e.relation.spatial.iter().chain(&e.relation.temporal) {
            let _ = write!(out, ",{}", crate::fmt_sig(*v));
        }
        out.push('\n');
    }
    out
}
