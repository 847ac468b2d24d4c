//! Spatial/temporal increment and memorization probes: KL alignment objectives between
//! forwards with different current-task adapter sets, their gradients, and the pairwise
//! gradient cosines tracked over training.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::causal::Branch;
use crate::datagen::VideoClip;
use crate::error::{Error, Result};
use crate::expansion::{ForwardSpec, Model};
use crate::numerics::{cosine, norm, Var};
use crate::params::{ParamId, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterSet {
    None,
    SpatialOnly,
    TemporalOnly,
    Both,
}

impl AdapterSet {
    pub fn spec(self, task: usize) -> ForwardSpec {
        let (spatial, temporal) = match self {
            AdapterSet::None => (false, false),
            AdapterSet::SpatialOnly => (true, false),
            AdapterSet::TemporalOnly => (false, true),
            AdapterSet::Both => (true, true),
        };
        ForwardSpec {
            upto: task,
            spatial,
            temporal,
            cross_task: true,
        }
    }

    fn of_branch(b: Branch) -> Self {
        match b {
            Branch::Spatial => AdapterSet::SpatialOnly,
            Branch::Temporal => AdapterSet::TemporalOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Increment,
    Memorization,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub direction: Direction,
    pub branch: Branch,
}

impl ProbeConfig {
    pub const INC_S: ProbeConfig = ProbeConfig {
        direction: Direction::Increment,
        branch: Branch::Spatial,
    };
    pub const INC_T: ProbeConfig = ProbeConfig {
        direction: Direction::Increment,
        branch: Branch::Temporal,
    };
    pub const MEM_S: ProbeConfig = ProbeConfig {
        direction: Direction::Memorization,
        branch: Branch::Spatial,
    };
    pub const MEM_T: ProbeConfig = ProbeConfig {
        direction: Direction::Memorization,
        branch: Branch::Temporal,
    };

    /// Trainable side of the alignment.
    pub fn source(&self) -> AdapterSet {
        AdapterSet::of_branch(self.branch)
    }

    /// Fixed side: no current adapters for increment, both for memorization.
    pub fn target(&self) -> AdapterSet {
        match self.direction {
            Direction::Increment => AdapterSet::None,
            Direction::Memorization => AdapterSet::Both,
        }
    }

    pub fn id(&self) -> &'static str {
        match (self.direction, self.branch) {
            (Direction::Increment, Branch::Spatial) => "inc_s",
            (Direction::Increment, Branch::Temporal) => "inc_t",
            (Direction::Memorization, Branch::Spatial) => "mem_s",
            (Direction::Memorization, Branch::Temporal) => "mem_t",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyzerConfig {
    pub enabled: bool,
    /// Epochs between curve points.
    pub cadence: usize,
    pub probe_batch: usize,
    /// Swap the KL arguments: `KL(source ‖ target)`.
    pub kl_reversed: bool,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            cadence: 1,
            probe_batch: 64,
            kl_reversed: false,
        }
    }
}

fn current_task(model: &Model) -> Result<usize> {
    match model.current_task() {
        Some(t) if t >= 1 && model.expansion.uses_adapters() => Ok(t),
        _ => Err(Error::invalid("probes need an adapter-expanded task n ≥ 1")),
    }
}

fn target_logits(model: &Model, clip: &VideoClip, set: AdapterSet, task: usize) -> Result<crate::numerics::Tensor> {
    let mut s = Session::new(&model.store, false);
    let fb = model.forward(&mut s, clip, &set.spec(task))?;
    Ok(s.graph.value(fb.logits[task]).clone())
}

/// Batch-mean KL between the fixed target forward and the trainable source forward,
/// both read through the current task's head.
pub fn probe_objective(model: &Model, s: &mut Session, clips: &[&VideoClip], cfg: ProbeConfig, kl_reversed: bool) -> Result<Var> {
    if clips.is_empty() {
        return Err(Error::invalid("probe over an empty batch"));
    }
    let task = current_task(model)?;
    let mut terms = Vec::with_capacity(clips.len());
    for clip in clips {
        let target = target_logits(model, clip, cfg.target(), task)?;
        let t = s.graph.constant(target);
        let fb = model.forward(s, clip, &cfg.source().spec(task))?;
        let src = fb.logits[task];
        terms.push(if kl_reversed {
            s.graph.kl_div(src, t)?
        } else {
            s.graph.kl_div(t, src)?
        });
    }
    let all = s.graph.concat(&terms, 0)?;
    Ok(s.graph.mean(all))
}

/// Flattened gradient over the current trainable set, in store order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientSnapshot {
    pub probe: String,
    pub step: usize,
    pub norm: f64,
    pub values: Vec<f64>,
}

fn trainable(model: &Model) -> Result<Vec<ParamId>> {
    let ids = model.store.trainable();
    if ids.is_empty() {
        return Err(Error::invalid("probe gradient over an empty trainable set"));
    }
    Ok(ids)
}

pub fn probe_gradient(model: &Model, clips: &[&VideoClip], cfg: ProbeConfig, kl_reversed: bool, step: usize) -> Result<GradientSnapshot> {
    let ids = trainable(model)?;
    let mut s = Session::new(&model.store, true);
    let loss = probe_objective(model, &mut s, clips, cfg, kl_reversed)?;
    s.graph.backward(loss)?;
    let values = model.store.flatten(&ids, &s.grads());
    Ok(GradientSnapshot {
        probe: cfg.id().into(),
        step,
        norm: norm(&values),
        values,
    })
}

/// The four probe gradients `[inc_S, inc_T, mem_S, mem_T]` and objective values, sharing
/// target forwards between probes.
pub fn probe_all(model: &Model, clips: &[&VideoClip], kl_reversed: bool, step: usize) -> Result<([GradientSnapshot; 4], [f64; 4])> {
    if clips.is_empty() {
        return Err(Error::invalid("probe over an empty batch"));
    }
    let task = current_task(model)?;
    let ids = trainable(model)?;
    let n = model.store.count(&ids);
    let mut sums = [vec![0.0; n], vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    let mut objectives = [0.0; 4];
    let order = [ProbeConfig::INC_S, ProbeConfig::INC_T, ProbeConfig::MEM_S, ProbeConfig::MEM_T];
    let inv = 1.0 / clips.len() as f64;
    for clip in clips {
        let none = target_logits(model, clip, AdapterSet::None, task)?;
        let both = target_logits(model, clip, AdapterSet::Both, task)?;
        for branch in [Branch::Spatial, Branch::Temporal] {
            let mut s = Session::new(&model.store, true);
            let fb = model.forward(&mut s, clip, &AdapterSet::of_branch(branch).spec(task))?;
            let src = fb.logits[task];
            for (k, cfg) in order.iter().enumerate() {
                if cfg.branch != branch {
                    continue;
                }
                let target = match cfg.target() {
                    AdapterSet::None => none.clone(),
                    _ => both.clone(),
                };
                let t = s.graph.constant(target);
                let kl = if kl_reversed { s.graph.kl_div(src, t)? } else { s.graph.kl_div(t, src)? };
                let l = s.graph.scale(kl, inv);
                objectives[k] += s.graph.value(l).item();
                s.graph.zero_grad();
                s.graph.backward(l)?;
                let g = model.store.flatten(&ids, &s.grads());
                sums[k].iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
    }
    let snaps = sums.map(|v| (norm(&v), v));
    let mut i = 0;
    let snaps = snaps.map(|(nm, values)| {
        let s = GradientSnapshot {
            probe: order[i].id().into(),
            step,
            norm: nm,
            values,
        };
        i += 1;
        s
    });
    Ok((snaps, objectives))
}

/// Cosine magnitude at or below which a pair is labeled neutral.
pub const NEUTRAL_BAND: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Cooperation,
    Conflict,
    Neutral,
}

impl Relation {
    pub fn of(c: f64) -> Self {
        if c.abs() <= NEUTRAL_BAND {
            Relation::Neutral
        } else if c > 0.0 {
            Relation::Cooperation
        } else {
            Relation::Conflict
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Relation::Cooperation => "cooperation",
            Relation::Conflict => "conflict",
            Relation::Neutral => "neutral",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "cooperation" => Some(Relation::Cooperation),
            "conflict" => Some(Relation::Conflict),
            "neutral" => Some(Relation::Neutral),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    /// `(inc_S, inc_T)`, `(inc_S, mem_T)`, `(inc_T, mem_S)`, `(mem_S, mem_T)`.
    pub cosines: [f64; 4],
    pub labels: [Relation; 4],
}

/// The four tracked cosines from snapshots ordered `[inc_S, inc_T, mem_S, mem_T]`.
pub fn pairwise_cosines(snaps: &[GradientSnapshot; 4]) -> Result<(CurvePoint, Vec<String>)> {
    let len = snaps[0].values.len();
    if snaps.iter().any(|s| s.values.len() != len) {
        return Err(Error::shape("gradient snapshots of different lengths"));
    }
    let pairs = [(0, 1), (0, 3), (1, 2), (2, 3)];
    let mut warnings = Vec::new();
    let mut cosines = [0.0; 4];
    for (k, (a, b)) in pairs.into_iter().enumerate() {
        let (c, zero) = cosine(&snaps[a].values, &snaps[b].values);
        if zero {
            warnings.push(format!("zero gradient in pair ({}, {}); cosine taken as 0", snaps[a].probe, snaps[b].probe));
        }
        cosines[k] = c;
    }
    Ok((
        CurvePoint {
            step: snaps[0].step,
            cosines,
            labels: cosines.map(Relation::of),
        },
        warnings,
    ))
}

pub const CURVE_SCHEMA: &str = "# schema: relation_curve/1";
pub const CURVE_HEADER: &str = "step,cos_inc_inc,cos_incS_memT,cos_incT_memS,cos_mem_mem,label_inc_inc,label_incS_memT,label_incT_memS,label_mem_mem";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RelationCurve {
    pub points: Vec<CurvePoint>,
}

impl RelationCurve {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CURVE_SCHEMA}\n{CURVE_HEADER}\n");
        for p in &self.points {
            let _ = write!(out, "{}", p.step);
            for c in p.cosines {
                let _ = write!(out, ",{}", crate::fmt_sig(c));
            }
            for l in p.labels {
                let _ = write!(out, ",{}", l.name());
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::Format {
            path: "relation curve".into(),
            reason: format!("line {line}: {why}"),
        };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.starts_with('#'));
        match lines.next() {
            Some((_, h)) if h == CURVE_HEADER => {}
            Some((i, _)) => return Err(bad(i + 1, "unexpected header")),
            None => return Err(bad(1, "missing header")),
        }
        let mut points = Vec::new();
        for (i, line) in lines {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 9 {
                return Err(bad(i + 1, "expected 9 fields"));
            }
            let step = f[0].parse().map_err(|_| bad(i + 1, "bad step"))?;
            let mut cosines = [0.0; 4];
            let mut labels = [Relation::Neutral; 4];
            for k in 0..4 {
                cosines[k] = f[1 + k].parse().map_err(|_| bad(i + 1, "bad cosine"))?;
                labels[k] = Relation::parse(f[5 + k]).ok_or_else(|| bad(i + 1, "bad label"))?;
            }
            points.push(CurvePoint { step, cosines, labels });
        }
        Ok(Self { points })
    }
}

/// Records curve points every `cadence` calls.
#[derive(Debug, Clone)]
pub struct Tracker {
    pub cadence: usize,
    pub kl_reversed: bool,
    pub curve: RelationCurve,
    pub warnings: Vec<String>,
    calls: usize,
}

impl Tracker {
    pub fn new(cadence: usize, kl_reversed: bool) -> Result<Self> {
        if cadence == 0 {
            return Err(Error::invalid("tracking cadence must be at least 1"));
        }
        Ok(Self {
            cadence,
            kl_reversed,
            curve: RelationCurve::default(),
            warnings: Vec::new(),
            calls: 0,
        })
    }

    /// Probes the model when the cadence is due and returns the snapshots taken.
    pub fn observe(&mut self, model: &Model, probe: &[&VideoClip], step: usize) -> Result<Option<[GradientSnapshot; 4]>> {
        let due = self.calls.is_multiple_of(self.cadence);
        self.calls += 1;
        if !due {
            return Ok(None);
        }
        let (snaps, _) = probe_all(model, probe, self.kl_reversed, step)?;
        let (point, w) = pairwise_cosines(&snaps)?;
        self.warnings.extend(w);
        self.curve.points.push(point);
        Ok(Some(snaps))
    }
}
