//! Deterministic synthetic videos: textured sprites driven by motion programs, with
//! class families that separate spatial from temporal discriminability.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SplitMix64 finalizer; combines seeds without correlation between neighbours.
pub fn mix_seed(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn rng_for(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Grayscale clip, frames stacked row-major as `[frames, height, width]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub label: usize,
    pub sample_id: u64,
}

impl VideoClip {
    pub fn frame(&self, t: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        Self {
            frames,
            height,
            width,
            pixels: vec![0.0; frames * height * width],
            label: 0,
            sample_id: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    LeftToRight,
    RightToLeft,
    UpToDown,
    Rotate,
    ScalePulse,
    Static,
}

/// Sprite placement for one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    pub angle: f64,
    pub scale: f64,
}

/// Per-sample randomness shared by every motion program, so two classes that share a
/// seed share start position and phase.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jitter {
    pub start: f64,
    pub lane: f64,
    pub phase: f64,
}

pub const STEP_PX: f64 = 2.0;

impl MotionKind {
    pub fn all() -> [MotionKind; 6] {
        use MotionKind::*;
        [LeftToRight, RightToLeft, UpToDown, Rotate, ScalePulse, Static]
    }

    /// Sprite pose for each frame. Left→right and right→left traces are exact time
    /// reversals of each other for the same jitter.
    pub fn trace(self, frames: usize, size: usize, jitter: Jitter) -> Vec<Pose> {
        let centre = size as f64 / 2.0;
        (0..frames)
            .map(|t| {
                let rev = (frames - 1 - t) as f64;
                let t = t as f64;
                let base = Pose {
                    x: centre,
                    y: jitter.lane,
                    angle: 0.0,
                    scale: 1.0,
                };
                match self {
                    MotionKind::LeftToRight => Pose {
                        x: jitter.start + STEP_PX * t,
                        ..base
                    },
                    MotionKind::RightToLeft => Pose {
                        x: jitter.start + STEP_PX * rev,
                        ..base
                    },
                    MotionKind::UpToDown => Pose {
                        x: jitter.lane,
                        y: jitter.start + STEP_PX * t,
                        ..base
                    },
                    MotionKind::Rotate => Pose {
                        angle: jitter.phase + t * std::f64::consts::PI / 8.0,
                        ..base
                    },
                    MotionKind::ScalePulse => Pose {
                        scale: 1.0
                            + 0.3
                                * (jitter.phase
                                    + 2.0 * std::f64::consts::PI * t / frames as f64)
                                    .sin(),
                        ..base
                    },
                    MotionKind::Static => base,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Shape {
    Square,
    Disk,
    Diamond,
    Cross,
    Ring,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Fill {
    Solid,
    Stripes,
    Checker,
}

const SHAPES: [Shape; 5] = [Shape::Square, Shape::Disk, Shape::Diamond, Shape::Cross, Shape::Ring];
const FILLS: [Fill; 3] = [Fill::Solid, Fill::Stripes, Fill::Checker];

/// Sprite radius in pixels at scale 1.
pub const SPRITE_RADIUS: f64 = 5.0;

/// Texture = shape × fill pattern. Ids cycle through shapes first.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Texture {
    shape: Shape,
    fill: Fill,
    intensity: f64,
}

impl Texture {
    fn from_id(id: usize) -> Self {
        let shape = SHAPES[id % SHAPES.len()];
        let fill = FILLS[(id / SHAPES.len()) % FILLS.len()];
        // Bin-centred intensities keep histogram comparisons insensitive to noise.
        let level = 10 + (id % 3) as u32 * 2;
        Self {
            shape,
            fill,
            intensity: (level as f64 + 0.5) / 16.0,
        }
    }

    /// Intensity at sprite-local coordinates in `[-1, 1]²`, or `None` outside the shape.
    fn sample(&self, u: f64, v: f64) -> Option<f64> {
        let inside = match self.shape {
            Shape::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Shape::Disk => u * u + v * v <= 0.9,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Cross => (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0),
            Shape::Ring => {
                let r2 = u * u + v * v;
                (0.3..=1.0).contains(&r2)
            }
        };
        if !inside {
            return None;
        }
        let lit = match self.fill {
            Fill::Solid => true,
            Fill::Stripes => ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
            Fill::Checker => (((u + 1.0) * 2.0).floor() as i64 + ((v + 1.0) * 2.0).floor() as i64) % 2 == 0,
        };
        Some(if lit { self.intensity } else { self.intensity * 0.5 })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticClassSpec {
    pub class_id: usize,
    pub texture_id: usize,
    pub motion: MotionKind,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RenderConfig {
    pub frames: usize,
    pub size: usize,
    pub noise: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            size: 32,
            noise: 0.02,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 256.0).round().min(255.0) / 256.0
}

pub fn sample_jitter(rng: &mut ChaCha8Rng, size: usize) -> Jitter {
    let span = STEP_PX * 7.0;
    let margin = SPRITE_RADIUS + 1.0;
    let max_start = (size as f64 - margin - span).max(margin);
    let centre = size as f64 / 2.0;
    Jitter {
        start: rng.gen_range(margin.floor() as i64..=max_start.floor() as i64) as f64,
        lane: (centre + rng.gen_range(-2i64..=2) as f64).round(),
        phase: rng.gen_range(0.0..std::f64::consts::TAU),
    }
}

/// Renders a clip. Deterministic in `(spec, seed)`; jitter and noise depend on the seed
/// only, so classes rendered with the same seed share them.
pub fn render_clip(spec: &SyntheticClassSpec, seed: u64, cfg: &RenderConfig) -> VideoClip {
    let mut rng = rng_for(mix_seed(seed, 0x5EED));
    let jitter = sample_jitter(&mut rng, cfg.size);
    let texture = Texture::from_id(spec.texture_id);
    let poses = spec.motion.trace(cfg.frames, cfg.size, jitter);
    let n = cfg.size * cfg.size;
    let mut pixels = vec![0.0; cfg.frames * n];
    for (t, pose) in poses.iter().enumerate() {
        let (s, c) = pose.angle.sin_cos();
        let radius = SPRITE_RADIUS * pose.scale;
        for py in 0..cfg.size {
            for px in 0..cfg.size {
                let dx = px as f64 + 0.5 - pose.x;
                let dy = py as f64 + 0.5 - pose.y;
                let u = (c * dx + s * dy) / radius;
                let v = (-s * dx + c * dy) / radius;
                let base = texture.sample(u, v).unwrap_or(0.0);
                let noise = if cfg.noise > 0.0 {
                    cfg.noise * standard_normal(&mut rng)
                } else {
                    0.0
                };
                pixels[t * n + py * cfg.size + px] = quantize(base + noise);
            }
        }
    }
    VideoClip {
        frames: cfg.frames,
        height: cfg.size,
        width: cfg.size,
        pixels,
        label: spec.class_id,
        sample_id: seed,
    }
}

fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; one draw per call keeps the stream layout simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// `n_pairs` temporal pairs (shared texture, opposite horizontal motion) followed by
/// `n_pairs` spatial pairs (shared motion, different texture).
pub fn make_confusable_pairs(n_pairs: usize) -> Result<Vec<(SyntheticClassSpec, SyntheticClassSpec)>> {
    if n_pairs == 0 {
        return Err(Error::invalid("n_pairs must be at least 1"));
    }
    let mut next = 0;
    let mut spec = |texture_id, motion| {
        let s = SyntheticClassSpec {
            class_id: next,
            texture_id,
            motion,
        };
        next += 1;
        s
    };
    let mut pairs = Vec::with_capacity(2 * n_pairs);
    for k in 0..n_pairs {
        pairs.push((spec(k, MotionKind::LeftToRight), spec(k, MotionKind::RightToLeft)));
    }
    for k in 0..n_pairs {
        let motion = MotionKind::all()[k % MotionKind::all().len()];
        pairs.push((spec(2 * k, motion), spec(2 * k + 1, motion)));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub textures: usize,
    pub motions: Vec<MotionKind>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub render: RenderConfig,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            textures: 10,
            motions: vec![MotionKind::LeftToRight, MotionKind::RightToLeft],
            train_per_class: 40,
            test_per_class: 10,
            render: RenderConfig::default(),
            seed: 42,
        }
    }
}

/// Test seeds start here; train seeds are `0..train_per_class`.
pub const TEST_SEED_BASE: u64 = 1 << 32;

impl CorpusConfig {
    pub fn class_count(&self) -> usize {
        self.textures * self.motions.len()
    }

    /// Class `texture·M + m` pairs texture `texture` with motion `m`, so consecutive
    /// classes with the same texture form temporal pairs.
    pub fn class_specs(&self) -> Vec<SyntheticClassSpec> {
        let m = self.motions.len();
        (0..self.class_count())
            .map(|c| SyntheticClassSpec {
                class_id: c,
                texture_id: c / m,
                motion: self.motions[c % m],
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.textures == 0 || self.motions.is_empty() {
            return Err(Error::invalid("corpus needs at least one texture and one motion"));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("corpus needs train and test samples for every class"));
        }
        let span = STEP_PX * (self.render.frames.saturating_sub(1)) as f64;
        if self.render.size as f64 <= 2.0 * (SPRITE_RADIUS + 1.0) + span.min(14.0) {
            return Err(Error::invalid(format!(
                "frame size {} too small for the sprite trajectories",
                self.render.size
            )));
        }
        Ok(())
    }

    /// Seed of sample `index` of `class` in the given split. Train and test draw from
    /// disjoint ranges.
    pub fn sample_seed(&self, class: usize, index: usize, test: bool) -> u64 {
        let local = if test { TEST_SEED_BASE + index as u64 } else { index as u64 };
        mix_seed(mix_seed(self.seed, class as u64), local)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub specs: Vec<SyntheticClassSpec>,
    pub train: Vec<VideoClip>,
    pub test: Vec<VideoClip>,
}

impl Corpus {
    pub fn generate(config: &CorpusConfig) -> Result<Self> {
        config.validate()?;
        let specs = config.class_specs();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for spec in &specs {
            for i in 0..config.train_per_class {
                let mut clip = render_clip(spec, config.sample_seed(spec.class_id, i, false), &config.render);
                clip.sample_id = (spec.class_id * config.train_per_class + i) as u64;
                train.push(clip);
            }
            for i in 0..config.test_per_class {
                let mut clip = render_clip(spec, config.sample_seed(spec.class_id, i, true), &config.render);
                clip.sample_id = (specs.len() * config.train_per_class + spec.class_id * config.test_per_class + i) as u64;
                test.push(clip);
            }
        }
        Ok(Self {
            config: config.clone(),
            specs,
            train,
            test,
        })
    }

    pub fn train_of(&self, classes: &[usize]) -> Vec<&VideoClip> {
        self.train.iter().filter(|c| classes.contains(&c.label)).collect()
    }

    pub fn test_of(&self, classes: &[usize]) -> Vec<&VideoClip> {
        self.test.iter().filter(|c| classes.contains(&c.label)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitStyle {
    Balanced,
    HeadHeavy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub style: SplitStyle,
    pub tasks: Vec<Vec<usize>>,
}

impl TaskStream {
    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn seen_classes(&self, upto: usize) -> Vec<usize> {
        self.tasks[..=upto].iter().flatten().copied().collect()
    }

    /// Position of `class` in the concatenation of all task heads.
    pub fn global_index(&self, class: usize) -> Option<usize> {
        self.tasks.iter().flatten().position(|&c| c == class)
    }

    pub fn task_of(&self, class: usize) -> Option<usize> {
        self.tasks.iter().position(|t| t.contains(&class))
    }
}

/// Splits `classes` into `n_tasks` disjoint tasks after a seeded shuffle. Balanced
/// splits need an exact division; head-heavy splits put roughly half the classes in
/// task 0 and divide the rest evenly, with any remainder going to task 0.
pub fn make_task_stream(classes: &[usize], n_tasks: usize, style: SplitStyle, seed: u64) -> Result<TaskStream> {
    if n_tasks == 0 {
        return Err(Error::invalid("need at least one task"));
    }
    let mut dedup = classes.to_vec();
    dedup.sort_unstable();
    dedup.dedup();
    if dedup.len() != classes.len() {
        return Err(Error::invalid("class list contains duplicates"));
    }
    let mut order = classes.to_vec();
    let mut rng = rng_for(mix_seed(seed, 0x7A5C));
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let n = order.len();
    let sizes: Vec<usize> = match style {
        SplitStyle::Balanced => {
            if !n.is_multiple_of(n_tasks) {
                return Err(Error::invalid(format!(
                    "{n} classes do not split evenly into {n_tasks} tasks (remainder {})",
                    n % n_tasks
                )));
            }
            vec![n / n_tasks; n_tasks]
        }
        SplitStyle::HeadHeavy => {
            if n < 2 {
                return Err(Error::invalid("head-heavy split needs at least 2 classes"));
            }
            if n_tasks == 1 {
                vec![n]
            } else {
                let per = (n - n.div_ceil(2)) / (n_tasks - 1);
                if per == 0 {
                    return Err(Error::invalid(format!(
                        "{n} classes leave no classes for {} incremental tasks",
                        n_tasks - 1
                    )));
                }
                let mut sizes = vec![per; n_tasks];
                sizes[0] = n - per * (n_tasks - 1);
                sizes
            }
        }
    };
    let mut tasks = Vec::with_capacity(n_tasks);
    let mut off = 0;
    for s in sizes {
        tasks.push(order[off..off + s].to_vec());
        off += s;
    }
    Ok(TaskStream { style, tasks })
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusIndex {
    version: u32,
    config: CorpusConfig,
    classes: Vec<SyntheticClassSpec>,
    clip_shape: [usize; 3],
    splits: Vec<SplitIndex>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SplitIndex {
    split: String,
    class_id: usize,
    file: String,
    sample_ids: Vec<u64>,
    seeds: Vec<u64>,
}

const CORPUS_VERSION: u32 = 1;

/// Writes one raw little-endian `f32` file per (split, class) plus `index.json`.
/// Pixel values are multiples of 1/256, so the `f32` encoding is lossless.
pub fn export_corpus(corpus: &Corpus, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let cfg = &corpus.config;
    let mut splits = Vec::new();
    for (name, clips, per, test) in [
        ("train", &corpus.train, cfg.train_per_class, false),
        ("test", &corpus.test, cfg.test_per_class, true),
    ] {
        for spec in &corpus.specs {
            let file = format!("{name}_class{:03}.f32", spec.class_id);
            let mut buf = Vec::new();
            let mut ids = Vec::new();
            for clip in clips.iter().filter(|c| c.label == spec.class_id) {
                ids.push(clip.sample_id);
                for v in &clip.pixels {
                    buf.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
            std::fs::File::create(dir.join(&file))?.write_all(&buf)?;
            splits.push(SplitIndex {
                split: name.into(),
                class_id: spec.class_id,
                file,
                sample_ids: ids,
                seeds: (0..per).map(|i| cfg.sample_seed(spec.class_id, i, test)).collect(),
            });
        }
    }
    let index = CorpusIndex {
        version: CORPUS_VERSION,
        config: cfg.clone(),
        classes: corpus.specs.clone(),
        clip_shape: [cfg.render.frames, cfg.render.size, cfg.render.size],
        splits,
    };
    let mut f = std::fs::File::create(dir.join("index.json"))?;
    serde_json::to_writer_pretty(&mut f, &index)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn import_corpus(dir: &Path) -> Result<Corpus> {
    let index_path = dir.join("index.json");
    let index: CorpusIndex = serde_json::from_reader(std::fs::File::open(&index_path)?)?;
    if index.version != CORPUS_VERSION {
        return Err(Error::Format {
            path: index_path.display().to_string(),
            reason: format!("unsupported corpus version {}", index.version),
        });
    }
    let [frames, h, w] = index.clip_shape;
    let clip_len = frames * h * w;
    let mut train = Vec::new();
    let mut test = Vec::new();
    for s in &index.splits {
        let path = dir.join(&s.file);
        let bytes = std::fs::read(&path)?;
        if bytes.len() != s.sample_ids.len() * clip_len * 4 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("expected {} clips of {clip_len} floats", s.sample_ids.len()),
            });
        }
        for (k, id) in s.sample_ids.iter().enumerate() {
            let chunk = &bytes[k * clip_len * 4..(k + 1) * clip_len * 4];
            let pixels = chunk
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            let clip = VideoClip {
                frames,
                height: h,
                width: w,
                pixels,
                label: s.class_id,
                sample_id: *id,
            };
            if s.split == "test" {
                test.push(clip);
            } else {
                train.push(clip);
            }
        }
    }
    let key = |c: &VideoClip| c.sample_id;
    train.sort_by_key(key);
    test.sort_by_key(key);
    Ok(Corpus {
        config: index.config,
        specs: index.classes,
        train,
        test,
    })
}

/// Normalized intensity histogram of one frame.
pub fn frame_histogram(frame: &[f64], bins: usize) -> Vec<f64> {
    let mut h = vec![0.0; bins];
    for v in frame {
        let b = ((v * bins as f64) as usize).min(bins - 1);
        h[b] += 1.0;
    }
    h.iter_mut().for_each(|x| *x /= frame.len() as f64);
    h
}

/// Centroid of pixels brighter than `threshold`, as `(x, y)`.
pub fn bright_centroid(frame: &[f64], width: usize, threshold: f64) -> Option<(f64, f64)> {
    let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
    for (i, v) in frame.iter().enumerate() {
        if *v > threshold {
            sx += (i % width) as f64 + 0.5;
            sy += (i / width) as f64 + 0.5;
            n += 1.0;
        }
    }
    (n > 0.0).then(|| (sx / n, sy / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(texture_id: usize, motion: MotionKind) -> SyntheticClassSpec {
        SyntheticClassSpec {
            class_id: 0,
            texture_id,
            motion,
        }
    }

    #[test]
    fn render_is_deterministic_and_in_range() {
        let cfg = RenderConfig::default();
        let a = render_clip(&spec(3, MotionKind::Rotate), 17, &cfg);
        let b = render_clip(&spec(3, MotionKind::Rotate), 17, &cfg);
        assert_eq!(a, b);
        assert_eq!(a.pixels.len(), 8 * 32 * 32);
        assert!(a.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        assert!(a.pixels.iter().all(|v| (v * 256.0).fract() == 0.0));
    }

    #[test]
    fn static_program_gives_identical_frames() {
        let cfg = RenderConfig {
            noise: 0.0,
            ..RenderConfig::default()
        };
        let clip = render_clip(&spec(1, MotionKind::Static), 5, &cfg);
        for t in 1..clip.frames {
            assert_eq!(clip.frame(0), clip.frame(t));
        }
    }

    #[test]
    fn horizontal_programs_are_time_reversed() {
        let cfg = RenderConfig {
            noise: 0.0,
            ..RenderConfig::default()
        };
        let lr = render_clip(&spec(2, MotionKind::LeftToRight), 99, &cfg);
        let rl = render_clip(&spec(2, MotionKind::RightToLeft), 99, &cfg);
        for t in 0..cfg.frames {
            let a = bright_centroid(lr.frame(t), 32, 0.1).unwrap();
            let b = bright_centroid(rl.frame(cfg.frames - 1 - t), 32, 0.1).unwrap();
            assert!((a.0 - b.0).abs() < 1e-9 && (a.1 - b.1).abs() < 1e-9);
            assert_eq!(lr.frame(t), rl.frame(cfg.frames - 1 - t));
        }
        let jitter = Jitter {
            start: 7.0,
            lane: 16.0,
            phase: 0.0,
        };
        let a = MotionKind::LeftToRight.trace(8, 32, jitter);
        let mut b = MotionKind::RightToLeft.trace(8, 32, jitter);
        b.reverse();
        assert_eq!(a, b);
    }

    #[test]
    fn pairs_cover_both_kinds() {
        let pairs = make_confusable_pairs(1).unwrap();
        assert_eq!(pairs.len(), 2);
        let (t0, t1) = pairs[0];
        assert_eq!(t0.texture_id, t1.texture_id);
        assert_ne!(t0.motion, t1.motion);
        let (s0, s1) = pairs[1];
        assert_eq!(s0.motion, s1.motion);
        assert_ne!(s0.texture_id, s1.texture_id);
        assert!(make_confusable_pairs(0).is_err());
    }

    #[test]
    fn spatial_pair_traces_match() {
        let cfg = RenderConfig {
            noise: 0.0,
            ..RenderConfig::default()
        };
        for (a, b) in make_confusable_pairs(3).unwrap().into_iter().skip(3) {
            let ca = render_clip(&a, 11, &cfg);
            let cb = render_clip(&b, 11, &cfg);
            let mut rng = rng_for(mix_seed(11, 0x5EED));
            let jitter = sample_jitter(&mut rng, 32);
            assert_eq!(a.motion.trace(8, 32, jitter), b.motion.trace(8, 32, jitter));
            assert_ne!(ca.pixels, cb.pixels);
        }
    }

    #[test]
    fn balanced_and_head_heavy_splits() {
        let classes: Vec<usize> = (0..20).collect();
        let s = make_task_stream(&classes, 5, SplitStyle::Balanced, 1).unwrap();
        assert!(s.tasks.iter().all(|t| t.len() == 4));
        let mut all: Vec<usize> = s.tasks.concat();
        all.sort_unstable();
        assert_eq!(all, classes);

        let eleven: Vec<usize> = (0..11).collect();
        let h = make_task_stream(&eleven, 6, SplitStyle::HeadHeavy, 1).unwrap();
        let sizes: Vec<usize> = h.tasks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![6, 1, 1, 1, 1, 1]);

        let err = make_task_stream(&eleven, 5, SplitStyle::Balanced, 1).unwrap_err();
        assert!(err.to_string().contains("remainder 1"), "{err}");
        assert!(make_task_stream(&[3], 2, SplitStyle::HeadHeavy, 1).is_err());
        assert_eq!(make_task_stream(&classes, 5, SplitStyle::Balanced, 7).unwrap(),
                   make_task_stream(&classes, 5, SplitStyle::Balanced, 7).unwrap());
    }

    #[test]
    fn hmdb_like_head_split() {
        let classes: Vec<usize> = (0..51).collect();
        let h = make_task_stream(&classes, 6, SplitStyle::HeadHeavy, 3).unwrap();
        let sizes: Vec<usize> = h.tasks.iter().map(Vec::len).collect();
        assert_eq!(sizes, vec![26, 5, 5, 5, 5, 5]);
    }

    #[test]
    fn default_corpus_shape() {
        let cfg = CorpusConfig::default();
        assert_eq!(cfg.class_count(), 20);
        let specs = cfg.class_specs();
        for pair in specs.chunks(2) {
            assert_eq!(pair[0].texture_id, pair[1].texture_id);
        }
    }

    #[test]
    fn train_and_test_seeds_are_disjoint() {
        let cfg = CorpusConfig::default();
        let train: std::collections::HashSet<u64> =
            (0..40).map(|i| cfg.sample_seed(3, i, false)).collect();
        assert!((0..10).all(|i| !train.contains(&cfg.sample_seed(3, i, true))));
    }
}
