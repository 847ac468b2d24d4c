mod common;

use common::small_corpus;
use vcil_core::datagen::{
    bright_centroid, export_corpus, frame_histogram, import_corpus, make_confusable_pairs, make_task_stream, render_clip,
    Corpus, CorpusConfig, MotionKind, RenderConfig, SplitStyle, VideoClip,
};

#[test]
fn temporal_pairs_share_appearance_but_not_trajectory() {
    let cfg = RenderConfig::default();
    let pairs = make_confusable_pairs(5).unwrap();
    for (a, b) in pairs.iter().filter(|(a, b)| a.texture_id == b.texture_id) {
        for seed in 0..10 {
            let (ca, cb) = (render_clip(a, seed, &cfg), render_clip(b, seed, &cfg));
            let mut l1 = 0.0;
            for t in 0..cfg.frames {
                let (ha, hb) = (frame_histogram(ca.frame(t), 16), frame_histogram(cb.frame(t), 16));
                l1 += ha.iter().zip(&hb).map(|(x, y)| (x - y).abs()).sum::<f64>();
            }
            assert!(l1 / (cfg.frames as f64) < 0.05, "{a:?}/{b:?} seed {seed}: {l1}");
            let start_a = bright_centroid(ca.frame(0), cfg.size, 0.3).unwrap();
            let start_b = bright_centroid(cb.frame(0), cfg.size, 0.3).unwrap();
            assert!((start_a.0 - start_b.0).abs() > 8.0, "{start_a:?} vs {start_b:?}");
        }
    }
}

#[test]
fn spatial_pairs_differ_in_appearance() {
    let cfg = RenderConfig {
        noise: 0.0,
        ..RenderConfig::default()
    };
    for (a, b) in make_confusable_pairs(3).unwrap().iter().filter(|(a, b)| a.motion == b.motion) {
        assert_ne!(render_clip(a, 1, &cfg).pixels, render_clip(b, 1, &cfg).pixels);
    }
}

fn distance(a: &VideoClip, b: &VideoClip) -> f64 {
    a.pixels.iter().zip(&b.pixels).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[test]
fn nearest_neighbour_beats_twice_chance() {
    let cfg = CorpusConfig {
        textures: 4,
        motions: vec![MotionKind::LeftToRight, MotionKind::RightToLeft],
        train_per_class: 10,
        test_per_class: 10,
        ..CorpusConfig::default()
    };
    let corpus = Corpus::generate(&cfg).unwrap();
    assert_eq!(corpus.specs.len(), 8);
    let mut hits = 0;
    for q in &corpus.test {
        let nn = corpus
            .train
            .iter()
            .min_by(|a, b| distance(a, q).total_cmp(&distance(b, q)))
            .unwrap();
        hits += usize::from(nn.label == q.label);
    }
    let acc = hits as f64 / corpus.test.len() as f64;
    assert!(acc > 2.0 / 8.0, "1-NN accuracy {acc}");
}

#[test]
fn export_round_trip_is_bit_exact() {
    let corpus = Corpus::generate(&small_corpus()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_corpus(&corpus, dir.path()).unwrap();
    let back = import_corpus(dir.path()).unwrap();
    assert_eq!(back, corpus);
    assert!(dir.path().join("index.json").is_file());
}

#[test]
fn corrupt_export_is_rejected() {
    let corpus = Corpus::generate(&small_corpus()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    export_corpus(&corpus, dir.path()).unwrap();
    let victim = std::fs::read_dir(dir.path())
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|p| p.extension().is_some_and(|x| x != "json"))
        .unwrap();
    let bytes = std::fs::read(&victim).unwrap();
    std::fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
    assert!(import_corpus(dir.path()).is_err());
}

#[test]
fn streams_are_reproducible_and_disjoint() {
    let classes: Vec<usize> = (0..20).collect();
    let a = make_task_stream(&classes, 5, SplitStyle::Balanced, 7).unwrap();
    assert_eq!(a, make_task_stream(&classes, 5, SplitStyle::Balanced, 7).unwrap());
    assert_ne!(a, make_task_stream(&classes, 5, SplitStyle::Balanced, 8).unwrap());
    let mut all: Vec<usize> = a.tasks.concat();
    all.sort_unstable();
    assert_eq!(all, classes);
    assert!(a.tasks.iter().all(|t| t.len() == 4));
    assert!(make_task_stream(&classes, 3, SplitStyle::Balanced, 7).is_err());

    let h = make_task_stream(&(0..11).collect::<Vec<_>>(), 6, SplitStyle::HeadHeavy, 1).unwrap();
    let sizes: Vec<usize> = h.tasks.iter().map(Vec::len).collect();
    assert_eq!(sizes, [6, 1, 1, 1, 1, 1]);
}

#[test]
fn default_corpus_is_deterministic() {
    let cfg = CorpusConfig::default();
    let (a, b) = (Corpus::generate(&cfg).unwrap(), Corpus::generate(&cfg).unwrap());
    assert_eq!(a.train.len(), 20 * 40);
    assert_eq!(a.test.len(), 20 * 10);
    assert!(a.train.iter().zip(&b.train).all(|(x, y)| x.pixels == y.pixels));
    assert!(a.train.iter().flat_map(|c| &c.pixels).all(|p| (0.0..=1.0).contains(p)));
}
