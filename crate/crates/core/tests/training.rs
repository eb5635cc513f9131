use std::fs;

use tempfile::TempDir;
use wac_core::corpus::{BBox, Corpus, ImageRecord, RefExpr, RegionRecord, Split};
use wac_core::features::{FeatureMask, FeatureTable, RegionFeatures};
use wac_core::synthworld::{self, SynthConfig, SynthWorld};
use wac_core::trainer::{self, TrainOutcome, TrainingConfig};
use wac_core::vocab::{self, Vocabulary};
use wac_core::RegionKey;

fn world() -> SynthWorld {
    synthworld::generate(&SynthConfig {
        n_scenes: 300,
        ..Default::default()
    })
    .unwrap()
}

fn config() -> TrainingConfig {
    TrainingConfig {
        max_epochs: 80,
        ..Default::default()
    }
}

fn train(w: &SynthWorld, config: &TrainingConfig) -> TrainOutcome {
    let vocab = trainer::build_vocabulary(&w.corpus, config).unwrap();
    trainer::train_all(&w.corpus, &vocab, &RegionFeatures::new(&w.corpus, &w.table), config).unwrap()
}

fn pool(n: usize) -> rayon::ThreadPool {
    rayon::ThreadPoolBuilder::new().num_threads(n).build().unwrap()
}

#[test]
fn serial_and_parallel_runs_are_bit_identical() {
    let w = world();
    let cfg = config();
    let serial = pool(1).install(|| train(&w, &cfg));
    let parallel = pool(8).install(|| train(&w, &cfg));
    assert_eq!(serial.model, parallel.model);
    for (a, b) in serial.model.classifiers.values().zip(parallel.model.classifiers.values()) {
        let bits = |c: &wac_core::WordClassifier| c.weights.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a), bits(b));
        assert_eq!(a.bias.to_bits(), b.bias.to_bits());
    }
}

#[test]
fn class_balance_and_vocabulary_size() {
    let w = world();
    let cfg = config();
    let out = train(&w, &cfg);
    assert!(out.failures.is_empty());
    assert_eq!(out.model.len(), SynthConfig::default().inventory().len());
    for c in out.model.classifiers.values() {
        assert_eq!(c.n_neg, cfg.neg_per_pos * c.n_pos, "{}", c.word);
        assert!(c.n_pos >= cfg.min_count);
    }
}

#[test]
fn three_word_vocabulary_gives_three_classifiers() {
    let w = world();
    let counts = vocab::count_words(&w.corpus, true);
    let picked = counts
        .into_iter()
        .filter(|(k, _)| ["red", "ball", "left"].contains(&k.as_str()))
        .collect();
    let vocab = Vocabulary::from_counts(picked, 40).unwrap();
    let out = trainer::train_all(&w.corpus, &vocab, &RegionFeatures::new(&w.corpus, &w.table), &config()).unwrap();
    assert_eq!(out.model.classifiers.keys().collect::<Vec<_>>(), ["ball", "left", "red"]);
}

fn tiny() -> (Corpus, FeatureTable) {
    let mut corpus = Corpus::default();
    corpus.images.insert(
        "a".into(),
        ImageRecord {
            image_id: "a".into(),
            width: 10,
            height: 10,
            split: Some(Split::Train),
        },
    );
    let mut table = FeatureTable::new(2);
    for (i, text) in ["red thing", "red cube"].iter().enumerate() {
        let r = RegionRecord {
            image_id: "a".into(),
            region_id: i.to_string(),
            bbox: BBox::new(i as f64 * 5.0, 0.0, 5.0, 5.0),
        };
        table.push(r.key(), &[i as f32, 1.0]).unwrap();
        corpus.regions.insert(r.key(), r);
        corpus.exprs.push(RefExpr::new("a", i.to_string(), *text, Some(Split::Train)));
    }
    (corpus, table)
}

#[test]
fn word_without_eligible_negatives_is_reported_not_fatal() {
    let (corpus, table) = tiny();
    let cfg = TrainingConfig {
        min_count: 1,
        ..config()
    };
    let vocab = trainer::build_vocabulary(&corpus, &cfg).unwrap();
    assert_eq!(vocab.len(), 3);
    let out = trainer::train_all(&corpus, &vocab, &RegionFeatures::new(&corpus, &table), &cfg).unwrap();
    assert_eq!(out.model.classifiers.keys().collect::<Vec<_>>(), ["cube", "thing"]);
    assert_eq!(out.failures.len(), 1);
    assert_eq!(out.failures[0].word, "red");
}

#[test]
fn mask_sets_weight_length() {
    let w = world();
    let pos = train(&w, &TrainingConfig { mask: FeatureMask::Positional, ..config() });
    assert!(pos.model.classifiers.values().all(|c| c.weights.len() == 7));
    let vis = train(&w, &TrainingConfig { mask: FeatureMask::Visual, ..config() });
    assert!(vis.model.classifiers.values().all(|c| c.weights.len() == 32));
}

#[test]
fn model_round_trip_and_validation() {
    let w = world();
    let model = train(&w, &TrainingConfig { standardize: true, ..config() }).model;
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("model.json");
    trainer::save_model(&model, &path).unwrap();
    assert_eq!(trainer::load_model_for(&path, &w.table).unwrap(), model);

    let wrong = FeatureTable::new(16);
    assert!(trainer::load_model_for(&path, &wrong).is_err());

    let text = fs::read_to_string(&path).unwrap();
    let bumped = text.replacen("\"version\": 1", "\"version\": 99", 1);
    fs::write(&path, bumped).unwrap();
    assert!(trainer::load_model(&path).unwrap_err().to_string().contains("version"));

    fs::write(&path, &text).unwrap();
    let weights = dir.path().join("model.weights.bin");
    let bytes = fs::read(&weights).unwrap();
    fs::write(&weights, &bytes[..bytes.len() - 8 * 39]).unwrap();
    let err = trainer::load_model(&path).unwrap_err().to_string();
    assert!(err.contains("missing"), "{err}");
}

#[test]
fn saved_model_bytes_are_reproducible() {
    let w = world();
    let dir = TempDir::new().unwrap();
    let cfg = config();
    for name in ["a.json", "b.json"] {
        trainer::save_model(&train(&w, &cfg).model, dir.path().join(name)).unwrap();
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.weights.bin"), read("b.weights.bin"));
    let a = String::from_utf8(read("a.json")).unwrap();
    let b = String::from_utf8(read("b.json")).unwrap();
    assert_eq!(a.replace("a.weights", "b.weights"), b);
}

#[test]
fn positives_skip_regions_without_features() {
    let (corpus, mut table) = tiny();
    let mut partial = FeatureTable::new(2);
    partial.push(RegionKey::new("a", "1"), table.row(&RegionKey::new("a", "1")).unwrap()).unwrap();
    table = partial;
    let cfg = TrainingConfig { min_count: 1, ..config() };
    let vocab = trainer::build_vocabulary(&corpus, &cfg).unwrap();
    let out = trainer::train_all(&corpus, &vocab, &RegionFeatures::new(&corpus, &table), &cfg).unwrap();
    assert!(out.model.get("thing").is_none());
    assert!(out.failures.iter().any(|f| f.word == "thing"));
}
