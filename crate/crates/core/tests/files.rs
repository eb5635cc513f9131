use std::fs;
use std::path::Path;

use tempfile::TempDir;
use wac_core::corpus::{self, CorpusPaths, RegionKey, Split, SplitRatios};
use wac_core::features::{self, FeatureTable};
use wac_core::synthworld::{self, SynthConfig};
use wac_core::Error;

fn write(dir: &Path, name: &str, lines: &[&str]) {
    fs::write(dir.join(name), lines.join("\n") + "\n").unwrap();
}

fn fixture(dir: &Path, extra_exprs: &[&str], regions: &[&str]) -> CorpusPaths {
    write(
        dir,
        "images.jsonl",
        &[
            r#"{"image_id":"a","width":100,"height":80}"#,
            r#"{"image_id":"b","width":50,"height":50,"split":"test"}"#,
        ],
    );
    write(dir, "regions.jsonl", regions);
    let mut exprs = vec![
        r#"{"image_id":"a","region_id":"1","text":"red ball"}"#,
        r#"{"image_id":"a","region_id":"2","text":"the cube on the left"}"#,
        r#"{"image_id":"a","region_id":"2","text":"Cube!"}"#,
        r#"{"image_id":"b","region_id":"1","text":"woman's lap","split":"test"}"#,
    ];
    exprs.extend_from_slice(extra_exprs);
    write(dir, "expressions.jsonl", &exprs);
    CorpusPaths::in_dir(dir)
}

const REGIONS: [&str; 3] = [
    r#"{"image_id":"a","region_id":"1","x":0,"y":0,"w":10,"h":10}"#,
    r#"{"image_id":"a","region_id":"2","x":20,"y":20,"w":30,"h":30}"#,
    r#"{"image_id":"b","region_id":"1","x":0,"y":0,"w":50,"h":50}"#,
];

#[test]
fn valid_fixture_loads_with_expected_counts() {
    let dir = TempDir::new().unwrap();
    let (c, report) = corpus::load_corpus(&fixture(dir.path(), &[], &REGIONS)).unwrap();
    assert_eq!((c.images.len(), c.regions.len(), c.exprs.len()), (2, 3, 4));
    assert_eq!(report, Default::default());
    assert_eq!(c.exprs[2].tokens, ["cube"]);
    assert_eq!(c.image_split("b"), Some(Split::Test));
}

#[test]
fn expression_on_unknown_region_is_dropped() {
    let dir = TempDir::new().unwrap();
    let extra = [r#"{"image_id":"a","region_id":"9","text":"ghost"}"#];
    let (c, report) = corpus::load_corpus(&fixture(dir.path(), &extra, &REGIONS)).unwrap();
    assert_eq!(c.exprs.len(), 4);
    assert_eq!(report.dropped_exprs_unknown_region, 1);
}

#[test]
fn box_past_the_edge_is_clamped() {
    let dir = TempDir::new().unwrap();
    let regions = [
        REGIONS[0],
        r#"{"image_id":"a","region_id":"2","x":75,"y":20,"w":30,"h":30}"#,
        REGIONS[2],
    ];
    let (c, report) = corpus::load_corpus(&fixture(dir.path(), &[], &regions)).unwrap();
    assert_eq!(report.clamped_regions, 1);
    let b = c.regions[&RegionKey::new("a", "2")].bbox;
    assert_eq!((b.x, b.w), (75.0, 25.0));
}

#[test]
fn malformed_line_reports_its_position() {
    let dir = TempDir::new().unwrap();
    let paths = fixture(dir.path(), &["{not json"], &REGIONS);
    match corpus::load_corpus(&paths) {
        Err(Error::Malformed { line, .. }) => assert_eq!(line, 5),
        other => panic!("{other:?}"),
    }
}

#[test]
fn save_and_reload_corpus() {
    let dir = TempDir::new().unwrap();
    let (c, _) = corpus::load_corpus(&fixture(dir.path(), &[], &REGIONS)).unwrap();
    let out = TempDir::new().unwrap();
    let paths = CorpusPaths::in_dir(out.path());
    corpus::save_corpus(&c, &paths).unwrap();
    let (back, _) = corpus::load_corpus(&paths).unwrap();
    assert_eq!(back, c);
}

#[test]
fn split_by_image_is_deterministic() {
    let world = synthworld::generate(&SynthConfig { n_scenes: 100, ..Default::default() }).unwrap();
    let ratios = SplitRatios::new(0.9, 0.0, 0.1).unwrap();
    let a = corpus::split_corpus(world.corpus.clone(), ratios, 7).unwrap();
    let b = corpus::split_corpus(world.corpus.clone(), ratios, 7).unwrap();
    assert_eq!(a, b);
    let count = |s| a.images.values().filter(|i| i.split == Some(s)).count();
    assert_eq!((count(Split::Train), count(Split::Test)), (90, 10));
    for e in &a.exprs {
        assert_eq!(e.split, a.image_split(&e.image_id));
    }
    let all = corpus::split_corpus(world.corpus, SplitRatios::new(1.0, 0.0, 0.0).unwrap(), 3).unwrap();
    assert!(all.images.values().all(|i| i.split == Some(Split::Train)));
}

fn manifest(dir: &Path, data_len: usize, duplicate: bool) -> std::path::PathBuf {
    let second = if duplicate { r#""a","region_id":"1""# } else { r#""a","region_id":"2""# };
    let text = format!(
        r#"{{"dim":8,"count":3,"dtype":"f32le","layout":"row-major","data_file":"f.bin","index":[
        {{"image_id":"a","region_id":"1","row":0}},
        {{"image_id":{second},"row":1}},
        {{"image_id":"b","region_id":"1","row":2}}]}}"#
    );
    let path = dir.join("f.json");
    fs::write(&path, text).unwrap();
    fs::write(dir.join("f.bin"), vec![0u8; data_len]).unwrap();
    path
}

#[test]
fn feature_table_size_checks() {
    let dir = TempDir::new().unwrap();
    let t = features::load_feature_table(manifest(dir.path(), 96, false)).unwrap();
    assert_eq!((t.len(), t.dim()), (3, 8));

    let err = features::load_feature_table(manifest(dir.path(), 95, false)).unwrap_err();
    assert!(err.to_string().contains("truncated data"), "{err}");

    let err = features::load_feature_table(manifest(dir.path(), 96, true)).unwrap_err();
    assert!(err.to_string().contains("a/1"), "{err}");
}

#[test]
fn feature_table_rejects_non_finite_rows() {
    let dir = TempDir::new().unwrap();
    let path = manifest(dir.path(), 96, false);
    let mut bytes = vec![0u8; 96];
    bytes[40..44].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(dir.path().join("f.bin"), bytes).unwrap();
    let err = features::load_feature_table(path).unwrap_err();
    assert!(err.to_string().contains("row 1"), "{err}");
}

#[test]
fn feature_table_round_trip() {
    let mut t = FeatureTable::new(2);
    t.push(RegionKey::new("x", "1"), &[1.5, -0.25]).unwrap();
    t.push(RegionKey::new("x", "2"), &[f32::MIN_POSITIVE, 3e30]).unwrap();
    let dir = TempDir::new().unwrap();
    features::save_feature_table(&t, dir.path().join("t.json"), "t.bin").unwrap();
    assert_eq!(features::load_feature_table(dir.path().join("t.json")).unwrap(), t);
}

#[test]
fn synth_output_is_loadable_and_byte_stable() {
    let cfg = SynthConfig { n_scenes: 40, ..Default::default() };
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    synthworld::write_world(&synthworld::generate(&cfg).unwrap(), a.path()).unwrap();
    synthworld::write_world(&synthworld::generate(&cfg).unwrap(), b.path()).unwrap();
    for name in [
        "images.jsonl",
        "regions.jsonl",
        "expressions.jsonl",
        "proposals.jsonl",
        "features.json",
        "features.bin",
        "gold.json",
    ] {
        assert_eq!(fs::read(a.path().join(name)).unwrap(), fs::read(b.path().join(name)).unwrap(), "{name}");
    }
    let (c, report) = corpus::load_corpus(&synthworld::corpus_paths(a.path())).unwrap();
    assert_eq!(report, Default::default());
    assert_eq!(c.exprs.len(), 80);
    let table = features::load_feature_table(a.path().join(synthworld::FEATURES_MANIFEST)).unwrap();
    assert_eq!(table.len(), 40 * (5 + 8));
    let gold = synthworld::load_gold(a.path().join(synthworld::GOLD_FILE)).unwrap();
    assert_eq!(gold.expressions.len(), 80);
}
