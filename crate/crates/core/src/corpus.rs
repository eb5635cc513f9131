//! Images, annotated regions, region proposals and referring expressions.
//!
//! All four inputs are JSON Lines files. Loading cross-validates them:
//! regions must sit on a known image, expressions must point at a known
//! region, and boxes are clamped to the image bounds. Records that cannot be
//! attached are dropped and counted in the [`LoadReport`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Expressions containing any of these are treated as relational (they
/// refer via a landmark). Two-word entries match consecutive tokens.
pub const RELWORDS: [&str; 13] = [
    "below",
    "above",
    "between",
    "not",
    "behind",
    "under",
    "underneath",
    "front of",
    "right of",
    "left of",
    "ontop of",
    "next to",
    "middle of",
];

/// Axis-aligned box in pixels, top-left origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn x2(&self) -> f64 {
        self.x + self.w
    }

    pub fn y2(&self) -> f64 {
        self.y + self.h
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clips the box to `[0, width] x [0, height]`. Returns the clipped box
    /// and whether anything changed.
    pub fn clamp_to(&self, width: f64, height: f64) -> (BBox, bool) {
        let x1 = self.x.clamp(0.0, width);
        let y1 = self.y.clamp(0.0, height);
        let x2 = self.x2().clamp(0.0, width);
        let y2 = self.y2().clamp(0.0, height);
        let clamped = BBox::new(x1, y1, (x2 - x1).max(0.0), (y2 - y1).max(0.0));
        (clamped, clamped != *self)
    }

    fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.w.is_finite() && self.h.is_finite()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RegionKey {
    pub image_id: String,
    pub region_id: String,
}

impl RegionKey {
    pub fn new(image_id: impl Into<String>, region_id: impl Into<String>) -> Self {
        Self {
            image_id: image_id.into(),
            region_id: region_id.into(),
        }
    }
}

impl fmt::Display for RegionKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.image_id, self.region_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionRecord {
    pub image_id: String,
    pub region_id: String,
    #[serde(flatten)]
    pub bbox: BBox,
}

impl RegionRecord {
    pub fn key(&self) -> RegionKey {
        RegionKey::new(&self.image_id, &self.region_id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefExpr {
    pub image_id: String,
    pub region_id: String,
    pub raw: String,
    pub tokens: Vec<String>,
    pub split: Option<Split>,
}

impl RefExpr {
    pub fn new(
        image_id: impl Into<String>,
        region_id: impl Into<String>,
        raw: impl Into<String>,
        split: Option<Split>,
    ) -> Self {
        let raw = raw.into();
        Self {
            image_id: image_id.into(),
            region_id: region_id.into(),
            tokens: tokenize(&raw),
            raw,
            split,
        }
    }

    pub fn key(&self) -> RegionKey {
        RegionKey::new(&self.image_id, &self.region_id)
    }

    pub fn is_relational(&self) -> bool {
        is_relational(&self.tokens)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSet {
    pub image_id: String,
    /// Proposer order, best first.
    pub boxes: Vec<BBox>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Corpus {
    pub images: IndexMap<String, ImageRecord>,
    pub regions: IndexMap<RegionKey, RegionRecord>,
    pub exprs: Vec<RefExpr>,
    pub proposals: Option<IndexMap<String, ProposalSet>>,
}

impl Corpus {
    /// Regions grouped by image, both in load order.
    pub fn regions_by_image(&self) -> IndexMap<&str, Vec<&RegionRecord>> {
        let mut out: IndexMap<&str, Vec<&RegionRecord>> = IndexMap::new();
        for (id, _) in &self.images {
            out.insert(id.as_str(), Vec::new());
        }
        for region in self.regions.values() {
            out.entry(region.image_id.as_str()).or_default().push(region);
        }
        out
    }

    pub fn exprs_in(&self, split: Split) -> impl Iterator<Item = &RefExpr> {
        self.exprs.iter().filter(move |e| e.split == Some(split))
    }

    /// Split of an image. Untagged images inherit the split of their first
    /// tagged expression at load time.
    pub fn image_split(&self, image_id: &str) -> Option<Split> {
        self.images.get(image_id).and_then(|img| img.split)
    }

    pub fn region(&self, key: &RegionKey) -> Option<&RegionRecord> {
        self.regions.get(key)
    }

    pub fn image(&self, image_id: &str) -> Option<&ImageRecord> {
        self.images.get(image_id)
    }

    /// Whether every expression carries a split tag.
    pub fn is_split(&self) -> bool {
        self.exprs.iter().all(|e| e.split.is_some())
    }
}

/// Lowercases, replaces everything except letters, digits, hyphens and
/// word-internal apostrophes with whitespace, then splits on whitespace.
pub fn tokenize(raw: &str) -> Vec<String> {
    let chars: Vec<char> = raw
        .chars()
        .flat_map(char::to_lowercase)
        .map(|c| if c == '\u{2019}' { '\'' } else { c })
        .collect();
    let mut cleaned = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = if c.is_alphanumeric() || c == '-' {
            true
        } else if c == '\'' {
            let before = i > 0 && chars[i - 1].is_alphanumeric();
            let after = chars.get(i + 1).is_some_and(|n| n.is_alphanumeric());
            before && after
        } else {
            false
        };
        cleaned.push(if keep { c } else { ' ' });
    }
    cleaned.split_whitespace().map(str::to_owned).collect()
}

/// True iff the token sequence contains a [`RELWORDS`] entry.
pub fn is_relational<S: AsRef<str>>(tokens: &[S]) -> bool {
    let hit_single = tokens.iter().any(|t| {
        RELWORDS
            .iter()
            .any(|r| !r.contains(' ') && *r == t.as_ref())
    });
    hit_single
        || tokens.windows(2).any(|pair| {
            RELWORDS.iter().any(|r| {
                r.split_once(' ')
                    .is_some_and(|(a, b)| a == pair[0].as_ref() && b == pair[1].as_ref())
            })
        })
}

/// Locations of the corpus files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusPaths {
    pub images: PathBuf,
    pub regions: PathBuf,
    pub expressions: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proposals: Option<PathBuf>,
}

impl CorpusPaths {
    /// Conventional file names inside one directory. The proposals file is
    /// picked up only if it exists.
    pub fn in_dir(dir: impl AsRef<Path>) -> Self {
        let dir = dir.as_ref();
        let proposals = dir.join("proposals.jsonl");
        Self {
            images: dir.join("images.jsonl"),
            regions: dir.join("regions.jsonl"),
            expressions: dir.join("expressions.jsonl"),
            proposals: proposals.exists().then_some(proposals),
        }
    }
}

/// What the loader had to fix or drop.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub clamped_regions: usize,
    pub clamped_proposals: usize,
    pub dropped_regions: usize,
    pub dropped_exprs_unknown_region: usize,
    pub dropped_exprs_empty: usize,
    pub dropped_proposal_sets: usize,
    pub mixed_split_images: usize,
}

#[derive(Deserialize)]
struct RegionLine {
    image_id: String,
    region_id: String,
    x: f64,
    y: f64,
    w: f64,
    h: f64,
}

#[derive(Serialize, Deserialize)]
struct ExprLine {
    image_id: String,
    region_id: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    split: Option<Split>,
}

#[derive(Serialize, Deserialize)]
struct ProposalLine {
    image_id: String,
    boxes: Vec<[f64; 4]>,
}

fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<(usize, T)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let value = serde_json::from_str(line).map_err(|e| Error::Malformed {
            path: path.to_owned(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((i + 1, value));
    }
    Ok(out)
}

fn malformed(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Malformed {
        path: path.to_owned(),
        line,
        message: message.into(),
    }
}

/// Loads and cross-validates a corpus.
pub fn load_corpus(paths: &CorpusPaths) -> Result<(Corpus, LoadReport)> {
    let mut report = LoadReport::default();
    let mut corpus = Corpus::default();

    for (line, img) in read_jsonl::<ImageRecord>(&paths.images)? {
        if img.width == 0 || img.height == 0 {
            return Err(malformed(&paths.images, line, "width and height must be >= 1"));
        }
        if corpus.images.contains_key(&img.image_id) {
            return Err(malformed(
                &paths.images,
                line,
                format!("duplicate image_id {:?}", img.image_id),
            ));
        }
        corpus.images.insert(img.image_id.clone(), img);
    }

    for (line, r) in read_jsonl::<RegionLine>(&paths.regions)? {
        let bbox = BBox::new(r.x, r.y, r.w, r.h);
        if !bbox.is_finite() {
            return Err(malformed(&paths.regions, line, "non-finite box coordinate"));
        }
        let Some(img) = corpus.images.get(&r.image_id) else {
            log::warn!("{}:{line}: region on unknown image {:?}", paths.regions.display(), r.image_id);
            report.dropped_regions += 1;
            continue;
        };
        let (bbox, changed) = bbox.clamp_to(img.width.into(), img.height.into());
        if bbox.area() <= 0.0 {
            log::warn!("{}:{line}: region has no area inside its image", paths.regions.display());
            report.dropped_regions += 1;
            continue;
        }
        if changed {
            log::warn!("{}:{line}: region box clamped to image bounds", paths.regions.display());
            report.clamped_regions += 1;
        }
        let record = RegionRecord {
            image_id: r.image_id,
            region_id: r.region_id,
            bbox,
        };
        let key = record.key();
        if corpus.regions.contains_key(&key) {
            return Err(malformed(&paths.regions, line, format!("duplicate region {key}")));
        }
        corpus.regions.insert(key, record);
    }

    for (line, e) in read_jsonl::<ExprLine>(&paths.expressions)? {
        let expr = RefExpr::new(e.image_id, e.region_id, e.text, e.split);
        if !corpus.regions.contains_key(&expr.key()) {
            log::warn!(
                "{}:{line}: expression refers to unknown region {}",
                paths.expressions.display(),
                expr.key()
            );
            report.dropped_exprs_unknown_region += 1;
            continue;
        }
        if expr.tokens.is_empty() {
            log::warn!("{}:{line}: expression has no tokens", paths.expressions.display());
            report.dropped_exprs_empty += 1;
            continue;
        }
        corpus.exprs.push(expr);
    }

    if let Some(path) = &paths.proposals {
        let mut sets = IndexMap::new();
        for (line, p) in read_jsonl::<ProposalLine>(path)? {
            let Some(img) = corpus.images.get(&p.image_id) else {
                log::warn!("{}:{line}: proposals for unknown image {:?}", path.display(), p.image_id);
                report.dropped_proposal_sets += 1;
                continue;
            };
            let mut boxes = Vec::with_capacity(p.boxes.len());
            for [x, y, w, h] in p.boxes {
                let b = BBox::new(x, y, w, h);
                if !b.is_finite() {
                    return Err(malformed(path, line, "non-finite proposal coordinate"));
                }
                let (b, changed) = b.clamp_to(img.width.into(), img.height.into());
                report.clamped_proposals += usize::from(changed);
                boxes.push(b);
            }
            if sets.contains_key(&p.image_id) {
                return Err(malformed(path, line, format!("duplicate proposals for {:?}", p.image_id)));
            }
            sets.insert(p.image_id.clone(), ProposalSet { image_id: p.image_id, boxes });
        }
        corpus.proposals = Some(sets);
    }

    report.mixed_split_images = infer_image_splits(&mut corpus);
    Ok((corpus, report))
}

/// Gives untagged images the split of their expressions. Returns the number
/// of images whose expressions disagree.
fn infer_image_splits(corpus: &mut Corpus) -> usize {
    let mut seen: HashMap<&str, HashSet<Split>> = HashMap::new();
    for e in &corpus.exprs {
        if let Some(s) = e.split {
            seen.entry(e.image_id.as_str()).or_default().insert(s);
        }
    }
    let mut first: HashMap<String, Split> = HashMap::new();
    for e in &corpus.exprs {
        if let Some(s) = e.split {
            first.entry(e.image_id.clone()).or_insert(s);
        }
    }
    let mixed = seen.values().filter(|s| s.len() > 1).count();
    if mixed > 0 {
        log::warn!("{mixed} images have expressions in more than one split");
    }
    for (id, img) in corpus.images.iter_mut() {
        if img.split.is_none() {
            img.split = first.get(id).copied();
        }
    }
    mixed
}

fn write_jsonl<T: Serialize>(path: &Path, items: impl IntoIterator<Item = T>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for item in items {
        serde_json::to_writer(&mut w, &item)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes the corpus in the same formats [`load_corpus`] reads.
pub fn save_corpus(corpus: &Corpus, paths: &CorpusPaths) -> Result<()> {
    write_jsonl(&paths.images, corpus.images.values())?;
    write_jsonl(&paths.regions, corpus.regions.values())?;
    write_jsonl(
        &paths.expressions,
        corpus.exprs.iter().map(|e| ExprLine {
            image_id: e.image_id.clone(),
            region_id: e.region_id.clone(),
            text: e.raw.clone(),
            split: e.split,
        }),
    )?;
    if let (Some(path), Some(sets)) = (&paths.proposals, &corpus.proposals) {
        write_jsonl(
            path,
            sets.values().map(|p| ProposalLine {
                image_id: p.image_id.clone(),
                boxes: p.boxes.iter().map(|b| [b.x, b.y, b.w, b.h]).collect(),
            }),
        )?;
    }
    Ok(())
}

/// Fractions of images assigned to each split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let ok = [train, val, test].iter().all(|r| r.is_finite() && *r >= 0.0)
            && (train + val + test - 1.0).abs() <= 1e-9;
        if ok {
            Ok(Self { train, val, test })
        } else {
            Err(Error::SplitRatios { train, val, test })
        }
    }
}

impl std::str::FromStr for SplitRatios {
    type Err = Error;

    /// Parses `"0.9,0,0.1"`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Config(format!("split ratios {s:?}: {e}")))?;
        match parts[..] {
            [a, b, c] => SplitRatios::new(a, b, c),
            _ => Err(Error::Config(format!("split ratios {s:?}: expected three values"))),
        }
    }
}

/// Assigns every image to exactly one split and lets its expressions
/// inherit it. Deterministic in `seed`.
pub fn split_corpus(mut corpus: Corpus, ratios: SplitRatios, seed: u64) -> Result<Corpus> {
    let ratios = SplitRatios::new(ratios.train, ratios.val, ratios.test)?;
    let mut ids: Vec<String> = corpus.images.keys().cloned().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);

    let n = ids.len();
    let n_train = ((n as f64) * ratios.train).round() as usize;
    let n_train = n_train.min(n);
    let n_val = (((n as f64) * ratios.val).round() as usize).min(n - n_train);

    let mut assigned: HashMap<String, Split> = HashMap::with_capacity(n);
    for (i, id) in ids.into_iter().enumerate() {
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assigned.insert(id, split);
    }
    for (id, img) in corpus.images.iter_mut() {
        img.split = Some(assigned[id]);
    }
    for e in corpus.exprs.iter_mut() {
        e.split = Some(assigned[&e.image_id]);
    }
    Ok(corpus)
}
