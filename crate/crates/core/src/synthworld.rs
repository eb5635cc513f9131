//! Synthetic scenes with known latent attributes.
//!
//! Each scene is an image with `k` objects placed in distinct cells of a
//! 3x3 grid. An object has a color and a type, which reach the visual block
//! through a fixed random projection of their one-hot codes plus Gaussian
//! noise. Position words (`left`, `right`, `top`, `bottom`) are only
//! recoverable from the box geometry, i.e. the positional features.
//! Expressions name a subset of the target's attributes that no other
//! object in the scene satisfies.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{self, BBox, Corpus, CorpusPaths, ImageRecord, ProposalSet, RefExpr, RegionKey, RegionRecord, Split};
use crate::error::{Error, Result};
use crate::eval::iou;
use crate::features::{self, proposal_region_id, FeatureTable};
use crate::seed;

pub const FEATURES_MANIFEST: &str = "features.json";
pub const FEATURES_DATA: &str = "features.bin";
pub const GOLD_FILE: &str = "gold.json";

const GRID: usize = 3;

/// An attribute slot an expression template can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Slot {
    Color,
    Type,
    /// `top` or `bottom`; the middle row has no word.
    Row,
    /// `left` or `right`; the middle column has no word.
    Col,
}

impl Slot {
    pub const ALL: [Slot; 4] = [Slot::Color, Slot::Type, Slot::Row, Slot::Col];
}

impl std::str::FromStr for Slot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "color" | "colour" => Ok(Slot::Color),
            "type" => Ok(Slot::Type),
            "row" => Ok(Slot::Row),
            "col" | "column" => Ok(Slot::Col),
            other => Err(Error::Config(format!("unknown template slot {other:?}"))),
        }
    }
}

/// Parses a whitespace-separated template such as `"color type"`.
pub fn parse_template(s: &str) -> Result<Vec<Slot>> {
    s.split_whitespace().map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    /// Share of scenes (the last ones) tagged as test.
    pub test_fraction: f64,
    pub candidates_per_scene: usize,
    pub exprs_per_scene: usize,
    pub colors: Vec<String>,
    pub types: Vec<String>,
    /// Slot sequences expressions are drawn from. Empty means every
    /// nonempty subset of color, type, row, col.
    pub templates: Vec<Vec<Slot>>,
    pub dim_visual: usize,
    pub noise_sigma: f64,
    pub proposals_per_scene: usize,
    pub max_retries: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        let names = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        Self {
            n_scenes: 2500,
            test_fraction: 0.2,
            candidates_per_scene: 5,
            exprs_per_scene: 2,
            colors: names(&["red", "green", "blue", "yellow", "white"]),
            types: names(&["ball", "cube", "cone", "ring", "star"]),
            templates: Vec::new(),
            dim_visual: 32,
            noise_sigma: 0.1,
            proposals_per_scene: 8,
            max_retries: 50,
            seed: 42,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.candidates_per_scene;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(2..=GRID * GRID).contains(&k) {
            return bad("candidates_per_scene must be between 2 and 9");
        }
        if self.exprs_per_scene == 0 || self.exprs_per_scene > k {
            return bad("exprs_per_scene must be between 1 and candidates_per_scene");
        }
        if self.colors.is_empty() || self.types.is_empty() {
            return bad("attribute inventory is empty");
        }
        if self.dim_visual == 0 {
            return bad("dim_visual must be positive");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be nonnegative");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("test_fraction must lie in [0, 1]");
        }
        for t in &self.templates {
            let distinct: std::collections::HashSet<_> = t.iter().collect();
            if t.is_empty() || distinct.len() != t.len() {
                return bad("templates must be nonempty and name each slot at most once");
            }
        }
        if self.n_scenes == 0 {
            return bad("n_scenes must be positive");
        }
        Ok(())
    }

    pub fn n_test(&self) -> usize {
        ((self.n_scenes as f64) * self.test_fraction).round() as usize
    }

    pub fn template_set(&self) -> Vec<Vec<Slot>> {
        if !self.templates.is_empty() {
            return self.templates.clone();
        }
        (1u32..1 << Slot::ALL.len())
            .map(|mask| {
                Slot::ALL
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| mask & (1 << i) != 0)
                    .map(|(_, s)| *s)
                    .collect()
            })
            .collect()
    }

    pub fn uses(&self, slot: Slot) -> bool {
        self.template_set().iter().any(|t| t.contains(&slot))
    }

    /// Every word the generator can emit.
    pub fn inventory(&self) -> Vec<String> {
        let mut words = Vec::new();
        if self.uses(Slot::Color) {
            words.extend(self.colors.iter().cloned());
        }
        if self.uses(Slot::Type) {
            words.extend(self.types.iter().cloned());
        }
        if self.uses(Slot::Row) {
            words.extend(["top", "bottom"].map(String::from));
        }
        if self.uses(Slot::Col) {
            words.extend(["left", "right"].map(String::from));
        }
        words
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectLatent {
    pub region_id: String,
    pub color: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub col: usize,
    pub row: usize,
}

impl ObjectLatent {
    /// Whether the word truly applies to this object.
    pub fn satisfies(&self, word: &str) -> bool {
        match word {
            "left" => self.col == 0,
            "right" => self.col == GRID - 1,
            "top" => self.row == 0,
            "bottom" => self.row == GRID - 1,
            w => self.color == w || self.kind == w,
        }
    }

    /// The word filling `slot` for this object, if any.
    pub fn word(&self, slot: Slot) -> Option<&str> {
        match slot {
            Slot::Color => Some(&self.color),
            Slot::Type => Some(&self.kind),
            Slot::Row => match self.row {
                0 => Some("top"),
                r if r == GRID - 1 => Some("bottom"),
                _ => None,
            },
            Slot::Col => match self.col {
                0 => Some("left"),
                c if c == GRID - 1 => Some("right"),
                _ => None,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneLatents {
    pub image_id: String,
    pub objects: Vec<ObjectLatent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldExpr {
    pub image_id: String,
    pub region_id: String,
    pub text: String,
}

/// Latent truth behind a generated corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthGold {
    pub scenes: Vec<SceneLatents>,
    pub expressions: Vec<GoldExpr>,
    pub redrawn_scenes: usize,
}

impl SynthGold {
    pub fn scene(&self, image_id: &str) -> Option<&SceneLatents> {
        self.scenes
            .binary_search_by(|s| s.image_id.as_str().cmp(image_id))
            .ok()
            .map(|i| &self.scenes[i])
    }
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub corpus: Corpus,
    pub table: FeatureTable,
    pub gold: SynthGold,
}

/// The object satisfying every token, if exactly one does.
pub fn oracle_resolve<S: AsRef<str>>(tokens: &[S], scene: &SceneLatents) -> Option<String> {
    let mut matches = scene
        .objects
        .iter()
        .filter(|o| tokens.iter().all(|t| o.satisfies(t.as_ref())));
    let first = matches.next()?;
    matches.next().is_none().then(|| first.region_id.clone())
}

fn normal(rng: &mut impl Rng) -> f64 {
    rng.sample(StandardNormal)
}

struct Projection {
    /// dim_visual x (colors + types), row-major.
    weights: Vec<f64>,
    codes: usize,
}

impl Projection {
    fn new(cfg: &SynthConfig) -> Self {
        let codes = cfg.colors.len() + cfg.types.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &["projection"]));
        let weights = (0..cfg.dim_visual * codes).map(|_| normal(&mut rng)).collect();
        Self { weights, codes }
    }

    fn embed(&self, code: Option<(usize, usize)>, n_colors: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f32> {
        self.weights
            .chunks_exact(self.codes)
            .map(|row| {
                let signal = code.map_or(0.0, |(c, t)| row[c] + row[n_colors + t]);
                (signal + sigma * normal(rng)) as f32
            })
            .collect()
    }
}

struct Scene {
    width: u32,
    height: u32,
    objects: Vec<(ObjectLatent, BBox, usize, usize)>,
}

fn draw_scene(cfg: &SynthConfig, rng: &mut impl Rng) -> Scene {
    let width = rng.random_range(320..=800u32);
    let height = rng.random_range(240..=600u32);
    let mut cells: Vec<usize> = (0..GRID * GRID).collect();
    cells.shuffle(rng);
    let cw = f64::from(width) / GRID as f64;
    let ch = f64::from(height) / GRID as f64;
    let objects = cells[..cfg.candidates_per_scene]
        .iter()
        .enumerate()
        .map(|(i, &cell)| {
            let (row, col) = (cell / GRID, cell % GRID);
            let color = rng.random_range(0..cfg.colors.len());
            let kind = rng.random_range(0..cfg.types.len());
            let w = (rng.random_range(0.35..0.9) * cw).floor().max(1.0);
            let h = (rng.random_range(0.35..0.9) * ch).floor().max(1.0);
            let x = (col as f64 * cw + rng.random_range(0.0..(cw - w).max(1e-9))).floor();
            let y = (row as f64 * ch + rng.random_range(0.0..(ch - h).max(1e-9))).floor();
            let latent = ObjectLatent {
                region_id: format!("r{i}"),
                color: cfg.colors[color].clone(),
                kind: cfg.types[kind].clone(),
                col,
                row,
            };
            (latent, BBox::new(x, y, w, h), color, kind)
        })
        .collect();
    Scene { width, height, objects }
}

/// A filled template that identifies `target` uniquely, drawn uniformly
/// among all such fillings.
fn describe(scene: &Scene, target: usize, templates: &[Vec<Slot>], rng: &mut impl Rng) -> Option<Vec<String>> {
    let object = &scene.objects[target].0;
    let unique: Vec<Vec<&str>> = templates
        .iter()
        .filter_map(|t| t.iter().map(|&slot| object.word(slot)).collect::<Option<Vec<_>>>())
        .filter(|words| {
            scene
                .objects
                .iter()
                .enumerate()
                .all(|(j, (o, ..))| j == target || !words.iter().all(|w| o.satisfies(w)))
        })
        .collect();
    unique
        .choose(rng)
        .map(|words| words.iter().map(|w| w.to_string()).collect())
}

fn jitter(b: &BBox, width: u32, height: u32, rng: &mut impl Rng) -> BBox {
    let dx = rng.random_range(-0.1..0.1) * b.w;
    let dy = rng.random_range(-0.1..0.1) * b.h;
    let sw = rng.random_range(0.9..1.1);
    let sh = rng.random_range(0.9..1.1);
    let j = BBox::new((b.x + dx).floor(), (b.y + dy).floor(), (b.w * sw).floor().max(1.0), (b.h * sh).floor().max(1.0));
    j.clamp_to(f64::from(width), f64::from(height)).0
}

fn random_box(width: u32, height: u32, rng: &mut impl Rng) -> BBox {
    let (w, h) = (f64::from(width), f64::from(height));
    let bw = (rng.random_range(0.1..0.5) * w).floor().max(1.0);
    let bh = (rng.random_range(0.1..0.5) * h).floor().max(1.0);
    let x = rng.random_range(0.0..(w - bw).max(1e-9)).floor();
    let y = rng.random_range(0.0..(h - bh).max(1e-9)).floor();
    BBox::new(x, y, bw, bh)
}

/// Generates a corpus, its feature table and the latent truth. Fully
/// determined by the config, including the seed.
pub fn generate(cfg: &SynthConfig) -> Result<SynthWorld> {
    cfg.validate()?;
    let projection = Projection::new(cfg);
    let templates = cfg.template_set();
    let n_train = cfg.n_scenes - cfg.n_test();
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(cfg.seed, &["scenes"]));
    let mut corpus = Corpus::default();
    let mut proposals = IndexMap::new();
    let mut table = FeatureTable::new(cfg.dim_visual);
    let mut gold = SynthGold {
        scenes: Vec::with_capacity(cfg.n_scenes),
        expressions: Vec::new(),
        redrawn_scenes: 0,
    };
    let width = cfg.n_scenes.to_string().len().max(5);

    for s in 0..cfg.n_scenes {
        let image_id = format!("s{s:0width$}");
        let split = if s < n_train { Split::Train } else { Split::Test };

        let (scene, described) = loop {
            let scene = draw_scene(cfg, &mut rng);
            let mut order: Vec<usize> = (0..scene.objects.len()).collect();
            order.shuffle(&mut rng);
            let mut described = Vec::new();
            for &t in order.iter().take(cfg.max_retries.max(cfg.exprs_per_scene)) {
                if let Some(words) = describe(&scene, t, &templates, &mut rng) {
                    described.push((t, words));
                    if described.len() == cfg.exprs_per_scene {
                        break;
                    }
                }
            }
            if described.len() == cfg.exprs_per_scene {
                break (scene, described);
            }
            gold.redrawn_scenes += 1;
        };

        corpus.images.insert(
            image_id.clone(),
            ImageRecord {
                image_id: image_id.clone(),
                width: scene.width,
                height: scene.height,
                split: Some(split),
            },
        );
        let mut codes = Vec::with_capacity(scene.objects.len());
        for (latent, bbox, color, kind) in &scene.objects {
            let record = RegionRecord {
                image_id: image_id.clone(),
                region_id: latent.region_id.clone(),
                bbox: *bbox,
            };
            let visual = projection.embed(Some((*color, *kind)), cfg.colors.len(), cfg.noise_sigma, &mut rng);
            table.push(record.key(), &visual)?;
            corpus.regions.insert(record.key(), record);
            codes.push((*color, *kind));
        }
        for (t, words) in described {
            let region_id = scene.objects[t].0.region_id.clone();
            let text = words.join(" ");
            corpus.exprs.push(RefExpr::new(&image_id, &region_id, &text, Some(split)));
            gold.expressions.push(GoldExpr {
                image_id: image_id.clone(),
                region_id,
                text,
            });
        }

        if cfg.proposals_per_scene > 0 {
            let mut boxes: Vec<BBox> = scene
                .objects
                .iter()
                .map(|(_, b, ..)| jitter(b, scene.width, scene.height, &mut rng))
                .collect();
            while boxes.len() < cfg.proposals_per_scene {
                boxes.push(random_box(scene.width, scene.height, &mut rng));
            }
            boxes.shuffle(&mut rng);
            boxes.truncate(cfg.proposals_per_scene);
            for (i, b) in boxes.iter().enumerate() {
                let best = scene
                    .objects
                    .iter()
                    .zip(&codes)
                    .map(|((_, ob, ..), code)| (iou(b, ob), *code))
                    .max_by(|a, b| a.0.total_cmp(&b.0));
                let code = best.filter(|(v, _)| *v >= 0.5).map(|(_, c)| c);
                let visual = projection.embed(code, cfg.colors.len(), cfg.noise_sigma, &mut rng);
                table.push(RegionKey::new(&image_id, proposal_region_id(i)), &visual)?;
            }
            proposals.insert(image_id.clone(), ProposalSet { image_id: image_id.clone(), boxes });
        }

        gold.scenes.push(SceneLatents {
            image_id,
            objects: scene.objects.into_iter().map(|(l, ..)| l).collect(),
        });
    }
    if cfg.proposals_per_scene > 0 {
        corpus.proposals = Some(proposals);
    }
    if gold.redrawn_scenes > 0 {
        log::info!("{} scenes redrawn for lack of unique descriptions", gold.redrawn_scenes);
    }
    Ok(SynthWorld { corpus, table, gold })
}

/// Corpus file locations inside a synth output directory.
pub fn corpus_paths(dir: &Path) -> CorpusPaths {
    CorpusPaths {
        images: dir.join("images.jsonl"),
        regions: dir.join("regions.jsonl"),
        expressions: dir.join("expressions.jsonl"),
        proposals: Some(dir.join("proposals.jsonl")),
    }
}

/// Writes corpus files, the feature table and `gold.json` into `dir`.
pub fn write_world(world: &SynthWorld, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = corpus_paths(dir);
    if world.corpus.proposals.is_none() {
        paths.proposals = None;
    }
    corpus::save_corpus(&world.corpus, &paths)?;
    features::save_feature_table(&world.table, dir.join(FEATURES_MANIFEST), FEATURES_DATA)?;
    let gold_path = dir.join(GOLD_FILE);
    let mut json = serde_json::to_string_pretty(&world.gold)?;
    json.push('\n');
    fs::write(&gold_path, json).map_err(|e| Error::io(&gold_path, e))
}

pub fn load_gold(path: impl AsRef<Path>) -> Result<SynthGold> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}
