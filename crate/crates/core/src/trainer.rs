//! Per-word classifiers: instance assembly with negative sampling, an
//! L1-regularised logistic regression fitted by proximal gradient descent,
//! and model persistence.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, RegionKey, Split};
use crate::error::{Error, Result};
use crate::features::{FeatureMask, FeatureTable, FeatureVector, RegionFeatures, Standardizer, POSITIONAL_DIM};
use crate::seed;
use crate::vocab::{self, Vocabulary, DEFAULT_MIN_COUNT};

pub const MODEL_VERSION: u32 = 1;

/// Smallest probability the loss will take the log of.
const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub neg_per_pos: usize,
    pub min_count: usize,
    pub l1: f64,
    pub max_epochs: usize,
    pub tol: f64,
    pub seed: u64,
    pub mask: FeatureMask,
    pub filter_relational: bool,
    /// Apply the `min_count` threshold to counts taken before relational
    /// filtering.
    pub count_before_filter: bool,
    /// Never draw negatives from an image that holds a positive.
    pub exclude_same_image: bool,
    pub standardize: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            neg_per_pos: 5,
            min_count: DEFAULT_MIN_COUNT,
            l1: 1e-4,
            max_epochs: 500,
            tol: 1e-7,
            seed: 0,
            mask: FeatureMask::Full,
            filter_relational: true,
            count_before_filter: false,
            exclude_same_image: false,
            standardize: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.neg_per_pos < 1 {
            return Err(Error::Config("neg_per_pos must be >= 1".into()));
        }
        if self.min_count < 1 {
            return Err(Error::MinCount(self.min_count));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::Config("tol must be positive".into()));
        }
        if !(self.l1 >= 0.0 && self.l1.is_finite()) {
            return Err(Error::Config("l1 strength must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Vocabulary under a training configuration's counting regime.
pub fn build_vocabulary(corpus: &Corpus, config: &TrainingConfig) -> Result<Vocabulary> {
    let filter = config.filter_relational && !config.count_before_filter;
    Vocabulary::build(corpus, filter, config.min_count)
}

/// The learned intension of one word.
#[derive(Debug, Clone, PartialEq)]
pub struct WordClassifier {
    pub word: String,
    pub weights: Vec<f64>,
    pub bias: f64,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl WordClassifier {
    pub fn logit(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(Error::Dimension {
                expected: self.weights.len(),
                actual: x.len(),
            });
        }
        Ok(dot(&self.weights, x) + self.bias)
    }
}

/// Dense row-major instance matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Instances {
    dim: usize,
    data: Vec<f64>,
}

impl Instances {
    pub fn new(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn from_rows<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let mut out = Self::new(dim);
        for r in rows {
            out.push(r)?;
        }
        Ok(out)
    }

    pub fn push(&mut self, row: &[f64]) -> Result<()> {
        if row.len() != self.dim {
            return Err(Error::Dimension {
                expected: self.dim,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.dim.max(1))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        -(-z).exp().ln_1p()
    } else {
        z - z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Loss value and the gradient of its smooth part.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    /// Mean cross-entropy plus `l1 * |weights|_1`.
    pub loss: f64,
    pub grad_weights: Vec<f64>,
    pub grad_bias: f64,
}

fn check_shapes(weights: &[f64], x: &Instances, y: &[f64]) -> Result<()> {
    if weights.len() != x.dim() {
        return Err(Error::Dimension {
            expected: x.dim(),
            actual: weights.len(),
        });
    }
    if y.len() != x.len() {
        return Err(Error::Shape(format!("{} labels for {} instances", y.len(), x.len())));
    }
    if x.is_empty() {
        return Err(Error::Shape("no instances".into()));
    }
    if y.iter().any(|&l| l != 0.0 && l != 1.0) {
        return Err(Error::Shape("labels must be 0 or 1".into()));
    }
    Ok(())
}

fn cross_entropy(weights: &[f64], bias: f64, x: &Instances, y: &[f64]) -> f64 {
    let floor = PROB_FLOOR.ln();
    let total: f64 = x
        .rows()
        .zip(y)
        .map(|(row, &label)| {
            let z = dot(weights, row) + bias;
            let log_p = log_sigmoid(z).max(floor);
            let log_q = log_sigmoid(-z).max(floor);
            -(label * log_p + (1.0 - label) * log_q)
        })
        .sum();
    total / x.len() as f64
}

fn cross_entropy_grad(weights: &[f64], bias: f64, x: &Instances, y: &[f64]) -> (f64, Vec<f64>, f64) {
    let floor = PROB_FLOOR.ln();
    let n = x.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; weights.len()];
    let mut grad_b = 0.0;
    for (row, &label) in x.rows().zip(y) {
        let z = dot(weights, row) + bias;
        loss -= label * log_sigmoid(z).max(floor) + (1.0 - label) * log_sigmoid(-z).max(floor);
        let r = sigmoid(z) - label;
        for (g, &v) in grad.iter_mut().zip(row) {
            *g += r * v;
        }
        grad_b += r;
    }
    grad.iter_mut().for_each(|g| *g /= n);
    (loss / n, grad, grad_b / n)
}

fn l1_norm(w: &[f64]) -> f64 {
    w.iter().map(|v| v.abs()).sum()
}

pub fn logistic_loss_grad(
    weights: &[f64],
    bias: f64,
    x: &Instances,
    y: &[f64],
    l1: f64,
) -> Result<LossGrad> {
    check_shapes(weights, x, y)?;
    let (smooth, grad_weights, grad_bias) = cross_entropy_grad(weights, bias, x, y);
    Ok(LossGrad {
        loss: smooth + l1 * l1_norm(weights),
        grad_weights,
        grad_bias,
    })
}

fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Optimizer output.
#[derive(Debug, Clone, PartialEq)]
pub struct Fit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective before the first epoch and after each completed epoch.
    pub losses: Vec<f64>,
}

impl Fit {
    pub fn epochs(&self) -> usize {
        self.losses.len().saturating_sub(1)
    }
}

/// Full-batch proximal gradient descent (ISTA) with backtracking line
/// search, starting from zero. Each epoch is one accepted step; stops after
/// `max_epochs` or once an epoch lowers the objective by less than `tol`.
pub fn fit_logistic(x: &Instances, y: &[f64], l1: f64, max_epochs: usize, tol: f64) -> Result<Fit> {
    let dim = x.dim();
    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    check_shapes(&w, x, y)?;

    let (mut smooth, mut grad, mut grad_b) = cross_entropy_grad(&w, b, x, y);
    let mut losses = vec![smooth + l1 * l1_norm(&w)];
    let mut step = 1.0;
    let mut cand = vec![0.0; dim];

    for _ in 0..max_epochs {
        let objective = *losses.last().unwrap();
        let mut accepted = None;
        while step > 1e-14 {
            for j in 0..dim {
                cand[j] = soft_threshold(w[j] - step * grad[j], step * l1);
            }
            let cand_b = b - step * grad_b;
            let cand_smooth = cross_entropy(&cand, cand_b, x, y);
            if !cand_smooth.is_finite() {
                return Err(Error::Shape("non-finite loss".into()));
            }
            let mut lin = grad_b * (cand_b - b);
            let mut sq = (cand_b - b).powi(2);
            for j in 0..dim {
                let d = cand[j] - w[j];
                lin += grad[j] * d;
                sq += d * d;
            }
            if cand_smooth <= smooth + lin + sq / (2.0 * step) {
                accepted = Some(cand_b);
                break;
            }
            step *= 0.5;
        }
        let Some(new_b) = accepted else { break };
        std::mem::swap(&mut w, &mut cand);
        b = new_b;
        (smooth, grad, grad_b) = cross_entropy_grad(&w, b, x, y);
        let new_objective = smooth + l1 * l1_norm(&w);
        if !new_objective.is_finite() {
            return Err(Error::Shape("non-finite loss".into()));
        }
        losses.push(new_objective);
        if objective - new_objective < tol {
            break;
        }
        step *= 2.0;
    }
    Ok(Fit {
        weights: w,
        bias: b,
        losses,
    })
}

/// Fits one word's classifier on its positive and negative instances.
pub fn train_word<'a>(
    word: &str,
    positives: &[&'a [f64]],
    negatives: &[&'a [f64]],
    config: &TrainingConfig,
) -> Result<(WordClassifier, Fit)> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Training {
            word: word.into(),
            message: format!("need positives and negatives, got {} and {}", positives.len(), negatives.len()),
        });
    }
    let dim = positives[0].len();
    let rows = positives.iter().chain(negatives).copied();
    let x = Instances::from_rows(dim, rows).map_err(|e| Error::Training {
        word: word.into(),
        message: e.to_string(),
    })?;
    let mut y = vec![1.0; positives.len()];
    y.resize(positives.len() + negatives.len(), 0.0);
    let fit = fit_logistic(&x, &y, config.l1, config.max_epochs, config.tol).map_err(|e| Error::Training {
        word: word.into(),
        message: e.to_string(),
    })?;
    let classifier = WordClassifier {
        word: word.into(),
        weights: fit.weights.clone(),
        bias: fit.bias,
        n_pos: positives.len(),
        n_neg: negatives.len(),
    };
    Ok((classifier, fit))
}

/// Positive instances of one word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Positives {
    /// Row per occurrence; repeated occurrences repeat the row.
    pub rows: Vec<usize>,
    /// Occurrences whose region has no feature row.
    pub skipped: usize,
}

/// How a [`TrainingSet`] standardizes its vectors.
#[derive(Debug, Clone, Copy)]
pub enum Scaling<'a> {
    None,
    Fit,
    Use(&'a Standardizer),
}

/// Prepared (standardized, masked) vectors of every training region, with
/// the occurrence index used to assemble per-word instances.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    dim: usize,
    data: Vec<f64>,
    keys: Vec<RegionKey>,
    image_of: Vec<usize>,
    /// Tokens of all expressions on each row's region.
    words_of: Vec<HashSet<String>>,
    occurrences: HashMap<String, Vec<Option<usize>>>,
    standardizer: Option<Standardizer>,
    dim_visual: usize,
    mask: FeatureMask,
}

impl TrainingSet {
    /// Training instances under `config`, fitting a standardizer on them
    /// when the config asks for one.
    pub fn build(corpus: &Corpus, features: &RegionFeatures<'_>, config: &TrainingConfig) -> Self {
        let scaling = if config.standardize { Scaling::Fit } else { Scaling::None };
        Self::for_split(corpus, features, Split::Train, config.mask, config.filter_relational, scaling)
    }

    /// Regions of `split` images (plus any region a `split` expression
    /// points at), prepared for a classifier with `mask`.
    pub fn for_split(
        corpus: &Corpus,
        features: &RegionFeatures<'_>,
        split: Split,
        mask: FeatureMask,
        filter_relational: bool,
        scaling: Scaling<'_>,
    ) -> Self {
        let split_exprs: Vec<_> = corpus.exprs_in(split).collect();
        let mut wanted: Vec<&RegionKey> = Vec::new();
        let mut seen: HashSet<&RegionKey> = HashSet::new();
        for (key, region) in &corpus.regions {
            if corpus.image_split(&region.image_id) == Some(split) && seen.insert(key) {
                wanted.push(key);
            }
        }
        for e in &split_exprs {
            if let Some((key, _)) = corpus.regions.get_key_value(&e.key()) {
                if seen.insert(key) {
                    wanted.push(key);
                }
            }
        }

        let mut keys = Vec::new();
        let mut full: Vec<FeatureVector> = Vec::new();
        for key in wanted {
            if let Some(v) = features.region(key) {
                keys.push(key.clone());
                full.push(v);
            }
        }
        let standardizer = match scaling {
            Scaling::None => None,
            Scaling::Fit => Standardizer::fit(full.iter().map(|v| v.as_slice())),
            Scaling::Use(s) => Some(s.clone()),
        };
        let dim_visual = features.dim_visual();
        let range = mask.range(dim_visual);
        let mut data = Vec::with_capacity(full.len() * range.len());
        for mut v in full {
            if let Some(s) = &standardizer {
                s.apply(&mut v.0);
            }
            data.extend_from_slice(&v.0[range.clone()]);
        }

        let row_of: HashMap<&RegionKey, usize> = keys.iter().enumerate().map(|(i, k)| (k, i)).collect();
        let mut image_ids: HashMap<&str, usize> = HashMap::new();
        let image_of = keys
            .iter()
            .map(|k| {
                let next = image_ids.len();
                *image_ids.entry(k.image_id.as_str()).or_insert(next)
            })
            .collect();

        let mut words_of = vec![HashSet::new(); keys.len()];
        for e in &corpus.exprs {
            if let Some(&row) = row_of.get(&e.key()) {
                words_of[row].extend(e.tokens.iter().cloned());
            }
        }

        let mut occurrences: HashMap<String, Vec<Option<usize>>> = HashMap::new();
        for e in split_exprs {
            if filter_relational && e.is_relational() {
                continue;
            }
            let row = row_of.get(&e.key()).copied();
            for tok in &e.tokens {
                occurrences.entry(tok.clone()).or_default().push(row);
            }
        }

        Self {
            dim: range.len(),
            data,
            keys,
            image_of,
            words_of,
            occurrences,
            standardizer,
            dim_visual,
            mask,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn key(&self, i: usize) -> &RegionKey {
        &self.keys[i]
    }

    pub fn standardizer(&self) -> Option<&Standardizer> {
        self.standardizer.as_ref()
    }

    pub fn assemble_positives(&self, word: &str) -> Positives {
        let occ = self.occurrences.get(word).map(Vec::as_slice).unwrap_or(&[]);
        let rows: Vec<usize> = occ.iter().flatten().copied().collect();
        Positives {
            skipped: occ.len() - rows.len(),
            rows,
        }
    }

    /// Rows never described with `word`, optionally excluding the images
    /// of the positives.
    pub fn eligible_negatives(&self, word: &str, positives: &Positives, exclude_same_image: bool) -> Vec<usize> {
        let blocked: HashSet<usize> = if exclude_same_image {
            positives.rows.iter().map(|&r| self.image_of[r]).collect()
        } else {
            HashSet::new()
        };
        (0..self.len())
            .filter(|&i| !self.words_of[i].contains(word) && !blocked.contains(&self.image_of[i]))
            .collect()
    }

    /// `n_per_pos` uniform draws with replacement per positive.
    pub fn sample_negatives<R: Rng>(
        &self,
        word: &str,
        positives: &Positives,
        n_per_pos: usize,
        exclude_same_image: bool,
        rng: &mut R,
    ) -> Result<Vec<usize>> {
        let eligible = self.eligible_negatives(word, positives, exclude_same_image);
        if eligible.is_empty() {
            return Err(Error::NoEligibleNegatives(word.into()));
        }
        let n = n_per_pos * positives.rows.len();
        Ok((0..n).map(|_| eligible[rng.random_range(0..eligible.len())]).collect())
    }
}

/// Per-word bookkeeping from a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordStats {
    pub word: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub skipped_positives: usize,
    pub epochs: usize,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordFailure {
    pub word: String,
    pub error: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ModelSet,
    pub stats: Vec<WordStats>,
    pub failures: Vec<WordFailure>,
}

pub fn negative_seed(seed: u64, word: &str) -> u64 {
    seed::derive(seed, &["negatives", word])
}

/// Trains one classifier per selected word. Per-word failures are collected
/// and do not stop the run. Runs on the current rayon pool; the result does
/// not depend on its size.
pub fn train_all(
    corpus: &Corpus,
    vocabulary: &Vocabulary,
    features: &RegionFeatures<'_>,
    config: &TrainingConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if vocabulary.is_empty() {
        return Err(Error::Config("vocabulary is empty".into()));
    }
    let set = TrainingSet::build(corpus, features, config);
    let words: Vec<&String> = vocabulary.selected.iter().collect();

    let results: Vec<(String, Result<(WordClassifier, WordStats)>)> = words
        .par_iter()
        .map(|word| {
            let word = word.as_str();
            let run = || -> Result<(WordClassifier, WordStats)> {
                let positives = set.assemble_positives(word);
                if positives.rows.is_empty() {
                    return Err(Error::Training {
                        word: word.into(),
                        message: "no positive instances with features".into(),
                    });
                }
                let mut rng = ChaCha8Rng::seed_from_u64(negative_seed(config.seed, word));
                let negatives = set.sample_negatives(word, &positives, config.neg_per_pos, config.exclude_same_image, &mut rng)?;
                let pos: Vec<&[f64]> = positives.rows.iter().map(|&r| set.row(r)).collect();
                let neg: Vec<&[f64]> = negatives.iter().map(|&r| set.row(r)).collect();
                let (classifier, fit) = train_word(word, &pos, &neg, config)?;
                let stats = WordStats {
                    word: word.into(),
                    n_pos: classifier.n_pos,
                    n_neg: classifier.n_neg,
                    skipped_positives: positives.skipped,
                    epochs: fit.epochs(),
                    final_loss: *fit.losses.last().unwrap(),
                };
                Ok((classifier, stats))
            };
            (word.to_owned(), run())
        })
        .collect();

    let mut classifiers = BTreeMap::new();
    let mut stats = Vec::new();
    let mut failures = Vec::new();
    for (word, result) in results {
        match result {
            Ok((c, s)) => {
                classifiers.insert(word, c);
                stats.push(s);
            }
            Err(e) => {
                log::warn!("training {word:?} failed: {e}");
                failures.push(WordFailure {
                    word,
                    error: e.to_string(),
                });
            }
        }
    }
    let model = ModelSet {
        dim_visual: set.dim_visual,
        mask: set.mask,
        standardizer: set.standardizer.clone(),
        classifiers,
        vocabulary: vocabulary.clone(),
        config: config.clone(),
    };
    Ok(TrainOutcome { model, stats, failures })
}

/// A trained set of word classifiers sharing one feature layout.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelSet {
    pub dim_visual: usize,
    pub mask: FeatureMask,
    pub standardizer: Option<Standardizer>,
    pub classifiers: BTreeMap<String, WordClassifier>,
    pub vocabulary: Vocabulary,
    pub config: TrainingConfig,
}

impl ModelSet {
    /// Length of every classifier's weight vector.
    pub fn dim(&self) -> usize {
        self.mask.dim(self.dim_visual)
    }

    /// Names of the entries classifier weights apply to.
    pub fn feature_names(&self) -> Vec<String> {
        self.mask
            .range(self.dim_visual)
            .map(|i| crate::features::feature_name(i, self.dim_visual))
            .collect()
    }

    pub fn get(&self, word: &str) -> Option<&WordClassifier> {
        self.classifiers.get(word)
    }

    pub fn len(&self) -> usize {
        self.classifiers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classifiers.is_empty()
    }

    /// Maps a full region vector into classifier input space.
    pub fn prepare(&self, x: &FeatureVector) -> Result<Vec<f64>> {
        let full = self.dim_visual + POSITIONAL_DIM;
        if x.len() != full {
            return Err(Error::Dimension {
                expected: full,
                actual: x.len(),
            });
        }
        let mut v = x.0.clone();
        if let Some(s) = &self.standardizer {
            s.apply(&mut v);
        }
        Ok(v[self.mask.range(self.dim_visual)].to_vec())
    }

    pub fn check_table(&self, table: &FeatureTable) -> Result<()> {
        table.check_dim(self.dim_visual).map_err(|_| {
            Error::Model(format!(
                "model expects {} visual dimensions, feature table has {}",
                self.dim_visual,
                table.dim()
            ))
        })
    }

    /// Keeps the `k` words with the most positive training instances (ties
    /// by word order). Returns the restricted set and whether `k` exceeded
    /// the model size.
    pub fn restrict_top_k(&self, k: usize) -> (ModelSet, bool) {
        let mut ranked: Vec<&WordClassifier> = self.classifiers.values().collect();
        ranked.sort_by(|a, b| b.n_pos.cmp(&a.n_pos).then_with(|| a.word.cmp(&b.word)));
        let overflow = k > ranked.len();
        let classifiers = ranked
            .into_iter()
            .take(k)
            .map(|c| (c.word.clone(), c.clone()))
            .collect();
        (ModelSet { classifiers, ..self.clone() }, overflow)
    }

    /// The model with only the listed words that it has classifiers for.
    pub fn restrict_words(&self, words: &[&str]) -> ModelSet {
        let classifiers = self
            .classifiers
            .iter()
            .filter(|(w, _)| words.contains(&w.as_str()))
            .map(|(w, c)| (w.clone(), c.clone()))
            .collect();
        ModelSet {
            classifiers,
            dim_visual: self.dim_visual,
            mask: self.mask,
            standardizer: self.standardizer.clone(),
            vocabulary: self.vocabulary.clone(),
            config: self.config.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct WordEntry {
    word: String,
    n_pos: usize,
    n_neg: usize,
    bias: f64,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelManifest {
    version: u32,
    dim: usize,
    dim_visual: usize,
    mask: FeatureMask,
    weights_file: String,
    words: Vec<WordEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    standardizer: Option<Standardizer>,
    config: TrainingConfig,
    vocabulary: Vocabulary,
}

fn weights_file_name(path: &Path) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    format!("{stem}.weights.bin")
}

/// Writes the JSON manifest at `path` and the raw f64 weights beside it.
/// Word entries' `offset` counts f64 values into the weights file.
pub fn save_model(model: &ModelSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let weights_file = weights_file_name(path);
    let dim = model.dim();
    let mut bytes = Vec::with_capacity(model.len() * dim * 8);
    let mut words = Vec::with_capacity(model.len());
    for (i, c) in model.classifiers.values().enumerate() {
        if c.weights.len() != dim {
            return Err(Error::Model(format!("{:?} has {} weights, expected {dim}", c.word, c.weights.len())));
        }
        for w in &c.weights {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        words.push(WordEntry {
            word: c.word.clone(),
            n_pos: c.n_pos,
            n_neg: c.n_neg,
            bias: c.bias,
            offset: i * dim,
        });
    }
    let manifest = ModelManifest {
        version: MODEL_VERSION,
        dim,
        dim_visual: model.dim_visual,
        mask: model.mask,
        weights_file: weights_file.clone(),
        words,
        standardizer: model.standardizer.clone(),
        config: model.config.clone(),
        vocabulary: model.vocabulary.clone(),
    };
    let weights_path = crate::features::resolve_relative(path, &weights_file);
    fs::write(&weights_path, bytes).map_err(|e| Error::io(&weights_path, e))?;
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: ModelManifest = serde_json::from_str(&text)?;
    if manifest.version != MODEL_VERSION {
        return Err(Error::Model(format!(
            "unsupported model version {} (expected {MODEL_VERSION})",
            manifest.version
        )));
    }
    let dim = manifest.mask.dim(manifest.dim_visual);
    if manifest.dim != dim {
        return Err(Error::Model(format!(
            "dim {} inconsistent with mask {} over {} visual dimensions",
            manifest.dim,
            manifest.mask.name(),
            manifest.dim_visual
        )));
    }
    let weights_path = crate::features::resolve_relative(path, &manifest.weights_file);
    let bytes = fs::read(&weights_path).map_err(|e| Error::io(&weights_path, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Model(format!("{} is not a whole number of f64 values", weights_path.display())));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();

    let mut classifiers = BTreeMap::new();
    for entry in manifest.words {
        let block = values.get(entry.offset..entry.offset + dim).ok_or_else(|| {
            Error::Model(format!(
                "weights for {:?} (offset {}) missing from {}",
                entry.word,
                entry.offset,
                weights_path.display()
            ))
        })?;
        if block.iter().any(|v| !v.is_finite()) || !entry.bias.is_finite() {
            return Err(Error::Model(format!("non-finite parameters for {:?}", entry.word)));
        }
        let c = WordClassifier {
            word: entry.word.clone(),
            weights: block.to_vec(),
            bias: entry.bias,
            n_pos: entry.n_pos,
            n_neg: entry.n_neg,
        };
        if classifiers.insert(entry.word.clone(), c).is_some() {
            return Err(Error::Model(format!("duplicate word {:?}", entry.word)));
        }
    }
    Ok(ModelSet {
        dim_visual: manifest.dim_visual,
        mask: manifest.mask,
        standardizer: manifest.standardizer,
        classifiers,
        vocabulary: manifest.vocabulary,
        config: manifest.config,
    })
}

/// Loads a model and checks it against the feature table it will be used with.
pub fn load_model_for(path: impl AsRef<Path>, table: &FeatureTable) -> Result<ModelSet> {
    let model = load_model(path)?;
    model.check_table(table)?;
    Ok(model)
}

/// Counts and selection in one place, for callers that mix corpora.
pub fn merged_vocabulary(corpora: &[&Corpus], config: &TrainingConfig) -> Result<Vocabulary> {
    let filter = config.filter_relational && !config.count_before_filter;
    let parts: Vec<_> = corpora.iter().map(|c| vocab::count_words(c, filter)).collect();
    Vocabulary::from_counts(vocab::merge_counts(&parts), config.min_count)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{BBox, ImageRecord, RefExpr, RegionRecord};
    use rand_distr::{Distribution, StandardNormal};

    /// Central differences of the smooth loss.
    fn finite_diff(w: &[f64], b: f64, x: &Instances, y: &[f64], h: f64) -> (Vec<f64>, f64) {
        let f = |w: &[f64], b: f64| cross_entropy(w, b, x, y);
        let gw = (0..w.len())
            .map(|j| {
                let mut wp = w.to_vec();
                let mut wm = w.to_vec();
                wp[j] += h;
                wm[j] -= h;
                (f(&wp, b) - f(&wm, b)) / (2.0 * h)
            })
            .collect();
        (gw, (f(w, b + h) - f(w, b - h)) / (2.0 * h))
    }

    fn random_problem(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Instances, Vec<f64>, Vec<f64>, f64) {
        let mut x = Instances::new(d);
        for _ in 0..n {
            let row: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
            x.push(&row).unwrap();
        }
        let y = (0..n).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect();
        let w = (0..d).map(|_| 0.3 * rng.sample::<f64, _>(StandardNormal)).collect();
        (x, y, w, rng.random_range(-1.0..1.0))
    }

    #[test]
    fn zero_parameters_give_ln2() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (x, y, _, _) = random_problem(&mut rng, 17, 4);
        let lg = logistic_loss_grad(&[0.0; 4], 0.0, &x, &y, 0.0).unwrap();
        assert!((lg.loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (x, y, w, b) = random_problem(&mut rng, 50, 6);
            let lg = logistic_loss_grad(&w, b, &x, &y, 0.0).unwrap();
            let (fw, fb) = finite_diff(&w, b, &x, &y, 1e-6);
            let num: f64 = lg.grad_weights.iter().zip(&fw).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
                + (lg.grad_bias - fb).powi(2);
            let den: f64 = lg.grad_weights.iter().map(|a| a * a).sum::<f64>() + lg.grad_bias.powi(2);
            assert!(num.sqrt() / den.sqrt() < 1e-5);
        }
    }

    #[test]
    fn l1_term_is_added_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, y, w, b) = random_problem(&mut rng, 30, 5);
        let plain = logistic_loss_grad(&w, b, &x, &y, 0.0).unwrap();
        let reg = logistic_loss_grad(&w, b, &x, &y, 0.25).unwrap();
        let expected = plain.loss + 0.25 * w.iter().map(|v| v.abs()).sum::<f64>();
        assert!((reg.loss - expected).abs() < 1e-12);
        assert_eq!(plain.grad_weights, reg.grad_weights);
    }

    #[test]
    fn shape_errors() {
        let x = Instances::from_rows(2, [[1.0, 2.0].as_slice()]).unwrap();
        assert!(logistic_loss_grad(&[0.0; 3], 0.0, &x, &[1.0], 0.0).is_err());
        assert!(logistic_loss_grad(&[0.0; 2], 0.0, &x, &[1.0, 0.0], 0.0).is_err());
        assert!(logistic_loss_grad(&[0.0; 2], 0.0, &x, &[0.5], 0.0).is_err());
    }

    #[test]
    fn zero_epochs_keep_initial_weights() {
        let pos = [[1.0, 0.0].as_slice()];
        let neg = [[-1.0, 0.0].as_slice()];
        let cfg = TrainingConfig { max_epochs: 0, ..Default::default() };
        let (c, fit) = train_word("w", &pos, &neg, &cfg).unwrap();
        assert_eq!(c.weights, vec![0.0, 0.0]);
        assert_eq!(c.bias, 0.0);
        assert_eq!(fit.epochs(), 0);
        assert!((sigmoid(c.logit(&[3.0, 4.0]).unwrap()) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn losses_monotone_and_sparsity_grows_with_l1() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (x, _, _, _) = random_problem(&mut rng, 200, 10);
        let y: Vec<f64> = x.rows().map(|r| f64::from((r[0] + 0.5 * r[1] > 0.0) as u8)).collect();
        let mut zeros = Vec::new();
        for l1 in [0.001, 0.02, 0.1] {
            let fit = fit_logistic(&x, &y, l1, 300, 1e-9).unwrap();
            for pair in fit.losses.windows(2) {
                assert!(pair[1] <= pair[0] + 1e-9);
            }
            zeros.push(fit.weights.iter().filter(|w| **w == 0.0).count());
        }
        assert!(zeros[0] <= zeros[1] && zeros[1] <= zeros[2], "{zeros:?}");
    }

    #[test]
    fn training_needs_both_classes() {
        let pos = [[1.0].as_slice()];
        let err = train_word("w", &pos, &[], &TrainingConfig::default()).unwrap_err();
        assert!(err.to_string().contains("\"w\""));
    }

    fn tiny_corpus() -> (Corpus, FeatureTable) {
        let mut c = Corpus::default();
        c.images.insert(
            "i".into(),
            ImageRecord { image_id: "i".into(), width: 100, height: 100, split: Some(Split::Train) },
        );
        let mut table = FeatureTable::new(2);
        for (k, r) in ["r1", "r2", "r3"].iter().enumerate() {
            let rec = RegionRecord { image_id: "i".into(), region_id: (*r).into(), bbox: BBox::new(10.0 * k as f64, 0.0, 10.0, 10.0) };
            table.push(rec.key(), &[k as f32, 1.0]).unwrap();
            c.regions.insert(rec.key(), rec);
        }
        c.exprs = vec![
            RefExpr::new("i", "r1", "red red ball", Some(Split::Train)),
            RefExpr::new("i", "r2", "red cube", Some(Split::Train)),
            RefExpr::new("i", "r3", "blue cube", Some(Split::Train)),
        ];
        (c, table)
    }

    #[test]
    fn positives_count_occurrences() {
        let (c, t) = tiny_corpus();
        let set = TrainingSet::build(&c, &RegionFeatures::new(&c, &t), &TrainingConfig::default());
        let p = set.assemble_positives("red");
        assert_eq!(p.rows.len(), 3);
        assert_eq!(set.row(p.rows[0]), set.row(p.rows[1]));
        assert!(set.assemble_positives("green").rows.is_empty());
    }

    #[test]
    fn negatives_come_from_eligible_set_only() {
        let (c, t) = tiny_corpus();
        let set = TrainingSet::build(&c, &RegionFeatures::new(&c, &t), &TrainingConfig::default());
        let p = set.assemble_positives("red");
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let neg = set.sample_negatives("red", &p, 5, false, &mut rng).unwrap();
        assert_eq!(neg.len(), 15);
        assert!(neg.iter().all(|&r| set.key(r).region_id == "r3"));

        let mut rng2 = ChaCha8Rng::seed_from_u64(5);
        let again = set.sample_negatives("red", &p, 5, false, &mut rng2).unwrap();
        assert_eq!(neg, again);

        let cube = set.assemble_positives("cube");
        let err = set.sample_negatives("cube", &cube, 5, true, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NoEligibleNegatives(w) if w == "cube"));
    }
}
