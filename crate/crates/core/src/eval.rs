//! Evaluation: accuracy, MRR, arc and the `>0` subset on gold regions,
//! IoU-scored region proposals, baselines, ablations, accuracy by
//! expression length and per-word average precision.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{BBox, Corpus, RefExpr, Split};
use crate::error::{Error, Result};
use crate::features::{proposal_region_id, FeatureMask, FeatureTable, RegionFeatures};
use crate::seed;
use crate::semantics::{self, CandidateSet};
use crate::trainer::{self, ModelSet, Scaling, TrainingConfig, TrainingSet};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;
pub const DEFAULT_RELAXED_K: usize = 10;

/// Intersection over union of two axis-aligned boxes; 0 if either box is
/// empty or they do not overlap.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2().min(b.x2()) - a.x.max(b.x)).max(0.0);
    let ih = (a.y2().min(b.y2()) - a.y.max(b.y)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || a.area() <= 0.0 || b.area() <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Per-expression result of a gold-region resolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExprOutcome {
    /// 1-based rank of the gold region; `None` when the model abstained.
    pub rank: Option<usize>,
    pub tokens_known: usize,
    pub tokens_total: usize,
}

impl ExprOutcome {
    pub fn is_hit(&self) -> bool {
        self.rank == Some(1)
    }

    pub fn abstained(&self) -> bool {
        self.rank.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    /// Expressions evaluated.
    pub n_total: usize,
    /// Expressions dropped for missing features.
    pub n_skipped: usize,
    pub pct_tst: f64,
    pub acc: f64,
    pub mrr: f64,
    pub arc: f64,
    pub frac_gt0: f64,
    pub acc_gt0: f64,
}

/// Aggregates outcomes. Abstentions count as misses; their MRR
/// contribution is 0 unless `mrr_exclude_abstained`.
pub fn summarize(
    label: impl Into<String>,
    outcomes: &[ExprOutcome],
    n_unfiltered: usize,
    n_skipped: usize,
    mrr_exclude_abstained: bool,
) -> EvalReport {
    let n = outcomes.len();
    let ratio = |num: f64, den: usize| if den == 0 { 0.0 } else { num / den as f64 };
    let hits = outcomes.iter().filter(|o| o.is_hit()).count();
    let answered = outcomes.iter().filter(|o| !o.abstained()).count();
    let rr: f64 = outcomes.iter().filter_map(|o| o.rank).map(|r| 1.0 / r as f64).sum();
    let arc: f64 = outcomes
        .iter()
        .map(|o| ratio(o.tokens_known as f64, o.tokens_total))
        .sum();
    EvalReport {
        label: label.into(),
        n_total: n,
        n_skipped,
        pct_tst: ratio((n + n_skipped) as f64, n_unfiltered),
        acc: ratio(hits as f64, n),
        mrr: ratio(rr, if mrr_exclude_abstained { answered } else { n }),
        arc: ratio(arc, n),
        frac_gt0: ratio(answered as f64, n),
        acc_gt0: ratio(hits as f64, answered),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub split: Split,
    /// Drop relational expressions (the NR variant).
    pub filter_relational: bool,
    pub mrr_exclude_abstained: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            split: Split::Test,
            filter_relational: false,
            mrr_exclude_abstained: false,
        }
    }
}

impl EvalOptions {
    pub fn label(&self) -> &'static str {
        if self.filter_relational { "nr" } else { "full" }
    }
}

/// Expressions of `split`, and how many there were before the relational
/// filter.
fn select_exprs(corpus: &Corpus, split: Split, filter_relational: bool) -> (Vec<&RefExpr>, usize) {
    let all: Vec<&RefExpr> = corpus.exprs_in(split).collect();
    let n = all.len();
    let kept = all
        .into_iter()
        .filter(|e| !(filter_relational && e.is_relational()))
        .collect();
    (kept, n)
}

/// Gold candidate sets: every annotated region of each image. `None` for
/// images with a region lacking features.
fn gold_candidates<'a>(corpus: &'a Corpus, features: &RegionFeatures<'_>) -> HashMap<&'a str, Option<CandidateSet>> {
    corpus
        .regions_by_image()
        .into_iter()
        .map(|(image, regions)| {
            let items: Option<Vec<_>> = regions
                .iter()
                .map(|r| features.region(&r.key()).map(|v| (r.region_id.clone(), v)))
                .collect();
            let set = items.and_then(|items| CandidateSet::new(items).ok());
            (image, set)
        })
        .collect()
}

/// Per-expression outcomes on gold regions.
#[derive(Debug, Clone)]
pub struct GoldRun {
    /// Evaluated expressions with their outcome, in corpus order.
    pub outcomes: Vec<(usize, ExprOutcome)>,
    pub n_unfiltered: usize,
    pub n_skipped: usize,
}

pub fn gold_outcomes(model: &ModelSet, corpus: &Corpus, table: &FeatureTable, opts: &EvalOptions) -> Result<GoldRun> {
    model.check_table(table)?;
    let features = RegionFeatures::new(corpus, table);
    let candidates = gold_candidates(corpus, &features);
    let (exprs, n_unfiltered) = select_exprs(corpus, opts.split, opts.filter_relational);
    let results: Vec<Option<(usize, ExprOutcome)>> = exprs
        .par_iter()
        .map(|e| -> Result<Option<(usize, ExprOutcome)>> {
            let Some(Some(cands)) = candidates.get(e.image_id.as_str()) else {
                return Ok(None);
            };
            let r = semantics::resolve(&e.tokens, cands, model)?;
            Ok(Some((
                e.tokens.len(),
                ExprOutcome {
                    rank: r.rank_of(&e.region_id),
                    tokens_known: r.tokens_known,
                    tokens_total: r.tokens_total,
                },
            )))
        })
        .collect::<Result<_>>()?;
    let n_skipped = results.iter().filter(|r| r.is_none()).count();
    Ok(GoldRun {
        outcomes: results.into_iter().flatten().collect(),
        n_unfiltered,
        n_skipped,
    })
}

pub fn evaluate_gold(model: &ModelSet, corpus: &Corpus, table: &FeatureTable, opts: &EvalOptions) -> Result<EvalReport> {
    let run = gold_outcomes(model, corpus, table, opts)?;
    if run.n_skipped > 0 {
        log::warn!("{} expressions skipped for missing features", run.n_skipped);
    }
    let outcomes: Vec<ExprOutcome> = run.outcomes.iter().map(|(_, o)| *o).collect();
    Ok(summarize(opts.label(), &outcomes, run.n_unfiltered, run.n_skipped, opts.mrr_exclude_abstained))
}

/// Accuracy of picking a uniformly random annotated region.
pub fn baseline_random(corpus: &Corpus, split: Split, filter_relational: bool, seed: u64) -> f64 {
    let by_image = corpus.regions_by_image();
    let (exprs, _) = select_exprs(corpus, split, filter_relational);
    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &["baseline", "random"]));
    let mut hits = 0usize;
    for e in &exprs {
        let regions = &by_image[e.image_id.as_str()];
        let pick = &regions[rng.random_range(0..regions.len())];
        hits += usize::from(pick.region_id == e.region_id);
    }
    if exprs.is_empty() { 0.0 } else { hits as f64 / exprs.len() as f64 }
}

/// Accuracy of always picking the largest annotated region.
pub fn baseline_largest(corpus: &Corpus, split: Split, filter_relational: bool) -> f64 {
    let by_image = corpus.regions_by_image();
    let largest: HashMap<&str, &str> = by_image
        .iter()
        .filter_map(|(img, regions)| {
            let mut best = regions.first()?;
            for r in regions {
                if r.bbox.area() > best.bbox.area() {
                    best = r;
                }
            }
            Some((*img, best.region_id.as_str()))
        })
        .collect();
    let (exprs, _) = select_exprs(corpus, split, filter_relational);
    let hits = exprs
        .iter()
        .filter(|e| largest.get(e.image_id.as_str()) == Some(&e.region_id.as_str()))
        .count();
    if exprs.is_empty() { 0.0 } else { hits as f64 / exprs.len() as f64 }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Baselines {
    pub random: f64,
    pub largest: f64,
}

pub fn baselines(corpus: &Corpus, split: Split, filter_relational: bool, seed: u64) -> Baselines {
    Baselines {
        random: baseline_random(corpus, split, filter_relational, seed),
        largest: baseline_largest(corpus, split, filter_relational),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProposalOptions {
    pub iou_threshold: f64,
    pub relaxed_k: usize,
    pub seed: u64,
}

impl Default for ProposalOptions {
    fn default() -> Self {
        Self {
            iou_threshold: DEFAULT_IOU_THRESHOLD,
            relaxed_k: DEFAULT_RELAXED_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalReport {
    pub label: String,
    pub n_total: usize,
    pub n_skipped: usize,
    pub p_at_1: f64,
    pub relaxed_k: usize,
    /// Success when any of the top `relaxed_k` proposals overlaps enough;
    /// absent when `relaxed_k` is 0.
    pub r_at_k: Option<f64>,
    pub rnd: f64,
    pub iou_threshold: f64,
}

pub fn evaluate_proposals(
    model: &ModelSet,
    corpus: &Corpus,
    table: &FeatureTable,
    opts: &EvalOptions,
    popts: &ProposalOptions,
) -> Result<ProposalReport> {
    model.check_table(table)?;
    let proposals = corpus
        .proposals
        .as_ref()
        .ok_or_else(|| Error::Config("corpus has no region proposals".into()))?;
    let features = RegionFeatures::new(corpus, table);

    let mut candidate_sets: HashMap<&str, CandidateSet> = HashMap::new();
    for (image, set) in proposals {
        let items: Option<Vec<_>> = set
            .boxes
            .iter()
            .enumerate()
            .map(|(i, b)| features.proposal(image, i, b).map(|v| (proposal_region_id(i), v)))
            .collect();
        if let Some(cands) = items.and_then(|items| CandidateSet::new(items).ok()) {
            candidate_sets.insert(image.as_str(), cands);
        }
    }

    let (exprs, _) = select_exprs(corpus, opts.split, opts.filter_relational);
    let usable: Vec<&RefExpr> = exprs
        .iter()
        .copied()
        .filter(|e| candidate_sets.contains_key(e.image_id.as_str()))
        .collect();
    let n_skipped = exprs.len() - usable.len();
    if n_skipped > 0 {
        log::warn!("{n_skipped} expressions skipped: no usable proposals for their image");
    }

    // Top-1 and relaxed hits per expression.
    let scored: Vec<(bool, bool)> = usable
        .par_iter()
        .map(|e| -> Result<(bool, bool)> {
            let cands = &candidate_sets[e.image_id.as_str()];
            let boxes = &proposals[e.image_id.as_str()].boxes;
            let gold = corpus.regions[&e.key()].bbox;
            let r = semantics::resolve(&e.tokens, cands, model)?;
            let Some(dist) = r.distribution else {
                return Ok((false, false));
            };
            let order = semantics::rank(&dist);
            let ok = |i: usize| iou(&boxes[i], &gold) >= popts.iou_threshold;
            let top = ok(order[0]);
            let relaxed = order.iter().take(popts.relaxed_k).any(|&i| ok(i));
            Ok((top, relaxed))
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(popts.seed, &["baseline", "proposal"]));
    let mut rnd_hits = 0usize;
    for e in &usable {
        let boxes = &proposals[e.image_id.as_str()].boxes;
        let gold = corpus.regions[&e.key()].bbox;
        let pick = rng.random_range(0..boxes.len());
        rnd_hits += usize::from(iou(&boxes[pick], &gold) >= popts.iou_threshold);
    }

    let n = usable.len();
    let frac = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
    Ok(ProposalReport {
        label: format!("proposals-{}", opts.label()),
        n_total: n,
        n_skipped,
        p_at_1: frac(scored.iter().filter(|s| s.0).count()),
        relaxed_k: popts.relaxed_k,
        r_at_k: (popts.relaxed_k > 0).then(|| frac(scored.iter().filter(|s| s.1).count())),
        rnd: frac(rnd_hits),
        iou_threshold: popts.iou_threshold,
    })
}

/// Reduced models for ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    PositionalOnly,
    VisualOnly,
    TopK(usize),
}

impl Ablation {
    pub fn label(&self) -> String {
        match self {
            Ablation::PositionalOnly => "pos".into(),
            Ablation::VisualOnly => "visual".into(),
            Ablation::TopK(k) => format!("top:{k}"),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pos" | "positional" | "positional_only" => Ok(Ablation::PositionalOnly),
            "visual" | "nopos" | "visual_only" => Ok(Ablation::VisualOnly),
            other => other
                .strip_prefix("top:")
                .and_then(|k| k.parse().ok())
                .map(Ablation::TopK)
                .ok_or_else(|| Error::Config(format!("unknown ablation {other:?} (pos, visual or top:K)"))),
        }
    }
}

/// Builds the reduced model for `variant`: feature variants retrain from
/// `base` with the matching mask, `TopK` restricts `model`.
pub fn ablated_model(
    corpus: &Corpus,
    table: &FeatureTable,
    model: &ModelSet,
    base: &TrainingConfig,
    variant: Ablation,
) -> Result<ModelSet> {
    let mask = match variant {
        Ablation::TopK(k) => {
            let (restricted, overflow) = model.restrict_top_k(k);
            if overflow {
                log::warn!("top:{k} exceeds the {} trained words; using all of them", model.len());
            }
            return Ok(restricted);
        }
        Ablation::PositionalOnly => FeatureMask::Positional,
        Ablation::VisualOnly => FeatureMask::Visual,
    };
    let config = TrainingConfig { mask, ..base.clone() };
    let vocabulary = trainer::build_vocabulary(corpus, &config)?;
    let features = RegionFeatures::new(corpus, table);
    let outcome = trainer::train_all(corpus, &vocabulary, &features, &config)?;
    Ok(outcome.model)
}

pub fn ablate(
    corpus: &Corpus,
    table: &FeatureTable,
    model: &ModelSet,
    base: &TrainingConfig,
    variant: Ablation,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let reduced = ablated_model(corpus, table, model, base, variant)?;
    let mut report = evaluate_gold(&reduced, corpus, table, opts)?;
    report.label = format!("{}-{}", variant.label(), opts.label());
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthBucket {
    pub length: usize,
    pub n: usize,
    pub accuracy: f64,
    /// Share of evaluated expressions with this length.
    pub fraction: f64,
}

pub fn length_buckets(outcomes: &[(usize, ExprOutcome)]) -> Vec<LengthBucket> {
    let mut by_len: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for (len, o) in outcomes {
        let b = by_len.entry(*len).or_default();
        b.0 += 1;
        b.1 += usize::from(o.is_hit());
    }
    let total = outcomes.len() as f64;
    by_len
        .into_iter()
        .map(|(length, (n, hits))| LengthBucket {
            length,
            n,
            accuracy: hits as f64 / n as f64,
            fraction: n as f64 / total,
        })
        .collect()
}

pub fn accuracy_by_length(
    model: &ModelSet,
    corpus: &Corpus,
    table: &FeatureTable,
    opts: &EvalOptions,
) -> Result<Vec<LengthBucket>> {
    Ok(length_buckets(&gold_outcomes(model, corpus, table, opts)?.outcomes))
}

/// Area under the precision/recall curve by running precision over the
/// positives in descending score order. `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let n_pos = labels.iter().filter(|l| **l).count();
    if n_pos == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut seen_pos = 0usize;
    let mut sum = 0.0;
    for (k, &i) in order.iter().enumerate() {
        if labels[i] {
            seen_pos += 1;
            sum += seen_pos as f64 / (k + 1) as f64;
        }
    }
    Some(sum / n_pos as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordAp {
    pub word: String,
    pub ap: f64,
    /// Positive training instances of the classifier.
    pub n_pos: usize,
    pub n_eval_pos: usize,
    pub n_eval_neg: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Sorted by descending AP.
    pub words: Vec<WordAp>,
    pub mean: f64,
    pub std: f64,
    /// Words with no positives in the evaluation split.
    pub omitted: Vec<String>,
}

/// AP of every classifier on `split`: positives are occurrences of the word
/// in that split, negatives are sampled like training negatives with a
/// fresh seed.
pub fn per_word_average_precision(
    model: &ModelSet,
    corpus: &Corpus,
    table: &FeatureTable,
    split: Split,
    seed: u64,
) -> Result<ApReport> {
    model.check_table(table)?;
    let features = RegionFeatures::new(corpus, table);
    let scaling = model.standardizer.as_ref().map_or(Scaling::None, Scaling::Use);
    let set = TrainingSet::for_split(corpus, &features, split, model.mask, model.config.filter_relational, scaling);
    let n_per_pos = model.config.neg_per_pos;

    let results: Vec<std::result::Result<WordAp, String>> = model
        .classifiers
        .values()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|c| {
            let pos = set.assemble_positives(&c.word);
            if pos.rows.is_empty() {
                return Err(c.word.clone());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed::derive(seed, &["ap", &c.word]));
            let neg = set
                .sample_negatives(&c.word, &pos, n_per_pos, false, &mut rng)
                .map_err(|_| c.word.clone())?;
            let mut scores = Vec::with_capacity(pos.rows.len() + neg.len());
            let mut labels = Vec::with_capacity(scores.capacity());
            for (&r, label) in pos.rows.iter().map(|r| (r, true)).chain(neg.iter().map(|r| (r, false))) {
                scores.push(c.logit(set.row(r)).map_err(|_| c.word.clone())?);
                labels.push(label);
            }
            Ok(WordAp {
                word: c.word.clone(),
                ap: average_precision(&scores, &labels).unwrap_or(0.0),
                n_pos: c.n_pos,
                n_eval_pos: pos.rows.len(),
                n_eval_neg: neg.len(),
            })
        })
        .collect();

    let mut words = Vec::new();
    let mut omitted = Vec::new();
    for r in results {
        match r {
            Ok(w) => words.push(w),
            Err(word) => omitted.push(word),
        }
    }
    words.sort_by(|a, b| b.ap.total_cmp(&a.ap).then_with(|| a.word.cmp(&b.word)));
    let n = words.len() as f64;
    let mean = if words.is_empty() { 0.0 } else { words.iter().map(|w| w.ap).sum::<f64>() / n };
    let std = if words.is_empty() {
        0.0
    } else {
        (words.iter().map(|w| (w.ap - mean).powi(2)).sum::<f64>() / n).sqrt()
    };
    Ok(ApReport { words, mean, std, omitted })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(Error::Config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Anything that can be exported as JSON or as a flat CSV table.
pub trait Tabular: Serialize {
    fn header() -> Vec<&'static str>;
    fn rows(&self) -> Vec<Vec<String>>;
}

impl Tabular for EvalReport {
    fn header() -> Vec<&'static str> {
        vec!["label", "pct_tst", "acc", "mrr", "arc", "frac_gt0", "acc_gt0", "n_total", "n_skipped"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.label.clone(),
            self.pct_tst.to_string(),
            self.acc.to_string(),
            self.mrr.to_string(),
            self.arc.to_string(),
            self.frac_gt0.to_string(),
            self.acc_gt0.to_string(),
            self.n_total.to_string(),
            self.n_skipped.to_string(),
        ]]
    }
}

impl<T: Tabular> Tabular for Vec<T> {
    fn header() -> Vec<&'static str> {
        T::header()
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.iter().flat_map(Tabular::rows).collect()
    }
}

impl Tabular for ProposalReport {
    fn header() -> Vec<&'static str> {
        vec!["label", "p_at_1", "r_at_k", "rnd", "relaxed_k", "iou_threshold", "n_total", "n_skipped"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.label.clone(),
            self.p_at_1.to_string(),
            self.r_at_k.map(|v| v.to_string()).unwrap_or_default(),
            self.rnd.to_string(),
            self.relaxed_k.to_string(),
            self.iou_threshold.to_string(),
            self.n_total.to_string(),
            self.n_skipped.to_string(),
        ]]
    }
}

impl Tabular for LengthBucket {
    fn header() -> Vec<&'static str> {
        vec!["length", "n", "accuracy", "fraction"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        vec![vec![
            self.length.to_string(),
            self.n.to_string(),
            self.accuracy.to_string(),
            self.fraction.to_string(),
        ]]
    }
}

impl Tabular for ApReport {
    fn header() -> Vec<&'static str> {
        vec!["word", "ap", "n_pos", "n_eval_pos", "n_eval_neg"]
    }

    fn rows(&self) -> Vec<Vec<String>> {
        self.words
            .iter()
            .map(|w| {
                vec![
                    w.word.clone(),
                    w.ap.to_string(),
                    w.n_pos.to_string(),
                    w.n_eval_pos.to_string(),
                    w.n_eval_neg.to_string(),
                ]
            })
            .collect()
    }
}

pub fn export_report<T: Tabular>(report: &T, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        ReportFormat::Json => {
            let mut json = serde_json::to_string_pretty(report)?;
            json.push('\n');
            fs::write(path, json).map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_path(path)?;
            w.write_record(T::header())?;
            for row in report.rows() {
                w.write_record(row)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

/// Writes `report` as CSV to any writer.
pub fn write_csv<T: Tabular, W: Write>(report: &T, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(T::header())?;
    for row in report.rows() {
        w.write_record(row)?;
    }
    w.flush().map_err(|e| Error::Io {
        path: "<csv>".into(),
        source: e,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn outcome(rank: Option<usize>, known: usize, total: usize) -> ExprOutcome {
        ExprOutcome {
            rank,
            tokens_known: known,
            tokens_total: total,
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &BBox::new(5.0, 5.0, 10.0, 10.0)) - 25.0 / 175.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(2.0, 2.0, 0.0, 5.0)), 0.0);
        // touching edges do not overlap
        assert_eq!(iou(&a, &BBox::new(10.0, 0.0, 10.0, 10.0)), 0.0);
    }

    #[test]
    fn metrics_for_ranks_1_2_4() {
        let o = [outcome(Some(1), 1, 1), outcome(Some(2), 1, 1), outcome(Some(4), 1, 1)];
        let r = summarize("t", &o, 3, 0, false);
        assert!((r.acc - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.mrr - (1.0 + 0.5 + 0.25) / 3.0).abs() < 1e-15);
        assert_eq!(r.pct_tst, 1.0);
    }

    #[test]
    fn abstentions_count_as_misses() {
        let o = [outcome(None, 0, 3), outcome(None, 0, 2)];
        let r = summarize("t", &o, 2, 0, false);
        assert_eq!((r.acc, r.frac_gt0, r.acc_gt0, r.mrr, r.arc), (0.0, 0.0, 0.0, 0.0, 0.0));

        let o = [outcome(None, 0, 4), outcome(Some(1), 3, 4), outcome(Some(2), 4, 4), outcome(Some(1), 2, 2)];
        let r = summarize("t", &o, 4, 0, false);
        assert_eq!(r.acc, 0.5);
        assert_eq!(r.frac_gt0, 0.75);
        assert!((r.acc_gt0 - 2.0 / 3.0).abs() < 1e-15);
        assert!(r.acc <= r.acc_gt0);
        assert!((r.arc - (0.0 + 0.75 + 1.0 + 1.0) / 4.0).abs() < 1e-15);
        let ex = summarize("t", &o, 4, 0, true);
        assert!((ex.mrr - 2.5 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn average_precision_perfect_and_simple() {
        assert_eq!(average_precision(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]), Some(1.0));
        // ranking: pos, neg, pos -> (1 + 2/3) / 2
        let ap = average_precision(&[0.9, 0.5, 0.4], &[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(average_precision(&[0.3], &[false]), None);
    }

    #[test]
    fn random_scores_give_ap_near_positive_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20_000;
        let labels: Vec<bool> = (0..n).map(|i| i % 2 == 0).collect();
        let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        let ap = average_precision(&scores, &labels).unwrap();
        assert!((ap - 0.5).abs() < 0.05, "{ap}");
    }

    #[test]
    fn length_buckets_partition() {
        let o = vec![
            (1, outcome(Some(1), 1, 1)),
            (1, outcome(Some(1), 1, 1)),
            (2, outcome(Some(2), 2, 2)),
            (3, outcome(None, 0, 3)),
        ];
        let b = length_buckets(&o);
        assert_eq!(b.len(), 3);
        assert_eq!(b[0].accuracy, 1.0);
        assert_eq!(b[1].accuracy, 0.0);
        assert!((b.iter().map(|x| x.fraction).sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn ablation_parsing() {
        assert_eq!("pos".parse::<Ablation>().unwrap(), Ablation::PositionalOnly);
        assert_eq!("visual".parse::<Ablation>().unwrap(), Ablation::VisualOnly);
        assert_eq!("top:20".parse::<Ablation>().unwrap(), Ablation::TopK(20));
        assert!("top:x".parse::<Ablation>().is_err());
        assert_eq!(Ablation::TopK(20).label(), "top:20");
    }

    #[test]
    fn csv_header_order() {
        let r = summarize("full", &[outcome(Some(1), 1, 1)], 1, 0, false);
        let mut buf = Vec::new();
        write_csv(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("label,pct_tst,acc,mrr,arc,frac_gt0,acc_gt0,n_total,n_skipped\n"));
        let mut buf = Vec::new();
        write_csv(&ApReport { words: vec![], mean: 0.0, std: 0.0, omitted: vec![] }, &mut buf).unwrap();
        assert!(String::from_utf8(buf).unwrap().contains("n_pos"));
    }
}
