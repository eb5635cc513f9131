//! Word intensions applied to candidate regions, their extensions as
//! distributions over candidates, multiplicative composition, and selection
//! of the referent.
//!
//! Distributions are held as log-probabilities; composition sums logs and
//! renormalizes with log-sum-exp, so long expressions do not underflow.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::features::FeatureVector;
use crate::trainer::{log_sigmoid, sigmoid, ModelSet, WordClassifier};

/// Candidate referents, in a fixed order that also breaks ties.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    ids: Vec<String>,
    vectors: Vec<FeatureVector>,
}

impl CandidateSet {
    pub fn new(items: impl IntoIterator<Item = (String, FeatureVector)>) -> Result<Self> {
        let (ids, vectors): (Vec<String>, Vec<FeatureVector>) = items.into_iter().unzip();
        if ids.is_empty() {
            return Err(Error::Shape("candidate set is empty".into()));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
            return Err(Error::Shape(format!("duplicate candidate id {dup:?}")));
        }
        Ok(Self { ids, vectors })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn vectors(&self) -> &[FeatureVector] {
        &self.vectors
    }
}

/// Normalized distribution over the candidates of a [`CandidateSet`].
#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    log_probs: Vec<f64>,
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY || m.is_nan() {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl Distribution {
    /// Normalizes unnormalized log-scores.
    pub fn from_log_scores(log_scores: &[f64]) -> Result<Self> {
        if log_scores.is_empty() {
            return Err(Error::Shape("empty distribution".into()));
        }
        let z = log_sum_exp(log_scores);
        if !z.is_finite() {
            return Err(Error::Shape("distribution has no finite mass".into()));
        }
        Ok(Self {
            log_probs: log_scores.iter().map(|l| l - z).collect(),
        })
    }

    /// Normalizes nonnegative scores.
    pub fn from_scores(scores: &[f64]) -> Result<Self> {
        if scores.iter().any(|s| s.is_nan() || *s < 0.0 || s.is_infinite()) {
            return Err(Error::Shape("scores must be finite and nonnegative".into()));
        }
        let logs: Vec<f64> = scores.iter().map(|s| s.ln()).collect();
        Self::from_log_scores(&logs)
    }

    pub fn uniform(k: usize) -> Result<Self> {
        Self::from_log_scores(&vec![0.0; k])
    }

    pub fn len(&self) -> usize {
        self.log_probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_probs.is_empty()
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs.iter().map(|l| l.exp()).collect()
    }
}

/// Applicability of a word to one prepared region vector, in (0, 1).
pub fn apply_word(classifier: &WordClassifier, x: &[f64]) -> Result<f64> {
    classifier.logit(x).map(sigmoid)
}

/// The word's extension over prepared candidate vectors.
pub fn word_extension<V: AsRef<[f64]>>(classifier: &WordClassifier, candidates: &[V]) -> Result<Distribution> {
    let logs = candidates
        .iter()
        .map(|x| classifier.logit(x.as_ref()).map(log_sigmoid))
        .collect::<Result<Vec<_>>>()?;
    Distribution::from_log_scores(&logs)
}

/// A way of combining the extensions of a construction's parts.
pub trait Composition {
    fn name(&self) -> &'static str;
    fn compose(&self, parts: &[Distribution]) -> Result<Distribution>;
}

/// Componentwise product, renormalized over the candidates.
#[derive(Debug, Clone, Copy, Default)]
pub struct NominalProduct;

impl Composition for NominalProduct {
    fn name(&self) -> &'static str {
        "nom"
    }

    fn compose(&self, parts: &[Distribution]) -> Result<Distribution> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("nothing to compose".into()))?;
        let k = first.len();
        let mut acc = vec![0.0; k];
        for d in parts {
            if d.len() != k {
                return Err(Error::Dimension {
                    expected: k,
                    actual: d.len(),
                });
            }
            for (a, l) in acc.iter_mut().zip(&d.log_probs) {
                *a += l;
            }
        }
        Distribution::from_log_scores(&acc)
    }
}

pub fn compose_nom(parts: &[Distribution]) -> Result<Distribution> {
    NominalProduct.compose(parts)
}

/// Index of the most probable candidate, lowest index on ties.
pub fn select_the(dist: &Distribution) -> usize {
    let mut best = 0;
    for (i, &l) in dist.log_probs.iter().enumerate() {
        if l > dist.log_probs[best] {
            best = i;
        }
    }
    best
}

/// Candidate indices by descending probability; stable on ties.
pub fn rank(dist: &Distribution) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dist.len()).collect();
    order.sort_by(|&a, &b| dist.log_probs[b].total_cmp(&dist.log_probs[a]));
    order
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolutionResult {
    /// Candidate ids, most probable first. Empty when abstained.
    pub ranking: Vec<String>,
    /// Composed distribution; `None` when abstained.
    pub distribution: Option<Distribution>,
    pub tokens_total: usize,
    pub tokens_known: usize,
    pub abstained: bool,
}

impl ResolutionResult {
    /// 1-based rank of `id`, `None` if abstained or absent.
    pub fn rank_of(&self, id: &str) -> Option<usize> {
        self.ranking.iter().position(|r| r == id).map(|p| p + 1)
    }

    pub fn known_fraction(&self) -> f64 {
        if self.tokens_total == 0 {
            0.0
        } else {
            self.tokens_known as f64 / self.tokens_total as f64
        }
    }
}

/// Resolves a tokenized expression against candidates. Tokens without a
/// classifier are skipped; each known occurrence contributes one factor.
pub fn resolve<S: AsRef<str>>(tokens: &[S], candidates: &CandidateSet, model: &ModelSet) -> Result<ResolutionResult> {
    let known: Vec<&WordClassifier> = tokens.iter().filter_map(|t| model.get(t.as_ref())).collect();
    if known.is_empty() {
        return Ok(ResolutionResult {
            ranking: Vec::new(),
            distribution: None,
            tokens_total: tokens.len(),
            tokens_known: 0,
            abstained: true,
        });
    }
    let prepared = candidates
        .vectors()
        .iter()
        .map(|v| model.prepare(v))
        .collect::<Result<Vec<_>>>()?;
    let parts = known
        .iter()
        .map(|c| word_extension(c, &prepared))
        .collect::<Result<Vec<_>>>()?;
    let dist = compose_nom(&parts)?;
    let ranking = rank(&dist)
        .into_iter()
        .map(|i| candidates.ids()[i].clone())
        .collect();
    Ok(ResolutionResult {
        ranking,
        distribution: Some(dist),
        tokens_total: tokens.len(),
        tokens_known: known.len(),
        abstained: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureMask;
    use crate::trainer::TrainingConfig;
    use crate::vocab::Vocabulary;
    use proptest::prelude::*;
    use std::collections::BTreeMap;

    fn clf(word: &str, weights: Vec<f64>, bias: f64) -> WordClassifier {
        WordClassifier {
            word: word.into(),
            weights,
            bias,
            n_pos: 1,
            n_neg: 5,
        }
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn apply_word_values() {
        assert_eq!(apply_word(&clf("w", vec![0.0, 0.0], 0.0), &[5.0, -2.0]).unwrap(), 0.5);
        let p = apply_word(&clf("w", vec![1.0], 0.0), &[3f64.ln()]).unwrap();
        assert!((p - 0.75).abs() < 1e-15);
        let c = clf("w", vec![2.0, -1.0], 0.1);
        assert!(apply_word(&c, &[1.0, 0.0]).unwrap() > apply_word(&c, &[0.5, 0.0]).unwrap());
        assert!(matches!(apply_word(&c, &[1.0]), Err(Error::Dimension { .. })));
    }

    #[test]
    fn extension_normalizes_raw_scores() {
        let d = Distribution::from_scores(&[0.9, 0.3, 0.3]).unwrap();
        assert_close(&d.probs(), &[0.6, 0.2, 0.2], 1e-12);
        assert_close(&Distribution::from_scores(&[0.42]).unwrap().probs(), &[1.0], 1e-15);
        // classifier route: equal logits give a uniform extension
        let c = clf("w", vec![0.0], 0.3);
        let d = word_extension(&c, &[[1.0], [2.0], [3.0], [4.0]]).unwrap();
        assert_close(&d.probs(), &[0.25; 4], 1e-15);
    }

    #[test]
    fn compose_examples() {
        let a = Distribution::from_scores(&[0.6, 0.2, 0.2]).unwrap();
        let b = Distribution::from_scores(&[0.25, 0.5, 0.25]).unwrap();
        let c = compose_nom(&[a.clone(), b]).unwrap();
        assert_close(&c.probs(), &[0.5, 1.0 / 3.0, 1.0 / 6.0], 1e-12);
        assert_eq!(select_the(&c), 0);
        assert_close(&compose_nom(std::slice::from_ref(&a)).unwrap().probs(), &a.probs(), 1e-15);
        let u = Distribution::uniform(3).unwrap();
        assert_close(&compose_nom(&[a.clone(), u]).unwrap().probs(), &a.probs(), 1e-15);
        assert!(compose_nom(&[]).is_err());
        assert!(compose_nom(&[a, Distribution::uniform(2).unwrap()]).is_err());
    }

    #[test]
    fn ties_pick_first_candidate() {
        assert_eq!(select_the(&Distribution::from_scores(&[0.5, 0.5]).unwrap()), 0);
        assert_eq!(rank(&Distribution::from_scores(&[0.2, 0.4, 0.4]).unwrap()), vec![1, 2, 0]);
    }

    #[test]
    fn long_products_do_not_underflow() {
        let tiny = Distribution::from_log_scores(&[-400.0, -401.0, -800.0]).unwrap();
        let parts = vec![tiny; 12];
        let c = compose_nom(&parts).unwrap();
        assert!((c.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(select_the(&c), 0);
    }

    proptest! {
        #[test]
        fn argmax_is_permutation_equivariant(scores in proptest::collection::vec(0.01f64..1.0, 2..8), rot in 0usize..8) {
            let k = scores.len();
            let r = rot % k;
            let mut rotated = scores.clone();
            rotated.rotate_left(r);
            let i = select_the(&Distribution::from_scores(&scores).unwrap());
            let j = select_the(&Distribution::from_scores(&rotated).unwrap());
            prop_assert!((scores[i] - rotated[j]).abs() == 0.0);
        }

        #[test]
        fn composition_commutes(a in proptest::collection::vec(0.01f64..1.0, 4), b in proptest::collection::vec(0.01f64..1.0, 4), c in proptest::collection::vec(0.01f64..1.0, 4)) {
            let (a, b, c) = (
                Distribution::from_scores(&a).unwrap(),
                Distribution::from_scores(&b).unwrap(),
                Distribution::from_scores(&c).unwrap(),
            );
            let abc = compose_nom(&[a.clone(), b.clone(), c.clone()]).unwrap().probs();
            let cba = compose_nom(&[c.clone(), b.clone(), a.clone()]).unwrap().probs();
            let nested = compose_nom(&[compose_nom(&[a, b]).unwrap(), c]).unwrap().probs();
            for ((x, y), z) in abc.iter().zip(&cba).zip(&nested) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!((x - z).abs() < 1e-12);
            }
        }
    }

    fn model(words: &[(&str, Vec<f64>)]) -> ModelSet {
        let classifiers: BTreeMap<String, WordClassifier> = words
            .iter()
            .map(|(w, weights)| (w.to_string(), clf(w, weights.clone(), 0.0)))
            .collect();
        ModelSet {
            dim_visual: 1,
            mask: FeatureMask::Full,
            standardizer: None,
            classifiers,
            vocabulary: Vocabulary::from_counts(Default::default(), 1).unwrap(),
            config: TrainingConfig::default(),
        }
    }

    fn candidates(n: usize) -> CandidateSet {
        CandidateSet::new((0..n).map(|i| {
            let mut v = vec![i as f64];
            v.extend([0.1 * i as f64; 7]);
            (format!("c{i}"), FeatureVector(v))
        }))
        .unwrap()
    }

    #[test]
    fn resolve_counts_known_tokens() {
        let m = model(&[
            ("red", vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
            ("ball", vec![0.5; 8]),
            ("left", vec![-1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]),
        ]);
        let cands = candidates(3);
        let r = resolve(&["red", "ball", "left", "thing"], &cands, &m).unwrap();
        assert_eq!((r.tokens_known, r.tokens_total), (3, 4));
        assert!((r.known_fraction() - 0.75).abs() < 1e-15);
        assert!(!r.abstained);
        assert_eq!(r.ranking.len(), 3);

        let none = resolve(&["what", "is", "this"], &cands, &m).unwrap();
        assert!(none.abstained && none.ranking.is_empty() && none.distribution.is_none());
    }

    #[test]
    fn one_word_resolution_equals_extension() {
        let m = model(&[("red", vec![0.7, 0.1, -0.2, 0.0, 0.3, 0.0, 0.5, 0.0])]);
        let cands = candidates(4);
        let r = resolve(&["red"], &cands, &m).unwrap();
        let prepared: Vec<Vec<f64>> = cands.vectors().iter().map(|v| m.prepare(v).unwrap()).collect();
        let ext = word_extension(m.get("red").unwrap(), &prepared).unwrap();
        assert_eq!(r.distribution.unwrap(), ext);
    }

    #[test]
    fn resolve_rejects_wrong_dimension() {
        let m = model(&[("red", vec![1.0; 8])]);
        let bad = CandidateSet::new([("a".to_string(), FeatureVector(vec![0.0; 5]))]).unwrap();
        assert!(matches!(resolve(&["red"], &bad, &m), Err(Error::Dimension { .. })));
    }

    #[test]
    fn candidate_ids_must_be_unique() {
        let v = FeatureVector(vec![0.0]);
        assert!(CandidateSet::new([("a".to_string(), v.clone()), ("a".to_string(), v)]).is_err());
        assert!(CandidateSet::new(Vec::new()).is_err());
    }
}
