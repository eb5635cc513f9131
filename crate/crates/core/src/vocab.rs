//! Word counts over training expressions and classifier vocabulary selection.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Split};
use crate::error::{Error, Result};

pub const DEFAULT_MIN_COUNT: usize = 40;

pub type Counts = BTreeMap<String, usize>;

/// Token occurrences across train expressions. Repeated tokens inside one
/// expression count once per occurrence.
pub fn count_words(corpus: &Corpus, filter_relational: bool) -> Counts {
    let mut counts = Counts::new();
    for expr in corpus.exprs_in(Split::Train) {
        if filter_relational && expr.is_relational() {
            continue;
        }
        for tok in &expr.tokens {
            *counts.entry(tok.clone()).or_default() += 1;
        }
    }
    counts
}

/// Tokens whose count is at least `min_count`.
pub fn select(counts: &Counts, min_count: usize) -> Result<BTreeSet<String>> {
    if min_count < 1 {
        return Err(Error::MinCount(min_count));
    }
    Ok(counts
        .iter()
        .filter(|(_, &c)| c >= min_count)
        .map(|(w, _)| w.clone())
        .collect())
}

/// Pointwise sum, for training on several corpora at once.
pub fn merge_counts<'a>(parts: impl IntoIterator<Item = &'a Counts>) -> Counts {
    let mut out = Counts::new();
    for part in parts {
        for (w, c) in part {
            *out.entry(w.clone()).or_default() += c;
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    pub min_count: usize,
    pub counts: Counts,
    pub selected: BTreeSet<String>,
}

impl Vocabulary {
    pub fn from_counts(counts: Counts, min_count: usize) -> Result<Self> {
        let selected = select(&counts, min_count)?;
        Ok(Self {
            min_count,
            counts,
            selected,
        })
    }

    pub fn build(corpus: &Corpus, filter_relational: bool, min_count: usize) -> Result<Self> {
        Self::from_counts(count_words(corpus, filter_relational), min_count)
    }

    pub fn len(&self) -> usize {
        self.selected.len()
    }

    pub fn is_empty(&self) -> bool {
        self.selected.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.selected.contains(word)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{ImageRecord, RefExpr};
    use proptest::prelude::*;

    fn corpus(texts: &[(&str, Split)]) -> Corpus {
        let mut c = Corpus::default();
        c.images.insert(
            "i".into(),
            ImageRecord {
                image_id: "i".into(),
                width: 10,
                height: 10,
                split: Some(Split::Train),
            },
        );
        c.exprs = texts
            .iter()
            .map(|(t, s)| RefExpr::new("i", "r", *t, Some(*s)))
            .collect();
        c
    }

    #[test]
    fn counts_occurrences() {
        let c = corpus(&[
            ("red ball", Split::Train),
            ("red cube", Split::Train),
            ("the red red thing", Split::Train),
            ("red", Split::Test),
        ]);
        let counts = count_words(&c, false);
        assert_eq!(counts["red"], 4);
        assert_eq!(counts["the"], 1);
    }

    #[test]
    fn relational_filter_excludes_whole_expression() {
        let c = corpus(&[("red ball", Split::Train), ("cube next to red ball", Split::Train)]);
        let counts = count_words(&c, true);
        assert_eq!(counts.get("cube"), None);
        assert_eq!(counts["red"], 1);
        assert_eq!(count_words(&c, false)["red"], 2);
    }

    #[test]
    fn empty_train_split() {
        let c = corpus(&[("red", Split::Test)]);
        assert!(count_words(&c, false).is_empty());
    }

    #[test]
    fn threshold_is_inclusive() {
        let counts: Counts = [("a".to_string(), 40), ("b".to_string(), 39)].into();
        let sel = select(&counts, 40).unwrap();
        assert!(sel.contains("a"));
        assert!(!sel.contains("b"));
        assert_eq!(select(&counts, 1).unwrap().len(), 2);
        assert!(matches!(select(&counts, 0), Err(Error::MinCount(0))));
    }

    #[test]
    fn merging_can_cross_threshold() {
        let a: Counts = [("red".to_string(), 30)].into();
        let b: Counts = [("red".to_string(), 15)].into();
        let merged = merge_counts([&a, &b]);
        assert_eq!(merged["red"], 45);
        assert!(select(&a, 40).unwrap().is_empty());
        assert!(select(&merged, 40).unwrap().contains("red"));
        assert_eq!(merge_counts([&a, &Counts::new()]), a);
    }

    proptest! {
        #[test]
        fn merge_is_pointwise_sum_and_selection_monotone(
            a in proptest::collection::btree_map("[a-e]", 0usize..80, 0..5),
            b in proptest::collection::btree_map("[a-e]", 0usize..80, 0..5),
            t in 1usize..80,
        ) {
            let m = merge_counts([&a, &b]);
            for w in a.keys().chain(b.keys()) {
                prop_assert_eq!(m[w], a.get(w).copied().unwrap_or(0) + b.get(w).copied().unwrap_or(0));
            }
            let sel = select(&m, t).unwrap();
            for w in select(&a, t).unwrap().union(&select(&b, t).unwrap()) {
                prop_assert!(sel.contains(w));
            }
        }
    }
}
