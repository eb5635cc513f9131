use anyhow::{bail, Result};
use serde::{Deserialize, Serialize};
use wac_core::{seed, trainer, ModelSet, WordClassifier};

use crate::commands::{self, print_json};
use crate::config::RunConfig;
use crate::InspectArgs;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Weight {
    pub index: usize,
    pub feature: String,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordCard {
    pub word: String,
    pub n_pos: usize,
    pub n_neg: usize,
    pub bias: f64,
    pub nonzero_weights: usize,
    pub dim: usize,
    pub top_positive: Vec<Weight>,
    pub top_negative: Vec<Weight>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ap: Option<f64>,
}

pub fn card(model: &ModelSet, c: &WordClassifier, top: usize) -> WordCard {
    let names = model.feature_names();
    let mut order: Vec<usize> = (0..c.weights.len()).collect();
    order.sort_by(|&a, &b| c.weights[b].total_cmp(&c.weights[a]).then(a.cmp(&b)));
    let weight = |i: usize| Weight {
        index: i,
        feature: names[i].clone(),
        weight: c.weights[i],
    };
    let top_positive = order.iter().copied().filter(|&i| c.weights[i] > 0.0).take(top).map(weight).collect();
    let top_negative = order.iter().rev().copied().filter(|&i| c.weights[i] < 0.0).take(top).map(weight).collect();
    WordCard {
        word: c.word.clone(),
        n_pos: c.n_pos,
        n_neg: c.n_neg,
        bias: c.bias,
        nonzero_weights: c.weights.iter().filter(|w| **w != 0.0).count(),
        dim: c.weights.len(),
        top_positive,
        top_negative,
        ap: None,
    }
}

/// Vocabulary entries closest to `word` by edit distance.
pub fn suggestions(model: &ModelSet, word: &str, n: usize) -> Vec<String> {
    let mut scored: Vec<(usize, &String)> = model
        .classifiers
        .keys()
        .map(|w| (strsim::levenshtein(word, w), w))
        .collect();
    scored.sort();
    scored.into_iter().take(n).map(|(_, w)| w.clone()).collect()
}

fn print_card(card: &WordCard) {
    println!("word      {}", card.word);
    println!("instances {} positive, {} negative", card.n_pos, card.n_neg);
    println!("bias      {:.6}", card.bias);
    println!("nonzero   {} of {}", card.nonzero_weights, card.dim);
    if let Some(ap) = card.ap {
        println!("ap        {ap:.4}");
    }
    for (title, list) in [("positive", &card.top_positive), ("negative", &card.top_negative)] {
        println!("top {title}:");
        for w in list {
            println!("  {:>5}  {:<14} {:+.6}", w.index, w.feature, w.weight);
        }
    }
}

pub fn run(mut cfg: RunConfig, a: InspectArgs) -> Result<()> {
    let with_data = a.data.data.is_some() || a.data.features.is_some();
    commands::apply_data(&mut cfg, a.data);
    if a.model.is_some() {
        cfg.model = a.model;
    }
    let model = trainer::load_model(cfg.model_path()?)?;
    let word = a.word.to_lowercase();
    let Some(classifier) = model.get(&word) else {
        let near = suggestions(&model, &word, 5);
        bail!("no classifier for {word:?}; nearest vocabulary entries: {}", near.join(", "));
    };
    let mut card = card(&model, classifier, a.top);
    if with_data {
        let (corpus, _) = commands::load_corpus(&cfg)?;
        let table = commands::load_table(&cfg)?;
        model.check_table(&table)?;
        let s = seed::derive(cfg.seed.unwrap_or(model.config.seed), &["ap"]);
        let single = model.restrict_words(&[word.as_str()]);
        let report = wac_core::eval::per_word_average_precision(&single, &corpus, &table, a.ap_split, s)?;
        card.ap = report.words.first().map(|w| w.ap);
    }
    if a.json {
        print_json(&card)
    } else {
        print_card(&card);
        Ok(())
    }
}
