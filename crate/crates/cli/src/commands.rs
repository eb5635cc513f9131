use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::Serialize;
use wac_core::corpus::{self, LoadReport};
use wac_core::eval::{self, Ablation, ApReport, EvalOptions, EvalReport, LengthBucket, ProposalOptions, ProposalReport, ReportFormat};
use wac_core::features::{self, proposal_region_id, FeatureTable, RegionFeatures};
use wac_core::semantics::{self, CandidateSet};
use wac_core::synthworld::{self, parse_template};
use wac_core::trainer::{self, WordFailure, WordStats};
use wac_core::{seed, Corpus, ModelSet};

use crate::config::{NrMode, RunConfig};
use crate::{DataArgs, EvalArgs, ResolveArgs, Switch, SynthArgs, TrainArgs};

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

pub(crate) fn apply_data(cfg: &mut RunConfig, d: DataArgs) {
    let fields = [
        (&mut cfg.data, d.data),
        (&mut cfg.images, d.images),
        (&mut cfg.regions, d.regions),
        (&mut cfg.expressions, d.expressions),
        (&mut cfg.features, d.features),
    ];
    for (slot, value) in fields {
        if value.is_some() {
            *slot = value;
        }
    }
    if d.split_ratios.is_some() {
        cfg.split_ratios = d.split_ratios;
    }
}

pub(crate) fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn log_load(report: &LoadReport) {
    if *report != LoadReport::default() {
        log::warn!("corpus loaded with fixes: {report:?}");
    }
}

pub(crate) fn load_corpus(cfg: &RunConfig) -> Result<(Corpus, LoadReport)> {
    let paths = cfg.corpus_paths()?;
    let (mut corpus, report) = corpus::load_corpus(&paths)?;
    log_load(&report);
    if let Some(ratios) = cfg.split_ratios {
        let s = seed::derive(cfg.training.seed, &["split"]);
        corpus = corpus::split_corpus(corpus, ratios, s)?;
    } else if !corpus.is_split() {
        bail!("corpus has untagged expressions; tag splits in the files or pass --split-ratios");
    }
    Ok((corpus, report))
}

pub(crate) fn load_table(cfg: &RunConfig) -> Result<FeatureTable> {
    Ok(features::load_feature_table(cfg.features_path()?)?)
}

pub fn synth(mut cfg: RunConfig, a: SynthArgs) -> Result<()> {
    let s = &mut cfg.synth;
    set(&mut s.n_scenes, a.scenes);
    set(&mut s.test_fraction, a.test_fraction);
    set(&mut s.candidates_per_scene, a.k);
    set(&mut s.dim_visual, a.dim);
    set(&mut s.noise_sigma, a.sigma);
    set(&mut s.exprs_per_scene, a.exprs_per_scene);
    set(&mut s.proposals_per_scene, a.proposals);
    if !a.templates.is_empty() {
        s.templates = a.templates.iter().map(|t| parse_template(t)).collect::<Result<_, _>>()?;
    }
    let out = a.out.or(cfg.out).context("no output directory: pass --out DIR")?;
    let world = synthworld::generate(&cfg.synth)?;
    synthworld::write_world(&world, &out)?;
    let cfg_path = out.join("synth.json");
    fs::write(&cfg_path, serde_json::to_string_pretty(&cfg.synth)? + "\n")
        .with_context(|| format!("writing {}", cfg_path.display()))?;

    #[derive(Serialize)]
    struct Summary<'a> {
        out: &'a Path,
        scenes: usize,
        test_scenes: usize,
        regions: usize,
        expressions: usize,
        feature_rows: usize,
        redrawn_scenes: usize,
        inventory: Vec<String>,
    }
    print_json(&Summary {
        out: &out,
        scenes: cfg.synth.n_scenes,
        test_scenes: cfg.synth.n_test(),
        regions: world.corpus.regions.len(),
        expressions: world.corpus.exprs.len(),
        feature_rows: world.table.len(),
        redrawn_scenes: world.gold.redrawn_scenes,
        inventory: cfg.synth.inventory(),
    })
}

#[derive(Serialize)]
struct TrainingLog<'a> {
    model: &'a Path,
    vocabulary_size: usize,
    trained: usize,
    corpus: &'a LoadReport,
    words: &'a [WordStats],
    failures: &'a [WordFailure],
}

fn default_log_path(model: &Path) -> PathBuf {
    let stem = model.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    model.with_file_name(format!("{stem}.log.json"))
}

pub fn train(mut cfg: RunConfig, a: TrainArgs) -> Result<()> {
    apply_data(&mut cfg, a.data);
    set(&mut cfg.model, a.model.map(Some));
    let t = &mut cfg.training;
    set(&mut t.min_count, a.min_count);
    set(&mut t.neg_per_pos, a.neg_per_pos);
    set(&mut t.l1, a.l1);
    set(&mut t.max_epochs, a.max_epochs);
    set(&mut t.tol, a.tol);
    set(&mut t.mask, a.mask);
    set(&mut t.filter_relational, a.filter_relational.map(|s| s == Switch::On));
    t.count_before_filter |= a.count_before_filter;
    t.exclude_same_image |= a.exclude_same_image;
    t.standardize |= a.standardize;
    t.validate()?;

    let model_path = cfg.model_path()?;
    let (corpus, load_report) = load_corpus(&cfg)?;
    let table = load_table(&cfg)?;
    let vocabulary = trainer::build_vocabulary(&corpus, &cfg.training)?;
    log::info!("vocabulary: {} words", vocabulary.len());
    let features = RegionFeatures::new(&corpus, &table);
    let outcome = trainer::train_all(&corpus, &vocabulary, &features, &cfg.training)?;

    let log_path = a.log.unwrap_or_else(|| default_log_path(&model_path));
    let log = TrainingLog {
        model: &model_path,
        vocabulary_size: vocabulary.len(),
        trained: outcome.model.len(),
        corpus: &load_report,
        words: &outcome.stats,
        failures: &outcome.failures,
    };
    if let Some(dir) = model_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(&log_path, serde_json::to_string_pretty(&log)? + "\n")
        .with_context(|| format!("writing {}", log_path.display()))?;
    if a.strict && !outcome.failures.is_empty() {
        let words: Vec<&str> = outcome.failures.iter().map(|f| f.word.as_str()).collect();
        bail!("{} words failed to train (--strict): {}", words.len(), words.join(", "));
    }
    trainer::save_model(&outcome.model, &model_path)?;

    #[derive(Serialize)]
    struct Summary<'a> {
        model: &'a Path,
        log: &'a Path,
        vocabulary_size: usize,
        trained: usize,
        failures: &'a [WordFailure],
    }
    print_json(&Summary {
        model: &model_path,
        log: &log_path,
        vocabulary_size: vocabulary.len(),
        trained: outcome.model.len(),
        failures: &outcome.failures,
    })
}

#[derive(Serialize)]
struct Labeled<T> {
    label: String,
    #[serde(flatten)]
    value: T,
}

#[derive(Serialize)]
struct EvaluateOutput {
    #[serde(skip_serializing_if = "Vec::is_empty")]
    reports: Vec<EvalReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    proposals: Vec<ProposalReport>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    baselines: Vec<Labeled<eval::Baselines>>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    by_length: Vec<Labeled<Buckets>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ap: Option<ApReport>,
}

#[derive(Serialize)]
struct Buckets {
    buckets: Vec<LengthBucket>,
}

fn sibling(path: &Path, kind: &str) -> PathBuf {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("report");
    path.with_file_name(format!("{stem}.{kind}.csv"))
}

pub fn evaluate(mut cfg: RunConfig, a: EvalArgs) -> Result<()> {
    apply_data(&mut cfg, a.data);
    set(&mut cfg.model, a.model.map(Some));
    let use_proposals = a.proposals.is_some();
    if use_proposals {
        cfg.proposals = a.proposals;
    }
    let e = &mut cfg.eval;
    set(&mut e.split, a.split);
    set(&mut e.nr, a.nr);
    set(&mut e.iou_thresh, a.iou_thresh);
    set(&mut e.topk, a.topk);
    e.mrr_exclude_abstained |= a.mrr_exclude_abstained;
    let settings = cfg.eval.clone();
    let ablation: Option<Ablation> = a.ablate.as_deref().map(str::parse).transpose()?;

    let model_path = cfg.model_path()?;
    let (corpus, _) = load_corpus(&cfg)?;
    let table = load_table(&cfg)?;
    let model = trainer::load_model_for(&model_path, &table)?;
    let seed = cfg.seed.unwrap_or(model.config.seed);
    let reduced: ModelSet;
    let used = match ablation {
        Some(variant) => {
            reduced = eval::ablated_model(&corpus, &table, &model, &model.config, variant)?;
            &reduced
        }
        None => &model,
    };
    let prefix = |label: &str| match ablation {
        Some(v) => format!("{}-{label}", v.label()),
        None => label.to_string(),
    };

    let filters: &[bool] = match settings.nr {
        NrMode::Off => &[false],
        NrMode::On => &[true],
        NrMode::Both => &[false, true],
    };
    let mut out = EvaluateOutput {
        reports: Vec::new(),
        proposals: Vec::new(),
        baselines: Vec::new(),
        by_length: Vec::new(),
        ap: None,
    };
    for &filter_relational in filters {
        let opts = EvalOptions {
            split: settings.split,
            filter_relational,
            mrr_exclude_abstained: settings.mrr_exclude_abstained,
        };
        if use_proposals {
            let popts = ProposalOptions {
                iou_threshold: settings.iou_thresh,
                relaxed_k: settings.topk,
                seed: seed::derive(seed, &["proposals-random"]),
            };
            let mut r = eval::evaluate_proposals(used, &corpus, &table, &opts, &popts)?;
            r.label = prefix(&r.label);
            out.proposals.push(r);
        } else {
            let mut r = eval::evaluate_gold(used, &corpus, &table, &opts)?;
            r.label = prefix(&r.label);
            out.reports.push(r);
        }
        if a.baselines {
            let b = eval::baselines(&corpus, opts.split, filter_relational, seed::derive(seed, &["baseline-random"]));
            out.baselines.push(Labeled {
                label: opts.label().into(),
                value: b,
            });
        }
        if a.by_length {
            let buckets = eval::accuracy_by_length(used, &corpus, &table, &opts)?;
            out.by_length.push(Labeled {
                label: prefix(opts.label()),
                value: Buckets { buckets },
            });
        }
    }
    if a.ap {
        out.ap = Some(eval::per_word_average_precision(used, &corpus, &table, settings.split, seed::derive(seed, &["ap"]))?);
    }

    if let Some(path) = &a.report {
        match a.format {
            ReportFormat::Json => {
                fs::write(path, serde_json::to_string_pretty(&out)? + "\n")
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            ReportFormat::Csv => {
                if use_proposals {
                    eval::export_report(&out.proposals, path, ReportFormat::Csv)?;
                } else {
                    eval::export_report(&out.reports, path, ReportFormat::Csv)?;
                }
                for l in &out.by_length {
                    eval::export_report(&l.value.buckets, sibling(path, &format!("length-{}", l.label)), ReportFormat::Csv)?;
                }
                if let Some(ap) = &out.ap {
                    eval::export_report(ap, sibling(path, "ap"), ReportFormat::Csv)?;
                }
            }
        }
    }
    print_json(&out)
}

pub fn resolve(mut cfg: RunConfig, a: ResolveArgs) -> Result<()> {
    apply_data(&mut cfg, a.data);
    set(&mut cfg.model, a.model.map(Some));
    let paths = cfg.corpus_paths()?;
    let (corpus, report) = corpus::load_corpus(&paths)?;
    log_load(&report);
    let table = load_table(&cfg)?;
    let model = trainer::load_model_for(cfg.model_path()?, &table)?;
    if corpus.image(&a.image).is_none() {
        bail!("unknown image {:?}", a.image);
    }
    let features = RegionFeatures::new(&corpus, &table);
    let items: Vec<_> = if a.use_proposals {
        let set = corpus
            .proposals
            .as_ref()
            .and_then(|p| p.get(&a.image))
            .with_context(|| format!("no proposals for image {:?}", a.image))?;
        set.boxes
            .iter()
            .enumerate()
            .filter_map(|(i, b)| features.proposal(&a.image, i, b).map(|v| (proposal_region_id(i), v)))
            .collect()
    } else {
        corpus
            .regions_by_image()
            .get(a.image.as_str())
            .into_iter()
            .flatten()
            .filter_map(|r| features.region(&r.key()).map(|v| (r.region_id.clone(), v)))
            .collect()
    };
    if items.is_empty() {
        bail!("image {:?} has no candidates with features", a.image);
    }
    let candidates = CandidateSet::new(items)?;
    let tokens = corpus::tokenize(&a.expr);
    let result = semantics::resolve(&tokens, &candidates, &model)?;
    let probs = match &result.distribution {
        Some(d) => {
            let p = d.probs();
            result
                .ranking
                .iter()
                .map(|id| p[candidates.ids().iter().position(|c| c == id).unwrap()])
                .collect()
        }
        None => Vec::new(),
    };

    #[derive(Serialize)]
    struct Output<'a> {
        image_id: &'a str,
        expression: &'a str,
        tokens: &'a [String],
        ranking: &'a [String],
        probs: Vec<f64>,
        tokens_known: usize,
        tokens_total: usize,
        abstained: bool,
    }
    print_json(&Output {
        image_id: &a.image,
        expression: &a.expr,
        tokens: &tokens,
        ranking: &result.ranking,
        probs,
        tokens_known: result.tokens_known,
        tokens_total: result.tokens_total,
        abstained: result.abstained,
    })
}
