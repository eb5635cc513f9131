//! Run configuration: a JSON file whose values command-line flags override.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use wac_core::corpus::{CorpusPaths, SplitRatios};
use wac_core::eval::{DEFAULT_IOU_THRESHOLD, DEFAULT_RELAXED_K};
use wac_core::synthworld::{self, SynthConfig};
use wac_core::{Split, TrainingConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum NrMode {
    On,
    #[default]
    Off,
    /// Both the full and the NR variant.
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub split: Split,
    pub nr: NrMode,
    pub mrr_exclude_abstained: bool,
    pub iou_thresh: f64,
    pub topk: usize,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            split: Split::Test,
            nr: NrMode::Off,
            mrr_exclude_abstained: false,
            iou_thresh: DEFAULT_IOU_THRESHOLD,
            topk: DEFAULT_RELAXED_K,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Directory holding the corpus files and `features.json`.
    pub data: Option<PathBuf>,
    pub images: Option<PathBuf>,
    pub regions: Option<PathBuf>,
    pub expressions: Option<PathBuf>,
    pub proposals: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub model: Option<PathBuf>,
    pub out: Option<PathBuf>,
    /// Re-split the corpus by image with these ratios after loading.
    pub split_ratios: Option<SplitRatios>,
    /// Overrides the seeds inside `training` and `synth`.
    pub seed: Option<u64>,
    pub training: TrainingConfig,
    pub eval: EvalSettings,
    pub synth: SynthConfig,
}

impl RunConfig {
    /// Loads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data,
            &mut cfg.images,
            &mut cfg.regions,
            &mut cfg.expressions,
            &mut cfg.proposals,
            &mut cfg.features,
            &mut cfg.model,
            &mut cfg.out,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    /// Applies the top-level seed, if any, everywhere randomness is drawn.
    pub fn apply_seed(&mut self, flag: Option<u64>) {
        if let Some(seed) = flag.or(self.seed) {
            self.seed = Some(seed);
            self.training.seed = seed;
            self.synth.seed = seed;
        }
    }

    pub fn corpus_paths(&self) -> Result<CorpusPaths> {
        let mut paths = match &self.data {
            Some(dir) => CorpusPaths::in_dir(dir),
            None => match (&self.images, &self.regions, &self.expressions) {
                (Some(i), Some(r), Some(e)) => CorpusPaths {
                    images: i.clone(),
                    regions: r.clone(),
                    expressions: e.clone(),
                    proposals: None,
                },
                _ => bail!("no corpus given: pass --data DIR or all of --images, --regions, --expressions"),
            },
        };
        if let Some(p) = &self.images {
            paths.images = p.clone();
        }
        if let Some(p) = &self.regions {
            paths.regions = p.clone();
        }
        if let Some(p) = &self.expressions {
            paths.expressions = p.clone();
        }
        if let Some(p) = &self.proposals {
            paths.proposals = Some(p.clone());
        }
        for p in [&paths.images, &paths.regions, &paths.expressions]
            .into_iter()
            .chain(paths.proposals.as_ref())
        {
            require(p)?;
        }
        Ok(paths)
    }

    pub fn features_path(&self) -> Result<PathBuf> {
        let path = match (&self.features, &self.data) {
            (Some(p), _) => p.clone(),
            (None, Some(dir)) => dir.join(synthworld::FEATURES_MANIFEST),
            (None, None) => bail!("no feature manifest given: pass --features FILE or --data DIR"),
        };
        require(&path)?;
        Ok(path)
    }

    pub fn model_path(&self) -> Result<PathBuf> {
        self.model.clone().context("no model path given: pass --model FILE")
    }
}

fn require(path: &Path) -> Result<()> {
    if !path.exists() {
        bail!("{}: no such file", path.display());
    }
    Ok(())
}
