//! Words-as-classifiers grounded semantics.
//!
//! Every word in the training vocabulary gets a binary logistic regression
//! classifier over region features. A referring expression is resolved by
//! turning each known word's classifier responses over the candidate
//! regions into a distribution, multiplying the distributions together and
//! picking the most probable candidate.
//!
//! The crate covers the whole pipeline: corpus loading ([`corpus`]), region
//! features ([`features`]), vocabulary selection ([`vocab`]), classifier
//! training ([`trainer`]), composition and resolution ([`semantics`]),
//! evaluation ([`eval`]) and a synthetic world for desk-scale checks
//! ([`synthworld`]).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod features;
pub mod seed;
pub mod semantics;
pub mod synthworld;
pub mod trainer;
pub mod vocab;

pub use corpus::{BBox, Corpus, CorpusPaths, ImageRecord, RefExpr, RegionKey, RegionRecord, Split};
pub use error::{Error, Result};
pub use eval::{EvalOptions, EvalReport};
pub use features::{FeatureMask, FeatureTable, FeatureVector, PositionalFeatures, RegionFeatures};
pub use semantics::{CandidateSet, Distribution, ResolutionResult};
pub use synthworld::{SynthConfig, SynthWorld};
pub use trainer::{ModelSet, TrainingConfig, WordClassifier};
pub use vocab::Vocabulary;
