//! Hierarchical zero-shot classification over precomputed embeddings.
//!
//! Images are classified against the union of per-class subclass label sets,
//! and the subclass probabilities are reweighted by the coarse class
//! probabilities before the argmax is mapped back to its parent class.
//!
//! The numerical core ([`engine`], [`eval`]) is generic over the probability
//! scalar through [`Real`]; embeddings themselves are always stored as `f32`
//! and every dot product or norm accumulates in `f64` in index order, so a
//! given input produces bit-identical output regardless of thread count.

pub mod engine;
pub mod eval;
pub mod hierarchy;
pub mod labelgen;
pub mod prompts;
pub mod scalar;
pub mod synth;
pub mod tensorio;

pub use engine::{
    Aggregator, ChilsTrace, Classifier, EngineError, InferenceConfig, ReweightVariant,
};
pub use eval::{CalibrationSummary, EvalError, EvalRecord, Method, ReportFormat};
pub use hierarchy::{HierarchyDag, HierarchyError, LabelMap, SubclassEntry};
pub use labelgen::{FixtureBackend, GenerationBackend, HttpBackend, LabelGenError};
pub use prompts::{PromptError, PromptMode, PromptSet, TextReps};
pub use scalar::Real;
pub use synth::{SynthError, SyntheticInstance, SyntheticSpec};
pub use tensorio::{EmbeddingBundle, TensorIoError};

/// Double-precision trace; the default used by the command-line tool.
pub type Trace = ChilsTrace<f64>;
/// Single-precision trace.
pub type Trace32 = ChilsTrace<f32>;
/// Double-precision inference configuration.
pub type Config = InferenceConfig<f64>;
/// Single-precision inference configuration.
pub type Config32 = InferenceConfig<f32>;
/// Double-precision classifier.
pub type Chils<'a> = Classifier<'a, f64>;
/// Double-precision calibration summary.
pub type Calibration = CalibrationSummary<f64>;
