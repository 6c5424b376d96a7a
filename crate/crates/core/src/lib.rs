//! Few-shot named entity recognition with a two-stage span-based
//! prototypical network.
//!
//! A class-agnostic span extractor scores every token pair of a sentence and
//! keeps the pairs whose probability clears a threshold. A mention classifier
//! assigns each kept span the type of its nearest support prototype, or
//! rejects it when every prototype is farther than a fixed radius. Both
//! stages share one encoder and are trained episodically.

pub mod autodiff;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod evaluator;
pub mod exec;
pub mod inspect;
pub mod model;
pub mod optim;
pub mod params;
pub mod span;
pub mod synthetic;
pub mod trainer;

pub use classifier::{MarginConfig, PrototypeSet, SpanRepresentation, Verdict};
pub use data::{read_episodes, write_episodes, Episode, EpisodeDataset, LabeledSentence, Mention, Span, Split};
pub use encoder::{EncodedSentence, EncoderConfig, Vocabulary};
pub use error::{Error, Result};
pub use evaluator::{evaluate, EvalReport};
pub use model::SpanProto;
pub use optim::OptimizerConfig;
pub use span::{BoundaryMatrix, DecodeConfig};
pub use synthetic::{generate_synthetic, GeneratorConfig};
pub use trainer::{train, StepReport, TrainConfig};
