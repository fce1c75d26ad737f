//! Visual question answering driven by the dependency parse of the question.
//!
//! A question's dependency tree is split into head-plus-dependents subtrees,
//! each convolved into a phrase vector, refined by graph attention along the
//! tree and read by a bidirectional GRU. The phrase features then steer
//! several rounds of message passing between visual entities, and a
//! question-conditioned attention pools the entities for answer
//! classification.
//!
//! Everything runs on the small reverse-mode engine in [`autograd`].

pub mod answer;
pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod conllu;
pub mod dataset;
pub mod embeddings;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod message;
pub mod model;
pub mod params;
pub mod synth;
pub mod tensor;
pub mod train;

pub use answer::{AnswerSpace, SoftTarget};
pub use autograd::{Graph, Var};
pub use config::{LrSchedule, ModelConfig};
pub use conllu::{SyntaxSubtree, SyntaxToken, SyntaxTree};
pub use error::{Error, Result};
pub use message::{AttentionTrace, VisualScene};
pub use model::{Model, Prediction};
pub use params::ParameterStore;
pub use tensor::Tensor;
