pub mod autograd;
pub mod baselines;
pub mod bias_tokens;
pub mod corpus;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod pipeline;
pub mod probing;
pub mod tensor;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use baselines::{Strategy, StrategyKind};
pub use corpus::{Corpus, LabelSpace, Post, TaskKind};
pub use evaluation::EvalReport;
pub use features::{Example, Featurizer};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
pub use training::{Objective, TrainConfig};
