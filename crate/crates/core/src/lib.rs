pub mod attribution;
pub mod autodiff;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod par;
pub mod real;
pub mod report;
pub mod store;
pub mod synthetic;
pub mod tensor;
pub mod tokenizer;
pub mod trainer;

pub use attribution::{explain, AttributionResult, ExplainOptions, MethodKind};
pub use error::{Error, Result};
pub use model::{EncoderWeights, Model, ModelConfig};
pub use par::Exec;
pub use real::{Precision, Real};
pub use tensor::Tensor;
pub use tokenizer::{MaskPolicy, TokenSequence, Tokenizer, Vocab};
