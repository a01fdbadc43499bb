pub mod autograd;
pub mod corpus;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod guidance;
pub mod image_io;
pub mod matcher;
pub mod nn;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod transformer;

pub use autograd::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use schedule::{make_ddim_timesteps, make_linear_schedule, NoiseSchedule, NoisySample, ScheduleConfig, VarianceMode};
pub use denoiser::{Denoiser, DenoiserConfig, TextEmbedding};
pub use guidance::{GradientMode, GuidanceConfig, InputMode, ScheduleKind, ScoreScale};
pub use matcher::{Matcher, MatcherConfig, MatcherEnsemble};
pub use nn::Params;
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Params32 = Params<f32>;
pub type Denoiser32 = Denoiser<f32>;
pub type Denoiser64 = Denoiser<f64>;
pub type Matcher32 = Matcher<f32>;
pub type Matcher64 = Matcher<f64>;
pub type MatcherEnsemble32 = MatcherEnsemble<f32>;
