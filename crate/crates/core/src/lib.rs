pub mod autodiff;
pub mod rng;
pub mod scalar;
pub mod corpus;
pub mod audio;
pub mod fmat;
pub mod frontend;
pub mod augment;
pub mod subword;
pub mod manifest;
pub mod network;
pub mod objectives;
pub mod trainer;
pub mod decoder;
pub mod evalkit;
pub mod gradsuite;
pub mod pipeline;

pub use scalar::Scalar;

pub type FeatureMatrixF32 = frontend::FeatureMatrix<f32>;
pub type FeatureMatrixF64 = frontend::FeatureMatrix<f64>;
pub type FeatureExtractorF32 = frontend::FeatureExtractor<f32>;
pub type FeatureExtractorF64 = frontend::FeatureExtractor<f64>;
pub type CtcPrefixStateF32 = decoder::CtcPrefixState<f32>;
pub type CtcPrefixStateF64 = decoder::CtcPrefixState<f64>;
