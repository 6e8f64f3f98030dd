pub mod checks;
pub mod distributions;
pub mod experiments;
pub mod krr;
pub mod quad;
pub mod scalar;
pub mod specialfn;
pub mod spectral;
pub mod theory;

pub use distributions::{
    build_test_grid, sample_1d, sample_cylinder, DataModel, GridOptions, ModelError, SampleSet, SlopeProfile, WeightedGrid,
};
pub use krr::{fit, fit_1d, gram, kare, kare_1d, test_error, ChainFactor, GramMatrix, KrrError, Predictor, TestSpec};
pub use scalar::Scalar;
pub use specialfn::{airy, erfc, log_gamma, AiryPair, SpecialFnError};

/// Single-precision instances of the generic core.
pub type DataModelF32 = DataModel<f32>;
pub type SampleSetF32 = SampleSet<f32>;
pub type PredictorF32 = Predictor<f32>;
pub type ChainFactorF32 = ChainFactor<f32>;
pub type WeightedGridF32 = WeightedGrid<f32>;
