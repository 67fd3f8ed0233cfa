pub mod backbones;
pub mod dataset;
pub mod episodes;
pub mod error;
pub mod eval;
pub mod fsl;
pub mod labels;
pub mod preprocess;
pub mod rng;
pub mod split;
pub mod synth;
