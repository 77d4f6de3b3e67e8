pub mod data;
pub mod fdag;
pub mod image;
pub mod model;
pub mod spectral;
pub mod tensor;
pub mod harness;
