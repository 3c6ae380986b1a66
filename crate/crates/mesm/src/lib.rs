pub mod autodiff;
pub mod config;
pub mod data;
pub mod nn;
pub mod span;
pub mod tensor;
