pub mod assembly;
pub mod error;
pub mod fields;
pub mod geometry;
pub mod linalg;
pub mod metrics;
pub mod network;
pub mod poincare;
pub mod quadrature;
pub mod training;
