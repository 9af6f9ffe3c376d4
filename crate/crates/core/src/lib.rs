pub mod bitpack;
pub mod converter;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod runtime;
pub mod timing;
