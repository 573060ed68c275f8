//! Two-tower semantic retrieval at desk scale.

pub mod ann;
pub mod autodiff;
pub mod container;
pub mod corpus;
pub mod eval;
pub mod fsutil;
pub mod objectives;
pub mod pipeline;
pub mod rerank;
pub mod seed;
pub mod text;
pub mod towers;
pub mod trainer;
