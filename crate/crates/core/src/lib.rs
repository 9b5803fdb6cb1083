//! Multilingual image–sentence retrieval with a hybrid vocabulary: frequent
//! words keep language-specific embeddings, rare words share a pruned latent
//! table learned with hard assignment.

pub mod tensor;
pub mod corpus;
pub mod hem;
pub mod losses;
pub mod rng;
pub mod vocab;
pub mod digest;
pub mod model;
pub mod eval;
pub mod clc;
