//! Phone-masked multi-modeling-unit training for CTC/attention sequence
//! transduction, built on a small self-contained tensor kernel.

pub mod augment;
pub mod corpus;
pub mod ctc;
pub mod decode;
pub mod kernel;
pub mod model;
pub mod tokenizer;
pub mod trainer;
