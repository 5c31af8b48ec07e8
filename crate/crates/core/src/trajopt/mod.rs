//! Direct-collocation trajectory optimization over the SRBM.

pub mod nlp;
pub mod library;
pub mod transcribe;
