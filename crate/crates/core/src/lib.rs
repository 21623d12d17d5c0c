//! Sequence-transduction training criteria built on a small reverse-mode
//! autodiff tape: the CTC loss family (plain CTC, entropy-regularized EnCTC,
//! stimulated StimCTC and their combination EnStimCTC), exact enumeration
//! oracles for every lattice quantity, greedy/prefix-beam/forced-alignment
//! decoding, WER and alignment-quality metrics, toy trainable encoder and
//! language models, and a deterministic synthetic gloss-stream generator.
//!
//! The crate is `no_std`-compatible (requires `alloc`); disable the default
//! `std` feature for embedded use. File formats, the CLI and the experiment
//! harness live in the companion `ctclab` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod criteria;
pub mod decode;
pub mod gradcheck;
pub mod lattice;
pub mod mat;
mod math;
pub mod metrics;
pub mod model;
pub mod opt;
pub mod oracle;
pub mod synth;
pub mod tape;

pub use lattice::{EmissionLattice, ExtendedTargets, TargetSequence, Vocabulary, BLANK};
pub use mat::Mat;
pub use tape::{Tape, Var};
