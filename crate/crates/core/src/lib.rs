//! Treatment-failure detection and prediction from longitudinal coded
//! medical events.
//!
//! The pipeline runs in this order:
//!
//! 1. [`eventstore`]: read and write coded event streams.
//! 2. [`syngen`]: generate a seeded synthetic cohort with planted signal.
//! 3. [`cohort`]: label patients as case, control or excluded.
//! 4. [`corpus`]: window, flatten and tokenize each patient's history.
//! 5. [`models`]: bag-of-words baselines, recurrent nets and a pre-trained
//!    transformer encoder, built on the autodiff core in [`numcore`].
//! 6. [`evalkit`]: ROC/AUC and the detection, size-sweep and ablation
//!    experiments.
//!
//! The `book/` directory next to this crate is a guide to each stage; its
//! code listings are compiled and run as doctests of this crate.

pub mod cohort;
pub mod corpus;
pub mod error;
pub mod evalkit;
pub mod eventstore;
pub mod models;
pub mod numcore;
pub mod rng;
pub mod syngen;

pub use error::{Error, Result};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/events.md")]
    mod events {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cohort.md")]
    mod cohort {}
    #[doc = include_str!("../../../book/src/corpus.md")]
    mod corpus {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/models.md")]
    mod models {}
    #[doc = include_str!("../../../book/src/evaluation.md")]
    mod evaluation {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/reproducibility.md")]
    mod reproducibility {}
}
