//! Hypergraph contrastive pretraining of medical-code and visit embeddings,
//! and a retrieval-augmented medication recommender built on top of them.
//!
//! The crate is organised bottom-up:
//!
//! - [`corpus`]: EHR data model, preprocessing, synthetic generation, DDI
//!   graphs and code hierarchies.
//! - [`hypergraph`]: per-domain visit hypergraphs and stochastic views.
//! - [`khge`]: the knowledge-aware hypergraph encoder.
//! - [`medrep`]: stage-one contrastive pretraining and embedding export.
//! - [`simmr`]: stage-two recommender with history and similar-visit
//!   channels.
//! - [`metrics`]: Jaccard, F1, PRAUC, DDI rate, medication count and the
//!   bootstrap protocol.
//! - [`pipeline`]: run configuration and the end-to-end stages used by the
//!   command-line tool.

pub mod autograd;
pub mod corpus;
pub mod error;
pub mod hypergraph;
pub mod khge;
pub mod medrep;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod simmr;
pub mod checkpoint;

pub use error::{Error, Result};
pub use corpus::{DdiMatrix, Domain, EhrCorpus, Split, Visit};
pub use metrics::{EvalReport, Prediction, Recommender, VisitQuery};
pub use pipeline::RunConfig;
