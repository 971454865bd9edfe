//! Abusive-comment classification toolkit.
//!
//! The pipeline runs corpus loading ([`corpus`]), cleaning ([`preprocess`]),
//! class rebalancing ([`rebalance`]), sentence embeddings and vocabularies
//! ([`encoder`]), then one of three model families: classical heads over frozen
//! embeddings ([`heads`]), a vanilla LSTM or a fine-tuned transformer
//! ([`neural`]). [`metrics`] scores predictions with macro and weighted F1 and
//! renders result grids; [`cli`] wires it all into batch commands.

pub mod apportion;
pub mod cli;
pub mod corpus;
pub mod preprocess;
pub mod encoder;
pub mod heads;
pub mod metrics;
pub mod neural;
pub mod nn;
pub mod rebalance;
