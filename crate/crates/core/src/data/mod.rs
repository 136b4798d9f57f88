//! Interaction ingestion, per-user sequences, leave-one-out splits and batching.

mod batch;
mod dataset;
mod parse;
mod sequences;
mod split;
pub mod synthetic;

pub use batch::{batch_iter, sequential_batches, Batch, Example};
pub use dataset::{Dataset, Preprocessing, Summary, DATASET_FORMAT_VERSION};
pub use parse::{parse_interactions, parse_reader, Format, Interaction, Malformed, Parsed};
pub use sequences::{build_sequences, k_core, Sequences};
pub use split::{split_leave_one_out, Phase, Split};

#[cfg(test)]
mod tests;
