use rand::seq::SliceRandom;

use super::parse::Interaction;
use crate::rng;

/// Sequences that walk one fixed random cycle through the catalog, so every
/// item has exactly one successor. Sequence `u` starts at cycle position
/// `u * n_items / n_sequences`, which spreads the starts evenly and makes
/// every held-out transition also appear in some other user's training part.
pub fn successor_cycle(n_sequences: usize, n_items: usize, length: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut cycle: Vec<usize> = (1..=n_items).collect();
    cycle.shuffle(&mut rng::stream(seed, "successor_cycle", &[]));
    (0..n_sequences)
        .map(|u| {
            let start = u * n_items / n_sequences;
            (0..length).map(|t| cycle[(start + t) % n_items]).collect()
        })
        .collect()
}

/// Raw interaction rows for `sequences`, with users `u00`, `u01`, ... and
/// items `i{id}`; timestamps increase along each sequence.
pub fn to_interactions(sequences: &[Vec<usize>]) -> Vec<Interaction> {
    sequences
        .iter()
        .enumerate()
        .flat_map(|(u, seq)| {
            seq.iter().enumerate().map(move |(t, &item)| Interaction {
                user: format!("u{u:02}"),
                item: format!("i{item}"),
                timestamp: 1_000 + t as i64,
            })
        })
        .collect()
}
