use std::collections::HashMap;

use super::parse::Interaction;
use crate::error::{Error, Result};

/// Per-user chronological item sequences over dense ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sequences {
    /// Original user id of each dense user index, in lexicographic order.
    pub users: Vec<String>,
    /// Original item id of each dense item id; entry 0 is the padding slot.
    pub items: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
}

impl Sequences {
    pub fn num_items(&self) -> usize {
        self.items.len() - 1
    }

    pub fn num_interactions(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn item_id(&self, original: &str) -> Option<usize> {
        self.items.iter().skip(1).position(|s| s == original).map(|i| i + 1)
    }
}

/// Keeps, as a set of row indices, the interactions that survive repeated
/// removal of users with fewer than `min_user` and items with fewer than
/// `min_item` interactions.
pub fn k_core(interactions: &[Interaction], min_user: usize, min_item: usize) -> Vec<usize> {
    let mut alive: Vec<usize> = (0..interactions.len()).collect();
    loop {
        let mut users: HashMap<&str, usize> = HashMap::new();
        let mut items: HashMap<&str, usize> = HashMap::new();
        for &i in &alive {
            *users.entry(&interactions[i].user).or_default() += 1;
            *items.entry(&interactions[i].item).or_default() += 1;
        }
        let before = alive.len();
        alive.retain(|&i| users[interactions[i].user.as_str()] >= min_user && items[interactions[i].item.as_str()] >= min_item);
        if alive.len() == before {
            return alive;
        }
    }
}

/// Filters to the `(min_user, min_item)` core, orders each user's
/// interactions by `(timestamp, file order)`, and assigns dense ids: users
/// in lexicographic order, items by first appearance walking those users'
/// sequences in order.
pub fn build_sequences(interactions: &[Interaction], min_user: usize, min_item: usize) -> Result<Sequences> {
    if interactions.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    let kept = k_core(interactions, min_user, min_item);
    if kept.is_empty() {
        return Err(Error::Data(format!(
            "no interactions left after filtering (min_user={min_user}, min_item={min_item})"
        )));
    }
    let mut by_user: HashMap<&str, Vec<usize>> = HashMap::new();
    for &i in &kept {
        by_user.entry(&interactions[i].user).or_default().push(i);
    }
    let mut users: Vec<&str> = by_user.keys().copied().collect();
    users.sort_unstable();

    let mut items = vec![String::new()];
    let mut item_ids: HashMap<&str, usize> = HashMap::new();
    let mut sequences = Vec::with_capacity(users.len());
    for u in &users {
        let rows = by_user.get_mut(u).expect("user present");
        rows.sort_by_key(|&i| (interactions[i].timestamp, i));
        let seq = rows
            .iter()
            .map(|&i| {
                let name = interactions[i].item.as_str();
                *item_ids.entry(name).or_insert_with(|| {
                    items.push(name.to_string());
                    items.len() - 1
                })
            })
            .collect();
        sequences.push(seq);
    }
    Ok(Sequences {
        users: users.into_iter().map(String::from).collect(),
        items,
        sequences,
    })
}
