use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::parse::Format;
use super::sequences::Sequences;
use super::split::{split_leave_one_out, Split};
use crate::error::{Error, Result};

pub const DATASET_FORMAT_VERSION: u32 = 1;

/// How a prepared dataset was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub source: String,
    pub format: Format,
    pub min_user: usize,
    pub min_item: usize,
    pub malformed_rows: usize,
}

/// The prepared-dataset file: id maps plus the leave-one-out split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub format_version: u32,
    pub preprocessing: Preprocessing,
    /// Original user id of every user in the split, aligned with `split`.
    pub users: Vec<String>,
    /// Original item id per dense item id; entry 0 is padding.
    pub items: Vec<String>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub density: f64,
    pub skipped_short_users: usize,
}

impl Dataset {
    pub fn from_sequences(seqs: &Sequences, preprocessing: Preprocessing) -> Result<Self> {
        let split = split_leave_one_out(&seqs.sequences);
        if split.is_empty() {
            return Err(Error::Data("no user has at least 3 interactions".into()));
        }
        Ok(Self {
            format_version: DATASET_FORMAT_VERSION,
            preprocessing,
            users: split.users.iter().map(|&u| seqs.users[u].clone()).collect(),
            items: seqs.items.clone(),
            split,
        })
    }

    /// Catalog size plus the padding id.
    pub fn vocab_size(&self) -> usize {
        self.items.len()
    }

    pub fn summary(&self) -> Summary {
        let users = self.split.len();
        let items = self.items.len() - 1;
        let interactions: usize = self.split.train.iter().map(|t| t.len() + 2).sum();
        Summary {
            users,
            items,
            interactions,
            density: interactions as f64 / (users as f64 * items.max(1) as f64),
            skipped_short_users: self.split.skipped,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ds: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: not a dataset file: {e}", path.display())))?;
        if ds.format_version != DATASET_FORMAT_VERSION {
            return Err(Error::Data(format!(
                "{}: dataset format version {} is not supported (expected {DATASET_FORMAT_VERSION})",
                path.display(),
                ds.format_version
            )));
        }
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        let s = &self.split;
        let n = s.users.len();
        if [s.train.len(), s.valid.len(), s.test.len(), self.users.len()] != [n; 4] {
            return Err(Error::Data("dataset split arrays have different lengths".into()));
        }
        let v = self.vocab_size();
        let bad = |&i: &usize| i == 0 || i >= v;
        if s.train.iter().flatten().any(bad) || s.valid.iter().any(bad) || s.test.iter().any(bad) {
            return Err(Error::Data("dataset holds an item id outside the catalog".into()));
        }
        if s.train.iter().any(Vec::is_empty) {
            return Err(Error::Data("dataset holds an empty training prefix".into()));
        }
        Ok(())
    }
}
