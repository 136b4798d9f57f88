use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::batch::Example;
use crate::error::{Error, Result};

/// Leave-one-out split: per user, the last item is the test target, the
/// one before it the validation target, the rest the training prefix.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    /// Index of each kept user in the source sequence list.
    pub users: Vec<usize>,
    pub train: Vec<Vec<usize>>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    /// Sequences shorter than three items, left out.
    pub skipped: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Train,
    Valid,
    Test,
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "valid" => Ok(Self::Valid),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!(
                "unknown phase {other:?} (expected train, valid or test)"
            ))),
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Valid => "valid",
            Self::Test => "test",
        })
    }
}

pub fn split_leave_one_out(sequences: &[Vec<usize>]) -> Split {
    let mut split = Split {
        users: Vec::new(),
        train: Vec::new(),
        valid: Vec::new(),
        test: Vec::new(),
        skipped: 0,
    };
    for (u, seq) in sequences.iter().enumerate() {
        let n = seq.len();
        if n < 3 {
            split.skipped += 1;
            continue;
        }
        split.users.push(u);
        split.train.push(seq[..n - 2].to_vec());
        split.valid.push(seq[n - 2]);
        split.test.push(seq[n - 1]);
    }
    split
}

impl Split {
    pub fn len(&self) -> usize {
        self.users.len()
    }

    pub fn is_empty(&self) -> bool {
        self.users.is_empty()
    }

    /// `train ++ [valid] ++ [test]` for the `i`-th kept user.
    pub fn full_sequence(&self, i: usize) -> Vec<usize> {
        let mut s = self.train[i].clone();
        s.push(self.valid[i]);
        s.push(self.test[i]);
        s
    }

    /// Prediction examples for a phase, in user order. Training predicts the
    /// last training item from the ones before it (users with a single
    /// training item contribute nothing); validation predicts the validation
    /// item from the training prefix; test predicts the test item from the
    /// training prefix plus the validation item.
    pub fn examples(&self, phase: Phase) -> Vec<Example> {
        (0..self.len())
            .filter_map(|i| {
                let train = &self.train[i];
                let (input, target) = match phase {
                    Phase::Train => (train[..train.len() - 1].to_vec(), train[train.len() - 1]),
                    Phase::Valid => (train.clone(), self.valid[i]),
                    Phase::Test => {
                        let mut s = train.clone();
                        s.push(self.valid[i]);
                        (s, self.test[i])
                    }
                };
                (!input.is_empty()).then_some(Example {
                    user: i,
                    input,
                    target,
                })
            })
            .collect()
    }
}
