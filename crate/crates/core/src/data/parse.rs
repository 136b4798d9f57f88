use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One raw interaction with the original identifiers.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Interaction {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Format {
    /// `user::item::rating::timestamp` lines, as in MovieLens `ratings.dat`.
    MovielensDat,
    /// Headed CSV with `user`, `item` and `timestamp` columns (any order;
    /// other columns such as `rating` are ignored).
    Csv,
}

impl FromStr for Format {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "movielens-dat" => Ok(Self::MovielensDat),
            "csv" => Ok(Self::Csv),
            other => Err(Error::Config(format!(
                "unknown format {other:?} (expected movielens-dat or csv)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Malformed {
    pub line: usize,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Parsed {
    pub interactions: Vec<Interaction>,
    /// Rows skipped because they could not be parsed (at most the allowed number).
    pub malformed: Vec<Malformed>,
}

pub fn parse_interactions(path: &Path, format: Format, max_malformed: usize) -> Result<Parsed> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_reader(BufReader::new(file), format, max_malformed)
}

/// Parses interactions, tolerating up to `max_malformed` bad rows. One more
/// is an error naming its line.
pub fn parse_reader<R: Read>(reader: R, format: Format, max_malformed: usize) -> Result<Parsed> {
    let mut out = Parsed {
        interactions: Vec::new(),
        malformed: Vec::new(),
    };
    let reject = |out: &mut Parsed, line: usize, reason: String| -> Result<()> {
        if out.malformed.len() >= max_malformed {
            return Err(Error::Data(format!("line {line}: {reason}")));
        }
        out.malformed.push(Malformed { line, reason });
        Ok(())
    };
    match format {
        Format::MovielensDat => {
            for (i, line) in BufReader::new(reader).lines().enumerate() {
                let line = line.map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
                if line.trim().is_empty() {
                    continue;
                }
                match parse_dat_line(&line) {
                    Ok(x) => out.interactions.push(x),
                    Err(reason) => reject(&mut out, i + 1, reason)?,
                }
            }
        }
        Format::Csv => {
            let mut rdr = csv::ReaderBuilder::new()
                .flexible(true)
                .trim(csv::Trim::All)
                .from_reader(reader);
            let headers = rdr
                .headers()
                .map_err(|e| Error::Data(format!("csv header: {e}")))?
                .clone();
            let col = |name: &str| {
                headers
                    .iter()
                    .position(|h| h.eq_ignore_ascii_case(name))
                    .ok_or_else(|| Error::Data(format!("csv header lacks a {name:?} column")))
            };
            let (cu, ci, ct) = (col("user")?, col("item")?, col("timestamp")?);
            for (i, rec) in rdr.records().enumerate() {
                // header is line 1
                let line = i + 2;
                let rec = match rec {
                    Ok(r) => r,
                    Err(e) => {
                        reject(&mut out, line, e.to_string())?;
                        continue;
                    }
                };
                if rec.iter().all(|f| f.is_empty()) {
                    continue;
                }
                let field = |c: usize| rec.get(c).filter(|s| !s.is_empty());
                match (field(cu), field(ci), field(ct)) {
                    (Some(u), Some(it), Some(ts)) => match ts.parse::<i64>() {
                        Ok(timestamp) => out.interactions.push(Interaction {
                            user: u.to_string(),
                            item: it.to_string(),
                            timestamp,
                        }),
                        Err(_) => reject(&mut out, line, format!("bad timestamp {ts:?}"))?,
                    },
                    _ => reject(&mut out, line, format!("expected {} fields, got {}", headers.len(), rec.len()))?,
                }
            }
        }
    }
    if out.interactions.is_empty() {
        return Err(Error::Data("empty dataset".into()));
    }
    Ok(out)
}

fn parse_dat_line(line: &str) -> std::result::Result<Interaction, String> {
    let fields: Vec<&str> = line.trim().split("::").collect();
    if fields.len() != 4 {
        return Err(format!("expected 4 '::'-separated fields, got {}", fields.len()));
    }
    if fields[0].is_empty() || fields[1].is_empty() {
        return Err("empty user or item id".into());
    }
    let timestamp = fields[3]
        .parse::<i64>()
        .map_err(|_| format!("bad timestamp {:?}", fields[3]))?;
    Ok(Interaction {
        user: fields[0].to_string(),
        item: fields[1].to_string(),
        timestamp,
    })
}
