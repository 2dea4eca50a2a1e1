use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Interaction, RawLog};
use crate::{Error, Result};

/// Header names of the five required columns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMapping {
    pub user: String,
    pub item: String,
    pub rating: String,
    pub timestamp: String,
    pub category: String,
}

impl Default for ColumnMapping {
    fn default() -> Self {
        Self {
            user: "user_id".into(),
            item: "item_id".into(),
            rating: "rating".into(),
            timestamp: "timestamp".into(),
            category: "category".into(),
        }
    }
}

pub fn ingest_csv(path: impl AsRef<Path>, schema: &ColumnMapping) -> Result<RawLog> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(file, schema)
}

/// Writes a log in the default column layout, one row per interaction.
pub fn write_csv(raw: &RawLog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::io(path, e.into()))?;
    let m = ColumnMapping::default();
    let io = |e: csv::Error| Error::io(path, e.into());
    w.write_record([&m.user, &m.item, &m.rating, &m.timestamp, &m.category]).map_err(io)?;
    for it in &raw.interactions {
        let cat = &raw.category_labels[raw.item_category[it.item]];
        w.write_record([
            raw.user_labels[it.user].as_str(),
            raw.item_labels[it.item].as_str(),
            &it.rating.to_string(),
            &it.timestamp.to_string(),
            cat.as_str(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a headed CSV. Unknown user/item/category labels get fresh dense
/// indices in order of first appearance. An item keeps the category of its
/// first row.
pub fn ingest_reader<R: Read>(reader: R, schema: &ColumnMapping) -> Result<RawLog> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| Error::Parse {
            line: 1,
            message: e.to_string(),
        })?
        .clone();
    let column = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column `{name}`"),
            })
    };
    let cols = [
        column(&schema.user)?,
        column(&schema.item)?,
        column(&schema.rating)?,
        column(&schema.timestamp)?,
        column(&schema.category)?,
    ];

    let mut log = RawLog {
        interactions: Vec::new(),
        user_labels: Vec::new(),
        item_labels: Vec::new(),
        item_category: Vec::new(),
        category_labels: Vec::new(),
    };
    let mut users: HashMap<String, usize> = HashMap::new();
    let mut items: HashMap<String, usize> = HashMap::new();
    let mut categories: HashMap<String, usize> = HashMap::new();

    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| -> Result<&str> {
            record.get(cols[i]).map(str::trim).ok_or_else(|| Error::Parse {
                line,
                message: "row has too few fields".into(),
            })
        };
        let (user, item, rating, timestamp, category) =
            (field(0)?, field(1)?, field(2)?, field(3)?, field(4)?);

        let rating: f64 = rating.parse().map_err(|_| Error::Parse {
            line,
            message: format!("rating `{rating}` is not a number"),
        })?;
        if !(1.0..=5.0).contains(&rating) {
            return Err(Error::Parse {
                line,
                message: format!("rating {rating} outside [1, 5]"),
            });
        }
        let timestamp: i64 = timestamp.parse().map_err(|_| Error::Parse {
            line,
            message: format!("timestamp `{timestamp}` is not an integer"),
        })?;
        if timestamp < 0 {
            return Err(Error::Parse {
                line,
                message: format!("negative timestamp {timestamp}"),
            });
        }

        let u = intern(&mut users, &mut log.user_labels, user);
        let c = intern(&mut categories, &mut log.category_labels, category);
        let before = log.item_labels.len();
        let j = intern(&mut items, &mut log.item_labels, item);
        if j == before {
            log.item_category.push(c);
        }
        log.interactions.push(Interaction {
            user: u,
            item: j,
            rating,
            timestamp,
        });
    }
    Ok(log)
}

fn intern(map: &mut HashMap<String, usize>, labels: &mut Vec<String>, key: &str) -> usize {
    if let Some(&i) = map.get(key) {
        return i;
    }
    let i = labels.len();
    map.insert(key.to_string(), i);
    labels.push(key.to_string());
    i
}
