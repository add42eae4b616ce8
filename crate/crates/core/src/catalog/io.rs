use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{Catalog, CatalogError, Dataset, Interaction, Item, ItemId, RatingScale, UserHistory};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schema {
    Movies,
    Books,
    Generic,
}

impl FromStr for Schema {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "movies" => Ok(Schema::Movies),
            "books" => Ok(Schema::Books),
            "generic" => Ok(Schema::Generic),
            other => Err(format!("unknown schema '{other}' (expected movies, books or generic)")),
        }
    }
}

impl Schema {
    fn default_scale(self) -> Option<RatingScale> {
        match self {
            Schema::Movies => Some(RatingScale::movies()),
            Schema::Books => Some(RatingScale::books()),
            Schema::Generic => None,
        }
    }

    fn attribute_fields(self) -> Option<&'static [&'static str]> {
        match self {
            Schema::Movies => Some(&["directedBy", "starring"]),
            Schema::Books => Some(&["url", "authors", "lang", "description"]),
            Schema::Generic => None,
        }
    }
}

/// Sidecar `<stem>.meta.json` next to a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub name: String,
    pub scale: RatingScale,
}

#[derive(Debug, Clone)]
pub struct LoadOptions {
    /// Fraction of malformed records tolerated before aborting.
    pub max_malformed_fraction: f64,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self { max_malformed_fraction: 0.01 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadSummary {
    pub total: usize,
    pub kept: usize,
    pub rejected_off_scale: usize,
    pub rejected_missing_title: usize,
    pub rejected_duplicate: usize,
    pub malformed: usize,
    pub first_malformed_line: Option<usize>,
}

impl LoadSummary {
    pub fn rejected(&self) -> usize {
        self.rejected_off_scale + self.rejected_missing_title + self.rejected_duplicate + self.malformed
    }
}

const RESERVED: &[&str] =
    &["user_id", "userId", "user", "item_id", "itemId", "item", "title", "rating", "year"];

pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("meta.json")
}

fn read_meta(path: &Path, schema: Schema) -> Result<DatasetMeta, CatalogError> {
    let meta_path = sidecar_path(path);
    if meta_path.exists() {
        let text = fs::read_to_string(&meta_path)
            .map_err(|source| CatalogError::Io { path: meta_path.display().to_string(), source })?;
        return serde_json::from_str(&text).map_err(|e| CatalogError::Sidecar {
            path: meta_path.display().to_string(),
            reason: e.to_string(),
        });
    }
    let scale = schema.default_scale().ok_or_else(|| CatalogError::Sidecar {
        path: meta_path.display().to_string(),
        reason: "generic datasets need a sidecar declaring the rating scale".into(),
    })?;
    let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset").to_string();
    Ok(DatasetMeta { name, scale })
}

enum Record {
    Kept { user: String, item: Item, rating: f64 },
    OffScale,
    MissingTitle,
}

fn text_of(v: &Value) -> Option<String> {
    match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        Value::Array(xs) => {
            let parts: Option<Vec<String>> = xs.iter().map(text_of).collect();
            parts.map(|p| p.join(", "))
        }
        _ => None,
    }
}

fn first_key<'a>(obj: &'a Map<String, Value>, keys: &[&str]) -> Option<&'a Value> {
    keys.iter().find_map(|k| obj.get(*k))
}

fn parse_record(line: &str, schema: Schema, scale: &RatingScale) -> Result<Record, String> {
    let value: Value = serde_json::from_str(line).map_err(|e| format!("invalid JSON: {e}"))?;
    let obj = value.as_object().ok_or("record is not a JSON object")?;

    let rating = match obj.get("rating") {
        Some(Value::Number(n)) => n.as_f64().ok_or("rating is not a finite number")?,
        Some(Value::String(s)) => {
            s.trim().parse::<f64>().map_err(|_| format!("rating '{s}' is not a number"))?
        }
        Some(_) => return Err("rating has the wrong type".into()),
        None => return Err("missing rating".into()),
    };

    let title = match obj.get("title") {
        None | Some(Value::Null) => return Ok(Record::MissingTitle),
        Some(v) => text_of(v).ok_or("title has the wrong type")?,
    };
    if title.trim().is_empty() {
        return Ok(Record::MissingTitle);
    }
    let Some(rating) = scale.canonical(rating) else {
        return Ok(Record::OffScale);
    };

    let user = match first_key(obj, &["user_id", "userId", "user"]) {
        None | Some(Value::Null) => "default".to_string(),
        Some(v) => text_of(v).ok_or("user_id has the wrong type")?,
    };
    let item_id = match first_key(obj, &["item_id", "itemId", "item"]) {
        None | Some(Value::Null) => title.clone(),
        Some(v) => text_of(v).ok_or("item_id has the wrong type")?,
    };

    let mut item = Item::from_title(item_id, title);
    match obj.get("year") {
        None => {}
        Some(Value::Null) => item.year = None,
        Some(v) => {
            let year = text_of(v)
                .and_then(|s| s.trim().parse::<i32>().ok())
                .ok_or("year is not an integer")?;
            item.year = Some(year);
        }
    }

    let mut push_attr = |key: &str, v: &Value| -> Result<(), String> {
        if v.is_null() {
            return Ok(());
        }
        let text = text_of(v).ok_or_else(|| format!("field '{key}' has the wrong type"))?;
        item.attributes.push((key.to_string(), text));
        Ok(())
    };
    match schema.attribute_fields() {
        Some(fields) => {
            for key in fields {
                if let Some(v) = obj.get(*key) {
                    push_attr(key, v)?;
                }
            }
        }
        None => {
            for (key, v) in obj {
                if !RESERVED.contains(&key.as_str()) {
                    push_attr(key, v)?;
                }
            }
        }
    }

    Ok(Record::Kept { user, item, rating })
}

/// Loads a JSONL interaction file plus its optional `.meta.json` sidecar.
pub fn load_dataset(
    path: &Path,
    schema: Schema,
    opts: &LoadOptions,
) -> Result<(Dataset, LoadSummary), CatalogError> {
    let meta = read_meta(path, schema)?;
    let io_err = |source| CatalogError::Io { path: path.display().to_string(), source };
    let file = fs::File::open(path).map_err(io_err)?;

    let mut summary = LoadSummary::default();
    let mut first_reason = String::new();
    let mut catalog = Catalog::default();
    let mut user_order: Vec<String> = Vec::new();
    let mut histories: HashMap<String, Vec<Interaction>> = HashMap::new();
    let mut seen: HashSet<(String, ItemId)> = HashSet::new();

    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        summary.total += 1;
        match parse_record(&line, schema, &meta.scale) {
            Err(reason) => {
                summary.malformed += 1;
                if summary.first_malformed_line.is_none() {
                    summary.first_malformed_line = Some(idx + 1);
                    first_reason = reason;
                }
            }
            Ok(Record::OffScale) => summary.rejected_off_scale += 1,
            Ok(Record::MissingTitle) => summary.rejected_missing_title += 1,
            Ok(Record::Kept { user, item, rating }) => {
                if !seen.insert((user.clone(), item.id.clone())) {
                    summary.rejected_duplicate += 1;
                    continue;
                }
                let item = catalog.insert(item);
                let history = histories.entry(user.clone()).or_insert_with(|| {
                    user_order.push(user.clone());
                    Vec::new()
                });
                history.push(Interaction { item, rating });
                summary.kept += 1;
            }
        }
    }

    if summary.malformed > 0
        && summary.malformed as f64 > opts.max_malformed_fraction * summary.total as f64
    {
        return Err(CatalogError::TooManyMalformed {
            malformed: summary.malformed,
            total: summary.total,
            threshold: opts.max_malformed_fraction,
            line: summary.first_malformed_line.unwrap_or(0),
            reason: first_reason,
        });
    }

    let users = user_order
        .into_iter()
        .map(|u| {
            let interactions = histories.remove(&u).unwrap_or_default();
            UserHistory::new(u, interactions)
        })
        .collect();
    let dataset = Dataset::new(meta.name, meta.scale, catalog, users)?;
    Ok((dataset, summary))
}

/// Writes a dataset as JSONL (one interaction per line) plus its sidecar.
pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), CatalogError> {
    let io_err = |p: &Path| {
        let p = p.display().to_string();
        move |source| CatalogError::Io { path: p, source }
    };
    let meta = DatasetMeta { name: dataset.name.clone(), scale: dataset.scale };
    let meta_path = sidecar_path(path);
    let meta_json = serde_json::to_string_pretty(&meta).expect("meta serializes");
    fs::write(&meta_path, meta_json + "\n").map_err(io_err(&meta_path))?;

    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut out = BufWriter::new(file);
    for user in &dataset.users {
        for it in &user.interactions {
            let mut obj = Map::new();
            obj.insert("user_id".into(), Value::String(user.user_id.clone()));
            obj.insert("item_id".into(), Value::String(it.item.id.0.clone()));
            obj.insert("title".into(), Value::String(it.item.title.clone()));
            obj.insert("year".into(), it.item.year.map_or(Value::Null, Value::from));
            for (k, v) in &it.item.attributes {
                obj.insert(k.clone(), Value::String(v.clone()));
            }
            obj.insert("rating".into(), Value::from(it.rating));
            writeln!(out, "{}", Value::Object(obj)).map_err(io_err(path))?;
        }
    }
    out.flush().map_err(io_err(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, body: &str) -> PathBuf {
        let p = dir.path().join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_table_record() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "movies.jsonl",
            r#"{"title": "Airheads (1994)", "directedBy": "Michael Lehmann", "starring": "Steve Buscemi, Chris Farley", "rating": "4.0"}"#,
        );
        let (d, summary) = load_dataset(&p, Schema::Movies, &LoadOptions::default()).unwrap();
        assert_eq!(d.catalog.len(), 1);
        assert_eq!(d.users.len(), 1);
        let it = &d.users[0].interactions[0];
        assert_eq!(it.rating, 4.0);
        assert_eq!(d.scale.level_index(it.rating), Some(7));
        assert_eq!(d.scale.levels(), 10);
        assert_eq!(it.item.year, Some(1994));
        assert_eq!(it.item.attributes[0], ("directedBy".into(), "Michael Lehmann".into()));
        assert_eq!(summary.kept, 1);
    }

    #[test]
    fn empty_file_with_sidecar() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "g.jsonl", "");
        write(&dir, "g.meta.json", r#"{"name": "g", "scale": {"min": 1, "max": 5, "step": 1}}"#);
        let (d, s) = load_dataset(&p, Schema::Generic, &LoadOptions::default()).unwrap();
        assert!(d.users.is_empty());
        assert_eq!(s.total, 0);
    }

    #[test]
    fn off_scale_rating_is_rejected() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "m.jsonl", r#"{"title": "X (2000)", "rating": "4.3"}"#);
        let (d, s) = load_dataset(&p, Schema::Movies, &LoadOptions::default()).unwrap();
        assert_eq!(s.rejected_off_scale, 1);
        assert_eq!(s.rejected(), 1);
        assert!(d.users.is_empty());
    }

    #[test]
    fn missing_title_and_duplicates() {
        let dir = TempDir::new().unwrap();
        let body = [
            r#"{"user_id": 1, "title": "", "rating": 3}"#,
            r#"{"user_id": 1, "item_id": "a", "title": "A", "rating": 3}"#,
            r#"{"user_id": 1, "item_id": "a", "title": "A", "rating": 4}"#,
        ]
        .join("\n");
        let p = write(&dir, "b.jsonl", &body);
        let (d, s) = load_dataset(&p, Schema::Books, &LoadOptions::default()).unwrap();
        assert_eq!(s.rejected_missing_title, 1);
        assert_eq!(s.rejected_duplicate, 1);
        assert_eq!(d.users[0].user_id, "1");
        assert_eq!(d.users[0].interactions.len(), 1);
    }

    #[test]
    fn malformed_beyond_threshold_names_line() {
        let dir = TempDir::new().unwrap();
        let body = "{\"title\": \"A\", \"rating\": 3}\nnot json\n{\"title\": \"B\", \"rating\": 4}\n";
        let p = write(&dir, "b.jsonl", body);
        match load_dataset(&p, Schema::Books, &LoadOptions::default()) {
            Err(CatalogError::TooManyMalformed { line, malformed, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(malformed, 1);
            }
            other => panic!("expected abort, got {other:?}"),
        }
        let lenient = LoadOptions { max_malformed_fraction: 0.5 };
        let (d, s) = load_dataset(&p, Schema::Books, &lenient).unwrap();
        assert_eq!(s.malformed, 1);
        assert_eq!(d.users[0].len(), 2);
    }

    #[test]
    fn generic_requires_sidecar() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "g.jsonl", "");
        assert!(matches!(
            load_dataset(&p, Schema::Generic, &LoadOptions::default()),
            Err(CatalogError::Sidecar { .. })
        ));
    }

    #[test]
    fn unreadable_file() {
        let p = Path::new("/nonexistent/definitely/missing.jsonl");
        assert!(matches!(
            load_dataset(p, Schema::Movies, &LoadOptions::default()),
            Err(CatalogError::Io { .. })
        ));
    }

    #[test]
    fn books_fields() {
        let dir = TempDir::new().unwrap();
        let p = write(
            &dir,
            "b.jsonl",
            r#"{"user_id": "u", "item_id": 7, "title": "Dune", "url": "http://x", "authors": ["Frank Herbert"], "lang": "eng", "year": 1965, "description": "Spice.", "rating": 5}"#,
        );
        let (d, _) = load_dataset(&p, Schema::Books, &LoadOptions::default()).unwrap();
        let item = &d.users[0].interactions[0].item;
        assert_eq!(item.id.0, "7");
        assert_eq!(item.year, Some(1965));
        assert_eq!(item.display_title(), "Dune (1965)");
        let keys: Vec<_> = item.attributes.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["url", "authors", "lang", "description"]);
    }
}
