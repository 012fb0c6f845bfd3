//! Interaction logs, item content, splits and sampling.
//!
//! File formats (UTF-8, LF, no header):
//!
//! * `interactions.tsv`: `user_id<TAB>item_id<TAB>timestamp`, all integers.
//! * `content.tsv`: `item_id<TAB>f1,f2,…,f512<TAB>e1;e2;…`; the element list
//!   may be empty.
//! * `idmap.tsv`: a `# users` section then a `# items` section, each row
//!   `external_id<TAB>dense_index`.
//!
//! External ids are remapped to dense 0-based indices in ascending external
//! order so embedding tables can be indexed directly.

mod sampling;
mod split;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub use sampling::{build_candidates, build_eval_candidates, sample_training_triples, TrainingTriple};
pub use split::{chronological_split, partition_cold_warm, SplitDataset, SplitRatios};
pub use synthetic::{feature_latent_correlation, generate_synthetic, SyntheticConfig, SyntheticData};

/// Width of the uniform content embedding read from `content.tsv`.
pub const FEATURE_DIM: usize = 512;

/// Default cold-item boundary: items with at most this many training
/// interactions are cold.
pub const COLD_BOUNDARY: i64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub timestamp: i64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InteractionLog {
    pub interactions: Vec<Interaction>,
    pub n_users: usize,
    pub n_items: usize,
}

impl InteractionLog {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }
}

/// Dense index ↔ external id, for users and items.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct IdMap {
    pub users: Vec<i64>,
    pub items: Vec<i64>,
    user_index: BTreeMap<i64, usize>,
    item_index: BTreeMap<i64, usize>,
}

impl IdMap {
    pub fn from_external(users: BTreeSet<i64>, items: BTreeSet<i64>) -> Self {
        let mut map = Self::default();
        for u in users {
            map.push_user(u);
        }
        for i in items {
            map.push_item(i);
        }
        map
    }

    fn push_user(&mut self, ext: i64) -> usize {
        let idx = self.users.len();
        self.users.push(ext);
        self.user_index.insert(ext, idx);
        idx
    }

    fn push_item(&mut self, ext: i64) -> usize {
        let idx = self.items.len();
        self.items.push(ext);
        self.item_index.insert(ext, idx);
        idx
    }

    pub fn user(&self, ext: i64) -> Option<usize> {
        self.user_index.get(&ext).copied()
    }

    pub fn item(&self, ext: i64) -> Option<usize> {
        self.item_index.get(&ext).copied()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        writeln!(out, "# users")?;
        for (idx, ext) in self.users.iter().enumerate() {
            writeln!(out, "{ext}\t{idx}")?;
        }
        writeln!(out, "# items")?;
        for (idx, ext) in self.items.iter().enumerate() {
            writeln!(out, "{ext}\t{idx}")?;
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut map = Self::default();
        let mut section = None;
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            match line {
                "# users" => section = Some(true),
                "# items" => section = Some(false),
                _ => {
                    let fields: Vec<&str> = line.split('\t').collect();
                    let bad = |msg: &str| Error::Parse {
                        path: path.to_path_buf(),
                        line: line_no,
                        msg: msg.to_string(),
                    };
                    if fields.len() != 2 {
                        return Err(bad("expected external_id<TAB>dense_index"));
                    }
                    let ext: i64 = fields[0].parse().map_err(|_| bad("bad external id"))?;
                    let idx: usize = fields[1].parse().map_err(|_| bad("bad dense index"))?;
                    let pushed = match section {
                        Some(true) => map.push_user(ext),
                        Some(false) => map.push_item(ext),
                        None => return Err(bad("row before section header")),
                    };
                    if pushed != idx {
                        return Err(bad("dense indices must be contiguous from 0"));
                    }
                }
            }
        }
        Ok(map)
    }
}

fn parse_int(path: &Path, line: usize, field: &str, what: &str) -> Result<i64> {
    field.trim_end_matches('\r').parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("{what} {field:?} is not an integer"),
    })
}

/// Reads `interactions.tsv` and remaps ids to dense indices.
pub fn load_interactions(path: &Path) -> Result<(InteractionLog, IdMap)> {
    let text = fs::read_to_string(path)?;
    let mut raw = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: line_no,
                msg: format!("expected 3 tab-separated columns, found {}", fields.len()),
            });
        }
        let user = parse_int(path, line_no, fields[0], "user_id")?;
        let item = parse_int(path, line_no, fields[1], "item_id")?;
        let ts = parse_int(path, line_no, fields[2], "timestamp")?;
        raw.push((user, item, ts));
    }
    if raw.is_empty() {
        return Err(Error::EmptyLog(path.to_path_buf()));
    }
    let users: BTreeSet<i64> = raw.iter().map(|r| r.0).collect();
    let items: BTreeSet<i64> = raw.iter().map(|r| r.1).collect();
    let map = IdMap::from_external(users, items);
    let interactions = raw
        .into_iter()
        .map(|(u, i, ts)| Interaction {
            user: map.user_index[&u],
            item: map.item_index[&i],
            timestamp: ts,
        })
        .collect();
    let log = InteractionLog {
        interactions,
        n_users: map.users.len(),
        n_items: map.items.len(),
    };
    Ok((log, map))
}

pub fn write_interactions(path: &Path, rows: &[(i64, i64, i64)]) -> Result<()> {
    let mut out = Vec::with_capacity(rows.len() * 16);
    for (u, i, ts) in rows {
        writeln!(out, "{u}\t{i}\t{ts}")?;
    }
    fs::write(path, out)?;
    Ok(())
}

/// Small grayscale image for the optional trainable encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub side: usize,
    pub pixels: Vec<f64>,
}

/// Content attached to one item: the pre-extracted uniform feature, an
/// optional raw image, and the annotation element ids.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ItemContent {
    pub feature: Option<Vec<f64>>,
    pub image: Option<GrayImage>,
    pub elements: Vec<usize>,
}

/// Per-item content indexed by dense item id.
#[derive(Debug, Clone, PartialEq)]
pub struct ContentTable {
    pub items: Vec<ItemContent>,
    pub vocab_size: usize,
}

impl ContentTable {
    pub fn get(&self, item: usize) -> &ItemContent {
        &self.items[item]
    }

    pub fn feature(&self, item: usize) -> Result<&[f64]> {
        self.items
            .get(item)
            .and_then(|c| c.feature.as_deref())
            .ok_or(Error::Content(item))
    }
}

/// Reads `content.tsv`. Items unknown to `map` are appended to the catalogue
/// in ascending external id order; they have no interactions and are cold.
pub fn load_content(path: &Path, map: &mut IdMap) -> Result<ContentTable> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<(i64, Vec<f64>, Vec<usize>)> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        let bad = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(bad(format!(
                "expected 3 tab-separated columns, found {}",
                fields.len()
            )));
        }
        let item = parse_int(path, line_no, fields[0], "item_id")?;
        let feature = fields[1]
            .split(',')
            .map(|v| {
                v.parse::<f64>()
                    .ok()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| bad(format!("feature value {v:?} is not a finite real")))
            })
            .collect::<Result<Vec<f64>>>()?;
        if feature.len() != FEATURE_DIM {
            return Err(bad(format!(
                "feature has {} values, expected {FEATURE_DIM}",
                feature.len()
            )));
        }
        let elem_field = fields[2].trim_end_matches('\r');
        let mut elements = if elem_field.is_empty() {
            Vec::new()
        } else {
            elem_field
                .split(';')
                .map(|e| {
                    e.parse::<usize>()
                        .map_err(|_| bad(format!("element id {e:?} is not a non-negative integer")))
                })
                .collect::<Result<Vec<usize>>>()?
        };
        elements.sort_unstable();
        elements.dedup();
        rows.push((item, feature, elements));
    }
    let fresh: BTreeSet<i64> = rows
        .iter()
        .map(|r| r.0)
        .filter(|ext| map.item(*ext).is_none())
        .collect();
    for ext in fresh {
        map.push_item(ext);
    }
    let mut items = vec![ItemContent::default(); map.items.len()];
    let mut vocab_size = 1;
    for (ext, feature, elements) in rows {
        if let Some(&max) = elements.last() {
            vocab_size = vocab_size.max(max + 1);
        }
        let idx = map.item_index[&ext];
        items[idx] = ItemContent {
            feature: Some(feature),
            image: None,
            elements,
        };
    }
    Ok(ContentTable { items, vocab_size })
}

pub fn write_content(path: &Path, rows: &[(i64, &[f64], &[usize])]) -> Result<()> {
    let mut out = Vec::new();
    for (item, feature, elements) in rows {
        write!(out, "{item}\t")?;
        for (k, v) in feature.iter().enumerate() {
            if k > 0 {
                out.push(b',');
            }
            write!(out, "{v}")?;
        }
        out.push(b'\t');
        for (k, e) in elements.iter().enumerate() {
            if k > 0 {
                out.push(b';');
            }
            write!(out, "{e}")?;
        }
        out.push(b'\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// An interaction log together with its id map and item content.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub log: InteractionLog,
    pub ids: IdMap,
    pub content: ContentTable,
}

impl Dataset {
    pub const INTERACTIONS: &'static str = "interactions.tsv";
    pub const CONTENT: &'static str = "content.tsv";
    pub const IDMAP: &'static str = "idmap.tsv";

    /// Loads `interactions.tsv` and `content.tsv` from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let (mut log, mut ids) = load_interactions(&dir.join(Self::INTERACTIONS))?;
        let content = load_content(&dir.join(Self::CONTENT), &mut ids)?;
        log.n_items = ids.items.len();
        Ok(Self { log, ids, content })
    }

    pub fn paths(dir: &Path) -> [PathBuf; 2] {
        [dir.join(Self::INTERACTIONS), dir.join(Self::CONTENT)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn loads_three_row_fixture() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "10\t5\t100\n10\t7\t101\n42\t5\t99\n");
        let (log, map) = load_interactions(&p).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.n_users, 2);
        assert_eq!(log.n_items, 2);
        assert_eq!(map.users, vec![10, 42]);
        assert_eq!(log.interactions[2], Interaction { user: 1, item: 0, timestamp: 99 });
    }

    #[test]
    fn header_line_is_a_parse_error_at_line_one() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "user_id\titem_id\ttimestamp\n1\t2\t3\n");
        match load_interactions(&p) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_column_count_and_empty_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "i.tsv", "1\t2\t3\n1\t2\n");
        assert!(matches!(load_interactions(&p), Err(Error::Parse { line: 2, .. })));
        let p = write(dir.path(), "e.tsv", "");
        assert!(matches!(load_interactions(&p), Err(Error::EmptyLog(_))));
    }

    #[test]
    fn idmap_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let map = IdMap::from_external([3, 1].into(), [9, -2, 4].into());
        let p = dir.path().join("idmap.tsv");
        map.write(&p).unwrap();
        let back = IdMap::read(&p).unwrap();
        assert_eq!(back, map);
        assert_eq!(back.item(-2), Some(0));
    }

    #[test]
    fn content_rows_parse_and_extend_catalogue() {
        let dir = tempfile::tempdir().unwrap();
        let feat: Vec<String> = (0..FEATURE_DIM).map(|k| format!("{}", k as f64 * 0.5)).collect();
        let body = format!("5\t{}\t3;1\n8\t{}\t\n", feat.join(","), feat.join(","));
        let p = write(dir.path(), "c.tsv", &body);
        let mut map = IdMap::from_external([1].into(), [5].into());
        let table = load_content(&p, &mut map).unwrap();
        assert_eq!(map.items, vec![5, 8]);
        assert_eq!(table.items[0].elements, vec![1, 3]);
        assert!(table.items[1].elements.is_empty());
        assert_eq!(table.vocab_size, 4);
        assert_eq!(table.feature(1).unwrap()[3], 1.5);

        let short = write(dir.path(), "s.tsv", "5\t1,2,3\t\n");
        assert!(matches!(load_content(&short, &mut map), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn missing_feature_names_the_item() {
        let table = ContentTable {
            items: vec![ItemContent::default()],
            vocab_size: 1,
        };
        assert!(matches!(table.feature(0), Err(Error::Content(0))));
    }
}
