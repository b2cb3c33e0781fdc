//! Items, datasets and their on-disk layout.
//!
//! A dataset directory holds `items.jsonl` (one record per line), an optional
//! `manifest.json` declaring the metadata kind, and `train.ids`, `val.ids`,
//! `test.ids` listing split membership one id per line.

mod synth;

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;
use crate::text::preprocess_text;

pub use synth::{generate_synthetic, SynthConfig, TOPIC_POOL_SIZE};

pub const ITEMS_FILE: &str = "items.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Which kind of metadata items carry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MetadataKind {
    /// Tags from a closed vocabulary.
    #[default]
    Cs,
    /// Free-form tags.
    Os,
    /// A full-sentence description: one caption is held out as metadata.
    Fs,
    None,
}

impl MetadataKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Cs => "cs",
            Self::Os => "os",
            Self::Fs => "fs",
            Self::None => "none",
        }
    }
}

impl fmt::Display for MetadataKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MetadataKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cs" => Ok(Self::Cs),
            "os" => Ok(Self::Os),
            "fs" => Ok(Self::Fs),
            "none" => Ok(Self::None),
            other => Err(Error::Config(format!("metadata: expected cs|os|fs|none, got `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Item {
    pub id: String,
    /// `T×f` frame features; may be empty for metadata-only items.
    pub frames: Tensor2D,
    pub tags: Vec<String>,
    pub captions: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct ItemRecord {
    id: String,
    frames: Vec<Vec<f64>>,
    tags: Vec<String>,
    captions: Vec<String>,
}

impl Item {
    /// Index of the caption reserved as FS metadata at evaluation time.
    pub fn metadata_caption_index(&self) -> usize {
        self.captions.len().saturating_sub(1)
    }

    /// Captions used as evaluation queries: all of them, except the reserved
    /// metadata caption under FS.
    pub fn query_captions(&self, kind: MetadataKind) -> &[String] {
        match kind {
            MetadataKind::Fs => &self.captions[..self.metadata_caption_index()],
            _ => &self.captions,
        }
    }

    fn to_record(&self) -> ItemRecord {
        ItemRecord {
            id: self.id.clone(),
            frames: (0..self.frames.rows()).map(|r| self.frames.row(r).to_vec()).collect(),
            tags: self.tags.clone(),
            captions: self.captions.clone(),
        }
    }

    fn from_record(r: ItemRecord) -> std::result::Result<Self, String> {
        if r.captions.is_empty() {
            return Err(format!("item `{}` has no captions", r.id));
        }
        let frames = if r.frames.is_empty() {
            Tensor2D::zeros(0, 0)
        } else {
            Tensor2D::from_rows(&r.frames).map_err(|e| format!("item `{}`: frames: {e}", r.id))?
        };
        Ok(Self {
            id: r.id,
            frames,
            tags: r.tags,
            captions: r.captions,
        })
    }
}

/// Converts an item's metadata to the cleaned text fed to the metadata encoder.
pub fn metadata_to_text(item: &Item, kind: MetadataKind) -> Result<String> {
    match kind {
        MetadataKind::Cs | MetadataKind::Os => Ok(preprocess_text(&item.tags.join(" "))),
        MetadataKind::Fs => {
            check_fs(item)?;
            Ok(preprocess_text(&item.captions[item.metadata_caption_index()]))
        }
        MetadataKind::None => Ok(String::new()),
    }
}

fn check_fs(item: &Item) -> Result<()> {
    if item.captions.len() < 2 {
        return Err(Error::Metadata(format!(
            "item `{}` has {} caption(s); FS metadata needs at least 2",
            item.id,
            item.captions.len()
        )));
    }
    Ok(())
}

/// Two distinct caption indices out of `n`, uniformly over ordered pairs.
pub fn fs_pair_indices<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<(usize, usize)> {
    if n < 2 {
        return Err(Error::Metadata(format!("FS split needs at least 2 captions, got {n}")));
    }
    let q = rng.random_range(0..n);
    let mut m = rng.random_range(0..n - 1);
    if m >= q {
        m += 1;
    }
    Ok((q, m))
}

/// Picks one caption as the query and a different one as metadata; both are
/// returned cleaned.
pub fn simulate_fs_split<R: Rng + ?Sized>(item: &Item, rng: &mut R) -> Result<(String, String)> {
    check_fs(item)?;
    let (q, m) = fs_pair_indices(item.captions.len(), rng)?;
    Ok((preprocess_text(&item.captions[q]), preprocess_text(&item.captions[m])))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn file_name(self) -> &'static str {
        match self {
            Split::Train => "train.ids",
            Split::Val => "val.ids",
            Split::Test => "test.ids",
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[String] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut Vec<String> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    metadata_kind: MetadataKind,
}

/// A validated, immutable collection of items with split membership.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    items: Vec<Item>,
    index: HashMap<String, usize>,
    metadata_kind: MetadataKind,
    splits: Splits,
}

impl Dataset {
    pub fn new(items: Vec<Item>, metadata_kind: MetadataKind, splits: Splits) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let mut index = HashMap::with_capacity(items.len());
        let mut width = None;
        for (i, item) in items.iter().enumerate() {
            if index.insert(item.id.clone(), i).is_some() {
                return Err(Error::DatasetConsistency(format!("duplicate id `{}`", item.id)));
            }
            if item.captions.is_empty() {
                return Err(Error::DatasetConsistency(format!("item `{}` has no captions", item.id)));
            }
            if metadata_kind == MetadataKind::Fs {
                check_fs(item)?;
            }
            if item.frames.rows() > 0 {
                let w = item.frames.cols();
                if *width.get_or_insert(w) != w {
                    return Err(Error::DatasetConsistency(format!(
                        "item `{}` has frame width {w}, expected {}",
                        item.id,
                        width.unwrap_or(w)
                    )));
                }
            }
        }
        let mut seen = HashSet::new();
        for split in Split::ALL {
            for id in splits.get(split) {
                if !index.contains_key(id) {
                    return Err(Error::DatasetConsistency(format!(
                        "{} lists unknown id `{id}`",
                        split.file_name()
                    )));
                }
                if !seen.insert(id.as_str()) {
                    return Err(Error::DatasetConsistency(format!("id `{id}` appears in more than one split")));
                }
            }
        }
        Ok(Self {
            items,
            index,
            metadata_kind,
            splits,
        })
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    pub fn metadata_kind(&self) -> MetadataKind {
        self.metadata_kind
    }

    /// The same items read with a different metadata kind.
    pub fn with_metadata_kind(&self, kind: MetadataKind) -> Result<Self> {
        Self::new(self.items.clone(), kind, self.splits.clone())
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    /// Items of a split in listed order.
    pub fn split(&self, split: Split) -> Vec<&Item> {
        self.splits
            .get(split)
            .iter()
            .map(|id| &self.items[self.index[id]])
            .collect()
    }

    /// Feature width shared by all non-empty frame sequences.
    pub fn frame_width(&self) -> Option<usize> {
        self.items.iter().find(|i| i.frames.rows() > 0).map(|i| i.frames.cols())
    }

    /// Writes the directory layout described in the module docs.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut f = BufWriter::new(std::fs::File::create(dir.join(ITEMS_FILE))?);
        for item in &self.items {
            serde_json::to_writer(&mut f, &item.to_record())?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        let manifest = serde_json::to_string(&Manifest {
            metadata_kind: self.metadata_kind,
        })?;
        std::fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        for split in Split::ALL {
            let mut f = BufWriter::new(std::fs::File::create(dir.join(split.file_name()))?);
            for id in self.splits.get(split) {
                writeln!(f, "{id}")?;
            }
            f.flush()?;
        }
        Ok(())
    }
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let items_path = dir.join(ITEMS_FILE);
    let reader = std::io::BufReader::new(std::fs::File::open(&items_path)?);
    let load_err = |path: &PathBuf, line: usize, msg: String| Error::Load {
        path: path.clone(),
        line,
        msg,
    };
    let mut items = Vec::new();
    let mut ids = HashSet::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: ItemRecord =
            serde_json::from_str(&line).map_err(|e| load_err(&items_path, n + 1, e.to_string()))?;
        if !ids.insert(record.id.clone()) {
            return Err(load_err(&items_path, n + 1, format!("duplicate id `{}`", record.id)));
        }
        let item = Item::from_record(record).map_err(|m| load_err(&items_path, n + 1, m))?;
        items.push((n + 1, item));
    }
    if items.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let manifest_path = dir.join(MANIFEST_FILE);
    let metadata_kind = if manifest_path.exists() {
        let text = std::fs::read_to_string(&manifest_path)?;
        serde_json::from_str::<Manifest>(&text)
            .map_err(|e| load_err(&manifest_path, e.line(), e.to_string()))?
            .metadata_kind
    } else {
        MetadataKind::default()
    };
    let mut width = None;
    for (line, item) in &items {
        if metadata_kind == MetadataKind::Fs && item.captions.len() < 2 {
            return Err(load_err(
                &items_path,
                *line,
                format!("item `{}` needs at least 2 captions for FS metadata", item.id),
            ));
        }
        if item.frames.rows() > 0 && *width.get_or_insert(item.frames.cols()) != item.frames.cols() {
            return Err(load_err(&items_path, *line, format!("item `{}` has a different frame width", item.id)));
        }
    }

    let mut splits = Splits::default();
    let mut seen = HashSet::new();
    for split in Split::ALL {
        let path = dir.join(split.file_name());
        if !path.exists() {
            continue;
        }
        let reader = std::io::BufReader::new(std::fs::File::open(&path)?);
        for (n, line) in reader.lines().enumerate() {
            let id = line?.trim().to_string();
            if id.is_empty() {
                continue;
            }
            if !ids.contains(&id) {
                return Err(load_err(&path, n + 1, format!("unknown id `{id}`")));
            }
            if !seen.insert(id.clone()) {
                return Err(load_err(&path, n + 1, format!("id `{id}` is already in another split")));
            }
            splits.get_mut(split).push(id);
        }
    }
    Dataset::new(items.into_iter().map(|(_, i)| i).collect(), metadata_kind, splits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn item(tags: &[&str], captions: &[&str]) -> Item {
        Item {
            id: "x".into(),
            frames: Tensor2D::zeros(1, 2),
            tags: tags.iter().map(|s| s.to_string()).collect(),
            captions: captions.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn tags_become_keyword_text() {
        let it = item(&["rain", "thunder"], &["a"]);
        assert_eq!(metadata_to_text(&it, MetadataKind::Cs).unwrap(), "rain thunder");
        assert_eq!(metadata_to_text(&item(&[], &["a"]), MetadataKind::Os).unwrap(), "");
        assert_eq!(metadata_to_text(&item(&["Dog-Bark!"], &["a"]), MetadataKind::Cs).unwrap(), "dogbark");
        assert_eq!(metadata_to_text(&it, MetadataKind::None).unwrap(), "");
    }

    #[test]
    fn fs_needs_two_captions() {
        let it = item(&[], &["only one"]);
        assert!(matches!(metadata_to_text(&it, MetadataKind::Fs), Err(Error::Metadata(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(simulate_fs_split(&it, &mut rng), Err(Error::Metadata(_))));
    }

    #[test]
    fn fs_metadata_is_last_caption() {
        let it = item(&[], &["A b", "c, D"]);
        assert_eq!(metadata_to_text(&it, MetadataKind::Fs).unwrap(), "c d");
        assert_eq!(it.query_captions(MetadataKind::Fs), &["A b".to_string()]);
        assert_eq!(it.query_captions(MetadataKind::Cs).len(), 2);
    }

    #[test]
    fn two_captions_always_give_both() {
        let it = item(&[], &["one", "two"]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let (q, m) = simulate_fs_split(&it, &mut rng).unwrap();
            let mut pair = [q, m];
            pair.sort();
            assert_eq!(pair, ["one".to_string(), "two".to_string()]);
        }
    }

    #[test]
    fn split_validation() {
        let mut a = item(&[], &["c"]);
        a.id = "a".into();
        let splits = Splits {
            train: vec!["a".into()],
            val: vec![],
            test: vec!["a".into()],
        };
        assert!(matches!(
            Dataset::new(vec![a.clone()], MetadataKind::Cs, splits),
            Err(Error::DatasetConsistency(_))
        ));
        let unknown = Splits {
            train: vec!["b".into()],
            ..Splits::default()
        };
        assert!(Dataset::new(vec![a], MetadataKind::Cs, unknown).is_err());
        assert!(matches!(Dataset::new(vec![], MetadataKind::Cs, Splits::default()), Err(Error::EmptyDataset)));
    }
}
