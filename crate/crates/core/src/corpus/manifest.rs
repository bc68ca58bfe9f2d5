//! Tab-separated manifest files.
//!
//! - items: `item_id<TAB>category<TAB>image_path` (relative paths resolve
//!   against the manifest's directory)
//! - sets: `set_id<TAB>item_id,item_id[,item_id[,item_id]]`
//! - labeled sets: a sets line followed by `<TAB>label`
//! - factors: `item_id<TAB>style_cluster<TAB>color<TAB>pattern`

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::synthetic::{FactorTable, ItemFactors, Pattern};
use super::{Corpus, Item, LabeledSet, StyleSet};
use crate::error::{Error, Result};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty lines split on tabs, with 1-based line numbers.
fn records<'a>(
    path: &'a Path,
    text: &'a str,
    fields: usize,
) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(move |(n, line)| {
            let parts: Vec<&str> = line.trim_end_matches('\r').split('\t').collect();
            if parts.len() != fields || parts.iter().any(|p| p.is_empty()) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: n + 1,
                    msg: format!("expected {fields} non-empty tab-separated fields"),
                });
            }
            Ok((n + 1, parts))
        })
}

fn parse_members(list: &str) -> Vec<String> {
    list.split(',').map(|s| s.trim().to_string()).collect()
}

pub fn load_corpus(items_path: impl AsRef<Path>, sets_path: impl AsRef<Path>) -> Result<Corpus> {
    let items_path = items_path.as_ref();
    let sets_path = sets_path.as_ref();
    let base = items_path.parent().unwrap_or(Path::new("."));

    let text = read_text(items_path)?;
    let mut items = Vec::new();
    let mut categories: Vec<String> = Vec::new();
    for rec in records(items_path, &text, 3) {
        let (_, f) = rec?;
        let category = f[1].to_string();
        if !categories.contains(&category) {
            categories.push(category.clone());
        }
        let image = PathBuf::from(f[2]);
        items.push(Item {
            id: f[0].to_string(),
            category,
            image_ref: if image.is_absolute() {
                image
            } else {
                base.join(image)
            },
        });
    }

    let text = read_text(sets_path)?;
    let mut sets = Vec::new();
    for rec in records(sets_path, &text, 2) {
        let (_, f) = rec?;
        sets.push(StyleSet::new(f[0], parse_members(f[1])));
    }
    Corpus::new(items, sets, categories)
}

fn relative_to(path: &Path, base: &Path) -> PathBuf {
    path.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

pub fn write_items_manifest(path: impl AsRef<Path>, corpus: &Corpus) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = String::new();
    for item in corpus.items() {
        let rel = relative_to(&item.image_ref, base);
        writeln!(out, "{}\t{}\t{}", item.id, item.category, rel.display()).unwrap();
    }
    write_text(path, &out)
}

pub fn write_sets_manifest(path: impl AsRef<Path>, sets: &[StyleSet]) -> Result<()> {
    let mut out = String::new();
    for set in sets {
        writeln!(out, "{}\t{}", set.set_id, set.item_ids.join(",")).unwrap();
    }
    write_text(path.as_ref(), &out)
}

pub fn write_labeled_sets(path: impl AsRef<Path>, sets: &[LabeledSet]) -> Result<()> {
    let mut out = String::new();
    for ls in sets {
        writeln!(
            out,
            "{}\t{}\t{}",
            ls.set.set_id,
            ls.set.item_ids.join(","),
            ls.label
        )
        .unwrap();
    }
    write_text(path.as_ref(), &out)
}

/// Reads labeled sets and validates each one against `corpus`.
pub fn load_labeled_sets(path: impl AsRef<Path>, corpus: &Corpus) -> Result<Vec<LabeledSet>> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut out = Vec::new();
    for rec in records(path, &text, 3) {
        let (_, f) = rec?;
        let set = StyleSet::new(f[0], parse_members(f[1]));
        corpus.validate_set(&set)?;
        out.push(LabeledSet {
            set,
            label: f[2].to_string(),
        });
    }
    Ok(out)
}

pub fn write_factors(path: impl AsRef<Path>, factors: &FactorTable) -> Result<()> {
    let mut out = String::new();
    for (id, f) in factors {
        writeln!(out, "{id}\t{}\t{}\t{}", f.style, f.color, f.pattern.name()).unwrap();
    }
    write_text(path.as_ref(), &out)
}

pub fn read_factors(path: impl AsRef<Path>) -> Result<FactorTable> {
    let path = path.as_ref();
    let text = read_text(path)?;
    let mut table = FactorTable::new();
    for rec in records(path, &text, 4) {
        let (line, f) = rec?;
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let style = f[1]
            .parse()
            .map_err(|_| parse_err(format!("bad style cluster {:?}", f[1])))?;
        let pattern = Pattern::from_name(f[3])
            .ok_or_else(|| parse_err(format!("unknown pattern {:?}", f[3])))?;
        table.insert(
            f[0].to_string(),
            ItemFactors {
                style,
                color: f[2].to_string(),
                pattern,
            },
        );
    }
    Ok(table)
}
