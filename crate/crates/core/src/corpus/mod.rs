//! Items, style sets and the corpus they form.

mod image;
mod manifest;
pub mod synthetic;

use std::collections::{HashMap, HashSet};
use std::path::PathBuf;

pub use image::load_image;
pub use manifest::{
    load_corpus, load_labeled_sets, read_factors, write_factors, write_items_manifest,
    write_labeled_sets, write_sets_manifest,
};
pub use synthetic::{gen_synthetic, ItemFactors, Pattern, SyntheticCorpus, SyntheticSpec};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MIN_SET_SIZE: usize = 2;
pub const MAX_SET_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Item {
    pub id: String,
    pub category: String,
    pub image_ref: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StyleSet {
    pub set_id: String,
    pub item_ids: Vec<String>,
}

impl StyleSet {
    pub fn new(set_id: impl Into<String>, item_ids: Vec<String>) -> Self {
        StyleSet {
            set_id: set_id.into(),
            item_ids,
        }
    }

    pub fn len(&self) -> usize {
        self.item_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_ids.is_empty()
    }

    pub fn contains(&self, id: &str) -> bool {
        self.item_ids.iter().any(|i| i == id)
    }
}

/// A style set with a style-type label, used for classification.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSet {
    pub set: StyleSet,
    pub label: String,
}

/// The item pool and the style sets drawn from it.
#[derive(Clone, Debug)]
pub struct Corpus {
    items: Vec<Item>,
    sets: Vec<StyleSet>,
    categories: Vec<String>,
    index: HashMap<String, usize>,
}

impl Corpus {
    pub fn new(items: Vec<Item>, sets: Vec<StyleSet>, categories: Vec<String>) -> Result<Self> {
        let declared: HashSet<&str> = categories.iter().map(String::as_str).collect();
        if declared.len() != categories.len() {
            return Err(Error::InvalidConfig("duplicate category labels".into()));
        }
        let mut index = HashMap::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if !declared.contains(item.category.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "item {} has undeclared category {}",
                    item.id, item.category
                )));
            }
            if index.insert(item.id.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!(
                    "duplicate item id {}",
                    item.id
                )));
            }
        }
        let corpus = Corpus {
            items,
            sets: Vec::new(),
            categories,
            index,
        };
        for set in &sets {
            corpus.validate_set(set)?;
        }
        let mut seen = HashSet::new();
        for set in &sets {
            if !seen.insert(set.set_id.as_str()) {
                return Err(Error::InvalidSet {
                    set_id: set.set_id.clone(),
                    reason: "duplicate set id".into(),
                });
            }
        }
        Ok(Corpus { sets, ..corpus })
    }

    /// Checks the style-set invariants against this corpus's items.
    pub fn validate_set(&self, set: &StyleSet) -> Result<()> {
        let invalid = |reason: String| Error::InvalidSet {
            set_id: set.set_id.clone(),
            reason,
        };
        if !(MIN_SET_SIZE..=MAX_SET_SIZE).contains(&set.len()) {
            return Err(invalid(format!(
                "has {} items, expected {MIN_SET_SIZE} to {MAX_SET_SIZE}",
                set.len()
            )));
        }
        let mut ids = HashSet::new();
        let mut cats = HashSet::new();
        for id in &set.item_ids {
            let item = self.item(id).ok_or_else(|| Error::DanglingReference {
                set_id: set.set_id.clone(),
                item_id: id.clone(),
            })?;
            if !ids.insert(id.as_str()) {
                return Err(invalid(format!("item {id} appears twice")));
            }
            if !cats.insert(item.category.as_str()) {
                return Err(invalid(format!("category {} appears twice", item.category)));
            }
        }
        Ok(())
    }

    pub fn items(&self) -> &[Item] {
        &self.items
    }

    pub fn sets(&self) -> &[StyleSet] {
        &self.sets
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn item(&self, id: &str) -> Option<&Item> {
        self.index.get(id).map(|&i| &self.items[i])
    }

    /// Position of an item in [`Corpus::items`].
    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn max_set_size(&self) -> usize {
        self.sets.iter().map(StyleSet::len).max().unwrap_or(0)
    }

    /// Fails when some set leaves fewer than `k` items outside it.
    pub fn check_pool(&self, k: usize) -> Result<()> {
        let needed = self.max_set_size() + k;
        if self.items.len() < needed {
            return Err(Error::InsufficientPool {
                needed: k,
                available: self.items.len().saturating_sub(self.max_set_size()),
            });
        }
        Ok(())
    }

    /// Same items, different sets.
    pub fn with_sets(&self, sets: Vec<StyleSet>) -> Result<Corpus> {
        Corpus::new(self.items.clone(), sets, self.categories.clone())
    }

    /// Loads every item image, checking they all share one shape.
    pub fn load_images(&self) -> Result<Vec<Tensor>> {
        let mut images = Vec::with_capacity(self.items.len());
        let mut shape: Option<Vec<usize>> = None;
        for item in &self.items {
            let img = load_image(&item.image_ref)?;
            match &shape {
                None => shape = Some(img.shape().to_vec()),
                Some(s) if s.as_slice() != img.shape() => {
                    return Err(Error::Image {
                        path: item.image_ref.clone(),
                        reason: format!(
                            "item {} has shape {:?}, expected {:?}",
                            item.id,
                            img.shape(),
                            s
                        ),
                    })
                }
                Some(_) => {}
            }
            images.push(img);
        }
        Ok(images)
    }
}

/// Replaces every set by all of its unordered 2-subsets.
///
/// Pairs keep member order; a pair that occurs in several sets is kept once per set.
pub fn pairwise_transform(corpus: &Corpus) -> Result<Corpus> {
    let mut pairs = Vec::new();
    for set in corpus.sets() {
        let ids = &set.item_ids;
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                pairs.push(StyleSet::new(
                    format!("{}:{}-{}", set.set_id, i, j),
                    vec![ids[i].clone(), ids[j].clone()],
                ));
            }
        }
    }
    corpus.with_sets(pairs)
}
