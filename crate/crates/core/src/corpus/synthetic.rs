//! Procedural style-set corpora with known latent factors.
//!
//! Every style cluster owns a small colour palette and a couple of pattern
//! kinds; an item is a category silhouette filled with one palette colour
//! in one of its style's patterns. Sets draw all members from one cluster,
//! so co-occurrence and appearance carry the same signal.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::manifest::{
    write_factors, write_items_manifest, write_labeled_sets, write_sets_manifest,
};
use super::{Corpus, Item, LabeledSet, StyleSet, MAX_SET_SIZE, MIN_SET_SIZE};
use crate::error::{Error, Result};
use crate::tensor::{itf, Tensor};

pub const ITEMS_FILE: &str = "items.tsv";
pub const SETS_FILE: &str = "sets.tsv";
pub const FACTORS_FILE: &str = "factors.tsv";
pub const LABELED_SETS_FILE: &str = "labeled_sets.tsv";
pub const IMAGES_DIR: &str = "images";

/// Named colours available to style palettes.
pub const COLORS: [(&str, [f32; 3]); 8] = [
    ("red", [0.85, 0.15, 0.15]),
    ("green", [0.2, 0.65, 0.25]),
    ("blue", [0.2, 0.35, 0.85]),
    ("yellow", [0.95, 0.85, 0.2]),
    ("purple", [0.55, 0.25, 0.7]),
    ("orange", [0.95, 0.55, 0.1]),
    ("pink", [0.95, 0.55, 0.75]),
    ("teal", [0.1, 0.6, 0.6]),
];

const BACKGROUND: [f32; 3] = [1.0, 1.0, 1.0];
const SHADE: f32 = 0.45;
/// Distinct silhouette offsets: 6 horizontal by 3 vertical.
const VARIANTS: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    Solid,
    Stripe,
    Check,
    Dot,
}

impl Pattern {
    pub const ALL: [Pattern; 4] = [
        Pattern::Solid,
        Pattern::Stripe,
        Pattern::Check,
        Pattern::Dot,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Pattern::Solid => "solid",
            Pattern::Stripe => "stripe",
            Pattern::Check => "check",
            Pattern::Dot => "dot",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    /// Whether pixel `(y, x)` shows the primary colour.
    fn primary(self, y: usize, x: usize, period: usize) -> bool {
        match self {
            Pattern::Solid => true,
            Pattern::Stripe => y % period < period - period / 3,
            Pattern::Check => !y.is_multiple_of(period) && !x.is_multiple_of(period),
            Pattern::Dot => {
                let (dy, dx) = ((y % period) as isize - 1, (x % period) as isize - 1);
                dy * dy + dx * dx > 1
            }
        }
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Ground-truth factors of a synthetic item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ItemFactors {
    pub style: usize,
    pub color: String,
    pub pattern: Pattern,
}

pub type FactorTable = BTreeMap<String, ItemFactors>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_styles: usize,
    pub n_items_per_category_per_style: usize,
    pub categories: Vec<String>,
    /// `(channels, height, width)`; channels must be 3.
    pub image_shape: [usize; 3],
    /// Colours per style; palettes of different styles are disjoint.
    pub palette_size: usize,
    pub patterns_per_style: usize,
    pub n_sets: usize,
    /// Relative weights of set sizes 2, 3 and 4.
    pub set_size_weights: [f64; 3],
    /// Extra sets with style labels, for classification.
    pub n_labeled_sets: usize,
    /// Zipf exponent over each pool when picking set members; 0 is uniform reuse.
    pub reuse_skew: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_styles: 4,
            n_items_per_category_per_style: 20,
            categories: vec!["top".into(), "bottom".into(), "shoes".into()],
            image_shape: [3, 32, 32],
            palette_size: 2,
            patterns_per_style: 2,
            n_sets: 500,
            set_size_weights: [0.4, 0.6, 0.0],
            n_labeled_sets: 2000,
            reuse_skew: 0.0,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_styles == 0 || self.n_items_per_category_per_style == 0 {
            return bad("need at least one style and one item per category and style".into());
        }
        if self.categories.len() < MIN_SET_SIZE {
            return bad(format!("need at least {MIN_SET_SIZE} categories"));
        }
        let mut sorted = self.categories.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != self.categories.len() {
            return bad("duplicate category names".into());
        }
        let [c, h, w] = self.image_shape;
        if c != 3 || h < 8 || w < 8 {
            return bad(format!(
                "image shape {:?} must be 3 x H x W with H, W >= 8",
                self.image_shape
            ));
        }
        if self.palette_size == 0 || self.n_styles * self.palette_size > COLORS.len() {
            return bad(format!(
                "{} styles x {} colours exceed the {} available colours",
                self.n_styles,
                self.palette_size,
                COLORS.len()
            ));
        }
        if self.patterns_per_style == 0 || self.patterns_per_style > Pattern::ALL.len() {
            return bad(format!(
                "patterns_per_style must be in 1..={}",
                Pattern::ALL.len()
            ));
        }
        let grid = self.palette_size * self.patterns_per_style * VARIANTS;
        if self.n_items_per_category_per_style > grid {
            return bad(format!(
                "{} items per category and style requested but the factor grid holds {grid}",
                self.n_items_per_category_per_style
            ));
        }
        if self
            .set_size_weights
            .iter()
            .any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.set_size_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("set size weights must be non-negative with a positive sum".into());
        }
        for (i, &wt) in self.set_size_weights.iter().enumerate() {
            let size = MIN_SET_SIZE + i;
            if wt > 0.0 && size > self.categories.len() {
                return bad(format!(
                    "set size {size} needs more than the {} categories available",
                    self.categories.len()
                ));
            }
        }
        if !(self.reuse_skew >= 0.0) || !self.reuse_skew.is_finite() {
            return bad("reuse_skew must be a finite non-negative number".into());
        }
        Ok(())
    }

    pub fn n_items(&self) -> usize {
        self.n_styles * self.categories.len() * self.n_items_per_category_per_style
    }
}

/// A generated corpus with its ground truth.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub corpus: Corpus,
    pub factors: FactorTable,
    pub labeled: Vec<LabeledSet>,
}

struct Blueprint {
    item: Item,
    factors: ItemFactors,
    category_index: usize,
    variant: usize,
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn color_rgb(name: &str) -> [f32; 3] {
    COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| *c)
        .expect("known colour")
}

/// Silhouette membership in normalized coordinates `(u, v)` in `[0, 1)`.
fn in_mask(category: &str, index: usize, u: f64, v: f64) -> bool {
    let within = |lo: f64, x: f64, hi: f64| lo <= x && x < hi;
    match category {
        "top" => {
            (within(0.3, u, 0.7) && within(0.2, v, 0.8))
                || (within(0.1, u, 0.9) && within(0.2, v, 0.42))
        }
        "bottom" => {
            (within(0.3, u, 0.7) && within(0.12, v, 0.3))
                || ((within(0.3, u, 0.47) || within(0.53, u, 0.7)) && within(0.3, v, 0.92))
        }
        "shoes" => {
            (within(0.12, u, 0.88) && within(0.56, v, 0.8))
                || (within(0.12, u, 0.36) && within(0.36, v, 0.56))
        }
        "outer" => {
            let body = within(0.25, u, 0.75) && within(0.08, v, 0.92);
            let sleeves = within(0.06, u, 0.94) && within(0.08, v, 0.7);
            let opening = within(0.47, u, 0.53) && within(0.3, v, 0.92);
            (body || sleeves) && !opening
        }
        "dress" => {
            let half = 0.1 + 0.3 * (v - 0.08) / 0.84;
            within(0.08, v, 0.92) && (u - 0.5).abs() < half
        }
        _ => {
            // Ellipses of varying aspect for any other label.
            let a = 0.2 + 0.05 * (index % 5) as f64;
            let b = 0.42 - 0.05 * (index % 5) as f64;
            let (du, dv) = ((u - 0.5) / a, (v - 0.5) / b);
            du * du + dv * dv < 1.0
        }
    }
}

fn render(bp: &Blueprint, shape: [usize; 3]) -> Tensor {
    let [_, h, w] = shape;
    let primary = color_rgb(&bp.factors.color);
    let secondary = primary.map(|c| c * SHADE);
    let dx = (bp.variant % 6) as isize - 3;
    let dy = (bp.variant / 6) as isize - 1;
    let period = 4 + 2 * (bp.variant % 2);
    let mut data = vec![0.0; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let sy = y as isize - dy;
            let sx = x as isize - dx;
            let u = (sx as f64 + 0.5) / w as f64;
            let v = (sy as f64 + 0.5) / h as f64;
            let rgb = if in_mask(&bp.item.category, bp.category_index, u, v) {
                if bp.factors.pattern.primary(y, x, period) {
                    primary
                } else {
                    secondary
                }
            } else {
                BACKGROUND
            };
            for c in 0..3 {
                data[(c * h + y) * w + x] = rgb[c] as f64;
            }
        }
    }
    Tensor::from_parts(vec![3, h, w], data)
}

/// Most frequent non-background colour of a rendered image, if it is a palette colour.
pub fn dominant_color(img: &Tensor) -> Option<&'static str> {
    let &[3, h, w] = img.shape() else { return None };
    let mut counts: HashMap<[u32; 3], usize> = HashMap::new();
    let bg = BACKGROUND.map(f32::to_bits);
    for p in 0..h * w {
        let px = [0, 1, 2].map(|c| (img.data()[c * h * w + p] as f32).to_bits());
        if px != bg {
            *counts.entry(px).or_default() += 1;
        }
    }
    let best = counts.into_iter().max_by_key(|&(px, n)| (n, px))?.0;
    COLORS
        .iter()
        .find(|(_, rgb)| rgb.map(f32::to_bits) == best)
        .map(|(name, _)| *name)
}

fn blueprints(spec: &SyntheticSpec, image_dir: &Path) -> Vec<Blueprint> {
    let mut rng = sub_rng(spec.seed, 0);
    let mut colors: Vec<&str> = COLORS.iter().map(|(n, _)| *n).collect();
    colors.shuffle(&mut rng);
    let mut patterns = Pattern::ALL;
    patterns.shuffle(&mut rng);

    let mut out = Vec::with_capacity(spec.n_items());
    for (ci, category) in spec.categories.iter().enumerate() {
        for style in 0..spec.n_styles {
            let palette = &colors[style * spec.palette_size..(style + 1) * spec.palette_size];
            let kinds: Vec<Pattern> = (0..spec.patterns_per_style)
                .map(|j| patterns[(style * spec.patterns_per_style + j) % patterns.len()])
                .collect();
            let mut variants: Vec<usize> = (0..VARIANTS).collect();
            variants.shuffle(&mut rng);
            // Variants outermost so every pool cycles through its colours and patterns.
            let mut grid = Vec::with_capacity(VARIANTS * palette.len() * kinds.len());
            for &v in &variants {
                for c in 0..palette.len() {
                    for p in 0..kinds.len() {
                        grid.push((c, p, v));
                    }
                }
            }
            for (i, &(c, p, v)) in grid
                .iter()
                .take(spec.n_items_per_category_per_style)
                .enumerate()
            {
                let id = format!("{category}-s{style}-{i:03}");
                out.push(Blueprint {
                    item: Item {
                        image_ref: image_dir.join(format!("{id}.itf")),
                        id,
                        category: category.clone(),
                    },
                    factors: ItemFactors {
                        style,
                        color: palette[c].to_string(),
                        pattern: kinds[p],
                    },
                    category_index: ci,
                    variant: v,
                });
            }
        }
    }
    out
}

fn draw_sets(
    spec: &SyntheticSpec,
    pools: &HashMap<(usize, usize), Vec<String>>,
    count: usize,
    stream: u64,
    prefix: &str,
) -> Vec<(StyleSet, usize)> {
    let mut rng = sub_rng(spec.seed, stream);
    let sizes = WeightedIndex::new(spec.set_size_weights).expect("validated weights");
    let pick = (spec.reuse_skew > 0.0).then(|| {
        WeightedIndex::new(
            (0..spec.n_items_per_category_per_style)
                .map(|r| 1.0 / ((r + 1) as f64).powf(spec.reuse_skew)),
        )
        .expect("positive weights")
    });
    (0..count)
        .map(|n| {
            let style = rng.gen_range(0..spec.n_styles);
            let size = MIN_SET_SIZE + sizes.sample(&mut rng);
            debug_assert!(size <= MAX_SET_SIZE);
            let cats = rand::seq::index::sample(&mut rng, spec.categories.len(), size);
            let members = cats
                .iter()
                .map(|c| {
                    let pool = &pools[&(c, style)];
                    let r = match &pick {
                        Some(dist) => dist.sample(&mut rng),
                        None => rng.gen_range(0..pool.len()),
                    };
                    pool[r].clone()
                })
                .collect();
            (StyleSet::new(format!("{prefix}{n:05}"), members), style)
        })
        .collect()
}

/// Builds the corpus in memory; image paths point into `out_dir/images`.
pub fn synthesize(spec: &SyntheticSpec, out_dir: &Path) -> Result<(SyntheticCorpus, Vec<Tensor>)> {
    spec.validate()?;
    let image_dir = out_dir.join(IMAGES_DIR);
    let bps = blueprints(spec, &image_dir);

    let mut pools: HashMap<(usize, usize), Vec<String>> = HashMap::new();
    for bp in &bps {
        pools
            .entry((bp.category_index, bp.factors.style))
            .or_default()
            .push(bp.item.id.clone());
    }
    let sets = draw_sets(spec, &pools, spec.n_sets, 1, "set")
        .into_iter()
        .map(|(s, _)| s)
        .collect();
    let labeled = draw_sets(spec, &pools, spec.n_labeled_sets, 2, "lab")
        .into_iter()
        .map(|(set, style)| LabeledSet {
            set,
            label: format!("style{style}"),
        })
        .collect();

    let images: Vec<Tensor> = bps
        .par_iter()
        .map(|bp| render(bp, spec.image_shape))
        .collect();
    let factors = bps
        .iter()
        .map(|bp| (bp.item.id.clone(), bp.factors.clone()))
        .collect();
    let items = bps.into_iter().map(|bp| bp.item).collect();
    let corpus = Corpus::new(items, sets, spec.categories.clone())?;
    Ok((
        SyntheticCorpus {
            corpus,
            factors,
            labeled,
        },
        images,
    ))
}

/// Generates a corpus and writes images, manifests and the factor sidecar under `out_dir`.
pub fn gen_synthetic(spec: &SyntheticSpec, out_dir: impl AsRef<Path>) -> Result<SyntheticCorpus> {
    let out_dir = out_dir.as_ref();
    let (generated, images) = synthesize(spec, out_dir)?;
    let image_dir = out_dir.join(IMAGES_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for (item, img) in generated.corpus.items().iter().zip(&images) {
        itf::write(&item.image_ref, img)?;
    }
    write_items_manifest(out_dir.join(ITEMS_FILE), &generated.corpus)?;
    write_sets_manifest(out_dir.join(SETS_FILE), generated.corpus.sets())?;
    write_factors(out_dir.join(FACTORS_FILE), &generated.factors)?;
    write_labeled_sets(out_dir.join(LABELED_SETS_FILE), &generated.labeled)?;
    Ok(generated)
}

/// Paths of the standard files inside a corpus directory.
pub fn corpus_files(dir: &Path) -> (PathBuf, PathBuf) {
    (dir.join(ITEMS_FILE), dir.join(SETS_FILE))
}
