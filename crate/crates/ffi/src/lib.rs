//! C ABI over the setvec toolkit.
//!
//! Objects cross the boundary as opaque handles that the caller releases with
//! the matching `*_free` function. Every fallible call returns an `SvStatus`;
//! on failure `sv_last_error` describes the most recent error on the calling
//! thread. Strings are UTF-8 and NUL-terminated.

use std::cell::RefCell;
use std::collections::HashSet;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use setvec::corpus::synthetic::{gen_synthetic, ITEMS_FILE, SETS_FILE};
use setvec::corpus::{load_corpus, Corpus, SyntheticSpec};
use setvec::encoder::{ConvStage, EncoderConfig, PoolKind};
use setvec::query::{self, AnalogyQuestion, EmbeddingMatrix, Metric};
use setvec::trainer::{
    load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig, TrainOptions,
};
use setvec::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// Bad configuration, malformed input data or an impossible request.
    InvalidArgument = 2,
    /// A file could not be read or written.
    Io = 3,
    /// An item id is not present.
    NotFound = 4,
    /// The caller's buffer is shorter than required.
    BufferTooSmall = 5,
    /// A checkpoint or matrix file failed its integrity checks.
    Corrupt = 6,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 7,
    /// A numerical or internal failure.
    Runtime = 8,
}

/// Similarity used for ranking.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvMetric {
    Cosine = 0,
    Dot = 1,
    Euclidean = 2,
}

impl From<SvMetric> for Metric {
    fn from(m: SvMetric) -> Metric {
        match m {
            SvMetric::Cosine => Metric::Cosine,
            SvMetric::Dot => Metric::Dot,
            SvMetric::Euclidean => Metric::Euclidean,
        }
    }
}

/// Item pool and style sets.
pub struct SvCorpus {
    corpus: Corpus,
}

/// Trained or freshly initialized encoder pair with optimizer state.
pub struct SvCheckpoint {
    checkpoint: Checkpoint,
}

/// Item embeddings with ids and categories.
pub struct SvEmbeddings {
    matrix: EmbeddingMatrix,
}

/// Synthetic corpus settings; start from `sv_synth_params_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SvSynthParams {
    pub n_styles: usize,
    pub items_per_category_per_style: usize,
    /// Number of categories, taken in order from top, bottom, shoes, outer, bag.
    pub n_categories: usize,
    /// Square image side in pixels.
    pub image_size: usize,
    pub palette_size: usize,
    pub patterns_per_style: usize,
    pub n_sets: usize,
    /// Relative weights of set sizes 2, 3 and 4.
    pub set_size_weights: [f64; 3],
    pub n_labeled_sets: usize,
    pub reuse_skew: f64,
    pub seed: u64,
}

/// Training settings; start from `sv_train_params_default`.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SvTrainParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Negatives per pair.
    pub k: usize,
    pub seed: u64,
    pub embedding_dim: usize,
    /// Number of convolution stages in use, at most 4.
    pub n_stages: usize,
    pub stage_channels: [usize; 4],
    pub convs_per_stage: usize,
    /// Non-zero selects average pooling instead of max pooling.
    pub avg_pool: u8,
    pub batch_norm: u8,
}

const CATEGORY_NAMES: [&str; 5] = ["top", "bottom", "shoes", "outer", "bag"];

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("NUL bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(SvStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Io { .. } => SvStatus::Io,
            Error::MissingItem(_) | Error::MissingVector(_) => SvStatus::NotFound,
            Error::Corrupt { .. } | Error::CheckpointVersion { .. } => SvStatus::Corrupt,
            e if e.is_validation() => SvStatus::InvalidArgument,
            _ => SvStatus::Runtime,
        };
        Failure(status, e.to_string())
    }
}

type Outcome<T = ()> = std::result::Result<T, Failure>;

fn guard(f: impl FnOnce() -> Outcome) -> SvStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SvStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(_) => {
            set_last_error("internal panic".into());
            SvStatus::Runtime
        }
    }
}

fn null(name: &str) -> Failure {
    Failure(SvStatus::NullArgument, format!("{name} is null"))
}

unsafe fn deref<'a, T>(p: *const T, name: &str) -> Outcome<&'a T> {
    p.as_ref().ok_or_else(|| null(name))
}

unsafe fn out<'a, T>(p: *mut T, name: &str) -> Outcome<&'a mut T> {
    p.as_mut().ok_or_else(|| null(name))
}

unsafe fn text<'a>(p: *const c_char, name: &str) -> Outcome<&'a str> {
    if p.is_null() {
        return Err(null(name));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SvStatus::InvalidUtf8, format!("{name} is not valid UTF-8")))
}

unsafe fn slice<'a, T>(p: *const T, len: usize, name: &str) -> Outcome<&'a [T]> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn slice_mut<'a, T>(p: *mut T, len: usize, name: &str) -> Outcome<&'a mut [T]> {
    if len == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(null(name));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(SvStatus::InvalidArgument, msg.into())
}

/// Copies `s` with a NUL terminator; `needed` receives the full size including the terminator.
unsafe fn write_string(s: &str, buf: *mut c_char, len: usize, needed: *mut usize) -> Outcome {
    let size = s.len() + 1;
    if let Some(n) = needed.as_mut() {
        *n = size;
    }
    if len < size {
        return Err(Failure(
            SvStatus::BufferTooSmall,
            format!("buffer of {len} bytes, need {size}"),
        ));
    }
    let dst = slice_mut(buf as *mut u8, len, "buf")?;
    dst[..s.len()].copy_from_slice(s.as_bytes());
    dst[s.len()] = 0;
    Ok(())
}

/// Toolkit version as a static string.
#[no_mangle]
pub extern "C" fn sv_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the last failed call on this thread, or null if none.
///
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn sv_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Fills `params` with the default synthetic corpus settings.
///
/// # Safety
/// `params` must be null or point to writable memory for one `SvSynthParams`.
#[no_mangle]
pub unsafe extern "C" fn sv_synth_params_default(params: *mut SvSynthParams) -> SvStatus {
    guard(|| {
        let p = out(params, "params")?;
        let d = SyntheticSpec::default();
        *p = SvSynthParams {
            n_styles: d.n_styles,
            items_per_category_per_style: d.n_items_per_category_per_style,
            n_categories: d.categories.len(),
            image_size: d.image_shape[1],
            palette_size: d.palette_size,
            patterns_per_style: d.patterns_per_style,
            n_sets: d.n_sets,
            set_size_weights: d.set_size_weights,
            n_labeled_sets: d.n_labeled_sets,
            reuse_skew: d.reuse_skew,
            seed: d.seed,
        };
        Ok(())
    })
}

/// Writes a synthetic corpus to `out_dir` and opens it.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string, `params` must point to an
/// `SvSynthParams` and `corpus` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sv_synth_generate(
    out_dir: *const c_char,
    params: *const SvSynthParams,
    corpus: *mut *mut SvCorpus,
) -> SvStatus {
    guard(|| {
        let dir = PathBuf::from(text(out_dir, "out_dir")?);
        let p = deref(params, "params")?;
        let slot = out(corpus, "corpus")?;
        if p.n_categories == 0 || p.n_categories > CATEGORY_NAMES.len() {
            return Err(invalid(format!(
                "n_categories must lie in 1..={}",
                CATEGORY_NAMES.len()
            )));
        }
        let spec = SyntheticSpec {
            n_styles: p.n_styles,
            n_items_per_category_per_style: p.items_per_category_per_style,
            categories: CATEGORY_NAMES[..p.n_categories]
                .iter()
                .map(|c| c.to_string())
                .collect(),
            image_shape: [3, p.image_size, p.image_size],
            palette_size: p.palette_size,
            patterns_per_style: p.patterns_per_style,
            n_sets: p.n_sets,
            set_size_weights: p.set_size_weights,
            n_labeled_sets: p.n_labeled_sets,
            reuse_skew: p.reuse_skew,
            seed: p.seed,
        };
        std::fs::create_dir_all(&dir)
            .map_err(|e| Failure(SvStatus::Io, format!("{}: {e}", dir.display())))?;
        let generated = gen_synthetic(&spec, &dir)?;
        *slot = Box::into_raw(Box::new(SvCorpus {
            corpus: generated.corpus,
        }));
        Ok(())
    })
}

/// Opens the corpus in `dir` (its `items.tsv` and `sets.tsv`).
///
/// # Safety
/// `dir` must be a NUL-terminated string and `corpus` must point to writable
/// storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sv_corpus_load(
    dir: *const c_char,
    corpus: *mut *mut SvCorpus,
) -> SvStatus {
    guard(|| {
        let dir = PathBuf::from(text(dir, "dir")?);
        let slot = out(corpus, "corpus")?;
        let loaded = load_corpus(dir.join(ITEMS_FILE), dir.join(SETS_FILE))?;
        *slot = Box::into_raw(Box::new(SvCorpus { corpus: loaded }));
        Ok(())
    })
}

/// Releases a corpus handle; null is ignored.
///
/// # Safety
/// `corpus` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_corpus_free(corpus: *mut SvCorpus) {
    if !corpus.is_null() {
        drop(Box::from_raw(corpus));
    }
}

/// Number of items in the pool.
///
/// # Safety
/// `corpus` must be a live handle and `count` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sv_corpus_item_count(
    corpus: *const SvCorpus,
    count: *mut usize,
) -> SvStatus {
    guard(|| {
        *out(count, "count")? = deref(corpus, "corpus")?.corpus.items().len();
        Ok(())
    })
}

/// Number of style sets.
///
/// # Safety
/// `corpus` must be a live handle and `count` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sv_corpus_set_count(
    corpus: *const SvCorpus,
    count: *mut usize,
) -> SvStatus {
    guard(|| {
        *out(count, "count")? = deref(corpus, "corpus")?.corpus.sets().len();
        Ok(())
    })
}

/// Fills `params` with the default training settings.
///
/// # Safety
/// `params` must be null or point to writable memory for one `SvTrainParams`.
#[no_mangle]
pub unsafe extern "C" fn sv_train_params_default(params: *mut SvTrainParams) -> SvStatus {
    guard(|| {
        let p = out(params, "params")?;
        let d = TrainConfig::default();
        let mut stage_channels = [0; 4];
        for (slot, s) in stage_channels.iter_mut().zip(&d.encoder.conv_stages) {
            *slot = s.out_channels;
        }
        *p = SvTrainParams {
            epochs: d.epochs,
            batch_size: d.batch_size,
            learning_rate: d.learning_rate,
            beta1: d.beta1,
            beta2: d.beta2,
            epsilon: d.epsilon,
            k: d.k,
            seed: d.seed,
            embedding_dim: d.encoder.embedding_dim,
            n_stages: d.encoder.conv_stages.len(),
            stage_channels,
            convs_per_stage: d.encoder.conv_stages[0].conv_count,
            avg_pool: 0,
            batch_norm: u8::from(d.encoder.batch_norm),
        };
        Ok(())
    })
}

fn train_config(p: &SvTrainParams, input_shape: [usize; 3]) -> Outcome<TrainConfig> {
    if p.n_stages > p.stage_channels.len() {
        return Err(invalid(format!(
            "n_stages must be at most {}",
            p.stage_channels.len()
        )));
    }
    let pool = if p.avg_pool != 0 {
        PoolKind::Avg
    } else {
        PoolKind::Max
    };
    Ok(TrainConfig {
        epochs: p.epochs,
        batch_size: p.batch_size,
        learning_rate: p.learning_rate,
        beta1: p.beta1,
        beta2: p.beta2,
        epsilon: p.epsilon,
        k: p.k,
        seed: p.seed,
        encoder: EncoderConfig {
            input_shape,
            conv_stages: p.stage_channels[..p.n_stages]
                .iter()
                .map(|&c| ConvStage {
                    out_channels: c,
                    conv_count: p.convs_per_stage,
                    pool,
                })
                .collect(),
            embedding_dim: p.embedding_dim,
            batch_norm: p.batch_norm != 0,
        },
        ..TrainConfig::default()
    })
}

/// Trains both encoders on `corpus` and returns the final checkpoint.
///
/// # Safety
/// `corpus` must be a live handle, `params` must point to an `SvTrainParams`
/// and `checkpoint` to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sv_train(
    corpus: *const SvCorpus,
    params: *const SvTrainParams,
    checkpoint: *mut *mut SvCheckpoint,
) -> SvStatus {
    guard(|| {
        let c = &deref(corpus, "corpus")?.corpus;
        let p = deref(params, "params")?;
        let slot = out(checkpoint, "checkpoint")?;
        let images = c.load_images()?;
        let first = images
            .first()
            .ok_or_else(|| invalid("corpus has no items"))?;
        let s = first.shape();
        let config = train_config(p, [s[0], s[1], s[2]])?;
        let (ck, _) = train(c, &images, &config, TrainOptions::default())?;
        *slot = Box::into_raw(Box::new(SvCheckpoint { checkpoint: ck }));
        Ok(())
    })
}

/// Reads a checkpoint file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `checkpoint` must point to
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sv_checkpoint_load(
    path: *const c_char,
    checkpoint: *mut *mut SvCheckpoint,
) -> SvStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let slot = out(checkpoint, "checkpoint")?;
        *slot = Box::into_raw(Box::new(SvCheckpoint {
            checkpoint: load_checkpoint(&path)?,
        }));
        Ok(())
    })
}

/// Writes a checkpoint file atomically.
///
/// # Safety
/// `checkpoint` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sv_checkpoint_save(
    checkpoint: *const SvCheckpoint,
    path: *const c_char,
) -> SvStatus {
    guard(|| {
        let ck = &deref(checkpoint, "checkpoint")?.checkpoint;
        save_checkpoint(ck, &PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Releases a checkpoint handle; null is ignored.
///
/// # Safety
/// `checkpoint` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_checkpoint_free(checkpoint: *mut SvCheckpoint) {
    if !checkpoint.is_null() {
        drop(Box::from_raw(checkpoint));
    }
}

/// Optimizer steps taken so far.
///
/// # Safety
/// `checkpoint` must be a live handle and `step` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sv_checkpoint_step(
    checkpoint: *const SvCheckpoint,
    step: *mut u64,
) -> SvStatus {
    guard(|| {
        *out(step, "step")? = deref(checkpoint, "checkpoint")?.checkpoint.step;
        Ok(())
    })
}

/// Embeds every corpus item with the input encoder of `checkpoint`.
///
/// # Safety
/// `checkpoint` and `corpus` must be live handles and `embeddings` must point
/// to writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sv_embed(
    checkpoint: *const SvCheckpoint,
    corpus: *const SvCorpus,
    embeddings: *mut *mut SvEmbeddings,
) -> SvStatus {
    guard(|| {
        let ck = &deref(checkpoint, "checkpoint")?.checkpoint;
        let c = &deref(corpus, "corpus")?.corpus;
        let slot = out(embeddings, "embeddings")?;
        let matrix = query::extract_all(&ck.input, c, 64)?;
        *slot = Box::into_raw(Box::new(SvEmbeddings { matrix }));
        Ok(())
    })
}

/// Reads an embedding TSV written by `sv_embeddings_save` or the command line.
///
/// # Safety
/// `path` must be a NUL-terminated string and `embeddings` must point to
/// writable storage for one handle.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_load(
    path: *const c_char,
    metric: SvMetric,
    embeddings: *mut *mut SvEmbeddings,
) -> SvStatus {
    guard(|| {
        let path = PathBuf::from(text(path, "path")?);
        let slot = out(embeddings, "embeddings")?;
        *slot = Box::into_raw(Box::new(SvEmbeddings {
            matrix: EmbeddingMatrix::read_tsv(&path, metric.into())?,
        }));
        Ok(())
    })
}

/// Writes the embeddings as TSV.
///
/// # Safety
/// `embeddings` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_save(
    embeddings: *const SvEmbeddings,
    path: *const c_char,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        m.write_tsv(&PathBuf::from(text(path, "path")?))?;
        Ok(())
    })
}

/// Releases an embeddings handle; null is ignored.
///
/// # Safety
/// `embeddings` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_free(embeddings: *mut SvEmbeddings) {
    if !embeddings.is_null() {
        drop(Box::from_raw(embeddings));
    }
}

/// Changes the ranking metric of an embeddings handle.
///
/// # Safety
/// `embeddings` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_set_metric(
    embeddings: *mut SvEmbeddings,
    metric: SvMetric,
) -> SvStatus {
    guard(|| {
        let e = out(embeddings, "embeddings")?;
        e.matrix = e.matrix.clone().with_metric(metric.into());
        Ok(())
    })
}

/// Number of rows and embedding width.
///
/// # Safety
/// `embeddings` must be a live handle; `count` and `dim` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_shape(
    embeddings: *const SvEmbeddings,
    count: *mut usize,
    dim: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        *out(count, "count")? = m.len();
        *out(dim, "dim")? = m.dim();
        Ok(())
    })
}

/// Copies the id of row `index` into `buf`.
///
/// `needed`, when not null, receives the buffer size the id requires.
///
/// # Safety
/// `embeddings` must be a live handle and `buf` must hold `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_item_id(
    embeddings: *const SvEmbeddings,
    index: usize,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        let id = m
            .ids()
            .get(index)
            .ok_or_else(|| Failure(SvStatus::NotFound, format!("row {index} out of range")))?;
        write_string(id, buf, len, needed)
    })
}

/// Row index of `item_id`.
///
/// # Safety
/// `embeddings` must be a live handle, `item_id` a NUL-terminated string and
/// `index` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_index(
    embeddings: *const SvEmbeddings,
    item_id: *const c_char,
    index: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        let id = text(item_id, "item_id")?;
        *out(index, "index")? = m
            .position(id)
            .ok_or_else(|| Failure(SvStatus::NotFound, format!("unknown item {id}")))?;
        Ok(())
    })
}

/// Copies the vector of row `index` into `vector`, which holds `dim` values.
///
/// # Safety
/// `embeddings` must be a live handle and `vector` must hold `dim` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sv_embeddings_vector(
    embeddings: *const SvEmbeddings,
    index: usize,
    vector: *mut f64,
    dim: usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        if index >= m.len() {
            return Err(Failure(
                SvStatus::NotFound,
                format!("row {index} out of range"),
            ));
        }
        if dim != m.dim() {
            return Err(invalid(format!(
                "dim is {dim}, embeddings have {}",
                m.dim()
            )));
        }
        slice_mut(vector, dim, "vector")?.copy_from_slice(m.data().row(index));
        Ok(())
    })
}

/// Ranks rows against `query` (length `dim`), best first, ties by ascending id.
///
/// Up to `top_n` row indices and scores are written; `written` receives the count.
/// When `exclude_index` is a valid row it is skipped.
///
/// # Safety
/// `embeddings` must be a live handle, `query` must hold `dim` doubles and
/// `indices` and `scores` must each hold `top_n` writable elements.
#[no_mangle]
pub unsafe extern "C" fn sv_nearest(
    embeddings: *const SvEmbeddings,
    query: *const f64,
    dim: usize,
    top_n: usize,
    exclude_index: usize,
    indices: *mut usize,
    scores: *mut f64,
    written: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        let q = slice(query, dim, "query")?;
        let indices = slice_mut(indices, top_n, "indices")?;
        let scores = slice_mut(scores, top_n, "scores")?;
        let written = out(written, "written")?;
        let exclude: HashSet<String> = m.ids().get(exclude_index).cloned().into_iter().collect();
        let ranked = query::nearest(q, m, top_n, &exclude, None)?;
        for (k, s) in ranked.iter().enumerate() {
            indices[k] = m.position(&s.id).expect("ranked ids come from the matrix");
            scores[k] = s.score;
        }
        *written = ranked.len();
        Ok(())
    })
}

/// Answers "x is to y as z is to ?" and writes the best row index.
///
/// With `filter_category` non-zero, only items of `expected_category` are considered.
///
/// # Safety
/// `embeddings` must be a live handle, the ids NUL-terminated strings and
/// `answer` must point to writable memory.
#[no_mangle]
pub unsafe extern "C" fn sv_analogy(
    embeddings: *const SvEmbeddings,
    x: *const c_char,
    y: *const c_char,
    z: *const c_char,
    expected_category: *const c_char,
    filter_category: u8,
    answer: *mut usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        let q = AnalogyQuestion {
            x: text(x, "x")?.to_string(),
            y: text(y, "y")?.to_string(),
            z: text(z, "z")?.to_string(),
            expected_category: text(expected_category, "expected_category")?.to_string(),
        };
        let slot = out(answer, "answer")?;
        let (best, _) = query::analogy(&q, m, filter_category != 0)?;
        *slot = m.position(&best).expect("answer comes from the matrix");
        Ok(())
    })
}

/// Principal-component projection: writes `count * 2` coordinates, row-major.
///
/// # Safety
/// `embeddings` must be a live handle and `coords` must hold `len` writable doubles.
#[no_mangle]
pub unsafe extern "C" fn sv_project_2d(
    embeddings: *const SvEmbeddings,
    coords: *mut f64,
    len: usize,
) -> SvStatus {
    guard(|| {
        let m = &deref(embeddings, "embeddings")?.matrix;
        if len < m.len() * 2 {
            return Err(Failure(
                SvStatus::BufferTooSmall,
                format!("buffer of {len} values, need {}", m.len() * 2),
            ));
        }
        let projected = query::project_2d(m)?;
        slice_mut(coords, len, "coords")?[..m.len() * 2].copy_from_slice(projected.data());
        Ok(())
    })
}
