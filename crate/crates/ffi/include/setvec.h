#ifndef SETVEC_H
#define SETVEC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result of every fallible call.
 */
typedef enum SvStatus {
  SV_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  SV_STATUS_NULL_ARGUMENT = 1,
  /**
   * Bad configuration, malformed input data or an impossible request.
   */
  SV_STATUS_INVALID_ARGUMENT = 2,
  /**
   * A file could not be read or written.
   */
  SV_STATUS_IO = 3,
  /**
   * An item id is not present.
   */
  SV_STATUS_NOT_FOUND = 4,
  /**
   * The caller's buffer is shorter than required.
   */
  SV_STATUS_BUFFER_TOO_SMALL = 5,
  /**
   * A checkpoint or matrix file failed its integrity checks.
   */
  SV_STATUS_CORRUPT = 6,
  /**
   * A string argument was not valid UTF-8.
   */
  SV_STATUS_INVALID_UTF8 = 7,
  /**
   * A numerical or internal failure.
   */
  SV_STATUS_RUNTIME = 8,
} SvStatus;

/**
 * Similarity used for ranking.
 */
typedef enum SvMetric {
  SV_METRIC_COSINE = 0,
  SV_METRIC_DOT = 1,
  SV_METRIC_EUCLIDEAN = 2,
} SvMetric;

/**
 * Trained or freshly initialized encoder pair with optimizer state.
 */
typedef struct SvCheckpoint SvCheckpoint;

/**
 * Item pool and style sets.
 */
typedef struct SvCorpus SvCorpus;

/**
 * Item embeddings with ids and categories.
 */
typedef struct SvEmbeddings SvEmbeddings;

/**
 * Synthetic corpus settings; start from `sv_synth_params_default`.
 */
typedef struct SvSynthParams {
  size_t n_styles;
  size_t items_per_category_per_style;
  /**
   * Number of categories, taken in order from top, bottom, shoes, outer, bag.
   */
  size_t n_categories;
  /**
   * Square image side in pixels.
   */
  size_t image_size;
  size_t palette_size;
  size_t patterns_per_style;
  size_t n_sets;
  /**
   * Relative weights of set sizes 2, 3 and 4.
   */
  double set_size_weights[3];
  size_t n_labeled_sets;
  double reuse_skew;
  uint64_t seed;
} SvSynthParams;

/**
 * Training settings; start from `sv_train_params_default`.
 */
typedef struct SvTrainParams {
  size_t epochs;
  size_t batch_size;
  double learning_rate;
  double beta1;
  double beta2;
  double epsilon;
  /**
   * Negatives per pair.
   */
  size_t k;
  uint64_t seed;
  size_t embedding_dim;
  /**
   * Number of convolution stages in use, at most 4.
   */
  size_t n_stages;
  size_t stage_channels[4];
  size_t convs_per_stage;
  /**
   * Non-zero selects average pooling instead of max pooling.
   */
  uint8_t avg_pool;
  uint8_t batch_norm;
} SvTrainParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Toolkit version as a static string.
 */
const char *sv_version(void);

/**
 * Message of the last failed call on this thread, or null if none.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *sv_last_error(void);

/**
 * Fills `params` with the default synthetic corpus settings.
 *
 * # Safety
 * `params` must be null or point to writable memory for one `SvSynthParams`.
 */
enum SvStatus sv_synth_params_default(struct SvSynthParams *params);

/**
 * Writes a synthetic corpus to `out_dir` and opens it.
 *
 * # Safety
 * `out_dir` must be a NUL-terminated string, `params` must point to an
 * `SvSynthParams` and `corpus` to writable storage for one handle.
 */
enum SvStatus sv_synth_generate(const char *out_dir,
                                const struct SvSynthParams *params,
                                struct SvCorpus **corpus);

/**
 * Opens the corpus in `dir` (its `items.tsv` and `sets.tsv`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `corpus` must point to writable
 * storage for one handle.
 */
enum SvStatus sv_corpus_load(const char *dir, struct SvCorpus **corpus);

/**
 * Releases a corpus handle; null is ignored.
 *
 * # Safety
 * `corpus` must be null or a handle from this library not yet freed.
 */
void sv_corpus_free(struct SvCorpus *corpus);

/**
 * Number of items in the pool.
 *
 * # Safety
 * `corpus` must be a live handle and `count` must point to writable memory.
 */
enum SvStatus sv_corpus_item_count(const struct SvCorpus *corpus, size_t *count);

/**
 * Number of style sets.
 *
 * # Safety
 * `corpus` must be a live handle and `count` must point to writable memory.
 */
enum SvStatus sv_corpus_set_count(const struct SvCorpus *corpus, size_t *count);

/**
 * Fills `params` with the default training settings.
 *
 * # Safety
 * `params` must be null or point to writable memory for one `SvTrainParams`.
 */
enum SvStatus sv_train_params_default(struct SvTrainParams *params);

/**
 * Trains both encoders on `corpus` and returns the final checkpoint.
 *
 * # Safety
 * `corpus` must be a live handle, `params` must point to an `SvTrainParams`
 * and `checkpoint` to writable storage for one handle.
 */
enum SvStatus sv_train(const struct SvCorpus *corpus,
                       const struct SvTrainParams *params,
                       struct SvCheckpoint **checkpoint);

/**
 * Reads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `checkpoint` must point to
 * writable storage for one handle.
 */
enum SvStatus sv_checkpoint_load(const char *path, struct SvCheckpoint **checkpoint);

/**
 * Writes a checkpoint file atomically.
 *
 * # Safety
 * `checkpoint` must be a live handle and `path` a NUL-terminated string.
 */
enum SvStatus sv_checkpoint_save(const struct SvCheckpoint *checkpoint, const char *path);

/**
 * Releases a checkpoint handle; null is ignored.
 *
 * # Safety
 * `checkpoint` must be null or a handle from this library not yet freed.
 */
void sv_checkpoint_free(struct SvCheckpoint *checkpoint);

/**
 * Optimizer steps taken so far.
 *
 * # Safety
 * `checkpoint` must be a live handle and `step` must point to writable memory.
 */
enum SvStatus sv_checkpoint_step(const struct SvCheckpoint *checkpoint, uint64_t *step);

/**
 * Embeds every corpus item with the input encoder of `checkpoint`.
 *
 * # Safety
 * `checkpoint` and `corpus` must be live handles and `embeddings` must point
 * to writable storage for one handle.
 */
enum SvStatus sv_embed(const struct SvCheckpoint *checkpoint,
                       const struct SvCorpus *corpus,
                       struct SvEmbeddings **embeddings);

/**
 * Reads an embedding TSV written by `sv_embeddings_save` or the command line.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `embeddings` must point to
 * writable storage for one handle.
 */
enum SvStatus sv_embeddings_load(const char *path,
                                 enum SvMetric metric,
                                 struct SvEmbeddings **embeddings);

/**
 * Writes the embeddings as TSV.
 *
 * # Safety
 * `embeddings` must be a live handle and `path` a NUL-terminated string.
 */
enum SvStatus sv_embeddings_save(const struct SvEmbeddings *embeddings, const char *path);

/**
 * Releases an embeddings handle; null is ignored.
 *
 * # Safety
 * `embeddings` must be null or a handle from this library not yet freed.
 */
void sv_embeddings_free(struct SvEmbeddings *embeddings);

/**
 * Changes the ranking metric of an embeddings handle.
 *
 * # Safety
 * `embeddings` must be a live handle.
 */
enum SvStatus sv_embeddings_set_metric(struct SvEmbeddings *embeddings, enum SvMetric metric);

/**
 * Number of rows and embedding width.
 *
 * # Safety
 * `embeddings` must be a live handle; `count` and `dim` must point to writable memory.
 */
enum SvStatus sv_embeddings_shape(const struct SvEmbeddings *embeddings,
                                  size_t *count,
                                  size_t *dim);

/**
 * Copies the id of row `index` into `buf`.
 *
 * `needed`, when not null, receives the buffer size the id requires.
 *
 * # Safety
 * `embeddings` must be a live handle and `buf` must hold `len` writable bytes.
 */
enum SvStatus sv_embeddings_item_id(const struct SvEmbeddings *embeddings,
                                    size_t index,
                                    char *buf,
                                    size_t len,
                                    size_t *needed);

/**
 * Row index of `item_id`.
 *
 * # Safety
 * `embeddings` must be a live handle, `item_id` a NUL-terminated string and
 * `index` must point to writable memory.
 */
enum SvStatus sv_embeddings_index(const struct SvEmbeddings *embeddings,
                                  const char *item_id,
                                  size_t *index);

/**
 * Copies the vector of row `index` into `vector`, which holds `dim` values.
 *
 * # Safety
 * `embeddings` must be a live handle and `vector` must hold `dim` writable doubles.
 */
enum SvStatus sv_embeddings_vector(const struct SvEmbeddings *embeddings,
                                   size_t index,
                                   double *vector,
                                   size_t dim);

/**
 * Ranks rows against `query` (length `dim`), best first, ties by ascending id.
 *
 * Up to `top_n` row indices and scores are written; `written` receives the count.
 * When `exclude_index` is a valid row it is skipped.
 *
 * # Safety
 * `embeddings` must be a live handle, `query` must hold `dim` doubles and
 * `indices` and `scores` must each hold `top_n` writable elements.
 */
enum SvStatus sv_nearest(const struct SvEmbeddings *embeddings,
                         const double *query,
                         size_t dim,
                         size_t top_n,
                         size_t exclude_index,
                         size_t *indices,
                         double *scores,
                         size_t *written);

/**
 * Answers "x is to y as z is to ?" and writes the best row index.
 *
 * With `filter_category` non-zero, only items of `expected_category` are considered.
 *
 * # Safety
 * `embeddings` must be a live handle, the ids NUL-terminated strings and
 * `answer` must point to writable memory.
 */
enum SvStatus sv_analogy(const struct SvEmbeddings *embeddings,
                         const char *x,
                         const char *y,
                         const char *z,
                         const char *expected_category,
                         uint8_t filter_category,
                         size_t *answer);

/**
 * Principal-component projection: writes `count * 2` coordinates, row-major.
 *
 * # Safety
 * `embeddings` must be a live handle and `coords` must hold `len` writable doubles.
 */
enum SvStatus sv_project_2d(const struct SvEmbeddings *embeddings, double *coords, size_t len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SETVEC_H */
