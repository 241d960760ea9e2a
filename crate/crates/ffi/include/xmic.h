#ifndef XMIC_H
#define XMIC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Bit flags for `xmic_condition`.
 */
#define XMIC_NORM_N1 1

#define XMIC_NORM_N2 2

#define XMIC_NORM_N3 4

#define XMIC_TASK_NOUN 0

#define XMIC_TASK_VERB 1

typedef enum XmicStatus {
  XMIC_STATUS_OK = 0,
  XMIC_STATUS_NULL_POINTER = 1,
  XMIC_STATUS_INVALID_UTF8 = 2,
  XMIC_STATUS_IO = 3,
  XMIC_STATUS_FORMAT = 4,
  XMIC_STATUS_SHAPE = 5,
  XMIC_STATUS_VOCABULARY = 6,
  XMIC_STATUS_INVALID_ARGUMENT = 7,
  XMIC_STATUS_OUT_OF_RANGE = 8,
  XMIC_STATUS_PANIC = 9,
} XmicStatus;

/**
 * Clips, their vocabulary and the frozen class-text embeddings.
 */
typedef struct XmicDataset XmicDataset;

/**
 * A trained (or freshly initialized) model loaded from a checkpoint.
 */
typedef struct XmicModel XmicModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or an empty string.
 * The pointer stays valid until the next xmic call on this thread.
 */
const char *xmic_last_error(void);

/**
 * `2ab / (a + b)` in percent; 0 when both are 0.
 *
 * # Safety
 * `out_hm` must be a valid pointer to a double.
 */
enum XmicStatus xmic_harmonic_mean(double a, double b, double *out_hm);

/**
 * Shared and novel class counts between two vocabulary files.
 *
 * # Safety
 * Paths must be NUL-terminated strings; output pointers must be valid.
 */
enum XmicStatus xmic_partition_counts(const char *vocab_a,
                                      const char *vocab_b,
                                      uint32_t task,
                                      size_t *out_shared,
                                      size_t *out_novel_a,
                                      size_t *out_novel_b);

/**
 * Opens a clip store with its manifest, vocabulary and text embeddings.
 * `store2` and `text` may be null: the second stream then reuses `store`,
 * and class texts come from the built-in toy encoder.
 *
 * # Safety
 * Non-null paths must be NUL-terminated strings; `out_dataset` must be valid.
 */
enum XmicStatus xmic_dataset_open(const char *store,
                                  const char *store2,
                                  const char *manifest,
                                  const char *vocab,
                                  const char *text,
                                  uint32_t task,
                                  struct XmicDataset **out_dataset);

/**
 * # Safety
 * `dataset` must come from `xmic_dataset_open` and not be used afterwards.
 */
void xmic_dataset_free(struct XmicDataset *dataset);

/**
 * Number of clips, embedding width and class count.
 *
 * # Safety
 * `dataset` must be a live handle; non-null outputs must be valid.
 */
enum XmicStatus xmic_dataset_info(const struct XmicDataset *dataset,
                                  size_t *out_clips,
                                  size_t *out_dim,
                                  size_t *out_classes);

/**
 * Ground-truth class index of clip `index`.
 *
 * # Safety
 * `dataset` must be a live handle and `out_label` valid.
 */
enum XmicStatus xmic_dataset_label(const struct XmicDataset *dataset,
                                   size_t index,
                                   size_t *out_label);

/**
 * Loads a checkpoint written by `xmic train`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out_model` valid.
 */
enum XmicStatus xmic_model_load(const char *path, struct XmicModel **out_model);

/**
 * # Safety
 * `model` must come from `xmic_model_load` and not be used afterwards.
 */
void xmic_model_free(struct XmicModel *model);

/**
 * Classifies clip `index` from `frames` uniformly sampled frames. When
 * `scores` is non-null it receives one score per class and
 * `scores_len` must be at least the class count.
 *
 * # Safety
 * Handles must be live; `out_class` valid; `scores` null or valid for
 * `scores_len` doubles.
 */
enum XmicStatus xmic_classify(const struct XmicModel *model,
                              const struct XmicDataset *dataset,
                              size_t index,
                              size_t frames,
                              size_t *out_class,
                              double *scores,
                              size_t scores_len);

/**
 * Top-1 accuracy in percent over the whole dataset.
 *
 * # Safety
 * Handles must be live and `out_accuracy` valid.
 */
enum XmicStatus xmic_accuracy(const struct XmicModel *model,
                              const struct XmicDataset *dataset,
                              size_t frames,
                              double *out_accuracy);

/**
 * Conditioned classifier rows `normalize(maybe_n3(E) + alpha * maybe_n2(a_v))`
 * for a row-major `classes x dim` matrix `text`. `norm` is a mask of
 * `XMIC_NORM_*` flags (n1 acts on adapter inputs and is ignored here).
 * `out_rows` receives `classes * dim` doubles.
 *
 * # Safety
 * `text` and `out_rows` must be valid for `classes * dim` doubles and
 * `a_v` for `dim` doubles.
 */
enum XmicStatus xmic_condition(const double *text,
                               size_t classes,
                               size_t dim,
                               const double *a_v,
                               double alpha,
                               uint32_t norm,
                               double *out_rows);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XMIC_H */
