#ifndef SEGPRETEXT_H
#define SEGPRETEXT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SpStatus {
  SP_STATUS_OK = 0,
  SP_STATUS_NULL_POINTER = 1,
  SP_STATUS_SHAPE = 2,
  SP_STATUS_PARAM = 3,
  SP_STATUS_DATA = 4,
  SP_STATUS_CONFIG = 5,
  SP_STATUS_STATE = 6,
  SP_STATUS_FORMAT = 7,
  SP_STATUS_NON_FINITE = 8,
  SP_STATUS_IO = 9,
  /**
   * A Rust panic was caught at the boundary.
   */
  SP_STATUS_INTERNAL = 10,
} SpStatus;

/**
 * Jigsaw permutation catalogue.
 */
typedef struct SpCatalogue SpCatalogue;

/**
 * Accumulating confusion matrix.
 */
typedef struct SpConfusion SpConfusion;

/**
 * Model loaded from a checkpoint, used for segmentation inference.
 */
typedef struct SpModel SpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the last error message of this thread into `buf` as a
 * NUL-terminated string, truncating to `len - 1` bytes. Returns the full
 * message length in bytes, excluding the terminator.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t sp_last_error(char *buf, size_t len);

/**
 * # Safety
 * `out` must be a valid pointer to a handle slot.
 */
enum SpStatus sp_confusion_new(size_t nb_classes, struct SpConfusion **out);

/**
 * Adds `len` (ground truth, prediction) label pairs.
 *
 * # Safety
 * `cm` must come from [`sp_confusion_new`]; `gt` and `pred` must each point
 * to `len` readable values.
 */
enum SpStatus sp_confusion_accumulate(struct SpConfusion *cm,
                                      const uint32_t *gt,
                                      const uint32_t *pred,
                                      size_t len);

/**
 * Copies the K*K counts, row-major with rows indexed by ground truth.
 *
 * # Safety
 * `cm` must be a live handle; `out` must hold `len` values.
 */
enum SpStatus sp_confusion_counts(const struct SpConfusion *cm, uint64_t *out, size_t len);

/**
 * Mean IoU over classes present in either labelling.
 *
 * # Safety
 * `cm` must be a live handle and `out` writable.
 */
enum SpStatus sp_confusion_miou(const struct SpConfusion *cm, double *out);

/**
 * # Safety
 * `cm` must be a live handle and `out` writable.
 */
enum SpStatus sp_confusion_pixel_accuracy(const struct SpConfusion *cm, double *out);

/**
 * # Safety
 * `cm` must be null or a handle not yet freed.
 */
void sp_confusion_free(struct SpConfusion *cm);

/**
 * Loads a checkpoint written by the trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated UTF-8 string; `out` a valid handle slot.
 */
enum SpStatus sp_model_load(const char *path, struct SpModel **out);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum SpStatus sp_model_nb_classes(const struct SpModel *model, size_t *out);

/**
 * Predicts per-pixel classes for `n` RGB images laid out as [n,3,h,w]
 * floats in [0,1]. Writes n*h*w labels to `out`.
 *
 * # Safety
 * `images` must hold n*3*h*w values and `out` room for n*h*w.
 */
enum SpStatus sp_model_predict(const struct SpModel *model,
                               const double *images,
                               size_t n,
                               size_t h,
                               size_t w,
                               uint32_t *out);

/**
 * # Safety
 * `model` must be null or a handle not yet freed.
 */
void sp_model_free(struct SpModel *model);

/**
 * Builds the seeded jigsaw catalogue of `count` permutations of grid*grid
 * tiles.
 *
 * # Safety
 * `out` must be a valid handle slot.
 */
enum SpStatus sp_catalogue_build(size_t grid,
                                 size_t count,
                                 uint64_t seed,
                                 struct SpCatalogue **out);

/**
 * # Safety
 * `cat` must be a live handle; `len` and `tiles` writable.
 */
enum SpStatus sp_catalogue_size(const struct SpCatalogue *cat, size_t *len, size_t *tiles);

/**
 * Copies permutation `index` into `out`, which must hold exactly `tiles`
 * values.
 *
 * # Safety
 * `cat` must be a live handle and `out` point to `tiles` writable values.
 */
enum SpStatus sp_catalogue_get(const struct SpCatalogue *cat,
                               size_t index,
                               uint32_t *out,
                               size_t tiles);

/**
 * # Safety
 * `cat` must be null or a handle not yet freed.
 */
void sp_catalogue_free(struct SpCatalogue *cat);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEGPRETEXT_H */
