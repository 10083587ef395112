#ifndef MIPIC_H
#define MIPIC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes; the non-zero values match the command-line exit codes.
typedef enum MipicStatus {
  MIPIC_STATUS_OK = 0,
  // Null pointer, bad length or non-UTF-8 string.
  MIPIC_STATUS_INVALID_ARGUMENT = 1,
  // Malformed checkpoint or input data.
  MIPIC_STATUS_DATA = 2,
  // Degenerate or non-finite numbers.
  MIPIC_STATUS_NUMERICAL = 3,
  MIPIC_STATUS_IO = 4,
  // A Rust panic was caught at the boundary.
  MIPIC_STATUS_INTERNAL = 5,
} MipicStatus;

// Opaque loaded checkpoint.
typedef struct MipicModel MipicModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after a success.
// The pointer stays valid until the next call on this thread.
const char *mipic_last_error_message(void);

const char *mipic_version(void);

// Loads a checkpoint written by `mipic train`. On success `*out` owns the
// model; release it with `mipic_model_free`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum MipicStatus mipic_model_load(const char *path, struct MipicModel **out);

// # Safety
// `model` must come from `mipic_model_load` and not be used afterwards. Null is ignored.
void mipic_model_free(struct MipicModel *model);

// Full embedding width, or 0 for a null model.
//
// # Safety
// `model` must be null or a live model.
size_t mipic_model_hidden_dim(const struct MipicModel *model);

// Writes the L2-normalized `dim`-wide prefix embedding of `sentence` into
// `out[0..dim]`. `dim` must be one of the model's nested widths and
// `out_len >= dim`.
//
// # Safety
// `model` must be live, `sentence` NUL-terminated, `out` valid for `out_len` doubles.
enum MipicStatus mipic_model_embed(const struct MipicModel *model,
                                   const char *sentence,
                                   size_t dim,
                                   double *out,
                                   size_t out_len);

// Linear CKA between `x` (rows × x_cols) and `y` (rows × y_cols).
//
// # Safety
// Buffers must hold `rows * cols` doubles; `out` must be valid.
enum MipicStatus mipic_cka(const double *x,
                           size_t x_cols,
                           const double *y,
                           size_t y_cols,
                           size_t rows,
                           double *out);

// Spearman rank correlation of two length-`n` vectors.
//
// # Safety
// `a` and `b` must hold `n` doubles; `out` must be valid.
enum MipicStatus mipic_spearman(const double *a, const double *b, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIPIC_H */
