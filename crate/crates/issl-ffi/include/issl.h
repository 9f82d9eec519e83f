#ifndef ISSL_H
#define ISSL_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible library call.
typedef enum {
  ISSL_STATUS_OK = 0,
  // A required pointer argument was null.
  ISSL_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  ISSL_STATUS_INVALID_UTF8 = 2,
  // Invalid configuration value.
  ISSL_STATUS_CONFIG = 3,
  // An API precondition was violated.
  ISSL_STATUS_CONTRACT = 4,
  // Mismatched dimensions.
  ISSL_STATUS_DIMENSION = 5,
  // Non-finite values or a failed numerical routine.
  ISSL_STATUS_NUMERICAL = 6,
  // Data too degenerate for the requested operation.
  ISSL_STATUS_DEGENERATE = 7,
  // Not enough points for the requested fit.
  ISSL_STATUS_INSUFFICIENT_POINTS = 8,
  // Training diverged.
  ISSL_STATUS_DIVERGENCE = 9,
  // Malformed file or text input.
  ISSL_STATUS_PARSE = 10,
  // Filesystem error.
  ISSL_STATUS_IO = 11,
  // A panic was caught at the boundary.
  ISSL_STATUS_PANIC = 12,
} IsslStatus;

// Opaque fitted k-means codebook.
typedef struct IsslKmeans IsslKmeans;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static string; never freed by the caller.
const char *issl_version(void);

// Message for the current thread's most recent failure ("" after success).
// Valid until this thread's next issl call.
const char *issl_last_error(void);

// Free a buffer returned through an `out_*`/`out_len` pair.
//
// # Safety
// `ptr` and `len` must come from the same successful issl call, and the
// buffer must not be freed twice.
void issl_buffer_free(double *ptr, size_t len);

// 39-dimensional MFCC+delta+delta-delta features of a mono waveform, with
// the library's default analysis settings. On success `*out_frames` is a
// row-major `*out_rows` x 39 buffer (free with `issl_buffer_free`, passing
// rows*39).
//
// # Safety
// `samples` must be valid for `n_samples` reads; out pointers must be valid.
IsslStatus issl_mfcc39(const double *samples,
                       size_t n_samples,
                       uint32_t sample_rate,
                       double **out_frames,
                       size_t *out_rows);

// Fit k-means on `n` x `dim` row-major points. On success `*out` owns the
// fitted codebook (free with `issl_kmeans_free`).
//
// # Safety
// `points` must be valid for n*dim reads; `out` must be valid for a write.
IsslStatus issl_kmeans_fit(const double *points,
                           size_t n,
                           size_t dim,
                           size_t k,
                           uint64_t seed,
                           size_t max_iter,
                           IsslKmeans **out);

// Label `n` points with their nearest centroid (ties to the lowest index).
// `out_labels` is a caller-allocated array of `n` entries.
//
// # Safety
// Pointers must be valid for the stated extents; `h` must be a live handle.
IsslStatus issl_kmeans_assign(const IsslKmeans *h,
                              const double *points,
                              size_t n,
                              size_t dim,
                              uint64_t *out_labels);

// Number of centroids, 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t issl_kmeans_k(const IsslKmeans *h);

// Point dimensionality, 0 for a null handle.
//
// # Safety
// `h` must be null or a live handle.
size_t issl_kmeans_dim(const IsslKmeans *h);

// Copy the k x dim centroid matrix into a caller-allocated buffer of
// k*dim entries, row-major.
//
// # Safety
// `h` must be a live handle; `out` must be valid for k*dim writes.
IsslStatus issl_kmeans_centroids(const IsslKmeans *h, double *out);

// Persist a codebook to a text file.
//
// # Safety
// `h` must be a live handle; `path` a valid C string.
IsslStatus issl_kmeans_save(const IsslKmeans *h, const char *path);

// Load a codebook saved by `issl_kmeans_save`.
//
// # Safety
// `path` must be a valid C string; `out` valid for a write.
IsslStatus issl_kmeans_load(const char *path, IsslKmeans **out);

// Release a codebook handle. Null is a no-op.
//
// # Safety
// `h` must come from this library and not be freed twice.
void issl_kmeans_free(IsslKmeans *h);

// Projection-weighted CCA similarity between an `n` x `dx` view and an
// `n` x `dy` view (both row-major), with ridge terms `eps_x`, `eps_y`.
// Writes the score in [0, 1] to `*out_score`.
//
// # Safety
// Buffers must be valid for the stated extents; `out_score` for a write.
IsslStatus issl_cca_pwcca(const double *x,
                          const double *y,
                          size_t n,
                          size_t dx,
                          size_t dy,
                          double eps_x,
                          double eps_y,
                          double *out_score);

// Synthesize a corpus under `out_dir` from `key = value` configuration
// text (the experiment schema; "" for all defaults).
//
// # Safety
// Both arguments must be valid C strings.
IsslStatus issl_synth_generate(const char *config_text, const char *out_dir);

// Run the full pretraining and probing experiment under `out_dir`,
// configured by `key = value` text ("" for all defaults). Blocks until
// done; progress is reported through the `log` facade.
//
// # Safety
// Both arguments must be valid C strings.
IsslStatus issl_experiment_run(const char *config_text, const char *out_dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ISSL_H */
