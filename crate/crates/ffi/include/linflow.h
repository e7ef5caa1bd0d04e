#ifndef LINFLOW_H
#define LINFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum LfStatus {
  LF_STATUS_OK = 0,
  LF_STATUS_NULL_POINTER = 1,
  // Bad shape, out-of-range argument or invalid settings.
  LF_STATUS_INVALID_ARGUMENT = 2,
  LF_STATUS_NON_FINITE = 3,
  LF_STATUS_TRACE_TOO_SHORT = 4,
  LF_STATUS_TRACE_FLAT = 5,
  LF_STATUS_NO_CHECKPOINT = 6,
  LF_STATUS_INSUFFICIENT_DATA = 7,
  LF_STATUS_OUT_OF_MEMORY = 8,
  LF_STATUS_FORMAT = 9,
  LF_STATUS_TRUNCATION = 10,
  LF_STATUS_IO = 11,
  // Output buffer too small; the required size was written back.
  LF_STATUS_BUFFER_TOO_SMALL = 12,
  LF_STATUS_PANIC = 13,
} LfStatus;

// A loaded checkpoint.
typedef struct LfCheckpoint LfCheckpoint;

// Expert partition of the log-SNR range.
typedef struct LfPartition LfPartition;

// Knee-detector settings. [`lf_knee_options_default`] fills the defaults.
typedef struct LfKneeOptions {
  size_t window;
  double min_gain;
  double osc_ratio;
  // Non-zero when larger values are better.
  int32_t higher_is_better;
} LfKneeOptions;

// Knee detection result. `oscillation_start` is meaningful only when `has_oscillation` is non-zero.
typedef struct LfKneeResult {
  uint64_t knee_iteration;
  uint64_t improve_end;
  uint64_t oscillation_start;
  int32_t has_oscillation;
} LfKneeResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or null after a success.
// The pointer stays valid until the next call into this library on the same thread.
const char *lf_last_error_message(void);

// Static description of a status code; takes a plain integer so unknown codes are safe.
const char *lf_status_name(int32_t status);

// Log signal-to-noise ratio at `t` in (0, 1), where `t = 1` is pure noise.
//
// # Safety
// `out` must be null or valid for one write.
enum LfStatus lf_log_snr(double t, double *out);

// Inverse of [`lf_log_snr`].
//
// # Safety
// `out` must be null or valid for one write.
enum LfStatus lf_inv_log_snr(double lambda, double *out);

// Builds a partition into `2^depth` experts.
//
// # Safety
// `out` must be null or valid for one write. Free the result with [`lf_partition_free`].
enum LfStatus lf_partition_new(double sigma_min,
                               double sigma_max,
                               double anchor_t,
                               uint32_t depth,
                               struct LfPartition **out);

// # Safety
// `p` must be null or a handle from [`lf_partition_new`] not yet freed.
void lf_partition_free(struct LfPartition *p);

// # Safety
// `p` must be a live partition handle and `out` valid for one write.
enum LfStatus lf_partition_num_experts(const struct LfPartition *p, size_t *out);

// Zero-based expert for routing time `t` in [0, 1] (`t = 1` is pure noise).
//
// # Safety
// `p` must be a live partition handle and `expert` valid for one write.
enum LfStatus lf_partition_route(const struct LfPartition *p, double t, size_t *expert);

// Time interval `[t_low, t_high]` owned by expert `k`.
//
// # Safety
// `p` must be a live partition handle; `t_low` and `t_high` valid for one write each.
enum LfStatus lf_partition_interval(const struct LfPartition *p,
                                    size_t k,
                                    double *t_low,
                                    double *t_high);

// ReLU linear attention in O(N) time.
//
// `q`, `k`, `v` and `out` are row-major `n × (heads·head_dim)` buffers; head
// `h` occupies columns `h·head_dim .. (h+1)·head_dim`.
//
// # Safety
// The inputs must be valid for `n·heads·head_dim` reads and `out` for as many writes.
enum LfStatus lf_attention(const double *q,
                           const double *k,
                           const double *v,
                           size_t n,
                           size_t heads,
                           size_t head_dim,
                           double epsilon,
                           double *out);

// Reference O(N²) evaluation with the same layout as [`lf_attention`].
//
// # Safety
// As for [`lf_attention`].
enum LfStatus lf_attention_naive(const double *q,
                                 const double *k,
                                 const double *v,
                                 size_t n,
                                 size_t heads,
                                 size_t head_dim,
                                 double epsilon,
                                 double *out);

struct LfKneeOptions lf_knee_options_default(void);

// Finds the knee of a metric trace given as parallel arrays.
//
// # Safety
// `iterations` and `values` must be valid for `len` reads; `opts` and `out` for one access each.
enum LfStatus lf_detect_knee(const uint64_t *iterations,
                             const double *values,
                             size_t len,
                             const struct LfKneeOptions *opts,
                             struct LfKneeResult *out);

// Checks structure and values of the checkpoint at `path` without keeping it.
//
// # Safety
// `path` must be a NUL-terminated string.
enum LfStatus lf_checkpoint_validate(const char *path);

// Loads a checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for one write.
// Free the result with [`lf_checkpoint_free`].
enum LfStatus lf_checkpoint_open(const char *path, struct LfCheckpoint **out);

// # Safety
// `c` must be null or a handle from [`lf_checkpoint_open`] not yet freed.
void lf_checkpoint_free(struct LfCheckpoint *c);

// # Safety
// `c` must be a live checkpoint handle and `out` valid for one write.
enum LfStatus lf_checkpoint_iteration(const struct LfCheckpoint *c, uint64_t *out);

// # Safety
// `c` must be a live checkpoint handle and `out` valid for one write.
enum LfStatus lf_checkpoint_num_tensors(const struct LfCheckpoint *c, size_t *out);

// Name of tensor `i`; the string lives as long as the handle.
//
// # Safety
// `c` must be a live checkpoint handle and `out` valid for one write.
enum LfStatus lf_checkpoint_tensor_name(const struct LfCheckpoint *c, size_t i, const char **out);

// Copies tensor `name` into `buf` as f64 (f32 data is widened).
//
// `*len` holds the capacity of `buf` on entry and the element count on return.
// A null `buf` or short capacity yields [`LfStatus::BufferTooSmall`] with the count in `*len`.
//
// # Safety
// `c` must be a live checkpoint handle, `name` NUL-terminated, `len` valid for
// read and write, and `buf` (when non-null) valid for `*len` writes.
enum LfStatus lf_checkpoint_read_tensor(const struct LfCheckpoint *c,
                                        const char *name,
                                        double *buf,
                                        size_t *len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LINFLOW_H */
