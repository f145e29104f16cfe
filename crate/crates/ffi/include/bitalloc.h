#ifndef BITALLOC_H
#define BITALLOC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum BitallocStatus {
  BITALLOC_STATUS_OK = 0,
  /**
   * A required pointer argument was null.
   */
  BITALLOC_STATUS_NULL_ARGUMENT = 1,
  /**
   * An argument was malformed: bad UTF-8, index out of range, short buffer.
   */
  BITALLOC_STATUS_INVALID_ARGUMENT = 2,
  /**
   * The manifest or its referenced files failed validation.
   */
  BITALLOC_STATUS_MANIFEST = 3,
  /**
   * The target bit-width cannot be met.
   */
  BITALLOC_STATUS_INFEASIBLE = 4,
  /**
   * A numerical failure such as a zero predicted probability.
   */
  BITALLOC_STATUS_NUMERIC = 5,
  /**
   * An exact solver or oracle exceeded its size budget.
   */
  BITALLOC_STATUS_BUDGET = 6,
  BITALLOC_STATUS_IO = 7,
  /**
   * An internal panic was caught at the boundary.
   */
  BITALLOC_STATUS_PANIC = 8,
} BitallocStatus;

typedef enum BitallocSolver {
  BITALLOC_SOLVER_GREEDY = 0,
  BITALLOC_SOLVER_DP = 1,
  BITALLOC_SOLVER_EXHAUSTIVE = 2,
} BitallocSolver;

/**
 * A knapsack instance built class by class.
 */
typedef struct BitallocInstance BitallocInstance;

/**
 * A validated manifest with its model and data loaded.
 */
typedef struct BitallocManifest BitallocManifest;

/**
 * The outcome of a full allocation run.
 */
typedef struct BitallocReport BitallocReport;

/**
 * Per-layer result of an assignment.
 */
typedef struct BitallocLayer {
  uint32_t bit;
  uint64_t params;
  double delta_loss;
} BitallocLayer;

/**
 * Size and loss totals of an assignment.
 */
typedef struct BitallocTotals {
  double avg_bits;
  uint64_t capacity_bits;
  uint64_t used_bits;
  double w_ratio;
  double total_delta_loss;
} BitallocTotals;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *bitalloc_version(void);

/**
 * Message of the last failure on this thread, or null if none. Valid until
 * the next failing call on the same thread.
 */
const char *bitalloc_last_error(void);

/**
 * Loads and validates the manifest at `path`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum BitallocStatus bitalloc_manifest_load(const char *path, struct BitallocManifest **out);

/**
 * # Safety
 * `m` must come from [`bitalloc_manifest_load`] or be null.
 */
void bitalloc_manifest_free(struct BitallocManifest *m);

/**
 * Runs the full allocation described by `m`.
 *
 * # Safety
 * `m` must be a live manifest handle and `out` a valid pointer.
 */
enum BitallocStatus bitalloc_plan_run(const struct BitallocManifest *m,
                                      struct BitallocReport **out);

/**
 * # Safety
 * `r` must come from [`bitalloc_plan_run`] or be null.
 */
void bitalloc_report_free(struct BitallocReport *r);

/**
 * Number of layers in the report's assignment; 0 for a null handle.
 *
 * # Safety
 * `r` must be a live report handle or null.
 */
size_t bitalloc_report_layer_count(const struct BitallocReport *r);

/**
 * Name of layer `index`, owned by the report; null when out of range.
 *
 * # Safety
 * `r` must be a live report handle or null.
 */
const char *bitalloc_report_layer_name(const struct BitallocReport *r, size_t index);

/**
 * # Safety
 * `r` must be a live report handle and `out` a valid pointer.
 */
enum BitallocStatus bitalloc_report_layer(const struct BitallocReport *r,
                                          size_t index,
                                          struct BitallocLayer *out);

/**
 * # Safety
 * `r` must be a live report handle and `out` a valid pointer.
 */
enum BitallocStatus bitalloc_report_totals(const struct BitallocReport *r,
                                           struct BitallocTotals *out);

/**
 * Writes the report files into `dir`, creating it if needed.
 *
 * # Safety
 * `r` must be a live report handle and `dir` a NUL-terminated string.
 */
enum BitallocStatus bitalloc_report_write(const struct BitallocReport *r, const char *dir);

/**
 * Empty knapsack instance with the given capacity in bits.
 */
struct BitallocInstance *bitalloc_instance_new(uint64_t capacity_bits);

/**
 * # Safety
 * `inst` must come from [`bitalloc_instance_new`] or be null.
 */
void bitalloc_instance_free(struct BitallocInstance *inst);

/**
 * Appends a layer with `params` weights whose loss increase at `bits[i]`
 * is `delta_loss[i]`, for `len` candidates.
 *
 * # Safety
 * `inst` must be live; `name` NUL-terminated; `bits` and `delta_loss` must
 * each point to `len` readable values.
 */
enum BitallocStatus bitalloc_instance_add_layer(struct BitallocInstance *inst,
                                                const char *name,
                                                uint64_t params,
                                                const uint32_t *bits,
                                                const double *delta_loss,
                                                size_t len);

/**
 * Filters dominated candidates and solves. `out_bits` receives one bit per
 * layer in insertion order and must hold `out_len >= layer count` entries;
 * `totals` may be null.
 *
 * # Safety
 * `inst` must be live; `out_bits` must point to `out_len` writable values;
 * `totals` must be valid or null.
 */
enum BitallocStatus bitalloc_instance_solve(const struct BitallocInstance *inst,
                                            enum BitallocSolver solver,
                                            uint32_t *out_bits,
                                            size_t out_len,
                                            struct BitallocTotals *totals);

/**
 * Quantizes `len` weights to signed `bits`-bit values with the MSE-optimal
 * step, writing the quantized values to `out` and the step to `step`
 * (which may be null).
 *
 * # Safety
 * `w` and `out` must each point to `len` values; `step` valid or null.
 */
enum BitallocStatus bitalloc_quantize(const double *w,
                                      size_t len,
                                      uint32_t bits,
                                      double *out,
                                      double *step);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BITALLOC_H */
