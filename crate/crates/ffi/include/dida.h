#ifndef DIDA_H
#define DIDA_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DidaStatus {
  DIDA_STATUS_OK = 0,
  DIDA_STATUS_NULL_POINTER = 1,
  DIDA_STATUS_INVALID_UTF8 = 2,
  DIDA_STATUS_CONFIG = 3,
  DIDA_STATUS_DATA = 4,
  DIDA_STATUS_RUNTIME = 5,
  DIDA_STATUS_IO = 6,
  DIDA_STATUS_OUT_OF_RANGE = 7,
  DIDA_STATUS_PANIC = 8,
} DidaStatus;

/**
 * Trained model bundle loaded from a checkpoint.
 */
typedef struct DidaBundle DidaBundle;

/**
 * Run configuration handle.
 */
typedef struct DidaConfig DidaConfig;

/**
 * Finished run: per-iteration records.
 */
typedef struct DidaReport DidaReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty if none. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *dida_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *dida_version(void);

/**
 * # Safety
 * `out` must be a valid pointer to write the new handle to.
 */
enum DidaStatus dida_config_default(struct DidaConfig **out);

/**
 * Parses a TOML run config.
 *
 * # Safety
 * `toml` must be a NUL-terminated string and `out` a valid pointer.
 */
enum DidaStatus dida_config_from_toml(const char *toml, struct DidaConfig **out);

/**
 * Applies one dotted `key=value` override, e.g. `da.epochs=5`.
 *
 * # Safety
 * `cfg` must be a live config handle and `assignment` a NUL-terminated string.
 */
enum DidaStatus dida_config_set(struct DidaConfig *cfg, const char *assignment);

/**
 * Sets the init, data and pairing seeds together.
 *
 * # Safety
 * `cfg` must be a live config handle.
 */
enum DidaStatus dida_config_set_seed(struct DidaConfig *cfg, uint64_t seed);

/**
 * Effective config as TOML. Release with [`dida_string_free`].
 *
 * # Safety
 * `cfg` must be a live config handle and `out` a valid pointer.
 */
enum DidaStatus dida_config_to_toml(const struct DidaConfig *cfg, char **out);

/**
 * # Safety
 * `cfg` must be null or a handle not yet freed.
 */
void dida_config_free(struct DidaConfig *cfg);

/**
 * Runs the DiDA loop. `out_dir` and `cache_dir` may be null.
 *
 * # Safety
 * `cfg` must be a live handle, string arguments NUL-terminated or null, and
 * `out` a valid pointer.
 */
enum DidaStatus dida_run(const struct DidaConfig *cfg,
                         const char *out_dir,
                         const char *cache_dir,
                         struct DidaReport **out);

/**
 * Runs the equal-budget control arm selected by `control.variant`.
 *
 * # Safety
 * Same contract as [`dida_run`].
 */
enum DidaStatus dida_run_control(const struct DidaConfig *cfg,
                                 const char *out_dir,
                                 const char *cache_dir,
                                 struct DidaReport **out);

/**
 * Number of completed iterations (i = 0 included).
 *
 * # Safety
 * `report` must be null or a live report handle.
 */
size_t dida_report_iterations(const struct DidaReport *report);

/**
 * Target test accuracy in percent at iteration `i`.
 *
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum DidaStatus dida_report_target_acc(const struct DidaReport *report, size_t i, double *out);

/**
 * Source test accuracy in percent at iteration `i`.
 *
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum DidaStatus dida_report_source_acc(const struct DidaReport *report, size_t i, double *out);

/**
 * Probe accuracies at iteration `i`; `OutOfRange` when probes were disabled.
 *
 * # Safety
 * `report` must be a live handle and both outputs valid pointers.
 */
enum DidaStatus dida_report_probes(const struct DidaReport *report,
                                   size_t i,
                                   double *common,
                                   double *specific);

/**
 * The metrics table as CSV text. Release with [`dida_string_free`].
 *
 * # Safety
 * `report` must be a live handle and `out` a valid pointer.
 */
enum DidaStatus dida_report_metrics_csv(const struct DidaReport *report, char **out);

/**
 * # Safety
 * `report` must be null or a handle not yet freed.
 */
void dida_report_free(struct DidaReport *report);

/**
 * Loads the bundle stored in a checkpoint file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` a valid pointer.
 */
enum DidaStatus dida_bundle_load(const char *path, struct DidaBundle **out);

/**
 * Writes the configured `[channels, height, width]` image shape.
 *
 * # Safety
 * `bundle` must be a live handle and `shape` point to 3 writable values.
 */
enum DidaStatus dida_bundle_image_shape(const struct DidaBundle *bundle, size_t *shape);

/**
 * Predicts classes for `n` images laid out `[n, C, H, W]` row-major, values
 * in [0, 1]. Writes `n` class indices to `labels`.
 *
 * # Safety
 * `images` must hold `n*C*H*W` floats and `labels` room for `n` values.
 */
enum DidaStatus dida_bundle_predict(const struct DidaBundle *bundle,
                                    const float *images,
                                    size_t n,
                                    uint32_t *labels);

/**
 * Reconstructs `n` images `[n, C, H, W]` from their own common and specific
 * features into `out` (same layout).
 *
 * # Safety
 * `images` and `out` must each hold `n*C*H*W` floats.
 */
enum DidaStatus dida_bundle_reconstruct(const struct DidaBundle *bundle,
                                        const float *images,
                                        size_t n,
                                        float *out);

/**
 * # Safety
 * `bundle` must be null or a handle not yet freed.
 */
void dida_bundle_free(struct DidaBundle *bundle);

/**
 * Releases a string returned by this library.
 *
 * # Safety
 * `s` must be null or a string from this library not yet freed.
 */
void dida_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DIDA_H */
