#ifndef EQQUANT_H
#define EQQUANT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum EqqEqualization {
  EQQ_EQUALIZATION_ONE_STEP = 0,
  EQQ_EQUALIZATION_TWO_STEP = 1,
  EQQ_EQUALIZATION_TWO_STEP_MOBILENET = 2,
} EqqEqualization;

typedef enum EqqQuantMode {
  EQQ_QUANT_MODE_WEIGHTS_ONLY = 0,
  EQQ_QUANT_MODE_ACTIVATIONS_ONLY = 1,
  EQQ_QUANT_MODE_FULL = 2,
} EqqQuantMode;

/**
 * Result code of every fallible call.
 */
typedef enum EqqStatus {
  EQQ_STATUS_OK = 0,
  EQQ_STATUS_NULL_POINTER = 1,
  EQQ_STATUS_INVALID_UTF8 = 2,
  EQQ_STATUS_CONFIG = 3,
  EQQ_STATUS_IO = 4,
  EQQ_STATUS_FORMAT = 5,
  EQQ_STATUS_INVALID_GRAPH = 6,
  EQQ_STATUS_SHAPE_MISMATCH = 7,
  EQQ_STATUS_RUNTIME = 8,
  EQQ_STATUS_PANIC = 9,
} EqqStatus;

/**
 * Opaque calibration handle.
 */
typedef struct EqqCalibration EqqCalibration;

/**
 * Opaque network handle.
 */
typedef struct EqqGraph EqqGraph;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or "" after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *eqq_last_error(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *eqq_version(void);

/**
 * Releases a string returned by this library. Null is ignored.
 *
 * # Safety
 * `s` must come from this library and not have been freed already.
 */
void eqq_string_free(char *s);

/**
 * Loads a model. `weights` may be null to use the manifest path with `.bin`.
 *
 * # Safety
 * String arguments must be NUL-terminated; `out` must be writable.
 */
enum EqqStatus eqq_graph_load(const char *manifest,
                              const char *weights,
                              bool fold_batchnorm,
                              struct EqqGraph **out);

/**
 * Writes `<dir>/<stem>.json` and `<dir>/<stem>.bin`.
 *
 * # Safety
 * `graph` must be a live handle; string arguments must be NUL-terminated.
 */
enum EqqStatus eqq_graph_save(const struct EqqGraph *graph,
                              const char *dir,
                              const char *stem,
                              bool single_precision);

/**
 * Builds a synthetic fixture from a JSON spec (null for defaults), e.g.
 * `{"layers": 4, "imbalance": 100, "topology": "depthwise-chain"}`.
 *
 * # Safety
 * `spec_json` must be null or NUL-terminated; `out` must be writable.
 */
enum EqqStatus eqq_fixture(const char *spec_json, struct EqqGraph **out);

/**
 * Releases a graph handle. Null is ignored.
 *
 * # Safety
 * `graph` must come from this library and not have been freed already.
 */
void eqq_graph_free(struct EqqGraph *graph);

/**
 * Input shape as `(height, width, channels)`.
 *
 * # Safety
 * `graph` must be a live handle; `shape` must point to three `size_t`.
 */
enum EqqStatus eqq_graph_input_shape(const struct EqqGraph *graph, size_t *shape);

/**
 * Number of values the first output holds for one sample.
 *
 * # Safety
 * `graph` must be a live handle; `len` must be writable.
 */
enum EqqStatus eqq_graph_output_len(const struct EqqGraph *graph, size_t *len);

/**
 * Runs one sample (`h * w * c` values, channel-last) and writes the first
 * output into `output`, which must hold `output_len` values.
 *
 * # Safety
 * `input` must hold `input_len` values and `output` `output_len` values.
 */
enum EqqStatus eqq_graph_run(const struct EqqGraph *graph,
                             const double *input,
                             size_t input_len,
                             double *output,
                             size_t output_len);

/**
 * Calibrates on `count` consecutive samples of `h * w * c` values each.
 *
 * # Safety
 * `samples` must hold `count * h * w * c` values; `out` must be writable.
 */
enum EqqStatus eqq_calibrate(const struct EqqGraph *graph,
                             const double *samples,
                             size_t count,
                             uint32_t bits_weights,
                             uint32_t bits_activations,
                             uint32_t bits_biases,
                             struct EqqCalibration **out);

/**
 * Calibration record as JSON; release with `eqq_string_free`.
 *
 * # Safety
 * `calib` must be a live handle; `out` must be writable.
 */
enum EqqStatus eqq_calibration_to_json(const struct EqqCalibration *calib, char **out);

/**
 * Releases a calibration handle. Null is ignored.
 *
 * # Safety
 * `calib` must come from this library and not have been freed already.
 */
void eqq_calibration_free(struct EqqCalibration *calib);

/**
 * Equalizes `graph` into a new graph plus the matching calibration. The
 * scale vectors are returned as JSON in `scales_json` when it is non-null.
 *
 * # Safety
 * Handles must be live; `out_graph` and `out_calib` must be writable.
 */
enum EqqStatus eqq_equalize(const struct EqqGraph *graph,
                            const struct EqqCalibration *calib,
                            enum EqqEqualization mode,
                            double s_max,
                            double attenuation_floor,
                            struct EqqGraph **out_graph,
                            struct EqqCalibration **out_calib,
                            char **scales_json);

/**
 * Fake-quantized copy of `graph` under the calibration's bit widths.
 *
 * # Safety
 * Handles must be live; `out` must be writable.
 */
enum EqqStatus eqq_quantize(const struct EqqGraph *graph,
                            const struct EqqCalibration *calib,
                            enum EqqQuantMode mode,
                            struct EqqGraph **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* EQQUANT_H */
