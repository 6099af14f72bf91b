#ifndef MCCM_H
#define MCCM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of a call.
 */
typedef enum MccmStatus {
  MCCM_STATUS_OK = 0,
  MCCM_STATUS_NULL_ARGUMENT = 1,
  MCCM_STATUS_INVALID_UTF8 = 2,
  /**
   * Malformed CNN or platform descriptor, or unknown bundled name.
   */
  MCCM_STATUS_BAD_DESCRIPTOR = 3,
  /**
   * The sketch does not parse or does not match the CNN.
   */
  MCCM_STATUS_BAD_SKETCH = 4,
  /**
   * The design does not fit the platform.
   */
  MCCM_STATUS_INFEASIBLE = 5,
  MCCM_STATUS_INTERNAL = 6,
} MccmStatus;

/**
 * A loaded CNN.
 */
typedef struct MccmCnn MccmCnn;

/**
 * A loaded FPGA platform.
 */
typedef struct MccmPlatform MccmPlatform;

/**
 * The evaluation of one accelerator.
 */
typedef struct MccmReport MccmReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, empty after a success.
 * Valid until the next call on the same thread.
 */
const char *mccm_last_error(void);

/**
 * Library version as a static string.
 */
const char *mccm_version(void);

/**
 * Parses a CNN descriptor from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` valid for writing.
 */
enum MccmStatus mccm_cnn_from_json(const char *json, struct MccmCnn **out);

/**
 * Loads one of the CNNs shipped with the library, e.g. "resnet50".
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` valid for writing.
 */
enum MccmStatus mccm_cnn_bundled(const char *name, struct MccmCnn **out);

/**
 * Number of layers, 0 for NULL.
 *
 * # Safety
 * `cnn` must be NULL or a live handle.
 */
size_t mccm_cnn_num_layers(const struct MccmCnn *cnn);

/**
 * # Safety
 * `cnn` must be NULL or a handle not yet freed.
 */
void mccm_cnn_free(struct MccmCnn *cnn);

/**
 * Parses a platform descriptor from JSON text.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` valid for writing.
 */
enum MccmStatus mccm_platform_from_json(const char *json, struct MccmPlatform **out);

/**
 * Loads one of the boards shipped with the library, e.g. "zc706".
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` valid for writing.
 */
enum MccmStatus mccm_platform_bundled(const char *name, struct MccmPlatform **out);

/**
 * Replaces the on-chip memory budget, in bytes.
 *
 * # Safety
 * `platform` must be NULL or a live handle.
 */
enum MccmStatus mccm_platform_set_on_chip_bytes(struct MccmPlatform *platform, uint64_t bytes);

/**
 * # Safety
 * `platform` must be NULL or a handle not yet freed.
 */
void mccm_platform_free(struct MccmPlatform *platform);

/**
 * Builds the accelerator described by `sketch` and evaluates it.
 *
 * # Safety
 * `cnn` and `platform` must be live handles, `sketch` a NUL-terminated
 * string and `out` valid for writing.
 */
enum MccmStatus mccm_evaluate(const struct MccmCnn *cnn,
                              const struct MccmPlatform *platform,
                              const char *sketch,
                              struct MccmReport **out);

/**
 * Seconds for one input to pass through the accelerator; NaN for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
double mccm_report_latency_s(const struct MccmReport *report);

/**
 * Inputs per second; NaN for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
double mccm_report_throughput(const struct MccmReport *report);

/**
 * On-chip bytes allocated; 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
uint64_t mccm_report_buffer_bytes(const struct MccmReport *report);

/**
 * Off-chip bytes moved per input; 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
uint64_t mccm_report_access_bytes(const struct MccmReport *report);

/**
 * Number of segments; 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
size_t mccm_report_segment_count(const struct MccmReport *report);

/**
 * Segments whose transfers take longer than their compute; 0 for NULL.
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
size_t mccm_report_memory_bound_segments(const struct MccmReport *report);

/**
 * The full report as JSON, or NULL for a NULL report. Release with
 * [`mccm_string_free`].
 *
 * # Safety
 * `report` must be NULL or a live handle.
 */
char *mccm_report_to_json(const struct MccmReport *report);

/**
 * # Safety
 * `report` must be NULL or a handle not yet freed.
 */
void mccm_report_free(struct MccmReport *report);

/**
 * Canonical form of a sketch for a CNN of `depth` layers. Release the
 * result with [`mccm_string_free`].
 *
 * # Safety
 * `sketch` must be a NUL-terminated string and `out` valid for writing.
 */
enum MccmStatus mccm_format_sketch(const char *sketch, size_t depth, char **out);

/**
 * # Safety
 * `s` must be NULL or a string returned by this library and not yet freed.
 */
void mccm_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MCCM_H */
