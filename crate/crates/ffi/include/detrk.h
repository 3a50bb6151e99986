#ifndef DETRK_H
#define DETRK_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum DetrkStatus {
  DETRK_STATUS_OK = 0,
  DETRK_STATUS_NULL_POINTER = 1,
  DETRK_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Malformed input data, such as unparsable configuration JSON.
   */
  DETRK_STATUS_DATA = 3,
  /**
   * An output buffer is too small; the required size is reported where possible.
   */
  DETRK_STATUS_BUFFER_TOO_SMALL = 4,
  /**
   * A Rust panic was caught at the boundary. Indicates a bug.
   */
  DETRK_STATUS_PANIC = 5,
} DetrkStatus;

/**
 * Accumulates detections and ground truth, then scores them.
 */
typedef struct DetrkEvaluator DetrkEvaluator;

/**
 * Configured toy detector with its seeded parameters.
 */
typedef struct DetrkPipeline DetrkPipeline;

/**
 * Normalized center-size box.
 */
typedef struct DetrkBox {
  double cx;
  double cy;
  double w;
  double h;
} DetrkBox;

/**
 * Evaluation summary. Metrics that are undefined (no ground truth in range) are NaN.
 */
typedef struct DetrkMetrics {
  double map_50_95;
  double map_50;
  double map_75;
  double ap_small;
  double ap_medium;
  double ap_large;
} DetrkMetrics;

typedef struct DetrkDetection {
  struct DetrkBox bbox;
  double score;
  uint32_t class_id;
} DetrkDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *detrk_version(void);

/**
 * Size in bytes, including the terminating NUL, of this thread's last error message;
 * 0 if the last call succeeded.
 */
size_t detrk_last_error_length(void);

/**
 * Copies this thread's last error message into `buf` as a NUL-terminated string.
 *
 * Writes an empty string when there is no error. Returns `BUFFER_TOO_SMALL` without
 * writing if `len` is less than [`detrk_last_error_length`]. Does not clear the error.
 *
 * # Safety
 * `buf` must point to `len` writable bytes.
 */
enum DetrkStatus detrk_last_error_message(char *buf, size_t len);

/**
 * Minimum-cost one-to-one assignment on a row-major `rows×cols` cost matrix.
 *
 * `row_ind` and `col_ind` receive `min(rows, cols)` pairs sorted by row; `capacity` is
 * their length. `*n_pairs` is set even when `capacity` is too small.
 *
 * # Safety
 * `cost` must point to `rows*cols` doubles and the index buffers to `capacity` entries.
 */
enum DetrkStatus detrk_hungarian(const double *cost,
                                 size_t rows,
                                 size_t cols,
                                 size_t *row_ind,
                                 size_t *col_ind,
                                 size_t capacity,
                                 size_t *n_pairs,
                                 double *total_cost);

/**
 * Intersection over union of two boxes.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DetrkStatus detrk_iou(struct DetrkBox a, struct DetrkBox b, double *out);

/**
 * Generalized-IoU loss, in `[0, 2)`.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DetrkStatus detrk_giou_loss(struct DetrkBox a, struct DetrkBox b, double *out);

/**
 * Focal loss of foreground probability `p` against a foreground (`true`) or background label.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum DetrkStatus detrk_focal_loss(double p, bool foreground, double gamma, double *out);

/**
 * Sinusoidal encoding of a scalar position into `d_model` values (interleaved sin, cos).
 *
 * # Safety
 * `out` must point to `out_len` doubles; `out_len` must equal `d_model`.
 */
enum DetrkStatus detrk_positional_encoding(double pos,
                                           size_t d_model,
                                           double temperature,
                                           double *out,
                                           size_t out_len);

/**
 * Creates an empty evaluator.
 *
 * # Safety
 * `out` must be a valid pointer; it receives the handle.
 */
enum DetrkStatus detrk_evaluator_new(struct DetrkEvaluator **out);

/**
 * # Safety
 * `ev` must come from [`detrk_evaluator_new`]; `image_id` must be a NUL-terminated string.
 */
enum DetrkStatus detrk_evaluator_add_detection(struct DetrkEvaluator *ev,
                                               const char *image_id,
                                               struct DetrkBox bbox,
                                               double score,
                                               uint32_t class_id);

/**
 * `pixel_area` is the object's area in pixels, used for the size buckets.
 *
 * # Safety
 * `ev` must come from [`detrk_evaluator_new`]; `image_id` must be a NUL-terminated string.
 */
enum DetrkStatus detrk_evaluator_add_ground_truth(struct DetrkEvaluator *ev,
                                                  const char *image_id,
                                                  struct DetrkBox bbox,
                                                  uint32_t class_id,
                                                  double pixel_area);

/**
 * Scores everything added so far. The evaluator can keep accumulating afterwards.
 *
 * # Safety
 * `ev` must come from [`detrk_evaluator_new`]; `out` must be a valid pointer.
 */
enum DetrkStatus detrk_evaluator_report(struct DetrkEvaluator *ev, struct DetrkMetrics *out);

/**
 * # Safety
 * `ev` must be NULL or come from [`detrk_evaluator_new`], and not be used afterwards.
 */
void detrk_evaluator_free(struct DetrkEvaluator *ev);

/**
 * Builds a pipeline from configuration JSON, or the defaults when `config_json` is NULL.
 * Parameters are drawn from the configuration's seed.
 *
 * # Safety
 * `config_json` must be NULL or NUL-terminated; `out` must be a valid pointer.
 */
enum DetrkStatus detrk_pipeline_new(const char *config_json, struct DetrkPipeline **out);

/**
 * Upper bound on the detections one forward pass can return.
 *
 * # Safety
 * `p` must be NULL or come from [`detrk_pipeline_new`]. Returns 0 for NULL.
 */
size_t detrk_pipeline_max_detections(const struct DetrkPipeline *p);

/**
 * Runs the detector on a row-major grayscale image.
 *
 * `*n_out` is set to the number of detections even when `capacity` is too small.
 *
 * # Safety
 * `p` must come from [`detrk_pipeline_new`]; `pixels` must point to `height*width`
 * doubles and `out` to `capacity` entries.
 */
enum DetrkStatus detrk_pipeline_forward(struct DetrkPipeline *p,
                                        const double *pixels,
                                        size_t height,
                                        size_t width,
                                        struct DetrkDetection *out,
                                        size_t capacity,
                                        size_t *n_out);

/**
 * # Safety
 * `p` must be NULL or come from [`detrk_pipeline_new`], and not be used afterwards.
 */
void detrk_pipeline_free(struct DetrkPipeline *p);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DETRK_H */
