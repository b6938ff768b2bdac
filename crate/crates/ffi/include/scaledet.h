#ifndef SCALEDET_H
#define SCALEDET_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum ScaledetStatus {
  SCALEDET_STATUS_OK = 0,
  SCALEDET_STATUS_INVALID_ARGUMENT = 1,
  SCALEDET_STATUS_PARSE = 2,
  SCALEDET_STATUS_REFERENTIAL = 3,
  SCALEDET_STATUS_IO = 4,
  SCALEDET_STATUS_IMAGE_FORMAT = 5,
  SCALEDET_STATUS_MISSING_SCORE = 6,
  SCALEDET_STATUS_CACHE_MISS = 7,
  SCALEDET_STATUS_ADAPTER = 8,
  SCALEDET_STATUS_SERIALIZE = 9,
  SCALEDET_STATUS_NULL_POINTER = 10,
  SCALEDET_STATUS_PANIC = 11,
} ScaledetStatus;

typedef enum ScaledetBand {
  SCALEDET_BAND_ALL = 0,
  SCALEDET_BAND_SMALL = 1,
  SCALEDET_BAND_MEDIUM = 2,
  SCALEDET_BAND_LARGE = 3,
} ScaledetBand;

typedef enum ScaledetSizeClass {
  SCALEDET_SIZE_CLASS_SMALL = 0,
  SCALEDET_SIZE_CLASS_MEDIUM = 1,
  SCALEDET_SIZE_CLASS_LARGE = 2,
} ScaledetSizeClass;

/**
 * Opaque annotated dataset.
 */
typedef struct ScaledetDataset ScaledetDataset;

/**
 * Opaque detection set.
 */
typedef struct ScaledetDetections ScaledetDetections;

/**
 * Opaque evaluation report.
 */
typedef struct ScaledetEvalReport ScaledetEvalReport;

typedef struct ScaledetSizeCounts {
  uint64_t small;
  uint64_t medium;
  uint64_t large;
  uint64_t iscrowd;
} ScaledetSizeCounts;

typedef struct ScaledetApSummary {
  double ap;
  double ap_s;
  double ap_m;
  double ap_l;
} ScaledetApSummary;

/**
 * Precision/recall of an unscored set; `-1` marks undefined values.
 */
typedef struct ScaledetFixedPr {
  double precision;
  double recall;
  uint64_t true_positives;
  uint64_t false_positives;
  uint64_t ignored;
  uint64_t num_gt;
} ScaledetFixedPr;

/**
 * Axis-aligned box in `[x, y, w, h]` form.
 */
typedef struct ScaledetBox {
  double x;
  double y;
  double w;
  double h;
} ScaledetBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the most recent failure on this thread, or null.
 *
 * The pointer stays valid until the next failing call on the same thread.
 */
const char *scaledet_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *scaledet_version(void);

/**
 * Releases a string returned by this library.
 */
void scaledet_string_free(char *s);

enum ScaledetStatus scaledet_dataset_load(const char *path, struct ScaledetDataset **out);

enum ScaledetStatus scaledet_dataset_from_json(const uint8_t *data,
                                               uintptr_t len,
                                               struct ScaledetDataset **out);

void scaledet_dataset_free(struct ScaledetDataset *d);

/**
 * Number of images; 0 for a null handle.
 */
uintptr_t scaledet_dataset_num_images(const struct ScaledetDataset *d);

/**
 * Number of annotations; 0 for a null handle.
 */
uintptr_t scaledet_dataset_num_annotations(const struct ScaledetDataset *d);

/**
 * Number of categories; 0 for a null handle.
 */
uintptr_t scaledet_dataset_num_categories(const struct ScaledetDataset *d);

/**
 * Size-class tallies of the non-crowd annotations plus the crowd count.
 */
enum ScaledetStatus scaledet_dataset_size_histogram(const struct ScaledetDataset *d,
                                                    double small_max,
                                                    double medium_max,
                                                    struct ScaledetSizeCounts *out);

enum ScaledetStatus scaledet_detections_load(const char *path, struct ScaledetDetections **out);

enum ScaledetStatus scaledet_detections_from_json(const uint8_t *data,
                                                  uintptr_t len,
                                                  struct ScaledetDetections **out);

void scaledet_detections_free(struct ScaledetDetections *s);

/**
 * Number of detections; 0 for a null handle.
 */
uintptr_t scaledet_detections_len(const struct ScaledetDetections *s);

/**
 * COCO-style evaluation with the default configuration
 * (IoU 0.50:0.05:0.95, 100 detections, 101 recall samples).
 */
enum ScaledetStatus scaledet_evaluate(const struct ScaledetDataset *gt,
                                      const struct ScaledetDetections *dets,
                                      struct ScaledetEvalReport **out);

/**
 * Headline AP values; `-1` marks strata without ground truth.
 */
enum ScaledetStatus scaledet_eval_report_summary(const struct ScaledetEvalReport *r,
                                                 struct ScaledetApSummary *out);

/**
 * Full report as JSON; release with [`scaledet_string_free`].
 */
enum ScaledetStatus scaledet_eval_report_to_json(const struct ScaledetEvalReport *r, char **out);

void scaledet_eval_report_free(struct ScaledetEvalReport *r);

/**
 * Precision and recall of an unscored box set at one IoU threshold, with
 * bands defined by the default size thresholds.
 */
enum ScaledetStatus scaledet_fixed_set_pr(const struct ScaledetDataset *gt,
                                          const struct ScaledetDetections *dets,
                                          double iou_threshold,
                                          enum ScaledetBand band,
                                          struct ScaledetFixedPr *out);

enum ScaledetStatus scaledet_iou(struct ScaledetBox a, struct ScaledetBox b, double *out);

enum ScaledetStatus scaledet_scale_box(struct ScaledetBox b,
                                       double factor,
                                       struct ScaledetBox *out);

enum ScaledetStatus scaledet_classify_size(double area,
                                           double small_max,
                                           double medium_max,
                                           enum ScaledetSizeClass *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SCALEDET_H */
