#ifndef DEPTHFORGE_H
#define DEPTHFORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum {
  DF_STATUS_OK = 0,
  DF_STATUS_NULL_POINTER = 1,
  DF_STATUS_INVALID_ARGUMENT = 2,
  DF_STATUS_SHAPE = 3,
  // A file could not be read or decoded.
  DF_STATUS_FILE = 4,
  DF_STATUS_FORMAT = 5,
  DF_STATUS_NON_FINITE = 6,
  // A Rust panic was caught at the boundary.
  DF_STATUS_INTERNAL = 7,
} DfStatus;

// A loaded depth and pose model.
typedef struct DfModel DfModel;

// The seven standard depth metrics.
typedef struct {
  double abs_rel;
  double sq_rel;
  double rmse;
  double rmse_log;
  double delta1;
  double delta2;
  double delta3;
} DfMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or NULL after a success.
// The pointer stays valid until the next call on the same thread.
const char *df_last_error(void);

// Library version as a static NUL-terminated string.
const char *df_version(void);

// Loads a checkpoint written by the trainer or the command-line tool.
//
// # Safety
// `path` must be a NUL-terminated UTF-8 string and `out` a writable pointer.
DfStatus df_model_load(const char *path, DfModel **out);

// Releases a model. NULL is ignored.
//
// # Safety
// `model` must come from [`df_model_load`] and not have been freed.
void df_model_free(DfModel *model);

// Input size the model was built for.
//
// # Safety
// `model` must be a live handle; `width` and `height` writable pointers.
DfStatus df_model_input_size(const DfModel *model, size_t *width, size_t *height);

// Predicts depth, known up to scale, for one planar RGB image (`3 * height * width`
// values in `[0, 1]`, channel-major) into `depth` (`height * width` values).
//
// # Safety
// `image` must hold `3 * width * height` floats and `depth` room for
// `depth_len` floats.
DfStatus df_model_predict(const DfModel *model,
                          const float *image,
                          size_t width,
                          size_t height,
                          float *depth,
                          size_t depth_len);

// Scores `pred` against sparse ground truth `gt` (0 marks missing), both
// `height * width` values. Ground truth above `cap` is ignored; with
// `median_scale` the prediction is first rescaled by the ratio of medians.
//
// # Safety
// `pred` and `gt` must hold `width * height` floats; `out` must be writable.
DfStatus df_compute_metrics(const float *pred,
                            const float *gt,
                            size_t width,
                            size_t height,
                            double cap,
                            bool median_scale,
                            DfMetrics *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEPTHFORGE_H */
