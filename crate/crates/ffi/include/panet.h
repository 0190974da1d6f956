#ifndef PANET_H
#define PANET_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PanetStatus {
  PANET_STATUS_OK = 0,
  PANET_STATUS_NULL_POINTER = 1,
  // A string argument is not valid UTF-8.
  PANET_STATUS_INVALID_UTF8 = 2,
  PANET_STATUS_IO = 3,
  // Malformed or truncated file, bad magic or unsupported version.
  PANET_STATUS_FORMAT = 4,
  PANET_STATUS_CONFIG = 5,
  PANET_STATUS_CONFIG_MISMATCH = 6,
  PANET_STATUS_DOMAIN = 7,
  PANET_STATUS_NUMERIC = 8,
  PANET_STATUS_DIVERGENCE = 9,
  // The caller's output buffer is shorter than required.
  PANET_STATUS_BUFFER_TOO_SMALL = 10,
  PANET_STATUS_PANIC = 11,
} PanetStatus;

// Sliding-window view over gridded sequences.
typedef struct PanetDataset PanetDataset;

// Trained forecaster.
typedef struct PanetModel PanetModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *panet_version(void);

// Copies the last error message of this thread into `buf` (truncated and
// NUL-terminated) and returns the buffer length needed for the whole
// message, including the terminator. `buf` may be null when `len` is 0.
//
// # Safety
// `buf` must be valid for `len` bytes of writes.
size_t panet_last_error(char *buf, size_t len);

// Intensity category index (0 RL .. 4 RS) of a rain rate in mm/h.
//
// # Safety
// `out` must be a valid pointer.
enum PanetStatus panet_categorize(double rain_mm_h, uint8_t *out);

// Loads a model or training checkpoint.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum PanetStatus panet_model_load(const char *path, struct PanetModel **out);

// Writes the model weights and configuration as a model checkpoint.
//
// # Safety
// `model` must come from [`panet_model_load`]; `path` must be NUL-terminated.
enum PanetStatus panet_model_save(const struct PanetModel *model, const char *path);

// Look-back frames, horizon, input channels and patch size of the model.
// Any output pointer may be null.
//
// # Safety
// `model` must be a live handle; non-null outputs must be valid.
enum PanetStatus panet_model_dims(const struct PanetModel *model,
                                  size_t *lookback,
                                  size_t *horizon,
                                  size_t *channels,
                                  size_t *patch);

// # Safety
// `model` must be null or a handle not yet freed.
void panet_model_free(struct PanetModel *model);

// Opens a `.pang` container, or every `.pang` file in a directory in
// name order, as windows of `lookback` inputs and `horizon` targets.
//
// # Safety
// `path` must be NUL-terminated and `out` a valid pointer.
enum PanetStatus panet_dataset_open(const char *path,
                                    size_t lookback,
                                    size_t horizon,
                                    struct PanetDataset **out);

// Synthetic storm sequences of `frames x height x width x channels`.
//
// # Safety
// `out` must be a valid pointer.
enum PanetStatus panet_dataset_synthetic(uint64_t seed,
                                         size_t sequences,
                                         size_t frames,
                                         size_t height,
                                         size_t width,
                                         size_t channels,
                                         double tail_exponent,
                                         size_t lookback,
                                         size_t horizon,
                                         struct PanetDataset **out);

// Window count and grid extent. Any output pointer may be null.
//
// # Safety
// `data` must be a live handle; non-null outputs must be valid.
enum PanetStatus panet_dataset_dims(const struct PanetDataset *data,
                                    size_t *windows,
                                    size_t *height,
                                    size_t *width);

// # Safety
// `data` must be null or a handle not yet freed.
void panet_dataset_free(struct PanetDataset *data);

// Category forecasts for every window, `(windows, horizon, H, W)` row-major.
//
// `len` is the capacity of `out`; when it is too small nothing is written,
// `required` (if non-null) receives the needed length and
// [`PanetStatus::BufferTooSmall`] is returned.
//
// # Safety
// Handles must be live; `out` must be valid for `len` writes.
enum PanetStatus panet_forecast(const struct PanetModel *model,
                                const struct PanetDataset *data,
                                uint8_t *out,
                                size_t len,
                                size_t *required);

// Mean category IoU and threat score of the model over the dataset.
//
// # Safety
// Handles must be live; outputs must be valid pointers.
enum PanetStatus panet_evaluate(const struct PanetModel *model,
                                const struct PanetDataset *data,
                                double *mean_iou,
                                double *mean_ts);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PANET_H */
