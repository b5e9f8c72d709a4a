#ifndef AOP_H
#define AOP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AopStatus {
  AOP_STATUS_OK = 0,
  AOP_STATUS_NULL_ARGUMENT = 1,
  AOP_STATUS_CONFIG = 2,
  AOP_STATUS_FORMAT = 3,
  AOP_STATUS_IO = 4,
  AOP_STATUS_DIMENSION = 5,
  AOP_STATUS_OUT_OF_RANGE = 6,
  AOP_STATUS_RUNTIME = 7,
  AOP_STATUS_PANIC = 8,
} AopStatus;

typedef enum AopMethod {
  AOP_METHOD_AOP = 0,
  AOP_METHOD_AMG_S = 1,
  AOP_METHOD_AMG_D = 2,
} AopMethod;

typedef enum AopMatching {
  AOP_MATCHING_ONE_TO_ONE = 0,
  AOP_MATCHING_REUSE = 1,
} AopMatching;

/**
 * Masks and metrics of one run.
 */
typedef struct AopResult AopResult;

/**
 * A scene directory in the adapter layout.
 */
typedef struct AopScene AopScene;

/**
 * Predictor weights.
 */
typedef struct AopWeights AopWeights;

/**
 * Pipeline settings. Fill with [`aop_config_default`] and then adjust.
 */
typedef struct AopConfig {
  enum AopMethod method;
  float smoothing_sigma;
  float intensity_threshold;
  size_t spacing;
  double threshold_factor;
  size_t min_reference_masks;
  bool cumulative_threshold;
  size_t batch_size;
  float iou_conf_min;
  float stability_min;
  double dedup_iou;
  bool multimask;
} AopConfig;

typedef struct AopMetrics {
  size_t num_prompts;
  size_t decoder_calls;
  size_t eliminated;
  size_t initial_pool;
  size_t num_masks;
  /**
   * Percent of the initial pool.
   */
  double elimination_ratio;
  double prompt_latency_s;
  double mask_latency_s;
  size_t peak_bytes;
} AopMetrics;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version, a static NUL-terminated string.
 */
const char *aop_version(void);

/**
 * Message of the last failed call on this thread, or NULL. Valid until the
 * next call into the library from the same thread.
 */
const char *aop_last_error(void);

/**
 * # Safety
 * `out` must be a valid pointer to an `AopConfig`.
 */
enum AopStatus aop_config_default(struct AopConfig *out);

/**
 * Loads an AOPW weights file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AopStatus aop_weights_load(const char *path, struct AopWeights **out);

/**
 * # Safety
 * `weights` must come from [`aop_weights_load`] or be NULL.
 */
void aop_weights_free(struct AopWeights *weights);

/**
 * Loads a scene directory (`index.json`, `masks/`, `embedding.aopt`,
 * optional `image.ppm`).
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
enum AopStatus aop_scene_load(const char *dir, struct AopScene **out);

/**
 * # Safety
 * `scene` must come from [`aop_scene_load`] or be NULL.
 */
void aop_scene_free(struct AopScene *scene);

/**
 * Image height and width of a scene.
 *
 * # Safety
 * `scene` must be a live handle; `height` and `width` valid pointers.
 */
enum AopStatus aop_scene_size(const struct AopScene *scene, size_t *height, size_t *width);

/**
 * Runs the configured method on a scene. `weights` may be NULL for the
 * grid baselines.
 *
 * # Safety
 * `scene` and `config` must be valid, `weights` live or NULL, `out` valid.
 */
enum AopStatus aop_run(const struct AopScene *scene,
                       const struct AopWeights *weights,
                       const struct AopConfig *config,
                       struct AopResult **out);

/**
 * # Safety
 * `result` must come from [`aop_run`] or be NULL.
 */
void aop_result_free(struct AopResult *result);

/**
 * # Safety
 * `result` must be a live handle and `out` a valid pointer.
 */
enum AopStatus aop_result_metrics(const struct AopResult *result, struct AopMetrics *out);

/**
 * Copies mask `index` (row-major, 0 or 1) into `buf`, which must hold
 * height × width floats.
 *
 * # Safety
 * `result` must be a live handle and `buf` valid for `len` writes.
 */
enum AopStatus aop_result_mask(const struct AopResult *result,
                               size_t index,
                               float *buf,
                               size_t len);

/**
 * Greedy mIoU of a result's masks against the scene's masks.
 *
 * # Safety
 * `result` and `scene` must be live handles and `out` a valid pointer.
 */
enum AopStatus aop_result_miou(const struct AopResult *result,
                               const struct AopScene *scene,
                               enum AopMatching matching,
                               double *out);

/**
 * IoU of two `height × width` masks (`> 0.5` is foreground). Two empty
 * masks score 1.
 *
 * # Safety
 * `a` and `b` must be valid for `height * width` reads, `out` valid.
 */
enum AopStatus aop_mask_iou(const float *a,
                            const float *b,
                            size_t height,
                            size_t width,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AOP_H */
