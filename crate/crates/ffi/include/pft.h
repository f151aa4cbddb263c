#ifndef PFT_H
#define PFT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum PftStatus {
  PFT_STATUS_OK = 0,
  PFT_STATUS_NULL_ARGUMENT = 1,
  PFT_STATUS_INVALID_ARGUMENT = 2,
  PFT_STATUS_CONFIG = 3,
  PFT_STATUS_DATA = 4,
  PFT_STATUS_DIVERGENCE = 5,
  PFT_STATUS_CHECKPOINT = 6,
  PFT_STATUS_IO = 7,
  PFT_STATUS_PANIC = 8,
} PftStatus;

/*
 Opaque model handle.
 */
typedef struct PftModel PftModel;

/*
 Opaque retrieval report handle.
 */
typedef struct PftReport PftReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or an empty string. The
 pointer stays valid until the next call into this library on the same
 thread.
 */
const char *pft_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *pft_version(void);

/*
 Creates a freshly initialized model.

 `config_json` is a model configuration object; NULL selects the defaults.

 # Safety
 `config_json` must be NULL or a valid NUL-terminated string and `out` a
 valid pointer.
 */
enum PftStatus pft_model_new(const char *config_json,
                             size_t num_ids,
                             uint64_t seed,
                             struct PftModel **out);

/*
 Loads a checkpoint written by `pft train` or [`pft_model_save`].

 # Safety
 `path` must be a valid NUL-terminated string, `config_json` NULL or one,
 and `out` a valid pointer.
 */
enum PftStatus pft_model_load(const char *path, const char *config_json, struct PftModel **out);

/*
 # Safety
 `model` must come from this library and `path` be a valid NUL-terminated
 string.
 */
enum PftStatus pft_model_save(const struct PftModel *model, const char *path);

/*
 # Safety
 `model` must be NULL or a handle from this library not yet freed.
 */
void pft_model_free(struct PftModel *model);

/*
 Embedding width, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t pft_model_feature_dim(const struct PftModel *model);

/*
 Scalars per input image (`C·H·W`), or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t pft_model_image_len(const struct PftModel *model);

/*
 Trainable scalar count, or 0 for NULL.

 # Safety
 `model` must be NULL or a live handle.
 */
size_t pft_model_param_count(const struct PftModel *model);

/*
 Embeds `count` planar `[C, H, W]` images stored back to back in `images`
 and writes `count · feature_dim` values to `out`.

 # Safety
 `images` must hold `count · pft_model_image_len(model)` values and `out`
 must have room for `out_len` values.
 */
enum PftStatus pft_model_embed(const struct PftModel *model,
                               const double *images,
                               size_t count,
                               double *out,
                               size_t out_len);

/*
 Single-query retrieval evaluation of a row-major `nq × ng` distance
 matrix.

 # Safety
 `dist` must hold `nq · ng` values, the id and camera arrays `nq` or `ng`
 values as named, and `out` must be a valid pointer.
 */
enum PftStatus pft_evaluate(const double *dist,
                            size_t nq,
                            size_t ng,
                            const size_t *q_ids,
                            const size_t *g_ids,
                            const size_t *q_cams,
                            const size_t *g_cams,
                            size_t max_rank,
                            bool exclude_same_camera,
                            struct PftReport **out);

/*
 Mean average precision, or NaN for NULL.

 # Safety
 `report` must be NULL or a live handle.
 */
double pft_report_map(const struct PftReport *report);

/*
 Number of CMC entries, or 0 for NULL.

 # Safety
 `report` must be NULL or a live handle.
 */
size_t pft_report_cmc_len(const struct PftReport *report);

/*
 Copies the CMC curve into `out`, which must hold `len >= cmc_len` values.

 # Safety
 `report` must be a live handle and `out` must have room for `len` values.
 */
enum PftStatus pft_report_cmc(const struct PftReport *report, double *out, size_t len);

/*
 Queries left out for lack of a valid match, or 0 for NULL.

 # Safety
 `report` must be NULL or a live handle.
 */
size_t pft_report_excluded(const struct PftReport *report);

/*
 # Safety
 `report` must be NULL or a handle from this library not yet freed.
 */
void pft_report_free(struct PftReport *report);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PFT_H */
