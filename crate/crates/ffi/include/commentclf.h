#ifndef COMMENTCLF_H
#define COMMENTCLF_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum CcStatus {
  CC_STATUS_OK = 0,
  CC_STATUS_NULL_ARGUMENT = 1,
  CC_STATUS_INVALID_UTF8 = 2,
  CC_STATUS_INVALID_ARGUMENT = 3,
  // Config file or validation error.
  CC_STATUS_CONFIG = 4,
  // Artifact produced under an incompatible config, or an encoder dim conflict.
  CC_STATUS_INCOMPATIBLE = 5,
  // Failure while loading, training or predicting.
  CC_STATUS_RUNTIME = 6,
  // A Rust panic was caught at the boundary.
  CC_STATUS_PANIC = 7,
} CcStatus;

// A validated run configuration.
typedef struct CcConfig CcConfig;

// A trained model opened from a run directory, bound to its config.
typedef struct CcModel CcModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread, or NULL. Valid until the
// next call on the same thread.
const char *cc_last_error_message(void);

// Library version, static storage.
const char *cc_version(void);

// Number of label indices.
size_t cc_label_count(void);

// Display name of a label index, static storage; NULL when out of range.
const char *cc_label_name(uint32_t index);

// Frees a string returned by this library. NULL is ignored.
//
// # Safety
// `s` must come from this library and not have been freed.
void cc_string_free(char *s);

// Loads and validates a run config, applying `n_overrides` `section.key=value`
// overrides.
//
// # Safety
// Pointers must be valid NUL-terminated strings; `overrides` must hold
// `n_overrides` of them; `out` must be writable.
enum CcStatus cc_config_load(const char *path,
                             const char *const *overrides,
                             size_t n_overrides,
                             struct CcConfig **out);

// # Safety
// `config` must come from [`cc_config_load`] and not have been freed.
void cc_config_free(struct CcConfig *config);

// Runs `prepare`.
//
// # Safety
// `config` must be a live handle.
enum CcStatus cc_prepare(const struct CcConfig *config);

// Runs `train`; on success `*run_dir_out` receives the run directory.
//
// # Safety
// `config` must be a live handle; `run_dir_out` may be NULL.
enum CcStatus cc_train(const struct CcConfig *config, char **run_dir_out);

// Runs `evaluate` on `split` ("train", "dev" or "test").
//
// # Safety
// `config` must be a live handle; strings NUL-terminated; out-pointers
// writable or NULL.
enum CcStatus cc_evaluate(const struct CcConfig *config,
                          const char *artifact,
                          const char *split,
                          double *macro_f1_out,
                          double *weighted_f1_out);

// Opens a run directory written by [`cc_train`]. The model keeps a copy of
// the config, so the config handle may be freed afterwards.
//
// # Safety
// `config` must be a live handle; `artifact` NUL-terminated; `out` writable.
enum CcStatus cc_model_load(const struct CcConfig *config,
                            const char *artifact,
                            struct CcModel **out);

// Predicts `n` texts, writing label indices to `labels_out[0..n]`. Texts
// are used as given; clean them as `prepare` does beforehand if needed.
//
// # Safety
// `model` must be a live handle; `texts` must hold `n` NUL-terminated
// strings; `labels_out` must have room for `n` values.
enum CcStatus cc_model_predict(const struct CcModel *model,
                               const char *const *texts,
                               size_t n,
                               uint32_t *labels_out);

// # Safety
// `model` must come from [`cc_model_load`] and not have been freed.
void cc_model_free(struct CcModel *model);

// Macro and weighted F1 of `n` (gold, predicted) label-index pairs.
//
// # Safety
// `gold` and `pred` must hold `n` values; out-pointers writable or NULL.
enum CcStatus cc_f1_scores(const uint32_t *gold,
                           const uint32_t *pred,
                           size_t n,
                           double *macro_f1_out,
                           double *weighted_f1_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* COMMENTCLF_H */
