#ifndef PITLAB_H
#define PITLAB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible call.
typedef enum PitlabStatus {
  PITLAB_STATUS_OK = 0,
  // A required pointer argument was null.
  PITLAB_STATUS_NULL_ARGUMENT = 1,
  // A string argument was not valid UTF-8.
  PITLAB_STATUS_INVALID_UTF8 = 2,
  // Malformed input, failed validation or an unknown name.
  PITLAB_STATUS_DATA = 3,
  // Training produced a non-finite loss or gradient.
  PITLAB_STATUS_NUMERICAL = 4,
  PITLAB_STATUS_IO = 5,
  // Bad call arguments, such as an unknown preset or evaluation mode.
  PITLAB_STATUS_USAGE = 6,
  // An internal panic was caught at the boundary.
  PITLAB_STATUS_PANIC = 7,
} PitlabStatus;

// Opaque corpus bundle.
typedef struct PitlabBundle PitlabBundle;

// Opaque single-precision model with its vocabulary.
typedef struct PitlabModel PitlabModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the last failed call on this thread; empty after success.
// Valid until the next call on the same thread.
const char *pitlab_last_error(void);

// # Safety
// `s` must come from this library or be null.
void pitlab_string_free(char *s);

// Generates a synthetic bundle. `counts_json` may be null for the default
// split sizes.
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum PitlabStatus pitlab_bundle_generate(const char *counts_json,
                                         uint64_t seed,
                                         struct PitlabBundle **out);

// Imports a bundle from its `bundle.json` manifest.
//
// # Safety
// `path` must be NUL-terminated; `out` must be writable.
enum PitlabStatus pitlab_bundle_load(const char *path, struct PitlabBundle **out);

// Writes the bundle's split files and manifest into `dir`.
//
// # Safety
// `bundle` must be a live handle; `dir` must be NUL-terminated.
enum PitlabStatus pitlab_bundle_export(const struct PitlabBundle *bundle, const char *dir);

// Hex SHA-256 of the bundle contents.
//
// # Safety
// `bundle` must be a live handle; `out` must be writable.
enum PitlabStatus pitlab_bundle_hash(const struct PitlabBundle *bundle, char **out);

// Number of test QA pairs, or 0 for a null handle.
//
// # Safety
// `bundle` must be a live handle or null.
uintptr_t pitlab_bundle_test_qa_count(const struct PitlabBundle *bundle);

// # Safety
// `bundle` must come from this library or be null; it is invalid afterwards.
void pitlab_bundle_free(struct PitlabBundle *bundle);

// Fresh model with a vocabulary built from `bundle`.
//
// # Safety
// `bundle` must be a live handle; `out` must be writable.
enum PitlabStatus pitlab_model_init(const struct PitlabBundle *bundle,
                                    uintptr_t layers,
                                    uintptr_t heads,
                                    uintptr_t dim,
                                    uintptr_t ctx,
                                    uint64_t seed,
                                    struct PitlabModel **out);

// # Safety
// `dir` must be NUL-terminated; `out` must be writable.
enum PitlabStatus pitlab_model_load(const char *dir, struct PitlabModel **out);

// Saves a checkpoint into `dir`; fails if one is already there.
//
// # Safety
// `model` must be a live handle; `dir` must be NUL-terminated.
enum PitlabStatus pitlab_model_save(const struct PitlabModel *model, const char *dir);

// Parameter count, or 0 for a null handle.
//
// # Safety
// `model` must be a live handle or null.
uintptr_t pitlab_model_param_count(const struct PitlabModel *model);

// # Safety
// `model` must come from this library or be null; it is invalid afterwards.
void pitlab_model_free(struct PitlabModel *model);

// Run config JSON for a named preset. `options_json` may be null.
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum PitlabStatus pitlab_preset_config(const char *name, const char *options_json, char **out);

// Runs a curriculum from `base` (left untouched). `out_dir` may be null to
// skip checkpoints and files. On success `out_model` receives the trained
// model and `out_manifest` the run manifest as JSON; either may be null if
// not wanted.
//
// # Safety
// Handles must be live, strings null or NUL-terminated, and non-null
// out-parameters writable.
enum PitlabStatus pitlab_run(const struct PitlabModel *base,
                             const struct PitlabBundle *bundle,
                             const char *config_json,
                             const char *out_dir,
                             struct PitlabModel **out_model,
                             char **out_manifest);

// Exact match of greedy answers on the bundle's test QA. `mode` is 0 for
// closed-book and 1 for open-book.
//
// # Safety
// Handles must be live; `out_em` must be writable.
enum PitlabStatus pitlab_evaluate_test(const struct PitlabModel *model,
                                       const struct PitlabBundle *bundle,
                                       uint32_t mode,
                                       double *out_em);

// Scores one prediction: 1/0 exact match and recall, ROUGE-L F1.
//
// # Safety
// String arguments must be NUL-terminated; out-parameters writable.
enum PitlabStatus pitlab_score(const char *prediction,
                               const char *gold,
                               int32_t *out_exact,
                               int32_t *out_recall,
                               double *out_rouge_l);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PITLAB_H */
