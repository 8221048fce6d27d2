#ifndef TRAJEPA_H
#define TRAJEPA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible call. The numeric values match
 * the CLI exit-code contract.
 */
typedef enum TjpStatus {
  TjpStatus_Ok = 0,
  TjpStatus_ConfigError = 1,
  TjpStatus_DataError = 2,
  TjpStatus_TrainingDiverged = 3,
  TjpStatus_EvaluationError = 4,
  TjpStatus_NullArgument = 5,
  TjpStatus_BufferTooSmall = 6,
  TjpStatus_Panic = 7,
} TjpStatus;

/**
 * Opaque experiment configuration.
 */
typedef struct TjpConfig TjpConfig;

/**
 * Opaque pipeline handle bound to a run directory (holds its lock).
 */
typedef struct TjpPipeline TjpPipeline;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version string; static storage, do not free.
 */
const char *tjp_version(void);

/**
 * Message for the last error on this thread; valid until the next failing
 * call on the same thread. Do not free.
 */
const char *tjp_last_error_message(void);

/**
 * Load a configuration. `path` may be null for pure preset defaults;
 * `preset` is "desk" or "appendix-b" (null means "desk").
 *
 * # Safety
 * `path` and `preset` must be null or valid NUL-terminated strings; `out`
 * must be a valid pointer.
 */
enum TjpStatus tjp_config_load(const char *path, const char *preset, struct TjpConfig **out);

/**
 * Override the config seed.
 *
 * # Safety
 * `cfg` must be a live handle from `tjp_config_load`.
 */
enum TjpStatus tjp_config_set_seed(struct TjpConfig *cfg, uint64_t seed);

/**
 * Canonical config hash; `buf` receives a NUL-terminated hex string.
 *
 * # Safety
 * `cfg` must be a live handle; `buf` must hold at least `cap` bytes.
 */
enum TjpStatus tjp_config_hash(const struct TjpConfig *cfg, char *buf, uintptr_t cap);

/**
 * # Safety
 * `cfg` must come from `tjp_config_load` and not be freed twice.
 */
void tjp_config_free(struct TjpConfig *cfg);

/**
 * Open a pipeline on a run directory (acquires the directory lock).
 *
 * # Safety
 * `cfg` must be a live config handle; `out_dir` a valid string; `out` a
 * valid pointer.
 */
enum TjpStatus tjp_pipeline_open(const struct TjpConfig *cfg,
                                 const char *out_dir,
                                 struct TjpPipeline **out);

/**
 * # Safety
 * `p` must come from `tjp_pipeline_open` and not be freed twice.
 */
void tjp_pipeline_free(struct TjpPipeline *p);

/**
 * Generate the synthetic dataset and splits (cached).
 *
 * # Safety
 * `p` must be a live pipeline handle.
 */
enum TjpStatus tjp_generate_data(const struct TjpPipeline *p);

/**
 * Run the shared encoder initialization pretraining (cached).
 *
 * # Safety
 * `p` must be a live pipeline handle.
 */
enum TjpStatus tjp_pretrain_init(const struct TjpPipeline *p);

/**
 * Train one paradigm by name ("clin_jepa", "vjepa2ac_style", "sft_only",
 * "no_warmup", "no_alignment").
 *
 * # Safety
 * `p` must be a live pipeline handle; `paradigm` a valid string.
 */
enum TjpStatus tjp_train(const struct TjpPipeline *p, const char *paradigm);

/**
 * Execute every stage and emit the report bundle; `format` is "tables",
 * "plots", or "all" (null means "all").
 *
 * # Safety
 * `p` must be a live pipeline handle; `format` null or a valid string.
 */
enum TjpStatus tjp_run_all(const struct TjpPipeline *p, const char *format);

/**
 * Bundle hash of a completed run; `buf` receives a NUL-terminated hex
 * string.
 *
 * # Safety
 * `p` must be a live pipeline handle; `buf` must hold at least `cap` bytes.
 */
enum TjpStatus tjp_bundle_hash(const struct TjpPipeline *p, char *buf, uintptr_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* TRAJEPA_H */
