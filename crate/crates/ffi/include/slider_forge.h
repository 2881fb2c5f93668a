#ifndef SLIDER_FORGE_H
#define SLIDER_FORGE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result codes shared by every function that can fail.
typedef enum SfStatus {
  SF_STATUS_OK = 0,
  SF_STATUS_NULL_POINTER = 1,
  SF_STATUS_INVALID_ARGUMENT = 2,
  SF_STATUS_UNKNOWN_SLIDER = 3,
  SF_STATUS_CHECKPOINT = 4,
  SF_STATUS_CONFIG = 5,
  SF_STATUS_BUFFER_TOO_SMALL = 6,
  SF_STATUS_INTERNAL = 7,
  SF_STATUS_PANIC = 8,
} SfStatus;

// Opaque engine handle.
typedef struct SfEngine SfEngine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Creates an engine from TOML config text, or the default config when
// `config_toml` is null. Building the base model takes a few seconds.
//
// # Safety
// `config_toml` must be null or a valid nul-terminated string; `out` must be
// a valid pointer.
enum SfStatus sf_engine_new(const char *config_toml, struct SfEngine **out);

// Releases an engine. Null is ignored.
//
// # Safety
// `engine` must be null or a handle from `sf_engine_new` not yet freed.
void sf_engine_free(struct SfEngine *engine);

// Loads a slider checkpoint file into the engine's catalog.
//
// # Safety
// `engine` must be a live handle; `path` a valid nul-terminated string.
enum SfStatus sf_engine_load_slider(struct SfEngine *engine, const char *path);

// # Safety
// `engine` must be a live handle; `out` a valid pointer.
enum SfStatus sf_engine_slider_count(const struct SfEngine *engine, size_t *out);

// Number of `double`s in one generated image (channels × height × width).
//
// # Safety
// `engine` must be a live handle; `out` a valid pointer.
enum SfStatus sf_engine_sample_len(const struct SfEngine *engine, size_t *out);

// Generates `prompt` from `seed` with `n_sliders` sliders applied and
// writes the channel-major pixels to `out`. `steps` of 0 uses the config
// default. Returns `SF_STATUS_BUFFER_TOO_SMALL` when `out_len` is less than
// `sf_engine_sample_len`.
//
// # Safety
// `engine` must be a live handle, `prompt` a valid string, `names` and
// `scales` arrays of `n_sliders` entries (may be null when `n_sliders` is 0)
// and `out` a buffer of `out_len` doubles.
enum SfStatus sf_engine_generate(const struct SfEngine *engine,
                                 const char *prompt,
                                 uint64_t seed,
                                 size_t steps,
                                 const char *const *names,
                                 const double *scales,
                                 size_t n_sliders,
                                 double *out,
                                 size_t out_len);

// Evaluates the perceptual and triplet loss weights at step `t`.
//
// # Safety
// `out_perp` and `out_triplet` must be valid pointers.
enum SfStatus sf_loss_weights(uint64_t t,
                              uint64_t t0,
                              double steepness,
                              double *out_perp,
                              double *out_triplet);

// Message for the last failed call on this thread, or an empty string.
// Valid until the next `sf_*` call on this thread.
const char *sf_last_error_message(void);

// Library version as a static nul-terminated string.
const char *sf_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SLIDER_FORGE_H */
