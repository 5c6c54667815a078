#ifndef STREAMFX_H
#define STREAMFX_H

#pragma once

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes.
 */
typedef enum SfxStatus {
  SFX_STATUS_OK = 0,
  SFX_STATUS_NULL_POINTER = 1,
  SFX_STATUS_INVALID_ARGUMENT = 2,
  SFX_STATUS_IO = 3,
  SFX_STATUS_FORMAT = 4,
  SFX_STATUS_SHAPE = 5,
  SFX_STATUS_SESSION = 6,
  SFX_STATUS_PANIC = 7,
  SFX_STATUS_INTERNAL = 8,
} SfxStatus;

/**
 * Loaded model weights.
 */
typedef struct SfxModel SfxModel;

/**
 * One streaming session.
 */
typedef struct SfxSession SfxSession;

/**
 * Chunk layout: `c_frames × height × width × channels` floats, row-major.
 */
typedef struct SfxGeometry {
  size_t c_frames;
  size_t height;
  size_t width;
  size_t channels;
  size_t n_effect_labels;
} SfxGeometry;

typedef struct SfxStats {
  size_t chunks;
  double mean_ms;
  double max_ms;
  double p95_ms;
  double fps;
} SfxStats;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread; empty after success.
 * The pointer stays valid until the next call into this library on the
 * same thread.
 */
const char *sfx_last_error_message(void);

/**
 * Load a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum SfxStatus sfx_model_load(const char *path, struct SfxModel **out);

/**
 * # Safety
 * `model` must be null or a handle from [`sfx_model_load`] not yet freed.
 */
void sfx_model_free(struct SfxModel *model);

/**
 * # Safety
 * `model` must be a live handle; `out` must be writable.
 */
enum SfxStatus sfx_model_geometry(const struct SfxModel *model, struct SfxGeometry *out);

/**
 * Open a session. `effect_label < 0` means no label; a null `reference`
 * means no reference frame (`height × width × channels` floats otherwise).
 *
 * # Safety
 * `model` must be a live handle, `reference` null or readable for
 * `reference_len` floats, `out` writable.
 */
enum SfxStatus sfx_session_open(const struct SfxModel *model,
                                size_t window,
                                size_t steps,
                                double cfg_scale,
                                int32_t effect_label,
                                const float *reference,
                                size_t reference_len,
                                uint64_t seed,
                                struct SfxSession **out);

/**
 * Queue a condition change for the next chunk. `effect_label < 0` and a
 * null `reference` leave that part unchanged.
 *
 * # Safety
 * `session` must be a live handle; `reference` null or readable for
 * `reference_len` floats.
 */
enum SfxStatus sfx_session_set_condition(struct SfxSession *session,
                                         int32_t effect_label,
                                         const float *reference,
                                         size_t reference_len);

/**
 * Edit one source chunk. `frames` and `out` each hold one chunk of floats;
 * `chunk_ms` may be null.
 *
 * # Safety
 * `session` must be a live handle; `frames` readable and `out` writable for
 * their lengths; `chunk_ms` null or writable.
 */
enum SfxStatus sfx_session_push_chunk(struct SfxSession *session,
                                      const float *frames,
                                      size_t frames_len,
                                      float *out,
                                      size_t out_len,
                                      double *chunk_ms);

/**
 * Finish the session and report latency; repeated calls return the same
 * numbers. The handle still needs [`sfx_session_free`].
 *
 * # Safety
 * `session` must be a live handle; `out` null or writable.
 */
enum SfxStatus sfx_session_close(struct SfxSession *session, struct SfxStats *out);

/**
 * # Safety
 * `session` must be null or a live handle.
 */
void sfx_session_free(struct SfxSession *session);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STREAMFX_H */
