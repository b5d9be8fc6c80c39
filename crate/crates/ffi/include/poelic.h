#ifndef POELIC_H
#define POELIC_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes. Values 2 to 6 match the command-line exit codes.
 */
typedef enum PoelicStatus {
  POELIC_STATUS_OK = 0,
  POELIC_STATUS_NULL_ARGUMENT = 1,
  POELIC_STATUS_INVALID_ARGUMENT = 2,
  POELIC_STATUS_IO = 3,
  POELIC_STATUS_CHECKPOINT = 4,
  POELIC_STATUS_BITSTREAM = 5,
  POELIC_STATUS_DATA = 6,
  POELIC_STATUS_PANIC = 7,
} PoelicStatus;

/**
 * Opaque codec handle.
 */
typedef struct PoelicCodec PoelicCodec;

/**
 * Bytes owned by the library.
 */
typedef struct PoelicBuffer {
  uint8_t *data;
  size_t len;
} PoelicBuffer;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Load a codec checkpoint from a NUL-terminated UTF-8 path.
 *
 * # Safety
 * `path` must be a valid C string and `out` a valid pointer.
 */
enum PoelicStatus poelic_codec_open(const char *path, struct PoelicCodec **out);

/**
 * Create an untrained codec: `scale` 0 is the toy model, 1 the full one.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum PoelicStatus poelic_codec_new_random(uint32_t scale, uint64_t seed, struct PoelicCodec **out);

/**
 * # Safety
 * `codec` must come from this library and not be used afterwards; null is
 * ignored.
 */
void poelic_codec_free(struct PoelicCodec *codec);

/**
 * Compress interleaved 8-bit RGB pixels (`3 * width * height` bytes, row
 * major) into `out`.
 *
 * # Safety
 * `pixels` must point to `3 * width * height` readable bytes; `codec` and
 * `out` must be valid.
 */
enum PoelicStatus poelic_compress_rgb8(const struct PoelicCodec *codec,
                                       const uint8_t *pixels,
                                       size_t width,
                                       size_t height,
                                       struct PoelicBuffer *out);

/**
 * Decode a stream into interleaved 8-bit RGB pixels.
 *
 * # Safety
 * `data` must point to `len` readable bytes; the other pointers must be
 * valid.
 */
enum PoelicStatus poelic_decompress_rgb8(const struct PoelicCodec *codec,
                                         const uint8_t *data,
                                         size_t len,
                                         struct PoelicBuffer *out_pixels,
                                         size_t *out_width,
                                         size_t *out_height);

/**
 * Release a buffer and reset it to empty. Safe to call twice.
 *
 * # Safety
 * `buf` must be null or point to a buffer filled by this library.
 */
void poelic_buffer_free(struct PoelicBuffer *buf);

/**
 * Message of the last failure on this thread, or null after a success.
 * The pointer stays valid until the next library call on this thread.
 */
const char *poelic_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POELIC_H */
