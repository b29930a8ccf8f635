/* C ABI for the mama pipeline. Opaque handles, status codes, UTF-8 paths. */

#ifndef MAMA_H
#define MAMA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result codes returned by every API call.
 */
typedef enum MamaStatus {
  MAMA_STATUS_OK = 0,
  MAMA_STATUS_NULL_POINTER = 1,
  MAMA_STATUS_INVALID_UTF8 = 2,
  MAMA_STATUS_INVALID_ARGUMENT = 3,
  MAMA_STATUS_IO = 4,
  MAMA_STATUS_NUMERIC = 5,
  MAMA_STATUS_VERSION_MISMATCH = 6,
  MAMA_STATUS_BUFFER_TOO_SMALL = 7,
  MAMA_STATUS_INTERNAL = 8,
} MamaStatus;

/**
 * Opaque configuration handle.
 */
typedef struct MamaConfig MamaConfig;

/**
 * Opaque encoder handle holding a loaded checkpoint.
 */
typedef struct MamaEncoder MamaEncoder;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *mama_version(void);

/**
 * Copy the current thread's last error message into `buf` (NUL-terminated,
 * truncated to `cap`). Returns the full message length in bytes.
 *
 * # Safety
 * `buf` must point to at least `cap` writable bytes, or be null with
 * `cap == 0` to query the length.
 */
uintptr_t mama_last_error(char *buf, uintptr_t cap);

/**
 * Create a configuration from a preset name ("desk" or "full").
 * Returns null on error.
 *
 * # Safety
 * `preset` must be a valid NUL-terminated string.
 */
struct MamaConfig *mama_config_new(const char *preset);

/**
 * Apply a config file on top of the current configuration.
 *
 * # Safety
 * `cfg` must come from `mama_config_new`; `path` must be a valid string.
 */
enum MamaStatus mama_config_apply_file(struct MamaConfig *cfg, const char *path);

/**
 * Set one `section.key` to a value, both given as strings.
 *
 * # Safety
 * `cfg` must come from `mama_config_new`; strings must be valid.
 */
enum MamaStatus mama_config_set(struct MamaConfig *cfg,
                                const char *section,
                                const char *key,
                                const char *value);

/**
 * Override every module seed at once.
 *
 * # Safety
 * `cfg` must come from `mama_config_new`.
 */
enum MamaStatus mama_config_override_seed(struct MamaConfig *cfg, uint64_t seed);

/**
 * Render the effective configuration into `buf` (NUL-terminated,
 * truncated). Writes the full length to `len_out` when non-null.
 *
 * # Safety
 * `cfg` from `mama_config_new`; `buf` points to `cap` writable bytes.
 */
enum MamaStatus mama_config_render(const struct MamaConfig *cfg,
                                   char *buf,
                                   uintptr_t cap,
                                   uintptr_t *len_out);

/**
 * # Safety
 * `cfg` must come from `mama_config_new` and not be freed twice.
 */
void mama_config_free(struct MamaConfig *cfg);

/**
 * Generate the synthetic dataset into `out_dir`.
 *
 * # Safety
 * `cfg` from `mama_config_new`; `out_dir` a valid string.
 */
enum MamaStatus mama_synth(const struct MamaConfig *cfg, const char *out_dir);

/**
 * Pre-train on the dataset in `data_dir`, writing checkpoint and metrics
 * into `out_dir`.
 *
 * # Safety
 * `cfg` from `mama_config_new`; paths valid strings.
 */
enum MamaStatus mama_pretrain(const struct MamaConfig *cfg,
                              const char *data_dir,
                              const char *out_dir);

/**
 * Evaluate a checkpoint. `mode` is "zeroshot", "probe" or "finetune";
 * `fraction` <= 0 keeps the configured value.
 *
 * # Safety
 * `cfg` from `mama_config_new`; paths and `mode` valid strings.
 */
enum MamaStatus mama_eval(const struct MamaConfig *cfg,
                          const char *data_dir,
                          const char *checkpoint_dir,
                          const char *out_dir,
                          const char *mode,
                          double fraction,
                          double *bacc_out);

/**
 * Dump captions for every record to a CSV file. `style` is "structured",
 * "clip" or "tabular"; `mask_prob` < 0 keeps the configured value.
 *
 * # Safety
 * `cfg` from `mama_config_new`; paths and `style` valid strings.
 */
enum MamaStatus mama_captions(const struct MamaConfig *cfg,
                              const char *data_dir,
                              const char *out_csv,
                              const char *style,
                              double mask_prob);

/**
 * Export similarity maps for test images. `format` is "csv" or "pgm".
 *
 * # Safety
 * `cfg` from `mama_config_new`; paths and `format` valid strings.
 */
enum MamaStatus mama_simmap(const struct MamaConfig *cfg,
                            const char *data_dir,
                            const char *checkpoint_dir,
                            const char *out_dir,
                            uintptr_t sentence_index,
                            const char *format,
                            uintptr_t count);

/**
 * Load an encoder from a checkpoint directory. Returns null on error.
 *
 * # Safety
 * `checkpoint_dir` must be a valid string.
 */
struct MamaEncoder *mama_encoder_load(const char *checkpoint_dir);

/**
 * Embedding dimension of a loaded encoder; 0 for a null handle.
 *
 * # Safety
 * `enc` from `mama_encoder_load` or null.
 */
uintptr_t mama_encoder_embed_dim(const struct MamaEncoder *enc);

/**
 * Expected square image side; 0 for a null handle.
 *
 * # Safety
 * `enc` from `mama_encoder_load` or null.
 */
uintptr_t mama_encoder_image_size(const struct MamaEncoder *enc);

/**
 * Encode an image file (PGM or grayscale PNG) into a unit-norm global
 * embedding of `mama_encoder_embed_dim` floats.
 *
 * # Safety
 * `enc` from `mama_encoder_load`; `path` valid; `out` points to `cap`
 * writable floats.
 */
enum MamaStatus mama_encode_image_file(const struct MamaEncoder *enc,
                                       const char *path,
                                       float *out,
                                       uintptr_t cap);

/**
 * Encode raw grayscale pixels in [0, 1], row-major, width*height floats.
 *
 * # Safety
 * `enc` from `mama_encoder_load`; `pixels` points to width*height floats;
 * `out` points to `cap` writable floats.
 */
enum MamaStatus mama_encode_image_pixels(const struct MamaEncoder *enc,
                                         const float *pixels,
                                         uintptr_t width,
                                         uintptr_t height,
                                         float *out,
                                         uintptr_t cap);

/**
 * Encode UTF-8 text (sentence-split and tokenized internally) into a
 * unit-norm global embedding.
 *
 * # Safety
 * `enc` from `mama_encoder_load`; `text` valid; `out` points to `cap`
 * writable floats.
 */
enum MamaStatus mama_encode_text(const struct MamaEncoder *enc,
                                 const char *text,
                                 float *out,
                                 uintptr_t cap);

/**
 * # Safety
 * `enc` must come from `mama_encoder_load` and not be freed twice.
 */
void mama_encoder_free(struct MamaEncoder *enc);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* MAMA_H */
