#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes returned by every fallible function.
 */
typedef enum NipStatus {
  NIP_STATUS_OK = 0,
  NIP_STATUS_NULL_POINTER = 1,
  NIP_STATUS_INVALID_ARGUMENT = 2,
  NIP_STATUS_BUFFER_TOO_SMALL = 3,
  NIP_STATUS_IO = 4,
  NIP_STATUS_SHAPE = 5,
  NIP_STATUS_VALIDATION = 6,
  NIP_STATUS_NOT_FOUND = 7,
  NIP_STATUS_CORRUPT = 8,
  NIP_STATUS_PARSE = 9,
  NIP_STATUS_DOMAIN = 10,
  NIP_STATUS_DIM = 11,
  NIP_STATUS_DEGENERATE_DATA = 12,
  NIP_STATUS_NUMERICAL_DIVERGENCE = 13,
  NIP_STATUS_METRIC = 14,
  NIP_STATUS_CONFIG = 15,
  NIP_STATUS_PANIC = 16,
} NipStatus;

/**
 * Trained hash model with its input preprocessing.
 */
typedef struct NipHasher NipHasher;

/**
 * Packed binary codes ready for linear-scan search.
 */
typedef struct NipIndex NipIndex;

/**
 * Opened orbit store.
 */
typedef struct NipStore NipStore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *nip_version(void);

/**
 * Message of the last failed call on this thread, or NULL after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *nip_last_error(void);

/**
 * Power mean of `len` non-negative values. `order` is the moment order
 * (1 = average, 2 = root mean square) or `UINT32_MAX` for the max.
 *
 * # Safety
 * `values` must point to `len` readable doubles and `out` to one writable double.
 */
enum NipStatus nip_moment_pool(const double *values, uintptr_t len, uint32_t order, double *out);

/**
 * Pools one orbit tensor given as a dense row-major float array of shape
 * `dims = {rotations, scales, channels, height, width}`. `sequence` is a
 * pooling string such as `"A_S,S_T,M_R"`. The descriptor is written to
 * `out` when `capacity` suffices; `out_len` receives its length either way.
 *
 * # Safety
 * `data` must hold the product of `dims` floats, `dims` five sizes, `out`
 * `capacity` doubles.
 */
enum NipStatus nip_pool_orbit(const float *data,
                              const uintptr_t *dims,
                              const char *sequence,
                              double *out,
                              uintptr_t capacity,
                              uintptr_t *out_len);

/**
 * Opens an orbit store file.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum NipStatus nip_store_open(const char *path, struct NipStore **out);

/**
 * # Safety
 * `store` must come from [`nip_store_open`] and not be used afterwards.
 */
void nip_store_free(struct NipStore *store);

/**
 * Number of images in the store, 0 for NULL.
 *
 * # Safety
 * `store` must be NULL or a live handle.
 */
uintptr_t nip_store_len(const struct NipStore *store);

/**
 * Pools the orbit of `image_id` like [`nip_pool_orbit`]; `l2_normalize`
 * rescales the result to unit length.
 *
 * # Safety
 * `store` must be a live handle, strings NUL-terminated, `out` `capacity`
 * doubles.
 */
enum NipStatus nip_store_pool(const struct NipStore *store,
                              const char *image_id,
                              const char *sequence,
                              bool l2_normalize,
                              double *out,
                              uintptr_t capacity,
                              uintptr_t *out_len);

/**
 * Loads a hash model written by `nip fit-hash`.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum NipStatus nip_hasher_open(const char *path, struct NipHasher **out);

/**
 * # Safety
 * `hasher` must come from [`nip_hasher_open`] and not be used afterwards.
 */
void nip_hasher_free(struct NipHasher *hasher);

/**
 * Descriptor length the model expects, 0 for NULL.
 *
 * # Safety
 * `hasher` must be NULL or a live handle.
 */
uintptr_t nip_hasher_input_dim(const struct NipHasher *hasher);

/**
 * Code length in bits, 0 for NULL.
 *
 * # Safety
 * `hasher` must be NULL or a live handle.
 */
uintptr_t nip_hasher_n_bits(const struct NipHasher *hasher);

/**
 * Hashes one descriptor into `ceil(n_bits / 8)` bytes, bit `j` at
 * `out[j / 8] >> (j % 8)`.
 *
 * # Safety
 * `hasher` must be a live handle, `values` `len` doubles, `out` `capacity` bytes.
 */
enum NipStatus nip_hasher_hash(const struct NipHasher *hasher,
                               const double *values,
                               uintptr_t len,
                               uint8_t *out,
                               uintptr_t capacity,
                               uintptr_t *out_len);

/**
 * Hamming distance between two packed codes of `len` bytes.
 *
 * # Safety
 * `a` and `b` must each point to `len` readable bytes.
 */
enum NipStatus nip_hamming(const uint8_t *a, const uint8_t *b, uintptr_t len, uint32_t *out);

/**
 * Loads a hash code file written by `nip hash` as a search index.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable handle slot.
 */
enum NipStatus nip_index_open(const char *path, struct NipIndex **out);

/**
 * # Safety
 * `index` must come from [`nip_index_open`] and not be used afterwards.
 */
void nip_index_free(struct NipIndex *index);

/**
 * Number of codes, 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
uintptr_t nip_index_len(const struct NipIndex *index);

/**
 * Code length in bits, 0 for NULL.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
uintptr_t nip_index_n_bits(const struct NipIndex *index);

/**
 * Image id at database position `pos`, or NULL when out of range. Owned by
 * the index.
 *
 * # Safety
 * `index` must be NULL or a live handle.
 */
const char *nip_index_id(const struct NipIndex *index, uintptr_t pos);

/**
 * Ranks the whole database against a packed query code by ascending
 * Hamming distance, ties by ascending image id. `exclude_id` (may be NULL)
 * is left out of the ranking. Database positions go to `positions` and
 * distances to `distances` (may be NULL); `out_len` receives the ranking
 * length.
 *
 * # Safety
 * `index` must be a live handle, `query` `query_len` bytes, and both output
 * arrays `capacity` elements.
 */
enum NipStatus nip_index_rank(const struct NipIndex *index,
                              const uint8_t *query,
                              uintptr_t query_len,
                              const char *exclude_id,
                              uint32_t *positions,
                              uint32_t *distances,
                              uintptr_t capacity,
                              uintptr_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus
