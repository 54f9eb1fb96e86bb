#ifndef GVF_H
#define GVF_H

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call. Values 10 to 16 match the CLI's exit codes.
 */
typedef enum {
  GVF_STATUS_OK = 0,
  /**
   * A pointer was null or a string was not UTF-8.
   */
  GVF_STATUS_INVALID_ARG = 1,
  /**
   * The library panicked. The handle should not be reused.
   */
  GVF_STATUS_INTERNAL = 2,
  GVF_STATUS_E_PERM = 10,
  GVF_STATUS_E_NOENT = 11,
  GVF_STATUS_E_EXISTS = 12,
  GVF_STATUS_E_NOSPACE = 13,
  GVF_STATUS_E_PINNED = 14,
  GVF_STATUS_E_BADREQ = 15,
  GVF_STATUS_E_UNAVAIL = 16,
} GvfStatus;

/**
 * Opaque client bound to one deployment and one subject.
 */
typedef struct GvfClient GvfClient;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Opens a client from a deployment file. A null `subject` acts as the
 * federation service identity; a null `token` is derived from the
 * deployment secret. Free with `gvf_client_free`.
 *
 * # Safety
 * String arguments must be null or NUL-terminated. `out_client` must be writable.
 */
GvfStatus gvf_client_open(const char *config_path,
                          const char *subject,
                          const char *token,
                          GvfClient **out_client);

/**
 * # Safety
 * `client` must come from `gvf_client_open` and not be used afterwards. Null is ignored.
 */
void gvf_client_free(GvfClient *client);

/**
 * Stores `len` bytes under `dataname` through the broker at `site`
 * (null for the master).
 *
 * # Safety
 * `data` must point to `len` readable bytes (or be null with `len == 0`).
 */
GvfStatus gvf_put(const GvfClient *client,
                  const char *site,
                  const char *dataname,
                  const uint8_t *data,
                  size_t len);

/**
 * Reads `dataname` through the broker at `site` (null for the master).
 * The bytes are returned in `*out_buf`, to be released with `gvf_buffer_free`.
 *
 * # Safety
 * `out_buf` and `out_len` must be writable.
 */
GvfStatus gvf_get(const GvfClient *client,
                  const char *site,
                  const char *dataname,
                  uint8_t **out_buf,
                  size_t *out_len);

/**
 * # Safety
 * String arguments must be null or NUL-terminated.
 */
GvfStatus gvf_rm(const GvfClient *client, const char *site, const char *dataname);

/**
 * Fetches `dataname` through the deployment's gateway using `cache-http`.
 * A request that ends failed returns its error code.
 *
 * # Safety
 * `out_buf` and `out_len` must be writable.
 */
GvfStatus gvf_srm_get(const GvfClient *client,
                      const char *dataname,
                      uint8_t **out_buf,
                      size_t *out_len);

/**
 * Looks `dataname` up in the replica location service. No credential is
 * sent. `*out_json` receives `{"guid": ..., "surls": [...]}`; release it
 * with `gvf_string_free`.
 *
 * # Safety
 * `out_json` must be writable.
 */
GvfStatus gvf_rls_lookup(const GvfClient *client, const char *dataname, char **out_json);

/**
 * Writes the GUID a dataname is published under. Release with `gvf_string_free`.
 *
 * # Safety
 * `dataname` must be NUL-terminated; `out_guid` must be writable.
 */
GvfStatus gvf_derive_guid(const char *dataname, char **out_guid);

/**
 * Writes the proof token for `subject` under `secret`. Release with `gvf_string_free`.
 *
 * # Safety
 * Both strings must be NUL-terminated; `out_token` must be writable.
 */
GvfStatus gvf_proof_token(const char *secret, const char *subject, char **out_token);

/**
 * Message for the last failed call on this thread, or null. Valid until the
 * next call on the same thread.
 */
const char *gvf_last_error(void);

/**
 * Static name of a status, such as `"E_PERM"`.
 */
const char *gvf_status_name(GvfStatus status);

/**
 * # Safety
 * `buf` and `len` must come from one call of this library. Null is ignored.
 */
void gvf_buffer_free(uint8_t *buf, size_t len);

/**
 * # Safety
 * `s` must come from this library. Null is ignored.
 */
void gvf_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GVF_H */
