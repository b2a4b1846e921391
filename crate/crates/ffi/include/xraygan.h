#ifndef XRAYGAN_H
#define XRAYGAN_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every call.
 */
typedef enum XrgStatus {
  XRG_STATUS_OK = 0,
  XRG_STATUS_NULL_ARGUMENT = 1,
  XRG_STATUS_INVALID_ARGUMENT = 2,
  XRG_STATUS_IO = 3,
  XRG_STATUS_CHECKPOINT = 4,
  XRG_STATUS_SHAPE = 5,
  XRG_STATUS_EMPTY_REPORT = 6,
  XRG_STATUS_BUFFER_TOO_SMALL = 7,
  XRG_STATUS_INTERNAL = 8,
  XRG_STATUS_PANIC = 9,
} XrgStatus;

/**
 * Trained generator cascade with its encoder and vocabulary.
 */
typedef struct XrgModel XrgModel;

/**
 * Stage view-consistency network.
 */
typedef struct XrgVcn XrgVcn;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Name of a status code, as a static NUL-terminated string.
 */
const char *xrg_status_name(enum XrgStatus status);

/**
 * Library version, as a static NUL-terminated string.
 */
const char *xrg_version(void);

/**
 * Copies the calling thread's last error message into `buf` (NUL-terminated,
 * truncated to `len`). Returns the full message length plus one, so a
 * zero-length call sizes the buffer.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t xrg_last_error_message(char *buf, size_t len);

/**
 * Loads a training checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum XrgStatus xrg_model_load(const char *path, struct XrgModel **out);

/**
 * Releases a model; null is ignored.
 *
 * # Safety
 * `model` must come from [`xrg_model_load`] and not be used afterwards.
 */
void xrg_model_free(struct XrgModel *model);

/**
 * Side length of generated images, and the number of stages trained so far.
 *
 * # Safety
 * `model` must be a live handle; `side` and `completed_stages` must be writable or null.
 */
enum XrgStatus xrg_model_resolution(const struct XrgModel *model,
                                    size_t *side,
                                    size_t *completed_stages);

/**
 * Generates both views for a report. `frontal` and `lateral` receive
 * `len` doubles each; `len` must be at least `side * side`.
 *
 * # Safety
 * `model` must be live, `report` NUL-terminated, the buffers `len` doubles long.
 */
enum XrgStatus xrg_model_generate_pair(const struct XrgModel *model,
                                       const char *report,
                                       double *frontal,
                                       double *lateral,
                                       size_t len);

/**
 * Loads a VCN checkpoint. On success `*out` owns a new handle.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum XrgStatus xrg_vcn_load(const char *path, struct XrgVcn **out);

/**
 * Releases a VCN; null is ignored.
 *
 * # Safety
 * `vcn` must come from [`xrg_vcn_load`] and not be used afterwards.
 */
void xrg_vcn_free(struct XrgVcn *vcn);

/**
 * Input side length the VCN expects.
 *
 * # Safety
 * `vcn` must be live and `side` writable.
 */
enum XrgStatus xrg_vcn_resolution(const struct XrgVcn *vcn, size_t *side);

/**
 * Consistency probability of a frontal/lateral pair of `side x side` images.
 *
 * # Safety
 * `vcn` must be live; the image pointers must hold `side * side` doubles; `out` writable.
 */
enum XrgStatus xrg_vcn_score(const struct XrgVcn *vcn,
                             const double *frontal,
                             const double *lateral,
                             size_t side,
                             double *out);

/**
 * Mean SSIM of two `side x side` images with pixels in `[-1, 1]`.
 *
 * # Safety
 * `a` and `b` must hold `side * side` doubles; `out` must be writable.
 */
enum XrgStatus xrg_ssim(const double *a, const double *b, size_t side, double *out);

/**
 * Fréchet distance between two feature sets, each row-major `n x dim`.
 *
 * # Safety
 * `a` must hold `na * dim` doubles, `b` `nb * dim`; `out` must be writable.
 */
enum XrgStatus xrg_fid(const double *a,
                       size_t na,
                       const double *b,
                       size_t nb,
                       size_t dim,
                       double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* XRAYGAN_H */
