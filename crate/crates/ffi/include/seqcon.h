#ifndef SEQCON_H
#define SEQCON_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum SeqconStatus {
  SEQCON_STATUS_OK = 0,
  SEQCON_STATUS_NULL_POINTER = 1,
  SEQCON_STATUS_INVALID_ARGUMENT = 2,
  SEQCON_STATUS_CONFIG = 3,
  SEQCON_STATUS_IO = 4,
  SEQCON_STATUS_FORMAT = 5,
  SEQCON_STATUS_NUMERIC = 6,
  SEQCON_STATUS_SHAPE = 7,
  SEQCON_STATUS_BUFFER_TOO_SMALL = 8,
  SEQCON_STATUS_INTERNAL = 9,
  SEQCON_STATUS_PANIC = 10,
} SeqconStatus;

// Trained (or initialized) encoder.
typedef struct SeqconEncoder SeqconEncoder;

// A feature file with its sidecar metadata.
typedef struct SeqconVideo SeqconVideo;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *seqcon_last_error(void);

// Library version as a static NUL-terminated string.
const char *seqcon_version(void);

// Loads an encoder from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeqconStatus seqcon_encoder_load(const char *path, struct SeqconEncoder **out);

// Creates a randomly initialized encoder from a JSON encoder config.
//
// # Safety
// `config_json` must be a NUL-terminated string and `out` a valid pointer.
enum SeqconStatus seqcon_encoder_init(const char *config_json,
                                      uint64_t seed,
                                      struct SeqconEncoder **out);

// # Safety
// `encoder` must come from this library and not be used afterwards.
void seqcon_encoder_free(struct SeqconEncoder *encoder);

// Feature width the encoder expects, or 0 for a null handle.
//
// # Safety
// `encoder` must be null or a live handle.
size_t seqcon_encoder_input_dim(const struct SeqconEncoder *encoder);

// Width of the frame-wise representations, or 0 for a null handle.
//
// # Safety
// `encoder` must be null or a live handle.
size_t seqcon_encoder_output_dim(const struct SeqconEncoder *encoder);

// Encodes `frames x input_dim` features into L2-normalized
// `frames x output_dim` representations written to `out`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum SeqconStatus seqcon_encoder_embed(const struct SeqconEncoder *encoder,
                                       const float *features,
                                       size_t frames,
                                       size_t dims,
                                       double *out,
                                       size_t out_capacity);

// Loads an `.fseq` feature file (and its JSON sidecar when present).
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum SeqconStatus seqcon_video_load(const char *path, struct SeqconVideo **out);

// # Safety
// `video` must come from this library and not be used afterwards.
void seqcon_video_free(struct SeqconVideo *video);

// # Safety
// `video` must be null or a live handle.
size_t seqcon_video_frames(const struct SeqconVideo *video);

// # Safety
// `video` must be null or a live handle.
size_t seqcon_video_dims(const struct SeqconVideo *video);

// Row-major `frames x dims` features owned by the handle, or null.
//
// # Safety
// `video` must be null or a live handle.
const float *seqcon_video_features(const struct SeqconVideo *video);

// Copies the per-frame phase labels into `out`.
//
// # Safety
// `out` must hold `capacity` elements.
enum SeqconStatus seqcon_video_phase_labels(const struct SeqconVideo *video,
                                            size_t *out,
                                            size_t capacity);

// Sequence contrastive loss of two views with raw-video timestamps. The
// gradient buffers may be null; otherwise they receive `dL/dz1` and
// `dL/dz2`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum SeqconStatus seqcon_scl_loss(const double *z1,
                                  size_t frames1,
                                  const double *z2,
                                  size_t frames2,
                                  size_t dims,
                                  const double *timestamps1,
                                  const double *timestamps2,
                                  double sigma2,
                                  double tau,
                                  double *loss_out,
                                  double *grad_z1,
                                  double *grad_z2);

// Row-normalized Gaussian prior over timestamp distances, `len1 x len2`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum SeqconStatus seqcon_gaussian_weights(const double *timestamps1,
                                          size_t len1,
                                          const double *timestamps2,
                                          size_t len2,
                                          double sigma2,
                                          double *out,
                                          size_t out_capacity);

// Cosine similarities between the rows of `a` and `b`, `rows_a x rows_b`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum SeqconStatus seqcon_cosine_similarity(const double *a,
                                           size_t rows_a,
                                           const double *b,
                                           size_t rows_b,
                                           size_t dims,
                                           double *out,
                                           size_t out_capacity);

// DTW on cost `1 - sim`. Path indices go to `path_i`/`path_j` (capacity
// `rows + cols - 1` always suffices), their count to `path_len`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum SeqconStatus seqcon_dtw_align(const double *sim,
                                   size_t rows,
                                   size_t cols,
                                   size_t *path_i,
                                   size_t *path_j,
                                   size_t path_capacity,
                                   size_t *path_len,
                                   double *cost_out);

// Kendall's tau between frame order in `emb1` and the order of its cosine
// nearest neighbors in `emb2`.
//
// # Safety
// Buffers must hold the stated number of elements.
enum SeqconStatus seqcon_kendalls_tau(const double *emb1,
                                      size_t frames1,
                                      const double *emb2,
                                      size_t frames2,
                                      size_t dims,
                                      double *tau_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEQCON_H */
