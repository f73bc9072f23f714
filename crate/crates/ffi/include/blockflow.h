#ifndef BLOCKFLOW_H
#define BLOCKFLOW_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define BF_OK 0

#define BF_ERR_GENERIC 1

#define BF_ERR_CONFIG 2

#define BF_ERR_DIVERGENCE 3

#define BF_ERR_INTEGRITY 4

#define BF_ERR_ARGUMENT 5

#define BF_ERR_NULL 6

#define BF_ERR_IO 7

#define BF_ERR_FORMAT 8

#define BF_ERR_PANIC 9

// Labeled point set.
typedef struct BfDataset BfDataset;

// Trained model: velocity net, prior and optional encoder.
typedef struct BfModel BfModel;

// Per-label Gaussian prior.
typedef struct BfPrior BfPrior;

typedef struct BfVarianceReport {
  double total;
  double within;
  double between;
  double ratio;
  bool degenerate;
  bool collapsed;
} BfVarianceReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL-terminated,
// truncated to `len - 1` bytes). Returns the full message length in bytes.
//
// # Safety
// `buf` must be null or valid for `len` bytes.
size_t bf_last_error_message(char *buf, size_t len);

// Loads a checkpoint file, verifying its payload hash.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be valid for one write.
int32_t bf_model_load(const char *path, struct BfModel **out);

// # Safety
// `model` must be null or a handle from `bf_model_load` not yet freed.
void bf_model_free(struct BfModel *model);

// # Safety
// `model` must be a live handle; out-pointers must be valid for one write.
int32_t bf_model_shape(const struct BfModel *model, size_t *dim, size_t *num_labels);

// Euler sampling with `n_steps` steps. `label < 0` draws labels from the prior's
// label weights. Writes `n * dim` coordinates to `xs` and `n` labels to `labels`
// (which may be null).
//
// # Safety
// `xs` must hold `n * dim` doubles, `labels` (if non-null) `n` entries.
int32_t bf_model_sample(const struct BfModel *model,
                        size_t n_steps,
                        size_t n,
                        int64_t label,
                        uint64_t seed,
                        double *xs,
                        size_t *labels,
                        double *mean_nfe);

// Network-substituted curvature over `k` Euler trajectories of `n_steps` steps.
//
// # Safety
// `model` must be a live handle; `out` valid for one write.
int32_t bf_model_curvature(const struct BfModel *model,
                           size_t k,
                           size_t n_steps,
                           uint64_t seed,
                           double *out);

// Copies the model's prior into a new handle.
//
// # Safety
// `model` must be a live handle; `out` valid for one write.
int32_t bf_model_prior(const struct BfModel *model, struct BfPrior **out);

// Builds a prior from row-major `mu` and `log_sigma` (`num_labels * dim` each)
// and `num_labels` label weights.
//
// # Safety
// Input arrays must hold the stated number of doubles; `out` valid for one write.
int32_t bf_prior_new(size_t num_labels,
                     size_t dim,
                     const double *mu,
                     const double *log_sigma,
                     const double *weights,
                     struct BfPrior **out);

// # Safety
// `prior` must be null or a live handle.
void bf_prior_free(struct BfPrior *prior);

// # Safety
// `prior` must be a live handle; `out` valid for one write.
int32_t bf_prior_variance(const struct BfPrior *prior, struct BfVarianceReport *out);

// Mixture mean (`dim` doubles) and row-major covariance (`dim * dim` doubles).
//
// # Safety
// `mean` and `cov` must hold the stated number of doubles.
int32_t bf_prior_moments(const struct BfPrior *prior, double *mean, double *cov);

// Two isotropic Gaussian blocks at (-3, 0) and (3, 0).
//
// # Safety
// `out` must be valid for one write.
int32_t bf_dataset_two_blocks(size_t n_per_block,
                              double spread,
                              uint64_t seed,
                              struct BfDataset **out);

// `k * k` Gaussian blocks on a grid spanning `[-box_half, box_half]²`.
//
// # Safety
// `out` must be valid for one write.
int32_t bf_dataset_gaussian_grid(size_t k,
                                 size_t n_per_block,
                                 double box_half,
                                 double spread,
                                 uint64_t seed,
                                 struct BfDataset **out);

// # Safety
// `ds` must be null or a live handle.
void bf_dataset_free(struct BfDataset *ds);

// # Safety
// `ds` must be a live handle; out-pointers valid for one write.
int32_t bf_dataset_shape(const struct BfDataset *ds, size_t *len, size_t *dim, size_t *num_labels);

// Copies samples (`len * dim` doubles, row-major) and labels (`len` entries).
//
// # Safety
// Buffers must hold the stated number of entries; `labels` may be null.
int32_t bf_dataset_copy(const struct BfDataset *ds, double *xs, size_t *labels);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BLOCKFLOW_H */
