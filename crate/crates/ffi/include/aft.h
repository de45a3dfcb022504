#ifndef AFT_H
#define AFT_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum AftStatus {
  AFT_STATUS_OK = 0,
  AFT_STATUS_NULL_POINTER = 1,
  AFT_STATUS_INVALID_ARGUMENT = 2,
  AFT_STATUS_DIMENSION = 3,
  AFT_STATUS_BATCH_SIZE = 4,
  AFT_STATUS_FORMAT = 5,
  AFT_STATUS_IO = 6,
  AFT_STATUS_MANIFEST = 7,
  AFT_STATUS_CONFIG = 8,
  AFT_STATUS_INPUT = 9,
  AFT_STATUS_NON_FINITE = 10,
  AFT_STATUS_STATE = 11,
  AFT_STATUS_AGGREGATION = 12,
  AFT_STATUS_PANIC = 13,
} AftStatus;

typedef enum AftKernel {
  AFT_KERNEL_LINEAR = 0,
  AFT_KERNEL_RBF = 1,
} AftKernel;

typedef struct AftDataset AftDataset;

typedef struct AftMatrix AftMatrix;

typedef struct AftRun AftRun;

// Parameters of the planted synthetic task.
typedef struct AftSynthSpec {
  size_t n_examples;
  size_t d_signal;
  size_t d_distractor;
  size_t d_noise;
  size_t n_classes;
  double label_temperature;
  uint64_t seed;
} AftSynthSpec;

// Training options. With `select_beta` set, β is chosen on the holdout
// split from the method's default grid and `beta` is ignored.
typedef struct AftTrainOptions {
  size_t steps;
  size_t batch_size;
  uint64_t seed;
  double lr_theta;
  double lr_mu;
  double beta;
  bool select_beta;
} AftTrainOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *aft_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *aft_version(void);

// Creates a `rows × cols` matrix from row-major `data`, or zeros when
// `data` is null.
//
// # Safety
// `data`, when non-null, must point to `rows * cols` doubles; `out` must be
// writable.
enum AftStatus aft_matrix_new(size_t rows, size_t cols, const double *data, struct AftMatrix **out);

// # Safety
// `m` must be null or a handle from this library, not yet freed.
void aft_matrix_free(struct AftMatrix *m);

// Row count; 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t aft_matrix_rows(const struct AftMatrix *m);

// Column count; 0 for a null handle.
//
// # Safety
// `m` must be null or a live handle.
size_t aft_matrix_cols(const struct AftMatrix *m);

// Copies the row-major values into `buf`, which must hold exactly `len`
// (= rows · cols) doubles.
//
// # Safety
// `buf` must be writable for `len` doubles.
enum AftStatus aft_matrix_copy(const struct AftMatrix *m, double *buf, size_t len);

// Reads a feature file.
//
// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum AftStatus aft_features_read(const char *path_, struct AftMatrix **out);

// Writes a feature file (values narrowed to f32).
//
// # Safety
// `m` must be a live handle and `path` a NUL-terminated string.
enum AftStatus aft_features_write(const struct AftMatrix *m, const char *path_);

// Mini-batch kernel distance between `phi` (B × d_φ) and `psi` (B × d_ψ).
// `mu_logits` holds `d_ψ` logits `s`, weighting ψ by `σ(s)`; null means
// the identity.
//
// # Safety
// `phi`, `psi` must be live handles; `mu_logits`, when non-null, must hold
// `n_logits` doubles; `out` must be writable.
enum AftStatus aft_kernel_distance(const struct AftMatrix *phi,
                                   const struct AftMatrix *psi,
                                   const double *mu_logits,
                                   size_t n_logits,
                                   enum AftKernel kernel,
                                   double *out);

// Generates the planted synthetic task with the standard splits.
//
// # Safety
// `spec` must point to a valid spec; `out` must be writable.
enum AftStatus aft_dataset_synth(const struct AftSynthSpec *spec, struct AftDataset **out);

// Loads a dataset from its manifest.
//
// # Safety
// `manifest` must be a NUL-terminated string; `out` must be writable.
enum AftStatus aft_dataset_load(const char *manifest, struct AftDataset **out);

// Writes the dataset's files and manifest into `dir` (created if needed).
//
// # Safety
// `ds` must be a live handle and `dir` a NUL-terminated string.
enum AftStatus aft_dataset_write(const struct AftDataset *ds, const char *dir);

// # Safety
// `ds` must be null or a handle from this library, not yet freed.
void aft_dataset_free(struct AftDataset *ds);

// Row count; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t aft_dataset_n_rows(const struct AftDataset *ds);

// Width of the concatenated pre-trained features; 0 for a null handle.
//
// # Safety
// `ds` must be null or a live handle.
size_t aft_dataset_d_psi(const struct AftDataset *ds);

// Copy of the pre-trained feature matrix.
//
// # Safety
// `ds` must be a live handle; `out` must be writable.
enum AftStatus aft_dataset_psi(const struct AftDataset *ds, struct AftMatrix **out);

// Linear-probe test accuracy on the dataset's pre-trained features (or
// its downstream inputs when `use_inputs` is set), with default settings.
//
// # Safety
// `ds` must be a live handle; `out_accuracy` must be writable.
enum AftStatus aft_dataset_probe(const struct AftDataset *ds,
                                 bool use_inputs,
                                 double *out_accuracy);

// Library defaults for [`AftTrainOptions`] (β selected on holdout).
struct AftTrainOptions aft_train_options_default(void);

// Trains `method` (e.g. "stl", "aft", "kd", "rbf") on `ds` and evaluates
// on its test split.
//
// # Safety
// `ds` must be a live handle, `method` a NUL-terminated string, `options`
// valid, and `out` writable.
enum AftStatus aft_train(const struct AftDataset *ds,
                         const char *method,
                         const struct AftTrainOptions *options,
                         struct AftRun **out);

// # Safety
// `run` must be null or a handle from this library, not yet freed.
void aft_run_free(struct AftRun *run);

// Test error (1 − accuracy) of the final model.
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum AftStatus aft_run_test_error(const struct AftRun *run, double *out);

// The β the final model was trained with (0 for plain training).
//
// # Safety
// `run` must be a live handle; `out` must be writable.
enum AftStatus aft_run_beta(const struct AftRun *run, double *out);

// Number of learned diagonal weights; 0 when the method has none.
//
// # Safety
// `run` must be null or a live handle.
size_t aft_run_mu_len(const struct AftRun *run);

// Copies the learned weights `σ(sᵢ)` into `buf` (`len` must equal
// [`aft_run_mu_len`]).
//
// # Safety
// `run` must be a live handle and `buf` writable for `len` doubles.
enum AftStatus aft_run_mu_weights(const struct AftRun *run, double *buf, size_t len);

// Writes `<run_id>.metrics` and `<run_id>.ckpt` into `dir`.
//
// # Safety
// `run` must be a live handle; `dir` and `run_id` NUL-terminated strings.
enum AftStatus aft_run_write(const struct AftRun *run, const char *dir, const char *run_id);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AFT_H */
