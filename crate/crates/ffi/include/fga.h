#ifndef FGA_H
#define FGA_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum FgaStatus {
  FGA_STATUS_OK = 0,
  // A required pointer was null or a string was not UTF-8.
  FGA_STATUS_NULL_ARGUMENT = 1,
  // Invalid argument or configuration.
  FGA_STATUS_INVALID_ARGUMENT = 2,
  // Malformed data, checkpoint or file error.
  FGA_STATUS_DATA = 3,
  // Shape mismatch or non-finite values.
  FGA_STATUS_NUMERIC = 4,
  // The output buffer is too small; the required length was written.
  FGA_STATUS_BUFFER_TOO_SMALL = 5,
  // Internal error (caught panic).
  FGA_STATUS_PANIC = 6,
} FgaStatus;

// Records loaded against a model's vocabulary and dimensions.
typedef struct FgaDataset FgaDataset;

// A loaded model, ready for eval-mode scoring.
typedef struct FgaModel FgaModel;

// Retrieval metrics; recalls are percentages.
typedef struct FgaEvalSummary {
  double mrr;
  double r1;
  double r5;
  double r10;
  double mean_rank;
  size_t records;
} FgaEvalSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Last error message on this thread, or null after a successful call.
// The pointer stays valid until the next call on the same thread.
const char *fga_last_error(void);

// Library version as a static string.
const char *fga_version(void);

// Loads a checkpoint manifest (its `.bin` blob must sit next to it).
//
// # Safety
// `path` is a NUL-terminated string; `out` points to writable storage.
enum FgaStatus fga_model_load(const char *path, struct FgaModel **out);

// # Safety
// `model` is null or a handle from [`fga_model_load`] not yet freed.
void fga_model_free(struct FgaModel *model);

// Candidates per record expected by the model.
//
// # Safety
// `model` is a live handle; `out` points to writable storage.
enum FgaStatus fga_model_num_candidates(const struct FgaModel *model, size_t *out);

// Number of trainable scalars.
//
// # Safety
// `model` is a live handle; `out` points to writable storage.
enum FgaStatus fga_model_num_parameters(const struct FgaModel *model, size_t *out);

// Loads a JSONL dataset using the model's vocabulary and dimensions.
//
// # Safety
// `model` is a live handle, `path` a NUL-terminated string, `out` writable.
enum FgaStatus fga_dataset_load(const struct FgaModel *model,
                                const char *path,
                                struct FgaDataset **out);

// # Safety
// `dataset` is null or a handle from [`fga_dataset_load`] not yet freed.
void fga_dataset_free(struct FgaDataset *dataset);

// # Safety
// `dataset` is a live handle; `out` points to writable storage.
enum FgaStatus fga_dataset_len(const struct FgaDataset *dataset, size_t *out);

// Eval-mode candidate probabilities of record `index`.
//
// `written` receives the candidate count, also when the buffer is too small.
//
// # Safety
// Handles are live; `out` holds `capacity` doubles; `written` is writable.
enum FgaStatus fga_model_score(const struct FgaModel *model,
                               const struct FgaDataset *dataset,
                               size_t index,
                               double *out,
                               size_t capacity,
                               size_t *written);

// As [`fga_model_score`] for one record given as a JSON object (dataset line format).
//
// # Safety
// `model` is live; `record_json` is NUL-terminated; `out` holds `capacity`
// doubles; `written` is writable.
enum FgaStatus fga_model_score_json(const struct FgaModel *model,
                                    const char *record_json,
                                    double *out,
                                    size_t capacity,
                                    size_t *written);

// Ranks every record and fills `out` with the metrics.
//
// # Safety
// Handles are live; `out` points to writable storage.
enum FgaStatus fga_model_evaluate(const struct FgaModel *model,
                                  const struct FgaDataset *dataset,
                                  struct FgaEvalSummary *out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* FGA_H */
