#ifndef NVSIM_H
#define NVSIM_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NvsimExperiment {
  NVSIM_EXPERIMENT_PLE = 0,
  NVSIM_EXPERIMENT_PUMP = 1,
  NVSIM_EXPERIMENT_RABI_MW = 2,
  NVSIM_EXPERIMENT_RABI_TWO_PHOTON = 3,
  NVSIM_EXPERIMENT_DARKMAP = 4,
  NVSIM_EXPERIMENT_SIMULATE = 5,
} NvsimExperiment;

typedef enum NvsimStatus {
  NVSIM_STATUS_OK = 0,
  NVSIM_STATUS_NULL_POINTER = 1,
  NVSIM_STATUS_INVALID_ARGUMENT = 2,
  NVSIM_STATUS_CONFIG = 3,
  NVSIM_STATUS_PARSE = 4,
  NVSIM_STATUS_NUMERICAL = 5,
  NVSIM_STATUS_INVARIANT = 6,
  NVSIM_STATUS_IO = 7,
  NVSIM_STATUS_BUFFER_TOO_SMALL = 8,
  NVSIM_STATUS_OUT_OF_RANGE = 9,
  NVSIM_STATUS_INTERNAL = 10,
} NvsimStatus;

// Physical-constants table.
typedef struct NvsimConstants NvsimConstants;

// Level structure at a given Zeeman splitting with calibrated strain.
typedef struct NvsimModel NvsimModel;

// Tabular output of an experiment run.
typedef struct NvsimResult NvsimResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *nvsim_version(void);

// Copies the calling thread's last error message. Empty after a successful call.
//
// # Safety
// `buf` must point to `capacity` writable bytes (or be null with `capacity` 0);
// `needed` may be null.
enum NvsimStatus nvsim_last_error_message(char *buf, size_t capacity, size_t *needed);

// Built-in constants table.
//
// # Safety
// `out` must be a valid pointer to receive the handle.
enum NvsimStatus nvsim_constants_default(struct NvsimConstants **out);

// Constants table from its JSON text.
//
// # Safety
// `json` must be a NUL-terminated string; `out` a valid pointer.
enum NvsimStatus nvsim_constants_from_json(const char *json, struct NvsimConstants **out);

// # Safety
// `c` must come from a constants constructor and not be used afterwards.
void nvsim_constants_free(struct NvsimConstants *c);

// Zero-field splitting of the table, Hz.
//
// # Safety
// `c` must be a live constants handle; `out` a valid pointer.
enum NvsimStatus nvsim_constants_zero_field_splitting_hz(const struct NvsimConstants *c,
                                                         double *out);

// Level model with strain calibrated to the table and the given |±1⟩ splitting.
//
// # Safety
// `c` must be a live constants handle or null for the built-in table; `out` a valid pointer.
enum NvsimStatus nvsim_model_new(const struct NvsimConstants *c,
                                 double zeeman_hz,
                                 struct NvsimModel **out);

// # Safety
// `m` must come from [`nvsim_model_new`] and not be used afterwards.
void nvsim_model_free(struct NvsimModel *m);

// Number of dipole-allowed optical transitions.
//
// # Safety
// `m` must be a live model handle; `out` a valid pointer.
enum NvsimStatus nvsim_model_transition_count(const struct NvsimModel *m, size_t *out);

// One transition: basis indices of its ground and excited states (0, +1, −1, A1,
// A2, Ex, Ey, E1, E2 in that order), frequency in Hz and dipole strength.
//
// # Safety
// `m` must be a live model handle; every output pointer must be valid.
enum NvsimStatus nvsim_model_transition(const struct NvsimModel *m,
                                        size_t index,
                                        uint32_t *ground,
                                        uint32_t *excited,
                                        double *frequency_hz,
                                        double *strength);

// Runs an experiment from its JSON config (same format as the command-line tool).
//
// # Safety
// `config_json` must be a NUL-terminated string; `c` a live constants handle or
// null for the built-in table; `out` a valid pointer.
enum NvsimStatus nvsim_run(enum NvsimExperiment kind,
                           const char *config_json,
                           const struct NvsimConstants *c,
                           struct NvsimResult **out);

// # Safety
// `r` must come from [`nvsim_run`] and not be used afterwards.
void nvsim_result_free(struct NvsimResult *r);

// Table shape.
//
// # Safety
// `r` must be a live result handle; `rows` and `columns` valid pointers.
enum NvsimStatus nvsim_result_shape(const struct NvsimResult *r, size_t *rows, size_t *columns);

// Name of column `column`.
//
// # Safety
// `r` must be a live result handle; see the module docs for the buffer contract.
enum NvsimStatus nvsim_result_column_name(const struct NvsimResult *r,
                                          size_t column,
                                          char *buf,
                                          size_t capacity,
                                          size_t *needed);

// Copies column `column` into `dst`, which must hold `rows` values.
//
// # Safety
// `r` must be a live result handle and `dst` point to `len` writable doubles.
enum NvsimStatus nvsim_result_column(const struct NvsimResult *r,
                                     size_t column,
                                     double *dst,
                                     size_t len);

// The result table as CSV text.
//
// # Safety
// `r` must be a live result handle; see the module docs for the buffer contract.
enum NvsimStatus nvsim_result_csv(const struct NvsimResult *r,
                                  char *buf,
                                  size_t capacity,
                                  size_t *needed);

// Fit summaries as JSON text.
//
// # Safety
// `r` must be a live result handle; see the module docs for the buffer contract.
enum NvsimStatus nvsim_result_fits_json(const struct NvsimResult *r,
                                        char *buf,
                                        size_t capacity,
                                        size_t *needed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NVSIM_H */
