#ifndef MORE_KIT_H
#define MORE_KIT_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum {
  MK_STATUS_OK = 0,
  MK_STATUS_NULL_POINTER = 1,
  MK_STATUS_INVALID_ARGUMENT = 2,
  MK_STATUS_NUMERICAL = 3,
  MK_STATUS_IO = 4,
  MK_STATUS_PANIC = 5,
} MkStatus;

/**
 * Budget formula selector for [`mk_budget`].
 */
typedef enum {
  MK_METHOD_LORA = 0,
  MK_METHOD_MULTILORA = 1,
  MK_METHOD_MIXLORA = 2,
  MK_METHOD_MOELORA = 3,
  MK_METHOD_MORE = 4,
} MkMethod;

/**
 * A loaded model plus the manifest it came from.
 */
typedef struct MkModel MkModel;

/**
 * Inputs to [`mk_budget`]; `n` of 0 means "not given".
 */
typedef struct {
  uint64_t layers;
  uint64_t rank;
  uint64_t m;
  uint64_t d;
  uint64_t n;
  uint64_t tasks;
  uint64_t embed_dim;
} MkBudgetInputs;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL. The pointer is
 * valid until the next failing call on the same thread.
 */
const char *mk_last_error(void);

/**
 * Load the checkpoint directory `dir` into `*out`.
 *
 * # Safety
 * `dir` must be a NUL-terminated string and `out` a valid pointer.
 */
MkStatus mk_model_load(const char *dir, MkModel **out);

/**
 * Release a model. NULL is ignored.
 *
 * # Safety
 * `model` must come from [`mk_model_load`] and not be used afterwards.
 */
void mk_model_free(MkModel *model);

/**
 * Write the model as a checkpoint directory.
 *
 * # Safety
 * `model` must be a live handle and `dir` a NUL-terminated string.
 */
MkStatus mk_model_save(const MkModel *model, const char *dir);

/**
 * Number of tasks, vocabulary size and sequence length.
 *
 * # Safety
 * `model` must be a live handle; output pointers may be NULL to skip.
 */
MkStatus mk_model_dims(const MkModel *model,
                       uintptr_t *num_tasks,
                       uintptr_t *vocab_size,
                       uintptr_t *seq_len);

/**
 * Distribution over the vocabulary at the last position of one input.
 * `task < 0` runs without a task (only valid for non-MoRE models).
 *
 * # Safety
 * `tokens` must hold `len` values and `out` must hold `out_len` doubles.
 */
MkStatus mk_model_predict(MkModel *model,
                          const uint32_t *tokens,
                          uintptr_t len,
                          int64_t task,
                          double *out,
                          uintptr_t out_len);

/**
 * Rank (1-based) the MoRE site at `layer`/`site` uses for `task`. Sites are
 * numbered q=0, k=1, v=2, o=3, wi=4, wo=5.
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
MkStatus mk_model_selected_rank(const MkModel *model,
                                uintptr_t layer,
                                uintptr_t site,
                                uintptr_t task,
                                uintptr_t *out);

/**
 * Replace every gate by its task→rank lookup table.
 *
 * # Safety
 * `model` must be a live handle.
 */
MkStatus mk_model_freeze(MkModel *model);

/**
 * Parameter audit as a JSON string; free it with [`mk_string_free`].
 *
 * # Safety
 * `model` must be a live handle and `out` valid.
 */
MkStatus mk_model_audit_json(const MkModel *model, char **out);

/**
 * Free a string returned by this library. NULL is ignored.
 *
 * # Safety
 * `s` must come from this library and not be used afterwards.
 */
void mk_string_free(char *s);

/**
 * Closed-form trainable-parameter budget.
 *
 * # Safety
 * `inputs` and `out` must be valid pointers.
 */
MkStatus mk_budget(MkMethod method, const MkBudgetInputs *inputs, uint64_t *out);

/**
 * Size-aware task sampling weights for `n` dataset sizes, written to `out`.
 *
 * # Safety
 * `sizes` and `out` must each hold `n` elements.
 */
MkStatus mk_balanced_weights(const uint64_t *sizes, uintptr_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MORE_KIT_H */
