#ifndef GACE_H
#define GACE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Outcome codes written by [`gace_env_step`].
 */
typedef enum GaceOutcome {
  GACE_OUTCOME_ONGOING = 0,
  GACE_OUTCOME_SUCCESS = 1,
  GACE_OUTCOME_NON_GOAL = 2,
  GACE_OUTCOME_TIMEOUT = 3,
} GaceOutcome;

typedef enum GaceStatus {
  GACE_STATUS_OK = 0,
  GACE_STATUS_NULL_POINTER = 1,
  GACE_STATUS_INVALID_ARGUMENT = 2,
  GACE_STATUS_ENV = 3,
  GACE_STATUS_IO = 4,
  GACE_STATUS_CHECKPOINT = 5,
  GACE_STATUS_SHAPE_MISMATCH = 6,
  GACE_STATUS_PANIC = 7,
} GaceStatus;

/**
 * Environment handle.
 */
typedef struct GaceEnv GaceEnv;

/**
 * Trained model handle with its greedy policy state.
 */
typedef struct GaceModel GaceModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length.
 *
 * # Safety
 * `buf` must be valid for `len` bytes or null.
 */
size_t gace_last_error(char *buf, size_t len);

/**
 * Creates an environment for a task id such as `"G1"` or `"G2-unseen"`.
 *
 * # Safety
 * `task` must be a NUL-terminated string; `out` must be writable.
 */
enum GaceStatus gace_env_create(const char *task, struct GaceEnv **out);

/**
 * # Safety
 * `env` must come from [`gace_env_create`] or be null.
 */
void gace_env_free(struct GaceEnv *env);

/**
 * Observation shape `[C, H, W]`, number of goals, and action dimension.
 * `discrete` is set to 1 for a discrete action space.
 *
 * # Safety
 * Pointers must be valid; `shape` must hold 3 elements.
 */
enum GaceStatus gace_env_spec(const struct GaceEnv *env,
                              size_t *shape,
                              size_t *n_goals,
                              size_t *action_dim,
                              uint8_t *discrete);

/**
 * Starts an episode; writes the goal index.
 *
 * # Safety
 * Pointers must be valid.
 */
enum GaceStatus gace_env_reset(struct GaceEnv *env, uint64_t seed, size_t *goal);

/**
 * Copies the current observation (row-major `[C, H, W]`) into `buf`.
 *
 * # Safety
 * `buf` must be valid for `len` doubles.
 */
enum GaceStatus gace_env_observation(const struct GaceEnv *env, double *buf, size_t len);

/**
 * Advances one step. Discrete environments read `action[0]` as the action
 * index; continuous ones read `n` components.
 *
 * # Safety
 * `action` must be valid for `n` doubles; output pointers writable.
 */
enum GaceStatus gace_env_step(struct GaceEnv *env,
                              const double *action,
                              size_t n,
                              double *reward,
                              uint8_t *done,
                              enum GaceOutcome *outcome);

/**
 * Loads a checkpoint written by the `gace` trainer.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable.
 */
enum GaceStatus gace_model_load(const char *path, struct GaceModel **out);

/**
 * # Safety
 * `model` must come from [`gace_model_load`] or be null.
 */
void gace_model_free(struct GaceModel *model);

/**
 * Clears the recurrent state before a new episode.
 *
 * # Safety
 * `model` must be valid.
 */
enum GaceStatus gace_model_begin(struct GaceModel *model, size_t goal);

/**
 * Greedy action for one observation. Discrete models write the action
 * index to `action[0]`; continuous ones write `action_len` components.
 *
 * # Safety
 * `obs` valid for `obs_len` doubles, `action` for `action_len`.
 */
enum GaceStatus gace_model_act(struct GaceModel *model,
                               const double *obs,
                               size_t obs_len,
                               size_t goal,
                               double *action,
                               size_t action_len);

/**
 * Sample requirement ratio and sample efficiency improvement, in percent.
 *
 * # Safety
 * Output pointers must be writable.
 */
enum GaceStatus gace_srr_sei(double n_a, double n_b, double *srr, double *sei);

/**
 * Summed goal-aware cross-entropy of `rows × cols` probabilities against
 * `rows` labels.
 *
 * # Safety
 * `probs` valid for `rows * cols` doubles, `labels` for `rows` entries.
 */
enum GaceStatus gace_loss(const double *probs,
                          size_t rows,
                          size_t cols,
                          const size_t *labels,
                          double eps_clip,
                          double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GACE_H */
