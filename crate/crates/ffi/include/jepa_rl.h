#ifndef JEPA_RL_H
#define JEPA_RL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

// Result of every fallible call.
typedef enum JrStatus {
  JR_STATUS_OK = 0,
  JR_STATUS_NULL_POINTER = 1,
  JR_STATUS_INVALID_ARGUMENT = 2,
  JR_STATUS_CONFIG = 3,
  JR_STATUS_IO = 4,
  JR_STATUS_CHECKPOINT = 5,
  JR_STATUS_NON_FINITE = 6,
  JR_STATUS_TELEMETRY = 7,
  JR_STATUS_INTERNAL = 8,
} JrStatus;

// Opaque simulator handle.
typedef struct JrEnv JrEnv;

// Opaque trainer handle.
typedef struct JrTrainer JrTrainer;

// Cart-pole state: position, velocity, pole angle, angular velocity.
typedef struct JrCartState {
  double x;
  double x_dot;
  double theta;
  double theta_dot;
} JrCartState;

typedef struct JrStepResult {
  struct JrCartState state;
  double reward;
  bool terminated;
  bool truncated;
} JrStepResult;

// Statistics of one rollout and its update phase. Loss terms the
// configuration leaves out are NaN, as is `running_avg` before the first
// finished episode.
typedef struct JrIterationStats {
  uint64_t env_steps;
  uint64_t rollouts;
  uint64_t episodes;
  double running_avg;
  double mean_var;
  double min_mean_var;
  double l_jepa;
  double l_actor;
  double l_critic;
  double l_reg;
  double entropy;
} JrIterationStats;

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on this thread.
const char *jr_last_error(void);

// Library version as a static NUL-terminated string.
const char *jr_version(void);

// New episode from a seeded reset.
//
// # Safety
// `out` must be valid for a pointer write.
enum JrStatus jr_env_new(uint64_t seed, struct JrEnv **out);

// # Safety
// `env` must come from [`jr_env_new`] and not be used afterwards. Null is
// ignored.
void jr_env_free(struct JrEnv *env);

// Starts a new episode from a seeded reset.
//
// # Safety
// `env` must be a live handle.
enum JrStatus jr_env_reset(struct JrEnv *env, uint64_t seed);

// Starts a new episode from an explicit state.
//
// # Safety
// `env` must be a live handle.
enum JrStatus jr_env_set_state(struct JrEnv *env, struct JrCartState state);

// # Safety
// `env` must be a live handle and `out` valid for a write.
enum JrStatus jr_env_state(const struct JrEnv *env, struct JrCartState *out);

// Applies action 0 (push left) or 1 (push right).
//
// # Safety
// `env` must be a live handle and `out` valid for a write.
enum JrStatus jr_env_step(struct JrEnv *env, uint32_t action, struct JrStepResult *out);

// Renders the current state as a `size` x `size` grayscale frame, row
// major, into `pixels` (`len` must equal `size * size`). `size` must
// divide 84.
//
// # Safety
// `env` must be a live handle and `pixels` valid for `len` writes.
enum JrStatus jr_env_render(const struct JrEnv *env, size_t size, float *pixels, size_t len);

// Trainer from configuration text in the `key = value` format. Keys not
// given keep their defaults.
//
// # Safety
// `config` must be a NUL-terminated string and `out` valid for a write.
enum JrStatus jr_trainer_new(const char *config, uint64_t seed, struct JrTrainer **out);

// Trainer restored from a checkpoint file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` valid for a write.
enum JrStatus jr_trainer_load(const char *path, struct JrTrainer **out);

// # Safety
// `trainer` must be a live handle and `path` a NUL-terminated string.
enum JrStatus jr_trainer_save(const struct JrTrainer *trainer, const char *path);

// # Safety
// `trainer` must come from [`jr_trainer_new`] or [`jr_trainer_load`] and
// not be used afterwards. Null is ignored.
void jr_trainer_free(struct JrTrainer *trainer);

// Collects one rollout and runs its update phase.
//
// # Safety
// `trainer` must be a live handle; `out` may be null.
enum JrStatus jr_trainer_iterate(struct JrTrainer *trainer, struct JrIterationStats *out);

// Environment steps taken so far.
//
// # Safety
// `trainer` must be a live handle and `out` valid for a write.
enum JrStatus jr_trainer_env_steps(const struct JrTrainer *trainer, uint64_t *out);

// Embedding width of the trainer's encoder.
//
// # Safety
// `trainer` must be a live handle and `out` valid for a write.
enum JrStatus jr_trainer_embedding_dim(const struct JrTrainer *trainer, size_t *out);

// Greedy-policy returns of `episodes` fresh episodes into `returns`
// (`len` must be at least `episodes`).
//
// # Safety
// `trainer` must be a live handle and `returns` valid for `len` writes.
enum JrStatus jr_trainer_evaluate(const struct JrTrainer *trainer,
                                  size_t episodes,
                                  uint64_t seed,
                                  double *returns,
                                  size_t len);

#endif  /* JEPA_RL_H */
