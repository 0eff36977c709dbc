#ifndef AOI_SCHED_H
#define AOI_SCHED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AoiStatus {
  AOI_STATUS_OK = 0,
  AOI_STATUS_NULL_POINTER = 1,
  AOI_STATUS_INVALID_CONFIG = 2,
  AOI_STATUS_NON_CONVERGENCE = 3,
  AOI_STATUS_BUDGET_EXCEEDED = 4,
  AOI_STATUS_INVALID_ARGUMENT = 5,
  AOI_STATUS_INTERNAL = 6,
} AoiStatus;

typedef enum AoiPolicyKind {
  AOI_POLICY_KIND_OPTIMAL = 0,
  AOI_POLICY_KIND_SUBOPTIMAL = 1,
  AOI_POLICY_KIND_BASE = 2,
  AOI_POLICY_KIND_GREEDY = 3,
} AoiPolicyKind;

typedef struct AoiModel AoiModel;

typedef struct AoiOptimal AoiOptimal;

typedef struct AoiSuboptimal AoiSuboptimal;

/**
 * One device's state; `a_b` is ignored outside the random-arrival variant.
 */
typedef struct AoiDeviceState {
  uint32_t a_b;
  uint32_t a_d;
  uint32_t a_r;
  uint32_t d;
} AoiDeviceState;

typedef struct AoiSimSummary {
  double overall_mean;
  double std_error;
} AoiSimSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a NUL-terminated TOML fleet description.
 *
 * # Safety
 * `toml` must be a valid C string and `out` a writable pointer.
 */
enum AoiStatus aoi_model_from_toml(const char *toml, struct AoiModel **out);

/**
 * # Safety
 * `model` must be null or a handle from `aoi_model_from_toml` not yet freed.
 */
void aoi_model_free(struct AoiModel *model);

/**
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_model_device_count(const struct AoiModel *model, size_t *out);

/**
 * Writes the joint state count; fails with `BUDGET_EXCEEDED` on overflow.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_model_joint_state_count(const struct AoiModel *model, uint64_t *out);

/**
 * Solves the joint problem with the solver settings of the fleet file.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_solve_optimal(const struct AoiModel *model, struct AoiOptimal **out);

/**
 * # Safety
 * `solution` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_optimal_theta(const struct AoiOptimal *solution, double *out);

/**
 * Optimal action for `n` device states; writes one code per device
 * (0 idle, 1 continue, 2 fresh) to `actions_out`.
 *
 * # Safety
 * `states` must hold `n` entries and `actions_out` room for `n` bytes.
 */
enum AoiStatus aoi_optimal_action(const struct AoiOptimal *solution,
                                  const struct AoiDeviceState *states,
                                  size_t n,
                                  uint8_t *actions_out);

/**
 * # Safety
 * `solution` must be null or a live handle.
 */
void aoi_optimal_free(struct AoiOptimal *solution);

/**
 * Solves the per-device problems under the fleet's base policy.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_suboptimal_solve(const struct AoiModel *model, struct AoiSuboptimal **out);

/**
 * Average cost of the base policy (sum of per-device averages).
 *
 * # Safety
 * `solution` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_suboptimal_theta_base(const struct AoiSuboptimal *solution, double *out);

/**
 * Improved-policy action; same conventions as `aoi_optimal_action`.
 *
 * # Safety
 * `states` must hold `n` entries and `actions_out` room for `n` bytes.
 */
enum AoiStatus aoi_suboptimal_action(const struct AoiSuboptimal *solution,
                                     const struct AoiDeviceState *states,
                                     size_t n,
                                     uint8_t *actions_out);

/**
 * # Safety
 * `solution` must be null or a live handle.
 */
void aoi_suboptimal_free(struct AoiSuboptimal *solution);

/**
 * Simulates the policy with code `policy` (an [`AoiPolicyKind`] value);
 * burn-in is a tenth of the horizon.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum AoiStatus aoi_simulate(const struct AoiModel *model,
                            uint32_t policy,
                            uint64_t seed,
                            uint64_t horizon,
                            uint32_t replications,
                            struct AoiSimSummary *out);

/**
 * Message of the last failed call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *aoi_last_error_message(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AOI_SCHED_H */
