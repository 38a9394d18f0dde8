#ifndef WIRELEG_H
#define WIRELEG_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WlStatus {
  WL_OK = 0,
  WL_ERR_NULL_POINTER = 1,
  WL_ERR_INVALID_ARGUMENT = 2,
  WL_ERR_CONFIG = 3,
  WL_ERR_COMMAND_REJECTED = 4,
  WL_ERR_SIMULATION = 5,
  WL_ERR_NOT_CONVERGED = 6,
  WL_ERR_UNREACHABLE = 7,
  WL_ERR_BUFFER_TOO_SMALL = 8,
  WL_ERR_PANIC = 9,
} WlStatus;

// Opaque simulation session.
typedef struct WlSession WlSession;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the calling thread's last error message into `buf` (NUL
// terminated, truncated to `len`) and returns its full length in bytes.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t wl_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *wl_version(void);

// Opens a session at the initial state of a bundled scenario. Scripted
// events are not replayed; drive the session with [`wl_session_command`].
//
// # Safety
// `name` must be a NUL-terminated string and `out` a valid pointer.
enum WlStatus wl_session_new_bundled(const char *name, struct WlSession **out);

// Opens a session from scenario JSON text.
//
// # Safety
// `script` must be a NUL-terminated string and `out` a valid pointer.
enum WlStatus wl_session_new_json(const char *script, struct WlSession **out);

// # Safety
// `s` must be null or a handle from a `wl_session_new_*` call that has not
// been freed.
void wl_session_free(struct WlSession *s);

// Applies one JSON command, e.g. `{"type":"set_velocity","linear":[0,0,0.1]}`.
//
// # Safety
// `s` must be a live session and `json` a NUL-terminated string.
enum WlStatus wl_session_command(struct WlSession *s, const char *json);

// Advances `steps` physics steps, running the controller when due.
//
// # Safety
// `s` must be a live session.
enum WlStatus wl_session_step(struct WlSession *s, uint64_t steps);

// Writes the simulated time in seconds.
//
// # Safety
// `s` must be a live session and `out` a valid pointer.
enum WlStatus wl_session_time(const struct WlSession *s, double *out);

// Writes `[x, y, z, qw, qx, qy, qz]` of the body.
//
// # Safety
// `s` must be a live session and `out` point to 7 writable doubles.
enum WlStatus wl_session_pose(const struct WlSession *s, double *out);

// Writes the tension of every wire slot (zero when detached) and stores
// the slot count in `count`. Fails with `WL_ERR_BUFFER_TOO_SMALL` when
// `cap` is short; `count` is still set.
//
// # Safety
// `s` must be a live session, `out` point to `cap` doubles and `count` be
// a valid pointer.
enum WlStatus wl_session_tensions(const struct WlSession *s,
                                  double *out,
                                  size_t cap,
                                  size_t *count);

// Solves `min ‖W f − w‖² + λ‖f‖²` over `f_min ≤ f ≤ f_max`.
// `columns` holds the `6 × m` Jacobian column-major, `target` the six
// wrench entries. `out_tensions` receives `m` values.
//
// # Safety
// `columns` must hold `6 m` doubles, `target` 6, `out_tensions` `m`;
// `out_objective` may be null.
enum WlStatus wl_solve_tension_qp(const double *columns,
                                  size_t m,
                                  const double *target,
                                  double f_min,
                                  double f_max,
                                  double regularization,
                                  double *out_tensions,
                                  double *out_objective);

// Elbow-down inverse kinematics of a planar two-link leg.
//
// # Safety
// `hip` and `knee` must be valid pointers.
enum WlStatus wl_two_link_ik(double x,
                             double y,
                             double thigh,
                             double calf,
                             double *hip,
                             double *knee);

// Equal-share tensions `M‖g‖/m + kp (l̇ − l̇ref)` clamped to the box.
//
// # Safety
// `rates`, `rates_ref` and `out` must each hold `m` doubles.
enum WlStatus wl_wire_velocity_tensions(const double *rates,
                                        const double *rates_ref,
                                        size_t m,
                                        double mass,
                                        double g_norm,
                                        double kp,
                                        double f_min,
                                        double f_max,
                                        double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WIRELEG_H */
