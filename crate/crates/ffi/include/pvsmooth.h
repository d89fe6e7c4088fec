#ifndef PVSMOOTH_H
#define PVSMOOTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PVS_MSG_SENSOR 1

#define PVS_MSG_SETPOINT 2

#define PVS_MSG_END 3

#define PVS_MSG_FAULT 4

/**
 * Largest encoded frame: SENSOR, 20-byte header + 2 values + CRC.
 */
#define PVS_FRAME_MAX 40

typedef enum PvsStatus {
  PVS_STATUS_OK = 0,
  PVS_STATUS_NULL_POINTER = 1,
  PVS_STATUS_INVALID_ARGUMENT = 2,
  PVS_STATUS_NON_FINITE = 3,
  PVS_STATUS_BUFFER_TOO_SMALL = 4,
  PVS_STATUS_BAD_MAGIC = 5,
  PVS_STATUS_BAD_VERSION = 6,
  PVS_STATUS_BAD_LENGTH = 7,
  PVS_STATUS_BAD_CRC = 8,
  PVS_STATUS_UNKNOWN_MSG_TYPE = 9,
  PVS_STATUS_PANIC = 10,
} PvsStatus;

/**
 * Coulomb-counting battery with SOC and current clamping.
 */
typedef struct PvsBattery PvsBattery;

/**
 * Moving-average smoothing controller.
 */
typedef struct PvsController PvsController;

typedef struct PvsControllerOutput {
  double p_hat_w;
  double p_batt_w;
  double i_set_a;
  /**
   * 1 when the voltage reading was unusable and a zero setpoint was issued.
   */
  uint8_t voltage_fault;
} PvsControllerOutput;

typedef struct PvsBatteryParams {
  double capacity_wh;
  double nominal_voltage_v;
  double v_min_v;
  double v_max_v;
  double internal_resistance_ohm;
  double current_limit_a;
  double soc_min;
  double soc_max;
  double soc_init;
  double coulombic_efficiency;
  /**
   * 0 = constant nominal voltage, 1 = open-circuit voltage linear in SOC.
   */
  uint8_t voltage_model;
  uint8_t enforce_soc_limits;
} PvsBatteryParams;

typedef struct PvsBatteryState {
  double soc;
  double v_terminal_v;
  double i_applied_a;
  uint64_t clamp_events;
} PvsBatteryState;

typedef struct PvsFrame {
  uint8_t msg_type;
  uint32_t seq;
  uint64_t sim_time_ms;
  /**
   * Number of meaningful entries in `payload`.
   */
  uint32_t payload_len;
  double payload[2];
} PvsFrame;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Static, NUL-terminated description of a status code.
 */
const char *pvs_status_message(enum PvsStatus status);

/**
 * Library version, NUL-terminated.
 */
const char *pvs_version(void);

enum PvsStatus pvs_controller_new(size_t window_samples,
                                  double sample_period_s,
                                  struct PvsController **out);

enum PvsStatus pvs_controller_step(struct PvsController *ctrl,
                                   double p_pv_w,
                                   double v_batt_v,
                                   struct PvsControllerOutput *out);

/**
 * Releases a controller. Null is a no-op.
 */
void pvs_controller_free(struct PvsController *ctrl);

enum PvsStatus pvs_battery_params_default(struct PvsBatteryParams *out);

enum PvsStatus pvs_battery_new(const struct PvsBatteryParams *params, struct PvsBattery **out);

/**
 * Apply `i_request_a` (positive charges) for `dt_s` seconds.
 */
enum PvsStatus pvs_battery_step(struct PvsBattery *battery,
                                double i_request_a,
                                double dt_s,
                                struct PvsBatteryState *out);

enum PvsStatus pvs_battery_state(const struct PvsBattery *battery, struct PvsBatteryState *out);

/**
 * Releases a battery. Null is a no-op.
 */
void pvs_battery_free(struct PvsBattery *battery);

/**
 * Current the supply drives for a request, capped at its +/-55 A rating.
 */
double pvs_supply_apply(double i_request_a, double supply_limit_a);

/**
 * ADC emulation: round to the nearest of `2^bits` codes over `[lo, hi]`.
 */
double pvs_quantize(double value, uint32_t bits, double lo, double hi);

/**
 * Encode a frame into `buf`. `out_len` receives the byte count, or the
 * needed size when the status is `BufferTooSmall`.
 */
enum PvsStatus pvs_frame_encode(const struct PvsFrame *frame,
                                uint8_t *buf,
                                size_t cap,
                                size_t *out_len);

/**
 * Decode and verify one frame.
 */
enum PvsStatus pvs_frame_decode(const uint8_t *buf, size_t len, struct PvsFrame *out);

/**
 * Ramp rates in %/min over `rr_interval_s`. `sliding` selects one point per
 * sample instead of back-to-back intervals. `out_len` receives the point
 * count, or the needed capacity when the status is `BufferTooSmall`.
 */
enum PvsStatus pvs_ramp_rates(const double *samples,
                              size_t n,
                              double sample_period_s,
                              double rated_power_w,
                              double rr_interval_s,
                              uint8_t sliding,
                              double *out,
                              size_t cap,
                              size_t *out_len);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PVSMOOTH_H */
