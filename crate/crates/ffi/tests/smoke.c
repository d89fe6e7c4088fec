/* Links against libpvsmooth_ffi.a; exits non-zero on the first mismatch. */
#include <math.h>
#include <stdio.h>
#include <string.h>

#include "pvsmooth.h"

#define CHECK(cond)                                              \
  do {                                                           \
    if (!(cond)) {                                               \
      fprintf(stderr, "%s:%d: %s\n", __FILE__, __LINE__, #cond); \
      return 1;                                                  \
    }                                                            \
  } while (0)

int main(void) {
  PvsController *ctrl = NULL;
  CHECK(pvs_controller_new(4, 5.0, &ctrl) == PVS_STATUS_OK);
  PvsControllerOutput out;
  CHECK(pvs_controller_step(ctrl, 8.0, 2.0, &out) == PVS_STATUS_OK);
  CHECK(out.p_hat_w == 2.0 && out.p_batt_w == 6.0 && out.i_set_a == 3.0);
  CHECK(pvs_controller_step(ctrl, NAN, 2.0, &out) == PVS_STATUS_NON_FINITE);
  pvs_controller_free(ctrl);
  CHECK(pvs_controller_new(0, 5.0, &ctrl) == PVS_STATUS_INVALID_ARGUMENT && ctrl == NULL);

  PvsBatteryParams params;
  CHECK(pvs_battery_params_default(&params) == PVS_STATUS_OK);
  PvsBattery *batt = NULL;
  CHECK(pvs_battery_new(&params, &batt) == PVS_STATUS_OK);
  PvsBatteryState st;
  CHECK(pvs_battery_step(batt, 0.0, 5.0, &st) == PVS_STATUS_OK);
  CHECK(st.soc == params.soc_init && st.clamp_events == 0);
  CHECK(pvs_battery_step(batt, 500.0, 5.0, &st) == PVS_STATUS_OK);
  CHECK(st.i_applied_a == params.current_limit_a && st.clamp_events == 1);
  pvs_battery_free(batt);

  CHECK(pvs_supply_apply(120.0, 100.0) == 55.0);

  PvsFrame f = {PVS_MSG_SENSOR, 7, 35000, 2, {812.5, 53.25}};
  uint8_t buf[PVS_FRAME_MAX];
  size_t len = 0;
  CHECK(pvs_frame_encode(&f, buf, sizeof buf, &len) == PVS_STATUS_OK && len == 40);
  CHECK(memcmp(buf, "HESB", 4) == 0);
  PvsFrame back;
  CHECK(pvs_frame_decode(buf, len, &back) == PVS_STATUS_OK);
  CHECK(back.seq == 7 && back.sim_time_ms == 35000 && back.payload[1] == 53.25);
  buf[30] ^= 0x01;
  CHECK(pvs_frame_decode(buf, len, &back) == PVS_STATUS_BAD_CRC);

  double pv[13] = {0};
  pv[12] = 1000.0;
  double rr[4];
  CHECK(pvs_ramp_rates(pv, 13, 5.0, 1000.0, 60.0, 0, rr, 4, &len) == PVS_STATUS_OK);
  CHECK(len == 1 && rr[0] == 100.0);

  printf("ffi smoke ok, version %s, %s\n", pvs_version(), pvs_status_message(PVS_STATUS_BAD_CRC));
  return 0;
}
