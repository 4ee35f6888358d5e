#include <math.h>
#include <stdio.h>
#include "softgrasp.h"

#define CHECK(cond)                                                   \
  do {                                                                \
    if (!(cond)) {                                                    \
      const char *m = sg_last_error_message();                        \
      fprintf(stderr, "%s:%d: %s (%s)\n", __FILE__, __LINE__, #cond,  \
              m ? m : "no error");                                    \
      return 1;                                                       \
    }                                                                 \
  } while (0)

int main(void) {
  SgBoundaryConditions bc = {
      {-1.25, 0.0, 0.55}, {0.0, 0.0, 0.25}, {0.5, 0.0, 0.0}, {1.0, 0.0, 0.75},
      2.5, 4.5};
  SgTrajectory *traj = NULL;
  CHECK(sg_trajectory_plan(&bc, &traj) == SG_STATUS_OK);
  SgSetpoint sp;
  CHECK(sg_trajectory_eval(traj, 2.5, &sp) == SG_STATUS_OK);
  CHECK(fabs(sp.velocity.x - 0.5) < 1e-7);
  sg_trajectory_free(traj);

  bc.tf = bc.tg;
  CHECK(sg_trajectory_plan(&bc, &traj) == SG_STATUS_INVALID_ARGUMENT);
  CHECK(sg_last_error_message() != NULL);

  SgSmoother *sm = NULL;
  CHECK(sg_smoother_new(NULL, &sm) == SG_STATUS_OK);
  SgPose pose = {{1, 0, 0, 0, 1, 0, 0, 0, 1}, {0, 0, 0}};
  SgTwist twist;
  CHECK(sg_smoother_latest(sm, &pose, &twist) == SG_STATUS_NOT_READY);
  for (int k = 0; k < 10; ++k) {
    pose.translation.x = 0.1 * k;
    CHECK(sg_smoother_push(sm, &pose, k / 14.0) == SG_STATUS_OK);
  }
  CHECK(sg_smoother_solve(sm, NULL) == SG_STATUS_OK);
  CHECK(sg_smoother_latest(sm, &pose, &twist) == SG_STATUS_OK);
  CHECK(twist.linear.x > 0.0);
  sg_smoother_free(sm);

  SgGripperDims g = {0.234, 0.098, 0.152};
  SgAxes b;
  CHECK(sg_error_bounds(&g, 0.1, 0.12, &b) == SG_STATUS_OK);
  CHECK(fabs(b.vertical - 0.076) < 1e-15);
  CHECK(sg_error_bounds(NULL, 0.1, 0.12, &b) == SG_STATUS_NULL_POINTER);
  printf("ok\n");
  return 0;
}
