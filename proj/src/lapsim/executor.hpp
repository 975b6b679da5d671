#pragma once

// Simulated execution: RCM-constrained tool poses, trapezoidal trajectories,
// the camera rig's imaging/suture modes, and the per-stitch primitive chain.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapsim/core.hpp"
#include "lapsim/error.hpp"
#include "lapsim/planner.hpp"
#include "lapsim/tissue.hpp"

namespace lapsim {

struct RcmPort {
  Point3 port_point{0.0, -100.0, 100.0};
  Point3 axis{0.0, 0.70710678118654752, -0.70710678118654752};  // into the body
  double max_insertion_mm = 200.0;
  double max_pivot_rad = 0.78539816339744831;  // 45 degrees
};

// Tip at the target, shaft through the port. Throws RcmViolation (target at
// the port), InsertionTooDeep, PivotLimitExceeded.
Pose solve_rcm(const Point3& tip_target, const RcmPort& port);

struct TrajectoryLimits {
  double v_max = 10.0;   // mm/s
  double a_max = 50.0;   // mm/s^2
};

struct TrajectoryProfile {
  double distance = 0.0;
  double v_max = 0.0;
  double a_max = 0.0;
  double duration = 0.0;
  bool cruise = false;  // reaches v_max (trapezoid) vs triangular

  double position(double t) const;  // arclength at time t, clamped to [0, duration]
  double speed(double t) const;
};

TrajectoryProfile plan_trajectory(const Point3& from, const Point3& to, const TrajectoryLimits& limits);

enum class CameraMode { Imaging, Suture };
const char* to_string(CameraMode m);

struct CameraRig {
  Point3 target{0.0, 3.0, -0.5};
  Point3 view_dir{0.0, 0.0, -1.0};
  double working_distance_mm = 65.0;
  double retract_mm = 40.0;
  TrajectoryLimits limits{20.0, 40.0};
  CameraMode mode = CameraMode::Imaging;

  void validate() const;  // working distance within 50-80 mm
  Pose pose() const;
  double distance_mm() const { return working_distance_mm + (mode == CameraMode::Suture ? retract_mm : 0.0); }
};

struct CameraMove {
  Pose pose;
  double duration_s = 0.0;
};

// Throws StitchInFlight when a stitch is between Approach and Retract.
CameraMove set_camera_mode(CameraRig& rig, CameraMode mode, bool stitch_in_flight);

struct SafetyProfile {
  std::string name = "ex_vivo";
  TrajectoryLimits limits{10.0, 50.0};
  double noise_sigma_mm = 0.3;
  bool require_fire_approval = false;
  double assistant_dwell_s = 5.0;
  double bite_s = 1.5;
  double tension_s = 2.0;
  double retract_height_mm = 10.0;
  double duration_jitter = 0.05;  // actual Approach time = estimate * (1 + U[0, jitter])

  static SafetyProfile ex_vivo();
  static SafetyProfile in_vivo();
  static SafetyProfile by_name(const std::string& name);  // throws InvalidArgument
};

enum class Primitive { Approach, Bite, WaitForAssistant, Tension, Retract };
const char* to_string(Primitive p);

struct PrimitiveRecord {
  Primitive primitive = Primitive::Approach;
  double start_s = 0.0;
  double end_s = 0.0;
};

struct StitchResult {
  Wall wall = Wall::Back;
  int index = 0;
  int attempt = 1;
  Point3 planned;
  Point3 offset;
  Point3 achieved;           // world position at fire time
  Point3 achieved_material;  // achieved minus the tissue displacement at fire time
  double bite_depth_mm = 0.0;  // signed in-plane depth from the edge at fire time
  bool success = false;
  ErrorCode failure{};  // BiteMissedTissue on a miss
  double dispatch_s = 0.0;
  double arrival_s = 0.0;
  double fire_s = 0.0;
  double finish_s = 0.0;
  std::vector<PrimitiveRecord> primitives;
};

nlohmann::json stitch_result_to_json(const StitchResult& r);

// Bite succeeds when both tissue layers fit the jaw: the in-plane depth from
// the edge is within the jaw half-width of the bite depth and the height error
// within the jaw half-height.
struct BiteCheck {
  double depth_mm = 0.0;
  double dz_mm = 0.0;
  bool captured = false;
};
BiteCheck check_bite(const TissueState& tissue, const Point3& tip, Wall wall, double bite_depth_mm,
                     const CollisionPolicy& jaw = {});

class Executor {
 public:
  Executor(SafetyProfile profile, RcmPort port, std::uint64_t seed, double bite_depth_mm = 3.0);

  const SafetyProfile& profile() const { return profile_; }
  const RcmPort& port() const { return port_; }
  const Point3& tool_tip() const { return tip_; }
  bool stitch_in_flight() const { return in_flight_; }

  // Approach duration from the current tip to `target` under the profile.
  double approach_estimate(const Point3& target) const;

  // Approach: leaves at dispatch_s; returns the arrival time.
  double begin_stitch(const SuturePoint& point, const Point3& offset, double dispatch_s, int attempt = 1);
  // Bite at fire_s against the tissue at that instant.
  const StitchResult& fire(const TissueState& tissue_at_fire, double fire_s);
  // WaitForAssistant until release_s (at least the dwell), Tension, Retract.
  StitchResult finish(double release_s);
  // Tool failure between arrival and bite: retract at t without firing.
  StitchResult abort_stitch(double t, ErrorCode reason);

  // The whole chain with no operator gates: fires on arrival, releases the
  // assistant gate at the end of the dwell. `tissue` is advanced to fire time.
  StitchResult execute_stitch(const SuturePoint& point, const Point3& offset, const TissueState& tissue,
                              double dispatch_s, int attempt = 1);

 private:
  SafetyProfile profile_;
  RcmPort port_;
  double bite_depth_mm_;
  std::mt19937_64 rng_;
  Point3 tip_;
  bool in_flight_ = false;
  SuturePoint point_;
  Point3 target_;
  StitchResult cur_;
};

}  // namespace lapsim
