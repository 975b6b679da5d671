#include "lapsim/executor.hpp"

#include <algorithm>
#include <cmath>

namespace lapsim {

Pose solve_rcm(const Point3& tip_target, const RcmPort& port) {
  const Point3 d = tip_target - port.port_point;
  const double depth = norm(d);
  if (!std::isfinite(depth) || depth < 1e-9) fail(ErrorCode::RcmViolation, "tool tip target coincides with the port");
  if (depth > port.max_insertion_mm)
    fail(ErrorCode::InsertionTooDeep,
         "insertion " + std::to_string(depth) + " mm exceeds " + std::to_string(port.max_insertion_mm) + " mm");
  const Point3 dir = d * (1.0 / depth);
  const double c = std::clamp(dot(dir, normalized(port.axis)), -1.0, 1.0);
  const double angle = std::acos(c);
  if (angle > port.max_pivot_rad)
    fail(ErrorCode::PivotLimitExceeded, "pivot " + std::to_string(angle) + " rad exceeds the port limit");
  return Pose(tip_target, dir);
}

TrajectoryProfile plan_trajectory(const Point3& from, const Point3& to, const TrajectoryLimits& limits) {
  if (!(limits.v_max > 0.0) || !(limits.a_max > 0.0))
    fail(ErrorCode::InvalidArgument, "trajectory limits must be positive");
  TrajectoryProfile p;
  p.distance = distance(from, to);
  p.v_max = limits.v_max;
  p.a_max = limits.a_max;
  if (p.distance == 0.0) return p;
  if (p.distance >= limits.v_max * limits.v_max / limits.a_max) {
    p.cruise = true;
    p.duration = p.distance / limits.v_max + limits.v_max / limits.a_max;
  } else {
    p.duration = 2.0 * std::sqrt(p.distance / limits.a_max);
  }
  return p;
}

double TrajectoryProfile::position(double t) const {
  if (t <= 0.0 || duration == 0.0) return 0.0;
  if (t >= duration) return distance;
  const double peak = cruise ? v_max : a_max * 0.5 * duration;
  const double ta = peak / a_max;
  if (t < ta) return 0.5 * a_max * t * t;
  const double tb = duration - ta;
  if (t <= tb) return 0.5 * a_max * ta * ta + peak * (t - ta);
  const double r = duration - t;
  return distance - 0.5 * a_max * r * r;
}

double TrajectoryProfile::speed(double t) const {
  if (t <= 0.0 || t >= duration) return 0.0;
  const double peak = cruise ? v_max : a_max * 0.5 * duration;
  const double ta = peak / a_max;
  if (t < ta) return a_max * t;
  if (t <= duration - ta) return peak;
  return a_max * (duration - t);
}

const char* to_string(CameraMode m) { return m == CameraMode::Imaging ? "Imaging" : "Suture"; }

void CameraRig::validate() const {
  if (working_distance_mm < 50.0 || working_distance_mm > 80.0)
    fail(ErrorCode::InvalidArgument, "imaging working distance must lie within 50-80 mm");
  if (!(retract_mm >= 0.0)) fail(ErrorCode::InvalidArgument, "camera retraction must be non-negative");
}

Pose CameraRig::pose() const {
  const Point3 dir = normalized(view_dir);
  return Pose(target - dir * distance_mm(), dir);
}

CameraMove set_camera_mode(CameraRig& rig, CameraMode mode, bool stitch_in_flight) {
  if (stitch_in_flight) fail(ErrorCode::StitchInFlight, "camera mode change requested while a stitch is in flight");
  rig.validate();
  const Point3 from = rig.pose().position();
  rig.mode = mode;
  const Pose to = rig.pose();
  return {to, plan_trajectory(from, to.position(), rig.limits).duration};
}

SafetyProfile SafetyProfile::ex_vivo() { return {}; }

SafetyProfile SafetyProfile::in_vivo() {
  SafetyProfile p;
  p.name = "in_vivo";
  p.limits = {6.0, 30.0};
  p.require_fire_approval = true;
  return p;
}

SafetyProfile SafetyProfile::by_name(const std::string& name) {
  if (name == "ex_vivo") return ex_vivo();
  if (name == "in_vivo") return in_vivo();
  fail(ErrorCode::InvalidArgument, "unknown safety profile '" + name + "'");
}

const char* to_string(Primitive p) {
  switch (p) {
    case Primitive::Approach: return "Approach";
    case Primitive::Bite: return "Bite";
    case Primitive::WaitForAssistant: return "WaitForAssistant";
    case Primitive::Tension: return "Tension";
    case Primitive::Retract: return "Retract";
  }
  return "?";
}

namespace {
nlohmann::json vec(const Point3& p) { return nlohmann::json::array({p.x, p.y, p.z}); }
}  // namespace

nlohmann::json stitch_result_to_json(const StitchResult& r) {
  nlohmann::json prims = nlohmann::json::array();
  for (const auto& p : r.primitives) prims.push_back({{"primitive", to_string(p.primitive)}, {"start_s", p.start_s}, {"end_s", p.end_s}});
  return {{"wall", to_string(r.wall)},
          {"index", r.index},
          {"attempt", r.attempt},
          {"planned", vec(r.planned)},
          {"offset", vec(r.offset)},
          {"achieved", vec(r.achieved)},
          {"achieved_material", vec(r.achieved_material)},
          {"bite_depth_mm", r.bite_depth_mm},
          {"success", r.success},
          {"failure", r.success ? "" : error_name(r.failure)},
          {"dispatch_s", r.dispatch_s},
          {"arrival_s", r.arrival_s},
          {"fire_s", r.fire_s},
          {"finish_s", r.finish_s},
          {"primitives", prims}};
}

BiteCheck check_bite(const TissueState& tissue, const Point3& tip, Wall wall, double bite_depth_mm,
                     const CollisionPolicy& jaw) {
  BiteCheck b;
  b.depth_mm = tissue.signed_edge_depth(tip, wall, &b.dz_mm);
  const double half_w = 0.5 * (jaw.jaw_capture_box.hi.x - jaw.jaw_capture_box.lo.x);
  const double half_h = 0.5 * (jaw.jaw_capture_box.hi.z - jaw.jaw_capture_box.lo.z);
  b.captured = std::abs(b.depth_mm - bite_depth_mm) <= half_w && std::abs(b.dz_mm) <= half_h;
  return b;
}

Executor::Executor(SafetyProfile profile, RcmPort port, std::uint64_t seed, double bite_depth_mm)
    : profile_(std::move(profile)), port_(port), bite_depth_mm_(bite_depth_mm), rng_(seed) {
  // Parked above the middle of the field.
  tip_ = {0.0, 0.0, profile_.retract_height_mm};
  solve_rcm(tip_, port_);
}

double Executor::approach_estimate(const Point3& target) const {
  return plan_trajectory(tip_, target, profile_.limits).duration;
}

double Executor::begin_stitch(const SuturePoint& point, const Point3& offset, double dispatch_s, int attempt) {
  if (in_flight_) fail(ErrorCode::StitchInFlight, "previous stitch has not retracted");
  point_ = point;
  target_ = point.position + offset;
  cur_ = StitchResult{};
  cur_.wall = point.wall;
  cur_.index = point.index;
  cur_.attempt = attempt;
  cur_.planned = point.position;
  cur_.offset = offset;
  std::normal_distribution<double> noise(0.0, profile_.noise_sigma_mm);
  const Point3 err = profile_.noise_sigma_mm > 0.0 ? Point3{noise(rng_), noise(rng_), noise(rng_)} : Point3{};
  cur_.achieved = target_ + err;
  solve_rcm(cur_.achieved, port_);

  std::uniform_real_distribution<double> jitter(0.0, profile_.duration_jitter);
  // Tracking only ever lags the time-optimal profile.
  const double actual = approach_estimate(target_) * (1.0 + jitter(rng_));
  cur_.dispatch_s = dispatch_s;
  cur_.arrival_s = dispatch_s + actual;
  cur_.primitives.push_back({Primitive::Approach, dispatch_s, cur_.arrival_s});
  tip_ = cur_.achieved;
  in_flight_ = true;
  return cur_.arrival_s;
}

const StitchResult& Executor::fire(const TissueState& tissue_at_fire, double fire_s) {
  if (!in_flight_) fail(ErrorCode::InvalidArgument, "no stitch in flight");
  const BiteCheck b = check_bite(tissue_at_fire, cur_.achieved, cur_.wall, bite_depth_mm_);
  cur_.fire_s = fire_s;
  cur_.bite_depth_mm = b.depth_mm;
  cur_.achieved_material = cur_.achieved - tissue_at_fire.displacement(cur_.wall);
  cur_.success = b.captured;
  cur_.failure = b.captured ? ErrorCode{} : ErrorCode::BiteMissedTissue;
  cur_.primitives.push_back({Primitive::Bite, fire_s, fire_s + profile_.bite_s});
  return cur_;
}

StitchResult Executor::finish(double release_s) {
  if (!in_flight_ || cur_.primitives.size() < 2) fail(ErrorCode::InvalidArgument, "stitch has not fired");
  const double wait_start = cur_.primitives.back().end_s;
  double t = wait_start;
  if (cur_.success) {
    const double wait_end = std::max(wait_start + profile_.assistant_dwell_s, release_s);
    cur_.primitives.push_back({Primitive::WaitForAssistant, wait_start, wait_end});
    cur_.primitives.push_back({Primitive::Tension, wait_end, wait_end + profile_.tension_s});
    t = wait_end + profile_.tension_s;
  }
  const Point3 up = normalized(point_.surface_normal);
  const Point3 park = cur_.achieved + up * profile_.retract_height_mm;
  const double back = plan_trajectory(tip_, park, profile_.limits).duration;
  cur_.primitives.push_back({Primitive::Retract, t, t + back});
  cur_.finish_s = t + back;
  tip_ = park;
  in_flight_ = false;
  return cur_;
}

StitchResult Executor::abort_stitch(double t, ErrorCode reason) {
  if (!in_flight_ || cur_.primitives.size() != 1) fail(ErrorCode::InvalidArgument, "no approached stitch to abort");
  cur_.success = false;
  cur_.failure = reason;
  cur_.fire_s = t;
  const Point3 park = cur_.achieved + normalized(point_.surface_normal) * profile_.retract_height_mm;
  const double back = plan_trajectory(tip_, park, profile_.limits).duration;
  cur_.primitives.push_back({Primitive::Retract, t, t + back});
  cur_.finish_s = t + back;
  tip_ = park;
  in_flight_ = false;
  return cur_;
}

StitchResult Executor::execute_stitch(const SuturePoint& point, const Point3& offset, const TissueState& tissue,
                                      double dispatch_s, int attempt) {
  const double arrival = begin_stitch(point, offset, dispatch_s, attempt);
  TissueState at_fire = tissue;
  if (arrival > tissue.time_s) at_fire = step(tissue, arrival - tissue.time_s);
  fire(at_fire, arrival);
  return finish(-1.0);
}

}  // namespace lapsim
