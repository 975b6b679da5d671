#pragma once

// Suture planning on a captured point cloud: marker-anchored paths inset from
// the tissue edge, uniform and corner-reinforced spacing, spline prefiltering,
// jaw/body collision prediction, and the marker deformation rule.

#include <cstdint>
#include <string>
#include <tuple>
#include <unordered_map>
#include <utility>
#include <vector>

#include "json.hpp"
#include "lapsim/core.hpp"

namespace lapsim {

struct PlanParameters {
  double spacing_mm = 3.0;          // S
  double bite_depth_mm = 3.0;       // H
  double tissue_thickness_mm = 3.0; // T, informational
  bool corner_reinforcement = true;

  void validate() const;  // throws InvalidArgument
};

enum class StitchKind { Knot, Running, Corner };
enum class PlanMode { Uniform, CornerReinforced };

const char* to_string(StitchKind k);
const char* to_string(PlanMode m);
StitchKind stitch_kind_from_string(const std::string& s);
PlanMode plan_mode_from_string(const std::string& s);

struct SuturePoint {
  Point3 position;
  Point3 surface_normal{0.0, 0.0, 1.0};
  StitchKind kind = StitchKind::Running;
  Wall wall = Wall::Back;
  int index = 0;
  double param_mm = 0.0;  // in-plane arclength along the inset path
};

struct SuturePlan {
  std::vector<SuturePoint> points;
  PlanMode mode = PlanMode::Uniform;
  Wall wall = Wall::Back;
  std::uint64_t snapshot_id = 0;
  std::vector<double> corner_params;  // path parameter of interior marker corners
  bool usable = true;
  std::string rejection;  // empty when usable, e.g. "Noisy"
  double max_deviation_mm = 0.0;  // set by prefilter
};

struct PlanPair {
  SuturePlan uniform;
  SuturePlan corner;
  const SuturePlan& get(PlanMode m) const { return m == PlanMode::Uniform ? uniform : corner; }
};

// Plans one wall. The path follows the wall's marker polyline, inset by the
// bite depth toward the side the cloud lies on, lifted onto the cloud surface.
// Throws MarkersMissing, DegenerateGeometry, InvalidArgument.
PlanPair generate_plans(const PointCloud& cloud, const MarkerSet& markers, Wall wall, const PlanParameters& params);

// Path geometry without stitch placement; exposed for metrics and tests.
struct InsetPath {
  std::vector<Point3> vertices;  // one per marker; z from the surface fit
  std::vector<double> vertex_params;  // in-plane arclength of each vertex
  std::vector<Point3> samples;   // dense lift of the path onto the surface
  std::vector<double> sample_params;
  std::vector<double> sample_arclength;  // 3-D arclength along `samples`
  double length_mm = 0.0;        // 3-D length
};
InsetPath inset_path(const PointCloud& cloud, const MarkerSet& markers, Wall wall, double inset_mm);

struct PrefilterConfig {
  double roughness_tolerance_mm = 1.0;
  double smoothing = 1e4;  // weight of the third-derivative penalty
};

// Smoothing-spline fit per straight run of the plan. Rejection is a value:
// usable = false with rejection "Noisy".
SuturePlan prefilter(const SuturePlan& plan, const PointCloud& cloud, const PrefilterConfig& config = {});

// ---------------------------------------------------------------------------
// Collision prediction

struct Box {
  Point3 lo;
  Point3 hi;
  bool contains(const Point3& p) const {
    return p.x >= lo.x && p.x <= hi.x && p.y >= lo.y && p.y <= hi.y && p.z >= lo.z && p.z <= hi.z;
  }
};

struct CollisionPolicy {
  double ratio_threshold = 0.80;
  // Tool frame: origin at the jaw tip, z along the shaft from the port toward
  // the tip, x across the jaw opening.
  Box jaw_capture_box{{-3.0, -1.5, -2.0}, {3.0, 1.5, 2.0}};
  Box tool_body_box{{-2.5, -2.5, -40.0}, {2.5, 2.5, -2.5}};

  void validate() const;  // throws InvalidArgument
};

struct ToolFrame {
  Point3 origin;
  Point3 x, y, z;
  // z = pose direction; x = jaw_hint made orthogonal to z (falls back to world
  // y when the hint is parallel to the shaft).
  static ToolFrame from_pose(const Pose& pose, const Point3& jaw_hint = {1.0, 0.0, 0.0});
  Point3 to_local(const Point3& p) const {
    const Point3 d = p - origin;
    return {dot(d, x), dot(d, y), dot(d, z)};
  }
  Point3 to_world(const Point3& q) const { return origin + x * q.x + y * q.y + z * q.z; }
};

enum class CollisionReason { None, RatioExceeded, EmptyJaw };
const char* to_string(CollisionReason r);

struct CollisionVerdict {
  bool usable = true;
  double ratio = 0.0;
  std::size_t colliding = 0;
  std::size_t fitting = 0;
  CollisionReason reason = CollisionReason::None;
};

// Decision from raw counts; Warn iff colliding / fitting > threshold, or fitting = 0.
CollisionVerdict collision_verdict(std::size_t colliding, std::size_t fitting, double ratio_threshold);

// Spatial hash over a cloud for box-membership counting.
class CollisionIndex {
 public:
  explicit CollisionIndex(const PointCloud& cloud, double voxel_mm = 2.0);
  std::size_t count_in_box(const ToolFrame& frame, const Box& box) const;
  const PointCloud& cloud() const { return cloud_; }

 private:
  struct KeyHash {
    std::size_t operator()(const std::tuple<int, int, int>& k) const;
  };
  PointCloud cloud_;
  double voxel_;
  std::unordered_map<std::tuple<int, int, int>, std::vector<std::uint32_t>, KeyHash> cells_;
};

CollisionVerdict predict_collision(const Pose& tool, const CollisionIndex& index, const CollisionPolicy& policy = {},
                                   const Point3& jaw_hint = {1.0, 0.0, 0.0});
CollisionVerdict predict_collision(const Pose& tool, const PointCloud& cloud, const CollisionPolicy& policy = {},
                                   const Point3& jaw_hint = {1.0, 0.0, 0.0});

// ---------------------------------------------------------------------------
// Deformation rule

struct DeformationPolicy {
  double per_marker_threshold_mm = 3.0;  // half the jaw width
};

struct DeformationVerdict {
  bool replan_recommended = false;
  double max_displacement_mm = 0.0;
  MarkerId worst = MarkerId::Top;
};

// Replan iff some marker moved strictly more than the threshold.
// Throws MarkerSetMismatch when the id sets differ.
DeformationVerdict check_deformation(const MarkerSet& baseline, const MarkerSet& current,
                                     const DeformationPolicy& policy = {});

// ---------------------------------------------------------------------------
// Plan files

nlohmann::json plan_to_json(const SuturePlan& plan);
SuturePlan plan_from_json(const nlohmann::json& j);  // throws InvalidArgument

}  // namespace lapsim
