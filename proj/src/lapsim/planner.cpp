#include "lapsim/planner.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <limits>

#include "lapsim/error.hpp"

namespace lapsim {

void PlanParameters::validate() const {
  if (!(spacing_mm > 0.0) || !std::isfinite(spacing_mm)) fail(ErrorCode::InvalidArgument, "spacing must be positive");
  if (!(bite_depth_mm > 0.0) || !std::isfinite(bite_depth_mm))
    fail(ErrorCode::InvalidArgument, "bite depth must be positive");
}

const char* to_string(StitchKind k) {
  switch (k) {
    case StitchKind::Knot: return "Knot";
    case StitchKind::Running: return "Running";
    case StitchKind::Corner: return "Corner";
  }
  return "?";
}

const char* to_string(PlanMode m) { return m == PlanMode::Uniform ? "Uniform" : "CornerReinforced"; }

StitchKind stitch_kind_from_string(const std::string& s) {
  if (s == "Knot") return StitchKind::Knot;
  if (s == "Running") return StitchKind::Running;
  if (s == "Corner") return StitchKind::Corner;
  fail(ErrorCode::InvalidArgument, "unknown stitch kind '" + s + "'");
}

PlanMode plan_mode_from_string(const std::string& s) {
  if (s == "Uniform") return PlanMode::Uniform;
  if (s == "CornerReinforced") return PlanMode::CornerReinforced;
  fail(ErrorCode::InvalidArgument, "unknown plan mode '" + s + "'");
}

const char* to_string(CollisionReason r) {
  switch (r) {
    case CollisionReason::None: return "None";
    case CollisionReason::RatioExceeded: return "RatioExceeded";
    case CollisionReason::EmptyJaw: return "EmptyJaw";
  }
  return "?";
}

namespace {

// Local quadratic fit z(x, y) over cloud points near a query location.
class SurfaceFit {
 public:
  explicit SurfaceFit(const PointCloud& cloud) : cloud_(cloud) {
    for (std::uint32_t i = 0; i < cloud.points.size(); ++i) {
      const auto& p = cloud.points[i];
      cells_[key(p.x, p.y)].push_back(i);
    }
  }

  // Returns false when too few points lie nearby.
  bool fit(double x, double y, double* z, Point3* normal) const {
    for (double r : {2.0, 3.0, 4.5}) {
      if (fit_radius(x, y, r, z, normal)) return true;
    }
    return false;
  }

 private:
  static constexpr double kCell = 2.0;
  static long long key(double x, double y) {
    const long long cx = static_cast<long long>(std::floor(x / kCell));
    const long long cy = static_cast<long long>(std::floor(y / kCell));
    return (cx << 32) ^ (cy & 0xffffffffLL);
  }

  bool fit_radius(double x, double y, double r, double* z, Point3* normal) const {
    std::vector<const Point3*> near;
    const int lo_x = static_cast<int>(std::floor((x - r) / kCell)), hi_x = static_cast<int>(std::floor((x + r) / kCell));
    const int lo_y = static_cast<int>(std::floor((y - r) / kCell)), hi_y = static_cast<int>(std::floor((y + r) / kCell));
    for (int cx = lo_x; cx <= hi_x; ++cx)
      for (int cy = lo_y; cy <= hi_y; ++cy) {
        auto it = cells_.find((static_cast<long long>(cx) << 32) ^ (static_cast<long long>(cy) & 0xffffffffLL));
        if (it == cells_.end()) continue;
        for (auto i : it->second) {
          const auto& p = cloud_.points[i];
          if ((p.x - x) * (p.x - x) + (p.y - y) * (p.y - y) <= r * r) near.push_back(&p);
        }
      }
    if (near.size() < 10) return false;
    // z = c0 + c1 u + c2 v + c3 u^2 + c4 uv + c5 v^2 in coordinates scaled by r
    Eigen::Matrix<double, 6, 6> ata = Eigen::Matrix<double, 6, 6>::Zero();
    Eigen::Matrix<double, 6, 1> atb = Eigen::Matrix<double, 6, 1>::Zero();
    for (const Point3* p : near) {
      const double u = (p->x - x) / r, v = (p->y - y) / r;
      Eigen::Matrix<double, 6, 1> row;
      row << 1.0, u, v, u * u, u * v, v * v;
      ata += row * row.transpose();
      atb += row * p->z;
    }
    Eigen::LDLT<Eigen::Matrix<double, 6, 6>> ldlt(ata);
    if (ldlt.info() != Eigen::Success || !ldlt.isPositive()) return false;
    const Eigen::Matrix<double, 6, 1> c = ldlt.solve(atb);
    if (!c.allFinite()) return false;
    // reject near-singular fits (points on a line)
    if (ldlt.vectorD().minCoeff() < 1e-9 * ldlt.vectorD().maxCoeff()) return false;
    *z = c(0);
    *normal = normalized(Point3{-c(1) / r, -c(2) / r, 1.0});
    return true;
  }

  const PointCloud& cloud_;
  std::unordered_map<long long, std::vector<std::uint32_t>> cells_;
};

Point3 flat(const Point3& p) { return {p.x, p.y, 0.0}; }

// Which side of the marker segment a->b the cloud lies on: +1 for the left
// normal (-t.y, t.x), -1 for the right, 0 when neither side has points.
int tissue_side(const PointCloud& cloud, const Point3& a, const Point3& b, double band) {
  const Point3 d = flat(b) - flat(a);
  const double len = norm(d);
  const Point3 t = d * (1.0 / len);
  const Point3 nl{-t.y, t.x, 0.0};
  std::size_t left = 0, right = 0;
  for (const auto& q : cloud.points) {
    const Point3 r = flat(q) - flat(a);
    const double along = dot(r, t);
    if (along < 0.0 || along > len) continue;
    const double off = dot(r, nl);
    if (off > 0.0 && off <= band) ++left;
    if (off < 0.0 && off >= -band) ++right;
  }
  if (left == 0 && right == 0) return 0;
  return left >= right ? 1 : -1;
}

std::vector<Point3> wall_marker_positions(const MarkerSet& markers, Wall wall) {
  std::vector<Point3> out;
  for (MarkerId id : wall_marker_order(wall)) out.push_back(markers.at(id).position);
  return out;
}

}  // namespace

InsetPath inset_path(const PointCloud& cloud, const MarkerSet& markers, Wall wall, double inset_mm) {
  if (!(inset_mm >= 0.0)) fail(ErrorCode::InvalidArgument, "inset must be non-negative");
  const auto poly = wall_marker_positions(markers, wall);
  const std::size_t nseg = poly.size() - 1;
  std::vector<Point3> tangent(nseg), inward(nseg);
  for (std::size_t i = 0; i < nseg; ++i) {
    const Point3 d = flat(poly[i + 1]) - flat(poly[i]);
    if (norm(d) < 1e-9) fail(ErrorCode::DegenerateGeometry, "coincident markers");
    tangent[i] = normalized(d);
    // Only the strip the stitches will occupy votes: the opposite bowel end
    // can sit a few millimetres across the gap.
    const int side = tissue_side(cloud, poly[i], poly[i + 1], std::max(1.0, inset_mm));
    if (side == 0) fail(ErrorCode::DegenerateGeometry, "no tissue beside the marker path");
    inward[i] = Point3{-tangent[i].y, tangent[i].x, 0.0} * static_cast<double>(side);
  }

  // Offset each marker segment and join neighbours at the miter point.
  std::vector<Point3> xy(poly.size());
  xy.front() = flat(poly.front()) + inward.front() * inset_mm;
  xy.back() = flat(poly.back()) + inward.back() * inset_mm;
  for (std::size_t k = 1; k < nseg; ++k) {
    const Point3 p1 = flat(poly[k]) + inward[k - 1] * inset_mm, d1 = tangent[k - 1];
    const Point3 p2 = flat(poly[k]) + inward[k] * inset_mm, d2 = tangent[k];
    const double den = d1.x * d2.y - d1.y * d2.x;
    if (std::abs(den) < 1e-9) {
      xy[k] = p2;
    } else {
      const Point3 w = p2 - p1;
      const double s = (w.x * d2.y - w.y * d2.x) / den;
      xy[k] = p1 + d1 * s;
    }
  }

  SurfaceFit surf(cloud);
  auto lift = [&](const Point3& q, Point3* n) {
    double z = 0.0;
    Point3 nn;
    if (!surf.fit(q.x, q.y, &z, &nn)) fail(ErrorCode::DegenerateGeometry, "no surface under the suture path");
    if (n) *n = nn;
    return Point3{q.x, q.y, z};
  };

  InsetPath path;
  double param = 0.0;
  constexpr double step = 0.05;
  for (std::size_t k = 0; k < xy.size(); ++k) {
    path.vertices.push_back(lift(xy[k], nullptr));
    if (k > 0) param += norm(xy[k] - xy[k - 1]);
    path.vertex_params.push_back(param);
  }
  for (std::size_t k = 0; k + 1 < xy.size(); ++k) {
    const double len = norm(xy[k + 1] - xy[k]);
    const int m = std::max(1, static_cast<int>(std::ceil(len / step)));
    for (int j = (k == 0 ? 0 : 1); j <= m; ++j) {
      const double f = static_cast<double>(j) / m;
      const Point3 q = (j == m) ? xy[k + 1] : xy[k] + (xy[k + 1] - xy[k]) * f;
      const Point3 p = (j == 0) ? path.vertices[k] : (j == m ? path.vertices[k + 1] : lift(q, nullptr));
      const double s = path.vertex_params[k] + (j == m ? len : len * f);
      if (!path.samples.empty()) path.length_mm += distance(path.samples.back(), p);
      path.samples.push_back(p);
      path.sample_params.push_back(j == m ? path.vertex_params[k + 1] : s);
      path.sample_arclength.push_back(path.length_mm);
    }
  }
  return path;
}

PlanPair generate_plans(const PointCloud& cloud, const MarkerSet& markers, Wall wall, const PlanParameters& params) {
  params.validate();
  const auto poly = wall_marker_positions(markers, wall);
  double marker_len = 0.0;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) marker_len += distance(poly[i], poly[i + 1]);
  if (marker_len < 2.0 * params.spacing_mm)
    fail(ErrorCode::DegenerateGeometry, "marker path of " + std::to_string(marker_len) + " mm is shorter than 2S");

  const InsetPath path = inset_path(cloud, markers, wall, params.bite_depth_mm);
  const double L = path.length_mm;
  const long long n = std::max<long long>(1, std::llround(L / params.spacing_mm));

  // Arclength -> in-plane parameter along the dense samples.
  auto param_at = [&](double s) {
    const auto& a = path.sample_arclength;
    if (s <= 0.0) return path.sample_params.front();
    if (s >= a.back()) return path.sample_params.back();
    const std::size_t hi = static_cast<std::size_t>(std::upper_bound(a.begin(), a.end(), s) - a.begin());
    const std::size_t lo = hi - 1;
    const double f = (a[hi] > a[lo]) ? (s - a[lo]) / (a[hi] - a[lo]) : 0.0;
    return path.sample_params[lo] + f * (path.sample_params[hi] - path.sample_params[lo]);
  };
  // In-plane parameter -> point on the inset polyline.
  auto xy_at = [&](double u) {
    const auto& vp = path.vertex_params;
    std::size_t k = 0;
    while (k + 2 < vp.size() && u > vp[k + 1]) ++k;
    const double seg = vp[k + 1] - vp[k];
    const double f = seg > 0.0 ? std::clamp((u - vp[k]) / seg, 0.0, 1.0) : 0.0;
    const Point3 a = flat(path.vertices[k]), b = flat(path.vertices[k + 1]);
    return a + (b - a) * f;
  };
  SurfaceFit surf(cloud);
  auto make_point = [&](double s, StitchKind kind) {
    SuturePoint sp;
    sp.param_mm = param_at(s);
    const Point3 q = xy_at(sp.param_mm);
    double z = 0.0;
    if (!surf.fit(q.x, q.y, &z, &sp.surface_normal))
      fail(ErrorCode::DegenerateGeometry, "no surface under the suture path");
    sp.position = {q.x, q.y, z};
    sp.kind = kind;
    sp.wall = wall;
    return sp;
  };

  std::vector<std::pair<double, StitchKind>> uniform;
  for (long long k = 0; k <= n; ++k)
    uniform.emplace_back(L * static_cast<double>(k) / static_cast<double>(n), StitchKind::Running);

  // Corner extras at S/2 from every marker corner, on each side that has path.
  std::vector<double> corner_s{0.0, L};
  for (std::size_t k = 1; k + 1 < path.vertices.size(); ++k) {
    const auto it = std::find(path.sample_params.begin(), path.sample_params.end(), path.vertex_params[k]);
    corner_s.push_back(path.sample_arclength[static_cast<std::size_t>(it - path.sample_params.begin())]);
  }
  auto reinforced = uniform;
  const double half = 0.5 * params.spacing_mm;
  for (double c : corner_s)
    for (double s : {c - half, c + half}) {
      if (s <= 0.0 || s >= L) continue;
      const bool taken = std::any_of(reinforced.begin(), reinforced.end(),
                                     [&](const auto& e) { return std::abs(e.first - s) < 1e-9; });
      if (!taken) reinforced.emplace_back(s, StitchKind::Corner);
    }
  std::sort(reinforced.begin(), reinforced.end(), [](const auto& a, const auto& b) { return a.first < b.first; });

  auto build = [&](const std::vector<std::pair<double, StitchKind>>& at, PlanMode mode) {
    SuturePlan plan;
    plan.mode = mode;
    plan.wall = wall;
    plan.snapshot_id = cloud.frame_id;
    for (std::size_t k = 1; k + 1 < path.vertex_params.size(); ++k) plan.corner_params.push_back(path.vertex_params[k]);
    for (std::size_t i = 0; i < at.size(); ++i) {
      SuturePoint sp = make_point(at[i].first, i == 0 ? StitchKind::Knot : at[i].second);
      sp.index = static_cast<int>(i);
      plan.points.push_back(sp);
    }
    return plan;
  };
  PlanPair out;
  out.uniform = build(uniform, PlanMode::Uniform);
  out.corner = build(params.corner_reinforcement ? reinforced : uniform, PlanMode::CornerReinforced);
  return out;
}

// ---------------------------------------------------------------------------

namespace {

// Minimizes sum |y_i - s_i|^2 + lambda * sum (third divided difference of s)^2
// over nodes t (strictly increasing). Quadratics in t are fixed points.
Eigen::MatrixXd smooth_run(const std::vector<double>& t, const Eigen::MatrixXd& y, double lambda) {
  const int n = static_cast<int>(t.size());
  if (n < 4) return y;
  // Divided-difference operator, normalized so a unit third derivative gives 1.
  Eigen::MatrixXd d = Eigen::MatrixXd::Zero(n - 3, n);
  for (int i = 0; i + 3 < n; ++i) {
    for (int j = 0; j < 4; ++j) {
      double w = 1.0;
      for (int k = 0; k < 4; ++k)
        if (k != j) w *= (t[i + j] - t[i + k]);
      d(i, i + j) = 6.0 / w;
    }
  }
  Eigen::MatrixXd a = Eigen::MatrixXd::Identity(n, n) + lambda * d.transpose() * d;
  return a.ldlt().solve(y);
}

}  // namespace

SuturePlan prefilter(const SuturePlan& plan, const PointCloud& cloud, const PrefilterConfig& config) {
  SuturePlan out = plan;
  out.max_deviation_mm = 0.0;
  const std::size_t n = plan.points.size();
  if (n == 0) return out;

  // Runs are the straight stretches between interior marker corners; a point
  // on a corner belongs to both neighbours and takes the mean of their fits.
  std::vector<double> bounds{-std::numeric_limits<double>::infinity()};
  for (double c : plan.corner_params) bounds.push_back(c);
  bounds.push_back(std::numeric_limits<double>::infinity());
  std::vector<Point3> acc(n, Point3{});
  std::vector<int> hits(n, 0);
  constexpr double eps = 1e-9;
  for (std::size_t r = 0; r + 1 < bounds.size(); ++r) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < n; ++i) {
      const double u = plan.points[i].param_mm;
      if (u >= bounds[r] - eps && u <= bounds[r + 1] + eps) idx.push_back(i);
    }
    if (idx.empty()) continue;
    std::vector<double> t;
    Eigen::MatrixXd y(static_cast<Eigen::Index>(idx.size()), 3);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto& p = plan.points[idx[k]];
      t.push_back(p.param_mm);
      y(static_cast<Eigen::Index>(k), 0) = p.position.x;
      y(static_cast<Eigen::Index>(k), 1) = p.position.y;
      y(static_cast<Eigen::Index>(k), 2) = p.position.z;
    }
    const Eigen::MatrixXd s = smooth_run(t, y, config.smoothing);
    for (std::size_t k = 0; k < idx.size(); ++k) {
      const auto row = static_cast<Eigen::Index>(k);
      acc[idx[k]] += Point3{s(row, 0), s(row, 1), s(row, 2)};
      ++hits[idx[k]];
    }
  }

  SurfaceFit surf(cloud);
  for (std::size_t i = 0; i < n; ++i) {
    if (hits[i] == 0) continue;
    const Point3 sm = acc[i] * (1.0 / hits[i]);
    out.max_deviation_mm = std::max(out.max_deviation_mm, distance(sm, plan.points[i].position));
    out.points[i].position = sm;
    double z = 0.0;
    Point3 nn;
    if (surf.fit(sm.x, sm.y, &z, &nn)) out.points[i].surface_normal = nn;
  }
  bool flipped = false;
  for (std::size_t i = 0; i + 1 < n; ++i)
    if (dot(out.points[i].surface_normal, out.points[i + 1].surface_normal) < 0.0) flipped = true;

  if (out.max_deviation_mm > config.roughness_tolerance_mm || flipped) {
    SuturePlan rejected = plan;
    rejected.usable = false;
    rejected.rejection = "Noisy";
    rejected.max_deviation_mm = out.max_deviation_mm;
    return rejected;
  }
  return out;
}

// ---------------------------------------------------------------------------

void CollisionPolicy::validate() const {
  if (!(ratio_threshold > 0.0 && ratio_threshold < 1.0))
    fail(ErrorCode::InvalidArgument, "collision ratio threshold must lie in (0, 1)");
}

ToolFrame ToolFrame::from_pose(const Pose& pose, const Point3& jaw_hint) {
  ToolFrame f;
  f.origin = pose.position();
  f.z = pose.direction();
  Point3 h = jaw_hint - f.z * dot(jaw_hint, f.z);
  if (norm(h) < 1e-6) {
    const Point3 alt{0.0, 1.0, 0.0};
    h = alt - f.z * dot(alt, f.z);
  }
  f.x = normalized(h);
  f.y = cross(f.z, f.x);
  return f;
}

CollisionVerdict collision_verdict(std::size_t colliding, std::size_t fitting, double ratio_threshold) {
  CollisionVerdict v;
  v.colliding = colliding;
  v.fitting = fitting;
  if (fitting == 0) {
    v.usable = false;
    v.reason = CollisionReason::EmptyJaw;
    v.ratio = std::numeric_limits<double>::infinity();
    return v;
  }
  v.ratio = static_cast<double>(colliding) / static_cast<double>(fitting);
  if (v.ratio > ratio_threshold) {
    v.usable = false;
    v.reason = CollisionReason::RatioExceeded;
  }
  return v;
}

std::size_t CollisionIndex::KeyHash::operator()(const std::tuple<int, int, int>& k) const {
  const auto [a, b, c] = k;
  std::size_t h = static_cast<std::size_t>(static_cast<std::uint32_t>(a)) * 73856093u;
  h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(b)) * 19349663u;
  h ^= static_cast<std::size_t>(static_cast<std::uint32_t>(c)) * 83492791u;
  return h;
}

CollisionIndex::CollisionIndex(const PointCloud& cloud, double voxel_mm) : cloud_(cloud), voxel_(voxel_mm) {
  if (!(voxel_mm > 0.0)) fail(ErrorCode::InvalidArgument, "voxel size must be positive");
  for (std::uint32_t i = 0; i < cloud_.points.size(); ++i) {
    const auto& p = cloud_.points[i];
    cells_[{static_cast<int>(std::floor(p.x / voxel_)), static_cast<int>(std::floor(p.y / voxel_)),
            static_cast<int>(std::floor(p.z / voxel_))}]
        .push_back(i);
  }
}

std::size_t CollisionIndex::count_in_box(const ToolFrame& frame, const Box& box) const {
  // World bounds of the oriented box, padded so rounding never drops a voxel.
  Point3 lo{1e300, 1e300, 1e300}, hi{-1e300, -1e300, -1e300};
  for (int c = 0; c < 8; ++c) {
    const Point3 q{(c & 1) ? box.hi.x : box.lo.x, (c & 2) ? box.hi.y : box.lo.y, (c & 4) ? box.hi.z : box.lo.z};
    const Point3 w = frame.to_world(q);
    lo = {std::min(lo.x, w.x), std::min(lo.y, w.y), std::min(lo.z, w.z)};
    hi = {std::max(hi.x, w.x), std::max(hi.y, w.y), std::max(hi.z, w.z)};
  }
  const double pad = 1e-6 * (1.0 + norm(hi - lo));
  const int x0 = static_cast<int>(std::floor((lo.x - pad) / voxel_)), x1 = static_cast<int>(std::floor((hi.x + pad) / voxel_));
  const int y0 = static_cast<int>(std::floor((lo.y - pad) / voxel_)), y1 = static_cast<int>(std::floor((hi.y + pad) / voxel_));
  const int z0 = static_cast<int>(std::floor((lo.z - pad) / voxel_)), z1 = static_cast<int>(std::floor((hi.z + pad) / voxel_));
  std::size_t count = 0;
  for (int x = x0; x <= x1; ++x)
    for (int y = y0; y <= y1; ++y)
      for (int z = z0; z <= z1; ++z) {
        auto it = cells_.find({x, y, z});
        if (it == cells_.end()) continue;
        for (auto i : it->second)
          if (box.contains(frame.to_local(cloud_.points[i]))) ++count;
      }
  return count;
}

CollisionVerdict predict_collision(const Pose& tool, const CollisionIndex& index, const CollisionPolicy& policy,
                                   const Point3& jaw_hint) {
  policy.validate();
  const ToolFrame f = ToolFrame::from_pose(tool, jaw_hint);
  return collision_verdict(index.count_in_box(f, policy.tool_body_box), index.count_in_box(f, policy.jaw_capture_box),
                           policy.ratio_threshold);
}

CollisionVerdict predict_collision(const Pose& tool, const PointCloud& cloud, const CollisionPolicy& policy,
                                   const Point3& jaw_hint) {
  return predict_collision(tool, CollisionIndex(cloud), policy, jaw_hint);
}

// ---------------------------------------------------------------------------

DeformationVerdict check_deformation(const MarkerSet& baseline, const MarkerSet& current,
                                     const DeformationPolicy& policy) {
  if (!(policy.per_marker_threshold_mm > 0.0)) fail(ErrorCode::InvalidArgument, "threshold must be positive");
  if (baseline.size() != current.size()) fail(ErrorCode::MarkerSetMismatch, "marker sets differ in size");
  DeformationVerdict v;
  bool first = true;
  for (const auto& m : baseline) {
    const Marker* c = current.find(m.id);
    if (!c) fail(ErrorCode::MarkerSetMismatch, std::string("marker ") + to_string(m.id) + " missing from current set");
    const double d = distance(m.position, c->position);
    if (first || d > v.max_displacement_mm) {
      v.max_displacement_mm = d;
      v.worst = m.id;
      first = false;
    }
  }
  v.replan_recommended = v.max_displacement_mm > policy.per_marker_threshold_mm;
  return v;
}

// ---------------------------------------------------------------------------

namespace {
nlohmann::json vec(const Point3& p) { return nlohmann::json::array({p.x, p.y, p.z}); }
Point3 vec_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::InvalidArgument, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}
}  // namespace

nlohmann::json plan_to_json(const SuturePlan& plan) {
  nlohmann::json pts = nlohmann::json::array();
  for (const auto& p : plan.points)
    pts.push_back({{"index", p.index},
                   {"kind", to_string(p.kind)},
                   {"wall", to_string(p.wall)},
                   {"position", vec(p.position)},
                   {"normal", vec(p.surface_normal)},
                   {"param_mm", p.param_mm}});
  return {{"schema", "lapsim.plan"},
          {"version", 1},
          {"mode", to_string(plan.mode)},
          {"wall", to_string(plan.wall)},
          {"snapshot_id", plan.snapshot_id},
          {"corner_params", plan.corner_params},
          {"usable", plan.usable},
          {"rejection", plan.rejection},
          {"max_deviation_mm", plan.max_deviation_mm},
          {"points", pts}};
}

SuturePlan plan_from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema").get<std::string>() != "lapsim.plan") fail(ErrorCode::InvalidArgument, "not a plan document");
    SuturePlan plan;
    plan.mode = plan_mode_from_string(j.at("mode").get<std::string>());
    plan.wall = wall_from_string(j.at("wall").get<std::string>());
    plan.snapshot_id = j.at("snapshot_id").get<std::uint64_t>();
    plan.corner_params = j.value("corner_params", std::vector<double>{});
    plan.usable = j.at("usable").get<bool>();
    plan.rejection = j.value("rejection", std::string{});
    plan.max_deviation_mm = j.value("max_deviation_mm", 0.0);
    for (const auto& p : j.at("points")) {
      SuturePoint sp;
      sp.index = p.at("index").get<int>();
      sp.kind = stitch_kind_from_string(p.at("kind").get<std::string>());
      sp.wall = wall_from_string(p.at("wall").get<std::string>());
      sp.position = vec_from(p.at("position"));
      sp.surface_normal = vec_from(p.at("normal"));
      sp.param_mm = p.value("param_mm", 0.0);
      plan.points.push_back(sp);
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed plan: ") + e.what());
  }
}

}  // namespace lapsim
