#include "lapsim/core.hpp"

#include <algorithm>
#include <limits>

#include "lapsim/error.hpp"

namespace lapsim {

Point3 normalized(const Point3& a) {
  const double n = norm(a);
  if (!(n > 0.0) || !std::isfinite(n)) fail(ErrorCode::InvalidArgument, "cannot normalize a zero or non-finite vector");
  return a / n;
}

double distance(const Point3& a, const Point3& b) { return norm(a - b); }

double point_segment_distance(const Point3& p, const Point3& a, const Point3& b) {
  const Point3 ab = b - a;
  const double len2 = dot(ab, ab);
  if (len2 == 0.0) return distance(p, a);
  const double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return distance(p, a + ab * t);
}

double point_polyline_distance(const Point3& p, std::span<const Point3> polyline) {
  if (polyline.empty()) fail(ErrorCode::InvalidArgument, "empty polyline");
  if (polyline.size() == 1) return distance(p, polyline.front());
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i + 1 < polyline.size(); ++i)
    best = std::min(best, point_segment_distance(p, polyline[i], polyline[i + 1]));
  return best;
}

Pose::Pose(const Point3& position, const Point3& direction) : position_(position) {
  if (!position.finite()) fail(ErrorCode::InvalidArgument, "pose position is not finite");
  direction_ = normalized(direction);
}

const char* to_string(Wall w) { return w == Wall::Back ? "back" : "front"; }

const char* to_string(MarkerId id) {
  switch (id) {
    case MarkerId::Top: return "Top";
    case MarkerId::Left: return "Left";
    case MarkerId::Right: return "Right";
    case MarkerId::FrontLeft: return "FrontLeft";
    case MarkerId::FrontRight: return "FrontRight";
  }
  return "?";
}

Wall wall_from_string(const std::string& s) {
  if (s == "back") return Wall::Back;
  if (s == "front") return Wall::Front;
  fail(ErrorCode::InvalidArgument, "unknown wall '" + s + "'");
}

MarkerId marker_id_from_string(const std::string& s) {
  for (MarkerId id : {MarkerId::Top, MarkerId::Left, MarkerId::Right, MarkerId::FrontLeft, MarkerId::FrontRight})
    if (s == to_string(id)) return id;
  fail(ErrorCode::InvalidArgument, "unknown marker id '" + s + "'");
}

Wall wall_of(MarkerId id) {
  return (id == MarkerId::FrontLeft || id == MarkerId::FrontRight) ? Wall::Front : Wall::Back;
}

std::vector<MarkerId> wall_marker_order(Wall w) {
  if (w == Wall::Back) return {MarkerId::Top, MarkerId::Left, MarkerId::Right};
  return {MarkerId::FrontLeft, MarkerId::FrontRight};
}

MarkerSet::MarkerSet(std::vector<Marker> markers) {
  for (const auto& m : markers) {
    if (find(m.id)) fail(ErrorCode::InvalidArgument, std::string("duplicate marker id ") + to_string(m.id));
    markers_.push_back(m);
  }
}

const Marker* MarkerSet::find(MarkerId id) const {
  for (const auto& m : markers_)
    if (m.id == id) return &m;
  return nullptr;
}

const Marker& MarkerSet::at(MarkerId id) const {
  const Marker* m = find(id);
  if (!m) fail(ErrorCode::MarkersMissing, std::string("marker ") + to_string(id) + " not in set");
  return *m;
}

void MarkerSet::set(const Marker& m) {
  for (auto& existing : markers_) {
    if (existing.id == m.id) {
      existing = m;
      return;
    }
  }
  markers_.push_back(m);
}

MarkerSet MarkerSet::wall(Wall w) const {
  std::vector<Marker> out;
  for (MarkerId id : wall_marker_order(w))
    if (const Marker* m = find(id)) out.push_back(*m);
  return MarkerSet(std::move(out));
}

std::vector<Marker> order_markers(std::span<const Blob> blobs, Wall wall) {
  const std::size_t expected = wall == Wall::Back ? 3 : 2;
  if (blobs.size() != expected)
    fail(ErrorCode::WrongMarkerCount, std::string(to_string(wall)) + " wall needs " + std::to_string(expected) +
                                          " markers, got " + std::to_string(blobs.size()));

  std::vector<Blob> rest(blobs.begin(), blobs.end());
  std::vector<Marker> out;

  if (wall == Wall::Back) {
    auto top = std::min_element(rest.begin(), rest.end(),
                                [](const Blob& a, const Blob& b) { return a.image_uv.v < b.image_uv.v; });
    for (auto it = rest.begin(); it != rest.end(); ++it)
      if (it != top && it->image_uv.v == top->image_uv.v)
        fail(ErrorCode::AmbiguousOrdering, "two blobs share the topmost row");
    out.push_back({MarkerId::Top, top->position, top->image_uv});
    rest.erase(top);
  }

  if (rest[0].image_uv.u == rest[1].image_uv.u)
    fail(ErrorCode::AmbiguousOrdering, "left/right blobs share a column");
  if (rest[1].image_uv.u < rest[0].image_uv.u) std::swap(rest[0], rest[1]);

  const MarkerId left = wall == Wall::Back ? MarkerId::Left : MarkerId::FrontLeft;
  const MarkerId right = wall == Wall::Back ? MarkerId::Right : MarkerId::FrontRight;
  out.push_back({left, rest[0].position, rest[0].image_uv});
  out.push_back({right, rest[1].position, rest[1].image_uv});
  return out;
}

}  // namespace lapsim
