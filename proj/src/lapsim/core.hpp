#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace lapsim {

// World-frame point or vector, millimeters.
struct Point3 {
  double x = 0.0;
  double y = 0.0;
  double z = 0.0;

  constexpr Point3& operator+=(const Point3& o) { x += o.x; y += o.y; z += o.z; return *this; }
  constexpr Point3& operator-=(const Point3& o) { x -= o.x; y -= o.y; z -= o.z; return *this; }
  constexpr Point3& operator*=(double s) { x *= s; y *= s; z *= s; return *this; }

  friend constexpr Point3 operator+(Point3 a, const Point3& b) { return a += b; }
  friend constexpr Point3 operator-(Point3 a, const Point3& b) { return a -= b; }
  friend constexpr Point3 operator-(const Point3& a) { return {-a.x, -a.y, -a.z}; }
  friend constexpr Point3 operator*(Point3 a, double s) { return a *= s; }
  friend constexpr Point3 operator*(double s, Point3 a) { return a *= s; }
  friend constexpr Point3 operator/(Point3 a, double s) { return {a.x / s, a.y / s, a.z / s}; }
  friend constexpr bool operator==(const Point3&, const Point3&) = default;

  bool finite() const { return std::isfinite(x) && std::isfinite(y) && std::isfinite(z); }
};

constexpr double dot(const Point3& a, const Point3& b) { return a.x * b.x + a.y * b.y + a.z * b.z; }
constexpr Point3 cross(const Point3& a, const Point3& b) {
  return {a.y * b.z - a.z * b.y, a.z * b.x - a.x * b.z, a.x * b.y - a.y * b.x};
}
inline double norm(const Point3& a) { return std::sqrt(dot(a, a)); }

// Throws InvalidArgument for the zero vector.
Point3 normalized(const Point3& a);

double distance(const Point3& a, const Point3& b);

// Closest distance from p to the segment [a, b].
double point_segment_distance(const Point3& p, const Point3& a, const Point3& b);

// Closest distance from p to an open polyline. Throws InvalidArgument when
// the polyline is empty.
double point_polyline_distance(const Point3& p, std::span<const Point3> polyline);

struct PointCloud {
  std::vector<Point3> points;
  std::uint64_t frame_id = 0;
};

// Tool pose: tip position plus unit shaft direction (from the port toward the tip).
class Pose {
 public:
  Pose() = default;
  // Normalizes `direction`; throws InvalidArgument if it is zero or non-finite.
  Pose(const Point3& position, const Point3& direction);

  const Point3& position() const { return position_; }
  const Point3& direction() const { return direction_; }

 private:
  Point3 position_{};
  Point3 direction_{0.0, 0.0, 1.0};
};

enum class Wall { Back, Front };
enum class MarkerId { Top, Left, Right, FrontLeft, FrontRight };

const char* to_string(Wall w);
const char* to_string(MarkerId id);
Wall wall_from_string(const std::string& s);
MarkerId marker_id_from_string(const std::string& s);

// Image coordinates: u is the column (grows rightward), v is the row (grows downward).
struct PixelCoord {
  double u = 0.0;
  double v = 0.0;
  friend constexpr bool operator==(const PixelCoord&, const PixelCoord&) = default;
};

// An unlabelled NIR blob as seen by the camera.
struct Blob {
  Point3 position;
  PixelCoord image_uv;
};

struct Marker {
  MarkerId id = MarkerId::Top;
  Point3 position;
  PixelCoord image_uv;
};

// Markers of one or both walls. Ids are unique within a set.
class MarkerSet {
 public:
  MarkerSet() = default;
  explicit MarkerSet(std::vector<Marker> markers);

  const std::vector<Marker>& markers() const { return markers_; }
  std::size_t size() const { return markers_.size(); }
  bool empty() const { return markers_.empty(); }

  const Marker* find(MarkerId id) const;
  const Marker& at(MarkerId id) const;  // throws MarkersMissing
  void set(const Marker& m);            // insert or replace

  // Markers belonging to one wall, in canonical id order.
  MarkerSet wall(Wall w) const;

  auto begin() const { return markers_.begin(); }
  auto end() const { return markers_.end(); }

 private:
  std::vector<Marker> markers_;
};

Wall wall_of(MarkerId id);
// Canonical suture order of marker ids on a wall.
std::vector<MarkerId> wall_marker_order(Wall w);

// Labels raw blobs. Back wall: topmost (smallest row) first, then the left and
// right of the remaining two by column. Front wall: left then right by column.
// Throws WrongMarkerCount or AmbiguousOrdering (exact tie on the deciding coordinate).
std::vector<Marker> order_markers(std::span<const Blob> blobs, Wall wall);

}  // namespace lapsim
