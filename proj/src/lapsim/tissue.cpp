#include "lapsim/tissue.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <numbers>

#include "lapsim/error.hpp"

namespace lapsim {

const char* to_string(BreathState s) { return s == BreathState::Moving ? "Moving" : "Stationary"; }

void BreathingProfile::validate() const {
  if (!(period_s > 0.0)) fail(ErrorCode::InvalidArgument, "breathing period must be positive");
  if (!(amplitude_mm >= 0.0)) fail(ErrorCode::InvalidArgument, "breathing amplitude must be non-negative");
  if (!(stationary_fraction > 0.0 && stationary_fraction < 1.0))
    fail(ErrorCode::InvalidArgument, "stationary fraction must lie in (0, 1)");
  if (std::abs(norm(axis) - 1.0) > 1e-9) fail(ErrorCode::InvalidArgument, "breathing axis must be a unit vector");
  if (!(micro_amplitude_mm >= 0.0)) fail(ErrorCode::InvalidArgument, "micro-motion amplitude must be non-negative");
}

double BreathingProfile::waveform(double phase_s) const {
  const double plateau = plateau_s();
  if (phase_s < plateau) return 0.0;
  const double tau = (phase_s - plateau) / motion_s();
  return 0.5 * amplitude_mm * (1.0 - std::cos(2.0 * std::numbers::pi * tau));
}

BreathState BreathingProfile::state_at_phase(double phase_s) const {
  return phase_s < plateau_s() ? BreathState::Stationary : BreathState::Moving;
}

TissueGeometry TissueGeometry::standard() {
  TissueGeometry g;
  auto at = [&g](MarkerId id, double x, double y) { return Marker{id, {x, y, g.surface_z(x)}, {}}; };
  g.rest_markers = MarkerSet({at(MarkerId::Top, -15.0, 12.0), at(MarkerId::Left, -15.0, 0.0),
                              at(MarkerId::Right, 15.0, 0.0), at(MarkerId::FrontLeft, -15.0, -6.0),
                              at(MarkerId::FrontRight, 15.0, -6.0)});
  return g;
}

double TissueGeometry::surface_z(double x) const {
  const double r = x / sag_half_span_mm;
  return -sag_mm * r * r;
}

std::vector<Point3> TissueGeometry::marker_polyline(Wall w) const {
  std::vector<Point3> out;
  for (MarkerId id : wall_marker_order(w)) out.push_back(rest_markers.at(id).position);
  return out;
}

Point3 TissueGeometry::inward_normal(Wall w, std::size_t segment) const {
  const auto poly = marker_polyline(w);
  const Point3 a = poly.at(segment);
  const Point3 b = poly.at(segment + 1);
  const Point3 t = normalized(Point3{b.x - a.x, b.y - a.y, 0.0});
  Point3 n{-t.y, t.x, 0.0};
  const Point3 hint = w == Wall::Back ? back_inside_hint : front_inside_hint;
  if (dot(Point3{hint.x - a.x, hint.y - a.y, 0.0}, n) < 0.0) n = -n;
  return n;
}

namespace {

struct InPlaneSegment {
  Point3 a;
  Point3 t;  // unit tangent, z = 0
  Point3 n;  // unit inward normal, z = 0
  double length;
};

std::vector<InPlaneSegment> wall_segments(const TissueGeometry& g, Wall w) {
  const auto poly = g.marker_polyline(w);
  std::vector<InPlaneSegment> segs;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
    const Point3 d{poly[i + 1].x - poly[i].x, poly[i + 1].y - poly[i].y, 0.0};
    segs.push_back({Point3{poly[i].x, poly[i].y, 0.0}, normalized(d), g.inward_normal(w, i), norm(d)});
  }
  return segs;
}

std::vector<SurfaceSample> build_surface(const TissueGeometry& g) {
  std::vector<SurfaceSample> out;
  const double sp = g.sample_spacing_mm;
  const double eps = 1e-9;
  for (Wall w : {Wall::Back, Wall::Front}) {
    const auto segs = wall_segments(g, w);
    for (std::size_t i = 0; i < segs.size(); ++i) {
      const auto& s = segs[i];
      const int ns = static_cast<int>(std::floor(s.length / sp + eps));
      const int nw = static_cast<int>(std::floor(g.ribbon_width_mm / sp + eps));
      for (int a = 0; a <= ns; ++a) {
        for (int b = 0; b <= nw; ++b) {
          const Point3 p = s.a + s.t * (a * sp) + s.n * (b * sp);
          bool covered = false;
          for (std::size_t j = 0; j < i && !covered; ++j) {
            const double sj = dot(p - segs[j].a, segs[j].t);
            const double wj = dot(p - segs[j].a, segs[j].n);
            covered = sj >= -eps && sj <= segs[j].length + eps && wj >= -eps && wj <= g.ribbon_width_mm + eps;
          }
          if (!covered) out.push_back({{p.x, p.y, g.surface_z(p.x)}, w});
        }
      }
    }
  }
  return out;
}

double wrap_phase(double t, double period) {
  double p = std::fmod(t, period);
  if (p < 0.0) p += period;
  return p;
}

}  // namespace

double TissueState::breath_phase() const { return wrap_phase(time_s, breathing.period_s); }

BreathState TissueState::breath_state() const { return breathing.state_at_phase(breath_phase()); }

Point3 TissueState::breathing_displacement() const {
  double d = breathing.waveform(breath_phase());
  if (breathing.micro_amplitude_mm > 0.0)
    d += breathing.micro_amplitude_mm * std::sin(2.0 * std::numbers::pi * breathing.micro_frequency_hz * time_s + breathing.micro_phase_rad);
  return breathing.axis * d;
}

MarkerSet TissueState::markers() const {
  MarkerSet out;
  const Point3 b = breathing_displacement();
  for (const auto& m : geometry.rest_markers) {
    Marker cur = m;
    cur.position = m.position + b + deformation_offset(m.id);
    out.set(cur);
  }
  return out;
}

std::vector<Point3> TissueState::edge_polyline(Wall w) const {
  auto poly = geometry.marker_polyline(w);
  const Point3 d = displacement(w);
  for (auto& p : poly) p += d;
  return poly;
}

std::vector<Point3> TissueState::rest_edge_curve(Wall w) const {
  const auto poly = geometry.marker_polyline(w);
  std::vector<Point3> out;
  constexpr double step_mm = 0.25;
  for (std::size_t i = 0; i + 1 < poly.size(); ++i) {
    const Point3 a{poly[i].x, poly[i].y, 0.0};
    const Point3 b{poly[i + 1].x, poly[i + 1].y, 0.0};
    const double len = distance(a, b);
    const int n = std::max(1, static_cast<int>(std::ceil(len / step_mm - 1e-9)));
    for (int k = (i == 0 ? 0 : 1); k <= n; ++k) {
      const Point3 p = a + (b - a) * (static_cast<double>(k) / n);
      out.push_back({p.x, p.y, geometry.surface_z(p.x)});
    }
  }
  return out;
}

std::vector<Point3> TissueState::edge_curve(Wall w) const {
  auto curve = rest_edge_curve(w);
  const Point3 d = displacement(w);
  for (auto& p : curve) p += d;
  return curve;
}

PointCloud TissueState::surface_cloud() const {
  PointCloud c;
  c.points.reserve(surface.size());
  for (const auto& s : surface) c.points.push_back(s.rest + displacement(s.wall));
  return c;
}

double TissueState::signed_edge_depth(const Point3& p, Wall w, double* dz) const {
  const Point3 q = p - displacement(w);
  const auto segs = wall_segments(geometry, w);
  double best_dist = std::numeric_limits<double>::infinity();
  double best_signed = 0.0;
  for (const auto& s : segs) {
    const Point3 rel{q.x - s.a.x, q.y - s.a.y, 0.0};
    const double along = std::clamp(dot(rel, s.t), 0.0, s.length);
    const Point3 foot = s.t * along;
    const double dist = norm(rel - foot);
    if (dist < best_dist) {
      best_dist = dist;
      best_signed = dot(rel, s.n) >= 0.0 ? dist : -dist;
    }
  }
  if (dz) *dz = q.z - geometry.surface_z(q.x);
  return best_signed;
}

TissueState make_tissue(const TissueGeometry& geometry, const BreathingProfile& breathing, double start_time_s) {
  breathing.validate();
  TissueState s;
  s.geometry = geometry;
  s.breathing = breathing;
  s.time_s = start_time_s;
  s.surface = build_surface(geometry);
  return s;
}

TissueState step(const TissueState& state, double dt) {
  if (!(dt > 0.0)) fail(ErrorCode::InvalidArgument, "step requires dt > 0");
  TissueState next = state;
  next.time_s += dt;
  return next;
}

double DeformationEvent::max_magnitude_mm() const { return std::max(norm(wall_delta[0]), norm(wall_delta[1])); }

TissueState inject_deformation(const TissueState& state, std::uint64_t rng_seed, MagnitudeRange range,
                               DeformationEvent* event) {
  if (!(range.min_mm >= 0.0) || range.max_mm < range.min_mm)
    fail(ErrorCode::InvalidArgument, "deformation magnitude range must satisfy 0 <= min <= max");
  std::mt19937_64 rng(rng_seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  TissueState next = state;
  DeformationEvent ev;
  for (int w = 0; w < 2; ++w) {
    Point3 dir;
    do {
      dir = {gauss(rng), gauss(rng), gauss(rng)};
    } while (norm(dir) < 1e-12);
    dir = normalized(dir);
    const double mag = range.min_mm + (range.max_mm - range.min_mm) * unit(rng);
    ev.wall_delta[w] = dir * mag;
    next.wall_offset[w] += ev.wall_delta[w];
  }
  if (event) *event = ev;
  return next;
}

void camera_basis(const Point3& forward, Point3* right, Point3* down) {
  const Point3 f = normalized(forward);
  Point3 up{0.0, 1.0, 0.0};
  if (std::abs(dot(f, up)) > 0.99) up = {0.0, 0.0, 1.0};
  const Point3 r = normalized(cross(f, up));
  *right = r;
  *down = cross(f, r);
}

bool project(const Point3& p, const Pose& camera, const CameraModel& model, PixelCoord* uv, double* depth) {
  Point3 right, down;
  camera_basis(camera.direction(), &right, &down);
  const Point3 rel = p - camera.position();
  const double z = dot(rel, camera.direction());
  if (depth) *depth = z;
  if (!(z > 1e-6)) return false;
  const double cx = 0.5 * (model.width - 1);
  const double cy = 0.5 * (model.height - 1);
  const PixelCoord out{cx + model.focal_px * dot(rel, right) / z, cy + model.focal_px * dot(rel, down) / z};
  if (uv) *uv = out;
  return out.u >= 0.0 && out.u <= model.width - 1 && out.v >= 0.0 && out.v <= model.height - 1;
}

NirFrame render_markers(const MarkerSet& markers, double timestamp_s, const Pose& camera, const CameraModel& model,
                        std::mt19937_64* noise_rng) {
  if (markers.empty()) fail(ErrorCode::InvalidArgument, "no markers to render");
  Point3 centroid;
  for (const auto& m : markers) centroid += m.position;
  centroid = centroid / static_cast<double>(markers.size());
  const double range = dot(centroid - camera.position(), camera.direction());
  if (range < model.min_distance_mm - 1e-9 || range > model.max_distance_mm + 1e-9)
    fail(ErrorCode::InvalidArgument, "camera distance " + std::to_string(range) + " mm outside the imaging range");

  NirFrame frame;
  frame.width = model.width;
  frame.height = model.height;
  frame.timestamp_s = timestamp_s;
  frame.distance_mm = range;
  std::vector<double> acc(static_cast<std::size_t>(model.width) * model.height, 0.0);

  for (const auto& m : markers) {
    PixelCoord uv;
    double z = 0.0;
    if (!project(m.position, camera, model, &uv, &z))
      fail(ErrorCode::MarkerOutOfView, std::string("marker ") + to_string(m.id) + " projects outside the frame");
    const double sigma = model.focal_px * model.marker_radius_mm / z;
    const double peak = model.gain * model.base_intensity * std::pow(model.reference_distance_mm / z, model.falloff_exponent);
    const double reach = 4.0 * sigma;
    const int c0 = std::max(0, static_cast<int>(std::floor(uv.u - reach)));
    const int c1 = std::min(model.width - 1, static_cast<int>(std::ceil(uv.u + reach)));
    const int r0 = std::max(0, static_cast<int>(std::floor(uv.v - reach)));
    const int r1 = std::min(model.height - 1, static_cast<int>(std::ceil(uv.v + reach)));
    const double inv = 1.0 / (2.0 * sigma * sigma);
    for (int r = r0; r <= r1; ++r) {
      const double dv = r - uv.v;
      double* row = acc.data() + static_cast<std::size_t>(r) * model.width;
      for (int c = c0; c <= c1; ++c) {
        const double du = c - uv.u;
        row[c] += peak * std::exp(-(du * du + dv * dv) * inv);
      }
    }
  }

  frame.pixels.resize(acc.size());
  if (model.noise_sigma > 0.0 && noise_rng) {
    std::normal_distribution<double> noise(0.0, model.noise_sigma);
    for (std::size_t i = 0; i < acc.size(); ++i)
      frame.pixels[i] = static_cast<float>(std::clamp(acc[i] + noise(*noise_rng), 0.0, 1.0));
  } else {
    for (std::size_t i = 0; i < acc.size(); ++i) frame.pixels[i] = static_cast<float>(std::clamp(acc[i], 0.0, 1.0));
  }
  return frame;
}

NirFrame render_nir(const TissueState& state, const Pose& camera, const CameraModel& model,
                    std::mt19937_64* noise_rng) {
  return render_markers(state.markers(), state.time_s, camera, model, noise_rng);
}

std::vector<BlobCentroid> extract_blobs(const NirFrame& frame, double threshold) {
  std::vector<BlobCentroid> out;
  std::vector<char> seen(frame.pixels.size(), 0);
  std::deque<int> queue;
  for (int start = 0; start < static_cast<int>(frame.pixels.size()); ++start) {
    if (seen[start] || frame.pixels[start] < threshold) continue;
    BlobCentroid blob;
    double su = 0.0, sv = 0.0;
    seen[start] = 1;
    queue.push_back(start);
    while (!queue.empty()) {
      const int idx = queue.front();
      queue.pop_front();
      const int r = idx / frame.width;
      const int c = idx % frame.width;
      const double w = frame.pixels[idx];
      blob.mass += w;
      su += w * c;
      sv += w * r;
      ++blob.pixel_count;
      for (int dr = -1; dr <= 1; ++dr) {
        for (int dc = -1; dc <= 1; ++dc) {
          const int rr = r + dr, cc = c + dc;
          if (rr < 0 || cc < 0 || rr >= frame.height || cc >= frame.width) continue;
          const int n = rr * frame.width + cc;
          if (!seen[n] && frame.pixels[n] >= threshold) {
            seen[n] = 1;
            queue.push_back(n);
          }
        }
      }
    }
    blob.uv = {su / blob.mass, sv / blob.mass};
    out.push_back(blob);
  }
  std::stable_sort(out.begin(), out.end(), [](const BlobCentroid& a, const BlobCentroid& b) { return a.mass > b.mass; });
  return out;
}

PointCloud capture_cloud(const TissueState& state, double noise_sigma_mm, std::mt19937_64& rng,
                         std::uint64_t frame_id) {
  if (state.breath_state() != BreathState::Stationary)
    fail(ErrorCode::TissueMoving, "point cloud capture requested while the tissue is moving");
  if (noise_sigma_mm < 0.0) fail(ErrorCode::InvalidArgument, "noise sigma must be non-negative");
  PointCloud cloud = state.surface_cloud();
  cloud.frame_id = frame_id;
  if (noise_sigma_mm > 0.0) {
    std::normal_distribution<double> noise(0.0, noise_sigma_mm);
    for (auto& p : cloud.points) {
      p.x += noise(rng);
      p.y += noise(rng);
      p.z += noise(rng);
    }
  }
  return cloud;
}

}  // namespace lapsim
