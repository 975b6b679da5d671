#include <algorithm>
#include <cmath>
#include <random>

#include "doctest.h"
#include "lapsim/error.hpp"
#include "lapsim/tissue.hpp"

using namespace lapsim;

namespace {
TissueState standard_tissue(double t = 0.0) { return make_tissue(TissueGeometry::standard(), BreathingProfile{}, t); }

ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(0);
}

Pose overhead_camera(const TissueState& s, double distance_mm) {
  Point3 lo{1e9, 1e9, 1e9}, hi{-1e9, -1e9, -1e9};
  for (const auto& m : s.markers()) {
    lo = {std::min(lo.x, m.position.x), std::min(lo.y, m.position.y), std::min(lo.z, m.position.z)};
    hi = {std::max(hi.x, m.position.x), std::max(hi.y, m.position.y), std::max(hi.z, m.position.z)};
  }
  const Point3 c = (lo + hi) * 0.5;
  return Pose(c + Point3{0, 0, distance_mm}, {0, 0, -1});
}
}  // namespace

TEST_CASE("plateau is flat and stationary") {
  const BreathingProfile b;
  const auto s = standard_tissue(0.5 * b.plateau_s());
  const auto s2 = step(s, 1e-3);
  CHECK(s.breath_state() == BreathState::Stationary);
  CHECK(s2.breath_state() == BreathState::Stationary);
  CHECK(distance(s.breathing_displacement(), s2.breathing_displacement()) == 0.0);
}

TEST_CASE("motion peak displaces markers by the amplitude") {
  const BreathingProfile b;
  const auto s = standard_tissue(b.plateau_s() + 0.5 * b.motion_s());
  const auto rest = standard_tissue(0.0);
  CHECK(std::abs(distance(s.markers().at(MarkerId::Top).position, rest.markers().at(MarkerId::Top).position) - 3.0) <
        1e-12);
  CHECK(s.breath_state() == BreathState::Moving);
}

TEST_CASE("stepping by a full period is periodic") {
  const auto s = standard_tissue(1.234);
  const auto s2 = step(s, s.breathing.period_s);
  CHECK(std::abs(s.breathing_displacement().y - s2.breathing_displacement().y) < 1e-9);
  CHECK(code_of([&] { step(s, 0.0); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("two transitions per period and plateau duration") {
  const BreathingProfile b;
  const double dt = 1e-3;
  auto s = standard_tissue(0.0);
  int transitions = 0;
  int stationary_steps = 0;
  BreathState prev = s.breath_state();
  const int n = static_cast<int>(std::round(3 * b.period_s / dt));
  for (int i = 0; i < n; ++i) {
    s = step(s, dt);
    if (s.breath_state() != prev) ++transitions;
    if (s.breath_state() == BreathState::Stationary) ++stationary_steps;
    prev = s.breath_state();
  }
  CHECK(transitions >= 5);
  CHECK(transitions <= 6);
  CHECK(std::abs(stationary_steps * dt / 3.0 - b.plateau_s()) <= dt);
}

TEST_CASE("deformation injection") {
  const auto s = standard_tissue();
  const auto same = inject_deformation(s, 3, {0.0, 0.0});
  for (const auto& m : s.markers()) CHECK(distance(m.position, same.markers().at(m.id).position) == 0.0);

  DeformationEvent ev;
  const auto d = inject_deformation(s, 5, {4.0, 6.0}, &ev);
  for (const auto& m : s.markers()) {
    const double moved = distance(m.position, d.markers().at(m.id).position);
    CHECK(moved >= 4.0 - 1e-12);
    CHECK(moved <= 6.0 + 1e-12);
    CHECK(std::abs(moved - norm(ev.wall_delta[static_cast<int>(wall_of(m.id))])) < 1e-12);
  }
  DeformationEvent ev2;
  const auto d2 = inject_deformation(d, 6, {4.0, 6.0}, &ev2);
  const Point3 expect = ev.wall_delta[0] + ev2.wall_delta[0];
  CHECK(distance(d2.wall_offset[0], expect) < 1e-12);
}

TEST_CASE("render: axis marker lands on the image center") {
  MarkerSet one({{MarkerId::Top, {0, 0, 0}, {}}});
  const CameraModel model;
  const auto f = render_markers(one, 0.0, Pose({0, 0, 65}, {0, 0, -1}), model);
  const auto blobs = extract_blobs(f, 0.05);
  REQUIRE(blobs.size() == 1);
  CHECK(std::abs(blobs[0].uv.u - 0.5 * (model.width - 1)) < 1e-6);
  CHECK(std::abs(blobs[0].uv.v - 0.5 * (model.height - 1)) < 1e-6);
}

TEST_CASE("render: blob size ratio follows distance") {
  MarkerSet one({{MarkerId::Top, {0, 0, 0}, {}}});
  CameraModel model;
  model.falloff_exponent = 0.0;
  auto second_moment = [&](double z) {
    const auto f = render_markers(one, 0.0, Pose({0, 0, z}, {0, 0, -1}), model);
    double m = 0, s = 0;
    const double cx = 0.5 * (f.width - 1), cy = 0.5 * (f.height - 1);
    for (int r = 0; r < f.height; ++r)
      for (int c = 0; c < f.width; ++c) {
        const double w = f.at(r, c);
        m += w;
        s += w * ((c - cx) * (c - cx) + (r - cy) * (r - cy));
      }
    return std::sqrt(s / m / 2.0);
  };
  CHECK(second_moment(30.0) / second_moment(100.0) == doctest::Approx(100.0 / 30.0).epsilon(0.01));
}

TEST_CASE("render errors") {
  MarkerSet behind({{MarkerId::Top, {0, 0, 0}, {}}, {MarkerId::Left, {0, 0, 69}, {}}});
  CHECK(code_of([&] { render_markers(behind, 0.0, Pose({0, 0, 65}, {0, 0, -1}), CameraModel{}); }) ==
        ErrorCode::MarkerOutOfView);
}

TEST_CASE("render then extract recovers projections within half a pixel") {
  const CameraModel model;
  for (double t : {0.1, 2.0, 3.3}) {
    const auto s = standard_tissue(t);
    for (double dist : {30.0, 65.0, 100.0}) {
      const Pose cam = overhead_camera(s, dist);
      const auto f = render_nir(s, cam, model);
      const auto blobs = extract_blobs(f, 0.15);
      REQUIRE(blobs.size() == 5);
      for (const auto& m : s.markers()) {
        PixelCoord uv;
        REQUIRE(project(m.position, cam, model, &uv, nullptr));
        double best = 1e9;
        for (const auto& b : blobs) best = std::min(best, std::hypot(b.uv.u - uv.u, b.uv.v - uv.v));
        CHECK(best < 0.5);
      }
    }
  }
}

TEST_CASE("capture_cloud") {
  std::mt19937_64 rng(1);
  const auto s = standard_tissue(0.2);
  const auto exact = capture_cloud(s, 0.0, rng);
  CHECK(exact.points.size() == s.surface.size());
  for (std::size_t i = 0; i < exact.points.size(); ++i) CHECK(exact.points[i] == s.surface[i].rest);

  const auto noisy = capture_cloud(s, 0.2, rng);
  REQUIRE(noisy.points.size() >= 1000);
  double acc = 0.0;
  std::size_t n = 0;
  for (int rep = 0; rep < 20; ++rep) {
    const auto c = capture_cloud(s, 0.2, rng);
    for (std::size_t i = 0; i < c.points.size(); ++i, ++n) {
      const double d = distance(c.points[i], exact.points[i]);
      acc += d * d;
    }
  }
  REQUIRE(n >= 10000);
  CHECK(std::sqrt(acc / n) == doctest::Approx(0.2 * std::sqrt(3.0)).epsilon(0.02));

  const auto moving = standard_tissue(3.0);
  CHECK(code_of([&] { capture_cloud(moving, 0.0, rng); }) == ErrorCode::TissueMoving);
}

TEST_CASE("edge depth of the marker line is zero and the ribbon lies inside") {
  const auto s = standard_tissue(0.0);
  for (const auto& p : s.rest_edge_curve(Wall::Back)) CHECK(std::abs(s.signed_edge_depth(p, Wall::Back)) < 1e-9);
  for (const auto& smp : s.surface) CHECK(s.signed_edge_depth(smp.rest, smp.wall) >= -1e-9);
}
