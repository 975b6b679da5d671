#include <cmath>
#include <random>

#include "doctest.h"
#include "lapsim/error.hpp"
#include "lapsim/planner.hpp"
#include "lapsim/tissue.hpp"

using namespace lapsim;

namespace {
ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(0);
}

// Flat tissue strip below a straight front edge from (x0,-6) to (x1,-6).
struct FlatEdge {
  PointCloud cloud;
  MarkerSet markers;
};
FlatEdge flat_edge(double x0, double x1) {
  FlatEdge e;
  for (double x = x0 - 2.0; x <= x1 + 2.0 + 1e-9; x += 0.5)
    for (double y = -14.0; y < -6.0 + 1e-9; y += 0.5) e.cloud.points.push_back({x, y, 0.0});
  e.markers = MarkerSet({{MarkerId::FrontLeft, {x0, -6, 0}, {}}, {MarkerId::FrontRight, {x1, -6, 0}, {}}});
  return e;
}

TissueState rest_tissue() { return make_tissue(TissueGeometry::standard(), BreathingProfile{}, 0.1); }

PointCloud clean_cloud(const TissueState& s, std::uint64_t id = 0) {
  std::mt19937_64 rng(0);
  return capture_cloud(s, 0.0, rng, id);
}

std::size_t brute_count(const PointCloud& c, const ToolFrame& f, const Box& b) {
  std::size_t n = 0;
  for (const auto& p : c.points)
    if (b.contains(f.to_local(p))) ++n;
  return n;
}
}  // namespace

TEST_CASE("uniform plan on a straight 30 mm edge") {
  const auto e = flat_edge(-15, 15);
  const auto plans = generate_plans(e.cloud, e.markers, Wall::Front, {});
  REQUIRE(plans.uniform.points.size() == 11);
  for (std::size_t i = 0; i < 11; ++i) {
    const auto& p = plans.uniform.points[i];
    CHECK(p.index == static_cast<int>(i));
    CHECK(p.wall == Wall::Front);
    CHECK(p.position.x == doctest::Approx(-15.0 + 3.0 * i));
    CHECK(p.position.y == doctest::Approx(-9.0));
    CHECK(std::abs(p.position.z) < 1e-9);
    CHECK(p.surface_normal.z == doctest::Approx(1.0));
    if (i > 0) CHECK(std::abs(distance(p.position, plans.uniform.points[i - 1].position) - 3.0) < 1e-9);
  }
  CHECK(plans.uniform.points[0].kind == StitchKind::Knot);
  CHECK(plans.uniform.points[1].kind == StitchKind::Running);
  CHECK(plans.uniform.mode == PlanMode::Uniform);
}

TEST_CASE("corner-reinforced plan adds a stitch at S/2 from each end") {
  const auto e = flat_edge(-15, 15);
  const auto plans = generate_plans(e.cloud, e.markers, Wall::Front, {});
  const auto& pts = plans.corner.points;
  REQUIRE(pts.size() == 13);
  CHECK(pts[0].kind == StitchKind::Knot);
  CHECK(pts[1].kind == StitchKind::Corner);
  CHECK(pts[1].position.x == doctest::Approx(-13.5));
  CHECK(pts[11].kind == StitchKind::Corner);
  CHECK(pts[11].position.x == doctest::Approx(13.5));
  int knots = 0;
  for (const auto& p : pts) knots += p.kind == StitchKind::Knot;
  CHECK(knots == 1);
}

TEST_CASE("planning errors") {
  const auto e = flat_edge(-2, 2);
  CHECK(code_of([&] { generate_plans(e.cloud, e.markers, Wall::Front, {}); }) == ErrorCode::DegenerateGeometry);
  const auto ok = flat_edge(-15, 15);
  CHECK(code_of([&] { generate_plans(ok.cloud, ok.markers, Wall::Back, {}); }) == ErrorCode::MarkersMissing);
  PlanParameters bad;
  bad.spacing_mm = 0.0;
  CHECK(code_of([&] { generate_plans(ok.cloud, ok.markers, Wall::Front, bad); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([&] { generate_plans(PointCloud{}, ok.markers, Wall::Front, {}); }) == ErrorCode::DegenerateGeometry);
}

TEST_CASE("standard tissue plans sit one bite depth inside the edge") {
  const auto s = rest_tissue();
  const auto cloud = clean_cloud(s, 42);
  const auto back = generate_plans(cloud, s.markers(), Wall::Back, {});
  const auto front = generate_plans(cloud, s.markers(), Wall::Front, {});
  CHECK(back.uniform.points.size() == 13);
  CHECK(back.corner.points.size() == 17);
  CHECK(front.uniform.points.size() == 11);
  CHECK(front.corner.points.size() == 13);
  CHECK(back.uniform.snapshot_id == 42);
  REQUIRE(back.uniform.corner_params.size() == 1);
  CHECK(back.uniform.corner_params[0] == doctest::Approx(9.0));
  for (const auto* plan : {&back.uniform, &back.corner, &front.uniform, &front.corner})
    for (const auto& p : plan->points) {
      double dz = 0.0;
      CHECK(s.signed_edge_depth(p.position, p.wall, &dz) == doctest::Approx(3.0).epsilon(1e-6));
      CHECK(std::abs(dz) < 1e-9);
    }
  for (std::size_t i = 1; i < back.uniform.points.size(); ++i)
    CHECK(distance(back.uniform.points[i].position, back.uniform.points[i - 1].position) ==
          doctest::Approx(3.0).epsilon(0.01));
}

TEST_CASE("generate_plans is deterministic") {
  const auto s = rest_tissue();
  std::mt19937_64 r1(5), r2(5);
  const auto c1 = capture_cloud(s, 0.2, r1), c2 = capture_cloud(s, 0.2, r2);
  const auto a = generate_plans(c1, s.markers(), Wall::Back, {});
  const auto b = generate_plans(c2, s.markers(), Wall::Back, {});
  CHECK(plan_to_json(a.corner).dump() == plan_to_json(b.corner).dump());
}

TEST_CASE("prefilter leaves a noise-free plan unchanged") {
  const auto s = rest_tissue();
  const auto cloud = clean_cloud(s);
  for (Wall w : {Wall::Back, Wall::Front}) {
    const auto plans = generate_plans(cloud, s.markers(), w, {});
    for (const auto* plan : {&plans.uniform, &plans.corner}) {
      const auto f = prefilter(*plan, cloud);
      CHECK(f.usable);
      REQUIRE(f.points.size() == plan->points.size());
      for (std::size_t i = 0; i < f.points.size(); ++i)
        CHECK(distance(f.points[i].position, plan->points[i].position) < 1e-6);
    }
  }
}

TEST_CASE("prefilter rejects a displaced point") {
  const auto s = rest_tissue();
  const auto cloud = clean_cloud(s);
  for (Wall w : {Wall::Back, Wall::Front}) {
    auto plan = generate_plans(cloud, s.markers(), w, {}).uniform;
    const std::size_t k = plan.points.size() - 4;
    plan.points[k].position += Point3{0.0, 3.0, 0.0};
    const auto f = prefilter(plan, cloud);
    CHECK_FALSE(f.usable);
    CHECK(f.rejection == "Noisy");
    CHECK(f.max_deviation_mm > 1.0);
  }
}

TEST_CASE("prefilter rejects flipped normals") {
  const auto s = rest_tissue();
  const auto cloud = clean_cloud(s);
  auto plan = generate_plans(cloud, s.markers(), Wall::Front, {}).uniform;
  plan.points[3].surface_normal = plan.points[3].surface_normal * -1.0;
  // Without a cloud the plan's own normals are checked.
  const auto f = prefilter(plan, PointCloud{});
  CHECK_FALSE(f.usable);
  CHECK(f.rejection == "Noisy");
}

TEST_CASE("prefilter accepts plans at scenario noise") {
  const auto s = rest_tissue();
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    std::mt19937_64 rng(seed);
    const auto cloud = capture_cloud(s, 0.2, rng);
    for (Wall w : {Wall::Back, Wall::Front}) {
      const auto plans = generate_plans(cloud, s.markers(), w, {});
      const auto f = prefilter(plans.corner, cloud);
      CHECK(f.usable);
      CHECK(f.max_deviation_mm < 1.0);
    }
  }
}

TEST_CASE("collision verdict arithmetic") {
  CHECK(collision_verdict(0, 10, 0.8).usable);
  CHECK(collision_verdict(0, 10, 0.8).ratio == 0.0);
  const auto warn = collision_verdict(9, 10, 0.8);
  CHECK_FALSE(warn.usable);
  CHECK(warn.reason == CollisionReason::RatioExceeded);
  CHECK(collision_verdict(8, 10, 0.8).usable);
  const auto empty = collision_verdict(0, 0, 0.8);
  CHECK_FALSE(empty.usable);
  CHECK(empty.reason == CollisionReason::EmptyJaw);
  CollisionPolicy p;
  p.ratio_threshold = 1.0;
  CHECK(code_of([&] { p.validate(); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("collision index matches brute force") {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> u(-20.0, 20.0), ud(-1.0, 1.0);
  PointCloud cloud;
  for (int i = 0; i < 1000; ++i) cloud.points.push_back({u(rng), u(rng), 0.3 * u(rng)});
  const CollisionIndex index(cloud);
  const CollisionPolicy policy;
  for (int t = 0; t < 100; ++t) {
    Point3 dir{ud(rng), ud(rng), ud(rng)};
    if (norm(dir) < 0.1) dir = {0, 0, -1};
    const Pose pose({0.5 * u(rng), 0.5 * u(rng), 0.1 * u(rng)}, dir);
    const ToolFrame f = ToolFrame::from_pose(pose);
    CHECK(index.count_in_box(f, policy.jaw_capture_box) == brute_count(cloud, f, policy.jaw_capture_box));
    CHECK(index.count_in_box(f, policy.tool_body_box) == brute_count(cloud, f, policy.tool_body_box));
  }
}

TEST_CASE("tool frame is orthonormal") {
  const ToolFrame f = ToolFrame::from_pose(Pose({1, 2, 3}, {1, 0, 0}));
  CHECK(std::abs(dot(f.x, f.z)) < 1e-12);
  CHECK(std::abs(dot(f.y, f.z)) < 1e-12);
  CHECK(norm(f.x) == doctest::Approx(1.0));
  const Point3 q{0.3, -0.7, 2.0};
  CHECK(distance(f.to_local(f.to_world(q)), q) < 1e-12);
}

TEST_CASE("a tool approaching the tissue surface from above fits tissue in its jaw") {
  const auto s = rest_tissue();
  const auto cloud = clean_cloud(s);
  const auto plan = generate_plans(cloud, s.markers(), Wall::Front, {}).uniform;
  const Point3 tip = plan.points[5].position;
  const auto v = predict_collision(Pose(tip, tip - Point3{0, -100, 100}), cloud);
  CHECK(v.fitting > 0);
  const auto above = predict_collision(Pose(tip + Point3{0, 0, 20}, {0, 0, -1}), cloud);
  CHECK(above.reason == CollisionReason::EmptyJaw);
}

TEST_CASE("deformation rule") {
  const MarkerSet base = TissueGeometry::standard().rest_markers;
  CHECK_FALSE(check_deformation(base, base).replan_recommended);
  CHECK(check_deformation(base, base).max_displacement_mm == 0.0);

  auto moved = [&](MarkerId id, Point3 d) {
    MarkerSet m = base;
    Marker k = m.at(id);
    k.position += d;
    m.set(k);
    return m;
  };
  const auto v = check_deformation(base, moved(MarkerId::Right, {0, 3.1, 0}));
  CHECK(v.replan_recommended);
  CHECK(v.max_displacement_mm == doctest::Approx(3.1));
  CHECK(v.worst == MarkerId::Right);

  MarkerSet all = base;
  for (const auto& m : base) {
    Marker k = m;
    k.position += Point3{3.0, 0, 0};
    all.set(k);
  }
  const auto b = check_deformation(base, all);
  CHECK(b.max_displacement_mm == 3.0);
  CHECK_FALSE(b.replan_recommended);

  MarkerSet partial({base.markers()[0]});
  CHECK(code_of([&] { check_deformation(base, partial); }) == ErrorCode::MarkerSetMismatch);
}

TEST_CASE("deformation verdict is invariant to a common translation") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  const MarkerSet base = TissueGeometry::standard().rest_markers;
  for (int t = 0; t < 200; ++t) {
    MarkerSet cur = base;
    for (const auto& m : base) {
      Marker k = m;
      k.position += Point3{0.5 * u(rng), 0.5 * u(rng), 0.1 * u(rng)};
      cur.set(k);
    }
    const Point3 shift{u(rng), u(rng), u(rng)};
    MarkerSet b2 = base, c2 = cur;
    for (const auto& m : base) {
      Marker k = m;
      k.position += shift;
      b2.set(k);
      Marker kc = cur.at(m.id);
      kc.position += shift;
      c2.set(kc);
    }
    CHECK(check_deformation(base, cur).replan_recommended == check_deformation(b2, c2).replan_recommended);
  }
}

TEST_CASE("plan JSON round-trip") {
  const auto s = rest_tissue();
  const auto cloud = clean_cloud(s, 9);
  const auto plan = generate_plans(cloud, s.markers(), Wall::Back, {}).corner;
  const auto back = plan_from_json(nlohmann::json::parse(plan_to_json(plan).dump()));
  CHECK(plan_to_json(back) == plan_to_json(plan));
  CHECK(code_of([] { plan_from_json(nlohmann::json{{"schema", "other"}}); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { plan_from_json(nlohmann::json::object()); }) == ErrorCode::InvalidArgument);
}
