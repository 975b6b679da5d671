#include <cmath>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "lapsim/error.hpp"
#include "lapsim/motion.hpp"

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

// One marker at (0, y, 0) seen from 65 mm straight above.
NirFrame single_marker_frame(double y, double t) {
  MarkerSet one({{MarkerId::Top, {0, y, 0}, {}}});
  auto f = render_markers(one, t, Pose({0, 0, 65}, {0, 0, -1}), CameraModel{});
  return f;
}

int grid_row_of(double y, int grid) {
  const CameraModel m;
  PixelCoord uv;
  project({0, y, 0}, Pose({0, 0, 65}, {0, 0, -1}), m, &uv, nullptr);
  return static_cast<int>(uv.v * grid / m.height);
}
}  // namespace

TEST_CASE("downsample averages blocks") {
  NirFrame f;
  f.width = 4;
  f.height = 4;
  f.pixels.assign(16, 0.0f);
  f.pixels[0] = 4.0f;
  const Grid g = downsample(f, 2);
  CHECK(g.values[0] == 1.0f);
  CHECK(g.values[3] == 0.0f);
  CHECK(code_of([&] { downsample(f, 0); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("static scene encodes to an empty direction channel") {
  std::vector<NirFrame> frames;
  for (int i = 0; i < 41; ++i) frames.push_back(single_marker_frame(0.0, i * 0.05));
  const auto enc = encode(frames);
  CHECK(enc.size == 128);
  CHECK(enc.window_s == doctest::Approx(2.0));
  float dmax = 0.0f;
  for (float v : enc.direction) dmax = std::max(dmax, v);
  CHECK(dmax == 0.0f);
  const Grid g = downsample(frames.back(), 128);
  const float peak = *std::max_element(g.values.begin(), g.values.end());
  for (std::size_t i = 0; i < g.values.size(); ++i) CHECK(enc.history[i] == doctest::Approx(g.values[i] / peak));
}

TEST_CASE("translating marker leaves a streak with direction energy at both ends") {
  std::vector<NirFrame> frames;
  for (int i = 0; i < 41; ++i) frames.push_back(single_marker_frame(3.0 * i / 40.0, i * 0.05));
  const auto enc = encode(frames);
  const int col = 64;
  const int r0 = grid_row_of(0.0, 128), r1 = grid_row_of(3.0, 128), rm = grid_row_of(1.5, 128);
  auto at = [&](const std::vector<float>& ch, int r) { return ch[static_cast<std::size_t>(r) * 128 + col]; };
  CHECK(at(enc.direction, r0) > 0.1f);
  CHECK(at(enc.direction, r1) > 0.5f);
  CHECK(at(enc.direction, rm) < 0.05f);
  // the history covers the whole path, brightest at the newest position
  CHECK(at(enc.history, rm) > 0.2f);
  CHECK(at(enc.history, r1) > at(enc.history, rm));
  CHECK(at(enc.history, rm) > at(enc.history, r0) - 1e-6f);
}

TEST_CASE("encode rejects short windows") {
  std::vector<NirFrame> frames;
  for (int i = 0; i < 20; ++i) frames.push_back(single_marker_frame(0.0, i * 0.05));
  CHECK(code_of([&] { encode(frames); }) == ErrorCode::WindowTooShort);
  CHECK(code_of([&] { encode(std::span<const NirFrame>{}); }) == ErrorCode::WindowTooShort);
}

TEST_CASE("flow detector on identical frames reports Stationary") {
  std::vector<NirFrame> frames(5, single_marker_frame(0.0, 0.0));
  FlowDetector det;
  det.threshold = 1e-12;
  CHECK(classify_of(frames, det) == BreathState::Stationary);
  std::vector<NirFrame> moving;
  for (int i = 0; i < 5; ++i) moving.push_back(single_marker_frame(0.5 * i, 0.05 * i));
  CHECK(classify_of(moving, det) == BreathState::Moving);
  CHECK(code_of([&] { classify_of(std::span<const NirFrame>(frames).first(1), det); }) ==
        ErrorCode::InvalidArgument);
}

TEST_CASE("adjustable threshold uses the nearest table entry") {
  FlowDetector det;
  det.threshold = 5.0;
  det.table = {{30.0, 1.0}, {100.0, 3.0}};
  CHECK(det.threshold_for(40.0) == 5.0);
  det.adjustable = true;
  CHECK(det.threshold_for(40.0) == 1.0);
  CHECK(det.threshold_for(90.0) == 3.0);
  CHECK(det.threshold_for(500.0) == 3.0);
}

TEST_CASE("an all-zero CNN is undecided and resolves to Moving") {
  MotionCnn cnn;
  for (auto& p : cnn.net().params()) std::fill(p.values().begin(), p.values().end(), 0.0f);
  MotionEncoding enc;
  enc.size = 128;
  enc.history.assign(128 * 128, 0.3f);
  enc.direction.assign(128 * 128, 0.0f);
  const auto d = cnn.classify(enc);
  CHECK(d.state == BreathState::Moving);
  CHECK(d.confidence == doctest::Approx(0.5));
  enc.size = 64;
  CHECK(code_of([&] { cnn.classify(enc); }) == ErrorCode::ShapeMismatch);
}

TEST_CASE("CNN weights round-trip") {
  MotionCnn cnn;
  cnn.net().init_he(3);
  const auto path = (std::filesystem::temp_directory_path() / "lapsim_test_motion.mnw").string();
  cnn.save(path);
  const MotionCnn back = MotionCnn::load(path);
  std::filesystem::remove(path);
  REQUIRE(back.net().params().size() == cnn.net().params().size());
  for (std::size_t i = 0; i < cnn.net().params().size(); ++i)
    CHECK(back.net().params()[i].values() == cnn.net().params()[i].values());
  CHECK(code_of([] { MotionCnn::load("/nonexistent/lapsim.mnw"); }) == ErrorCode::MissingWeights);
}

TEST_CASE("recording ground truth and harness sanity") {
  const BenchmarkScene scene;
  Recording rec(scene, 65.0, 0.3, 2, 5);
  REQUIRE(rec.cycles().size() == 2);
  const auto& c = rec.cycles()[0];
  CHECK(c.t2 - c.t1 == doctest::Approx(scene.breathing.plateau_s()));
  CHECK(rec.breath_phase(c.t1) == doctest::Approx(0.0).epsilon(1e-9));
  const int mid = static_cast<int>(std::round(0.5 * (c.t1 + c.t2) * scene.encoding.fps));
  CHECK(rec.truth(mid) == BreathState::Stationary);

  CHECK(evaluate_transitions(OracleLabeler{}, rec).accuracy() == 1.0);
  CHECK(evaluate_transitions(ConstantLabeler{BreathState::Moving}, rec).accuracy() == 0.0);
  CHECK(evaluate_transitions(ConstantLabeler{BreathState::Stationary}, rec).accuracy() == 0.0);

  rec.clear_ground_truth();
  CHECK(code_of([&] { evaluate_transitions(OracleLabeler{}, rec); }) == ErrorCode::MissingGroundTruth);
}

TEST_CASE("orientation grid and gain") {
  const auto o = benchmark_orientations(11);
  REQUIRE(o.size() == 11);
  CHECK(o.front() == doctest::Approx(-std::numbers::pi / 2));
  CHECK(o.back() == doctest::Approx(std::numbers::pi / 2));
  CHECK(o[5] == doctest::Approx(0.0));
  const BenchmarkScene scene;
  CHECK(orientation_gain(scene, 0.0) == doctest::Approx(1.0));
  CHECK(orientation_gain(scene, std::numbers::pi / 2) == doctest::Approx(scene.gain_floor));
}

TEST_CASE("trigger examples") {
  const auto a = trigger_time(0.0, 0.0, 10.0, 4.0);
  CHECK(a.n == 1);
  CHECK(a.trigger == 4.0);
  const double T = 60.0 / 14.0;
  const auto b = trigger_time(1.0, 40.0, 10.0, T);
  CHECK(b.n == 2);
  CHECK(b.trigger == doctest::Approx(2 * T - 4.0));
  CHECK(code_of([] { trigger_time(0, 1, 0, 4); }) == ErrorCode::NonPositiveVelocity);
  CHECK(code_of([] { trigger_time(0, 1, 1, -4); }) == ErrorCode::NonPositivePeriod);
  CHECK(code_of([] { trigger_time(0, -1, 1, 4); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("trigger n is minimal over random inputs") {
  std::mt19937_64 rng(99);
  std::uniform_real_distribution<double> ut(0.0, 100.0), ud(0.0, 200.0), uv(0.5, 50.0), uT(1.0, 10.0);
  for (int i = 0; i < 2000; ++i) {
    const double t = ut(rng), d = ud(rng), v = uv(rng), T = uT(rng);
    const auto r = trigger_time(t, d, v, T);
    CHECK(r.trigger > t);
    CHECK(static_cast<double>(r.n - 1) * T - d / v <= t);
    CHECK(r.trigger == static_cast<double>(r.n) * T - d / v);
  }
}
