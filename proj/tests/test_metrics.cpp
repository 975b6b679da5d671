#include <filesystem>
#include <functional>
#include <random>

#include "doctest.h"
#include "lapsim/error.hpp"
#include "lapsim/metrics.hpp"

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

// Direct pairwise count, no ranks.
double pairwise_u(const std::vector<double>& a, const std::vector<double>& b) {
  double u = 0.0;
  for (double x : a)
    for (double y : b) u += x > y ? 1.0 : (x == y ? 0.5 : 0.0);
  return u;
}

// Exact two-sided p by visiting every split of the pooled sample into groups
// of the original sizes.
double enumerated_p(const std::vector<double>& a, const std::vector<double>& b) {
  std::vector<double> pooled(a);
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::size_t n = a.size(), N = pooled.size();
  const double center = 0.5 * static_cast<double>(a.size() * b.size());
  const double obs = std::abs(pairwise_u(a, b) - center);
  std::vector<std::size_t> pick;
  double total = 0.0, extreme = 0.0;
  std::function<void(std::size_t)> rec = [&](std::size_t from) {
    if (pick.size() == n) {
      std::vector<double> ga, gb;
      std::size_t k = 0;
      for (std::size_t i = 0; i < N; ++i) {
        if (k < n && pick[k] == i) {
          ga.push_back(pooled[i]);
          ++k;
        } else {
          gb.push_back(pooled[i]);
        }
      }
      total += 1.0;
      if (std::abs(pairwise_u(ga, gb) - center) >= obs - 1e-9) extreme += 1.0;
      return;
    }
    for (std::size_t i = from; i + (n - pick.size()) <= N; ++i) {
      pick.push_back(i);
      rec(i + 1);
      pick.pop_back();
    }
  };
  rec(0);
  return extreme / total;
}

const RunLog& standard_log() {
  static const RunLog log = [] {
    AutoApprovePolicy p;
    return run_scripted(p, Scenario::standard(), SafetyProfile::ex_vivo(), 42);
  }();
  return log;
}
}  // namespace

TEST_CASE("spacing") {
  std::vector<Point3> line;
  for (int i = 0; i <= 10; ++i) line.push_back({3.0 * i, 0.0, 0.0});
  for (double s : spacing(line)) CHECK(s == 3.0);
  const std::vector<Point3> one{{0, 0, 0}};
  CHECK(code_of([&] { spacing(one); }) == ErrorCode::TooFewStitches);
}

TEST_CASE("bite depth") {
  const std::vector<Point3> edge{{0, 0, 0}, {30, 0, 0}};
  std::vector<Point3> st{{3, 3, 0}, {6, 3, 0}, {9, 2, 0}};
  const auto d = bite_depth(st, edge);
  CHECK(d[0] == doctest::Approx(3.0));
  CHECK(d[1] == doctest::Approx(3.0));
  CHECK(d[2] == doctest::Approx(2.0));
  CHECK(code_of([&] { bite_depth(st, std::vector<Point3>{}); }) == ErrorCode::EdgeUnavailable);
}

TEST_CASE("spacing and bite depth are translation invariant") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-20.0, 20.0);
  std::vector<Point3> st, edge;
  for (int i = 0; i < 12; ++i) st.push_back({u(rng), u(rng), 0.1 * u(rng)});
  for (int i = 0; i < 6; ++i) edge.push_back({u(rng), u(rng), 0.0});
  const Point3 shift{7.25, -3.5, 1.0};
  std::vector<Point3> st2, edge2;
  for (auto p : st) st2.push_back(p + shift);
  for (auto p : edge) edge2.push_back(p + shift);
  const auto s1 = spacing(st), s2 = spacing(st2);
  const auto d1 = bite_depth(st, edge), d2 = bite_depth(st2, edge2);
  for (std::size_t i = 0; i < s1.size(); ++i) CHECK(s1[i] == doctest::Approx(s2[i]).epsilon(1e-12));
  for (std::size_t i = 0; i < d1.size(); ++i) CHECK(d1[i] == doctest::Approx(d2[i]).epsilon(1e-12));
}

TEST_CASE("COV") {
  const std::vector<double> x{2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0};
  const auto s = describe(x);
  CHECK(s.mean == 5.0);
  CHECK(s.sd == doctest::Approx(std::sqrt(32.0 / 7.0)));
  CHECK(cov_percent(x) == doctest::Approx(100.0 * std::sqrt(32.0 / 7.0) / 5.0));
  CHECK(code_of([] { cov_percent(std::vector<double>{}); }) == ErrorCode::EmptySample);
  CHECK(code_of([] { cov_percent(std::vector<double>{1.0}); }) == ErrorCode::DomainError);
  CHECK(code_of([] { cov_percent(std::vector<double>{-1.0, -2.0}); }) == ErrorCode::DomainError);
}

TEST_CASE("COV is scale invariant") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.5, 6.0);
  for (int k = 0; k < 200; ++k) {
    std::vector<double> x(2 + k % 30);
    for (auto& v : x) v = u(rng);
    const double c0 = cov_percent(x);
    // Power-of-two scales are exact in binary floating point.
    for (double c : {0.25, 2.0, 1024.0}) {
      std::vector<double> y(x);
      for (auto& v : y) v *= c;
      CHECK(cov_percent(y) == c0);
    }
    std::vector<double> y(x);
    const double c = 0.1 + u(rng) * 37.0;
    for (auto& v : y) v *= c;
    CHECK(cov_percent(y) == doctest::Approx(c0).epsilon(1e-12));
  }
}

TEST_CASE("Mann-Whitney examples") {
  const std::vector<double> a{1, 2, 3}, b{10, 11, 12};
  const auto same = mann_whitney_u(a, a);
  CHECK(same.u == 4.5);
  CHECK(same.p == doctest::Approx(1.0));
  CHECK(same.exact);
  const auto sep = mann_whitney_u(a, b);
  CHECK(sep.u == 0.0);
  CHECK(sep.p == doctest::Approx(0.1));  // 2 of C(6,3) = 20 splits are this extreme
  CHECK(mann_whitney_u(b, a).u == 9.0);
  CHECK(code_of([&] { mann_whitney_u(a, std::vector<double>{}); }) == ErrorCode::EmptySample);
}

TEST_CASE("Mann-Whitney matches exact enumeration for every size with n*m <= 64") {
  std::mt19937_64 rng(17);
  std::uniform_int_distribution<int> small(0, 6);  // frequent ties
  std::normal_distribution<double> g(0.0, 1.0);
  int pairs = 0;
  for (std::size_t n = 1; n <= 64; ++n)
    for (std::size_t m = 1; n * m <= 64; ++m) {
      std::vector<double> a(n), b(m);
      const bool tied = (n + m) % 2 == 0;
      for (auto& v : a) v = tied ? small(rng) : g(rng);
      for (auto& v : b) v = tied ? small(rng) + 1 : g(rng) + 0.5;
      const auto r = mann_whitney_u(a, b);
      CHECK(r.exact);
      CHECK(r.u == pairwise_u(a, b));
      CHECK(r.p == doctest::Approx(enumerated_p(a, b)).epsilon(1e-12));
      ++pairs;
    }
  CHECK(pairs > 250);
}

TEST_CASE("U(a,b) + U(b,a) = |a||b|") {
  std::mt19937_64 rng(23);
  std::uniform_int_distribution<int> len(1, 40), val(0, 9);
  for (int k = 0; k < 500; ++k) {
    std::vector<double> a(len(rng)), b(len(rng));
    for (auto& v : a) v = val(rng) * 0.5;
    for (auto& v : b) v = val(rng) * 0.5;
    const auto ab = mann_whitney_u(a, b), ba = mann_whitney_u(b, a);
    CHECK(ab.u + ba.u == static_cast<double>(a.size() * b.size()));
    CHECK(ab.p == doctest::Approx(ba.p));
    CHECK(ab.p > 0.0);
    CHECK(ab.p <= 1.0);
  }
}

TEST_CASE("Mann-Whitney normal approximation") {
  std::vector<double> a, b;
  for (int i = 0; i < 20; ++i) {
    a.push_back(i);
    b.push_back(i + 100);
  }
  const auto r = mann_whitney_u(a, b);
  CHECK_FALSE(r.exact);
  CHECK(r.u == 0.0);
  CHECK(r.p < 1e-6);
  const auto same = mann_whitney_u(a, a);
  CHECK(same.p == doctest::Approx(1.0));
  const std::vector<double> flat(30, 1.0);
  CHECK(mann_whitney_u(flat, flat).p == 1.0);
}

TEST_CASE("time breakdown reconciles with the session length") {
  const RunLog& log = standard_log();
  const auto tb = time_breakdown(log);
  CHECK(tb.total_min() == doctest::Approx(tb.session_min).epsilon(0.01));
  CHECK(tb.planning_min > 0.0);
  CHECK(tb.supervision_min > 0.0);
  CHECK(tb.suturing_min > tb.planning_min);
  CHECK(tb.mode_transitions_min * 60.0 == doctest::Approx(Scenario::standard().timing.wall_switch_s));
  // Initial plan per wall plus 3 replans, each costing at least capture + compute.
  const auto& t = Scenario::standard().timing;
  CHECK(tb.planning_min * 60.0 >= 5.0 * (t.capture_s + t.compute_s));
}

TEST_CASE("no operator waits means no supervision time") {
  Scenario sc = Scenario::standard();
  sc.operator_latency_s = 0.0;
  AutoApprovePolicy p;
  const auto tb = time_breakdown(run_scripted(p, sc, SafetyProfile::ex_vivo(), 42));
  CHECK(tb.supervision_min == 0.0);
  CHECK(tb.total_min() == doctest::Approx(tb.session_min));
}

TEST_CASE("incomplete logs are refused") {
  RunLog cut = standard_log();
  cut.records.pop_back();
  CHECK(code_of([&] { time_breakdown(cut); }) == ErrorCode::IncompleteLog);
  CHECK(code_of([&] { build_report(cut); }) == ErrorCode::IncompleteLog);
}

TEST_CASE("report over the default run") {
  const auto r = build_report(standard_log());
  CHECK(r.final_state == "Done");
  CHECK(r.hesitancy.total_stitches == 24);
  CHECK(r.replans == 3);
  CHECK(r.spacing_mm.size() == 22);
  CHECK(r.bite_depth_mm.size() == 24);
  CHECK(r.spacing_stats.mean > 2.75);
  CHECK(r.spacing_stats.mean < 3.35);
  CHECK(r.bite_depth_stats.mean > 2.7);
  CHECK(r.bite_depth_stats.mean < 3.4);

  const auto ref = load_reference_values(std::string(LAPSIM_SOURCE_DIR) + "/data/reference_values.json");
  CHECK(ref["ex_vivo"]["spacing_cov_percent"]["STAR"] == 26.36);
  const auto j = report_to_json(r, ref);
  CHECK(j["published_reference"]["label"].get<std::string>().find("Published") == 0);
  const auto dir = std::filesystem::temp_directory_path() / "lapsim_report_test";
  std::filesystem::remove_all(dir);
  write_report(r, dir.string(), ref);
  CHECK(std::filesystem::exists(dir / "report.json"));
  CHECK(std::filesystem::exists(dir / "spacing.csv"));
  CHECK(std::filesystem::exists(dir / "bite_depth.csv"));
  CHECK(code_of([] { load_reference_values("/nonexistent.json"); }) == ErrorCode::IoError);
}
