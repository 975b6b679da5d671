#include "lapsim/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <numeric>
#include <sstream>

#include "lapsim/tissue.hpp"

namespace lapsim {

using nlohmann::json;

std::vector<double> spacing(std::span<const Point3> stitches) {
  if (stitches.size() < 2) fail(ErrorCode::TooFewStitches, "spacing needs at least two stitches");
  std::vector<double> out;
  out.reserve(stitches.size() - 1);
  for (std::size_t i = 1; i < stitches.size(); ++i) out.push_back(distance(stitches[i - 1], stitches[i]));
  return out;
}

std::vector<double> bite_depth(std::span<const Point3> stitches, std::span<const Point3> edge) {
  if (edge.empty()) fail(ErrorCode::EdgeUnavailable, "no tissue edge to measure against");
  std::vector<double> out;
  out.reserve(stitches.size());
  for (const auto& s : stitches) out.push_back(point_polyline_distance(s, edge));
  return out;
}

SampleStats describe(std::span<const double> samples) {
  if (samples.empty()) fail(ErrorCode::EmptySample, "no samples");
  SampleStats s;
  s.n = samples.size();
  s.mean = std::accumulate(samples.begin(), samples.end(), 0.0) / static_cast<double>(s.n);
  if (s.n >= 2) {
    double ss = 0.0;
    for (double x : samples) ss += (x - s.mean) * (x - s.mean);
    s.sd = std::sqrt(ss / static_cast<double>(s.n - 1));
  }
  s.cov_percent = s.n >= 2 && s.mean > 0.0 ? 100.0 * s.sd / s.mean : std::numeric_limits<double>::quiet_NaN();
  return s;
}

double cov_percent(std::span<const double> samples) {
  const SampleStats s = describe(samples);
  if (s.n < 2) fail(ErrorCode::DomainError, "COV needs at least two samples");
  if (!(s.mean > 0.0)) fail(ErrorCode::DomainError, "COV needs a positive mean");
  return s.cov_percent;
}

namespace {

// Twice the midranks of the pooled sample, so ties stay integral.
std::vector<long long> doubled_ranks(std::span<const double> pooled) {
  const std::size_t n = pooled.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t i, std::size_t j) { return pooled[i] < pooled[j]; });
  std::vector<long long> r2(n);
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j + 1 < n && pooled[order[j + 1]] == pooled[order[i]]) ++j;
    const long long twice_mid = static_cast<long long>(i + 1 + j + 1);  // (i+1 + j+1) / 2 * 2
    for (std::size_t k = i; k <= j; ++k) r2[order[k]] = twice_mid;
    i = j + 1;
  }
  return r2;
}

}  // namespace

MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b) {
  if (a.empty() || b.empty()) fail(ErrorCode::EmptySample, "Mann-Whitney needs two non-empty samples");
  for (double x : a)
    if (!std::isfinite(x)) fail(ErrorCode::InvalidArgument, "samples must be finite");
  for (double x : b)
    if (!std::isfinite(x)) fail(ErrorCode::InvalidArgument, "samples must be finite");
  const std::size_t n = a.size(), m = b.size(), N = n + m;
  std::vector<double> pooled(a.begin(), a.end());
  pooled.insert(pooled.end(), b.begin(), b.end());
  const std::vector<long long> r2 = doubled_ranks(pooled);
  long long r2a = 0;
  for (std::size_t i = 0; i < n; ++i) r2a += r2[i];
  // 2U = 2R_a - n(n+1)
  const long long offset2 = static_cast<long long>(n * (n + 1));
  const long long u2 = r2a - offset2;
  MannWhitney out;
  out.u = static_cast<double>(u2) / 2.0;
  const double nm = static_cast<double>(n * m);
  const long long center2x2 = static_cast<long long>(n * m);  // 2 * (nm/2)
  const long long obs_dev = std::llabs(u2 - center2x2);

  if (n * m <= 64) {
    // Distribution of the doubled rank sum over all C(N, n) assignments:
    // dp[k][s] = number of k-subsets of the ranks seen so far summing to s.
    const long long max_sum = std::accumulate(r2.begin(), r2.end(), 0LL);
    std::vector<std::vector<double>> dp(n + 1, std::vector<double>(static_cast<std::size_t>(max_sum) + 1, 0.0));
    dp[0][0] = 1.0;
    for (std::size_t i = 0; i < N; ++i)
      for (std::size_t k = std::min(n, i + 1); k >= 1; --k)
        for (long long s = max_sum - r2[i]; s >= 0; --s)
          if (dp[k - 1][s] != 0.0) dp[k][s + r2[i]] += dp[k - 1][s];
    double total = 0.0, extreme = 0.0;
    for (long long s = 0; s <= max_sum; ++s) {
      const double c = dp[n][s];
      if (c == 0.0) continue;
      total += c;
      if (std::llabs(s - offset2 - center2x2) >= obs_dev) extreme += c;
    }
    out.p = std::min(1.0, extreme / total);
    out.exact = true;
    return out;
  }

  std::map<double, std::size_t> ties;
  for (double x : pooled) ++ties[x];
  double tie_sum = 0.0;
  for (const auto& [v, t] : ties) tie_sum += static_cast<double>(t * t * t - t);
  const double Nd = static_cast<double>(N);
  const double var = nm / 12.0 * ((Nd + 1.0) - tie_sum / (Nd * (Nd - 1.0)));
  if (!(var > 0.0)) {
    out.p = 1.0;
    return out;
  }
  const double dev = std::max(0.0, std::abs(out.u - nm / 2.0) - 0.5);
  out.p = std::min(1.0, std::erfc(dev / std::sqrt(var) / std::sqrt(2.0)));
  return out;
}

TimeCategory time_category(SupervisorState s) {
  using S = SupervisorState;
  switch (s) {
    case S::AwaitStationary:
    case S::Capturing:
    case S::Planning:
    case S::BaselineSnapshot:
      return TimeCategory::Planning;
    case S::AwaitDispatch:
    case S::Executing:
    case S::AwaitAssistant:
    case S::DeformationCheck:
      return TimeCategory::Suturing;
    case S::WallComplete:
      return TimeCategory::ModeTransitions;
    default:
      return TimeCategory::Supervision;
  }
}

TimeBreakdown time_breakdown(const RunLog& log) {
  if (!log.complete()) fail(ErrorCode::IncompleteLog, "log has no end record");
  std::array<double, 4> sec{};
  std::optional<SupervisorState> cur;
  double since = 0.0;
  double start = std::numeric_limits<double>::quiet_NaN();
  double end = 0.0;
  try {
    for (const auto& r : log.records) {
      const double t = r.at("t").get<double>();
      if (std::isnan(start)) start = t;
      if (t < since) fail(ErrorCode::IncompleteLog, "timestamps go backwards at seq " + r.at("seq").dump());
      const std::string kind = r.at("kind").get<std::string>();
      if (kind != "state" && kind != "end") continue;
      if (cur) sec[static_cast<int>(time_category(*cur))] += t - since;
      if (kind == "end") {
        end = t;
        break;
      }
      cur = supervisor_state_from_string(r.at("state").get<std::string>());
      since = t;
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::IncompleteLog, std::string("malformed record: ") + e.what());
  }
  TimeBreakdown tb;
  tb.planning_min = sec[0] / 60.0;
  tb.supervision_min = sec[1] / 60.0;
  tb.suturing_min = sec[2] / 60.0;
  tb.mode_transitions_min = sec[3] / 60.0;
  tb.session_min = (end - start) / 60.0;
  return tb;
}

std::vector<Point3> achieved_stitches(const RunLog& log, Wall wall) {
  std::vector<Point3> out;
  for (const auto& e : log.events()) {
    if (e.value("event", "") != "StitchCompleted" || e.value("wall", "") != to_string(wall)) continue;
    const auto& p = e.at("result").at("achieved_material");
    out.push_back({p[0].get<double>(), p[1].get<double>(), p[2].get<double>()});
  }
  return out;
}

std::vector<Point3> log_edge(const RunLog& log, Wall wall) {
  if (!log.header.contains("scenario")) fail(ErrorCode::EdgeUnavailable, "log header carries no scenario");
  const Scenario sc = scenario_from_json(log.header.at("scenario"));
  const TissueState t = make_tissue(TissueGeometry::standard(), sc.breathing, 0.0);
  auto edge = t.rest_edge_curve(wall);
  if (edge.empty()) fail(ErrorCode::EdgeUnavailable, "empty edge curve");
  return edge;
}

MetricsReport build_report(const RunLog& log) {
  if (!log.complete()) fail(ErrorCode::IncompleteLog, "log has no end record");
  MetricsReport r;
  r.seed = log.header.value("seed", std::uint64_t{0});
  r.policy = log.header.value("policy", "");
  r.profile = log.header.value("profile", "");
  const auto& end = log.records.back();
  r.final_state = end.value("state", "");
  r.replans = end.value("replans", 0);
  r.deformation_events = end.value("deformation_events", 0);
  for (Wall w : {Wall::Back, Wall::Front}) {
    const auto pts = achieved_stitches(log, w);
    if (pts.empty()) continue;
    const auto depth = bite_depth(pts, log_edge(log, w));
    r.bite_depth_mm.insert(r.bite_depth_mm.end(), depth.begin(), depth.end());
    if (pts.size() >= 2) {
      r.spacing_by_wall[static_cast<int>(w)] = spacing(pts);
      const auto& s = r.spacing_by_wall[static_cast<int>(w)];
      r.spacing_mm.insert(r.spacing_mm.end(), s.begin(), s.end());
    }
  }
  if (!r.spacing_mm.empty()) r.spacing_stats = describe(r.spacing_mm);
  if (!r.bite_depth_mm.empty()) r.bite_depth_stats = describe(r.bite_depth_mm);
  if (!r.spacing_by_wall[0].empty() && !r.spacing_by_wall[1].empty())
    r.spacing_back_vs_front = mann_whitney_u(r.spacing_by_wall[0], r.spacing_by_wall[1]);
  r.hesitancy = hesitancy_report(log);
  r.time = time_breakdown(log);
  return r;
}

namespace {
json stats_json(const SampleStats& s) {
  auto num = [](double v) { return std::isfinite(v) ? json(v) : json(nullptr); };
  return {{"n", s.n}, {"mean", num(s.mean)}, {"sd", num(s.sd)}, {"cov_percent", num(s.cov_percent)}};
}
}  // namespace

json report_to_json(const MetricsReport& r, const json& reference) {
  json j{{"schema", "lapsim.report"},
         {"version", 1},
         {"seed", r.seed},
         {"policy", r.policy},
         {"profile", r.profile},
         {"final_state", r.final_state},
         {"stitches", r.hesitancy.total_stitches},
         {"replans", r.replans},
         {"deformation_events", r.deformation_events},
         {"spacing_mm", stats_json(r.spacing_stats)},
         {"bite_depth_mm", stats_json(r.bite_depth_stats)},
         {"hesitancy",
          {{"per_stitch", r.hesitancy.per_stitch},
           {"first_attempt_rate", r.hesitancy.first_attempt_rate},
           {"extra_attempts", r.hesitancy.extra_attempts},
           {"mean_offset_norm_mm", r.hesitancy.mean_offset_norm_mm}}},
         {"time_min",
          {{"planning", r.time.planning_min},
           {"supervision", r.time.supervision_min},
           {"suturing", r.time.suturing_min},
           {"mode_transitions", r.time.mode_transitions_min},
           {"session", r.time.session_min}}},
         {"comparisons",
          {{"spacing_back_vs_front",
            {{"u", r.spacing_back_vs_front.u},
             {"p", r.spacing_back_vs_front.p},
             {"exact", r.spacing_back_vs_front.exact}}}}}};
  if (!reference.is_null()) j["published_reference"] = reference;
  return j;
}

void write_report(const MetricsReport& r, const std::string& dir, const json& reference) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  auto write = [&](const std::string& name, const std::string& text) {
    std::ofstream out(std::filesystem::path(dir) / name, std::ios::binary);
    out << text;
    if (!out) fail(ErrorCode::IoError, "cannot write " + (std::filesystem::path(dir) / name).string());
  };
  write("report.json", report_to_json(r, reference).dump(2) + "\n");
  std::ostringstream sp;
  sp << "wall,pair,spacing_mm\n";
  for (int w = 0; w < 2; ++w)
    for (std::size_t i = 0; i < r.spacing_by_wall[w].size(); ++i)
      sp << to_string(static_cast<Wall>(w)) << ',' << i + 1 << ',' << json(r.spacing_by_wall[w][i]).dump() << '\n';
  write("spacing.csv", sp.str());
  std::ostringstream bd;
  bd << "stitch,bite_depth_mm\n";
  for (std::size_t i = 0; i < r.bite_depth_mm.size(); ++i) bd << i + 1 << ',' << json(r.bite_depth_mm[i]).dump() << '\n';
  write("bite_depth.csv", bd.str());
}

json load_reference_values(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path);
  try {
    json j = json::parse(in);
    if (j.value("schema", "") != "lapsim.reference") fail(ErrorCode::InvalidArgument, path + " is not a reference file");
    return j;
  } catch (const json::parse_error& e) {
    fail(ErrorCode::InvalidArgument, path + ": " + e.what());
  }
}

}  // namespace lapsim
