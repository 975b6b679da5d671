#pragma once

// Outcome scoring over run logs: spacing, bite depth, COV, the Mann-Whitney
// U test, time breakdown and the report files.

#include <array>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapsim/core.hpp"
#include "lapsim/supervisor.hpp"

namespace lapsim {

// Euclidean distance between consecutive stitches. Throws TooFewStitches.
std::vector<double> spacing(std::span<const Point3> stitches);

// Distance from each stitch to the edge polyline. Throws EdgeUnavailable.
std::vector<double> bite_depth(std::span<const Point3> stitches, std::span<const Point3> edge);

struct SampleStats {
  std::size_t n = 0;
  double mean = 0.0;
  double sd = 0.0;           // sample standard deviation (n - 1)
  double cov_percent = 0.0;  // 100 * sd / mean; NaN unless n >= 2 and mean > 0
};

// Throws EmptySample.
SampleStats describe(std::span<const double> samples);
// Throws EmptySample, DomainError (fewer than two samples or mean <= 0).
double cov_percent(std::span<const double> samples);

struct MannWhitney {
  double u = 0.0;  // pairs with a > b, ties counted one half
  double p = 1.0;  // two-sided
  bool exact = false;
};

// Exact permutation distribution when |a|*|b| <= 64, otherwise the normal
// approximation with tie and continuity correction. Throws EmptySample.
MannWhitney mann_whitney_u(std::span<const double> a, std::span<const double> b);

struct TimeBreakdown {
  double planning_min = 0.0;
  double supervision_min = 0.0;
  double suturing_min = 0.0;
  double mode_transitions_min = 0.0;
  double session_min = 0.0;

  double total_min() const { return planning_min + supervision_min + suturing_min + mode_transitions_min; }
};

enum class TimeCategory { Planning, Supervision, Suturing, ModeTransitions };
TimeCategory time_category(SupervisorState s);

// Throws IncompleteLog.
TimeBreakdown time_breakdown(const RunLog& log);

// Achieved stitch positions (tissue frame) of one wall, in completion order.
std::vector<Point3> achieved_stitches(const RunLog& log, Wall wall);
// Rest edge curve of the log's tissue. Throws EdgeUnavailable.
std::vector<Point3> log_edge(const RunLog& log, Wall wall);

struct MetricsReport {
  std::uint64_t seed = 0;
  std::string policy;
  std::string profile;
  std::string final_state;
  std::vector<double> spacing_mm;     // both walls, per-wall consecutive pairs
  std::vector<double> bite_depth_mm;
  std::array<std::vector<double>, 2> spacing_by_wall;
  SampleStats spacing_stats;
  SampleStats bite_depth_stats;
  HesitancySummary hesitancy;
  TimeBreakdown time;
  int replans = 0;
  int deformation_events = 0;
  MannWhitney spacing_back_vs_front;
};

// Throws IncompleteLog.
MetricsReport build_report(const RunLog& log);
// `reference` (optional) is attached verbatim under "published_reference".
nlohmann::json report_to_json(const MetricsReport& r, const nlohmann::json& reference = nullptr);
// Writes report.json, spacing.csv and bite_depth.csv into `dir`. Throws IoError.
void write_report(const MetricsReport& r, const std::string& dir, const nlohmann::json& reference = nullptr);
// Throws IoError, InvalidArgument.
nlohmann::json load_reference_values(const std::string& path);

}  // namespace lapsim
