#include "lapsim/supervisor.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "lapsim/motion.hpp"

namespace lapsim {

using nlohmann::json;

namespace {

constexpr const char* kStateNames[] = {
    "Idle",           "AwaitStationary",    "Capturing",           "Planning",           "AwaitPlanSelection",
    "BaselineSnapshot", "AwaitDispatch",    "Executing",           "AwaitAssistant",     "AwaitFireApproval",
    "DeformationCheck", "AwaitReplanApproval", "AwaitOffsetOrRepeat", "WallComplete",    "Done",
    "Paused",         "Aborted"};

constexpr const char* kCommandNames[] = {"StartPlanning", "SelectPlan",  "ApproveReplan",        "KeepExistingPlan",
                                         "NudgeOffset",   "RepeatStitch", "ApproveFire",         "ReleaseAssistantGate",
                                         "Pause",         "Resume",      "Abort"};

constexpr const char* kEventNames[] = {"PlansReady",      "PlanRejectedNoisy", "CollisionWarning", "DeformationDetected",
                                       "PlanStillUsable", "StitchCompleted",   "StitchFailed",     "ToolFailure",
                                       "WallComplete",    "AnastomosisComplete"};

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream) { return splitmix(seed ^ splitmix(stream)); }

json vec(const Point3& p) { return json::array({p.x, p.y, p.z}); }

Point3 vec_from(const json& j) {
  if (!j.is_array() || j.size() != 3) fail(ErrorCode::InvalidArgument, "expected a 3-vector");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>()};
}

double wrap(double t, double period) {
  double p = std::fmod(t, period);
  if (p < 0.0) p += period;
  return p;
}

}  // namespace

const char* to_string(SupervisorState s) { return kStateNames[static_cast<int>(s)]; }

SupervisorState supervisor_state_from_string(const std::string& s) {
  for (int i = 0; i < kSupervisorStateCount; ++i)
    if (s == kStateNames[i]) return static_cast<SupervisorState>(i);
  fail(ErrorCode::InvalidArgument, "unknown supervisor state '" + s + "'");
}

bool is_terminal(SupervisorState s) { return s == SupervisorState::Done || s == SupervisorState::Aborted; }

bool awaits_operator(SupervisorState s) {
  switch (s) {
    case SupervisorState::Idle:
    case SupervisorState::AwaitPlanSelection:
    case SupervisorState::AwaitAssistant:
    case SupervisorState::AwaitFireApproval:
    case SupervisorState::AwaitReplanApproval:
    case SupervisorState::AwaitOffsetOrRepeat:
    case SupervisorState::Paused:
      return true;
    default:
      return false;
  }
}

const char* to_string(CommandKind c) { return kCommandNames[static_cast<int>(c)]; }

CommandKind command_kind_from_string(const std::string& s) {
  for (int i = 0; i < kCommandKindCount; ++i)
    if (s == kCommandNames[i]) return static_cast<CommandKind>(i);
  fail(ErrorCode::InvalidArgument, "unknown command '" + s + "'");
}

const char* to_string(EventKind e) { return kEventNames[static_cast<int>(e)]; }

bool command_allowed(SupervisorState state, CommandKind cmd) {
  using S = SupervisorState;
  if (is_terminal(state)) return false;
  switch (cmd) {
    case CommandKind::Pause: return state != S::Paused;
    case CommandKind::Abort: return true;
    case CommandKind::Resume: return state == S::Paused;
    case CommandKind::StartPlanning: return state == S::Idle || state == S::AwaitPlanSelection;
    case CommandKind::SelectPlan: return state == S::AwaitPlanSelection;
    case CommandKind::ApproveReplan:
    case CommandKind::KeepExistingPlan: return state == S::AwaitReplanApproval;
    case CommandKind::NudgeOffset:
    case CommandKind::RepeatStitch: return state == S::AwaitOffsetOrRepeat;
    case CommandKind::ApproveFire: return state == S::AwaitFireApproval;
    case CommandKind::ReleaseAssistantGate: return state == S::AwaitAssistant;
  }
  return false;
}

OperatorCommand OperatorCommand::make(CommandKind k, std::string id) {
  OperatorCommand c;
  c.kind = k;
  c.id = std::move(id);
  return c;
}

OperatorCommand OperatorCommand::select(PlanMode m, std::string id) {
  OperatorCommand c = make(CommandKind::SelectPlan, std::move(id));
  c.mode = m;
  return c;
}

OperatorCommand OperatorCommand::nudge(const Point3& v, std::string id) {
  OperatorCommand c = make(CommandKind::NudgeOffset, std::move(id));
  c.offset = v;
  return c;
}

json command_to_json(const OperatorCommand& c) {
  json j{{"type", to_string(c.kind)}, {"id", c.id}};
  if (c.kind == CommandKind::SelectPlan) j["mode"] = to_string(c.mode);
  if (c.kind == CommandKind::NudgeOffset) j["offset"] = vec(c.offset);
  return j;
}

OperatorCommand command_from_json(const json& j) {
  try {
    OperatorCommand c;
    c.kind = command_kind_from_string(j.at("type").get<std::string>());
    if (j.contains("id")) c.id = j.at("id").get<std::string>();
    if (c.kind == CommandKind::SelectPlan) c.mode = plan_mode_from_string(j.at("mode").get<std::string>());
    if (c.kind == CommandKind::NudgeOffset) {
      c.offset = vec_from(j.at("offset"));
      if (!c.offset.finite()) fail(ErrorCode::InvalidArgument, "offset must be finite");
    }
    return c;
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidArgument, std::string("malformed command: ") + e.what());
  }
}

// ---------------------------------------------------------------------------
// Scenario

Scenario Scenario::standard() {
  Scenario s;
  s.deformations = {{Wall::Back, 4, {4.0, 6.0}}, {Wall::Front, 2, {4.0, 6.0}}, {Wall::Front, 6, {4.0, 6.0}}};
  return s;
}

Scenario Scenario::quiet() {
  Scenario s;
  s.name = "quiet";
  return s;
}

void Scenario::validate() const {
  auto bad = [](const std::string& m) { fail(ErrorCode::InvalidScenario, m); };
  try {
    breathing.validate();
    plan.validate();
  } catch (const Error& e) {
    bad(e.what());
  }
  if (!(cloud_noise_mm >= 0.0) || !(marker_noise_mm >= 0.0)) bad("noise levels must be non-negative");
  if (!(operator_latency_s >= 0.0)) bad("operator_latency_s must be non-negative");
  if (max_attempts < 1) bad("max_attempts must be at least 1");
  if (max_planning_rounds < 1) bad("max_planning_rounds must be at least 1");
  if (!(timing.capture_s >= 0.0) || !(timing.compute_s >= 0.0) || !(timing.wall_switch_s >= 0.0) ||
      !(timing.detector_latency_s >= 0.0) || timing.detector_latency_s >= breathing.plateau_s())
    bad("timing values must be non-negative and the detector latency shorter than the plateau");
  for (const auto& d : deformations)
    if (d.after_stitch < 1 || !(d.magnitude.min_mm >= 0.0) || d.magnitude.max_mm < d.magnitude.min_mm)
      bad("deformation needs after_stitch >= 1 and 0 <= min <= max");
  for (const auto& f : tool_failures)
    if (f.stitch < 1 || f.attempt < 1) bad("tool failure needs stitch >= 1 and attempt >= 1");
}

json scenario_to_json(const Scenario& s) {
  json defs = json::array();
  for (const auto& d : s.deformations)
    defs.push_back({{"wall", to_string(d.wall)},
                    {"after_stitch", d.after_stitch},
                    {"magnitude_mm", {d.magnitude.min_mm, d.magnitude.max_mm}}});
  json faults = json::array();
  for (const auto& f : s.tool_failures)
    faults.push_back({{"wall", to_string(f.wall)}, {"stitch", f.stitch}, {"attempt", f.attempt}});
  return {{"schema", "lapsim.scenario"},
          {"version", 1},
          {"name", s.name},
          {"breathing",
           {{"period_s", s.breathing.period_s},
            {"amplitude_mm", s.breathing.amplitude_mm},
            {"stationary_fraction", s.breathing.stationary_fraction},
            {"micro_amplitude_mm", s.breathing.micro_amplitude_mm},
            {"micro_frequency_hz", s.breathing.micro_frequency_hz}}},
          {"cloud_noise_mm", s.cloud_noise_mm},
          {"marker_noise_mm", s.marker_noise_mm},
          {"plan",
           {{"spacing_mm", s.plan.spacing_mm},
            {"bite_depth_mm", s.plan.bite_depth_mm},
            {"tissue_thickness_mm", s.plan.tissue_thickness_mm},
            {"corner_reinforcement", s.plan.corner_reinforcement}}},
          {"operator_latency_s", s.operator_latency_s},
          {"max_attempts", s.max_attempts},
          {"max_planning_rounds", s.max_planning_rounds},
          {"timing",
           {{"capture_s", s.timing.capture_s},
            {"compute_s", s.timing.compute_s},
            {"wall_switch_s", s.timing.wall_switch_s},
            {"detector_latency_s", s.timing.detector_latency_s}}},
          {"deformations", defs},
          {"tool_failures", faults}};
}

namespace {

// Reads the optional members of an object, recording the last key touched so
// that a failure can be mapped back to a line of the source text.
struct Reader {
  const json& obj;
  std::string* key;
  std::string path;

  template <typename T>
  void get(const char* name, T& out) const {
    *key = name;
    if (!obj.contains(name)) return;
    const json& v = obj.at(name);
    if constexpr (std::is_same_v<T, bool>) {
      if (!v.is_boolean()) fail(ErrorCode::InvalidScenario, path + name + " must be a boolean");
    } else if constexpr (std::is_arithmetic_v<T>) {
      if (!v.is_number()) fail(ErrorCode::InvalidScenario, path + name + " must be a number");
      if constexpr (std::is_integral_v<T>)
        if (!v.is_number_integer()) fail(ErrorCode::InvalidScenario, path + name + " must be an integer");
    } else {
      if (!v.is_string()) fail(ErrorCode::InvalidScenario, path + name + " must be a string");
    }
    out = v.get<T>();
  }

  void only(std::initializer_list<const char*> allowed) const {
    if (!obj.is_object()) fail(ErrorCode::InvalidScenario, (path.empty() ? "scenario" : path) + " must be an object");
    for (const auto& [k, v] : obj.items()) {
      bool ok = false;
      for (const char* a : allowed) ok = ok || k == a;
      if (!ok) {
        *key = k;
        fail(ErrorCode::InvalidScenario, "unknown key '" + path + k + "'");
      }
    }
  }
};

Wall wall_field(const json& o, std::string* key, const std::string& path) {
  *key = "wall";
  if (!o.contains("wall") || !o.at("wall").is_string()) fail(ErrorCode::InvalidScenario, path + "wall is required");
  try {
    return wall_from_string(o.at("wall").get<std::string>());
  } catch (const Error&) {
    fail(ErrorCode::InvalidScenario, path + "wall must be Back or Front");
  }
}

Scenario scenario_from_json_impl(const json& j, std::string* key) {
  Scenario s;
  Reader top{j, key, ""};
  top.only({"schema", "version", "name", "breathing", "cloud_noise_mm", "marker_noise_mm", "plan", "operator_latency_s",
            "max_attempts", "max_planning_rounds", "timing", "deformations", "tool_failures"});
  std::string schema = "lapsim.scenario";
  int version = 1;
  top.get("schema", schema);
  if (schema != "lapsim.scenario") fail(ErrorCode::InvalidScenario, "schema must be lapsim.scenario");
  top.get("version", version);
  if (version != 1) fail(ErrorCode::InvalidScenario, "unsupported scenario version " + std::to_string(version));
  top.get("name", s.name);
  top.get("cloud_noise_mm", s.cloud_noise_mm);
  top.get("marker_noise_mm", s.marker_noise_mm);
  top.get("operator_latency_s", s.operator_latency_s);
  top.get("max_attempts", s.max_attempts);
  top.get("max_planning_rounds", s.max_planning_rounds);
  if (j.contains("breathing")) {
    Reader r{j.at("breathing"), key, "breathing."};
    r.only({"period_s", "amplitude_mm", "stationary_fraction", "micro_amplitude_mm", "micro_frequency_hz"});
    r.get("period_s", s.breathing.period_s);
    r.get("amplitude_mm", s.breathing.amplitude_mm);
    r.get("stationary_fraction", s.breathing.stationary_fraction);
    r.get("micro_amplitude_mm", s.breathing.micro_amplitude_mm);
    r.get("micro_frequency_hz", s.breathing.micro_frequency_hz);
  }
  if (j.contains("plan")) {
    Reader r{j.at("plan"), key, "plan."};
    r.only({"spacing_mm", "bite_depth_mm", "tissue_thickness_mm", "corner_reinforcement"});
    r.get("spacing_mm", s.plan.spacing_mm);
    r.get("bite_depth_mm", s.plan.bite_depth_mm);
    r.get("tissue_thickness_mm", s.plan.tissue_thickness_mm);
    r.get("corner_reinforcement", s.plan.corner_reinforcement);
  }
  if (j.contains("timing")) {
    Reader r{j.at("timing"), key, "timing."};
    r.only({"capture_s", "compute_s", "wall_switch_s", "detector_latency_s"});
    r.get("capture_s", s.timing.capture_s);
    r.get("compute_s", s.timing.compute_s);
    r.get("wall_switch_s", s.timing.wall_switch_s);
    r.get("detector_latency_s", s.timing.detector_latency_s);
  }
  if (j.contains("deformations")) {
    *key = "deformations";
    if (!j.at("deformations").is_array()) fail(ErrorCode::InvalidScenario, "deformations must be an array");
    for (std::size_t i = 0; i < j.at("deformations").size(); ++i) {
      const json& o = j.at("deformations")[i];
      const std::string path = "deformations[" + std::to_string(i) + "].";
      Reader r{o, key, path};
      r.only({"wall", "after_stitch", "magnitude_mm"});
      ScheduledDeformation d;
      d.wall = wall_field(o, key, path);
      r.get("after_stitch", d.after_stitch);
      *key = "magnitude_mm";
      if (o.contains("magnitude_mm")) {
        const json& m = o.at("magnitude_mm");
        if (m.is_number()) {
          d.magnitude = {m.get<double>(), m.get<double>()};
        } else if (m.is_array() && m.size() == 2 && m[0].is_number() && m[1].is_number()) {
          d.magnitude = {m[0].get<double>(), m[1].get<double>()};
        } else {
          fail(ErrorCode::InvalidScenario, path + "magnitude_mm must be a number or a [min, max] pair");
        }
      }
      s.deformations.push_back(d);
    }
  }
  if (j.contains("tool_failures")) {
    *key = "tool_failures";
    if (!j.at("tool_failures").is_array()) fail(ErrorCode::InvalidScenario, "tool_failures must be an array");
    for (std::size_t i = 0; i < j.at("tool_failures").size(); ++i) {
      const json& o = j.at("tool_failures")[i];
      const std::string path = "tool_failures[" + std::to_string(i) + "].";
      Reader r{o, key, path};
      r.only({"wall", "stitch", "attempt"});
      ScheduledToolFailure f;
      f.wall = wall_field(o, key, path);
      r.get("stitch", f.stitch);
      r.get("attempt", f.attempt);
      s.tool_failures.push_back(f);
    }
  }
  key->clear();
  s.validate();
  return s;
}

// 1-based line of the first occurrence of "key" in the text, or 0.
std::size_t line_of_key(const std::string& text, const std::string& key) {
  if (key.empty()) return 0;
  const auto pos = text.find("\"" + key + "\"");
  if (pos == std::string::npos) return 0;
  return static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(pos), '\n')) + 1;
}

}  // namespace

Scenario scenario_from_json(const json& j) {
  std::string key;
  return scenario_from_json_impl(j, &key);
}

Scenario parse_scenario(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    const std::size_t upto = std::min<std::size_t>(e.byte == 0 ? 0 : e.byte - 1, text.size());
    const std::size_t line = static_cast<std::size_t>(std::count(text.begin(), text.begin() + static_cast<long>(upto), '\n')) + 1;
    const auto last_nl = text.rfind('\n', upto == 0 ? 0 : upto - 1);
    const std::size_t col = last_nl == std::string::npos ? upto + 1 : upto - last_nl;
    fail(ErrorCode::InvalidScenario,
         "line " + std::to_string(line) + ", column " + std::to_string(col) + ": syntax error");
  }
  std::string key;
  try {
    return scenario_from_json_impl(j, &key);
  } catch (const Error& e) {
    const std::size_t line = line_of_key(text, key);
    std::string msg = e.what();
    const std::string prefix = std::string(error_name(ErrorCode::InvalidScenario)) + ": ";
    if (msg.rfind(prefix, 0) == 0) msg = msg.substr(prefix.size());
    fail(ErrorCode::InvalidScenario, (line ? "line " + std::to_string(line) + ": " : std::string()) + msg);
  }
}

Scenario load_scenario(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::IoError, "cannot read scenario " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_scenario(ss.str());
}

// ---------------------------------------------------------------------------
// Run log

std::string RunLog::to_jsonl() const {
  std::string out = header.dump();
  out += '\n';
  for (const auto& r : records) {
    out += r.dump();
    out += '\n';
  }
  return out;
}

bool RunLog::complete() const { return !records.empty() && records.back().value("kind", "") == "end"; }

std::vector<json> RunLog::of_kind(const std::string& kind) const {
  std::vector<json> out;
  for (const auto& r : records)
    if (r.value("kind", "") == kind) out.push_back(r);
  return out;
}

std::vector<json> RunLog::events() const { return of_kind("event"); }

RunLog RunLog::parse(const std::string& text) {
  RunLog log;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  long long last_seq = -1;
  while (pos < text.size()) {
    auto nl = text.find('\n', pos);
    const bool terminated = nl != std::string::npos;
    if (!terminated) nl = text.size();
    const std::string line = text.substr(pos, nl - pos);
    pos = nl + 1;
    ++line_no;
    if (line.empty()) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error&) {
      fail(ErrorCode::CorruptLog, "line " + std::to_string(line_no) + ": unreadable record (truncated?)");
    }
    if (!j.is_object()) fail(ErrorCode::CorruptLog, "line " + std::to_string(line_no) + ": record is not an object");
    if (line_no == 1) {
      if (j.value("schema", "") != kRunLogSchema) fail(ErrorCode::CorruptLog, "line 1: not a run log header");
      if (!j.contains("version") || !j.at("version").is_number_integer())
        fail(ErrorCode::CorruptLog, "line 1: header has no version");
      const int v = j.at("version").get<int>();
      if (v != kRunLogVersion)
        fail(ErrorCode::SchemaVersionMismatch,
             "run log version " + std::to_string(v) + ", supported " + std::to_string(kRunLogVersion));
      log.header = j;
      continue;
    }
    if (!j.contains("seq") || !j.at("seq").is_number_integer() || !j.contains("kind"))
      fail(ErrorCode::CorruptLog, "line " + std::to_string(line_no) + ": record lacks seq or kind");
    const long long seq = j.at("seq").get<long long>();
    if (seq <= last_seq) fail(ErrorCode::CorruptLog, "line " + std::to_string(line_no) + ": sequence out of order");
    last_seq = seq;
    log.records.push_back(std::move(j));
    if (!terminated) fail(ErrorCode::CorruptLog, "line " + std::to_string(line_no) + ": record is not terminated");
  }
  if (log.header.is_null()) fail(ErrorCode::CorruptLog, "empty log");
  return log;
}

RunLog RunLog::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read log " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str());
}

void RunLog::save(const std::string& path) const {
  const std::string text = to_jsonl();
  const int fd = ::open(path.c_str(), O_WRONLY | O_CREAT | O_TRUNC, 0644);
  if (fd < 0) fail(ErrorCode::IoError, "cannot write log " + path);
  std::size_t done = 0;
  while (done < text.size()) {
    const ssize_t n = ::write(fd, text.data() + done, text.size() - done);
    if (n <= 0) {
      ::close(fd);
      fail(ErrorCode::IoError, "short write to " + path);
    }
    done += static_cast<std::size_t>(n);
  }
  const bool synced = ::fsync(fd) == 0;
  if (::close(fd) != 0 || !synced) fail(ErrorCode::IoError, "cannot flush " + path);
}

// ---------------------------------------------------------------------------
// Supervisor

Supervisor::Supervisor(Scenario scenario, SafetyProfile profile, std::uint64_t seed, std::string policy)
    : scenario_(std::move(scenario)),
      profile_(std::move(profile)),
      seed_(seed),
      rest_(make_tissue(TissueGeometry::standard(), scenario_.breathing, 0.0)),
      cloud_rng_(sub_seed(seed, 2)),
      marker_rng_(sub_seed(seed, 3)),
      deform_rng_(sub_seed(seed, 4)),
      executor_(profile_, RcmPort{}, sub_seed(seed, 1), scenario_.plan.bite_depth_mm) {
  scenario_.validate();
  log_.header = {{"schema", kRunLogSchema},
                 {"version", kRunLogVersion},
                 {"scenario", scenario_to_json(scenario_)},
                 {"profile", profile_.name},
                 {"seed", seed_},
                 {"policy", policy}};
  append({{"kind", "state"}, {"state", to_string(state_)}});
}

TissueState Supervisor::tissue() const {
  TissueState t = rest_;
  t.time_s = now_;
  return t;
}

void Supervisor::append(json record) {
  record["seq"] = seq_++;
  if (!record.contains("t")) record["t"] = now_;
  log_.records.push_back(std::move(record));
  if (listener_) listener_(log_.records.back());
}

void Supervisor::enter(SupervisorState s) {
  append({{"kind", "state"}, {"from", to_string(state_)}, {"state", to_string(s)}});
  state_ = s;
  entered_s_ = now_;
  if (is_terminal(s)) finish_log();
}

void Supervisor::emit(EventKind kind, json payload) {
  payload["kind"] = "event";
  payload["event"] = to_string(kind);
  payload["wall"] = to_string(wall_);
  append(std::move(payload));
}

void Supervisor::finish_log() {
  append({{"kind", "end"},
          {"state", to_string(state_)},
          {"stitches", tally_.completed},
          {"failed_attempts", tally_.failed_attempts},
          {"replans", tally_.replans},
          {"deformation_events", tally_.deformation_events}});
}

double Supervisor::next_stationary(double t) const {
  // Ground-truth breath state reported by the detector after a fixed latency.
  const double T = scenario_.breathing.period_s;
  const double lat = scenario_.timing.detector_latency_s;
  const double phase = wrap(t, T);
  if (phase < lat) return t + (lat - phase);
  if (phase < scenario_.breathing.plateau_s()) return t;
  return t + (T - phase) + lat;
}

MarkerSet Supervisor::observe_markers(double t) {
  TissueState s = rest_;
  s.time_s = t;
  std::normal_distribution<double> noise(0.0, scenario_.marker_noise_mm);
  std::vector<Marker> out;
  for (Marker m : s.markers()) {
    if (scenario_.marker_noise_mm > 0.0) m.position += Point3{noise(marker_rng_), noise(marker_rng_), noise(marker_rng_)};
    out.push_back(m);
  }
  return MarkerSet(std::move(out));
}

Point3 Supervisor::observed_wall_shift() const {
  if (!baseline_ || baseline_->empty()) return {};
  TissueState s = rest_;
  s.time_s = next_stationary(now_);
  const MarkerSet cur = s.markers();
  Point3 acc;
  for (const auto& m : *baseline_) acc += cur.at(m.id).position - m.position;
  return acc / static_cast<double>(baseline_->size());
}

void Supervisor::camera_to(CameraMode m) {
  if (camera_.mode == m) return;
  now_ += set_camera_mode(camera_, m, executor_.stitch_in_flight()).duration_s;
}

bool Supervisor::step() {
  switch (state_) {
    case SupervisorState::AwaitStationary: do_await_stationary(); return true;
    case SupervisorState::Capturing: do_capture(); return true;
    case SupervisorState::Planning: do_planning(); return true;
    case SupervisorState::BaselineSnapshot: do_baseline(); return true;
    case SupervisorState::AwaitDispatch: do_dispatch(); return true;
    case SupervisorState::Executing: do_execute(); return true;
    case SupervisorState::DeformationCheck: do_deformation_check(); return true;
    case SupervisorState::WallComplete: do_wall_complete(); return true;
    default: return false;
  }
}

void Supervisor::run_until_blocked(int max_steps) {
  for (int i = 0; i < max_steps; ++i)
    if (!step()) return;
  fail(ErrorCode::PolicyStuck, "supervisor did not settle within " + std::to_string(max_steps) + " steps");
}

void Supervisor::do_await_stationary() {
  camera_to(CameraMode::Imaging);
  now_ = next_stationary(now_);
  enter(SupervisorState::Capturing);
}

void Supervisor::do_capture() {
  cloud_ = capture_cloud(tissue(), scenario_.cloud_noise_mm, cloud_rng_, ++frame_id_);
  captured_markers_ = observe_markers(now_);
  now_ += scenario_.timing.capture_s;
  enter(SupervisorState::Planning);
}

void Supervisor::do_planning() {
  now_ += scenario_.timing.compute_s;
  ++planning_rounds_;
  PlanPair pair;
  try {
    pair = generate_plans(cloud_, captured_markers_, wall_, scenario_.plan);
    pair.uniform = prefilter(pair.uniform, cloud_);
    pair.corner = prefilter(pair.corner, cloud_);
  } catch (const Error& e) {
    pair = PlanPair{};
    pair.uniform.mode = PlanMode::Uniform;
    pair.corner.mode = PlanMode::CornerReinforced;
    for (SuturePlan* p : {&pair.uniform, &pair.corner}) {
      p->wall = wall_;
      p->usable = false;
      p->rejection = error_name(e.code());
    }
  }
  for (SuturePlan* p : {&pair.uniform, &pair.corner}) {
    p->snapshot_id = frame_id_;
    if (!p->usable && p->rejection == "Noisy")
      emit(EventKind::PlanRejectedNoisy, {{"mode", to_string(p->mode)}, {"max_deviation_mm", p->max_deviation_mm}});
  }
  if (pair.uniform.usable || pair.corner.usable) {
    const CollisionIndex index(cloud_);
    for (SuturePlan* p : {&pair.uniform, &pair.corner}) {
      if (!p->usable) continue;
      for (const auto& pt : p->points) {
        CollisionVerdict v;
        try {
          v = predict_collision(solve_rcm(pt.position, executor_.port()), index);
        } catch (const Error&) {
          v.usable = false;
          v.reason = CollisionReason::EmptyJaw;
        }
        if (v.usable) continue;
        emit(EventKind::CollisionWarning, {{"mode", to_string(p->mode)},
                                           {"index", pt.index},
                                           {"point", vec(pt.position)},
                                           {"ratio", v.ratio},
                                           {"reason", to_string(v.reason)}});
        p->usable = false;
        p->rejection = "Collision";
      }
    }
  }
  const bool both = pair.uniform.usable && pair.corner.usable;
  plans_ = pair;
  if (!both && planning_rounds_ < scenario_.max_planning_rounds) {
    // Unusable plans are discarded and a fresh set generated.
    enter(SupervisorState::AwaitStationary);
    return;
  }
  emit(EventKind::PlansReady, {{"round", planning_rounds_},
                               {"uniform", plan_to_json(pair.uniform)},
                               {"corner", plan_to_json(pair.corner)}});
  enter(SupervisorState::AwaitPlanSelection);
}

void Supervisor::select(PlanMode m) {
  selected_ = plans_->get(m);
  remaining_.clear();
  const double skip = progress_mm_ + 0.25 * scenario_.plan.spacing_mm;
  for (const auto& p : selected_->points)
    if (p.param_mm > skip) remaining_.push_back(p);
  baseline_.reset();
}

void Supervisor::do_baseline() {
  camera_to(CameraMode::Suture);
  now_ = next_stationary(now_);
  baseline_ = observe_markers(now_).wall(wall_);
  enter(remaining_.empty() ? SupervisorState::WallComplete : SupervisorState::AwaitDispatch);
}

void Supervisor::do_dispatch() {
  const Point3 target = remaining_.front().position + offset_;
  const double v = profile_.limits.v_max;
  const double lead = executor_.approach_estimate(target);
  now_ = trigger_time(now_, lead * v, v, scenario_.breathing.period_s).trigger;
  enter(SupervisorState::Executing);
}

void Supervisor::do_execute() {
  now_ = executor_.begin_stitch(remaining_.front(), offset_, now_, attempt_);
  for (const auto& f : scenario_.tool_failures) {
    if (f.wall == wall_ && f.stitch == wall_stitches_ + 1 && f.attempt == attempt_) {
      const StitchResult r = executor_.abort_stitch(now_, ErrorCode::ToolFailure);
      now_ = r.finish_s;
      ++tally_.failed_attempts;
      emit(EventKind::ToolFailure, {{"result", stitch_result_to_json(r)}, {"attempt", attempt_}});
      after_failure();
      return;
    }
  }
  if (profile_.require_fire_approval) {
    fire_approved_ = false;
    enter(SupervisorState::AwaitFireApproval);
    return;
  }
  do_fire(now_);
}

void Supervisor::do_fire(double t) {
  // Safety interlock: a bite needs a selected plan, a baseline and, when the
  // profile demands it, an explicit approval.
  if (!selected_ || !baseline_ || (profile_.require_fire_approval && !fire_approved_))
    fail(ErrorCode::InvalidArgument, "bite requested without plan, baseline or fire approval");
  now_ = t;
  TissueState at = rest_;
  at.time_s = t;
  const StitchResult& r = executor_.fire(at, t);
  if (r.success) {
    now_ = t + profile_.bite_s;
    enter(SupervisorState::AwaitAssistant);
    return;
  }
  const StitchResult done = executor_.finish(-1.0);
  now_ = done.finish_s;
  ++tally_.failed_attempts;
  emit(EventKind::StitchFailed,
       {{"result", stitch_result_to_json(done)}, {"reason", error_name(done.failure)}, {"attempt", attempt_}});
  after_failure();
}

void Supervisor::after_failure() {
  if (attempt_ % scenario_.max_attempts == 0) {
    // Out of attempts: the operator has to decide between replanning and
    // carrying on with the current plan.
    escalated_ = true;
    enter(SupervisorState::AwaitReplanApproval);
    return;
  }
  enter(SupervisorState::AwaitOffsetOrRepeat);
}

void Supervisor::complete_stitch(double release_s) {
  const StitchResult r = executor_.finish(release_s);
  now_ = r.finish_s;
  const SuturePoint pt = remaining_.front();
  remaining_.erase(remaining_.begin());
  ++tally_.completed;
  ++wall_stitches_;
  progress_mm_ = pt.param_mm;
  emit(EventKind::StitchCompleted, {{"result", stitch_result_to_json(r)},
                                    {"stitch", tally_.completed},
                                    {"wall_stitch", wall_stitches_},
                                    {"stitch_kind", to_string(pt.kind)},
                                    {"attempt", attempt_}});
  attempt_ = 1;
  offset_ = {};
  for (const auto& d : scenario_.deformations) {
    if (d.wall != wall_ || d.after_stitch != wall_stitches_) continue;
    // Stay-suture tension drags the whole wall within the tissue plane, away
    // from the gap: anywhere in the half-plane facing from the other bowel end
    // toward this one, so the two ends never slide over each other.
    auto centroid = [&](Wall w) {
      Point3 c;
      const auto ids = wall_marker_order(w);
      for (MarkerId id : ids) c += rest_.geometry.rest_markers.at(id).position;
      return c * (1.0 / static_cast<double>(ids.size()));
    };
    const Point3 away = centroid(wall_) - centroid(wall_ == Wall::Back ? Wall::Front : Wall::Back);
    const double facing = std::atan2(away.y, away.x);
    std::uniform_real_distribution<double> angle(facing - 0.5 * std::numbers::pi, facing + 0.5 * std::numbers::pi);
    std::uniform_real_distribution<double> mag(d.magnitude.min_mm, d.magnitude.max_mm);
    const double a = angle(deform_rng_);
    const double m = d.magnitude.max_mm > d.magnitude.min_mm ? mag(deform_rng_) : d.magnitude.min_mm;
    const Point3 delta{m * std::cos(a), m * std::sin(a), 0.0};
    rest_.wall_offset[static_cast<int>(wall_)] += delta;
    ++deformations_applied_;
    append({{"kind", "injection"}, {"wall", to_string(wall_)}, {"delta", vec(delta)}, {"magnitude_mm", m}});
  }
  enter(SupervisorState::DeformationCheck);
}

void Supervisor::do_deformation_check() {
  now_ = next_stationary(now_);
  const MarkerSet current = observe_markers(now_).wall(wall_);
  const DeformationVerdict v = check_deformation(*baseline_, current);
  if (v.replan_recommended) {
    ++tally_.deformation_events;
    emit(EventKind::DeformationDetected, {{"max_mm", v.max_displacement_mm}, {"marker", to_string(v.worst)}});
    enter(SupervisorState::AwaitReplanApproval);
    return;
  }
  emit(EventKind::PlanStillUsable, {{"max_mm", v.max_displacement_mm}});
  enter(remaining_.empty() ? SupervisorState::WallComplete : SupervisorState::AwaitDispatch);
}

void Supervisor::do_wall_complete() {
  emit(EventKind::WallComplete, {{"stitches", wall_stitches_}});
  if (wall_ == Wall::Back) {
    now_ += scenario_.timing.wall_switch_s;
    wall_ = Wall::Front;
    wall_stitches_ = 0;
    progress_mm_ = -1e9;
    plans_.reset();
    selected_.reset();
    baseline_.reset();
    remaining_.clear();
    planning_rounds_ = 0;
    enter(SupervisorState::AwaitStationary);
    return;
  }
  emit(EventKind::AnastomosisComplete, {{"stitches", tally_.completed}});
  enter(SupervisorState::Done);
}

void Supervisor::submit(const OperatorCommand& cmd, double at_s) {
  if (!std::isfinite(at_s) || at_s < now_) fail(ErrorCode::InvalidArgument, "command time precedes the session clock");
  if (!command_allowed(state_, cmd.kind))
    fail(ErrorCode::InvalidCommandForState,
         std::string(to_string(cmd.kind)) + " is not accepted in state " + to_string(state_));
  if (cmd.kind == CommandKind::SelectPlan && !plans_->get(cmd.mode).usable)
    fail(ErrorCode::InvalidCommandForState, std::string(to_string(cmd.mode)) + " plan is not usable");
  if (cmd.kind == CommandKind::NudgeOffset && !cmd.offset.finite())
    fail(ErrorCode::InvalidArgument, "offset must be finite");

  now_ = at_s;
  ++commands_;
  append({{"kind", "command"}, {"command", command_to_json(cmd)}, {"state", to_string(state_)}});

  using S = SupervisorState;
  switch (cmd.kind) {
    case CommandKind::Pause:
      paused_from_ = state_;
      enter(S::Paused);
      break;
    case CommandKind::Resume: enter(paused_from_); break;
    case CommandKind::Abort: enter(S::Aborted); break;
    case CommandKind::StartPlanning:
      planning_rounds_ = 0;
      plans_.reset();
      enter(S::AwaitStationary);
      break;
    case CommandKind::SelectPlan:
      select(cmd.mode);
      enter(S::BaselineSnapshot);
      break;
    case CommandKind::ApproveReplan:
      ++tally_.replans;
      escalated_ = false;
      attempt_ = 1;
      offset_ = {};
      plans_.reset();
      selected_.reset();
      baseline_.reset();
      planning_rounds_ = 0;
      enter(S::AwaitStationary);
      break;
    case CommandKind::KeepExistingPlan:
      if (escalated_) {
        escalated_ = false;
        enter(S::AwaitOffsetOrRepeat);
        break;
      }
      // The current marker positions become the new reference.
      now_ = next_stationary(now_);
      baseline_ = observe_markers(now_).wall(wall_);
      enter(remaining_.empty() ? S::WallComplete : S::AwaitDispatch);
      break;
    case CommandKind::NudgeOffset: offset_ += cmd.offset; break;
    case CommandKind::RepeatStitch:
      ++attempt_;
      enter(S::AwaitDispatch);
      break;
    case CommandKind::ApproveFire: {
      fire_approved_ = true;
      TissueState s = rest_;
      s.time_s = now_;
      do_fire(s.breath_state() == BreathState::Stationary ? now_ : next_stationary(now_));
      break;
    }
    case CommandKind::ReleaseAssistantGate: complete_stitch(now_); break;
  }
}

// ---------------------------------------------------------------------------
// Policies

namespace {
std::string auto_id(const Supervisor& sup) { return "auto-" + std::to_string(sup.commands_seen() + 1); }

// Failed attempts since the last completed stitch.
int failures_since_completion(const Supervisor& sup) {
  int n = 0;
  const auto& recs = sup.log().records;
  for (auto it = recs.rbegin(); it != recs.rend(); ++it) {
    if (it->value("kind", "") != "event") continue;
    const std::string e = it->value("event", "");
    if (e == "StitchCompleted") break;
    n += e == "StitchFailed" || e == "ToolFailure";
  }
  return n;
}
}  // namespace

std::optional<PolicyDecision> AutoApprovePolicy::decide(const Supervisor& sup) {
  const double lat = sup.scenario().operator_latency_s;
  const double decided = std::max(sup.now(), sup.state_entered_s() + lat);
  auto make = [&](OperatorCommand c, double at) { return PolicyDecision{std::move(c), at}; };
  switch (sup.state()) {
    case SupervisorState::Idle: return make(OperatorCommand::make(CommandKind::StartPlanning, auto_id(sup)), sup.now());
    case SupervisorState::AwaitPlanSelection:
      if (sup.plans() && sup.plans()->get(mode_).usable)
        return make(OperatorCommand::select(mode_, auto_id(sup)), decided);
      return make(OperatorCommand::make(CommandKind::StartPlanning, auto_id(sup)), decided);
    case SupervisorState::AwaitReplanApproval:
      if (failures_since_completion(sup) >= sup.scenario().max_attempts * sup.scenario().max_planning_rounds)
        return std::nullopt;  // replanning has not helped this stitch; leave it to a person
      return make(OperatorCommand::make(CommandKind::ApproveReplan, auto_id(sup)), decided);
    case SupervisorState::AwaitFireApproval:
      return make(OperatorCommand::make(CommandKind::ApproveFire, auto_id(sup)), decided);
    case SupervisorState::AwaitAssistant:
      return make(OperatorCommand::make(CommandKind::ReleaseAssistantGate, auto_id(sup)), sup.now());
    case SupervisorState::Paused: return make(OperatorCommand::make(CommandKind::Resume, auto_id(sup)), decided);
    default: return std::nullopt;
  }
}

std::optional<PolicyDecision> CorrectivePolicy::decide(const Supervisor& sup) {
  if (sup.state() != SupervisorState::AwaitOffsetOrRepeat) return AutoApprovePolicy::decide(sup);
  const double at = std::max(sup.now(), sup.state_entered_s() + sup.scenario().operator_latency_s);
  const auto& recs = sup.log().records;
  const bool just_nudged = !recs.empty() && recs.back().value("kind", "") == "command" &&
                           recs.back()["command"].value("type", "") == "NudgeOffset";
  const Point3 delta = sup.observed_wall_shift() - sup.pending_offset();
  if (!just_nudged && norm(delta) > 0.5) return PolicyDecision{OperatorCommand::nudge(delta, auto_id(sup)), at};
  return PolicyDecision{OperatorCommand::make(CommandKind::RepeatStitch, auto_id(sup)), at};
}

ReplayFromLogPolicy::ReplayFromLogPolicy(const RunLog& log) {
  for (const auto& r : log.of_kind("command")) {
    try {
      commands_.push_back({command_from_json(r.at("command")), r.at("t").get<double>()});
    } catch (const std::exception& e) {
      fail(ErrorCode::CorruptLog, "unreadable command at seq " + r.value("seq", json()).dump() + ": " + e.what());
    }
  }
}

std::optional<PolicyDecision> ReplayFromLogPolicy::decide(const Supervisor&) {
  if (next_ >= commands_.size()) return std::nullopt;
  return commands_[next_++];
}

std::unique_ptr<OperatorPolicy> make_policy(const std::string& name) {
  if (name == "AutoApprove") return std::make_unique<AutoApprovePolicy>();
  if (name == "CornerPreferring") return std::make_unique<CornerPreferringPolicy>();
  if (name == "Corrective") return std::make_unique<CorrectivePolicy>();
  fail(ErrorCode::InvalidArgument, "unknown policy '" + name + "' (AutoApprove, CornerPreferring, Corrective)");
}

namespace {
RunLog drive(Supervisor& sup, OperatorPolicy& policy, RunLog* partial) {
  // Each iteration consumes one command; the bound only guards against a
  // policy that loops forever without progress.
  for (int i = 0; i < 1000000; ++i) {
    sup.run_until_blocked();
    if (is_terminal(sup.state())) return sup.log();
    const auto d = policy.decide(sup);
    if (!d) {
      if (partial) *partial = sup.log();
      fail(ErrorCode::PolicyStuck,
           "policy " + policy.name() + " has no command for state " + to_string(sup.state()));
    }
    sup.submit(d->command, d->at_s);
  }
  if (partial) *partial = sup.log();
  fail(ErrorCode::PolicyStuck, "policy " + policy.name() + " did not finish the session");
}
}  // namespace

RunLog run_scripted(OperatorPolicy& policy, const Scenario& scenario, const SafetyProfile& profile,
                    std::uint64_t seed, RunLog* partial) {
  Supervisor sup(scenario, profile, seed, policy.name());
  return drive(sup, policy, partial);
}

RunLog replay(const RunLog& log) {
  if (log.header.value("schema", "") != kRunLogSchema) fail(ErrorCode::CorruptLog, "not a run log");
  if (log.header.value("version", 0) != kRunLogVersion) fail(ErrorCode::SchemaVersionMismatch, "unsupported run log version");
  if (!log.complete()) fail(ErrorCode::CorruptLog, "log has no end record");
  Scenario scenario;
  SafetyProfile profile;
  std::uint64_t seed = 0;
  std::string policy_name;
  try {
    scenario = scenario_from_json(log.header.at("scenario"));
    profile = SafetyProfile::by_name(log.header.at("profile").get<std::string>());
    seed = log.header.at("seed").get<std::uint64_t>();
    policy_name = log.header.at("policy").get<std::string>();
  } catch (const std::exception& e) {
    fail(ErrorCode::CorruptLog, std::string("bad header: ") + e.what());
  }
  ReplayFromLogPolicy policy(log);
  Supervisor sup(scenario, profile, seed, policy_name);
  try {
    return drive(sup, policy, nullptr);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::InvalidCommandForState || e.code() == ErrorCode::PolicyStuck ||
        e.code() == ErrorCode::InvalidArgument)
      fail(ErrorCode::CorruptLog, std::string("recorded commands do not replay: ") + e.what());
    throw;
  }
}

// ---------------------------------------------------------------------------
// Hesitancy

HesitancySummary summarize_hesitancy(std::vector<HesitancyRecord> records) {
  HesitancySummary s;
  s.stitches = std::move(records);
  s.total_stitches = static_cast<int>(s.stitches.size());
  int first = 0;
  int offsets = 0;
  double norm_sum = 0.0;
  for (const auto& r : s.stitches) {
    s.extra_attempts += r.attempts - 1;
    first += r.attempts == 1;
    for (const auto& o : r.offsets) {
      norm_sum += o.norm_mm;
      ++offsets;
    }
  }
  if (s.total_stitches > 0) {
    s.per_stitch = static_cast<double>(s.extra_attempts) / s.total_stitches;
    s.first_attempt_rate = static_cast<double>(first) / s.total_stitches;
  }
  if (offsets > 0) s.mean_offset_norm_mm = norm_sum / offsets;
  return s;
}

HesitancySummary hesitancy_report(const RunLog& log) {
  std::vector<HesitancyRecord> out;
  std::vector<OffsetRecord> pending;
  for (const auto& r : log.records) {
    const std::string kind = r.value("kind", "");
    if (kind == "command" && r["command"].value("type", "") == "NudgeOffset") {
      const Point3 v = vec_from(r["command"]["offset"]);
      pending.push_back({v, norm(v)});
    } else if (kind == "event" && r.value("event", "") == "StitchCompleted") {
      HesitancyRecord h;
      h.stitch = r.at("stitch").get<int>();
      h.wall = wall_from_string(r.at("wall").get<std::string>());
      h.attempts = r.at("attempt").get<int>();
      h.offsets = std::move(pending);
      pending.clear();
      out.push_back(std::move(h));
    }
  }
  return summarize_hesitancy(std::move(out));
}

}  // namespace lapsim
