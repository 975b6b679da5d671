#pragma once

// The conditional-autonomy workflow: measure, plan, approve, execute and
// deformation-check cycles driven on a simulated clock, with every state
// change, operator command and event appended to a JSONL run log.

#include <array>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapsim/core.hpp"
#include "lapsim/executor.hpp"
#include "lapsim/planner.hpp"
#include "lapsim/tissue.hpp"

namespace lapsim {

enum class SupervisorState {
  Idle,
  AwaitStationary,
  Capturing,
  Planning,
  AwaitPlanSelection,
  BaselineSnapshot,
  AwaitDispatch,
  Executing,
  AwaitAssistant,
  AwaitFireApproval,
  DeformationCheck,
  AwaitReplanApproval,
  AwaitOffsetOrRepeat,
  WallComplete,
  Done,
  Paused,
  Aborted,
};
inline constexpr int kSupervisorStateCount = 17;

const char* to_string(SupervisorState s);
SupervisorState supervisor_state_from_string(const std::string& s);  // throws InvalidArgument
bool is_terminal(SupervisorState s);
// States that wait on an operator command rather than on the simulation.
bool awaits_operator(SupervisorState s);

enum class CommandKind {
  StartPlanning,
  SelectPlan,
  ApproveReplan,
  KeepExistingPlan,
  NudgeOffset,
  RepeatStitch,
  ApproveFire,
  ReleaseAssistantGate,
  Pause,
  Resume,
  Abort,
};
inline constexpr int kCommandKindCount = 11;

const char* to_string(CommandKind c);
CommandKind command_kind_from_string(const std::string& s);  // throws InvalidArgument

// The transition table's guard: whether `cmd` is accepted in `state`. Total
// over every pair. StartPlanning in AwaitPlanSelection rejects both plans and
// requests a fresh capture.
bool command_allowed(SupervisorState state, CommandKind cmd);

struct OperatorCommand {
  CommandKind kind = CommandKind::StartPlanning;
  PlanMode mode = PlanMode::Uniform;  // SelectPlan
  Point3 offset;                      // NudgeOffset, mm
  std::string id;                     // issuer's command id, echoed in the log

  static OperatorCommand make(CommandKind k, std::string id = {});
  static OperatorCommand select(PlanMode m, std::string id = {});
  static OperatorCommand nudge(const Point3& v, std::string id = {});
};

nlohmann::json command_to_json(const OperatorCommand& c);
OperatorCommand command_from_json(const nlohmann::json& j);  // throws InvalidArgument

enum class EventKind {
  PlansReady,
  PlanRejectedNoisy,
  CollisionWarning,
  DeformationDetected,
  PlanStillUsable,
  StitchCompleted,
  StitchFailed,
  ToolFailure,
  WallComplete,
  AnastomosisComplete,
};
const char* to_string(EventKind e);

// ---------------------------------------------------------------------------
// Scenario

struct ScheduledDeformation {
  Wall wall = Wall::Back;
  int after_stitch = 1;  // fires once this many stitches of the wall are complete
  MagnitudeRange magnitude{4.0, 6.0};
};

struct ScheduledToolFailure {
  Wall wall = Wall::Back;
  int stitch = 1;   // 1-based stitch ordinal on the wall
  int attempt = 1;
};

struct ScenarioTiming {
  double capture_s = 1.0;
  double compute_s = 2.0;
  double wall_switch_s = 30.0;
  double detector_latency_s = 0.05;
};

struct Scenario {
  std::string name = "default";
  BreathingProfile breathing{};
  double cloud_noise_mm = 0.2;
  double marker_noise_mm = 0.1;
  PlanParameters plan{};
  double operator_latency_s = 2.0;  // scripted policies answer this long after a state is entered
  int max_attempts = 5;
  int max_planning_rounds = 5;
  ScenarioTiming timing{};
  std::vector<ScheduledDeformation> deformations;
  std::vector<ScheduledToolFailure> tool_failures;

  // One back-wall and two front-wall stay-suture pulls of 4-6 mm.
  static Scenario standard();
  static Scenario quiet();  // no deformation, no faults

  void validate() const;  // throws InvalidScenario
};

nlohmann::json scenario_to_json(const Scenario& s);
Scenario scenario_from_json(const nlohmann::json& j);  // throws InvalidScenario
// Throws InvalidScenario whose message names the offending line.
Scenario parse_scenario(const std::string& text);
Scenario load_scenario(const std::string& path);  // also IoError

// ---------------------------------------------------------------------------
// Run log

inline constexpr const char* kRunLogSchema = "lapsim.runlog";
inline constexpr int kRunLogVersion = 1;

// Header line followed by one record per line. Records carry a strictly
// increasing "seq", simulated time "t" and a "kind" of state, command,
// event or end.
struct RunLog {
  nlohmann::json header;
  std::vector<nlohmann::json> records;

  std::string to_jsonl() const;
  bool complete() const;  // ends with an end record
  std::vector<nlohmann::json> events() const;
  std::vector<nlohmann::json> of_kind(const std::string& kind) const;

  // Throws SchemaVersionMismatch, CorruptLog (with the offending line).
  static RunLog parse(const std::string& text);
  static RunLog load(const std::string& path);  // also IoError
  void save(const std::string& path) const;      // fsyncs; throws IoError
};

// ---------------------------------------------------------------------------
// Supervisor

struct StitchTally {
  int completed = 0;
  int failed_attempts = 0;
  int replans = 0;
  int deformation_events = 0;
};

class Supervisor {
 public:
  using Listener = std::function<void(const nlohmann::json& record)>;

  Supervisor(Scenario scenario, SafetyProfile profile, std::uint64_t seed, std::string policy = "manual");

  SupervisorState state() const { return state_; }
  double now() const { return now_; }
  Wall wall() const { return wall_; }
  const Scenario& scenario() const { return scenario_; }
  const SafetyProfile& profile() const { return profile_; }
  std::uint64_t seed() const { return seed_; }
  const RunLog& log() const { return log_; }
  const StitchTally& tally() const { return tally_; }
  const std::optional<PlanPair>& plans() const { return plans_; }
  const std::optional<SuturePlan>& selected() const { return selected_; }
  int attempt() const { return attempt_; }
  const Point3& pending_offset() const { return offset_; }
  // Simulated truth at the current time.
  TissueState tissue() const;
  // Mean marker shift of the working wall against the baseline, as an
  // operator would judge it from the camera. Zero without a baseline.
  Point3 observed_wall_shift() const;
  // When the last state was entered (operator latency is measured from here).
  double state_entered_s() const { return entered_s_; }
  // Incremental key for deterministic command ids.
  int commands_seen() const { return commands_; }

  // Records are delivered after they are appended to the log.
  void set_listener(Listener l) { listener_ = std::move(l); }

  // One automatic transition. False when waiting on the operator or terminal.
  bool step();
  void run_until_blocked(int max_steps = 100000);

  // Applies an operator command at simulated time at_s (>= now). Throws
  // InvalidCommandForState (state unchanged) or InvalidArgument.
  void submit(const OperatorCommand& cmd, double at_s);
  bool accepts(CommandKind c) const { return command_allowed(state_, c); }

 private:
  void enter(SupervisorState s);
  void emit(EventKind kind, nlohmann::json payload);
  void append(nlohmann::json record);
  void finish_log();

  double next_stationary(double t) const;
  MarkerSet observe_markers(double t);
  void camera_to(CameraMode m);
  void do_await_stationary();
  void do_capture();
  void do_planning();
  void do_baseline();
  void do_dispatch();
  void do_execute();
  void do_fire(double t);
  void do_deformation_check();
  void do_wall_complete();
  void complete_stitch(double release_s);
  void after_failure();
  void select(PlanMode m);

  Scenario scenario_;
  SafetyProfile profile_;
  std::uint64_t seed_;
  RunLog log_;
  Listener listener_;

  SupervisorState state_ = SupervisorState::Idle;
  SupervisorState paused_from_ = SupervisorState::Idle;
  double now_ = 0.0;
  double entered_s_ = 0.0;
  int seq_ = 0;
  int commands_ = 0;

  TissueState rest_;  // tissue without time; wall offsets accumulate here
  std::mt19937_64 cloud_rng_, marker_rng_, deform_rng_;
  Executor executor_;
  CameraRig camera_;

  Wall wall_ = Wall::Back;
  int wall_stitches_ = 0;  // completed on the current wall
  double progress_mm_ = -1e9;  // path parameter of the last completed stitch
  std::size_t deformations_applied_ = 0;
  int planning_rounds_ = 0;
  std::uint64_t frame_id_ = 0;
  PointCloud cloud_;
  MarkerSet captured_markers_;
  std::optional<PlanPair> plans_;
  std::optional<SuturePlan> selected_;
  std::vector<SuturePoint> remaining_;
  std::optional<MarkerSet> baseline_;
  int attempt_ = 1;
  Point3 offset_;
  bool fire_approved_ = false;
  bool escalated_ = false;
  StitchTally tally_;
};

// ---------------------------------------------------------------------------
// Scripted operators

struct PolicyDecision {
  OperatorCommand command;
  double at_s = 0.0;
};

class OperatorPolicy {
 public:
  virtual ~OperatorPolicy() = default;
  virtual std::string name() const = 0;
  // nullopt means the policy has no answer for the awaited state.
  virtual std::optional<PolicyDecision> decide(const Supervisor& sup) = 0;
};

// Uniform plans, approves every replan and fire, releases the assistant gate,
// never nudges or repeats. Gives up once one stitch has failed through
// max_planning_rounds escalations.
class AutoApprovePolicy : public OperatorPolicy {
 public:
  explicit AutoApprovePolicy(PlanMode mode = PlanMode::Uniform) : mode_(mode) {}
  std::string name() const override { return mode_ == PlanMode::Uniform ? "AutoApprove" : "CornerPreferring"; }
  std::optional<PolicyDecision> decide(const Supervisor& sup) override;

 protected:
  PlanMode mode_;
};

class CornerPreferringPolicy : public AutoApprovePolicy {
 public:
  CornerPreferringPolicy() : AutoApprovePolicy(PlanMode::CornerReinforced) {}
};

// AutoApprove that also answers failures: nudges by the observed wall shift
// once per stitch, then repeats.
class CorrectivePolicy : public AutoApprovePolicy {
 public:
  std::string name() const override { return "Corrective"; }
  std::optional<PolicyDecision> decide(const Supervisor& sup) override;
};

// Re-issues the commands of a recorded log at their recorded times.
class ReplayFromLogPolicy : public OperatorPolicy {
 public:
  explicit ReplayFromLogPolicy(const RunLog& log);
  std::string name() const override { return "ReplayFromLog"; }
  std::optional<PolicyDecision> decide(const Supervisor& sup) override;

 private:
  std::vector<PolicyDecision> commands_;
  std::size_t next_ = 0;
};

// AutoApprove, CornerPreferring, Corrective. Throws InvalidArgument.
std::unique_ptr<OperatorPolicy> make_policy(const std::string& name);

// Drives a session to Done or Aborted. Throws PolicyStuck when the policy has
// no command for an awaited state; `partial` then holds the log so far.
RunLog run_scripted(OperatorPolicy& policy, const Scenario& scenario, const SafetyProfile& profile,
                    std::uint64_t seed, RunLog* partial = nullptr);

// Re-runs a log's scenario, profile and seed with its recorded commands.
// Throws SchemaVersionMismatch, CorruptLog (the log's commands no longer fit).
RunLog replay(const RunLog& log);

// ---------------------------------------------------------------------------
// Hesitancy

struct OffsetRecord {
  Point3 offset;
  double norm_mm = 0.0;
};

struct HesitancyRecord {
  int stitch = 0;  // 1-based completion order over the whole anastomosis
  Wall wall = Wall::Back;
  int attempts = 1;
  std::vector<OffsetRecord> offsets;
};

struct HesitancySummary {
  std::vector<HesitancyRecord> stitches;
  int total_stitches = 0;
  int extra_attempts = 0;
  double per_stitch = 0.0;          // extra attempts / stitches
  double first_attempt_rate = 0.0;  // fraction of stitches placed at attempt 1
  double mean_offset_norm_mm = 0.0;
};

HesitancySummary summarize_hesitancy(std::vector<HesitancyRecord> records);
HesitancySummary hesitancy_report(const RunLog& log);

}  // namespace lapsim
