#include <set>

#include "doctest.h"
#include "lapsim/error.hpp"
#include "lapsim/supervisor.hpp"

using namespace lapsim;
using nlohmann::json;

namespace {
ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(0);
}

std::vector<json> events_named(const RunLog& log, const std::string& name) {
  std::vector<json> out;
  for (const auto& e : log.events())
    if (e["event"] == name) out.push_back(e);
  return out;
}

// Steps automatic states until `target` is entered or the supervisor blocks.
bool step_until(Supervisor& sup, SupervisorState target) {
  while (sup.state() != target)
    if (!sup.step()) return false;
  return true;
}

void answer(Supervisor& sup, OperatorPolicy& p) {
  auto d = p.decide(sup);
  REQUIRE(d.has_value());
  sup.submit(d->command, d->at_s);
}

const RunLog& standard_log() {
  static const RunLog log = [] {
    AutoApprovePolicy p;
    return run_scripted(p, Scenario::standard(), SafetyProfile::ex_vivo(), 42);
  }();
  return log;
}
}  // namespace

TEST_CASE("command table is total and guards as documented") {
  for (int s = 0; s < kSupervisorStateCount; ++s)
    for (int c = 0; c < kCommandKindCount; ++c) {
      const auto st = static_cast<SupervisorState>(s);
      const auto cmd = static_cast<CommandKind>(c);
      const bool ok = command_allowed(st, cmd);
      if (is_terminal(st)) CHECK_FALSE(ok);
      if (cmd == CommandKind::Pause && !is_terminal(st)) CHECK(ok == (st != SupervisorState::Paused));
      if (cmd == CommandKind::Abort) CHECK(ok == !is_terminal(st));
      if (cmd == CommandKind::NudgeOffset) CHECK(ok == (st == SupervisorState::AwaitOffsetOrRepeat));
    }
  CHECK(command_allowed(SupervisorState::Idle, CommandKind::StartPlanning));
  CHECK_FALSE(command_allowed(SupervisorState::Executing, CommandKind::SelectPlan));
  for (int s = 0; s < kSupervisorStateCount; ++s)
    CHECK(supervisor_state_from_string(to_string(static_cast<SupervisorState>(s))) == static_cast<SupervisorState>(s));
}

TEST_CASE("entry transition and rejected commands leave the state unchanged") {
  Supervisor sup(Scenario::quiet(), SafetyProfile::ex_vivo(), 1);
  CHECK(sup.state() == SupervisorState::Idle);
  CHECK(code_of([&] { sup.submit(OperatorCommand::make(CommandKind::ApproveFire), 0.0); }) ==
        ErrorCode::InvalidCommandForState);
  CHECK(sup.state() == SupervisorState::Idle);
  sup.submit(OperatorCommand::make(CommandKind::StartPlanning), 0.0);
  CHECK(sup.state() == SupervisorState::AwaitStationary);

  AutoApprovePolicy p;
  sup.run_until_blocked();
  REQUIRE(sup.state() == SupervisorState::AwaitPlanSelection);
  CHECK(code_of([&] { sup.submit(OperatorCommand::make(CommandKind::StartPlanning), sup.now() - 1.0); }) ==
        ErrorCode::InvalidArgument);
  answer(sup, p);
  REQUIRE(step_until(sup, SupervisorState::Executing));
  const auto before = sup.log().records.size();
  CHECK(code_of([&] { sup.submit(OperatorCommand::nudge({0, 1, 0}), sup.now()); }) ==
        ErrorCode::InvalidCommandForState);
  CHECK(sup.state() == SupervisorState::Executing);
  CHECK(sup.log().records.size() == before);
}

TEST_CASE("pause and resume from an automatic state") {
  Supervisor sup(Scenario::quiet(), SafetyProfile::ex_vivo(), 2);
  AutoApprovePolicy p;
  answer(sup, p);
  sup.run_until_blocked();
  answer(sup, p);
  REQUIRE(step_until(sup, SupervisorState::AwaitDispatch));
  sup.submit(OperatorCommand::make(CommandKind::Pause), sup.now());
  CHECK(sup.state() == SupervisorState::Paused);
  CHECK_FALSE(sup.step());
  CHECK(code_of([&] { sup.submit(OperatorCommand::make(CommandKind::Pause), sup.now()); }) ==
        ErrorCode::InvalidCommandForState);
  sup.submit(OperatorCommand::make(CommandKind::Resume), sup.now() + 10.0);
  CHECK(sup.state() == SupervisorState::AwaitDispatch);
  sup.submit(OperatorCommand::make(CommandKind::Abort), sup.now());
  CHECK(sup.state() == SupervisorState::Aborted);
  CHECK(sup.log().complete());
  CHECK(code_of([&] { sup.submit(OperatorCommand::make(CommandKind::Resume), sup.now()); }) ==
        ErrorCode::InvalidCommandForState);
}

TEST_CASE("rejecting both plans triggers a fresh capture") {
  Supervisor sup(Scenario::quiet(), SafetyProfile::ex_vivo(), 3);
  sup.submit(OperatorCommand::make(CommandKind::StartPlanning), 0.0);
  sup.run_until_blocked();
  const auto first = sup.plans()->uniform.snapshot_id;
  sup.submit(OperatorCommand::make(CommandKind::StartPlanning), sup.now() + 1.0);
  sup.run_until_blocked();
  REQUIRE(sup.state() == SupervisorState::AwaitPlanSelection);
  CHECK(sup.plans()->uniform.snapshot_id > first);
  CHECK(events_named(sup.log(), "PlansReady").size() == 2);
}

TEST_CASE("deformation of 4.2 mm is reported and awaits approval") {
  Scenario sc = Scenario::quiet();
  sc.marker_noise_mm = 0.0;
  sc.deformations = {{Wall::Back, 1, {4.2, 4.2}}};
  Supervisor sup(sc, SafetyProfile::ex_vivo(), 4);
  AutoApprovePolicy p;
  for (int i = 0; i < 50 && sup.state() != SupervisorState::AwaitReplanApproval; ++i) {
    sup.run_until_blocked();
    if (sup.state() != SupervisorState::AwaitReplanApproval) answer(sup, p);
  }
  REQUIRE(sup.state() == SupervisorState::AwaitReplanApproval);
  const auto det = events_named(sup.log(), "DeformationDetected");
  REQUIRE(det.size() == 1);
  CHECK(det[0]["max_mm"].get<double>() == doctest::Approx(4.2).epsilon(1e-9));
}

TEST_CASE("default scenario: three detections, one per injected pull, each followed by a replan") {
  const RunLog& log = standard_log();
  CHECK(log.records.back()["state"] == "Done");
  const auto inj = log.of_kind("injection");
  const auto det = events_named(log, "DeformationDetected");
  REQUIRE(inj.size() == 3);
  REQUIRE(det.size() == 3);
  int back = 0, front = 0;
  for (std::size_t i = 0; i < 3; ++i) {
    CHECK(det[i]["wall"] == inj[i]["wall"]);
    CHECK(det[i]["seq"].get<int>() > inj[i]["seq"].get<int>());
    if (i + 1 < 3) CHECK(det[i]["seq"].get<int>() < inj[i + 1]["seq"].get<int>());
    CHECK(inj[i]["magnitude_mm"].get<double>() > 3.0);
    (inj[i]["wall"] == "back" ? back : front)++;
  }
  CHECK(back == 1);
  CHECK(front == 2);
  // Each detection is answered by a replan and a fresh plan set.
  std::size_t k = 0;
  const auto& recs = log.records;
  for (std::size_t i = 0; i < recs.size(); ++i) {
    if (recs[i].value("event", "") != "DeformationDetected") continue;
    bool replanned = false, planned = false;
    for (std::size_t j = i + 1; j < recs.size(); ++j) {
      if (recs[j].value("kind", "") == "command" && recs[j]["command"]["type"] == "ApproveReplan") replanned = true;
      if (replanned && recs[j].value("event", "") == "PlansReady") {
        planned = true;
        break;
      }
    }
    CHECK(replanned);
    CHECK(planned);
    ++k;
  }
  CHECK(k == 3);
  CHECK(log.records.back()["replans"] == 3);
}

TEST_CASE("zero deformation: no detections and one stitch per plan point") {
  AutoApprovePolicy p;
  for (std::uint64_t seed : {5u, 6u, 7u}) {
    const RunLog log = run_scripted(p, Scenario::quiet(), SafetyProfile::ex_vivo(), seed);
    CHECK(events_named(log, "DeformationDetected").empty());
    const auto plans = events_named(log, "PlansReady");
    REQUIRE(plans.size() == 2);
    const std::size_t expected = plans[0]["uniform"]["points"].size() + plans[1]["uniform"]["points"].size();
    CHECK(events_named(log, "StitchCompleted").size() == expected);
    CHECK(log.records.back()["state"] == "Done");
  }
}

TEST_CASE("same seed gives byte-identical logs, and replay reproduces them") {
  AutoApprovePolicy p;
  const std::string a = run_scripted(p, Scenario::standard(), SafetyProfile::ex_vivo(), 42).to_jsonl();
  CHECK(a == standard_log().to_jsonl());
  const std::string other = run_scripted(p, Scenario::standard(), SafetyProfile::ex_vivo(), 43).to_jsonl();
  CHECK(a != other);
  const RunLog r1 = replay(standard_log());
  CHECK(r1.to_jsonl() == a);
  CHECK(replay(r1).to_jsonl() == r1.to_jsonl());
  CHECK(RunLog::parse(a).to_jsonl() == a);
}

TEST_CASE("bites only happen with a plan, a baseline and (in vivo) fire approval") {
  AutoApprovePolicy p;
  for (const auto& profile : {SafetyProfile::ex_vivo(), SafetyProfile::in_vivo()}) {
    const RunLog log = run_scripted(p, Scenario::standard(), profile, 11);
    CHECK(log.records.back()["state"] == "Done");
    bool selected = false, baseline = false, approved = false;
    int bites = 0;
    for (const auto& r : log.records) {
      const std::string kind = r["kind"];
      if (kind == "command") {
        const std::string type = r["command"]["type"];
        if (type == "SelectPlan") {
          selected = true;
          baseline = false;
        }
        if (type == "ApproveReplan") selected = baseline = false;
        if (type == "ApproveFire") approved = true;
      } else if (kind == "state") {
        if (r["state"] == "BaselineSnapshot") baseline = false;
        if (r.value("from", "") == "BaselineSnapshot") baseline = true;
        if (r["state"] == "Executing") approved = false;
      } else if (kind == "event" && (r["event"] == "StitchCompleted" || r["event"] == "StitchFailed")) {
        ++bites;
        CHECK(selected);
        CHECK(baseline);
        if (profile.require_fire_approval) CHECK(approved);
      }
    }
    CHECK(bites > 0);
  }
}

TEST_CASE("tool failure: AutoApprove is stuck, Corrective repeats") {
  Scenario sc = Scenario::quiet();
  sc.tool_failures = {{Wall::Front, 3, 1}};
  AutoApprovePolicy a;
  RunLog partial;
  CHECK(code_of([&] { run_scripted(a, sc, SafetyProfile::ex_vivo(), 9, &partial); }) == ErrorCode::PolicyStuck);
  CHECK(events_named(partial, "ToolFailure").size() == 1);
  CHECK(partial.records.back()["state"] == "AwaitOffsetOrRepeat");

  CorrectivePolicy c;
  const RunLog log = run_scripted(c, sc, SafetyProfile::ex_vivo(), 9);
  CHECK(log.records.back()["state"] == "Done");
  const auto h = hesitancy_report(log);
  CHECK(h.total_stitches == 24);
  CHECK(h.extra_attempts == 1);
  int twice = 0;
  for (const auto& r : h.stitches) twice += r.attempts == 2;
  CHECK(twice == 1);
  CHECK(h.first_attempt_rate == doctest::Approx(23.0 / 24.0));
}

TEST_CASE("corrective nudges follow the observed wall shift") {
  Scenario sc = Scenario::quiet();
  sc.marker_noise_mm = 0.0;
  // Small pull that stays under the replan threshold, then a tool failure.
  sc.deformations = {{Wall::Back, 2, {2.5, 2.5}}};
  sc.tool_failures = {{Wall::Back, 3, 1}};
  CorrectivePolicy c;
  const RunLog log = run_scripted(c, sc, SafetyProfile::ex_vivo(), 10);
  CHECK(log.records.back()["state"] == "Done");
  const auto h = hesitancy_report(log);
  REQUIRE(h.stitches.size() >= 3);
  const auto& third = h.stitches[2];
  CHECK(third.attempts == 2);
  REQUIRE(third.offsets.size() == 1);
  CHECK(third.offsets[0].norm_mm == doctest::Approx(2.5).epsilon(1e-6));
  CHECK(h.mean_offset_norm_mm == doctest::Approx(2.5).epsilon(1e-6));
}

TEST_CASE("five failed attempts escalate to the replan decision") {
  Scenario sc = Scenario::quiet();
  for (int a = 1; a <= 5; ++a) sc.tool_failures.push_back({Wall::Back, 1, a});
  Supervisor sup(sc, SafetyProfile::ex_vivo(), 12);
  AutoApprovePolicy p;
  answer(sup, p);
  sup.run_until_blocked();
  answer(sup, p);
  for (int a = 1; a <= 4; ++a) {
    sup.run_until_blocked();
    REQUIRE(sup.state() == SupervisorState::AwaitOffsetOrRepeat);
    CHECK(sup.attempt() == a);
    sup.submit(OperatorCommand::make(CommandKind::RepeatStitch), sup.now());
  }
  sup.run_until_blocked();
  CHECK(sup.state() == SupervisorState::AwaitReplanApproval);
  CHECK(events_named(sup.log(), "ToolFailure").size() == 5);
  sup.submit(OperatorCommand::make(CommandKind::KeepExistingPlan), sup.now());
  CHECK(sup.state() == SupervisorState::AwaitOffsetOrRepeat);
  sup.submit(OperatorCommand::make(CommandKind::RepeatStitch), sup.now());
  sup.run_until_blocked();
  CHECK(sup.state() == SupervisorState::AwaitAssistant);
  CHECK(sup.attempt() == 6);
}

TEST_CASE("scripted policies give up on a stitch that replanning cannot fix") {
  Scenario sc = Scenario::quiet();
  // Attempts restart after each replan, so this stitch fails every time.
  for (int a = 1; a <= 5; ++a) sc.tool_failures.push_back({Wall::Back, 1, a});
  CorrectivePolicy c;
  RunLog partial;
  CHECK(code_of([&] { run_scripted(c, sc, SafetyProfile::ex_vivo(), 12, &partial); }) == ErrorCode::PolicyStuck);
  CHECK(partial.records.back()["state"] == "AwaitReplanApproval");
  CHECK(events_named(partial, "ToolFailure").size() ==
        static_cast<std::size_t>(sc.max_attempts * sc.max_planning_rounds));
  int replans = 0;
  for (const auto& r : partial.of_kind("command")) replans += r["command"]["type"] == "ApproveReplan";
  CHECK(replans == sc.max_planning_rounds - 1);
}

TEST_CASE("keeping the existing plan rebases the deformation reference") {
  Scenario sc = Scenario::quiet();
  sc.deformations = {{Wall::Back, 2, {5.0, 5.0}}};
  Supervisor sup(sc, SafetyProfile::ex_vivo(), 13);
  AutoApprovePolicy p;
  while (sup.state() != SupervisorState::AwaitReplanApproval) {
    sup.run_until_blocked();
    if (sup.state() != SupervisorState::AwaitReplanApproval) answer(sup, p);
  }
  sup.submit(OperatorCommand::make(CommandKind::KeepExistingPlan), sup.now() + 1.0);
  CHECK(sup.state() == SupervisorState::AwaitDispatch);
  CorrectivePolicy c;
  for (int i = 0; i < 2000 && !is_terminal(sup.state()); ++i) {
    sup.run_until_blocked();
    if (!is_terminal(sup.state())) answer(sup, c);
  }
  CHECK(sup.state() == SupervisorState::Done);
  CHECK(events_named(sup.log(), "DeformationDetected").size() == 1);
}

TEST_CASE("hesitancy counting") {
  std::vector<HesitancyRecord> recs(118);
  for (int i = 0; i < 20; ++i) recs[i].attempts = 2;
  auto s = summarize_hesitancy(recs);
  CHECK(s.per_stitch == doctest::Approx(20.0 / 118.0));
  CHECK(s.per_stitch == doctest::Approx(0.169).epsilon(1e-2));
  CHECK(s.first_attempt_rate * 100.0 == doctest::Approx(83.05).epsilon(1e-4));

  std::vector<HesitancyRecord> ten(10);
  ten[4].attempts = 3;
  s = summarize_hesitancy(ten);
  CHECK(s.per_stitch == doctest::Approx(0.2));
  CHECK(s.first_attempt_rate == doctest::Approx(0.9));

  s = summarize_hesitancy(std::vector<HesitancyRecord>(5));
  CHECK(s.per_stitch == 0.0);
  CHECK(s.first_attempt_rate == 1.0);

  const auto h = hesitancy_report(standard_log());
  CHECK(h.total_stitches == standard_log().records.back()["stitches"].get<int>());
  CHECK(h.per_stitch == 0.0);
}

TEST_CASE("scenario files") {
  const Scenario s = Scenario::standard();
  const Scenario back = scenario_from_json(scenario_to_json(s));
  CHECK(scenario_to_json(back) == scenario_to_json(s));
  CHECK(back.deformations.size() == 3);

  const std::string broken = "{\n  \"name\": \"x\",\n  \"cloud_noise_mm\": ,\n}\n";
  try {
    parse_scenario(broken);
    FAIL("expected InvalidScenario");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidScenario);
    CHECK(std::string(e.what()).find("line 3") != std::string::npos);
  }
  const std::string typo = "{\n  \"name\": \"x\",\n  \"deformations\": [\n    {\"wall\": \"Back\", \"after\": 2}\n  ]\n}\n";
  try {
    parse_scenario(typo);
    FAIL("expected InvalidScenario");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::InvalidScenario);
    CHECK(std::string(e.what()).find("line 4") != std::string::npos);
  }
  CHECK(code_of([] { parse_scenario("{\"max_attempts\": 0}"); }) == ErrorCode::InvalidScenario);
  CHECK(code_of([] { parse_scenario("{\"cloud_noise_mm\": \"lots\"}"); }) == ErrorCode::InvalidScenario);
  CHECK(code_of([] { load_scenario("/nonexistent/scenario.json"); }) == ErrorCode::IoError);
  CHECK(parse_scenario("{}").deformations.empty());
}

TEST_CASE("run log parsing errors") {
  const std::string text = standard_log().to_jsonl();
  const std::string cut = text.substr(0, text.size() - 40);
  try {
    RunLog::parse(cut);
    FAIL("expected CorruptLog");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::CorruptLog);
    CHECK(std::string(e.what()).find("line") != std::string::npos);
  }
  // Truncated at a record boundary: parses, but cannot be replayed.
  const std::string head = text.substr(0, text.find('\n', text.size() / 2) + 1);
  const RunLog partial = RunLog::parse(head);
  CHECK_FALSE(partial.complete());
  CHECK(code_of([&] { replay(partial); }) == ErrorCode::CorruptLog);

  RunLog newer = standard_log();
  newer.header["version"] = kRunLogVersion + 1;
  CHECK(code_of([&] { RunLog::parse(newer.to_jsonl()); }) == ErrorCode::SchemaVersionMismatch);
  CHECK(code_of([] { RunLog::parse("not json\n"); }) == ErrorCode::CorruptLog);
}

TEST_CASE("commands serialize") {
  const auto c = OperatorCommand::nudge({0.5, -1, 2}, "c7");
  const auto back = command_from_json(command_to_json(c));
  CHECK(back.kind == CommandKind::NudgeOffset);
  CHECK(back.offset == c.offset);
  CHECK(back.id == "c7");
  CHECK(command_from_json(command_to_json(OperatorCommand::select(PlanMode::CornerReinforced))).mode ==
        PlanMode::CornerReinforced);
  CHECK(code_of([] { command_from_json(json{{"type", "Dance"}}); }) == ErrorCode::InvalidArgument);
  CHECK(code_of([] { make_policy("Timid"); }) == ErrorCode::InvalidArgument);
}

TEST_CASE("liveness under AutoApprove") {
  AutoApprovePolicy p;
  const RunLog log = run_scripted(p, Scenario::standard(), SafetyProfile::ex_vivo(), 77);
  std::size_t transitions = log.of_kind("state").size();
  // Generous bound: plan size x max attempts per stitch plus the planning rounds.
  CHECK(transitions < 24u * 5u * 8u);
  CHECK(log.records.back()["state"] == "Done");
}
