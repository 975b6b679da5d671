#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "doctest.h"
#include "httplib.h"
#include "lapsim/error.hpp"
#include "lapsim/service.hpp"

using namespace lapsim;
using json = nlohmann::json;
namespace fs = std::filesystem;

namespace {
ErrorCode code_of(auto&& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  return static_cast<ErrorCode>(0);
}

ServiceConfig temp_config(const std::string& name) {
  ServiceConfig c;
  c.log_dir = (fs::temp_directory_path() / ("lapsim_service_" + name)).string();
  fs::remove_all(c.log_dir);
  c.port = 0;
  return c;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

const RunLog& scripted_standard() {
  static const RunLog log = [] {
    AutoApprovePolicy p;
    return run_scripted(p, Scenario::standard(), SafetyProfile::ex_vivo(), 42);
  }();
  return log;
}

// Plays the operator by hand through the host API.
void operate(SessionHost& host, const std::string& id, int max_commands = 100000) {
  for (int i = 0; i < max_commands; ++i) {
    const json info = host.inspect(id);
    if (info["closed"].get<bool>()) return;
    const std::string st = info["state"];
    OperatorCommand c;
    if (st == "Idle") c = OperatorCommand::make(CommandKind::StartPlanning);
    else if (st == "AwaitPlanSelection") c = OperatorCommand::select(PlanMode::Uniform);
    else if (st == "AwaitAssistant") c = OperatorCommand::make(CommandKind::ReleaseAssistantGate);
    else if (st == "AwaitReplanApproval") c = OperatorCommand::make(CommandKind::ApproveReplan);
    else if (st == "AwaitFireApproval") c = OperatorCommand::make(CommandKind::ApproveFire);
    else FAIL("unexpected state " << st);
    c.id = "op-" + std::to_string(i);
    REQUIRE(host.submit_command(id, c).accepted);
  }
}

std::vector<json> records_of(const std::vector<json>& msgs) {
  std::vector<json> out;
  for (const auto& m : msgs)
    if (m["type"] == "record") out.push_back(m["record"]);
  return out;
}
}  // namespace

TEST_CASE("create, inspect and reject") {
  SessionHost host(temp_config("basic"));
  const std::string id = host.create_session({});
  const json info = host.inspect(id);
  CHECK(info["state"] == "Idle");
  CHECK(info["closed"] == false);
  CHECK(host.list_sessions().size() == 1);

  const Ack bad = host.submit_command(id, OperatorCommand::select(PlanMode::Uniform));
  CHECK_FALSE(bad.accepted);
  CHECK(bad.state == "Idle");
  CHECK(host.run_log(id).records.size() == 1);  // rejected commands are not logged

  CHECK(host.submit_command(id, OperatorCommand::make(CommandKind::StartPlanning)).accepted);
  CHECK(host.inspect(id)["state"] == "AwaitPlanSelection");
  const Ack sel = host.submit_command(id, OperatorCommand::select(PlanMode::Uniform));
  CHECK(sel.accepted);
  CHECK(sel.state == "AwaitAssistant");
  const Ack late = host.submit_command(id, OperatorCommand::select(PlanMode::Uniform));
  CHECK_FALSE(late.accepted);
  CHECK(late.state == "AwaitAssistant");

  CHECK(code_of([&] { host.submit_command("nope", OperatorCommand::make(CommandKind::Pause)); }) ==
        ErrorCode::UnknownSession);
  CHECK(code_of([&] { host.report(id); }) == ErrorCode::IncompleteLog);

  host.close_session(id);
  CHECK(host.inspect(id)["state"] == "Aborted");
  CHECK(code_of([&] { host.submit_command(id, OperatorCommand::make(CommandKind::Resume)); }) ==
        ErrorCode::UnknownSession);
  const RunLog log = host.run_log(id);
  CHECK(log.complete());
  CHECK(read_file(host.log_path(id)) == log.to_jsonl());
}

TEST_CASE("invalid scenarios are refused") {
  SessionHost host(temp_config("invalid"));
  SessionSpec spec;
  spec.scenario.max_attempts = 0;
  CHECK(code_of([&] { host.create_session(spec); }) == ErrorCode::InvalidScenario);
  SessionSpec p;
  p.profile = "on_the_moon";
  CHECK(code_of([&] { host.create_session(p); }) == ErrorCode::InvalidArgument);
  CHECK(host.list_sessions().empty());
}

TEST_CASE("headless sessions with the same seed produce identical logs") {
  SessionHost host(temp_config("determinism"));
  SessionSpec spec;
  spec.policy = "AutoApprove";
  const std::string a = host.create_session(spec), b = host.create_session(spec);
  CHECK(host.inspect(a)["state"] == "Done");
  const std::string ja = host.run_log(a).to_jsonl();
  CHECK(ja == host.run_log(b).to_jsonl());
  CHECK(ja == scripted_standard().to_jsonl());
  CHECK(read_file(host.log_path(a)) == ja);

  const auto r = host.report(a);
  CHECK(r.replans == 3);
  CHECK(r.final_state == "Done");
}

TEST_CASE("policy that cannot answer leaves the session to the operator") {
  SessionHost host(temp_config("stuck"));
  Scenario sc = Scenario::quiet();
  sc.tool_failures.push_back({Wall::Back, 2, 1});
  SessionSpec spec;
  spec.scenario = sc;
  spec.policy = "AutoApprove";
  const std::string id = host.create_session(spec);
  CHECK(host.inspect(id)["state"] == "AwaitOffsetOrRepeat");
  CHECK(host.submit_command(id, OperatorCommand::make(CommandKind::RepeatStitch)).accepted);
  CHECK(host.inspect(id)["state"] == "Done");  // the policy took over again
}

TEST_CASE("stream: catch-up first, ordered, lossless, same as the log") {
  SessionHost host(temp_config("stream"));
  const std::string id = host.create_session({});
  auto s1 = host.subscribe(id);
  auto s2 = host.subscribe(id);
  // Run part of the session, then add a late subscriber.
  operate(host, id, 4);
  auto late = host.subscribe(id);
  operate(host, id);
  REQUIRE(host.inspect(id)["closed"] == true);

  const auto m1 = s1->drain(), m2 = s2->drain(), ml = late->drain();
  CHECK(s1->finished());
  REQUIRE(m1.size() > 100);
  CHECK(m1 == m2);
  CHECK(m1.front()["catch_up"] == true);
  CHECK(m1.front()["state"] == "Idle");
  CHECK(m1.back()["type"] == "end");
  for (const auto* ms : {&m1, &ml})
    for (std::size_t i = 1; i < ms->size(); ++i) CHECK((*ms)[i]["seq"].get<long>() > (*ms)[i - 1]["seq"].get<long>());
  CHECK(m1.front()["seq"] == 1);

  const RunLog log = host.run_log(id);
  const std::size_t first = m1.front()["log_records"];
  CHECK(first == 1);  // the initial Idle record predates every subscriber
  CHECK(records_of(m1) == std::vector<json>(log.records.begin() + 1, log.records.end()));

  REQUIRE(ml.front()["catch_up"] == true);
  const std::size_t seen = ml.front()["log_records"];
  const std::vector<json> tail(log.records.begin() + static_cast<std::ptrdiff_t>(seen), log.records.end());
  CHECK(records_of(ml) == tail);

  // Periodic snapshots every 0.1 s of simulated time, in order.
  double last = 0.0;
  int snaps = 0;
  for (const auto& m : m1) {
    if (m["type"] != "snapshot" || m.contains("catch_up")) continue;
    const double t = m["t"];
    if (snaps > 0) CHECK(t == doctest::Approx(last + 0.1));
    last = t;
    ++snaps;
  }
  CHECK(snaps > 1000);
  const double end_t = log.records.back()["t"];
  CHECK(last <= end_t);
  CHECK(last > end_t - 0.11);

  auto after = host.subscribe(id);
  const auto ma = after->drain();
  REQUIRE(ma.size() == 2);
  CHECK(ma[0]["catch_up"] == true);
  CHECK(ma[1]["type"] == "end");
  CHECK(code_of([&] { host.subscribe("missing"); }) == ErrorCode::UnknownSession);
}

TEST_CASE("replay") {
  SessionHost host(temp_config("replay"));
  const std::string jsonl = scripted_standard().to_jsonl();
  const std::string id = host.replay_text(jsonl);
  CHECK(host.run_log(id).to_jsonl() == jsonl);
  CHECK(host.inspect(id)["replayed"] == true);
  const std::string again = host.replay_file(host.log_path(id));
  CHECK(host.run_log(again).to_jsonl() == jsonl);

  const std::string truncated = jsonl.substr(0, jsonl.size() / 2);
  CHECK(code_of([&] { host.replay_text(truncated); }) == ErrorCode::CorruptLog);
  json header = scripted_standard().header;
  header["version"] = 2;
  const std::string newer = header.dump() + jsonl.substr(jsonl.find('\n'));
  CHECK(code_of([&] { host.replay_text(newer); }) == ErrorCode::SchemaVersionMismatch);
  CHECK(code_of([&] { host.replay_file("/nonexistent/log.jsonl"); }) == ErrorCode::IoError);
}

TEST_CASE("realtime-scaled clock gives the same log as the headless run") {
  ServiceConfig cfg = temp_config("realtime");
  cfg.realtime_scale = 2e-4;  // 1 simulated second = 0.2 ms
  SessionHost host(cfg);
  SessionSpec spec;
  spec.policy = "AutoApprove";
  spec.clock = ClockMode::RealtimeScaled;
  const auto t0 = std::chrono::steady_clock::now();
  const std::string id = host.create_session(spec);
  auto sub = host.subscribe(id);
  REQUIRE(host.wait_closed(id, std::chrono::seconds(60)));
  const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const RunLog log = host.run_log(id);
  CHECK(log.to_jsonl() == scripted_standard().to_jsonl());
  // Paced, not instantaneous: the session lasts about its simulated length times the scale.
  const double sim = log.records.back()["t"];
  CHECK(wall >= 0.9 * sim * cfg.realtime_scale);

  std::vector<json> msgs;
  while (auto m = sub->next(std::chrono::milliseconds(10))) msgs.push_back(*m);
  REQUIRE_FALSE(msgs.empty());
  CHECK(msgs.front()["catch_up"] == true);
  CHECK(msgs.back()["type"] == "end");
  for (std::size_t i = 1; i < msgs.size(); ++i) CHECK(msgs[i]["seq"].get<long>() == msgs[i - 1]["seq"].get<long>() + 1);
  const auto recs = records_of(msgs);
  const std::size_t seen = msgs.front()["log_records"];
  CHECK(recs == std::vector<json>(log.records.begin() + static_cast<std::ptrdiff_t>(seen), log.records.end()));
}

TEST_CASE("realtime operator session") {
  ServiceConfig cfg = temp_config("realtime_op");
  cfg.realtime_scale = 1e-3;
  SessionHost host(cfg);
  SessionSpec spec;
  spec.clock = ClockMode::RealtimeScaled;
  spec.scenario = Scenario::quiet();
  const std::string id = host.create_session(spec);
  std::this_thread::sleep_for(std::chrono::milliseconds(20));
  CHECK(host.submit_command(id, OperatorCommand::make(CommandKind::StartPlanning)).accepted);
  // Simulated time kept running while the operator thought.
  const RunLog log = host.run_log(id);
  REQUIRE_FALSE(log.records.empty());
  REQUIRE(log.records.size() >= 2);
  CHECK(log.records[1]["kind"] == "command");
  CHECK(log.records[1]["t"].get<double>() >= 15.0);
  host.close_session(id);
  CHECK(host.inspect(id)["state"] == "Aborted");
  CHECK(read_file(host.log_path(id)) == host.run_log(id).to_jsonl());
}

TEST_CASE("http front end") {
  ServiceConfig cfg = temp_config("http");
  HttpService svc(cfg);
  const int port = svc.bind();
  std::thread server([&] { svc.run(); });
  httplib::Client cli("127.0.0.1", port);
  cli.set_read_timeout(30, 0);

  auto health = cli.Get("/v1/health");
  REQUIRE(health);
  CHECK(health->status == 200);

  auto created = cli.Post("/v1/sessions", json{{"policy", "AutoApprove"}, {"seed", 42}}.dump(), "application/json");
  REQUIRE(created);
  CHECK(created->status == 201);
  const json cj = json::parse(created->body);
  CHECK(cj["schema"] == "lapsim.api");
  CHECK(cj["version"] == 1);
  const std::string id = cj["id"];
  CHECK(cj["state"] == "Done");

  auto log = cli.Get("/v1/sessions/" + id + "/log");
  REQUIRE(log);
  CHECK(log->body == scripted_standard().to_jsonl());

  auto report = cli.Get("/v1/sessions/" + id + "/report");
  REQUIRE(report);
  CHECK(report->status == 200);
  CHECK(json::parse(report->body)["replans"] == 3);

  auto list = cli.Get("/v1/sessions");
  REQUIRE(list);
  CHECK(json::parse(list->body)["sessions"].size() == 1);

  auto events = cli.Get("/v1/sessions/" + id + "/events");
  REQUIRE(events);
  std::vector<json> lines;
  std::istringstream es(events->body);
  for (std::string line; std::getline(es, line);) lines.push_back(json::parse(line));
  REQUIRE(lines.size() == 2);
  CHECK(lines[0]["catch_up"] == true);
  CHECK(lines[1]["type"] == "end");

  auto live = cli.Post("/v1/sessions", "{}", "application/json");
  REQUIRE(live);
  const std::string lid = json::parse(live->body)["id"];
  auto rej = cli.Post("/v1/sessions/" + lid + "/commands", json{{"type", "SelectPlan"}, {"mode", "Uniform"}}.dump(),
                      "application/json");
  REQUIRE(rej);
  CHECK(rej->status == 200);
  CHECK(json::parse(rej->body)["accepted"] == false);
  CHECK(json::parse(rej->body)["state"] == "Idle");
  auto ok = cli.Post("/v1/sessions/" + lid + "/commands", json{{"type", "StartPlanning"}, {"id", "c1"}}.dump(),
                     "application/json");
  REQUIRE(ok);
  CHECK(json::parse(ok->body)["accepted"] == true);
  auto closed = cli.Post("/v1/sessions/" + lid + "/close", "", "text/plain");
  REQUIRE(closed);
  CHECK(json::parse(closed->body)["state"] == "Aborted");
  auto gone = cli.Post("/v1/sessions/" + lid + "/commands", json{{"type", "Resume"}}.dump(), "application/json");
  REQUIRE(gone);
  CHECK(gone->status == 404);
  CHECK(json::parse(gone->body)["error"] == "UnknownSession");

  auto broken = cli.Post("/v1/sessions", json{{"scenario_text", "{\n  \"name\": \"x\",\n  \"cloud_noise_mm\": ,\n}\n"}}.dump(),
                         "application/json");
  REQUIRE(broken);
  CHECK(broken->status == 400);
  CHECK(json::parse(broken->body)["error"] == "InvalidScenario");
  CHECK(json::parse(broken->body)["message"].get<std::string>().find("line 3") != std::string::npos);

  auto replayed = cli.Post("/v1/replay", scripted_standard().to_jsonl(), "application/x-ndjson");
  REQUIRE(replayed);
  CHECK(replayed->status == 201);
  const std::string text = scripted_standard().to_jsonl();
  auto corrupt = cli.Post("/v1/replay", text.substr(0, text.size() - 10), "application/x-ndjson");
  REQUIRE(corrupt);
  CHECK(corrupt->status == 422);
  CHECK(json::parse(corrupt->body)["error"] == "CorruptLog");

  auto missing = cli.Get("/v1/sessions/zzz");
  REQUIRE(missing);
  CHECK(missing->status == 404);

  svc.stop();
  server.join();
}
