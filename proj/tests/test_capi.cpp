#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "doctest.h"
#include "json.hpp"
#include "lapsim/lapsim.h"
#include "lapsim/supervisor.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

std::string take(char* s) {
  std::string out = s ? s : "";
  lapsim_string_free(s);
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("lapsim_capi_" + name);
  fs::remove_all(p);
  return p;
}

std::string scenario(const std::string& name) { return std::string(LAPSIM_SOURCE_DIR) + "/scenarios/" + name; }

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

// Runs the CLI with stdout captured into a file; returns the exit code.
int cli(const std::string& args, std::string* out = nullptr) {
  const char* bin = std::getenv("LAPSIM_CLI");
  REQUIRE_MESSAGE(bin, "LAPSIM_CLI not set");
  const fs::path capture = fs::temp_directory_path() / "lapsim_capi_stdout.txt";
  const std::string cmd = std::string(bin) + " " + args + " > " + capture.string() + " 2>/dev/null";
  const int rc = std::system(cmd.c_str());
  if (out) *out = slurp(capture);
  return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

}  // namespace

TEST_CASE("status values and names") {
  CHECK(std::string(lapsim_status_name(LAPSIM_OK)) == "Ok");
  CHECK(std::string(lapsim_status_name(LAPSIM_E_POLICY_STUCK)) == "PolicyStuck");
  CHECK(std::string(lapsim_status_name(LAPSIM_E_MISSING_WEIGHTS)) == "MissingWeights");
  CHECK(std::string(lapsim_status_name(LAPSIM_E_INTERNAL)) == "Internal");
  CHECK(lapsim_log_load(nullptr, nullptr) == LAPSIM_E_INVALID_ARGUMENT);
  CHECK(std::string(lapsim_last_error()).find("null") != std::string::npos);
}

TEST_CASE("shipped scenario files") {
  CHECK(lapsim::scenario_to_json(lapsim::load_scenario(scenario("default.json"))) ==
        lapsim::scenario_to_json(lapsim::Scenario::standard()));
  CHECK(lapsim::load_scenario(scenario("quiet.json")).deformations.empty());
  CHECK(lapsim::load_scenario(scenario("tool_failure.json")).tool_failures.size() == 1);
  char* norm = nullptr;
  CHECK(lapsim_scenario_check(scenario("quiet.json").c_str(), &norm) == LAPSIM_OK);
  CHECK(json::parse(take(norm))["name"] == "quiet");

  const fs::path bad = scratch("bad_scenario.json");
  std::ofstream(bad) << "{\n  \"name\": \"x\",\n  \"max_attempts\": -1\n}\n";
  CHECK(lapsim_scenario_check(bad.c_str(), &norm) == LAPSIM_E_INVALID_SCENARIO);
}

TEST_CASE("run, report and replay through the C interface") {
  lapsim_log* log = nullptr;
  REQUIRE(lapsim_run(nullptr, "ex_vivo", 42, "AutoApprove", &log) == LAPSIM_OK);
  char* state = nullptr;
  REQUIRE(lapsim_log_final_state(log, &state) == LAPSIM_OK);
  CHECK(take(state) == "Done");

  char* report = nullptr;
  REQUIRE(lapsim_log_report(log, nullptr, &report) == LAPSIM_OK);
  const json r = json::parse(take(report));
  CHECK(r["replans"] == 3);
  CHECK(r["final_state"] == "Done");

  lapsim_log* again = nullptr;
  REQUIRE(lapsim_log_replay(log, &again) == LAPSIM_OK);
  char* a = nullptr;
  char* b = nullptr;
  lapsim_log_jsonl(log, &a);
  lapsim_log_jsonl(again, &b);
  CHECK(take(a) == take(b));

  lapsim_log_destroy(again);
  lapsim_log_destroy(log);
}

TEST_CASE("stuck policy still returns the partial log") {
  lapsim_log* log = nullptr;
  CHECK(lapsim_run(scenario("tool_failure.json").c_str(), "ex_vivo", 42, "AutoApprove", &log) == LAPSIM_E_POLICY_STUCK);
  REQUIRE(log);
  char* state = nullptr;
  lapsim_log_final_state(log, &state);
  CHECK(take(state) == "AwaitOffsetOrRepeat");
  char* report = nullptr;
  CHECK(lapsim_log_report(log, nullptr, &report) == LAPSIM_E_INCOMPLETE_LOG);
  lapsim_log_destroy(log);
}

TEST_CASE("corrupt and future logs are refused") {
  lapsim_log* log = nullptr;
  CHECK(lapsim_log_parse("{\"kind\":\"header\"", &log) == LAPSIM_E_CORRUPT_LOG);
  CHECK(log == nullptr);
  CHECK(lapsim_log_load("/nonexistent/run.jsonl", &log) == LAPSIM_E_IO);
}

TEST_CASE("interactive session") {
  lapsim_session* s = nullptr;
  REQUIRE(lapsim_session_create(scenario("quiet.json").c_str(), "ex_vivo", 5, &s) == LAPSIM_OK);
  char* info = nullptr;
  lapsim_session_info(s, &info);
  CHECK(json::parse(take(info))["state"] == "Idle");

  int accepted = -1;
  CHECK(lapsim_session_submit(s, R"({"type":"ApproveFire"})", &accepted) == LAPSIM_OK);
  CHECK(accepted == 0);
  CHECK(lapsim_session_submit(s, R"({"type":"StartPlanning","id":"c1"})", &accepted) == LAPSIM_OK);
  CHECK(accepted == 1);
  lapsim_session_info(s, &info);
  const json j = json::parse(take(info));
  CHECK(j["state"] == "AwaitPlanSelection");
  CHECK(j["t"].get<double>() > 0.0);
  CHECK(lapsim_session_submit(s, R"({"type":"Bogus"})", &accepted) == LAPSIM_E_INVALID_ARGUMENT);

  lapsim_log* log = nullptr;
  REQUIRE(lapsim_session_log(s, &log) == LAPSIM_OK);
  char* text = nullptr;
  lapsim_log_jsonl(log, &text);
  CHECK(take(text).find("\"c1\"") != std::string::npos);
  lapsim_log_destroy(log);
  lapsim_session_destroy(s);
}

TEST_CASE("weights and datasets are checked") {
  char* out = nullptr;
  CHECK(lapsim_motion_bench(nullptr, "/nonexistent/cnn.bin", &out, nullptr) == LAPSIM_E_MISSING_WEIGHTS);
  CHECK(lapsim_motion_bench(R"({"cycles":0})", "/nonexistent/cnn.bin", &out, nullptr) == LAPSIM_E_INVALID_ARGUMENT);

  const fs::path data = scratch("lm_small");
  CHECK(lapsim_landmark_generate(data.c_str(), R"({"frames":6})") == LAPSIM_OK);
  CHECK(lapsim_landmark_train(data.c_str(), (data / "w").c_str(), nullptr, &out) == LAPSIM_E_DATASET_TOO_SMALL);
  CHECK(lapsim_landmark_eval(data.c_str(), (data / "w").c_str(), &out) == LAPSIM_E_MISSING_WEIGHTS);
}

TEST_CASE("server binds an ephemeral port") {
  const fs::path logs = scratch("server_logs");
  lapsim_server* srv = nullptr;
  const json cfg = {{"port", 0}, {"log_dir", logs.string()}};
  REQUIRE(lapsim_server_create(cfg.dump().c_str(), &srv) == LAPSIM_OK);
  int port = 0;
  CHECK(lapsim_server_bind(srv, &port) == LAPSIM_OK);
  CHECK(port > 0);
  lapsim_server_stop(srv);
  lapsim_server_destroy(srv);
  CHECK(lapsim_server_create(R"({"scenario":"/nonexistent.json"})", &srv) == LAPSIM_E_IO);
}

TEST_CASE("cli: default scenario finishes with three replans") {
  const fs::path out = scratch("cli_run");
  std::string stdout_text;
  CHECK(cli("run --scenario " + scenario("default.json") + " --policy AutoApprove --seed 42 --out " + out.string() +
                " --json",
            &stdout_text) == 0);
  const json r = json::parse(stdout_text);
  CHECK(r["final_state"] == "Done");
  CHECK(r["replans"] == 3);
  CHECK(fs::exists(out / "run.jsonl"));
  CHECK(fs::exists(out / "report.json"));
  CHECK(fs::exists(out / "manifest.json"));

  // Same seed, same report and log.
  const fs::path out2 = scratch("cli_run2");
  std::string second;
  CHECK(cli("run --scenario " + scenario("default.json") + " --seed 42 --out " + out2.string() + " --json", &second) ==
        0);
  CHECK(second == stdout_text);
  CHECK(slurp(out / "run.jsonl") == slurp(out2 / "run.jsonl"));
  CHECK(slurp(out / "report.json") == slurp(out2 / "report.json"));

  CHECK(cli("replay --log " + (out / "run.jsonl").string()) == 0);
  CHECK(cli("report --log " + (out / "run.jsonl").string() + " --out " + (out / "again").string()) == 0);
  CHECK(slurp(out / "again" / "report.json") == slurp(out / "report.json"));
}

TEST_CASE("cli: exit codes") {
  CHECK(cli("run --scenario " + scenario("tool_failure.json") + " --policy AutoApprove --out " +
            scratch("cli_stuck").string()) == 4);
  CHECK(cli("motion-bench --cycles 0") == 1);
  CHECK(cli("no-such-command") == 1);
  CHECK(cli("motion-bench --weights /nonexistent/cnn.bin --out " + scratch("cli_mb").string()) == 5);

  const fs::path data = scratch("cli_lm");
  CHECK(cli("landmark --mode generate --frames 6 --data " + data.string()) == 0);
  CHECK(cli("landmark --mode eval --data " + data.string()) == 5);
  CHECK(cli("landmark --mode train --data " + data.string()) == 6);

  const fs::path bad = scratch("corrupt.jsonl");
  std::ofstream(bad) << "{\"kind\":\"header\",\"schema\":\"lapsim.runlog\",\"ver";
  CHECK(cli("replay --log " + bad.string()) == 7);
  CHECK(cli("run --policy Nobody --out " + scratch("cli_bad").string()) == 2);
  CHECK(cli("replay --log /nonexistent/run.jsonl") == 8);
}
