// lapsim command line. Talks to the simulator only through the C interface.

#include <cmath>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "lapsim/lapsim.h"

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

enum Exit {
  kOk = 0,
  kUsage = 1,
  kInvalid = 2,
  kAborted = 3,
  kPolicyStuck = 4,
  kMissingWeights = 5,
  kDatasetTooSmall = 6,
  kSchema = 7,
  kIo = 8,
  kInternal = 9,
};

constexpr const char* kExitCodes =
    "Exit codes:\n"
    "  0 ok             1 usage           2 invalid input\n"
    "  3 aborted        4 policy stuck    5 missing weights\n"
    "  6 dataset small  7 schema/corrupt  8 io\n"
    "  9 internal\n";

int exit_for(lapsim_status s) {
  switch (s) {
    case LAPSIM_OK: return kOk;
    case LAPSIM_E_POLICY_STUCK: return kPolicyStuck;
    case LAPSIM_E_MISSING_WEIGHTS: return kMissingWeights;
    case LAPSIM_E_DATASET_TOO_SMALL: return kDatasetTooSmall;
    case LAPSIM_E_SCHEMA_VERSION_MISMATCH:
    case LAPSIM_E_CORRUPT_LOG:
    case LAPSIM_E_INCOMPLETE_LOG: return kSchema;
    case LAPSIM_E_IO: return kIo;
    case LAPSIM_E_INTERNAL: return kInternal;
    default: return kInvalid;
  }
}

// Thrown out of subcommand bodies; carries the exit code.
struct CliExit {
  int code;
};

[[noreturn]] void die(lapsim_status s) {
  std::cerr << "error: " << lapsim_last_error() << "\n";
  throw CliExit{exit_for(s)};
}

void check(lapsim_status s) {
  if (s != LAPSIM_OK) die(s);
}

[[noreturn]] void usage_error(const std::string& msg) {
  std::cerr << "usage error: " << msg << "\n";
  throw CliExit{kUsage};
}

// Owns a string returned by the library.
std::string take(char* s) {
  std::string out = s ? s : "";
  lapsim_string_free(s);
  return out;
}

struct Log {
  lapsim_log* p = nullptr;
  ~Log() { lapsim_log_destroy(p); }
};

void write_file(const fs::path& path, const std::string& text) {
  std::error_code ec;
  if (path.has_parent_path()) fs::create_directories(path.parent_path(), ec);
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) {
    std::cerr << "error: IoError: cannot write " << path << "\n";
    throw CliExit{kIo};
  }
}

void make_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) {
    std::cerr << "error: IoError: cannot create " << dir << ": " << ec.message() << "\n";
    throw CliExit{kIo};
  }
}

const char* opt_cstr(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

std::string final_state(const lapsim_log* log) {
  char* s = nullptr;
  check(lapsim_log_final_state(log, &s));
  return take(s);
}

double num(const json& v) { return v.is_number() ? v.get<double>() : std::nan(""); }

void print_report_summary(const json& r) {
  const auto& t = r["time_min"];
  const auto& h = r["hesitancy"];
  std::printf("final state    %s\n", r["final_state"].get<std::string>().c_str());
  std::printf("stitches       %d\n", r["stitches"].get<int>());
  std::printf("replans        %d\n", r["replans"].get<int>());
  std::printf("deformations   %d\n", r["deformation_events"].get<int>());
  std::printf("hesitancy      first-attempt %.1f%%, %d extra attempts\n", 100.0 * h["first_attempt_rate"].get<double>(),
              h["extra_attempts"].get<int>());
  const auto& sp = r["spacing_mm"];
  const auto& bd = r["bite_depth_mm"];
  std::printf("spacing        %.2f +/- %.2f mm (cov %.1f%%)\n", num(sp["mean"]), num(sp["sd"]), num(sp["cov_percent"]));
  std::printf("bite depth     %.2f +/- %.2f mm\n", num(bd["mean"]), num(bd["sd"]));
  std::printf("time (min)     planning %.2f, supervision %.2f, suturing %.2f, transitions %.2f, total %.2f\n",
              t["planning"].get<double>(), t["supervision"].get<double>(), t["suturing"].get<double>(),
              t["mode_transitions"].get<double>(), t["session"].get<double>());
}

// ---- run

struct RunArgs {
  std::string scenario, policy = "AutoApprove", profile = "ex_vivo", out = "lapsim_run", reference;
  std::uint64_t seed = 42;
  bool json_out = false;
};

int cmd_run(const RunArgs& a) {
  Log log;
  const lapsim_status st = lapsim_run(opt_cstr(a.scenario), a.profile.c_str(), a.seed, a.policy.c_str(), &log.p);
  if (st != LAPSIM_OK && !(st == LAPSIM_E_POLICY_STUCK && log.p)) die(st);

  make_dir(a.out);
  check(lapsim_log_save(log.p, (fs::path(a.out) / "run.jsonl").c_str()));
  json manifest = {{"schema", "lapsim.run_manifest"},
                   {"version", 1},
                   {"scenario", a.scenario.empty() ? "builtin:standard" : a.scenario},
                   {"policy", a.policy},
                   {"profile", a.profile},
                   {"seed", a.seed},
                   {"log", "run.jsonl"}};

  if (st == LAPSIM_E_POLICY_STUCK) {
    const std::string state = final_state(log.p);
    manifest["outcome"] = "PolicyStuck";
    manifest["state"] = state;
    write_file(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
    if (a.json_out)
      std::cout << manifest.dump() << "\n";
    else
      std::printf("policy %s stuck in state %s; partial log in %s\n", a.policy.c_str(), state.c_str(),
                  (fs::path(a.out) / "run.jsonl").c_str());
    return kPolicyStuck;
  }

  check(lapsim_log_write_report(log.p, a.out.c_str(), opt_cstr(a.reference)));
  char* rj = nullptr;
  check(lapsim_log_report(log.p, opt_cstr(a.reference), &rj));
  const json report = json::parse(take(rj));
  const std::string state = report["final_state"];
  manifest["outcome"] = state;
  manifest["report"] = "report.json";
  write_file(fs::path(a.out) / "manifest.json", manifest.dump(2) + "\n");
  if (a.json_out)
    std::cout << report.dump() << "\n";
  else
    print_report_summary(report);
  return state == "Done" ? kOk : kAborted;
}

// ---- motion-bench

struct BenchArgs {
  std::vector<double> distances{30, 65, 100};
  int orientations = 11, cycles = 5, recordings = 300, epochs = 10;
  std::uint64_t seed = 7, train_seed = 2024;
  std::string weights = "weights/motion_cnn.bin", out = "motion_bench";
  bool train = false, json_out = false;
};

int cmd_bench(const BenchArgs& a) {
  if (a.cycles < 1) usage_error("--cycles must be at least 1");
  if (a.orientations < 1) usage_error("--orientations must be at least 1");
  if (a.distances.empty()) usage_error("--distances needs at least one value");
  if (a.train) {
    std::error_code ec;
    if (fs::path(a.weights).has_parent_path()) fs::create_directories(fs::path(a.weights).parent_path(), ec);
    const json cfg = {{"recordings", a.recordings}, {"epochs", a.epochs}, {"seed", a.train_seed}};
    char* stats = nullptr;
    check(lapsim_motion_train(cfg.dump().c_str(), a.weights.c_str(), &stats));
    const json s = json::parse(take(stats));
    if (!a.json_out)
      std::printf("trained motion CNN on %d windows, train accuracy %.1f%%, saved %s\n", s["examples"].get<int>(),
                  100.0 * s["train_accuracy"].get<double>(), a.weights.c_str());
  }
  const json cfg = {
      {"distances_mm", a.distances}, {"orientations", a.orientations}, {"cycles", a.cycles}, {"seed", a.seed}};
  char* summary = nullptr;
  char* csv = nullptr;
  check(lapsim_motion_bench(cfg.dump().c_str(), a.weights.c_str(), &summary, &csv));
  const std::string summary_text = take(summary);
  const std::string csv_text = take(csv);
  make_dir(a.out);
  write_file(fs::path(a.out) / "cases.csv", csv_text);
  write_file(fs::path(a.out) / "summary.json", summary_text + "\n");
  const json s = json::parse(summary_text);
  if (a.json_out) {
    std::cout << s.dump() << "\n";
    return kOk;
  }
  std::printf("%zu distances x %d orientations x %d cycles\n", a.distances.size(), a.orientations, a.cycles);
  for (const auto& [name, acc] : s["accuracy"].items()) std::printf("  %-4s accuracy %.1f%%\n", name.c_str(), 100.0 * acc.get<double>());
  std::printf("cases written to %s\n", (fs::path(a.out) / "cases.csv").c_str());
  return kOk;
}

// ---- landmark

struct LandmarkArgs {
  std::string mode, data, weights;
  int frames = 50, seg_epochs = 10, landmark_epochs = 24;
  std::uint64_t seed = 7;
  bool json_out = false;
};

void print_evaluation(const json& ev) {
  for (const auto& f : ev["frames"])
    std::printf("  frame %3d  error %6.2f px\n", f["serial"].get<int>(), f["mean_error_px"].get<double>());
  const double r = ev["effective_radius_px"];
  std::printf("mean error %.2f +/- %.2f px, effective radius %.2f px: %s\n", ev["mean_error_px"].get<double>(),
              ev["sd_error_px"].get<double>(), r, ev["pass"].get<bool>() ? "PASS" : "FAIL");
  std::printf("frames within radius %.0f%%\n", 100.0 * ev["fraction_within_radius"].get<double>());
  const auto& bg = ev["background_peaks"];
  std::printf("spurious peaks removed by mask %d of %d injected (%d raw off-tissue peaks)\n", bg["removed"].get<int>(),
              bg["injected"].get<int>(), bg["raw_outside_mask"].get<int>());
}

int cmd_landmark(LandmarkArgs a) {
  if (a.weights.empty()) a.weights = (fs::path(a.data) / "weights").string();
  json result;
  if (a.mode == "generate") {
    const json opt = {{"frames", a.frames}, {"seed", a.seed}};
    check(lapsim_landmark_generate(a.data.c_str(), opt.dump().c_str()));
    result = {{"generated", a.frames}, {"data", a.data}};
    if (!a.json_out) std::printf("wrote %d frames to %s\n", a.frames, a.data.c_str());
  } else {
    char* out = nullptr;
    if (a.mode == "train") {
      const json opt = {{"seg_epochs", a.seg_epochs}, {"landmark_epochs", a.landmark_epochs}};
      make_dir(a.weights);
      check(lapsim_landmark_train(a.data.c_str(), a.weights.c_str(), opt.dump().c_str(), &out));
    } else {
      check(lapsim_landmark_eval(a.data.c_str(), a.weights.c_str(), &out));
    }
    result = json::parse(take(out));
    if (!a.json_out) {
      if (result.contains("training")) {
        const auto& tr = result["training"];
        std::printf("trained on %d frames; final losses seg %.4f, landmark %.4f; weights in %s\n",
                    tr["frames"].get<int>(), tr["seg_loss"].back().get<double>(),
                    tr["landmark_loss"].back().get<double>(), a.weights.c_str());
      }
      if (result.contains("evaluation")) print_evaluation(result["evaluation"]);
    }
    write_file(fs::path(a.weights) / (a.mode + "_result.json"), result.dump(2) + "\n");
  }
  if (a.json_out) std::cout << result.dump() << "\n";
  if (result.contains("evaluation") && !result["evaluation"]["pass"].get<bool>()) return kInvalid;
  return kOk;
}

// ---- replay / report

int cmd_replay(const std::string& path, const std::string& out, bool json_out) {
  Log original, replayed;
  check(lapsim_log_load(path.c_str(), &original.p));
  check(lapsim_log_replay(original.p, &replayed.p));
  char* a = nullptr;
  char* b = nullptr;
  check(lapsim_log_jsonl(original.p, &a));
  check(lapsim_log_jsonl(replayed.p, &b));
  const std::string ta = take(a), tb = take(b);
  if (!out.empty()) check(lapsim_log_save(replayed.p, out.c_str()));
  const bool same = ta == tb;
  const std::string state = final_state(replayed.p);
  if (json_out)
    std::cout << json{{"identical", same}, {"final_state", state}}.dump() << "\n";
  else
    std::printf("replayed %s: final state %s, log %s\n", path.c_str(), state.c_str(),
                same ? "reproduced byte for byte" : "DIFFERS from the recording");
  return same ? kOk : kSchema;
}

int cmd_report(const std::string& path, const std::string& out, const std::string& reference, bool json_out) {
  Log log;
  check(lapsim_log_load(path.c_str(), &log.p));
  char* rj = nullptr;
  check(lapsim_log_report(log.p, opt_cstr(reference), &rj));
  const json report = json::parse(take(rj));
  const std::string dir = out.empty() ? fs::path(path).parent_path().string() : out;
  if (!dir.empty()) make_dir(dir);
  check(lapsim_log_write_report(log.p, dir.empty() ? "." : dir.c_str(), opt_cstr(reference)));
  if (json_out)
    std::cout << report.dump() << "\n";
  else
    print_report_summary(report);
  return kOk;
}

// ---- serve

struct ServeArgs {
  std::string bind, log_dir, scenario;
  int port = -1;
  double realtime_scale = 0;
};

int cmd_serve(const ServeArgs& a) {
  json cfg = json::object();
  if (!a.bind.empty()) cfg["bind"] = a.bind;
  if (a.port >= 0) cfg["port"] = a.port;
  if (!a.log_dir.empty()) cfg["log_dir"] = a.log_dir;
  if (!a.scenario.empty()) cfg["scenario"] = a.scenario;
  if (a.realtime_scale > 0) cfg["realtime_scale"] = a.realtime_scale;

  // Signals go to the waiting thread below, not to the server threads.
  sigset_t sigs;
  sigemptyset(&sigs);
  sigaddset(&sigs, SIGINT);
  sigaddset(&sigs, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

  lapsim_server* srv = nullptr;
  check(lapsim_server_create(cfg.dump().c_str(), &srv));
  int port = 0;
  if (const auto st = lapsim_server_bind(srv, &port); st != LAPSIM_OK) {
    lapsim_server_destroy(srv);
    die(st);
  }
  std::cout << json{{"listening", port}}.dump() << std::endl;
  lapsim_status run_status = LAPSIM_OK;
  std::thread runner([&] { run_status = lapsim_server_run(srv); });
  int sig = 0;
  sigwait(&sigs, &sig);
  lapsim_server_stop(srv);
  runner.join();
  lapsim_server_destroy(srv);
  if (run_status != LAPSIM_OK) die(run_status);
  return kOk;
}

int cmd_check(const std::string& path) {
  char* norm = nullptr;
  check(lapsim_scenario_check(path.c_str(), &norm));
  std::cout << take(norm) << "\n";
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"lapsim: desk-scale laparoscopic anastomosis simulator"};
  app.footer(kExitCodes);
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(lapsim_version()));

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Run a scenario under a scripted policy");
  run_cmd->add_option("--scenario", run.scenario, "Scenario JSON (default: built-in standard scenario)");
  run_cmd->add_option("--policy", run.policy, "AutoApprove | CornerPreferring | Corrective")->capture_default_str();
  run_cmd->add_option("--seed", run.seed)->capture_default_str();
  run_cmd->add_option("--profile", run.profile, "ex_vivo | in_vivo")->capture_default_str();
  run_cmd->add_option("--out", run.out, "Output directory for log, report and manifest")->capture_default_str();
  run_cmd->add_option("--reference", run.reference, "Reference values JSON attached to the report");
  run_cmd->add_flag("--json", run.json_out, "Print the report as JSON");

  BenchArgs bench;
  auto* bench_cmd = app.add_subcommand("motion-bench", "Compare tissue-motion detectors on a case grid");
  bench_cmd->add_option("--distances", bench.distances, "Camera distances in mm")->delimiter(',')->capture_default_str();
  bench_cmd->add_option("--orientations", bench.orientations)->capture_default_str();
  bench_cmd->add_option("--cycles", bench.cycles)->capture_default_str();
  bench_cmd->add_option("--seed", bench.seed)->capture_default_str();
  bench_cmd->add_option("--weights", bench.weights, "Motion CNN weights file")->capture_default_str();
  bench_cmd->add_flag("--train", bench.train, "Train the CNN and save weights before benchmarking");
  bench_cmd->add_option("--recordings", bench.recordings, "Training recordings (with --train)")->capture_default_str();
  bench_cmd->add_option("--epochs", bench.epochs, "Training epochs (with --train)")->capture_default_str();
  bench_cmd->add_option("--train-seed", bench.train_seed)->capture_default_str();
  bench_cmd->add_option("--out", bench.out, "Output directory for cases.csv and summary.json")->capture_default_str();
  bench_cmd->add_flag("--json", bench.json_out, "Print the summary as JSON");

  LandmarkArgs lm;
  auto* lm_cmd = app.add_subcommand("landmark", "Generate, train or evaluate the landmark cascade");
  lm_cmd->add_option("--mode", lm.mode)->required()->check(CLI::IsMember({"generate", "train", "eval"}));
  lm_cmd->add_option("--data", lm.data, "Dataset directory")->required();
  lm_cmd->add_option("--weights", lm.weights, "Weights directory (default: <data>/weights)");
  lm_cmd->add_option("--frames", lm.frames, "Frames to generate")->capture_default_str();
  lm_cmd->add_option("--seed", lm.seed, "Generator seed")->capture_default_str();
  lm_cmd->add_option("--seg-epochs", lm.seg_epochs)->capture_default_str();
  lm_cmd->add_option("--landmark-epochs", lm.landmark_epochs)->capture_default_str();
  lm_cmd->add_flag("--json", lm.json_out, "Print the result as JSON");

  std::string replay_log, replay_out;
  bool replay_json = false;
  auto* replay_cmd = app.add_subcommand("replay", "Re-drive a log's commands and compare");
  replay_cmd->add_option("--log", replay_log)->required();
  replay_cmd->add_option("--out", replay_out, "Write the reconstructed log here");
  replay_cmd->add_flag("--json", replay_json);

  std::string report_log, report_out, report_ref;
  bool report_json = false;
  auto* report_cmd = app.add_subcommand("report", "Compute metrics for a completed log");
  report_cmd->add_option("--log", report_log)->required();
  report_cmd->add_option("--out", report_out, "Directory for report files (default: next to the log)");
  report_cmd->add_option("--reference", report_ref, "Reference values JSON attached to the report");
  report_cmd->add_flag("--json", report_json);

  ServeArgs serve;
  auto* serve_cmd = app.add_subcommand("serve", "Run the session service over HTTP");
  serve_cmd->add_option("--bind", serve.bind, "Address (env LAPSIM_BIND, default 127.0.0.1)");
  serve_cmd->add_option("--port", serve.port, "Port, 0 for any (env LAPSIM_PORT, default 8080)");
  serve_cmd->add_option("--log-dir", serve.log_dir, "Session log directory (env LAPSIM_LOG_DIR)");
  serve_cmd->add_option("--scenario", serve.scenario, "Default scenario (env LAPSIM_SCENARIO)");
  serve_cmd->add_option("--realtime-scale", serve.realtime_scale, "Wall seconds per simulated second");

  std::string check_path;
  auto* check_cmd = app.add_subcommand("check", "Validate a scenario file");
  check_cmd->add_option("scenario", check_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kOk : kUsage;
  }

  try {
    if (*run_cmd) return cmd_run(run);
    if (*bench_cmd) return cmd_bench(bench);
    if (*lm_cmd) return cmd_landmark(lm);
    if (*replay_cmd) return cmd_replay(replay_log, replay_out, replay_json);
    if (*report_cmd) return cmd_report(report_log, report_out, report_ref, report_json);
    if (*serve_cmd) return cmd_serve(serve);
    if (*check_cmd) return cmd_check(check_path);
  } catch (const CliExit& e) {
    return e.code;
  } catch (const std::exception& e) {
    std::cerr << "error: Internal: " << e.what() << "\n";
    return kInternal;
  }
  return kUsage;
}
