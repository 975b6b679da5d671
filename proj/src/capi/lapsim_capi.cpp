#include "lapsim/lapsim.h"

#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <memory>
#include <string>

#include "json.hpp"
#include "lapsim/error.hpp"
#include "lapsim/landmark.hpp"
#include "lapsim/metrics.hpp"
#include "lapsim/motion.hpp"
#include "lapsim/service.hpp"
#include "lapsim/supervisor.hpp"

using json = nlohmann::json;
using lapsim::ErrorCode;

static_assert(static_cast<int>(LAPSIM_E_INVALID_ARGUMENT) == static_cast<int>(ErrorCode::InvalidArgument));
static_assert(static_cast<int>(LAPSIM_E_POLICY_STUCK) == static_cast<int>(ErrorCode::PolicyStuck));
static_assert(static_cast<int>(LAPSIM_E_INVALID_SCENARIO) == static_cast<int>(ErrorCode::InvalidScenario));
static_assert(static_cast<int>(LAPSIM_E_MISSING_WEIGHTS) == static_cast<int>(ErrorCode::MissingWeights));
static_assert(static_cast<int>(LAPSIM_E_IO) == static_cast<int>(ErrorCode::IoError));
static_assert(static_cast<int>(LAPSIM_E_FEWER_PEAKS_THAN_REQUESTED) ==
              static_cast<int>(ErrorCode::FewerPeaksThanRequested));

struct lapsim_log {
  lapsim::RunLog log;
};

struct lapsim_session {
  std::unique_ptr<lapsim::Supervisor> sup;
};

struct lapsim_server {
  std::unique_ptr<lapsim::HttpService> http;
};

namespace {

thread_local std::string last_error;

lapsim_status set_error(lapsim_status s, const std::string& msg) {
  last_error = msg;
  return s;
}

template <typename F>
lapsim_status guarded(F&& fn) {
  try {
    last_error.clear();
    fn();
    return LAPSIM_OK;
  } catch (const lapsim::Error& e) {
    return set_error(static_cast<lapsim_status>(e.code()), e.what());
  } catch (const json::exception& e) {
    return set_error(LAPSIM_E_INVALID_ARGUMENT, std::string("InvalidArgument: ") + e.what());
  } catch (const std::exception& e) {
    return set_error(LAPSIM_E_INTERNAL, std::string("Internal: ") + e.what());
  } catch (...) {
    return set_error(LAPSIM_E_INTERNAL, "Internal: unknown failure");
  }
}

char* dup(const std::string& s) {
  char* p = static_cast<char*>(std::malloc(s.size() + 1));
  if (!p) throw std::bad_alloc();
  std::memcpy(p, s.c_str(), s.size() + 1);
  return p;
}

void require(const void* p, const char* what) {
  if (!p) lapsim::fail(ErrorCode::InvalidArgument, std::string(what) + " is null");
}

json parse_options(const char* text) {
  if (!text || !*text) return json::object();
  json j = json::parse(text);
  if (!j.is_object()) lapsim::fail(ErrorCode::InvalidArgument, "options must be a JSON object");
  return j;
}

lapsim::Scenario scenario_at(const char* path) {
  return path && *path ? lapsim::load_scenario(path) : lapsim::Scenario::standard();
}

json evaluation_json(const lapsim::CascadeEvaluation& ev, const std::vector<const lapsim::LandmarkFrame*>& frames) {
  json per = json::array();
  for (std::size_t i = 0; i < frames.size(); ++i)
    per.push_back({{"serial", frames[i]->serial}, {"mean_error_px", ev.frame_mean_error[i]}});
  const int removed = ev.injected_background_peaks - ev.surviving_background_peaks;
  return {{"frames", per},
          {"mean_error_px", ev.mean_error},
          {"sd_error_px", ev.sd_error},
          {"effective_radius_px", ev.effective_radius_px},
          {"fraction_within_radius", ev.fraction_within_radius},
          {"pass", ev.pass},
          {"background_peaks",
           {{"raw_outside_mask", ev.raw_background_peaks},
            {"injected", ev.injected_background_peaks},
            {"surviving", ev.surviving_background_peaks},
            {"removed", removed}}}};
}

}  // namespace

extern "C" {

const char* lapsim_version(void) { return "1.0.0"; }

const char* lapsim_status_name(lapsim_status status) {
  if (status == LAPSIM_OK) return "Ok";
  if (status == LAPSIM_E_INTERNAL) return "Internal";
  return lapsim::error_name(static_cast<ErrorCode>(status));
}

const char* lapsim_last_error(void) { return last_error.c_str(); }

void lapsim_string_free(char* s) { std::free(s); }

lapsim_status lapsim_scenario_check(const char* path, char** normalized) {
  return guarded([&] {
    require(path, "path");
    const auto sc = lapsim::load_scenario(path);
    if (normalized) *normalized = dup(lapsim::scenario_to_json(sc).dump(2));
  });
}

// ---- logs

lapsim_status lapsim_log_load(const char* path, lapsim_log** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new lapsim_log{lapsim::RunLog::load(path)};
  });
}

lapsim_status lapsim_log_parse(const char* jsonl, lapsim_log** out) {
  return guarded([&] {
    require(jsonl, "jsonl");
    require(out, "out");
    *out = new lapsim_log{lapsim::RunLog::parse(jsonl)};
  });
}

void lapsim_log_destroy(lapsim_log* log) { delete log; }

lapsim_status lapsim_log_save(const lapsim_log* log, const char* path) {
  return guarded([&] {
    require(log, "log");
    require(path, "path");
    log->log.save(path);
  });
}

lapsim_status lapsim_log_jsonl(const lapsim_log* log, char** out) {
  return guarded([&] {
    require(log, "log");
    require(out, "out");
    *out = dup(log->log.to_jsonl());
  });
}

lapsim_status lapsim_log_final_state(const lapsim_log* log, char** out) {
  return guarded([&] {
    require(log, "log");
    require(out, "out");
    std::string state;
    for (auto it = log->log.records.rbegin(); it != log->log.records.rend() && state.empty(); ++it)
      if ((*it)["kind"] == "end" || (*it)["kind"] == "state") state = it->value("state", "");
    *out = dup(state);
  });
}

lapsim_status lapsim_log_replay(const lapsim_log* log, lapsim_log** out) {
  return guarded([&] {
    require(log, "log");
    require(out, "out");
    *out = new lapsim_log{lapsim::replay(log->log)};
  });
}

lapsim_status lapsim_log_report(const lapsim_log* log, const char* reference_path, char** report_json) {
  return guarded([&] {
    require(log, "log");
    require(report_json, "report_json");
    const json ref = reference_path ? lapsim::load_reference_values(reference_path) : json(nullptr);
    *report_json = dup(lapsim::report_to_json(lapsim::build_report(log->log), ref).dump(2));
  });
}

lapsim_status lapsim_log_write_report(const lapsim_log* log, const char* dir, const char* reference_path) {
  return guarded([&] {
    require(log, "log");
    require(dir, "dir");
    const json ref = reference_path ? lapsim::load_reference_values(reference_path) : json(nullptr);
    lapsim::write_report(lapsim::build_report(log->log), dir, ref);
  });
}

// ---- runs and sessions

lapsim_status lapsim_run(const char* scenario_path, const char* profile, uint64_t seed, const char* policy,
                         lapsim_log** out) {
  return guarded([&] {
    require(out, "out");
    *out = nullptr;
    const auto sc = scenario_at(scenario_path);
    const auto prof = lapsim::SafetyProfile::by_name(profile ? profile : "ex_vivo");
    auto pol = lapsim::make_policy(policy ? policy : "AutoApprove");
    lapsim::RunLog partial;
    try {
      *out = new lapsim_log{lapsim::run_scripted(*pol, sc, prof, seed, &partial)};
    } catch (const lapsim::Error& e) {
      if (e.code() == ErrorCode::PolicyStuck) *out = new lapsim_log{std::move(partial)};
      throw;
    }
  });
}

lapsim_status lapsim_session_create(const char* scenario_path, const char* profile, uint64_t seed,
                                    lapsim_session** out) {
  return guarded([&] {
    require(out, "out");
    const auto sc = scenario_at(scenario_path);
    const auto prof = lapsim::SafetyProfile::by_name(profile ? profile : "ex_vivo");
    auto s = std::make_unique<lapsim_session>();
    s->sup = std::make_unique<lapsim::Supervisor>(sc, prof, seed, "operator");
    s->sup->run_until_blocked();
    *out = s.release();
  });
}

void lapsim_session_destroy(lapsim_session* s) { delete s; }

lapsim_status lapsim_session_submit(lapsim_session* s, const char* command_json, int* accepted) {
  return guarded([&] {
    require(s, "session");
    require(command_json, "command_json");
    const auto cmd = lapsim::command_from_json(json::parse(command_json));
    int ok = 0;
    if (s->sup->accepts(cmd.kind)) {
      try {
        s->sup->submit(cmd, s->sup->now());
        ok = 1;
      } catch (const lapsim::Error& e) {
        if (e.code() != ErrorCode::InvalidCommandForState) throw;
      }
      if (ok) s->sup->run_until_blocked();
    }
    if (accepted) *accepted = ok;
  });
}

lapsim_status lapsim_session_info(const lapsim_session* s, char** info_json) {
  return guarded([&] {
    require(s, "session");
    require(info_json, "info_json");
    const auto& sup = *s->sup;
    json accepts = json::array();
    for (int k = 0; k < lapsim::kCommandKindCount; ++k)
      if (sup.accepts(static_cast<lapsim::CommandKind>(k)))
        accepts.push_back(lapsim::to_string(static_cast<lapsim::CommandKind>(k)));
    *info_json = dup(json{{"state", lapsim::to_string(sup.state())},
                          {"t", sup.now()},
                          {"wall", lapsim::to_string(sup.wall())},
                          {"stitches", sup.tally().completed},
                          {"failed_attempts", sup.tally().failed_attempts},
                          {"replans", sup.tally().replans},
                          {"deformation_events", sup.tally().deformation_events},
                          {"accepts", accepts}}
                         .dump());
  });
}

lapsim_status lapsim_session_log(const lapsim_session* s, lapsim_log** out) {
  return guarded([&] {
    require(s, "session");
    require(out, "out");
    *out = new lapsim_log{s->sup->log()};
  });
}

// ---- motion

lapsim_status lapsim_motion_train(const char* config_json, const char* weights_path, char** stats_json) {
  return guarded([&] {
    require(weights_path, "weights_path");
    const json o = parse_options(config_json);
    lapsim::CnnTrainConfig cfg;
    cfg.recordings = o.value("recordings", cfg.recordings);
    cfg.epochs = o.value("epochs", cfg.epochs);
    cfg.seed = o.value("seed", cfg.seed);
    lapsim::CnnTrainStats stats;
    const auto cnn = lapsim::train_motion_cnn(lapsim::BenchmarkScene{}, cfg, &stats);
    cnn.save(weights_path);
    if (stats_json)
      *stats_json = dup(json{{"examples", stats.examples},
                             {"epoch_loss", stats.epoch_loss},
                             {"train_accuracy", stats.train_accuracy},
                             {"weights", weights_path}}
                            .dump(2));
  });
}

lapsim_status lapsim_motion_bench(const char* config_json, const char* weights_path, char** summary_json, char** csv) {
  return guarded([&] {
    const json o = parse_options(config_json);
    lapsim::BenchmarkConfig cfg;
    cfg.distances_mm = o.value("distances_mm", cfg.distances_mm);
    cfg.orientations = o.value("orientations", cfg.orientations);
    cfg.cycles = o.value("cycles", cfg.cycles);
    cfg.seed = o.value("seed", cfg.seed);
    if (cfg.cycles < 1) lapsim::fail(ErrorCode::InvalidArgument, "cycles must be at least 1");
    if (cfg.orientations < 1) lapsim::fail(ErrorCode::InvalidArgument, "orientations must be at least 1");
    if (!weights_path || !std::filesystem::exists(weights_path))
      lapsim::fail(ErrorCode::MissingWeights,
                   std::string("no motion CNN weights at ") + (weights_path ? weights_path : "(none)"));
    auto cnn = std::make_shared<const lapsim::MotionCnn>(lapsim::MotionCnn::load(weights_path));
    const auto res = lapsim::run_motion_benchmark(cfg, cnn);
    if (summary_json) *summary_json = dup(res.summary_json());
    if (csv) *csv = dup(res.csv());
  });
}

// ---- landmarks

lapsim_status lapsim_landmark_generate(const char* data_dir, const char* options_json) {
  return guarded([&] {
    require(data_dir, "data_dir");
    const json o = parse_options(options_json);
    lapsim::SyntheticOptions opt;
    opt.frames = o.value("frames", opt.frames);
    opt.seed = o.value("seed", opt.seed);
    lapsim::save_dataset(lapsim::make_synthetic_dataset(opt), data_dir);
  });
}

lapsim_status lapsim_landmark_train(const char* data_dir, const char* weights_dir, const char* options_json,
                                    char** result_json) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(weights_dir, "weights_dir");
    const json o = parse_options(options_json);
    lapsim::CascadeOptions opt;
    opt.seg_epochs = o.value("seg_epochs", opt.seg_epochs);
    opt.landmark_epochs = o.value("landmark_epochs", opt.landmark_epochs);
    opt.augmentations = o.value("augmentations", opt.augmentations);
    opt.seed = o.value("seed", opt.seed);
    const auto ds = lapsim::load_dataset(data_dir);
    lapsim::CascadeTrainLog log;
    const auto net = lapsim::train_cascade(ds, opt, &log);
    net.save(weights_dir);
    const auto test = ds.test();
    json r = {{"training",
               {{"frames", ds.train().size()}, {"seg_loss", log.seg_loss}, {"landmark_loss", log.landmark_loss}}}};
    if (!test.empty()) r["evaluation"] = evaluation_json(lapsim::evaluate_cascade(net, test, ds.effective_radius_px), test);
    if (result_json) *result_json = dup(r.dump(2));
  });
}

lapsim_status lapsim_landmark_eval(const char* data_dir, const char* weights_dir, char** result_json) {
  return guarded([&] {
    require(data_dir, "data_dir");
    require(weights_dir, "weights_dir");
    lapsim::LandmarkCascade net;
    net.load(weights_dir);
    const auto ds = lapsim::load_dataset(data_dir);
    const auto test = ds.test();
    if (test.empty()) lapsim::fail(ErrorCode::DatasetTooSmall, "no even-serial frames to evaluate");
    const json r = {{"evaluation", evaluation_json(lapsim::evaluate_cascade(net, test, ds.effective_radius_px), test)}};
    if (result_json) *result_json = dup(r.dump(2));
  });
}

// ---- service

lapsim_status lapsim_server_create(const char* config_json, lapsim_server** out) {
  return guarded([&] {
    require(out, "out");
    const json o = parse_options(config_json);
    auto cfg = lapsim::ServiceConfig::from_env();
    cfg.bind_address = o.value("bind", cfg.bind_address);
    cfg.port = o.value("port", cfg.port);
    cfg.log_dir = o.value("log_dir", cfg.log_dir);
    cfg.default_scenario_path = o.value("scenario", cfg.default_scenario_path);
    cfg.snapshot_hz = o.value("snapshot_hz", cfg.snapshot_hz);
    cfg.realtime_scale = o.value("realtime_scale", cfg.realtime_scale);
    if (!cfg.default_scenario_path.empty()) lapsim::load_scenario(cfg.default_scenario_path);
    auto srv = std::make_unique<lapsim_server>();
    srv->http = std::make_unique<lapsim::HttpService>(cfg);
    *out = srv.release();
  });
}

lapsim_status lapsim_server_bind(lapsim_server* srv, int* port) {
  return guarded([&] {
    require(srv, "server");
    const int p = srv->http->bind();
    if (port) *port = p;
  });
}

lapsim_status lapsim_server_run(lapsim_server* srv) {
  return guarded([&] {
    require(srv, "server");
    srv->http->run();
  });
}

void lapsim_server_stop(lapsim_server* srv) {
  if (srv) srv->http->stop();
}

void lapsim_server_destroy(lapsim_server* srv) { delete srv; }

}  // extern "C"
