#pragma once

// Session host: supervisors on a simulated clock, operator commands, an
// ordered event stream per subscriber, JSONL persistence and replay. The HTTP
// front end is a thin layer over SessionHost.

#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "lapsim/metrics.hpp"
#include "lapsim/supervisor.hpp"

namespace lapsim {

inline constexpr const char* kStreamSchema = "lapsim.stream";
inline constexpr const char* kApiSchema = "lapsim.api";
inline constexpr int kServiceSchemaVersion = 1;

enum class ClockMode { AsFastAsPossible, RealtimeScaled };
const char* to_string(ClockMode m);
ClockMode clock_mode_from_string(const std::string& s);  // "as_fast" | "realtime"; throws InvalidArgument

struct ServiceConfig {
  std::string bind_address = "127.0.0.1";
  int port = 8080;                   // 0 picks a free port
  std::string log_dir = "runs";
  std::string default_scenario_path;  // empty: built-in standard scenario
  double snapshot_hz = 10.0;          // simulated
  double realtime_scale = 1.0;        // wall seconds per simulated second

  // LAPSIM_BIND, LAPSIM_PORT, LAPSIM_LOG_DIR, LAPSIM_SCENARIO override defaults.
  static ServiceConfig from_env();
};

struct SessionSpec {
  Scenario scenario = Scenario::standard();
  std::string profile = "ex_vivo";
  std::uint64_t seed = 42;
  ClockMode clock = ClockMode::AsFastAsPossible;
  std::string policy;  // empty: commands come from clients only
};

struct Ack {
  bool accepted = false;
  std::string state;   // supervisor state after the command (or the rejecting state)
  std::string reason;  // set on rejection
};

// One subscriber's ordered message queue. Every message carries a strictly
// increasing "seq".
class Subscription {
 public:
  // nullopt on timeout or once the stream has ended and drained.
  std::optional<nlohmann::json> next(std::chrono::milliseconds timeout);
  bool finished() const;
  std::vector<nlohmann::json> drain();  // everything queued right now

  // Producer side, used by the host.
  void push(nlohmann::json msg);
  void end();

 private:
  mutable std::mutex mu_;
  std::condition_variable cv_;
  std::deque<nlohmann::json> queue_;
  std::uint64_t seq_ = 0;
  bool ended_ = false;
};

class SessionHost {
 public:
  explicit SessionHost(ServiceConfig cfg = {});
  ~SessionHost();
  SessionHost(const SessionHost&) = delete;
  SessionHost& operator=(const SessionHost&) = delete;

  const ServiceConfig& config() const { return cfg_; }
  // Scenario from the configured default path, else the standard one.
  Scenario default_scenario() const;

  // Session starts in Idle with its log file open. Throws InvalidScenario,
  // InvalidArgument (profile, policy), IoError.
  std::string create_session(const SessionSpec& spec);
  std::vector<nlohmann::json> list_sessions() const;
  nlohmann::json inspect(const std::string& id) const;  // UnknownSession

  // Throws UnknownSession for unknown or closed sessions.
  Ack submit_command(const std::string& id, const OperatorCommand& cmd);
  // Late subscribers get a catch-up snapshot first. Throws UnknownSession.
  std::shared_ptr<Subscription> subscribe(const std::string& id);

  RunLog run_log(const std::string& id) const;          // UnknownSession
  MetricsReport report(const std::string& id) const;    // also IncompleteLog
  std::string log_path(const std::string& id) const;

  // Aborts a live session and fsyncs its log. Idempotent.
  void close_session(const std::string& id);
  // Waits for a session to reach a terminal state. False on timeout.
  bool wait_closed(const std::string& id, std::chrono::milliseconds timeout);

  // Re-drives the log's commands in a new closed session. Throws
  // SchemaVersionMismatch, CorruptLog.
  std::string replay(const RunLog& log);
  std::string replay_text(const std::string& jsonl);
  std::string replay_file(const std::string& path);  // also IoError

  // Ends every stream and stops realtime workers.
  void shutdown();

  struct Session;

 private:
  std::shared_ptr<Session> find(const std::string& id) const;
  std::string next_id();

  ServiceConfig cfg_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::vector<std::string> order_;
  int counter_ = 0;
};

// HTTP front end (JSON request/response, NDJSON event stream).
//   GET  /v1/health
//   POST /v1/sessions                  {scenario | scenario_text | scenario_path, profile, seed, clock, policy}
//   GET  /v1/sessions
//   GET  /v1/sessions/{id}
//   POST /v1/sessions/{id}/commands    command JSON
//   GET  /v1/sessions/{id}/events      NDJSON until the session closes
//   GET  /v1/sessions/{id}/log         JSONL
//   GET  /v1/sessions/{id}/report
//   POST /v1/sessions/{id}/close
//   POST /v1/replay                    JSONL body
class HttpService {
 public:
  explicit HttpService(ServiceConfig cfg);
  ~HttpService();

  // Binds the socket and returns the port. Throws IoError.
  int bind();
  // Serves until stop(). Call bind() first.
  void run();
  void stop();
  SessionHost& host() { return host_; }

 private:
  struct Impl;
  SessionHost host_;
  std::unique_ptr<Impl> impl_;
};

// Maps an error to the HTTP status the front end returns for it.
int http_status(ErrorCode code);

}  // namespace lapsim
