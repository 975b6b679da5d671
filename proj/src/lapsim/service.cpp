#include "lapsim/service.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "httplib.h"
#include "lapsim/error.hpp"
#include "lapsim/planner.hpp"

namespace lapsim {

using json = nlohmann::json;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

const char* to_string(ClockMode m) { return m == ClockMode::AsFastAsPossible ? "as_fast" : "realtime"; }

ClockMode clock_mode_from_string(const std::string& s) {
  if (s == "as_fast") return ClockMode::AsFastAsPossible;
  if (s == "realtime") return ClockMode::RealtimeScaled;
  fail(ErrorCode::InvalidArgument, "unknown clock mode '" + s + "' (as_fast or realtime)");
}

ServiceConfig ServiceConfig::from_env() {
  ServiceConfig c;
  if (const char* v = std::getenv("LAPSIM_BIND")) c.bind_address = v;
  if (const char* v = std::getenv("LAPSIM_PORT")) c.port = std::atoi(v);
  if (const char* v = std::getenv("LAPSIM_LOG_DIR")) c.log_dir = v;
  if (const char* v = std::getenv("LAPSIM_SCENARIO")) c.default_scenario_path = v;
  return c;
}

// ---------------------------------------------------------------------------

void Subscription::push(json msg) {
  {
    std::lock_guard lk(mu_);
    if (ended_) return;
    msg["seq"] = ++seq_;
    queue_.push_back(std::move(msg));
  }
  cv_.notify_all();
}

void Subscription::end() {
  {
    std::lock_guard lk(mu_);
    ended_ = true;
  }
  cv_.notify_all();
}

std::optional<json> Subscription::next(std::chrono::milliseconds timeout) {
  std::unique_lock lk(mu_);
  cv_.wait_for(lk, timeout, [&] { return !queue_.empty() || ended_; });
  if (queue_.empty()) return std::nullopt;
  json m = std::move(queue_.front());
  queue_.pop_front();
  return m;
}

bool Subscription::finished() const {
  std::lock_guard lk(mu_);
  return ended_ && queue_.empty();
}

std::vector<json> Subscription::drain() {
  std::lock_guard lk(mu_);
  std::vector<json> out(std::make_move_iterator(queue_.begin()), std::make_move_iterator(queue_.end()));
  queue_.clear();
  return out;
}

// ---------------------------------------------------------------------------

struct SessionHost::Session {
  std::string id;
  SessionSpec spec;
  std::string path;
  std::unique_ptr<Supervisor> sup;
  std::unique_ptr<OperatorPolicy> policy;
  std::optional<RunLog> frozen;  // replayed sessions have no live supervisor

  std::mutex mu;
  std::condition_variable cv;
  std::vector<std::shared_ptr<Subscription>> subs;
  std::vector<json> pending;  // log records not yet fanned out
  long long tick = 1;         // index of the next periodic snapshot
  double hz = 10.0;
  double scale = 1.0;
  int fd = -1;
  bool closed = false;
  bool stopping = false;
  bool policy_stuck = false;
  std::thread worker;
  double anchor_sim = 0.0;
  Clock::time_point anchor_wall;

  const RunLog& log() const { return frozen ? *frozen : sup->log(); }
};

namespace {

using Session = SessionHost::Session;

void write_all(int fd, const std::string& text, const std::string& path) {
  std::size_t done = 0;
  while (done < text.size()) {
    const ssize_t n = ::write(fd, text.data() + done, text.size() - done);
    if (n <= 0) fail(ErrorCode::IoError, "short write to " + path);
    done += static_cast<std::size_t>(n);
  }
}

json point_json(const Point3& p) { return json::array({p.x, p.y, p.z}); }

json state_fields(const Session& s) {
  const Supervisor& sup = *s.sup;
  return {{"state", to_string(sup.state())},
          {"wall", to_string(sup.wall())},
          {"stitches", sup.tally().completed},
          {"failed_attempts", sup.tally().failed_attempts},
          {"replans", sup.tally().replans},
          {"deformation_events", sup.tally().deformation_events},
          {"attempt", sup.attempt()}};
}

json snapshot(const Session& s, const json& fields, double t) {
  json m = {{"schema", kStreamSchema}, {"version", kServiceSchemaVersion}, {"type", "snapshot"}, {"t", t}};
  m.update(fields);
  TissueState ts = s.sup->tissue();
  ts.time_s = t;
  json markers = json::array();
  for (const auto& mk : ts.markers()) markers.push_back({{"id", to_string(mk.id)}, {"p", point_json(mk.position)}});
  m["markers"] = std::move(markers);
  return m;
}

json catch_up(const Session& s) {
  json m;
  if (s.sup) {
    m = snapshot(s, state_fields(s), s.sup->now());
    json allowed = json::array();
    for (int k = 0; k < kCommandKindCount; ++k)
      if (s.sup->accepts(static_cast<CommandKind>(k))) allowed.push_back(to_string(static_cast<CommandKind>(k)));
    m["accepts"] = std::move(allowed);
    if (s.sup->state() == SupervisorState::AwaitPlanSelection && s.sup->plans())
      m["plans"] = {{"Uniform", plan_to_json(s.sup->plans()->uniform)},
                    {"CornerReinforced", plan_to_json(s.sup->plans()->corner)}};
  } else {
    const json& end = s.frozen->records.back();
    m = {{"schema", kStreamSchema}, {"version", kServiceSchemaVersion}, {"type", "snapshot"}, {"t", end.value("t", 0.0)},
         {"state", end.value("state", "")}};
  }
  m["catch_up"] = true;
  m["log_records"] = s.log().records.size();
  return m;
}

void broadcast(Session& s, const json& msg) {
  for (auto& sub : s.subs) sub->push(msg);
}

void flush(Session& s) {
  for (auto& rec : s.pending)
    broadcast(s, {{"schema", kStreamSchema}, {"version", kServiceSchemaVersion}, {"type", "record"}, {"record", rec}});
  s.pending.clear();
}

// Periodic snapshots strictly before `until`, showing `fields`.
void ticks_before(Session& s, double until, const json& fields) {
  if (s.subs.empty()) {
    s.tick = std::max(s.tick, static_cast<long long>(std::ceil(until * s.hz)));
    return;
  }
  while (static_cast<double>(s.tick) / s.hz < until) {
    broadcast(s, snapshot(s, fields, static_cast<double>(s.tick) / s.hz));
    ++s.tick;
  }
}

void finalize(Session& s) {
  if (s.closed) return;
  s.closed = true;
  if (s.fd >= 0) {
    const bool synced = ::fsync(s.fd) == 0;
    const bool ok = ::close(s.fd) == 0;
    s.fd = -1;
    if (!synced || !ok) fail(ErrorCode::IoError, "cannot flush " + s.path);
  }
  const json end_msg = {{"schema", kStreamSchema},
                        {"version", kServiceSchemaVersion},
                        {"type", "end"},
                        {"state", s.log().records.empty() ? "" : s.log().records.back().value("state", "")}};
  for (auto& sub : s.subs) {
    sub->push(end_msg);
    sub->end();
  }
  s.cv.notify_all();
}

void advance_fast(Session& s) {
  Supervisor& sup = *s.sup;
  for (int guard = 0; guard < 1000000 && !is_terminal(sup.state()); ++guard) {
    const json fields = state_fields(s);
    if (sup.step()) {
      ticks_before(s, sup.now(), fields);
      flush(s);
      continue;
    }
    if (!s.policy || s.policy_stuck) break;
    const auto d = s.policy->decide(sup);
    if (!d) {
      s.policy_stuck = true;
      break;
    }
    ticks_before(s, d->at_s, fields);
    sup.submit(d->command, d->at_s);
    flush(s);
  }
  if (is_terminal(sup.state())) finalize(s);
}

Clock::time_point wall_at(const Session& s, double t) {
  return s.anchor_wall + std::chrono::duration_cast<Clock::duration>(
                             std::chrono::duration<double>((t - s.anchor_sim) * s.scale));
}

double clock_now(const Session& s) {
  return s.anchor_sim + std::chrono::duration<double>(Clock::now() - s.anchor_wall).count() / s.scale;
}

void realtime_loop(Session* s) {
  std::unique_lock lk(s->mu);
  Supervisor& sup = *s->sup;
  auto stop = [&] { return s->stopping; };
  while (!s->stopping && !s->closed) {
    if (is_terminal(sup.state())) {
      flush(*s);
      finalize(*s);
      break;
    }
    if (!awaits_operator(sup.state())) {
      const json fields = state_fields(*s);
      sup.step();
      const double t1 = sup.now();
      std::vector<json> mine;
      mine.swap(s->pending);
      // Commands may arrive while this step is paced out; their records
      // follow the step's own.
      while (!s->stopping && static_cast<double>(s->tick) / s->hz < t1) {
        const double tk = static_cast<double>(s->tick) / s->hz;
        if (s->cv.wait_until(lk, wall_at(*s, tk), stop)) break;
        if (!s->subs.empty()) broadcast(*s, snapshot(*s, fields, tk));
        ++s->tick;
      }
      if (s->cv.wait_until(lk, wall_at(*s, t1), stop)) break;
      mine.insert(mine.end(), std::make_move_iterator(s->pending.begin()), std::make_move_iterator(s->pending.end()));
      s->pending = std::move(mine);
      flush(*s);
      continue;
    }
    const int seen = sup.commands_seen();
    const SupervisorState state = sup.state();
    std::optional<PolicyDecision> d;
    if (s->policy && !s->policy_stuck) {
      d = s->policy->decide(sup);
      if (!d) s->policy_stuck = true;
    }
    const double next_tick = static_cast<double>(s->tick) / s->hz;
    const double wake = d ? std::min(next_tick, std::max(d->at_s, sup.now())) : next_tick;
    s->cv.wait_until(lk, wall_at(*s, wake), [&] { return s->stopping || sup.commands_seen() != seen; });
    if (s->stopping) break;
    const json fields = state_fields(*s);
    if (sup.commands_seen() == seen) {
      const double now = clock_now(*s);
      ticks_before(*s, std::nextafter(now, 1e300), fields);
      if (d && now >= d->at_s && sup.state() == state) sup.submit(d->command, std::max(d->at_s, sup.now()));
    }
    flush(*s);
  }
}

ErrorCode code_or(const std::exception& e, ErrorCode fallback) {
  if (const auto* le = dynamic_cast<const Error*>(&e)) return le->code();
  return fallback;
}

}  // namespace

SessionHost::SessionHost(ServiceConfig cfg) : cfg_(std::move(cfg)) {
  if (!(cfg_.snapshot_hz > 0.0)) fail(ErrorCode::InvalidArgument, "snapshot rate must be positive");
  if (!(cfg_.realtime_scale > 0.0)) fail(ErrorCode::InvalidArgument, "realtime scale must be positive");
}

SessionHost::~SessionHost() {
  try {
    shutdown();
  } catch (...) {
  }
}

Scenario SessionHost::default_scenario() const {
  if (cfg_.default_scenario_path.empty()) return Scenario::standard();
  return load_scenario(cfg_.default_scenario_path);
}

std::string SessionHost::next_id() {
  for (;;) {
    const std::string id = "s" + std::to_string(++counter_);
    if (sessions_.count(id)) continue;
    if (fs::exists(fs::path(cfg_.log_dir) / (id + ".jsonl"))) continue;
    return id;
  }
}

std::shared_ptr<Session> SessionHost::find(const std::string& id) const {
  std::lock_guard lk(mu_);
  const auto it = sessions_.find(id);
  if (it == sessions_.end()) fail(ErrorCode::UnknownSession, "no session '" + id + "'");
  return it->second;
}

std::string SessionHost::create_session(const SessionSpec& spec) {
  spec.scenario.validate();
  const SafetyProfile profile = SafetyProfile::by_name(spec.profile);
  auto s = std::make_shared<Session>();
  s->spec = spec;
  s->hz = cfg_.snapshot_hz;
  s->scale = cfg_.realtime_scale;
  if (!spec.policy.empty()) s->policy = make_policy(spec.policy);
  s->sup = std::make_unique<Supervisor>(spec.scenario, profile, spec.seed, s->policy ? s->policy->name() : "operator");

  std::error_code ec;
  fs::create_directories(cfg_.log_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create log directory " + cfg_.log_dir + ": " + ec.message());
  {
    std::lock_guard lk(mu_);
    s->id = next_id();
    s->path = (fs::path(cfg_.log_dir) / (s->id + ".jsonl")).string();
    s->fd = ::open(s->path.c_str(), O_WRONLY | O_CREAT | O_TRUNC | O_APPEND, 0644);
    if (s->fd < 0) fail(ErrorCode::IoError, "cannot open log " + s->path);
    sessions_[s->id] = s;
    order_.push_back(s->id);
  }
  Session* raw = s.get();
  // The supervisor logs its initial state before a listener can be attached.
  write_all(s->fd, s->sup->log().header.dump() + "\n", s->path);
  for (const auto& rec : s->sup->log().records) write_all(s->fd, rec.dump() + "\n", s->path);
  s->sup->set_listener([raw](const json& rec) {
    write_all(raw->fd, rec.dump() + "\n", raw->path);
    raw->pending.push_back(rec);
  });

  std::lock_guard lk(s->mu);
  if (spec.clock == ClockMode::AsFastAsPossible) {
    advance_fast(*s);
  } else {
    s->anchor_sim = s->sup->now();
    s->anchor_wall = Clock::now();
    s->worker = std::thread(realtime_loop, raw);
  }
  return s->id;
}

std::vector<json> SessionHost::list_sessions() const {
  std::vector<std::string> ids;
  {
    std::lock_guard lk(mu_);
    ids = order_;
  }
  std::vector<json> out;
  for (const auto& id : ids) out.push_back(inspect(id));
  return out;
}

json SessionHost::inspect(const std::string& id) const {
  const auto s = find(id);
  std::lock_guard lk(s->mu);
  json j = {{"id", s->id},
            {"scenario", s->spec.scenario.name},
            {"profile", s->spec.profile},
            {"seed", s->spec.seed},
            {"clock", to_string(s->spec.clock)},
            {"policy", s->spec.policy},
            {"closed", s->closed},
            {"log_records", s->log().records.size()},
            {"log_path", s->path}};
  if (s->sup) {
    j.update(state_fields(*s));
    j["t"] = s->sup->now();
  } else {
    j["state"] = s->frozen->records.back().value("state", "");
    j["replayed"] = true;
  }
  return j;
}

Ack SessionHost::submit_command(const std::string& id, const OperatorCommand& cmd) {
  const auto s = find(id);
  std::lock_guard lk(s->mu);
  if (s->closed || !s->sup) fail(ErrorCode::UnknownSession, "session '" + id + "' is closed");
  Supervisor& sup = *s->sup;
  Ack a;
  if (!sup.accepts(cmd.kind)) {
    a.state = to_string(sup.state());
    a.reason = std::string(to_string(cmd.kind)) + " is not accepted in state " + a.state;
    return a;
  }
  const bool realtime = s->spec.clock == ClockMode::RealtimeScaled;
  const double at = realtime ? std::max(sup.now(), clock_now(*s)) : sup.now();
  try {
    sup.submit(cmd, at);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::InvalidCommandForState) throw;
    a.state = to_string(sup.state());
    a.reason = e.what();
    return a;
  }
  a.accepted = true;
  s->policy_stuck = false;
  if (realtime) {
    s->cv.notify_all();
  } else {
    flush(*s);
    advance_fast(*s);
  }
  a.state = to_string(sup.state());
  return a;
}

std::shared_ptr<Subscription> SessionHost::subscribe(const std::string& id) {
  const auto s = find(id);
  std::lock_guard lk(s->mu);
  auto sub = std::make_shared<Subscription>();
  sub->push(catch_up(*s));
  if (s->closed) {
    sub->push({{"schema", kStreamSchema}, {"version", kServiceSchemaVersion}, {"type", "end"},
               {"state", s->log().records.back().value("state", "")}});
    sub->end();
  } else {
    s->subs.push_back(sub);
  }
  return sub;
}

RunLog SessionHost::run_log(const std::string& id) const {
  const auto s = find(id);
  std::lock_guard lk(s->mu);
  return s->log();
}

MetricsReport SessionHost::report(const std::string& id) const { return build_report(run_log(id)); }

std::string SessionHost::log_path(const std::string& id) const { return find(id)->path; }

void SessionHost::close_session(const std::string& id) {
  const auto s = find(id);
  {
    std::lock_guard lk(s->mu);
    if (!s->closed && s->sup) {
      if (!is_terminal(s->sup->state())) {
        const double at = s->spec.clock == ClockMode::RealtimeScaled ? std::max(s->sup->now(), clock_now(*s))
                                                                      : s->sup->now();
        s->sup->submit(OperatorCommand::make(CommandKind::Abort, "close"), at);
      }
      flush(*s);
      finalize(*s);
    }
    s->stopping = true;
    s->cv.notify_all();
  }
  if (s->worker.joinable() && s->worker.get_id() != std::this_thread::get_id()) s->worker.join();
}

bool SessionHost::wait_closed(const std::string& id, std::chrono::milliseconds timeout) {
  const auto s = find(id);
  std::unique_lock lk(s->mu);
  return s->cv.wait_for(lk, timeout, [&] { return s->closed; });
}

std::string SessionHost::replay(const RunLog& log) {
  RunLog again = lapsim::replay(log);
  auto s = std::make_shared<Session>();
  try {
    s->spec.scenario = scenario_from_json(again.header.at("scenario"));
    s->spec.profile = again.header.at("profile").get<std::string>();
    s->spec.seed = again.header.at("seed").get<std::uint64_t>();
    s->spec.policy = again.header.at("policy").get<std::string>();
  } catch (const std::exception& e) {
    fail(ErrorCode::CorruptLog, std::string("bad header: ") + e.what());
  }
  s->frozen = std::move(again);
  s->closed = true;
  std::error_code ec;
  fs::create_directories(cfg_.log_dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create log directory " + cfg_.log_dir + ": " + ec.message());
  std::lock_guard lk(mu_);
  s->id = next_id();
  s->path = (fs::path(cfg_.log_dir) / (s->id + ".jsonl")).string();
  s->frozen->save(s->path);
  sessions_[s->id] = s;
  order_.push_back(s->id);
  return s->id;
}

std::string SessionHost::replay_text(const std::string& jsonl) { return replay(RunLog::parse(jsonl)); }

std::string SessionHost::replay_file(const std::string& path) { return replay(RunLog::load(path)); }

void SessionHost::shutdown() {
  std::vector<std::shared_ptr<Session>> all;
  {
    std::lock_guard lk(mu_);
    for (auto& [id, s] : sessions_) all.push_back(s);
  }
  for (auto& s : all) {
    {
      std::lock_guard lk(s->mu);
      s->stopping = true;
      if (s->fd >= 0) {
        ::fsync(s->fd);
        ::close(s->fd);
        s->fd = -1;
      }
      for (auto& sub : s->subs) sub->end();
      s->cv.notify_all();
    }
    if (s->worker.joinable()) s->worker.join();
  }
}

// ---------------------------------------------------------------------------
// HTTP

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::UnknownSession: return 404;
    case ErrorCode::InvalidScenario:
    case ErrorCode::InvalidArgument: return 400;
    case ErrorCode::SchemaVersionMismatch:
    case ErrorCode::CorruptLog: return 422;
    case ErrorCode::IncompleteLog:
    case ErrorCode::InvalidCommandForState: return 409;
    default: return 500;
  }
}

struct HttpService::Impl {
  httplib::Server server;
  int port = 0;
};

namespace {

json envelope(json body) {
  body["schema"] = kApiSchema;
  body["version"] = kServiceSchemaVersion;
  return body;
}

void reply(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(envelope(body).dump(), "application/json");
}

// Runs a handler, mapping library errors to JSON error bodies.
template <typename F>
void guarded(httplib::Response& res, F&& fn) {
  try {
    fn();
  } catch (const json::exception& e) {
    reply(res, 400, {{"error", error_name(ErrorCode::InvalidArgument)}, {"message", e.what()}});
  } catch (const std::exception& e) {
    const ErrorCode c = code_or(e, ErrorCode::IoError);
    const bool ours = dynamic_cast<const Error*>(&e) != nullptr;
    reply(res, ours ? http_status(c) : 500, {{"error", ours ? error_name(c) : "Internal"}, {"message", e.what()}});
  }
}

SessionSpec spec_from_request(const SessionHost& host, const json& body) {
  SessionSpec spec;
  if (body.contains("scenario")) {
    spec.scenario = scenario_from_json(body["scenario"]);
  } else if (body.contains("scenario_text")) {
    spec.scenario = parse_scenario(body["scenario_text"].get<std::string>());
  } else if (body.contains("scenario_path")) {
    spec.scenario = load_scenario(body["scenario_path"].get<std::string>());
  } else {
    spec.scenario = host.default_scenario();
  }
  spec.profile = body.value("profile", spec.profile);
  spec.seed = body.value("seed", spec.seed);
  spec.clock = clock_mode_from_string(body.value("clock", std::string("as_fast")));
  spec.policy = body.value("policy", std::string());
  return spec;
}

}  // namespace

HttpService::HttpService(ServiceConfig cfg) : host_(std::move(cfg)), impl_(std::make_unique<Impl>()) {
  auto& svr = impl_->server;
  SessionHost& host = host_;

  svr.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) { reply(res, 200, {{"ok", true}}); });

  svr.Post("/v1/sessions", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const json body = req.body.empty() ? json::object() : json::parse(req.body);
      const std::string id = host.create_session(spec_from_request(host, body));
      reply(res, 201, host.inspect(id));
    });
  });

  svr.Get("/v1/sessions", [&host](const httplib::Request&, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, {{"sessions", host.list_sessions()}}); });
  });

  svr.Get(R"(/v1/sessions/([^/]+))", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, host.inspect(req.matches[1])); });
  });

  svr.Post(R"(/v1/sessions/([^/]+)/commands)", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const OperatorCommand cmd = command_from_json(json::parse(req.body));
      const Ack a = host.submit_command(req.matches[1], cmd);
      json body = {{"accepted", a.accepted}, {"state", a.state}, {"command", command_to_json(cmd)}};
      if (!a.accepted) body["reason"] = a.reason;
      reply(res, 200, body);
    });
  });

  svr.Get(R"(/v1/sessions/([^/]+)/events)", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      auto sub = host.subscribe(req.matches[1]);
      res.set_chunked_content_provider("application/x-ndjson", [sub](std::size_t, httplib::DataSink& sink) {
        if (auto m = sub->next(std::chrono::milliseconds(200))) {
          const std::string line = m->dump() + "\n";
          return sink.write(line.data(), line.size());
        }
        if (sub->finished()) sink.done();
        return true;
      });
    });
  });

  svr.Get(R"(/v1/sessions/([^/]+)/log)", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      res.status = 200;
      res.set_content(host.run_log(req.matches[1]).to_jsonl(), "application/x-ndjson");
    });
  });

  svr.Get(R"(/v1/sessions/([^/]+)/report)", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { reply(res, 200, report_to_json(host.report(req.matches[1]))); });
  });

  svr.Post(R"(/v1/sessions/([^/]+)/close)", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      host.close_session(req.matches[1]);
      reply(res, 200, host.inspect(req.matches[1]));
    });
  });

  svr.Post("/v1/replay", [&host](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      const std::string id = host.replay_text(req.body);
      reply(res, 201, host.inspect(id));
    });
  });
}

HttpService::~HttpService() { stop(); }

int HttpService::bind() {
  auto& svr = impl_->server;
  const auto& c = host_.config();
  if (c.port == 0) {
    impl_->port = svr.bind_to_any_port(c.bind_address);
    if (impl_->port <= 0) fail(ErrorCode::IoError, "cannot bind " + c.bind_address);
  } else {
    if (!svr.bind_to_port(c.bind_address, c.port))
      fail(ErrorCode::IoError, "cannot bind " + c.bind_address + ":" + std::to_string(c.port));
    impl_->port = c.port;
  }
  return impl_->port;
}

void HttpService::run() { impl_->server.listen_after_bind(); }

void HttpService::stop() {
  host_.shutdown();
  impl_->server.stop();
}

}  // namespace lapsim
