#include "lapsim/motion.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"
#include "lapsim/error.hpp"

namespace lapsim {

using micronet::LayerSpec;
using micronet::Tensor;

Grid downsample(const NirFrame& frame, int size) {
  if (size <= 0 || frame.width <= 0 || frame.height <= 0) fail(ErrorCode::InvalidArgument, "bad downsample size");
  Grid g;
  g.size = size;
  g.timestamp_s = frame.timestamp_s;
  g.values.assign(static_cast<std::size_t>(size) * size, 0.0f);
  std::vector<int> counts(g.values.size(), 0);
  std::vector<int> col_cell(frame.width);
  for (int c = 0; c < frame.width; ++c) col_cell[c] = static_cast<int>(static_cast<long long>(c) * size / frame.width);
  for (int r = 0; r < frame.height; ++r) {
    const int rc = static_cast<int>(static_cast<long long>(r) * size / frame.height);
    const float* row = frame.pixels.data() + static_cast<std::size_t>(r) * frame.width;
    float* out = g.values.data() + static_cast<std::size_t>(rc) * size;
    int* cnt = counts.data() + static_cast<std::size_t>(rc) * size;
    for (int c = 0; c < frame.width; ++c) {
      out[col_cell[c]] += row[c];
      ++cnt[col_cell[c]];
    }
  }
  for (std::size_t i = 0; i < g.values.size(); ++i)
    if (counts[i]) g.values[i] /= static_cast<float>(counts[i]);
  return g;
}

int EncodingConfig::window_frames() const { return static_cast<int>(std::lround(window_s * fps)) + 1; }

MotionEncoding encode_grids(std::span<const Grid* const> window, const EncodingConfig& config) {
  if (window.size() < 2) fail(ErrorCode::WindowTooShort, "encoding needs at least two frames");
  const int size = window.front()->size;
  const std::size_t n = static_cast<std::size_t>(size) * size;
  for (const Grid* g : window)
    if (g->size != size) fail(ErrorCode::ShapeMismatch, "grids in a window differ in size");

  MotionEncoding enc;
  enc.size = size;
  enc.window_s = window.back()->timestamp_s - window.front()->timestamp_s;
  enc.history.assign(n, 0.0f);
  const std::size_t frames = window.size();
  for (std::size_t k = 0; k < frames; ++k) {
    const double age = window.back()->timestamp_s - window[k]->timestamp_s;
    const float w = static_cast<float>(config.history_floor +
                                       (1.0 - config.history_floor) * std::exp(-age / config.recency_tau_s));
    const float* v = window[k]->values.data();
    for (std::size_t i = 0; i < n; ++i) enc.history[i] = std::max(enc.history[i], w * v[i]);
  }
  const float peak = *std::max_element(enc.history.begin(), enc.history.end());
  enc.direction.assign(n, 0.0f);
  if (peak > 0.0f) {
    const float inv = 1.0f / peak;
    const float* a = window.front()->values.data();
    const float* b = window.back()->values.data();
    for (std::size_t i = 0; i < n; ++i) {
      enc.history[i] *= inv;
      enc.direction[i] = std::min(1.0f, std::abs(b[i] - a[i]) * inv);
    }
  }
  return enc;
}

MotionEncoding encode(std::span<const NirFrame> frames, const EncodingConfig& config) {
  if (frames.empty()) fail(ErrorCode::WindowTooShort, "no frames");
  const double newest = frames.back().timestamp_s;
  const double span = newest - frames.front().timestamp_s;
  const double slack = 0.5 / config.fps;
  if (span < config.window_s - slack)
    fail(ErrorCode::WindowTooShort, "frames span " + std::to_string(span) + " s, window needs " +
                                         std::to_string(config.window_s) + " s");
  std::vector<Grid> grids;
  for (const auto& f : frames)
    if (f.timestamp_s >= newest - config.window_s - 1e-9) grids.push_back(downsample(f, config.grid));
  std::vector<const Grid*> ptrs;
  for (const auto& g : grids) ptrs.push_back(&g);
  return encode_grids(ptrs, config);
}

double difference_energy(const Grid& a, const Grid& b) {
  if (a.size != b.size) fail(ErrorCode::ShapeMismatch, "grid sizes differ");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    const double d = static_cast<double>(a.values[i]) - b.values[i];
    acc += d * d;
  }
  return a.values.empty() ? 0.0 : acc / static_cast<double>(a.values.size());
}

double FlowDetector::threshold_for(double distance_mm) const {
  if (!adjustable || table.empty()) return threshold;
  auto hi = table.lower_bound(distance_mm);
  if (hi == table.end()) return std::prev(hi)->second;
  if (hi == table.begin()) return hi->second;
  auto lo = std::prev(hi);
  return (distance_mm - lo->first <= hi->first - distance_mm) ? lo->second : hi->second;
}

namespace {

// EMA of inter-frame difference energy; entry 0 has no predecessor and stays 0.
class EnergyFilter {
 public:
  explicit EnergyFilter(double alpha) : alpha_(alpha) {}
  double push(const Grid& g) {
    if (have_prev_) {
      const double e = difference_energy(prev_, g);
      ema_ = primed_ ? alpha_ * e + (1.0 - alpha_) * ema_ : e;
      primed_ = true;
    }
    prev_ = g;
    have_prev_ = true;
    return ema_;
  }
  bool primed() const { return primed_; }

 private:
  double alpha_;
  double ema_ = 0.0;
  bool have_prev_ = false;
  bool primed_ = false;
  Grid prev_;
};

std::vector<double> filtered_energy(const Recording& rec, double alpha, std::vector<bool>* primed) {
  EnergyFilter f(alpha);
  std::vector<double> out(rec.frame_count());
  if (primed) primed->assign(rec.frame_count(), false);
  for (int i = 0; i < rec.frame_count(); ++i) {
    out[i] = f.push(rec.grid(i));
    if (primed) (*primed)[i] = f.primed();
  }
  return out;
}

std::vector<BreathState> threshold_labels(const std::vector<double>& energy, const std::vector<bool>& primed,
                                          double threshold) {
  std::vector<BreathState> out(energy.size(), BreathState::Moving);
  for (std::size_t i = 0; i < energy.size(); ++i)
    if (primed[i] && energy[i] < threshold) out[i] = BreathState::Stationary;
  return out;
}

}  // namespace

BreathState classify_of(std::span<const NirFrame> frames, const FlowDetector& detector, int grid) {
  if (frames.size() < 2) fail(ErrorCode::InvalidArgument, "flow detector needs at least two frames");
  EnergyFilter f(detector.alpha);
  double e = 0.0;
  for (const auto& fr : frames) e = f.push(downsample(fr, grid));
  return e < detector.threshold_for(frames.back().distance_mm) ? BreathState::Stationary : BreathState::Moving;
}

// ---------------------------------------------------------------------------

micronet::NetworkSpec motion_cnn_spec(int grid) {
  return {{2, grid, grid},
          {LayerSpec::conv(6, 3, 2), LayerSpec::relu(), LayerSpec::conv(8, 3, 2), LayerSpec::relu(),
           LayerSpec::conv(8, 3, 2), LayerSpec::relu(), LayerSpec::conv(8, 3, 2), LayerSpec::relu(),
           LayerSpec::flatten(), LayerSpec::dense(32), LayerSpec::relu(), LayerSpec::dense(16), LayerSpec::relu(),
           LayerSpec::dense(2), LayerSpec::softmax()}};
}

MotionCnn::MotionCnn() : net_(motion_cnn_spec()) {}

MotionCnn::MotionCnn(micronet::Sequential<float> net) : net_(std::move(net)) {
  if (net_.output_shape() != std::vector<int>{2}) fail(ErrorCode::ShapeMismatch, "motion CNN needs two outputs");
}

namespace {
Tensor<float> encoding_tensor(const MotionEncoding& enc) {
  Tensor<float> x({2, enc.size, enc.size});
  std::copy(enc.history.begin(), enc.history.end(), x.values().begin());
  std::copy(enc.direction.begin(), enc.direction.end(), x.values().begin() + static_cast<std::ptrdiff_t>(enc.history.size()));
  return x;
}
}  // namespace

CnnDecision MotionCnn::classify(const MotionEncoding& enc) const {
  if (static_cast<int>(enc.history.size()) != enc.size * enc.size || enc.direction.size() != enc.history.size())
    fail(ErrorCode::ShapeMismatch, "malformed encoding");
  const auto& in = net_.input_shape();
  if (in.size() != 3 || in[0] != 2 || in[1] != enc.size || in[2] != enc.size)
    fail(ErrorCode::ShapeMismatch, "encoding resolution does not match the network input");
  const Tensor<float> p = net_.forward(encoding_tensor(enc));
  if (p[1] > p[0]) return {BreathState::Stationary, p[1]};
  return {BreathState::Moving, p[0]};
}

void MotionCnn::save(const std::string& path) const { micronet::save_weights<float>(path, micronet::param_ptrs(net_)); }

MotionCnn MotionCnn::load(const std::string& path) {
  const auto tensors = micronet::load_weights<float>(path);
  if (tensors.empty() || tensors.front().shape().size() != 4)
    fail(ErrorCode::ShapeMismatch, "weight file does not hold a motion CNN");
  MotionCnn cnn;
  micronet::assign_params<float>(micronet::param_ptrs(cnn.net_), tensors);
  return cnn;
}

// ---------------------------------------------------------------------------

double orientation_gain(const BenchmarkScene& scene, double orientation_rad) {
  return scene.gain_floor + (1.0 - scene.gain_floor) * std::cos(orientation_rad);
}

std::vector<double> benchmark_orientations(int n) {
  if (n < 1) fail(ErrorCode::InvalidArgument, "need at least one orientation");
  std::vector<double> out;
  if (n == 1) return {0.0};
  for (int i = 0; i < n; ++i) out.push_back(std::numbers::pi * (-0.5 + static_cast<double>(i) / (n - 1)));
  return out;
}

Recording::Recording(const BenchmarkScene& scene, double distance_mm, double orientation_rad, int cycles,
                     std::uint64_t seed)
    : scene_(scene), distance_mm_(distance_mm), orientation_rad_(orientation_rad) {
  if (cycles < 1) fail(ErrorCode::InvalidArgument, "a recording needs at least one cycle");
  scene_.breathing.validate();
  gain_ = orientation_gain(scene_, orientation_rad);
  scene_.camera.gain = gain_;

  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  scene_.breathing.micro_phase_rad = 2.0 * std::numbers::pi * unit(rng);
  const double fps = scene_.encoding.fps;
  const double period = scene_.breathing.period_s;
  const double lead = scene_.encoding.window_s + 1.5 + unit(rng) / fps;
  time_offset_ = period * std::ceil(lead / period) - lead;

  const double plateau = scene_.breathing.plateau_s();
  const double motion = scene_.breathing.motion_s();
  for (int c = 0; c < cycles; ++c) {
    CycleWindow w;
    w.t1 = lead + c * period;
    w.t2 = w.t1 + plateau;
    w.begin = w.t1 - 0.5 * motion;
    w.end = w.t2 + 0.5 * motion;
    cycles_.push_back(w);
  }
  frame_count_ = static_cast<int>(std::ceil(cycles_.back().end * fps)) + 1;

  const TissueGeometry geo = TissueGeometry::standard();
  Point3 lo{1e9, 1e9, 1e9}, hi{-1e9, -1e9, -1e9};
  for (const auto& m : geo.rest_markers) {
    rest_.push_back(m);
    lo = {std::min(lo.x, m.position.x), std::min(lo.y, m.position.y), std::min(lo.z, m.position.z)};
    hi = {std::max(hi.x, m.position.x), std::max(hi.y, m.position.y), std::max(hi.z, m.position.z)};
  }
  center_ = (lo + hi) * 0.5;
  // The camera is fixed relative to the patient, so the breathing axis does
  // not turn with the marker constellation.
  axis_ = scene_.breathing.axis;
}

double Recording::frame_time(int i) const { return i / scene_.encoding.fps; }

double Recording::breath_phase(double t) const {
  const double period = scene_.breathing.period_s;
  double p = std::fmod(t + time_offset_, period);
  if (p < 0.0) p += period;
  return p;
}

MarkerSet Recording::markers_at(double t) const {
  const auto& b = scene_.breathing;
  const double tissue_t = t + time_offset_;
  double d = b.waveform(breath_phase(t));
  d += b.micro_amplitude_mm * std::sin(2.0 * std::numbers::pi * b.micro_frequency_hz * tissue_t + b.micro_phase_rad);
  const double c = std::cos(orientation_rad_), s = std::sin(orientation_rad_);
  std::vector<Marker> out;
  for (const auto& m : rest_) {
    const Point3 r = m.position - center_;
    Marker cur = m;
    cur.position = center_ + Point3{c * r.x - s * r.y, s * r.x + c * r.y, r.z} + axis_ * d;
    out.push_back(cur);
  }
  return MarkerSet(std::move(out));
}

NirFrame Recording::frame(int i) const {
  if (i < 0 || i >= frame_count_) fail(ErrorCode::InvalidArgument, "frame index out of range");
  const double t = frame_time(i);
  const Pose cam(center_ + Point3{0.0, 0.0, distance_mm_}, {0.0, 0.0, -1.0});
  if (scene_.camera.noise_sigma > 0.0) {
    std::mt19937_64 rng(0x9e3779b97f4a7c15ULL ^ (static_cast<std::uint64_t>(i) * 0xbf58476d1ce4e5b9ULL) ^
                        static_cast<std::uint64_t>(scene_.breathing.micro_phase_rad * 1e9));
    return render_markers(markers_at(t), t, cam, scene_.camera, &rng);
  }
  return render_markers(markers_at(t), t, cam, scene_.camera);
}

Grid Recording::grid(int i) const { return downsample(frame(i), scene_.encoding.grid); }

BreathState Recording::truth(int i) const {
  return scene_.breathing.state_at_phase(breath_phase(frame_time(i)));
}

std::vector<BreathState> FlowLabeler::label(const Recording& rec) const {
  std::vector<bool> primed;
  const auto e = filtered_energy(rec, detector_.alpha, &primed);
  return threshold_labels(e, primed, detector_.threshold_for(rec.distance_mm()));
}

std::vector<BreathState> CnnLabeler::label(const Recording& rec) const {
  const int n = rec.scene().encoding.window_frames();
  std::vector<BreathState> out(rec.frame_count(), BreathState::Moving);
  std::deque<Grid> window;
  std::vector<const Grid*> ptrs;
  for (int i = 0; i < rec.frame_count(); ++i) {
    window.push_back(rec.grid(i));
    if (static_cast<int>(window.size()) > n) window.pop_front();
    if (static_cast<int>(window.size()) < n) continue;
    ptrs.clear();
    for (const auto& g : window) ptrs.push_back(&g);
    out[i] = cnn_->classify(encode_grids(ptrs, rec.scene().encoding)).state;
  }
  return out;
}

std::vector<BreathState> OracleLabeler::label(const Recording& rec) const {
  std::vector<BreathState> out(rec.frame_count());
  for (int i = 0; i < rec.frame_count(); ++i) out[i] = rec.truth(i);
  return out;
}

std::vector<BreathState> ConstantLabeler::label(const Recording& rec) const {
  return std::vector<BreathState>(rec.frame_count(), s_);
}

TransitionReport evaluate_transitions(const Recording& rec, std::span<const BreathState> labels, double tolerance_s) {
  if (rec.cycles().empty()) fail(ErrorCode::MissingGroundTruth, "recording has no labeled transitions");
  if (static_cast<int>(labels.size()) != rec.frame_count())
    fail(ErrorCode::InvalidArgument, "one label per frame required");
  TransitionReport rep;
  for (const auto& cyc : rec.cycles()) {
    bool ok = true;
    for (int i = 0; i < rec.frame_count() && ok; ++i) {
      const double t = rec.frame_time(i);
      if (t < cyc.begin || t >= cyc.end) continue;
      if (std::abs(t - cyc.t1) <= tolerance_s || std::abs(t - cyc.t2) <= tolerance_s) continue;
      ok = labels[i] == rec.truth(i);
    }
    rep.cycle_correct.push_back(ok);
    rep.correct += ok ? 1 : 0;
    ++rep.total;
  }
  return rep;
}

TransitionReport evaluate_transitions(const Detector& detector, const Recording& rec, double tolerance_s) {
  if (rec.cycles().empty()) fail(ErrorCode::MissingGroundTruth, "recording has no labeled transitions");
  const auto labels = detector.label(rec);
  return evaluate_transitions(rec, labels, tolerance_s);
}

// ---------------------------------------------------------------------------

double calibrate_threshold(std::span<const Recording> recordings, double alpha) {
  if (recordings.empty()) fail(ErrorCode::InvalidArgument, "calibration needs recordings");
  std::vector<std::vector<double>> energies;
  std::vector<std::vector<bool>> primed;
  double lo = std::numeric_limits<double>::infinity(), hi = 0.0;
  for (const auto& rec : recordings) {
    std::vector<bool> p;
    energies.push_back(filtered_energy(rec, alpha, &p));
    primed.push_back(p);
    for (std::size_t i = 0; i < p.size(); ++i) {
      if (!p[i]) continue;
      const double e = energies.back()[i];
      if (e > 0.0) lo = std::min(lo, e);
      hi = std::max(hi, e);
    }
  }
  if (!(hi > 0.0) || !std::isfinite(lo)) return 1e-12;
  constexpr int steps = 121;
  const double llo = std::log(lo) - 0.5, lhi = std::log(hi) + 0.5;
  std::vector<double> grid(steps);
  std::vector<int> score(steps, 0);
  for (int k = 0; k < steps; ++k) {
    grid[k] = std::exp(llo + (lhi - llo) * k / (steps - 1));
    for (std::size_t r = 0; r < recordings.size(); ++r) {
      const auto labels = threshold_labels(energies[r], primed[r], grid[k]);
      score[k] += evaluate_transitions(recordings[r], labels).correct;
    }
  }
  const int best = *std::max_element(score.begin(), score.end());
  int run_start = -1, run_len = 0, best_start = 0, best_len = 0;
  for (int k = 0; k <= steps; ++k) {
    if (k < steps && score[k] == best) {
      if (run_start < 0) run_start = k;
      run_len = k - run_start + 1;
    } else if (run_start >= 0) {
      if (run_len > best_len) {
        best_start = run_start;
        best_len = run_len;
      }
      run_start = -1;
    }
  }
  const int a = best_start, b = best_start + best_len - 1;
  return std::sqrt(grid[a] * grid[b]);
}

CalibratedFlow calibrate_flow(const BenchmarkConfig& config, std::span<const double> table_distances) {
  CalibratedFlow out;
  const auto orients = benchmark_orientations(config.orientations);
  std::vector<Recording> pooled;
  for (std::size_t j = 0; j < orients.size(); ++j)
    pooled.emplace_back(config.scene, config.oa_calibration_distance_mm, orients[j], config.calibration_cycles,
                        config.seed * 7919 + 100003 + j);
  out.of.threshold = calibrate_threshold(pooled, out.of.alpha);
  out.of.adjustable = false;

  out.oa.adjustable = true;
  for (double d : table_distances) {
    std::vector<Recording> single;
    for (int rep = 0; rep < 3; ++rep)
      single.emplace_back(config.scene, d, 0.0, config.calibration_cycles,
                          config.seed * 104729 + 200003 + static_cast<std::uint64_t>(d * 10) * 7 + rep);
    out.oa.table[d] = calibrate_threshold(single, out.oa.alpha);
  }
  out.oa.threshold = out.oa.table.empty() ? 0.0 : out.oa.table.begin()->second;
  return out;
}

namespace {
struct StoredExample {
  std::vector<std::uint32_t> index;
  std::vector<float> value;
  int cls = 0;  // 0 Moving, 1 Stationary
};

StoredExample store(const MotionEncoding& enc, int cls) {
  StoredExample ex;
  ex.cls = cls;
  const std::size_t n = enc.history.size();
  for (std::size_t i = 0; i < n; ++i) {
    if (enc.history[i] > 1e-6f) {
      ex.index.push_back(static_cast<std::uint32_t>(i));
      ex.value.push_back(enc.history[i]);
    }
    if (enc.direction[i] > 1e-6f) {
      ex.index.push_back(static_cast<std::uint32_t>(n + i));
      ex.value.push_back(enc.direction[i]);
    }
  }
  return ex;
}

bool near_transition(double phase, const BreathingProfile& b, double margin) {
  return phase < margin || b.period_s - phase < margin || std::abs(phase - b.plateau_s()) < margin;
}
}  // namespace

MotionCnn train_motion_cnn(const BenchmarkScene& scene, const CnnTrainConfig& config, CnnTrainStats* stats) {
  if (config.recordings < 1 || config.epochs < 1 || config.batch < 1)
    fail(ErrorCode::InvalidArgument, "training needs recordings, epochs and a batch size");
  std::mt19937_64 rng(config.seed);
  // Log-uniform distance: equal weight per octave of image scale.
  std::uniform_real_distribution<double> log_dist(std::log(config.min_distance_mm), std::log(config.max_distance_mm));
  std::uniform_real_distribution<double> orient(-0.5 * std::numbers::pi, 0.5 * std::numbers::pi);
  const EncodingConfig& ec = scene.encoding;
  const int n = ec.window_frames();

  std::vector<StoredExample> data;
  for (int r = 0; r < config.recordings; ++r) {
    const double d = std::exp(log_dist(rng));
    const double th = orient(rng);
    const Recording rec(scene, d, th, config.cycles_per_recording, rng());
    std::deque<Grid> window;
    std::vector<const Grid*> ptrs;
    const int offset = static_cast<int>(rng() % static_cast<std::uint64_t>(config.stride_frames));
    for (int i = 0; i < rec.frame_count(); ++i) {
      window.push_back(rec.grid(i));
      if (static_cast<int>(window.size()) > n) window.pop_front();
      if (static_cast<int>(window.size()) < n || (i + offset) % config.stride_frames) continue;
      if (near_transition(rec.breath_phase(rec.frame_time(i)), scene.breathing, config.skip_near_transition_s))
        continue;
      ptrs.clear();
      for (const auto& g : window) ptrs.push_back(&g);
      data.push_back(store(encode_grids(ptrs, ec), rec.truth(i) == BreathState::Stationary ? 1 : 0));
    }
  }

  MotionCnn cnn;
  cnn.net().init_he(config.seed ^ 0x5eed);
  micronet::Sgd<float> opt;
  opt.learning_rate = config.learning_rate;
  opt.momentum = config.momentum;

  const std::vector<int> in_shape = cnn.net().input_shape();
  auto materialize = [&](const StoredExample& s) {
    micronet::Example<float> ex{Tensor<float>(in_shape), Tensor<float>({2})};
    for (std::size_t k = 0; k < s.index.size(); ++k) ex.input[s.index[k]] = s.value[k];
    ex.target[s.cls] = 1.0f;
    return ex;
  };

  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  if (stats) {
    stats->examples = data.size();
    stats->epoch_loss.clear();
  }
  std::vector<micronet::Example<float>> batch;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    // cosine decay to a tenth of the base rate
    const double frac = config.epochs > 1 ? static_cast<double>(epoch) / (config.epochs - 1) : 0.0;
    opt.learning_rate = static_cast<float>(config.learning_rate * (0.1 + 0.45 * (1.0 + std::cos(std::numbers::pi * frac))));
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start < order.size(); start += config.batch) {
      batch.clear();
      for (std::size_t k = start; k < std::min(order.size(), start + config.batch); ++k)
        batch.push_back(materialize(data[order[k]]));
      total += micronet::train_step<float>(cnn.net(), batch, opt, micronet::LossKind::CrossEntropy);
      ++batches;
    }
    if (stats) stats->epoch_loss.push_back(batches ? total / batches : 0.0);
  }

  if (stats) {
    int correct = 0;
    for (const auto& s : data) {
      const auto p = cnn.net().forward(materialize(s).input);
      correct += ((p[1] > p[0]) ? 1 : 0) == s.cls;
    }
    stats->train_accuracy = data.empty() ? 0.0 : static_cast<double>(correct) / data.size();
  }
  return cnn;
}

// ---------------------------------------------------------------------------

BenchmarkResult run_motion_benchmark(const BenchmarkConfig& config, std::shared_ptr<const MotionCnn> cnn) {
  if (config.cycles < 1) fail(ErrorCode::InvalidArgument, "benchmark needs at least one cycle");
  if (config.distances_mm.empty()) fail(ErrorCode::InvalidArgument, "benchmark needs at least one distance");
  for (double d : config.distances_mm)
    if (d < config.scene.camera.min_distance_mm || d > config.scene.camera.max_distance_mm)
      fail(ErrorCode::InvalidArgument, "benchmark distance outside the imaging range");

  const std::vector<double> mid{config.oa_calibration_distance_mm};
  const CalibratedFlow flow = calibrate_flow(config, mid);
  BenchmarkResult res;
  res.of_threshold = flow.of.threshold;
  res.oa_table = flow.oa.table;

  std::vector<std::unique_ptr<Detector>> detectors;
  detectors.push_back(std::make_unique<FlowLabeler>("OF", flow.of));
  detectors.push_back(std::make_unique<FlowLabeler>("OA", flow.oa));
  if (cnn) detectors.push_back(std::make_unique<CnnLabeler>(cnn));

  const auto orients = benchmark_orientations(config.orientations);
  std::map<std::string, int> correct;
  for (std::size_t di = 0; di < config.distances_mm.size(); ++di) {
    for (std::size_t oi = 0; oi < orients.size(); ++oi) {
      const std::uint64_t cell_seed = config.seed * 1000003 + di * 1009 + oi;
      const Recording rec(config.scene, config.distances_mm[di], orients[oi], config.cycles, cell_seed);
      for (const auto& det : detectors) {
        const auto rep = evaluate_transitions(*det, rec, config.tolerance_s);
        for (int c = 0; c < rep.total; ++c)
          res.rows.push_back({det->name(), config.distances_mm[di], static_cast<int>(oi), c, rep.cycle_correct[c]});
        correct[det->name()] += rep.correct;
        res.cases[det->name()] += rep.total;
      }
    }
  }
  for (const auto& [name, total] : res.cases) res.accuracy[name] = total ? static_cast<double>(correct[name]) / total : 0.0;
  return res;
}

std::string BenchmarkResult::csv() const {
  std::ostringstream os;
  os << "detector,distance_mm,orientation_idx,cycle_idx,correct\n";
  for (const auto& r : rows)
    os << r.detector << ',' << r.distance_mm << ',' << r.orientation_idx << ',' << r.cycle_idx << ','
       << (r.correct ? 1 : 0) << '\n';
  return os.str();
}

std::string BenchmarkResult::summary_json() const {
  nlohmann::json j;
  j["schema"] = "lapsim.motion_bench";
  j["version"] = 1;
  for (const auto& [name, acc] : accuracy) {
    j["accuracy"][name] = acc;
    j["cases"][name] = cases.at(name);
  }
  j["of_threshold"] = of_threshold;
  nlohmann::json table = nlohmann::json::array();
  for (const auto& [d, t] : oa_table) table.push_back({{"distance_mm", d}, {"threshold", t}});
  j["oa_table"] = table;
  return j.dump(2);
}

// ---------------------------------------------------------------------------

SyncTrigger trigger_time(double t, double d, double v, double period) {
  if (!(v > 0.0)) fail(ErrorCode::NonPositiveVelocity, "average robot velocity must be positive");
  if (!(period > 0.0)) fail(ErrorCode::NonPositivePeriod, "breathing period must be positive");
  if (!(d >= 0.0)) fail(ErrorCode::InvalidArgument, "distance must be non-negative");
  if (!std::isfinite(t) || !std::isfinite(d) || !std::isfinite(v) || !std::isfinite(period))
    fail(ErrorCode::InvalidArgument, "trigger inputs must be finite");
  const double lead = d / v;
  long long n = static_cast<long long>(std::floor((t + lead) / period)) + 1;
  // Floating-point rounding can leave the estimate one off either way.
  while (static_cast<double>(n - 1) * period - lead > t) --n;
  while (static_cast<double>(n) * period - lead <= t) ++n;
  return {t, d, v, period, n, static_cast<double>(n) * period - lead};
}

}  // namespace lapsim
