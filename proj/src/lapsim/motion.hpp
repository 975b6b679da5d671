#pragma once

// Breath-state detection from NIR frames: the two-channel encoding, the
// frame-difference detectors (fixed and distance-indexed threshold), the small
// CNN, the transition benchmark, and the dispatch trigger formula.

#include <cstdint>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "lapsim/micronet.hpp"
#include "lapsim/tissue.hpp"

namespace lapsim {

// A frame box-filtered down to the encoding resolution.
struct Grid {
  int size = 0;
  double timestamp_s = 0.0;
  std::vector<float> values;  // row-major size x size
};

Grid downsample(const NirFrame& frame, int size);

struct EncodingConfig {
  int grid = 128;
  double window_s = 2.0;
  double fps = 20.0;
  // History compositing: each frame is scaled by
  //   floor + (1 - floor) * exp(-age / recency_tau_s)
  // before the per-pixel max, so the recent track stands out from the rest.
  double history_floor = 0.2;
  double recency_tau_s = 0.4;

  int window_frames() const;  // frames spanning the window, inclusive of both ends
};

struct MotionEncoding {
  int size = 0;
  double window_s = 0.0;
  std::vector<float> history;    // [0,1], normalized by its own maximum
  std::vector<float> direction;  // |newest - oldest| over the raw history maximum, [0,1]
};

// Uses the trailing window of `frames` (ascending timestamps). Throws
// WindowTooShort when they span less than the configured window.
MotionEncoding encode(std::span<const NirFrame> frames, const EncodingConfig& config = {});
MotionEncoding encode_grids(std::span<const Grid* const> window, const EncodingConfig& config);

// Mean squared difference between two grids of equal size.
double difference_energy(const Grid& a, const Grid& b);

// Low-pass filtered frame-difference detector.
struct FlowDetector {
  double alpha = 0.2;
  // Fixed threshold (OF) or distance-indexed table (OA). The table lookup uses
  // the nearest calibrated distance.
  double threshold = 0.0;
  std::map<double, double> table;
  bool adjustable = false;

  double threshold_for(double distance_mm) const;
};

// Runs the detector over the whole sequence and returns the state after the
// last frame. Fewer than two frames is an InvalidArgument.
BreathState classify_of(std::span<const NirFrame> frames, const FlowDetector& detector, int grid = 128);

struct CnnDecision {
  BreathState state = BreathState::Moving;
  double confidence = 0.5;
};

// 4 conv + 3 dense layers, two softmax outputs ordered {Moving, Stationary}.
micronet::NetworkSpec motion_cnn_spec(int grid = 128);

class MotionCnn {
 public:
  MotionCnn();
  explicit MotionCnn(micronet::Sequential<float> net);

  // Ties resolve to Moving. Throws ShapeMismatch.
  CnnDecision classify(const MotionEncoding& enc) const;

  micronet::Sequential<float>& net() { return net_; }
  const micronet::Sequential<float>& net() const { return net_; }

  void save(const std::string& path) const;
  static MotionCnn load(const std::string& path);

 private:
  micronet::Sequential<float> net_;
};

// ---------------------------------------------------------------------------
// Benchmark scene and recordings

struct BenchmarkScene {
  CameraModel camera{.width = 256, .height = 256, .focal_px = 150.0};
  EncodingConfig encoding{};
  BreathingProfile breathing{.micro_amplitude_mm = 0.05};
  double gain_floor = 0.35;  // fluorescence gain at a 90 degree marker tilt
};

// gain(theta) = floor + (1 - floor) * cos(theta)
double orientation_gain(const BenchmarkScene& scene, double orientation_rad);
// n evenly spaced orientations over [-90, +90] degrees, in radians.
std::vector<double> benchmark_orientations(int n);

struct CycleWindow {
  double t1 = 0.0;     // Moving -> Stationary
  double t2 = 0.0;     // Stationary -> Moving
  double begin = 0.0;  // half a motion segment before t1
  double end = 0.0;    // half a motion segment after t2
};

// A labeled recording of a marker constellation breathing under the camera.
// Frames are rendered on demand.
class Recording {
 public:
  Recording(const BenchmarkScene& scene, double distance_mm, double orientation_rad, int cycles, std::uint64_t seed);

  int frame_count() const { return frame_count_; }
  double frame_time(int i) const;
  NirFrame frame(int i) const;
  Grid grid(int i) const;
  BreathState truth(int i) const;
  double breath_phase(double t) const;  // seconds into the breathing cycle at recording time t

  double distance_mm() const { return distance_mm_; }
  double orientation_rad() const { return orientation_rad_; }
  const std::vector<CycleWindow>& cycles() const { return cycles_; }
  const BenchmarkScene& scene() const { return scene_; }

  // Recordings built by hand (tests) may drop the ground truth.
  void clear_ground_truth() { cycles_.clear(); }

 private:
  MarkerSet markers_at(double t) const;

  BenchmarkScene scene_;
  double distance_mm_;
  double orientation_rad_;
  double gain_;
  double time_offset_;  // tissue clock = recording clock + offset
  int frame_count_;
  std::vector<CycleWindow> cycles_;
  std::vector<Marker> rest_;
  Point3 center_;
  Point3 axis_;
};

// Per-frame labels for a whole recording.
class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string name() const = 0;
  virtual std::vector<BreathState> label(const Recording& rec) const = 0;
};

class FlowLabeler : public Detector {
 public:
  FlowLabeler(std::string name, FlowDetector detector) : name_(std::move(name)), detector_(std::move(detector)) {}
  std::string name() const override { return name_; }
  std::vector<BreathState> label(const Recording& rec) const override;
  const FlowDetector& detector() const { return detector_; }

 private:
  std::string name_;
  FlowDetector detector_;
};

class CnnLabeler : public Detector {
 public:
  explicit CnnLabeler(std::shared_ptr<const MotionCnn> cnn) : cnn_(std::move(cnn)) {}
  std::string name() const override { return "CNN"; }
  std::vector<BreathState> label(const Recording& rec) const override;

 private:
  std::shared_ptr<const MotionCnn> cnn_;
};

// Ground truth, or a constant output; used to sanity-check the harness.
class OracleLabeler : public Detector {
 public:
  std::string name() const override { return "oracle"; }
  std::vector<BreathState> label(const Recording& rec) const override;
};
class ConstantLabeler : public Detector {
 public:
  explicit ConstantLabeler(BreathState s) : s_(s) {}
  std::string name() const override { return "constant"; }
  std::vector<BreathState> label(const Recording& rec) const override;

 private:
  BreathState s_;
};

struct TransitionReport {
  std::vector<bool> cycle_correct;
  int correct = 0;
  int total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / total : 0.0; }
};

// A cycle counts as correct when every frame in its window that lies more than
// `tolerance_s` from both transitions carries the ground-truth label.
// Throws MissingGroundTruth.
TransitionReport evaluate_transitions(const Recording& rec, std::span<const BreathState> labels,
                                      double tolerance_s = 0.3);
TransitionReport evaluate_transitions(const Detector& detector, const Recording& rec, double tolerance_s = 0.3);

// ---------------------------------------------------------------------------
// Calibration and training

// Picks a threshold on a log grid maximizing total cycle accuracy over the
// recordings; the center of the best contiguous run of grid values wins.
double calibrate_threshold(std::span<const Recording> recordings, double alpha);

struct CnnTrainConfig {
  int recordings = 300;
  int cycles_per_recording = 1;
  int stride_frames = 4;
  int epochs = 10;
  int batch = 16;
  float learning_rate = 0.004f;  // base rate, cosine-decayed to a tenth
  float momentum = 0.9f;
  double min_distance_mm = 30.0;
  double max_distance_mm = 100.0;
  double skip_near_transition_s = 0.1;
  std::uint64_t seed = 2024;
};

struct CnnTrainStats {
  std::size_t examples = 0;
  std::vector<double> epoch_loss;
  double train_accuracy = 0.0;
};

MotionCnn train_motion_cnn(const BenchmarkScene& scene, const CnnTrainConfig& config, CnnTrainStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Benchmark

struct BenchmarkConfig {
  BenchmarkScene scene{};
  std::vector<double> distances_mm{30.0, 65.0, 100.0};
  int orientations = 11;
  int cycles = 5;
  double tolerance_s = 0.3;
  double oa_calibration_distance_mm = 65.0;  // the single table entry used across distances
  int calibration_cycles = 2;
  std::uint64_t seed = 7;
};

struct BenchmarkRow {
  std::string detector;
  double distance_mm = 0.0;
  int orientation_idx = 0;
  int cycle_idx = 0;
  bool correct = false;
};

struct BenchmarkResult {
  std::vector<BenchmarkRow> rows;
  std::map<std::string, double> accuracy;  // detector -> fraction correct
  std::map<std::string, int> cases;
  double of_threshold = 0.0;
  std::map<double, double> oa_table;

  std::string csv() const;
  std::string summary_json() const;
};

struct CalibratedFlow {
  FlowDetector of;  // fixed threshold pooled over orientations at the reference distance
  FlowDetector oa;  // per-distance table calibrated at a single orientation
};
CalibratedFlow calibrate_flow(const BenchmarkConfig& config, std::span<const double> table_distances);

BenchmarkResult run_motion_benchmark(const BenchmarkConfig& config, std::shared_ptr<const MotionCnn> cnn);

// ---------------------------------------------------------------------------
// Breathing-synchronized dispatch

struct SyncTrigger {
  double t = 0.0;
  double d = 0.0;
  double v = 0.0;
  double period = 0.0;
  long long n = 0;
  double trigger = 0.0;
};

// n is the smallest integer with n*T - d/v > t; trigger = n*T - d/v.
// Throws NonPositiveVelocity, NonPositivePeriod, InvalidArgument (d < 0).
SyncTrigger trigger_time(double t, double d, double v, double period);

}  // namespace lapsim
