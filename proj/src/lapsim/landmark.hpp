#pragma once

// Corner landmarks on the tissue image: post-processing of segmentation and
// heatmap outputs, a synthetic labelled dataset, and the two-stage cascade
// (tissue segmentation, then landmark heatmap on image + predicted mask).

#include <cstdint>
#include <string>
#include <vector>

#include "lapsim/micronet.hpp"

namespace lapsim {

struct Map2D {
  int height = 0;
  int width = 0;
  std::vector<float> values;

  Map2D() = default;
  Map2D(int h, int w, float fill = 0.0f) : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}
  float& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  float at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
};

struct BinaryGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;

  BinaryGrid() = default;
  BinaryGrid(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}
  std::uint8_t& at(int r, int c) { return values[static_cast<std::size_t>(r) * width + c]; }
  std::uint8_t at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
  std::size_t count() const;
  bool operator==(const BinaryGrid&) const = default;
};

// value >= threshold -> 1. Threshold must lie in (0, 1) (InvalidArgument).
BinaryGrid binarize(const Map2D& map, double threshold);
// Largest 4-connected foreground component; ties go to the component met
// first in row-major order. Empty input gives an empty grid.
BinaryGrid largest_cc(const BinaryGrid& grid);

struct Landmark {
  double row = 0.0;
  double col = 0.0;
  double response = 0.0;
};

struct PeakOptions {
  int nms_radius = 5;         // Chebyshev suppression radius, pixels
  double min_response = 0.1;  // peaks below this are ignored
  bool allow_fewer = false;   // otherwise FewerPeaksThanRequested
};

// Local maxima in descending response order with greedy suppression.
std::vector<Landmark> find_peaks(const Map2D& heatmap, int k, const PeakOptions& opt = {});
// Same, restricted to mask == 1. Never returns a masked-out pixel.
// Throws ShapeMismatch, InvalidArgument (k < 1), FewerPeaksThanRequested.
std::vector<Landmark> masked_peaks(const Map2D& heatmap, const BinaryGrid& mask, int k, const PeakOptions& opt = {});

struct LandmarkErrors {
  std::vector<double> distances;  // per truth point after greedy matching
  double mean = 0.0;
  double reference = 0.0;         // effective radius the mean is judged against
  bool pass = false;              // mean < reference
};

// Greedy nearest matching (globally closest pair first). Throws
// CardinalityMismatch when the sets differ in size, InvalidArgument if empty.
LandmarkErrors landmark_error(const std::vector<Landmark>& predicted, const std::vector<Landmark>& truth,
                              double effective_radius_px);

// ---------------------------------------------------------------------------

struct LandmarkFrame {
  int serial = 0;
  Map2D image;                          // grey, [0, 1]
  BinaryGrid mask;                      // tissue
  Map2D heatmap;                        // max of corner Gaussians
  std::vector<Landmark> landmarks;      // corner-segment centroids
  std::vector<Landmark> background;     // centres of bright non-tissue blobs
};

struct LandmarkDataset {
  int size = 64;
  double effective_radius_px = 0.0;  // sqrt(mean corner-segment area / pi)
  std::vector<LandmarkFrame> frames;

  // Odd serials train, even serials test.
  std::vector<const LandmarkFrame*> train() const;
  std::vector<const LandmarkFrame*> test() const;
};

struct SyntheticOptions {
  int frames = 50;
  int size = 64;
  std::uint64_t seed = 7;
  double corner_radius_px = 10.0;  // corner segment = tissue within this of a corner
  int blob_every = 3;              // every n-th serial carries background blobs
};

LandmarkDataset make_synthetic_dataset(const SyntheticOptions& opt = {});

// Directory layout: index.json plus image_NNN.pgm, mask_NNN.pgm, heatmap_NNN.pgm
// (16-bit binary PGM). Throws IoError.
void save_dataset(const LandmarkDataset& ds, const std::string& dir);
// Throws IoError, InvalidArgument.
LandmarkDataset load_dataset(const std::string& dir);

// ---------------------------------------------------------------------------

struct CascadeOptions {
  int base_channels = 8;
  int seg_epochs = 10;
  int landmark_epochs = 24;
  int batch = 8;
  int augmentations = 4;  // square symmetries applied to each training frame, 1..8
  float learning_rate = 0.05f;
  float momentum = 0.9f;
  std::uint64_t seed = 11;
  double mask_threshold = 0.5;
  int landmarks_per_frame = 4;
  PeakOptions peaks{};
};

struct CascadeTrainLog {
  std::vector<double> seg_loss;       // mean training loss per epoch
  std::vector<double> landmark_loss;
};

struct CascadePrediction {
  Map2D soft_mask;
  BinaryGrid mask;                   // binarized, largest component
  Map2D heatmap;
  std::vector<Landmark> landmarks;   // masked peaks
};

class LandmarkCascade {
 public:
  LandmarkCascade() = default;
  LandmarkCascade(int size, const CascadeOptions& opt);

  bool has_weights() const { return trained_; }
  int size() const { return size_; }
  const CascadeOptions& options() const { return opt_; }

  // Deterministic. Throws MissingWeights before training or loading.
  Map2D segment(const Map2D& image) const;
  Map2D heatmap(const Map2D& image, const Map2D& soft_mask) const;
  CascadePrediction predict(const Map2D& image) const;

  // Two micronet weight files: seg.mnw and landmark.mnw. Throws IoError.
  void save(const std::string& dir) const;
  // Throws MissingWeights when either file is absent, ShapeMismatch on a
  // different architecture.
  void load(const std::string& dir);

  micronet::UNet2<float>& seg_net() { return seg_; }
  micronet::UNet2<float>& landmark_net() { return lm_; }
  void mark_trained() { trained_ = true; }

 private:
  int size_ = 0;
  CascadeOptions opt_{};
  micronet::UNet2<float> seg_, lm_;
  bool trained_ = false;
};

// Trains on the odd-serial frames. Throws DatasetTooSmall below 4 training
// frames.
LandmarkCascade train_cascade(const LandmarkDataset& ds, const CascadeOptions& opt = {},
                              CascadeTrainLog* log = nullptr);

struct CascadeEvaluation {
  std::vector<double> frame_mean_error;  // per frame
  double mean_error = 0.0;
  double sd_error = 0.0;
  double effective_radius_px = 0.0;
  double fraction_within_radius = 0.0;
  bool pass = false;                     // mean_error < effective radius
  int raw_background_peaks = 0;          // raw heatmap peaks outside the predicted mask
  int injected_background_peaks = 0;
  int surviving_background_peaks = 0;    // after masking; should be 0
};

// Evaluates on the given frames. Background peaks are counted on the raw
// heatmap and on a copy with a strong bump injected at every blob centre.
CascadeEvaluation evaluate_cascade(const LandmarkCascade& net, const std::vector<const LandmarkFrame*>& frames,
                                   double effective_radius_px);

}  // namespace lapsim
