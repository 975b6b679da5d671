#include "lapsim/landmark.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <random>
#include <limits>
#include <tuple>

#include "json.hpp"
#include "lapsim/error.hpp"

namespace lapsim {

namespace fs = std::filesystem;
using micronet::Tensor;
using micronet::UNet2;

std::size_t BinaryGrid::count() const {
  return static_cast<std::size_t>(std::count(values.begin(), values.end(), std::uint8_t{1}));
}

BinaryGrid binarize(const Map2D& map, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) fail(ErrorCode::InvalidArgument, "threshold must lie in (0, 1)");
  BinaryGrid out(map.height, map.width);
  for (std::size_t i = 0; i < map.values.size(); ++i) out.values[i] = map.values[i] >= threshold ? 1 : 0;
  return out;
}

BinaryGrid largest_cc(const BinaryGrid& grid) {
  const int h = grid.height, w = grid.width;
  std::vector<int> label(grid.values.size(), 0);
  int best_label = 0;
  std::size_t best_size = 0;
  int next = 0;
  std::vector<int> stack;
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c) {
      const int start = r * w + c;
      if (!grid.values[start] || label[start]) continue;
      ++next;
      std::size_t size = 0;
      label[start] = next;
      stack.assign(1, start);
      while (!stack.empty()) {
        const int i = stack.back();
        stack.pop_back();
        ++size;
        const int ir = i / w, ic = i % w;
        const std::array<std::array<int, 2>, 4> nb{{{ir - 1, ic}, {ir + 1, ic}, {ir, ic - 1}, {ir, ic + 1}}};
        for (auto [nr, nc] : nb) {
          if (nr < 0 || nr >= h || nc < 0 || nc >= w) continue;
          const int j = nr * w + nc;
          if (grid.values[j] && !label[j]) {
            label[j] = next;
            stack.push_back(j);
          }
        }
      }
      if (size > best_size) {
        best_size = size;
        best_label = next;
      }
    }
  BinaryGrid out(h, w);
  if (best_label == 0) return out;
  for (std::size_t i = 0; i < label.size(); ++i) out.values[i] = label[i] == best_label ? 1 : 0;
  return out;
}

namespace {

std::vector<Landmark> greedy_peaks(const Map2D& heatmap, const BinaryGrid* mask, int k, const PeakOptions& opt) {
  if (k < 1) fail(ErrorCode::InvalidArgument, "k must be at least 1");
  if (opt.nms_radius < 0) fail(ErrorCode::InvalidArgument, "negative suppression radius");
  if (mask && (mask->height != heatmap.height || mask->width != heatmap.width))
    fail(ErrorCode::ShapeMismatch, "heatmap and mask shapes differ");
  std::vector<int> cand;
  for (int i = 0; i < static_cast<int>(heatmap.values.size()); ++i) {
    if (mask && !mask->values[i]) continue;
    if (heatmap.values[i] >= opt.min_response) cand.push_back(i);
  }
  std::stable_sort(cand.begin(), cand.end(),
                   [&](int a, int b) { return heatmap.values[a] > heatmap.values[b]; });
  std::vector<Landmark> out;
  for (int i : cand) {
    const int r = i / heatmap.width, c = i % heatmap.width;
    bool suppressed = false;
    for (const auto& p : out)
      if (std::abs(p.row - r) <= opt.nms_radius && std::abs(p.col - c) <= opt.nms_radius) {
        suppressed = true;
        break;
      }
    if (suppressed) continue;
    out.push_back({static_cast<double>(r), static_cast<double>(c), heatmap.values[i]});
    if (static_cast<int>(out.size()) == k) break;
  }
  if (static_cast<int>(out.size()) < k && !opt.allow_fewer)
    fail(ErrorCode::FewerPeaksThanRequested,
         "found " + std::to_string(out.size()) + " peaks, requested " + std::to_string(k));
  return out;
}

}  // namespace

std::vector<Landmark> find_peaks(const Map2D& heatmap, int k, const PeakOptions& opt) {
  return greedy_peaks(heatmap, nullptr, k, opt);
}

std::vector<Landmark> masked_peaks(const Map2D& heatmap, const BinaryGrid& mask, int k, const PeakOptions& opt) {
  return greedy_peaks(heatmap, &mask, k, opt);
}

LandmarkErrors landmark_error(const std::vector<Landmark>& predicted, const std::vector<Landmark>& truth,
                              double effective_radius_px) {
  if (predicted.size() != truth.size())
    fail(ErrorCode::CardinalityMismatch, std::to_string(predicted.size()) + " predicted vs " +
                                             std::to_string(truth.size()) + " reference landmarks");
  if (truth.empty()) fail(ErrorCode::InvalidArgument, "no landmarks");
  const std::size_t n = truth.size();
  std::vector<bool> used_p(n, false), used_t(n, false);
  LandmarkErrors e;
  e.distances.assign(n, 0.0);
  for (std::size_t round = 0; round < n; ++round) {
    double best = std::numeric_limits<double>::infinity();
    std::size_t bp = 0, bt = 0;
    for (std::size_t t = 0; t < n; ++t) {
      if (used_t[t]) continue;
      for (std::size_t p = 0; p < n; ++p) {
        if (used_p[p]) continue;
        const double d = std::hypot(predicted[p].row - truth[t].row, predicted[p].col - truth[t].col);
        if (d < best) {
          best = d;
          bp = p;
          bt = t;
        }
      }
    }
    used_p[bp] = used_t[bt] = true;
    e.distances[bt] = best;
  }
  e.mean = std::accumulate(e.distances.begin(), e.distances.end(), 0.0) / static_cast<double>(n);
  e.reference = effective_radius_px;
  e.pass = e.mean < effective_radius_px;
  return e;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

std::vector<const LandmarkFrame*> LandmarkDataset::train() const {
  std::vector<const LandmarkFrame*> out;
  for (const auto& f : frames)
    if (f.serial % 2 == 1) out.push_back(&f);
  return out;
}

std::vector<const LandmarkFrame*> LandmarkDataset::test() const {
  std::vector<const LandmarkFrame*> out;
  for (const auto& f : frames)
    if (f.serial % 2 == 0) out.push_back(&f);
  return out;
}

namespace {

struct Vec2 {
  double x, y;
};

// Convex quadrilateral, corners counter-clockwise in (x, y).
bool inside_quad(const std::array<Vec2, 4>& q, double x, double y) {
  for (int i = 0; i < 4; ++i) {
    const Vec2 a = q[i], b = q[(i + 1) % 4];
    if ((b.x - a.x) * (y - a.y) - (b.y - a.y) * (x - a.x) < 0.0) return false;
  }
  return true;
}

double dist_to_quad(const std::array<Vec2, 4>& q, double x, double y) {
  if (inside_quad(q, x, y)) return 0.0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < 4; ++i) {
    const Vec2 a = q[i], b = q[(i + 1) % 4];
    const double dx = b.x - a.x, dy = b.y - a.y;
    const double t = std::clamp(((x - a.x) * dx + (y - a.y) * dy) / (dx * dx + dy * dy), 0.0, 1.0);
    best = std::min(best, std::hypot(x - a.x - t * dx, y - a.y - t * dy));
  }
  return best;
}

void render_heatmap(LandmarkFrame& f, double sigma) {
  f.heatmap = Map2D(f.image.height, f.image.width);
  for (int r = 0; r < f.heatmap.height; ++r)
    for (int c = 0; c < f.heatmap.width; ++c) {
      double v = 0.0;
      for (const auto& p : f.landmarks) {
        const double d2 = (r - p.row) * (r - p.row) + (c - p.col) * (c - p.col);
        v = std::max(v, std::exp(-d2 / (2.0 * sigma * sigma)));
      }
      f.heatmap.at(r, c) = static_cast<float>(v);
    }
}

}  // namespace

LandmarkDataset make_synthetic_dataset(const SyntheticOptions& opt) {
  if (opt.frames < 1 || opt.size < 32 || opt.corner_radius_px <= 0.0)
    fail(ErrorCode::InvalidArgument, "bad synthetic dataset options");
  std::mt19937_64 rng(opt.seed);
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 0.04);
  auto uni = [&](double a, double b) { return a + (b - a) * u01(rng); };
  const int S = opt.size;
  const double scale = S / 64.0;

  LandmarkDataset ds;
  ds.size = S;
  double area_sum = 0.0;
  int area_n = 0;
  for (int serial = 1; serial <= opt.frames; ++serial) {
    LandmarkFrame f;
    f.serial = serial;
    std::array<Vec2, 4> q{};
    for (;;) {
      const double cx = S / 2.0 + uni(-4, 4) * scale, cy = S / 2.0 + uni(-4, 4) * scale;
      const double a = uni(15, 21) * scale, b = uni(8, 13) * scale, th = uni(-0.5, 0.5);
      const std::array<Vec2, 4> local{{{-a, -b}, {a, -b}, {a, b}, {-a, b}}};
      bool ok = true;
      for (int i = 0; i < 4; ++i) {
        const double jx = uni(-2, 2) * scale, jy = uni(-2, 2) * scale;
        q[i] = {cx + std::cos(th) * local[i].x - std::sin(th) * local[i].y + jx,
                cy + std::sin(th) * local[i].x + std::cos(th) * local[i].y + jy};
        if (q[i].x < 4 || q[i].y < 4 || q[i].x > S - 5 || q[i].y > S - 5) ok = false;
      }
      if (ok) break;
    }

    // Tissue: 2x2 supersampled coverage, low-frequency texture.
    f.image = Map2D(S, S);
    f.mask = BinaryGrid(S, S);
    const double ph1 = uni(0, 6.28), ph2 = uni(0, 6.28), base = uni(0.6, 0.75);
    for (int r = 0; r < S; ++r)
      for (int c = 0; c < S; ++c) {
        double cov = 0.0;
        for (double dy : {-0.25, 0.25})
          for (double dx : {-0.25, 0.25}) cov += inside_quad(q, c + dx, r + dy) ? 0.25 : 0.0;
        f.mask.at(r, c) = inside_quad(q, c, r) ? 1 : 0;
        const double tissue = base + 0.08 * std::sin(0.6 * c + ph1) * std::sin(0.5 * r + ph2);
        const double v = cov * tissue + (1.0 - cov) * 0.15 + noise(rng);
        f.image.at(r, c) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }

    // Bright square blobs off the tissue, for the mask to reject.
    if (opt.blob_every > 0 && serial % opt.blob_every == 0) {
      for (int b = 0; b < 2; ++b) {
        const int side = static_cast<int>(uni(4, 7) * scale);
        for (int attempt = 0; attempt < 400; ++attempt) {
          const double cx = uni(side, S - side - 1), cy = uni(side, S - side - 1);
          bool clear = dist_to_quad(q, cx, cy) > side + 4.0;
          for (const auto& o : f.background)
            if (std::hypot(o.col - cx, o.row - cy) < 2.0 * side + 2.0) clear = false;
          if (!clear) continue;
          const int r0 = static_cast<int>(std::lround(cy)) - side / 2, c0 = static_cast<int>(std::lround(cx)) - side / 2;
          const double level = uni(0.6, 0.8);
          for (int r = r0; r < r0 + side; ++r)
            for (int c = c0; c < c0 + side; ++c)
              f.image.at(r, c) = static_cast<float>(std::clamp(level + noise(rng), 0.0, 1.0));
          f.background.push_back({r0 + (side - 1) / 2.0, c0 + (side - 1) / 2.0, 0.0});
          break;
        }
      }
    }

    // Corner segments and their centroids.
    const double rc = opt.corner_radius_px * scale;
    for (const auto& corner : q) {
      double sr = 0.0, sc = 0.0;
      int n = 0;
      for (int r = 0; r < S; ++r)
        for (int c = 0; c < S; ++c)
          if (f.mask.at(r, c) && std::hypot(c - corner.x, r - corner.y) <= rc) {
            sr += r;
            sc += c;
            ++n;
          }
      if (n == 0) fail(ErrorCode::DegenerateGeometry, "empty corner segment");
      f.landmarks.push_back({sr / n, sc / n, 1.0});
      area_sum += n;
      ++area_n;
    }
    ds.frames.push_back(std::move(f));
  }
  ds.effective_radius_px = std::sqrt(area_sum / area_n / M_PI);
  for (auto& f : ds.frames) render_heatmap(f, ds.effective_radius_px / 2.0);
  return ds;
}

// ---------------------------------------------------------------------------
// Dataset directory

namespace {

void write_pgm(const fs::path& path, int h, int w, const std::vector<double>& v01) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::IoError, "cannot write " + path.string());
  out << "P5\n" << w << " " << h << "\n65535\n";
  for (double x : v01) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(x, 0.0, 1.0) * 65535.0));
    const char be[2] = {static_cast<char>(q >> 8), static_cast<char>(q & 0xff)};
    out.write(be, 2);
  }
  if (!out) fail(ErrorCode::IoError, "short write to " + path.string());
}

std::vector<double> read_pgm(const fs::path& path, int h, int w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoError, "cannot read " + path.string());
  std::string magic;
  int fw = 0, fh = 0, maxval = 0;
  in >> magic >> fw >> fh >> maxval;
  in.get();
  if (magic != "P5" || fw != w || fh != h || maxval != 65535)
    fail(ErrorCode::InvalidArgument, path.string() + ": expected a " + std::to_string(w) + "x" + std::to_string(h) +
                                         " 16-bit PGM");
  std::vector<double> out(static_cast<std::size_t>(h) * w);
  for (auto& x : out) {
    unsigned char be[2];
    in.read(reinterpret_cast<char*>(be), 2);
    if (!in) fail(ErrorCode::IoError, path.string() + ": truncated");
    x = ((be[0] << 8) | be[1]) / 65535.0;
  }
  return out;
}

nlohmann::json points_json(const std::vector<Landmark>& pts) {
  auto a = nlohmann::json::array();
  for (const auto& p : pts) a.push_back({p.row, p.col});
  return a;
}

std::vector<Landmark> points_from(const nlohmann::json& j) {
  std::vector<Landmark> out;
  for (const auto& p : j) out.push_back({p.at(0).get<double>(), p.at(1).get<double>(), 1.0});
  return out;
}

}  // namespace

void save_dataset(const LandmarkDataset& ds, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir + ": " + ec.message());
  nlohmann::json idx{{"schema", "lapsim.landmarks"},
                     {"version", 1},
                     {"size", ds.size},
                     {"effective_radius_px", ds.effective_radius_px},
                     {"frames", nlohmann::json::array()}};
  for (const auto& f : ds.frames) {
    char stem[32];
    std::snprintf(stem, sizeof stem, "%03d", f.serial);
    const std::string image = std::string("image_") + stem + ".pgm", mask = std::string("mask_") + stem + ".pgm",
                      heat = std::string("heatmap_") + stem + ".pgm";
    write_pgm(fs::path(dir) / image, ds.size, ds.size, {f.image.values.begin(), f.image.values.end()});
    write_pgm(fs::path(dir) / mask, ds.size, ds.size, {f.mask.values.begin(), f.mask.values.end()});
    write_pgm(fs::path(dir) / heat, ds.size, ds.size, {f.heatmap.values.begin(), f.heatmap.values.end()});
    idx["frames"].push_back({{"serial", f.serial},
                             {"image", image},
                             {"mask", mask},
                             {"heatmap", heat},
                             {"landmarks", points_json(f.landmarks)},
                             {"background", points_json(f.background)}});
  }
  std::ofstream out(fs::path(dir) / "index.json");
  out << idx.dump(1) << "\n";
  if (!out) fail(ErrorCode::IoError, "cannot write index.json in " + dir);
}

LandmarkDataset load_dataset(const std::string& dir) {
  std::ifstream in(fs::path(dir) / "index.json");
  if (!in) fail(ErrorCode::IoError, "no index.json in " + dir);
  LandmarkDataset ds;
  try {
    const auto idx = nlohmann::json::parse(in);
    if (idx.at("schema") != "lapsim.landmarks" || idx.at("version") != 1)
      fail(ErrorCode::InvalidArgument, dir + ": not a landmark dataset index");
    ds.size = idx.at("size").get<int>();
    ds.effective_radius_px = idx.at("effective_radius_px").get<double>();
    for (const auto& jf : idx.at("frames")) {
      LandmarkFrame f;
      f.serial = jf.at("serial").get<int>();
      const int S = ds.size;
      const auto img = read_pgm(fs::path(dir) / jf.at("image").get<std::string>(), S, S);
      const auto msk = read_pgm(fs::path(dir) / jf.at("mask").get<std::string>(), S, S);
      const auto hm = read_pgm(fs::path(dir) / jf.at("heatmap").get<std::string>(), S, S);
      f.image = Map2D(S, S);
      f.heatmap = Map2D(S, S);
      f.mask = BinaryGrid(S, S);
      for (std::size_t i = 0; i < img.size(); ++i) {
        f.image.values[i] = static_cast<float>(img[i]);
        f.heatmap.values[i] = static_cast<float>(hm[i]);
        f.mask.values[i] = msk[i] >= 0.5 ? 1 : 0;
      }
      f.landmarks = points_from(jf.at("landmarks"));
      f.background = points_from(jf.value("background", nlohmann::json::array()));
      ds.frames.push_back(std::move(f));
    }
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::InvalidArgument, dir + "/index.json: " + e.what());
  }
  return ds;
}

// ---------------------------------------------------------------------------
// Cascade

namespace {

Tensor<float> to_tensor(const std::vector<const Map2D*>& channels) {
  const int h = channels[0]->height, w = channels[0]->width;
  Tensor<float> t({static_cast<int>(channels.size()), h, w});
  for (std::size_t c = 0; c < channels.size(); ++c)
    std::copy(channels[c]->values.begin(), channels[c]->values.end(),
              t.values().begin() + static_cast<std::ptrdiff_t>(c * channels[c]->values.size()));
  return t;
}

Map2D from_tensor(const Tensor<float>& t) {
  Map2D m(t.dim(1), t.dim(2));
  std::copy(t.values().begin(), t.values().begin() + static_cast<std::ptrdiff_t>(m.values.size()), m.values.begin());
  return m;
}

Map2D mask_map(const BinaryGrid& g) {
  Map2D m(g.height, g.width);
  for (std::size_t i = 0; i < g.values.size(); ++i) m.values[i] = g.values[i];
  return m;
}

// One of the eight square symmetries: k % 4 quarter turns, then a mirror when k >= 4.
std::array<int, 2> dihedral(int r, int c, int n, int k) {
  for (int i = 0; i < k % 4; ++i) std::tie(r, c) = std::make_tuple(c, n - 1 - r);
  if (k >= 4) c = n - 1 - c;
  return {r, c};
}

Map2D transform(const Map2D& m, int k) {
  Map2D out(m.height, m.width);
  for (int r = 0; r < m.height; ++r)
    for (int c = 0; c < m.width; ++c) {
      const auto [r2, c2] = dihedral(r, c, m.height, k);
      out.at(r2, c2) = m.at(r, c);
    }
  return out;
}

using Pair = micronet::Example<float>;

double train_net(UNet2<float>& net, const std::vector<Pair>& data, int epochs, const CascadeOptions& opt,
                 std::mt19937_64& rng, std::vector<double>* losses) {
  micronet::Sgd<float> sgd{opt.learning_rate, opt.momentum, {}};
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  double last = 0.0;
  for (int e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    double total = 0.0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(opt.batch)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(opt.batch));
      auto grads = net.zero_gradients();
      for (std::size_t i = b0; i < b1; ++i) {
        const auto& ex = data[order[i]];
        UNet2<float>::Cache cache;
        const auto pred = net.forward(ex.input, cache);
        Tensor<float> g;
        total += micronet::loss_bce(pred, ex.target, &g);
        const float inv = 1.0f / static_cast<float>(b1 - b0);
        for (auto& v : g.values()) v *= inv;
        net.backward(cache, g, grads);
      }
      sgd.step(net.params(), grads);
    }
    last = total / static_cast<double>(data.size());
    if (losses) losses->push_back(last);
  }
  return last;
}

}  // namespace

LandmarkCascade::LandmarkCascade(int size, const CascadeOptions& opt)
    : size_(size), opt_(opt), seg_(1, size, size, opt.base_channels), lm_(2, size, size, opt.base_channels) {}

Map2D LandmarkCascade::segment(const Map2D& image) const {
  if (!trained_) fail(ErrorCode::MissingWeights, "cascade has no weights; train or load first");
  return from_tensor(seg_.forward(to_tensor({&image})));
}

Map2D LandmarkCascade::heatmap(const Map2D& image, const Map2D& soft_mask) const {
  if (!trained_) fail(ErrorCode::MissingWeights, "cascade has no weights; train or load first");
  return from_tensor(lm_.forward(to_tensor({&image, &soft_mask})));
}

CascadePrediction LandmarkCascade::predict(const Map2D& image) const {
  CascadePrediction p;
  p.soft_mask = segment(image);
  p.mask = largest_cc(binarize(p.soft_mask, opt_.mask_threshold));
  p.heatmap = heatmap(image, p.soft_mask);
  p.landmarks = masked_peaks(p.heatmap, p.mask, opt_.landmarks_per_frame, opt_.peaks);
  return p;
}

void LandmarkCascade::save(const std::string& dir) const {
  if (!trained_) fail(ErrorCode::MissingWeights, "nothing to save");
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoError, "cannot create " + dir + ": " + ec.message());
  micronet::save_weights<float>((fs::path(dir) / "seg.mnw").string(), seg_.params());
  micronet::save_weights<float>((fs::path(dir) / "landmark.mnw").string(), lm_.params());
  std::ofstream meta(fs::path(dir) / "cascade.json");
  meta << nlohmann::json{{"size", size_}, {"base_channels", opt_.base_channels}, {"mask_threshold", opt_.mask_threshold}}
              .dump(1)
       << "\n";
  if (!meta) fail(ErrorCode::IoError, "cannot write cascade.json in " + dir);
}

void LandmarkCascade::load(const std::string& dir) {
  const fs::path seg = fs::path(dir) / "seg.mnw", lm = fs::path(dir) / "landmark.mnw";
  if (!fs::exists(seg) || !fs::exists(lm)) fail(ErrorCode::MissingWeights, "no cascade weights in " + dir);
  std::ifstream meta(fs::path(dir) / "cascade.json");
  if (meta) {
    try {
      const auto j = nlohmann::json::parse(meta);
      const int size = j.value("size", size_);
      opt_.base_channels = j.value("base_channels", opt_.base_channels);
      opt_.mask_threshold = j.value("mask_threshold", opt_.mask_threshold);
      *this = LandmarkCascade(size, opt_);
    } catch (const nlohmann::json::exception& e) {
      fail(ErrorCode::InvalidArgument, "cascade.json: " + std::string(e.what()));
    }
  }
  if (size_ == 0) fail(ErrorCode::InvalidArgument, "cascade size unknown");
  const auto ws = micronet::load_weights<float>(seg.string());
  const auto wl = micronet::load_weights<float>(lm.string());
  micronet::assign_params<float>(seg_.params(), ws);
  micronet::assign_params<float>(lm_.params(), wl);
  trained_ = true;
}

LandmarkCascade train_cascade(const LandmarkDataset& ds, const CascadeOptions& opt, CascadeTrainLog* log) {
  const auto train = ds.train();
  if (train.size() < 4)
    fail(ErrorCode::DatasetTooSmall, std::to_string(train.size()) + " training frames; at least 4 required");
  if (opt.batch < 1 || opt.augmentations < 1 || opt.augmentations > 8 || opt.seg_epochs < 0 || opt.landmark_epochs < 0)
    fail(ErrorCode::InvalidArgument, "bad training options");
  LandmarkCascade net(ds.size, opt);
  net.seg_net().init_he(opt.seed);
  net.landmark_net().init_he(opt.seed + 1);
  std::mt19937_64 rng(opt.seed);

  struct Aug {
    Map2D image, mask, heat;
  };
  std::vector<Aug> aug;
  for (const auto* f : train)
    for (int k = 0; k < opt.augmentations; ++k) aug.push_back({transform(f->image, k), transform(mask_map(f->mask), k), transform(f->heatmap, k)});

  std::vector<Pair> seg_data;
  for (const auto& a : aug) seg_data.push_back({to_tensor({&a.image}), to_tensor({&a.mask})});
  train_net(net.seg_net(), seg_data, opt.seg_epochs, opt, rng, log ? &log->seg_loss : nullptr);

  // The second stage sees the first stage's soft mask, as at inference.
  std::vector<Pair> lm_data;
  for (const auto& a : aug) {
    const Map2D soft = from_tensor(net.seg_net().forward(to_tensor({&a.image})));
    lm_data.push_back({to_tensor({&a.image, &soft}), to_tensor({&a.heat})});
  }
  train_net(net.landmark_net(), lm_data, opt.landmark_epochs, opt, rng, log ? &log->landmark_loss : nullptr);
  net.mark_trained();
  return net;
}

CascadeEvaluation evaluate_cascade(const LandmarkCascade& net, const std::vector<const LandmarkFrame*>& frames,
                                   double effective_radius_px) {
  if (frames.empty()) fail(ErrorCode::InvalidArgument, "no frames to evaluate");
  CascadeEvaluation ev;
  ev.effective_radius_px = effective_radius_px;
  PeakOptions lenient = net.options().peaks;
  lenient.allow_fewer = true;
  std::vector<double> all;
  int within = 0;
  for (const auto* f : frames) {
    const Map2D soft = net.segment(f->image);
    const BinaryGrid mask = largest_cc(binarize(soft, net.options().mask_threshold));
    Map2D heat = net.heatmap(f->image, soft);
    const int k = static_cast<int>(f->landmarks.size());
    auto pred = masked_peaks(heat, mask, k, lenient);
    // A missing peak costs the image size.
    std::vector<double> d;
    if (!pred.empty()) {
      std::vector<Landmark> truth_sub = f->landmarks;
      if (pred.size() < truth_sub.size()) {
        // keep the truth points nearest to some prediction
        std::vector<std::pair<double, std::size_t>> nearest;
        for (std::size_t t = 0; t < truth_sub.size(); ++t) {
          double m = std::numeric_limits<double>::infinity();
          for (const auto& p : pred) m = std::min(m, std::hypot(p.row - truth_sub[t].row, p.col - truth_sub[t].col));
          nearest.push_back({m, t});
        }
        std::sort(nearest.begin(), nearest.end());
        std::vector<Landmark> kept;
        for (std::size_t i = 0; i < pred.size(); ++i) kept.push_back(truth_sub[nearest[i].second]);
        truth_sub = kept;
      }
      d = landmark_error(pred, truth_sub, effective_radius_px).distances;
    }
    while (d.size() < f->landmarks.size()) d.push_back(static_cast<double>(heat.height));
    const double m = std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
    ev.frame_mean_error.push_back(m);
    if (m < effective_radius_px) ++within;
    all.insert(all.end(), d.begin(), d.end());

    for (const auto& p : find_peaks(heat, 64, lenient))
      if (!mask.at(static_cast<int>(p.row), static_cast<int>(p.col))) ++ev.raw_background_peaks;
    if (!f->background.empty()) {
      for (const auto& b : f->background) {
        for (int r = 0; r < heat.height; ++r)
          for (int c = 0; c < heat.width; ++c) {
            const double d2 = (r - b.row) * (r - b.row) + (c - b.col) * (c - b.col);
            heat.at(r, c) = std::max(heat.at(r, c), static_cast<float>(std::exp(-d2 / 8.0)));
          }
        ++ev.injected_background_peaks;
      }
      for (const auto& p : masked_peaks(heat, mask, k + static_cast<int>(f->background.size()), lenient))
        for (const auto& b : f->background)
          if (std::hypot(p.row - b.row, p.col - b.col) <= 3.0) ++ev.surviving_background_peaks;
    }
  }
  ev.mean_error = std::accumulate(all.begin(), all.end(), 0.0) / static_cast<double>(all.size());
  double ss = 0.0;
  for (double x : all) ss += (x - ev.mean_error) * (x - ev.mean_error);
  ev.sd_error = all.size() > 1 ? std::sqrt(ss / static_cast<double>(all.size() - 1)) : 0.0;
  ev.fraction_within_radius = static_cast<double>(within) / static_cast<double>(frames.size());
  ev.pass = ev.mean_error < effective_radius_px;
  return ev;
}

}  // namespace lapsim
