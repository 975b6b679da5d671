#include "lapsim/micronet.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "lapsim/error.hpp"

namespace lapsim::micronet {

std::size_t shape_size(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d <= 0) fail(ErrorCode::ShapeMismatch, "tensor dimensions must be positive");
    n *= static_cast<std::size_t>(d);
  }
  return shape.empty() ? 0 : n;
}

template <typename T>
Tensor<T>::Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

template <typename T>
Tensor<T>::Tensor(std::vector<int> shape, std::vector<T> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_)) fail(ErrorCode::ShapeMismatch, "value count does not match shape");
}

template <typename T>
void Tensor<T>::reshape(std::vector<int> shape) {
  if (shape_size(shape) != data_.size()) fail(ErrorCode::ShapeMismatch, "reshape changes element count");
  shape_ = std::move(shape);
}

template <typename T>
void Tensor<T>::fill(T v) {
  std::fill(data_.begin(), data_.end(), v);
}

template <typename T>
bool Tensor<T>::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](T v) { return std::isfinite(v); });
}

LayerSpec LayerSpec::conv(int out_channels, int kernel, int stride, Padding padding) {
  LayerSpec s{LayerKind::Conv2D};
  s.out_channels = out_channels;
  s.kernel = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::dense(int units) {
  LayerSpec s{LayerKind::Dense};
  s.units = units;
  return s;
}

namespace {

struct ConvGeom {
  int in_c, in_h, in_w, out_c, out_h, out_w, k, stride, pad_t, pad_l;
};

ConvGeom conv_geom(const LayerSpec& l, const std::vector<int>& in) {
  ConvGeom g{};
  g.in_c = in[0];
  g.in_h = in[1];
  g.in_w = in[2];
  g.out_c = l.out_channels;
  g.k = l.kernel;
  g.stride = l.stride;
  if (l.padding == Padding::Same) {
    g.out_h = (g.in_h + g.stride - 1) / g.stride;
    g.out_w = (g.in_w + g.stride - 1) / g.stride;
    g.pad_t = std::max((g.out_h - 1) * g.stride + g.k - g.in_h, 0) / 2;
    g.pad_l = std::max((g.out_w - 1) * g.stride + g.k - g.in_w, 0) / 2;
  } else {
    g.out_h = (g.in_h - g.k) / g.stride + 1;
    g.out_w = (g.in_w - g.k) / g.stride + 1;
    g.pad_t = g.pad_l = 0;
  }
  return g;
}

// Output columns ox whose input column ox*stride + kx - pad_l lies in [0, in_w).
inline void col_range(const ConvGeom& g, int kx, int* lo, int* hi) {
  const int a = g.pad_l - kx;  // need ox*stride >= a
  int l = a <= 0 ? 0 : (a + g.stride - 1) / g.stride;
  const int b = g.in_w - 1 + g.pad_l - kx;  // need ox*stride <= b
  int h = b < 0 ? -1 : b / g.stride;
  *lo = l;
  *hi = std::min(h, g.out_w - 1);
}

template <typename T>
void conv_forward(const ConvGeom& g, const T* x, const T* w, const T* b, T* y) {
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int oc = 0; oc < g.out_c; ++oc) {
    T* yo = y + oc * plane;
    std::fill(yo, yo + plane, b[oc]);
    for (int ic = 0; ic < g.in_c; ++ic) {
      const T* xi = x + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const T wv = w[((static_cast<std::size_t>(oc) * g.in_c + ic) * g.k + ky) * g.k + kx];
          int lo, hi;
          col_range(g, kx, &lo, &hi);
          if (lo > hi) continue;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride + ky - g.pad_t;
            if (iy < 0 || iy >= g.in_h) continue;
            const T* xr = xi + static_cast<std::size_t>(iy) * g.in_w + (kx - g.pad_l);
            T* yr = yo + static_cast<std::size_t>(oy) * g.out_w;
            if (g.stride == 1) {
              for (int ox = lo; ox <= hi; ++ox) yr[ox] += wv * xr[ox];
            } else {
              for (int ox = lo; ox <= hi; ++ox) yr[ox] += wv * xr[ox * g.stride];
            }
          }
        }
      }
    }
  }
}

template <typename T>
void conv_backward(const ConvGeom& g, const T* x, const T* w, const T* gy, T* gx, T* gw, T* gb) {
  const std::size_t plane = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int oc = 0; oc < g.out_c; ++oc) {
    const T* go = gy + oc * plane;
    T bsum = 0;
    for (std::size_t i = 0; i < plane; ++i) bsum += go[i];
    gb[oc] += bsum;
    for (int ic = 0; ic < g.in_c; ++ic) {
      const T* xi = x + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
      T* gxi = gx + static_cast<std::size_t>(ic) * g.in_h * g.in_w;
      for (int ky = 0; ky < g.k; ++ky) {
        for (int kx = 0; kx < g.k; ++kx) {
          const std::size_t widx = ((static_cast<std::size_t>(oc) * g.in_c + ic) * g.k + ky) * g.k + kx;
          const T wv = w[widx];
          T acc = 0;
          int lo, hi;
          col_range(g, kx, &lo, &hi);
          if (lo > hi) continue;
          for (int oy = 0; oy < g.out_h; ++oy) {
            const int iy = oy * g.stride + ky - g.pad_t;
            if (iy < 0 || iy >= g.in_h) continue;
            const std::size_t xoff = static_cast<std::size_t>(iy) * g.in_w + (kx - g.pad_l);
            const T* xr = xi + xoff;
            T* gxr = gxi + xoff;
            const T* gr = go + static_cast<std::size_t>(oy) * g.out_w;
            if (g.stride == 1) {
              for (int ox = lo; ox <= hi; ++ox) {
                acc += gr[ox] * xr[ox];
                gxr[ox] += wv * gr[ox];
              }
            } else {
              for (int ox = lo; ox <= hi; ++ox) {
                acc += gr[ox] * xr[ox * g.stride];
                gxr[ox * g.stride] += wv * gr[ox];
              }
            }
          }
          gw[widx] += acc;
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Sequential<T>::Sequential(NetworkSpec spec) : spec_(std::move(spec)) {
  if (spec_.input_shape.empty()) fail(ErrorCode::ShapeMismatch, "network needs an input shape");
  shape_size(spec_.input_shape);
  shapes_.push_back(spec_.input_shape);
  for (const auto& l : spec_.layers) {
    const auto& in = shapes_.back();
    std::vector<int> out;
    int pidx = -1;
    switch (l.kind) {
      case LayerKind::Conv2D: {
        if (in.size() != 3) fail(ErrorCode::ShapeMismatch, "conv layer needs a (c, h, w) input");
        if (l.out_channels <= 0 || l.kernel <= 0 || l.stride <= 0)
          fail(ErrorCode::ShapeMismatch, "conv layer needs positive channels, kernel and stride");
        if (l.padding == Padding::Valid && (in[1] < l.kernel || in[2] < l.kernel))
          fail(ErrorCode::ShapeMismatch, "valid conv kernel larger than input");
        const ConvGeom g = conv_geom(l, in);
        out = {g.out_c, g.out_h, g.out_w};
        pidx = static_cast<int>(params_.size());
        params_.emplace_back(std::vector<int>{l.out_channels, in[0], l.kernel, l.kernel});
        params_.emplace_back(std::vector<int>{l.out_channels});
        break;
      }
      case LayerKind::MaxPool2D:
        if (in.size() != 3) fail(ErrorCode::ShapeMismatch, "pool layer needs a (c, h, w) input");
        out = {in[0], (in[1] + 1) / 2, (in[2] + 1) / 2};
        break;
      case LayerKind::Upsample2D:
        if (in.size() != 3) fail(ErrorCode::ShapeMismatch, "upsample layer needs a (c, h, w) input");
        out = {in[0], in[1] * 2, in[2] * 2};
        break;
      case LayerKind::Dense: {
        if (l.units <= 0) fail(ErrorCode::ShapeMismatch, "dense layer needs positive width");
        const int n_in = static_cast<int>(shape_size(in));
        out = {l.units};
        pidx = static_cast<int>(params_.size());
        params_.emplace_back(std::vector<int>{l.units, n_in});
        params_.emplace_back(std::vector<int>{l.units});
        break;
      }
      case LayerKind::Flatten:
        out = {static_cast<int>(shape_size(in))};
        break;
      case LayerKind::Softmax:
        if (in.size() != 1) fail(ErrorCode::ShapeMismatch, "softmax needs a flat input");
        out = in;
        break;
      case LayerKind::ReLU:
      case LayerKind::Sigmoid:
        out = in;
        break;
    }
    param_index_.push_back(pidx);
    shapes_.push_back(out);
  }
}

template <typename T>
void Sequential<T>::init_he(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) {
    if (param_index_[i] < 0) continue;
    Tensor<T>& w = params_[param_index_[i]];
    Tensor<T>& b = params_[param_index_[i] + 1];
    const std::size_t fan_in = w.size() / static_cast<std::size_t>(w.dim(0));
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-limit, limit);
    for (auto& v : w.values()) v = static_cast<T>(dist(rng));
    b.fill(T(0));
  }
}

template <typename T>
Tensor<T> Sequential<T>::apply(std::size_t i, const Tensor<T>& x) const {
  const LayerSpec& l = spec_.layers[i];
  const auto& in = shapes_[i];
  Tensor<T> y(shapes_[i + 1]);
  switch (l.kind) {
    case LayerKind::Conv2D: {
      const ConvGeom g = conv_geom(l, in);
      conv_forward(g, x.data(), params_[param_index_[i]].data(), params_[param_index_[i] + 1].data(), y.data());
      break;
    }
    case LayerKind::MaxPool2D: {
      for (int c = 0; c < in[0]; ++c)
        for (int oy = 0; oy < y.dim(1); ++oy)
          for (int ox = 0; ox < y.dim(2); ++ox) {
            T m = -std::numeric_limits<T>::infinity();
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int iy = 2 * oy + dy, ix = 2 * ox + dx;
                if (iy < in[1] && ix < in[2]) m = std::max(m, x.at(c, iy, ix));
              }
            y.at(c, oy, ox) = m;
          }
      break;
    }
    case LayerKind::Upsample2D:
      for (int c = 0; c < y.dim(0); ++c)
        for (int oy = 0; oy < y.dim(1); ++oy)
          for (int ox = 0; ox < y.dim(2); ++ox) y.at(c, oy, ox) = x.at(c, oy / 2, ox / 2);
      break;
    case LayerKind::Dense: {
      const Tensor<T>& w = params_[param_index_[i]];
      const Tensor<T>& b = params_[param_index_[i] + 1];
      const int n_in = w.dim(1);
      for (int o = 0; o < l.units; ++o) {
        const T* wr = w.data() + static_cast<std::size_t>(o) * n_in;
        T acc = b[o];
        for (int k = 0; k < n_in; ++k) acc += wr[k] * x[k];
        y[o] = acc;
      }
      break;
    }
    case LayerKind::Flatten:
      y.values() = x.values();
      break;
    case LayerKind::ReLU:
      for (std::size_t k = 0; k < x.size(); ++k) y[k] = x[k] > T(0) ? x[k] : T(0);
      break;
    case LayerKind::Sigmoid:
      for (std::size_t k = 0; k < x.size(); ++k) y[k] = T(1) / (T(1) + std::exp(-x[k]));
      break;
    case LayerKind::Softmax: {
      const T m = *std::max_element(x.values().begin(), x.values().end());
      T sum = 0;
      for (std::size_t k = 0; k < x.size(); ++k) sum += (y[k] = std::exp(x[k] - m));
      for (std::size_t k = 0; k < x.size(); ++k) y[k] /= sum;
      break;
    }
  }
  return y;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x) const {
  if (x.shape() != spec_.input_shape) fail(ErrorCode::ShapeMismatch, "input shape does not match network");
  Tensor<T> cur = x;
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) cur = apply(i, cur);
  return cur;
}

template <typename T>
Tensor<T> Sequential<T>::forward(const Tensor<T>& x, Trace<T>& trace) const {
  if (x.shape() != spec_.input_shape) fail(ErrorCode::ShapeMismatch, "input shape does not match network");
  trace.activations.clear();
  trace.activations.reserve(spec_.layers.size() + 1);
  trace.activations.push_back(x);
  for (std::size_t i = 0; i < spec_.layers.size(); ++i) trace.activations.push_back(apply(i, trace.activations.back()));
  return trace.activations.back();
}

template <typename T>
Tensor<T> Sequential<T>::backward(const Trace<T>& trace, const Tensor<T>& grad_out, Gradients<T>& grads) const {
  if (trace.activations.size() != spec_.layers.size() + 1) fail(ErrorCode::ShapeMismatch, "trace does not match network");
  if (grad_out.shape() != shapes_.back()) fail(ErrorCode::ShapeMismatch, "output gradient shape mismatch");
  if (grads.size() != params_.size()) fail(ErrorCode::ShapeMismatch, "gradient buffer does not match network");
  Tensor<T> g = grad_out;
  for (std::size_t li = spec_.layers.size(); li-- > 0;) {
    const LayerSpec& l = spec_.layers[li];
    const Tensor<T>& x = trace.activations[li];
    const Tensor<T>& y = trace.activations[li + 1];
    Tensor<T> gx(shapes_[li]);
    switch (l.kind) {
      case LayerKind::Conv2D: {
        const ConvGeom geo = conv_geom(l, shapes_[li]);
        const int p = param_index_[li];
        conv_backward(geo, x.data(), params_[p].data(), g.data(), gx.data(), grads[p].data(), grads[p + 1].data());
        break;
      }
      case LayerKind::MaxPool2D: {
        const auto& in = shapes_[li];
        for (int c = 0; c < in[0]; ++c)
          for (int oy = 0; oy < y.dim(1); ++oy)
            for (int ox = 0; ox < y.dim(2); ++ox) {
              int by = -1, bx = -1;
              T m = -std::numeric_limits<T>::infinity();
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const int iy = 2 * oy + dy, ix = 2 * ox + dx;
                  if (iy < in[1] && ix < in[2] && x.at(c, iy, ix) > m) {
                    m = x.at(c, iy, ix);
                    by = iy;
                    bx = ix;
                  }
                }
              gx.at(c, by, bx) += g.at(c, oy, ox);
            }
        break;
      }
      case LayerKind::Upsample2D:
        for (int c = 0; c < g.dim(0); ++c)
          for (int oy = 0; oy < g.dim(1); ++oy)
            for (int ox = 0; ox < g.dim(2); ++ox) gx.at(c, oy / 2, ox / 2) += g.at(c, oy, ox);
        break;
      case LayerKind::Dense: {
        const int p = param_index_[li];
        const Tensor<T>& w = params_[p];
        const int n_in = w.dim(1);
        for (int o = 0; o < l.units; ++o) {
          const T go = g[o];
          grads[p + 1][o] += go;
          const T* wr = w.data() + static_cast<std::size_t>(o) * n_in;
          T* gwr = grads[p].data() + static_cast<std::size_t>(o) * n_in;
          for (int k = 0; k < n_in; ++k) {
            gwr[k] += go * x[k];
            gx[k] += go * wr[k];
          }
        }
        break;
      }
      case LayerKind::Flatten:
        gx.values() = g.values();
        break;
      case LayerKind::ReLU:
        for (std::size_t k = 0; k < x.size(); ++k) gx[k] = x[k] > T(0) ? g[k] : T(0);
        break;
      case LayerKind::Sigmoid:
        for (std::size_t k = 0; k < x.size(); ++k) gx[k] = g[k] * y[k] * (T(1) - y[k]);
        break;
      case LayerKind::Softmax: {
        T s = 0;
        for (std::size_t k = 0; k < y.size(); ++k) s += y[k] * g[k];
        for (std::size_t k = 0; k < y.size(); ++k) gx[k] = y[k] * (g[k] - s);
        break;
      }
    }
    g = std::move(gx);
  }
  return g;
}

template <typename T>
Gradients<T> Sequential<T>::zero_gradients() const {
  Gradients<T> g;
  g.reserve(params_.size());
  for (const auto& p : params_) g.emplace_back(p.shape());
  return g;
}

template <typename T>
std::size_t Sequential<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.size();
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
UNet2<T>::UNet2(int in_channels, int height, int width, int base_channels) {
  if (height % 2 || width % 2) fail(ErrorCode::ShapeMismatch, "U-Net input dims must be even");
  const int c1 = base_channels, c2 = 2 * base_channels;
  down_ = Sequential<T>({{in_channels, height, width},
                         {LayerSpec::conv(c1, 3), LayerSpec::relu(), LayerSpec::conv(c1, 3), LayerSpec::relu()}});
  bottom_ = Sequential<T>({{c1, height, width},
                           {LayerSpec::max_pool(), LayerSpec::conv(c2, 3), LayerSpec::relu(), LayerSpec::conv(c2, 3),
                            LayerSpec::relu(), LayerSpec::upsample()}});
  head_ = Sequential<T>({{c1 + c2, height, width},
                         {LayerSpec::conv(c1, 3), LayerSpec::relu(), LayerSpec::conv(1, 1), LayerSpec::sigmoid()}});
}

template <typename T>
void UNet2<T>::init_he(std::uint64_t seed) {
  down_.init_he(seed);
  bottom_.init_he(seed + 1);
  head_.init_he(seed + 2);
}

namespace {

template <typename T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
  Tensor<T> out({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
  std::copy(a.values().begin(), a.values().end(), out.values().begin());
  std::copy(b.values().begin(), b.values().end(), out.values().begin() + static_cast<std::ptrdiff_t>(a.size()));
  return out;
}

}  // namespace

template <typename T>
Tensor<T> UNet2<T>::forward(const Tensor<T>& x) const {
  const Tensor<T> skip = down_.forward(x);
  const Tensor<T> up = bottom_.forward(skip);
  return head_.forward(concat_channels(up, skip));
}

template <typename T>
Tensor<T> UNet2<T>::forward(const Tensor<T>& x, Cache& cache) const {
  const Tensor<T> skip = down_.forward(x, cache.down);
  const Tensor<T> up = bottom_.forward(skip, cache.bottom);
  return head_.forward(concat_channels(up, skip), cache.head);
}

template <typename T>
Tensor<T> UNet2<T>::backward(const Cache& cache, const Tensor<T>& grad_out, Gradients<T>& grads) const {
  const std::size_t nd = down_.params().size(), nb = bottom_.params().size();
  Gradients<T> gd(std::make_move_iterator(grads.begin()), std::make_move_iterator(grads.begin() + nd));
  Gradients<T> gb(std::make_move_iterator(grads.begin() + nd), std::make_move_iterator(grads.begin() + nd + nb));
  Gradients<T> gh(std::make_move_iterator(grads.begin() + nd + nb), std::make_move_iterator(grads.end()));

  const Tensor<T> gcat = head_.backward(cache.head, grad_out, gh);
  const int c_up = bottom_.output_shape()[0];
  const std::size_t up_size = shape_size(bottom_.output_shape());
  Tensor<T> gup(bottom_.output_shape());
  Tensor<T> gskip(down_.output_shape());
  std::copy(gcat.values().begin(), gcat.values().begin() + static_cast<std::ptrdiff_t>(up_size), gup.values().begin());
  std::copy(gcat.values().begin() + static_cast<std::ptrdiff_t>(up_size), gcat.values().end(), gskip.values().begin());
  (void)c_up;
  const Tensor<T> gskip2 = bottom_.backward(cache.bottom, gup, gb);
  for (std::size_t k = 0; k < gskip.size(); ++k) gskip[k] += gskip2[k];
  Tensor<T> gx = down_.backward(cache.down, gskip, gd);

  std::size_t k = 0;
  for (auto& t : gd) grads[k++] = std::move(t);
  for (auto& t : gb) grads[k++] = std::move(t);
  for (auto& t : gh) grads[k++] = std::move(t);
  return gx;
}

template <typename T>
std::vector<Tensor<T>*> UNet2<T>::params() {
  std::vector<Tensor<T>*> out;
  for (auto* s : {&down_, &bottom_, &head_})
    for (auto& p : s->params()) out.push_back(&p);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> UNet2<T>::params() const {
  std::vector<const Tensor<T>*> out;
  for (const auto* s : {&down_, &bottom_, &head_})
    for (const auto& p : s->params()) out.push_back(&p);
  return out;
}

template <typename T>
Gradients<T> UNet2<T>::zero_gradients() const {
  Gradients<T> g;
  for (const auto* p : params()) g.emplace_back(p->shape());
  return g;
}

template <typename T>
std::size_t UNet2<T>::parameter_count() const {
  return down_.parameter_count() + bottom_.parameter_count() + head_.parameter_count();
}

// ---------------------------------------------------------------------------

namespace {
template <typename T>
constexpr T clamp_eps() {
  return std::is_same_v<T, float> ? T(1e-7) : T(1e-12);
}
}  // namespace

template <typename T>
T loss_bce(const Tensor<T>& pred, const Tensor<T>& target, Tensor<T>* grad) {
  if (pred.shape() != target.shape()) fail(ErrorCode::ShapeMismatch, "prediction and target shapes differ");
  const T eps = clamp_eps<T>();
  const std::size_t n = pred.size();
  if (grad) *grad = Tensor<T>(pred.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    if (!(pred[i] >= T(0) && pred[i] <= T(1))) fail(ErrorCode::DomainError, "prediction outside [0, 1]");
    const T p = std::clamp(pred[i], eps, T(1) - eps);
    const T y = target[i];
    total -= static_cast<double>(y * std::log(p) + (T(1) - y) * std::log(T(1) - p));
    if (grad) (*grad)[i] = (p - y) / (p * (T(1) - p)) / static_cast<T>(n);
  }
  return static_cast<T>(total / static_cast<double>(n));
}

template <typename T>
T loss_cross_entropy(const Tensor<T>& probs, const Tensor<T>& target, Tensor<T>* grad) {
  if (probs.shape() != target.shape()) fail(ErrorCode::ShapeMismatch, "prediction and target shapes differ");
  const T eps = clamp_eps<T>();
  if (grad) *grad = Tensor<T>(probs.shape());
  double total = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (!(probs[i] >= T(0) && probs[i] <= T(1))) fail(ErrorCode::DomainError, "probability outside [0, 1]");
    const T p = std::clamp(probs[i], eps, T(1) - eps);
    total -= static_cast<double>(target[i] * std::log(p));
    if (grad) (*grad)[i] = -target[i] / p;
  }
  return static_cast<T>(total);
}

template <typename T>
void Sgd<T>::step(std::vector<Tensor<T>*> params, const Gradients<T>& grads) {
  if (params.size() != grads.size()) fail(ErrorCode::ShapeMismatch, "gradient count mismatch");
  for (const auto& g : grads)
    if (!g.all_finite()) fail(ErrorCode::NonFiniteGradient, "gradient contains NaN or infinity");
  if (momentum != T(0) && velocity.size() != params.size()) {
    velocity.clear();
    for (const auto& g : grads) velocity.emplace_back(g.shape());
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor<T>& w = *params[i];
    const Tensor<T>& g = grads[i];
    if (momentum != T(0)) {
      Tensor<T>& v = velocity[i];
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = momentum * v[k] + g[k];
        w[k] -= learning_rate * v[k];
      }
    } else {
      for (std::size_t k = 0; k < w.size(); ++k) w[k] -= learning_rate * g[k];
    }
  }
}

namespace {

template <typename T>
T example_loss(const Tensor<T>& out, const Tensor<T>& target, LossKind loss, Tensor<T>* grad) {
  return loss == LossKind::Bce ? loss_bce(out, target, grad) : loss_cross_entropy(out, target, grad);
}

}  // namespace

template <typename T>
std::vector<Tensor<T>*> param_ptrs(Sequential<T>& net) {
  std::vector<Tensor<T>*> out;
  for (auto& p : net.params()) out.push_back(&p);
  return out;
}

template <typename T>
std::vector<const Tensor<T>*> param_ptrs(const Sequential<T>& net) {
  std::vector<const Tensor<T>*> out;
  for (const auto& p : net.params()) out.push_back(&p);
  return out;
}

template <typename T>
T train_step(Sequential<T>& net, std::span<const Example<T>> batch, Sgd<T>& opt, LossKind loss) {
  if (batch.empty()) fail(ErrorCode::InvalidArgument, "empty batch");
  if (opt.learning_rate < T(0)) fail(ErrorCode::InvalidArgument, "learning rate must be non-negative");
  Gradients<T> grads = net.zero_gradients();
  Trace<T> trace;
  double total = 0.0;
  const T scale = T(1) / static_cast<T>(batch.size());
  for (const auto& ex : batch) {
    const Tensor<T> out = net.forward(ex.input, trace);
    Tensor<T> g;
    total += static_cast<double>(example_loss(out, ex.target, loss, &g));
    for (auto& v : g.values()) v *= scale;
    net.backward(trace, g, grads);
  }
  opt.step(param_ptrs(net), grads);
  return static_cast<T>(total / static_cast<double>(batch.size()));
}

template <typename T>
T backward_and_step(Sequential<T>& net, std::span<const Example<T>> batch, T learning_rate, LossKind loss) {
  Sgd<T> opt;
  opt.learning_rate = learning_rate;
  return train_step(net, batch, opt, loss);
}

template <typename T>
T evaluate_loss(const Sequential<T>& net, std::span<const Example<T>> batch, LossKind loss) {
  if (batch.empty()) fail(ErrorCode::InvalidArgument, "empty batch");
  double total = 0.0;
  for (const auto& ex : batch) total += static_cast<double>(example_loss(net.forward(ex.input), ex.target, loss, static_cast<Tensor<T>*>(nullptr)));
  return static_cast<T>(total / static_cast<double>(batch.size()));
}

namespace {

void put_u32(std::ofstream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(std::ifstream& is, const std::string& path) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) fail(ErrorCode::IoError, "truncated weight file " + path);
  return std::uint32_t(b[0]) | (std::uint32_t(b[1]) << 8) | (std::uint32_t(b[2]) << 16) | (std::uint32_t(b[3]) << 24);
}

}  // namespace

template <typename T>
void save_weights(const std::string& path, const std::vector<const Tensor<T>*>& tensors) {
  std::ofstream os(path, std::ios::binary);
  if (!os) fail(ErrorCode::IoError, "cannot write weight file " + path);
  os.write("MNW1", 4);
  put_u32(os, 1);
  put_u32(os, sizeof(T));
  put_u32(os, static_cast<std::uint32_t>(tensors.size()));
  for (const auto* t : tensors) {
    put_u32(os, static_cast<std::uint32_t>(t->shape().size()));
    for (int d : t->shape()) put_u32(os, static_cast<std::uint32_t>(d));
    os.write(reinterpret_cast<const char*>(t->data()), static_cast<std::streamsize>(t->size() * sizeof(T)));
  }
  if (!os) fail(ErrorCode::IoError, "failed writing weight file " + path);
}

template <typename T>
std::vector<Tensor<T>> load_weights(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) fail(ErrorCode::MissingWeights, "cannot open weight file " + path);
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "MNW1", 4) != 0) fail(ErrorCode::IoError, "not a weight file: " + path);
  if (get_u32(is, path) != 1) fail(ErrorCode::SchemaVersionMismatch, "unsupported weight file version");
  if (get_u32(is, path) != sizeof(T)) fail(ErrorCode::ShapeMismatch, "weight file precision differs");
  const std::uint32_t count = get_u32(is, path);
  std::vector<Tensor<T>> out;
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t rank = get_u32(is, path);
    std::vector<int> shape;
    for (std::uint32_t r = 0; r < rank; ++r) shape.push_back(static_cast<int>(get_u32(is, path)));
    Tensor<T> t(shape);
    if (!is.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(T))))
      fail(ErrorCode::IoError, "truncated weight file " + path);
    out.push_back(std::move(t));
  }
  return out;
}

template <typename T>
void assign_params(const std::vector<Tensor<T>*>& dst, std::span<const Tensor<T>> src) {
  if (dst.size() != src.size()) fail(ErrorCode::ShapeMismatch, "parameter tensor count differs");
  for (std::size_t i = 0; i < dst.size(); ++i)
    if (dst[i]->shape() != src[i].shape()) fail(ErrorCode::ShapeMismatch, "parameter tensor shape differs");
  for (std::size_t i = 0; i < dst.size(); ++i) *dst[i] = src[i];
}

#define LAPSIM_MICRONET_INSTANTIATE(T)                                                                   \
  template class Tensor<T>;                                                                             \
  template class Sequential<T>;                                                                         \
  template class UNet2<T>;                                                                              \
  template struct Sgd<T>;                                                                               \
  template T loss_bce<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                               \
  template T loss_cross_entropy<T>(const Tensor<T>&, const Tensor<T>&, Tensor<T>*);                     \
  template T train_step<T>(Sequential<T>&, std::span<const Example<T>>, Sgd<T>&, LossKind);             \
  template T backward_and_step<T>(Sequential<T>&, std::span<const Example<T>>, T, LossKind);            \
  template T evaluate_loss<T>(const Sequential<T>&, std::span<const Example<T>>, LossKind);             \
  template void save_weights<T>(const std::string&, const std::vector<const Tensor<T>*>&);              \
  template std::vector<Tensor<T>> load_weights<T>(const std::string&);                                  \
  template void assign_params<T>(const std::vector<Tensor<T>*>&, std::span<const Tensor<T>>);           \
  template std::vector<Tensor<T>*> param_ptrs<T>(Sequential<T>&);                                       \
  template std::vector<const Tensor<T>*> param_ptrs<T>(const Sequential<T>&);

LAPSIM_MICRONET_INSTANTIATE(float)
LAPSIM_MICRONET_INSTANTIATE(double)

}  // namespace lapsim::micronet
