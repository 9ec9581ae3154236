#pragma once

#include <algorithm>
#include <cmath>
#include <numbers>
#include <optional>
#include <vector>

#include "visionlogic/error.hpp"
#include "visionlogic/image.hpp"
#include "visionlogic/predicate_spec.hpp"
#include "visionlogic/tensorio.hpp"

namespace visionlogic {

[[nodiscard]] inline double gelu(double z) { return 0.5 * z * (1.0 + std::erf(z / std::numbers::sqrt2)); }

struct ForwardTrace {
  std::vector<float> z;
  std::vector<float> logits;
  std::optional<Tensor3> feature_maps;
};

/// Frozen network ready for inference. Zero convolution taps are skipped;
/// accumulation order is otherwise fixed, so results are bit-reproducible.
class Engine {
 public:
  explicit Engine(const Model& model) : manifest_(model.manifest) {
    shapes_ = infer_shapes(manifest_);
    Shape3 in = manifest_.input_shape;
    for (std::size_t i = 0; i < manifest_.layers.size(); ++i) {
      const auto& l = manifest_.layers[i];
      Compiled c;
      c.in = in;
      c.out = shapes_[i];
      if (l.kind == LayerKind::Conv2d || l.kind == LayerKind::Linear) {
        c.weight = model.tensor(l.weight);
        c.bias = l.bias.empty() ? std::vector<float>(static_cast<std::size_t>(c.out.c), 0.0f) : model.tensor(l.bias);
      }
      if (l.kind == LayerKind::Conv2d) {
        c.taps.resize(static_cast<std::size_t>(l.out_channels));
        const int k = l.kernel;
        for (int oc = 0; oc < l.out_channels; ++oc)
          for (int ic = 0; ic < in.c; ++ic)
            for (int ky = 0; ky < k; ++ky)
              for (int kx = 0; kx < k; ++kx) {
                const float w = c.weight[((static_cast<std::size_t>(oc) * in.c + ic) * k + ky) * k + kx];
                if (w != 0.0f) c.taps[static_cast<std::size_t>(oc)].push_back({ic, ky, kx, w});
              }
      }
      layers_.push_back(std::move(c));
      in = shapes_[i];
    }
    for (std::size_t i = 0; i < manifest_.layers.size(); ++i)
      if (manifest_.layers[i].kind == LayerKind::GlobalAvgPool) gap_index_ = static_cast<int>(i);
    if (manifest_.layers.empty() || manifest_.layers.back().kind != LayerKind::Linear)
      fail(ErrorKind::ShapeMismatch, "model must end with a linear head");
  }

  [[nodiscard]] const ModelManifest& manifest() const noexcept { return manifest_; }
  [[nodiscard]] bool has_feature_maps() const noexcept { return gap_index_ >= 0; }
  [[nodiscard]] int d() const noexcept { return layers_.back().in.c * layers_.back().in.h * layers_.back().in.w; }
  [[nodiscard]] int n_classes() const noexcept { return layers_.back().out.c; }

  [[nodiscard]] ForwardTrace forward(const Image& image) const {
    const auto& is = manifest_.input_shape;
    if (image.c != is.c || image.h != is.h || image.w != is.w)
      fail(ErrorKind::ShapeMismatch, "image is " + std::to_string(image.c) + "x" + std::to_string(image.h) + "x" +
                                         std::to_string(image.w) + ", model expects " + std::to_string(is.c) + "x" +
                                         std::to_string(is.h) + "x" + std::to_string(is.w));
    ForwardTrace trace;
    Tensor3 cur = image;
    const std::size_t last = layers_.size() - 1;
    for (std::size_t i = 0; i < layers_.size(); ++i) {
      const auto& l = manifest_.layers[i];
      const auto& c = layers_[i];
      if (i == last) trace.z = cur.data;
      switch (l.kind) {
        case LayerKind::Conv2d: cur = conv2d(cur, l, c); break;
        case LayerKind::Relu:
          for (auto& v : cur.data) v = v > 0.0f ? v : 0.0f;
          break;
        case LayerKind::Gelu:
          for (auto& v : cur.data) v = static_cast<float>(gelu(static_cast<double>(v)));
          break;
        case LayerKind::MaxPool: cur = maxpool(cur, l, c); break;
        case LayerKind::GlobalAvgPool:
          trace.feature_maps = cur;
          cur = global_avg_pool(cur);
          break;
        case LayerKind::Linear: cur = linear(cur, c); break;
      }
    }
    trace.logits = std::move(cur.data);
    return trace;
  }

 private:
  struct Tap {
    int ic, ky, kx;
    float w;
  };
  struct Compiled {
    Shape3 in, out;
    std::vector<float> weight, bias;
    std::vector<std::vector<Tap>> taps;
  };

  static Tensor3 conv2d(const Tensor3& x, const LayerDescriptor& l, const Compiled& c) {
    Tensor3 y(c.out.c, c.out.h, c.out.w);
    const int s = l.stride, p = l.padding;
    std::vector<double> acc(static_cast<std::size_t>(c.out.h) * c.out.w);
    for (int oc = 0; oc < c.out.c; ++oc) {
      std::fill(acc.begin(), acc.end(), static_cast<double>(c.bias[static_cast<std::size_t>(oc)]));
      for (const auto& t : c.taps[static_cast<std::size_t>(oc)]) {
        const float* in = x.plane(t.ic);
        const double w = t.w;
        // valid output columns: 0 <= ox*s + kx - p < x.w
        int ox0 = 0;
        while (ox0 < c.out.w && ox0 * s + t.kx - p < 0) ++ox0;
        int ox1 = c.out.w;
        while (ox1 > ox0 && (ox1 - 1) * s + t.kx - p >= x.w) --ox1;
        for (int oy = 0; oy < c.out.h; ++oy) {
          const int iy = oy * s + t.ky - p;
          if (iy < 0 || iy >= x.h) continue;
          const float* row = in + static_cast<std::size_t>(iy) * x.w;
          double* out = acc.data() + static_cast<std::size_t>(oy) * c.out.w;
          for (int ox = ox0; ox < ox1; ++ox) out[ox] += w * static_cast<double>(row[ox * s + t.kx - p]);
        }
      }
      float* dst = y.plane(oc);
      for (std::size_t k = 0; k < acc.size(); ++k) dst[k] = static_cast<float>(acc[k]);
    }
    return y;
  }

  static Tensor3 maxpool(const Tensor3& x, const LayerDescriptor& l, const Compiled& c) {
    Tensor3 y(c.out.c, c.out.h, c.out.w);
    for (int ch = 0; ch < c.out.c; ++ch)
      for (int oy = 0; oy < c.out.h; ++oy)
        for (int ox = 0; ox < c.out.w; ++ox) {
          float m = x.at(ch, oy * l.stride, ox * l.stride);
          for (int ky = 0; ky < l.kernel; ++ky)
            for (int kx = 0; kx < l.kernel; ++kx) m = std::max(m, x.at(ch, oy * l.stride + ky, ox * l.stride + kx));
          y.at(ch, oy, ox) = m;
        }
    return y;
  }

  static Tensor3 global_avg_pool(const Tensor3& x) {
    Tensor3 y(x.c, 1, 1);
    const std::size_t n = static_cast<std::size_t>(x.h) * x.w;
    for (int ch = 0; ch < x.c; ++ch) {
      const float* p = x.plane(ch);
      double sum = 0.0;
      for (std::size_t k = 0; k < n; ++k) sum += p[k];
      y.data[static_cast<std::size_t>(ch)] = static_cast<float>(sum / static_cast<double>(n));
    }
    return y;
  }

  static Tensor3 linear(const Tensor3& x, const Compiled& c) {
    const int in = static_cast<int>(x.size());
    Tensor3 y(c.out.c, 1, 1);
    for (int o = 0; o < c.out.c; ++o) {
      double sum = 0.0;
      const float* w = c.weight.data() + static_cast<std::size_t>(o) * in;
      for (int k = 0; k < in; ++k) sum += static_cast<double>(w[k]) * static_cast<double>(x.data[static_cast<std::size_t>(k)]);
      sum += static_cast<double>(c.bias[static_cast<std::size_t>(o)]);
      y.data[static_cast<std::size_t>(o)] = static_cast<float>(sum);
    }
    return y;
  }

  ModelManifest manifest_;
  std::vector<Shape3> shapes_;
  std::vector<Compiled> layers_;
  int gap_index_ = -1;
};

/// Head applied to a given z exactly as the engine does it.
[[nodiscard]] inline std::vector<float> apply_head(const HeadWeights& h, const std::vector<float>& z) {
  std::vector<float> out(static_cast<std::size_t>(h.n_classes));
  for (int c = 0; c < h.n_classes; ++c) {
    double sum = 0.0;
    for (int j = 0; j < h.d; ++j) sum += static_cast<double>(h.w(c, j)) * static_cast<double>(z[static_cast<std::size_t>(j)]);
    sum += static_cast<double>(h.b[static_cast<std::size_t>(c)]);
    out[static_cast<std::size_t>(c)] = static_cast<float>(sum);
  }
  return out;
}

[[nodiscard]] inline bool evaluate_predicate(const ForwardTrace& trace, const PredicateSpec& p) {
  if (p.channel < 0 || p.channel >= static_cast<int>(trace.z.size()))
    fail(ErrorKind::ChannelOutOfRange, "predicate " + std::to_string(p.id) + " channel " + std::to_string(p.channel));
  return fires(p, static_cast<double>(trace.z[static_cast<std::size_t>(p.channel)]));
}

[[nodiscard]] inline bool evaluate_predicate_on_image(const Engine& engine, const PredicateSpec& p, const Image& image) {
  if (p.channel < 0 || p.channel >= engine.d())
    fail(ErrorKind::ChannelOutOfRange, "predicate " + std::to_string(p.id) + " channel " + std::to_string(p.channel));
  return evaluate_predicate(engine.forward(image), p);
}

}  // namespace visionlogic
