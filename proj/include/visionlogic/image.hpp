#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

namespace visionlogic {

/// Planar float tensor, channel-major (C, H, W).
struct Tensor3 {
  int c = 0;
  int h = 0;
  int w = 0;
  std::vector<float> data;

  Tensor3() = default;
  Tensor3(int channels, int height, int width, float fill = 0.0f)
      : c(channels), h(height), w(width),
        data(static_cast<std::size_t>(channels) * height * width, fill) {}

  [[nodiscard]] float& at(int ch, int y, int x) {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  [[nodiscard]] float at(int ch, int y, int x) const {
    return data[(static_cast<std::size_t>(ch) * h + y) * w + x];
  }
  [[nodiscard]] float* plane(int ch) { return data.data() + static_cast<std::size_t>(ch) * h * w; }
  [[nodiscard]] const float* plane(int ch) const {
    return data.data() + static_cast<std::size_t>(ch) * h * w;
  }
  [[nodiscard]] std::size_t size() const noexcept { return data.size(); }

  bool operator==(const Tensor3&) const = default;
};

/// RGB image with values in [0, 1].
using Image = Tensor3;

/// Single-channel boolean mask, row-major.
struct Mask {
  int h = 0;
  int w = 0;
  std::vector<std::uint8_t> fg;

  [[nodiscard]] bool at(int y, int x) const { return fg[static_cast<std::size_t>(y) * w + x] != 0; }
};

[[nodiscard]] inline std::uint8_t to_u8(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint8_t>(std::lround(c * 255.0f));
}

inline void clamp01(Tensor3& t) {
  for (auto& v : t.data) v = std::clamp(v, 0.0f, 1.0f);
}

}  // namespace visionlogic
