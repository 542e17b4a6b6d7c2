#pragma once

#include <cstdint>
#include <vector>

namespace lesionseg {

// Per-pixel class ids: 0 = Background, 1 = Skin, 2 = Lesion.
constexpr std::uint8_t kBackground = 0;
constexpr std::uint8_t kSkin = 1;
constexpr std::uint8_t kLesion = 2;

struct LabelMap {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> values;  // row-major, length height*width

  LabelMap() = default;
  LabelMap(int h, int w, std::uint8_t fill = 0)
      : height(h), width(w), values(static_cast<std::size_t>(h) * w, fill) {}

  std::uint8_t& at(int y, int x) { return values[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t at(int y, int x) const { return values[static_cast<std::size_t>(y) * width + x]; }

  bool same_shape(const LabelMap& o) const { return height == o.height && width == o.width; }
};

}  // namespace lesionseg
