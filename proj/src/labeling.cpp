#include "cordseg/labeling.hpp"

#include <algorithm>
#include <array>

#include "cordseg/error.hpp"

namespace cordseg {

Labeling label_components(std::span<const std::uint8_t> mask, const Dims& dims, int connectivity) {
  if (connectivity != 6 && connectivity != 18 && connectivity != 26)
    throw ConfigError("connectivity must be 6, 18 or 26");
  const std::size_t W = dims[0], H = dims[1], D = dims[2];
  if (mask.size() != W * H * D) throw ShapeError("mask size does not match its dimensions");
  std::vector<std::array<int, 3>> offsets;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        const int n = (dx != 0) + (dy != 0) + (dz != 0);
        if (n == 0) continue;
        if (connectivity == 6 && n > 1) continue;
        if (connectivity == 18 && n > 2) continue;
        offsets.push_back({dx, dy, dz});
      }
  Labeling out;
  out.labels.assign(mask.size(), 0);
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < mask.size(); ++start) {
    if (!mask[start] || out.labels[start]) continue;
    const auto label = static_cast<std::int32_t>(out.components.size() + 1);
    std::vector<std::size_t> voxels;
    out.labels[start] = label;
    stack.push_back(start);
    while (!stack.empty()) {
      const std::size_t v = stack.back();
      stack.pop_back();
      voxels.push_back(v);
      const long x = static_cast<long>(v % W), y = static_cast<long>((v / W) % H), z = static_cast<long>(v / (W * H));
      for (const auto& o : offsets) {
        const long xx = x + o[0], yy = y + o[1], zz = z + o[2];
        if (xx < 0 || yy < 0 || zz < 0 || xx >= static_cast<long>(W) || yy >= static_cast<long>(H) ||
            zz >= static_cast<long>(D))
          continue;
        const std::size_t u = static_cast<std::size_t>(xx) + W * (static_cast<std::size_t>(yy) + H * static_cast<std::size_t>(zz));
        if (mask[u] && !out.labels[u]) {
          out.labels[u] = label;
          stack.push_back(u);
        }
      }
    }
    std::sort(voxels.begin(), voxels.end());
    out.components.push_back(std::move(voxels));
  }
  return out;
}

}  // namespace cordseg
