#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "cordseg/volume.hpp"

namespace cordseg {

// Connected foreground components of a binary grid (x fastest). Components
// are numbered from 1 in order of their smallest linear index, which is the
// lexicographic minimum over (z, y, x).
struct Labeling {
  std::vector<std::int32_t> labels;  // 0 = background
  std::vector<std::vector<std::size_t>> components;  // sorted voxel indices per component
  std::size_t count() const { return components.size(); }
};

// connectivity: 6, 18 or 26.
Labeling label_components(std::span<const std::uint8_t> mask, const Dims& dims, int connectivity = 26);

}  // namespace cordseg
