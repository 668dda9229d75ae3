#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace cordseg {

using Vec3 = std::array<double, 3>;
using Dims = std::array<std::size_t, 3>;
using Affine = std::array<std::array<double, 4>, 4>;

// Three-letter anatomical orientation code. Each letter names the side an
// axis starts from: "RPI" runs right-to-left, posterior-to-anterior,
// inferior-to-superior. World space is NIfTI RAS+.
class Orientation {
 public:
  Orientation() : Orientation("RPI") {}
  explicit Orientation(std::string_view code);

  static bool is_valid(std::string_view code);

  std::string str() const { return {code_.begin(), code_.end()}; }
  char letter(int axis) const { return code_[axis]; }
  // World axis (0=x, 1=y, 2=z) that voxel axis `axis` runs along.
  int world_axis(int axis) const;
  // +1 if the voxel axis runs toward increasing world coordinate.
  int world_sign(int axis) const;

  bool operator==(const Orientation&) const = default;

 private:
  std::array<char, 3> code_{};
};

struct Geometry {
  Dims dims{1, 1, 1};
  Vec3 spacing{1.0, 1.0, 1.0};
  Orientation orientation;
  std::optional<Affine> affine;

  std::size_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }
  std::size_t index(std::size_t x, std::size_t y, std::size_t z) const {
    return x + dims[0] * (y + dims[1] * z);
  }
  double voxel_volume() const { return spacing[0] * spacing[1] * spacing[2]; }
  // dims, spacing (within tol) and orientation agree; affines are ignored.
  bool same_grid(const Geometry& other, double tol = 1e-5) const;
};

// Scalar grid, x fastest. Volume carries intensities, Mask carries {0,1}.
template <class T>
struct Image {
  Geometry geom;
  std::vector<T> data;

  Image() = default;
  explicit Image(Geometry g, T fill = T{})
      : geom(std::move(g)), data(geom.voxel_count(), fill) {}

  const Dims& dims() const { return geom.dims; }
  T& at(std::size_t x, std::size_t y, std::size_t z) { return data[geom.index(x, y, z)]; }
  const T& at(std::size_t x, std::size_t y, std::size_t z) const {
    return data[geom.index(x, y, z)];
  }
};

using Volume = Image<float>;
using Mask = Image<std::uint8_t>;

enum class Interp { trilinear, nearest };

// Throws ConfigError when the invariants of the data model are violated.
void validate(const Geometry& g);
void validate(const Volume& v);
void validate(const Mask& m);

Affine default_affine(const Dims& dims, const Vec3& spacing, const Orientation& o);
// Orientation from the dominant direction of each affine column. Rejects
// affines where two voxel axes share a dominant world axis or no component
// exceeds 45 degrees.
Orientation orientation_from_affine(const Affine& a);
Affine multiply(const Affine& a, const Affine& b);
Affine inverse(const Affine& a);
Vec3 apply(const Affine& a, const Vec3& p);

// Returns g.affine, or the default affine built from spacing and orientation.
Affine affine_or_default(const Geometry& g);

Volume to_volume(const Mask& m);
// Voxels strictly above `threshold` become 1.
Mask threshold(const Volume& v, double threshold);
std::size_t count_nonzero(const Mask& m);

// NIfTI-1 single file (.nii or gzip .nii.gz).
Volume read_volume(const std::filesystem::path& path);
// As read_volume; every voxel must be 0 or 1.
Mask read_mask(const std::filesystem::path& path);
// Writes float32 data. Gzip when the path ends in ".gz".
void write_volume(const Volume& v, const std::filesystem::path& path);
// Writes uint8 data.
void write_volume(const Mask& m, const std::filesystem::path& path);

template <class T>
Image<T> reorient(const Image<T>& img, const Orientation& target);

// Corner-anchored resampling onto `spacing`; dims = max(1, round(n * s_in / s_out)).
Volume resample(const Volume& v, const Vec3& spacing, Interp interp = Interp::trilinear);
// Masks only support nearest-neighbour interpolation.
Mask resample(const Mask& m, const Vec3& spacing, Interp interp = Interp::nearest);

// Corner-anchored index-space resampling onto explicit dims and spacing.
// The output keeps the orientation of the input.
Volume resample_to_grid(const Volume& v, const Dims& dims, const Vec3& spacing, Interp interp);
Mask resample_to_grid(const Mask& m, const Dims& dims, const Vec3& spacing);

// Nearest-neighbour resampling through world space onto `reference`'s grid.
// Both geometries need an affine. Samples outside the mask read as 0.
Mask resample_to_geometry(const Mask& mask, const Geometry& reference);

}  // namespace cordseg
