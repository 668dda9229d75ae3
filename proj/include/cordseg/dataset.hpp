#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace cordseg {

enum class Contrast { t1, t2, t2s };
std::string to_string(Contrast c);
Contrast parse_contrast(const std::string& s);

enum class Split { train, val, test, unassigned };
std::string to_string(Split s);
Split parse_split(const std::string& s);

// One volume. Several records may share a subject id.
struct SubjectRecord {
  std::string id;
  Contrast contrast = Contrast::t2;
  std::filesystem::path image;
  std::filesystem::path cord_mask;
  std::optional<std::filesystem::path> lesion_mask;
  Split split = Split::unassigned;
};

struct DatasetIndex {
  std::vector<SubjectRecord> subjects;
  std::filesystem::path base_dir;  // relative paths resolve against this

  std::filesystem::path resolve(const std::filesystem::path& p) const;
  std::vector<SubjectRecord> in_split(Split s) const;
  void validate() const;

  static DatasetIndex read(const std::filesystem::path& path);
  void write(const std::filesystem::path& path) const;
};

// Subject-level split: val and test get floor(fraction * n) subjects each
// (at least one when the fraction is positive), the remainder goes to train.
DatasetIndex split_dataset(std::vector<SubjectRecord> records, const std::array<double, 3>& fractions,
                           std::uint64_t seed);

}  // namespace cordseg
