#include "cordseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <set>

#include "cordseg/error.hpp"
#include "cordseg/rng.hpp"
#include "json.hpp"

namespace cordseg {

std::string to_string(Contrast c) {
  switch (c) {
    case Contrast::t1: return "t1";
    case Contrast::t2: return "t2";
    default: return "t2s";
  }
}

Contrast parse_contrast(const std::string& s) {
  if (s == "t1") return Contrast::t1;
  if (s == "t2") return Contrast::t2;
  if (s == "t2s") return Contrast::t2s;
  throw ConfigError("unknown contrast '" + s + "' (expected t1, t2 or t2s)");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
    default: return "unassigned";
  }
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  if (s == "unassigned") return Split::unassigned;
  throw ConfigError("unknown split '" + s + "'");
}

std::filesystem::path DatasetIndex::resolve(const std::filesystem::path& p) const {
  return p.is_relative() ? base_dir / p : p;
}

std::vector<SubjectRecord> DatasetIndex::in_split(Split s) const {
  std::vector<SubjectRecord> out;
  for (const auto& r : subjects)
    if (r.split == s) out.push_back(r);
  return out;
}

void DatasetIndex::validate() const {
  std::map<std::string, Split> split_of;
  for (const auto& r : subjects) {
    if (r.id.empty()) throw ConfigError("dataset record without an id");
    if (r.image.empty() || r.cord_mask.empty())
      throw ConfigError("dataset record '" + r.id + "' needs image and cord_mask paths");
    auto [it, inserted] = split_of.emplace(r.id, r.split);
    if (!inserted && it->second != r.split)
      throw ConfigError("subject '" + r.id + "' has volumes in more than one split");
  }
}

DatasetIndex DatasetIndex::read(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open dataset index '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("dataset index '" + path.string() + "' is not valid JSON: " + e.what());
  }
  DatasetIndex idx;
  idx.base_dir = path.parent_path();
  try {
    for (auto it = j.begin(); it != j.end(); ++it)
      if (it.key() != "subjects") throw ConfigError("dataset index: unknown key '" + it.key() + "'");
    static const std::set<std::string> known{"id", "contrast", "image", "cord_mask", "lesion_mask", "split"};
    for (const auto& s : j.at("subjects")) {
      for (auto it = s.begin(); it != s.end(); ++it)
        if (!known.count(it.key())) throw ConfigError("dataset index: unknown subject key '" + it.key() + "'");
      SubjectRecord r;
      r.id = s.at("id").get<std::string>();
      r.contrast = parse_contrast(s.at("contrast").get<std::string>());
      r.image = s.at("image").get<std::string>();
      r.cord_mask = s.at("cord_mask").get<std::string>();
      if (s.contains("lesion_mask") && !s["lesion_mask"].is_null()) r.lesion_mask = s["lesion_mask"].get<std::string>();
      r.split = s.contains("split") ? parse_split(s["split"].get<std::string>()) : Split::unassigned;
      idx.subjects.push_back(std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("dataset index '" + path.string() + "': " + e.what());
  }
  idx.validate();
  return idx;
}

void DatasetIndex::write(const std::filesystem::path& path) const {
  nlohmann::ordered_json j;
  j["subjects"] = nlohmann::ordered_json::array();
  for (const auto& r : subjects) {
    nlohmann::ordered_json s;
    s["id"] = r.id;
    s["contrast"] = to_string(r.contrast);
    s["image"] = r.image.generic_string();
    s["cord_mask"] = r.cord_mask.generic_string();
    if (r.lesion_mask) s["lesion_mask"] = r.lesion_mask->generic_string();
    s["split"] = to_string(r.split);
    j["subjects"].push_back(s);
  }
  std::ofstream out(path);
  if (!out) throw IoError("cannot write dataset index '" + path.string() + "'");
  out << j.dump(2) << "\n";
  if (!out) throw IoError("write failed for '" + path.string() + "'");
}

DatasetIndex split_dataset(std::vector<SubjectRecord> records, const std::array<double, 3>& fractions,
                           std::uint64_t seed) {
  for (double f : fractions)
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9)
    throw ConfigError("split fractions must sum to 1");
  std::vector<std::string> ids;
  for (const auto& r : records) ids.push_back(r.id);
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  const std::size_t n = ids.size();
  auto share = [&](double f) -> std::size_t {
    if (f == 0.0) return 0;
    return std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(f * static_cast<double>(n) + 1e-9)));
  };
  const std::size_t n_val = share(fractions[1]), n_test = share(fractions[2]);
  if (n < 3 || n_val + n_test >= n)
    throw ConfigError("too few subjects (" + std::to_string(n) + ") for non-empty train/val/test splits");
  Rng rng(seed);
  rng.shuffle(ids.begin(), ids.end());
  std::map<std::string, Split> split_of;
  for (std::size_t i = 0; i < n; ++i)
    split_of[ids[i]] = i < n_val ? Split::val : i < n_val + n_test ? Split::test : Split::train;
  for (auto& r : records) r.split = split_of[r.id];
  DatasetIndex idx;
  idx.subjects = std::move(records);
  return idx;
}

}  // namespace cordseg
