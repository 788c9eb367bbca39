// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "selfvqa/util/io.hpp"
#include "selfvqa/util/random.hpp"
#include "selfvqa/util/text.hpp"

namespace selfvqa {

namespace fs = std::filesystem;

enum class Split { Train, Validation, Test };
enum class MetricKind { RelaxedAccuracy, Anls };

inline std::string_view to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Validation: return "validation";
    case Split::Test: return "test";
  }
  return "?";
}

inline std::optional<Split> parse_split(std::string_view s) {
  if (s == "train") return Split::Train;
  if (s == "validation" || s == "val") return Split::Validation;
  if (s == "test") return Split::Test;
  return std::nullopt;
}

inline std::string_view to_string(MetricKind m) {
  return m == MetricKind::RelaxedAccuracy ? "relaxed_accuracy" : "anls";
}

inline std::optional<MetricKind> parse_metric_kind(std::string_view s) {
  if (s == "relaxed_accuracy" || s == "ra") return MetricKind::RelaxedAccuracy;
  if (s == "anls") return MetricKind::Anls;
  return std::nullopt;
}

struct TaskSpec {
  std::string name;
  MetricKind metric_kind = MetricKind::RelaxedAccuracy;
  std::map<Split, fs::path> split_paths;
  // Splits whose records may omit answers. Metrics and the oracle aggregator
  // are refused on them.
  std::set<Split> unlabeled_splits;
  std::string answer_var = "ans";
  // Size of the reproducible training subsample; 0 keeps the full split.
  std::size_t train_subset = 1000;
  std::uint64_t subset_seed = 0;
};

struct VqaExample {
  std::string id;
  std::string image_ref;
  std::string question;
  std::vector<std::string> gold_answers;
  Split split = Split::Train;

  bool labeled() const { return !gold_answers.empty(); }
};

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Resolves opaque image references against the dataset root. Pixels are
// never decoded; backends receive raw bytes.
class ImageStore {
 public:
  ImageStore() = default;
  explicit ImageStore(fs::path root) : root_(std::move(root)) {}

  fs::path path(std::string_view ref) const {
    fs::path p(ref);
    if (p.is_absolute() || root_.empty()) return p;
    return root_ / p;
  }

  std::string bytes(std::string_view ref) const { return io::read_file(path(ref)); }

  bool exists(std::string_view ref) const {
    std::error_code ec;
    return fs::is_regular_file(path(ref), ec);
  }

  const fs::path& root() const { return root_; }

 private:
  fs::path root_;
};

struct LoadOptions {
  ImageStore images;
  bool require_labels = true;
  bool check_images = true;
};

namespace detail {

inline std::string required_string(const nlohmann::json& rec, const char* key, std::size_t line) {
  auto it = rec.find(key);
  if (it == rec.end()) {
    throw DatasetError("line " + std::to_string(line) + ": missing \"" + key + "\"");
  }
  if (it->is_string()) return it->get<std::string>();
  if (std::string_view(key) == "id" && it->is_number_integer()) {
    return std::to_string(it->get<std::int64_t>());
  }
  throw DatasetError("line " + std::to_string(line) + ": \"" + key + "\" must be a string");
}

}  // namespace detail

// Parses one JSONL dataset. Each non-blank line holds an object with keys
// `id`, `image`, `question` and `answers` (a list of strings).
inline std::vector<VqaExample> parse_dataset(std::istream& in, Split split, const LoadOptions& opts = {}) {
  std::vector<VqaExample> out;
  std::set<std::string> seen;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (text::trim(line).empty()) continue;
    nlohmann::json rec;
    try {
      rec = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw DatasetError("line " + std::to_string(line_no) + ": malformed JSON: " + e.what());
    }
    if (!rec.is_object()) {
      throw DatasetError("line " + std::to_string(line_no) + ": record is not an object");
    }
    VqaExample ex;
    ex.split = split;
    ex.id = detail::required_string(rec, "id", line_no);
    ex.image_ref = detail::required_string(rec, "image", line_no);
    ex.question = detail::required_string(rec, "question", line_no);
    auto answers = rec.find("answers");
    if (answers != rec.end()) {
      if (!answers->is_array()) {
        throw DatasetError("line " + std::to_string(line_no) + ": \"answers\" must be a list");
      }
      for (const auto& a : *answers) {
        if (!a.is_string()) {
          throw DatasetError("line " + std::to_string(line_no) + ": answers must be strings");
        }
        ex.gold_answers.push_back(a.get<std::string>());
      }
    }
    if (opts.require_labels && ex.gold_answers.empty()) {
      throw DatasetError("line " + std::to_string(line_no) + ": missing \"answers\" (need at least one)");
    }
    if (!seen.insert(ex.id).second) {
      throw DatasetError("line " + std::to_string(line_no) + ": duplicate id " + ex.id);
    }
    if (opts.check_images && !opts.images.exists(ex.image_ref)) {
      throw DatasetError("example " + ex.id + ": image not found: " + opts.images.path(ex.image_ref).string());
    }
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<VqaExample> load_dataset(const fs::path& path, Split split, const LoadOptions& opts = {}) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset " + path.string());
  try {
    return parse_dataset(in, split, opts);
  } catch (const DatasetError& e) {
    throw DatasetError(path.string() + ": " + e.what());
  }
}

// Canonical single-line form; parse_dataset(serialize_example(x)) == x.
inline std::string serialize_example(const VqaExample& ex) {
  nlohmann::ordered_json j;
  j["id"] = ex.id;
  j["image"] = ex.image_ref;
  j["question"] = ex.question;
  j["answers"] = ex.gold_answers;
  return j.dump();
}

inline std::string serialize_dataset(const std::vector<VqaExample>& examples) {
  std::string out;
  for (const auto& ex : examples) {
    out += serialize_example(ex);
    out += '\n';
  }
  return out;
}

// Uniform sample of min(n, |examples|) distinct records. The output is a
// prefix of a seeded permutation, so it is stable for a fixed seed.
inline std::vector<VqaExample> sample_subset(const std::vector<VqaExample>& examples, std::size_t n,
                                             std::uint64_t seed) {
  rng::Engine eng(seed);
  auto idx = rng::sample_indices(examples.size(), n, eng);
  std::vector<VqaExample> out;
  out.reserve(idx.size());
  for (auto i : idx) out.push_back(examples[i]);
  return out;
}

}  // namespace selfvqa
