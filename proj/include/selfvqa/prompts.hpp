// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/run_result.hpp"
#include "selfvqa/util/hash.hpp"
#include "selfvqa/util/io.hpp"
#include "selfvqa/util/text.hpp"

namespace selfvqa {

struct PromptPart {
  enum class Kind { Text, ImageSlot };
  Kind kind = Kind::Text;
  std::string payload;  // text, or the image reference for ImageSlot

  static PromptPart text(std::string t) { return {Kind::Text, std::move(t)}; }
  static PromptPart image(std::string ref) { return {Kind::ImageSlot, std::move(ref)}; }

  bool is_image() const { return kind == Kind::ImageSlot; }
  bool operator==(const PromptPart&) const = default;
};

using Prompt = std::vector<PromptPart>;

inline std::size_t count_images(std::span<const PromptPart> parts) {
  std::size_t n = 0;
  for (const auto& p : parts) n += p.is_image() ? 1 : 0;
  return n;
}

// Concatenation of all text parts, newline separated.
inline std::string joined_text(std::span<const PromptPart> parts) {
  std::string out;
  for (const auto& p : parts) {
    if (p.is_image()) continue;
    if (!out.empty()) out += '\n';
    out += p.payload;
  }
  return out;
}

inline nlohmann::json to_json(std::span<const PromptPart> parts) {
  auto arr = nlohmann::json::array();
  for (const auto& p : parts) {
    nlohmann::json j;
    j["kind"] = p.is_image() ? "image" : "text";
    j["payload"] = p.payload;
    arr.push_back(j);
  }
  return arr;
}

// The zero-shot prompt family that bootstraps an environment.
struct SeedKind {
  enum class Kind { PoT, ToolApi, DirectQa };
  Kind kind = Kind::PoT;
  std::optional<std::string> tool_backend;  // required iff ToolApi

  static SeedKind pot() { return {Kind::PoT, std::nullopt}; }
  static SeedKind tool(std::string backend) { return {Kind::ToolApi, std::move(backend)}; }
  static SeedKind direct() { return {Kind::DirectQa, std::nullopt}; }

  bool runs_code() const { return kind != Kind::DirectQa; }

  // Stable identifier used in directory names and pool ids.
  std::string id() const {
    switch (kind) {
      case Kind::PoT: return "pot";
      case Kind::ToolApi: return "tool-" + tool_backend.value_or("");
      case Kind::DirectQa: return "direct";
    }
    return "?";
  }

  static SeedKind parse(std::string_view id) {
    if (id == "pot") return pot();
    if (id == "direct") return direct();
    if (text::starts_with(id, "tool-") && id.size() > 5) return tool(std::string(id.substr(5)));
    throw std::invalid_argument("unknown seed kind: " + std::string(id));
  }

  bool operator==(const SeedKind&) const = default;
};

// A solved training example eligible for few-shot prompting. Direct-QA
// exemplars carry no program.
struct Exemplar {
  std::string example_id;
  std::string image_ref;
  std::string question;
  std::string program;
  std::string answer;
  SeedKind seed;
  std::size_t step_index = 0;

  bool operator==(const Exemplar&) const = default;
};

inline nlohmann::ordered_json to_json(const Exemplar& e) {
  nlohmann::ordered_json j;
  j["example_id"] = e.example_id;
  j["image"] = e.image_ref;
  j["question"] = e.question;
  j["program"] = e.program;
  j["answer"] = e.answer;
  j["seed"] = e.seed.id();
  j["step"] = e.step_index;
  return j;
}

inline Exemplar exemplar_from_json(const nlohmann::json& j) {
  Exemplar e;
  e.example_id = j.at("example_id").get<std::string>();
  e.image_ref = j.at("image").get<std::string>();
  e.question = j.at("question").get<std::string>();
  e.program = j.value("program", "");
  e.answer = j.at("answer").get<std::string>();
  e.seed = SeedKind::parse(j.at("seed").get<std::string>());
  e.step_index = j.value("step", std::size_t{0});
  return e;
}

enum class RefinementClass { MissingAnswerVar, UnresolvedName, Generic };

inline std::string_view to_string(RefinementClass c) {
  switch (c) {
    case RefinementClass::MissingAnswerVar: return "missing_answer_var";
    case RefinementClass::UnresolvedName: return "unresolved_name";
    case RefinementClass::Generic: return "generic";
  }
  return "?";
}

class PromptError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Template ids known to the renderer.
namespace tmpl {
inline constexpr std::string_view kPotZeroShot = "pot_zero_shot";
inline constexpr std::string_view kToolZeroShot = "tool_zero_shot";
inline constexpr std::string_view kInterface = "image_object_interface";
inline constexpr std::string_view kRefineMissing = "refine_missing_answer_var";
inline constexpr std::string_view kRefineName = "refine_name_error";
inline constexpr std::string_view kRefineGeneric = "refine_generic";
inline constexpr std::string_view kJudge = "judge";
inline constexpr std::string_view kDirectQa = "direct_qa";
inline constexpr std::string_view kToolQuery = "tool_query";
inline constexpr std::string_view kToolDescribe = "tool_describe";
}  // namespace tmpl

/**
 * Immutable set of prompt templates loaded from a directory.
 *
 * The directory holds `manifest.json` mapping each template id to a file and
 * its expected SHA-256. Loading fails if any file's digest differs, so an
 * edited template can never be used silently.
 */
class TemplateStore {
 public:
  static TemplateStore load(const std::filesystem::path& dir) {
    TemplateStore store;
    auto manifest = io::read_json(dir / "manifest.json");
    for (const auto& [id, entry] : manifest.at("templates").items()) {
      auto file = dir / entry.at("file").get<std::string>();
      auto body = io::read_file(file);
      auto expected = entry.at("sha256").get<std::string>();
      auto actual = hash::sha256_hex(body);
      if (actual != expected) {
        throw PromptError("template " + id + " (" + file.string() + ") hash mismatch: expected " + expected +
                          ", got " + actual);
      }
      store.templates_[id] = std::move(body);
    }
    return store;
  }

  const std::string& get(std::string_view id) const {
    auto it = templates_.find(std::string(id));
    if (it == templates_.end()) throw PromptError("template not registered: " + std::string(id));
    return it->second;
  }

  bool has(std::string_view id) const { return templates_.count(std::string(id)) != 0; }

 private:
  std::map<std::string, std::string> templates_;
};

inline std::string question_text(std::string_view question) { return "Question: " + std::string(question); }

inline std::string answer_text(std::string_view answer) { return "Answer: " + std::string(answer); }

// Which refinement template fits a failed run. Fully successful runs have
// nothing to refine.
inline RefinementClass classify_error(const GuestRunResult& result) {
  if (result.passed()) throw std::invalid_argument("classify_error: run succeeded");
  if (result.missing_answer()) return RefinementClass::MissingAnswerVar;
  const auto type = result.error_type.value_or("");
  if (type == "NameError" || type == "UnboundLocalError") return RefinementClass::UnresolvedName;
  return RefinementClass::Generic;
}

class PromptRenderer {
 public:
  explicit PromptRenderer(TemplateStore store) : store_(std::move(store)) {}

  const TemplateStore& templates() const { return store_; }

  // Seed instructions exactly as stored, with the interface listing spliced
  // into the tool-API template.
  std::string seed_instructions(const SeedKind& seed) const {
    switch (seed.kind) {
      case SeedKind::Kind::PoT: return store_.get(tmpl::kPotZeroShot);
      case SeedKind::Kind::DirectQa: return store_.get(tmpl::kDirectQa);
      case SeedKind::Kind::ToolApi: {
        if (!seed.tool_backend) throw PromptError("tool-API seed without a tool backend");
        std::string iface(text::trim(store_.get(tmpl::kInterface)));
        return text::substitute(store_.get(tmpl::kToolZeroShot), [&](std::string_view name) -> const std::string* {
          return name == "INTERFACE_DESCRIPTION_PROMPT" ? &iface : nullptr;
        });
      }
    }
    throw PromptError("unknown seed kind");
  }

  Prompt render_zero_shot(const SeedKind& seed, const VqaExample& example) const {
    return {PromptPart::text(seed_instructions(seed)), PromptPart::image(example.image_ref),
            PromptPart::text(question_text(example.question))};
  }

  // Instructions, then image/question/solution per exemplar in the given
  // order, then the target image and question: 1 + 3k + 2 parts.
  Prompt render_few_shot(std::span<const Exemplar> pool_sample, const VqaExample& example) const {
    if (pool_sample.empty()) throw PromptError("render_few_shot: empty exemplar sample");
    const auto& seed = pool_sample.front().seed;
    Prompt parts;
    parts.reserve(3 * pool_sample.size() + 3);
    parts.push_back(PromptPart::text(seed_instructions(seed)));
    for (const auto& ex : pool_sample) {
      parts.push_back(PromptPart::image(ex.image_ref));
      parts.push_back(PromptPart::text(question_text(ex.question)));
      parts.push_back(PromptPart::text(seed.runs_code() ? ex.program : answer_text(ex.answer)));
    }
    parts.push_back(PromptPart::image(example.image_ref));
    parts.push_back(PromptPart::text(question_text(example.question)));
    return parts;
  }

  Prompt render_refinement(RefinementClass cls, std::string_view prior_program, std::string_view error_type,
                           std::string_view error_trace, std::string_view answer_var) const {
    std::string_view id = cls == RefinementClass::MissingAnswerVar ? tmpl::kRefineMissing
                          : cls == RefinementClass::UnresolvedName ? tmpl::kRefineName
                                                                   : tmpl::kRefineGeneric;
    const std::string var(answer_var), type(error_type), trace(error_trace);
    auto body = text::substitute(store_.get(id), [&](std::string_view name) -> const std::string* {
      if (name == "answer_var") return &var;
      if (name == "error_type") return &type;
      if (name == "error_trace") return &trace;
      return nullptr;
    });
    return {PromptPart::text(std::string(prior_program)), PromptPart::text(std::move(body))};
  }

  static std::string numbered_candidates(std::span<const std::string> candidates) {
    std::string out;
    for (std::size_t i = 0; i < candidates.size(); ++i) {
      if (i) out += '\n';
      out += "Answer " + std::to_string(i + 1) + ": " + candidates[i];
    }
    return out;
  }

  Prompt render_judge(const VqaExample& example, std::span<const std::string> candidates) const {
    if (candidates.empty()) throw PromptError("render_judge: no candidates");
    return {PromptPart::text(store_.get(tmpl::kJudge)), PromptPart::image(example.image_ref),
            PromptPart::text(question_text(example.question)), PromptPart::text(numbered_candidates(candidates))};
  }

  // Request sent to the tool model for one ImageObject call.
  Prompt render_tool_call(ToolMethod method, std::string_view question, std::string_view image_ref) const {
    std::string body;
    if (method == ToolMethod::Describe) {
      body = store_.get(tmpl::kToolDescribe);
    } else {
      const std::string q(question);
      body = text::substitute(store_.get(tmpl::kToolQuery),
                              [&](std::string_view name) -> const std::string* { return name == "question" ? &q : nullptr; });
    }
    return {PromptPart::text(std::move(body)), PromptPart::image(std::string(image_ref))};
  }

 private:
  TemplateStore store_;
};

// Pulls the program out of a model reply: the first fenced code block if
// there is one, else the whole reply.
inline std::string extract_program(std::string_view reply) {
  auto open = reply.find("```");
  if (open == std::string_view::npos) return std::string(text::trim(reply));
  auto body_start = reply.find('\n', open);
  if (body_start == std::string_view::npos) return std::string(text::trim(reply));
  ++body_start;
  auto close = reply.find("```", body_start);
  auto body = reply.substr(body_start, close == std::string_view::npos ? std::string_view::npos : close - body_start);
  while (!body.empty() && (body.back() == '\n' || body.back() == '\r' || body.back() == ' ')) body.remove_suffix(1);
  return std::string(body);
}

}  // namespace selfvqa
