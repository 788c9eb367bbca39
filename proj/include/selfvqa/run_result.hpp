// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace selfvqa {

enum class RunStatus { Ok, Error, Timeout };

inline std::string_view to_string(RunStatus s) {
  switch (s) {
    case RunStatus::Ok: return "ok";
    case RunStatus::Error: return "error";
    case RunStatus::Timeout: return "timeout";
  }
  return "?";
}

inline std::optional<RunStatus> parse_run_status(std::string_view s) {
  if (s == "ok") return RunStatus::Ok;
  if (s == "error") return RunStatus::Error;
  if (s == "timeout") return RunStatus::Timeout;
  return std::nullopt;
}

enum class ToolMethod { Answer, Describe };

struct ToolCall {
  ToolMethod method = ToolMethod::Answer;
  std::optional<std::string> question;  // present iff method == Answer
  std::string reply;

  bool operator==(const ToolCall&) const = default;
};

// Outcome of executing one guest program. An Ok run without an answer means
// the program finished but never assigned the answer variable.
struct GuestRunResult {
  RunStatus status = RunStatus::Error;
  std::optional<std::string> answer;
  std::optional<std::string> error_type;
  std::optional<std::string> error_trace;
  std::vector<ToolCall> tool_calls;
  std::chrono::milliseconds wall_time{0};

  bool passed() const { return status == RunStatus::Ok && answer.has_value(); }
  bool missing_answer() const { return status == RunStatus::Ok && !answer.has_value(); }

  static GuestRunResult ok(std::string answer) {
    GuestRunResult r;
    r.status = RunStatus::Ok;
    r.answer = std::move(answer);
    return r;
  }
  static GuestRunResult error(std::string type, std::string trace = {}) {
    GuestRunResult r;
    r.status = RunStatus::Error;
    r.error_type = std::move(type);
    r.error_trace = std::move(trace);
    return r;
  }
};

inline nlohmann::json to_json(const ToolCall& c) {
  nlohmann::ordered_json j;
  j["method"] = c.method == ToolMethod::Answer ? "answer" : "describe";
  if (c.question) j["question"] = *c.question;
  j["reply"] = c.reply;
  return j;
}

inline ToolCall tool_call_from_json(const nlohmann::json& j) {
  ToolCall c;
  c.method = j.at("method").get<std::string>() == "describe" ? ToolMethod::Describe : ToolMethod::Answer;
  if (j.contains("question") && j["question"].is_string()) c.question = j["question"].get<std::string>();
  c.reply = j.value("reply", "");
  return c;
}

inline nlohmann::ordered_json to_json(const GuestRunResult& r) {
  nlohmann::ordered_json j;
  j["status"] = to_string(r.status);
  j["answer"] = r.answer ? nlohmann::json(*r.answer) : nlohmann::json(nullptr);
  if (r.error_type) j["error_type"] = *r.error_type;
  if (r.error_trace) j["error_trace"] = *r.error_trace;
  auto calls = nlohmann::json::array();
  for (const auto& c : r.tool_calls) calls.push_back(to_json(c));
  j["tool_calls"] = calls;
  return j;
}

inline GuestRunResult run_result_from_json(const nlohmann::json& j) {
  GuestRunResult r;
  auto status = parse_run_status(j.value("status", "error"));
  r.status = status.value_or(RunStatus::Error);
  if (j.contains("answer") && !j["answer"].is_null()) {
    r.answer = j["answer"].is_string() ? j["answer"].get<std::string>() : j["answer"].dump();
  }
  if (j.contains("error_type") && j["error_type"].is_string()) r.error_type = j["error_type"].get<std::string>();
  if (j.contains("error_trace") && j["error_trace"].is_string()) r.error_trace = j["error_trace"].get<std::string>();
  if (j.contains("tool_calls")) {
    for (const auto& c : j["tool_calls"]) r.tool_calls.push_back(tool_call_from_json(c));
  }
  if (r.status == RunStatus::Error && !r.error_type) r.error_type = "Error";
  return r;
}

}  // namespace selfvqa
