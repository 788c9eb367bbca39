// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cstdlib>
#include <memory>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "selfvqa/corpus.hpp"
#include "selfvqa/modelgw.hpp"

namespace selfvqa::gw {

// Splits "scheme://host[:port]/path" into the client base and request path.
inline std::pair<std::string, std::string> split_endpoint(const std::string& url) {
  auto scheme_end = url.find("://");
  auto host_start = scheme_end == std::string::npos ? 0 : scheme_end + 3;
  auto path_start = url.find('/', host_start);
  if (path_start == std::string::npos) return {url, "/"};
  return {url.substr(0, path_start), url.substr(path_start)};
}

inline std::string guess_mime(const std::string& ref) {
  auto dot = ref.rfind('.');
  auto ext = dot == std::string::npos ? std::string() : text::lower(ref.substr(dot + 1));
  if (ext == "jpg" || ext == "jpeg") return "image/jpeg";
  if (ext == "gif") return "image/gif";
  if (ext == "webp") return "image/webp";
  return "image/png";
}

/**
 * Generic JSON-over-HTTP adapter.
 *
 * Request body:
 *   {"model": ..., "role": ..., "temperature": ..., "n": ..., "max_output_tokens": ...,
 *    "parts": [{"type": "text", "text": ...} | {"type": "image", "mime": ..., "data": <base64>}]}
 * Reply body: {"candidates": ["...", ...]} (entries may also be {"text": ...}).
 * The credential is sent as a bearer token.
 */
class HttpBackend final : public Backend {
 public:
  HttpBackend(BackendConfig config, ImageStore images) : config_(std::move(config)), images_(std::move(images)) {}

  bool remote() const override { return true; }

  nlohmann::json request_body(const ModelRequest& req) const {
    nlohmann::json body;
    body["model"] = config_.model;
    body["role"] = to_string(req.role);
    body["temperature"] = req.sampling.temperature;
    body["n"] = req.sampling.n_samples;
    body["max_output_tokens"] = req.sampling.max_output;
    auto parts = nlohmann::json::array();
    for (const auto& p : req.parts) {
      if (p.is_image()) {
        parts.push_back({{"type", "image"},
                         {"mime", guess_mime(p.payload)},
                         {"data", httplib::detail::base64_encode(images_.bytes(p.payload))}});
      } else {
        parts.push_back({{"type", "text"}, {"text", p.payload}});
      }
    }
    body["parts"] = parts;
    return body;
  }

  ModelResponse generate(const ModelRequest& req) override {
    auto [base, path] = split_endpoint(config_.endpoint);
    httplib::Client client(base);
    auto secs = std::chrono::duration_cast<std::chrono::seconds>(config_.timeout).count();
    auto usecs = std::chrono::duration_cast<std::chrono::microseconds>(config_.timeout).count() % 1000000;
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    httplib::Headers headers;
    if (!config_.auth_env.empty()) {
      if (const char* token = std::getenv(config_.auth_env.c_str())) {
        headers.emplace("Authorization", std::string("Bearer ") + token);
      }
    }
    auto res = client.Post(path, headers, request_body(req).dump(), "application/json");
    if (!res) {
      auto err = res.error();
      auto kind = (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read)
                      ? GatewayError::Kind::Timeout
                      : GatewayError::Kind::Transport;
      throw GatewayError(kind, "backend " + config_.backend_id + ": " + httplib::to_string(err));
    }
    if (res->status == 401 || res->status == 403) {
      throw GatewayError(GatewayError::Kind::Auth,
                         "backend " + config_.backend_id + ": HTTP " + std::to_string(res->status));
    }
    if (res->status == 408 || res->status == 429 || res->status >= 500) {
      throw GatewayError(GatewayError::Kind::Transport,
                         "backend " + config_.backend_id + ": HTTP " + std::to_string(res->status));
    }
    if (res->status != 200) {
      throw GatewayError(GatewayError::Kind::MalformedReply,
                         "backend " + config_.backend_id + ": unexpected HTTP " + std::to_string(res->status));
    }
    ModelResponse out;
    try {
      auto j = nlohmann::json::parse(res->body);
      for (const auto& c : j.at("candidates")) {
        out.candidates.push_back(c.is_string() ? c.get<std::string>() : c.at("text").get<std::string>());
      }
    } catch (const nlohmann::json::exception& e) {
      throw GatewayError(GatewayError::Kind::MalformedReply, "backend " + config_.backend_id + ": " + e.what());
    }
    out.backend_id = config_.backend_id;
    return out;
  }

 private:
  BackendConfig config_;
  ImageStore images_;
};

}  // namespace selfvqa::gw
