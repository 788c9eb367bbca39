// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <deque>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "json.hpp"
#include "selfvqa/prompts.hpp"
#include "selfvqa/util/hash.hpp"
#include "selfvqa/util/io.hpp"
#include "selfvqa/util/text.hpp"

namespace selfvqa::gw {

using Duration = std::chrono::nanoseconds;

enum class Role { Orchestrator, Tool, Judge };

inline std::string_view to_string(Role r) {
  switch (r) {
    case Role::Orchestrator: return "orchestrator";
    case Role::Tool: return "tool";
    case Role::Judge: return "judge";
  }
  return "?";
}

struct Sampling {
  double temperature = 0.0;
  int n_samples = 1;
  int max_output = 2048;
};

struct ModelRequest {
  Prompt parts;
  Sampling sampling;
  Role role = Role::Orchestrator;
};

struct ModelResponse {
  std::vector<std::string> candidates;
  std::string backend_id;
  std::chrono::milliseconds latency{0};
  bool from_cache = false;
};

struct RetryPolicy {
  int max_attempts = 3;
  std::chrono::milliseconds backoff{500};
};

struct BackendConfig {
  std::string backend_id;
  std::string endpoint;
  std::string auth_env;  // name of the env var holding the credential
  std::string model;
  double rate_limit = 1.0;  // requests per second
  std::chrono::milliseconds timeout{60000};
  RetryPolicy retry;
  int max_in_flight = 8;
};

class GatewayError : public std::runtime_error {
 public:
  enum class Kind { Registration, Auth, Timeout, Transport, MalformedReply, ScriptedMiss };

  GatewayError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

  Kind kind() const { return kind_; }
  bool transient() const { return kind_ == Kind::Timeout || kind_ == Kind::Transport; }

 private:
  Kind kind_;
};

inline std::string_view to_string(GatewayError::Kind k) {
  switch (k) {
    case GatewayError::Kind::Registration: return "registration";
    case GatewayError::Kind::Auth: return "auth";
    case GatewayError::Kind::Timeout: return "timeout";
    case GatewayError::Kind::Transport: return "transport";
    case GatewayError::Kind::MalformedReply: return "malformed_reply";
    case GatewayError::Kind::ScriptedMiss: return "scripted_miss";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Clocks

class Clock {
 public:
  virtual ~Clock() = default;
  virtual Duration now() const = 0;
  virtual void sleep_until(Duration t) = 0;
};

class SteadyClock final : public Clock {
 public:
  Duration now() const override { return std::chrono::steady_clock::now().time_since_epoch(); }
  void sleep_until(Duration t) override {
    std::this_thread::sleep_until(std::chrono::steady_clock::time_point(
        std::chrono::duration_cast<std::chrono::steady_clock::duration>(t)));
  }
};

// Manually driven clock. Sleeping jumps time forward instead of blocking.
class FakeClock final : public Clock {
 public:
  Duration now() const override {
    std::lock_guard lock(mu_);
    return now_;
  }
  void sleep_until(Duration t) override {
    std::lock_guard lock(mu_);
    if (t > now_) now_ = t;
  }
  void advance(Duration d) {
    std::lock_guard lock(mu_);
    now_ += d;
  }

 private:
  mutable std::mutex mu_;
  Duration now_{0};
};

// ---------------------------------------------------------------------------
// Rate limiting

// Sliding-window limiter. For r >= 1 any one-second window admits at most
// ceil(r) calls; for r < 1 consecutive calls are spaced 1/r seconds apart.
class RateLimiter {
 public:
  RateLimiter(double rate_per_second, Clock& clock) : clock_(clock) {
    if (!(rate_per_second > 0)) throw std::invalid_argument("rate limit must be positive");
    if (rate_per_second >= 1.0) {
      cap_ = static_cast<std::size_t>(std::ceil(rate_per_second));
      window_ = std::chrono::seconds(1);
    } else {
      cap_ = 1;
      window_ = std::chrono::duration_cast<Duration>(std::chrono::duration<double>(1.0 / rate_per_second));
    }
  }

  // Blocks until a slot is free and returns the admitted time.
  Duration acquire() {
    Duration slot;
    {
      std::lock_guard lock(mu_);
      const auto now = clock_.now();
      while (admitted_.size() > cap_ && admitted_.front() + window_ <= now) admitted_.pop_front();
      slot = now;
      if (admitted_.size() >= cap_) slot = std::max(slot, admitted_[admitted_.size() - cap_] + window_);
      if (!admitted_.empty()) slot = std::max(slot, admitted_.back());
      admitted_.push_back(slot);
    }
    clock_.sleep_until(slot);
    return slot;
  }

  std::size_t capacity() const { return cap_; }
  Duration window() const { return window_; }

 private:
  Clock& clock_;
  std::size_t cap_ = 1;
  Duration window_{};
  std::mutex mu_;
  std::deque<Duration> admitted_;
};

// ---------------------------------------------------------------------------
// Backends

class Backend {
 public:
  virtual ~Backend() = default;
  virtual ModelResponse generate(const ModelRequest& request) = 0;
  // Remote backends need a credential and go through rate limiting.
  virtual bool remote() const { return false; }
};

namespace match {

using Matcher = std::function<bool(const ModelRequest&)>;

inline Matcher any() {
  return [](const ModelRequest&) { return true; };
}
inline Matcher contains(std::string needle) {
  return [needle = std::move(needle)](const ModelRequest& r) {
    for (const auto& p : r.parts) {
      if (!p.is_image() && text::contains(p.payload, needle)) return true;
    }
    return false;
  };
}
// Matches against the last text part only (the target question, or the
// refinement instruction).
inline Matcher final_contains(std::string needle) {
  return [needle = std::move(needle)](const ModelRequest& r) {
    for (auto it = r.parts.rbegin(); it != r.parts.rend(); ++it) {
      if (!it->is_image()) return text::contains(it->payload, needle);
    }
    return false;
  };
}
inline Matcher role(Role role) {
  return [role](const ModelRequest& r) { return r.role == role; };
}
inline Matcher min_images(std::size_t n) {
  return [n](const ModelRequest& r) { return count_images(r.parts) >= n; };
}
inline Matcher max_images(std::size_t n) {
  return [n](const ModelRequest& r) { return count_images(r.parts) <= n; };
}
inline Matcher negate(Matcher m) {
  return [m = std::move(m)](const ModelRequest& r) { return !m(r); };
}
inline Matcher all_of(std::vector<Matcher> ms) {
  return [ms = std::move(ms)](const ModelRequest& r) {
    for (const auto& m : ms) {
      if (!m(r)) return false;
    }
    return true;
  };
}

}  // namespace match

struct ScriptRule {
  match::Matcher matcher;
  std::vector<std::string> replies;  // served cyclically, one per sample
  std::string name;
};

/**
 * Deterministic test double. Rules are tried in order and the first match
 * answers; each rule hands out its replies round-robin, one per requested
 * sample. Every call is logged, including misses.
 */
class ScriptedBackend final : public Backend {
 public:
  struct Invocation {
    ModelRequest request;
    std::string rule;  // empty on a miss
  };

  ScriptedBackend() = default;
  explicit ScriptedBackend(std::vector<ScriptRule> rules) : rules_(std::move(rules)) { cursors_.resize(rules_.size()); }

  void add_rule(ScriptRule rule) {
    std::lock_guard lock(mu_);
    rules_.push_back(std::move(rule));
    cursors_.push_back(0);
  }

  ModelResponse generate(const ModelRequest& request) override {
    std::lock_guard lock(mu_);
    for (std::size_t i = 0; i < rules_.size(); ++i) {
      if (!rules_[i].matcher(request)) continue;
      log_.push_back({request, rules_[i].name.empty() ? "rule" + std::to_string(i) : rules_[i].name});
      const auto& replies = rules_[i].replies;
      if (replies.empty()) throw GatewayError(GatewayError::Kind::MalformedReply, "scripted rule has no replies");
      ModelResponse resp;
      resp.backend_id = "scripted";
      const int n = std::max(1, request.sampling.n_samples);
      for (int k = 0; k < n; ++k) {
        resp.candidates.push_back(replies[cursors_[i] % replies.size()]);
        ++cursors_[i];
      }
      return resp;
    }
    log_.push_back({request, {}});
    auto snippet = joined_text(request.parts);
    if (snippet.size() > 160) snippet = "..." + snippet.substr(snippet.size() - 160);
    throw GatewayError(GatewayError::Kind::ScriptedMiss, "no scripted rule matches request: " + snippet);
  }

  std::vector<Invocation> invocations() const {
    std::lock_guard lock(mu_);
    return log_;
  }
  std::size_t invocation_count() const {
    std::lock_guard lock(mu_);
    return log_.size();
  }
  void clear_log() {
    std::lock_guard lock(mu_);
    log_.clear();
  }

  // Script file form:
  //   {"rules": [{"name": "...", "contains": [...], "not_contains": [...],
  //               "final_contains": [...], "role": "orchestrator",
  //               "min_images": 5, "max_images": 1, "replies": [...]}]}
  static std::unique_ptr<ScriptedBackend> from_json(const nlohmann::json& script) {
    auto backend = std::make_unique<ScriptedBackend>();
    for (const auto& r : script.at("rules")) {
      std::vector<match::Matcher> ms;
      for (const auto& s : r.value("contains", nlohmann::json::array())) ms.push_back(match::contains(s));
      for (const auto& s : r.value("not_contains", nlohmann::json::array()))
        ms.push_back(match::negate(match::contains(s)));
      for (const auto& s : r.value("final_contains", nlohmann::json::array())) ms.push_back(match::final_contains(s));
      if (r.contains("role")) {
        auto role = r["role"].get<std::string>();
        ms.push_back(match::role(role == "tool" ? Role::Tool : role == "judge" ? Role::Judge : Role::Orchestrator));
      }
      if (r.contains("min_images")) ms.push_back(match::min_images(r["min_images"].get<std::size_t>()));
      if (r.contains("max_images")) ms.push_back(match::max_images(r["max_images"].get<std::size_t>()));
      ScriptRule rule;
      rule.matcher = match::all_of(std::move(ms));
      rule.replies = r.at("replies").get<std::vector<std::string>>();
      rule.name = r.value("name", "");
      backend->add_rule(std::move(rule));
    }
    return backend;
  }

 private:
  mutable std::mutex mu_;
  std::vector<ScriptRule> rules_;
  std::vector<std::size_t> cursors_;
  std::vector<Invocation> log_;
};

// ---------------------------------------------------------------------------
// Cache

// Canonical request text. Part order is preserved; the role is not part of
// the key.
inline std::string canonical_request(std::string_view backend_id, const ModelRequest& req) {
  nlohmann::ordered_json j;
  j["backend"] = backend_id;
  auto parts = nlohmann::json::array();
  for (const auto& p : req.parts) parts.push_back({p.is_image() ? "image" : "text", p.payload});
  j["parts"] = parts;
  j["sampling"] = {{"temperature", req.sampling.temperature},
                   {"n_samples", req.sampling.n_samples},
                   {"max_output", req.sampling.max_output}};
  return j.dump();
}

inline std::string cache_key(std::string_view backend_id, const ModelRequest& req) {
  return hash::sha256_hex(canonical_request(backend_id, req));
}

// Content-addressed response store, in memory and optionally mirrored to a
// directory of `<aa>/<key>.json` records.
class ResponseCache {
 public:
  ResponseCache() = default;
  explicit ResponseCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

  std::optional<ModelResponse> lookup(const std::string& key, const std::string& canonical) {
    std::lock_guard lock(mu_);
    if (auto it = mem_.find(key); it != mem_.end()) return it->second;
    if (dir_.empty()) return std::nullopt;
    auto path = record_path(key);
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    auto rec = io::read_json(path);
    if (rec.value("request", "") != canonical) return std::nullopt;
    ModelResponse resp;
    resp.candidates = rec.at("response").at("candidates").get<std::vector<std::string>>();
    resp.backend_id = rec.at("response").value("backend_id", "");
    resp.latency = std::chrono::milliseconds(rec.at("response").value("latency_ms", 0));
    mem_[key] = resp;
    return resp;
  }

  void store(const std::string& key, const std::string& canonical, const ModelResponse& resp) {
    std::lock_guard lock(mu_);
    mem_[key] = resp;
    if (dir_.empty()) return;
    nlohmann::ordered_json rec;
    rec["key"] = key;
    rec["request"] = canonical;
    rec["response"] = {{"candidates", resp.candidates},
                       {"backend_id", resp.backend_id},
                       {"latency_ms", resp.latency.count()}};
    io::write_file(record_path(key), rec.dump(2) + "\n");
  }

  std::size_t size() const {
    std::lock_guard lock(mu_);
    return mem_.size();
  }

 private:
  std::filesystem::path record_path(const std::string& key) const { return dir_ / key.substr(0, 2) / (key + ".json"); }

  mutable std::mutex mu_;
  std::filesystem::path dir_;
  std::map<std::string, ModelResponse> mem_;
};

// ---------------------------------------------------------------------------
// Gateway

/**
 * Routes requests to registered backends.
 *
 * Remote backends are checked for their credential, rate limited and retried
 * on transient transport failures. Well-formed replies are never retried.
 * Concurrent callers are bounded by each backend's in-flight ceiling.
 */
class Gateway {
 public:
  struct Stats {
    std::size_t backend_calls = 0;
    std::size_t cache_hits = 0;
    std::size_t retries = 0;
  };

  explicit Gateway(std::shared_ptr<Clock> clock = std::make_shared<SteadyClock>()) : clock_(std::move(clock)) {}

  void enable_cache(std::filesystem::path dir = {}) { cache_ = std::make_unique<ResponseCache>(std::move(dir)); }
  void disable_cache() { cache_.reset(); }
  bool cache_enabled() const { return cache_ != nullptr; }

  void register_backend(BackendConfig cfg, std::shared_ptr<Backend> backend) {
    if (cfg.backend_id.empty()) throw GatewayError(GatewayError::Kind::Registration, "backend id is empty");
    if (!(cfg.rate_limit > 0)) {
      throw GatewayError(GatewayError::Kind::Registration, "backend " + cfg.backend_id + ": rate_limit must be > 0");
    }
    if (cfg.timeout.count() <= 0) {
      throw GatewayError(GatewayError::Kind::Registration, "backend " + cfg.backend_id + ": timeout must be > 0");
    }
    auto entry = std::make_shared<Entry>(std::move(cfg), std::move(backend), *clock_);
    std::lock_guard lock(mu_);
    auto id = entry->config.backend_id;
    backends_[id] = std::move(entry);
  }

  bool has_backend(std::string_view id) const {
    std::lock_guard lock(mu_);
    return backends_.count(std::string(id)) != 0;
  }

  ModelResponse generate(std::string_view backend_id, const ModelRequest& request) {
    if (request.parts.empty()) throw std::invalid_argument("model request has no parts");
    if (request.sampling.n_samples < 1) throw std::invalid_argument("n_samples must be >= 1");
    auto entry = find(backend_id);
    const auto& cfg = entry->config;
    if (entry->backend->remote() && !cfg.auth_env.empty() && std::getenv(cfg.auth_env.c_str()) == nullptr) {
      throw GatewayError(GatewayError::Kind::Auth,
                         "backend " + cfg.backend_id + ": credential variable " + cfg.auth_env + " is not set");
    }
    entry->in_flight.acquire();
    struct Release {
      std::counting_semaphore<1024>& s;
      ~Release() { s.release(); }
    } release{entry->in_flight};

    const int attempts = std::max(1, cfg.retry.max_attempts);
    for (int attempt = 1;; ++attempt) {
      if (entry->backend->remote()) entry->limiter.acquire();
      const auto start = clock_->now();
      try {
        bump(&Stats::backend_calls);
        auto resp = entry->backend->generate(request);
        if (resp.candidates.empty()) {
          throw GatewayError(GatewayError::Kind::MalformedReply, "backend " + cfg.backend_id + " returned no candidates");
        }
        if (resp.candidates.size() > static_cast<std::size_t>(request.sampling.n_samples)) {
          resp.candidates.resize(static_cast<std::size_t>(request.sampling.n_samples));
        }
        resp.backend_id = cfg.backend_id;
        resp.latency = std::chrono::duration_cast<std::chrono::milliseconds>(clock_->now() - start);
        return resp;
      } catch (const GatewayError& e) {
        if (!e.transient() || attempt >= attempts) throw;
        bump(&Stats::retries);
        clock_->sleep_until(clock_->now() + cfg.retry.backoff * (1 << (attempt - 1)));
      }
    }
  }

  ModelResponse cached_generate(std::string_view backend_id, const ModelRequest& request) {
    if (!cache_) return generate(backend_id, request);
    find(backend_id);
    auto canonical = canonical_request(backend_id, request);
    auto key = hash::sha256_hex(canonical);
    if (auto hit = cache_->lookup(key, canonical)) {
      bump(&Stats::cache_hits);
      hit->from_cache = true;
      return *hit;
    }
    auto resp = generate(backend_id, request);
    cache_->store(key, canonical, resp);
    return resp;
  }

  Stats stats() const {
    std::lock_guard lock(mu_);
    return stats_;
  }

  Clock& clock() { return *clock_; }

 private:
  struct Entry {
    Entry(BackendConfig c, std::shared_ptr<Backend> b, Clock& clock)
        : config(std::move(c)),
          backend(std::move(b)),
          limiter(config.rate_limit, clock),
          in_flight(std::clamp(config.max_in_flight, 1, 1024)) {}
    BackendConfig config;
    std::shared_ptr<Backend> backend;
    RateLimiter limiter;
    std::counting_semaphore<1024> in_flight;
  };

  std::shared_ptr<Entry> find(std::string_view id) const {
    std::lock_guard lock(mu_);
    auto it = backends_.find(std::string(id));
    if (it == backends_.end()) {
      throw GatewayError(GatewayError::Kind::Registration, "backend not registered: " + std::string(id));
    }
    return it->second;
  }

  void bump(std::size_t Stats::*field) {
    std::lock_guard lock(mu_);
    ++(stats_.*field);
  }

  std::shared_ptr<Clock> clock_;
  mutable std::mutex mu_;
  std::map<std::string, std::shared_ptr<Entry>> backends_;
  std::unique_ptr<ResponseCache> cache_;
  Stats stats_;
};

}  // namespace selfvqa::gw
