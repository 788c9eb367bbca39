// SPDX-FileCopyrightText: 2026 The selfvqa Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/resource.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <functional>
#include <map>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "json.hpp"
#include "selfvqa/run_result.hpp"
#include "selfvqa/util/hash.hpp"

namespace selfvqa::sandbox {

struct GuestProgram {
  struct Origin {
    std::string example_id;
    std::string seed_id;
    std::size_t attempt = 0;
  };

  std::string source;
  std::string answer_var = "ans";
  Origin origin;
};

struct RunLimits {
  std::chrono::milliseconds wall_timeout{30000};
  std::size_t max_tool_calls = 16;
  std::size_t max_output_bytes = 1 << 20;
};

// Answers one ImageObject call. The question is absent for describe().
using ToolHandle = std::function<std::string(ToolMethod, const std::optional<std::string>&)>;

class SandboxError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GuestRunner {
 public:
  virtual ~GuestRunner() = default;
  // `tool` is null for programs that must not call the tool model.
  virtual GuestRunResult run(const GuestProgram& program, const std::string& image_path, const ToolHandle* tool,
                             const RunLimits& limits) = 0;
};

inline std::string fingerprint(std::string_view source) { return hash::sha256_hex(source); }

/**
 * In-process double: returns pre-programmed results keyed by the SHA-256 of
 * the program source. No process is spawned.
 */
class ScriptedRunner final : public GuestRunner {
 public:
  void add(std::string_view source, GuestRunResult result) { add_fingerprint(fingerprint(source), std::move(result)); }

  void add_fingerprint(std::string fp, GuestRunResult result) {
    std::lock_guard lock(mu_);
    script_[std::move(fp)] = std::move(result);
  }

  GuestRunResult run(const GuestProgram& program, const std::string&, const ToolHandle*, const RunLimits&) override {
    std::lock_guard lock(mu_);
    ++runs_;
    auto it = script_.find(fingerprint(program.source));
    if (it == script_.end()) {
      throw SandboxError("scripted runner miss for program from example '" + program.origin.example_id + "'");
    }
    return it->second;
  }

  std::size_t run_count() const {
    std::lock_guard lock(mu_);
    return runs_;
  }

  // {"programs": [{"source": "...", "result": {...}} | {"fingerprint": "...", "result": {...}}]}
  static std::unique_ptr<ScriptedRunner> from_json(const nlohmann::json& script) {
    auto runner = std::make_unique<ScriptedRunner>();
    for (const auto& p : script.at("programs")) {
      auto result = run_result_from_json(p.at("result"));
      if (p.contains("source")) runner->add(p["source"].get<std::string>(), std::move(result));
      else runner->add_fingerprint(p.at("fingerprint").get<std::string>(), std::move(result));
    }
    return runner;
  }

 private:
  mutable std::mutex mu_;
  std::map<std::string, GuestRunResult> script_;
  std::size_t runs_ = 0;
};

namespace detail {

class Fd {
 public:
  Fd() = default;
  explicit Fd(int fd) : fd_(fd) {}
  Fd(const Fd&) = delete;
  Fd& operator=(const Fd&) = delete;
  Fd(Fd&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Fd& operator=(Fd&& o) noexcept {
    if (this != &o) {
      reset();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  ~Fd() { reset(); }
  int get() const { return fd_; }
  void reset() {
    if (fd_ >= 0) ::close(fd_);
    fd_ = -1;
  }

 private:
  int fd_ = -1;
};

using SteadyTime = std::chrono::steady_clock::time_point;

inline int ms_until(SteadyTime deadline) {
  auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
  return left.count() <= 0 ? 0 : static_cast<int>(std::min<long long>(left.count(), 1 << 30));
}

}  // namespace detail

/**
 * Runs each guest in its own child process speaking the line-delimited JSON
 * bridge on stdin/stdout:
 *
 *   host -> guest  {"type":"init","source":...,"answer_var":...,"image_path":...}
 *   guest -> host  {"type":"tool_call","id":n,"method":"answer"|"describe","question":...}
 *   host -> guest  {"type":"tool_result","id":n,"text":...}
 *   guest -> host  {"type":"final","status":"ok"|"error","answer":...,"error_type":...,"error_trace":...}
 *
 * Call ids must increase by one from 1. The child is killed (with its whole
 * process group) on timeout, protocol violations or budget overruns.
 */
class ProcessRunner final : public GuestRunner {
 public:
  explicit ProcessRunner(std::vector<std::string> argv) : argv_(std::move(argv)) {
    if (argv_.empty()) throw std::invalid_argument("guest command is empty");
  }

  GuestRunResult run(const GuestProgram& program, const std::string& image_path, const ToolHandle* tool,
                     const RunLimits& limits) override {
    std::vector<std::string> transcript;
    return run_recorded(program, image_path, tool, limits, transcript);
  }

  // Same as run(), also returning every bridge line in order, prefixed with
  // "> " (host to guest) or "< " (guest to host).
  GuestRunResult run_recorded(const GuestProgram& program, const std::string& image_path, const ToolHandle* tool,
                              const RunLimits& limits, std::vector<std::string>& transcript) {
    const auto start = std::chrono::steady_clock::now();
    const auto deadline = start + limits.wall_timeout;
    Child child = spawn(limits);

    auto finish = [&](GuestRunResult r) {
      child.kill_and_reap();
      r.wall_time = std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start);
      return r;
    };
    auto send = [&](const nlohmann::json& msg) {
      auto line = msg.dump();
      transcript.push_back("> " + line);
      line.push_back('\n');
      return write_all(child.bridge.get(), line, deadline);
    };

    nlohmann::ordered_json init;
    init["type"] = "init";
    init["source"] = program.source;
    init["answer_var"] = program.answer_var;
    init["image_path"] = image_path;
    std::vector<ToolCall> calls;
    if (!send(init)) return finish(guest_gone(child, calls, deadline));

    std::string buf, err_buf;
    std::size_t out_bytes = 0;
    std::size_t next_id = 1;
    bool bridge_open = true;
    for (;;) {
      // Drain complete lines first.
      for (auto nl = buf.find('\n'); nl != std::string::npos; nl = buf.find('\n')) {
        std::string line = buf.substr(0, nl);
        buf.erase(0, nl + 1);
        if (text_is_blank(line)) continue;
        transcript.push_back("< " + line);
        nlohmann::json msg;
        try {
          msg = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
          return finish(with_calls(GuestRunResult::error("BridgeProtocolError", e.what()), calls));
        }
        const auto type = msg.is_object() ? msg.value("type", "") : std::string();
        if (type == "final") {
          auto r = parse_final(msg);
          r.tool_calls = calls;
          return finish(std::move(r));
        }
        if (type != "tool_call") {
          return finish(with_calls(GuestRunResult::error("BridgeProtocolError", "unexpected message: " + line), calls));
        }
        auto id = msg.value("id", std::size_t{0});
        if (id != next_id) {
          return finish(with_calls(GuestRunResult::error("BridgeProtocolError",
                                                         "tool_call id " + std::to_string(id) + ", expected " +
                                                             std::to_string(next_id)),
                                   calls));
        }
        ++next_id;
        if (tool == nullptr) {
          return finish(with_calls(
              GuestRunResult::error("ToolUnavailable", "this program kind has no ImageObject tool"), calls));
        }
        if (calls.size() >= limits.max_tool_calls) {
          return finish(with_calls(GuestRunResult::error("ToolBudgetExceeded", "more than " +
                                                                                   std::to_string(limits.max_tool_calls) +
                                                                                   " tool calls"),
                                   calls));
        }
        ToolCall call;
        call.method = msg.value("method", "answer") == "describe" ? ToolMethod::Describe : ToolMethod::Answer;
        if (call.method == ToolMethod::Answer) {
          if (!msg.contains("question") || !msg["question"].is_string()) {
            return finish(
                with_calls(GuestRunResult::error("BridgeProtocolError", "answer call without a question"), calls));
          }
          call.question = msg["question"].get<std::string>();
        }
        try {
          call.reply = (*tool)(call.method, call.question);
        } catch (const std::exception& e) {
          return finish(with_calls(GuestRunResult::error("ToolError", e.what()), calls));
        }
        calls.push_back(call);
        nlohmann::ordered_json reply;
        reply["type"] = "tool_result";
        reply["id"] = id;
        reply["text"] = call.reply;
        if (!send(reply)) return finish(guest_gone(child, calls, deadline));
      }

      if (!bridge_open) return finish(guest_gone(child, calls, deadline, err_buf));
      const int wait_ms = detail::ms_until(deadline);
      if (wait_ms == 0) return finish(timeout(calls));
      pollfd fds[2] = {{child.bridge.get(), POLLIN, 0}, {child.err.get(), POLLIN, 0}};
      const nfds_t nfds = child.err.get() >= 0 ? 2 : 1;
      int rc = ::poll(fds, nfds, wait_ms);
      if (rc < 0) {
        if (errno == EINTR) continue;
        return finish(with_calls(GuestRunResult::error("SandboxError", std::strerror(errno)), calls));
      }
      if (rc == 0) return finish(timeout(calls));
      if (nfds == 2 && (fds[1].revents & (POLLIN | POLLHUP))) {
        char tmp[4096];
        auto n = ::read(child.err.get(), tmp, sizeof tmp);
        if (n > 0) {
          if (err_buf.size() < limits.max_output_bytes) err_buf.append(tmp, static_cast<std::size_t>(n));
        } else {
          child.err.reset();
        }
      }
      if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
        char tmp[4096];
        auto n = ::read(child.bridge.get(), tmp, sizeof tmp);
        if (n > 0) {
          out_bytes += static_cast<std::size_t>(n);
          if (out_bytes > limits.max_output_bytes) {
            return finish(with_calls(GuestRunResult::error("OutputLimitExceeded", "guest wrote more than " +
                                                                                      std::to_string(limits.max_output_bytes) +
                                                                                      " bytes"),
                                     calls));
          }
          buf.append(tmp, static_cast<std::size_t>(n));
        } else if (n == 0 || (errno != EINTR && errno != EAGAIN)) {
          bridge_open = false;
          if (!buf.empty() && buf.back() != '\n') buf.push_back('\n');
        }
      }
    }
  }

 private:
  struct Child {
    pid_t pid = -1;
    detail::Fd bridge;
    detail::Fd err;
    bool reaped = false;
    int wait_status = 0;

    Child() = default;
    Child(Child&& o) noexcept
        : pid(std::exchange(o.pid, -1)),
          bridge(std::move(o.bridge)),
          err(std::move(o.err)),
          reaped(o.reaped),
          wait_status(o.wait_status) {}
    Child& operator=(Child&&) = delete;

    void kill_and_reap() {
      if (pid <= 0 || reaped) return;
      ::kill(-pid, SIGKILL);
      ::kill(pid, SIGKILL);
      while (::waitpid(pid, &wait_status, 0) < 0 && errno == EINTR) {
      }
      reaped = true;
    }

    // Waits for a voluntary exit until the deadline.
    bool reap_until(detail::SteadyTime deadline) {
      if (reaped) return true;
      for (;;) {
        auto rc = ::waitpid(pid, &wait_status, WNOHANG);
        if (rc == pid) {
          reaped = true;
          ::kill(-pid, SIGKILL);
          return true;
        }
        if (std::chrono::steady_clock::now() >= deadline) return false;
        ::usleep(2000);
      }
    }

    ~Child() { kill_and_reap(); }
  };

  static bool text_is_blank(const std::string& s) {
    return s.find_first_not_of(" \t\r") == std::string::npos;
  }

  static GuestRunResult with_calls(GuestRunResult r, const std::vector<ToolCall>& calls) {
    r.tool_calls = calls;
    return r;
  }

  static GuestRunResult timeout(const std::vector<ToolCall>& calls) {
    GuestRunResult r;
    r.status = RunStatus::Timeout;
    r.error_type = "Timeout";
    r.error_trace = "wall-clock limit exceeded";
    r.tool_calls = calls;
    return r;
  }

  static GuestRunResult guest_gone(Child& child, const std::vector<ToolCall>& calls, detail::SteadyTime deadline,
                                   const std::string& stderr_text = {}) {
    if (!child.reap_until(deadline)) return timeout(calls);
    std::string trace = "guest exited without a final message";
    if (WIFSIGNALED(child.wait_status)) trace += " (signal " + std::to_string(WTERMSIG(child.wait_status)) + ")";
    else if (WIFEXITED(child.wait_status)) trace += " (exit " + std::to_string(WEXITSTATUS(child.wait_status)) + ")";
    if (!stderr_text.empty()) trace += "\n" + stderr_text;
    return with_calls(GuestRunResult::error("GuestCrashed", trace), calls);
  }

  static GuestRunResult parse_final(const nlohmann::json& msg) {
    GuestRunResult r;
    const auto status = msg.value("status", "");
    auto opt_string = [&](const char* key) -> std::optional<std::string> {
      if (!msg.contains(key) || msg[key].is_null()) return std::nullopt;
      return msg[key].is_string() ? msg[key].get<std::string>() : msg[key].dump();
    };
    if (status == "ok") {
      r.status = RunStatus::Ok;
      r.answer = opt_string("answer");
    } else if (status == "error") {
      r.status = RunStatus::Error;
      r.error_type = opt_string("error_type").value_or("Error");
      r.error_trace = opt_string("error_trace").value_or("");
    } else {
      return GuestRunResult::error("BridgeProtocolError", "final message with status '" + status + "'");
    }
    return r;
  }

  static bool write_all(int fd, std::string_view data, detail::SteadyTime deadline) {
    while (!data.empty()) {
      pollfd p{fd, POLLOUT, 0};
      int wait_ms = detail::ms_until(deadline);
      if (wait_ms == 0) return false;
      int rc = ::poll(&p, 1, wait_ms);
      if (rc < 0 && errno == EINTR) continue;
      if (rc <= 0 || (p.revents & (POLLERR | POLLHUP))) return false;
      auto n = ::send(fd, data.data(), data.size(), MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR || errno == EAGAIN) continue;
        return false;
      }
      data.remove_prefix(static_cast<std::size_t>(n));
    }
    return true;
  }

  Child spawn(const RunLimits& limits) const {
    int sv[2];
    if (::socketpair(AF_UNIX, SOCK_STREAM | SOCK_CLOEXEC, 0, sv) != 0) {
      throw SandboxError(std::string("socketpair: ") + std::strerror(errno));
    }
    int ep[2];
    if (::pipe2(ep, O_CLOEXEC) != 0) {
      ::close(sv[0]);
      ::close(sv[1]);
      throw SandboxError(std::string("pipe: ") + std::strerror(errno));
    }
    std::vector<char*> args;
    for (const auto& a : argv_) args.push_back(const_cast<char*>(a.c_str()));
    args.push_back(nullptr);
    const auto cpu_limit = static_cast<rlim_t>(
        std::chrono::duration_cast<std::chrono::seconds>(limits.wall_timeout).count() + 2);

    pid_t pid = ::fork();
    if (pid < 0) {
      ::close(sv[0]);
      ::close(sv[1]);
      ::close(ep[0]);
      ::close(ep[1]);
      throw SandboxError(std::string("fork: ") + std::strerror(errno));
    }
    if (pid == 0) {
      ::setpgid(0, 0);
      ::dup2(sv[1], STDIN_FILENO);
      ::dup2(sv[1], STDOUT_FILENO);
      ::dup2(ep[1], STDERR_FILENO);
      rlimit cpu{cpu_limit, cpu_limit};
      ::setrlimit(RLIMIT_CPU, &cpu);
      ::execvp(args[0], args.data());
      const char msg[] = "exec failed\n";
      [[maybe_unused]] auto w = ::write(STDERR_FILENO, msg, sizeof msg - 1);
      ::_exit(127);
    }
    ::setpgid(pid, pid);
    ::close(sv[1]);
    ::close(ep[1]);
    Child c;
    c.pid = pid;
    c.bridge = detail::Fd(sv[0]);
    c.err = detail::Fd(ep[0]);
    return c;
  }

  std::vector<std::string> argv_;
};

}  // namespace selfvqa::sandbox
