#pragma once

// Newline-delimited JSON request/response over a child process's stdio.

#include <csignal>
#include <cstdio>
#include <mutex>
#include <string>
#include <vector>

#include <fcntl.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "cgd/common.hpp"

namespace cgd {

struct AdapterInfo {
  std::string name;
  std::string version;
  std::size_t max_context = 0;
  bool concurrent = false;
  std::string turn_separator = "\n";
};

class JsonProcess {
 public:
  explicit JsonProcess(std::vector<std::string> argv) : argv_(std::move(argv)) {
    if (argv_.empty()) throw AdapterError("empty adapter command");
    spawn();
  }
  JsonProcess(const JsonProcess&) = delete;
  JsonProcess& operator=(const JsonProcess&) = delete;
  ~JsonProcess() { shutdown(); }

  /// Sends one request line and blocks for one response line. Serialized per process.
  nlohmann::json request(const nlohmann::json& req) {
    std::lock_guard lock(mu_);
    const std::string line = req.dump() + "\n";
    std::size_t off = 0;
    while (off < line.size()) {
      const auto n = ::write(to_child_, line.data() + off, line.size() - off);
      if (n <= 0) throw AdapterError("adapter '" + argv_[0] + "' closed its input");
      off += static_cast<std::size_t>(n);
    }
    std::string reply;
    for (;;) {
      auto pos = buffer_.find('\n');
      if (pos != std::string::npos) {
        reply = buffer_.substr(0, pos);
        buffer_.erase(0, pos + 1);
        break;
      }
      char chunk[4096];
      const auto n = ::read(from_child_, chunk, sizeof chunk);
      if (n <= 0) throw AdapterError("adapter '" + argv_[0] + "' exited without replying");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
    nlohmann::json out;
    try {
      out = nlohmann::json::parse(reply);
    } catch (const nlohmann::json::parse_error&) {
      throw AdapterError("adapter '" + argv_[0] + "' sent invalid JSON: " + reply);
    }
    if (out.is_object() && out.contains("error"))
      throw AdapterError("adapter '" + argv_[0] + "': " + out["error"].dump());
    return out;
  }

  AdapterInfo handshake() {
    nlohmann::json r;
    try {
      r = request({{"op", "handshake"}});
    } catch (const AdapterError& e) {
      throw AdapterError(std::string("handshake failed: ") + e.what());
    }
    if (!r.is_object() || !r.contains("name") || !r["name"].is_string() ||
        !r.contains("version") || !r["version"].is_string())
      throw AdapterError("handshake failed: reply lacks name/version");
    AdapterInfo info;
    info.name = r["name"].get<std::string>();
    info.version = r["version"].get<std::string>();
    info.max_context = r.value("max_context", std::size_t{0});
    info.concurrent = r.value("concurrent", false);
    info.turn_separator = r.value("turn_separator", std::string("\n"));
    return info;
  }

 private:
  void spawn() {
    int in_pipe[2], out_pipe[2];
    if (::pipe(in_pipe) != 0 || ::pipe(out_pipe) != 0)
      throw AdapterError("cannot create pipes for adapter");
    std::signal(SIGPIPE, SIG_IGN);
    pid_ = ::fork();
    if (pid_ < 0) throw AdapterError("fork failed for adapter");
    if (pid_ == 0) {
      ::dup2(in_pipe[0], STDIN_FILENO);
      ::dup2(out_pipe[1], STDOUT_FILENO);
      ::close(in_pipe[0]);
      ::close(in_pipe[1]);
      ::close(out_pipe[0]);
      ::close(out_pipe[1]);
      std::vector<char*> args;
      for (auto& a : argv_) args.push_back(a.data());
      args.push_back(nullptr);
      ::execvp(args[0], args.data());
      std::_Exit(127);
    }
    ::close(in_pipe[0]);
    ::close(out_pipe[1]);
    to_child_ = in_pipe[1];
    from_child_ = out_pipe[0];
    ::fcntl(to_child_, F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child_, F_SETFD, FD_CLOEXEC);
  }

  void shutdown() noexcept {
    if (to_child_ >= 0) ::close(to_child_);
    if (from_child_ >= 0) ::close(from_child_);
    to_child_ = from_child_ = -1;
    if (pid_ > 0) {
      int status = 0;
      ::waitpid(pid_, &status, 0);
      pid_ = -1;
    }
  }

  std::vector<std::string> argv_;
  pid_t pid_ = -1;
  int to_child_ = -1;
  int from_child_ = -1;
  std::string buffer_;
  std::mutex mu_;
};

/// Splits an adapter command line on whitespace (no quoting).
inline std::vector<std::string> split_command(const std::string& cmd) {
  return whitespace_tokens(cmd);
}

}  // namespace cgd
