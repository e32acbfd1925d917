#pragma once

// Client for detectors living in another process, reached either as a
// subprocess speaking over stdin/stdout or over TCP.
//
// Endpoint syntax:
//   tcp://HOST:PORT
//   exec:COMMAND ARGS...   (run through /bin/sh -c)

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <signal.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <string_view>
#include <thread>

#include "spooflab/detector.hpp"
#include "spooflab/errors.hpp"
#include "spooflab/wire_protocol.hpp"

namespace spooflab {

struct ExternalDetectorOptions {
  int timeout_ms = 30000;  // per request, covering both write and read
  int retries = 1;         // extra attempts after a connection failure or timeout
};

// Bidirectional newline-framed byte stream.
class LineTransport {
 public:
  virtual ~LineTransport() = default;
  virtual void write_line(std::string_view line, std::chrono::steady_clock::time_point deadline) = 0;
  virtual std::string read_line(std::chrono::steady_clock::time_point deadline) = 0;
};

namespace detail {

inline int remaining_ms(std::chrono::steady_clock::time_point deadline) {
  const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
  return static_cast<int>(std::max<std::int64_t>(0, left.count()));
}

inline void set_nonblocking(int fd) { ::fcntl(fd, F_SETFL, ::fcntl(fd, F_GETFL, 0) | O_NONBLOCK); }

// Shared poll-driven framing over a pair of file descriptors.
class FdLineStream {
 public:
  FdLineStream(int read_fd, int write_fd, std::string endpoint, bool is_socket)
      : read_fd_(read_fd), write_fd_(write_fd), endpoint_(std::move(endpoint)), socket_(is_socket) {}

  void write_all(std::string_view data, std::chrono::steady_clock::time_point deadline) {
    std::size_t off = 0;
    while (off < data.size()) {
      pollfd pfd{write_fd_, POLLOUT, 0};
      const int rc = ::poll(&pfd, 1, remaining_ms(deadline));
      if (rc < 0 && errno == EINTR) continue;
      if (rc == 0) throw TimeoutError("timed out writing to " + endpoint_);
      if (rc < 0 || (pfd.revents & (POLLERR | POLLHUP))) throw ConnectionError("lost connection to " + endpoint_);
      const ssize_t n = socket_ ? ::send(write_fd_, data.data() + off, data.size() - off, MSG_NOSIGNAL)
                                : ::write(write_fd_, data.data() + off, data.size() - off);
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
        throw ConnectionError("write to " + endpoint_ + " failed: " + std::strerror(errno));
      }
      off += static_cast<std::size_t>(n);
    }
  }

  std::string read_line(std::chrono::steady_clock::time_point deadline) {
    for (;;) {
      const std::size_t nl = buffer_.find('\n');
      if (nl != std::string::npos) {
        std::string line = buffer_.substr(0, nl);
        buffer_.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        return line;
      }
      pollfd pfd{read_fd_, POLLIN, 0};
      const int rc = ::poll(&pfd, 1, remaining_ms(deadline));
      if (rc < 0 && errno == EINTR) continue;
      if (rc == 0) throw TimeoutError("timed out waiting for a response from " + endpoint_);
      if (rc < 0) throw ConnectionError("poll on " + endpoint_ + " failed: " + std::strerror(errno));
      char chunk[65536];
      const ssize_t n = ::read(read_fd_, chunk, sizeof(chunk));
      if (n < 0) {
        if (errno == EAGAIN || errno == EWOULDBLOCK || errno == EINTR) continue;
        throw ConnectionError("read from " + endpoint_ + " failed: " + std::strerror(errno));
      }
      if (n == 0) throw ConnectionError(endpoint_ + " closed the stream");
      buffer_.append(chunk, static_cast<std::size_t>(n));
    }
  }

 private:
  int read_fd_;
  int write_fd_;
  std::string endpoint_;
  bool socket_;
  std::string buffer_;
};

}  // namespace detail

class TcpTransport final : public LineTransport {
 public:
  TcpTransport(const std::string& host, const std::string& port, int timeout_ms) : endpoint_("tcp://" + host + ":" + port) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0) {
      throw ConnectionError("cannot resolve " + endpoint_ + ": " + ::gai_strerror(rc));
    }
    std::unique_ptr<addrinfo, decltype(&::freeaddrinfo)> guard(res, &::freeaddrinfo);
    std::string last_error = "no addresses";
    for (addrinfo* ai = res; ai != nullptr; ai = ai->ai_next) {
      const int fd = ::socket(ai->ai_family, ai->ai_socktype, ai->ai_protocol);
      if (fd < 0) continue;
      detail::set_nonblocking(fd);
      int rc = ::connect(fd, ai->ai_addr, ai->ai_addrlen);
      if (rc < 0 && errno == EINPROGRESS) {
        pollfd pfd{fd, POLLOUT, 0};
        rc = ::poll(&pfd, 1, timeout_ms);
        int err = 0;
        socklen_t len = sizeof(err);
        if (rc > 0 && ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len) == 0 && err == 0) {
          rc = 0;
        } else {
          last_error = rc == 0 ? "connect timed out" : std::strerror(err != 0 ? err : errno);
          rc = -1;
        }
      } else if (rc < 0) {
        last_error = std::strerror(errno);
      }
      if (rc == 0) {
        fd_ = fd;
        break;
      }
      ::close(fd);
    }
    if (fd_ < 0) throw ConnectionError("cannot connect to " + endpoint_ + ": " + last_error);
    stream_ = std::make_unique<detail::FdLineStream>(fd_, fd_, endpoint_, true);
  }
  ~TcpTransport() override {
    if (fd_ >= 0) ::close(fd_);
  }
  TcpTransport(const TcpTransport&) = delete;
  TcpTransport& operator=(const TcpTransport&) = delete;

  void write_line(std::string_view line, std::chrono::steady_clock::time_point deadline) override {
    stream_->write_all(std::string(line) + "\n", deadline);
  }
  std::string read_line(std::chrono::steady_clock::time_point deadline) override { return stream_->read_line(deadline); }

 private:
  std::string endpoint_;
  int fd_ = -1;
  std::unique_ptr<detail::FdLineStream> stream_;
};

class SubprocessTransport final : public LineTransport {
 public:
  explicit SubprocessTransport(const std::string& command) : endpoint_("exec:" + command) {
    static std::once_flag sigpipe_once;
    std::call_once(sigpipe_once, [] { ::signal(SIGPIPE, SIG_IGN); });
    int to_child[2];
    int from_child[2];
    if (::pipe(to_child) != 0) throw ConnectionError("pipe() failed for " + endpoint_);
    if (::pipe(from_child) != 0) {
      ::close(to_child[0]);
      ::close(to_child[1]);
      throw ConnectionError("pipe() failed for " + endpoint_);
    }
    pid_ = ::fork();
    if (pid_ < 0) throw ConnectionError("fork() failed for " + endpoint_);
    if (pid_ == 0) {
      // Own process group, so teardown reaches anything the shell spawns.
      ::setpgid(0, 0);
      ::dup2(to_child[0], STDIN_FILENO);
      ::dup2(from_child[1], STDOUT_FILENO);
      ::close(to_child[0]);
      ::close(to_child[1]);
      ::close(from_child[0]);
      ::close(from_child[1]);
      ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
      ::_exit(127);
    }
    ::setpgid(pid_, pid_);
    ::close(to_child[0]);
    ::close(from_child[1]);
    write_fd_ = to_child[1];
    read_fd_ = from_child[0];
    ::fcntl(write_fd_, F_SETFD, FD_CLOEXEC);
    ::fcntl(read_fd_, F_SETFD, FD_CLOEXEC);
    detail::set_nonblocking(write_fd_);
    detail::set_nonblocking(read_fd_);
    stream_ = std::make_unique<detail::FdLineStream>(read_fd_, write_fd_, endpoint_, false);
  }

  ~SubprocessTransport() override {
    if (write_fd_ >= 0) ::close(write_fd_);
    if (read_fd_ >= 0) ::close(read_fd_);
    if (pid_ > 0) {
      bool exited = false;
      for (int i = 0; i < 50 && !exited; ++i) {
        exited = ::waitpid(pid_, nullptr, WNOHANG) == pid_;
        if (!exited) std::this_thread::sleep_for(std::chrono::milliseconds(10));
      }
      ::kill(-pid_, SIGKILL);
      if (!exited) ::waitpid(pid_, nullptr, 0);
    }
  }
  SubprocessTransport(const SubprocessTransport&) = delete;
  SubprocessTransport& operator=(const SubprocessTransport&) = delete;

  void write_line(std::string_view line, std::chrono::steady_clock::time_point deadline) override {
    stream_->write_all(std::string(line) + "\n", deadline);
  }
  std::string read_line(std::chrono::steady_clock::time_point deadline) override { return stream_->read_line(deadline); }

 private:
  std::string endpoint_;
  pid_t pid_ = -1;
  int write_fd_ = -1;
  int read_fd_ = -1;
  std::unique_ptr<detail::FdLineStream> stream_;
};

inline std::unique_ptr<LineTransport> open_transport(std::string_view endpoint, int timeout_ms) {
  if (endpoint.starts_with("exec:")) {
    const std::string cmd(endpoint.substr(5));
    if (cmd.empty()) throw ConfigError("empty command in endpoint '" + std::string(endpoint) + "'");
    return std::make_unique<SubprocessTransport>(cmd);
  }
  std::string_view hostport = endpoint;
  if (hostport.starts_with("tcp://")) hostport.remove_prefix(6);
  const std::size_t colon = hostport.rfind(':');
  if (colon == std::string_view::npos || colon == 0 || colon + 1 == hostport.size()) {
    throw ConfigError("endpoint must be tcp://HOST:PORT or exec:COMMAND, got '" + std::string(endpoint) + "'");
  }
  return std::make_unique<TcpTransport>(std::string(hostport.substr(0, colon)), std::string(hostport.substr(colon + 1)),
                                        timeout_ms);
}

// One request in flight per instance; use one instance per worker.
class ExternalDetector final : public Detector {
 public:
  explicit ExternalDetector(std::string endpoint, ExternalDetectorOptions options = {})
      : endpoint_(std::move(endpoint)), options_(options) {}

  std::string name() const override { return "external:" + endpoint_; }
  const std::string& endpoint() const { return endpoint_; }

  std::vector<Proposal> detect(const DetectorInput& input) override {
    const std::string request = wire::encode_request(input);
    for (int attempt = 0;; ++attempt) {
      try {
        if (!transport_) transport_ = open_transport(endpoint_, options_.timeout_ms);
        const auto deadline = std::chrono::steady_clock::now() + std::chrono::milliseconds(options_.timeout_ms);
        transport_->write_line(request, deadline);
        return wire::decode_response(transport_->read_line(deadline));
      } catch (const ConnectionError&) {
        transport_.reset();
        if (attempt >= options_.retries) throw;
      } catch (const TimeoutError&) {
        transport_.reset();
        if (attempt >= options_.retries) throw;
      }
    }
  }

 private:
  std::string endpoint_;
  ExternalDetectorOptions options_;
  std::unique_ptr<LineTransport> transport_;
};

inline std::vector<Proposal> external_detect(const std::string& endpoint, const DetectorInput& input,
                                             ExternalDetectorOptions options = {}) {
  ExternalDetector det(endpoint, options);
  return det.detect(input);
}

}  // namespace spooflab
