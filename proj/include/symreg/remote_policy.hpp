#pragma once

#include <cerrno>
#include <chrono>
#include <cmath>
#include <csignal>
#include <cstring>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include <fcntl.h>
#include <netdb.h>
#include <poll.h>
#include <sys/socket.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <unistd.h>

#include <json.hpp>

#include "policy.hpp"

namespace symreg {

// Newline-delimited message stream to a policy server.
class LineChannel {
public:
    virtual ~LineChannel() = default;
    virtual void send_line(const std::string& line) = 0;
    virtual std::string recv_line() = 0;
};

namespace detail {

class FdChannel : public LineChannel {
public:
    FdChannel(int read_fd, int write_fd, int timeout_ms) : rfd_(read_fd), wfd_(write_fd), timeout_ms_(timeout_ms) {}
    ~FdChannel() override {
        if (rfd_ >= 0) ::close(rfd_);
        if (wfd_ >= 0 && wfd_ != rfd_) ::close(wfd_);
    }

    void send_line(const std::string& line) override {
        std::string buf = line + '\n';
        std::size_t off = 0;
        while (off < buf.size()) {
            const ssize_t w = write_some(buf.data() + off, buf.size() - off);
            if (w < 0) {
                if (errno == EINTR) continue;
                throw PolicyError(std::string("policy server connection lost: ") + std::strerror(errno));
            }
            off += static_cast<std::size_t>(w);
        }
    }

    std::string recv_line() override {
        for (;;) {
            if (auto pos = pending_.find('\n'); pos != std::string::npos) {
                std::string line = pending_.substr(0, pos);
                pending_.erase(0, pos + 1);
                return line;
            }
            pollfd p{rfd_, POLLIN, 0};
            const int ready = ::poll(&p, 1, timeout_ms_);
            if (ready == 0) throw PolicyError("policy server timed out");
            if (ready < 0) {
                if (errno == EINTR) continue;
                throw PolicyError(std::string("poll failed: ") + std::strerror(errno));
            }
            char chunk[4096];
            const ssize_t r = ::read(rfd_, chunk, sizeof chunk);
            if (r < 0 && errno == EINTR) continue;
            if (r <= 0) throw PolicyError("policy server closed the connection");
            pending_.append(chunk, static_cast<std::size_t>(r));
        }
    }

protected:
    virtual ssize_t write_some(const char* data, std::size_t n) { return ::write(wfd_, data, n); }

    int rfd_;
    int wfd_;
    int timeout_ms_;
    std::string pending_;
};

class ProcessChannel final : public FdChannel {
public:
    ProcessChannel(int rfd, int wfd, pid_t pid, int timeout_ms) : FdChannel(rfd, wfd, timeout_ms), pid_(pid) {}
    ~ProcessChannel() override {
        ::close(wfd_);
        wfd_ = -1;
        // The server exits on EOF; give it a moment, then make sure it is gone.
        for (int i = 0; i < 50; ++i) {
            if (::waitpid(pid_, nullptr, WNOHANG) != 0) return;
            ::usleep(10000);
        }
        ::kill(pid_, SIGTERM);
        ::waitpid(pid_, nullptr, 0);
    }

private:
    pid_t pid_;
};

class SocketChannel final : public FdChannel {
public:
    SocketChannel(int fd, int timeout_ms) : FdChannel(fd, fd, timeout_ms) {}

protected:
    ssize_t write_some(const char* data, std::size_t n) override { return ::send(wfd_, data, n, MSG_NOSIGNAL); }
};

inline std::unique_ptr<LineChannel> spawn_process(const std::string& command, int timeout_ms) {
    int to_child[2], from_child[2];
    if (::pipe(to_child) != 0) throw PolicyError("pipe() failed");
    if (::pipe(from_child) != 0) {
        ::close(to_child[0]);
        ::close(to_child[1]);
        throw PolicyError("pipe() failed");
    }
    const pid_t pid = ::fork();
    if (pid < 0) throw PolicyError("fork() failed");
    if (pid == 0) {
        ::dup2(to_child[0], STDIN_FILENO);
        ::dup2(from_child[1], STDOUT_FILENO);
        ::close(to_child[0]);
        ::close(to_child[1]);
        ::close(from_child[0]);
        ::close(from_child[1]);
        ::execl("/bin/sh", "sh", "-c", command.c_str(), static_cast<char*>(nullptr));
        ::_exit(127);
    }
    ::close(to_child[0]);
    ::close(from_child[1]);
    ::fcntl(to_child[1], F_SETFD, FD_CLOEXEC);
    ::fcntl(from_child[0], F_SETFD, FD_CLOEXEC);
    // Writes to a dead child must surface as errors, not kill the process.
    std::signal(SIGPIPE, SIG_IGN);
    return std::make_unique<ProcessChannel>(from_child[0], to_child[1], pid, timeout_ms);
}

inline std::unique_ptr<LineChannel> connect_tcp(const std::string& host, const std::string& port, int timeout_ms) {
    addrinfo hints{};
    hints.ai_family = AF_UNSPEC;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (const int rc = ::getaddrinfo(host.c_str(), port.c_str(), &hints, &res); rc != 0)
        throw PolicyError("cannot resolve " + host + ":" + port + ": " + ::gai_strerror(rc));
    int fd = -1;
    for (addrinfo* a = res; a; a = a->ai_next) {
        fd = ::socket(a->ai_family, a->ai_socktype, a->ai_protocol);
        if (fd < 0) continue;
        if (::connect(fd, a->ai_addr, a->ai_addrlen) == 0) break;
        ::close(fd);
        fd = -1;
    }
    ::freeaddrinfo(res);
    if (fd < 0) throw PolicyError("cannot connect to policy server at " + host + ":" + port);
    return std::make_unique<SocketChannel>(fd, timeout_ms);
}

// "host:port" with a numeric port and no whitespace is a TCP address; anything else is a command.
inline std::optional<std::pair<std::string, std::string>> parse_address(const std::string& target) {
    const auto colon = target.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == target.size()) return std::nullopt;
    if (target.find_first_of(" \t/") != std::string::npos) return std::nullopt;
    const std::string port = target.substr(colon + 1);
    if (port.find_first_not_of("0123456789") != std::string::npos) return std::nullopt;
    return std::pair{target.substr(0, colon), port};
}

} // namespace detail

// Client for the JSON-lines policy protocol. One connection (child process or socket) is
// shared by every context opened from this object; requests are serialised.
class RemotePolicy final : public PolicyBackend {
public:
    explicit RemotePolicy(std::string target, int timeout_ms = 60000)
        : target_(std::move(target)), timeout_ms_(timeout_ms) {
        if (target_.empty()) throw ConfigError("empty remote policy target");
    }

    // Wraps an already-connected channel (used by tests).
    explicit RemotePolicy(std::unique_ptr<LineChannel> channel) : target_("<channel>"), timeout_ms_(0) {
        link_ = std::make_shared<Link>();
        link_->channel = std::move(channel);
    }

    std::string name() const override { return "remote"; }
    const std::string& target() const { return target_; }

    std::unique_ptr<BackendSession> open(const Dataset& bag, const Vocabulary& vocab) const override {
        auto link = connect();
        nlohmann::json x = nlohmann::json::array();
        for (std::size_t i = 0; i < bag.x.rows(); ++i) {
            const auto row = bag.x.row(i);
            x.push_back(std::vector<double>(row.begin(), row.end()));
        }
        const auto reply = link->call({{"op", "init"}, {"vocab", vocab.symbols()}, {"x", x}, {"y", bag.y}});
        if (!reply.value("ok", false) || !reply.contains("session")) throw PolicyError("policy server rejected init");
        return std::make_unique<Session>(link, reply.at("session"), vocab.size());
    }

private:
    struct Link {
        std::mutex mutex;
        std::unique_ptr<LineChannel> channel;
        bool broken = false;

        nlohmann::json call(const nlohmann::json& request) {
            std::lock_guard lock(mutex);
            if (broken) throw PolicyError("policy server connection is unusable");
            try {
                channel->send_line(request.dump());
                const std::string line = channel->recv_line();
                auto reply = nlohmann::json::parse(line);
                if (!reply.is_object()) throw PolicyError("policy server sent a non-object reply");
                if (reply.contains("error")) throw PolicyError("policy server error: " + reply["error"].dump());
                return reply;
            } catch (const nlohmann::json::exception& e) {
                broken = true;
                throw PolicyError(std::string("malformed policy server reply: ") + e.what());
            } catch (const PolicyError&) {
                broken = true;
                throw;
            }
        }
    };

    struct Session final : BackendSession {
        std::shared_ptr<Link> link;
        nlohmann::json id;
        int vocab_size;

        Session(std::shared_ptr<Link> l, nlohmann::json session, int n) : link(std::move(l)), id(std::move(session)), vocab_size(n) {}
        ~Session() override {
            try {
                link->call({{"op", "close"}, {"session", id}});
            } catch (...) {
            }
        }

        std::vector<double> next_token_weights(std::span<const TokenId> prefix) override {
            const auto reply = link->call({{"op", "topk"},
                                           {"session", id},
                                           {"prefix", std::vector<TokenId>(prefix.begin(), prefix.end())},
                                           {"k", vocab_size}});
            try {
                const auto tokens = reply.at("tokens").get<std::vector<TokenId>>();
                const auto logprobs = reply.at("logprobs").get<std::vector<double>>();
                if (tokens.size() != logprobs.size()) throw PolicyError("topk reply: tokens/logprobs length mismatch");
                std::vector<double> w(vocab_size, 0.0);
                for (std::size_t i = 0; i < tokens.size(); ++i) {
                    if (tokens[i] < 0 || tokens[i] >= vocab_size) throw PolicyError("topk reply: token id out of range");
                    w[tokens[i]] = std::exp(logprobs[i]);
                }
                return w;
            } catch (const nlohmann::json::exception& e) {
                throw PolicyError(std::string("malformed topk reply: ") + e.what());
            }
        }

        std::optional<CompletionOutput> backend_complete(std::span<const TokenId> prefix, int beam,
                                                         int max_len) override {
            const auto reply = link->call({{"op", "complete"},
                                           {"session", id},
                                           {"prefix", std::vector<TokenId>(prefix.begin(), prefix.end())},
                                           {"beam", beam},
                                           {"max_len", max_len}});
            try {
                CompletionOutput out;
                out.sequences = reply.at("sequences").get<std::vector<Sequence>>();
                out.scores = reply.at("logprobs").get<std::vector<double>>();
                return out;
            } catch (const nlohmann::json::exception& e) {
                throw PolicyError(std::string("malformed complete reply: ") + e.what());
            }
        }
    };

    std::shared_ptr<Link> connect() const {
        std::lock_guard lock(connect_mutex_);
        if (link_ && !link_->broken) return link_;
        if (target_ == "<channel>") throw PolicyError("policy server connection is unusable");
        auto link = std::make_shared<Link>();
        if (auto addr = detail::parse_address(target_))
            link->channel = detail::connect_tcp(addr->first, addr->second, timeout_ms_);
        else
            link->channel = detail::spawn_process(target_, timeout_ms_);
        link_ = link;
        return link_;
    }

    std::string target_;
    int timeout_ms_;
    mutable std::mutex connect_mutex_;
    mutable std::shared_ptr<Link> link_;
};

} // namespace symreg
