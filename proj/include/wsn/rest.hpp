#pragma once

// Read-only HTTP/JSON view over the broker's topic cache and the message log.

#include "wsn/broker.hpp"
#include "wsn/persistence.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <thread>

namespace httplib {
class Server;
}

namespace wsn::rest {

inline constexpr std::size_t kDefaultHistoryLimit = 100;
inline constexpr std::size_t kMaxHistoryLimit = 10'000;

struct Response {
    int status = 200;
    std::string content_type = "application/json";
    std::string body;
};

std::string base64_encode(std::span<const std::uint8_t> bytes);
std::string percent_decode(std::string_view s);
// Encodes everything outside the unreserved set, '/' included.
std::string percent_encode(std::string_view s);

class Gateway {
public:
    // `log` may be null, in which case history answers 503.
    Gateway(const broker::Broker& broker, const persistence::MessageLog* log,
            std::function<std::uint64_t()> clock_ms = {});

    // `target` is the raw request target: path plus optional query.
    Response handle(std::string_view method, std::string_view target) const;

private:
    Response health() const;
    Response topics() const;
    Response latest(const std::string& topic) const;
    Response history(const std::string& topic, std::string_view query) const;

    const broker::Broker& broker_;
    const persistence::MessageLog* log_;
    std::function<std::uint64_t()> clock_;
    std::uint64_t started_ms_;
};

// Serves a Gateway over HTTP/1.1 on a background thread.
class HttpServer {
public:
    explicit HttpServer(const Gateway& gateway);
    ~HttpServer();

    HttpServer(const HttpServer&) = delete;
    HttpServer& operator=(const HttpServer&) = delete;

    // Binds and starts serving; throws std::runtime_error when the address
    // cannot be bound. Port 0 picks a free port.
    void start(const std::string& host, int port);
    void stop();
    int port() const { return port_; }

private:
    const Gateway& gateway_;
    std::unique_ptr<httplib::Server> server_;
    std::thread thread_;
    int port_ = 0;
};

} // namespace wsn::rest
