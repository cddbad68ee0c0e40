#pragma once

// TCP transport on Boost.Asio. Everything here runs on the thread driving
// the io_context passed in.

#include "wsn/broker.hpp"
#include "wsn/runtime.hpp"

#include <boost/asio/io_context.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/asio/steady_timer.hpp>

#include <chrono>
#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>

namespace wsn::net {

// "host:port" split; throws std::invalid_argument when malformed.
std::pair<std::string, std::uint16_t> parse_host_port(const std::string& addr);

class BrokerServer {
public:
    BrokerServer(boost::asio::io_context& io, broker::Broker& broker);
    ~BrokerServer();

    // Binds and starts accepting; throws boost::system::system_error on
    // failure. Port 0 picks a free port.
    void listen(const std::string& host, std::uint16_t port);
    void stop();
    std::uint16_t port() const { return port_; }

private:
    class Session;
    void accept();
    void arm_sweep();

    boost::asio::io_context& io_;
    broker::Broker& broker_;
    boost::asio::ip::tcp::acceptor acceptor_;
    boost::asio::steady_timer sweep_;
    std::uint16_t port_ = 0;
    bool stopped_ = false;
};

// Wall-clock Scheduler over an io_context.
class AsioScheduler final : public rt::Scheduler {
public:
    explicit AsioScheduler(boost::asio::io_context& io);
    ~AsioScheduler() override;

    std::uint64_t now_ms() const override;
    rt::TimerId schedule(std::uint64_t delay_ms, std::function<void()> fn) override;
    void cancel(rt::TimerId id) override;
    std::size_t pending() const { return timers_.size(); }

private:
    boost::asio::io_context& io_;
    std::chrono::steady_clock::time_point start_;
    rt::TimerId next_id_ = 1;
    std::unordered_map<rt::TimerId, std::shared_ptr<boost::asio::steady_timer>> timers_;
};

// Opens TCP connections to a broker. connect() blocks until the TCP
// handshake finishes or fails.
class TcpConnector final : public rt::Connector {
public:
    TcpConnector(boost::asio::io_context& io, std::string host, std::uint16_t port);
    std::unique_ptr<rt::ClientStream> connect(rt::StreamHandler handler) override;
    std::uint64_t failures() const { return failures_; }

private:
    boost::asio::io_context& io_;
    std::string host_;
    std::uint16_t port_;
    std::uint64_t failures_ = 0;
};

} // namespace wsn::net
