#include "wsn/net.hpp"

#include <boost/asio/connect.hpp>
#include <boost/asio/post.hpp>
#include <boost/asio/read.hpp>
#include <boost/asio/write.hpp>

#include <array>
#include <charconv>
#include <deque>
#include <stdexcept>

namespace wsn::net {

namespace asio = boost::asio;
using asio::ip::tcp;

std::pair<std::string, std::uint16_t> parse_host_port(const std::string& addr) {
    const auto colon = addr.rfind(':');
    if (colon == std::string::npos || colon == 0 || colon + 1 == addr.size())
        throw std::invalid_argument("expected host:port, got '" + addr + "'");
    std::string host = addr.substr(0, colon);
    if (host.size() > 2 && host.front() == '[' && host.back() == ']')
        host = host.substr(1, host.size() - 2);
    unsigned port = 0;
    const auto* first = addr.data() + colon + 1;
    const auto* last = addr.data() + addr.size();
    const auto [ptr, ec] = std::from_chars(first, last, port);
    if (ec != std::errc{} || ptr != last || port > 65535)
        throw std::invalid_argument("bad port in '" + addr + "'");
    return {host, static_cast<std::uint16_t>(port)};
}

namespace {

// Ordered writer shared by both ends of a TCP connection.
class Wire : public std::enable_shared_from_this<Wire> {
public:
    explicit Wire(tcp::socket socket) : socket_(std::move(socket)) {}

    void write(mqtt::Bytes bytes) {
        if (closed_)
            return;
        queue_.push_back(std::move(bytes));
        if (queue_.size() == 1)
            pump();
    }

    void close() {
        if (closed_)
            return;
        closed_ = true;
        boost::system::error_code ignored;
        socket_.shutdown(tcp::socket::shutdown_both, ignored);
        socket_.close(ignored);
    }

    bool closed() const { return closed_; }
    tcp::socket& socket() { return socket_; }
    std::array<std::uint8_t, 4096>& buffer() { return buffer_; }

private:
    void pump() {
        auto self = shared_from_this();
        asio::async_write(socket_, asio::buffer(queue_.front()), [self](boost::system::error_code ec, std::size_t) {
            if (ec) {
                self->queue_.clear();
                return;
            }
            self->queue_.pop_front();
            if (!self->queue_.empty() && !self->closed_)
                self->pump();
        });
    }

    tcp::socket socket_;
    std::deque<mqtt::Bytes> queue_;
    std::array<std::uint8_t, 4096> buffer_{};
    bool closed_ = false;
};

} // namespace

class BrokerServer::Session final : public broker::Link, public std::enable_shared_from_this<Session> {
public:
    Session(asio::io_context& io, tcp::socket socket) : io_(io), wire_(std::make_shared<Wire>(std::move(socket))) {}

    void start(broker::Broker& broker) {
        id_ = broker.attach(shared_from_this());
        read(broker);
    }

    // The broker may call these from any thread; hop onto the io thread.
    void send(broker::ByteView bytes) override {
        asio::post(io_, [wire = wire_, copy = mqtt::Bytes(bytes.begin(), bytes.end())]() mutable {
            wire->write(std::move(copy));
        });
    }

    void close() override {
        asio::post(io_, [self = shared_from_this()] {
            self->closed_by_broker_ = true;
            // Let queued writes (a final CONNACK, say) drain before the close.
            asio::post(self->io_, [self] { self->wire_->close(); });
        });
    }

private:
    void read(broker::Broker& broker) {
        auto self = shared_from_this();
        wire_->socket().async_read_some(
            asio::buffer(wire_->buffer()), [self, &broker](boost::system::error_code ec, std::size_t n) {
                if (ec) {
                    if (!self->closed_by_broker_)
                        broker.connection_lost(self->id_);
                    self->wire_->close();
                    return;
                }
                broker.receive(self->id_, broker::ByteView(self->wire_->buffer().data(), n));
                self->read(broker);
            });
    }

    asio::io_context& io_;
    std::shared_ptr<Wire> wire_;
    broker::ConnectionId id_ = 0;
    bool closed_by_broker_ = false;
};

BrokerServer::BrokerServer(asio::io_context& io, broker::Broker& broker)
    : io_(io), broker_(broker), acceptor_(io), sweep_(io) {}

BrokerServer::~BrokerServer() { stop(); }

void BrokerServer::listen(const std::string& host, std::uint16_t port) {
    tcp::resolver resolver(io_);
    const auto endpoints = resolver.resolve(host, std::to_string(port), tcp::resolver::passive);
    const tcp::endpoint endpoint = *endpoints.begin();
    acceptor_.open(endpoint.protocol());
    acceptor_.set_option(tcp::acceptor::reuse_address(true));
    acceptor_.bind(endpoint);
    acceptor_.listen();
    port_ = acceptor_.local_endpoint().port();
    accept();
    arm_sweep();
}

void BrokerServer::stop() {
    if (stopped_)
        return;
    stopped_ = true;
    boost::system::error_code ignored;
    acceptor_.close(ignored);
    sweep_.cancel();
}

void BrokerServer::accept() {
    acceptor_.async_accept([this](boost::system::error_code ec, tcp::socket socket) {
        if (stopped_)
            return;
        if (!ec) {
            socket.set_option(tcp::no_delay(true));
            std::make_shared<Session>(io_, std::move(socket))->start(broker_);
        }
        accept();
    });
}

void BrokerServer::arm_sweep() {
    sweep_.expires_after(std::chrono::milliseconds(250));
    sweep_.async_wait([this](boost::system::error_code ec) {
        if (ec || stopped_)
            return;
        broker_.expire_idle();
        arm_sweep();
    });
}

AsioScheduler::AsioScheduler(asio::io_context& io) : io_(io), start_(std::chrono::steady_clock::now()) {}

AsioScheduler::~AsioScheduler() {
    for (auto& [id, timer] : timers_)
        timer->cancel();
}

std::uint64_t AsioScheduler::now_ms() const {
    return static_cast<std::uint64_t>(
        std::chrono::duration_cast<std::chrono::milliseconds>(std::chrono::steady_clock::now() - start_).count());
}

rt::TimerId AsioScheduler::schedule(std::uint64_t delay_ms, std::function<void()> fn) {
    const auto id = next_id_++;
    auto timer = std::make_shared<asio::steady_timer>(io_, std::chrono::milliseconds(delay_ms));
    timers_.emplace(id, timer);
    timer->async_wait([this, id, fn = std::move(fn)](boost::system::error_code ec) {
        if (ec || !timers_.erase(id))
            return;
        fn();
    });
    return id;
}

void AsioScheduler::cancel(rt::TimerId id) {
    auto it = timers_.find(id);
    if (it == timers_.end())
        return;
    it->second->cancel();
    timers_.erase(it);
}

namespace {

class TcpStream final : public rt::ClientStream {
public:
    TcpStream(std::shared_ptr<Wire> wire, rt::StreamHandler handler)
        : wire_(std::move(wire)), state_(std::make_shared<State>(State{std::move(handler), false})) {
        read(wire_, state_);
    }
    ~TcpStream() override { close(); }

    bool send(rt::ByteView bytes) override {
        if (wire_->closed())
            return false;
        wire_->write(mqtt::Bytes(bytes.begin(), bytes.end()));
        return true;
    }

    void close() override {
        state_->closed_locally = true;
        wire_->close();
    }

private:
    struct State {
        rt::StreamHandler handler;
        bool closed_locally;
    };

    static void read(const std::shared_ptr<Wire>& wire, const std::shared_ptr<State>& state) {
        wire->socket().async_read_some(asio::buffer(wire->buffer()),
                                       [wire, state](boost::system::error_code ec, std::size_t n) {
                                           if (state->closed_locally)
                                               return;
                                           if (ec) {
                                               wire->close();
                                               if (state->handler.on_closed)
                                                   state->handler.on_closed();
                                               return;
                                           }
                                           if (state->handler.on_data)
                                               state->handler.on_data(rt::ByteView(wire->buffer().data(), n));
                                           if (!state->closed_locally)
                                               read(wire, state);
                                       });
    }

    std::shared_ptr<Wire> wire_;
    std::shared_ptr<State> state_;
};

} // namespace

TcpConnector::TcpConnector(asio::io_context& io, std::string host, std::uint16_t port)
    : io_(io), host_(std::move(host)), port_(port) {}

std::unique_ptr<rt::ClientStream> TcpConnector::connect(rt::StreamHandler handler) {
    boost::system::error_code ec;
    tcp::resolver resolver(io_);
    const auto endpoints = resolver.resolve(host_, std::to_string(port_), ec);
    tcp::socket socket(io_);
    if (!ec)
        asio::connect(socket, endpoints, ec);
    if (ec) {
        ++failures_;
        return nullptr;
    }
    socket.set_option(tcp::no_delay(true), ec);
    return std::make_unique<TcpStream>(std::make_shared<Wire>(std::move(socket)), std::move(handler));
}

} // namespace wsn::net
