#include "wsn/rest.hpp"

#include <boost/archive/iterators/base64_from_binary.hpp>
#include <boost/archive/iterators/transform_width.hpp>
#include <httplib.h>
#include <json.hpp>

#include <algorithm>
#include <cctype>
#include <charconv>
#include <chrono>
#include <stdexcept>
#include <vector>

namespace wsn::rest {

using nlohmann::json;

namespace {

Response error(int status, std::string_view message) {
    return Response{status, "application/json", json{{"error", message}}.dump()};
}

// Parsed JSON if the payload is a JSON document, nullopt otherwise.
std::optional<json> as_json(const mqtt::Bytes& payload) {
    auto parsed = json::parse(payload.begin(), payload.end(), nullptr, false);
    if (parsed.is_discarded())
        return std::nullopt;
    return parsed;
}

void embed_payload(json& obj, std::string_view key, const mqtt::Bytes& payload) {
    if (auto parsed = as_json(payload))
        obj[std::string(key)] = std::move(*parsed);
    else
        obj[std::string(key) + "_b64"] = base64_encode(payload);
}

std::uint64_t steady_ms() {
    return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                          std::chrono::steady_clock::now().time_since_epoch())
                                          .count());
}

std::vector<std::string_view> split_path(std::string_view path) {
    std::vector<std::string_view> out;
    while (!path.empty()) {
        if (path.front() == '/') {
            path.remove_prefix(1);
            continue;
        }
        const auto slash = path.find('/');
        out.push_back(path.substr(0, slash));
        if (slash == std::string_view::npos)
            break;
        path.remove_prefix(slash);
    }
    return out;
}

std::optional<std::string_view> query_param(std::string_view query, std::string_view key) {
    std::size_t begin = 0;
    while (begin <= query.size()) {
        auto end = query.find('&', begin);
        if (end == std::string_view::npos)
            end = query.size();
        const auto pair = query.substr(begin, end - begin);
        const auto eq = std::min(pair.find('='), pair.size());
        if (pair.substr(0, eq) == key)
            return eq == pair.size() ? std::string_view{} : pair.substr(eq + 1);
        begin = end + 1;
    }
    return std::nullopt;
}

int hex_value(char c) {
    if (c >= '0' && c <= '9')
        return c - '0';
    if (c >= 'a' && c <= 'f')
        return c - 'a' + 10;
    if (c >= 'A' && c <= 'F')
        return c - 'A' + 10;
    return -1;
}

} // namespace

std::string base64_encode(std::span<const std::uint8_t> bytes) {
    using namespace boost::archive::iterators;
    using It = base64_from_binary<transform_width<const std::uint8_t*, 6, 8>>;
    std::string out(It(bytes.data()), It(bytes.data() + bytes.size()));
    out.append((3 - bytes.size() % 3) % 3, '=');
    return out;
}

std::string percent_decode(std::string_view s) {
    std::string out;
    out.reserve(s.size());
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '%' && i + 2 < s.size()) {
            const int hi = hex_value(s[i + 1]);
            const int lo = hex_value(s[i + 2]);
            if (hi >= 0 && lo >= 0) {
                out.push_back(static_cast<char>(hi * 16 + lo));
                i += 2;
                continue;
            }
        }
        out.push_back(s[i]);
    }
    return out;
}

std::string percent_encode(std::string_view s) {
    static constexpr char kHex[] = "0123456789ABCDEF";
    std::string out;
    for (unsigned char c : s) {
        if (std::isalnum(c) || c == '-' || c == '_' || c == '.' || c == '~') {
            out.push_back(static_cast<char>(c));
        } else {
            out.push_back('%');
            out.push_back(kHex[c >> 4]);
            out.push_back(kHex[c & 15]);
        }
    }
    return out;
}

Gateway::Gateway(const broker::Broker& broker, const persistence::MessageLog* log,
                 std::function<std::uint64_t()> clock_ms)
    : broker_(broker), log_(log), clock_(clock_ms ? std::move(clock_ms) : steady_ms), started_ms_(clock_()) {}

Response Gateway::handle(std::string_view method, std::string_view target) const {
    const auto qmark = target.find('?');
    const auto path = target.substr(0, qmark);
    const auto query = qmark == std::string_view::npos ? std::string_view{} : target.substr(qmark + 1);
    const auto parts = split_path(path);

    const bool known_route =
        (parts.size() == 1 && parts[0] == "health") || (parts.size() == 2 && parts[0] == "api" && parts[1] == "topics") ||
        (parts.size() >= 4 && parts[0] == "api" && parts[1] == "topics" &&
         (parts.back() == "latest" || parts.back() == "history"));
    if (!known_route)
        return error(404, "not found");
    if (method != "GET")
        return error(405, "method not allowed");

    if (parts.size() == 1)
        return health();
    if (parts.size() == 2)
        return topics();

    // Unencoded slashes in the topic are tolerated by rejoining the segments.
    std::string raw;
    for (std::size_t i = 2; i + 1 < parts.size(); ++i) {
        if (!raw.empty())
            raw += '/';
        raw += parts[i];
    }
    const auto topic = percent_decode(raw);
    if (parts.back() == "latest")
        return latest(topic);
    return history(topic, query);
}

Response Gateway::health() const {
    const auto now = clock_();
    const auto uptime = now > started_ms_ ? (now - started_ms_) / 1000 : 0;
    return Response{200, "application/json", json{{"status", "ok"}, {"uptime_s", uptime}}.dump()};
}

Response Gateway::topics() const {
    auto out = json::array();
    for (const auto& t : broker_.topics()) {
        json entry{{"topic", t.topic}, {"message_count", t.message_count}, {"last_timestamp_ms", t.last_timestamp_ms}};
        embed_payload(entry, "latest_payload", t.latest_payload);
        out.push_back(std::move(entry));
    }
    return Response{200, "application/json", out.dump()};
}

Response Gateway::latest(const std::string& topic) const {
    const auto stats = broker_.topic(topic);
    if (!stats)
        return error(404, "unknown topic");
    return Response{200, "application/json",
                    std::string(stats->latest_payload.begin(), stats->latest_payload.end())};
}

Response Gateway::history(const std::string& topic, std::string_view query) const {
    std::size_t limit = kDefaultHistoryLimit;
    if (auto value = query_param(query, "limit")) {
        std::uint64_t n = 0;
        const auto [ptr, ec] = std::from_chars(value->data(), value->data() + value->size(), n);
        if (ec != std::errc{} || ptr != value->data() + value->size() || n < 1 || n > kMaxHistoryLimit)
            return error(400, "limit must be an integer in 1..10000");
        limit = static_cast<std::size_t>(n);
    }
    if (!broker_.topic(topic))
        return error(404, "unknown topic");
    if (!log_)
        return error(503, "history unavailable without a message log");

    auto out = json::array();
    for (const auto& rec : log_->history(topic, limit)) {
        json entry{{"timestamp_ms", rec.timestamp_ms}};
        embed_payload(entry, "payload", rec.payload);
        out.push_back(std::move(entry));
    }
    return Response{200, "application/json", out.dump()};
}

HttpServer::HttpServer(const Gateway& gateway) : gateway_(gateway), server_(std::make_unique<httplib::Server>()) {
    // httplib's default also sets SO_REUSEPORT, which lets a second server
    // share a port that is already in use.
    server_->set_socket_options([](socket_t sock) {
        int yes = 1;
        ::setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    });
    server_->set_pre_routing_handler([this](const httplib::Request& req, httplib::Response& res) {
        const auto r = gateway_.handle(req.method, req.target);
        res.status = r.status;
        res.set_content(r.body, r.content_type);
        return httplib::Server::HandlerResponse::Handled;
    });
}

HttpServer::~HttpServer() { stop(); }

void HttpServer::start(const std::string& host, int port) {
    if (port == 0)
        port_ = server_->bind_to_any_port(host);
    else
        port_ = server_->bind_to_port(host, port) ? port : -1;
    if (port_ <= 0)
        throw std::runtime_error("cannot bind HTTP address " + host + ":" + std::to_string(port));
    thread_ = std::thread([this] { server_->listen_after_bind(); });
}

void HttpServer::stop() {
    if (thread_.joinable()) {
        server_->stop();
        thread_.join();
    }
}

} // namespace wsn::rest
