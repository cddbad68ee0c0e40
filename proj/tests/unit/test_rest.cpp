#include "wsn/rest.hpp"

#include "../support/harness.hpp"

#include <doctest.h>
#include <httplib.h>
#include <json.hpp>

#include <random>

using namespace wsn;
using nlohmann::json;
using testing::bytes;
using testing::TempDir;

namespace {

const std::string kReading = R"({"temperature":26.200001,"humidity":67,"pressure":100031.59})";

struct Stack {
    TempDir dir;
    std::uint64_t now = 1'000;
    std::unique_ptr<persistence::MessageLog> log = persistence::MessageLog::open(dir.path());
    broker::Broker broker{options(), log.get()};
    rest::Gateway gateway{broker, log.get(), [this] { return now; }};

    broker::BrokerOptions options() {
        broker::BrokerOptions o;
        o.clock = [this] { return now; };
        return o;
    }

    void publish(const std::string& topic, const std::string& payload, bool retain = false) {
        broker.publish(mqtt::PublishMessage{topic, bytes(payload), 0, retain, false, std::nullopt});
        ++now;
    }

    json get(const std::string& target, int expect = 200) {
        const auto r = gateway.handle("GET", target);
        CHECK(r.status == expect);
        CHECK(r.content_type == "application/json");
        return json::parse(r.body);
    }
};

} // namespace

TEST_CASE("base64 and percent encoding") {
    CHECK(rest::base64_encode(bytes("")) == "");
    CHECK(rest::base64_encode(bytes("f")) == "Zg==");
    CHECK(rest::base64_encode(bytes("fo")) == "Zm8=");
    CHECK(rest::base64_encode(bytes("foo")) == "Zm9v");
    CHECK(rest::base64_encode(bytes("foobar")) == "Zm9vYmFy");
    CHECK(rest::base64_encode(std::vector<std::uint8_t>{0xFF, 0x00, 0xFE}) == "/wD+");

    CHECK(rest::percent_encode("sensors/node1/data") == "sensors%2Fnode1%2Fdata");
    CHECK(rest::percent_encode("a b+c") == "a%20b%2Bc");
    CHECK(rest::percent_decode("sensors%2Fnode1%2fdata") == "sensors/node1/data");
    CHECK(rest::percent_decode("100%") == "100%");
    CHECK(rest::percent_decode("%zz") == "%zz");

    std::mt19937_64 rng(8);
    for (int i = 0; i < 2000; ++i) {
        std::string s(rng() % 20, '\0');
        for (auto& c : s)
            c = static_cast<char>(rng());
        const auto enc = rest::percent_encode(s);
        CHECK(enc.find('/') == std::string::npos);
        CHECK(rest::percent_decode(enc) == s);
    }
}

TEST_CASE("health and routing") {
    Stack s;
    auto h = s.get("/health");
    CHECK(h["status"] == "ok");
    CHECK(h["uptime_s"] == 0);
    s.now += 5'500;
    CHECK(s.get("/health")["uptime_s"] == 5);

    CHECK(s.get("/nope", 404)["error"].is_string());
    CHECK(s.get("/api", 404)["error"].is_string());
    CHECK(s.get("/api/topics/x/other", 404)["error"].is_string());
    CHECK(s.gateway.handle("POST", "/api/topics").status == 405);
    CHECK(s.gateway.handle("DELETE", "/health").status == 405);
    CHECK(s.gateway.handle("PUT", "/api/topics/a/latest").status == 405);
}

TEST_CASE("topics lists the cache with embedded payloads") {
    Stack s;
    CHECK(s.get("/api/topics") == json::array());
    s.publish("sensors/node1/data", kReading);
    s.publish("bin", std::string("\x00\xFF", 2));
    s.publish("sensors/node1/data", kReading);
    const auto t = s.get("/api/topics");
    REQUIRE(t.size() == 2);
    std::map<std::string, json> by_topic;
    for (const auto& e : t)
        by_topic[e["topic"]] = e;
    const auto& d = by_topic.at("sensors/node1/data");
    CHECK(d["message_count"] == 2);
    CHECK(d["last_timestamp_ms"] == 1'002);
    CHECK(d["latest_payload"] == json::parse(kReading));
    const auto& b = by_topic.at("bin");
    CHECK(b["latest_payload_b64"] == "AP8=");
    CHECK_FALSE(b.contains("latest_payload"));
}

TEST_CASE("latest returns the stored bytes") {
    Stack s;
    s.publish("sensors/node1/data", kReading);
    const auto r = s.gateway.handle("GET", "/api/topics/sensors%2Fnode1%2Fdata/latest");
    CHECK(r.status == 200);
    CHECK(r.body == kReading);
    // unencoded slashes are accepted too
    CHECK(s.gateway.handle("GET", "/api/topics/sensors/node1/data/latest").body == kReading);
    CHECK(s.get("/api/topics/unknown/latest", 404)["error"] == "unknown topic");
}

TEST_CASE("history limits and ordering") {
    Stack s;
    for (int i = 0; i < 150; ++i)
        s.publish("t", R"({"i":)" + std::to_string(i) + "}");
    s.publish("u", "not json");

    auto h = s.get("/api/topics/t/history");
    REQUIRE(h.size() == 100);
    CHECK(h.front()["payload"]["i"] == 50);
    CHECK(h.back()["payload"]["i"] == 149);
    for (std::size_t i = 1; i < h.size(); ++i)
        CHECK(h[i]["timestamp_ms"] > h[i - 1]["timestamp_ms"]);

    CHECK(s.get("/api/topics/t/history?limit=1").size() == 1);
    CHECK(s.get("/api/topics/t/history?limit=10000").size() == 150);
    CHECK(s.get("/api/topics/t/history?x=1&limit=3").size() == 3);
    for (const char* bad : {"0", "10001", "-1", "abc", "5x", ""})
        CHECK(s.get(std::string("/api/topics/t/history?limit=") + bad, 400)["error"].is_string());
    CHECK(s.get("/api/topics/none/history", 404)["error"] == "unknown topic");

    const auto u = s.get("/api/topics/u/history");
    REQUIRE(u.size() == 1);
    CHECK(u[0]["payload_b64"] == rest::base64_encode(bytes("not json")));
}

TEST_CASE("latest equals the newest history entry and reads change nothing") {
    Stack s;
    std::mt19937_64 rng(4);
    const std::vector<std::string> topics{"sensors/a/data", "sensors/b/data", "x/y"};
    for (int i = 0; i < 300; ++i) {
        const auto& t = topics[rng() % topics.size()];
        s.publish(t, R"({"v":)" + std::to_string(rng() % 1000) + "}", rng() % 5 == 0);
    }
    const auto digest = s.broker.state_digest();
    const auto log_size = s.log->size();
    for (const auto& t : topics) {
        const auto enc = rest::percent_encode(t);
        const auto latest = s.gateway.handle("GET", "/api/topics/" + enc + "/latest");
        const auto hist = s.get("/api/topics/" + enc + "/history?limit=1");
        REQUIRE(hist.size() == 1);
        CHECK(json::parse(latest.body) == hist[0]["payload"]);
        s.get("/api/topics");
        s.get("/health");
    }
    CHECK(s.broker.state_digest() == digest);
    CHECK(s.log->size() == log_size);
}

TEST_CASE("history without a log is unavailable") {
    broker::Broker b;
    b.publish(mqtt::PublishMessage{"t", bytes("1"), 0, false, false, std::nullopt});
    rest::Gateway g(b, nullptr);
    CHECK(g.handle("GET", "/api/topics/t/history").status == 503);
    CHECK(g.handle("GET", "/api/topics/t/latest").body == "1");
}

TEST_CASE("served over HTTP on loopback") {
    Stack s;
    s.publish("sensors/node1/data", kReading);
    rest::HttpServer server(s.gateway);
    server.start("127.0.0.1", 0);
    REQUIRE(server.port() > 0);

    httplib::Client client("127.0.0.1", server.port());
    auto res = client.Get("/api/topics/sensors%2Fnode1%2Fdata/latest");
    REQUIRE(res);
    CHECK(res->status == 200);
    CHECK(res->body == kReading);
    CHECK(res->get_header_value("Content-Type").find("application/json") == 0);

    res = client.Get("/api/topics/sensors%2Fnode1%2Fdata/history?limit=5");
    REQUIRE(res);
    CHECK(json::parse(res->body).size() == 1);

    res = client.Post("/api/topics", "", "text/plain");
    REQUIRE(res);
    CHECK(res->status == 405);

    res = client.Get("/missing");
    REQUIRE(res);
    CHECK(res->status == 404);

    rest::HttpServer clash(s.gateway);
    CHECK_THROWS_AS(clash.start("127.0.0.1", server.port()), std::runtime_error);
    server.stop();
}
