#include "wsn/broker.hpp"

#include "../support/harness.hpp"
#include "../support/packet_gen.hpp"

#include <doctest.h>

#include <csignal>
#include <sys/resource.h>

using namespace wsn;
using namespace wsn::testing;
using broker::Broker;
using broker::BrokerOptions;

namespace {

struct Clock {
    std::uint64_t now = 1'000'000;
    std::function<std::uint64_t()> fn() {
        return [this] { return now; };
    }
};

BrokerOptions with_clock(Clock& c) {
    BrokerOptions o;
    o.clock = c.fn();
    return o;
}

mqtt::WillMessage offline_will(const std::string& topic) { return {topic, bytes("offline"), 0, true}; }

} // namespace

TEST_SUITE("connect") {
    TEST_CASE("fresh clean session is accepted") {
        Broker b;
        TestClient c(b);
        const auto ack = c.connect("node1");
        CHECK(ack == mqtt::ConnAck{false, 0});
        CHECK(b.connected_clients() == std::vector<std::string>{"node1"});
        CHECK(b.stats().connects_accepted == 1);
    }

    TEST_CASE("wrong protocol level or name gets code 1 and a close") {
        Broker b;
        TestClient c(b);
        mqtt::ConnectOptions o;
        o.client_id = "x";
        o.protocol_level = 3;
        CHECK(c.connect(o).return_code == 1);
        CHECK(c.closed());

        TestClient d(b);
        o.protocol_level = 4;
        o.protocol_name = "MQIsdp";
        CHECK(d.connect(o).return_code == 1);
        CHECK(d.closed());
        CHECK(b.connection_count() == 0);
    }

    TEST_CASE("client id rules") {
        Broker b;
        TestClient empty_persistent(b);
        CHECK(empty_persistent.connect("", false).return_code == 2);
        CHECK(empty_persistent.closed());

        TestClient empty_clean(b);
        CHECK(empty_clean.connect("", true).return_code == 0);
        CHECK_FALSE(empty_clean.closed());

        TestClient max_len(b);
        CHECK(max_len.connect(std::string(23, 'a')).return_code == 0);
        TestClient too_long(b);
        CHECK(too_long.connect(std::string(24, 'a')).return_code == 2);
        CHECK(too_long.closed());

        // 23 characters, more than 23 bytes
        TestClient wide(b);
        std::string id;
        for (int i = 0; i < 23; ++i)
            id += "\xC3\xA9";
        CHECK(wide.connect(id).return_code == 0);
    }

    TEST_CASE("anything before CONNECT is a hard close") {
        Broker b;
        TestClient c(b);
        c.send(mqtt::PingReq{});
        CHECK(c.closed());
        CHECK(c.packets().empty());
        CHECK(b.stats().protocol_violations == 1);
    }

    TEST_CASE("a second CONNECT is a protocol violation") {
        Broker b;
        TestClient c(b);
        c.connect("a", true, offline_will("s/a"));
        TestClient watcher(b);
        watcher.connect("w");
        watcher.subscribe({"s/+"});
        c.connect("a");
        CHECK(c.closed());
        CHECK(watcher.publishes().size() == 1);
    }

    TEST_CASE("persistent sessions survive reconnects") {
        Broker b;
        {
            TestClient c(b);
            CHECK(c.connect("p", false).session_present == false);
            c.subscribe({"t/#"});
            c.disconnect();
        }
        CHECK(b.session_count() == 1);
        TestClient pub(b);
        pub.connect("pub");
        TestClient c(b);
        CHECK(c.connect("p", false).session_present == true);
        pub.publish("t/x", "hello");
        REQUIRE(c.publishes().size() == 1);
        CHECK(text(c.publishes()[0].payload) == "hello");

        // a clean connect discards the stored session
        c.disconnect();
        TestClient again(b);
        CHECK(again.connect("p", true).session_present == false);
        pub.publish("t/x", "dropped");
        CHECK(again.publishes().empty());
    }

    TEST_CASE("takeover closes the old connection abnormally and fires its will") {
        Broker b;
        TestClient watcher(b);
        watcher.connect("watcher");
        watcher.subscribe({"sensors/+/status"});

        TestClient first(b);
        first.connect("node1", true, offline_will("sensors/node1/status"));
        TestClient second(b);
        CHECK(second.connect("node1").return_code == 0);
        CHECK(first.closed());
        CHECK_FALSE(second.closed());
        const auto got = watcher.publishes();
        REQUIRE(got.size() == 1);
        CHECK(got[0].topic == "sensors/node1/status");
        CHECK(text(got[0].payload) == "offline");
        CHECK(b.stats().wills_fired == 1);
        CHECK(b.connected_clients().size() == 2);
    }
}

TEST_SUITE("publish") {
    TEST_CASE("overlapping subscriptions deliver once per session") {
        Broker b;
        TestClient sub(b);
        sub.connect("sub");
        sub.subscribe({"sensors/#", "sensors/+/data"});
        TestClient other(b);
        other.connect("other");
        other.subscribe({"sensors/node1/data"});
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("sensors/node1/data", "x");
        CHECK(sub.publishes().size() == 1);
        CHECK(other.publishes().size() == 1);
        CHECK(b.stats().deliveries == 2);
    }

    TEST_CASE("no subscribers still logs") {
        TempDir dir;
        auto log = persistence::MessageLog::open(dir.path());
        Broker b({}, log.get());
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("lonely", "x");
        CHECK(log->size() == 1);
        CHECK(b.topic("lonely")->message_count == 1);
    }

    TEST_CASE("QoS 1 and 2 are acknowledged but delivered at QoS 0") {
        Broker b;
        TestClient sub(b);
        sub.connect("sub");
        sub.subscribe({"q"});
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("q", "one", false, 1, 11);
        CHECK(pub.all<mqtt::PubAck>() == std::vector<mqtt::PubAck>{{11}});

        pub.publish("q", "two", false, 2, 12);
        pub.publish("q", "two", false, 2, 12); // resent before PUBREL
        CHECK(pub.all<mqtt::PubRec>().size() == 2);
        pub.send(mqtt::PubRel{12});
        CHECK(pub.all<mqtt::PubComp>() == std::vector<mqtt::PubComp>{{12}});

        const auto got = sub.publishes();
        REQUIRE(got.size() == 2);
        for (const auto& m : got) {
            CHECK(m.qos == 0);
            CHECK_FALSE(m.packet_id);
            CHECK_FALSE(m.dup);
        }
    }

    TEST_CASE("wildcard topics and oversize payloads close the publisher") {
        Broker b;
        TestClient c(b);
        c.connect("c");
        c.raw({0x30, 0x05, 0x00, 0x03, 'a', '/', '+'});
        CHECK(c.closed());

        TestClient big(b);
        big.connect("big");
        big.publish("t", std::string(256 * 1024 + 1, 'x'));
        CHECK(big.closed());
        CHECK_FALSE(b.topic("t"));

        TestClient ok(b);
        ok.connect("ok");
        ok.publish("t", std::string(256 * 1024, 'x'));
        CHECK_FALSE(ok.closed());
        CHECK(b.topic("t"));
    }

    TEST_CASE("delivery is exactly once and per-publisher ordered") {
        Broker b;
        TestClient sub(b);
        sub.connect("sub");
        sub.subscribe({"+/seq", "#"});
        std::vector<std::unique_ptr<TestClient>> pubs;
        for (int i = 0; i < 3; ++i) {
            pubs.push_back(std::make_unique<TestClient>(b));
            pubs.back()->connect("p" + std::to_string(i));
        }
        std::mt19937 rng(1);
        std::map<int, int> sent;
        for (int k = 0; k < 600; ++k) {
            const int who = static_cast<int>(rng() % 3);
            pubs[who]->publish("p" + std::to_string(who) + "/seq", std::to_string(sent[who]++));
        }
        std::map<std::string, int> next;
        std::size_t total = 0, out_of_order = 0;
        for (const auto& m : sub.publishes()) {
            ++total;
            out_of_order += std::stoi(text(m.payload)) != next[m.topic]++;
        }
        CHECK(total == 600);
        CHECK(out_of_order == 0);
    }
}

TEST_SUITE("subscribe") {
    TEST_CASE("suback codes and invalid filters") {
        Broker b;
        TestClient c(b);
        c.connect("c");
        mqtt::Subscribe s{9, {{"ok/+", 1}, {"a/#/b", 0}, {"x", 2}}};
        c.send(s);
        const auto acks = c.all<mqtt::SubAck>();
        REQUIRE(acks.size() == 1);
        CHECK(acks[0].packet_id == 9);
        CHECK(acks[0].return_codes == std::vector<std::uint8_t>{0x00, 0x80, 0x00});
    }

    TEST_CASE("empty subscribe closes") {
        Broker b;
        TestClient c(b);
        c.connect("c");
        c.send(mqtt::Subscribe{3, {}});
        CHECK(c.closed());
    }

    TEST_CASE("retained message follows the suback and precedes newer live traffic") {
        Broker b;
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("sensors/node1/data", "old", true);
        TestClient sub(b);
        sub.connect("sub");
        sub.subscribe({"sensors/#", "sensors/+/data"});
        pub.publish("sensors/node1/data", "new");

        const auto& packets = sub.packets();
        REQUIRE(packets.size() == 4); // connack, suback, retained, live
        CHECK(std::holds_alternative<mqtt::SubAck>(packets[1]));
        const auto got = sub.publishes();
        REQUIRE(got.size() == 2);
        CHECK(text(got[0].payload) == "old");
        CHECK(got[0].retain);
        CHECK(text(got[1].payload) == "new");
        CHECK_FALSE(got[1].retain);
    }

    TEST_CASE("an empty retained payload clears the entry") {
        Broker b;
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("r", "v", true);
        CHECK(b.retained().size() == 1);
        pub.publish("r", "", true);
        CHECK(b.retained().empty());
        TestClient sub(b);
        sub.connect("sub");
        sub.subscribe({"r"});
        CHECK(sub.publishes().empty());
    }

    TEST_CASE("unsubscribe stops delivery") {
        Broker b;
        TestClient c(b);
        c.connect("c");
        c.subscribe({"t"});
        c.send(mqtt::Unsubscribe{4, {"t"}});
        CHECK(c.all<mqtt::UnsubAck>() == std::vector<mqtt::UnsubAck>{{4}});
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("t", "x");
        CHECK(c.publishes().empty());
    }
}

TEST_SUITE("connection loss") {
    TEST_CASE("will fires once on abnormal loss, never after DISCONNECT") {
        Broker b;
        TestClient watcher(b);
        watcher.connect("w");
        watcher.subscribe({"status/+"});

        TestClient killed(b);
        killed.connect("node1", true, offline_will("status/node1"));
        killed.drop();
        killed.drop();
        TestClient clean(b);
        clean.connect("node2", true, offline_will("status/node2"));
        clean.disconnect();
        clean.drop();

        const auto got = watcher.publishes();
        REQUIRE(got.size() == 1);
        CHECK(got[0].topic == "status/node1");
        CHECK(b.stats().wills_fired == 1);
        CHECK(b.retained().at("status/node1") == bytes("offline"));
        CHECK(b.session_count() == 1); // only the watcher; clean sessions are deleted
    }

    TEST_CASE("keep-alive grace is 1.5x") {
        Clock clock;
        Broker b(with_clock(clock));
        TestClient watcher(b);
        watcher.connect("w");
        watcher.subscribe({"status/+"});
        TestClient n(b);
        n.connect("node1", true, offline_will("status/node1"), 2);

        clock.now += 2900;
        CHECK(b.expire_idle() == 0);
        n.send(mqtt::PingReq{});
        CHECK(n.all<mqtt::PingResp>().size() == 1);
        clock.now += 3000;
        CHECK(b.expire_idle() == 0);
        clock.now += 100; // 3.1 s of silence
        CHECK(b.expire_idle() == 1);
        CHECK(n.closed());
        CHECK(watcher.publishes().size() == 1);
    }
}

TEST_SUITE("state") {
    TEST_CASE("latest cache tracks the log under random traffic") {
        TempDir dir;
        auto log = persistence::MessageLog::open(dir.path());
        Broker b({}, log.get());
        TestClient pub(b);
        pub.connect("pub");
        PacketGen gen(42);
        for (int i = 0; i < 400; ++i) {
            const auto topic = "t/" + std::to_string(gen.pick(0, 7));
            pub.publish(topic, std::to_string(i), gen.coin());
            if (i % 37 == 0) {
                for (const auto& t : b.topics()) {
                    const auto latest = log->latest(t.topic);
                    REQUIRE(latest);
                    CHECK(latest->payload == t.latest_payload);
                    CHECK(latest->offset == t.last_offset);
                    CHECK(log->count(t.topic) == t.message_count);
                }
            }
        }
    }

    TEST_CASE("restart rebuilds the topic cache from the log") {
        TempDir dir;
        {
            auto log = persistence::MessageLog::open(dir.path());
            Broker b({}, log.get());
            TestClient pub(b);
            pub.connect("pub");
            pub.publish("a", "1");
            pub.publish("b", "2");
            pub.publish("a", "3");
        }
        auto log = persistence::MessageLog::open(dir.path());
        Broker b({}, log.get());
        REQUIRE(b.topic("a"));
        CHECK(b.topic("a")->message_count == 2);
        CHECK(text(b.topic("a")->latest_payload) == "3");
        CHECK(b.topics().size() == 2);
    }

    TEST_CASE("read-only calls leave the digest alone") {
        Broker b;
        TestClient c(b);
        c.connect("c", true, offline_will("s/c"));
        c.subscribe({"x/#"});
        c.publish("x/1", "v", true);
        const auto before = b.state_digest();
        for (int i = 0; i < 10; ++i) {
            (void)b.topics();
            (void)b.topic("x/1");
            (void)b.retained();
            (void)b.stats();
        }
        CHECK(b.state_digest() == before);
        c.publish("x/2", "w");
        CHECK(b.state_digest() != before);
    }

    TEST_CASE("persistence failure degrades to the in-memory cache") {
        TempDir dir;
        auto log = persistence::MessageLog::open(dir.path());
        std::vector<std::string> console;
        BrokerOptions opts;
        opts.console = [&](std::string_view l) { console.emplace_back(l); };
        Broker b(opts, log.get());
        TestClient sub(b);
        sub.connect("sub");
        sub.subscribe({"t"});
        TestClient pub(b);
        pub.connect("pub");
        pub.publish("t", "before");

        // Cap the file size so the next append hits EFBIG.
        rlimit old{};
        getrlimit(RLIMIT_FSIZE, &old);
        auto previous = std::signal(SIGXFSZ, SIG_IGN);
        rlimit tight = old;
        tight.rlim_cur = std::filesystem::file_size(log->segment_paths().back()) + 4;
        setrlimit(RLIMIT_FSIZE, &tight);
        pub.publish("t", "during");
        setrlimit(RLIMIT_FSIZE, &old);
        std::signal(SIGXFSZ, previous);

        CHECK(b.persistence_degraded());
        CHECK(b.stats().append_failures == 1);
        CHECK(text(b.topic("t")->latest_payload) == "during");
        CHECK(sub.publishes().size() == 2);
        CHECK(log->size() == 1);
        bool loud = false;
        for (const auto& l : console)
            loud |= l.find("PERSISTENCE FAILURE") != std::string::npos;
        CHECK(loud);
        // the log on disk is still clean
        CHECK(persistence::MessageLog::read_all(dir.path()).size() == 1);
    }

    TEST_CASE("console lines for connect, disconnect, will and every Nth message") {
        std::vector<std::string> lines;
        BrokerOptions opts;
        opts.log_every = 2;
        opts.console = [&](std::string_view l) { lines.emplace_back(l); };
        Broker b(opts);
        TestClient c(b);
        c.connect("n", true, offline_will("s/n"));
        for (int i = 0; i < 4; ++i)
            c.publish("t", "x");
        c.drop();
        auto count = [&](std::string_view prefix) {
            return std::count_if(lines.begin(), lines.end(), [&](const auto& l) { return l.starts_with(prefix); });
        };
        CHECK(count("connect client=n") == 1);
        CHECK(count("disconnect client=n") == 1);
        CHECK(count("will client=n") == 1);
        CHECK(count("message #") == 2);
    }

    TEST_CASE("inbound bytes split at every position decode the same") {
        PacketGen gen(3);
        mqtt::Bytes wire = mqtt::encode_packet(mqtt::Connect{mqtt::ConnectOptions{"c", 0, true, {}, {}, {}}});
        std::vector<std::string> payloads;
        for (int i = 0; i < 20; ++i) {
            payloads.push_back(std::to_string(i));
            mqtt::encode_packet(mqtt::Publish{{"t", bytes(payloads.back()), 0, false, false, {}}}, wire);
        }
        for (std::size_t cut = 1; cut < wire.size(); cut += 3) {
            Broker b;
            TestClient sub(b);
            sub.connect("sub");
            sub.subscribe({"t"});
            TestClient c(b);
            c.raw(mqtt::Bytes(wire.begin(), wire.begin() + cut));
            c.raw(mqtt::Bytes(wire.begin() + cut, wire.end()));
            CHECK(sub.publishes().size() == payloads.size());
        }
    }
}
