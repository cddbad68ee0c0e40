#include "wsn/mqtt.hpp"

#include "../support/oracles.hpp"
#include "../support/packet_gen.hpp"

#include <doctest.h>

using namespace wsn::mqtt;
using wsn::testing::PacketGen;

namespace {

Bytes B(std::initializer_list<int> v) {
    Bytes b;
    for (int x : v)
        b.push_back(static_cast<std::uint8_t>(x));
    return b;
}

DecodeError::Kind error_kind(const DecodeResult<Packet>& r) { return std::get<DecodeError>(r).kind; }

} // namespace

TEST_SUITE("remaining length") {
    TEST_CASE("worked examples") {
        CHECK(encode_remaining_length(0) == B({0x00}));
        CHECK(encode_remaining_length(321) == B({0xC1, 0x02}));
        CHECK(encode_remaining_length(268'435'455) == B({0xFF, 0xFF, 0xFF, 0x7F}));

        auto r = decode_remaining_length(B({0x00}));
        REQUIRE(ok(r));
        CHECK(std::get<0>(r).value == 0);
        CHECK(std::get<0>(r).consumed == 1);

        r = decode_remaining_length(B({0xC1, 0x02}));
        REQUIRE(ok(r));
        CHECK(std::get<0>(r).value == 321);
        CHECK(std::get<0>(r).consumed == 2);

        r = decode_remaining_length(B({0x80, 0x80, 0x80, 0x80}));
        REQUIRE_FALSE(ok(r));
        CHECK(std::get<DecodeError>(r).kind == DecodeError::Kind::MalformedLength);
    }

    TEST_CASE("overflow is rejected") {
        CHECK_THROWS_AS(encode_remaining_length(268'435'456), EncodeError);
        try {
            encode_remaining_length(0xFFFFFFFFu);
        } catch (const EncodeError& e) {
            CHECK(e.kind() == EncodeError::Kind::LengthOverflow);
        }
    }

    TEST_CASE("truncated field asks for more") {
        auto r = decode_remaining_length(B({0xC1}));
        REQUIRE_FALSE(ok(r));
        CHECK(std::get<DecodeError>(r).kind == DecodeError::Kind::Incomplete);
        CHECK(std::get<DecodeError>(r).needed >= 1);
        r = decode_remaining_length({});
        REQUIRE_FALSE(ok(r));
        CHECK(std::get<DecodeError>(r).kind == DecodeError::Kind::Incomplete);
    }

    TEST_CASE("round trip and minimality over 0..2^21 plus the top range") {
        auto check = [](std::uint32_t n) {
            const auto enc = encode_remaining_length(n);
            // Oracle: group count by repeated division; base-128 reconstruction.
            if (enc.size() != wsn::testing::varint_groups(n))
                return false;
            std::uint64_t value = 0, scale = 1;
            for (std::size_t i = 0; i < enc.size(); ++i) {
                const bool last = i + 1 == enc.size();
                if (((enc[i] & 0x80) != 0) == last)
                    return false;
                value += (enc[i] & 0x7F) * scale;
                scale *= 128;
            }
            if (value != n || (n != 0 && enc.back() == 0))
                return false;
            const auto dec = decode_remaining_length(enc);
            return ok(dec) && std::get<0>(dec).value == n && std::get<0>(dec).consumed == enc.size();
        };
        std::size_t bad = 0;
        for (std::uint32_t n = 0; n <= (1u << 21); ++n)
            bad += !check(n);
        for (std::uint32_t n = 268'435'455u - 100'000; n <= 268'435'455u; ++n)
            bad += !check(n);
        CHECK(bad == 0);
    }
}

TEST_SUITE("strings") {
    TEST_CASE("examples") {
        CHECK(encode_utf8_string("") == B({0x00, 0x00}));
        CHECK(encode_utf8_string("MQTT") == B({0x00, 0x04, 0x4D, 0x51, 0x54, 0x54}));
        CHECK(encode_utf8_string("t") == B({0x00, 0x01, 0x74}));
    }

    TEST_CASE("length prefix is the byte length") {
        const std::string s = "h\xC3\xA9llo \xE6\xB0\xB4";
        const auto enc = encode_utf8_string(s);
        CHECK(enc.size() == 2 + s.size());
        CHECK(((enc[0] << 8) | enc[1]) == static_cast<int>(s.size()));
    }

    TEST_CASE("NUL, oversize and malformed UTF-8 are refused") {
        CHECK_THROWS_AS(encode_utf8_string(std::string("a\0b", 3)), EncodeError);
        CHECK_THROWS_AS(encode_utf8_string(std::string(65'536, 'x')), EncodeError);
        CHECK_NOTHROW(encode_utf8_string(std::string(65'535, 'x')));
        CHECK_FALSE(valid_mqtt_utf8("\xC0\x80"));         // overlong NUL
        CHECK_FALSE(valid_mqtt_utf8("\xED\xA0\x80"));     // surrogate
        CHECK_FALSE(valid_mqtt_utf8("\xF4\x90\x80\x80")); // above U+10FFFF
        CHECK_FALSE(valid_mqtt_utf8("\xE6\xB0"));         // truncated
        CHECK(valid_mqtt_utf8("\xF0\x9F\x98\x80"));
    }
}

TEST_SUITE("packets") {
    TEST_CASE("zero-body packets are two bytes") {
        CHECK(encode_packet(PingReq{}) == B({0xC0, 0x00}));
        CHECK(encode_packet(PingResp{}) == B({0xD0, 0x00}));
        CHECK(encode_packet(Disconnect{}) == B({0xE0, 0x00}));
    }

    TEST_CASE("publish example and framing") {
        PublishMessage m;
        m.topic = "t";
        m.payload = {'x'};
        const auto enc = encode_packet(Publish{m});
        CHECK(enc == B({0x30, 0x04, 0x00, 0x01, 0x74, 0x78}));

        auto stream = enc;
        stream.push_back(0xC0);
        stream.push_back(0x00);
        auto r = decode_packet(stream);
        REQUIRE(ok(r));
        CHECK(std::get<0>(r).consumed == 6);
        CHECK(std::get<0>(r).value == Packet{Publish{m}});
        auto rest = ByteView(stream).subspan(6);
        r = decode_packet(rest);
        REQUIRE(ok(r));
        CHECK(std::get<0>(r).value == Packet{PingReq{}});
        CHECK(std::get<0>(r).consumed == 2);
    }

    TEST_CASE("fixed header flag layout") {
        CHECK(encode_packet(Subscribe{1, {{"a", 0}}})[0] == 0x82);
        CHECK(encode_packet(Unsubscribe{1, {"a"}})[0] == 0xA2);
        CHECK(encode_packet(PubRel{1})[0] == 0x62);
        CHECK(encode_packet(PubAck{1})[0] == 0x40);
        PublishMessage m{"a/b", {}, 1, true, true, 7};
        CHECK(encode_packet(Publish{m})[0] == (0x30 | 0x08 | 0x02 | 0x01));
    }

    TEST_CASE("connect layout") {
        ConnectOptions o;
        o.client_id = "node1";
        o.keep_alive_s = 30;
        o.clean_session = true;
        o.will = WillMessage{"s", {'o'}, 1, true};
        o.username = "u";
        o.password = Bytes{'p'};
        const auto enc = encode_packet(Connect{o});
        CHECK(enc[0] == 0x10);
        // protocol name, level, flags, keep-alive
        CHECK(Bytes(enc.begin() + 2, enc.begin() + 8) == B({0x00, 0x04, 'M', 'Q', 'T', 'T'}));
        CHECK(enc[8] == 0x04);
        CHECK(enc[9] == (0x80 | 0x40 | 0x20 | 0x08 | 0x04 | 0x02));
        CHECK(enc[10] == 0x00);
        CHECK(enc[11] == 30);

        ConnectOptions bare;
        bare.client_id = "x";
        CHECK((encode_packet(Connect{bare})[9] & 0x3C) == 0); // no will bits without a will
    }

    TEST_CASE("connack layout") {
        CHECK(encode_packet(ConnAck{true, 0}) == B({0x20, 0x02, 0x01, 0x00}));
        CHECK(encode_packet(ConnAck{false, 5}) == B({0x20, 0x02, 0x00, 0x05}));
    }

    TEST_CASE("invalid packets do not encode") {
        auto kind = [](const Packet& p) {
            try {
                encode_packet(p);
            } catch (const EncodeError& e) {
                return e.kind();
            }
            FAIL("encoded an invalid packet");
            return EncodeError::Kind::LengthOverflow;
        };
        CHECK(kind(Publish{{"a/+", {}, 0, false, false, {}}}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(Publish{{"a/#", {}, 0, false, false, {}}}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(Publish{{"", {}, 0, false, false, {}}}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(Publish{{"a", {}, 0, true, true, {}}}) == EncodeError::Kind::InvalidPacket); // dup at QoS 0
        CHECK(kind(Publish{{"a", {}, 0, false, false, 3}}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(Publish{{"a", {}, 1, false, false, {}}}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(Publish{{"a", {}, 3, false, false, 1}}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(PubAck{0}) == EncodeError::Kind::InvalidPacket);
        CHECK(kind(Subscribe{0, {{"a", 0}}}) == EncodeError::Kind::InvalidPacket);
        ConnectOptions o;
        o.client_id = "c";
        o.will = WillMessage{"bad/+", {}, 0, false};
        CHECK(kind(Connect{o}) == EncodeError::Kind::InvalidPacket);
        o.will.reset();
        o.password = Bytes{'p'};
        CHECK(kind(Connect{o}) == EncodeError::Kind::InvalidPacket);
    }

    TEST_CASE("decode errors are typed") {
        CHECK(error_kind(decode_packet(B({0xF0, 0x00}))) == DecodeError::Kind::UnknownType);
        CHECK(error_kind(decode_packet(B({0x00, 0x00}))) == DecodeError::Kind::UnknownType);
        CHECK(error_kind(decode_packet(B({0xC1, 0x00}))) == DecodeError::Kind::MalformedFlags);
        CHECK(error_kind(decode_packet(B({0x80, 0x00}))) == DecodeError::Kind::MalformedFlags); // SUBSCRIBE needs 0b0010
        CHECK(error_kind(decode_packet(B({0x36, 0x00}))) == DecodeError::Kind::MalformedFlags); // QoS 3
        CHECK(error_kind(decode_packet(B({0x38, 0x00}))) == DecodeError::Kind::MalformedFlags); // DUP at QoS 0
        CHECK(error_kind(decode_packet(B({0x30, 0x04, 0x00, 0x01}))) == DecodeError::Kind::Incomplete);
        CHECK(std::get<DecodeError>(decode_packet(B({0x30, 0x04, 0x00, 0x01}))).needed == 2);
        CHECK(error_kind(decode_packet(B({0x30, 0x03, 0x00, 0x01, 0xFF}))) == DecodeError::Kind::BadString);
        CHECK(error_kind(decode_packet(B({0x30, 0x03, 0x00, 0x01, '+'}))) == DecodeError::Kind::MalformedPacket);
        CHECK(error_kind(decode_packet(B({0xC0, 0x01, 0x00}))) == DecodeError::Kind::MalformedPacket);
        CHECK(error_kind(decode_packet(B({0x20, 0x02, 0x00, 0x06}))) == DecodeError::Kind::MalformedPacket);
    }

    TEST_CASE("random valid packets round trip") {
        PacketGen gen(20240601);
        for (int i = 0; i < 3000; ++i) {
            const auto p = gen.packet();
            const auto enc = encode_packet(p);
            const auto dec = decode_packet(enc);
            REQUIRE(ok(dec));
            CHECK(std::get<0>(dec).value == p);
            CHECK(std::get<0>(dec).consumed == enc.size());
        }
    }

    TEST_CASE("every truncation of a valid packet is Incomplete, never a crash") {
        PacketGen gen(7);
        for (int i = 0; i < 200; ++i) {
            const auto enc = encode_packet(gen.packet());
            for (std::size_t cut = 0; cut < enc.size(); ++cut) {
                const auto r = decode_packet(ByteView(enc).first(cut));
                REQUIRE_FALSE(ok(r));
                CHECK(std::get<DecodeError>(r).kind == DecodeError::Kind::Incomplete);
                CHECK(std::get<DecodeError>(r).needed >= 1);
            }
        }
    }

    TEST_CASE("stream decoder reassembles arbitrary chunking") {
        PacketGen gen(99);
        std::vector<Packet> sent;
        Bytes wire;
        for (int i = 0; i < 300; ++i) {
            sent.push_back(gen.packet());
            encode_packet(sent.back(), wire);
        }
        StreamDecoder d;
        std::vector<Packet> got;
        std::size_t pos = 0;
        while (pos < wire.size()) {
            const auto n = std::min<std::size_t>(wire.size() - pos, static_cast<std::size_t>(gen.pick(1, 40)));
            d.feed(ByteView(wire).subspan(pos, n));
            pos += n;
            while (auto p = d.next())
                got.push_back(std::move(*p));
        }
        CHECK_FALSE(d.error());
        CHECK(d.buffered() == 0);
        CHECK(got == sent);
    }

    TEST_CASE("random bytes decode to a value or a typed error") {
        std::mt19937_64 rng(5);
        std::size_t decoded = 0;
        for (int i = 0; i < 100'000; ++i) {
            Bytes b(rng() % 48);
            for (auto& x : b)
                x = static_cast<std::uint8_t>(rng());
            const auto r = decode_packet(b);
            if (ok(r)) {
                ++decoded;
                CHECK(std::get<0>(r).consumed <= b.size());
            }
        }
        CHECK(decoded < 100'000);
    }
}
