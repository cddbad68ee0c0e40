#include "wsn/mqtt.hpp"

#include <algorithm>
#include <utility>

namespace wsn::mqtt {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

constexpr std::uint8_t fixed_flags(PacketType t) {
    switch (t) {
    case PacketType::Subscribe:
    case PacketType::Unsubscribe:
    case PacketType::PubRel:
        return 0b0010;
    default:
        return 0;
    }
}

bool has_wildcard(std::string_view topic) {
    return topic.find_first_of("+#") != std::string_view::npos;
}

void put_u16(Bytes& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v >> 8));
    out.push_back(static_cast<std::uint8_t>(v & 0xFF));
}

void put_string(Bytes& out, std::string_view s) {
    if (s.size() > 0xFFFF)
        throw EncodeError(EncodeError::Kind::BadString, "string longer than 65535 bytes");
    if (!valid_mqtt_utf8(s))
        throw EncodeError(EncodeError::Kind::BadString, "string is not valid MQTT UTF-8");
    put_u16(out, static_cast<std::uint16_t>(s.size()));
    out.insert(out.end(), s.begin(), s.end());
}

void put_binary(Bytes& out, ByteView b) {
    if (b.size() > 0xFFFF)
        throw EncodeError(EncodeError::Kind::InvalidPacket, "binary field longer than 65535 bytes");
    put_u16(out, static_cast<std::uint16_t>(b.size()));
    out.insert(out.end(), b.begin(), b.end());
}

void require_packet_id(std::uint16_t id) {
    if (id == 0)
        throw EncodeError(EncodeError::Kind::InvalidPacket, "packet identifier must be nonzero");
}

void check_topic_name(std::string_view topic) {
    if (topic.empty() || has_wildcard(topic))
        throw EncodeError(EncodeError::Kind::InvalidPacket,
                          "topic name must be non-empty and free of wildcards");
}

// Writes the variable header and payload; returns the fixed-header flags.
std::uint8_t encode_body(const Packet& packet, Bytes& body) {
    return std::visit(
        Overloaded{
            [&](const Connect& c) -> std::uint8_t {
                const auto& o = c.options;
                put_string(body, o.protocol_name);
                body.push_back(o.protocol_level);
                std::uint8_t flags = 0;
                if (o.username)
                    flags |= 0x80;
                if (o.password) {
                    if (!o.username)
                        throw EncodeError(EncodeError::Kind::InvalidPacket,
                                          "password requires a username");
                    flags |= 0x40;
                }
                if (o.will) {
                    if (o.will->qos > 2)
                        throw EncodeError(EncodeError::Kind::InvalidPacket, "will QoS above 2");
                    check_topic_name(o.will->topic);
                    flags |= 0x04;
                    flags |= static_cast<std::uint8_t>(o.will->qos << 3);
                    if (o.will->retain)
                        flags |= 0x20;
                }
                if (o.clean_session)
                    flags |= 0x02;
                body.push_back(flags);
                put_u16(body, o.keep_alive_s);
                put_string(body, o.client_id);
                if (o.will) {
                    put_string(body, o.will->topic);
                    put_binary(body, o.will->payload);
                }
                if (o.username)
                    put_string(body, *o.username);
                if (o.password)
                    put_binary(body, *o.password);
                return 0;
            },
            [&](const ConnAck& a) -> std::uint8_t {
                if (a.return_code > 5)
                    throw EncodeError(EncodeError::Kind::InvalidPacket, "CONNACK return code above 5");
                body.push_back(a.session_present ? 1 : 0);
                body.push_back(a.return_code);
                return 0;
            },
            [&](const Publish& p) -> std::uint8_t {
                const auto& m = p.message;
                check_topic_name(m.topic);
                if (m.qos > 2)
                    throw EncodeError(EncodeError::Kind::InvalidPacket, "publish QoS above 2");
                if (m.qos == 0 && (m.dup || m.packet_id))
                    throw EncodeError(EncodeError::Kind::InvalidPacket,
                                      "QoS 0 publish carries neither DUP nor a packet id");
                if (m.qos > 0 && !m.packet_id)
                    throw EncodeError(EncodeError::Kind::InvalidPacket,
                                      "QoS>0 publish needs a packet id");
                put_string(body, m.topic);
                if (m.packet_id) {
                    require_packet_id(*m.packet_id);
                    put_u16(body, *m.packet_id);
                }
                body.insert(body.end(), m.payload.begin(), m.payload.end());
                return static_cast<std::uint8_t>((m.dup ? 0x08 : 0) | (m.qos << 1) | (m.retain ? 1 : 0));
            },
            [&](const Subscribe& s) -> std::uint8_t {
                require_packet_id(s.packet_id);
                put_u16(body, s.packet_id);
                for (const auto& e : s.entries) {
                    if (e.requested_qos > 2)
                        throw EncodeError(EncodeError::Kind::InvalidPacket, "requested QoS above 2");
                    put_string(body, e.filter);
                    body.push_back(e.requested_qos);
                }
                return fixed_flags(PacketType::Subscribe);
            },
            [&](const SubAck& s) -> std::uint8_t {
                require_packet_id(s.packet_id);
                put_u16(body, s.packet_id);
                for (auto rc : s.return_codes) {
                    if (rc > 2 && rc != kSubAckFailure)
                        throw EncodeError(EncodeError::Kind::InvalidPacket, "bad SUBACK return code");
                    body.push_back(rc);
                }
                return 0;
            },
            [&](const Unsubscribe& u) -> std::uint8_t {
                require_packet_id(u.packet_id);
                put_u16(body, u.packet_id);
                for (const auto& f : u.filters)
                    put_string(body, f);
                return fixed_flags(PacketType::Unsubscribe);
            },
            [&](const UnsubAck& u) -> std::uint8_t {
                require_packet_id(u.packet_id);
                put_u16(body, u.packet_id);
                return 0;
            },
            [&](const PubAck& a) -> std::uint8_t {
                require_packet_id(a.packet_id);
                put_u16(body, a.packet_id);
                return 0;
            },
            [&](const PubRec& a) -> std::uint8_t {
                require_packet_id(a.packet_id);
                put_u16(body, a.packet_id);
                return 0;
            },
            [&](const PubRel& a) -> std::uint8_t {
                require_packet_id(a.packet_id);
                put_u16(body, a.packet_id);
                return fixed_flags(PacketType::PubRel);
            },
            [&](const PubComp& a) -> std::uint8_t {
                require_packet_id(a.packet_id);
                put_u16(body, a.packet_id);
                return 0;
            },
            [](const PingReq&) -> std::uint8_t { return 0; },
            [](const PingResp&) -> std::uint8_t { return 0; },
            [](const Disconnect&) -> std::uint8_t { return 0; },
        },
        packet);
}

struct BodyError {
    DecodeError::Kind kind;
    const char* detail;
};

class Reader {
public:
    explicit Reader(ByteView data) : data_(data) {}

    std::uint8_t u8() {
        need(1);
        return data_[pos_++];
    }

    std::uint16_t u16() {
        need(2);
        auto v = static_cast<std::uint16_t>((data_[pos_] << 8) | data_[pos_ + 1]);
        pos_ += 2;
        return v;
    }

    std::uint16_t packet_id() {
        auto id = u16();
        if (id == 0)
            throw BodyError{DecodeError::Kind::MalformedPacket, "zero packet identifier"};
        return id;
    }

    std::string string() {
        auto len = u16();
        need(len);
        std::string s(reinterpret_cast<const char*>(data_.data() + pos_), len);
        pos_ += len;
        if (!valid_mqtt_utf8(s))
            throw BodyError{DecodeError::Kind::BadString, "invalid UTF-8 string"};
        return s;
    }

    Bytes binary() {
        auto len = u16();
        need(len);
        Bytes b(data_.begin() + static_cast<std::ptrdiff_t>(pos_),
                data_.begin() + static_cast<std::ptrdiff_t>(pos_ + len));
        pos_ += len;
        return b;
    }

    Bytes rest() {
        Bytes b(data_.begin() + static_cast<std::ptrdiff_t>(pos_), data_.end());
        pos_ = data_.size();
        return b;
    }

    bool at_end() const { return pos_ == data_.size(); }

    void expect_end() const {
        if (!at_end())
            throw BodyError{DecodeError::Kind::MalformedPacket, "trailing bytes in packet"};
    }

private:
    void need(std::size_t n) const {
        if (data_.size() - pos_ < n)
            throw BodyError{DecodeError::Kind::MalformedPacket, "field overruns remaining length"};
    }

    ByteView data_;
    std::size_t pos_ = 0;
};

Packet decode_connect(Reader& r) {
    ConnectOptions o;
    o.protocol_name = r.string();
    o.protocol_level = r.u8();
    const std::uint8_t flags = r.u8();
    if (flags & 0x01)
        throw BodyError{DecodeError::Kind::MalformedPacket, "CONNECT reserved flag set"};
    const bool will_flag = flags & 0x04;
    const auto will_qos = static_cast<std::uint8_t>((flags >> 3) & 0x03);
    const bool will_retain = flags & 0x20;
    if (!will_flag && (will_qos != 0 || will_retain))
        throw BodyError{DecodeError::Kind::MalformedPacket, "will bits set without will flag"};
    if (will_qos > 2)
        throw BodyError{DecodeError::Kind::MalformedPacket, "will QoS 3"};
    const bool has_user = flags & 0x80;
    const bool has_pass = flags & 0x40;
    if (has_pass && !has_user)
        throw BodyError{DecodeError::Kind::MalformedPacket, "password without username"};
    o.clean_session = flags & 0x02;
    o.keep_alive_s = r.u16();
    o.client_id = r.string();
    if (will_flag) {
        WillMessage w;
        w.topic = r.string();
        if (w.topic.empty() || has_wildcard(w.topic))
            throw BodyError{DecodeError::Kind::MalformedPacket, "will topic invalid"};
        w.payload = r.binary();
        w.qos = will_qos;
        w.retain = will_retain;
        o.will = std::move(w);
    }
    if (has_user)
        o.username = r.string();
    if (has_pass)
        o.password = r.binary();
    r.expect_end();
    return Connect{std::move(o)};
}

Packet decode_body(PacketType type, std::uint8_t flags, Reader& r) {
    switch (type) {
    case PacketType::Connect:
        return decode_connect(r);
    case PacketType::ConnAck: {
        const auto ack_flags = r.u8();
        if (ack_flags & 0xFE)
            throw BodyError{DecodeError::Kind::MalformedPacket, "CONNACK reserved bits set"};
        const auto rc = r.u8();
        if (rc > 5)
            throw BodyError{DecodeError::Kind::MalformedPacket, "CONNACK return code above 5"};
        r.expect_end();
        return ConnAck{(ack_flags & 1) != 0, rc};
    }
    case PacketType::Publish: {
        PublishMessage m;
        m.dup = flags & 0x08;
        m.qos = static_cast<std::uint8_t>((flags >> 1) & 0x03);
        m.retain = flags & 0x01;
        m.topic = r.string();
        if (m.topic.empty() || has_wildcard(m.topic))
            throw BodyError{DecodeError::Kind::MalformedPacket, "publish topic invalid"};
        if (m.qos > 0)
            m.packet_id = r.packet_id();
        m.payload = r.rest();
        return Publish{std::move(m)};
    }
    case PacketType::PubAck: {
        PubAck p{r.packet_id()};
        r.expect_end();
        return p;
    }
    case PacketType::PubRec: {
        PubRec p{r.packet_id()};
        r.expect_end();
        return p;
    }
    case PacketType::PubRel: {
        PubRel p{r.packet_id()};
        r.expect_end();
        return p;
    }
    case PacketType::PubComp: {
        PubComp p{r.packet_id()};
        r.expect_end();
        return p;
    }
    case PacketType::Subscribe: {
        Subscribe s;
        s.packet_id = r.packet_id();
        while (!r.at_end()) {
            SubscribeEntry e;
            e.filter = r.string();
            e.requested_qos = r.u8();
            if (e.requested_qos > 2)
                throw BodyError{DecodeError::Kind::MalformedPacket, "bad requested QoS byte"};
            s.entries.push_back(std::move(e));
        }
        return s;
    }
    case PacketType::SubAck: {
        SubAck s;
        s.packet_id = r.packet_id();
        while (!r.at_end()) {
            const auto rc = r.u8();
            if (rc > 2 && rc != kSubAckFailure)
                throw BodyError{DecodeError::Kind::MalformedPacket, "bad SUBACK return code"};
            s.return_codes.push_back(rc);
        }
        return s;
    }
    case PacketType::Unsubscribe: {
        Unsubscribe u;
        u.packet_id = r.packet_id();
        while (!r.at_end())
            u.filters.push_back(r.string());
        return u;
    }
    case PacketType::UnsubAck: {
        UnsubAck u{r.packet_id()};
        r.expect_end();
        return u;
    }
    case PacketType::PingReq:
        r.expect_end();
        return PingReq{};
    case PacketType::PingResp:
        r.expect_end();
        return PingResp{};
    case PacketType::Disconnect:
        r.expect_end();
        return Disconnect{};
    }
    throw BodyError{DecodeError::Kind::UnknownType, "unknown packet type"};
}

DecodeError make_error(DecodeError::Kind kind, std::string detail, std::size_t needed = 0) {
    return DecodeError{kind, needed, std::move(detail)};
}

} // namespace

PacketType packet_type(const Packet& p) {
    static constexpr PacketType kTypes[] = {
        PacketType::Connect,   PacketType::ConnAck, PacketType::Publish,     PacketType::PubAck,
        PacketType::PubRec,    PacketType::PubRel,  PacketType::PubComp,     PacketType::Subscribe,
        PacketType::SubAck,    PacketType::Unsubscribe, PacketType::UnsubAck, PacketType::PingReq,
        PacketType::PingResp,  PacketType::Disconnect,
    };
    return kTypes[p.index()];
}

std::string_view packet_type_name(PacketType t) {
    switch (t) {
    case PacketType::Connect: return "CONNECT";
    case PacketType::ConnAck: return "CONNACK";
    case PacketType::Publish: return "PUBLISH";
    case PacketType::PubAck: return "PUBACK";
    case PacketType::PubRec: return "PUBREC";
    case PacketType::PubRel: return "PUBREL";
    case PacketType::PubComp: return "PUBCOMP";
    case PacketType::Subscribe: return "SUBSCRIBE";
    case PacketType::SubAck: return "SUBACK";
    case PacketType::Unsubscribe: return "UNSUBSCRIBE";
    case PacketType::UnsubAck: return "UNSUBACK";
    case PacketType::PingReq: return "PINGREQ";
    case PacketType::PingResp: return "PINGRESP";
    case PacketType::Disconnect: return "DISCONNECT";
    }
    return "?";
}

std::string_view to_string(DecodeError::Kind k) {
    switch (k) {
    case DecodeError::Kind::Incomplete: return "Incomplete";
    case DecodeError::Kind::MalformedLength: return "MalformedLength";
    case DecodeError::Kind::UnknownType: return "UnknownType";
    case DecodeError::Kind::MalformedFlags: return "MalformedFlags";
    case DecodeError::Kind::BadString: return "BadString";
    case DecodeError::Kind::MalformedPacket: return "MalformedPacket";
    }
    return "?";
}

void encode_remaining_length(std::uint32_t n, Bytes& out) {
    if (n > kMaxRemainingLength)
        throw EncodeError(EncodeError::Kind::LengthOverflow, "remaining length above 268435455");
    do {
        auto byte = static_cast<std::uint8_t>(n % 128);
        n /= 128;
        if (n > 0)
            byte |= 0x80;
        out.push_back(byte);
    } while (n > 0);
}

Bytes encode_remaining_length(std::uint32_t n) {
    Bytes out;
    encode_remaining_length(n, out);
    return out;
}

DecodeResult<std::uint32_t> decode_remaining_length(ByteView input) {
    std::uint32_t value = 0;
    std::uint32_t multiplier = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i >= input.size())
            return make_error(DecodeError::Kind::Incomplete, "length field cut short", 1);
        const auto byte = input[i];
        value += (byte & 0x7Fu) * multiplier;
        if ((byte & 0x80) == 0)
            return Decoded<std::uint32_t>{value, i + 1};
        multiplier *= 128;
    }
    return make_error(DecodeError::Kind::MalformedLength, "length field longer than 4 bytes");
}

bool valid_mqtt_utf8(std::string_view s) {
    std::size_t i = 0;
    const std::size_t n = s.size();
    while (i < n) {
        const auto c = static_cast<unsigned char>(s[i]);
        if (c == 0)
            return false;
        if (c < 0x80) {
            ++i;
            continue;
        }
        std::size_t len;
        std::uint32_t cp;
        if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > n)
            return false;
        for (std::size_t k = 1; k < len; ++k) {
            const auto cc = static_cast<unsigned char>(s[i + k]);
            if ((cc & 0xC0) != 0x80)
                return false;
            cp = (cp << 6) | (cc & 0x3F);
        }
        static constexpr std::uint32_t kMinForLen[] = {0, 0, 0x80, 0x800, 0x10000};
        if (cp < kMinForLen[len] || cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF))
            return false;
        i += len;
    }
    return true;
}

Bytes encode_utf8_string(std::string_view s) {
    Bytes out;
    out.reserve(s.size() + 2);
    put_string(out, s);
    return out;
}

void encode_packet(const Packet& p, Bytes& out) {
    Bytes body;
    const auto flags = encode_body(p, body);
    if (body.size() > kMaxRemainingLength)
        throw EncodeError(EncodeError::Kind::LengthOverflow, "packet body above 268435455 bytes");
    out.push_back(static_cast<std::uint8_t>((static_cast<std::uint8_t>(packet_type(p)) << 4) | flags));
    encode_remaining_length(static_cast<std::uint32_t>(body.size()), out);
    out.insert(out.end(), body.begin(), body.end());
}

Bytes encode_packet(const Packet& p) {
    Bytes out;
    encode_packet(p, out);
    return out;
}

DecodeResult<Packet> decode_packet(ByteView input) {
    if (input.empty())
        return make_error(DecodeError::Kind::Incomplete, "empty input", 2);
    const auto type_bits = static_cast<std::uint8_t>(input[0] >> 4);
    const auto flags = static_cast<std::uint8_t>(input[0] & 0x0F);
    if (type_bits == 0 || type_bits == 15)
        return make_error(DecodeError::Kind::UnknownType, "reserved packet type");
    const auto type = static_cast<PacketType>(type_bits);
    if (type == PacketType::Publish) {
        const auto qos = (flags >> 1) & 0x03;
        if (qos == 3)
            return make_error(DecodeError::Kind::MalformedFlags, "publish QoS 3");
        if (qos == 0 && (flags & 0x08))
            return make_error(DecodeError::Kind::MalformedFlags, "DUP set on QoS 0 publish");
    } else if (flags != fixed_flags(type)) {
        return make_error(DecodeError::Kind::MalformedFlags, "reserved fixed-header flags");
    }
    if (input.size() < 2)
        return make_error(DecodeError::Kind::Incomplete, "missing remaining length", 1);

    auto length = decode_remaining_length(input.subspan(1));
    if (auto* err = std::get_if<DecodeError>(&length))
        return std::move(*err);
    const auto& [remaining, length_bytes] = std::get<Decoded<std::uint32_t>>(length);
    const std::size_t total = 1 + length_bytes + remaining;
    if (input.size() < total)
        return make_error(DecodeError::Kind::Incomplete, "packet body cut short", total - input.size());

    Reader reader(input.subspan(1 + length_bytes, remaining));
    try {
        return Decoded<Packet>{decode_body(type, flags, reader), total};
    } catch (const BodyError& e) {
        return make_error(e.kind, e.detail);
    }
}

void StreamDecoder::feed(ByteView bytes) {
    if (start_ > 0 && start_ * 2 >= buffer_.size()) {
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(start_));
        start_ = 0;
    }
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

std::optional<Packet> StreamDecoder::next() {
    if (error_ || start_ == buffer_.size())
        return std::nullopt;
    auto result = decode_packet(ByteView(buffer_).subspan(start_));
    if (auto* err = std::get_if<DecodeError>(&result)) {
        if (err->kind != DecodeError::Kind::Incomplete)
            error_ = std::move(*err);
        return std::nullopt;
    }
    auto& decoded = std::get<Decoded<Packet>>(result);
    start_ += decoded.consumed;
    return std::move(decoded.value);
}

} // namespace wsn::mqtt
