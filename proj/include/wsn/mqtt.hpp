#pragma once

// MQTT 3.1.1 control packet codec.
//
// Encoding is strict: every packet is written with the minimal remaining
// length field and the fixed-header flags mandated for its type. Decoding
// works over a byte stream: it consumes exactly one packet from the front
// of the input and reports how many more bytes are needed when the input
// stops short.

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace wsn::mqtt {

using Bytes = std::vector<std::uint8_t>;
using ByteView = std::span<const std::uint8_t>;

inline constexpr std::uint32_t kMaxRemainingLength = 268'435'455;
inline constexpr std::string_view kProtocolName = "MQTT";
inline constexpr std::uint8_t kProtocolLevel = 4;

enum class PacketType : std::uint8_t {
    Connect = 1,
    ConnAck = 2,
    Publish = 3,
    PubAck = 4,
    PubRec = 5,
    PubRel = 6,
    PubComp = 7,
    Subscribe = 8,
    SubAck = 9,
    Unsubscribe = 10,
    UnsubAck = 11,
    PingReq = 12,
    PingResp = 13,
    Disconnect = 14,
};

enum class ConnectReturnCode : std::uint8_t {
    Accepted = 0,
    BadProtocol = 1,
    IdentifierRejected = 2,
    ServerUnavailable = 3,
    BadCredentials = 4,
    NotAuthorized = 5,
};

inline constexpr std::uint8_t kSubAckFailure = 0x80;

struct WillMessage {
    std::string topic;
    Bytes payload;
    std::uint8_t qos = 0;
    bool retain = false;

    bool operator==(const WillMessage&) const = default;
};

struct ConnectOptions {
    std::string client_id;
    std::uint16_t keep_alive_s = 0;
    bool clean_session = true;
    std::optional<WillMessage> will;
    std::optional<std::string> username;
    std::optional<Bytes> password;
    // Carried so that a broker can answer non-3.1.1 clients with
    // ConnectReturnCode::BadProtocol instead of failing to parse.
    std::string protocol_name{kProtocolName};
    std::uint8_t protocol_level = kProtocolLevel;

    bool operator==(const ConnectOptions&) const = default;
};

struct PublishMessage {
    std::string topic;
    Bytes payload;
    std::uint8_t qos = 0;
    bool retain = false;
    bool dup = false;
    std::optional<std::uint16_t> packet_id;

    bool operator==(const PublishMessage&) const = default;
};

struct Connect {
    ConnectOptions options;
    bool operator==(const Connect&) const = default;
};

struct ConnAck {
    bool session_present = false;
    std::uint8_t return_code = 0;
    bool operator==(const ConnAck&) const = default;
};

struct Publish {
    PublishMessage message;
    bool operator==(const Publish&) const = default;
};

struct SubscribeEntry {
    std::string filter;
    std::uint8_t requested_qos = 0;
    bool operator==(const SubscribeEntry&) const = default;
};

struct Subscribe {
    std::uint16_t packet_id = 0;
    std::vector<SubscribeEntry> entries;
    bool operator==(const Subscribe&) const = default;
};

struct SubAck {
    std::uint16_t packet_id = 0;
    std::vector<std::uint8_t> return_codes;
    bool operator==(const SubAck&) const = default;
};

struct Unsubscribe {
    std::uint16_t packet_id = 0;
    std::vector<std::string> filters;
    bool operator==(const Unsubscribe&) const = default;
};

struct UnsubAck {
    std::uint16_t packet_id = 0;
    bool operator==(const UnsubAck&) const = default;
};

struct PubAck {
    std::uint16_t packet_id = 0;
    bool operator==(const PubAck&) const = default;
};
struct PubRec {
    std::uint16_t packet_id = 0;
    bool operator==(const PubRec&) const = default;
};
struct PubRel {
    std::uint16_t packet_id = 0;
    bool operator==(const PubRel&) const = default;
};
struct PubComp {
    std::uint16_t packet_id = 0;
    bool operator==(const PubComp&) const = default;
};

struct PingReq {
    bool operator==(const PingReq&) const = default;
};
struct PingResp {
    bool operator==(const PingResp&) const = default;
};
struct Disconnect {
    bool operator==(const Disconnect&) const = default;
};

using Packet = std::variant<Connect, ConnAck, Publish, PubAck, PubRec, PubRel, PubComp, Subscribe,
                            SubAck, Unsubscribe, UnsubAck, PingReq, PingResp, Disconnect>;

PacketType packet_type(const Packet& p);
std::string_view packet_type_name(PacketType t);

class EncodeError : public std::runtime_error {
public:
    enum class Kind { LengthOverflow, InvalidPacket, BadString };

    EncodeError(Kind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
    Kind kind() const noexcept { return kind_; }

private:
    Kind kind_;
};

struct DecodeError {
    enum class Kind {
        Incomplete,      // needed holds the minimum number of extra bytes
        MalformedLength,
        UnknownType,
        MalformedFlags,
        BadString,
        MalformedPacket, // structural violation inside the variable header or payload
    };

    Kind kind = Kind::MalformedPacket;
    std::size_t needed = 0;
    std::string detail;

    bool operator==(const DecodeError& o) const { return kind == o.kind && needed == o.needed; }
};

std::string_view to_string(DecodeError::Kind k);

template <class T>
struct Decoded {
    T value;
    std::size_t consumed = 0;
};

template <class T>
using DecodeResult = std::variant<Decoded<T>, DecodeError>;

template <class T>
bool ok(const DecodeResult<T>& r) {
    return r.index() == 0;
}

// Remaining-length field: 1..4 bytes, 7 value bits each, least significant
// group first, continuation in bit 7.
Bytes encode_remaining_length(std::uint32_t n);
void encode_remaining_length(std::uint32_t n, Bytes& out);
DecodeResult<std::uint32_t> decode_remaining_length(ByteView input);

// Two-byte big-endian length prefix followed by UTF-8 without U+0000.
Bytes encode_utf8_string(std::string_view s);
bool valid_mqtt_utf8(std::string_view s);

Bytes encode_packet(const Packet& p);
void encode_packet(const Packet& p, Bytes& out);
DecodeResult<Packet> decode_packet(ByteView input);

// Accumulates stream bytes and yields complete packets in order.
class StreamDecoder {
public:
    void feed(ByteView bytes);
    // nullopt when more bytes are needed or after a decode error; once
    // error() is set the stream is unusable.
    std::optional<Packet> next();
    const std::optional<DecodeError>& error() const { return error_; }
    std::size_t buffered() const { return buffer_.size() - start_; }

private:
    Bytes buffer_;
    std::size_t start_ = 0;
    std::optional<DecodeError> error_;
};

} // namespace wsn::mqtt
