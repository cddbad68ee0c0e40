#pragma once

// Minimal MQTT 3.1.1 broker core.
//
// Transport-agnostic: a transport attaches a Link per client connection and
// pushes raw bytes in with receive(). Every public method takes the routing
// lock, so inbound packets are applied atomically in one total order that
// respects per-connection arrival order.
//
// Everything is delivered at QoS 0. QoS 1/2 publishes are acknowledged
// (PUBACK, PUBREC/PUBCOMP) so stock clients interoperate, but nothing is
// ever redelivered.

#include "wsn/mqtt.hpp"
#include "wsn/persistence.hpp"
#include "wsn/topic.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace wsn::broker {

using mqtt::Bytes;
using mqtt::ByteView;
using ConnectionId = std::uint64_t;

// The broker's handle on one client connection. Implementations must not
// call back into the Broker from send() or close().
class Link {
public:
    virtual ~Link() = default;
    virtual void send(ByteView bytes) = 0;
    // Broker-initiated close. The broker has already forgotten the
    // connection by the time this is called.
    virtual void close() = 0;
};

struct BrokerOptions {
    double keep_alive_grace = 1.5;
    std::size_t max_payload_bytes = persistence::kMaxPayloadBytes;
    std::size_t max_client_id_chars = 23;
    // Log one console line every N routed messages; 0 disables.
    std::uint64_t log_every = 0;
    std::function<void(std::string_view)> console;
    // Milliseconds; used for keep-alive deadlines and record timestamps.
    std::function<std::uint64_t()> clock;
};

struct TopicStats {
    std::string topic;
    std::uint64_t message_count = 0;
    std::uint64_t last_timestamp_ms = 0;
    std::uint64_t last_offset = 0;
    Bytes latest_payload;

    bool operator==(const TopicStats&) const = default;
};

struct BrokerStats {
    std::uint64_t connects_accepted = 0;
    std::uint64_t connects_refused = 0;
    std::uint64_t clean_disconnects = 0;
    std::uint64_t abnormal_disconnects = 0;
    std::uint64_t messages_routed = 0;     // publishes applied to the routing core, wills included
    std::uint64_t deliveries = 0;          // PUBLISH frames sent for live routing
    std::uint64_t retained_deliveries = 0; // PUBLISH frames sent on subscribe
    std::uint64_t wills_fired = 0;
    std::uint64_t protocol_violations = 0;
    std::uint64_t append_failures = 0;
};

enum class CloseReason { Clean, TransportLost, KeepAliveExpired, ProtocolViolation, TakenOver, Refused };

std::string_view to_string(CloseReason r);

class Broker {
public:
    explicit Broker(BrokerOptions options = {}, persistence::MessageLog* log = nullptr);
    ~Broker();

    Broker(const Broker&) = delete;
    Broker& operator=(const Broker&) = delete;

    ConnectionId attach(std::shared_ptr<Link> link);
    // Bytes arriving from the client; may hold partial or several packets.
    void receive(ConnectionId id, ByteView bytes);
    // The transport went away without the broker closing it.
    void connection_lost(ConnectionId id);
    // Closes every connection silent for longer than grace x keep-alive.
    // Returns how many were expired.
    std::size_t expire_idle();

    // Routes a message as if a client had published it. Returns the client
    // ids that received a live delivery.
    std::vector<std::string> publish(const mqtt::PublishMessage& msg);

    std::vector<TopicStats> topics() const;
    std::optional<TopicStats> topic(std::string_view name) const;
    std::map<std::string, Bytes> retained() const;
    BrokerStats stats() const;
    bool persistence_degraded() const;
    std::size_t connection_count() const;
    std::size_t session_count() const;
    std::vector<std::string> connected_clients() const;
    // Hash over sessions, subscriptions, retained store, topic cache and
    // counters; equal digests mean no observable routing state changed.
    std::uint64_t state_digest() const;

    const persistence::MessageLog* log() const { return log_; }

private:
    struct Session {
        std::string client_id;
        std::uint64_t subscriber_id = 0;
        bool clean_session = true;
        std::map<std::string, std::uint8_t> subscriptions;
        std::optional<mqtt::WillMessage> will;
        std::uint16_t keep_alive_s = 0;
        std::optional<ConnectionId> connection;
    };

    struct Connection {
        std::shared_ptr<Link> link;
        mqtt::StreamDecoder decoder;
        std::optional<std::string> client_id;
        std::uint64_t last_activity_ms = 0;
        std::uint16_t keep_alive_s = 0;
        std::set<std::uint16_t> pending_qos2;
    };

    std::uint64_t now() const;
    void say(const std::string& line) const;
    void send(Connection& conn, const mqtt::Packet& packet);
    void dispatch(ConnectionId id, mqtt::Packet&& packet);
    void handle_connect(ConnectionId id, mqtt::ConnectOptions&& opts);
    void handle_publish(ConnectionId id, mqtt::PublishMessage&& msg);
    void handle_subscribe(ConnectionId id, mqtt::Subscribe&& sub);
    void handle_unsubscribe(ConnectionId id, mqtt::Unsubscribe&& unsub);
    void handle_disconnect(ConnectionId id);
    // Drops the connection without a DISCONNECT: will fires, clean sessions go.
    void handle_connection_loss(ConnectionId id, CloseReason reason, bool close_link);
    std::vector<std::string> route(const mqtt::PublishMessage& msg);
    void drop_session(Session& s);

    BrokerOptions options_;
    persistence::MessageLog* log_;
    bool degraded_ = false;

    mutable std::mutex mutex_;
    ConnectionId next_connection_ = 1;
    std::uint64_t next_subscriber_ = 1;
    std::uint64_t next_auto_id_ = 1;
    std::uint64_t next_offset_ = 0;
    std::unordered_map<ConnectionId, Connection> connections_;
    std::unordered_map<std::string, Session> sessions_;
    std::unordered_map<std::uint64_t, std::string> subscriber_clients_;
    SubscriptionTrie trie_;
    std::map<std::string, Bytes> retained_;
    std::map<std::string, TopicStats, std::less<>> topics_;
    BrokerStats stats_;
};

} // namespace wsn::broker
