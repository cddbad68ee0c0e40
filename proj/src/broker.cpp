#include "wsn/broker.hpp"

#include <algorithm>
#include <chrono>
#include <sstream>

namespace wsn::broker {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

std::size_t utf8_chars(std::string_view s) {
    std::size_t n = 0;
    for (unsigned char c : s)
        if ((c & 0xC0) != 0x80)
            ++n;
    return n;
}

std::uint64_t wall_clock_ms() {
    using namespace std::chrono;
    return static_cast<std::uint64_t>(duration_cast<milliseconds>(system_clock::now().time_since_epoch()).count());
}

// Largest frame we are willing to buffer: payload limit plus a maximal topic
// and header overhead.
std::size_t max_frame_bytes(std::size_t max_payload) { return max_payload + 0xFFFF + 2 + 2 + 5; }

} // namespace

std::string_view to_string(CloseReason r) {
    switch (r) {
    case CloseReason::Clean: return "clean";
    case CloseReason::TransportLost: return "transport-lost";
    case CloseReason::KeepAliveExpired: return "keep-alive-expired";
    case CloseReason::ProtocolViolation: return "protocol-violation";
    case CloseReason::TakenOver: return "taken-over";
    case CloseReason::Refused: return "refused";
    }
    return "?";
}

Broker::Broker(BrokerOptions options, persistence::MessageLog* log) : options_(std::move(options)), log_(log) {
    if (!options_.clock)
        options_.clock = wall_clock_ms;
    if (log_) {
        // Rebuild the latest-value cache so it matches the log from the start.
        log_->replay(log_->next_offset() - log_->size(), [&](const persistence::LogRecord& r) {
            auto& t = topics_[r.topic];
            t.topic = r.topic;
            ++t.message_count;
            t.last_timestamp_ms = r.timestamp_ms;
            t.last_offset = r.offset;
            t.latest_payload = r.payload;
        });
        next_offset_ = log_->next_offset();
    }
}

Broker::~Broker() = default;

std::uint64_t Broker::now() const { return options_.clock(); }

void Broker::say(const std::string& line) const {
    if (options_.console)
        options_.console(line);
}

void Broker::send(Connection& conn, const mqtt::Packet& packet) {
    const auto bytes = mqtt::encode_packet(packet);
    conn.link->send(bytes);
}

ConnectionId Broker::attach(std::shared_ptr<Link> link) {
    std::lock_guard lock(mutex_);
    const auto id = next_connection_++;
    Connection conn;
    conn.link = std::move(link);
    conn.last_activity_ms = now();
    connections_.emplace(id, std::move(conn));
    return id;
}

void Broker::receive(ConnectionId id, ByteView bytes) {
    std::lock_guard lock(mutex_);
    auto it = connections_.find(id);
    if (it == connections_.end())
        return;
    it->second.decoder.feed(bytes);
    while (true) {
        it = connections_.find(id);
        if (it == connections_.end())
            return;
        auto& decoder = it->second.decoder;
        auto packet = decoder.next();
        if (!packet) {
            if (decoder.error()) {
                ++stats_.protocol_violations;
                say("protocol error on connection " + std::to_string(id) + ": " +
                    std::string(mqtt::to_string(decoder.error()->kind)) + " " + decoder.error()->detail);
                handle_connection_loss(id, CloseReason::ProtocolViolation, true);
            } else if (decoder.buffered() > max_frame_bytes(options_.max_payload_bytes)) {
                ++stats_.protocol_violations;
                say("packet too large on connection " + std::to_string(id));
                handle_connection_loss(id, CloseReason::ProtocolViolation, true);
            }
            return;
        }
        dispatch(id, std::move(*packet));
    }
}

void Broker::connection_lost(ConnectionId id) {
    std::lock_guard lock(mutex_);
    handle_connection_loss(id, CloseReason::TransportLost, false);
}

std::size_t Broker::expire_idle() {
    std::lock_guard lock(mutex_);
    const auto t = now();
    std::vector<ConnectionId> expired;
    for (const auto& [id, conn] : connections_) {
        if (!conn.client_id || conn.keep_alive_s == 0)
            continue;
        const auto limit = static_cast<std::uint64_t>(options_.keep_alive_grace * conn.keep_alive_s * 1000.0);
        if (t > conn.last_activity_ms && t - conn.last_activity_ms > limit)
            expired.push_back(id);
    }
    for (auto id : expired)
        handle_connection_loss(id, CloseReason::KeepAliveExpired, true);
    return expired.size();
}

void Broker::dispatch(ConnectionId id, mqtt::Packet&& packet) {
    auto& conn = connections_.at(id);
    conn.last_activity_ms = now();
    const bool is_connect = std::holds_alternative<mqtt::Connect>(packet);
    if (!conn.client_id && !is_connect) {
        ++stats_.protocol_violations;
        say("connection " + std::to_string(id) + " sent " +
            std::string(mqtt::packet_type_name(mqtt::packet_type(packet))) + " before CONNECT");
        handle_connection_loss(id, CloseReason::ProtocolViolation, true);
        return;
    }

    auto violation = [&](const char* what) {
        ++stats_.protocol_violations;
        say("protocol violation by " + conn.client_id.value_or("?") + ": " + what);
        handle_connection_loss(id, CloseReason::ProtocolViolation, true);
    };

    std::visit(Overloaded{
                   [&](mqtt::Connect& c) {
                       if (conn.client_id)
                           violation("second CONNECT");
                       else
                           handle_connect(id, std::move(c.options));
                   },
                   [&](mqtt::Publish& p) { handle_publish(id, std::move(p.message)); },
                   [&](mqtt::Subscribe& s) { handle_subscribe(id, std::move(s)); },
                   [&](mqtt::Unsubscribe& u) { handle_unsubscribe(id, std::move(u)); },
                   [&](mqtt::PubRel& r) {
                       conn.pending_qos2.erase(r.packet_id);
                       send(conn, mqtt::PubComp{r.packet_id});
                   },
                   [&](mqtt::PingReq&) { send(conn, mqtt::PingResp{}); },
                   [&](mqtt::Disconnect&) { handle_disconnect(id); },
                   // Acks for QoS>0 deliveries we never make; harmless.
                   [&](mqtt::PubAck&) {},
                   [&](mqtt::PubRec& r) { send(conn, mqtt::PubRel{r.packet_id}); },
                   [&](mqtt::PubComp&) {},
                   [&](mqtt::ConnAck&) { violation("client sent CONNACK"); },
                   [&](mqtt::SubAck&) { violation("client sent SUBACK"); },
                   [&](mqtt::UnsubAck&) { violation("client sent UNSUBACK"); },
                   [&](mqtt::PingResp&) { violation("client sent PINGRESP"); },
               },
               packet);
}

void Broker::handle_connect(ConnectionId id, mqtt::ConnectOptions&& opts) {
    auto refuse = [&](mqtt::ConnectReturnCode code, const std::string& why) {
        auto it = connections_.find(id);
        send(it->second, mqtt::ConnAck{false, static_cast<std::uint8_t>(code)});
        auto link = std::move(it->second.link);
        connections_.erase(it);
        link->close();
        ++stats_.connects_refused;
        say("refused connection " + std::to_string(id) + " (" + why + ")");
    };

    if (opts.protocol_name != mqtt::kProtocolName || opts.protocol_level != mqtt::kProtocolLevel) {
        refuse(mqtt::ConnectReturnCode::BadProtocol,
               "protocol " + opts.protocol_name + " level " + std::to_string(opts.protocol_level));
        return;
    }
    if (opts.client_id.empty()) {
        if (!opts.clean_session) {
            refuse(mqtt::ConnectReturnCode::IdentifierRejected, "empty client id without clean session");
            return;
        }
        opts.client_id = "auto-" + std::to_string(next_auto_id_++);
    }
    if (utf8_chars(opts.client_id) > options_.max_client_id_chars) {
        refuse(mqtt::ConnectReturnCode::IdentifierRejected, "client id longer than " +
                                                                std::to_string(options_.max_client_id_chars));
        return;
    }

    if (auto it = sessions_.find(opts.client_id); it != sessions_.end() && it->second.connection) {
        const auto previous = *it->second.connection;
        say("session takeover for " + opts.client_id);
        handle_connection_loss(previous, CloseReason::TakenOver, true);
    }

    bool session_present = false;
    auto it = sessions_.find(opts.client_id);
    if (it != sessions_.end() && opts.clean_session) {
        drop_session(it->second);
        it = sessions_.end();
    }
    if (it == sessions_.end()) {
        Session fresh;
        fresh.client_id = opts.client_id;
        fresh.subscriber_id = next_subscriber_++;
        subscriber_clients_.emplace(fresh.subscriber_id, fresh.client_id);
        it = sessions_.emplace(opts.client_id, std::move(fresh)).first;
    } else {
        session_present = true;
    }

    auto& session = it->second;
    session.clean_session = opts.clean_session;
    session.will = std::move(opts.will);
    session.keep_alive_s = opts.keep_alive_s;
    session.connection = id;

    auto& conn = connections_.at(id);
    conn.client_id = session.client_id;
    conn.keep_alive_s = opts.keep_alive_s;
    conn.last_activity_ms = now();
    send(conn, mqtt::ConnAck{session_present, 0});
    ++stats_.connects_accepted;
    say("connect client=" + session.client_id + " clean=" + (opts.clean_session ? "1" : "0") +
        " keep_alive=" + std::to_string(opts.keep_alive_s) + " will=" + (session.will ? session.will->topic : "-"));
}

void Broker::handle_publish(ConnectionId id, mqtt::PublishMessage&& msg) {
    auto& conn = connections_.at(id);
    if (msg.payload.size() > options_.max_payload_bytes || !TopicName::valid(msg.topic)) {
        ++stats_.protocol_violations;
        say("protocol violation by " + conn.client_id.value_or("?") + ": bad publish on " + msg.topic);
        handle_connection_loss(id, CloseReason::ProtocolViolation, true);
        return;
    }
    bool duplicate = false;
    if (msg.qos == 2 && msg.packet_id) {
        duplicate = !conn.pending_qos2.insert(*msg.packet_id).second;
    }
    const auto qos = msg.qos;
    const auto packet_id = msg.packet_id;
    if (!duplicate)
        route(msg);
    auto it = connections_.find(id);
    if (it == connections_.end())
        return;
    if (qos == 1)
        send(it->second, mqtt::PubAck{*packet_id});
    else if (qos == 2)
        send(it->second, mqtt::PubRec{*packet_id});
}

void Broker::handle_subscribe(ConnectionId id, mqtt::Subscribe&& sub) {
    auto& conn = connections_.at(id);
    if (sub.entries.empty()) {
        ++stats_.protocol_violations;
        say("protocol violation by " + *conn.client_id + ": empty SUBSCRIBE");
        handle_connection_loss(id, CloseReason::ProtocolViolation, true);
        return;
    }
    auto& session = sessions_.at(*conn.client_id);
    mqtt::SubAck ack{sub.packet_id, {}};
    std::vector<TopicFilter> accepted;
    for (const auto& entry : sub.entries) {
        auto filter = TopicFilter::parse(entry.filter);
        if (!filter) {
            ack.return_codes.push_back(mqtt::kSubAckFailure);
            continue;
        }
        session.subscriptions[filter->str()] = 0;
        trie_.insert(*filter, session.subscriber_id, 0);
        ack.return_codes.push_back(0);
        accepted.push_back(std::move(*filter));
    }
    send(conn, ack);

    std::set<std::string> sent;
    for (const auto& filter : accepted) {
        for (const auto& [topic, payload] : retained_) {
            if (sent.contains(topic) || !topic_matches(filter.str(), topic))
                continue;
            sent.insert(topic);
            mqtt::PublishMessage m{topic, payload, 0, true, false, std::nullopt};
            send(conn, mqtt::Publish{std::move(m)});
            ++stats_.retained_deliveries;
        }
    }
}

void Broker::handle_unsubscribe(ConnectionId id, mqtt::Unsubscribe&& unsub) {
    auto& conn = connections_.at(id);
    if (unsub.filters.empty()) {
        ++stats_.protocol_violations;
        handle_connection_loss(id, CloseReason::ProtocolViolation, true);
        return;
    }
    auto& session = sessions_.at(*conn.client_id);
    for (const auto& f : unsub.filters) {
        if (auto filter = TopicFilter::parse(f)) {
            session.subscriptions.erase(filter->str());
            trie_.erase(*filter, session.subscriber_id);
        }
    }
    send(conn, mqtt::UnsubAck{unsub.packet_id});
}

void Broker::handle_disconnect(ConnectionId id) {
    auto it = connections_.find(id);
    auto conn = std::move(it->second);
    connections_.erase(it);
    auto sit = sessions_.find(*conn.client_id);
    if (sit != sessions_.end() && sit->second.connection == id) {
        sit->second.will.reset();
        sit->second.connection.reset();
        if (sit->second.clean_session)
            drop_session(sit->second);
    }
    ++stats_.clean_disconnects;
    say("disconnect client=" + *conn.client_id + " reason=clean");
    conn.link->close();
}

void Broker::handle_connection_loss(ConnectionId id, CloseReason reason, bool close_link) {
    auto it = connections_.find(id);
    if (it == connections_.end())
        return;
    auto conn = std::move(it->second);
    connections_.erase(it);
    if (close_link)
        conn.link->close();
    if (!conn.client_id)
        return;

    auto sit = sessions_.find(*conn.client_id);
    if (sit == sessions_.end() || sit->second.connection != id)
        return;
    auto& session = sit->second;
    session.connection.reset();
    ++stats_.abnormal_disconnects;
    say("disconnect client=" + session.client_id + " reason=" + std::string(to_string(reason)));

    std::optional<mqtt::WillMessage> will = std::move(session.will);
    session.will.reset();
    const auto client_id = session.client_id;
    if (session.clean_session)
        drop_session(session);

    if (will) {
        ++stats_.wills_fired;
        say("will client=" + client_id + " topic=" + will->topic + " payload=" +
            std::string(will->payload.begin(), will->payload.end()));
        route(mqtt::PublishMessage{will->topic, std::move(will->payload), 0, will->retain, false, std::nullopt});
    }
}

void Broker::drop_session(Session& s) {
    for (const auto& [filter, _] : s.subscriptions) {
        if (auto f = TopicFilter::parse(filter))
            trie_.erase(*f, s.subscriber_id);
    }
    subscriber_clients_.erase(s.subscriber_id);
    const auto key = s.client_id;
    sessions_.erase(key);
}

std::vector<std::string> Broker::route(const mqtt::PublishMessage& msg) {
    const auto ts = now();
    std::uint64_t offset = next_offset_;
    if (log_ && !degraded_) {
        try {
            offset = log_->append(msg.topic, msg.payload, ts);
        } catch (const std::exception& e) {
            degraded_ = true;
            ++stats_.append_failures;
            say(std::string("PERSISTENCE FAILURE: ") + e.what() +
                "; continuing with the in-memory latest-value cache only");
        }
    }
    next_offset_ = offset + 1;

    auto tit = topics_.find(msg.topic);
    if (tit == topics_.end())
        tit = topics_.emplace(msg.topic, TopicStats{msg.topic, 0, 0, 0, {}}).first;
    auto& stats = tit->second;
    ++stats.message_count;
    stats.last_timestamp_ms = ts;
    stats.last_offset = offset;
    stats.latest_payload = msg.payload;

    if (msg.retain) {
        if (msg.payload.empty())
            retained_.erase(msg.topic);
        else
            retained_[msg.topic] = msg.payload;
    }

    ++stats_.messages_routed;
    if (options_.log_every > 0 && stats_.messages_routed % options_.log_every == 0) {
        say("message #" + std::to_string(stats_.messages_routed) + " topic=" + msg.topic + " payload=" +
            std::string(msg.payload.begin(), msg.payload.end()));
    }

    std::vector<std::string> delivered;
    const auto topic = TopicName::parse(msg.topic);
    if (!topic)
        return delivered;
    const auto matches = trie_.match(*topic);
    if (matches.empty())
        return delivered;
    const auto frame = mqtt::encode_packet(mqtt::Publish{{msg.topic, msg.payload, 0, false, false, std::nullopt}});
    for (const auto& [subscriber, qos] : matches) {
        auto cit = subscriber_clients_.find(subscriber);
        if (cit == subscriber_clients_.end())
            continue;
        auto sit = sessions_.find(cit->second);
        if (sit == sessions_.end() || !sit->second.connection)
            continue;
        auto conn = connections_.find(*sit->second.connection);
        if (conn == connections_.end())
            continue;
        conn->second.link->send(frame);
        ++stats_.deliveries;
        delivered.push_back(cit->second);
    }
    return delivered;
}

std::vector<std::string> Broker::publish(const mqtt::PublishMessage& msg) {
    std::lock_guard lock(mutex_);
    if (!TopicName::valid(msg.topic))
        throw std::invalid_argument("cannot publish to topic '" + msg.topic + "'");
    return route(msg);
}

std::vector<TopicStats> Broker::topics() const {
    std::lock_guard lock(mutex_);
    std::vector<TopicStats> out;
    out.reserve(topics_.size());
    for (const auto& [_, t] : topics_)
        out.push_back(t);
    return out;
}

std::optional<TopicStats> Broker::topic(std::string_view name) const {
    std::lock_guard lock(mutex_);
    auto it = topics_.find(name);
    if (it == topics_.end())
        return std::nullopt;
    return it->second;
}

std::map<std::string, Bytes> Broker::retained() const {
    std::lock_guard lock(mutex_);
    return retained_;
}

BrokerStats Broker::stats() const {
    std::lock_guard lock(mutex_);
    return stats_;
}

bool Broker::persistence_degraded() const {
    std::lock_guard lock(mutex_);
    return degraded_;
}

std::size_t Broker::connection_count() const {
    std::lock_guard lock(mutex_);
    return connections_.size();
}

std::size_t Broker::session_count() const {
    std::lock_guard lock(mutex_);
    return sessions_.size();
}

std::vector<std::string> Broker::connected_clients() const {
    std::lock_guard lock(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, s] : sessions_)
        if (s.connection)
            out.push_back(id);
    std::sort(out.begin(), out.end());
    return out;
}

std::uint64_t Broker::state_digest() const {
    std::lock_guard lock(mutex_);
    std::ostringstream os;
    std::map<std::string, const Session*> ordered;
    for (const auto& [id, s] : sessions_)
        ordered.emplace(id, &s);
    for (const auto& [id, s] : ordered) {
        os << "S" << id << '|' << s->clean_session << '|' << s->connection.has_value() << '|' << s->keep_alive_s;
        for (const auto& [f, q] : s->subscriptions)
            os << '|' << f << ':' << int(q);
        if (s->will)
            os << "|W" << s->will->topic << ':' << std::string(s->will->payload.begin(), s->will->payload.end());
        os << '\n';
    }
    for (const auto& [t, p] : retained_)
        os << "R" << t << '|' << std::string(p.begin(), p.end()) << '\n';
    for (const auto& [t, s] : topics_)
        os << "T" << t << '|' << s.message_count << '|' << s.last_offset << '|' << s.last_timestamp_ms << '|'
           << std::string(s.latest_payload.begin(), s.latest_payload.end()) << '\n';
    os << stats_.connects_accepted << ',' << stats_.connects_refused << ',' << stats_.clean_disconnects << ','
       << stats_.abnormal_disconnects << ',' << stats_.messages_routed << ',' << stats_.deliveries << ','
       << stats_.retained_deliveries << ',' << stats_.wills_fired << ',' << stats_.protocol_violations << ','
       << connections_.size() << ',' << next_offset_ << ',' << degraded_;
    return std::hash<std::string>{}(os.str());
}

} // namespace wsn::broker
