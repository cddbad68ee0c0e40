#include "wsn/node.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace wsn::node {

namespace {

template <class... Fs>
struct Overloaded : Fs... {
    using Fs::operator()...;
};
template <class... Fs>
Overloaded(Fs...) -> Overloaded<Fs...>;

mqtt::Bytes to_bytes(std::string_view s) { return mqtt::Bytes(s.begin(), s.end()); }

std::uint64_t seconds_to_ms(double s) { return static_cast<std::uint64_t>(std::llround(s * 1000.0)); }

std::string upper(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
    return s;
}

} // namespace

std::string data_topic(std::string_view client_id) { return "sensors/" + std::string(client_id) + "/data"; }
std::string status_topic(std::string_view client_id) { return "sensors/" + std::string(client_id) + "/status"; }

NodeConfig NodeConfig::for_client(std::string client_id, std::uint64_t seed) {
    NodeConfig c;
    c.topic = data_topic(client_id);
    c.status_topic = node::status_topic(client_id);
    c.client_id = std::move(client_id);
    c.rng_seed = seed;
    return c;
}

std::string NodeConfig::validate() const {
    if (client_id.empty())
        return "client_id must not be empty";
    if (!(battery_wh > 0))
        return "battery_wh must be positive";
    if (!(bus_voltage_v > 0))
        return "bus_voltage_v must be positive";
    if (!(avg_current_a > 0))
        return "avg_current_a must be positive";
    if (!(sample_interval_s > 0))
        return "sample_interval_s must be positive";
    if (connect_retry_backoff_s < 0)
        return "connect_retry_backoff_s must not be negative";
    return profile.validate();
}

std::string_view to_string(Phase p) {
    switch (p) {
    case Phase::PoweredOff: return "PoweredOff";
    case Phase::LinkConnecting: return "LinkConnecting";
    case Phase::MqttConnecting: return "MqttConnecting";
    case Phase::Connected: return "Connected";
    }
    return "?";
}

std::string_view event_name(const NodeEvent& e) {
    static constexpr std::string_view kNames[] = {"PowerOn",     "LinkUp",         "LinkFail",
                                                  "ConnAckOk",   "ConnAckErr",     "SampleTimer",
                                                  "PublishIoError", "TransportLost", "PowerOff"};
    return kNames[e.index()];
}

InvalidTransition::InvalidTransition(Phase phase, std::string_view event)
    : std::logic_error("no transition from " + std::string(to_string(phase)) + " on " + std::string(event)) {}

StepResult node_step(const NodeState& state, const NodeConfig& config, const NodeEvent& ev) {
    StepResult r{state, {}};
    auto& s = r.state;
    auto& out = r.actions;
    const auto& status = config.status_topic.empty() ? status_topic(config.client_id) : config.status_topic;
    const auto& topic = config.topic.empty() ? data_topic(config.client_id) : config.topic;

    auto retry = [&](bool close_transport) {
        s.phase = Phase::LinkConnecting;
        ++s.consecutive_failures;
        if (close_transport)
            out.emplace_back(action::CloseTransport{});
        out.emplace_back(action::RetryAfter{config.connect_retry_backoff_s});
    };
    auto invalid = [&]() -> StepResult { throw InvalidTransition(state.phase, event_name(ev)); };

    switch (state.phase) {
    case Phase::PoweredOff:
        if (std::holds_alternative<event::PowerOn>(ev)) {
            s.phase = Phase::LinkConnecting;
            s.consecutive_failures = 0;
            return r;
        }
        if (std::holds_alternative<event::PowerOff>(ev))
            return r;
        return invalid();

    case Phase::LinkConnecting:
        if (std::holds_alternative<event::LinkUp>(ev)) {
            s.phase = Phase::MqttConnecting;
            mqtt::ConnectOptions opts;
            opts.client_id = config.client_id;
            opts.keep_alive_s = config.keep_alive_s;
            opts.clean_session = true;
            opts.will = mqtt::WillMessage{status, to_bytes(kOfflinePayload), 0, true};
            out.emplace_back(action::SendConnect{std::move(opts)});
            return r;
        }
        if (std::holds_alternative<event::LinkFail>(ev)) {
            retry(false);
            return r;
        }
        if (std::holds_alternative<event::PowerOff>(ev)) {
            s.phase = Phase::PoweredOff;
            return r;
        }
        return invalid();

    case Phase::MqttConnecting:
        if (std::holds_alternative<event::ConnAckOk>(ev)) {
            s.phase = Phase::Connected;
            s.consecutive_failures = 0;
            out.emplace_back(action::SendPublish{
                mqtt::PublishMessage{status, to_bytes(kOnlinePayload), 0, true, false, std::nullopt}, false});
            out.emplace_back(action::ArmSampleTimer{config.sample_interval_s});
            return r;
        }
        if (std::holds_alternative<event::ConnAckErr>(ev) || std::holds_alternative<event::LinkFail>(ev)) {
            retry(true);
            return r;
        }
        if (std::holds_alternative<event::TransportLost>(ev)) {
            retry(false);
            return r;
        }
        if (std::holds_alternative<event::PowerOff>(ev)) {
            s.phase = Phase::PoweredOff;
            out.emplace_back(action::SendDisconnect{});
            out.emplace_back(action::CloseTransport{});
            return r;
        }
        return invalid();

    case Phase::Connected:
        if (const auto* tick = std::get_if<event::SampleTimer>(&ev)) {
            ++s.published_count;
            out.emplace_back(action::SendPublish{
                mqtt::PublishMessage{topic, to_bytes(build_payload(tick->reading)), 0, false, false, std::nullopt},
                true});
            out.emplace_back(action::ArmSampleTimer{config.sample_interval_s});
            return r;
        }
        if (std::holds_alternative<event::PublishIoError>(ev)) {
            ++s.dropped_count;
            return r;
        }
        if (std::holds_alternative<event::TransportLost>(ev)) {
            out.emplace_back(action::CancelSampleTimer{});
            retry(false);
            return r;
        }
        if (std::holds_alternative<event::LinkFail>(ev)) {
            out.emplace_back(action::CancelSampleTimer{});
            retry(true);
            return r;
        }
        if (std::holds_alternative<event::PowerOff>(ev)) {
            s.phase = Phase::PoweredOff;
            out.emplace_back(action::CancelSampleTimer{});
            out.emplace_back(action::SendDisconnect{});
            out.emplace_back(action::CloseTransport{});
            return r;
        }
        return invalid();
    }
    return invalid();
}

double estimate_lifetime(double battery_wh, double bus_voltage_v, double avg_current_a) {
    if (!(battery_wh > 0) || !(bus_voltage_v > 0) || !(avg_current_a > 0))
        throw std::domain_error("battery, voltage and current must all be positive");
    return battery_wh / (bus_voltage_v * avg_current_a);
}

double estimate_lifetime(const NodeConfig& config) {
    return estimate_lifetime(config.battery_wh, config.bus_voltage_v, config.avg_current_a);
}

double energy_for(const NodeConfig& config, double seconds) {
    return config.bus_voltage_v * config.avg_current_a * seconds / 3600.0;
}

bool FaultPlan::fails(std::uint64_t publish_index) const {
    if (fail_every_nth_publish > 0 && publish_index % fail_every_nth_publish == 0)
        return true;
    return fail_publishes.contains(publish_index);
}

SensorNode::SensorNode(NodeConfig config, rt::Scheduler& scheduler, rt::Connector& connector, FaultPlan faults)
    : config_(std::move(config)),
      scheduler_(scheduler),
      connector_(connector),
      faults_(std::move(faults)),
      environment_(config_.environment, config_.profile, config_.rng_seed),
      rng_(config_.rng_seed ^ 0x9E3779B97F4A7C15ull),
      alive_(std::make_shared<bool>(true)) {
    if (auto problem = config_.validate(); !problem.empty())
        throw std::invalid_argument("node " + config_.client_id + ": " + problem);
    if (config_.topic.empty())
        config_.topic = data_topic(config_.client_id);
    if (config_.status_topic.empty())
        config_.status_topic = status_topic(config_.client_id);
    bias_ = draw_bias(config_.profile, rng_);
}

SensorNode::~SensorNode() {
    cancel_timers();
    scheduler_.cancel(battery_timer_);
    for (auto id : cut_timers_)
        scheduler_.cancel(id);
    *alive_ = false;
    stream_.reset();
}

void SensorNode::log(std::string line) {
    if (on_trace)
        on_trace(line);
    trace_.push_back(std::move(line));
}

void SensorNode::power_on() {
    if (state_.phase != Phase::PoweredOff || killed_ || depleted_)
        return;
    powered_at_ms_ = scheduler_.now_ms();
    energy_mark_ms_ = powered_at_ms_;
    log("Sensor: " + upper(config_.profile.name));
    if (config_.profile.pressure)
        log("Found BMP280 sensor! No Humidity available.");
    apply(event::PowerOn{});

    std::weak_ptr<bool> alive = alive_;
    const double remaining_wh = config_.battery_wh - state_.energy_used_wh;
    const double seconds_left = remaining_wh / (config_.bus_voltage_v * config_.avg_current_a) * 3600.0;
    battery_timer_ = scheduler_.schedule(seconds_to_ms(seconds_left), [this, alive] {
        if (alive.expired() || state_.phase == Phase::PoweredOff)
            return;
        accrue_energy();
        state_.energy_used_wh = config_.battery_wh;
        depleted_ = true;
        log("battery depleted");
        drop_transport();
        cancel_timers();
        state_.phase = Phase::PoweredOff;
    });
    for (auto at : faults_.cut_transport_at_ms) {
        cut_timers_.push_back(scheduler_.schedule(at, [this, alive] {
            if (alive.expired() || !stream_)
                return;
            log("transport cut");
            drop_transport();
            if (state_.phase == Phase::MqttConnecting || state_.phase == Phase::Connected)
                apply(event::TransportLost{});
        }));
    }
    attempt_link();
}

void SensorNode::power_off() {
    if (state_.phase == Phase::PoweredOff)
        return;
    apply(event::PowerOff{});
    scheduler_.cancel(battery_timer_);
}

void SensorNode::kill() {
    if (state_.phase == Phase::PoweredOff)
        return;
    accrue_energy();
    killed_ = true;
    drop_transport();
    cancel_timers();
    scheduler_.cancel(battery_timer_);
    state_.phase = Phase::PoweredOff;
}

void SensorNode::apply(NodeEvent e) {
    pending_.push_back(std::move(e));
    if (stepping_)
        return;
    stepping_ = true;
    while (!pending_.empty()) {
        auto next = std::move(pending_.front());
        pending_.pop_front();
        accrue_energy();
        auto result = node_step(state_, config_, next);
        state_ = result.state;
        for (const auto& a : result.actions)
            perform(a);
        if (state_.phase == Phase::PoweredOff)
            cancel_timers();
    }
    stepping_ = false;
}

void SensorNode::perform(const NodeAction& a) {
    std::weak_ptr<bool> alive = alive_;
    std::visit(Overloaded{
                   [&](const action::SendConnect& c) {
                       if (!send_frame(mqtt::Connect{c.options}))
                           apply(event::TransportLost{});
                   },
                   [&](const action::SendPublish& p) {
                       if (!p.data) {
                           send_frame(mqtt::Publish{p.message});
                           return;
                       }
                       const auto index = ++data_publish_attempts_;
                       if (faults_.fails(index) || !send_frame(mqtt::Publish{p.message})) {
                           apply(event::PublishIoError{});
                           return;
                       }
                       ++data_frames_sent_;
                       auto payload = std::string(p.message.payload.begin(), p.message.payload.end());
                       log(payload);
                       sent_payloads_.push_back(std::move(payload));
                   },
                   [&](const action::SendDisconnect&) { send_frame(mqtt::Disconnect{}); },
                   [&](const action::CloseTransport&) { drop_transport(); },
                   [&](const action::ArmSampleTimer& t) {
                       scheduler_.cancel(sample_timer_);
                       sample_timer_ = scheduler_.schedule(seconds_to_ms(t.delay_s), [this, alive] {
                           if (!alive.expired())
                               take_sample();
                       });
                       if (config_.keep_alive_s > 0 && ping_timer_ == 0) {
                           ping_timer_ = scheduler_.schedule(config_.keep_alive_s * 500ull, [this, alive] {
                               if (!alive.expired())
                                   keep_alive_tick();
                           });
                       }
                   },
                   [&](const action::CancelSampleTimer&) {
                       scheduler_.cancel(sample_timer_);
                       scheduler_.cancel(ping_timer_);
                       sample_timer_ = ping_timer_ = 0;
                   },
                   [&](const action::RetryAfter& r) {
                       scheduler_.cancel(retry_timer_);
                       retry_timer_ = scheduler_.schedule(seconds_to_ms(r.delay_s), [this, alive] {
                           if (!alive.expired()) {
                               retry_timer_ = 0;
                               attempt_link();
                           }
                       });
                   },
               },
               a);
}

void SensorNode::attempt_link() {
    if (state_.phase != Phase::LinkConnecting)
        return;
    const auto generation = ++generation_;
    std::weak_ptr<bool> alive = alive_;
    rt::StreamHandler handler;
    handler.on_data = [this, alive, generation](mqtt::ByteView bytes) {
        if (!alive.expired() && generation == generation_)
            on_data(bytes);
    };
    handler.on_closed = [this, alive, generation] {
        if (!alive.expired() && generation == generation_)
            on_closed();
    };
    decoder_ = mqtt::StreamDecoder{};
    stream_ = connector_.connect(std::move(handler));
    if (stream_)
        apply(event::LinkUp{});
    else
        apply(event::LinkFail{});
}

void SensorNode::on_data(mqtt::ByteView bytes) {
    decoder_.feed(bytes);
    while (auto packet = decoder_.next()) {
        if (const auto* ack = std::get_if<mqtt::ConnAck>(&*packet)) {
            if (state_.phase != Phase::MqttConnecting)
                continue;
            if (ack->return_code == 0) {
                log("Attempting MQTT connection...connected");
                apply(event::ConnAckOk{});
            } else {
                std::ostringstream os;
                os << "Attempting MQTT connection...failed, rc=" << int(ack->return_code) << " try again in "
                   << format_number(config_.connect_retry_backoff_s) << " seconds";
                log(os.str());
                apply(event::ConnAckErr{ack->return_code});
            }
        }
    }
    if (decoder_.error() && stream_) {
        drop_transport();
        if (state_.phase == Phase::MqttConnecting || state_.phase == Phase::Connected)
            apply(event::TransportLost{});
    }
}

void SensorNode::on_closed() {
    stream_.reset();
    ++generation_;
    if (state_.phase == Phase::MqttConnecting || state_.phase == Phase::Connected)
        apply(event::TransportLost{});
}

void SensorNode::take_sample() {
    sample_timer_ = 0;
    if (state_.phase != Phase::Connected)
        return;
    const auto now = scheduler_.now_ms();
    const auto truth = environment_.at(static_cast<double>(now) / 1000.0);
    apply(event::SampleTimer{sample(config_.profile, truth, bias_, rng_, now)});
}

void SensorNode::keep_alive_tick() {
    ping_timer_ = 0;
    if (state_.phase != Phase::Connected)
        return;
    const auto half = config_.keep_alive_s * 500ull;
    if (scheduler_.now_ms() - last_send_ms_ >= half)
        send_frame(mqtt::PingReq{});
    std::weak_ptr<bool> alive = alive_;
    ping_timer_ = scheduler_.schedule(half, [this, alive] {
        if (!alive.expired())
            keep_alive_tick();
    });
}

void SensorNode::accrue_energy() {
    const auto now = scheduler_.now_ms();
    if (state_.phase != Phase::PoweredOff && now > energy_mark_ms_) {
        state_.energy_used_wh =
            std::min(config_.battery_wh, state_.energy_used_wh + energy_for(config_, (now - energy_mark_ms_) / 1000.0));
    }
    energy_mark_ms_ = now;
}

void SensorNode::drop_transport() {
    ++generation_;
    if (stream_) {
        stream_->close();
        stream_.reset();
    }
}

void SensorNode::cancel_timers() {
    for (auto* id : {&sample_timer_, &retry_timer_, &ping_timer_}) {
        if (*id)
            scheduler_.cancel(*id);
        *id = 0;
    }
}

bool SensorNode::send_frame(const mqtt::Packet& p) {
    if (!stream_)
        return false;
    const auto bytes = mqtt::encode_packet(p);
    if (!stream_->send(bytes))
        return false;
    ++frames_sent_;
    last_send_ms_ = scheduler_.now_ms();
    return true;
}

} // namespace wsn::node
