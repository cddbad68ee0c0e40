#pragma once

// Simulated sensor node: configuration, the connect/sample state machine,
// the battery budget and a driver binding them to a scheduler and a
// transport.

#include "wsn/mqtt.hpp"
#include "wsn/runtime.hpp"
#include "wsn/sensor.hpp"

#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <random>
#include <set>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace wsn::node {

inline constexpr std::string_view kOnlinePayload = "online";
inline constexpr std::string_view kOfflinePayload = "offline";

std::string data_topic(std::string_view client_id);
std::string status_topic(std::string_view client_id);

struct NodeConfig {
    std::string client_id = "node1";
    std::string broker_addr = "127.0.0.1:1883";
    std::string topic;        // defaults to data_topic(client_id)
    std::string status_topic; // defaults to status_topic(client_id)
    double sample_interval_s = 10.0;
    std::uint16_t keep_alive_s = 30;
    double battery_wh = 9.62;
    double bus_voltage_v = 3.7;
    double avg_current_a = 0.080;
    double connect_retry_backoff_s = 2.0;
    SensorProfile profile = dht22_profile();
    EnvironmentParams environment;
    std::uint64_t rng_seed = 1;

    static NodeConfig for_client(std::string client_id, std::uint64_t seed = 1);
    // Empty when usable, otherwise the first problem found.
    std::string validate() const;
};

enum class Phase { PoweredOff, LinkConnecting, MqttConnecting, Connected };
std::string_view to_string(Phase p);

struct NodeState {
    Phase phase = Phase::PoweredOff;
    std::uint32_t consecutive_failures = 0;
    double energy_used_wh = 0;
    std::uint64_t published_count = 0; // data publishes attempted
    std::uint64_t dropped_count = 0;   // of those, lost to a local I/O error

    bool operator==(const NodeState&) const = default;
};

namespace event {
struct PowerOn {};
struct LinkUp {};
struct LinkFail {};
struct ConnAckOk {};
struct ConnAckErr {
    std::uint8_t code = 0;
};
struct SampleTimer {
    SensorReading reading;
};
struct PublishIoError {};
struct TransportLost {};
struct PowerOff {};
} // namespace event

using NodeEvent = std::variant<event::PowerOn, event::LinkUp, event::LinkFail, event::ConnAckOk, event::ConnAckErr,
                               event::SampleTimer, event::PublishIoError, event::TransportLost, event::PowerOff>;
std::string_view event_name(const NodeEvent& e);

namespace action {
struct SendConnect {
    mqtt::ConnectOptions options;
};
struct SendPublish {
    mqtt::PublishMessage message;
    bool data = false; // a sensor sample, as opposed to a status message
};
struct SendDisconnect {};
struct CloseTransport {};
struct ArmSampleTimer {
    double delay_s = 0;
};
struct CancelSampleTimer {};
struct RetryAfter {
    double delay_s = 0;
};
} // namespace action

using NodeAction = std::variant<action::SendConnect, action::SendPublish, action::SendDisconnect,
                                action::CloseTransport, action::ArmSampleTimer, action::CancelSampleTimer,
                                action::RetryAfter>;

struct StepResult {
    NodeState state;
    std::vector<NodeAction> actions;
};

class InvalidTransition : public std::logic_error {
public:
    InvalidTransition(Phase phase, std::string_view event);
};

// Pure transition function. Publish failures are counted and never
// retried. Throws InvalidTransition for (phase, event) pairs outside the table.
StepResult node_step(const NodeState& state, const NodeConfig& config, const NodeEvent& event);

// Hours of operation from a full battery at the average draw.
double estimate_lifetime(double battery_wh, double bus_voltage_v, double avg_current_a);
double estimate_lifetime(const NodeConfig& config);

// Energy drawn over `seconds` at the configured voltage and current.
double energy_for(const NodeConfig& config, double seconds);

// Failure injection for one node. Counts are 1-based data-publish indices.
struct FaultPlan {
    std::uint64_t fail_every_nth_publish = 0;
    std::set<std::uint64_t> fail_publishes;
    // Abruptly cut the transport at these offsets (ms after power-on).
    std::vector<std::uint64_t> cut_transport_at_ms;

    bool fails(std::uint64_t publish_index) const;
};

// Drives one node: owns its state, environment and sensor, reacts to
// scheduler timers and transport callbacks, and feeds node_step.
class SensorNode {
public:
    SensorNode(NodeConfig config, rt::Scheduler& scheduler, rt::Connector& connector, FaultPlan faults = {});
    ~SensorNode();

    SensorNode(const SensorNode&) = delete;
    SensorNode& operator=(const SensorNode&) = delete;

    void power_on();
    // Clean shutdown: DISCONNECT, then close.
    void power_off();
    // Abrupt death: the transport vanishes with no DISCONNECT and the node stays off.
    void kill();

    const NodeState& state() const { return state_; }
    const NodeConfig& config() const { return config_; }
    bool killed() const { return killed_; }
    bool battery_depleted() const { return depleted_; }
    std::uint64_t data_frames_sent() const { return data_frames_sent_; }
    std::uint64_t frames_sent() const { return frames_sent_; }
    const std::vector<std::string>& sent_payloads() const { return sent_payloads_; }
    const std::vector<std::string>& trace() const { return trace_; }

    // Called with each serial-monitor style line as it is produced.
    std::function<void(std::string_view)> on_trace;

private:
    void apply(NodeEvent e);
    void perform(const NodeAction& a);
    void attempt_link();
    void on_data(mqtt::ByteView bytes);
    void on_closed();
    void take_sample();
    void keep_alive_tick();
    void accrue_energy();
    void drop_transport();
    void cancel_timers();
    void log(std::string line);
    bool send_frame(const mqtt::Packet& p);

    NodeConfig config_;
    rt::Scheduler& scheduler_;
    rt::Connector& connector_;
    FaultPlan faults_;
    NodeState state_;
    Environment environment_;
    std::mt19937_64 rng_;
    SensorBias bias_;

    std::deque<NodeEvent> pending_;
    bool stepping_ = false;
    std::unique_ptr<rt::ClientStream> stream_;
    mqtt::StreamDecoder decoder_;
    std::shared_ptr<bool> alive_;
    std::uint64_t generation_ = 0;

    rt::TimerId sample_timer_ = 0;
    rt::TimerId retry_timer_ = 0;
    rt::TimerId ping_timer_ = 0;
    rt::TimerId battery_timer_ = 0;
    std::vector<rt::TimerId> cut_timers_;

    std::uint64_t powered_at_ms_ = 0;
    std::uint64_t energy_mark_ms_ = 0;
    std::uint64_t last_send_ms_ = 0;
    std::uint64_t data_publish_attempts_ = 0;
    std::uint64_t data_frames_sent_ = 0;
    std::uint64_t frames_sent_ = 0;
    bool killed_ = false;
    bool depleted_ = false;
    std::vector<std::string> sent_payloads_;
    std::vector<std::string> trace_;
};

} // namespace wsn::node
