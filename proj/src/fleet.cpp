#include "wsn/fleet.hpp"

#include "wsn/net.hpp"
#include "wsn/persistence.hpp"
#include "wsn/runtime.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <random>
#include <sstream>
#include <thread>

namespace wsn::fleet {

namespace {

constexpr std::string_view kMonitorId = "fleet-monitor";

// Subscribes to every node's data and status topics and counts what arrives.
class Monitor {
public:
    explicit Monitor(rt::Connector& connector) : connector_(connector) {}

    bool connect() {
        rt::StreamHandler h;
        h.on_data = [this](mqtt::ByteView bytes) { on_data(bytes); };
        h.on_closed = [this] { closed_ = true; };
        stream_ = connector_.connect(std::move(h));
        if (!stream_)
            return false;
        mqtt::ConnectOptions opts;
        opts.client_id = std::string(kMonitorId);
        opts.keep_alive_s = 0;
        send(mqtt::Connect{opts});
        send(mqtt::Subscribe{1, {{"sensors/+/data", 0}, {"sensors/+/status", 0}}});
        return true;
    }

    void disconnect() {
        if (!stream_)
            return;
        send(mqtt::Disconnect{});
        stream_->close();
        stream_.reset();
    }

    bool ready() const { return connected_ && subscribed_; }
    bool refused() const { return refused_ || closed_; }
    std::uint64_t data_received() const { return data_received_; }
    std::uint64_t live_offline() const { return live_offline_; }
    const std::map<std::string, std::string>& status() const { return status_; }

private:
    void send(const mqtt::Packet& p) {
        if (stream_)
            stream_->send(mqtt::encode_packet(p));
    }

    void on_data(mqtt::ByteView bytes) {
        decoder_.feed(bytes);
        while (auto p = decoder_.next()) {
            if (const auto* ack = std::get_if<mqtt::ConnAck>(&*p)) {
                connected_ = ack->return_code == 0;
                refused_ = !connected_;
            } else if (std::holds_alternative<mqtt::SubAck>(*p)) {
                subscribed_ = true;
            } else if (const auto* pub = std::get_if<mqtt::Publish>(&*p)) {
                const auto& m = pub->message;
                std::string payload(m.payload.begin(), m.payload.end());
                if (m.topic.ends_with("/data")) {
                    if (!m.retain)
                        ++data_received_;
                } else {
                    if (!m.retain && payload == node::kOfflinePayload)
                        ++live_offline_;
                    status_[m.topic] = std::move(payload);
                }
            }
        }
    }

    rt::Connector& connector_;
    std::unique_ptr<rt::ClientStream> stream_;
    mqtt::StreamDecoder decoder_;
    bool connected_ = false;
    bool subscribed_ = false;
    bool refused_ = false;
    bool closed_ = false;
    std::uint64_t data_received_ = 0;
    std::uint64_t live_offline_ = 0;
    std::map<std::string, std::string> status_;
};

std::uint64_t to_ms(double s) { return static_cast<std::uint64_t>(std::llround(s * 1000.0)); }

std::vector<std::unique_ptr<node::SensorNode>> make_nodes(const FleetConfig& config, rt::Scheduler& scheduler,
                                                          rt::Connector& connector) {
    const auto profile = node::profile_by_name(config.profile);
    node::FaultPlan faults;
    faults.fail_every_nth_publish = config.drop_every_nth_publish;
    faults.fail_publishes.insert(config.drop_publish_at.begin(), config.drop_publish_at.end());

    std::vector<std::unique_ptr<node::SensorNode>> nodes;
    nodes.reserve(config.nodes);
    std::mt19937_64 seeds(config.seed);
    for (std::uint32_t i = 0; i < config.nodes; ++i) {
        auto nc = node::NodeConfig::for_client(node_id(config.id_prefix, i), seeds());
        nc.sample_interval_s = config.interval_s;
        nc.keep_alive_s = config.keep_alive_s;
        nc.connect_retry_backoff_s = config.retry_backoff_s;
        nc.profile = *profile;
        auto plan = faults;
        // Cut times are relative to the node's own power-on.
        for (double t : config.cut_transport_at_s)
            plan.cut_transport_at_ms.push_back(to_ms(t));
        nodes.push_back(std::make_unique<node::SensorNode>(std::move(nc), scheduler, connector, std::move(plan)));
        if (config.trace_nodes && config.console) {
            auto id = node_id(config.id_prefix, i);
            nodes.back()->on_trace = [console = config.console, id](std::string_view line) {
                console(id + ": " + std::string(line));
            };
        }
    }
    return nodes;
}

void tally(FleetRunReport& report, const std::vector<std::unique_ptr<node::SensorNode>>& nodes) {
    for (const auto& n : nodes) {
        report.published += n->data_frames_sent();
        report.dropped_by_policy += n->state().dropped_count;
    }
}

FleetResult run_in_memory(const FleetConfig& config) {
    rt::VirtualScheduler scheduler;
    std::unique_ptr<persistence::MessageLog> log;
    if (config.data_dir)
        log = persistence::MessageLog::open(*config.data_dir);

    broker::BrokerOptions bopts;
    bopts.log_every = config.log_every;
    bopts.console = config.console;
    bopts.clock = [&scheduler] { return scheduler.now_ms(); };
    broker::Broker broker(bopts, log.get());
    rt::MemoryNetwork network(scheduler, broker, rt::PipeOptions{config.latency_ms, config.loss_probability, config.seed});

    // The monitor is an observer, not part of the experiment: its link is lossless.
    rt::MemoryNetwork monitor_link(scheduler, broker, rt::PipeOptions{config.latency_ms, 0.0, 0});
    Monitor monitor(monitor_link);
    monitor.connect();
    scheduler.run_until(4 * config.latency_ms + 1);
    if (!monitor.ready())
        throw ConnectivityError("in-process broker refused the monitor");

    auto nodes = make_nodes(config, scheduler, network);
    const auto start = scheduler.now_ms();
    for (std::uint32_t i = 0; i < config.nodes; ++i)
        scheduler.schedule(i * config.stagger_ms, [&nodes, i] { nodes[i]->power_on(); });

    FleetResult result;
    const auto victims = kill_schedule(config.nodes, config.kill_fraction, config.seed);
    const auto end = start + to_ms(config.duration_s);
    scheduler.schedule(to_ms(config.duration_s / 2), [&] {
        for (auto i : victims) {
            nodes[i]->kill();
            result.killed.push_back(nodes[i]->config().client_id);
        }
    });
    scheduler.run_until(end);
    for (auto& n : nodes)
        n->power_off();
    // Deliver whatever is still in flight, then let the monitor go.
    scheduler.run_until(end + 10 * config.latency_ms + 10);
    monitor.disconnect();
    scheduler.run_until(end + 20 * config.latency_ms + 20);

    result.report.nodes = config.nodes;
    result.report.duration_s = config.duration_s;
    result.report.delivered = monitor.data_received();
    result.report.wills_fired = broker.stats().wills_fired;
    tally(result.report, nodes);
    for (const auto& [topic, payload] : broker.retained())
        if (topic.ends_with("/status"))
            result.retained_status[topic] = std::string(payload.begin(), payload.end());
    nodes.clear();
    if (log)
        log->flush();
    return result;
}

FleetResult run_over_tcp(const FleetConfig& config) {
    const auto [host, port] = net::parse_host_port(config.broker_addr);
    boost::asio::io_context io;
    net::AsioScheduler scheduler(io);
    net::TcpConnector connector(io, host, port);

    Monitor monitor(connector);
    bool connected = false;
    for (std::uint32_t attempt = 0; attempt < std::max<std::uint32_t>(1, config.connect_attempts); ++attempt) {
        if (attempt)
            std::this_thread::sleep_for(std::chrono::seconds(1));
        if (monitor.connect()) {
            connected = true;
            break;
        }
    }
    if (!connected)
        throw ConnectivityError("broker unreachable at " + config.broker_addr);
    const auto deadline = std::chrono::steady_clock::now() + std::chrono::seconds(5);
    while (!monitor.ready() && !monitor.refused() && std::chrono::steady_clock::now() < deadline)
        io.run_for(std::chrono::milliseconds(10));
    if (!monitor.ready())
        throw ConnectivityError("broker at " + config.broker_addr + " did not accept the monitor");

    auto nodes = make_nodes(config, scheduler, connector);
    for (std::uint32_t i = 0; i < config.nodes; ++i)
        scheduler.schedule(i * config.stagger_ms, [&nodes, i] { nodes[i]->power_on(); });

    FleetResult result;
    const auto victims = kill_schedule(config.nodes, config.kill_fraction, config.seed);
    scheduler.schedule(to_ms(config.duration_s / 2), [&] {
        for (auto i : victims) {
            nodes[i]->kill();
            result.killed.push_back(nodes[i]->config().client_id);
        }
    });
    io.run_for(std::chrono::milliseconds(to_ms(config.duration_s)));
    for (auto& n : nodes)
        n->power_off();
    io.run_for(std::chrono::milliseconds(500));
    monitor.disconnect();
    io.run_for(std::chrono::milliseconds(50));

    result.report.nodes = config.nodes;
    result.report.duration_s = config.duration_s;
    result.report.delivered = monitor.data_received();
    result.report.wills_fired = monitor.live_offline();
    tally(result.report, nodes);
    result.retained_status = monitor.status();
    nodes.clear();
    return result;
}

} // namespace

std::string FleetConfig::validate() const {
    if (nodes < 1)
        return "nodes must be at least 1";
    if (!(interval_s > 0))
        return "interval must be positive";
    if (!(duration_s > 0))
        return "duration must be positive";
    if (!(kill_fraction >= 0 && kill_fraction <= 1))
        return "kill fraction must be within [0, 1]";
    if (!(loss_probability >= 0 && loss_probability <= 1))
        return "loss probability must be within [0, 1]";
    if (!node::profile_by_name(profile))
        return "unknown sensor profile '" + profile + "'";
    if (id_prefix.empty())
        return "id prefix must not be empty";
    return {};
}

std::string to_text(const FleetRunReport& r) {
    std::ostringstream os;
    auto row = [&](std::string_view k, auto v) {
        char key[32];
        std::snprintf(key, sizeof key, "%-18s", std::string(k).c_str());
        os << key << v << '\n';
    };
    row("nodes", r.nodes);
    row("duration_s", node::format_number(r.duration_s));
    row("published", r.published);
    row("delivered", r.delivered);
    row("dropped_by_policy", r.dropped_by_policy);
    row("wills_fired", r.wills_fired);
    return os.str();
}

std::string to_json(const FleetRunReport& r) {
    nlohmann::ordered_json j{{"nodes", r.nodes},         {"duration_s", r.duration_s},
                             {"published", r.published}, {"delivered", r.delivered},
                             {"dropped_by_policy", r.dropped_by_policy}, {"wills_fired", r.wills_fired}};
    return j.dump();
}

std::string node_id(const std::string& prefix, std::uint32_t index) {
    char digits[16];
    std::snprintf(digits, sizeof digits, "%04u", index);
    return prefix + digits;
}

std::vector<std::uint32_t> kill_schedule(std::uint32_t nodes, double fraction, std::uint64_t seed) {
    const auto count = static_cast<std::size_t>(std::llround(fraction * nodes));
    std::vector<std::uint32_t> order(nodes);
    std::iota(order.begin(), order.end(), 0u);
    std::mt19937_64 rng(seed ^ 0xD1B54A32D192ED03ull);
    std::shuffle(order.begin(), order.end(), rng);
    order.resize(std::min<std::size_t>(count, order.size()));
    std::sort(order.begin(), order.end());
    return order;
}

FleetResult run_fleet(const FleetConfig& config) {
    if (auto problem = config.validate(); !problem.empty())
        throw std::invalid_argument(problem);
    const auto t0 = std::chrono::steady_clock::now();
    auto result = config.broker_addr.empty() ? run_in_memory(config) : run_over_tcp(config);
    result.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

} // namespace wsn::fleet
