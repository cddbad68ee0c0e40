// wsn: broker, fleet simulator and REST poller in one binary.
//
// Exit codes: 0 success, 1 usage, 2 connectivity, 3 internal.

#include "wsn/broker.hpp"
#include "wsn/fleet.hpp"
#include "wsn/net.hpp"
#include "wsn/persistence.hpp"
#include "wsn/poll.hpp"
#include "wsn/rest.hpp"

#include <CLI11.hpp>
#include <boost/asio/signal_set.hpp>

#include <cstdlib>
#include <iostream>
#include <optional>
#include <string>

namespace {

enum Exit { kOk = 0, kUsage = 1, kConnectivity = 2, kInternal = 3 };

enum class Verbosity { Quiet, Info, Debug };

Verbosity verbosity() {
    const char* v = std::getenv("WSN_MQTT_LOG");
    if (!v)
        return Verbosity::Info;
    const std::string s(v);
    if (s == "quiet" || s == "off" || s == "0" || s == "error")
        return Verbosity::Quiet;
    if (s == "debug" || s == "trace" || s == "2")
        return Verbosity::Debug;
    return Verbosity::Info;
}

std::function<void(std::string_view)> console_for(Verbosity v, std::ostream& os) {
    if (v == Verbosity::Quiet)
        return {};
    return [&os](std::string_view line) { os << line << '\n' << std::flush; };
}

struct ServeArgs {
    std::string mqtt_addr = "0.0.0.0:1883";
    std::string http_addr = "127.0.0.1:8080";
    std::string data_dir;
    std::uint64_t log_every = 0;
    bool fsync = false;
};

int serve(const ServeArgs& a) {
    std::pair<std::string, std::uint16_t> mqtt, http;
    try {
        mqtt = wsn::net::parse_host_port(a.mqtt_addr);
        http = wsn::net::parse_host_port(a.http_addr);
    } catch (const std::invalid_argument& e) {
        std::cerr << "wsn: " << e.what() << '\n';
        return kUsage;
    }

    std::unique_ptr<wsn::persistence::MessageLog> log;
    try {
        wsn::persistence::LogOptions lo;
        lo.durability = a.fsync ? wsn::persistence::Durability::Fsync : wsn::persistence::Durability::Write;
        log = wsn::persistence::MessageLog::open(a.data_dir, lo);
    } catch (const std::exception& e) {
        std::cerr << "wsn: cannot open data dir " << a.data_dir << ": " << e.what() << '\n';
        return kInternal;
    }

    wsn::broker::BrokerOptions bo;
    bo.log_every = a.log_every;
    bo.console = console_for(verbosity(), std::cout);
    wsn::broker::Broker broker(bo, log.get());

    boost::asio::io_context io;
    wsn::net::BrokerServer server(io, broker);
    try {
        server.listen(mqtt.first, mqtt.second);
    } catch (const std::exception& e) {
        std::cerr << "wsn: cannot bind MQTT address " << a.mqtt_addr << ": " << e.what() << '\n';
        return kConnectivity;
    }

    wsn::rest::Gateway gateway(broker, log.get());
    wsn::rest::HttpServer http_server(gateway);
    try {
        http_server.start(http.first, http.second);
    } catch (const std::exception& e) {
        std::cerr << "wsn: " << e.what() << '\n';
        return kConnectivity;
    }

    std::cout << "mqtt listening on " << mqtt.first << ':' << server.port() << '\n'
              << "http listening on " << http.first << ':' << http_server.port() << '\n'
              << std::flush;

    boost::asio::signal_set signals(io, SIGINT, SIGTERM);
    signals.async_wait([&](const boost::system::error_code&, int) {
        server.stop();
        io.stop();
    });
    io.run();

    http_server.stop();
    log->flush();
    std::cout << "shutdown: " << log->size() << " records in " << a.data_dir << '\n';
    return kOk;
}

int fleet(wsn::fleet::FleetConfig config, bool json) {
    const auto v = verbosity();
    config.console = console_for(v == Verbosity::Debug ? v : Verbosity::Quiet, std::cerr);
    config.trace_nodes = v == Verbosity::Debug;
    try {
        const auto result = wsn::fleet::run_fleet(config);
        if (json)
            std::cout << wsn::fleet::to_json(result.report) << '\n';
        else
            std::cout << wsn::fleet::to_text(result.report);
        return kOk;
    } catch (const wsn::fleet::ConnectivityError& e) {
        std::cerr << "wsn: " << e.what() << '\n';
        return kConnectivity;
    } catch (const std::invalid_argument& e) {
        std::cerr << "wsn: " << e.what() << '\n';
        return kUsage;
    }
}

int poll(const std::string& url, wsn::poll::PollOptions options) {
    try {
        const auto summary = wsn::poll::run_poll(options, wsn::poll::http_fetcher(url), std::cout, std::cerr);
        (void)summary;
        return kOk;
    } catch (const std::runtime_error& e) {
        std::cerr << "wsn: " << e.what() << '\n';
        return kInternal;
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Wireless sensor network simulator: MQTT broker, node fleet and REST poller"};
    app.require_subcommand(1);

    ServeArgs serve_args;
    auto* broker_cmd = app.add_subcommand("broker", "Run the MQTT broker");
    broker_cmd->require_subcommand(1);
    auto* serve_cmd = broker_cmd->add_subcommand("serve", "Serve MQTT, persistence and the REST gateway");
    serve_cmd->add_option("--mqtt-addr", serve_args.mqtt_addr, "MQTT listen address host:port")->capture_default_str();
    serve_cmd->add_option("--http-addr", serve_args.http_addr, "HTTP listen address host:port")->capture_default_str();
    serve_cmd->add_option("--data-dir", serve_args.data_dir, "Message log directory")->required();
    serve_cmd->add_option("--log-every", serve_args.log_every, "Console line every N messages (0 = off)");
    serve_cmd->add_flag("--fsync", serve_args.fsync, "fsync every append");

    wsn::fleet::FleetConfig fc;
    bool json = false;
    std::string data_dir;
    auto* fleet_cmd = app.add_subcommand("fleet", "Simulated sensor fleets");
    fleet_cmd->require_subcommand(1);
    auto* run_cmd = fleet_cmd->add_subcommand("run", "Run a fleet and print its report");
    app.set_config("--config", "", "INI/TOML file; fleet options go under [fleet.run]");
    fleet_cmd->fallthrough();
    run_cmd->fallthrough();
    run_cmd->add_option("--nodes", fc.nodes, "Number of nodes")->capture_default_str()->check(CLI::PositiveNumber);
    run_cmd->add_option("--interval", fc.interval_s, "Sample interval in seconds")->capture_default_str();
    run_cmd->add_option("--duration", fc.duration_s, "Run length in seconds")->capture_default_str();
    run_cmd->add_option("--seed", fc.seed, "RNG seed")->capture_default_str();
    run_cmd->add_option("--kill-fraction", fc.kill_fraction, "Fraction of nodes killed abruptly at half time")
        ->check(CLI::Range(0.0, 1.0));
    run_cmd->add_option("--id-prefix", fc.id_prefix, "Node id prefix")->capture_default_str();
    run_cmd->add_option("--profile", fc.profile, "Sensor profile: dht22, dht11, sht31")->capture_default_str();
    run_cmd->add_option("--keep-alive", fc.keep_alive_s, "Node keep-alive in seconds")->capture_default_str();
    run_cmd->add_option("--retry-backoff", fc.retry_backoff_s, "Reconnect backoff in seconds")->capture_default_str();
    run_cmd->add_option("--stagger-ms", fc.stagger_ms, "Delay between node power-ons")->capture_default_str();
    run_cmd->add_option("--drop-every", fc.drop_every_nth_publish, "Fail every Nth data publish of each node");
    run_cmd->add_option("--drop-at", fc.drop_publish_at, "Fail these 1-based data publishes of each node");
    run_cmd->add_option("--cut-at", fc.cut_transport_at_s, "Cut each node's transport at these seconds after power-on");
    run_cmd->add_option("--latency-ms", fc.latency_ms, "In-memory per-frame latency")->capture_default_str();
    run_cmd->add_option("--loss", fc.loss_probability, "In-memory per-frame loss probability")
        ->check(CLI::Range(0.0, 1.0));
    run_cmd->add_option("--data-dir", data_dir, "Persist the in-memory broker's log here");
    run_cmd->add_option("--log-every", fc.log_every, "Broker console line every N messages");
    run_cmd->add_option("--broker", fc.broker_addr, "host:port of a running broker (TCP, wall clock)");
    run_cmd->add_flag("--json", json, "Print the report as JSON");

    std::string url = "http://127.0.0.1:8080";
    wsn::poll::PollOptions po;
    std::string csv;
    auto* poll_cmd = app.add_subcommand("poll", "Poll a topic's latest value over REST");
    poll_cmd->add_option("--url", url, "Gateway base URL")->capture_default_str();
    poll_cmd->add_option("--topic", po.topic, "Topic to poll")->required();
    poll_cmd->add_option("--interval", po.interval_s, "Seconds between polls")->capture_default_str();
    poll_cmd->add_option("--count", po.count, "Rounds to run (0 = forever)")->capture_default_str();
    poll_cmd->add_option("--csv", csv, "Append rows to this CSV file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (serve_cmd->parsed())
            return serve(serve_args);
        if (run_cmd->parsed()) {
            if (!data_dir.empty())
                fc.data_dir = data_dir;
            return fleet(fc, json);
        }
        if (poll_cmd->parsed()) {
            if (!csv.empty())
                po.csv_path = csv;
            if (!(po.interval_s >= 0)) {
                std::cerr << "wsn: interval must not be negative\n";
                return kUsage;
            }
            return poll(url, po);
        }
    } catch (const std::exception& e) {
        std::cerr << "wsn: internal error: " << e.what() << '\n';
        return kInternal;
    }
    return kUsage;
}
