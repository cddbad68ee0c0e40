#pragma once

// Runs N simulated nodes against one broker and reports what happened.
//
// Without a broker address the broker runs in-process over MemoryNetwork on
// a virtual clock, so a run is reproducible bit for bit. With an address the
// nodes dial a real broker over TCP and time is the wall clock.

#include "wsn/broker.hpp"
#include "wsn/node.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace wsn::fleet {

struct FleetConfig {
    std::uint32_t nodes = 1;
    double interval_s = 10.0;
    double duration_s = 30.0;
    std::uint64_t seed = 1;
    std::string id_prefix = "node";
    std::string profile = "dht22";
    double kill_fraction = 0.0;
    std::uint16_t keep_alive_s = 30;
    double retry_backoff_s = 2.0;
    // Delay between successive node power-ons.
    std::uint64_t stagger_ms = 1;

    // Applied to every node.
    std::uint64_t drop_every_nth_publish = 0;
    std::vector<std::uint64_t> drop_publish_at;
    std::vector<double> cut_transport_at_s;

    // In-memory transport only.
    std::uint64_t latency_ms = 1;
    double loss_probability = 0.0;
    std::optional<std::filesystem::path> data_dir;
    std::uint64_t log_every = 0;

    // host:port of an external broker; empty means in-process.
    std::string broker_addr;
    std::uint32_t connect_attempts = 3;

    // Receives broker console lines and node trace lines.
    std::function<void(std::string_view)> console;
    bool trace_nodes = false;

    std::string validate() const;
};

struct FleetRunReport {
    std::uint64_t nodes = 0;
    double duration_s = 0;
    std::uint64_t published = 0;         // data PUBLISH frames the nodes put on the wire
    std::uint64_t delivered = 0;         // data messages the monitor subscriber received
    std::uint64_t dropped_by_policy = 0; // samples lost to local I/O errors and never resent
    std::uint64_t wills_fired = 0;

    bool operator==(const FleetRunReport&) const = default;
};

std::string to_text(const FleetRunReport& r);
std::string to_json(const FleetRunReport& r);

struct FleetResult {
    FleetRunReport report;
    // Status topic -> retained payload as last known to the run.
    std::map<std::string, std::string> retained_status;
    std::vector<std::string> killed;
    double wall_time_s = 0;
};

class ConnectivityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Node ids are <prefix>0000, <prefix>0001, ...
std::string node_id(const std::string& prefix, std::uint32_t index);

// Which node indices are killed at half time: round(p*N) of them, chosen by
// a seeded shuffle.
std::vector<std::uint32_t> kill_schedule(std::uint32_t nodes, double fraction, std::uint64_t seed);

FleetResult run_fleet(const FleetConfig& config);

} // namespace wsn::fleet
