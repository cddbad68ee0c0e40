#pragma once

// Clocks, timers and client-side byte streams shared by the simulated nodes,
// the fleet runner and the transports.

#include "wsn/mqtt.hpp"

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <queue>
#include <random>
#include <unordered_map>
#include <vector>

namespace wsn::broker {
class Broker;
}

namespace wsn::rt {

using mqtt::ByteView;
using TimerId = std::uint64_t;

class Scheduler {
public:
    virtual ~Scheduler() = default;
    virtual std::uint64_t now_ms() const = 0;
    virtual TimerId schedule(std::uint64_t delay_ms, std::function<void()> fn) = 0;
    virtual void cancel(TimerId id) = 0;
};

// Discrete-event scheduler over a virtual millisecond clock. Events at the
// same instant run in the order they were scheduled.
class VirtualScheduler final : public Scheduler {
public:
    std::uint64_t now_ms() const override { return now_; }
    TimerId schedule(std::uint64_t delay_ms, std::function<void()> fn) override;
    void cancel(TimerId id) override;

    // Runs every event due at or before `t`, then leaves the clock at `t`.
    void run_until(std::uint64_t t);
    // Runs until nothing is pending; returns the number of events executed.
    std::size_t run_all(std::size_t max_events = SIZE_MAX);
    std::size_t pending() const { return callbacks_.size(); }
    std::uint64_t executed() const { return executed_; }

private:
    struct Entry {
        std::uint64_t when;
        TimerId id;
        bool operator>(const Entry& o) const { return when != o.when ? when > o.when : id > o.id; }
    };
    bool step(std::uint64_t limit);

    std::uint64_t now_ = 0;
    TimerId next_id_ = 1;
    std::uint64_t executed_ = 0;
    std::priority_queue<Entry, std::vector<Entry>, std::greater<>> queue_;
    std::unordered_map<TimerId, std::function<void()>> callbacks_;
};

struct StreamHandler {
    std::function<void(ByteView)> on_data;
    // The peer or the network ended the stream.
    std::function<void()> on_closed;
};

// Client end of a connection to the broker.
class ClientStream {
public:
    virtual ~ClientStream() = default;
    // false when the bytes could not be handed to the transport.
    virtual bool send(ByteView bytes) = 0;
    // Ends the stream from this side; on_closed is not invoked for it.
    virtual void close() = 0;
};

class Connector {
public:
    virtual ~Connector() = default;
    // nullptr when the link cannot be established.
    virtual std::unique_ptr<ClientStream> connect(StreamHandler handler) = 0;
};

struct PipeOptions {
    std::uint64_t latency_ms = 1;
    // Probability that a whole send() vanishes in the network.
    double drop_probability = 0.0;
    std::uint64_t seed = 0;
};

// In-process transport: every connection is a pair of ordered byte pipes
// into a Broker, with per-frame latency and optional loss, driven by a
// Scheduler.
class MemoryNetwork final : public Connector {
public:
    MemoryNetwork(Scheduler& scheduler, broker::Broker& broker, PipeOptions options = {});
    ~MemoryNetwork() override;

    std::unique_ptr<ClientStream> connect(StreamHandler handler) override;

    // While partitioned, new connects fail and frames in either direction are lost.
    void set_partitioned(bool partitioned) { partitioned_ = partitioned; }
    bool partitioned() const { return partitioned_; }
    std::uint64_t frames_dropped() const { return frames_dropped_; }

private:
    struct Pipe;
    class ClientEnd;
    class BrokerEnd;

    bool lose_frame();

    Scheduler& scheduler_;
    broker::Broker& broker_;
    PipeOptions options_;
    std::mt19937_64 rng_;
    bool partitioned_ = false;
    std::uint64_t frames_dropped_ = 0;
};

} // namespace wsn::rt
