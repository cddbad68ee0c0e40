#include "wsn/runtime.hpp"

#include "wsn/broker.hpp"

namespace wsn::rt {

TimerId VirtualScheduler::schedule(std::uint64_t delay_ms, std::function<void()> fn) {
    const auto id = next_id_++;
    queue_.push(Entry{now_ + delay_ms, id});
    callbacks_.emplace(id, std::move(fn));
    return id;
}

void VirtualScheduler::cancel(TimerId id) { callbacks_.erase(id); }

bool VirtualScheduler::step(std::uint64_t limit) {
    while (!queue_.empty()) {
        const auto top = queue_.top();
        if (top.when > limit)
            return false;
        queue_.pop();
        auto it = callbacks_.find(top.id);
        if (it == callbacks_.end())
            continue;
        auto fn = std::move(it->second);
        callbacks_.erase(it);
        now_ = top.when;
        ++executed_;
        fn();
        return true;
    }
    return false;
}

void VirtualScheduler::run_until(std::uint64_t t) {
    while (step(t)) {
    }
    if (t > now_)
        now_ = t;
}

std::size_t VirtualScheduler::run_all(std::size_t max_events) {
    std::size_t n = 0;
    while (n < max_events && step(UINT64_MAX))
        ++n;
    return n;
}

struct MemoryNetwork::Pipe {
    StreamHandler client;
    broker::ConnectionId id = 0;
    bool client_open = true;
    bool broker_open = true;
};

class MemoryNetwork::ClientEnd final : public ClientStream {
public:
    ClientEnd(MemoryNetwork& net, std::shared_ptr<Pipe> pipe) : net_(net), pipe_(std::move(pipe)) {}
    ~ClientEnd() override { close(); }

    bool send(ByteView bytes) override {
        if (!pipe_->client_open || !pipe_->broker_open)
            return false;
        if (net_.lose_frame())
            return true;
        auto pipe = pipe_;
        auto& broker = net_.broker_;
        mqtt::Bytes copy(bytes.begin(), bytes.end());
        net_.scheduler_.schedule(net_.options_.latency_ms, [pipe, &broker, copy = std::move(copy)] {
            if (pipe->broker_open)
                broker.receive(pipe->id, copy);
        });
        return true;
    }

    void close() override {
        if (!pipe_->client_open)
            return;
        pipe_->client_open = false;
        auto pipe = pipe_;
        auto& broker = net_.broker_;
        net_.scheduler_.schedule(net_.options_.latency_ms, [pipe, &broker] {
            if (pipe->broker_open) {
                pipe->broker_open = false;
                broker.connection_lost(pipe->id);
            }
        });
    }

private:
    MemoryNetwork& net_;
    std::shared_ptr<Pipe> pipe_;
};

class MemoryNetwork::BrokerEnd final : public broker::Link {
public:
    BrokerEnd(MemoryNetwork& net, std::shared_ptr<Pipe> pipe) : net_(net), pipe_(std::move(pipe)) {}

    void send(ByteView bytes) override {
        if (!pipe_->broker_open || !pipe_->client_open)
            return;
        if (net_.lose_frame())
            return;
        auto pipe = pipe_;
        mqtt::Bytes copy(bytes.begin(), bytes.end());
        net_.scheduler_.schedule(net_.options_.latency_ms, [pipe, copy = std::move(copy)] {
            if (pipe->client_open && pipe->client.on_data)
                pipe->client.on_data(copy);
        });
    }

    void close() override {
        if (!pipe_->broker_open)
            return;
        pipe_->broker_open = false;
        auto pipe = pipe_;
        net_.scheduler_.schedule(net_.options_.latency_ms, [pipe] {
            if (pipe->client_open) {
                pipe->client_open = false;
                if (pipe->client.on_closed)
                    pipe->client.on_closed();
            }
        });
    }

private:
    MemoryNetwork& net_;
    std::shared_ptr<Pipe> pipe_;
};

MemoryNetwork::MemoryNetwork(Scheduler& scheduler, broker::Broker& broker, PipeOptions options)
    : scheduler_(scheduler), broker_(broker), options_(options), rng_(options.seed) {}

MemoryNetwork::~MemoryNetwork() = default;

bool MemoryNetwork::lose_frame() {
    if (partitioned_) {
        ++frames_dropped_;
        return true;
    }
    if (options_.drop_probability <= 0.0)
        return false;
    if (std::uniform_real_distribution<double>(0.0, 1.0)(rng_) < options_.drop_probability) {
        ++frames_dropped_;
        return true;
    }
    return false;
}

std::unique_ptr<ClientStream> MemoryNetwork::connect(StreamHandler handler) {
    if (partitioned_)
        return nullptr;
    auto pipe = std::make_shared<Pipe>();
    pipe->client = std::move(handler);
    pipe->id = broker_.attach(std::make_shared<BrokerEnd>(*this, pipe));
    return std::make_unique<ClientEnd>(*this, pipe);
}

} // namespace wsn::rt
