#include "wsn/poll.hpp"

#include "wsn/rest.hpp"
#include "wsn/sensor.hpp"

#include <httplib.h>
#include <json.hpp>

#include <chrono>
#include <fstream>
#include <stdexcept>
#include <thread>

namespace wsn::poll {

namespace {

std::optional<double> number_at(const nlohmann::json& j, const char* key) {
    auto it = j.find(key);
    if (it == j.end() || !it->is_number())
        return std::nullopt;
    return it->get<double>();
}

std::string render(const std::optional<double>& v) { return v ? node::format_number(*v) : "n/a"; }

std::uint64_t system_ms() {
    return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::milliseconds>(
                                          std::chrono::system_clock::now().time_since_epoch())
                                          .count());
}

} // namespace

std::optional<Sample> parse_payload(std::string_view payload) {
    auto j = nlohmann::json::parse(payload, nullptr, false);
    if (j.is_discarded() || !j.is_object())
        return std::nullopt;
    return Sample{number_at(j, "temperature"), number_at(j, "humidity"), number_at(j, "pressure")};
}

std::string format_block(const Sample& s) {
    std::string out;
    out += "inner humidity: " + render(s.humidity) + "%\n";
    out += "inner pressure: " + render(s.pressure) + " Pa\n";
    out += "inner temperature: " + render(s.temperature) + "°C\n";
    return out;
}

std::string csv_row(std::uint64_t timestamp_ms, const Sample& s) {
    auto field = [](const std::optional<double>& v) { return v ? node::format_number(*v) : std::string(); };
    return std::to_string(timestamp_ms) + ',' + field(s.temperature) + ',' + field(s.humidity) + ',' +
           field(s.pressure) + '\n';
}

Fetcher http_fetcher(const std::string& base_url, double timeout_s) {
    auto client = std::make_shared<httplib::Client>(base_url);
    const auto secs = static_cast<time_t>(timeout_s);
    const auto usecs = static_cast<time_t>((timeout_s - static_cast<double>(secs)) * 1e6);
    client->set_connection_timeout(secs, usecs);
    client->set_read_timeout(secs, usecs);
    return [client](const std::string& path) {
        FetchResult r;
        auto res = client->Get(path);
        if (!res) {
            r.error = httplib::to_string(res.error());
            return r;
        }
        r.status = res->status;
        r.body = res->body;
        return r;
    };
}

PollSummary run_poll(const PollOptions& options, const Fetcher& fetch, std::ostream& out, std::ostream& err,
                     std::function<void(double)> sleep, std::function<std::uint64_t()> clock_ms) {
    if (!sleep)
        sleep = [](double s) { std::this_thread::sleep_for(std::chrono::duration<double>(s)); };
    if (!clock_ms)
        clock_ms = system_ms;

    std::ofstream csv;
    if (options.csv_path) {
        csv.open(*options.csv_path, std::ios::out | std::ios::trunc | std::ios::binary);
        if (!csv)
            throw std::runtime_error("cannot open CSV file " + *options.csv_path);
        csv << kCsvHeader << '\n';
    }

    const auto path = "/api/topics/" + rest::percent_encode(options.topic) + "/latest";
    PollSummary summary;
    while (options.count == 0 || summary.rounds < options.count) {
        if (summary.rounds > 0)
            sleep(options.interval_s);
        ++summary.rounds;
        const auto r = fetch(path);
        if (r.status != 200) {
            ++summary.warnings;
            if (r.status == 0)
                err << "warning: request failed: " << r.error << '\n';
            else
                err << "warning: HTTP " << r.status << " for " << options.topic << ": " << r.body << '\n';
            continue;
        }
        auto sample = parse_payload(r.body);
        if (!sample) {
            ++summary.warnings;
            err << "warning: latest payload on " << options.topic << " is not a JSON object\n";
            continue;
        }
        ++summary.ok;
        out << format_block(*sample) << std::flush;
        if (csv.is_open())
            csv << csv_row(clock_ms(), *sample) << std::flush;
    }
    return summary;
}

} // namespace wsn::poll
