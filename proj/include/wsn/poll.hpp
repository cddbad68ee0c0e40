#pragma once

// REST poller: fetches a topic's latest payload on an interval and prints it
// as the three "inner ..." lines, optionally appending CSV rows.

#include <cstdint>
#include <functional>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>

namespace wsn::poll {

inline constexpr std::string_view kCsvHeader = "timestamp_ms,temperature,humidity,pressure";

struct Sample {
    std::optional<double> temperature;
    std::optional<double> humidity;
    std::optional<double> pressure;
};

// nullopt when the payload is not a JSON object.
std::optional<Sample> parse_payload(std::string_view payload);

// Humidity, pressure, temperature, each line ending in '\n'.
std::string format_block(const Sample& s);
std::string csv_row(std::uint64_t timestamp_ms, const Sample& s);

struct FetchResult {
    int status = 0; // 0 when the request itself failed
    std::string body;
    std::string error;
};

using Fetcher = std::function<FetchResult(const std::string& path)>;

// GETs against a base URL such as http://127.0.0.1:8080.
Fetcher http_fetcher(const std::string& base_url, double timeout_s = 5.0);

struct PollOptions {
    std::string topic;
    double interval_s = 10.0;
    std::uint64_t count = 0; // 0 polls forever
    std::optional<std::string> csv_path;
};

struct PollSummary {
    std::uint64_t rounds = 0;
    std::uint64_t ok = 0;
    std::uint64_t warnings = 0;
};

// Runs the poll loop. `sleep` defaults to a real sleep; `clock_ms` to the
// system clock. Throws std::runtime_error when the CSV file cannot be opened.
PollSummary run_poll(const PollOptions& options, const Fetcher& fetch, std::ostream& out, std::ostream& err,
                     std::function<void(double)> sleep = {}, std::function<std::uint64_t()> clock_ms = {});

} // namespace wsn::poll
