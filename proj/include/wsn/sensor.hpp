#pragma once

// Reading-level models of the node's sensors: a smooth environment process,
// a humidity/temperature sensor with per-unit bias, repeatability noise and
// output quantisation, and a barometric pressure channel.

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace wsn::node {

struct Range {
    double min = 0;
    double max = 0;

    double clamp(double v) const { return v < min ? min : (v > max ? max : v); }
    bool contains(double v) const { return v >= min && v <= max; }
};

struct PressureChannel {
    Range range{30'000.0, 110'000.0};
    double accuracy_pa = 100.0;
    double repeatability_pa = 12.0;
    double resolution_pa = 0.01;
};

struct SensorProfile {
    std::string name;
    Range humidity_pct;
    Range temperature_c;
    double humidity_accuracy = 0;
    double temperature_accuracy = 0;
    double humidity_repeatability = 0;
    double temperature_repeatability = 0;
    double humidity_resolution = 0.1;
    double temperature_resolution = 0.1;
    std::optional<PressureChannel> pressure;

    // Empty when the profile is consistent, otherwise what is wrong.
    std::string validate() const;
};

// Humidity/temperature sensor rows, each paired with a BMP280-class
// pressure channel.
SensorProfile dht22_profile();
SensorProfile dht11_profile();
SensorProfile sht31_profile();
std::optional<SensorProfile> profile_by_name(std::string_view name);
std::vector<std::string> profile_names();

struct Truth {
    double temperature_c = 0;
    double humidity_pct = 0;
    double pressure_pa = 0;

    bool operator==(const Truth&) const = default;
};

struct SensorReading {
    float temperature_c = 0;
    float humidity_pct = 0;
    std::optional<double> pressure_pa;
    std::uint64_t timestamp_ms = 0;

    bool operator==(const SensorReading&) const = default;
};

struct EnvironmentParams {
    Truth base{26.2, 67.0, 100'031.59};
    // Amplitudes of the slow diurnal sinusoid.
    double temperature_swing = 1.5;
    double humidity_swing = 4.0;
    double pressure_swing = 60.0;
    double period_s = 86'400.0;
    // Per-step standard deviations of the mean-reverting random walk.
    double temperature_step = 0.02;
    double humidity_step = 0.08;
    double pressure_step = 1.5;
    double reversion = 0.01;
    double step_s = 1.0;
};

// The true environment around one node: base + sinusoid + seeded
// mean-reverting walk, clamped to the profile ranges. at(t) is a pure
// function of (seed, t); repeated or out-of-order queries agree.
class Environment {
public:
    Environment(EnvironmentParams params, const SensorProfile& profile, std::uint64_t seed);

    Truth at(double t_s);

private:
    void extend_to(std::size_t step);

    EnvironmentParams params_;
    Range humidity_;
    Range temperature_;
    std::optional<Range> pressure_;
    std::mt19937_64 rng_;
    std::normal_distribution<double> gauss_{0.0, 1.0};
    std::vector<Truth> walk_;
};

struct SensorBias {
    double humidity = 0;
    double temperature = 0;
    double pressure = 0;
};

// round-half-away-from-zero onto the resolution grid
double quantize(double value, double resolution);

// Bias drawn uniformly within +-accuracy, once per physical unit.
SensorBias draw_bias(const SensorProfile& profile, std::mt19937_64& rng);

// truth + bias + N(0, repeatability), quantised and clamped to the profile.
SensorReading sample(const SensorProfile& profile, const Truth& truth, const SensorBias& bias,
                     std::mt19937_64& rng, std::uint64_t timestamp_ms = 0);

// Six fractional digits, trailing zeros and a trailing '.' removed.
std::string format_number(double v);

// {"temperature":..,"humidity":..,"pressure":..} with no spaces.
std::string build_payload(const SensorReading& reading);

} // namespace wsn::node
