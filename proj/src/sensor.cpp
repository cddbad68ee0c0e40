#include "wsn/sensor.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>

namespace wsn::node {

std::string SensorProfile::validate() const {
    auto range_ok = [](const Range& r) { return r.min < r.max; };
    if (!range_ok(humidity_pct) || !range_ok(temperature_c))
        return name + ": range min must be below max";
    if (humidity_resolution <= 0 || temperature_resolution <= 0)
        return name + ": resolution must be positive";
    if (humidity_accuracy < humidity_repeatability || temperature_accuracy < temperature_repeatability)
        return name + ": accuracy must be at least the repeatability";
    if (pressure) {
        if (!range_ok(pressure->range) || pressure->resolution_pa <= 0 ||
            pressure->accuracy_pa < pressure->repeatability_pa)
            return name + ": inconsistent pressure channel";
    }
    return {};
}

SensorProfile dht22_profile() {
    SensorProfile p;
    p.name = "dht22";
    p.humidity_pct = {0.0, 100.0};
    p.temperature_c = {-40.0, 80.0};
    p.humidity_accuracy = 2.0;
    p.temperature_accuracy = 0.5;
    p.humidity_repeatability = 0.3;
    p.temperature_repeatability = 0.2;
    p.humidity_resolution = 0.1;
    p.temperature_resolution = 0.1;
    p.pressure = PressureChannel{};
    return p;
}

SensorProfile dht11_profile() {
    SensorProfile p;
    p.name = "dht11";
    p.humidity_pct = {20.0, 80.0};
    p.temperature_c = {0.0, 50.0};
    p.humidity_accuracy = 5.0;
    p.temperature_accuracy = 2.0;
    p.humidity_repeatability = 1.0;
    p.temperature_repeatability = 1.0;
    p.humidity_resolution = 1.0;
    p.temperature_resolution = 1.0;
    p.pressure = PressureChannel{};
    return p;
}

SensorProfile sht31_profile() {
    SensorProfile p;
    p.name = "sht31";
    p.humidity_pct = {0.0, 100.0};
    p.temperature_c = {-40.0, 90.0};
    p.humidity_accuracy = 2.0;
    p.temperature_accuracy = 0.3;
    p.humidity_repeatability = 0.1;
    p.temperature_repeatability = 0.06;
    p.humidity_resolution = 0.01;
    p.temperature_resolution = 0.01;
    p.pressure = PressureChannel{};
    return p;
}

std::optional<SensorProfile> profile_by_name(std::string_view name) {
    if (name == "dht22")
        return dht22_profile();
    if (name == "dht11")
        return dht11_profile();
    if (name == "sht31")
        return sht31_profile();
    return std::nullopt;
}

std::vector<std::string> profile_names() { return {"dht22", "dht11", "sht31"}; }

Environment::Environment(EnvironmentParams params, const SensorProfile& profile, std::uint64_t seed)
    : params_(params),
      humidity_(profile.humidity_pct),
      temperature_(profile.temperature_c),
      rng_(seed) {
    if (profile.pressure)
        pressure_ = profile.pressure->range;
    walk_.push_back(Truth{0, 0, 0});
}

void Environment::extend_to(std::size_t step) {
    const double keep = 1.0 - params_.reversion;
    while (walk_.size() <= step) {
        const auto& last = walk_.back();
        Truth next;
        next.temperature_c = last.temperature_c * keep + params_.temperature_step * gauss_(rng_);
        next.humidity_pct = last.humidity_pct * keep + params_.humidity_step * gauss_(rng_);
        next.pressure_pa = last.pressure_pa * keep + params_.pressure_step * gauss_(rng_);
        walk_.push_back(next);
    }
}

Truth Environment::at(double t_s) {
    const auto step = t_s <= 0 ? std::size_t{0} : static_cast<std::size_t>(std::floor(t_s / params_.step_s));
    extend_to(step);
    const auto& w = walk_[step];
    const double phase = std::sin(2.0 * std::numbers::pi * t_s / params_.period_s);
    Truth t;
    t.temperature_c = temperature_.clamp(params_.base.temperature_c + params_.temperature_swing * phase + w.temperature_c);
    t.humidity_pct = humidity_.clamp(params_.base.humidity_pct + params_.humidity_swing * phase + w.humidity_pct);
    t.pressure_pa = params_.base.pressure_pa + params_.pressure_swing * phase + w.pressure_pa;
    if (pressure_)
        t.pressure_pa = pressure_->clamp(t.pressure_pa);
    return t;
}

double quantize(double value, double resolution) { return std::round(value / resolution) * resolution; }

SensorBias draw_bias(const SensorProfile& profile, std::mt19937_64& rng) {
    auto within = [&](double a) { return std::uniform_real_distribution<double>(-a, a)(rng); };
    SensorBias b;
    b.temperature = within(profile.temperature_accuracy);
    b.humidity = within(profile.humidity_accuracy);
    if (profile.pressure)
        b.pressure = within(profile.pressure->accuracy_pa);
    return b;
}

SensorReading sample(const SensorProfile& profile, const Truth& truth, const SensorBias& bias, std::mt19937_64& rng,
                     std::uint64_t timestamp_ms) {
    std::normal_distribution<double> gauss(0.0, 1.0);
    const double temp_noise = gauss(rng) * profile.temperature_repeatability;
    const double hum_noise = gauss(rng) * profile.humidity_repeatability;
    const double pres_noise = gauss(rng);

    SensorReading r;
    r.timestamp_ms = timestamp_ms;
    r.temperature_c = static_cast<float>(profile.temperature_c.clamp(
        quantize(truth.temperature_c + bias.temperature + temp_noise, profile.temperature_resolution)));
    r.humidity_pct = static_cast<float>(
        profile.humidity_pct.clamp(quantize(truth.humidity_pct + bias.humidity + hum_noise, profile.humidity_resolution)));
    if (profile.pressure) {
        const auto& ch = *profile.pressure;
        r.pressure_pa = ch.range.clamp(
            quantize(truth.pressure_pa + bias.pressure + pres_noise * ch.repeatability_pa, ch.resolution_pa));
    }
    return r;
}

std::string format_number(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6f", v);
    std::string s(buf);
    if (s.find('.') != std::string::npos) {
        while (!s.empty() && s.back() == '0')
            s.pop_back();
        if (!s.empty() && s.back() == '.')
            s.pop_back();
    }
    if (s == "-0")
        s = "0";
    return s;
}

std::string build_payload(const SensorReading& reading) {
    std::string out = "{\"temperature\":";
    out += format_number(static_cast<double>(reading.temperature_c));
    out += ",\"humidity\":";
    out += format_number(static_cast<double>(reading.humidity_pct));
    if (reading.pressure_pa) {
        out += ",\"pressure\":";
        out += format_number(*reading.pressure_pa);
    }
    out += '}';
    return out;
}

} // namespace wsn::node
