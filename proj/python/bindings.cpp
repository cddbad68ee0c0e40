#include "wsn/fleet.hpp"
#include "wsn/mqtt.hpp"
#include "wsn/node.hpp"
#include "wsn/persistence.hpp"
#include "wsn/poll.hpp"
#include "wsn/topic.hpp"

#include <pybind11/eval.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using namespace wsn;

namespace {

mqtt::Bytes to_vec(const py::bytes& b) {
    const auto s = static_cast<std::string_view>(b);
    return mqtt::Bytes(s.begin(), s.end());
}

py::bytes to_py(const mqtt::Bytes& b) { return py::bytes(reinterpret_cast<const char*>(b.data()), b.size()); }

[[noreturn]] void raise_decode(const mqtt::DecodeError& e) {
    static py::object cls = py::module_::import("wsn_sim._wsn").attr("DecodeError");
    PyErr_SetObject(cls.ptr(),
                    py::make_tuple(std::string(mqtt::to_string(e.kind)), e.needed, e.detail).ptr());
    throw py::error_already_set();
}

py::dict describe(const mqtt::Packet& p) {
    py::dict d;
    d["type"] = std::string(mqtt::packet_type_name(mqtt::packet_type(p)));
    if (const auto* pub = std::get_if<mqtt::Publish>(&p)) {
        const auto& m = pub->message;
        d["topic"] = m.topic;
        d["payload"] = to_py(m.payload);
        d["qos"] = m.qos;
        d["retain"] = m.retain;
        d["dup"] = m.dup;
        d["packet_id"] = m.packet_id ? py::cast(*m.packet_id) : py::none();
    } else if (const auto* ack = std::get_if<mqtt::ConnAck>(&p)) {
        d["session_present"] = ack->session_present;
        d["return_code"] = ack->return_code;
    } else if (const auto* c = std::get_if<mqtt::Connect>(&p)) {
        d["client_id"] = c->options.client_id;
        d["keep_alive_s"] = c->options.keep_alive_s;
        d["clean_session"] = c->options.clean_session;
    }
    return d;
}

py::dict fleet_result(const fleet::FleetResult& r) {
    const auto& rep = r.report;
    py::dict report;
    report["nodes"] = rep.nodes;
    report["duration_s"] = rep.duration_s;
    report["published"] = rep.published;
    report["delivered"] = rep.delivered;
    report["dropped_by_policy"] = rep.dropped_by_policy;
    report["wills_fired"] = rep.wills_fired;
    py::dict out;
    out["report"] = report;
    out["retained_status"] = r.retained_status;
    out["killed"] = r.killed;
    out["wall_time_s"] = r.wall_time_s;
    return out;
}

} // namespace

PYBIND11_MODULE(_wsn, m) {
    m.doc() = "MQTT codec, topic matching, node model and fleet runner";

    py::register_exception<mqtt::EncodeError>(m, "EncodeError", PyExc_ValueError);
    py::exec(R"(
class DecodeError(ValueError):
    @property
    def kind(self): return self.args[0]
    @property
    def needed(self): return self.args[1]
)",
             m.attr("__dict__"));

    m.def("encode_remaining_length", [](std::uint32_t n) { return to_py(mqtt::encode_remaining_length(n)); });
    m.def("decode_remaining_length", [](const py::bytes& b) {
        const auto v = to_vec(b);
        const auto r = mqtt::decode_remaining_length(v);
        if (!mqtt::ok(r))
            raise_decode(std::get<mqtt::DecodeError>(r));
        const auto& d = std::get<0>(r);
        return py::make_tuple(d.value, d.consumed);
    });
    m.def(
        "encode_publish",
        [](const std::string& topic, const py::bytes& payload, std::uint8_t qos, bool retain,
           std::optional<std::uint16_t> packet_id) {
            return to_py(mqtt::encode_packet(mqtt::Publish{{topic, to_vec(payload), qos, retain, false, packet_id}}));
        },
        py::arg("topic"), py::arg("payload"), py::arg("qos") = 0, py::arg("retain") = false,
        py::arg("packet_id") = py::none());
    m.def("encode_pingreq", [] { return to_py(mqtt::encode_packet(mqtt::PingReq{})); });
    m.def("encode_pingresp", [] { return to_py(mqtt::encode_packet(mqtt::PingResp{})); });
    m.def("encode_disconnect", [] { return to_py(mqtt::encode_packet(mqtt::Disconnect{})); });
    m.def(
        "decode_packet",
        [](const py::bytes& b) {
            const auto v = to_vec(b);
            auto r = mqtt::decode_packet(v);
            if (!mqtt::ok(r))
                raise_decode(std::get<mqtt::DecodeError>(r));
            auto& d = std::get<0>(r);
            auto out = describe(d.value);
            out["consumed"] = d.consumed;
            return out;
        },
        "Decode one packet from the front of the buffer.");

    m.def("topic_matches", py::overload_cast<std::string_view, std::string_view>(&topic_matches),
          py::arg("filter"), py::arg("topic"));
    m.def("valid_topic_filter", [](std::string_view f) { return TopicFilter::valid(f); });
    m.def("valid_topic_name", [](std::string_view t) { return TopicName::valid(t); });

    m.def("format_number", &node::format_number);
    m.def(
        "build_payload",
        [](float temperature, float humidity, std::optional<double> pressure) {
            return node::build_payload({temperature, humidity, pressure, 0});
        },
        py::arg("temperature"), py::arg("humidity"), py::arg("pressure") = py::none(),
        "Values are narrowed to float32 first, as on the device.");
    m.def("estimate_lifetime", py::overload_cast<double, double, double>(&node::estimate_lifetime),
          py::arg("battery_wh"), py::arg("bus_voltage_v"), py::arg("avg_current_a"));
    m.def("profile_names", &node::profile_names);

    m.def(
        "format_block",
        [](std::string_view payload) {
            const auto s = poll::parse_payload(payload);
            if (!s)
                throw py::value_error("payload is not a JSON object");
            return poll::format_block(*s);
        },
        "The poller's three-line block for one payload.");

    m.def(
        "run_fleet",
        [](std::uint32_t nodes, double interval_s, double duration_s, std::uint64_t seed, double kill_fraction,
           std::uint64_t drop_every, double loss, std::optional<std::filesystem::path> data_dir,
           std::string broker) {
            fleet::FleetConfig c;
            c.nodes = nodes;
            c.interval_s = interval_s;
            c.duration_s = duration_s;
            c.seed = seed;
            c.kill_fraction = kill_fraction;
            c.drop_every_nth_publish = drop_every;
            c.loss_probability = loss;
            c.data_dir = std::move(data_dir);
            c.broker_addr = std::move(broker);
            fleet::FleetResult r;
            {
                py::gil_scoped_release release;
                r = fleet::run_fleet(c);
            }
            return fleet_result(r);
        },
        py::arg("nodes") = 1, py::arg("interval_s") = 10.0, py::arg("duration_s") = 30.0, py::arg("seed") = 1,
        py::arg("kill_fraction") = 0.0, py::arg("drop_every") = 0, py::arg("loss") = 0.0,
        py::arg("data_dir") = py::none(), py::arg("broker") = "");

    m.def("read_log", [](const std::filesystem::path& dir) {
        py::list out;
        for (const auto& r : persistence::MessageLog::read_all(dir))
            out.append(py::make_tuple(r.offset, r.timestamp_ms, r.topic, to_py(r.payload)));
        return out;
    });
}
