import json

import pytest

import wsn_sim as w

FIG8 = '{"temperature":26.200001,"humidity":67,"pressure":100031.59}'


def test_payload_matches_device_output():
    assert w.build_payload(26.2, 67.0, 100031.59) == FIG8
    assert w.build_payload(0, 0) == '{"temperature":0,"humidity":0}'
    assert w.format_number(72.1) == "72.1"


def test_control_packets_are_two_bytes():
    assert w.encode_pingreq() == b"\xc0\x00"
    assert w.encode_pingresp() == b"\xd0\x00"
    assert w.encode_disconnect() == b"\xe0\x00"


def test_remaining_length_examples():
    assert w.encode_remaining_length(127) == b"\x7f"
    assert w.encode_remaining_length(128) == b"\x80\x01"
    assert w.encode_remaining_length(268_435_455) == b"\xff\xff\xff\x7f"
    assert w.decode_remaining_length(b"\x80\x01") == (128, 2)
    with pytest.raises(w.EncodeError):
        w.encode_remaining_length(268_435_456)
    with pytest.raises(w.DecodeError) as e:
        w.decode_remaining_length(b"\xff\xff\xff\xff")
    assert e.value.kind == "MalformedLength"


def test_publish_round_trip():
    raw = w.encode_publish("sensors/node1/data", FIG8.encode(), qos=1, packet_id=7)
    p = w.decode_packet(raw + b"\xc0\x00")
    assert p["type"] == "PUBLISH"
    assert p["consumed"] == len(raw)
    assert p["payload"] == FIG8.encode()
    assert (p["qos"], p["packet_id"], p["retain"]) == (1, 7, False)
    with pytest.raises(w.DecodeError) as e:
        w.decode_packet(raw[:-1])
    assert e.value.kind == "Incomplete"
    assert e.value.needed == 1


def test_topic_matching():
    assert w.topic_matches("sensors/+/data", "sensors/node1/data")
    assert w.topic_matches("sensors/#", "sensors")
    assert not w.topic_matches("#", "$SYS/x")
    assert not w.valid_topic_filter("a/#/b")
    assert not w.valid_topic_name("a/+")


def test_battery_and_poller():
    assert w.estimate_lifetime(9.62, 3.7, 0.080) == pytest.approx(32.5)
    with pytest.raises(ValueError):
        w.estimate_lifetime(0, 3.7, 0.08)
    payload = w.build_payload(27, 72.1, 100203.86)
    assert w.format_block(payload) == (
        "inner humidity: 72.099998%\ninner pressure: 100203.86 Pa\ninner temperature: 27°C\n"
    )
    assert "dht22" in w.profile_names()


def test_fleet_run_and_log(tmp_path):
    r = w.run_fleet(nodes=20, interval_s=2, duration_s=10, kill_fraction=0.1, data_dir=tmp_path)
    rep = r["report"]
    assert rep["published"] == rep["delivered"] > 0
    assert rep["wills_fired"] == 2
    assert sorted(r["retained_status"].values()).count("offline") == 2
    records = w.read_log(tmp_path)
    assert [rec[0] for rec in records] == list(range(len(records)))
    data = [rec for rec in records if rec[2].endswith("/data")]
    assert len(data) == rep["published"]
    json.loads(data[0][3])
    with pytest.raises(ValueError):
        w.run_fleet(nodes=0)
