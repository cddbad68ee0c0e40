"""Python access to the wsn simulator core."""

from ._wsn import (
    DecodeError,
    EncodeError,
    build_payload,
    decode_packet,
    decode_remaining_length,
    encode_disconnect,
    encode_pingreq,
    encode_pingresp,
    encode_publish,
    encode_remaining_length,
    estimate_lifetime,
    format_block,
    format_number,
    profile_names,
    read_log,
    run_fleet,
    topic_matches,
    valid_topic_filter,
    valid_topic_name,
)

__all__ = [
    "DecodeError",
    "EncodeError",
    "build_payload",
    "decode_packet",
    "decode_remaining_length",
    "encode_disconnect",
    "encode_pingreq",
    "encode_pingresp",
    "encode_publish",
    "encode_remaining_length",
    "estimate_lifetime",
    "format_block",
    "format_number",
    "profile_names",
    "read_log",
    "run_fleet",
    "topic_matches",
    "valid_topic_filter",
    "valid_topic_name",
]
