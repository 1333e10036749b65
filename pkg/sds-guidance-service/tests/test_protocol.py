"""Wire format: line framing, pixel codec, request validation."""

import base64
import json

import numpy as np
import pytest

from sds_guidance_service.protocol import (
    PROTOCOL_VERSION,
    ProtocolViolation,
    decode_pixels,
    dump_line,
    encode_pixels,
    grad_message,
    hello_ack,
    parse_guide,
    parse_line,
)


def guide_message(image, prompt="a cube", stage=1, **extra):
    h, w, _ = image.shape
    msg = {"type": "guide", "prompt": prompt, "stage": stage,
           "width": w, "height": h, "pixels": encode_pixels(image)}
    msg.update(extra)
    return msg


def test_pixel_codec_round_trip_is_exact_in_float32():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(5, 3, 3)).astype("<f4")
    decoded = decode_pixels(encode_pixels(image), 5, 3)
    np.testing.assert_array_equal(decoded, image)
    assert decoded.dtype == np.dtype("<f4")


def test_pixel_codec_rejects_bad_payloads():
    with pytest.raises(ProtocolViolation, match="base64"):
        decode_pixels("not-base64!!", 2, 2)
    short = base64.b64encode(b"\0" * 10).decode()
    with pytest.raises(ProtocolViolation, match="expected 48"):
        decode_pixels(short, 2, 2)


def test_parse_line_framing():
    msg = parse_line(b'{"type": "hello", "version": 1}\n')
    assert msg == {"type": "hello", "version": 1}
    with pytest.raises(ProtocolViolation, match="JSON"):
        parse_line(b"{nope\n")
    with pytest.raises(ProtocolViolation, match="object"):
        parse_line(b"[1, 2]\n")
    with pytest.raises(ProtocolViolation, match="type"):
        parse_line(b'{"version": 1}\n')


def test_dump_line_is_one_json_object_per_line():
    line = dump_line(hello_ack())
    assert line.endswith(b"\n")
    assert line.count(b"\n") == 1
    assert json.loads(line) == {"type": "hello_ack",
                                "version": PROTOCOL_VERSION}


def test_grad_message_round_trips_through_parse_line():
    grad = np.full((2, 2, 3), 0.25, dtype="<f4")
    msg = parse_line(dump_line(grad_message(grad)))
    assert msg["type"] == "grad"
    np.testing.assert_array_equal(decode_pixels(msg["pixels"], 2, 2), grad)


def test_parse_guide_applies_defaults():
    image = np.zeros((4, 6, 3), dtype="<f4")
    req = parse_guide(guide_message(image))
    assert req["prompt"] == "a cube"
    assert req["stage"] == 1
    assert req["image"].shape == (4, 6, 3)
    assert (req["noise_lo"], req["noise_hi"]) == (0.0, 1.0)
    assert req["guidance_scale"] == 0.0


def test_parse_guide_ignores_unknown_fields():
    image = np.zeros((2, 2, 3), dtype="<f4")
    req = parse_guide(guide_message(image, experimental=True, priority=9))
    assert req["stage"] == 1


@pytest.mark.parametrize("mutation, pattern", [
    ({"prompt": ""}, "prompt"),
    ({"prompt": 7}, "prompt"),
    ({"stage": 3}, "stage"),
    ({"width": 0}, "positive"),
    ({"height": "tall"}, "integers"),
    ({"noise_lo": 0.9, "noise_hi": 0.1}, "lo < hi"),
    ({"noise_lo": -0.2}, "lo < hi"),
    ({"guidance_scale": "big"}, "numbers"),
    ({"pixels": None}, "pixels"),
])
def test_parse_guide_rejects_out_of_contract_requests(mutation, pattern):
    msg = guide_message(np.zeros((2, 2, 3), dtype="<f4"))
    msg.update(mutation)
    with pytest.raises(ProtocolViolation, match=pattern):
        parse_guide(msg)


def test_parse_guide_rejects_wrong_length_and_nonfinite_pixels():
    msg = guide_message(np.zeros((2, 2, 3), dtype="<f4"))
    msg["width"] = 3  # payload no longer matches the claimed size
    with pytest.raises(ProtocolViolation, match="bytes"):
        parse_guide(msg)
    bad = np.zeros((2, 2, 3), dtype="<f4")
    bad[0, 0, 0] = np.nan
    with pytest.raises(ProtocolViolation, match="finite"):
        parse_guide(guide_message(bad))
