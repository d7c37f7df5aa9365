import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from cachenet import protocol as wire
from cachenet.submodels import SubmodelParams

GOLDEN_MODEL_REQ = bytes.fromhex("434E4554 01 03 0000000000000004 00000002")


class TestFraming:
    def test_golden_model_request(self):
        assert wire.encode_message(wire.model_request(2)) == GOLDEN_MODEL_REQ
        msg = wire.decode_message(GOLDEN_MODEL_REQ)
        assert msg.msg_type is wire.MsgType.MODEL_REQ
        assert wire.parse_model_request(msg.payload) == 2

    def test_empty_error_is_header_only(self):
        frame = wire.encode_message(wire.WireMessage(wire.MsgType.ERROR))
        assert len(frame) == 14

    def test_header_layout(self):
        frame = wire.encode_message(wire.WireMessage(wire.MsgType.INFER_RESP, b"xyz"))
        assert frame[:4] == b"CNET" and frame[4] == 1 and frame[5] == 2
        assert struct.unpack(">Q", frame[6:14])[0] == 3

    @pytest.mark.parametrize("mutate, exc", [
        (lambda f: b"XNET" + f[4:], wire.ProtocolError),
        (lambda f: f[:4] + b"\x02" + f[5:], wire.ProtocolError),
        (lambda f: f[:5] + b"\x09" + f[6:], wire.ProtocolError),
        (lambda f: f[:-1], wire.FramingError),
        (lambda f: f + b"\x00", wire.FramingError),
        (lambda f: f[:10], wire.FramingError),
    ])
    def test_rejections(self, mutate, exc):
        with pytest.raises(exc):
            wire.decode_message(mutate(GOLDEN_MODEL_REQ))

    def test_oversize(self):
        header = wire.HEADER.pack(wire.MAGIC, 1, 1, wire.MAX_PAYLOAD + 1)
        with pytest.raises(wire.ResourceError):
            wire.decode_message(header)
        with pytest.raises(wire.ResourceError):
            wire.encode_message(wire.WireMessage(wire.MsgType.INFER_REQ, b"a" * 11), max_payload=10)

    def test_random_round_trips(self):
        rng = np.random.default_rng(0)
        types = list(wire.MsgType)
        lengths = rng.integers(0, 64, size=100_000)
        blob = rng.bytes(int(lengths.sum()))
        offset = 0
        for i, n in enumerate(lengths):
            msg = wire.WireMessage(types[i % len(types)], blob[offset:offset + n])
            offset += n
            frame = wire.encode_message(msg)
            assert len(frame) == 14 + n
            assert wire.decode_message(frame) == msg

    @given(st.binary(max_size=64))
    def test_fuzz_never_panics(self, data):
        try:
            wire.decode_message(data)
        except wire.ProtocolError:
            pass

    @given(st.binary(min_size=4, max_size=4).filter(lambda m: m != b"CNET"), st.binary(max_size=20))
    def test_wrong_magic_rejected(self, magic, rest):
        with pytest.raises(wire.ProtocolError):
            wire.decode_message(magic + GOLDEN_MODEL_REQ[4:] + rest)

    @given(st.lists(st.tuples(st.sampled_from(list(wire.MsgType)), st.binary(max_size=40)),
                    max_size=12),
           st.lists(st.integers(1, 50), min_size=1, max_size=20))
    def test_chunking_independent(self, msgs, cuts):
        msgs = [wire.WireMessage(t, p) for t, p in msgs]
        stream = b"".join(wire.encode_message(m) for m in msgs)
        dec, out, pos, i = wire.FrameDecoder(), [], 0, 0
        while pos < len(stream):
            step = cuts[i % len(cuts)]
            out.extend(dec.feed(stream[pos:pos + step]))
            pos += step
            i += 1
        assert out == msgs and dec.pending == 0


class TestBlob:
    def test_two_by_two_layout(self):
        blob = wire.serialize_tensors([np.array([[1, 2], [3, 4]], np.float32)])
        assert blob[:4] == b"CNMD" and blob[4] == 1
        assert struct.unpack(">H", blob[5:7])[0] == 1
        assert blob[7] == 2 and struct.unpack(">II", blob[8:16]) == (2, 2)
        assert blob[16:32] == np.array([1, 2, 3, 4], "<f4").tobytes()
        assert struct.unpack(">I", blob[32:]) == (zlib.crc32(blob[:32]),)
        assert len(blob) == 36

    def test_zero_tensors(self):
        blob = wire.serialize_tensors([])
        assert struct.unpack(">H", blob[5:7])[0] == 0
        assert wire.deserialize_tensors(blob) == []

    @given(st.lists(hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                               elements=st.floats(width=32, allow_nan=True)), max_size=5))
    def test_bit_exact_round_trip(self, arrays):
        back = wire.deserialize_tensors(wire.serialize_tensors(arrays))
        assert len(back) == len(arrays)
        for a, b in zip(arrays, back):
            assert a.shape == b.shape and a.tobytes() == b.astype("<f4").tobytes()

    def test_every_bit_flip_detected(self):
        rng = np.random.default_rng(1)
        blob = wire.serialize_tensors([rng.normal(size=(3, 4)).astype(np.float32),
                                       rng.normal(size=4).astype(np.float32)])
        for bit in range(len(blob) * 8):
            corrupt = bytearray(blob)
            corrupt[bit // 8] ^= 1 << (bit % 8)
            with pytest.raises(wire.IntegrityError):
                wire.deserialize_tensors(bytes(corrupt))

    def test_dims_overflow_detected(self):
        body = b"CNMD" + struct.pack(">BH", 1, 1) + struct.pack(">BI", 1, 0xFFFFFFFF)
        blob = body + struct.pack(">I", zlib.crc32(body))
        with pytest.raises(wire.FormatError):
            wire.deserialize_tensors(blob)

    def test_trailing_bytes_detected(self):
        body = wire.serialize_tensors([np.ones(2, np.float32)])[:-4] + b"\x00"
        with pytest.raises(wire.FormatError):
            wire.deserialize_tensors(body + struct.pack(">I", zlib.crc32(body)))

    def test_model_round_trip(self, small_bundle):
        for sm in small_bundle.submodels:
            back = wire.deserialize_model(wire.serialize_model(sm))
            assert isinstance(back, SubmodelParams)
            for (W, b), (W2, b2) in zip(sm.layers, back.layers):
                assert W.tobytes() == W2.tobytes() and b.tobytes() == b2.tobytes()


class TestPayloads:
    def test_infer_round_trip(self):
        frame = np.arange(5, dtype=np.float32)
        msg = wire.decode_message(wire.encode_message(wire.infer_request(frame)))
        np.testing.assert_array_equal(wire.parse_infer_request(msg.payload), frame)

    def test_infer_response(self):
        probs = np.array([0.25, 0.75], np.float32)
        label, k, p = wire.parse_infer_response(wire.infer_response(1, 3, probs).payload)
        assert (label, k) == (1, 3)
        np.testing.assert_array_equal(p, probs)

    def test_error_payload(self):
        code, text = wire.parse_error(wire.error_message(wire.ErrorCode.UNKNOWN_PARTITION, "no").payload)
        assert code == 2 and text == "no"
        assert wire.parse_error(b"") == (None, "")

    @pytest.mark.parametrize("payload", [b"", b"\x00\x00\x00", b"\x00" * 5])
    def test_bad_model_request(self, payload):
        with pytest.raises(wire.FormatError):
            wire.parse_model_request(payload)
