import hashlib
import struct

import numpy as np
import pytest

from rangedg.checkpoint import (MAGIC, Checkpoint, CheckpointChecksumError, CheckpointFormatError,
                                CheckpointShapeError, CheckpointVersionError, decode, encode, load_checkpoint,
                                save_checkpoint)
from rangedg.net import Model, ModelConfig
from rangedg.projection import InputStats

SMALL = dict(channels=3, widths=(3, 4, 4))


def make(cfg=None, seed=0):
    m = Model(cfg or ModelConfig(**SMALL), seed=seed)
    stats = InputStats(np.arange(5) * 0.5, np.arange(1, 6) * 1.5)
    return Checkpoint(m, stats, {"seed": seed, "history": {"seg": [1.5, 0.25]}})


def reseal(body: bytes) -> bytes:
    return body + hashlib.sha256(body).digest()


@pytest.mark.parametrize("cfg", [ModelConfig(**SMALL), ModelConfig.baseline(**SMALL)])
def test_round_trip_is_byte_identical(cfg, tmp_path):
    ck = make(cfg)
    data = save_checkpoint(tmp_path / "a.bin", ck)
    back = load_checkpoint(tmp_path / "a.bin")
    assert encode(back) == data
    assert back.model.cfg == ck.model.cfg and back.train == ck.train
    np.testing.assert_array_equal(back.input_stats.mean, ck.input_stats.mean)
    for k, p in ck.model.params.items():
        assert back.model.params[k].value.tobytes() == p.value.tobytes()
        assert back.model.params[k].role == p.role


def test_layout_header():
    data = encode(make())
    assert data[:8] == MAGIC
    version, meta_len = struct.unpack_from("<II", data, 8)
    assert version == 1
    assert data[16:16 + meta_len].startswith(b'{"input_stats":')
    assert hashlib.sha256(data[:-32]).digest() == data[-32:]


def test_distinct_errors():
    data = encode(make())
    with pytest.raises(CheckpointFormatError):
        decode(b"NOTACKPT" + data[8:])
    with pytest.raises(CheckpointFormatError):
        decode(data[:20])
    with pytest.raises(CheckpointVersionError):
        decode(reseal(data[:8] + struct.pack("<I", 2) + data[12:-32]))
    flipped = bytearray(data)
    flipped[-40] ^= 0xFF
    with pytest.raises(CheckpointChecksumError):
        decode(bytes(flipped))
    with pytest.raises(CheckpointFormatError):
        decode(reseal(data[:-32] + b"\x00"))


def test_shape_mismatch_is_reported():
    small = encode(make(ModelConfig(**SMALL)))
    other = encode(make(ModelConfig(channels=3, widths=(3, 4, 8))))
    # swap in the tensor table of a different architecture under the first config's metadata
    meta_end = 16 + struct.unpack_from("<I", small, 12)[0]
    meta_end_o = 16 + struct.unpack_from("<I", other, 12)[0]
    with pytest.raises(CheckpointShapeError, match="wrong shape"):
        decode(reseal(small[:meta_end] + other[meta_end_o:-32]))


def test_loaded_model_predicts_like_the_original():
    from gradsuite import _toy_batch
    ck = make(seed=3)
    back = decode(encode(ck))
    batch = _toy_batch(0)
    np.testing.assert_array_equal(back.model.predict(batch), ck.model.predict(batch))
