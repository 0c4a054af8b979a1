import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from tfnet import checkpoint
from tfnet.checkpoint import CheckpointError
from tfnet.model import build, reference_config


def test_round_trip_model_state(tmp_path):
    sd = build(reference_config("toy"), seed=2).state_dict()
    n = checkpoint.save(tmp_path / "m.ckpt", sd)
    assert n == (tmp_path / "m.ckpt").stat().st_size == checkpoint.serialized_size({k: v.shape for k, v in sd.items()})
    back = checkpoint.load(tmp_path / "m.ckpt")
    assert list(back) == list(sd)
    for k in sd:
        np.testing.assert_array_equal(back[k], sd[k].astype(np.float32))


def test_header_layout():
    buf = checkpoint.dumps({"ab": np.arange(6, dtype=np.float32).reshape(2, 3)})
    assert buf[:4] == b"TFNK"
    assert struct.unpack_from("<II", buf, 4) == (1, 1)
    assert struct.unpack_from("<H", buf, 12) == (2,)
    assert buf[14:16] == b"ab"
    assert struct.unpack_from("<B2I", buf, 16) == (2, 2, 3)
    assert len(buf) == 12 + 2 + 2 + 1 + 8 + 24


@pytest.mark.parametrize(
    "mutate,msg",
    [
        (lambda b: b"XXXX" + b[4:], "magic"),
        (lambda b: b[:4] + struct.pack("<I", 9) + b[8:], "version"),
        (lambda b: b + b"\0", "trailing"),
    ],
)
def test_corrupt_files_rejected(mutate, msg):
    buf = checkpoint.dumps({"w": np.ones(3, dtype=np.float32)})
    with pytest.raises(CheckpointError, match=msg):
        checkpoint.loads(mutate(buf))


def test_truncated_file_rejected():
    buf = checkpoint.dumps({"w": np.ones(3, dtype=np.float32)})
    with pytest.raises((CheckpointError, struct.error, ValueError)):
        checkpoint.loads(buf[:-5])


@settings(max_examples=40, deadline=None)
@given(
    st.dictionaries(
        st.text(min_size=1, max_size=12),
        hnp.arrays(np.float32, hnp.array_shapes(min_dims=0, max_dims=4, max_side=4), elements=st.floats(-1e6, 1e6, width=32)),
        max_size=5,
    )
)
def test_round_trip_property(tensors):
    buf = checkpoint.dumps(tensors)
    assert len(buf) == checkpoint.serialized_size({k: v.shape for k, v in tensors.items()})
    back = checkpoint.loads(buf)
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        np.testing.assert_array_equal(back[k], v)
