import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from crest import container
from crest.container import MAGIC, ContainerError


def test_roundtrip_and_layout(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "s": np.array(2.5)}
    path = tmp_path / "x.crest"
    container.save(path, arrays, {"kind": "test", "n": 1})
    blob = path.read_bytes()
    assert blob[:8] == MAGIC
    (n,) = struct.unpack("<Q", blob[8:16])
    assert blob[16:16 + n] == (b'{"arrays":[{"name":"a","offset":0,"shape":[2,3]},'
                               b'{"name":"s","offset":6,"shape":[]}],"meta":{"kind":"test","n":1}}')
    assert len(blob) == 16 + n + 7 * 8
    got, meta = container.load(path)
    np.testing.assert_array_equal(got["a"], arrays["a"])
    assert got["s"].shape == () and got["s"] == 2.5
    assert meta == {"kind": "test", "n": 1}


def test_bytes_are_deterministic():
    a = {"w": np.linspace(0, 1, 7)}
    assert container.dumps(a, {"b": 1, "a": 2}) == container.dumps(a, {"a": 2, "b": 1})


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(max_dims=4, max_side=4),
                  elements=st.floats(allow_nan=False, allow_infinity=True)))
def test_roundtrip_is_bit_exact(arr):
    got, _ = container.loads(container.dumps({"x": arr}))
    assert got["x"].shape == arr.shape
    assert got["x"].tobytes() == np.ascontiguousarray(arr).tobytes()


@pytest.mark.parametrize("mutate, where", [
    (lambda b: b"XRESTv1\n" + b[8:], "byte offset 0"),
    (lambda b: b[:12], "byte offset 8"),
    (lambda b: b[:20], "truncated"),
    (lambda b: b[:-3], "not a multiple of 8"),
    (lambda b: b[:-8], "extends past end"),
])
def test_malformed_input_names_offset(mutate, where):
    blob = container.dumps({"x": np.ones(3)})
    with pytest.raises(ContainerError, match=where):
        container.loads(mutate(blob))


def test_bad_json_reports_offset():
    blob = MAGIC + struct.pack("<Q", 3) + b"{x}"
    with pytest.raises(ContainerError, match="invalid JSON header at byte offset 17"):
        container.loads(blob)
