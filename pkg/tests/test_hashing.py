import numpy as np
from hypothesis import given, strategies as st

from plugtagger.hashing import FNV_OFFSET, _fnv1a64_py, fnv1a64


def test_published_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


@given(st.binary(max_size=200))
def test_compiled_path_matches_reference(data):
    assert fnv1a64(data) == _fnv1a64_py(np.frombuffer(data, np.uint8), FNV_OFFSET)


@given(st.binary(max_size=64), st.binary(max_size=64))
def test_chaining_equals_concatenation(a, b):
    assert fnv1a64(b, fnv1a64(a)) == fnv1a64(a + b)


def test_arrays_hash_their_bytes():
    x = np.arange(6, dtype="<f4").reshape(2, 3)
    assert fnv1a64(x) == fnv1a64(x.tobytes())
    assert fnv1a64(x.T) == fnv1a64(np.ascontiguousarray(x.T).tobytes())
