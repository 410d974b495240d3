import numpy as np
from hypothesis import given, strategies as st

from nodalmc.streams import Tag, block_slices, stream


def test_same_address_same_numbers():
    a = stream(3, Tag.MOVE, 2, 5).standard_normal(10)
    b = stream(3, Tag.MOVE, 2, 5).standard_normal(10)
    assert np.array_equal(a, b)


def test_distinct_addresses_differ():
    base = stream(3, Tag.MOVE, 2, 5).random(4)
    for other in (stream(4, Tag.MOVE, 2, 5), stream(3, Tag.RESAMPLE, 2, 5),
                  stream(3, Tag.MOVE, 3, 5), stream(3, Tag.MOVE, 2, 6)):
        assert not np.array_equal(base, other.random(4))


@given(st.integers(1, 5000), st.integers(1, 700))
def test_block_slices_partition(n, size):
    sl = block_slices(n, size)
    covered = np.concatenate([np.arange(n)[s] for s in sl])
    assert np.array_equal(covered, np.arange(n))
    assert all(s.stop - s.start <= size for s in sl)
