import numpy as np
from hypothesis import given, settings, strategies as st

from qvit.rng import PCG32


def test_reference_vector():
    # pcg32-demo output for seed 42, stream 54
    g = PCG32(42, 54)
    assert [g.next_u32() for _ in range(6)] == [
        0xA15C02B7, 0x7B47F409, 0xBA1D3330, 0x83D2F293, 0xBFA4784B, 0xCBED606E]


def test_streams_differ():
    a = [PCG32(7, 0).next_u32() for _ in range(4)]
    b = [PCG32(7, 1).next_u32() for _ in range(4)]
    assert a != b


def test_uniform_range():
    vals = PCG32(3).uniform(-np.pi / 4, np.pi / 4, 1000)
    assert vals.shape == (1000,)
    assert vals.min() >= -np.pi / 4 and vals.max() < np.pi / 4


@settings(max_examples=50)
@given(st.integers(0, 2**64 - 1), st.integers(1, 200))
def test_permutation_is_permutation(seed, n):
    perm = PCG32(seed, 5).permutation(n)
    assert sorted(perm.tolist()) == list(range(n))


def test_bounded_in_range():
    g = PCG32(9)
    assert all(0 <= g.bounded(7) < 7 for _ in range(500))
