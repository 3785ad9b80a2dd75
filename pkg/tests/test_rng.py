import numpy as np
import pytest

from milblock.errors import ValidationError
from milblock.rng import RandomStream, rng_uniform, splitmix64

M64 = (1 << 64) - 1


def reference_xoshiro256ss(state, n):
    """Straight transcription of the published xoshiro256** next()."""
    s = list(state)
    rotl = lambda x, k: ((x << k) | (x >> (64 - k))) & M64
    out = []
    for _ in range(n):
        result = (rotl((s[1] * 5) & M64, 7) * 9) & M64
        t = (s[1] << 17) & M64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = rotl(s[3], 45)
        out.append(result)
    return out


def test_splitmix_reference_first_output():
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


def test_splitmix_seeds_state():
    x, words = 12345, []
    for _ in range(4):
        x, o = splitmix64(x)
        words.append(o)
    assert [int(v) for v in RandomStream(12345).state] == words


def test_xoshiro_matches_reference():
    stream = RandomStream(2024)
    expected = reference_xoshiro256ss([int(v) for v in stream.state], 50)
    assert [int(v) for v in stream.raw(50)] == expected


def test_same_seed_same_sequence():
    a = rng_uniform(RandomStream(3), 0.0, 1.0, 500)
    b = rng_uniform(RandomStream(3), 0.0, 1.0, 500)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, rng_uniform(RandomStream(4), 0.0, 1.0, 500))


def test_uniform_mean_and_range():
    u = rng_uniform(RandomStream(8), 0.0, 1.0, 100_000)
    assert abs(u.mean() - 0.5) < 0.01
    assert u.min() >= 0.0 and u.max() < 1.0


def test_uniform_scaled_range():
    u = rng_uniform(RandomStream(8), -2.0, 3.0, 10_000)
    assert u.min() >= -2.0 and u.max() < 3.0


def test_stream_advances_by_n():
    s1, s2 = RandomStream(1), RandomStream(1)
    s1.uniform(0.0, 1.0, 7)
    s2.raw(7)
    assert np.array_equal(s1.state, s2.state)


def test_bad_interval():
    with pytest.raises(ValidationError):
        rng_uniform(RandomStream(0), 1.0, 1.0, 3)


def test_normal_moments():
    z = RandomStream(9).normal(100_001)
    assert abs(z.mean()) < 0.02
    assert abs(z.var() - 1.0) < 0.02


def test_normal_pairs_documented_order():
    s = RandomStream(5)
    u = RandomStream(5).uniform(0.0, 1.0, 4)
    z = s.normal(3)
    r0 = np.sqrt(-2.0 * np.log(1.0 - u[0]))
    r1 = np.sqrt(-2.0 * np.log(1.0 - u[2]))
    np.testing.assert_allclose(z, [r0 * np.cos(2 * np.pi * u[1]), r0 * np.sin(2 * np.pi * u[1]),
                                   r1 * np.cos(2 * np.pi * u[3])], rtol=0, atol=1e-14)


def test_shuffle_is_permutation():
    p = RandomStream(11).permutation(100)
    assert sorted(p.tolist()) == list(range(100))
    assert p.tolist() != list(range(100))


def test_integer_bounds():
    s = RandomStream(12)
    vals = [s.integer(3, 8) for _ in range(2000)]
    assert min(vals) == 3 and max(vals) == 8
