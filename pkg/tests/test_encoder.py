import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from milblock.autodiff import grad_check, total
from milblock.encoder import EncoderParams, encode, encode_graph, init_encoder, patchify, unpatchify
from milblock.errors import ShapeError, ValidationError
from milblock.rng import RandomStream


def mlp_oracle(patches, p):
    """Per-row loops, no matrix products."""
    out = np.zeros((patches.shape[0], p.W2.shape[0]))
    for j, row in enumerate(patches):
        h = [max(0.0, sum(p.W1[a, i] * row[i] for i in range(row.size)) + p.b1[a]) for a in range(p.W1.shape[0])]
        for d in range(p.W2.shape[0]):
            out[j, d] = sum(p.W2[d, a] * h[a] for a in range(len(h))) + p.b2[d]
    return out


class TestPatchify:
    def test_4x4_into_2x2(self):
        image = np.arange(16, dtype=float).reshape(4, 4)
        assert patchify(image, 2).tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]

    def test_single_patch(self):
        image = np.arange(9, dtype=float).reshape(3, 3)
        assert patchify(image, 3).tolist() == [list(range(9))]

    def test_not_divisible(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((5, 4)), 2)

    def test_not_2d(self):
        with pytest.raises(ShapeError):
            patchify(np.zeros((4, 4, 1)), 2)

    def test_loop_oracle(self, rng):
        image = rng.normal(size=(12, 8))
        got = patchify(image, 4)
        row = 0
        for gy in range(3):
            for gx in range(2):
                ref = [image[gy * 4 + y, gx * 4 + x] for y in range(4) for x in range(4)]
                assert got[row].tolist() == ref
                row += 1

    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**32 - 1))
    def test_roundtrip(self, p, gh, gw, seed):
        image = np.random.default_rng(seed).normal(size=(gh * p, gw * p))
        assert np.array_equal(unpatchify(patchify(image, p), p, gh * p, gw * p), image)


class TestEncoder:
    def params(self, rng, P=2, H=5, D=3):
        return EncoderParams(rng.normal(size=(H, P * P)), rng.normal(size=H),
                             rng.normal(size=(D, H)), rng.normal(size=D), P)

    def test_two_layer_oracle(self, rng):
        p = self.params(rng)
        patches = rng.normal(size=(6, 4))
        np.testing.assert_allclose(encode(patches, p), mlp_oracle(patches, p), rtol=0, atol=1e-12)

    def test_zero_weights_give_bias(self, rng):
        p = EncoderParams(np.zeros((5, 4)), np.zeros(5), np.zeros((3, 5)), np.array([1.0, -2.0, 0.5]), 2)
        out = encode(rng.normal(size=(7, 4)), p)
        assert np.array_equal(out, np.tile([1.0, -2.0, 0.5], (7, 1)))

    def test_permutation_equivariant(self, rng):
        p = self.params(rng)
        patches = rng.normal(size=(9, 4))
        perm = rng.permutation(9)
        assert np.array_equal(encode(patches[perm], p), encode(patches, p)[perm])

    def test_wrong_patch_width(self, rng):
        with pytest.raises(ShapeError):
            encode(rng.normal(size=(3, 9)), self.params(rng))

    def test_validate(self, rng):
        p = self.params(rng)
        p.validate()
        p.b1 = np.zeros(2)
        with pytest.raises(ShapeError):
            p.validate()

    def test_gradients(self, rng):
        patches = rng.uniform(size=(5, 4))
        p = self.params(rng)

        def f(g, W1, b1, W2, b2):
            return total(encode_graph(g.constant(patches), W1, b1, W2, b2))
        assert grad_check(f, [p.W1, p.b1, p.W2, p.b2]) <= 1e-6


class TestInit:
    def test_deterministic(self):
        a, b = init_encoder(4, 8, 3, RandomStream(5)), init_encoder(4, 8, 3, RandomStream(5))
        assert np.array_equal(a.W1, b.W1) and np.array_equal(a.W2, b.W2)
        assert not np.array_equal(a.W1, init_encoder(4, 8, 3, RandomStream(6)).W1)

    def test_shapes_and_bounds(self):
        p = init_encoder(4, 8, 3, RandomStream(1))
        p.validate()
        assert p.W1.shape == (8, 16) and p.W2.shape == (3, 8)
        assert np.all(np.abs(p.W1) <= np.sqrt(6 / 16)) and np.all(np.abs(p.W2) <= np.sqrt(6 / 8))
        assert not p.b1.any() and not p.b2.any()

    def test_variance(self):
        fan_in = 64
        p = init_encoder(8, 400, 1, RandomStream(2))
        assert abs(p.W1.var() - 2 / fan_in) <= 0.2 * 2 / fan_in

    def test_rejects_nonpositive(self):
        with pytest.raises(ValidationError):
            init_encoder(0, 4, 4, RandomStream(0))
