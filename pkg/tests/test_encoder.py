import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from fgsi import autodiff as ad
from fgsi.autodiff import ParamStore, Tensor
from fgsi.embedding import segment_by_boundaries
from fgsi.encoder import (FilterBank, conv_index, convolve, dropout_mask, encode, encode_sentence,
                          piecewise_max_pool)


def bank_from(rng, k, widths=(3,), count=2):
    W = {w: rng.normal(size=(count, w, k)) for w in widths}
    b = {w: rng.normal(size=count) for w in widths}
    return FilterBank({w: Tensor(W[w]) for w in widths}, {w: Tensor(b[w]) for w in widths}), W, b


class TestConvolve:
    def test_zero_input_zero_bias(self):
        bank = FilterBank({3: Tensor(np.ones((2, 3, 4)))}, {3: Tensor(np.zeros(2))})
        assert not convolve(Tensor(np.zeros((5, 4))), bank).data.any()

    def test_identity_kernel(self):
        X = np.random.default_rng(0).normal(size=(6, 4))
        W = np.zeros((1, 1, 4))
        W[0, 0, 2] = 1.0
        out = convolve(Tensor(X), FilterBank({1: Tensor(W)}, {1: Tensor(np.zeros(1))})).data
        np.testing.assert_array_equal(out[:, 0], X[:, 2])

    def test_padding_split(self):
        # width 4: one row of left padding, two of right
        assert conv_index([3], 4).tolist() == [[3, 0, 1, 2], [0, 1, 2, 3], [1, 2, 3, 3]]

    def test_windows_do_not_cross_sentences(self):
        idx = conv_index([2, 2], 3)
        assert idx.tolist() == [[4, 0, 1], [0, 1, 4], [4, 2, 3], [2, 3, 4]]

    def test_bad_kernel_shape(self):
        bank = FilterBank({3: Tensor(np.ones((2, 3, 5)))}, {3: Tensor(np.zeros(2))})
        with pytest.raises(ad.ShapeError, match="convolve"):
            convolve(Tensor(np.zeros((4, 4))), bank)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_nested_loops(self, seed):
        rng = np.random.default_rng(seed)
        m, k = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        bank, W, b = bank_from(rng, k, widths=(1, 2, 3), count=2)
        X = rng.normal(size=(m, k))
        np.testing.assert_allclose(convolve(Tensor(X), bank).data, oracles.conv(X, W, b), rtol=0, atol=1e-12)

    def test_batched_equals_separate(self):
        rng = np.random.default_rng(1)
        bank, W, b = bank_from(rng, 3, widths=(2, 5))
        xs = [rng.normal(size=(m, 3)) for m in (4, 1, 7)]
        together = convolve(Tensor(np.concatenate(xs)), bank, [4, 1, 7]).data
        np.testing.assert_allclose(together, np.concatenate([oracles.conv(x, W, b) for x in xs]),
                                   rtol=0, atol=1e-12)


class TestPool:
    def test_hand(self):
        maps = Tensor(np.array([[1.0], [5.0], [2.0]]))
        assert piecewise_max_pool(maps, [0, 1, 2], 1).data.tolist() == [[1.0, 5.0, 2.0]]

    def test_monotone_takes_right_ends(self):
        maps = Tensor(np.arange(7.0)[:, None])
        seg = segment_by_boundaries(7, 1, 4)
        assert piecewise_max_pool(maps, seg.piece_ids(), 1).data.tolist() == [[1.0, 4.0, 6.0]]

    def test_empty_piece_is_zero(self):
        maps = Tensor(np.array([[-3.0], [-1.0]]))
        assert piecewise_max_pool(maps, [0, 1], 1).data.tolist() == [[-3.0, -1.0, 0.0]]

    def test_filter_major_order(self):
        maps = Tensor(np.array([[1.0, 10.0], [2.0, 20.0], [3.0, 30.0]]))
        assert piecewise_max_pool(maps, [0, 1, 2], 1).data.tolist() == [[1, 2, 3, 10, 20, 30]]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_matches_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 12))
        a, b = sorted(rng.choice(m, 2, replace=False))
        seg = segment_by_boundaries(m, int(a), int(b))
        maps = rng.normal(size=(m, 3))
        got = piecewise_max_pool(Tensor(maps), seg.piece_ids(), 1).data[0]
        assert np.array_equal(got, oracles.piece_max(maps, seg.pieces))

    def test_tie_gradient_to_first(self):
        maps = Tensor(np.array([[2.0], [2.0], [0.0]]), requires_grad=True)
        with ad.Tape() as tape:
            y = ad.sum_all(piecewise_max_pool(maps, [0, 0, 1], 1))
        assert ad.backward(tape, y)[maps].ravel().tolist() == [1.0, 0.0, 1.0]


class TestEncode:
    def test_zero_input(self):
        bank = FilterBank({3: Tensor(np.ones((2, 3, 4)))}, {3: Tensor(np.zeros(2))})
        p = encode_sentence(Tensor(np.zeros((5, 4))), bank, [0, 0, 1, 1, 2])
        assert p.shape == (6,) and not p.data.any()

    def test_eval_mode_ignores_dropout(self):
        rng = np.random.default_rng(2)
        bank, _, _ = bank_from(rng, 4)
        X, seg = Tensor(rng.normal(size=(6, 4))), [0, 0, 1, 1, 1, 2]
        a = encode_sentence(X, bank, seg, training=False, rng=np.random.default_rng(1)).data
        b = encode_sentence(X, bank, seg, training=False, rng=np.random.default_rng(9)).data
        c = encode_sentence(X, bank, seg, keep=1.0, training=True).data
        assert np.array_equal(a, b) and np.array_equal(a, c)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_range_and_dimension(self, seed):
        rng = np.random.default_rng(seed)
        m = int(rng.integers(2, 10))
        bank, _, _ = bank_from(rng, 3, widths=(2, 3), count=3)
        seg = segment_by_boundaries(m, 0, m - 1).piece_ids()
        p = encode_sentence(Tensor(rng.normal(size=(m, 3))), bank, seg).data
        assert p.shape == (3 * 6,)
        assert (np.abs(p) < 1).all()

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_width_one_ignores_order_within_piece(self, seed):
        rng = np.random.default_rng(seed)
        bank, _, _ = bank_from(rng, 3, widths=(1,), count=4)
        X = rng.normal(size=(7, 3))
        seg = segment_by_boundaries(7, 1, 5)
        perm = np.r_[0, 1, rng.permutation(np.arange(2, 6)), 6]
        a = encode_sentence(Tensor(X), bank, seg.piece_ids()).data
        b = encode_sentence(Tensor(X[perm]), bank, seg.piece_ids()).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-15)

    def test_gradients(self):
        rng = np.random.default_rng(4)
        store = ParamStore({"X": rng.normal(size=(6, 3)), "W": rng.normal(size=(2, 3, 3)), "b": rng.normal(size=2)})
        seg = [0, 0, 1, 1, 2, 2]
        w = rng.normal(size=6)

        def closure():
            bank = FilterBank({3: store["W"]}, {3: store["b"]})
            return ad.dot(encode_sentence(store["X"], bank, seg), Tensor(w))

        assert ad.grad_check(closure, store, tol=1e-4).passed

    def test_mask_multiplies(self):
        rng = np.random.default_rng(5)
        bank, _, _ = bank_from(rng, 3)
        X = Tensor(rng.normal(size=(4, 3)))
        mask = dropout_mask(0, 0, 0, 1, 6, 0.5)
        plain = encode(X, bank, [0, 1, 1, 2], [4]).data
        np.testing.assert_array_equal(encode(X, bank, [0, 1, 1, 2], [4], mask).data, plain * mask)


class TestDropoutMask:
    def test_values(self):
        m = dropout_mask(3, 1, 7, 4, 50, 0.5)
        assert set(np.unique(m)) <= {0.0, 2.0}

    def test_keyed_by_seed_epoch_bag(self):
        base = dropout_mask(3, 1, 7, 2, 40, 0.5)
        assert np.array_equal(base, dropout_mask(3, 1, 7, 2, 40, 0.5))
        for other in ((4, 1, 7), (3, 2, 7), (3, 1, 8)):
            assert not np.array_equal(base, dropout_mask(*other, 2, 40, 0.5))

    def test_keep_one(self):
        assert (dropout_mask(0, 0, 0, 3, 5, 1.0) == 1.0).all()
