import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rereadnet import tensor as T
from rereadnet.drr import DynamicReread, drr_read
from rereadnet.encoder import StackOutput
from rereadnet.ladra import (LayerFusion, LocalEncoding, MultiLayerEncoding, PhraseConv,
                             SequentialAttention, coverage_scale, dsa_fuse_step, dsa_read,
                             dsa_select, local_self_attn_pool, pcnn_forward, weighted_layer_sum)
from rereadnet.nn import AttnPool
from rereadnet.tensor import Tensor


def encoding(layers, mask=None):
    b, _, n, d = layers.shape
    mask = np.ones((b, n), dtype=bool) if mask is None else mask
    return MultiLayerEncoding(Tensor(layers), Tensor(np.zeros((b, d))), mask)


class TestLayerSum:
    def test_single_layer(self, rng):
        x = rng.normal(size=(1, 1, 4, 3))
        fusion = LayerFusion(1)
        fusion.logits.data[:] = 7.0
        np.testing.assert_array_equal(weighted_layer_sum(encoding(x), fusion).data, x[:, 0])

    def test_identical_layers(self, rng):
        row = rng.normal(size=(1, 1, 4, 3))
        x = np.repeat(row, 3, axis=1)
        np.testing.assert_allclose(weighted_layer_sum(encoding(x), LayerFusion(3)).data, row[:, 0],
                                   rtol=1e-14)

    def test_dominant_weight(self, rng):
        x = rng.normal(size=(1, 3, 4, 3))
        fusion = LayerFusion(3)
        fusion.logits.data[:] = [0.0, 9.0, 0.0]
        w = np.exp(fusion.logits.data) / np.exp(fusion.logits.data).sum()
        assert w[1] >= 0.999
        out = weighted_layer_sum(encoding(x), fusion).data
        assert np.abs(out - x[:, 1]).max() <= 1e-3 * np.abs(x).max()


class TestPcnn:
    def test_shapes(self, rng):
        convs = [PhraseConv(2, 6, 500, rng), PhraseConv(3, 6, 500, rng)]
        outs = pcnn_forward(Tensor(rng.normal(size=(2, 7, 6))), np.ones((2, 7), bool), convs)
        assert [o.shape for o in outs] == [(2, 7, 6), (2, 7, 6)]

    def test_constant_input_constant_interior(self, rng):
        conv = PhraseConv(3, 4, 5, rng)
        x = Tensor(np.tile(rng.normal(size=4), (1, 9, 1)))
        out = pcnn_forward(x, np.ones((1, 9), bool), [conv])[0].data[0]
        np.testing.assert_allclose(out[2:-2], np.tile(out[4], (5, 1)), rtol=1e-12)

    def test_pad_rows_zero(self, rng):
        conv = PhraseConv(2, 4, 5, rng)
        mask = np.array([[1, 1, 1, 0, 0]], dtype=bool)
        out = pcnn_forward(Tensor(rng.normal(size=(1, 5, 4))), mask, [conv])[0].data
        assert not out[0, 3:].any()

    def test_gradient_four_tokens(self, rng):
        from rereadnet import gradcheck
        assert gradcheck.REGISTRY["pcnn"](rng) < 1e-4


class TestLocalPool:
    def test_identical_rows(self, rng):
        row = rng.normal(size=4)
        g = Tensor(np.tile(row, (1, 5, 1)))
        pooled, _ = local_self_attn_pool([g, g], np.ones((1, 5), bool), Tensor(np.zeros((1, 4))),
                                         [AttnPool(4, 3, rng)])
        np.testing.assert_allclose(pooled[1].data[0], row, rtol=1e-14)

    def test_no_phrase_granularity(self, rng):
        cls = Tensor(rng.normal(size=(1, 4)))
        _, h_ab = local_self_attn_pool([Tensor(rng.normal(size=(1, 3, 4)))], np.ones((1, 3), bool),
                                       cls, [])
        np.testing.assert_array_equal(h_ab.data, cls.data)

    def test_mean_of_constituents(self, rng):
        grans = [Tensor(rng.normal(size=(2, 3, 4))) for _ in range(3)]
        cls = Tensor(rng.normal(size=(2, 4)))
        pooled, h_ab = local_self_attn_pool(grans, np.ones((2, 3), bool), cls,
                                            [AttnPool(4, 3, rng), AttnPool(4, 3, rng)])
        assert len(pooled) == 3
        np.testing.assert_allclose(h_ab.data, np.mean([p.data for p in pooled], axis=0),
                                   rtol=1e-14)


def _select_args(rng, n=6, d=4, dg=3):
    dsa = SequentialAttention(d, dg, 3, 1, rng)
    states = Tensor(rng.normal(size=(1, n, d)))
    mask = np.ones((1, n), dtype=bool)
    return dsa, states, mask, Tensor(rng.normal(size=(1, dg))), Tensor(rng.normal(size=(1, d)))


class TestDsaSelect:
    def test_unit_coverage_is_identity(self, rng):
        dsa, states, mask, h, hab = _select_args(rng)
        unit = dsa.units[0]
        phi = coverage_scale(states, mask, unit, 5)
        with_cov = dsa_select(states, mask, h, hab, [], Tensor(np.ones((1, 6))), unit, 100.0, phi)
        without = dsa_select(states, mask, h, hab, [], None, unit, 100.0)
        np.testing.assert_array_equal(with_cov[1].data, without[1].data)

    def test_coverage_drop_one_over_t(self, rng):
        dsa, states, mask, h, hab = _select_args(rng)
        unit = dsa.units[0]
        phi = Tensor(np.array([[5.0]]))
        _, w, cov = dsa_select(states, mask, h, hab, [], Tensor(np.ones((1, 6))), unit, 100.0,
                               phi)
        j = int(np.argmax(w.data))
        if w.data[0, j] > 0.999:
            assert cov.data[0, j] == pytest.approx(1 - 1 / 5, abs=1e-3)
        np.testing.assert_allclose(cov.data, np.clip(1 - w.data / 5, 0, 1), rtol=1e-15)

    def test_rejects_out_of_range_coverage(self, rng):
        dsa, states, mask, h, hab = _select_args(rng)
        with pytest.raises(ValueError):
            dsa_select(states, mask, h, hab, [], Tensor(np.full((1, 6), 1.5)), dsa.units[0],
                       phi=Tensor(np.ones((1, 1))))

    def test_phi_positive_scalar(self, rng):
        dsa, states, mask, _, _ = _select_args(rng)
        phi = coverage_scale(states, mask, dsa.units[0], 5).data
        assert phi.shape == (1, 1) and 0 < phi[0, 0] < 5

    def test_priors_shift_scores(self, rng):
        dsa, states, mask, h, hab = _select_args(rng)
        unit = dsa.units[0]
        base = dsa_select(states, mask, h, hab, [], None, unit, 1.0)[1].data
        prior = Tensor(rng.normal(size=(1, 4)))
        moved = dsa_select(states, mask, h, hab, [prior], None, unit, 1.0)[1].data
        assert not np.allclose(base, moved)


class TestFuse:
    def test_identical_candidates(self, rng):
        dsa = SequentialAttention(4, 3, 3, 3, rng)
        v = rng.normal(size=(1, 4))
        out = dsa_fuse_step([Tensor(v)] * 3, dsa).data
        np.testing.assert_allclose(out, v, rtol=1e-14)

    def test_single_is_identity(self, rng):
        dsa = SequentialAttention(4, 3, 3, 1, rng)
        v = Tensor(rng.normal(size=(1, 4)))
        assert dsa_fuse_step([v], dsa) is v

    def test_hull(self, rng):
        dsa = SequentialAttention(4, 3, 3, 3, rng)
        cands = [rng.normal(size=(1, 4)) for _ in range(3)]
        out = dsa_fuse_step([Tensor(c) for c in cands], dsa).data
        stack = np.stack(cands)
        assert np.all(out >= stack.min(axis=0) - 1e-12) and np.all(out <= stack.max(axis=0) + 1e-12)


def _local(rng, n=10, d=4, n_grans=3):
    grans = [Tensor(rng.normal(size=(1, n, d))) for _ in range(n_grans)]
    hab = Tensor(rng.normal(size=(1, d)))
    return LocalEncoding(grans, np.ones((1, n), dtype=bool), [hab], hab)


class TestDsaRead:
    def test_default_length(self, rng):
        local = _local(rng)
        hiddens, state = dsa_read(local, SequentialAttention(4, 3, 3, 3, rng))
        assert len(hiddens) == 6 and len(state.trace()) == 5
        assert all(len(step) == 3 for step in state.trace())

    def test_minimal_unroll(self, rng):
        local = _local(rng, n_grans=1)
        dsa = SequentialAttention(4, 3, 3, 1, rng)
        hiddens, state = dsa_read(local, dsa, steps=1)
        h0 = dsa.initial_state(local.h_ab)
        expect = dsa.cell(state.picks[0][0], h0)
        np.testing.assert_array_equal(hiddens[1].data, expect.data)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 8))
    def test_coverage_monotone_bounded(self, seed, steps):
        r = np.random.default_rng(seed)
        local = _local(r, n=int(r.integers(1, 9)), n_grans=2)
        _, state = dsa_read(local, SequentialAttention(4, 3, 3, 2, r), steps=steps)
        prev = [np.ones_like(c) for c in state.coverage[0]]
        for step in state.coverage:
            for p, c in zip(prev, step):
                assert np.all((c >= 0) & (c <= 1)) and np.all(c <= p)
            prev = step

    def test_matches_drr_on_matched_parameters(self, rng):
        # one granularity and no coverage: the same selection/GRU recursion as drr_read
        d, dg, da, n = 5, 3, 4, 6
        states = Tensor(rng.normal(size=(1, n, d)))
        hab = Tensor(rng.normal(size=(1, d)))
        dsa = SequentialAttention(d, dg, da, 1, rng)
        drr = DynamicReread(d, dg, da, rng)
        unit = dsa.units[0]
        drr.attn.w_d.data[...] = unit.w_rd.data
        drr.attn.u_d.data[...] = unit.u_rd.data
        drr.attn.m_d.data[...] = unit.m_rd.data
        drr.attn.omega_d.data[...] = unit.omega_rd.data
        drr.cell.load_state_dict(dsa.cell.state_dict())
        drr.init.load_state_dict(dsa.init.state_dict())
        local = LocalEncoding([states], np.ones((1, n), bool), [hab], hab)
        hiddens, dstate = dsa_read(local, dsa, steps=4, beta=100.0, use_coverage=False)
        v, rstate = drr_read(StackOutput(states, local.mask), hab, hab, drr, steps=4, beta=100.0)
        np.testing.assert_array_equal(hiddens[-1].data, v.data)
        for a, b in zip(dstate.weights, rstate.weights):
            np.testing.assert_array_equal(a[0], b)

    def test_gradient_three_tokens(self, rng):
        from rereadnet import gradcheck
        assert gradcheck.REGISTRY["dsa_read"](rng) < 1e-4

    def test_needs_matching_units(self, rng):
        with pytest.raises(ValueError):
            dsa_read(_local(rng, n_grans=2), SequentialAttention(4, 3, 3, 3, rng))


def _near_uniform(seed):
    r = np.random.default_rng(seed)
    base = r.normal(size=8)
    grans = [Tensor((base + 0.01 * r.normal(size=(10, 8)))[None])]
    hab = Tensor(r.normal(size=(1, 8)))
    return LocalEncoding(grans, np.ones((1, 10), bool), [hab], hab), SequentialAttention(8, 6, 6, 1, r)


def _repeats(state):
    idx = [int(np.argmax(step[0][0])) for step in state.weights]
    return len(idx) - len(set(idx))


def test_coverage_diversifies_positive_scores():
    local, dsa = _near_uniform(0)
    unit = dsa.units[0]
    # orient the scorer so the first-step scores are positive
    cond = dsa.initial_state(local.h_ab).data @ unit.u_rd.data.T + local.h_ab.data @ unit.m_rd.data.T
    first = np.tanh(local.granularities[0].data @ unit.w_rd.data.T + cond[:, None]) @ unit.omega_rd.data
    if first.mean() < 0:
        unit.omega_rd.data *= -1
    _, on = dsa_read(local, dsa, 5, 100.0, use_coverage=True)
    _, off = dsa_read(local, dsa, 5, 100.0, use_coverage=False)
    assert _repeats(on) < _repeats(off)


def test_coverage_scales_negative_scores_toward_zero(rng):
    # coverage multiplies the scores, so a spent token with a negative score gains weight
    dsa, states, mask, h, hab = _select_args(rng)
    unit = dsa.units[0]
    unit.omega_rd.data = -np.abs(unit.omega_rd.data)
    states = Tensor(np.abs(states.data))
    unit.w_rd.data = np.abs(unit.w_rd.data)
    cov = np.ones((1, 6))
    cov[0, 2] = 0.5
    phi = Tensor(np.ones((1, 1)))
    _, w_full, _ = dsa_select(states, mask, h, hab, [], Tensor(np.ones((1, 6))), unit, 1.0, phi)
    _, w_spent, _ = dsa_select(states, mask, h, hab, [], Tensor(cov), unit, 1.0, phi)
    raw = dsa_select(states, mask, h, hab, [], None, unit, 1.0)[1].data
    np.testing.assert_array_equal(w_full.data, raw)
    assert w_spent.data[0, 2] > w_full.data[0, 2]
