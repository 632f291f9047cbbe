"""Graph-construction pipeline: units, oracles, stochastic contracts, gradients."""

import numpy as np
import pytest

from tglrn import diffcore as dc
from tglrn import dyngraph as dg
from tglrn import roadnet
from tglrn.diffcore import Linear, Parameter, Tensor
from tglrn.gradcheck import finite_diff_check


def make_group(edges, n, levels):
    net = roadnet.build_asp(edges, n)
    return roadnet.structure_group(roadnet.hop_distances(net), levels)


def chain_group(n, levels):
    return make_group([(i, i + 1) for i in range(n - 1)], n, levels)


class TestGruCell:
    def _cell(self, seed=0, d=4, proj=3):
        return dg.GruCell(embed_dim=d, in_features=1, proj_dim=proj, rng=np.random.default_rng(seed))

    def test_update_gate_saturation_returns_embedding(self):
        cell = self._cell()
        cell.f_z.b.data[:] = 500.0  # z -> 1 exactly in float64
        e = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
        x = Tensor(np.random.default_rng(2).standard_normal((3, 1)))
        out = cell.step(e, x)
        np.testing.assert_array_equal(out.data, e.data)

    def test_reset_saturation_depends_only_on_input(self):
        cell = self._cell()
        cell.f_z.b.data[:] = -500.0  # z -> 0
        cell.f_r.b.data[:] = -500.0  # r -> 0
        rng = np.random.default_rng(3)
        x = Tensor(rng.standard_normal((3, 1)))
        out_a = cell.step(Tensor(rng.standard_normal((3, 4))), x)
        out_b = cell.step(Tensor(rng.standard_normal((3, 4))), x)
        np.testing.assert_array_equal(out_a.data, out_b.data)

    def test_gradients_match_finite_differences(self):
        rng = np.random.default_rng(4)
        cell = self._cell(seed=5)
        e = Parameter(rng.standard_normal((3, 4)), "e")
        x = Parameter(rng.standard_normal((3, 1)), "x")
        r = rng.standard_normal((3, 4))
        reports = finite_diff_check(
            lambda: (cell.step(e, x) * Tensor(r)).sum(), [("e", e), ("x", x)] + cell.params()
        )
        assert all(rep.passed for rep in reports), [rep.line() for rep in reports]


class TestEmbeddingChain:
    def _chain(self, n=3, d=4, seed=0):
        return dg.EmbeddingChain(n, d, in_features=1, proj_dim=2, rng=np.random.default_rng(seed))

    def test_single_step_window_returns_init_alone(self):
        chain = self._chain()
        window = Tensor(np.zeros((2, 1, 3, 1)))
        embs = chain.run(window)
        assert len(embs) == 1
        np.testing.assert_array_equal(embs[0].data, np.broadcast_to(chain.e_init.data, (2, 3, 4)))

    def test_saturated_update_freezes_chain(self):
        chain = self._chain()
        chain.cell.f_z.b.data[:] = 500.0
        window = Tensor(np.random.default_rng(0).standard_normal((1, 5, 3, 1)))
        for emb in chain.run(window):
            np.testing.assert_array_equal(emb.data[0], chain.e_init.data)

    def test_three_step_composition_oracle(self):
        chain = self._chain(seed=7)
        rng = np.random.default_rng(8)
        window = Tensor(rng.standard_normal((2, 3, 3, 1)))
        embs = chain.run(window)
        e2 = chain.e_init.broadcast_to((2, 3, 4))
        e1 = chain.cell.step(e2, window[:, 1])
        e0 = chain.cell.step(e1, window[:, 0])
        np.testing.assert_array_equal(embs[1].data, e1.data)
        np.testing.assert_array_equal(embs[0].data, e0.data)


class TestGate:
    def test_zero_projection_halves(self):
        lin = Linear(4, 4, np.random.default_rng(0))
        lin.w.data[:] = 0.0
        e = Tensor(np.random.default_rng(1).standard_normal((3, 4)))
        out = dg.gate(e, Tensor(np.zeros((3, 4))), lin)
        np.testing.assert_allclose(out.data, 0.5 * e.data, atol=1e-15)

    def test_open_and_closed_gate(self):
        lin = Linear(4, 4, np.random.default_rng(0))
        lin.w.data[:] = 0.0
        e = Tensor(np.random.default_rng(2).standard_normal((3, 4)))
        base = Tensor(np.zeros((3, 4)))
        lin.b.data[:] = 1e4  # sigmoid saturates to exactly 1.0
        np.testing.assert_array_equal(dg.gate(e, base, lin).data, e.data)
        lin.b.data[:] = -1e4  # exp underflow: sigmoid exactly 0.0
        np.testing.assert_array_equal(dg.gate(e, base, lin).data, np.zeros((3, 4)))


class TestEdgeLogits:
    def test_zero_embeddings_give_bias(self):
        w = Parameter(np.random.default_rng(0).standard_normal((8, 1)))
        b = Parameter(np.array([0.37]))
        out = dg.edge_logits(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), w, b)
        np.testing.assert_allclose(out.data, np.full((3, 3), 0.37), atol=1e-15)

    def test_matches_per_pair_concat_oracle(self):
        rng = np.random.default_rng(1)
        e_st, e_ed = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
        w, b = rng.standard_normal((8, 1)), rng.standard_normal(1)
        out = dg.edge_logits(Tensor(e_st), Tensor(e_ed), Parameter(w), Parameter(b))
        for i in range(3):
            for j in range(3):
                pair = np.tanh(np.concatenate([e_st[i], e_ed[j]]))
                np.testing.assert_allclose(out.data[i, j], pair @ w[:, 0] + b[0], atol=1e-12)

    def test_directionality_preserved(self):
        rng = np.random.default_rng(2)
        e_st, e_ed = Tensor(rng.standard_normal((3, 4))), Tensor(rng.standard_normal((3, 4)))
        w, b = Parameter(rng.standard_normal((8, 1))), Parameter(rng.standard_normal(1))
        out = dg.edge_logits(e_st, e_ed, w, b).data
        assert not np.allclose(out, out.T)


class TestNormalizeLogits:
    def test_constant_input_gives_half_weights(self):
        w = Tensor(np.full((4, 4), 2.5))
        out = dg.bernoulli_means(dg.normalize_logits(w))
        np.testing.assert_array_equal(out.data, np.full((4, 4), 0.5))

    def test_closed_form_three_values(self):
        w = Tensor(np.array([[1.0, 2.0, 3.0]]))
        out = dg.normalize_logits(w, alpha=1.0)
        expected = np.array([[-1.224744871391589, 0.0, 1.224744871391589]])
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    @pytest.mark.parametrize("alpha", [1.0, 2.0])
    def test_moment_invariant(self, alpha):
        rng = np.random.default_rng(3)
        w = Tensor(rng.standard_normal((2, 6, 6)) * 7.0 + 3.0)
        out = dg.normalize_logits(w, alpha=alpha).data
        for b in range(2):
            assert abs(out[b].mean()) < 1e-9
            assert abs(out[b].std() - alpha) < 1e-9

    def test_clamped_range(self):
        w = Tensor(np.array([[-1e6, 1e6], [0.0, 0.0]]))
        out = dg.bernoulli_means(dg.normalize_logits(w))
        assert out.data.min() >= dg.OMEGA_CLAMP
        assert out.data.max() <= 1.0 - dg.OMEGA_CLAMP


class TestGumbelRelax:
    def test_neutral_point(self):
        p = dg.gumbel_relax(Tensor(np.array(0.5)), 1.0, np.array(0.5))
        assert p.item() == 0.5

    def test_median_property(self):
        rng = np.random.default_rng(11)
        n = 100_000
        for w_bar in (0.3, 0.62):
            p = dg.gumbel_relax(Tensor(np.full(n, w_bar)), 1.0, rng.uniform(size=n))
            frac = float(np.mean(p.data > 0.5))
            sigma = np.sqrt(w_bar * (1 - w_bar) / n)
            assert abs(frac - w_bar) < 3 * sigma, (w_bar, frac)

    def test_low_temperature_concentrates(self):
        rng = np.random.default_rng(12)
        n = 50_000
        p = dg.gumbel_relax(Tensor(np.full(n, 0.4)), 0.01, rng.uniform(size=n))
        near_edges = np.mean((p.data < 0.01) | (p.data > 0.99))
        assert near_edges > 0.95


class TestEdgeSample:
    def test_keep_all(self):
        rng = np.random.default_rng(0)
        p = Tensor(rng.uniform(size=(5, 5)))
        out = dg.edge_sample(p, 1.0, rng.uniform(size=(5, 5)))
        np.testing.assert_array_equal(out.data, p.data)

    def test_drop_all(self):
        rng = np.random.default_rng(1)
        p = Tensor(rng.uniform(size=(5, 5)))
        out = dg.edge_sample(p, 0.0, rng.uniform(size=(5, 5)))
        np.testing.assert_array_equal(out.data, np.zeros((5, 5)))

    def test_keep_rate_forty_percent(self):
        rng = np.random.default_rng(2)
        n = 100_000
        p = Tensor(np.ones(n))
        out = dg.edge_sample(p, 0.4, rng.uniform(size=n))
        kept = float(np.mean(out.data != 0.0))
        assert abs(kept - 0.4) < 0.005


class TestHopSelector:
    def test_zero_weights_uniform(self):
        rng = np.random.default_rng(0)
        lin1, lin2 = Linear(4, 4, rng), Linear(4, 3, rng)
        lin2.w.data[:] = 0.0
        probs = dg.hop_probs(Tensor(rng.standard_normal((5, 4))), lin1, lin2)
        np.testing.assert_allclose(probs.data, np.full((5, 3), 1 / 3), atol=1e-15)

    def test_single_level(self):
        rng = np.random.default_rng(1)
        lin1, lin2 = Linear(4, 4, rng), Linear(4, 1, rng)
        probs = dg.hop_probs(Tensor(rng.standard_normal((5, 4))), lin1, lin2)
        np.testing.assert_array_equal(probs.data, np.ones((5, 1)))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        lin1, lin2 = Linear(6, 6, rng), Linear(6, 4, rng)
        probs = dg.hop_probs(Tensor(rng.standard_normal((7, 6)) * 3), lin1, lin2)
        np.testing.assert_allclose(probs.data.sum(axis=-1), np.ones(7), atol=1e-12)

    def test_eval_argmax(self):
        p = Tensor(np.array([[0.1, 0.9]]))
        h, mix = dg.select_hops(p, 1.0, "eval")
        assert h[0] == 1 and mix is None  # 0-based index of level 2

    def test_eval_tie_breaks_low(self):
        p = Tensor(np.full((1, 4), 0.25))
        h, _ = dg.select_hops(p, 1.0, "eval")
        assert h[0] == 0

    def test_train_selection_frequencies(self):
        rng = np.random.default_rng(3)
        n = 10_000
        p = Tensor(np.tile([0.3, 0.7], (n, 1)))
        h, mix = dg.select_hops(p, 1.0, "train", rng)
        freq = np.bincount(h, minlength=2) / n
        for target, got in zip((0.3, 0.7), freq):
            sigma = np.sqrt(target * (1 - target) / n)
            assert abs(got - target) < 3 * sigma, (target, got)
        # straight-through forward value is the exact one-hot
        np.testing.assert_array_equal(mix.data.sum(axis=-1), np.ones(n))
        assert set(np.unique(mix.data)) <= {0.0, 1.0}


class TestPrune:
    def test_saturated_group_keeps_reachable(self):
        group = chain_group(4, 4)
        a = np.random.default_rng(0).uniform(size=(4, 4))
        out = dg.prune(Tensor(a), np.full(4, 4), group)
        reach = group.masks[-1]
        np.testing.assert_array_equal(out.data, a * reach)

    def test_radius_one_keeps_consecutive_and_self(self):
        group = chain_group(5, 3)
        a = np.ones((5, 5))
        out = dg.prune(Tensor(a), np.ones(5, dtype=int), group)
        np.testing.assert_array_equal(out.data, group.masks[0])

    def test_mixed_radii_match_bfs_ball_oracle(self):
        n = 5
        group = chain_group(n, 3)
        hops = np.array([1, 2, 1, 3, 2])
        a = np.ones((n, n))
        out = dg.prune(Tensor(a), hops, group)
        for i in range(n):
            ball = np.zeros(n)
            for j in range(n):
                dist = j - i  # directed chain distance
                ball[j] = 1.0 if 0 <= dist <= hops[i] else 0.0
            np.testing.assert_array_equal(out.data[i], ball)

    def test_bad_radius_rejected(self):
        group = chain_group(4, 2)
        with pytest.raises(Exception):
            dg.prune(Tensor(np.ones((4, 4))), np.array([0, 1, 1, 1]), group)


def build_block(n=4, t_in=3, levels=2, gamma=0.5, seed=0, edges=None):
    edges = edges if edges is not None else [(i, i + 1) for i in range(n - 1)]
    group = make_group(edges, n, levels)
    return dg.GraphConstruction(
        num_nodes=n,
        t_in=t_in,
        in_features=1,
        embed_dim=4,
        hop_dim=4,
        proj_dim=5,
        group=group,
        gamma=gamma,
        alpha=1.0,
        tau=1.0,
        rng=np.random.default_rng(seed),
    )


class TestBuildGraphSequence:
    def test_trivial_composition(self):
        block = build_block(t_in=1, levels=1, gamma=1.0)
        window = Tensor(np.random.default_rng(0).standard_normal((1, 1, 4, 1)))
        seq = block.build(window, "train", rng=np.random.default_rng(1))
        assert seq.t_in == 1
        support = seq.adjacencies[0].data[0] != 0
        assert np.all(block.group.masks[0][support] == 1.0)
        assert np.all(seq.hop_choices == 1)

    def test_eval_deterministic(self):
        block = build_block()
        window = Tensor(np.random.default_rng(2).standard_normal((2, 3, 4, 1)))
        a = block.build(window, "eval")
        b = block.build(window, "eval")
        for x, y in zip(a.adjacencies, b.adjacencies):
            np.testing.assert_array_equal(x.data, y.data)
        np.testing.assert_array_equal(a.hop_choices, b.hop_choices)

    def test_train_reproducible_for_fixed_seed(self):
        block = build_block()
        window = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4, 1)))
        a = block.build(window, "train", rng=np.random.default_rng(42))
        b = block.build(window, "train", rng=np.random.default_rng(42))
        for x, y in zip(a.adjacencies, b.adjacencies):
            np.testing.assert_array_equal(x.data, y.data)

    def test_support_range_and_moment_invariants(self):
        block = build_block(n=5, t_in=4, levels=3, gamma=0.7, seed=9)
        window = Tensor(np.random.default_rng(4).standard_normal((3, 4, 5, 1)))
        seq, diag = block.build(window, "train", rng=np.random.default_rng(5), want_diag=True)
        stacked = block.group.stacked()
        for t, adj in enumerate(seq.adjacencies):
            a = adj.data
            assert a.min() >= 0.0 and a.max() <= 1.0
            sel = dg._rows_from_choices(stacked, seq.hop_choices[:, t, :] - 1)
            assert np.all(sel[a != 0] == 1.0)
            pre = diag.prenorm_logits[t]
            for b in range(pre.shape[0]):
                assert abs(pre[b].mean()) < 1e-9
                assert abs(pre[b].std() - 1.0) < 1e-9

    def test_eval_sampling_override_thins_edges(self):
        block = build_block(gamma=0.2)
        window = Tensor(np.random.default_rng(6).standard_normal((1, 3, 4, 1)))
        plain = block.build(window, "eval")
        thinned = block.build(window, "eval", rng=np.random.default_rng(7), sample_edges=True)
        nz_plain = sum(int(np.count_nonzero(a.data)) for a in plain.adjacencies)
        nz_thin = sum(int(np.count_nonzero(a.data)) for a in thinned.adjacencies)
        assert nz_thin < nz_plain


class TestGradientFlow:
    def test_init_embeddings_reach_adjacency(self):
        block = build_block(n=4, t_in=3, levels=2, gamma=0.6, seed=1)
        rng_data = np.random.default_rng(10)
        window = Tensor(rng_data.standard_normal((1, 3, 4, 1)))
        weights = [rng_data.standard_normal((1, 4, 4)) for _ in range(3)]

        def build_loss():
            noise = np.random.default_rng(123)
            seq = block.build(window, "train", rng=noise)
            total = None
            for adj, w in zip(seq.adjacencies, weights):
                term = (adj * Tensor(w)).sum()
                total = term if total is None else total + term
            return total

        params = [
            ("st.e_init", block.chain_st.e_init),
            ("ed.e_init", block.chain_ed.e_init),
        ]
        reports = finite_diff_check(build_loss, params)
        assert all(r.passed for r in reports), [r.line() for r in reports]

        for _, p in params:
            p.zero_grad()
        block.chain_h.e_init.zero_grad()
        build_loss().backward()
        assert np.any(block.chain_st.e_init.grad != 0.0)
        assert np.any(block.chain_ed.e_init.grad != 0.0)
        # straight-through path: analytic gradient reaches the hop chain too
        assert np.any(block.chain_h.e_init.grad != 0.0)
