import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from omnitrack.encoder import VideoModality
from omnitrack.numerics import DTYPE, ShapeError
from omnitrack.rama import (AdapterBlock, ImportanceState, RankBudget, allocate, allocate_shared, allocate_specific,
                         allocation_schedule, amtb_forward, importance_score, prune_block, rank_report,
                         sensitivity, shared_importance, specific_importance, update_importance)

D = DTYPE
V = VideoModality


def block(d=4, r=3, seed=0, W=None):
    g = torch.Generator().manual_seed(seed)
    W = torch.randn(d, d, generator=g, dtype=D) if W is None else W
    blk = AdapterBlock(d, d, r, W=W, gen=g)
    with torch.no_grad():
        blk.lam.copy_(torch.randn(4, r, generator=g, dtype=D))
    return blk


class TestForward:
    def test_zero_lambda(self):
        blk = block()
        with torch.no_grad():
            blk.lam.zero_()
        E = torch.randn(5, 4, dtype=D)
        assert torch.equal(amtb_forward(E, torch.randn(5, 4, dtype=D), blk, V.DEPTH), E @ blk.W)

    def test_relu_blocks_negative(self):
        blk = AdapterBlock(3, 3, 3, W=torch.randn(3, 3, dtype=D))
        with torch.no_grad():
            blk.P.copy_(torch.eye(3, dtype=D))
            blk.Q.copy_(torch.rand(3, 3, dtype=D) + 0.1)
            blk.lam.copy_(torch.rand(4, 3, dtype=D) + 0.1)
        E_R = torch.randn(5, 3, dtype=D)
        E_a = -torch.rand(5, 3, dtype=D) - 0.1
        # positive factors and negative inputs: every aux pre-activation is negative
        assert torch.equal(amtb_forward(E_R, E_a, blk, V.THERMAL), amtb_forward(E_R, None, blk))
        pre = ((-E_a @ blk.P) * blk.lam[V.DEPTH.index]) @ blk.Q
        diff = amtb_forward(E_R, -E_a, blk, V.DEPTH) - amtb_forward(E_R, None, blk)
        assert torch.allclose(diff, pre, atol=1e-14)

    def test_hand_2x2(self):
        blk = AdapterBlock(2, 2, 2, W=torch.tensor([[1.0, 2.0], [0.0, 1.0]], dtype=D))
        with torch.no_grad():
            blk.P.copy_(torch.eye(2, dtype=D))
            blk.Q.copy_(torch.tensor([[0.0, 1.0], [1.0, 0.0]], dtype=D))
            blk.lam.copy_(torch.tensor([[1.0, 2.0], [3.0, -1.0], [0, 0], [0, 0]], dtype=D))
        E_R = torch.tensor([[1.0, 1.0]], dtype=D)
        E_a = torch.tensor([[1.0, 2.0]], dtype=D)
        # E_R W = [1, 3]; E_R P diag(1,2) Q = [1, 2] Q = [2, 1]; E_a P diag(3,-1) Q = [3, -2] Q = [-2, 3] -> relu [0, 3]
        out = amtb_forward(E_R, E_a, blk, V.DEPTH)
        assert out.tolist() == [[3.0, 7.0]]

    def test_errors(self):
        blk = block()
        with pytest.raises(ValueError):
            amtb_forward(torch.randn(2, 4, dtype=D), torch.randn(2, 4, dtype=D), blk, V.RGB)
        with pytest.raises(ShapeError):
            amtb_forward(torch.randn(2, 5, dtype=D), None, blk)

    def test_modality_symmetry(self):
        blk = block()
        with torch.no_grad():
            blk.lam[1:] = blk.lam[1]
        E_R, E_a = torch.randn(3, 4, dtype=D), torch.randn(3, 4, dtype=D)
        outs = [amtb_forward(E_R, E_a, blk, m) for m in (V.DEPTH, V.THERMAL, V.EVENT)]
        assert torch.equal(outs[0], outs[1]) and torch.equal(outs[1], outs[2])

    def test_factors_orthonormal_at_init(self):
        blk = AdapterBlock(16, 16, 8)
        assert torch.allclose(blk.P.T @ blk.P, torch.eye(8, dtype=D), atol=1e-12)
        assert torch.allclose(blk.Q @ blk.Q.T, torch.eye(8, dtype=D), atol=1e-12)
        # RGB row starts at zero (stage-1 output preserved), aux rows strictly positive
        assert blk.lam[V.RGB.index].abs().max() == 0
        assert (blk.lam[[V.DEPTH.index, V.THERMAL.index, V.EVENT.index]] > 0).all()

    def test_rgb_only_output_unchanged_at_init(self):
        blk = AdapterBlock(4, 4, 2, W=torch.randn(4, 4, dtype=D))
        E_R = torch.randn(3, 4, dtype=D)
        assert torch.equal(amtb_forward(E_R, None, blk), E_R @ blk.W)


class TestImportance:
    def test_sensitivity(self):
        assert sensitivity(0.0, 5.0) == 0.0
        assert sensitivity(2.0, -3.0) == 6.0
        assert sensitivity(-2.0, 3.0) == sensitivity(2.0, 3.0) == sensitivity(2.0, -3.0)

    def test_ema(self):
        s = update_importance(ImportanceState(0.85, 0.85), {"w": torch.tensor([1.0], dtype=D)})
        assert float(s.ibar["w"][0]) == pytest.approx(0.15, abs=1e-15)
        st0 = ImportanceState(0.0, 0.85)
        assert float(update_importance(st0, {"w": torch.tensor([0.7], dtype=D)}).ibar["w"][0]) == 0.7

    def test_constant_converges(self):
        s = ImportanceState()
        for _ in range(300):
            s = update_importance(s, {"w": torch.tensor([2.0], dtype=D)})
        assert float(s.ibar["w"][0]) == pytest.approx(2.0, abs=1e-12)
        assert float(s.ubar["w"][0]) < 1e-12

    def test_score(self):
        s = ImportanceState(ibar={"w": torch.tensor([0.2, 0.3], dtype=D)}, ubar={"w": torch.tensor([0.5, 0.0], dtype=D)})
        assert torch.allclose(importance_score(s)["w"], torch.tensor([0.1, 0.0], dtype=D))


def scores_for(blocks, lam=None, p=None, q=None, seed=0):
    """Importance scores with chosen per-tuple parts (P column / Q row means constant per tuple)."""
    rng = np.random.default_rng(seed)
    out = {}
    for k, blk in enumerate(blocks):
        d_in, r = blk.P.shape
        d_out = blk.Q.shape[1]
        lam_k = torch.tensor(rng.random((4, r)) if lam is None else lam[k], dtype=D)
        p_k = torch.tensor(rng.random(r) if p is None else p[k], dtype=D)
        q_k = torch.tensor(rng.random(r) if q is None else q[k], dtype=D)
        out[f"{k}.lam"] = lam_k
        out[f"{k}.P"] = p_k.expand(d_in, r).clone()
        out[f"{k}.Q"] = q_k.unsqueeze(-1).expand(r, d_out).clone()
    return out


class TestAllocation:
    def test_shared_sum_example(self):
        blk = block(r=1)
        sc = scores_for([blk], lam=[[[0.1], [0.2], [0.3], [0.4]]], p=[[0.5]], q=[[0.25]])
        assert float(shared_importance([blk], sc)[0, 0]) == pytest.approx(1.75, abs=1e-15)

    def test_specific_sum_example(self):
        blk = block(r=1)
        lam = [[0.1], [0.1], [0.1], [0.1]]
        lam[V.DEPTH.index] = [0.3]
        sc = scores_for([blk], lam=[lam], p=[[0.5]], q=[[0.25]])
        spec = specific_importance([blk], sc, torch.ones(1, 1, dtype=torch.bool))
        assert float(spec[0, 0, V.DEPTH.index]) == pytest.approx(1.05, abs=1e-15)

    def test_shared_sort(self):
        blk = block(r=3)
        keep = allocate_shared([blk], torch.tensor([[0.5, 0.2, 0.9]], dtype=D), 2)
        assert keep.tolist() == [[True, False, True]]
        assert (blk.lam[:, 1] == 0).all() and (blk.lam[:, [0, 2]] != 0).all()

    def test_shared_tie(self):
        blks = [block(r=2, seed=1), block(r=2, seed=2)]
        keep = allocate_shared(blks, torch.zeros(2, 2, dtype=D), 1)
        assert keep.tolist() == [[True, False], [False, False]]

    def test_shared_no_op(self):
        blk = block(r=3)
        before = blk.lam.detach().clone()
        allocate_shared([blk], torch.rand(1, 3, dtype=D), 5)
        assert torch.equal(blk.lam, before)

    def test_specific_count(self):
        blk = block(r=2)
        S = torch.rand(1, 2, 4, dtype=D)
        allocate_specific([blk], S, 3)
        assert int((blk.lam != 0).sum()) == 3
        blk2 = block(r=2)
        before = blk2.lam.detach().clone()
        allocate_specific([blk2], torch.rand(1, 2, 4, dtype=D), 8)
        assert torch.equal(blk2.lam, before)

    def test_specific_excludes_dropped(self):
        blk = block(r=2)
        sc = scores_for([blk])
        spec = specific_importance([blk], sc, torch.tensor([[True, False]]))
        assert torch.isinf(spec[0, 1]).all() and torch.isfinite(spec[0, 0]).all()

    def test_ranking_by_lambda_when_vectors_equal(self):
        blk = block(r=1)
        sc = scores_for([blk], lam=[[[0.4], [0.1], [0.3], [0.2]]], p=[[0.5]], q=[[0.5]])
        keep = allocate_specific([blk], specific_importance([blk], sc), 2)
        assert keep[0, 0].tolist() == [True, False, True, False]

    def test_asymmetry_allowed(self):
        blks = [block(r=2, seed=3), block(r=2, seed=4)]
        lam = [[[1.0, 1.0], [0.0, 0.0], [0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 1.0], [0.0, 0.0], [0.0, 0.0]]]
        sc = scores_for(blks, lam=lam, p=[[0, 0], [0, 0]], q=[[0, 0], [0, 0]])
        allocate_specific(blks, specific_importance(blks, sc), 4)
        rep = rank_report(blks)
        assert rep["per_modality"]["rgb"] == [2, 0] and rep["per_modality"]["depth"] == [0, 2]

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 10_000), st.integers(1, 6), st.integers(1, 4))
    def test_invariants(self, seed, n_blocks, r):
        blks = [block(r=r, seed=seed + k) for k in range(n_blocks)]
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, n_blocks * r + 1))
        m = int(rng.integers(1, 4 * n + 1))
        state = ImportanceState()
        for _ in range(3):
            state = update_importance(state, {k: torch.tensor(rng.random(v.shape)) for k, v in
                                              scores_for(blks, seed=int(rng.integers(1 << 30))).items()})
        keep, spec = allocate(blks, state, _Budget(n, m))
        lam = torch.stack([b.lam.detach() for b in blks])
        assert int(keep.sum()) == n
        assert int((lam != 0).sum()) == min(m, 4 * n)
        assert bool(((lam != 0).any(1) <= keep).all())


class _Budget:
    def __init__(self, n, m):
        self.n, self.m = n, m


class TestPrune:
    def test_equivalence(self):
        rng = np.random.default_rng(0)
        for seed in range(50):
            blk = block(d=6, r=5, seed=seed)
            with torch.no_grad():
                blk.lam.mul_(torch.tensor(rng.random((4, 5)) > 0.5, dtype=D))
            a = V(["depth", "thermal", "event"][seed % 3])
            E_R, E_a = torch.randn(4, 6, dtype=D), torch.randn(4, 6, dtype=D)
            small = prune_block(blk, a)
            assert (amtb_forward(E_R, E_a, blk, a) - amtb_forward(E_R, E_a, small, a)).abs().max() <= 1e-12

    def test_all_nonzero_and_all_zero(self):
        blk = block(r=3)
        assert prune_block(blk, V.DEPTH).P.shape == blk.P.shape
        with torch.no_grad():
            blk.lam.zero_()
        empty = prune_block(blk, V.DEPTH)
        E = torch.randn(2, 4, dtype=D)
        assert empty.P.shape[1] == 0
        assert torch.allclose(amtb_forward(E, torch.randn(2, 4, dtype=D), empty, V.DEPTH), E @ blk.W, atol=0)


class TestBudgetAndSchedule:
    def test_budget(self):
        b = RankBudget(4, 8, 8)
        assert (b.n, b.m) == (32, 64)
        b.check(8)
        with pytest.raises(ValueError):
            RankBudget(9, 8, 8).check(8)
        with pytest.raises(ValueError):
            RankBudget(1, 5, 8).check(8)

    def test_schedule(self):
        assert allocation_schedule(50, 100, 50) == "none"
        assert allocation_schedule(200, 100, 50) == "allocate"
        assert allocation_schedule(201, 100, 50) == "none"

    def test_idempotent(self):
        blks = [block(r=3, seed=s) for s in range(3)]
        state = update_importance(ImportanceState(), {k: v for k, v in scores_for(blks).items()})
        state = update_importance(state, {k: v * 0.5 for k, v in scores_for(blks, seed=1).items()})
        allocate(blks, state, _Budget(5, 9))
        once = [b.lam.detach().clone() for b in blks]
        allocate(blks, state, _Budget(5, 9))
        assert all(torch.equal(a, b.lam) for a, b in zip(once, blks))
