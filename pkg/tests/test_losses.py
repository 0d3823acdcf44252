import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from omnitrack.losses import (Box, LossWeights, box_loss, box_patch_targets, center_loss, contrastive_from_scores,
                           focal_loss, gaussian_center_target, giou, iou, mmc_loss, orthogonality_penalty,
                           stage1_total, stage2_total, target_map_loss)
from omnitrack.numerics import DTYPE, DegenerateInputError, check_function

D = DTYPE


def t(x):
    return torch.tensor(x, dtype=D)


def mmc_oracle(T, E, box, tau, n_neg, patch):
    """Plain-numpy contrastive loss with explicit loops."""
    T, E = np.asarray(T), np.asarray(E)
    grid = int(round(math.sqrt(len(E))))
    cx, cy, w, h = box
    sims = np.array([T @ e / (np.linalg.norm(T) * np.linalg.norm(e)) for e in E]) / tau
    inside = []
    for idx in range(len(E)):
        r, c = divmod(idx, grid)
        px, py = (c + 0.5) * patch, (r + 0.5) * patch
        inside.append(cx - w / 2 <= px <= cx + w / 2 and cy - h / 2 <= py <= cy + h / 2)
    center = min(int(cy // patch), grid - 1) * grid + min(int(cx // patch), grid - 1)
    inside[center] = True
    out = sorted([(-sims[i], i) for i in range(len(E)) if not inside[i]])[:n_neg]
    negs = [sims[i] for _, i in out]
    logits = np.array([sims[center]] + negs)
    return -(sims[center] - np.log(np.exp(logits).sum()))


class TestMMC:
    def test_symmetric_pair(self):
        # positive and the single negative have equal similarity
        E = torch.zeros(4, 2, dtype=D)
        E[:, 0] = 1.0
        loss = mmc_loss(t([1.0, 0.0]), E, Box(2, 2, 1, 1), LossWeights(tau=1.0, n_neg=1), patch=4)
        assert float(loss) == pytest.approx(math.log(2), abs=1e-12)

    def test_uniform_scores(self):
        E = torch.ones(16, 3, dtype=D)
        loss = mmc_loss(t([1.0, 1.0, 1.0]), E, Box(2, 2, 1, 1), LossWeights(tau=0.07, n_neg=9), patch=4)
        assert float(loss) == pytest.approx(math.log(10), abs=1e-12)

    def test_hand_value(self):
        s_p, negs = 2.0, [0.0, 0.0]
        ref = -math.log(math.exp(s_p) / (math.exp(s_p) + len(negs)))
        assert ref == pytest.approx(0.2395, abs=1e-4)
        # tau = 0.5 turns cosines (1, 0, 0) into scores (2, 0, 0)
        E = torch.zeros(4, 2, dtype=D)
        E[0] = t([1.0, 0.0])
        E[1:] = t([0.0, 1.0])
        loss = mmc_loss(t([1.0, 0.0]), E, Box(2, 2, 1, 1), LossWeights(tau=0.5, n_neg=2), patch=4)
        assert float(loss) == pytest.approx(ref, abs=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 100_000), st.integers(1, 12), st.floats(0.05, 2.0))
    def test_against_oracle(self, seed, n_neg, tau):
        rng = np.random.default_rng(seed)
        grid, patch = 5, 4
        T, E = rng.normal(size=6), rng.normal(size=(grid * grid, 6))
        wh = rng.uniform(3, 10, 2)
        c = wh / 2 + rng.uniform(0, 1, 2) * (grid * patch - wh)
        box = [c[0], c[1], wh[0], wh[1]]
        got = mmc_loss(t(T), t(E), box, LossWeights(tau=tau, n_neg=n_neg), patch)
        assert float(got) == pytest.approx(mmc_oracle(T, E, box, tau, n_neg, patch), abs=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 100_000), st.floats(-100, 100))
    def test_shift_invariance(self, seed, shift):
        g = torch.Generator().manual_seed(seed)
        scores = torch.randn(25, generator=g, dtype=D) * 5
        inside, center = box_patch_targets(Box(9, 9, 6, 6), 4, 5)
        a = contrastive_from_scores(scores, inside, center, 9)
        b = contrastive_from_scores(scores + shift, inside, center, 9)
        assert abs(float(a - b)) <= 1e-10

    def test_patch_scale_invariance(self):
        g = torch.Generator().manual_seed(3)
        T, E = torch.randn(5, generator=g, dtype=D), torch.randn(16, 5, generator=g, dtype=D)
        a = mmc_loss(T, E, Box(6, 6, 4, 4), LossWeights(tau=0.3), 4)
        b = mmc_loss(T, E * 7.0, Box(6, 6, 4, 4), LossWeights(tau=0.3), 4)
        assert abs(float(a - b)) <= 1e-10

    def test_tie_goes_to_lowest_index(self):
        # equal scores everywhere: gradient must reach exactly the first out-box patches
        scores = torch.zeros(9, dtype=D, requires_grad=True)
        inside = torch.zeros(9, dtype=torch.bool)
        inside[4] = True
        contrastive_from_scores(scores, inside, torch.tensor(4), n_neg=2).backward()
        touched = (scores.grad.abs() > 0).nonzero().flatten().tolist()
        assert touched == [0, 1, 4]

    def test_no_outbox(self):
        with pytest.raises(DegenerateInputError):
            mmc_loss(t([1.0, 0.0]), torch.ones(4, 2, dtype=D), Box(4, 4, 8, 8), LossWeights(), 4)

    def test_gradients(self):
        for seed in range(5):
            g = torch.Generator().manual_seed(seed)
            T, E = torch.randn(6, generator=g, dtype=D), torch.randn(25, 6, generator=g, dtype=D)
            rep = check_function(lambda a, b: mmc_loss(a, b, Box(9, 9, 6, 6), LossWeights(tau=0.5), 4), [T, E])
            assert rep.passed, rep


class TestTargetAndCenter:
    def test_bce_examples(self):
        y = t([1.0, 0.0, 1.0, 0.0])
        assert float(target_map_loss(y, y)) == pytest.approx(-math.log(1 - 1e-7), abs=1e-12)
        assert float(target_map_loss(torch.full((4,), 0.5, dtype=D), y)) == pytest.approx(math.log(2), abs=1e-14)
        assert float(target_map_loss(t([0.25]), t([1.0]))) == pytest.approx(1.3863, abs=1e-4)

    def test_bce_range(self):
        with pytest.raises(ValueError):
            target_map_loss(t([1.5]), t([1.0]))

    def test_focal_examples(self):
        assert float(focal_loss(t([0.5]), t([1.0]))) == pytest.approx(0.1733, abs=1e-4)
        assert float(focal_loss(t([1 - 1e-7]), t([1.0]))) == pytest.approx(0.0, abs=1e-12)

    def test_center_loss_at_target(self):
        box = Box(13, 9, 8, 6)
        target = gaussian_center_target(box, 4, 8)
        assert float(target.max()) == 1.0
        assert float(target[2, 3]) == 1.0
        loss = center_loss(target.clamp(1e-7, 1 - 1e-7), box, 4)
        assert float(loss) < 1e-5

    def test_gaussian_sigma(self):
        box = Box(2, 2, 24, 12)   # 6 x 3 cells -> sigma (1, 0.5)
        g = gaussian_center_target(box, 4, 8)
        assert float(g[0, 1]) == pytest.approx(math.exp(-0.5), abs=1e-14)
        assert float(g[1, 0]) == pytest.approx(math.exp(-2.0), abs=1e-14)

    def test_box_patch_targets(self):
        inside, center = box_patch_targets(Box(8, 8, 8, 8), 4, 4)
        grid = inside.reshape(4, 4)
        assert grid[1:3, 1:3].all() and int(inside.sum()) == 4
        assert int(center) == 2 * 4 + 2
        # tiny box: centre patch still counts
        inside, center = box_patch_targets(Box(5, 5, 0.5, 0.5), 4, 4)
        assert inside.tolist().count(True) == 1 and bool(inside[center])


class TestGIoU:
    def test_identity(self):
        assert float(giou(Box(1, 1, 2, 3), Box(1, 1, 2, 3))) == pytest.approx(1.0, abs=1e-15)

    def test_disjoint(self):
        a, b = Box.from_xyxy(-1, -1, 1, 1), Box.from_xyxy(1, 1, 3, 3)
        assert float(giou(a, b)) == pytest.approx(-0.5, abs=1e-15)

    def test_overlap(self):
        a, b = Box.from_xyxy(0, 0, 2, 2), Box.from_xyxy(1, 1, 3, 3)
        assert float(giou(a, b)) == pytest.approx(1 / 7 - 2 / 9, abs=1e-15)

    def test_degenerate(self):
        with pytest.raises(DegenerateInputError):
            giou(Box(0, 0, 0, 0), Box(0, 0, 0, 0))

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.1, 10), min_size=8, max_size=8))
    def test_symmetry_and_range(self, v):
        a, b = Box(v[0], v[1], v[2], v[3]), Box(v[4], v[5], v[6], v[7])
        g = float(giou(a, b))
        assert g == pytest.approx(float(giou(b, a)), abs=1e-14)
        assert -1 < g <= 1
        assert 0 <= float(iou(a, b)) <= 1


class TestBoxLoss:
    def test_zero(self):
        assert float(box_loss(Box(5, 5, 3, 3), Box(5, 5, 3, 3))) == 0.0

    def test_shift(self):
        w = LossWeights()
        gt, pred = t([10.0, 10, 8, 8]), t([10.5, 10, 8, 8])
        l1_only = LossWeights(lambda_giou=0.0)
        assert float(box_loss(pred, gt, l1_only, 32.0)) == pytest.approx(w.lambda_1 * 0.5 / 32 / 4, abs=1e-15)

    def test_term_oracle(self):
        gt, pred = t([10.0, 10, 8, 8]), t([10.0, 10, 12, 4])
        # hand: L1 = (4 + 4) / 4 / 32; inter 8*4=32, union 64+48-32=80, hull 12*8=96
        l1 = 8 / 4 / 32
        g = 32 / 80 - (96 - 80) / 96
        assert float(box_loss(pred, gt, LossWeights(), 32.0)) == pytest.approx(5 * l1 + 2 * (1 - g), abs=1e-14)


class TestTotals:
    def test_stage1(self):
        w = LossWeights()
        assert stage1_total(0, 0, 0, 0, w) == 0
        assert stage1_total(1.0, 2.0, 3.0, 4.0, w) == pytest.approx(6.4, abs=1e-15)
        assert stage1_total(1.0, 2.0, 3.0, [1.0, 3.0], w) == pytest.approx(6.4, abs=1e-15)
        z = LossWeights(lambda_mmc=0.0)
        assert stage1_total(1.0, 2.0, 3.0, 100.0, z) == stage1_total(1.0, 2.0, 3.0, -5.0, z)

    def test_orthogonality(self):
        P = torch.linalg.qr(torch.randn(8, 3, dtype=D))[0]
        Q = torch.linalg.qr(torch.randn(8, 3, dtype=D))[0].T
        assert float(stage2_total(t(1.5), [(P, Q)])) == pytest.approx(1.5, abs=1e-12)
        P2 = t([[1.0, 1.0], [0.0, 0.0]])
        Q2 = torch.eye(2, dtype=D)
        assert float(orthogonality_penalty(P2, Q2)) == pytest.approx(2.0, abs=1e-15)
        base = float(stage2_total(t(0.0), [(P2, Q2)], LossWeights(lambda_orth=0.1)))
        dbl = float(stage2_total(t(0.0), [(P2, Q2)], LossWeights(lambda_orth=0.2)))
        assert base == pytest.approx(0.2, abs=1e-15) and dbl == pytest.approx(2 * base, abs=1e-15)

    def test_weights_validation(self):
        with pytest.raises(ValueError):
            LossWeights(tau=0.0)
        with pytest.raises(ValueError):
            LossWeights(lambda_1=-1.0)
