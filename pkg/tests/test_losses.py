import itertools
import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from ld_detr.losses import (
    LossConfig,
    cw_to_se,
    giou_matrix,
    hd_loss,
    hungarian_match,
    margin_pairs_for_sample,
    match_batch,
    match_cost_matrix,
    mr_loss,
    span_giou,
    total_loss,
)

torch.manual_seed(0)


def se(*vals):
    return torch.tensor(vals, dtype=torch.float64)


class TestSpanGiou:
    def test_identical_spans(self):
        assert span_giou(se(0.2, 0.8), se(0.2, 0.8)).item() == pytest.approx(1.0)

    def test_disjoint_unit_gap(self):
        # [0,1] vs [2,3]: IoU 0, hull [0,3] with 1/3 uncovered
        assert span_giou(se(0.0, 1.0), se(2.0, 3.0)).item() == pytest.approx(-1 / 3)

    def test_half_overlap(self):
        # [0,2] vs [1,3]: IoU 1/3, hull fully covered
        assert span_giou(se(0.0, 2.0), se(1.0, 3.0)).item() == pytest.approx(1 / 3)

    def test_never_exceeds_iou(self):
        rng = np.random.default_rng(1)
        for _ in range(200):
            a = np.sort(rng.uniform(0, 1, 2))
            b = np.sort(rng.uniform(0, 1, 2))
            if a[1] - a[0] < 1e-6 or b[1] - b[0] < 1e-6:
                continue
            g = span_giou(se(*a), se(*b)).item()
            inter = max(0.0, min(a[1], b[1]) - max(a[0], b[0]))
            union = (a[1] - a[0]) + (b[1] - b[0]) - inter
            iou = inter / union
            assert g <= iou + 1e-12
            hull = max(a[1], b[1]) - min(a[0], b[0])
            if abs(hull - union) < 1e-12:
                assert g == pytest.approx(iou, abs=1e-9)
            assert -1.0 < g <= 1.0

    def test_both_zero_length_rejected(self):
        with pytest.raises(ValueError):
            span_giou(se(0.5, 0.5), se(0.5, 0.5))

    def test_matrix_matches_elementwise(self):
        a = torch.rand(4, 2, dtype=torch.float64)
        a = torch.stack([a.min(-1).values, a.max(-1).values + 0.01], dim=-1)
        b = torch.rand(3, 2, dtype=torch.float64)
        b = torch.stack([b.min(-1).values, b.max(-1).values + 0.01], dim=-1)
        M = giou_matrix(a, b)
        for i in range(4):
            for j in range(3):
                assert M[i, j].item() == pytest.approx(span_giou(a[i], b[j]).item())


def exhaustive_min_cost(cost: np.ndarray) -> float:
    q, k = cost.shape
    best = math.inf
    for perm in itertools.permutations(range(q), k):
        total = sum(cost[perm[j], j] for j in range(k))
        best = min(best, total)
    return best


def random_cw(n, gen):
    c = torch.rand(n, generator=gen) * 0.6 + 0.2
    w = torch.rand(n, generator=gen) * 0.3 + 0.05
    return torch.stack([c, w], dim=-1)


class TestHungarianMatch:
    def test_single_forced_pair(self):
        cfg = LossConfig()
        p, g = hungarian_match(random_cw(1, torch.Generator().manual_seed(0)),
                               torch.zeros(1), random_cw(1, torch.Generator().manual_seed(1)), cfg)
        assert p.tolist() == [0] and g.tolist() == [0]

    def test_matches_exhaustive_on_random_instances(self):
        cfg = LossConfig()
        gen = torch.Generator().manual_seed(2)
        for _ in range(100):
            q = int(torch.randint(1, 7, (1,), generator=gen))
            k = int(torch.randint(1, min(q, 4) + 1, (1,), generator=gen))
            spans = random_cw(q, gen)
            logits = torch.randn(q, generator=gen)
            gts = random_cw(k, gen)
            cost = match_cost_matrix(spans, logits, gts, cfg).double().numpy()
            p_idx, g_idx = hungarian_match(spans, logits, gts, cfg)
            got = float(sum(cost[p, g] for p, g in zip(p_idx.tolist(), g_idx.tolist())))
            assert got == pytest.approx(exhaustive_min_cost(cost), abs=1e-9)
            assert len(set(p_idx.tolist())) == len(p_idx)
            assert sorted(g_idx.tolist()) == list(range(k))

    def test_query_permutation_consistency(self):
        cfg = LossConfig()
        gen = torch.Generator().manual_seed(3)
        spans = random_cw(5, gen)
        logits = torch.randn(5, generator=gen)
        gts = random_cw(3, gen)
        p_idx, g_idx = hungarian_match(spans, logits, gts, cfg)
        perm = torch.tensor([4, 2, 0, 3, 1])
        p2, g2 = hungarian_match(spans[perm], logits[perm], gts, cfg)
        inv = torch.argsort(perm)
        mapping = {int(g): int(inv[p]) for p, g in zip(p_idx, g_idx)}
        mapping2 = {int(g): int(p) for p, g in zip(p2, g2)}
        assert mapping == mapping2

    def test_no_gt_empty_match(self):
        cfg = LossConfig()
        p, g = hungarian_match(random_cw(3, torch.Generator().manual_seed(4)),
                               torch.zeros(3), torch.zeros(0, 2), cfg)
        assert p.numel() == 0 and g.numel() == 0


class TestMrLoss:
    def test_perfect_predictions_zero_span_terms(self):
        cfg = LossConfig()
        gts = [torch.tensor([[0.5, 0.2], [0.2, 0.1]])]
        spans = torch.tensor([[[0.5, 0.2], [0.2, 0.1], [0.8, 0.3]]])
        logits = torch.zeros(1, 3)
        matches = match_batch(spans, logits, gts, cfg)
        _, parts = mr_loss(spans, logits, gts, matches, cfg)
        assert parts["l1"].item() == pytest.approx(0.0, abs=1e-7)
        assert parts["giou"].item() == pytest.approx(0.0, abs=1e-6)

    def test_gt_free_sample_only_ce(self):
        cfg = LossConfig()
        gts = [torch.zeros(0, 2)]
        spans = torch.rand(1, 4, 2) * 0.4 + 0.3
        logits = torch.randn(1, 4)
        matches = match_batch(spans, logits, gts, cfg)
        total, parts = mr_loss(spans, logits, gts, matches, cfg)
        assert parts["l1"].item() == 0.0
        assert parts["giou"].item() == 0.0
        assert parts["ce"].item() > 0.0
        assert total.item() == pytest.approx(cfg.lambda_ce * parts["ce"].item(), abs=1e-6)

    def test_ce_matches_manual_two_class_form(self):
        cfg = LossConfig()
        gts = [torch.tensor([[0.5, 0.2]])]
        spans = torch.tensor([[[0.5, 0.2], [0.25, 0.15]]])
        logits = torch.tensor([[1.3, -0.7]])
        matches = match_batch(spans, logits, gts, cfg)
        _, parts = mr_loss(spans, logits, gts, matches, cfg)

        # scalar oracle: softmax over stacked [0, p] logits with class weights
        def ce_term(p, label):
            probs = np.exp([0.0, p]) / np.exp([0.0, p]).sum()
            w = cfg.bg_weight if label == 0 else 1.0
            return w * -np.log(probs[label]), w

        n1, w1 = ce_term(1.3, 1)
        n2, w2 = ce_term(-0.7, 0)
        assert parts["ce"].item() == pytest.approx((n1 + n2) / (w1 + w2), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        cfg = LossConfig()
        torch.manual_seed(5)
        spans = (torch.rand(1, 3, 2, dtype=torch.float64) * 0.4 + 0.3).requires_grad_(True)
        logits = torch.randn(1, 3, dtype=torch.float64, requires_grad=True)
        gts = [torch.tensor([[0.45, 0.25], [0.7, 0.1]], dtype=torch.float64)]
        matches = match_batch(spans.detach(), logits.detach(), gts, cfg)

        total, _ = mr_loss(spans, logits, gts, matches, cfg)
        total.backward()
        h = 1e-6

        def f(s, l):
            return mr_loss(s, l, gts, matches, cfg)[0].item()

        for flat_idx in range(6):
            i, j = divmod(flat_idx, 2)
            sp = spans.detach().clone()
            sm = spans.detach().clone()
            sp[0, i, j] += h
            sm[0, i, j] -= h
            fd = (f(sp, logits.detach()) - f(sm, logits.detach())) / (2 * h)
            assert abs(fd - spans.grad[0, i, j].item()) <= 1e-4 * max(1.0, abs(fd))
        for i in range(3):
            lp = logits.detach().clone()
            lm = logits.detach().clone()
            lp[0, i] += h
            lm[0, i] -= h
            fd = (f(spans.detach(), lp) - f(spans.detach(), lm)) / (2 * h)
            assert abs(fd - logits.grad[0, i].item()) <= 1e-4 * max(1.0, abs(fd))


class TestMarginPairs:
    def test_extreme_and_second_pairs(self):
        gt = torch.tensor([3.0, 1.0, 0.0, 2.0])
        pairs = margin_pairs_for_sample(gt)
        assert pairs[0] == (0, 2)  # highest vs lowest
        assert pairs[1] == (3, 1)  # second highest vs second lowest

    def test_all_equal_no_pairs(self):
        assert margin_pairs_for_sample(torch.ones(4) * 2.0) == []

    def test_small_gap_skipped(self):
        assert margin_pairs_for_sample(torch.tensor([1.0, 0.5])) == []

    def test_two_clips_single_pair(self):
        assert margin_pairs_for_sample(torch.tensor([0.0, 3.0])) == [(1, 0)]


class TestHdLoss:
    def test_perfect_ordering_zero_margin(self):
        cfg = LossConfig()
        gt = torch.tensor([[4.0, 3.0, 1.0, 0.0]])
        pred = torch.tensor([[10.0, 6.0, 3.0, 0.0]])  # gaps far above the margin
        mask = torch.ones(1, 4, dtype=torch.bool)
        _, parts = hd_loss(pred, gt, mask, cfg)
        assert parts["margin"].item() == pytest.approx(0.0, abs=1e-7)

    def test_zero_margin_equal_predictions(self):
        cfg = LossConfig(margin=0.0)
        gt = torch.tensor([[4.0, 0.0]])
        pred = torch.zeros(1, 2)
        mask = torch.ones(1, 2, dtype=torch.bool)
        _, parts = hd_loss(pred, gt, mask, cfg)
        assert parts["margin"].item() == pytest.approx(0.0, abs=1e-7)

    def test_all_equal_saliency_degenerate(self):
        cfg = LossConfig()
        gt = torch.full((1, 5), 2.0)
        pred = torch.randn(1, 5)
        mask = torch.ones(1, 5, dtype=torch.bool)
        total, parts = hd_loss(pred, gt, mask, cfg)
        assert parts["margin"].item() == 0.0
        assert parts["rank_contrastive"].item() == 0.0
        assert total.item() == 0.0

    def test_rank_term_scalar_oracle(self):
        # hand case gt [3,1,0,2]: thresholds 1, 2, 3 all have support below
        cfg = LossConfig(lambda_marg=0.0, lambda_cont=1.0, tau_rank=0.5)
        gt = torch.tensor([[3.0, 1.0, 0.0, 2.0]])
        pred = torch.tensor([[2.0, -1.0, 0.5, 1.0]])
        mask = torch.ones(1, 4, dtype=torch.bool)
        total, parts = hd_loss(pred, gt, mask, cfg)

        s = np.array([2.0, -1.0, 0.5, 1.0]) / cfg.tau_rank
        log_z = np.log(np.exp(s).sum())
        expected_terms = []
        for r, pos in ((1, [0, 1, 3]), (2, [0, 3]), (3, [0])):
            expected_terms.append(-np.mean([s[i] - log_z for i in pos]))
        assert total.item() == pytest.approx(np.mean(expected_terms), abs=1e-6)

    def test_masked_clips_ignored(self):
        cfg = LossConfig()
        gt = torch.tensor([[4.0, 0.0, 99.0, 99.0]])
        pred = torch.tensor([[1.0, 0.0, float("-inf"), float("-inf")]])
        mask = torch.tensor([[True, True, False, False]])
        total, _ = hd_loss(pred, gt, mask, cfg)
        assert torch.isfinite(total)

        gt2 = torch.tensor([[4.0, 0.0]])
        pred2 = torch.tensor([[1.0, 0.0]])
        total2, _ = hd_loss(pred2, gt2, torch.ones(1, 2, dtype=torch.bool), cfg)
        assert total.item() == pytest.approx(total2.item(), abs=1e-6)

    def test_gradient_matches_finite_differences(self):
        cfg = LossConfig()
        torch.manual_seed(7)
        gt = torch.tensor([[3.0, 1.0, 0.0, 2.0], [4.0, 4.0, 0.0, 1.0]], dtype=torch.float64)
        pred = torch.randn(2, 4, dtype=torch.float64, requires_grad=True)
        mask = torch.ones(2, 4, dtype=torch.bool)
        total, _ = hd_loss(pred, gt, mask, cfg)
        total.backward()
        h = 1e-6
        for i in range(2):
            for j in range(4):
                pp = pred.detach().clone()
                pm = pred.detach().clone()
                pp[i, j] += h
                pm[i, j] -= h
                fd = (hd_loss(pp, gt, mask, cfg)[0] - hd_loss(pm, gt, mask, cfg)[0]).item() / (2 * h)
                assert abs(fd - pred.grad[i, j].item()) <= 1e-4 * max(1.0, abs(fd))


class TestTotalLoss:
    def test_exact_sum(self):
        a, b, c = torch.tensor(1.25), torch.tensor(0.5), torch.tensor(2.0)
        assert total_loss(a, b, c).item() == pytest.approx(3.75, abs=1e-7)

    def test_zero_weights_zero_total(self):
        cfg = LossConfig(lambda_l1=0, lambda_giou=0, lambda_ce=0, lambda_marg=0, lambda_cont=0)
        gts = [torch.tensor([[0.5, 0.2]])]
        spans = torch.rand(1, 3, 2) * 0.5 + 0.25
        logits = torch.randn(1, 3)
        matches = match_batch(spans, logits, gts, cfg)
        mr, _ = mr_loss(spans, logits, gts, matches, cfg)
        hd, _ = hd_loss(torch.randn(1, 4), torch.tensor([[3.0, 1.0, 0.0, 2.0]]),
                        torch.ones(1, 4, dtype=torch.bool), cfg)
        assert total_loss(mr, hd, torch.tensor(0.0)).item() == pytest.approx(0.0, abs=1e-7)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            LossConfig(lambda_l1=-1).validate()
        with pytest.raises(ValueError):
            LossConfig(tau_rank=0).validate()
