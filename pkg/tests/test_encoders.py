import numpy as np
import pytest
import torch
from torch import nn

from ld_detr.encoders import MomentumPair, UnimodalEncoder, global_pool

torch.manual_seed(0)


class TestUnimodalEncoder:
    def test_output_shape(self):
        enc = UnimodalEncoder(64, 256)
        x = torch.randn(2, 5, 64)
        assert enc(x).shape == (2, 5, 256)

    def test_zero_weights_zero_output(self):
        enc = UnimodalEncoder(8, 16)
        with torch.no_grad():
            for p in enc.parameters():
                p.zero_()
        out = enc(torch.randn(1, 3, 8))
        assert torch.all(out == 0)

    def test_eval_deterministic(self):
        enc = UnimodalEncoder(8, 16).eval()
        x = torch.randn(2, 4, 8)
        assert torch.equal(enc(x), enc(x))

    def test_train_dropout_varies(self):
        enc = UnimodalEncoder(8, 64).train()
        x = torch.randn(2, 4, 8)
        torch.manual_seed(1)
        a = enc(x)
        torch.manual_seed(2)
        b = enc(x)
        assert not torch.equal(a, b)

    def test_masked_positions_zeroed(self):
        enc = UnimodalEncoder(8, 16).eval()
        x = torch.randn(2, 4, 8)
        mask = torch.tensor([[True, True, False, False], [True, True, True, True]])
        out = enc(x, mask)
        assert torch.all(out[0, 2:] == 0)
        assert torch.isfinite(out).all()

    def test_dim_mismatch_raises(self):
        enc = UnimodalEncoder(8, 16)
        with pytest.raises(ValueError):
            enc(torch.randn(1, 3, 9))


class TestGlobalPool:
    def test_constant_rows(self):
        latent = torch.ones(2, 5, 3) * 4.0
        mask = torch.ones(2, 5, dtype=torch.bool)
        out = global_pool(latent, mask)
        assert torch.allclose(out, torch.full((2, 3), 4.0))

    def test_single_valid_position(self):
        latent = torch.randn(1, 4, 3)
        mask = torch.tensor([[False, True, False, False]])
        out = global_pool(latent, mask)
        assert torch.allclose(out[0], latent[0, 1])

    def test_padding_invariance(self):
        enc = UnimodalEncoder(8, 16).eval()
        x = torch.randn(1, 5, 8)
        mask = torch.ones(1, 5, dtype=torch.bool)
        pooled = global_pool(enc(x, mask), mask)

        x_pad = torch.cat([x, torch.zeros(1, 3, 8)], dim=1)
        mask_pad = torch.cat([mask, torch.zeros(1, 3, dtype=torch.bool)], dim=1)
        pooled_pad = global_pool(enc(x_pad, mask_pad), mask_pad)
        assert torch.allclose(pooled, pooled_pad, atol=1e-6)

    def test_all_false_row_raises(self):
        with pytest.raises(ValueError):
            global_pool(torch.randn(1, 3, 2), torch.zeros(1, 3, dtype=torch.bool))


class TestMomentumPair:
    def _pair(self, m=0.995):
        return MomentumPair(UnimodalEncoder(8, 16), m=m)

    def test_init_bitwise_copy(self):
        pair = self._pair()
        for p_s, p_m in zip(pair.shadow.parameters(), pair.main.parameters()):
            assert torch.equal(p_s, p_m)

    def test_init_idempotent(self):
        pair = self._pair()
        before = [p.clone() for p in pair.shadow.parameters()]
        pair.momentum_init()
        for p, b in zip(pair.shadow.parameters(), before):
            assert torch.equal(p, b)

    def test_shadow_not_trainable(self):
        pair = self._pair()
        assert all(not p.requires_grad for p in pair.shadow.parameters())

    def test_m_zero_copies_main(self):
        pair = self._pair(m=0.0)
        with torch.no_grad():
            for p in pair.main.parameters():
                p.add_(1.0)
        pair.momentum_update()
        for p_s, p_m in zip(pair.shadow.parameters(), pair.main.parameters()):
            assert torch.allclose(p_s, p_m)

    def test_closed_form_ema(self):
        # main frozen at theta, shadow starts at theta0:
        # after k updates shadow = theta + m^k (theta0 - theta)
        for m in (0.0, 0.5, 0.995):
            pair = MomentumPair(UnimodalEncoder(4, 8), m=m).double()
            with torch.no_grad():
                for p in pair.shadow.parameters():
                    p.add_(torch.randn_like(p))
            theta = [p.detach().clone() for p in pair.main.parameters()]
            theta0 = [p.detach().clone() for p in pair.shadow.parameters()]
            k = 50
            for _ in range(k):
                pair.momentum_update()
            for p_s, th, th0 in zip(pair.shadow.parameters(), theta, theta0):
                expect = th + (m**k) * (th0 - th)
                assert torch.allclose(p_s, expect, atol=1e-6)

    def test_gap_non_increasing(self):
        pair = self._pair(m=0.9)
        with torch.no_grad():
            for p in pair.shadow.parameters():
                p.add_(torch.randn_like(p))
        def gap():
            return max(
                (p_s - p_m).abs().max().item()
                for p_s, p_m in zip(pair.shadow.parameters(), pair.main.parameters())
            )
        prev = gap()
        for _ in range(10):
            pair.momentum_update()
            g = gap()
            assert g <= prev + 1e-7
            prev = g

    def test_shadow_receives_no_gradient(self):
        pair = self._pair()
        x = torch.randn(2, 3, 8)
        out = pair(x)  # online path
        shadow_out = pair.shadow_encode(x)
        (out.sum() + shadow_out.sum()).backward()
        for p in pair.shadow.parameters():
            assert p.grad is None

    def test_shadow_encode_deterministic_in_train_mode(self):
        pair = self._pair().train()
        x = torch.randn(2, 3, 8)
        a = pair.shadow_encode(x)
        b = pair.shadow_encode(x)
        assert torch.equal(a, b)
        assert pair.shadow.training  # mode restored

    def test_invalid_momentum_rejected(self):
        with pytest.raises(ValueError):
            MomentumPair(nn.Linear(2, 2), m=1.0)
