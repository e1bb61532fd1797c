import numpy as np
import pytest
import torch

from ld_detr.fuser import (
    ConvBlock,
    ConvolutionalFuser,
    FuserConfig,
    T2VEncoder,
    V2TExtractor,
    masked_softmax,
)

torch.manual_seed(0)

D = 32


def inputs(b=2, t=7, n=4, d=D, seed=0, t_valid=None, n_valid=None):
    g = torch.Generator().manual_seed(seed)
    V = torch.randn(b, t, d, generator=g)
    T = torch.randn(b, n, d, generator=g)
    vmask = torch.ones(b, t, dtype=torch.bool)
    tmask = torch.ones(b, n, dtype=torch.bool)
    if t_valid is not None:
        vmask[:, t_valid:] = False
        V = V * vmask.unsqueeze(-1)
    if n_valid is not None:
        tmask[:, n_valid:] = False
        T = T * tmask.unsqueeze(-1)
    return V, T, vmask, tmask


class TestMaskedSoftmax:
    def test_rows_sum_one_over_valid(self):
        scores = torch.randn(2, 3, 5)
        mask = torch.ones(2, 3, 5, dtype=torch.bool)
        mask[..., 3:] = False
        out = masked_softmax(scores, mask, dim=-1)
        assert torch.allclose(out.sum(-1), torch.ones(2, 3), atol=1e-6)
        assert torch.all(out[..., 3:] == 0)

    def test_all_invalid_slice_raises(self):
        with pytest.raises(ValueError):
            masked_softmax(torch.randn(1, 2, 3), torch.zeros(1, 2, 3, dtype=torch.bool), dim=-1)


class TestV2TExtractor:
    def test_output_shape(self):
        mod = V2TExtractor(D).eval()
        out = mod(*inputs(b=2, t=7, n=4))
        assert out.shape == (2, 7, D)

    def test_correlation_is_sum_of_three_terms(self):
        mod = V2TExtractor(D).eval()
        V, T, _, _ = inputs(b=1, t=3, n=2)
        A = mod.correlation(V, T)
        # scalar-loop oracle
        w3 = mod.score_vt.weight.squeeze(0)
        for i in range(3):
            for j in range(2):
                a1 = mod.score_v(V[0, i]).item()
                a2 = mod.score_t(T[0, j]).item()
                a3 = float(((V[0, i] * w3 * T[0, j]).sum() + mod.score_vt.bias).detach())
                assert A[0, i, j].item() == pytest.approx(a1 + a2 + a3, abs=1e-5)

    def test_single_valid_token_dominates(self):
        # with one valid token, the row softmax collapses onto it: T_v == token
        mod = V2TExtractor(D).eval()
        V, T, vmask, tmask = inputs(b=1, t=5, n=4, n_valid=1)
        A = mod.correlation(V, T)
        A_r = masked_softmax(A, tmask.unsqueeze(1).expand_as(A), dim=-1)
        T_v = A_r @ T
        for j in range(5):
            assert torch.allclose(T_v[0, j], T[0, 0], atol=1e-6)

    def test_masked_clip_rows_zero(self):
        mod = V2TExtractor(D).eval()
        V, T, vmask, tmask = inputs(b=1, t=6, n=3, t_valid=4)
        out = mod(V, T, vmask, tmask)
        assert torch.all(out[0, 4:] == 0)

    def test_all_masked_text_raises(self):
        mod = V2TExtractor(D).eval()
        V, T, vmask, tmask = inputs(b=1, t=4, n=3)
        tmask[:] = False
        with pytest.raises(ValueError):
            mod(V, T, vmask, tmask)


class TestT2VEncoder:
    def test_attention_rows_stochastic(self):
        mod = T2VEncoder(D, d_ffn=64).eval()
        V, T, vmask, tmask = inputs(b=2, t=5, n=4, n_valid=3)
        W = mod.attention_weights(V, T, tmask)
        assert torch.allclose(W.sum(-1), torch.ones(2, 5), atol=1e-6)
        assert torch.all(W[..., 3:] == 0)

    def test_identical_tokens_make_attention_irrelevant(self):
        # all keys/values equal -> output equals the single-token value path
        mod = T2VEncoder(D, d_ffn=64).eval()
        V, T, vmask, tmask = inputs(b=1, t=5, n=4)
        T_same = T[:, :1].expand(-1, 4, -1).contiguous()
        out_many = mod(V, T_same, vmask, tmask)
        out_one = mod(V, T_same[:, :1], vmask, tmask[:, :1])
        assert torch.allclose(out_many, out_one, atol=1e-5)

    def test_masked_token_perturbation_invariance(self):
        mod = T2VEncoder(D, d_ffn=64).eval()
        V, T, vmask, tmask = inputs(b=1, t=5, n=4, n_valid=2)
        out = mod(V, T, vmask, tmask)
        T2 = T.clone()
        T2[0, 2:] += torch.randn(2, D) * 100
        out2 = mod(V, T2, vmask, tmask)
        assert (out - out2).abs().max() < 1e-6

    def test_linear_scale_differs_from_sqrt(self):
        torch.manual_seed(1)
        a = T2VEncoder(D, d_ffn=64, attn_scale="sqrt").eval()
        b = T2VEncoder(D, d_ffn=64, attn_scale="linear").eval()
        b.load_state_dict(a.state_dict())
        V, T, vmask, tmask = inputs(b=1, t=5, n=4)
        assert not torch.allclose(a(V, T, vmask, tmask), b(V, T, vmask, tmask))


class TestConvBlock:
    def test_shape_preserved(self):
        blk = ConvBlock(D).eval()
        x = torch.randn(2, 9, D)
        assert blk(x).shape == (2, 9, D)

    def test_zero_convs_identity_bn_reduce_to_relu(self):
        blk = ConvBlock(D).eval()  # eval: BN uses running stats (0, 1) -> identity
        with torch.no_grad():
            blk.conv1.weight.zero_()
            blk.conv1.bias.zero_()
            blk.conv2.weight.zero_()
            blk.conv2.bias.zero_()
        x = torch.randn(2, 6, D)
        assert torch.allclose(blk(x), torch.relu(x), atol=1e-6)

    def test_padding_invariance_train_mode(self):
        torch.manual_seed(2)
        blk = ConvBlock(D).train()
        x = torch.randn(2, 6, D)
        mask = torch.ones(2, 6, dtype=torch.bool)
        out = blk(x, mask)

        blk2 = ConvBlock(D).train()
        blk2.load_state_dict(blk.state_dict())
        x_pad = torch.cat([x, torch.zeros(2, 4, D)], dim=1)
        mask_pad = torch.cat([mask, torch.zeros(2, 4, dtype=torch.bool)], dim=1)
        out_pad = blk2(x_pad, mask_pad)
        assert torch.allclose(out, out_pad[:, :6], atol=1e-5)

    def test_masked_positions_zero(self):
        blk = ConvBlock(D).eval()
        x = torch.randn(1, 5, D)
        mask = torch.tensor([[True, True, True, False, False]])
        out = blk(x, mask)
        assert torch.all(out[0, 3:] == 0)


class TestConvolutionalFuser:
    def _fuser(self, conv_blocks=2):
        torch.manual_seed(3)
        cfg = FuserConfig(d_model=D, n_heads=4, d_ffn=64, enc_layers=2, conv_blocks=conv_blocks)
        return ConvolutionalFuser(cfg).eval()

    def test_end_to_end_shape(self):
        fuser = self._fuser()
        out = fuser(*inputs(b=2, t=7, n=4))
        assert out.shape == (2, 7, D)

    def test_zero_conv_blocks_runs(self):
        fuser = self._fuser(conv_blocks=0)
        out = fuser(*inputs(b=2, t=7, n=4))
        assert out.shape == (2, 7, D)
        assert len(fuser.blocks) == 0

    def test_eval_deterministic(self):
        fuser = self._fuser()
        args = inputs(b=2, t=7, n=4)
        assert torch.equal(fuser(*args), fuser(*args))

    def test_gradients_reach_both_modalities(self):
        fuser = self._fuser().train()
        V, T, vmask, tmask = inputs(b=2, t=6, n=4)
        V.requires_grad_(True)
        T.requires_grad_(True)
        fuser(V, T, vmask, tmask).sum().backward()
        assert V.grad.abs().sum() > 0
        assert T.grad.abs().sum() > 0

    def test_padding_invariance_eval(self):
        fuser = self._fuser()
        V, T, vmask, tmask = inputs(b=1, t=6, n=3, seed=5)
        out = fuser(V, T, vmask, tmask)

        V_pad = torch.cat([V, torch.zeros(1, 3, D)], dim=1)
        T_pad = torch.cat([T, torch.zeros(1, 2, D)], dim=1)
        vmask_pad = torch.cat([vmask, torch.zeros(1, 3, dtype=torch.bool)], dim=1)
        tmask_pad = torch.cat([tmask, torch.zeros(1, 2, dtype=torch.bool)], dim=1)
        out_pad = fuser(V_pad, T_pad, vmask_pad, tmask_pad)
        assert (out - out_pad[:, :6]).abs().max() < 1e-5

    def test_encoder_stacks_independent(self):
        fuser = self._fuser()
        p1 = {id(p) for p in fuser.encoder1.parameters()}
        p2 = {id(p) for p in fuser.encoder2.parameters()}
        assert not (p1 & p2)

    def test_param_count_independent_of_lengths(self):
        fuser = self._fuser()
        n_params = sum(p.numel() for p in fuser.parameters())
        fuser(*inputs(b=1, t=30, n=11))
        assert sum(p.numel() for p in fuser.parameters()) == n_params

    def test_config_validation(self):
        with pytest.raises(ValueError):
            FuserConfig(attn_scale="log").validate()
        with pytest.raises(ValueError):
            FuserConfig(conv_kernel=2).validate()
