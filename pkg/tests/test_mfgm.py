import numpy as np
import pytest

from pdm import ndnum as nd
from pdm.errors import ContractViolation
from pdm.mfgm import (
    BranchParams,
    MfgmConfig,
    branch_forward,
    channel_attention,
    dilated_fusion,
    init_branch,
    init_params,
    mfgm_forward,
    spatial_attention,
)
from pdm.ndnum import Tensor, grad_check
from tests.oracles import naive_conv


def _sig(z):
    return 1.0 / (1.0 + np.exp(-z))


@pytest.fixture
def cfg():
    return MfgmConfig(channels=8, num_branches=2)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def test_config_validation():
    with pytest.raises(ContractViolation):
        MfgmConfig(channels=10, reduction=4)
    with pytest.raises(ContractViolation):
        MfgmConfig(channels=8, num_branches=0)
    assert MfgmConfig(channels=16).reduced == 4


class TestDilatedFusion:
    def test_zero_kernels(self, cfg, rng):
        f = Tensor(rng.normal(size=(8, 4, 3)))
        assert not dilated_fusion(f, BranchParams.zeros(cfg)).data.any()

    def test_identical_branches(self, cfg, rng):
        f = Tensor(rng.normal(size=(8, 4, 3)))
        b1 = init_branch(cfg, np.random.default_rng(5))
        b2 = init_branch(cfg, np.random.default_rng(5))
        np.testing.assert_array_equal(dilated_fusion(f, b1).data, dilated_fusion(f, b2).data)

    def test_per_term_oracle(self, cfg, rng):
        f = rng.normal(size=(8, 5, 4))
        b = init_branch(cfg, rng)
        ref = sum(naive_conv(f, k.data, d) for d, k in zip((1, 2, 3), b.dilated))
        out = dilated_fusion(Tensor(f), b).data
        assert out.shape == (2, 5, 4)
        np.testing.assert_allclose(out, ref, atol=1e-10, rtol=0)

    def test_channel_mismatch(self, cfg, rng):
        with pytest.raises(ContractViolation):
            dilated_fusion(Tensor(np.ones((4, 3, 3))), init_branch(cfg, rng))


class TestChannelAttention:
    def test_zero_params_halve(self, cfg, rng):
        x = rng.normal(size=(2, 3, 3))
        np.testing.assert_allclose(channel_attention(Tensor(x), BranchParams.zeros(cfg)).data, x / 2)

    def test_zero_input(self, cfg, rng):
        assert not channel_attention(Tensor(np.zeros((2, 3, 3))), init_branch(cfg, rng)).data.any()

    def test_loop_oracle(self, cfg, rng):
        x = rng.normal(size=(2, 4, 3))
        b = init_branch(cfg, rng)
        b.ca_b1 = Tensor(rng.normal(size=b.ca_b1.shape))
        b.ca_b2 = Tensor(rng.normal(size=b.ca_b2.shape))
        c, h, w = x.shape
        pooled = [sum(x[k, i, j] for i in range(h) for j in range(w)) / (h * w) for k in range(c)]
        hid = [max(0.0, sum(b.ca_w1.data[u, k] * pooled[k] for k in range(c)) + b.ca_b1.data[u])
               for u in range(b.ca_w1.shape[0])]
        weight = [_sig(sum(b.ca_w2.data[k, u] * hid[u] for u in range(len(hid))) + b.ca_b2.data[k])
                  for k in range(c)]
        ref = np.array([[[x[k, i, j] * weight[k] for j in range(w)] for i in range(h)] for k in range(c)])
        np.testing.assert_allclose(channel_attention(Tensor(x), b).data, ref, atol=1e-10, rtol=0)


class TestSpatialAttention:
    def test_zero_kernel_halves(self, cfg, rng):
        x = rng.normal(size=(2, 3, 4))
        np.testing.assert_allclose(spatial_attention(Tensor(x), BranchParams.zeros(cfg)).data, x / 2)

    def test_single_pixel_uniform_scale(self, cfg, rng):
        x = rng.normal(size=(2, 1, 1))
        out = spatial_attention(Tensor(x), init_branch(cfg, rng)).data
        ratio = out / x
        assert np.allclose(ratio, ratio.flat[0]) and 0 < ratio.flat[0] < 1

    def test_loop_oracle(self, cfg, rng):
        x = rng.normal(size=(2, 4, 5))
        b = init_branch(cfg, rng)
        b.sa_bias = Tensor([0.3])
        c, h, w = x.shape
        stats = np.zeros((2, h, w))
        for i in range(h):
            for j in range(w):
                col = [x[k, i, j] for k in range(c)]
                stats[0, i, j] = sum(col) / c
                stats[1, i, j] = max(col)
        logits = naive_conv(stats, b.sa_kernel.data, 1)[0] + 0.3
        ref = x * _sig(logits)[None]
        np.testing.assert_allclose(spatial_attention(Tensor(x), b).data, ref, atol=1e-10, rtol=0)

    def test_weights_strictly_inside_unit_interval(self, cfg, rng):
        x = Tensor(rng.normal(size=(2, 3, 4)) * 3 + 1)
        b = init_branch(cfg, rng)
        ratio = spatial_attention(x, b).data / x.data
        assert np.all((ratio > 0) & (ratio < 1))
        ratio = channel_attention(x, b).data / x.data
        assert np.all((ratio > 0) & (ratio < 1))


class TestBranchForward:
    def test_zero_params(self, cfg, rng):
        f = Tensor(rng.normal(size=(8, 4, 2)))
        assert not branch_forward(f, BranchParams.zeros(cfg)).data.any()

    def test_shape(self, cfg, rng):
        assert branch_forward(Tensor(rng.normal(size=(8, 4, 2))), init_branch(cfg, rng)).shape == (8, 4, 2)

    def test_pipeline_oracle(self, cfg, rng):
        f = rng.normal(size=(8, 4, 3))
        b = init_branch(cfg, rng)
        b.fc_b = Tensor(rng.normal(size=8))
        fused = sum(naive_conv(f, k.data, d) for d, k in zip((1, 2, 3), b.dilated))
        pooled = fused.mean(axis=(1, 2))
        ca_w = _sig(b.ca_w2.data @ np.maximum(b.ca_w1.data @ pooled + b.ca_b1.data, 0) + b.ca_b2.data)
        ca = fused * ca_w[:, None, None]
        stats = np.stack([fused.mean(axis=0), fused.max(axis=0)])
        sa = fused * _sig(naive_conv(stats, b.sa_kernel.data, 1)[0] + b.sa_bias.data[0])[None]
        gated = np.maximum(np.concatenate([ca, sa]), 0)
        ref = np.einsum("oc,chw->ohw", b.fc_w.data, gated) + b.fc_b.data[:, None, None]
        np.testing.assert_allclose(branch_forward(Tensor(f), b).data, ref, atol=1e-10, rtol=0)


class TestMfgmForward:
    def test_one_branch_zero(self, rng):
        cfg = MfgmConfig(channels=4, num_branches=1)
        f = rng.normal(size=(4, 3, 3))
        out = mfgm_forward(Tensor(f), cfg, [BranchParams.zeros(cfg)]).data
        np.testing.assert_array_equal(out[:4], f)
        assert not out[4:].any()

    def test_channel_count(self, rng):
        cfg = MfgmConfig(channels=4, num_branches=2)
        out = mfgm_forward(Tensor(rng.normal(size=(4, 3, 2))), cfg, init_params(cfg, rng))
        assert out.shape == (12, 3, 2)

    def test_compositional_oracle(self, cfg, rng):
        f = Tensor(rng.normal(size=(8, 3, 4)))
        params = init_params(cfg, rng)
        full = mfgm_forward(f, cfg, params).data
        parts = np.concatenate([f.data] + [branch_forward(f, b).data for b in params])
        np.testing.assert_array_equal(full, parts)

    def test_branch_count_mismatch(self, cfg, rng):
        with pytest.raises(ContractViolation):
            mfgm_forward(Tensor(np.ones((8, 3, 3))), cfg, init_params(cfg, rng)[:1])

    def test_batched_rows_match_single(self, cfg, rng):
        x = rng.normal(size=(3, 8, 4, 3))
        params = init_params(cfg, rng)
        batched = mfgm_forward(Tensor(x), cfg, params).data
        for i in range(3):
            np.testing.assert_allclose(batched[i], mfgm_forward(Tensor(x[i]), cfg, params).data, atol=1e-12)

    @pytest.mark.parametrize("branches", [1, 2, 3])
    def test_shape_and_identity_slice_laws(self, branches, rng):
        for c in (4, 8):
            for h, w in ((1, 1), (2, 3), (4, 2)):
                cfg = MfgmConfig(channels=c, num_branches=branches)
                f = rng.normal(size=(c, h, w))
                out = mfgm_forward(Tensor(f), cfg, init_params(cfg, rng)).data
                assert out.shape == ((branches + 1) * c, h, w)
                np.testing.assert_array_equal(out[:c], f)

    def test_end_to_end_gradient(self, rng):
        cfg = MfgmConfig(channels=4, num_branches=2)
        params = init_params(cfg, rng)
        readout = Tensor(rng.normal(size=(12, 3, 3)))
        f = rng.normal(size=(4, 3, 3))
        fn = lambda t: nd.sum(nd.sigmoid(mfgm_forward(t, cfg, params)) * readout)
        assert grad_check(fn, f) < 1e-5

    def test_gradient_wrt_parameters(self, rng):
        cfg = MfgmConfig(channels=4, num_branches=1)
        params = init_params(cfg, rng)
        f = Tensor(rng.normal(size=(2, 4, 3, 3)))
        readout = Tensor(rng.normal(size=(2, 8, 3, 3)))
        for name, tensor in params[0].named().items():
            def fn(t, name=name):
                named = dict(params[0].named())
                named[name] = t
                return nd.sum(mfgm_forward(f, cfg, [BranchParams.from_named(named)]) * readout)
            assert grad_check(fn, tensor.data) < 1e-5, name
