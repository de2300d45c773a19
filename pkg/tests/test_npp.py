import numpy as np
import pytest
import torch

from nppc import npp
from nppc.codec_bridge import RatePoint

CFG = npp.NPPConfig(base_channels=8, unet_depth=2, pixel_hidden=8, qa_hidden=4)
RP = RatePoint(3, 50, 2.0)


@pytest.fixture(scope="module")
def fresh():
    return npp.npp_init(CFG, seed=0)


@pytest.fixture(scope="module")
def trained_like():
    # random (non-zero) final layers to exercise the non-identity paths
    module = npp.npp_init(CFG, seed=1)
    gen = torch.Generator().manual_seed(7)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(0.05 * torch.randn(p.shape, generator=gen))
    return module


class TestInit:
    def test_identity_at_init(self, fresh):
        x = torch.rand(2, 3, 16, 16, generator=torch.Generator().manual_seed(0))
        assert torch.equal(fresh(x, RP), x)

    def test_same_seed_identical_params(self):
        a = npp.npp_init(CFG, seed=5)
        b = npp.npp_init(CFG, seed=5)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_qa_scale_ones_at_init(self, fresh):
        for site in fresh.site_ids():
            s = fresh.qa_scale(RP, site)
            assert torch.equal(s, torch.ones_like(s))


class TestQAScale:
    def test_q_norm_endpoints(self, fresh):
        assert float(fresh.q_norm(CFG.rate_point_min)) == 0.0
        assert float(fresh.q_norm(CFG.rate_point_max)) == 1.0

    def test_out_of_bounds_clamps_with_warning(self, fresh):
        with pytest.warns(UserWarning, match="clamping"):
            qn = fresh.q_norm(200.0)
        assert float(qn) == 1.0

    def test_positive_scales(self, trained_like):
        for site in trained_like.site_ids():
            assert (trained_like.qa_scale(RP, site) > 0).all()

    def test_distinct_rate_points_distinct_scales(self, trained_like):
        s_low = trained_like.qa_scale(RatePoint(5, 20, 8.0), "enc0")
        s_high = trained_like.qa_scale(RatePoint(1, 85, 0.5), "enc0")
        assert not torch.equal(s_low, s_high)

    def test_unknown_site(self, fresh):
        with pytest.raises(ValueError, match="site"):
            fresh.qa_scale(RP, "enc99")


class TestForward:
    def test_shape_preserved_odd_sizes(self, trained_like):
        x = torch.rand(1, 3, 37, 41)
        assert trained_like(x, RP).shape == x.shape

    def test_too_small_rejected(self, fresh):
        with pytest.raises(ValueError):
            fresh(torch.rand(1, 3, 4, 4), RP)

    def test_output_in_unit_range(self, trained_like):
        x = torch.rand(2, 3, 16, 16)
        with torch.no_grad():
            out = trained_like(x, RP)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_qa_gating_equivalence_at_zero_init_mlps(self, trained_like):
        module = npp.npp_init(CFG, seed=3)
        gen = torch.Generator().manual_seed(9)
        with torch.no_grad():
            for name, p in module.named_parameters():
                if "qa" not in name:
                    p.add_(0.05 * torch.randn(p.shape, generator=gen))
        x = torch.rand(1, 3, 16, 16)
        assert torch.equal(module(x, RP, qa_enabled=True), module(x, RP, qa_enabled=False))

    def test_determinism(self, trained_like):
        x = torch.rand(1, 3, 24, 24, generator=torch.Generator().manual_seed(4))
        assert torch.equal(trained_like(x, RP), trained_like(x, RP))

    def test_input_gradient_matches_finite_differences(self, trained_like):
        module = trained_like.double()
        x = torch.rand(1, 3, 8, 8, dtype=torch.float64,
                       generator=torch.Generator().manual_seed(11))
        x = (x * 0.8 + 0.1).requires_grad_(True)
        out = module(x, RP)
        interior = (out > 1e-4) & (out < 1 - 1e-4)
        loss = out[interior].mean()
        loss.backward()
        eps = 1e-6
        rng = np.random.default_rng(0)
        flat_idx = rng.choice(x.numel(), size=8, replace=False)
        for idx in flat_idx:
            pos = np.unravel_index(idx, x.shape)
            with torch.no_grad():
                xp = x.clone()
                xp[pos] += eps
                xm = x.clone()
                xm[pos] -= eps
                fd = (module(xp, RP)[interior].mean() - module(xm, RP)[interior].mean()) / (2 * eps)
            ana = x.grad[pos]
            assert float(abs(fd - ana)) <= 1e-3 * max(1e-8, float(abs(ana))) + 1e-9
        trained_like.float()


class TestPersistence:
    def test_checkpoint_roundtrip(self, trained_like, tmp_path):
        path = tmp_path / "npp.nppc"
        npp.save_npp(trained_like, path)
        loaded = npp.load_npp(path)
        x = torch.rand(1, 3, 16, 16)
        assert torch.equal(loaded(x, RP), trained_like(x, RP))
        assert loaded.config == trained_like.config
