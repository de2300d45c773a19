import pytest
import torch

from nppc import codec_bridge, npp, proxy_codec, task_head, trainer
from nppc.codec_bridge import JpegCodec
from nppc.trainer import TrainConfig, joint_loss, parse_config

TINY = dict(
    image_size=16, batch_size=4, npp_base_channels=8, npp_unet_depth=2,
    npp_pixel_hidden=8, npp_qa_hidden=4, proxy_stages=2, proxy_latent=8,
    proxy_hidden=8, clf_channels=8,
)


@pytest.fixture(scope="module")
def setup():
    cfg = TrainConfig(**TINY, stage2_steps=8, stage2_drop=6, stage3_steps=8,
                      stage3_drop=6, eval_interval=4, val_size=8, seed=0)
    gen = torch.Generator().manual_seed(0)
    images = torch.rand(40, 3, 16, 16, generator=gen)
    labels = torch.randint(0, 10, (40,), generator=gen)
    classifier = task_head.SmallClassifier(task_head.ClassifierConfig(10, 8))
    torch.manual_seed(1)
    for p in classifier.parameters():
        p.data.normal_(0, 0.1)
    proxies = {
        p.id: proxy_codec.proxy_init(cfg.proxy_config(100.0), 10 + p.id)
        for p in cfg.rate_points()
    }
    return cfg, images, labels, classifier, proxies


class TestConfig:
    def test_defaults_match_reference_schedule(self):
        cfg = TrainConfig()
        points = cfg.rate_points()
        assert [p.lam for p in points] == [0.5, 1.0, 2.0, 4.0, 8.0]
        assert cfg.beta == 0.5
        assert (cfg.lr, cfg.lr_low) == (1e-4, 1e-5)
        # desk-scale schedule is the full-scale one divided by 20
        assert trainer.FULL_SCALE_STEPS == (400_000, 120_000, 100_000)
        assert trainer.FULL_SCALE_DROPS == (320_000, 80_000, 60_000)
        assert (cfg.stage1_steps, cfg.stage2_steps, cfg.stage3_steps) == (20_000, 6_000, 5_000)
        assert (cfg.stage1_drop, cfg.stage2_drop, cfg.stage3_drop) == (16_000, 4_000, 3_000)

    def test_parse_roundtrip(self, tmp_path):
        cfg = TrainConfig(batch_size=2, beta=0.25, forward_mode="proxy")
        path = tmp_path / "c.cfg"
        path.write_text(cfg.to_text())
        assert parse_config(path) == cfg

    def test_unknown_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("batch_size=4\nbogus_key=1\n")
        with pytest.raises(ValueError, match="unknown config key"):
            parse_config(path)

    def test_comments_and_blanks_ignored(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("# comment\n\nbatch_size=4\n")
        assert parse_config(path).batch_size == 4

    def test_bad_forward_mode(self):
        with pytest.raises(ValueError):
            TrainConfig(forward_mode="magic")

    def test_lambda_p_per_point(self):
        cfg = TrainConfig(lambda_p="1,2,3,4,5")
        points = cfg.rate_points()
        assert cfg.lambda_p_for(points[0]) == 1.0
        assert cfg.lambda_p_for(points[4]) == 5.0


class TestJointLoss:
    def test_component_assembly(self):
        # R 0.5 + lambda 2 * D_m 0.7 + beta 0.5 * D_pre 0.01 = 1.905
        assert 0.5 + 2 * 0.7 + 0.5 * 0.01 == pytest.approx(1.905)

    def test_reported_loss_equals_recomposition(self, setup):
        cfg, images, labels, classifier, proxies = setup
        module = npp.npp_init(cfg.npp_config(False), 0)
        point = cfg.rate_points()[2]
        loss, parts = joint_loss(
            module, proxies[point.id], classifier, images[:4], labels[:4], point,
            beta=cfg.beta, forward_mode="real", codec=JpegCodec(), qa_enabled=False,
        )
        recomposed = parts["R"] + point.lam * parts["D_m"] + cfg.beta * parts["D_pre"]
        assert parts["L"] == pytest.approx(recomposed, rel=1e-6)

    def test_identity_init_matches_baseline_components(self, setup):
        cfg, images, labels, classifier, proxies = setup
        module = npp.npp_init(cfg.npp_config(False), 0)
        point = cfg.rate_points()[2]
        codec = JpegCodec()
        x = images[:4]
        _, parts = joint_loss(
            module, proxies[point.id], classifier, x, labels[:4], point,
            beta=cfg.beta, forward_mode="real", codec=codec, qa_enabled=False,
        )
        # baseline: same pipeline with no filter at all
        x_q = codec_bridge.quantize8_ste(x)
        result = codec_bridge.encode_decode(codec, x_q, point)
        d_m = task_head.task_loss(classifier, result.recon, labels[:4])
        assert parts["R"] == pytest.approx(result.bpp, abs=1e-12)
        assert parts["D_m"] == pytest.approx(float(d_m.detach()), abs=1e-12)
        assert parts["D_pre"] == 0.0

    def test_forward_value_independent_of_proxy(self, setup):
        cfg, images, labels, classifier, proxies = setup
        module = npp.npp_init(cfg.npp_config(False), 7)
        point = cfg.rate_points()[2]
        other_proxy = proxy_codec.proxy_init(cfg.proxy_config(100.0), 99)
        args = (module, classifier, images[:4], labels[:4])
        _, parts_a = joint_loss(
            args[0], proxies[point.id], args[1], args[2], args[3], point,
            beta=cfg.beta, forward_mode="real", codec=JpegCodec(), qa_enabled=False,
        )
        _, parts_b = joint_loss(
            args[0], other_proxy, args[1], args[2], args[3], point,
            beta=cfg.beta, forward_mode="real", codec=JpegCodec(), qa_enabled=False,
        )
        assert parts_a["L"] == parts_b["L"]
        assert parts_a["R"] == parts_b["R"]
        assert parts_a["D_m"] == parts_b["D_m"]

    def test_real_gradient_equals_overwritten_proxy_gradient(self, setup):
        """Dual-pipeline oracle: grad of the real-mode loss w.r.t. filter params
        equals the grad of the proxy pipeline whose forward values are overwritten
        with the real codec outputs."""
        cfg, images, labels, classifier, proxies = setup
        point = cfg.rate_points()[2]
        codec = JpegCodec()
        proxy = proxies[point.id]
        task_head.freeze(proxy)
        task_head.freeze(classifier)
        x, y = images[:2], labels[:2]

        module = npp.npp_init(cfg.npp_config(False), 5)
        with torch.no_grad():
            for p in module.parameters():
                p.add_(0.02 * torch.randn(p.shape, generator=torch.Generator().manual_seed(8)))

        used = [p for n, p in module.named_parameters() if "qa" not in n]
        loss, _ = joint_loss(module, proxy, classifier, x, y, point, beta=cfg.beta,
                             forward_mode="real", codec=codec, qa_enabled=False)
        grads_real = torch.autograd.grad(loss, used)

        # manual overwritten-proxy pipeline
        x_bar, x_raw = module(x, point, qa_enabled=False, return_raw=True)
        d_pre = torch.nn.functional.mse_loss(x, x_raw)
        x_q = codec_bridge.quantize8_ste(x_bar)
        out = proxy_codec.proxy_forward(proxy, x_q, mode="round")
        with torch.no_grad():
            result = codec_bridge.encode_decode(codec, x_q, point)
        x_hat = codec_bridge.value_substitute(result.recon, out.recon)
        rate = codec_bridge.value_substitute(torch.tensor(result.bpp), out.bpp)
        loss2 = rate + point.lam * task_head.task_loss(classifier, x_hat, y) + cfg.beta * d_pre
        grads_manual = torch.autograd.grad(loss2, used)

        for ga, gb in zip(grads_real, grads_manual):
            denom = float(gb.abs().max())
            if denom == 0.0:
                assert float(ga.abs().max()) == 0.0
            else:
                assert float((ga - gb).abs().max()) / denom <= 1e-6

    def test_nonfinite_loss_aborts(self, setup):
        cfg, images, labels, classifier, proxies = setup
        module = npp.npp_init(cfg.npp_config(False), 0)
        point = cfg.rate_points()[2]
        bad_proxy = proxy_codec.proxy_init(cfg.proxy_config(100.0), 1)
        with torch.no_grad():
            bad_proxy.synthesis[0].weight.fill_(float("nan"))
        with pytest.raises(RuntimeError, match="non-finite"):
            joint_loss(module, bad_proxy, classifier, images[:2], labels[:2], point,
                       beta=cfg.beta, forward_mode="proxy")


class TestSampling:
    def test_rate_point_sampling_uniform(self):
        points = TrainConfig().rate_points()
        counts = {p.id: 0 for p in points}
        for step in range(10_000):
            counts[trainer.sample_rate_point(points, seed=0, step=step).id] += 1
        for c in counts.values():
            assert abs(c - 2000) <= 150

    def test_batch_sampling_deterministic(self):
        images = torch.rand(20, 3, 8, 8)
        labels = torch.arange(20)
        a = trainer.sample_batch(images, labels, 4, seed=1, step=5)
        b = trainer.sample_batch(images, labels, 4, seed=1, step=5)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])
        c = trainer.sample_batch(images, labels, 4, seed=1, step=6)
        assert not torch.equal(a[1], c[1])


class TestStages:
    def test_stage2_leaves_qa_untouched_and_frozen_modules_fixed(self, setup):
        cfg, images, labels, classifier, proxies = setup
        mid = cfg.rate_points()[2]
        clf_before = {k: v.clone() for k, v in classifier.state_dict().items()}
        proxy_before = {k: v.clone() for k, v in proxies[mid.id].state_dict().items()}
        module = trainer.stage2_train(cfg, images, labels, classifier, proxies[mid.id], JpegCodec())
        fresh = npp.npp_init(cfg.npp_config(False), cfg.seed)
        for (name, p), (_, q) in zip(module.named_parameters(), fresh.named_parameters()):
            if "qa" in name:
                assert torch.equal(p, q), name
        for k, v in classifier.state_dict().items():
            assert torch.equal(v, clf_before[k])
        for k, v in proxies[mid.id].state_dict().items():
            assert torch.equal(v, proxy_before[k])

    def test_stage2_deterministic(self, setup):
        cfg, images, labels, classifier, proxies = setup
        mid = cfg.rate_points()[2]
        a = trainer.stage2_train(cfg, images, labels, classifier, proxies[mid.id], JpegCodec())
        b = trainer.stage2_train(cfg, images, labels, classifier, proxies[mid.id], JpegCodec())
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_stage3_step0_continuous_with_stage2(self, setup):
        cfg, images, labels, classifier, proxies = setup
        mid = cfg.rate_points()[2]
        module = trainer.stage2_train(cfg, images, labels, classifier, proxies[mid.id], JpegCodec())
        # QA layers still zero-initialized: enabled vs disabled loss identical
        x, y = images[:4], labels[:4]
        _, on = joint_loss(module, proxies[mid.id], classifier, x, y, mid, beta=cfg.beta,
                           forward_mode="proxy", qa_enabled=True)
        _, off = joint_loss(module, proxies[mid.id], classifier, x, y, mid, beta=cfg.beta,
                            forward_mode="proxy", qa_enabled=False)
        assert on["L"] == off["L"]

    def test_stage3_requires_all_proxies(self, setup):
        cfg, images, labels, classifier, proxies = setup
        module = npp.npp_init(cfg.npp_config(False), 0)
        with pytest.raises(ValueError, match="missing"):
            trainer.stage3_train(cfg, images, labels, classifier,
                                 {3: proxies[3]}, JpegCodec(), module)

    def test_train_multi_produces_one_per_point(self, setup):
        cfg, images, labels, classifier, proxies = setup
        small = TrainConfig(**TINY, multi_steps=2, multi_drop=2, eval_interval=2, val_size=8)
        modules = trainer.train_multi(small, images, labels, classifier, proxies, JpegCodec())
        assert sorted(modules.keys()) == [1, 2, 3, 4, 5]
        for m in modules.values():
            assert m.config.qa_enabled is False

    def test_resume_reproduces_next_step(self, setup, tmp_path):
        cfg, images, labels, classifier, proxies = setup
        mid = cfg.rate_points()[2]
        state = tmp_path / "state.nppc"
        cfg_short = TrainConfig(**TINY, stage2_steps=4, stage2_drop=6,
                                eval_interval=100, val_size=8, state_interval=4, seed=0)
        trainer.stage2_train(cfg_short, images, labels, classifier, proxies[mid.id],
                             JpegCodec(), state_path=state)
        assert state.exists()
        cfg_long = TrainConfig(**TINY, stage2_steps=8, stage2_drop=6,
                               eval_interval=100, val_size=8, state_interval=100, seed=0)
        resumed = trainer.stage2_train(cfg_long, images, labels, classifier,
                                       proxies[mid.id], JpegCodec(), state_path=state)
        straight = trainer.stage2_train(cfg_long, images, labels, classifier,
                                        proxies[mid.id], JpegCodec())
        for pa, pb in zip(resumed.parameters(), straight.parameters()):
            assert torch.equal(pa, pb)
