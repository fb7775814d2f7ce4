import json
import math

import numpy as np
import pytest

import mvsr.autodiff as ad
import mvsr.resample as resample
import mvsr.srnet as srnet
import mvsr.synthscene as synth
from mvsr.autodiff import Tensor
from mvsr.epiattn import EpiSampleGrid
from mvsr.srnet import (
    Conv,
    NetworkConfig,
    NonFiniteLossError,
    RetBlock,
    SRNet,
    TrainConfig,
    cosine_lr,
    loss_sr,
    net_from_checkpoint,
    psnr,
    ret_block,
    scene_training_data,
    ssim,
    train,
)

MICRO = NetworkConfig(base_channels=4, n_ref=2, k_epi=(3, 3, 3), seed=0)


def random_grid(side, n_views, k, rng, all_valid=True):
    hw = side * side
    coords = rng.uniform(0, side - 1, size=(hw, n_views, k, 2))
    valid = np.ones((hw, n_views), dtype=bool)
    if not all_valid:
        valid[rng.uniform(size=(hw, n_views)) < 0.2] = False
    return EpiSampleGrid(coords=coords, valid=valid, feat_w=side, feat_h=side)


def micro_grids(rng, base=8, n_views=2, k=3):
    return [random_grid(base // s, n_views, k, rng) for s in (1, 2, 4)]


class TestConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            NetworkConfig(base_channels=0)
        with pytest.raises(ValueError):
            NetworkConfig(upscale=3)
        with pytest.raises(ValueError):
            NetworkConfig(k_epi=(4, 4))
        with pytest.raises(ValueError):
            NetworkConfig(lambda_per=-0.1)
        with pytest.raises(ValueError):
            TrainConfig(iters=10, lr_start=1e-7, lr_end=1e-4)
        with pytest.raises(ValueError):
            TrainConfig(iters=0)

    def test_derived_fields(self):
        cfg = NetworkConfig(base_channels=16)
        assert cfg.block_channels == (16, 32, 64)
        assert cfg.strides == (1, 2, 4)


class TestRetBlock:
    def test_est_zero_gives_residual_identity(self):
        rng = np.random.default_rng(0)
        blk = RetBlock("b", 1, 4, 3, 1, rng, pool=False, use_est=True)
        x = Tensor(np.random.default_rng(1).uniform(size=(8, 8, 1))
                   .astype(np.float32))
        aux = [Tensor(np.random.default_rng(2).uniform(size=(8, 8, 1))
                      .astype(np.float32)) for _ in range(2)]
        grid = random_grid(8, 2, 3, np.random.default_rng(3))
        grid.valid[:] = False  # no valid samples anywhere -> EST contributes 0
        out = ret_block(x, aux, grid, blk)
        fx = ad.relu(blk.feat(x))
        expect = ad.add(fx, blk.r2(ad.relu(blk.r1(fx))))
        assert np.array_equal(out.data, expect.data)

    def test_stride2_shapes(self):
        rng = np.random.default_rng(0)
        blk = RetBlock("b", 8, 16, 4, 1, rng, pool=True, use_est=True)
        x = Tensor(np.random.default_rng(1).uniform(size=(32, 32, 8))
                   .astype(np.float32))
        aux = [Tensor(np.random.default_rng(2).uniform(size=(32, 32, 8))
                      .astype(np.float32))]
        grid = random_grid(16, 1, 4, np.random.default_rng(3))
        out, fa, _ = blk.forward(x, aux, grid)
        assert out.data.shape == (16, 16, 16)
        assert fa[0].data.shape == (16, 16, 16)

    def test_compositional_oracle(self):
        rng = np.random.default_rng(7)
        blk = RetBlock("b", 1, 4, 3, 1, rng, pool=False, use_est=True)
        data_rng = np.random.default_rng(8)
        x = Tensor(data_rng.uniform(size=(6, 6, 1)).astype(np.float32))
        aux = [Tensor(data_rng.uniform(size=(6, 6, 1)).astype(np.float32))
               for _ in range(2)]
        grid = random_grid(6, 2, 3, np.random.default_rng(9), all_valid=False)
        out = ret_block(x, aux, grid, blk)
        fx = ad.relu(blk.feat(x))
        fa = [ad.relu(blk.feat(a)) for a in aux]
        q = ad.reshape(blk.est_features(fx), (36, 5))
        fan = [blk.est_features(a) for a in fa]
        fused, _ = blk.est.forward(q, fan, grid)
        fused = ad.matmul(fused, blk._sel)
        x1 = ad.add(fx, ad.reshape(fused, (6, 6, 4)))
        expect = ad.add(x1, blk.r2(ad.relu(blk.r1(x1))))
        assert np.array_equal(out.data, expect.data)


class TestSip:
    def test_zero_image_bias_only(self):
        net = SRNet(MICRO)
        feats = net.sip_features(np.zeros((8, 8)))
        for f in feats:
            assert np.all(np.isfinite(f.data))
            assert np.all(f.data == 0.0)  # biases start at zero

    def test_shape_pyramid(self):
        net = SRNet(NetworkConfig(base_channels=8, n_ref=2, k_epi=(3, 3, 3)))
        feats = net.sip_features(np.random.default_rng(0).uniform(size=(16, 16)))
        shapes = [f.data.shape for f in feats]
        assert shapes == [(16, 16, 8), (8, 8, 16), (4, 4, 32)]

    def test_deterministic(self):
        net = SRNet(MICRO)
        img = np.random.default_rng(1).uniform(size=(8, 8))
        a = net.sip_features(img)
        b = net.sip_features(img)
        for fa, fb in zip(a, b):
            assert np.array_equal(fa.data, fb.data)


class TestDecode:
    def test_all_zero_parameters_give_bicubic(self):
        net = SRNet(MICRO)
        net.load_state({k: np.zeros_like(v) for k, v in net.state().items()})
        rng = np.random.default_rng(3)
        lr = rng.uniform(size=(8, 8)).astype(np.float32)
        auxs = [rng.uniform(size=(8, 8)).astype(np.float32) for _ in range(2)]
        grids = micro_grids(np.random.default_rng(4))
        sr, _ = net.forward(lr, auxs, grids)
        expect = resample.upsample_bicubic(lr, 2)
        assert np.array_equal(sr.data[:, :, 0], expect)

    def test_fresh_network_is_bicubic(self):
        # only the head starts at zero; that alone pins the output
        net = SRNet(MICRO)
        rng = np.random.default_rng(5)
        lr = rng.uniform(size=(8, 8)).astype(np.float32)
        auxs = [rng.uniform(size=(8, 8)).astype(np.float32) for _ in range(2)]
        sr, _ = net.forward(lr, auxs, micro_grids(np.random.default_rng(6)))
        assert np.array_equal(sr.data[:, :, 0], resample.upsample_bicubic(lr, 2))

    def test_upscale4_shape(self):
        cfg = NetworkConfig(base_channels=4, n_ref=2, k_epi=(3, 3, 3),
                            upscale=4, use_est=False)
        net = SRNet(cfg)
        sr, _ = net.forward(np.zeros((32, 32)), [])
        assert sr.data.shape == (128, 128, 1)

    def test_aux_count_checked(self):
        net = SRNet(MICRO)
        with pytest.raises(ad.ShapeMismatchError):
            net.forward(np.zeros((8, 8)), [np.zeros((8, 8))],
                        micro_grids(np.random.default_rng(0)))

    def test_gradient_reaches_every_parameter(self):
        net = SRNet(MICRO)
        rng = np.random.default_rng(11)
        # the zero-initialised head blocks gradient flow to everything
        # upstream of it; give it real weights so connectivity shows
        net.head.w.data = rng.normal(
            size=net.head.w.data.shape).astype(np.float32) * 0.1
        lr = rng.uniform(size=(8, 8))
        auxs = [rng.uniform(size=(8, 8)) for _ in range(2)]
        hr = rng.uniform(size=(16, 16))
        sr, _ = net.forward(lr, auxs, micro_grids(np.random.default_rng(12)))
        loss_sr(sr, hr, MICRO).backward()
        for p in net.parameters():
            assert p.tensor.grad is not None, p.name
            assert np.any(p.tensor.grad != 0.0), p.name


class TestLoss:
    def test_identical_zero(self):
        img = np.random.default_rng(0).uniform(size=(8, 8))
        assert float(loss_sr(img, img).data) == 0.0

    def test_constant_offset(self):
        a = Tensor(np.full((8, 8), 0.5))
        b = Tensor(np.full((8, 8), 0.6))
        assert float(loss_sr(a, b).data) == pytest.approx(0.1, abs=1e-9)

    def test_perceptual_term_recomputation(self):
        rng = np.random.default_rng(1)
        a = rng.uniform(size=(10, 10))
        b = rng.uniform(size=(10, 10))
        cfg = NetworkConfig(base_channels=4, n_ref=2, k_epi=(3, 3, 3),
                            lambda_per=0.3)
        got = float(loss_sr(Tensor(a), Tensor(b), cfg).data)

        def gm(x):
            dx = x[1:-1, 2:] - x[1:-1, 1:-1]
            dy = x[2:, 1:-1] - x[1:-1, 1:-1]
            return np.abs(dx) + np.abs(dy)

        expect = np.mean(np.abs(a - b)) + 0.3 * np.mean(np.abs(gm(a) - gm(b)))
        assert got == pytest.approx(expect, abs=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            loss_sr(np.zeros((8, 8)), np.zeros((10, 10)))


class TestSchedule:
    def test_endpoints_exact(self):
        cfg = TrainConfig(iters=500)
        assert cosine_lr(0, cfg) == 1e-4
        assert cosine_lr(499, cfg) == 1e-7

    def test_midpoint_formula(self):
        cfg = TrainConfig(iters=101)
        expect = 1e-7 + (1e-4 - 1e-7) * (1 + math.cos(math.pi / 2)) / 2
        assert cosine_lr(50, cfg) == expect

    def test_monotone(self):
        cfg = TrainConfig(iters=64)
        vals = [cosine_lr(i, cfg) for i in range(64)]
        assert all(x >= y for x, y in zip(vals, vals[1:]))

    def test_single_iteration(self):
        assert cosine_lr(0, TrainConfig(iters=1)) == 1e-4


class TestMetrics:
    def test_identical_images(self):
        img = np.random.default_rng(0).uniform(size=(32, 32))
        assert psnr(img, img) == float("inf")
        assert ssim(img, img) == 1.0

    def test_uniform_offset_psnr(self):
        a = np.full((16, 16), 0.4)
        b = np.full((16, 16), 0.5)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)

    def test_ssim_of_inverted_grating_negative(self):
        # high-contrast pattern so the covariance term dominates the
        # stabilising constants; inverting it flips the structure sign
        x = np.arange(48)
        img = 0.5 + 0.4 * np.sin(2.0 * np.pi * x / 8.0)[None, :] * np.ones((48, 1))
        assert ssim(img, 1.0 - img) < 0.0

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeMismatchError):
            psnr(np.zeros((4, 4)), np.zeros((5, 5)))
        with pytest.raises(ad.ShapeMismatchError):
            ssim(np.zeros((4, 4)), np.zeros((5, 5)))


class TestGradCheckMicro:
    def test_end_to_end(self):
        cfg = NetworkConfig(base_channels=4, n_ref=2, k_epi=(3, 3, 3),
                            lambda_per=0.25, seed=0)
        net = SRNet(cfg)
        grids = micro_grids(np.random.default_rng(20))
        rng = np.random.default_rng(21)
        hr = rng.uniform(size=(16, 16))

        def f(img, aux0, aux1, fw, wq, wav, sw, f0w, hw_):
            net.blocks[0].feat.w = fw
            net.blocks[0].est.w_q = wq
            net.blocks[0].est.w_av = wav
            net.sip0.w = sw
            net.fuse0.w = f0w
            net.head.w = hw_
            sr, _ = net.forward(img, [aux0, aux1], grids)
            return loss_sr(sr, hr, cfg)

        inputs = [
            rng.uniform(size=(8, 8)),
            rng.uniform(size=(8, 8)),
            rng.uniform(size=(8, 8)),
            rng.uniform(-0.3, 0.3, size=(7, 7, 1, 4)),
            rng.uniform(-0.3, 0.3, size=(5, 5)),
            rng.uniform(-0.3, 0.3, size=(5, 5)),
            rng.uniform(-0.3, 0.3, size=(3, 3, 1, 4)),
            rng.uniform(-0.3, 0.3, size=(1, 1, 12, 4)),
            rng.uniform(-0.1, 0.1, size=(3, 3, 4, 4)),
        ]
        err = ad.grad_check(f, inputs)
        assert err < 1e-4


@pytest.fixture(scope="module")
def smoke_scene():
    return synth.build_scene(n=8, width=32, height=32, factor=2,
                             elevation=1.0, seed=1)


SMOKE_NET = NetworkConfig(base_channels=8, n_ref=2, k_epi=(8, 6, 4), seed=3)


class TestTraining:
    def test_smoke_run_loss_decreases(self, smoke_scene, tmp_path):
        losses = []
        net = train(smoke_scene, SMOKE_NET,
                    TrainConfig(iters=200, checkpoint_every=100),
                    tmp_path / "run", holdout=(0,),
                    progress=lambda i, lr, lo: losses.append(lo))
        assert len(losses) == 200
        assert np.median(losses[-50:]) < np.median(losses[:50])
        lines = (tmp_path / "run" / "metrics.csv").read_text().splitlines()
        assert lines[0] == "iter,lr,loss,psnr"
        assert len(lines) == 201
        assert (tmp_path / "run" / "checkpoint" / "manifest.json").exists()
        # checkpoint rows carry a PSNR, the others do not
        assert lines[100].split(",")[3] != ""
        assert lines[1].split(",")[3] == ""
        reloaded = net_from_checkpoint(tmp_path / "run" / "checkpoint")
        for a, b in zip(net.parameters(), reloaded.parameters()):
            assert np.array_equal(a.tensor.data, b.tensor.data), a.name

    def test_two_runs_identical(self, smoke_scene, tmp_path):
        cfg = TrainConfig(iters=5, checkpoint_every=5)
        for name in ("a", "b"):
            train(smoke_scene, SMOKE_NET, cfg, tmp_path / name, holdout=(0,))
        ma = (tmp_path / "a" / "metrics.csv").read_bytes()
        mb = (tmp_path / "b" / "metrics.csv").read_bytes()
        assert ma == mb
        for f in sorted((tmp_path / "a" / "checkpoint").iterdir()):
            twin = tmp_path / "b" / "checkpoint" / f.name
            assert f.read_bytes() == twin.read_bytes(), f.name

    def test_nonfinite_loss_aborts_with_dump(self, smoke_scene, tmp_path,
                                             monkeypatch):
        def bad_loss(pred, gt, cfg=None):
            return Tensor(np.asarray(np.nan))

        monkeypatch.setattr(srnet, "loss_sr", bad_loss)
        with pytest.raises(NonFiniteLossError):
            train(smoke_scene, SMOKE_NET, TrainConfig(iters=3),
                  tmp_path / "run", holdout=(0,))
        report = json.loads((tmp_path / "run" / "diagnostics.json").read_text())
        assert report["iteration"] == 0
        assert "parameters" in report

    def test_est_ablation_ignores_aux(self):
        cfg = NetworkConfig(base_channels=4, n_ref=2, k_epi=(3, 3, 3),
                            use_est=False, seed=2)
        net = SRNet(cfg)
        rng = np.random.default_rng(0)
        lr = rng.uniform(size=(8, 8))
        aux_a = [rng.uniform(size=(8, 8)) for _ in range(2)]
        aux_b = [rng.uniform(size=(8, 8)) for _ in range(2)]
        out_a, _ = net.forward(lr, aux_a)
        out_b, _ = net.forward(lr, aux_b)
        assert np.array_equal(out_a.data, out_b.data)

    def test_holdout_never_used_as_aux(self, smoke_scene):
        data, train_views, holdout = scene_training_data(
            smoke_scene, SMOKE_NET, holdout=(0, 5))
        assert holdout == [0, 5]
        assert 0 not in train_views and 5 not in train_views
        for vid, d in data.items():
            assert 0 not in d["aux"] and 5 not in d["aux"]
        assert set(data) == set(train_views) | {0, 5}


class TestCheckpointFiles:
    def test_overwrite_is_clean(self, tmp_path):
        net = SRNet(MICRO)
        srnet.save_checkpoint(net, tmp_path / "ck", 1)
        first = sorted(p.name for p in (tmp_path / "ck").iterdir())
        srnet.save_checkpoint(net, tmp_path / "ck", 2)
        second = sorted(p.name for p in (tmp_path / "ck").iterdir())
        assert first == second
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        assert manifest["iteration"] == 2
        assert manifest["schema"] == 1
        names = {p.name for p in net.parameters()}
        assert set(manifest["parameters"]) == names

    def test_missing_parameter_rejected(self, tmp_path):
        net = SRNet(MICRO)
        srnet.save_checkpoint(net, tmp_path / "ck", 1)
        manifest = json.loads((tmp_path / "ck" / "manifest.json").read_text())
        manifest["parameters"] = manifest["parameters"][:-1]
        (tmp_path / "ck" / "manifest.json").write_text(json.dumps(manifest))
        with pytest.raises(KeyError):
            net_from_checkpoint(tmp_path / "ck")
