import json

import numpy as np
import pytest

from rgbx_depth import autodiff as ad
from rgbx_depth import harness, imageio
from rgbx_depth.augment import AugmentConfig
from rgbx_depth.checkpoint import load_checkpoint, save_checkpoint
from rgbx_depth.cli import main
from rgbx_depth.fields import DepthField
from rgbx_depth.harness import (EvalConfig, TrainConfig, evaluate, fill_nearest, infer,
                                infer_arrays, nearest_valid_shape, train)
from rgbx_depth.optim import AdamWState, cosine_factor, optimizer_step
from rgbx_depth.synthscenes import generate_split
from rgbx_depth.unet import NetConfig, UNet, init_weights

SMALL_NET = NetConfig(levels=2, base_channels=4, blocks_per_level=1)


def small_config(**kw):
    base = dict(epochs=1, batch_size=4, net=SMALL_NET, augment=AugmentConfig(target_height=32),
                val_levels=(0.0, 1.0))
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def scenes32():
    return generate_split(12, 0, size=(32, 32))


class TestOptimizer:
    def test_first_step_is_lr_sign(self):
        p = ad.Tensor(np.array(1.0))
        optimizer_step([p], [np.array(1.0)], AdamWState(), lr=0.1, weight_decay=0.0)
        assert p.data == pytest.approx(0.9, abs=1e-6)

    def test_zero_grad_no_decay_is_noop(self):
        p = ad.Tensor(np.arange(4.0))
        state = AdamWState()
        for _ in range(3):
            optimizer_step([p], [np.zeros(4)], state, lr=0.1, weight_decay=0.0)
        assert np.array_equal(p.data, np.arange(4.0))

    def test_decoupled_decay(self):
        p = ad.Tensor(np.array([2.0]))
        optimizer_step([p], [np.zeros(1)], AdamWState(), lr=0.1, weight_decay=0.5)
        assert p.data[0] == pytest.approx(2.0 * (1 - 0.05))

    def test_schedule_scales_step(self):
        p = ad.Tensor(np.array(1.0))
        optimizer_step([p], [np.array(1.0)], AdamWState(), lr=0.1, weight_decay=0.0, schedule=0.5)
        assert p.data == pytest.approx(0.95, abs=1e-6)

    def test_nonfinite_skipped(self, caplog):
        p = ad.Tensor(np.ones(3))
        state = AdamWState()
        assert not optimizer_step([p], [np.array([1.0, np.nan, 0.0])], state)
        assert np.array_equal(p.data, np.ones(3)) and state.t == 0 and state.skipped == 1
        assert "non-finite" in caplog.text

    @pytest.mark.parametrize("step, expected", [(0, 1.0), (50, 0.5), (100, 0.0)])
    def test_cosine(self, step, expected):
        assert cosine_factor(step, 100) == pytest.approx(expected, abs=1e-12)

    def test_final_factor_near_zero(self):
        assert cosine_factor(1999, 2000) < 1e-5


class TestConfigs:
    def test_train_defaults(self):
        cfg = TrainConfig()
        assert (cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay) == (2e-4, 0.9, 0.999, 1e-2)

    @pytest.mark.parametrize("kw", [{"lr": 0.0}, {"beta1": 1.0}, {"beta2": -0.1},
                                    {"batch_size": 0}])
    def test_train_rejects(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_train_dict_round_trip(self):
        cfg = small_config(seed=3)
        again = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert again == cfg

    @pytest.mark.parametrize("levels", [(0.1, 0.01), (0.0, 0.0), (-0.1, 1.0), (0.5, 1.5), ()])
    def test_eval_rejects(self, levels):
        with pytest.raises(ValueError):
            EvalConfig(sparsity_levels=levels)

    def test_eval_unknown_metric(self):
        with pytest.raises(ValueError):
            EvalConfig(metrics=("rmse", "delta1"))


class TestTrain:
    def test_zero_epochs_is_init(self, scenes32, tmp_path):
        cfg = small_config(epochs=0)
        path = tmp_path / "init.ckpt"
        result = train(scenes32, scenes32[:2], cfg, checkpoint_path=str(path))
        loaded, meta = load_checkpoint(str(path))
        ref = init_weights(UNet(SMALL_NET), cfg.seed)
        assert result.steps == 0 and meta["steps"] == 0
        assert all(np.array_equal(p.data, q.data)
                   for p, q in zip(loaded.parameters(), ref.parameters()))

    def test_same_seed_same_log(self, scenes32, tmp_path):
        cfg = small_config(epochs=2, max_steps=5)
        train(scenes32, scenes32[:2], cfg, log_path=str(tmp_path / "a.jsonl"))
        train(scenes32, scenes32[:2], cfg, log_path=str(tmp_path / "b.jsonl"))
        a, b = (tmp_path / "a.jsonl").read_bytes(), (tmp_path / "b.jsonl").read_bytes()
        assert a == b
        lines = [json.loads(line) for line in a.splitlines()]
        assert lines[0]["config"]["seed"] == 0 and lines[0]["total_steps"] == 5
        assert [e["steps"] for e in lines[1:]] == [3, 5]
        assert all("time" not in k for e in lines for k in e)

    def test_different_seed_differs(self, scenes32):
        a = train(scenes32, [], small_config(max_steps=2, seed=0))
        b = train(scenes32, [], small_config(max_steps=2, seed=1))
        assert a.log[1]["train_loss"] != b.log[1]["train_loss"]

    def test_empty_split(self):
        with pytest.raises(ValueError):
            train([], [], small_config())

    def test_divergence_aborts(self, scenes32, monkeypatch):
        real = harness.batch_loss

        def blown_up(*args):
            loss, parts = real(*args)
            return loss * np.inf, parts

        monkeypatch.setattr(harness, "batch_loss", blown_up)
        with pytest.raises(RuntimeError, match="diverged"):
            train(scenes32, [], small_config(max_steps=2))

    @pytest.mark.slow
    def test_loss_halves_in_200_steps(self):
        # 32 scenes, batch 4: 25 epochs of 8 steps
        split = generate_split(32, 4, size=(32, 32))
        cfg = small_config(epochs=25, lr=2e-3, net=NetConfig(levels=2, base_channels=8,
                                                             blocks_per_level=1))
        result = train(split, [], cfg)
        losses = [e["train_loss"] for e in result.log[1:]]
        assert result.steps == 200
        assert losses[-1] < 0.5 * losses[0]


class TestEvaluate:
    def test_copy_through_full_density(self, scenes32):
        table = evaluate(lambda rgb, x: x.values, scenes32[:4],
                         EvalConfig(sparsity_levels=(1.0,), target_height=32))
        assert table[0]["rmse"] == 0.0 and table[0]["valid_fraction"] == 1.0

    def test_rows_follow_levels(self, scenes32):
        levels = (0.0, 0.05, 0.5)
        table = evaluate(lambda rgb, x: fill_nearest(x), scenes32[:3],
                         EvalConfig(sparsity_levels=levels, target_height=32,
                                    metrics=("rmse", "oe")))
        assert [row["sparsity"] for row in table] == list(levels)
        assert list(table[0]) == ["sparsity", "scenes", "valid_fraction", "rmse", "oe"]

    def test_fill_oracle_monotone(self, scenes32):
        table = evaluate(lambda rgb, x: fill_nearest(x), scenes32,
                         EvalConfig(target_height=32))
        for name in ("rmse", "abs_rel", "oe"):
            values = [row[name] for row in table]
            assert all(a >= b for a, b in zip(values, values[1:])), (name, values)

    def test_accepts_unet_and_checkpoint(self, scenes32, tmp_path):
        net = init_weights(UNet(SMALL_NET), 1)
        path = tmp_path / "n.ckpt"
        save_checkpoint(str(path), net)
        cfg = EvalConfig(sparsity_levels=(0.0, 1.0), target_height=32)
        assert evaluate(net, scenes32[:2], cfg) == evaluate(str(path), scenes32[:2], cfg)

    def test_rejects_other_models(self, scenes32):
        with pytest.raises(TypeError):
            evaluate(42, scenes32[:1], EvalConfig(target_height=32))

    def test_fill_nearest(self):
        x = DepthField(np.array([[0.0, 0.0, 3.0]]), np.array([[False, False, True]]))
        assert fill_nearest(x).tolist() == [[3.0, 3.0, 3.0]]
        assert np.all(fill_nearest(DepthField.empty((2, 2)), default=0.5) == 0.5)


class TestInfer:
    @pytest.fixture
    def ckpt(self, tmp_path):
        path = tmp_path / "n.ckpt"
        net = init_weights(UNet(SMALL_NET), 2)
        for block in net.blocks():
            block.alpha.data[...] = 0.2
        save_checkpoint(str(path), net)
        return str(path)

    def test_shape_and_bytes(self, ckpt, tmp_path):
        rng = np.random.default_rng(0)
        imageio.write_ppm(tmp_path / "a.ppm", rng.random((21, 30, 3)))
        imageio.write_pfm(tmp_path / "x.pfm", np.where(rng.random((21, 30)) < 0.1, 4.0, -1.0))
        outs = []
        for k in range(2):
            out = tmp_path / f"d{k}.pfm"
            pred = infer(ckpt, str(tmp_path / "a.ppm"), str(tmp_path / "x.pfm"), str(out))
            assert pred.shape == (21, 30)
            outs.append(out.read_bytes())
        assert outs[0] == outs[1]

    def test_without_x_is_empty_x(self, ckpt, tmp_path):
        rgb = np.random.default_rng(1).random((16, 16, 3))
        imageio.write_ppm(tmp_path / "a.ppm", rgb)
        net, _ = load_checkpoint(ckpt)
        pred = infer(ckpt, str(tmp_path / "a.ppm"))
        expected = infer_arrays(net, imageio.read_ppm(tmp_path / "a.ppm"),
                                DepthField.empty((16, 16)))
        assert np.array_equal(pred, expected)

    def test_x_scale_restored(self, ckpt):
        net, _ = load_checkpoint(ckpt)
        rgb = np.random.default_rng(2).random((16, 16, 3))
        x = DepthField(np.full((16, 16), 0.5), np.random.default_rng(3).random((16, 16)) < 0.2)
        a = infer_arrays(net, rgb, x)
        b = infer_arrays(net, rgb, DepthField(x.values * 40.0, x.valid))
        np.testing.assert_allclose(b, 40.0 * a, rtol=1e-12)

    def test_size_rules(self):
        assert nearest_valid_shape((21, 30), 4) == (20, 32)
        with pytest.raises(ValueError):
            nearest_valid_shape((3, 30), 4)

    def test_mismatched_x(self, ckpt):
        net, _ = load_checkpoint(ckpt)
        with pytest.raises(ValueError):
            infer_arrays(net, np.zeros((16, 16, 3)), DepthField.empty((8, 8)))


class TestCLI:
    def test_synth_augment_train_eval_infer(self, tmp_path):
        data, aug = tmp_path / "data", tmp_path / "aug"
        assert main(["synth", "--n", "6", "--out", str(data), "--seed", "1", "--size", "32"]) == 0
        assert len(imageio.list_stems(data)) == 6

        cfg = tmp_path / "aug.json"
        cfg.write_text(json.dumps({"target_height": 32}))
        assert main(["augment", "--in", str(data), "--out", str(aug), "--config", str(cfg)]) == 0
        rgb, gt, x = imageio.read_scene(aug, "scene_00000")
        assert x is not None and not np.any(x.valid & ~gt.valid)

        tcfg = tmp_path / "train.json"
        tcfg.write_text(json.dumps(small_config(max_steps=2, val_fraction=0.2).to_dict()))
        ckpt, log = tmp_path / "m.ckpt", tmp_path / "log.jsonl"
        assert main(["train", "--data", str(data), "--config", str(tcfg), "--out", str(ckpt),
                     "--log", str(log)]) == 0
        assert ckpt.exists() and log.read_text().count("\n") == 2

        report = tmp_path / "r.json"
        assert main(["eval", "--ckpt", str(ckpt), "--data", str(data), "--sparsity", "0,1",
                     "--report", str(report)]) == 0
        body = json.loads(report.read_text())
        assert body["levels"] == [0.0, 1.0] and len(body["rows"]) == 2

        out = tmp_path / "d.pfm"
        assert main(["infer", "--ckpt", str(ckpt), "--rgb", str(data / "scene_00000_rgb.ppm"),
                     "--out", str(out)]) == 0
        assert imageio.read_pfm(out).shape == (32, 32)

    def test_missing_checkpoint_is_io_error(self, tmp_path):
        main(["synth", "--n", "1", "--out", str(tmp_path), "--size", "16"])
        code = main(["eval", "--ckpt", str(tmp_path / "none.ckpt"), "--data", str(tmp_path),
                     "--report", str(tmp_path / "r.json")])
        assert code == 2

    def test_bad_levels_is_validation_error(self, tmp_path):
        main(["synth", "--n", "1", "--out", str(tmp_path), "--size", "16"])
        net = init_weights(UNet(SMALL_NET), 0)
        save_checkpoint(str(tmp_path / "m.ckpt"), net)
        code = main(["eval", "--ckpt", str(tmp_path / "m.ckpt"), "--data", str(tmp_path),
                     "--sparsity", "1,0", "--report", str(tmp_path / "r.json")])
        assert code == 1

    def test_empty_data_dir(self, tmp_path):
        assert main(["train", "--data", str(tmp_path), "--out", str(tmp_path / "m.ckpt")]) == 1

    def test_missing_rgb(self, tmp_path):
        save_checkpoint(str(tmp_path / "m.ckpt"), init_weights(UNet(SMALL_NET), 0))
        assert main(["infer", "--ckpt", str(tmp_path / "m.ckpt"), "--rgb",
                     str(tmp_path / "none.ppm"), "--out", str(tmp_path / "o.pfm")]) == 2

    def test_selftest(self):
        assert main(["selftest"]) == 0
