import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nlqformer.config import Config, ModelConfig, TrainConfig
from nlqformer.data import SyntheticSpec, load_dataset, synthesize
from nlqformer.model import GroundingModel
from nlqformer.trainer import (
    NonFiniteGradient,
    OptimState,
    Schedule,
    adamw_step,
    clip_grad_norm,
    fit,
    load_checkpoint,
    load_model,
    lr_at,
    save_checkpoint,
)


class TestSchedule:
    sched = Schedule(1e-3, 10, 110)

    def test_peak_at_warmup_end(self):
        assert lr_at(10, self.sched) == pytest.approx(1e-3)

    def test_final_is_zero(self):
        assert lr_at(110, self.sched) == pytest.approx(0.0, abs=1e-18)

    def test_midpoint(self):
        assert lr_at(60, self.sched) == pytest.approx(0.5e-3)

    def test_warmup_linear(self):
        assert lr_at(0, self.sched) == pytest.approx(1e-4)
        assert lr_at(4, self.sched) == pytest.approx(5e-4)

    @given(st.integers(0, 110))
    def test_bounded(self, step):
        assert 0.0 <= lr_at(step, self.sched) <= 1e-3 + 1e-18

    def test_invalid(self):
        with pytest.raises(ValueError):
            Schedule(1e-3, 5, 5)
        with pytest.raises(ValueError):
            lr_at(111, self.sched)


class TestAdamW:
    def test_first_step(self):
        p, st_ = adamw_step({"w": np.array([1.0])}, {"w": np.array([1.0])}, OptimState(), 0.1)
        assert p["w"][0] == pytest.approx(0.9, abs=1e-6)
        assert st_.step == 1

    def test_zero_gradient_no_decay(self):
        w = np.array([[0.3, -2.0]])
        p, _ = adamw_step({"w": w}, {"w": np.zeros_like(w)}, OptimState(), 0.1)
        np.testing.assert_array_equal(p["w"], w)

    def test_decoupled_decay_on_matrix(self):
        w = np.array([[0.3, -2.0], [1.0, 4.0]])
        p, _ = adamw_step({"w": w}, {"w": np.zeros_like(w)}, OptimState(weight_decay=0.1), 0.1)
        np.testing.assert_allclose(p["w"], w * (1 - 0.01), rtol=1e-15)

    def test_no_decay_on_vectors(self):
        b = np.array([0.5, 1.0])
        p, _ = adamw_step({"b": b}, {"b": np.zeros_like(b)}, OptimState(weight_decay=0.1), 0.1)
        np.testing.assert_array_equal(p["b"], b)

    def test_non_finite_rejected(self):
        with pytest.raises(NonFiniteGradient):
            adamw_step({"w": np.ones(2)}, {"w": np.array([1.0, np.inf])}, OptimState(), 0.1)

    def test_state_shapes(self):
        params = {"a": np.ones((2, 3)), "b": np.ones(3)}
        _, s = adamw_step(params, {k: np.ones_like(v) for k, v in params.items()}, OptimState(), 1e-3)
        assert all(s.m[k].shape == v.shape and s.v[k].shape == v.shape for k, v in params.items())

    def test_clip(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
        assert math.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0, rel=1e-5)


def tiny_config(**train) -> Config:
    model = ModelConfig(input_dim=16, text_dim=16, embed_dim=16, num_heads=2, window=5, mlp_ratio=2)
    return Config(model=model, train=TrainConfig(**({"epochs": 2, "batch_size": 8} | train)))


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    synthesize(SyntheticSpec(num_clips=12, min_length=40, max_length=72), out)
    return load_dataset(out)


class TestCheckpoint:
    def test_round_trip_forward_bitwise(self, tmp_path, small_dataset):
        cfg = tiny_config()
        model = GroundingModel(cfg.model, seed=3)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, model.state_dict(), OptimState(step=4), {"config": cfg.to_dict()})
        loaded, cfg2 = load_model(path)
        assert cfg2 == cfg
        s = small_dataset[0]
        a = model(s.features, np.ones(len(s.features), bool), s.tokens, np.ones(len(s.tokens), bool))
        b = loaded(s.features, np.ones(len(s.features), bool), s.tokens, np.ones(len(s.tokens), bool))
        for x, y in zip(a.heads.cls_logits + a.heads.offsets, b.heads.cls_logits + b.heads.offsets):
            assert x.data.tobytes() == y.data.tobytes()

    def test_optimizer_state_kept(self, tmp_path):
        params = {"w": np.ones((2, 2), np.float32)}
        optim = OptimState({"w": np.full((2, 2), 0.5, np.float32)}, {"w": np.full((2, 2), 0.25, np.float32)}, 7)
        save_checkpoint(tmp_path / "c", params, optim, {"x": 1})
        p, o, meta = load_checkpoint(tmp_path / "c")
        assert o.step == 7 and meta == {"x": 1}
        np.testing.assert_array_equal(o.m["w"], optim.m["w"])
        np.testing.assert_array_equal(p["w"], params["w"])

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c").write_bytes(b"NOPE" + b"\0" * 8)
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(tmp_path / "c")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "c", {"w": np.ones((4, 4), np.float32)})
        blob = (tmp_path / "c").read_bytes()
        (tmp_path / "c").write_bytes(blob[:-3])
        with pytest.raises(ValueError, match="truncated"):
            load_checkpoint(tmp_path / "c")


class TestFit:
    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            fit(tiny_config(), [])

    def test_deterministic(self, small_dataset, tmp_path):
        a = fit(tiny_config(), small_dataset, out=tmp_path / "a.ckpt")
        b = fit(tiny_config(), small_dataset, out=tmp_path / "b.ckpt")
        assert a.epoch_losses == b.epoch_losses
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
        assert (tmp_path / "a.ckpt.best").exists()

    def test_loss_decreases(self, small_dataset):
        result = fit(tiny_config(epochs=8), small_dataset)
        first, last = result.epoch_losses[0]["total"], result.epoch_losses[-1]["total"]
        assert np.isfinite(last) and last < first


class TestConfig:
    def test_json_round_trip(self, tmp_path):
        cfg = tiny_config(seed=5)
        (tmp_path / "c.json").write_text(__import__("json").dumps(cfg.to_dict()))
        assert Config.load(tmp_path / "c.json") == cfg

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError):
            Config.from_dict({"train": {"nope": 1}})

    @pytest.mark.parametrize("kwargs", [dict(embed_dim=10, num_heads=3), dict(window=4),
                                        dict(num_downsample=7), dict(num_downsample=4)])
    def test_invalid_model(self, kwargs):
        with pytest.raises(ValueError):
            ModelConfig(**kwargs)
