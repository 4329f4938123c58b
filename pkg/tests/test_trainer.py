import dataclasses
import json
import os

import numpy as np
import pytest

import exvid.tensor as T
from exvid import checkpoint as ckpt
from exvid import trainer
from exvid.data import MovingShapesDataset
from exvid.diffusion import training_loss
from exvid.model import classify_params
from exvid.tensor import Tensor


class TwoParamModel:
    """Duck-typed stand-in with a hand-checkable forward: scale * x + shift."""

    frame_capacity = 2

    def __init__(self):
        self.scale = Tensor(np.array([1.5], dtype=np.float32), requires_grad=True)
        self.shift = Tensor(np.array([-0.25], dtype=np.float32), requires_grad=True)

    def named_parameters(self):
        return {"probe.temporal.scale": self.scale, "probe.temporal.shift": self.shift}

    def trainable_parameters(self):
        return {n: p for n, p in self.named_parameters().items() if p.requires_grad}

    def forward(self, video, first_frame, t, grad_checkpoint=False):
        return T.add(T.mul(video, self.scale), self.shift)


def probe_batch(seed, b=1, t=2):
    rng = np.random.default_rng(seed)
    video = rng.standard_normal((b, t, 1, 2, 2), dtype=np.float32)
    return {"video": Tensor(video), "first_frame": Tensor(video[:, 0].copy())}


@pytest.fixture
def tiny_dataset(tiny_config):
    return MovingShapesDataset(frames=tiny_config.base_frames, height=tiny_config.height,
                               width=tiny_config.width, channels=tiny_config.video_channels)


class TestTrainConfig:
    @pytest.mark.parametrize("kwargs", [
        dict(max_steps=0),
        dict(max_steps=1, lr=0.0),
        dict(max_steps=1, batch_size=0),
        dict(max_steps=1, ema_decay=1.0),
        dict(max_steps=1, ema_decay=-0.1),
        dict(max_steps=1, checkpoint_every=0),
    ])
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            trainer.TrainConfig(**kwargs)

    def test_defaults_follow_training_regime(self):
        config = trainer.TrainConfig(max_steps=1)
        assert config.lr == 1e-5
        assert config.batch_size == 1
        assert config.ema_decay == 0.999
        assert config.gradient_checkpointing is True
        assert config.mixed_precision is False


class TestFreezing:
    def test_mask_is_total_and_matches_classification(self, tiny_model):
        mask = trainer.freeze_non_temporal(tiny_model)
        params = tiny_model.named_parameters()
        assert set(mask) == set(params)
        temporal = classify_params(tiny_model)["temporal"]
        for name, p in params.items():
            assert mask[name] == (name in temporal)
            assert p.requires_grad == (name in temporal)

    def test_spatial_grads_absent_temporal_present(self, tiny_model, tiny_batch):
        trainer.freeze_non_temporal(tiny_model)
        loss = training_loss(tiny_model, tiny_batch, np.random.default_rng(0))
        loss.backward()
        temporal = classify_params(tiny_model)["temporal"]
        for name, p in tiny_model.named_parameters().items():
            if name in temporal:
                assert p.grad is not None, name
            else:
                assert p.grad is None, name

    def test_spatial_bytes_never_move(self, tiny_model, tiny_dataset, tmp_path):
        config = trainer.TrainConfig(max_steps=3, lr=1e-2, seed=1, checkpoint_every=100)
        temporal = classify_params(tiny_model)["temporal"]
        before = {n: p.data.tobytes() for n, p in tiny_model.named_parameters().items()
                  if n not in temporal}
        trainer.train_loop(tiny_model, tiny_dataset, config, str(tmp_path / "run"))
        after = {n: p.data.tobytes() for n, p in tiny_model.named_parameters().items()
                 if n not in temporal}
        assert before == after

    def test_optimizer_state_only_for_trainable(self, tiny_model, tiny_batch):
        config = trainer.TrainConfig(max_steps=2, lr=1e-3)
        state = trainer.init_state(tiny_model, config)
        trainer.train_step(tiny_model, state, tiny_batch, config, np.random.default_rng(0))
        trainable = {n for n, keep in state.mask.items() if keep}
        assert set(state.adam.m) <= trainable
        assert set(state.adam.m) == set(state.ema)

    def test_unfreeze_all(self, tiny_model):
        trainer.freeze_non_temporal(tiny_model)
        mask = trainer.unfreeze_all(tiny_model)
        assert all(mask.values())
        assert all(p.requires_grad for p in tiny_model.named_parameters().values())


class TestEma:
    def _run(self, steps, decay, lr=0.05):
        model = TwoParamModel()
        config = trainer.TrainConfig(max_steps=steps, lr=lr, ema_decay=decay,
                                     freeze_spatial=False, gradient_checkpointing=False)
        state = trainer.init_state(model, config)
        w0 = {n: p.data.astype(np.float64).copy() for n, p in model.named_parameters().items()}
        trajectory = []
        for step in range(steps):
            trainer.train_step(model, state, probe_batch(100 + step), config,
                               np.random.default_rng(step))
            trajectory.append({n: p.data.astype(np.float64).copy()
                               for n, p in model.named_parameters().items()})
        return model, state, w0, trajectory

    def test_matches_closed_form_below_1e12(self):
        d = 0.75
        n = 7
        model, state, w0, traj = self._run(n, d)
        for name in w0:
            closed = (d ** n) * w0[name]
            for k, weights in enumerate(traj, start=1):
                closed = closed + (1.0 - d) * d ** (n - k) * weights[name]
            got = state.ema[name]
            assert np.max(np.abs(got - closed)) < 1e-12, name

    def test_decay_zero_equals_current_weights(self):
        model, state, _, _ = self._run(3, 0.0)
        for name, p in model.named_parameters().items():
            assert np.array_equal(state.ema[name], p.data.astype(np.float64))

    def test_shadow_initialized_from_starting_weights(self):
        model = TwoParamModel()
        config = trainer.TrainConfig(max_steps=1, ema_decay=0.9, freeze_spatial=False)
        state = trainer.init_state(model, config)
        for name, p in model.named_parameters().items():
            assert np.array_equal(state.ema[name], p.data.astype(np.float64))

    def test_single_step_adam_update_matches_oracle(self):
        model = TwoParamModel()
        config = trainer.TrainConfig(max_steps=1, lr=0.05, ema_decay=0.9,
                                     freeze_spatial=False, gradient_checkpointing=False)
        state = trainer.init_state(model, config)
        w0 = {n: p.data.astype(np.float64).copy() for n, p in model.named_parameters().items()}
        trainer.train_step(model, state, probe_batch(7), config, np.random.default_rng(3))
        for name, p in model.named_parameters().items():
            g = p.grad.astype(np.float64)
            # first step: bias correction cancels the moment decay exactly
            expect = w0[name] - 0.05 * g / (np.abs(g) + 1e-8)
            assert np.max(np.abs(p.data - expect)) < 1e-6, name


class TestCheckpointingPolicy:
    def test_loss_bitwise_and_grads_close(self, tiny_model, tiny_batch):
        losses, grads = [], []
        for flag in (False, True):
            for p in tiny_model.named_parameters().values():
                p.zero_grad()
            loss = training_loss(tiny_model, tiny_batch, np.random.default_rng(5),
                                 grad_checkpoint=flag)
            loss.backward()
            losses.append(loss.data.tobytes())
            grads.append({n: p.grad.copy() for n, p in tiny_model.named_parameters().items()
                          if p.grad is not None})
        assert losses[0] == losses[1]
        assert set(grads[0]) == set(grads[1])
        for name in grads[0]:
            a = grads[0][name].astype(np.float64)
            b = grads[1][name].astype(np.float64)
            denom = max(float(np.linalg.norm(a)), 1e-12)
            assert float(np.linalg.norm(a - b)) / denom < 1e-6, name

    def test_retains_fewer_activations(self, tiny_model, tiny_batch):
        plain = training_loss(tiny_model, tiny_batch, np.random.default_rng(5),
                              grad_checkpoint=False)
        checkpointed = training_loss(tiny_model, tiny_batch, np.random.default_rng(5),
                                     grad_checkpoint=True)
        assert (T.retained_activation_count(checkpointed)
                < T.retained_activation_count(plain))


class TestTrainLoop:
    def test_run_directory_contents(self, tiny_model, tiny_dataset, tmp_path):
        out = tmp_path / "run"
        config = trainer.TrainConfig(max_steps=4, lr=1e-3, checkpoint_every=2, seed=9)
        state = trainer.train_loop(tiny_model, tiny_dataset, config, str(out))
        assert state.step == 4
        with open(out / "config.json") as fh:
            assert json.load(fh) == dataclasses.asdict(config)
        lines = (out / "loss.csv").read_text().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 5
        assert all((out / name).exists() for name in
                   ("ckpt_2.exvc", "ckpt_2_ema.exvc", "ckpt_4.exvc", "ckpt_4_ema.exvc"))
        saved = ckpt.load(str(out / "ckpt_4.exvc"))
        for name, p in tiny_model.named_parameters().items():
            assert saved[name].tobytes() == p.data.tobytes(), name

    def test_nonfinite_loss_aborts_with_step_and_seed(self, tiny_batch):
        class NaNModel(TwoParamModel):
            def forward(self, video, first_frame, t, grad_checkpoint=False):
                return Tensor(np.full_like(video.data, np.nan))

        model = NaNModel()
        config = trainer.TrainConfig(max_steps=1, lr=1e-3, seed=77, freeze_spatial=False,
                                     gradient_checkpointing=False)
        state = trainer.init_state(model, config)
        with pytest.raises(trainer.TrainError, match=r"step 0.*seed 77"):
            trainer.train_step(model, state, probe_batch(0), config, np.random.default_rng(0))

    def test_ema_checkpoint_diverges_from_raw(self, tiny_model, tiny_dataset, tmp_path):
        out = tmp_path / "run"
        config = trainer.TrainConfig(max_steps=2, lr=1e-2, checkpoint_every=2, seed=3)
        trainer.train_loop(tiny_model, tiny_dataset, config, str(out))
        raw = ckpt.load(str(out / "ckpt_2.exvc"))
        ema = ckpt.load(str(out / "ckpt_2_ema.exvc"))
        changed = [n for n in ema
                   if not n.startswith("opt/") and n in raw
                   and raw[n].tobytes() != ema[n].tobytes()]
        assert changed, "after 2 steps at d<1 some shadow must lag its weight"

    def test_resume_reproduces_straight_run(self, tiny_config, tiny_dataset, tmp_path):
        from exvid.model import build_model

        config = trainer.TrainConfig(max_steps=6, lr=1e-3, checkpoint_every=3, seed=21)
        straight = build_model(tiny_config, seed=4)
        state_a = trainer.train_loop(straight, tiny_dataset, config, str(tmp_path / "a"))

        first_leg = build_model(tiny_config, seed=4)
        half = trainer.TrainConfig(max_steps=3, lr=1e-3, checkpoint_every=3, seed=21)
        trainer.train_loop(first_leg, tiny_dataset, half, str(tmp_path / "b"))
        resumed, state_b = trainer.resume(str(tmp_path / "b" / "ckpt_3.exvc"), config)
        assert state_b.step == 3
        state_b = trainer.train_loop(resumed, tiny_dataset, config, str(tmp_path / "b2"),
                                     state=state_b)

        assert state_a.loss_history[3:] == state_b.loss_history
        bytes_a = (tmp_path / "a" / "ckpt_6.exvc").read_bytes()
        bytes_b = (tmp_path / "b2" / "ckpt_6.exvc").read_bytes()
        assert bytes_a == bytes_b

    def test_resume_requires_optimizer_state(self, tiny_model, tmp_path):
        path = tmp_path / "ckpt_5.exvc"
        ckpt.save(tiny_model, str(path))
        with pytest.raises(trainer.TrainError, match="optimizer"):
            trainer.resume(str(path), trainer.TrainConfig(max_steps=6))

    def test_step_rng_is_stable(self):
        a = trainer.step_rng(5, 3).standard_normal(4)
        b = trainer.step_rng(5, 3).standard_normal(4)
        assert a.tobytes() == b.tobytes()
        c = trainer.step_rng(5, 4).standard_normal(4)
        assert a.tobytes() != c.tobytes()


class TestMixedPrecision:
    def test_frozen_params_shrink_to_half(self, tiny_model):
        config = trainer.TrainConfig(max_steps=1, mixed_precision=True)
        state = trainer.init_state(tiny_model, config)
        for name, p in tiny_model.named_parameters().items():
            if state.mask[name]:
                assert p.data.dtype == np.float32, name
            else:
                assert p.data.dtype == np.float16, name

    def test_fixed_batch_loss_shift_is_small(self, tiny_config, tiny_batch):
        from exvid.model import build_model

        losses = []
        for mixed in (False, True):
            model = build_model(tiny_config, seed=0)
            config = trainer.TrainConfig(max_steps=1, mixed_precision=mixed)
            trainer.init_state(model, config)
            loss = training_loss(model, tiny_batch, np.random.default_rng(8))
            losses.append(loss.item())
        assert abs(losses[1] - losses[0]) / abs(losses[0]) < 1e-2
