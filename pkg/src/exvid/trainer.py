"""Post-tuning loop: freeze everything but the temporal blocks, run Adam at
a small learning rate with batch 1, keep an EMA shadow of the trainable
weights, and periodically persist raw + EMA checkpoints.

Every step's data and noise come from a generator seeded with (seed, step),
so a run interrupted at any checkpoint resumes bit-identically.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .diffusion import NoiseSchedule, training_loss
from .model import VideoModel, classify_params
from .tensor import AdamState, F32, Tensor


class TrainError(RuntimeError):
    """Training cannot continue (non-finite loss, inconsistent state)."""


@dataclass
class TrainConfig:
    max_steps: int
    lr: float = 1e-5
    batch_size: int = 1
    ema_decay: float = 0.999
    gradient_checkpointing: bool = True
    mixed_precision: bool = False
    checkpoint_every: int = 100
    seed: int = 0
    freeze_spatial: bool = True  # off for base pretraining, on for post-tuning

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be positive, got {self.lr}")
        if self.batch_size < 1:
            raise ValueError(f"batch size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError(f"ema decay must lie in [0, 1), got {self.ema_decay}")
        if self.checkpoint_every < 1:
            raise ValueError(f"checkpoint_every must be >= 1, got {self.checkpoint_every}")


@dataclass
class TrainState:
    step: int = 0
    adam: AdamState = field(default_factory=AdamState)
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    mask: dict[str, bool] = field(default_factory=dict)  # name -> trainable?
    loss_history: list[float] = field(default_factory=list)


def freeze_non_temporal(model: VideoModel) -> dict[str, bool]:
    """Set requires_grad per parameter family; returns the name->trainable mask."""
    temporal = classify_params(model)["temporal"]
    mask = {}
    for name, param in model.named_parameters().items():
        trainable = name in temporal
        param.requires_grad = trainable
        mask[name] = trainable
    return mask


def _shrink_frozen(model: VideoModel, mask: dict[str, bool]):
    params = model.named_parameters()
    for name, trainable in mask.items():
        if not trainable:  # frozen weights shrink to half storage
            params[name].half_()


def unfreeze_all(model: VideoModel) -> dict[str, bool]:
    params = model.named_parameters()
    for p in params.values():
        p.requires_grad = True
    return {name: True for name in params}


def init_state(model: VideoModel, config: TrainConfig) -> TrainState:
    state = TrainState()
    state.mask = freeze_non_temporal(model) if config.freeze_spatial else unfreeze_all(model)
    if config.mixed_precision:
        _shrink_frozen(model, state.mask)
    # float64 accumulator: the recurrence then matches its closed form to
    # rounding of the closed form itself, far inside the 1e-12 contract
    state.ema = {n: t.f32().astype(np.float64) for n, t in model.trainable_parameters().items()}
    return state


def checkpointed_forward(model: VideoModel, video, first_frame, timestep):
    return model.forward(video, first_frame, timestep, grad_checkpoint=True)


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, step]))


def train_step(model: VideoModel, state: TrainState, batch: dict, config: TrainConfig,
               rng: np.random.Generator, schedule: NoiseSchedule | None = None):
    trainable = model.trainable_parameters()
    for p in trainable.values():
        p.zero_grad()
    loss = training_loss(model, batch, rng, schedule=schedule,
                         grad_checkpoint=config.gradient_checkpointing)
    loss_val = float(loss.item())
    if not np.isfinite(loss_val):
        raise TrainError(
            f"non-finite loss {loss_val} at step {state.step} (run seed {config.seed})"
        )
    loss.backward()
    grads = {n: p.grad for n, p in trainable.items() if p.grad is not None}
    T.adam_step(trainable, grads, state.adam, lr=config.lr)
    d = float(config.ema_decay)
    for name, p in trainable.items():
        state.ema[name] = d * state.ema[name] + (1.0 - d) * p.f32().astype(np.float64)
    state.step += 1
    state.loss_history.append(loss_val)
    return loss_val, state


def _save_pair(model: VideoModel, state: TrainState, out_dir: str):
    tensors = ckpt.model_to_tensors(model)
    tensors["opt/adam/step"] = np.array([state.adam.step], dtype=F32)
    for name, m in state.adam.m.items():
        tensors[f"opt/adam/m/{name}"] = m
        tensors[f"opt/adam/v/{name}"] = state.adam.v[name]
    ckpt.save(tensors, os.path.join(out_dir, f"ckpt_{state.step}.exvc"))

    ema_tensors = ckpt.model_to_tensors(model)
    for name, shadow in state.ema.items():
        ema_tensors[name] = shadow.astype(F32)
    ckpt.save(ema_tensors, os.path.join(out_dir, f"ckpt_{state.step}_ema.exvc"))


def train_loop(model: VideoModel, dataset, config: TrainConfig, out_dir: str,
               state: TrainState | None = None,
               schedule: NoiseSchedule | None = None) -> TrainState:
    os.makedirs(out_dir, exist_ok=True)
    schedule = schedule or NoiseSchedule()
    if state is None:
        state = init_state(model, config)
    with open(os.path.join(out_dir, "config.json"), "w") as fh:
        json.dump(dataclasses.asdict(config), fh, sort_keys=True, indent=2)
        fh.write("\n")
    loss_path = os.path.join(out_dir, "loss.csv")
    fresh = not os.path.exists(loss_path) or os.path.getsize(loss_path) == 0
    with open(loss_path, "a") as loss_fh:
        if fresh:
            loss_fh.write("step,loss\n")
        while state.step < config.max_steps:
            rng = step_rng(config.seed, state.step)
            batch = dataset.batch(rng, config.batch_size)
            loss_val, state = train_step(model, state, batch, config, rng, schedule)
            loss_fh.write(f"{state.step},{loss_val:.8f}\n")
            loss_fh.flush()
            if state.step % config.checkpoint_every == 0 or state.step == config.max_steps:
                _save_pair(model, state, out_dir)
    return state


def resume(raw_path: str, config: TrainConfig) -> tuple[VideoModel, TrainState]:
    """Rebuild model + optimizer state from a raw checkpoint written by
    train_loop; the EMA shadow comes from the sibling _ema file."""
    tensors = ckpt.load(raw_path)
    model = ckpt.model_from_tensors(tensors)
    state = TrainState()
    state.mask = freeze_non_temporal(model) if config.freeze_spatial else unfreeze_all(model)
    if config.mixed_precision:
        _shrink_frozen(model, state.mask)
    if "opt/adam/step" not in tensors:
        raise TrainError(f"{raw_path} carries no optimizer state; cannot resume")
    state.adam.step = int(tensors["opt/adam/step"][0])
    state.step = _step_from_name(raw_path)
    for name in model.trainable_parameters():
        m = tensors.get(f"opt/adam/m/{name}")
        v = tensors.get(f"opt/adam/v/{name}")
        if m is None or v is None:
            raise TrainError(f"optimizer moments missing for {name!r} in {raw_path}")
        state.adam.m[name] = m.astype(F32)
        state.adam.v[name] = v.astype(F32)
    ema_path = raw_path.replace(".exvc", "_ema.exvc")
    if os.path.exists(ema_path):
        ema_tensors = ckpt.load(ema_path)
        state.ema = {n: ema_tensors[n].astype(np.float64) for n in model.trainable_parameters()}
    else:
        state.ema = {n: t.f32().astype(np.float64) for n, t in model.trainable_parameters().items()}
    return model, state


def _step_from_name(path: str) -> int:
    stem = os.path.basename(path)
    digits = "".join(ch for ch in stem if ch.isdigit())
    if not digits:
        raise TrainError(f"cannot infer step counter from checkpoint name {stem!r}")
    return int(digits)
