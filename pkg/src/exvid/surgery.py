"""Frame-capacity extension surgery on a trained video model.

The transformation follows three rules per temporal block: keep the 3d
conv weights untouched, mark the attention projections trainable, and
replace the static positional table with a trainable one seeded cyclically
from the original rows. An identity-initialized 3d conv adapter slides in
between the positional addition and the attention projections, so the
extended model computes exactly the original function until training moves
it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, F32
from .model import CapacityError, TemporalBlock, VideoModel


class SurgeryError(ValueError):
    """Extension plan cannot be applied to this model."""


@dataclass
class BlockActions:
    keep_conv3d: bool = True
    make_attention_trainable: bool = True
    extend_positional_embedding: bool = True
    inject_identity_adapter: bool = True


@dataclass
class ExtensionPlan:
    t_base: int
    t_ext: int = 0  # 0 -> default 5x
    adapter_kernel: tuple[int, int, int] = (3, 1, 1)
    actions: BlockActions = field(default_factory=BlockActions)

    def __post_init__(self):
        if self.t_ext == 0:
            self.t_ext = 5 * self.t_base
        if self.t_ext <= self.t_base:
            raise SurgeryError(f"t_ext={self.t_ext} must exceed t_base={self.t_base}")
        if any(k < 1 or k % 2 == 0 for k in self.adapter_kernel):
            raise SurgeryError(
                f"adapter kernel {self.adapter_kernel} has an even extent; no unambiguous center"
            )
        if not self.actions.keep_conv3d:
            raise SurgeryError("dropping the original 3d conv weights is not supported")
        if not self.actions.extend_positional_embedding:
            raise SurgeryError("capacity cannot grow without extending the positional table")


def extend_positional_embedding(pe: Tensor, t_ext: int) -> Tensor:
    """Tile rows cyclically: row p of the result is row (p mod T0) of ``pe``."""
    t0 = pe.shape[0]
    if t_ext <= t0:
        raise SurgeryError(f"t_ext={t_ext} must exceed the current row count {t0}")
    rows = np.take(pe.data, np.arange(t_ext) % t0, axis=0)
    return Tensor(np.ascontiguousarray(rows), requires_grad=True)


def identity_adapter_weights(channels: int, kernel) -> tuple[np.ndarray, np.ndarray]:
    """Kernel whose center is the channel identity, zero elsewhere; zero bias."""
    if any(k < 1 or k % 2 == 0 for k in kernel):
        raise SurgeryError(f"adapter kernel {tuple(kernel)} has an even extent; no unambiguous center")
    w = np.zeros((channels, channels) + tuple(kernel), dtype=F32)
    center = tuple(k // 2 for k in kernel)
    idx = (np.arange(channels), np.arange(channels)) + center
    w[idx] = 1.0
    return w, np.zeros((channels,), dtype=F32)


def inject_identity_adapter(block: TemporalBlock, kernel=(3, 1, 1)) -> TemporalBlock:
    """Copy of ``block`` with an identity 3d conv between the positional
    addition and the attention projections. Transparent at initialization."""
    if block.extended:
        raise SurgeryError("block already carries an adapter")
    out = copy.copy(block)
    w, b = identity_adapter_weights(block.channels, kernel)
    out.adapter_w = Tensor(w, requires_grad=True)
    out.adapter_b = Tensor(b, requires_grad=True)
    return out


def extend_model(model: VideoModel, plan: ExtensionPlan) -> VideoModel:
    """Pure model-to-model surgery; the input model is left untouched."""
    if model.extended:
        raise SurgeryError("model is already extended; repeated surgery is rejected")
    if model.frame_capacity != plan.t_base:
        raise CapacityError(
            f"frame-capacity mismatch: model capacity is {model.frame_capacity}, plan expects t_base={plan.t_base}"
        )

    ext = copy.copy(model)
    ext.meta = dict(model.meta)
    ext.extended = True
    ext.frame_capacity = plan.t_ext

    def clone(t: Tensor, trainable: bool) -> Tensor:
        return Tensor(t.data.copy(), requires_grad=trainable, dtype=t.data.dtype)

    # spatial side: byte-identical copies, frozen
    ext.time_fc1_w = clone(model.time_fc1_w, False)
    ext.time_fc1_b = clone(model.time_fc1_b, False)
    ext.time_fc2_w = clone(model.time_fc2_w, False)
    ext.time_fc2_b = clone(model.time_fc2_b, False)
    ext.in_proj_w = clone(model.in_proj_w, False)
    ext.in_proj_b = clone(model.in_proj_b, False)
    ext.down_w = [t if t is None else clone(t, False) for t in model.down_w]
    ext.down_b = [t if t is None else clone(t, False) for t in model.down_b]
    ext.spatial = []
    for blk in model.spatial:
        sb = copy.copy(blk)
        for attr in ("norm1_gamma", "norm1_beta", "conv1_w", "conv1_b", "temb_w",
                     "temb_b", "norm2_gamma", "norm2_beta", "conv2_w", "conv2_b"):
            setattr(sb, attr, clone(getattr(blk, attr), False))
        ext.spatial.append(sb)
    ext.fuse_w = [clone(t, False) for t in model.fuse_w]
    ext.fuse_b = [clone(t, False) for t in model.fuse_b]
    ext.out_proj_w = clone(model.out_proj_w, False)
    ext.out_proj_b = clone(model.out_proj_b, False)

    # temporal side: conv kept byte-identical, everything marked trainable,
    # positional table tiled out, identity adapter injected
    trainable_attn = plan.actions.make_attention_trainable
    ext.temporal = []
    for lvl, blk in enumerate(model.temporal):
        tb = copy.copy(blk)
        tb.norm_gamma = clone(blk.norm_gamma, True)
        tb.norm_beta = clone(blk.norm_beta, True)
        tb.conv_w = clone(blk.conv_w, True)
        tb.conv_b = clone(blk.conv_b, True)
        tb.q_w = clone(blk.q_w, trainable_attn)
        tb.k_w = clone(blk.k_w, trainable_attn)
        tb.v_w = clone(blk.v_w, trainable_attn)
        tb.o_w = clone(blk.o_w, trainable_attn)
        tb.positional_embedding = extend_positional_embedding(blk.positional_embedding, plan.t_ext)
        if plan.actions.inject_identity_adapter:
            w, b = identity_adapter_weights(blk.channels, plan.adapter_kernel)
            tb.adapter_w = Tensor(w, requires_grad=True)
            tb.adapter_b = Tensor(b, requires_grad=True)
        ext.temporal.append(tb)
        # snapshot the original table so the cyclic provenance stays auditable
        ext.meta[f"pe_original/levels.{lvl}.temporal"] = blk.positional_embedding.data.copy()

    return ext


def verify_identity(original: VideoModel, extended: VideoModel, sample: dict) -> float:
    """Max abs difference between both forwards on a base-capacity sample.

    Zero (exactly) for a freshly extended model: the first rows of the tiled
    positional table equal the original table and the adapter multiplies by
    one and adds zero.
    """
    t0 = original.frame_capacity
    restricted = extended.at_capacity(t0) if extended.frame_capacity != t0 else extended
    with T.no_grad():
        out_a = original.forward(sample["video"], sample["first_frame"], sample["timestep"])
        out_b = restricted.forward(sample["video"], sample["first_frame"], sample["timestep"])
    return float(np.max(np.abs(out_a.data - out_b.data)))
