"""Miniature image-to-video diffusion UNet with split spatial/temporal blocks.

Spatial blocks are strictly frame-local (frames fold into the batch axis);
all cross-frame mixing lives in the temporal blocks: a time-only 3d conv,
an additive positional table over the frame axis, and single-head attention
along frames. The temporal blocks are the only region touched by capacity
extension (see surgery module).
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor, F32


class ConfigError(ValueError):
    """Invalid model configuration; message lists every violation."""


class CapacityError(ValueError):
    """Input frame count does not match the model's frame capacity."""


class NamingError(KeyError):
    """A tensor name falls outside the spatial/temporal naming contract."""


@dataclass
class ModelConfig:
    base_frames: int = 8
    channels: tuple[int, ...] = (32, 64)
    video_channels: int = 3
    height: int = 32
    width: int = 32
    norm_groups: int = 8
    temporal_kernel: tuple[int, int, int] = (3, 1, 1)
    temporal_conv_first: bool = True  # conv ahead of attention inside the block

    @property
    def levels(self) -> int:
        return len(self.channels)

    @property
    def time_dim(self) -> int:
        return 2 * self.channels[0]

    def violations(self) -> list[str]:
        bad = []
        if self.base_frames < 2:
            bad.append(f"base_frames must be >= 2, got {self.base_frames}")
        if not self.channels:
            bad.append("channels must list at least one level")
        for i, c in enumerate(self.channels):
            if c <= 0 or c % self.norm_groups != 0:
                bad.append(
                    f"channels[{i}]={c} must be positive and divisible by norm_groups={self.norm_groups}"
                )
        if self.video_channels < 1:
            bad.append(f"video_channels must be >= 1, got {self.video_channels}")
        down = 2 ** (max(self.levels, 1) - 1)
        if self.height < down or self.height % down != 0:
            bad.append(f"height={self.height} must be a positive multiple of {down}")
        if self.width < down or self.width % down != 0:
            bad.append(f"width={self.width} must be a positive multiple of {down}")
        if len(self.temporal_kernel) != 3 or any(k < 1 or k % 2 == 0 for k in self.temporal_kernel):
            bad.append(f"temporal_kernel={self.temporal_kernel} must be three odd extents")
        return bad

    def validate(self):
        bad = self.violations()
        if bad:
            raise ConfigError("; ".join(bad))

    # Flat numeric encoding so the config travels inside the tensor container.
    def to_vector(self, frame_capacity: int, extended: bool) -> np.ndarray:
        vec = [
            1.0,  # layout version
            self.base_frames,
            frame_capacity,
            1.0 if extended else 0.0,
            self.video_channels,
            self.height,
            self.width,
            self.norm_groups,
            *self.temporal_kernel,
            1.0 if self.temporal_conv_first else 0.0,
            self.levels,
            *self.channels,
        ]
        return np.asarray(vec, dtype=F32)

    @staticmethod
    def from_vector(vec: np.ndarray) -> tuple["ModelConfig", int, bool]:
        vals = [int(round(float(v))) for v in np.asarray(vec).ravel()]
        if not vals or vals[0] != 1:
            raise ConfigError(f"unknown config layout version {vals[:1]}")
        levels = vals[12]
        cfg = ModelConfig(
            base_frames=vals[1],
            channels=tuple(vals[13 : 13 + levels]),
            video_channels=vals[4],
            height=vals[5],
            width=vals[6],
            norm_groups=vals[7],
            temporal_kernel=(vals[8], vals[9], vals[10]),
            temporal_conv_first=bool(vals[11]),
        )
        return cfg, vals[2], bool(vals[3])


def sinusoidal_table(rows: int, dim: int) -> np.ndarray:
    """Static trigonometric table: sin on even slots, cos on odd slots."""
    pos = np.arange(rows, dtype=np.float64)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = pos / np.power(10000.0, 2.0 * idx / dim)
    tab = np.empty((rows, dim), dtype=np.float64)
    tab[:, 0::2] = np.sin(angle)
    tab[:, 1::2] = np.cos(angle)
    return tab.astype(F32)


def timestep_embedding(timesteps, dim: int) -> np.ndarray:
    """Sinusoidal embedding of (possibly fractional) timestep values."""
    vals = np.asarray(timesteps, dtype=np.float64).reshape(-1)[:, None]
    idx = np.arange(dim // 2, dtype=np.float64)[None, :]
    angle = vals / np.power(10000.0, 2.0 * idx / dim)
    emb = np.empty((vals.shape[0], dim), dtype=np.float64)
    emb[:, 0::2] = np.sin(angle)
    emb[:, 1::2] = np.cos(angle)
    return emb.astype(F32)


def _param(rng, shape, std) -> Tensor:
    return Tensor(rng.standard_normal(shape, dtype=F32) * F32(std), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape, dtype=F32), requires_grad=True)


def _ones(shape) -> Tensor:
    return Tensor(np.ones(shape, dtype=F32), requires_grad=True)


def _conv_std(c_in, kernel):
    fan_in = c_in * int(np.prod(kernel))
    return math.sqrt(2.0 / fan_in)


class SpatialBlock:
    """Frame-local residual block: norm-silu-conv twice plus a timestep shift."""

    def __init__(self, channels: int, time_dim: int, groups: int, rng):
        c = channels
        self.groups = groups
        self.norm1_gamma = _ones((c,))
        self.norm1_beta = _zeros((c,))
        self.conv1_w = _param(rng, (c, c, 3, 3), _conv_std(c, (3, 3)))
        self.conv1_b = _zeros((c,))
        self.temb_w = _param(rng, (time_dim, c), math.sqrt(1.0 / time_dim))
        self.temb_b = _zeros((c,))
        self.norm2_gamma = _ones((c,))
        self.norm2_beta = _zeros((c,))
        self.conv2_w = _param(rng, (c, c, 3, 3), _conv_std(c, (3, 3)))
        self.conv2_b = _zeros((c,))

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.norm1.gamma": self.norm1_gamma,
            f"{prefix}.norm1.beta": self.norm1_beta,
            f"{prefix}.conv1.weight": self.conv1_w,
            f"{prefix}.conv1.bias": self.conv1_b,
            f"{prefix}.temb.weight": self.temb_w,
            f"{prefix}.temb.bias": self.temb_b,
            f"{prefix}.norm2.gamma": self.norm2_gamma,
            f"{prefix}.norm2.beta": self.norm2_beta,
            f"{prefix}.conv2.weight": self.conv2_w,
            f"{prefix}.conv2.bias": self.conv2_b,
        }

    def forward(self, x: Tensor, temb: Tensor) -> Tensor:
        """x: [B,T,C,H,W]; temb: [B,time_dim]. Frames fold into the batch."""
        b, t, c, h, w = x.shape
        flat = T.reshape(x, (b * t, c, h, w))
        y = T.group_norm(flat, self.norm1_gamma, self.norm1_beta, self.groups)
        y = T.conv2d(T.silu(y), self.conv1_w, self.conv1_b)
        shift = T.add(T.matmul(T.silu(temb), self.temb_w), self.temb_b)  # [B,C]
        shift = T.broadcast_to(T.reshape(shift, (b, 1, c)), (b, t, c))
        y = T.add(y, T.reshape(shift, (b * t, c, 1, 1)))
        y = T.group_norm(y, self.norm2_gamma, self.norm2_beta, self.groups)
        y = T.conv2d(T.silu(y), self.conv2_w, self.conv2_b)
        return T.add(x, T.reshape(y, (b, t, c, h, w)))


class TemporalBlock:
    """Cross-frame mixer: time-only conv, additive positional table, attention.

    ``positional_embedding`` is the static sinusoidal table before surgery
    (a non-trainable buffer) and a trainable parameter afterwards;
    ``adapter_w/adapter_b`` exist only on extended blocks.
    """

    def __init__(self, channels: int, frames: int, kernel, groups: int, conv_first: bool, rng):
        c = channels
        self.channels = c
        self.groups = groups
        self.conv_first = conv_first
        self.norm_gamma = _ones((c,))
        self.norm_beta = _zeros((c,))
        self.conv_w = _param(rng, (c, c) + tuple(kernel), _conv_std(c, kernel))
        self.conv_b = _zeros((c,))
        self.q_w = _param(rng, (c, c), math.sqrt(1.0 / c))
        self.k_w = _param(rng, (c, c), math.sqrt(1.0 / c))
        self.v_w = _param(rng, (c, c), math.sqrt(1.0 / c))
        self.o_w = _param(rng, (c, c), math.sqrt(1.0 / c))
        self.positional_embedding = Tensor(sinusoidal_table(frames, c))
        self.adapter_w: Tensor | None = None
        self.adapter_b: Tensor | None = None

    @property
    def extended(self) -> bool:
        return self.adapter_w is not None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {
            f"{prefix}.norm.gamma": self.norm_gamma,
            f"{prefix}.norm.beta": self.norm_beta,
            f"{prefix}.conv.weight": self.conv_w,
            f"{prefix}.conv.bias": self.conv_b,
            f"{prefix}.attn.q.weight": self.q_w,
            f"{prefix}.attn.k.weight": self.k_w,
            f"{prefix}.attn.v.weight": self.v_w,
            f"{prefix}.attn.o.weight": self.o_w,
        }
        if self.extended:
            out[f"{prefix}.positional_embedding"] = self.positional_embedding
            out[f"{prefix}.adapter.weight"] = self.adapter_w
            out[f"{prefix}.adapter.bias"] = self.adapter_b
        return out

    def named_buffers(self, prefix: str) -> dict[str, Tensor]:
        if self.extended:
            return {}
        return {f"{prefix}.positional_embedding": self.positional_embedding}

    def _conv(self, x: Tensor, w: Tensor, b: Tensor) -> Tensor:
        # conv3d wants [B,C,T,H,W]; block state is [B,T,C,H,W]
        y = T.permute(x, (0, 2, 1, 3, 4))
        y = T.conv3d(y, w, b)
        return T.permute(y, (0, 2, 1, 3, 4))

    def forward(self, x: Tensor) -> Tensor:
        b, t, c, h, w = x.shape
        rows = self.positional_embedding.shape[0]
        if t > rows:
            raise CapacityError(
                f"frame-capacity mismatch: input has {t} frames, positional table has {rows} rows"
            )
        res = x
        y = T.reshape(x, (b * t, c, h, w))
        y = T.group_norm(y, self.norm_gamma, self.norm_beta, self.groups)
        y = T.reshape(y, (b, t, c, h, w))
        if self.conv_first:
            y = self._conv(y, self.conv_w, self.conv_b)
        pe = self.positional_embedding
        if t < rows:
            pe = T.slice_rows(pe, t)
        y = T.add(y, T.reshape(pe, (1, t, c, 1, 1)))
        if self.extended:
            y = self._conv(y, self.adapter_w, self.adapter_b)
        y = T.permute(y, (0, 3, 4, 1, 2))  # [B,H,W,T,C]
        y = T.reshape(y, (b * h * w, t, c))
        y = T.scaled_dot_product_attention(y, self.q_w, self.k_w, self.v_w, self.o_w)
        y = T.reshape(y, (b, h, w, t, c))
        y = T.permute(y, (0, 3, 4, 1, 2))
        if not self.conv_first:
            y = self._conv(y, self.conv_w, self.conv_b)
        return T.add(res, y)


class VideoModel:
    """First-frame-conditioned noise predictor over [B,T,C_v,H,W] videos."""

    def __init__(self, config: ModelConfig, rng):
        config.validate()
        self.config = config
        self.frame_capacity = config.base_frames
        self.extended = False
        self.meta: dict[str, np.ndarray] = {}
        cv = config.video_channels
        chans = config.channels
        tdim = config.time_dim

        self.time_fc1_w = _param(rng, (chans[0], tdim), math.sqrt(1.0 / chans[0]))
        self.time_fc1_b = _zeros((tdim,))
        self.time_fc2_w = _param(rng, (tdim, tdim), math.sqrt(1.0 / tdim))
        self.time_fc2_b = _zeros((tdim,))
        self.in_proj_w = _param(rng, (chans[0], 2 * cv, 3, 3), _conv_std(2 * cv, (3, 3)))
        self.in_proj_b = _zeros((chans[0],))

        self.down_w: list[Tensor | None] = [None]
        self.down_b: list[Tensor | None] = [None]
        self.spatial: list[SpatialBlock] = []
        self.temporal: list[TemporalBlock] = []
        for lvl, c in enumerate(chans):
            if lvl > 0:
                self.down_w.append(_param(rng, (c, chans[lvl - 1], 1, 1), _conv_std(chans[lvl - 1], (1, 1))))
                self.down_b.append(_zeros((c,)))
            self.spatial.append(SpatialBlock(c, tdim, config.norm_groups, rng))
            self.temporal.append(
                TemporalBlock(c, config.base_frames, config.temporal_kernel,
                              config.norm_groups, config.temporal_conv_first, rng)
            )

        self.fuse_w: list[Tensor] = []
        self.fuse_b: list[Tensor] = []
        for lvl in range(len(chans) - 1):
            c_in = chans[lvl] + chans[lvl + 1]
            self.fuse_w.append(_param(rng, (chans[lvl], c_in, 3, 3), _conv_std(c_in, (3, 3))))
            self.fuse_b.append(_zeros((chans[lvl],)))

        # small but nonzero head keeps early predictions tame while leaving
        # a live gradient path into the temporal stack
        self.out_proj_w = _param(rng, (cv, chans[0], 3, 3), 0.1 * _conv_std(chans[0], (3, 3)))
        self.out_proj_b = _zeros((cv,))

    # -- tensor registry --------------------------------------------------

    def named_parameters(self) -> dict[str, Tensor]:
        out = {
            "time_embed.fc1.weight": self.time_fc1_w,
            "time_embed.fc1.bias": self.time_fc1_b,
            "time_embed.fc2.weight": self.time_fc2_w,
            "time_embed.fc2.bias": self.time_fc2_b,
            "in_proj.weight": self.in_proj_w,
            "in_proj.bias": self.in_proj_b,
        }
        for lvl in range(self.config.levels):
            if lvl > 0:
                out[f"levels.{lvl}.down.weight"] = self.down_w[lvl]
                out[f"levels.{lvl}.down.bias"] = self.down_b[lvl]
            out.update(self.spatial[lvl].named(f"levels.{lvl}.spatial"))
            out.update(self.temporal[lvl].named(f"levels.{lvl}.temporal"))
        for lvl in range(self.config.levels - 1):
            out[f"fuse.{lvl}.weight"] = self.fuse_w[lvl]
            out[f"fuse.{lvl}.bias"] = self.fuse_b[lvl]
        out["out_proj.weight"] = self.out_proj_w
        out["out_proj.bias"] = self.out_proj_b
        return out

    def named_buffers(self) -> dict[str, Tensor]:
        out = {}
        for lvl in range(self.config.levels):
            out.update(self.temporal[lvl].named_buffers(f"levels.{lvl}.temporal"))
        return out

    def named_tensors(self) -> dict[str, Tensor]:
        out = self.named_parameters()
        out.update(self.named_buffers())
        return out

    def element_count(self) -> int:
        """Total persisted elements (parameters plus buffers, not meta)."""
        return sum(t.size for t in self.named_tensors().values())

    def trainable_parameters(self) -> dict[str, Tensor]:
        return {n: t for n, t in self.named_parameters().items() if t.requires_grad}

    def at_capacity(self, frames: int) -> "VideoModel":
        """Read-only view of the same weights with a smaller frame capacity."""
        if not 2 <= frames <= self.frame_capacity:
            raise CapacityError(
                f"cannot view capacity {self.frame_capacity} model at {frames} frames"
            )
        view = copy.copy(self)
        view.frame_capacity = frames
        return view

    # -- forward -----------------------------------------------------------

    def _check_inputs(self, video: Tensor, first_frame: Tensor):
        if video.ndim != 5:
            raise T.ShapeError(f"video must be [B,T,C,H,W], got shape {video.shape}")
        b, t, c, h, w = video.shape
        if t != self.frame_capacity:
            raise CapacityError(
                f"frame-capacity mismatch: video has {t} frames, model capacity is {self.frame_capacity}"
            )
        if c != self.config.video_channels:
            raise T.ShapeError(
                f"video channel axis is {c}, model expects {self.config.video_channels}"
            )
        down = 2 ** (self.config.levels - 1)
        if h % down or w % down:
            raise T.ShapeError(f"spatial extents {(h, w)} must be multiples of {down}")
        if first_frame.shape != (b, c, h, w):
            raise T.ShapeError(
                f"first_frame shape {first_frame.shape} does not match video frame shape {(b, c, h, w)}"
            )

    def forward(self, video, first_frame, timestep, grad_checkpoint: bool = False) -> Tensor:
        video = video if isinstance(video, Tensor) else Tensor(video)
        first_frame = first_frame if isinstance(first_frame, Tensor) else Tensor(first_frame)
        self._check_inputs(video, first_frame)
        b, t, cv, h, w = video.shape

        ff = T.broadcast_to(T.reshape(first_frame, (b, 1, cv, h, w)), (b, t, cv, h, w))
        x = T.concat([video, ff], axis=2)  # [B,T,2Cv,H,W]

        tvals = timestep.data if isinstance(timestep, Tensor) else np.asarray(timestep)
        temb = Tensor(timestep_embedding(tvals, self.config.channels[0]))
        temb = T.add(T.matmul(temb, self.time_fc1_w), self.time_fc1_b)
        temb = T.add(T.matmul(T.silu(temb), self.time_fc2_w), self.time_fc2_b)

        def run_segment(fn, *args):
            if grad_checkpoint:
                return T.checkpoint_segment(fn, *args)
            return fn(*args)

        def level_in(xin, te):
            fold = T.reshape(xin, (b * t, 2 * cv, h, w))
            y = T.conv2d(fold, self.in_proj_w, self.in_proj_b)
            y = T.reshape(y, (b, t, self.config.channels[0], h, w))
            y = self.spatial[0].forward(y, te)
            return self.temporal[0].forward(y)

        hcur = run_segment(level_in, x, temb)
        skips = [hcur]
        hh, ww = h, w
        for lvl in range(1, self.config.levels):
            hh, ww = hh // 2, ww // 2
            c = self.config.channels[lvl]

            def level_down(hin, te, lvl=lvl, hh=hh, ww=ww, c=c):
                y = T.avg_pool2x(hin)
                y = T.reshape(y, (b * t, y.shape[2], hh, ww))
                y = T.conv2d(y, self.down_w[lvl], self.down_b[lvl])
                y = T.reshape(y, (b, t, c, hh, ww))
                y = self.spatial[lvl].forward(y, te)
                return self.temporal[lvl].forward(y)

            hcur = run_segment(level_down, hcur, temb)
            if lvl < self.config.levels - 1:
                skips.append(hcur)

        for lvl in range(self.config.levels - 2, -1, -1):
            hh, ww = hh * 2, ww * 2
            up = T.upsample_nearest2x(hcur)
            cat = T.concat([up, skips[lvl]], axis=2)
            cin = cat.shape[2]
            y = T.reshape(cat, (b * t, cin, hh, ww))
            y = T.conv2d(y, self.fuse_w[lvl], self.fuse_b[lvl])
            hcur = T.reshape(y, (b, t, self.config.channels[lvl], hh, ww))

        y = T.reshape(hcur, (b * t, self.config.channels[0], h, w))
        y = T.conv2d(y, self.out_proj_w, self.out_proj_b)
        return T.reshape(y, (b, t, cv, h, w))


def build_model(config: ModelConfig, seed: int) -> VideoModel:
    """Deterministically initialized model; same (config, seed) -> same bytes."""
    rng = np.random.default_rng(seed)
    return VideoModel(config, rng)


_SPATIAL_HEADS = ("time_embed.", "in_proj.", "out_proj.", "fuse.")


def classify_params(model: VideoModel) -> dict[str, set[str]]:
    """Partition every named tensor into the spatial or temporal family."""
    spatial, temporal = set(), set()
    for name in model.named_tensors():
        if ".temporal." in name:
            temporal.add(name)
        elif name.startswith(_SPATIAL_HEADS):
            spatial.add(name)
        elif name.startswith("levels.") and (".spatial." in name or ".down." in name):
            spatial.add(name)
        else:
            raise NamingError(f"tensor name {name!r} matches neither family; naming contract breached")
    return {"spatial": spatial, "temporal": temporal}
