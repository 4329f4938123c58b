"""Synthetic moving-shapes videos, motion metrics, and evaluation reports.

Scenes are a black toroidal canvas with rectangles and circles drifting at
constant pixel velocity; positions floor to integers each frame and wrap
modulo the canvas, so a shape with velocity (1, 0) on a 32-row canvas is
back where it started at frame 32. Velocities and positions are ordered
(dy, dx) to match the video layout [T, C, H, W].
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, F32


@dataclass
class ShapeSpec:
    kind: str  # "rect" | "circle"
    size: int  # side length for rects, radius for circles
    color: tuple[float, ...]
    position: tuple[float, float]  # (y, x) at frame 0
    velocity: tuple[float, float]  # (dy, dx) pixels per frame


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    channels: int = 3
    frames: int = 8
    shapes: list[ShapeSpec] = field(default_factory=list)
    # global brightness modulation with period = clip length: frame k is lit
    # by 1 - pulse*(0.5 - 0.5*cos(2*pi*k/frames)). Ties appearance to the
    # absolute frame index, so a model whose positional rows alias cannot
    # place a frame in the clip - the thing capacity extension must repair.
    pulse: float = 0.0
    # like pulse but keyed to a fixed pseudorandom per-frame lookup shared by
    # every scene: frame k is scaled by 1 - flicker*(1 - table[k]). Neighboring
    # frames are uninformative about the value, so it is only learnable from
    # the absolute frame index.
    flicker: float = 0.0
    # time-mirrored playback: frame k shows the scene at time min(k, frames-k),
    # so frames k and frames-k are pixel-identical twins. A temporal model can
    # denoise twins jointly, but which frame twins with which is a function of
    # the absolute frame index and the clip length.
    boomerang: bool = False

    def validate(self):
        if self.height < 2 or self.width < 2 or self.frames < 1 or self.channels < 1:
            raise ValueError(f"degenerate canvas {self.height}x{self.width}x{self.frames}")
        if not 0.0 <= self.pulse <= 1.0:
            raise ValueError(f"pulse {self.pulse} outside [0, 1]")
        if not 0.0 <= self.flicker <= 1.0:
            raise ValueError(f"flicker {self.flicker} outside [0, 1]")
        for i, s in enumerate(self.shapes):
            if s.kind not in ("rect", "circle"):
                raise ValueError(f"shape {i}: unknown kind {s.kind!r}")
            if not 0 < s.size < min(self.height, self.width):
                raise ValueError(f"shape {i}: size {s.size} must fit inside the canvas")
            if len(s.color) != self.channels:
                raise ValueError(f"shape {i}: color has {len(s.color)} components, canvas has {self.channels}")
            if any(not 0.0 <= c <= 1.0 for c in s.color):
                raise ValueError(f"shape {i}: color {s.color} outside [0, 1]")


def _paint(canvas: np.ndarray, shape: ShapeSpec, frame: int):
    c, h, w = canvas.shape
    y = int(np.floor(shape.position[0] + frame * shape.velocity[0])) % h
    x = int(np.floor(shape.position[1] + frame * shape.velocity[1])) % w
    color = np.asarray(shape.color, dtype=F32)
    if shape.kind == "rect":
        rows = (y + np.arange(shape.size)) % h
        cols = (x + np.arange(shape.size)) % w
        canvas[:, rows[:, None], cols[None, :]] = color[:, None, None]
    else:
        dy = (np.arange(h) - y + h // 2) % h - h // 2  # toroidal distance
        dx = (np.arange(w) - x + w // 2) % w - w // 2
        mask = dy[:, None] ** 2 + dx[None, :] ** 2 <= shape.size ** 2
        canvas[:, mask] = color[:, None]


_FLICKER_SEED = 1405


def flicker_table(frames: int) -> np.ndarray:
    """Fixed per-frame brightness lookup in [0, 1], identical for every scene.

    Drawn from one pinned generator, so the table for a longer clip extends
    the table for a shorter one: a model trained on the first T0 entries has
    learned a strict prefix of what longer clips require.
    """
    return np.random.default_rng(_FLICKER_SEED).random(frames)


def gen_video(spec: SceneSpec) -> Tensor:
    """Render a scene to [T, C, H, W] float32 in [0, 1]; shapes paint in
    list order, later ones on top."""
    spec.validate()
    video = np.zeros((spec.frames, spec.channels, spec.height, spec.width), dtype=F32)
    table = flicker_table(spec.frames) if spec.flicker else None
    for k in range(spec.frames):
        time = min(k, spec.frames - k) if spec.boomerang else k
        for shape in spec.shapes:
            _paint(video[k], shape, time)
        if spec.pulse:
            lit = 1.0 - spec.pulse * (0.5 - 0.5 * np.cos(2.0 * np.pi * k / spec.frames))
            video[k] *= F32(lit)
        if table is not None:
            video[k] *= F32(1.0 - spec.flicker * (1.0 - table[k]))
    return Tensor(video)


def random_scene(rng: np.random.Generator, frames: int, height: int = 32, width: int = 32,
                 channels: int = 3, max_shapes: int = 3, pulse: float = 0.8,
                 min_size: int = 3, max_size: int = 0, flicker: float = 0.0,
                 boomerang: bool = False) -> SceneSpec:
    if max_size <= 0:
        max_size = max(min_size + 1, min(height, width) // 4)
    n = int(rng.integers(1, max_shapes + 1))
    shapes = []
    for _ in range(n):
        kind = "rect" if rng.random() < 0.5 else "circle"
        size = int(rng.integers(min_size, max_size + 1))
        color = tuple(float(c) for c in rng.uniform(0.25, 1.0, size=channels))
        position = (float(rng.uniform(0, height)), float(rng.uniform(0, width)))
        velocity = (float(rng.integers(-2, 3)), float(rng.integers(-2, 3)))
        if velocity == (0.0, 0.0):
            velocity = (1.0, 0.0)  # keep every training clip in motion
        shapes.append(ShapeSpec(kind, size, color, position, velocity))
    return SceneSpec(height=height, width=width, channels=channels, frames=frames,
                     shapes=shapes, pulse=pulse, flicker=flicker, boomerang=boomerang)


class MovingShapesDataset:
    """Seeded batch source: batch k of a run is a pure function of (seed, k)."""

    def __init__(self, frames: int, height: int = 32, width: int = 32, channels: int = 3,
                 max_shapes: int = 3, pulse: float = 0.8, min_size: int = 3, max_size: int = 0,
                 flicker: float = 0.0, boomerang: bool = False):
        self.frames = frames
        self.height = height
        self.width = width
        self.channels = channels
        self.max_shapes = max_shapes
        self.pulse = pulse
        self.min_size = min_size
        self.max_size = max_size
        self.flicker = flicker
        self.boomerang = boomerang

    def batch(self, rng: np.random.Generator, batch_size: int = 1) -> dict:
        clips = []
        for _ in range(batch_size):
            spec = random_scene(rng, self.frames, self.height, self.width,
                                self.channels, self.max_shapes, self.pulse,
                                self.min_size, self.max_size, self.flicker,
                                self.boomerang)
            clips.append(gen_video(spec).data)
        video = np.stack(clips)
        return {"video": Tensor(video), "first_frame": Tensor(video[:, 0].copy())}


def motion_energy(video) -> tuple[np.ndarray, float]:
    """Mean absolute frame difference per adjacent pair, plus the scalar mean."""
    v = video.data if isinstance(video, Tensor) else np.asarray(video, dtype=F32)
    if v.ndim != 4:
        raise ValueError(f"expected [T,C,H,W], got shape {v.shape}")
    if v.shape[0] < 2:
        raise ValueError(f"motion energy needs at least 2 frames, got {v.shape[0]}")
    pair = np.abs(np.diff(v.astype(np.float64), axis=0)).mean(axis=(1, 2, 3))
    return pair.astype(F32), float(pair.mean())


def eval_report(model, specs: list[SceneSpec], seeds: list[int],
                sample_steps: int = 20, schedule=None) -> dict:
    """Sample one clip per (spec, seed) pair conditioned on the ground-truth
    first frame and summarize the results as a JSON-stable dict."""
    from .diffusion import sample  # local import: dataeval stays usable without a model

    if len(specs) != len(seeds):
        raise ValueError(f"{len(specs)} specs vs {len(seeds)} seeds")
    gt_energy, gen_energy, ff_mse, nan_count = [], [], [], 0
    vmin, vmax = np.inf, -np.inf
    for spec, seed in zip(specs, seeds):
        gt = gen_video(spec).data
        out = sample(model, gt[None, 0], spec.frames, sample_steps,
                     np.random.default_rng(seed), schedule=schedule).data[0]
        nan_count += int(np.size(out) - np.count_nonzero(np.isfinite(out)))
        vmin = min(vmin, float(np.nanmin(out)))
        vmax = max(vmax, float(np.nanmax(out)))
        gt_energy.append(motion_energy(gt)[1])
        gen_energy.append(motion_energy(out)[1])
        ff_mse.append(float(np.mean((out[0].astype(np.float64) - gt[0]) ** 2)))
    return {
        "clips": len(specs),
        "first_frame_mse": float(np.mean(ff_mse)),
        "ground_truth_motion_energy": float(np.mean(gt_energy)),
        "motion_energy": float(np.mean(gen_energy)),
        "nan_count": nan_count,
        "value_max": vmax,
        "value_min": vmin,
    }


def report_json(report: dict) -> str:
    return json.dumps(report, sort_keys=True, indent=2) + "\n"


# -- frame export ------------------------------------------------------------


def _to_u8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(frame * 255.0), 0, 255).astype(np.uint8)


def write_frames(video, out_dir: str, fmt: str = "ppm") -> list[str]:
    """Dump each frame as a binary PGM (P5, channel-mean gray) or PPM (P6)."""
    v = video.data if isinstance(video, Tensor) else np.asarray(video, dtype=F32)
    if v.ndim != 4:
        raise ValueError(f"expected [T,C,H,W], got shape {v.shape}")
    if fmt not in ("pgm", "ppm"):
        raise ValueError(f"format must be pgm or ppm, got {fmt!r}")
    if fmt == "ppm" and v.shape[1] != 3:
        raise ValueError(f"ppm needs 3 channels, video has {v.shape[1]}")
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for k, frame in enumerate(v):
        path = os.path.join(out_dir, f"frame_{k:05d}.{fmt}")
        h, w = frame.shape[1:]
        if fmt == "pgm":
            body = _to_u8(frame.mean(axis=0)).tobytes()
            header = f"P5\n{w} {h}\n255\n"
        else:
            body = _to_u8(np.moveaxis(frame, 0, -1)).tobytes()
            header = f"P6\n{w} {h}\n255\n"
        with open(path, "wb") as fh:
            fh.write(header.encode("ascii") + body)
        paths.append(path)
    return paths
