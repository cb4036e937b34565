"""Synthetic raster-scanned image series of a Gaussian lattice.

Each frame samples the ground-truth bump image along a raster path that is
perturbed by a Brownian motion in scan order (small steps between pixels of
a line, larger ones across the line flyback), moved by a per-frame rigid
drift, and finally corrupted by Poisson counting noise.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import ImageSeries, PixelImage, save_series
from .deform import (RigidMotion, ScanlineShiftField, apply_jud_deformation, write_rigid_csv,
                     write_shift_csv)
from .imagemodel import BumpImage


@dataclass
class SynthConfig:
    """Generator settings; lengths are in pixels unless noted.

    ``noise=False`` switches off the Poisson counts, the Brownian scan path
    and the rigid drift, so every frame is the ground-truth render.
    """

    size: tuple = (64, 64)
    frames: int = 64
    cell: tuple = ((13.0, 0.0), (0.0, 24.0))
    basis: tuple = ((0.0, 0.0, 1.0),)
    origin: tuple = (12.5, 20.0)
    sigma: float = 4.25
    dose: float = 200.0
    background: float = 20.0
    pixel_step_std: float = 0.2 / np.sqrt(1000.0)
    line_step_std: float = 0.2
    drift_step_std: float = 0.5
    rotation_step_std: float = 0.0
    noise: bool = True
    seed: int = 0
    dwell_time: float = 1.0e-5
    line_time: float = 1.0e-2

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.dose <= 0:
            raise ValueError("dose must be positive")
        if self.frames < 1:
            raise ValueError("need at least one frame")
        if self.size[0] < 2 or self.size[1] < 2:
            raise ValueError("image must be at least 2x2")
        if self.dwell_time <= 0 or self.line_time <= 0:
            raise ValueError("scan times must be positive")

    @property
    def lattice_vectors(self) -> np.ndarray:
        return np.asarray(self.cell, float)

    @classmethod
    def from_json(cls, path) -> "SynthConfig":
        data = json.loads(Path(path).read_text())
        for key in ("size", "cell", "basis", "origin"):
            if key in data:
                data[key] = _tuplify(data[key])
        return cls(**data)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, (list, tuple)) else x


@dataclass
class SynthResult:
    series: ImageSeries
    truth: BumpImage
    shifts: list
    rigid: list
    config: SynthConfig = field(repr=False)


def ground_truth(cfg: SynthConfig) -> BumpImage:
    """The lattice of Gaussians covering the image plus a margin, in domain units."""
    M, N = cfg.size
    a, b = cfg.lattice_vectors
    margin = 4.0 * cfg.sigma + 2.0 * (abs(a).sum() + abs(b).sum())
    span = int(np.ceil((max(M, N) + 2 * margin) / min(np.linalg.norm(a), np.linalg.norm(b)))) + 1
    centers, amps = [], []
    o = np.asarray(cfg.origin, float)
    for p in range(-span, span + 1):
        for q in range(-span, span + 1):
            for fx, fy, amp in cfg.basis:
                c = o + (p + fx) * a + (q + fy) * b
                if -margin <= c[0] <= M + margin and -margin <= c[1] <= N + margin:
                    centers.append(((c[0]) / M, (c[1]) / N))
                    amps.append(cfg.dose * amp)
    order = np.lexsort((np.array(centers)[:, 0], np.array(centers)[:, 1]))
    centers = np.array(centers)[order]
    amps = np.array(amps)[order]
    width = cfg.sigma / np.sqrt(M * N)
    return BumpImage(centers, amps, np.full(len(amps), width), cfg.background)


def _frame_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=np.array([seed, stream], dtype=np.uint64)))


def brownian_shifts(M: int, N: int, pixel_std: float, line_std: float, rng) -> np.ndarray:
    """A raster-order Brownian path of shifts in pixels, shape ``(N, M, 2)``.

    The first pixel is drawn with the in-line step size, every further pixel
    of a line adds an in-line step and the first pixel of each new line adds
    a flyback step.
    """
    std = np.full((N, M, 1), float(pixel_std))
    std[1:, 0] = line_std
    steps = rng.standard_normal((N, M, 2)) * std
    return np.cumsum(steps.reshape(-1, 2), axis=0).reshape(N, M, 2)


def render_frame(truth: BumpImage, rigid: RigidMotion, shift: ScanlineShiftField) -> np.ndarray:
    qx, qy = apply_jud_deformation(rigid, shift)
    return truth(qx, qy)


def generate_series(cfg: SynthConfig) -> SynthResult:
    M, N = cfg.size
    truth = ground_truth(cfg)
    scale = np.array([M, N], float)
    drift_rng = _frame_rng(cfg.seed, 2 ** 32)
    rigid = [RigidMotion()]
    t = np.zeros(2)
    theta = 0.0
    drift = cfg.drift_step_std if cfg.noise else 0.0
    turn = cfg.rotation_step_std if cfg.noise else 0.0
    for _ in range(1, cfg.frames):
        t = t + drift_rng.standard_normal(2) * drift
        theta = theta + drift_rng.standard_normal() * turn
        rigid.append(RigidMotion.about_center(theta, t / scale))

    frames, shifts = [], []
    for k in range(cfg.frames):
        rng = _frame_rng(cfg.seed, k)
        if cfg.noise:
            s_px = brownian_shifts(M, N, cfg.pixel_step_std, cfg.line_step_std, rng)
        else:
            s_px = np.zeros((N, M, 2))
        shift = ScanlineShiftField(s_px / scale)
        clean = render_frame(truth, rigid[k], shift)
        frame = rng.poisson(clean).astype(np.float64) if cfg.noise else clean
        frames.append(PixelImage(frame))
        shifts.append(shift)
    series = ImageSeries(tuple(frames), cfg.dwell_time, cfg.line_time)
    return SynthResult(series, truth, shifts, rigid, cfg)


def inject_known_shifts(truth: BumpImage, line_shifts: Sequence[np.ndarray], M: int, N: int,
                        rigid: Optional[Sequence[RigidMotion]] = None, dwell_time: float = 1.0e-5,
                        line_time: float = 1.0e-2) -> ImageSeries:
    """Noise-free frames rendered with exactly the given per-line shifts.

    ``line_shifts[k]`` is an ``(N, 2)`` array of shifts in pixels.
    """
    scale = np.array([M, N], float)
    frames = []
    for k, ls in enumerate(line_shifts):
        r = rigid[k] if rigid is not None else RigidMotion()
        field_ = ScanlineShiftField.from_lines(np.asarray(ls, float) / scale, M)
        frames.append(PixelImage(render_frame(truth, r, field_)))
    return ImageSeries(tuple(frames), dwell_time, line_time)


def write_synth(result: SynthResult, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_series(result.series, out / "series.rsis")
    result.truth.to_csv(out / "truth_bumps.csv")
    write_shift_csv(out / "truth_shifts.csv", result.shifts)
    write_rigid_csv(out / "truth_rigid.csv", result.rigid)
    (out / "config.json").write_text(result.config.to_json() + "\n")
