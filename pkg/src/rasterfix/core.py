"""Pixel grids, bilinear sampling, frame averaging and the native file formats.

Images are stored as arrays of shape ``(N, M)``: row ``j`` is one scan line
(slow, y direction) and column ``i`` runs along the fast x direction.  Pixel
``(i, j)`` sits at the domain point ``((i + 1/2) / M, (j + 1/2) / N)`` of the
unit square, with 0-based indices.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class FormatError(ValueError):
    """Raised when a native or PGM file cannot be decoded."""

    code = "format"


class BadMagicError(FormatError):
    code = "bad-magic"


class DimensionMismatchError(FormatError):
    code = "dimension-mismatch"


class TruncatedPayloadError(FormatError):
    code = "truncated-payload"


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PixelImage:
    """A finite 2D raster of intensities, shape ``(N, M)``."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"image must be 2D, got shape {v.shape}")
        if v.shape[0] < 2 or v.shape[1] < 2:
            raise ValueError(f"image must be at least 2x2, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("image contains non-finite values")
        object.__setattr__(self, "values", _readonly(v))

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple:
        return self.values.shape


@dataclass(frozen=True)
class ImageSeries:
    """K measured frames sharing one size plus scan timing metadata."""

    frames: tuple
    dwell_time: float = 1.0e-5
    line_time: float = 1.0e-2
    pixel_pitch: Optional[float] = None

    def __post_init__(self):
        frames = tuple(f if isinstance(f, PixelImage) else PixelImage(f) for f in self.frames)
        if not frames:
            raise ValueError("series needs at least one frame")
        shape = frames[0].shape
        for k, f in enumerate(frames):
            if f.shape != shape:
                raise ValueError(f"frame {k} has shape {f.shape}, expected {shape}")
            if np.any(f.values < 0):
                raise ValueError(f"frame {k} has negative counts")
        if not (self.dwell_time > 0 and self.line_time > 0):
            raise ValueError("dwell and line times must be positive")
        object.__setattr__(self, "frames", frames)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def shape(self) -> tuple:
        return self.frames[0].shape

    def stack(self) -> np.ndarray:
        return np.stack([f.values for f in self.frames])

    def subset(self, indices: Sequence[int]) -> "ImageSeries":
        return ImageSeries(tuple(self.frames[i] for i in indices), self.dwell_time,
                           self.line_time, self.pixel_pitch)


def pixel_coordinates(M: int, N: int) -> tuple[np.ndarray, np.ndarray]:
    """Domain coordinates of all pixel centres as two ``(N, M)`` arrays."""
    x = (np.arange(M) + 0.5) / M
    y = (np.arange(N) + 0.5) / N
    return np.meshgrid(x, y)


@dataclass(frozen=True)
class ImageDomain:
    """Pixel-centre coordinates of an ``M x N`` raster and a coverage weight map."""

    M: int
    N: int
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        w = np.ones((self.N, self.M)) if self.weights is None else np.asarray(self.weights, float)
        if w.shape != (self.N, self.M):
            raise ValueError("weight map shape does not match the domain")
        if np.any(w < 0):
            raise ValueError("weights must be nonnegative")
        object.__setattr__(self, "weights", _readonly(w))

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        return pixel_coordinates(self.M, self.N)

    @property
    def valid(self) -> np.ndarray:
        return self.weights > 0


def sample_bilinear(values: np.ndarray, px, py, with_grad: bool = False):
    """Bilinear interpolation of pixel values at domain points.

    Points outside the hull of pixel centres are clamped onto it, so the
    returned spatial derivative is zero in the clamped direction there.
    With ``with_grad`` the derivatives with respect to ``px`` and ``py`` (domain
    units) are returned as well.
    """
    values = np.asarray(values, dtype=np.float64)
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    if not (np.all(np.isfinite(px)) and np.all(np.isfinite(py))):
        raise ValueError("non-finite sample position")
    N, M = values.shape
    a = px * M - 0.5
    b = py * N - 0.5
    a_in = (a > 0) & (a < M - 1)
    b_in = (b > 0) & (b < N - 1)
    a = np.clip(a, 0.0, M - 1.0)
    b = np.clip(b, 0.0, N - 1.0)
    i0 = np.minimum(np.floor(a).astype(np.intp), M - 2)
    j0 = np.minimum(np.floor(b).astype(np.intp), N - 2)
    ta = a - i0
    tb = b - j0
    v00 = values[j0, i0]
    v10 = values[j0, i0 + 1]
    v01 = values[j0 + 1, i0]
    v11 = values[j0 + 1, i0 + 1]
    top = v00 + ta * (v10 - v00)
    bot = v01 + ta * (v11 - v01)
    out = top + tb * (bot - top)
    if not with_grad:
        return out
    ga = ((1 - tb) * (v10 - v00) + tb * (v11 - v01)) * M * a_in
    gb = (bot - top) * N * b_in
    return out, ga, gb


def bilinear_interpolate(img, p) -> float:
    """Value of the bilinear interpolant of ``img`` at one domain point ``p``."""
    values = img.values if isinstance(img, PixelImage) else np.asarray(img, float)
    return float(sample_bilinear(values, np.float64(p[0]), np.float64(p[1])))


def _weighted_median(stack: np.ndarray, weights: np.ndarray) -> np.ndarray:
    order = np.argsort(stack, axis=0, kind="stable")
    vals = np.take_along_axis(stack, order, axis=0)
    w = np.take_along_axis(weights, order, axis=0)
    cum = np.cumsum(w, axis=0)
    half = cum[-1] / 2.0
    lo = np.argmax(cum >= half, axis=0)
    hi = np.argmax(cum > half, axis=0)
    v_lo = np.take_along_axis(vals, lo[None], axis=0)[0]
    v_hi = np.take_along_axis(vals, hi[None], axis=0)[0]
    return 0.5 * (v_lo + v_hi)


def average_frames(frames, method: str = "median", weights=None) -> PixelImage:
    """Pixel-wise mean or median of a stack of frames.

    ``weights`` is an optional ``(K, N, M)`` array (or an ``ImageDomain`` per
    frame) of nonnegative per-frame pixel weights; for the median they act as
    multiplicities.  Pixels whose total weight is zero are filled with the
    mean of the valid result pixels.
    """
    if isinstance(frames, ImageSeries):
        frames = frames.frames
    if len(frames) == 0:
        raise ValueError("cannot average an empty list of frames")
    stack = np.stack([f.values if isinstance(f, PixelImage) else np.asarray(f, float)
                      for f in frames])
    if weights is None:
        if method == "mean":
            return PixelImage(stack.mean(axis=0))
        if method == "median":
            return PixelImage(np.median(stack, axis=0))
        raise ValueError(f"unknown averaging method {method!r}")

    if isinstance(weights, (list, tuple)) and weights and isinstance(weights[0], ImageDomain):
        weights = np.stack([d.weights for d in weights])
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != stack.shape:
        raise ValueError("weights must match the frame stack shape")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum(axis=0)
    valid = total > 0
    safe = np.where(valid, total, 1.0)
    if method == "mean":
        out = (w * stack).sum(axis=0) / safe
    elif method == "median":
        out = _weighted_median(stack, np.where(valid[None], w, 1.0))
    else:
        raise ValueError(f"unknown averaging method {method!r}")
    if not valid.all():
        fill = out[valid].mean() if valid.any() else 0.0
        out = np.where(valid, out, fill)
    return PixelImage(out)


# --- native binary format ---------------------------------------------------

_HEADER = struct.Struct("<4sIIIIdd")


def _encode(magic: bytes, stack: np.ndarray, dt: float, dT: float) -> bytes:
    K, N, M = stack.shape
    head = _HEADER.pack(magic, 1, K, M, N, float(dt), float(dT))
    return head + np.ascontiguousarray(stack, dtype="<f8").tobytes()


def _decode(buf: bytes, magic: bytes):
    if len(buf) < 4 or buf[:4] != magic:
        raise BadMagicError(f"expected magic {magic!r}, got {buf[:4]!r}")
    if len(buf) < _HEADER.size:
        raise TruncatedPayloadError("header is truncated")
    _, version, K, M, N, dt, dT = _HEADER.unpack_from(buf)
    if version != 1:
        raise FormatError(f"unsupported version {version}")
    if K < 1 or M < 2 or N < 2:
        raise DimensionMismatchError(f"invalid dimensions K={K} M={M} N={N}")
    need = _HEADER.size + 8 * K * M * N
    if len(buf) < need:
        raise TruncatedPayloadError(f"payload has {len(buf) - _HEADER.size} bytes, "
                                    f"expected {need - _HEADER.size}")
    if len(buf) > need:
        raise DimensionMismatchError("payload is longer than the header dimensions")
    data = np.frombuffer(buf, dtype="<f8", count=K * M * N, offset=_HEADER.size)
    return data.reshape(K, N, M).astype(np.float64), dt, dT


def save_series(series: ImageSeries, path) -> None:
    Path(path).write_bytes(_encode(b"RSIS", series.stack(), series.dwell_time, series.line_time))


def load_series(path) -> ImageSeries:
    stack, dt, dT = _decode(Path(path).read_bytes(), b"RSIS")
    return ImageSeries(tuple(PixelImage(f) for f in stack), dt, dT)


def save_stack(stack: np.ndarray, path, dt: float = 1.0, dT: float = 1.0) -> None:
    """Write an arbitrary ``(K, N, M)`` array (no sign constraint) as RSIS."""
    Path(path).write_bytes(_encode(b"RSIS", np.asarray(stack, float), dt, dT))


def load_stack(path) -> np.ndarray:
    return _decode(Path(path).read_bytes(), b"RSIS")[0]


def save_image(img, path) -> None:
    values = img.values if isinstance(img, PixelImage) else np.asarray(img, float)
    Path(path).write_bytes(_encode(b"RSIM", values[None], 1.0, 1.0))


def load_image(path) -> PixelImage:
    stack, _, _ = _decode(Path(path).read_bytes(), b"RSIM")
    if stack.shape[0] != 1:
        raise DimensionMismatchError("single-image file must have K=1")
    return PixelImage(stack[0])


# --- PGM interop --------------------------------------------------------------

def _pgm_tokens(buf: bytes, count: int):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedPayloadError("PGM header is truncated")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def load_pgm(path) -> PixelImage:
    """Read a binary (P5) PGM; 16-bit samples are big-endian per the format."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise BadMagicError("not a binary PGM (P5) file")
    (w, h, maxval), offset = _pgm_tokens(buf[2:], 3)
    w, h, maxval = int(w), int(h), int(maxval)
    offset += 2
    dtype = ">u2" if maxval > 255 else "u1"
    need = w * h * np.dtype(dtype).itemsize
    if len(buf) - offset < need:
        raise TruncatedPayloadError("PGM pixel data is truncated")
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=offset)
    return PixelImage(data.reshape(h, w).astype(np.float64))


def save_pgm(img, path) -> None:
    values = img.values if isinstance(img, PixelImage) else np.asarray(img, float)
    h, w = values.shape
    data = np.clip(np.rint(values), 0, 65535).astype(">u2")
    Path(path).write_bytes(f"P5\n{w} {h}\n65535\n".encode() + data.tobytes())
