"""Raster scan geometry, shift-field chain structure and frame containers.

Pixel ``i`` (1-based, row-major) sits at ``x = (m*dx1, l*dx2)`` with
``m = (i-1) mod n1 + 1`` and ``l = (i-1) // n1 + 1``.  Frames are stored as
``(n2, n1)`` arrays (row index first); shift fields as ``(n2, n1, 2)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

__all__ = [
    "ScanGeometry",
    "FrameStack",
    "pixel_position",
    "pixel_grid",
    "brownian_chain_weights",
    "chain_arrays",
    "write_stack",
    "read_stack",
    "read_text_frames",
    "write_shifts",
    "read_shifts",
]

MAGIC = b"STEMSTK1"


@dataclass(frozen=True)
class ScanGeometry:
    """``n1`` pixels per row, ``n2`` rows, pixel pitch, dwell and flyback time.

    ``dt`` defaults to ``1 / max(n1 - 1, n2 - 1)`` and ``dT`` to ``1000 * dt``.
    """

    n1: int
    n2: int
    dt: float | None = None
    dT: float | None = None
    dx1: float = 1.0
    dx2: float = 1.0

    def __post_init__(self):
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("a scan needs at least one row and one column")
        dt = self.dt
        if dt is None:
            dt = 1.0 / max(self.n1 - 1, self.n2 - 1, 1)
        dT = self.dT if self.dT is not None else 1000.0 * dt
        if not (dt > 0 and dT > 0):
            raise ValueError("dwell and flyback times must be positive")
        object.__setattr__(self, "dt", float(dt))
        object.__setattr__(self, "dT", float(dT))
        object.__setattr__(self, "n1", int(self.n1))
        object.__setattr__(self, "n2", int(self.n2))

    @property
    def n_pixels(self) -> int:
        return self.n1 * self.n2

    @property
    def shape(self) -> tuple[int, int]:
        """Array shape ``(rows, columns)`` of a frame."""
        return (self.n2, self.n1)

    @property
    def domain(self) -> tuple[float, float, float, float]:
        """Scanned rectangle ``(xmin, ymin, xmax, ymax)``."""
        return (0.0, 0.0, self.n1 * self.dx1, self.n2 * self.dx2)

    def cropped(self, n1: int, n2: int) -> "ScanGeometry":
        """Same pitch, times rescaled for the new size."""
        return ScanGeometry(n1, n2, dx1=self.dx1, dx2=self.dx2)


def pixel_position(geometry: ScanGeometry, i: int):
    """Position and acquisition time of 1-based linear pixel index ``i``.

    Returns ``((x1, x2), t, (m, l))``.
    """
    n = geometry.n_pixels
    if not 1 <= i <= n:
        raise IndexError(f"pixel index {i} outside 1..{n}")
    m = (i - 1) % geometry.n1 + 1
    l = (i - 1) // geometry.n1 + 1
    x = np.array([m * geometry.dx1, l * geometry.dx2])
    t = (l * geometry.n1 + m) * geometry.dt + l * geometry.dT
    return x, t, (m, l)


def pixel_grid(geometry: ScanGeometry) -> np.ndarray:
    """All pixel positions as an ``(n2, n1, 2)`` array in raster order."""
    m = np.arange(1, geometry.n1 + 1) * geometry.dx1
    l = np.arange(1, geometry.n2 + 1) * geometry.dx2
    grid = np.empty((geometry.n2, geometry.n1, 2))
    grid[..., 0] = m[None, :]
    grid[..., 1] = l[:, None]
    return grid


def brownian_chain_weights(geometry: ScanGeometry):
    """Predecessor chain of the Brownian penalty in raster order.

    Yields ``((m, l), predecessor, inverse_gap)`` where ``predecessor`` is
    ``None`` for the first pixel (compared with the zero initial motion),
    ``dt`` separates pixels within a row and ``dT`` separates the last pixel
    of a row from the first pixel of the next.
    """
    n1, n2 = geometry.n1, geometry.n2
    for l in range(1, n2 + 1):
        for m in range(1, n1 + 1):
            if m == 1 and l == 1:
                yield (1, 1), None, 1.0 / geometry.dt
            elif m == 1:
                yield (1, l), (n1, l - 1), 1.0 / geometry.dT
            else:
                yield (m, l), (m - 1, l), 1.0 / geometry.dt


def chain_arrays(geometry: ScanGeometry):
    """Vectorized chain: ``(current, predecessor, inverse_gap)`` over 0-based
    raster indices; ``predecessor[0] == -1`` marks the zero anchor."""
    n = geometry.n_pixels
    cur = np.arange(n)
    pred = cur - 1
    inv = np.full(n, 1.0 / geometry.dt)
    inv[geometry.n1::geometry.n1] = 1.0 / geometry.dT
    return cur, pred, inv


@dataclass(frozen=True)
class FrameStack:
    """``K`` frames of equal shape with their scan geometry.

    ``offsets`` holds the integer ``(dx, dy)`` translation of each frame
    relative to frame 0 after alignment, when known.
    """

    frames: np.ndarray
    geometry: ScanGeometry
    offsets: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim == 2:
            frames = frames[None]
        if frames.ndim != 3 or frames.shape[0] < 1:
            raise ValueError("expected a (K, n2, n1) stack with K >= 1")
        if frames.shape[1:] != self.geometry.shape:
            raise ValueError(
                f"frame shape {frames.shape[1:]} does not match geometry {self.geometry.shape}"
            )
        object.__setattr__(self, "frames", frames)

    @property
    def K(self) -> int:
        return self.frames.shape[0]

    def subset(self, idx) -> "FrameStack":
        idx = np.atleast_1d(idx)
        off = None if self.offsets is None else self.offsets[idx]
        return replace(self, frames=self.frames[idx], offsets=off)


# -- containers ---------------------------------------------------------------

_HEADER = struct.Struct("<8sIIIdd")


def write_stack(path, stack: FrameStack) -> None:
    """Write the ``STEMSTK1`` little-endian container."""
    g = stack.geometry
    head = _HEADER.pack(MAGIC, stack.K, g.n1, g.n2, g.dt, g.dT)
    body = np.ascontiguousarray(stack.frames, dtype="<f8").tobytes()
    Path(path).write_bytes(head + body)


def read_stack(path) -> FrameStack:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size or raw[:8] != MAGIC:
        raise ValueError(f"{path}: not a STEMSTK1 container")
    _, k, n1, n2, dt, dT = _HEADER.unpack_from(raw)
    expected = _HEADER.size + 8 * k * n1 * n2
    if len(raw) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(raw)}")
    frames = np.frombuffer(raw, dtype="<f8", offset=_HEADER.size).reshape(k, n2, n1)
    return FrameStack(frames.astype(float), ScanGeometry(n1, n2, dt, dT))


def read_text_frames(directory, dt: float | None = None, dT: float | None = None) -> FrameStack:
    """Load every ``*.txt`` matrix in ``directory`` (sorted by name) as a frame."""
    files = sorted(Path(directory).glob("*.txt"))
    if not files:
        raise FileNotFoundError(f"no .txt frames in {directory}")
    frames = np.stack([np.loadtxt(f, ndmin=2) for f in files])
    return FrameStack(frames, ScanGeometry(frames.shape[2], frames.shape[1], dt, dT))


def write_shifts(path, w: np.ndarray) -> None:
    """Raster-ordered ``(w1, w2)`` float64 pairs."""
    Path(path).write_bytes(np.ascontiguousarray(w, dtype="<f8").tobytes())


def read_shifts(path, geometry: ScanGeometry) -> np.ndarray:
    w = np.frombuffer(Path(path).read_bytes(), dtype="<f8")
    return w.reshape(geometry.n2, geometry.n1, 2).astype(float)
