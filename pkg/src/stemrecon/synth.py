"""Synthetic distorted frame series with known ground truth.

Each frame samples the true density at ``x_ij + w_ij`` and draws Poisson
counts.  ``w`` accumulates, in raster order, one small 2-vector increment per
pixel plus one larger increment at the start of every row after the first.

Random stream order: frame ``k`` uses its own generator spawned from
``SeedSequence(seed)``; it draws the ``n1*n2`` pixel increments (raster
order, two components each), then the ``n2 - 1`` row increments, then the
Poisson counts in raster order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial import cKDTree

from .density import Field, ParamVector
from .scan import FrameStack, ScanGeometry, pixel_grid

__all__ = ["SynthConfig", "hexagonal_lattice", "generate", "expected_frame", "apparent_centers"]


@dataclass(frozen=True)
class SynthConfig:
    n1: int = 256
    n2: int = 256
    spacing: float = 19.37
    height: float = 45.0
    sigma: float = 3.0
    offset: float = 40.0
    intra: float = 0.05
    inter: float = 1.0
    frames: int = 128
    seed: int = 0
    lattice: str = "hexagonal"
    origin: tuple = (5.0, 5.0)
    noise: bool = True

    def __post_init__(self):
        for name in ("spacing", "height", "sigma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.intra < 0 or self.inter < 0 or self.offset < 0:
            raise ValueError("step deviations and offset must be nonnegative")
        if self.frames < 1 or self.n1 < 1 or self.n2 < 1:
            raise ValueError("need at least one frame of at least one pixel")
        if self.lattice != "hexagonal":
            raise ValueError(f"unsupported lattice {self.lattice!r}")

    @property
    def geometry(self) -> ScanGeometry:
        return ScanGeometry(self.n1, self.n2)

    @property
    def cutoff_tol(self) -> float:
        return 1e-8 * (self.height + self.offset)

    @property
    def margin(self) -> float:
        return self.sigma * math.sqrt(2.0 * math.log(self.height / self.cutoff_tol))

    def as_dict(self) -> dict:
        return asdict(self)


def hexagonal_lattice(spacing, box, origin=(0.0, 0.0)) -> np.ndarray:
    """Row-aligned hexagonal lattice points inside ``box = (x0, y0, x1, y1)``.

    Neighbours within a lattice row are ``spacing`` apart; rows are
    ``spacing * sqrt(3) / 2`` apart and every other row is offset by half a
    spacing.
    """
    x0, y0, x1, y1 = box
    dy = spacing * math.sqrt(3.0) / 2.0
    ox, oy = origin
    j0 = math.floor((y0 - oy) / dy) - 1
    j1 = math.ceil((y1 - oy) / dy) + 1
    pts = []
    for j in range(j0, j1 + 1):
        y = oy + j * dy
        if not y0 <= y <= y1:
            continue
        shift = 0.5 * spacing if j % 2 else 0.0
        i0 = math.floor((x0 - ox - shift) / spacing) - 1
        i1 = math.ceil((x1 - ox - shift) / spacing) + 1
        for i in range(i0, i1 + 1):
            x = ox + shift + i * spacing
            if x0 <= x <= x1:
                pts.append((x, y))
    return np.array(pts, dtype=float).reshape(-1, 2)


def truth_params(cfg: SynthConfig) -> ParamVector:
    g = cfg.geometry
    x0, y0, x1, y1 = g.domain
    m = cfg.margin
    centers = hexagonal_lattice(cfg.spacing, (x0 - m, y0 - m, x1 + m, y1 + m), cfg.origin)
    inside = (
        (centers[:, 0] >= x0) & (centers[:, 0] <= x1) & (centers[:, 1] >= y0) & (centers[:, 1] <= y1)
    )
    return ParamVector(centers, np.full(len(centers), cfg.height), cfg.sigma, cfg.offset, inside)


def random_shifts(rng: np.random.Generator, geometry: ScanGeometry, intra: float, inter: float):
    """One shift field: raster-accumulated pixel steps plus per-row jumps."""
    n1, n2 = geometry.n1, geometry.n2
    steps = rng.normal(0.0, 1.0, size=(n1 * n2, 2)) * intra
    jumps = rng.normal(0.0, 1.0, size=(max(n2 - 1, 0), 2)) * inter
    w = np.cumsum(steps, axis=0).reshape(n2, n1, 2)
    row_offset = np.zeros((n2, 2))
    if n2 > 1:
        row_offset[1:] = np.cumsum(jumps, axis=0)
    return w + row_offset[:, None, :]


def expected_frame(p: ParamVector, w, geometry: ScanGeometry, cutoff_tol: float | None = None):
    """Noise-free frame: the density sampled at ``x_ij + w_ij``."""
    pts = pixel_grid(geometry)
    if w is not None:
        pts = pts + np.asarray(w, dtype=float).reshape(pts.shape)
    return Field(p, pts.reshape(-1, 2), cutoff_tol).u.reshape(geometry.shape)


def generate(cfg: SynthConfig):
    """Return ``(stack, p_true, shifts)`` with ``shifts`` of shape ``(K, n2, n1, 2)``."""
    geometry = cfg.geometry
    p = truth_params(cfg)
    children = np.random.SeedSequence(cfg.seed).spawn(cfg.frames)
    frames = np.empty((cfg.frames, geometry.n2, geometry.n1))
    shifts = np.empty((cfg.frames, geometry.n2, geometry.n1, 2))
    for k, child in enumerate(children):
        rng = np.random.Generator(np.random.PCG64(child))
        w = random_shifts(rng, geometry, cfg.intra, cfg.inter)
        mean = expected_frame(p, w, geometry, cfg.cutoff_tol)
        frames[k] = rng.poisson(mean).astype(float) if cfg.noise else mean
        shifts[k] = w
    stack = FrameStack(frames, geometry, meta={"seed": cfg.seed, "synth": cfg.as_dict()})
    return stack, p, shifts


def apparent_centers(p: ParamVector, w, geometry: ScanGeometry, reach: float = 4.0) -> np.ndarray:
    """Where each atom shows up in a distorted frame.

    A pixel at ``x`` images ``x + w(x)``.  The apparent center of an atom at
    ``y`` is the mean of the pixel positions ``x`` weighted by the bump value
    ``exp(-|x + w(x) - y|^2 / (2 s^2))`` over pixels imaging within
    ``reach * s`` of ``y``; NaN when fewer than five pixels do.
    """
    grid = pixel_grid(geometry).reshape(-1, 2)
    imaged = grid + np.asarray(w, dtype=float).reshape(-1, 2)
    tree = cKDTree(imaged)
    s = p.width
    out = np.full((p.n_atoms, 2), np.nan)
    for l, y in enumerate(p.centers):
        idx = np.asarray(tree.query_ball_point(y, reach * s), dtype=int)
        if idx.size < 5:
            continue
        wt = np.exp(-np.sum((imaged[idx] - y) ** 2, axis=1) / (2 * s * s))
        out[l] = wt @ grid[idx] / wt.sum()
    return out
