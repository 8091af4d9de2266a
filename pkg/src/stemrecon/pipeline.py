"""End-to-end reconstruction: alignment, atom initialization, staged
minimization, precision evaluation and export.

Stages of ``reconstruct``:
  1. convex atom identification on frame 1, then BFGS on the frame-1 data
     term plus the out-of-domain penalty over p with the bump width fixed;
  2. trust-region Newton on the data term of all frames over p (zero shifts);
  3. trust-region Newton on the full energy with row-constant shifts;
  4. trust-region Newton on the full energy over all shifts and p.
"""
from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .deconv import DeconvConfig, identify_atoms
from .density import Field, ParamVector, write_atoms_csv
from .energy import JointState, Objective, Problem, ReconstructionConfig
from .noise import DomainError
from .scan import FrameStack, ScanGeometry, pixel_grid, write_shifts
from .solve import (
    BfgsConfig,
    NotPositiveDefinite,
    TrustRegionConfig,
    bfgs_minimize,
    trust_region_minimize,
    write_diagnostics,
)

__all__ = [
    "PipelineConfig",
    "StageRecord",
    "ReconstructionReport",
    "PrecisionReport",
    "align_frames",
    "prune_atoms",
    "prune_radius",
    "initial_atoms",
    "reconstruct",
    "precision",
    "precision_experiment",
    "write_precision_csv",
    "plot_precision",
    "write_outputs",
    "render_density",
    "render_shifts",
    "match_atoms",
]

log = logging.getLogger(__name__)

STAGE_NAMES = ("init-bfgs", "params-tr", "rows-tr", "full-tr")


@dataclass(frozen=True)
class PipelineConfig:
    recon: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    deconv: DeconvConfig = field(default_factory=DeconvConfig)
    # the data term carries an arbitrary additive constant, so absolute
    # gradient tolerances are used instead of ones relative to |f(x0)|
    trust_region: TrustRegionConfig = field(default_factory=lambda: TrustRegionConfig(grad_tol=1e-3))
    bfgs: BfgsConfig = field(default_factory=lambda: BfgsConfig(grad_tol=1e-2))
    align: bool = True
    align_radius: int = 16
    budgets: tuple = (500, 200, 200, 500)
    stages: int = 4

    def __post_init__(self):
        if len(self.budgets) != 4 or min(self.budgets) < 1:
            raise ValueError("need four stage budgets, each at least 1")
        if not 1 <= self.stages <= 4:
            raise ValueError("stages must be between 1 and 4")
        if self.align_radius < 0:
            raise ValueError("alignment radius must be nonnegative")


@dataclass
class StageRecord:
    stage: int
    name: str
    iterations: int
    converged: bool
    stage_energy: float
    full_energy: float
    seconds: float
    message: str = ""


@dataclass
class ReconstructionReport:
    stages: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    p_ini: ParamVector | None = None
    offsets: np.ndarray | None = None
    crop_origin: tuple = (0, 0)
    failed_stage: int | None = None
    failure: str = ""

    @property
    def ok(self) -> bool:
        return self.failed_stage is None


# -- preprocessing ---------------------------------------------------------------------


def _window_sums(a, r):
    """Sum of ``a`` over the overlap window for every shift in ``[-r, r]^2``.

    For a shift ``(dx, dy)`` the overlap in reference coordinates is
    ``rows max(0,-dy)..min(n2, n2-dy)``, columns likewise.
    """
    n2, n1 = a.shape
    S = np.zeros((n2 + 1, n1 + 1))
    S[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    out = np.empty((2 * r + 1, 2 * r + 1))
    for iy, dy in enumerate(range(-r, r + 1)):
        y0, y1 = max(0, -dy), min(n2, n2 - dy)
        for ix, dx in enumerate(range(-r, r + 1)):
            x0, x1 = max(0, -dx), min(n1, n1 - dx)
            out[iy, ix] = S[y1, x1] - S[y0, x1] - S[y1, x0] + S[y0, x0]
    return out


def _ncc_shift(ref, img, r):
    """Integer ``(dx, dy)`` with ``img[y + dy, x + dx] ~ ref[y, x]`` maximizing NCC."""
    n2, n1 = ref.shape
    r = int(min(r, n1 - 1, n2 - 1))
    if np.ptp(ref) == 0 or np.ptp(img) == 0:
        warnings.warn("constant frame in alignment; using zero shift", RuntimeWarning, stacklevel=3)
        return 0, 0
    shape = (2 * n2, 2 * n1)
    F = np.fft.rfft2(ref, shape)
    G = np.fft.rfft2(img, shape)
    corr = np.fft.irfft2(np.conj(F) * G, shape)  # corr[dy, dx] = sum ref[y,x] img[y+dy,x+dx]
    idx_y = np.arange(-r, r + 1) % shape[0]
    idx_x = np.arange(-r, r + 1) % shape[1]
    cross = corr[np.ix_(idx_y, idx_x)]
    # sums of ref over its overlap part, and of img over the shifted part
    sr = _window_sums(ref, r)
    sr2 = _window_sums(ref * ref, r)
    si = _window_sums(img, r)[::-1, ::-1]
    si2 = _window_sums(img * img, r)[::-1, ::-1]
    dys = np.arange(-r, r + 1)[:, None]
    dxs = np.arange(-r, r + 1)[None, :]
    n = (n2 - np.abs(dys)) * (n1 - np.abs(dxs))
    num = cross - sr * si / n
    den = np.sqrt(np.maximum(sr2 - sr * sr / n, 0) * np.maximum(si2 - si * si / n, 0))
    with np.errstate(invalid="ignore", divide="ignore"):
        ncc = np.where(den > 0, num / den, -np.inf)
    # require a reasonable overlap so tiny corners cannot win
    ncc[n < 0.25 * n1 * n2] = -np.inf
    iy, ix = np.unravel_index(int(np.argmax(ncc)), ncc.shape)
    return int(ix - r), int(iy - r)


def align_frames(stack: FrameStack, radius: int = 16) -> FrameStack:
    """Align frames 2..K to frame 1 by integer translations and crop.

    ``offsets[k] = (dx, dy)`` means frame ``k`` shows reference pixel
    ``(x, y)`` at ``(x + dx, y + dy)``.  The crop origin in frame-1 pixels is
    stored in ``meta["crop_origin"]``.
    """
    K = stack.K
    n2, n1 = stack.frames.shape[1:]
    offs = np.zeros((K, 2), dtype=int)
    for k in range(1, K):
        offs[k] = _ncc_shift(stack.frames[0], stack.frames[k], radius)
    x0 = max(0, int(np.max(-offs[:, 0])))
    x1 = min(n1, int(np.min(n1 - offs[:, 0])))
    y0 = max(0, int(np.max(-offs[:, 1])))
    y1 = min(n2, int(np.min(n2 - offs[:, 1])))
    if x1 - x0 < 1 or y1 - y0 < 1:
        raise ValueError("aligned frames have no common support")
    frames = np.stack([
        stack.frames[k, y0 + offs[k, 1]: y1 + offs[k, 1], x0 + offs[k, 0]: x1 + offs[k, 0]]
        for k in range(K)
    ])
    g = stack.geometry
    geom = ScanGeometry(x1 - x0, y1 - y0, dx1=g.dx1, dx2=g.dx2) if (x0, y0, x1, y1) != (0, 0, n1, n2) else g
    meta = dict(stack.meta)
    meta["crop_origin"] = (x0, y0)
    return FrameStack(frames, geom, offs, meta)


def prune_radius(width: float, max_intensity: float) -> float:
    """Distance beyond which an atom adds at most 1e-8 inside the domain."""
    return math.sqrt(-2.0 * width * width * math.log(1e-8 / max_intensity))


def prune_atoms(p: ParamVector, domain, max_intensity: float) -> ParamVector:
    """Drop atoms farther than ``prune_radius`` from ``domain``; flag the rest."""
    x0, y0, x1, y1 = domain
    c = p.centers
    dx = np.maximum(np.maximum(x0 - c[:, 0], c[:, 0] - x1), 0.0)
    dy = np.maximum(np.maximum(y0 - c[:, 1], c[:, 1] - y1), 0.0)
    dist = np.hypot(dx, dy)
    r = prune_radius(p.width, max_intensity) if max_intensity > 1e-8 else 0.0
    keep = dist <= r
    inside = dist == 0.0
    q = p.subset(keep)
    return replace(q, in_domain=inside[keep])


def initial_atoms(stack: FrameStack, cfg: PipelineConfig):
    """Atom identification on frame 1, alignment and pruning.

    Returns ``(aligned stack, p_ini)``.
    """
    p0, _ = identify_atoms(stack.frames[0], cfg.deconv)
    aligned = align_frames(stack, cfg.align_radius) if (cfg.align and stack.K > 1) else stack
    x0, y0 = aligned.meta.get("crop_origin", (0, 0))
    p = p0.translated((-x0, -y0)) if (x0 or y0) else p0
    g1 = float(np.max(np.abs(aligned.frames[0])))
    p = prune_atoms(p, aligned.geometry.domain, g1)
    if p.offset <= 0:
        p = replace(p, offset=max(float(np.median(aligned.frames[0])), 1e-3))
    return aligned, p


# -- staged reconstruction ------------------------------------------------------------


def _tr_cfg(cfg: PipelineConfig, budget: int) -> TrustRegionConfig:
    return replace(cfg.trust_region, max_iters=budget)


def reconstruct(stack: FrameStack, cfg: PipelineConfig | None = None, p_ini: ParamVector | None = None):
    """Run the staged minimization; returns ``(JointState, ReconstructionReport)``.

    With ``p_ini`` given, atom identification and alignment are skipped and
    ``stack`` is used as is.  A failing stage stops the run; the state of the
    last completed stage is returned and the report records the failure.
    """
    cfg = cfg or PipelineConfig()
    report = ReconstructionReport()
    if p_ini is None:
        stack, p_ini = initial_atoms(stack, cfg)
    report.p_ini = p_ini
    report.offsets = stack.offsets
    report.crop_origin = tuple(stack.meta.get("crop_origin", (0, 0)))
    rcfg = replace(cfg.recon, p_ini=p_ini, geometry=None)
    prob = Problem(stack, rcfg)
    g = prob.geometry
    K = prob.K
    state = JointState(p_ini, np.zeros((K, g.n2, g.n1, 2)))

    def full_energy(st: JointState) -> float:
        return prob.evaluate(st.p, st.shifts, 0)["terms"].total

    def record(stage, res, obj, x, t0, name):
        report.stages.append(StageRecord(
            stage, name, res.iterations, bool(res.converged), float(obj.value(x)),
            full_energy(state), time.perf_counter() - t0, getattr(res, "message", ""),
        ))

    try:
        # stage 1
        t0 = time.perf_counter()
        prob1 = Problem(stack.subset([0]), replace(rcfg, cutoff_tol=prob.cutoff_tol))
        free = np.ones(p_ini.n_params, bool)
        free[p_ini.width_index] = False
        obj = Objective(prob1, p_ini, "params", free)
        res = bfgs_minimize(obj, obj.pack(p_ini), replace(cfg.bfgs, max_iters=cfg.budgets[0]))
        state = JointState(obj.unpack(res.x)[0], state.shifts)
        record(1, res, obj, res.x, t0, STAGE_NAMES[0])
        if cfg.stages >= 2:
            t0 = time.perf_counter()
            obj = Objective(prob, state.p, "params")
            res = trust_region_minimize(obj, obj.pack(state.p), _tr_cfg(cfg, cfg.budgets[1]))
            report.diagnostics[2] = res.diagnostics
            state = JointState(obj.unpack(res.x)[0], state.shifts)
            record(2, res, obj, res.x, t0, STAGE_NAMES[1])
        if cfg.stages >= 3:
            t0 = time.perf_counter()
            obj = Objective(prob, state.p, "rows")
            v0 = state.shifts[:, :, 0, :]
            res = trust_region_minimize(obj, obj.pack(state.p, v0), _tr_cfg(cfg, cfg.budgets[2]))
            report.diagnostics[3] = res.diagnostics
            p, w = obj.unpack(res.x)
            state = JointState(p, w)
            record(3, res, obj, res.x, t0, STAGE_NAMES[2])
        if cfg.stages >= 4:
            t0 = time.perf_counter()
            obj = Objective(prob, state.p, "full")
            res = trust_region_minimize(obj, obj.pack(state.p, state.shifts), _tr_cfg(cfg, cfg.budgets[3]))
            report.diagnostics[4] = res.diagnostics
            p, w = obj.unpack(res.x)
            state = JointState(p, w)
            record(4, res, obj, res.x, t0, STAGE_NAMES[3])
    except (DomainError, NotPositiveDefinite, np.linalg.LinAlgError, FloatingPointError, ValueError) as exc:
        report.failed_stage = len(report.stages) + 1
        report.failure = f"{type(exc).__name__}: {exc}"
        log.warning("stage %d failed: %s", report.failed_stage, report.failure)
    return state, report


# -- precision ----------------------------------------------------------------------


@dataclass(frozen=True)
class PrecisionReport:
    horizontal: float | None
    vertical: float | None
    n_horizontal: int
    n_vertical: int


def _rows(centers, row_spacing):
    order = np.argsort(centers[:, 1], kind="stable")
    ys = centers[order, 1]
    breaks = np.flatnonzero(np.diff(ys) > 0.5 * row_spacing) + 1
    return np.split(order, breaks)


def precision(p: ParamVector, spacing: float = 19.37, only_in_domain: bool = True) -> PrecisionReport:
    """Sample standard deviations of horizontal and vertical neighbour distances.

    Atoms are grouped into lattice rows by their ``y`` coordinate (a gap of
    more than half the row spacing starts a new row).  Horizontal pairs are
    consecutive atoms of a row, measured by their ``x`` difference; vertical
    pairs join each atom to its nearest atom in the next row, measured by
    their ``y`` difference.  Pairs farther apart than 1.5 spacings (a missing
    atom) are skipped.
    """
    c = p.centers[p.in_domain] if only_in_domain else p.centers
    row_spacing = spacing * math.sqrt(3.0) / 2.0
    rows = _rows(c, row_spacing) if len(c) else []
    hor, ver = [], []
    for i, r in enumerate(rows):
        rc = c[r][np.argsort(c[r, 0], kind="stable")]
        dx = np.diff(rc[:, 0])
        hor.extend(dx[dx < 1.5 * spacing])
        if i + 1 < len(rows):
            nxt = c[rows[i + 1]]
            if abs(np.mean(nxt[:, 1]) - np.mean(rc[:, 1])) > 1.5 * row_spacing:
                continue
            for a in rc:
                d = np.hypot(nxt[:, 0] - a[0], nxt[:, 1] - a[1])
                j = int(np.argmin(d))
                if d[j] < 1.5 * spacing:
                    ver.append(abs(nxt[j, 1] - a[1]))
    h = float(np.std(hor, ddof=1)) if len(hor) >= 2 else None
    v = float(np.std(ver, ddof=1)) if len(ver) >= 2 else None
    return PrecisionReport(h, v, len(hor), len(ver))


def _run_group(args):
    frames, geometry, cfg, spacing = args
    stack = FrameStack(frames, geometry)
    state, report = reconstruct(stack, cfg)
    if not report.ok:
        return None
    pr = precision(state.p, spacing)
    if pr.horizontal is None or pr.vertical is None:
        return None
    return pr.horizontal, pr.vertical


def precision_experiment(stack: FrameStack, group_sizes=(1, 2, 4, 8, 16), cfg: PipelineConfig | None = None,
                         spacing: float = 19.37, jobs: int = 1):
    """Mean precision per group size over contiguous groups of frames.

    Returns rows ``dict(K, horizontal, vertical, groups, failed)``; failed
    groups are excluded from the means and counted.
    """
    cfg = cfg or PipelineConfig()
    group_sizes = sorted(int(k) for k in group_sizes)
    if stack.K % group_sizes[-1]:
        raise ValueError(f"{stack.K} frames are not divisible into groups of {group_sizes[-1]}")
    tasks, index = [], []
    for K in group_sizes:
        for s in range(0, stack.K, K):
            tasks.append((stack.frames[s:s + K], stack.geometry, cfg, spacing))
            index.append(K)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(_run_group, tasks))
    else:
        results = [_run_group(t) for t in tasks]
    rows = []
    for K in group_sizes:
        got = [r for r, k in zip(results, index) if k == K]
        good = [r for r in got if r is not None]
        h = float(np.mean([r[0] for r in good])) if good else math.nan
        v = float(np.mean([r[1] for r in good])) if good else math.nan
        rows.append(dict(K=K, horizontal=h, vertical=v, groups=len(good), failed=len(got) - len(good)))
    return rows


def write_precision_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["K", "horizontal", "vertical", "groups", "failed"])
        for r in rows:
            w.writerow([r["K"], repr(float(r["horizontal"])), repr(float(r["vertical"])), r["groups"], r["failed"]])


def plot_precision(path, rows) -> None:
    """Log-log plot of precision against group size."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    K = [r["K"] for r in rows]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.loglog(K, [r["horizontal"] for r in rows], "o-", label="horizontal")
    ax.loglog(K, [r["vertical"] for r in rows], "s-", label="vertical")
    ax.set_xlabel("frames per group K")
    ax.set_ylabel("precision [px]")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


# -- export ---------------------------------------------------------------------------


def write_stages_csv(path, stages) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["stage", "name", "iterations", "converged", "stage_energy", "full_energy", "seconds", "message"])
        for s in stages:
            w.writerow([s.stage, s.name, s.iterations, int(s.converged), repr(float(s.stage_energy)),
                        repr(float(s.full_energy)), f"{s.seconds:.3f}", s.message])


def render_density(path, p: ParamVector, geometry: ScanGeometry) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    u = Field(p, pixel_grid(geometry).reshape(-1, 2)).u.reshape(geometry.shape)
    plt.imsave(path, u, cmap="gray")


def render_shifts(path, w) -> None:
    """Color map of one shift field: hue is direction, value is magnitude."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from matplotlib.colors import hsv_to_rgb

    w = np.asarray(w, dtype=float)
    mag = np.hypot(w[..., 0], w[..., 1])
    hue = (np.arctan2(w[..., 1], w[..., 0]) / (2 * np.pi)) % 1.0
    top = float(mag.max()) or 1.0
    hsv = np.stack([hue, np.ones_like(hue), mag / top], axis=-1)
    plt.imsave(path, hsv_to_rgb(hsv))


def write_outputs(outdir, state: JointState, report: ReconstructionReport, geometry: ScanGeometry,
                  images: bool = False) -> list:
    """Write atoms.csv, shifts_k.bin, stages.csv and diagnostics; returns the paths."""
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "atoms.csv"]
    write_atoms_csv(paths[0], state.p)
    for k, w in enumerate(state.shifts, start=1):
        path = out / f"shifts_{k}.bin"
        write_shifts(path, w)
        paths.append(path)
    paths.append(out / "stages.csv")
    write_stages_csv(paths[-1], report.stages)
    for stage, rows in sorted(report.diagnostics.items()):
        path = out / f"diagnostics_stage{stage}.csv"
        write_diagnostics(path, rows)
        paths.append(path)
    if images:
        path = out / "density.png"
        render_density(path, state.p, geometry)
        paths.append(path)
        for k, w in enumerate(state.shifts, start=1):
            path = out / f"shifts_{k}.png"
            render_shifts(path, w)
            paths.append(path)
    return paths


def match_atoms(found, truth, gate: float):
    """Greedy nearest-pair matching; returns ``(pairs, unmatched_found, unmatched_truth)``."""
    found = np.asarray(found, dtype=float).reshape(-1, 2)
    truth = np.asarray(truth, dtype=float).reshape(-1, 2)
    if len(found) == 0 or len(truth) == 0:
        return [], list(range(len(found))), list(range(len(truth)))
    d = np.hypot(found[:, None, 0] - truth[None, :, 0], found[:, None, 1] - truth[None, :, 1])
    order = np.argsort(d, axis=None, kind="stable")
    used_f, used_t, pairs = set(), set(), []
    for flat in order:
        i, j = divmod(int(flat), len(truth))
        if d[i, j] > gate:
            break
        if i in used_f or j in used_t:
            continue
        used_f.add(i)
        used_t.add(j)
        pairs.append((i, j, float(d[i, j])))
    return (pairs, [i for i in range(len(found)) if i not in used_f],
            [j for j in range(len(truth)) if j not in used_t])
