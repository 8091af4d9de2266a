"""Command-line interface.

Subcommands: simulate, init-atoms, reconstruct, precision, experiment and
replay.  Every run writes ``manifest.json`` next to its outputs with the
resolved options, input/output checksums and timings.

Options may also come from a plain-text ``key = value`` file given with
``--config``; flags on the command line take precedence.  Exit codes: 0
success, 2 invalid configuration, 3 numerical failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

import numpy as np

from . import __version__
from .deconv import DeconvConfig, identify_atoms
from .density import read_atoms_csv, write_atoms_csv
from .energy import ReconstructionConfig
from .noise import Dissimilarity, DomainError, NoiseParams
from .pipeline import (
    PipelineConfig,
    plot_precision,
    precision,
    precision_experiment,
    reconstruct,
    render_density,
    write_outputs,
    write_precision_csv,
)
from .scan import FrameStack, read_stack, read_text_frames, write_shifts, write_stack
from .solve import NotPositiveDefinite
from .synth import SynthConfig, generate

log = logging.getLogger("stemrecon")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


class ConfigError(ValueError):
    pass


class NumericalFailure(RuntimeError):
    pass


# -- helpers ------------------------------------------------------------------------


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir: Path, command: str, argv, options: dict, inputs, outputs, seconds: float) -> Path:
    """Atomically write ``manifest.json`` (temporary file, then rename)."""
    doc = {
        "command": command,
        "version": __version__,
        "argv": list(argv),
        "config": options,
        "seeds": {k: v for k, v in options.items() if "seed" in k},
        "inputs": [{"path": str(p), "sha256": sha256(p)} for p in inputs if Path(p).is_file()],
        "outputs": [{"path": str(p), "sha256": sha256(p)} for p in outputs],
        "timings": {"wall_seconds": round(seconds, 6)},
    }
    outdir.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=".manifest-", suffix=".json", dir=outdir)
    with os.fdopen(fd, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    final = outdir / "manifest.json"
    os.replace(tmp, final)
    return final


def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def available_cores() -> int:
    if hasattr(os, "sched_getaffinity"):
        return len(os.sched_getaffinity(0))
    return os.cpu_count() or 1


def load_stack(path) -> FrameStack:
    p = Path(path)
    if p.is_dir():
        return read_text_frames(p)
    return read_stack(p)


def _csv_ints(text) -> tuple:
    try:
        return tuple(int(t) for t in str(text).split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _opt_float(text):
    return None if str(text).lower() in ("none", "auto", "") else float(text)


# -- parser ---------------------------------------------------------------------------


def _add_common(p):
    p.add_argument("--config", help="key = value file; command-line flags override it")
    p.add_argument("--out", default=".", help="output directory (default: current directory)")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")


def _add_deconv(p):
    g = p.add_argument_group("atom identification")
    g.add_argument("--bump-sigma", type=float, default=3.0, help="bump width used by the initializer (default 3)")
    g.add_argument("--dx", type=_opt_float, default=None, help="coarse cell width (default bump_sigma/2)")
    g.add_argument("--eta", type=_opt_float, default=None, help="mass penalty (default 10*dx^2*median frame)")
    g.add_argument("--gamma", type=_opt_float, default=None, help="fixed-point scaling (default 10/L)")
    g.add_argument("--max-newton-iters", type=int, default=100, help="semi-smooth Newton iterations (default 100)")
    g.add_argument("--gmres-iters", type=int, default=20, help="GMRES steps per restart (default 20)")
    g.add_argument("--residual-tol", type=_opt_float, default=None, help="default 1e-8*max frame")
    g.add_argument("--height-threshold", type=_opt_float, default=None,
                   help="minimum atom height (default 0.45*(max - background))")


def _add_recon(p):
    g = p.add_argument_group("reconstruction")
    g.add_argument("--epsilon", type=float, default=0.1, help="Brownian diffusion weight (default 0.1)")
    g.add_argument("--nu-pen", type=float, default=0.05, help="out-of-domain atom penalty (default 0.05)")
    g.add_argument("--nu-hor", type=float, default=0.1, help="horizontal shift Tikhonov weight (default 0.1)")
    g.add_argument("--nu-vert", type=float, default=10.0, help="vertical shift Tikhonov weight (default 10)")
    g.add_argument("--dissimilarity", choices=("kl", "mpg"), default="kl",
                   help="data term: Kullback-Leibler or mixed Poisson-Gaussian (default kl)")
    g.add_argument("--alpha", type=float, default=1.0, help="detector gain (default 1)")
    g.add_argument("--mu", type=float, default=0.0, help="detector offset (default 0)")
    g.add_argument("--noise-sigma", type=float, default=0.0, help="Gaussian sensor noise, needed for mpg")
    g.add_argument("--budgets", type=_csv_ints, default=(500, 200, 200, 500),
                   help="iteration budgets of the four stages (default 500,200,200,500)")
    g.add_argument("--stages", type=int, default=4, help="run stages 1..N (default 4)")
    g.add_argument("--align-radius", type=int, default=16, help="alignment search radius in pixels (default 16)")
    g.add_argument("--no-align", action="store_true", help="skip frame alignment")
    g.add_argument("--frames-limit", type=int, default=None, help="use only the first N frames")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stemrecon", description="Atom reconstruction from drift-distorted raster scans.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic distorted frame series")
    _add_common(p)
    p.add_argument("--spacing", type=float, default=19.37, help="lattice spacing in pixels (default 19.37)")
    p.add_argument("--height", type=float, default=45.0, help="bump height (default 45)")
    p.add_argument("--sigma", type=float, default=3.0, help="bump width in pixels (default 3)")
    p.add_argument("--offset", type=float, default=40.0, help="constant background (default 40)")
    p.add_argument("--intra", type=float, default=0.05, help="per-pixel step std in pixels (default 0.05)")
    p.add_argument("--inter", type=float, default=1.0, help="per-row step std in pixels (default 1)")
    p.add_argument("--size", type=int, default=256, help="frame width and height (default 256)")
    p.add_argument("--frames", type=int, default=128, help="number of frames (default 128)")
    p.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    p.add_argument("--no-noise", action="store_true", help="store the Poisson mean instead of counts")

    p = sub.add_parser("init-atoms", help="convex atom identification on one frame")
    _add_common(p)
    p.add_argument("input", help="STEMSTK1 file or directory of text frames")
    p.add_argument("--frame", type=int, default=1, help="1-based frame index (default 1)")
    p.add_argument("--png", action="store_true", help="also write h.png and initial_density.png")
    _add_deconv(p)

    p = sub.add_parser("reconstruct", help="joint atom and shift reconstruction")
    _add_common(p)
    p.add_argument("input", help="STEMSTK1 file or directory of text frames")
    p.add_argument("--png", action="store_true", help="also write density and shift images")
    _add_recon(p)
    _add_deconv(p)

    p = sub.add_parser("precision", help="horizontal/vertical precision of an atom table")
    _add_common(p)
    p.add_argument("atoms", help="atom table CSV")
    p.add_argument("--spacing", type=float, default=19.37, help="lattice spacing hint (default 19.37)")
    p.add_argument("--all-atoms", action="store_true", help="include atoms outside the domain")

    p = sub.add_parser("experiment", help="precision against frames per group")
    _add_common(p)
    p.add_argument("input", help="STEMSTK1 file or directory of text frames")
    p.add_argument("--groups", type=_csv_ints, default=(1, 2, 4, 8, 16),
                   help="group sizes (default 1,2,4,8,16)")
    p.add_argument("--spacing", type=float, default=19.37, help="lattice spacing hint (default 19.37)")
    p.add_argument("--jobs", type=int, default=None, help="parallel groups (default: available cores)")
    p.add_argument("--no-svg", action="store_true", help="skip precision.svg")
    _add_recon(p)
    _add_deconv(p)

    p = sub.add_parser("replay", help="rerun the command recorded in a manifest")
    p.add_argument("manifest", help="manifest.json of an earlier run")
    p.add_argument("--out", default=None, help="write outputs here instead of the recorded directory")
    return ap


def parse_args(argv):
    ap = build_parser()
    args = ap.parse_args(argv)
    path = getattr(args, "config", None)
    if path:
        values = read_config_file(path)
        sub = ap._subparsers._group_actions[0].choices[args.command]
        known = {a.dest: a for a in sub._actions}
        defaults = {}
        for key, raw in values.items():
            if key not in known or key in ("help", "config"):
                raise ConfigError(f"unknown config key {key!r} for {args.command}")
            act = known[key]
            if act.nargs == 0:
                defaults[key] = raw.lower() in ("1", "true", "yes", "on")
            else:
                try:
                    defaults[key] = act.type(raw) if act.type else raw
                except (ValueError, argparse.ArgumentTypeError) as exc:
                    raise ConfigError(f"config key {key!r}: {exc}") from None
                if act.choices and defaults[key] not in act.choices:
                    raise ConfigError(f"config key {key!r} must be one of {sorted(act.choices)}")
        sub.set_defaults(**defaults)
        args = ap.parse_args(argv)
    return args


def _options(args) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in sorted(vars(args).items())
            if k not in ("verbose",)}


def deconv_config(args) -> DeconvConfig:
    try:
        return DeconvConfig(
            bump_sigma=args.bump_sigma, dx=args.dx, eta=args.eta, gamma=args.gamma,
            max_newton_iters=args.max_newton_iters, gmres_iters=args.gmres_iters,
            residual_tol=args.residual_tol, height_threshold=args.height_threshold,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def pipeline_config(args) -> PipelineConfig:
    try:
        noise = NoiseParams(args.alpha, args.mu, args.noise_sigma)
        diss = Dissimilarity.parse(args.dissimilarity, noise)
        recon = ReconstructionConfig(
            epsilon=args.epsilon, nu_pen=args.nu_pen, nu_hor=args.nu_hor, nu_vert=args.nu_vert,
            dissimilarity=diss,
        )
        return PipelineConfig(
            recon=recon, deconv=deconv_config(args), align=not args.no_align,
            align_radius=args.align_radius, budgets=tuple(args.budgets), stages=args.stages,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# -- commands ---------------------------------------------------------------------------


def cmd_simulate(args):
    try:
        cfg = SynthConfig(
            n1=args.size, n2=args.size, spacing=args.spacing, height=args.height, sigma=args.sigma,
            offset=args.offset, intra=args.intra, inter=args.inter, frames=args.frames, seed=args.seed,
            noise=not args.no_noise,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stack, p, shifts = generate(cfg)
    paths = [out / "frames.stk", out / "truth_atoms.csv"]
    write_stack(paths[0], stack)
    write_atoms_csv(paths[1], p)
    for k, w in enumerate(shifts, start=1):
        paths.append(out / f"truth_shifts_{k}.bin")
        write_shifts(paths[-1], w)
    return [], paths


def cmd_init_atoms(args):
    stack = load_stack(args.input)
    if not 1 <= args.frame <= stack.K:
        raise ConfigError(f"frame {args.frame} outside 1..{stack.K}")
    frame = stack.frames[args.frame - 1]
    p, h = identify_atoms(frame, deconv_config(args))
    if not h.converged:
        log.warning("initializer stopped with residual %.3g", h.residual)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "atoms.csv"]
    write_atoms_csv(paths[0], p)
    if args.png:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        paths.append(out / "h.png")
        plt.imsave(paths[-1], h.coeffs, cmap="gray")
        paths.append(out / "initial_density.png")
        render_density(paths[-1], p, stack.geometry)
    print(f"{p.n_atoms} atoms")
    return [args.input], paths


def cmd_reconstruct(args):
    stack = load_stack(args.input)
    if args.frames_limit is not None:
        if args.frames_limit < 1:
            raise ConfigError("--frames-limit must be at least 1")
        stack = stack.subset(np.arange(min(args.frames_limit, stack.K)))
    cfg = pipeline_config(args)
    state, report = reconstruct(stack, cfg)
    paths = write_outputs(args.out, state, report, _geometry_of(state), images=args.png)
    for s in report.stages:
        print(f"stage {s.stage} {s.name}: {s.iterations} iterations, energy {s.full_energy:.10g}")
    if not report.ok:
        raise NumericalFailure(f"stage {report.failed_stage} failed: {report.failure}")
    return [args.input], paths


def _geometry_of(state):
    from .scan import ScanGeometry

    n2, n1 = state.shifts.shape[1:3]
    return ScanGeometry(n1, n2)


def cmd_precision(args):
    p = read_atoms_csv(args.atoms)
    rep = precision(p, args.spacing, only_in_domain=not args.all_atoms)
    fmt = lambda v: "nan" if v is None else repr(float(v))
    print(f"horizontal {fmt(rep.horizontal)} ({rep.n_horizontal} pairs)")
    print(f"vertical {fmt(rep.vertical)} ({rep.n_vertical} pairs)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "precision.csv"
    with open(path, "w") as fh:
        fh.write("direction,precision,pairs\n")
        fh.write(f"horizontal,{fmt(rep.horizontal)},{rep.n_horizontal}\n")
        fh.write(f"vertical,{fmt(rep.vertical)},{rep.n_vertical}\n")
    return [args.atoms], [path]


def cmd_experiment(args):
    stack = load_stack(args.input)
    if args.frames_limit is not None:
        stack = stack.subset(np.arange(min(args.frames_limit, stack.K)))
    cfg = pipeline_config(args)
    jobs = args.jobs or available_cores()
    try:
        rows = precision_experiment(stack, args.groups, cfg, args.spacing, jobs=max(1, jobs))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = [out / "precision.csv"]
    write_precision_csv(paths[0], rows)
    if not args.no_svg:
        paths.append(out / "precision.svg")
        plot_precision(paths[-1], rows)
    for r in rows:
        print(f"K={r['K']}: horizontal {r['horizontal']:.4g} vertical {r['vertical']:.4g} "
              f"({r['groups']} groups, {r['failed']} failed)")
    if all(r["groups"] == 0 for r in rows):
        raise NumericalFailure("every group failed")
    return [args.input], paths


def cmd_replay(args):
    try:
        doc = json.loads(Path(args.manifest).read_text())
        argv = list(doc["argv"])
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError(f"cannot use manifest {args.manifest}: {exc}") from None
    if args.out is not None:
        argv = _replace_out(argv, args.out)
    return main(argv)


def _replace_out(argv, out):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            argv[i + 1] = out
            return argv
        if a.startswith("--out="):
            argv[i] = f"--out={out}"
            return argv
    return argv[:1] + ["--out", out] + argv[1:]


COMMANDS = {
    "simulate": cmd_simulate,
    "init-atoms": cmd_init_atoms,
    "reconstruct": cmd_reconstruct,
    "precision": cmd_precision,
    "experiment": cmd_experiment,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except ConfigError as exc:
        print(f"stemrecon: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    if args.command == "replay":
        return cmd_replay(args)
    logging.basicConfig(level=logging.WARNING - 10 * min(getattr(args, "verbose", 0), 2),
                        format="%(levelname)s %(name)s: %(message)s")
    t0 = time.perf_counter()
    try:
        inputs, outputs = COMMANDS[args.command](args)
        write_manifest(Path(args.out), args.command, argv, _options(args), inputs, outputs,
                       time.perf_counter() - t0)
    except ConfigError as exc:
        print(f"stemrecon: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NumericalFailure, DomainError, NotPositiveDefinite, FloatingPointError) as exc:
        print(f"stemrecon: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        if isinstance(exc, OSError) or "STEMSTK1" in str(exc) or "bytes" in str(exc):
            print(f"stemrecon: I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"stemrecon: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
