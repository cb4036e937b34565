"""Command-line front end: ``rasterfix synth|reconstruct|eval|study|gradcheck``.

Exit codes: 0 success, 1 check failure, 2 usage or precondition error,
3 I/O failure, 4 non-convergence (partial results are still written).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_IO, EXIT_NOCONV = 0, 1, 2, 3, 4

log = logging.getLogger("rasterfix")


class UsageError(Exception):
    pass


# --- parsing helpers --------------------------------------------------------

def _floats(text: str, count=None) -> list:
    try:
        vals = [float(t) for t in text.replace(";", ",").split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of numbers: {text!r}")
    if count is not None and len(vals) != count:
        raise argparse.ArgumentTypeError(f"expected {count} numbers, got {text!r}")
    return vals


def _lattice(text: str) -> np.ndarray:
    vecs = [_floats(part, 2) for part in text.split(";")]
    if len(vecs) != 2:
        raise argparse.ArgumentTypeError("lattice must be 'ax,ay;bx,by'")
    return np.array(vecs)


def _size(text: str) -> tuple:
    vals = [int(v) for v in _floats(text)]
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2:
        raise argparse.ArgumentTypeError("size must be 'M' or 'M,N'")
    return tuple(vals)


def _int_list(text: str) -> list:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a list of integers: {text!r}")
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


def _methods(text: str) -> list:
    from .pipeline import METHODS

    vals = [t.strip() for t in text.split(",") if t.strip()]
    bad = [v for v in vals if v not in METHODS]
    if bad or not vals:
        raise argparse.ArgumentTypeError(f"unknown method(s) {bad}; choose from {sorted(METHODS)}")
    return vals


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except OSError:
        raise
    except ValueError as exc:
        raise UsageError(f"config file {path} is not valid JSON: {exc}")
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


def _loss_config(args):
    """Flags over config file over built-in defaults."""
    from .pipeline import LossConfig

    data = _read_config(getattr(args, "config", None))
    data = data.get("reconstruct", data)
    names = {f.name for f in fields(LossConfig)}
    unknown = set(data) - names
    if unknown:
        raise UsageError(f"unknown reconstruction settings {sorted(unknown)}")
    flag_map = {"lam": "lam", "nu_hor": "nu_hor", "nu_vert": "nu_vert",
                "lambda_brownian": "brownian_weight", "n_spline": "n_spline", "max_outer": "max_outer"}
    for flag, key in flag_map.items():
        val = getattr(args, flag, None)
        if val is not None:
            data[key] = val
    if "stage_iter" in data:
        data["stage_iter"] = tuple(data["stage_iter"])
    try:
        return LossConfig(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _threads(args) -> int:
    t = args.threads
    if t is None:
        env = os.environ.get("RASTERFIX_THREADS")
        if env:
            try:
                t = int(env)
            except ValueError:
                raise UsageError(f"RASTERFIX_THREADS={env!r} is not an integer")
        else:
            t = os.cpu_count() or 1
    if t < 1:
        raise UsageError("--threads must be positive")
    return t


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_series, write_synth

    data = _read_config(args.config)
    data = data.get("synth", data)
    names = {f.name for f in fields(SynthConfig)}
    if set(data) - names:
        raise UsageError(f"unknown synth settings {sorted(set(data) - names)}")
    for key in ("size", "cell", "basis", "origin"):
        if key in data:
            data[key] = _tuplify(data[key])
    for key in ("size", "frames", "sigma", "dose", "seed"):
        val = getattr(args, key)
        if val is not None:
            data[key] = val
    if args.no_noise:
        data["noise"] = False
    try:
        cfg = SynthConfig(**data)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc))
    result = generate_series(cfg)
    write_synth(result, args.out)
    M, N = cfg.size
    print(f"synth: {cfg.frames} frames of {M}x{N}, sigma {cfg.sigma:g} px, dose {cfg.dose:g}, "
          f"seed {cfg.seed} -> {args.out}")
    return EXIT_OK


def _tuplify(x):
    return tuple(_tuplify(v) for v in x) if isinstance(x, (list, tuple)) else x


def cmd_reconstruct(args) -> int:
    from .core import load_series
    from .pipeline import ReconstructionError, reconstruct

    config = _loss_config(args)
    series = _load(load_series, args.input)
    out = Path(args.out)
    _write_json(out / "effective_config.json",
                {"method": args.method, "input": str(args.input), "reconstruct": _jsonable(asdict(config))})
    try:
        result = reconstruct(series, args.method, config)
    except ReconstructionError as exc:
        log.error("%s", exc)
        if exc.partial is not None:
            exc.partial.save(out)
        return EXIT_NOCONV
    except ValueError as exc:
        raise UsageError(str(exc))
    result.save(out)
    status = "converged" if result.converged else "not converged"
    print(f"reconstruct: {args.method} on {len(series)} frames, {status} -> {out}")
    return EXIT_OK if result.converged else EXIT_NOCONV


def _jsonable(d):
    return json.loads(json.dumps(d, default=lambda o: list(o) if isinstance(o, tuple) else str(o)))


def _load(fn, path):
    """Read an input file; unreadable or malformed files are I/O failures."""
    try:
        return fn(path)
    except ValueError as exc:
        raise OSError(f"{path}: {exc}")


def _load_recon_image(path: Path):
    from .core import load_image, load_pgm

    if path.is_dir():
        path = path / "image.rsim"
    if path.suffix.lower() == ".pgm":
        return _load(load_pgm, path)
    return _load(load_image, path)


def cmd_eval(args) -> int:
    from .evaluate import PrecisionError, precision

    img = _load_recon_image(Path(args.recon))
    try:
        rep = precision(img, args.lattice, tuple(args.ref_pm), sigma_px=args.sigma)
    except (PrecisionError, ValueError) as exc:
        raise UsageError(str(exc))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    rep.to_csv(out)
    print(f"eval: {rep.atom_count} atoms, precision x {rep.precision_x_pm:.4g} pm, "
          f"y {rep.precision_y_pm:.4g} pm, overall {rep.overall_pm:.4g} pm -> {out}")
    return EXIT_OK


def cmd_study(args) -> int:
    from .core import load_series
    from .evaluate import emit_precision_plot, emit_size_plot, split_protocol_eval, write_table

    config = _loss_config(args)
    series = _load(load_series, args.series)
    threads = _threads(args)
    out = Path(args.out)
    _write_json(out / "effective_config.json", {
        "series": str(args.series), "methods": args.methods, "k_values": args.k_values,
        "lattice": np.asarray(args.lattice).tolist(), "ref_pm": list(args.ref_pm),
        "reconstruct": _jsonable(asdict(config))})
    rows = []
    for method in args.methods:
        try:
            rows += split_protocol_eval(series, method, args.k_values, args.lattice,
                                        reference_pm=tuple(args.ref_pm), config=config,
                                        threads=threads, fit_kw={"sigma_px": args.sigma})
        except ValueError as exc:
            raise UsageError(str(exc))
    write_table(rows, out / "study.csv")
    emit_precision_plot(rows, out / "precision")
    emit_size_plot(rows, out / "size", args.sigma_gen)
    failed = sum(r.n_failed for r in rows)
    print(f"study: {len(rows)} rows for {','.join(args.methods)}, {failed} failed sub-series -> {out}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import TOLERANCE, run_checks

    results = run_checks(args.target, instances=args.instances, seed=args.seed)
    ok = True
    for target, name, err in results:
        passed = err <= TOLERANCE
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {target}.{name} max relative error {err:.3e}")
    return EXIT_OK if ok else EXIT_CHECK


# --- parser -----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rasterfix", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: RASTERFIX_THREADS or all cores)")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic series")
    s.add_argument("--config", type=Path)
    s.add_argument("--size", type=_size)
    s.add_argument("--frames", type=int)
    s.add_argument("--sigma", type=float)
    s.add_argument("--dose", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--no-noise", action="store_true", help="no Poisson noise, scan jitter or drift")
    s.add_argument("--out", type=Path, required=True)
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("reconstruct", help="reconstruct one image from a series")
    r.add_argument("--method", choices=("nrr", "nrrplus", "jud"), required=True)
    r.add_argument("--in", dest="input", type=Path, required=True)
    r.add_argument("--out", type=Path, required=True)
    _loss_flags(r)
    r.set_defaults(func=cmd_reconstruct)

    e = sub.add_parser("eval", help="precision of a reconstruction")
    e.add_argument("--recon", type=Path, required=True)
    e.add_argument("--lattice", type=_lattice, required=True)
    e.add_argument("--ref-pm", type=lambda t: _floats(t, 2), default=[276.174, 518.5])
    e.add_argument("--sigma", type=float, default=None, help="expected atom width in pixels")
    e.add_argument("--out", type=Path, required=True)
    e.set_defaults(func=cmd_eval)

    t = sub.add_parser("study", help="precision against the number of frames")
    t.add_argument("--series", type=Path, required=True)
    t.add_argument("--methods", type=_methods, default=["nrr", "nrrplus", "jud"])
    t.add_argument("--k-values", type=_int_list, default=[1, 2, 4, 8, 16, 32])
    t.add_argument("--lattice", type=_lattice, default=np.array([[13.0, 0.0], [0.0, 24.0]]))
    t.add_argument("--ref-pm", type=lambda t_: _floats(t_, 2), default=[276.174, 518.5])
    t.add_argument("--sigma", type=float, default=None, help="expected atom width in pixels")
    t.add_argument("--sigma-gen", type=float, default=None, help="reference line in the size plot")
    t.add_argument("--out", type=Path, required=True)
    _loss_flags(t)
    t.set_defaults(func=cmd_study)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--target", choices=("all", "fidelity", "deform", "imagemodel", "jud"), default="all")
    g.add_argument("--instances", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gradcheck)
    return p


def _loss_flags(p):
    p.add_argument("--config", type=Path)
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--nu-hor", type=float)
    p.add_argument("--nu-vert", type=float)
    p.add_argument("--lambda-brownian", type=float, help="Lambda / (2 dwell time)")
    p.add_argument("--n-spline", type=int)
    p.add_argument("--max-outer", type=int)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits

        # single-threaded BLAS keeps floating-point reductions identical for every --threads
        with threadpool_limits(limits=1):
            return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"rasterfix: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"rasterfix: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
