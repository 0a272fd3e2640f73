"""Command-line harness.

Subcommands
-----------
run           repeated runs of one configuration; writes ``trace_<run>.csv``
              (and ``.jsonl``), ``summary.csv`` and ``meta.json``
sweep         repeat ``run`` over values of ``lambda``, ``k`` or ``w``;
              writes a long-format ``sweep.csv``
height-study  per-step mean tree height for full, ``lam=1`` and ``lam=0.9``
              clouds; writes ``heights.csv``
check         run the built-in oracle checks (and the test suite with
              ``--pytest``)

Configuration is a TOML or JSON file (see :class:`ExperimentConfig`) with
``--set key.sub=value`` overrides. Exit status is 2 for configuration
errors and 3 for data errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import experiments as ex
from .streams import DataError

log = logging.getLogger("dyntree")

EXIT_CONFIG = 2
EXIT_DATA = 3

HEIGHT_DEFAULTS = {
    "engine": {"model": "constant", "n_particles": 100, "w": 100},
    "stream": {"kind": "friedman", "n": 30000, "drift": "step"},
}


def load_config(path: str | Path | None) -> dict:
    if path is None:
        return {}
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ex.ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        if path.suffix == ".json":
            return json.loads(text)
        return tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ex.ConfigError(f"{path}: {exc}") from exc


def build_config(args: argparse.Namespace, defaults: dict | None = None) -> ex.ExperimentConfig:
    d = _merge(defaults or {}, load_config(args.config))
    for s in args.set or []:
        ex.set_override(d, s)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.repeats is not None:
        d["repeats"] = args.repeats
    return ex.ExperimentConfig.from_dict(d)


def _merge(a: dict, b: dict) -> dict:
    out = {k: (dict(v) if isinstance(v, dict) else v) for k, v in a.items()}
    for k, v in b.items():
        out[k] = _merge(out[k], v) if isinstance(v, dict) and isinstance(out.get(k), dict) else v
    return out


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if not math.isfinite(v) else repr(v)
    return str(v)


def write_rows(path: Path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    if fieldnames is None:
        fieldnames = []
        for r in rows:
            fieldnames += [k for k in r if k not in fieldnames]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fieldnames)
        for r in rows:
            w.writerow([_fmt(r.get(k, "")) for k in fieldnames])


def write_meta(out: Path, cfg: ex.ExperimentConfig, command: str, seconds: float,
               results: list | None = None, **extra) -> None:
    meta = {
        "command": command,
        "config": cfg.to_dict(),
        "versions": ex.versions(),
        "wall_seconds": round(seconds, 3),
        "height_convention": ex.HEIGHT_CONVENTION,
        "preprocessing": "none",
    }
    if results:
        meta["runs"] = [{"index": r.index, "seeds": list(r.seeds),
                         "seconds": round(r.seconds, 3),
                         "degenerate_steps": r.degenerate_steps} for r in results]
    meta.update(extra)
    (out / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _progress(r: ex.RunResult) -> None:
    log.info("run %d finished in %.1fs", r.index, r.seconds)
    if r.degenerate_steps:
        log.warning("run %d: %d steps with vanishing particle weights", r.index, r.degenerate_steps)


def cmd_run(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    results = ex.run_repeats(cfg, args.threads, _progress)
    for r in results:
        if r.trace is not None:
            r.trace.to_csv(out / f"trace_{r.index}.csv")
            r.trace.to_jsonl(out / f"trace_{r.index}.jsonl")
        else:
            write_rows(out / f"trace_{r.index}.csv", r.rows)
    write_rows(out / "summary.csv", ex.summarize(results), list(ex.SUMMARY_FIELDS))
    write_meta(out, cfg, "run", time.perf_counter() - t0, results)
    for row in ex.summarize(results):
        print(f"{row['metric']:>28s}  mean {row['mean']:.5g}  q05 {row['q05']:.5g}  "
              f"q95 {row['q95']:.5g}")
    return 0


def _parse_values(text: str) -> list:
    vals = []
    for v in text.split(","):
        v = v.strip()
        try:
            vals.append(json.loads(v))
        except json.JSONDecodeError:
            raise ex.ConfigError(f"bad sweep value {v!r}") from None
    if not vals:
        raise ex.ConfigError("no sweep values given")
    return vals


def cmd_sweep(args: argparse.Namespace) -> int:
    cfg = build_config(args)
    values = _parse_values(args.values)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    long, _ = ex.sweep(cfg, args.param, values, args.threads, _progress)
    write_rows(out / "sweep.csv", long, ["value"] + list(ex.SUMMARY_FIELDS))
    write_meta(out, cfg, "sweep", time.perf_counter() - t0, parameter=args.param, values=values)
    for row in long:
        print(f"{args.param}={row['value']!s:>8s} {row['metric']:>16s}  mean {row['mean']:.5g}")
    return 0


def cmd_height(args: argparse.Namespace) -> int:
    cfg = build_config(args, HEIGHT_DEFAULTS)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    t, H = ex.height_study(cfg, args.threads)
    names = list(H)
    with open(out / "heights.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t"] + names)
        for k in range(len(t)):
            w.writerow([int(t[k])] + [repr(float(H[n][k])) for n in names])
    write_meta(out, cfg, "height-study", time.perf_counter() - t0, variants=names)
    return 0


def cmd_check(args: argparse.Namespace) -> int:
    from . import checks

    ok = True
    for r in checks.run_all():
        print(r.line())
        ok &= r.passed
    if args.pytest:
        import subprocess

        tests = Path(args.pytest)
        rc = subprocess.call([sys.executable, "-m", "pytest", "-q", str(tests)])
        ok &= rc == 0
    return 0 if ok else 1


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dyntree", description="Dynamic trees on data streams.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp: argparse.ArgumentParser) -> None:
        sp.add_argument("--config", help="TOML or JSON experiment file")
        sp.add_argument("--seed", type=int, help="master seed (overrides the config)")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--repeats", type=int, help="independent repeats")
        sp.add_argument("--threads", type=int, default=1, help="worker processes for repeats")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. engine.lam=0.8")

    sp = sub.add_parser("run", help="run repeats of one configuration")
    common(sp)
    sp.set_defaults(func=cmd_run)
    sp = sub.add_parser("sweep", help="run over values of one parameter")
    common(sp)
    sp.add_argument("--param", required=True, choices=sorted(ex.SWEEP_PARAMS))
    sp.add_argument("--values", required=True, help="comma-separated values")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("height-study", help="tree height over time under step drift")
    common(sp)
    sp.set_defaults(func=cmd_height)
    sp = sub.add_parser("check", help="run the oracle checks")
    sp.add_argument("--pytest", metavar="DIR", help="also run the test suite in DIR")
    sp.set_defaults(func=cmd_check)
    return p


def main(argv: list[str] | None = None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ex.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
