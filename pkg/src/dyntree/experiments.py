"""Experiment protocols: configuration, seeding, repeats and aggregation.

Three protocols are supported:

``prequential``
    test-then-train over one stream (optionally with fresh test batches
    drawn from a drifting generator);
``holdout``
    train the budgeted estimators on a stream of length ``stream.n`` and
    score them on a fresh test set;
``cv``
    k-fold cross-validation of the budgeted estimators on a data set.

Budgeted estimators are ``ORIG`` (only the first ``w`` rows), ``ORAND``
(random retirement to keep ``w`` active points), ``OALC``/``OENT`` (active
retirement by integrated variance reduction or predictive entropy) and
``FULL`` (no retirement).
"""

from __future__ import annotations

import math
import os
import platform
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable

import numpy as np

from . import streams as st
from .smc import CloudConfig, ParticleCloud

PROTOCOLS = ("prequential", "holdout", "cv")
ESTIMATORS = ("ORIG", "ORAND", "OALC", "OENT", "FULL")
STREAM_KINDS = ("friedman", "parabola", "moving_xor", "csv")
SWEEP_PARAMS = {"lambda": ("engine", "lam"), "k": ("stream", "k"), "w": ("engine", "w")}
HEIGHT_CONVENTION = "root-only tree has height 1"


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    """Everything needed to reproduce a batch of runs.

    ``engine`` holds :class:`CloudConfig` fields, ``stream`` the generator
    or CSV description (``kind`` plus its parameters). ``batch`` is the
    number of fresh test points per prequential step, ``n_test`` the holdout
    size, ``folds``/``budget`` the CV layout and active-pool fraction.
    """

    engine: CloudConfig = field(default_factory=CloudConfig)
    stream: dict = field(default_factory=lambda: {"kind": "friedman", "n": 2000})
    protocol: str = "prequential"
    batch: int = 1
    repeats: int = 1
    seed: int = 0
    n_test: int = 1000
    folds: int = 5
    budget: float = 0.1
    estimators: tuple | None = None
    record_heights: bool = False

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        eng = dict(d.pop("engine", {}) or {})
        if "w" in eng and (eng["w"] is None or eng["w"] in ("inf", "Infinity")):
            eng["w"] = math.inf
        ekeys = {f.name for f in fields(CloudConfig)}
        bad = set(eng) - ekeys
        if bad:
            raise ConfigError(f"unknown engine keys: {sorted(bad)}")
        try:
            engine = CloudConfig(**eng)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        stream = dict(d.get("stream") or {})
        stream.setdefault("kind", "friedman")
        if stream["kind"] != "csv":
            stream.setdefault("n", 2000)
        d["stream"] = stream
        cfg = cls(engine=engine, **d)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        d = asdict(self)
        d["engine"]["w"] = None if math.isinf(self.engine.w) else self.engine.w
        d["estimators"] = list(self.estimators)
        return d

    def __post_init__(self):
        if self.estimators is None:
            active = "OALC" if self.engine.task == "regression" else "OENT"
            self.estimators = ("ORIG", "ORAND", active, "FULL")
        self.estimators = tuple(self.estimators)

    def validate(self) -> None:
        if self.protocol not in PROTOCOLS:
            raise ConfigError(f"protocol must be one of {PROTOCOLS}, got {self.protocol!r}")
        kind = self.stream.get("kind")
        if kind not in STREAM_KINDS:
            raise ConfigError(f"stream.kind must be one of {STREAM_KINDS}, got {kind!r}")
        if kind == "csv" and "path" not in self.stream:
            raise ConfigError("csv streams need stream.path")
        if kind != "csv" and int(self.stream.get("n", 0)) < 1:
            raise ConfigError("stream.n must be >= 1")
        task = "classification" if kind == "moving_xor" else self.stream.get("task", "regression")
        if kind != "csv" and task != self.engine.task:
            raise ConfigError(f"{self.engine.model} leaves do not fit a {task} stream")
        if kind == "csv" and self.stream.get("task", "classification") != self.engine.task:
            raise ConfigError(f"{self.engine.model} leaves do not fit a "
                              f"{self.stream.get('task', 'classification')} stream")
        if self.repeats < 1 or self.batch < 1 or self.n_test < 1:
            raise ConfigError("repeats, batch and n_test must be >= 1")
        if self.protocol == "cv" and self.folds < 2:
            raise ConfigError("cv needs folds >= 2")
        if not 0 < self.budget <= 1:
            raise ConfigError("budget must be in (0, 1]")
        for e in self.estimators:
            if e not in ESTIMATORS:
                raise ConfigError(f"unknown estimator {e!r}")
            if e == "OALC" and self.engine.task != "regression":
                raise ConfigError("OALC needs regression leaves (use OENT)")
            if e == "OENT" and self.engine.task != "classification":
                raise ConfigError("OENT needs multinomial leaves (use OALC)")
        if self.protocol == "prequential" and self.batch > 1 and kind == "csv":
            raise ConfigError("test batches need a synthetic stream")

    def with_value(self, section: str, key: str, value: Any) -> ExperimentConfig:
        d = self.to_dict()
        d[section][key] = value
        return ExperimentConfig.from_dict(d)


def set_override(d: dict, assignment: str) -> None:
    """Apply a ``dotted.key=value`` override in place; values parse as JSON
    when possible, otherwise stay strings."""
    import json

    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not key=value")
    key, raw = assignment.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    parts = key.strip().split(".")
    node = d
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a non-table")
    node[parts[-1]] = value


# ---------------------------------------------------------------------------
# streams and seeds

def make_stream(spec: dict, seed: int | None) -> st.Stream:
    spec = dict(spec)
    kind = spec.pop("kind")
    gens = {"friedman": st.gen_friedman, "parabola": st.gen_parabola,
            "moving_xor": st.gen_moving_xor}
    if kind in gens:
        try:
            return gens[kind](seed=seed, **spec)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"stream {kind}: {exc}") from exc
    path = spec.pop("path")
    if "features" in spec and spec["features"] is not None:
        spec["features"] = tuple(spec["features"])
    return st.load_csv(path, st.CsvSchema(**spec))


def repeat_seeds(seed: int, repeats: int) -> list[tuple[int, int, int]]:
    """Independent (stream, engine, test) seeds for each repeat."""
    kids = np.random.SeedSequence(seed).spawn(repeats)
    return [tuple(int(v) for v in k.generate_state(3, dtype=np.uint32)) for k in kids]


# ---------------------------------------------------------------------------
# estimators

def estimator_config(name: str, engine: CloudConfig, w: float) -> tuple[CloudConfig, bool]:
    """Engine settings for a budgeted estimator; the flag says whether the
    training stream is truncated to its first ``w`` rows."""
    if name == "ORIG":
        return replace(engine, w=math.inf, policy="historical"), True
    if name == "FULL":
        return replace(engine, w=math.inf, policy="historical"), False
    pol = {"ORAND": "random", "OALC": "alc", "OENT": "entropy"}[name]
    return replace(engine, w=w, policy=pol), False


def train(stream: st.Stream, config: CloudConfig) -> ParticleCloud:
    n0 = config.n_init
    if len(stream) < n0:
        raise st.DataError(f"need at least n_init={n0} rows, got {len(stream)}")
    cloud = ParticleCloud.init((stream.X[:n0], stream.y[:n0]), config)
    for k in range(n0, len(stream)):
        cloud.update((stream.X[k], stream.y[k]))
    return cloud


def _budget_w(cfg: ExperimentConfig, n_train: int) -> float:
    if cfg.protocol == "cv":
        return max(float(round(cfg.budget * n_train)), cfg.engine.min_leaf)
    return cfg.engine.w


def compare_estimators(cfg: ExperimentConfig, train_stream: st.Stream, Xt: np.ndarray,
                       yt: np.ndarray, ft: np.ndarray | None, engine_seed: int) -> dict:
    w = _budget_w(cfg, len(train_stream))
    if math.isinf(w):
        raise ConfigError("budgeted estimators need a finite engine.w")
    out = {}
    for name in cfg.estimators:
        conf, truncate = estimator_config(name, replace(cfg.engine, seed=engine_seed), w)
        s = train_stream.subset(slice(0, int(w))) if truncate else train_stream
        t0 = time.perf_counter()
        cloud = train(s, conf)
        res = st.holdout_eval(cloud, Xt, yt, ft)
        res["seconds"] = time.perf_counter() - t0
        for k, v in res.items():
            out[f"{name}.{k}"] = v
    return out


# ---------------------------------------------------------------------------
# single repeat

@dataclass
class RunResult:
    index: int
    seeds: tuple
    rows: list[dict]
    trace: st.MetricTrace | None = None
    heights: np.ndarray | None = None
    seconds: float = 0.0
    degenerate_steps: int = 0


def run_repeat(cfg: ExperimentConfig, index: int) -> RunResult:
    s_seed, e_seed, t_seed = repeat_seeds(cfg.seed, cfg.repeats)[index]
    t0 = time.perf_counter()
    stream = make_stream(cfg.stream, s_seed)
    if cfg.protocol == "prequential":
        heights: list[float] = []
        hook = (lambda c, t: heights.append(c.mean_height())) if cfg.record_heights else None
        cloud, trace = st.run_stream(stream, replace(cfg.engine, seed=e_seed), batch=cfg.batch,
                                     test_seed=t_seed, on_step=hook)
        row = trace.summary()
        row["final_mean_height"] = cloud.mean_height()
        return RunResult(index, (s_seed, e_seed, t_seed), [row], trace,
                         np.asarray(heights) if cfg.record_heights else None,
                         time.perf_counter() - t0, cloud.degenerate_steps)
    if cfg.protocol == "holdout":
        if stream.sampler is None:
            raise ConfigError("holdout needs a synthetic stream to draw test points from")
        Xt, yt, ft = stream.sampler(len(stream), cfg.n_test, np.random.default_rng(t_seed))
        row = compare_estimators(cfg, stream, Xt, yt, ft, e_seed)
        return RunResult(index, (s_seed, e_seed, t_seed), [row], seconds=time.perf_counter() - t0)
    # cv
    rng = np.random.default_rng(t_seed)
    perm = rng.permutation(len(stream))
    folds = np.array_split(perm, cfg.folds)
    rows = []
    for j, test_idx in enumerate(folds):
        train_idx = np.concatenate([f for i, f in enumerate(folds) if i != j])
        row = compare_estimators(cfg, stream.subset(train_idx), stream.X[test_idx],
                                 stream.y[test_idx], None, e_seed + j)
        row["fold"] = j
        rows.append(row)
    return RunResult(index, (s_seed, e_seed, t_seed), rows, seconds=time.perf_counter() - t0)


def run_repeats(cfg: ExperimentConfig, threads: int = 1,
                progress: Callable[[RunResult], None] | None = None) -> list[RunResult]:
    """All repeats, in index order regardless of completion order."""
    idx = range(cfg.repeats)
    if threads <= 1 or cfg.repeats == 1:
        out = []
        for i in idx:
            out.append(run_repeat(cfg, i))
            if progress:
                progress(out[-1])
        return out
    with ProcessPoolExecutor(max_workers=threads) as ex:
        out = list(ex.map(run_repeat, [cfg] * cfg.repeats, idx))
    if progress:
        for r in out:
            progress(r)
    return sorted(out, key=lambda r: r.index)


# ---------------------------------------------------------------------------
# aggregation

SUMMARY_FIELDS = ("metric", "mean", "q05", "q95", "n")


def summarize(results: list[RunResult]) -> list[dict]:
    """Mean and 5%/95% quantiles of every numeric metric across rows."""
    rows = [r for res in results for r in res.rows]
    keys = []
    for r in rows:
        keys += [k for k in r if k not in keys and k != "fold"]
    out = []
    for k in keys:
        v = np.array([r[k] for r in rows if k in r], dtype=float)
        v = v[np.isfinite(v)]
        if not len(v):
            out.append(dict(metric=k, mean=math.nan, q05=math.nan, q95=math.nan, n=0))
            continue
        out.append(dict(metric=k, mean=float(v.mean()), q05=float(np.quantile(v, 0.05)),
                        q95=float(np.quantile(v, 0.95)), n=int(len(v))))
    return out


def sweep(cfg: ExperimentConfig, parameter: str, values: list, threads: int = 1,
          progress: Callable[[RunResult], None] | None = None) -> tuple[list[dict], dict]:
    """Run every repeat at each value of ``parameter``; long-format rows."""
    if parameter not in SWEEP_PARAMS:
        raise ConfigError(f"sweep parameter must be one of {sorted(SWEEP_PARAMS)}")
    section, key = SWEEP_PARAMS[parameter]
    long, per_value = [], {}
    for v in values:
        c = cfg.with_value(section, key, v)
        res = run_repeats(c, threads, progress)
        per_value[v] = res
        for row in summarize(res):
            long.append(dict(value=v, **row))
    return long, per_value


HEIGHT_VARIANTS = (("full", math.inf, 1.0), ("lam1", None, 1.0), ("lam0.9", None, 0.9))


def height_study(cfg: ExperimentConfig, threads: int = 1) -> tuple[np.ndarray, dict]:
    """Per-step particle-mean tree height for a no-retirement cloud and
    budgeted clouds with and without forgetting, averaged over repeats.

    Returns ``(t, {variant: heights})``. The budgeted variants use the
    configured ``engine.w`` with historical retirement.
    """
    if cfg.engine.task != "regression":
        raise ConfigError("height study needs a regression config")
    if math.isinf(cfg.engine.w):
        raise ConfigError("height study needs a finite engine.w for the budgeted variants")
    out = {}
    t = None
    base = replace(cfg, protocol="prequential", record_heights=True)
    for name, w, lam in HEIGHT_VARIANTS:
        c = replace(base, engine=replace(cfg.engine, w=cfg.engine.w if w is None else w,
                                         lam=lam, policy="historical"))
        res = run_repeats(c, threads)
        H = np.mean([r.heights for r in res], axis=0)
        out[name] = H
        t = res[0].trace.t
    return t, out


def versions() -> dict:
    import numba
    import scipy

    from . import __version__

    return {"python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "numba": numba.__version__, "dyntree": __version__,
            "cpus": os.cpu_count()}
