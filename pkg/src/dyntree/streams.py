"""Synthetic streams, CSV ingestion and prequential (test-then-train) scoring.

A :class:`Stream` is an ordered, fully materialised sequence of labelled
pairs. Synthetic streams also carry the noise-free regression mean and a
``sampler`` that draws fresh pairs from the generator as it stood at a given
time step, which is how drifting benchmarks produce their test points.

Time indices are 1-based: the ``t``-th observation is generated under the
concept in force at step ``t``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterator, Sequence

import numpy as np
from scipy.stats import rankdata


class DataError(ValueError):
    """Malformed or inconsistent input data."""


@dataclass(frozen=True)
class Observation:
    x: np.ndarray
    y: float
    t: int = 0

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        if not (np.all(np.isfinite(x)) and math.isfinite(self.y)):
            raise DataError(f"non-finite observation at t={self.t}")
        object.__setattr__(self, "x", x)


Sampler = Callable[[int, int, np.random.Generator], tuple]


@dataclass
class Stream:
    """Materialised labelled stream.

    Attributes
    ----------
    X, y : arrays of shape ``(n, d)`` and ``(n,)``.
    task : ``"regression"`` or ``"classification"``.
    n_classes : number of labels for classification, else 0.
    f : noise-free regression mean per row, when known.
    sampler : ``sampler(t, n, rng) -> (X, y, f)`` draws ``n`` fresh pairs
        from the concept at step ``t``; ``f`` is None for classification.
    """

    X: np.ndarray
    y: np.ndarray
    task: str = "regression"
    n_classes: int = 0
    f: np.ndarray | None = None
    sampler: Sampler | None = None
    name: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=np.float64))
        self.y = np.asarray(self.y, dtype=np.float64).ravel()
        if self.X.shape[0] != self.y.shape[0]:
            raise DataError(f"{self.X.shape[0]} input rows but {self.y.shape[0]} responses")
        if self.task not in ("regression", "classification"):
            raise DataError(f"unknown task {self.task!r}")
        if self.task == "classification":
            if self.n_classes < 2:
                self.n_classes = int(self.y.max()) + 1 if len(self.y) else 2
                self.n_classes = max(self.n_classes, 2)
            bad = (self.y < 0) | (self.y >= self.n_classes) | (self.y != np.round(self.y))
            if np.any(bad):
                raise DataError(f"label outside [0, {self.n_classes}) at row {int(np.argmax(bad))}")

    def __len__(self) -> int:
        return len(self.y)

    def __iter__(self) -> Iterator[Observation]:
        for k in range(len(self.y)):
            yield Observation(self.X[k], float(self.y[k]), k + 1)

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, rows: Sequence[int] | slice) -> Stream:
        """Stream restricted to ``rows`` (order kept); the sampler is dropped
        unless ``rows`` is a slice starting at 0."""
        keep = isinstance(rows, slice) and (rows.start or 0) == 0
        return Stream(self.X[rows], self.y[rows], self.task, self.n_classes,
                      None if self.f is None else self.f[rows],
                      self.sampler if keep else None, self.name, dict(self.meta))


# ---------------------------------------------------------------------------
# generators

def friedman_mean(X: np.ndarray, a: float | np.ndarray = 1.0) -> np.ndarray:
    """Noise-free Friedman surface with the sine term scaled by ``a``."""
    X = np.atleast_2d(X)
    return (10.0 * a * np.sin(np.pi * X[:, 0] * X[:, 1]) + 20.0 * (X[:, 2] - 0.5) ** 2
            + 10.0 * X[:, 3] + 5.0 * X[:, 4])


def drift_coefficient(t: np.ndarray | int, drift: str = "none", k: float = 1.0,
                      level: float = 10.0, start: int = 10_000, stop: int = 20_000) -> np.ndarray:
    """Multiplier ``a_t`` on the sine term at step(s) ``t``.

    ``none`` gives 1; ``sine`` gives ``2 sin(2 pi k t / 1000) + 1``; ``step``
    gives ``level`` on ``[start, stop)`` and 0 elsewhere.
    """
    t = np.asarray(t, dtype=np.float64)
    if drift == "none":
        return np.ones_like(t)
    if drift == "sine":
        return 2.0 * np.sin(2.0 * np.pi * k * t / 1000.0) + 1.0
    if drift == "step":
        return np.where((t >= start) & (t < stop), level, 0.0)
    raise ValueError(f"unknown drift {drift!r}")


def gen_friedman(n: int, seed: int | None = None, drift: str = "none", k: float = 1.0,
                 level: float = 10.0, start: int = 10_000, stop: int = 20_000,
                 noise: float = 1.0, d: int = 5) -> Stream:
    """Friedman regression stream on ``[0, 1]^d`` (``d >= 5``; extra inputs
    are inert) with optional drift of the sine term."""
    if n < 1 or d < 5:
        raise ValueError("need n >= 1 and d >= 5")
    rng = np.random.default_rng(seed)
    coef = dict(drift=drift, k=k, level=level, start=start, stop=stop)
    X = rng.random((n, d))
    f = friedman_mean(X, drift_coefficient(np.arange(1, n + 1), **coef))
    y = f + noise * rng.standard_normal(n)

    def sampler(t: int, m: int, g: np.random.Generator):
        Xs = g.random((m, d))
        fs = friedman_mean(Xs, drift_coefficient(t, **coef))
        return Xs, fs + noise * g.standard_normal(m), fs

    return Stream(X, y, "regression", 0, f, sampler, "friedman",
                  dict(generator="friedman", seed=seed, noise=noise, **coef))


def parabola_mean(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64).ravel()
    return x + x ** 2


def gen_parabola(n: int, seed: int | None = None, noise: float = 1.0,
                 low: float = -3.0, high: float = 2.0) -> Stream:
    """``y = x + x^2 + noise`` with ``x`` uniform on ``(low, high)``."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    x = rng.uniform(low, high, n)
    f = parabola_mean(x)

    def sampler(t: int, m: int, g: np.random.Generator):
        xs = g.uniform(low, high, m)
        fs = parabola_mean(xs)
        return xs[:, None], fs + noise * g.standard_normal(m), fs

    return Stream(x[:, None], f + noise * rng.standard_normal(n), "regression", 0, f, sampler,
                  "parabola", dict(generator="parabola", seed=seed, noise=noise, low=low, high=high))


XOR_CENTRES = np.array([[1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [-1.0, 1.0]])
XOR_LABELS = np.array([0, 0, 1, 1])


def rotation(theta: float) -> np.ndarray:
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


def _xor_draw(m: int, theta: float, sd: float, g: np.random.Generator):
    blob = g.integers(4, size=m)
    Z = XOR_CENTRES[blob] + sd * g.standard_normal((m, 2))
    return Z @ rotation(theta).T, XOR_LABELS[blob].astype(np.float64)


def gen_moving_xor(n: int, seed: int | None = None, rotation_rate: float = 2 * math.pi / 5000,
                   sd: float = 0.5) -> Stream:
    """Rotating fuzzy XOR: four Gaussian blobs at ``(+-1, +-1)`` whose frame
    turns by ``rotation_rate`` radians per step. Blobs in the first and third
    quadrants (at ``theta = 0``) are class 0."""
    if n < 1:
        raise ValueError("need n >= 1")
    rng = np.random.default_rng(seed)
    X = np.empty((n, 2))
    y = np.empty(n)
    blob = rng.integers(4, size=n)
    Z = XOR_CENTRES[blob] + sd * rng.standard_normal((n, 2))
    theta = rotation_rate * np.arange(1, n + 1)
    c, s = np.cos(theta), np.sin(theta)
    X[:, 0] = c * Z[:, 0] - s * Z[:, 1]
    X[:, 1] = s * Z[:, 0] + c * Z[:, 1]
    y[:] = XOR_LABELS[blob]

    def sampler(t: int, m: int, g: np.random.Generator):
        Xs, ys = _xor_draw(m, rotation_rate * t, sd, g)
        return Xs, ys, None

    return Stream(X, y, "classification", 2, None, sampler, "moving_xor",
                  dict(generator="moving_xor", seed=seed, rotation_rate=rotation_rate, sd=sd))


def xor_bayes_probs(X: np.ndarray, theta: float, sd: float = 0.5) -> np.ndarray:
    """Exact class-1 probability under the XOR mixture rotated by ``theta``."""
    Z = np.atleast_2d(X) @ rotation(theta)  # undo the rotation
    ll = -0.5 * ((Z[:, None, :] - XOR_CENTRES[None]) ** 2).sum(-1) / sd ** 2
    ll -= ll.max(axis=1, keepdims=True)
    w = np.exp(ll)
    return w[:, 2:].sum(1) / w.sum(1)


# ---------------------------------------------------------------------------
# CSV input

@dataclass(frozen=True)
class CsvSchema:
    """Column layout of a CSV stream.

    ``features`` and ``label`` are column names (when the file has a header)
    or 0-based indices; ``features=None`` means every column except the
    label. ``label_map`` recodes raw label strings to integers.
    """

    label: str | int = -1
    features: tuple | None = None
    task: str = "classification"
    header: bool | None = None
    label_map: dict | None = None
    n_classes: int | None = None


def _is_number(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


def load_csv(path: str | Path, schema: CsvSchema | None = None, **kw: Any) -> Stream:
    """Read a comma-separated stream, preserving file order.

    Parameters
    ----------
    path : file to read.
    schema : column layout; keyword arguments build one when omitted.

    Raises
    ------
    DataError
        On unreadable cells or schema mismatches; messages name the line.
    """
    schema = schema or CsvSchema(**kw)
    path = Path(path)
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    with fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if not rows:
        raise DataError(f"{path}: no data rows")
    header = schema.header
    if header is None:
        header = not all(_is_number(c) for c in rows[0][1] if c.strip())
    names: list[str] | None = None
    if header:
        names = [c.strip() for c in rows[0][1]]
        rows = rows[1:]
        if not rows:
            raise DataError(f"{path}: header but no data rows")
    width = len(rows[0][1])

    def col(ref: str | int) -> int:
        if isinstance(ref, str) and not ref.lstrip("-").isdigit():
            if names is None or ref not in names:
                raise DataError(f"{path}: no column named {ref!r}")
            return names.index(ref)
        j = int(ref)
        j = j + width if j < 0 else j
        if not 0 <= j < width:
            raise DataError(f"{path}: column index {ref} out of range for {width} columns")
        return j

    lab = col(schema.label)
    feats = [col(c) for c in schema.features] if schema.features is not None else \
        [j for j in range(width) if j != lab]
    if lab in feats:
        raise DataError(f"{path}: label column is also listed as a feature")
    X = np.empty((len(rows), len(feats)))
    raw: list[str] = []
    for k, (line, r) in enumerate(rows):
        if len(r) != width:
            raise DataError(f"{path}:{line}: expected {width} fields, found {len(r)}")
        try:
            X[k] = [float(r[j]) for j in feats]
        except ValueError as exc:
            raise DataError(f"{path}:{line}: {exc}") from exc
        if not np.all(np.isfinite(X[k])):
            raise DataError(f"{path}:{line}: non-finite feature value")
        raw.append(r[lab].strip())
    y = np.empty(len(rows))
    if schema.task == "classification":
        lmap = dict(schema.label_map or {})
        if not lmap and not all(v.lstrip("-").isdigit() for v in raw):
            lmap = {v: i for i, v in enumerate(sorted(set(raw)))}
        for k, v in enumerate(raw):
            code = lmap.get(v, v) if lmap else v
            try:
                y[k] = int(code)
            except (TypeError, ValueError):
                raise DataError(f"{path}:{rows[k][0]}: unmapped label {v!r}") from None
        K = schema.n_classes or max(int(y.max()) + 1, 2)
        if np.any((y < 0) | (y >= K)):
            bad = int(np.argmax((y < 0) | (y >= K)))
            raise DataError(f"{path}:{rows[bad][0]}: label {raw[bad]!r} outside [0, {K})")
    else:
        K = 0
        for k, v in enumerate(raw):
            try:
                y[k] = float(v)
            except ValueError:
                raise DataError(f"{path}:{rows[k][0]}: bad response {v!r}") from None
    colnames = [names[j] for j in feats] if names else [str(j) for j in feats]
    return Stream(X, y, schema.task, K, name=path.stem,
                  meta=dict(source=str(path), features=colnames, preprocessing="none"))


# ---------------------------------------------------------------------------
# metrics

def rmse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred, truth = np.asarray(pred, float), np.asarray(truth, float)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def ccr(probs: np.ndarray, labels: np.ndarray) -> float:
    """Correct-classification rate of the argmax class."""
    probs = np.atleast_2d(probs)
    return float(np.mean(np.argmax(probs, axis=1) == np.asarray(labels).astype(int)))


def auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic.

    Ties get average ranks. Returns NaN if only one class is present.
    """
    scores = np.asarray(scores, float).ravel()
    pos = np.asarray(labels).ravel() == 1
    n1 = int(pos.sum())
    n0 = len(pos) - n1
    if n1 == 0 or n0 == 0:
        return float("nan")
    r = rankdata(scores)
    return float((r[pos].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


# ---------------------------------------------------------------------------
# prequential evaluation

TRACE_FIELDS = ("t", "density", "sqerr", "correct", "score", "label")


@dataclass
class MetricTrace:
    """Per-step prequential records.

    ``density`` is the predictive density of the response (regression) or
    the probability assigned to the true class; ``sqerr`` the squared error
    of the predictive mean against the noise-free mean when the stream
    provides one, else against the response; ``correct`` is 0/1 accuracy;
    ``score`` the class-1 probability and ``label`` the true class (binary
    tasks). With test batches each record averages over the batch, while
    ``score``/``label`` keep the first test point.
    """

    task: str
    t: np.ndarray
    density: np.ndarray
    sqerr: np.ndarray
    correct: np.ndarray
    score: np.ndarray
    label: np.ndarray
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)

    def window(self, start: int | None = None, stop: int | None = None) -> MetricTrace:
        m = np.ones(len(self.t), bool)
        if start is not None:
            m &= self.t >= start
        if stop is not None:
            m &= self.t < stop
        return MetricTrace(self.task, *(getattr(self, k)[m] for k in TRACE_FIELDS))

    def summary(self) -> dict:
        """Aggregates over the whole trace."""
        out = {"steps": int(len(self.t)), "mean_density": _nanmean(self.density)}
        if self.task == "regression":
            out["rmse"] = float(np.sqrt(_nanmean(self.sqerr)))
        else:
            out["ccr"] = _nanmean(self.correct)
            ok = np.isfinite(self.score)
            out["auc"] = auc(self.score[ok], self.label[ok]) if ok.any() else float("nan")
        return out

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TRACE_FIELDS)
            for row in zip(*(getattr(self, k) for k in TRACE_FIELDS)):
                w.writerow([int(row[0])] + [_fmt(v) for v in row[1:]])

    def to_jsonl(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            for row in zip(*(getattr(self, k) for k in TRACE_FIELDS)):
                rec = {"t": int(row[0])}
                rec.update({k: (None if not np.isfinite(v) else float(v))
                            for k, v in zip(TRACE_FIELDS[1:], row[1:])})
                fh.write(json.dumps(rec) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path, task: str) -> MetricTrace:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or tuple(rows[0]) != TRACE_FIELDS:
            raise DataError(f"{path}: unexpected trace header")
        a = np.array([[float(v) if v else np.nan for v in r] for r in rows[1:]]).reshape(-1, 6)
        return cls(task, a[:, 0].astype(int), *(a[:, j] for j in range(1, 6)))


def _nanmean(a: np.ndarray) -> float:
    a = a[np.isfinite(a)]
    return float(a.mean()) if len(a) else float("nan")


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def prequential_eval(cloud: Any, stream: Stream, batch: int = 1, start: int = 0,
                     test_seed: int | None = None,
                     on_step: Callable[[Any, int], None] | None = None) -> MetricTrace:
    """Test-then-train over ``stream[start:]``.

    With ``batch == 1`` each observation is scored before the cloud sees it.
    With ``batch > 1`` the stream's sampler draws ``batch`` fresh test pairs
    from the concept at the current step; they are scored and discarded, and
    the cloud is then updated with the stream's own observation.

    ``on_step(cloud, t)`` is called after each update (e.g. to record tree
    heights).
    """
    task = "classification" if cloud.spec.kind == 2 else "regression"
    if task != stream.task:
        raise ValueError(f"{task} model cannot be scored on a {stream.task} stream")
    if batch > 1 and stream.sampler is None:
        raise ValueError("test batches need a stream with a sampler")
    if batch < 1:
        raise ValueError("batch must be >= 1")
    g = np.random.default_rng(test_seed)
    n = len(stream) - start
    t = np.arange(start + 1, len(stream) + 1)
    density = np.full(n, np.nan)
    sqerr = np.full(n, np.nan)
    correct = np.full(n, np.nan)
    score = np.full(n, np.nan)
    label = np.full(n, np.nan)
    binary = task == "classification" and stream.n_classes == 2
    for j in range(n):
        k = start + j
        if batch == 1:
            Xt, yt = stream.X[k:k + 1], stream.y[k:k + 1]
            ft = None if stream.f is None else stream.f[k:k + 1]
        else:
            Xt, yt, ft = stream.sampler(k + 1, batch, g)
        p = cloud.predict(Xt, yt)
        density[j] = np.mean(p.density)
        if task == "regression":
            sqerr[j] = np.mean((p.mean - (yt if ft is None else ft)) ** 2)
        else:
            correct[j] = np.mean(np.argmax(p.probs, axis=1) == yt.astype(int))
            if binary:
                score[j] = p.probs[0, 1]
                label[j] = yt[0]
        cloud.update((stream.X[k], stream.y[k]))
        if on_step is not None:
            on_step(cloud, k + 1)
    return MetricTrace(task, t, density, sqerr, correct, score, label)


def holdout_eval(cloud: Any, X: np.ndarray, y: np.ndarray, f: np.ndarray | None = None) -> dict:
    """Score a trained cloud on a held-out set (RMSE against ``f`` when given)."""
    p = cloud.predict(X, y)
    out = {"mean_density": float(np.mean(p.density))}
    if p.probs is None:
        out["rmse"] = rmse(p.mean, y if f is None else f)
    else:
        out["ccr"] = ccr(p.probs, y)
        out["misclassification"] = 1.0 - out["ccr"]
        if p.probs.shape[1] == 2:
            out["auc"] = auc(p.probs[:, 1], y)
    return out


def run_stream(stream: Stream, config: Any, batch: int = 1, test_seed: int | None = None,
               on_step: Callable[[Any, int], None] | None = None) -> tuple[Any, MetricTrace]:
    """Initialise a cloud on the first ``config.n_init`` rows, then score the
    rest prequentially."""
    from .smc import ParticleCloud

    n0 = config.n_init
    if len(stream) <= n0:
        raise DataError(f"stream has {len(stream)} rows, need more than n_init={n0}")
    cloud = ParticleCloud.init((stream.X[:n0], stream.y[:n0]), config)
    trace = prequential_eval(cloud, stream, batch=batch, start=n0, test_seed=test_seed,
                             on_step=on_step)
    return cloud, trace
