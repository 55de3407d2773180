"""Shapley-value explanations for any row -> value predictor.

The payout of a coalition S of features is the mean prediction over a
background sample after overwriting the features in S with the explained
instance's values (interventional payout). The empty coalition gives the
base value, the full one the prediction itself.

Numeric features are grouped into buckets whose boundaries come from a
small regression tree fitted on that feature against the KPI, so that
explanations read ``a<=amount<b`` rather than one label per raw value.
"""

from __future__ import annotations

import heapq
import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, replace
from typing import Callable, Iterable, Sequence

import numpy as np

from .encoding import AGGREGATE, PRESENCE, FeatureDescriptor

Oracle = Callable[[np.ndarray], np.ndarray]

EXACT_THRESHOLD = 12


class ShapleyRefusal(ValueError):
    """Too many features for exact enumeration."""


@dataclass
class PayoutConfig:
    background: np.ndarray

    def __post_init__(self):
        self.background = np.atleast_2d(np.asarray(self.background, dtype=np.float64))
        if len(self.background) == 0:
            raise ValueError("background sample is empty")

    @classmethod
    def from_rows(cls, rows: np.ndarray, size: int = 100, seed: int = 0) -> "PayoutConfig":
        """Uniform sample (without replacement) of ``size`` training rows."""
        rows = np.asarray(rows, dtype=np.float64)
        if len(rows) <= size:
            return cls(rows.copy())
        idx = np.sort(np.random.default_rng(seed).choice(len(rows), size=size, replace=False))
        return cls(rows[idx])


@dataclass
class ShapleyVector:
    values: np.ndarray
    base_value: float
    prediction: float
    provenance: tuple[str, int] | None = None
    scale: str = "kpi"

    @property
    def efficiency_error(self) -> float:
        return float(self.values.sum() + self.base_value - self.prediction)


@dataclass(frozen=True)
class Explanation:
    label: str
    shapley_value: float
    feature: int = -1
    derived: bool = False


@dataclass(frozen=True)
class GlobalExplanation:
    label: str
    mean_influence: float
    count: int
    median_influence: float
    derived: bool = False

    def to_dict(self) -> dict:
        return {"label": self.label, "mean": self.mean_influence, "median": self.median_influence,
                "count": self.count, "derived": self.derived}


def _same(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    return (a == x) | (np.isnan(a) & np.isnan(x))


def _unique_rows(rows: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    index: dict[bytes, int] = {}
    weights: list[float] = []
    keep = []
    for i, r in enumerate(np.where(np.isnan(rows), np.nan, rows)):
        key = r.tobytes()
        j = index.get(key)
        if j is None:
            index[key] = len(keep)
            keep.append(i)
            weights.append(1.0)
        else:
            weights[j] += 1.0
    return rows[keep], np.array(weights)


class _PayoutPlan:
    """Distinct composite rows needed for the payouts of a set of coalitions.

    For background row b only the features where b differs from the
    instance matter, so the composite for coalition S is determined by
    (b, S & diff_b); duplicates are evaluated once.
    """

    def __init__(self, instance: np.ndarray, background: np.ndarray, weights: np.ndarray,
                 coalitions: np.ndarray):
        k, m = coalitions.shape
        nb = len(background)
        diff = ~_same(background, instance[None, :])
        keys = coalitions[:, None, :] & diff[None, :, :]
        packed = np.packbits(keys, axis=2).reshape(k * nb, -1)
        bidx = np.tile(np.arange(nb, dtype=np.uint32), k).view(np.uint8).reshape(k * nb, 4)
        raw = np.ascontiguousarray(np.hstack([bidx, packed]))
        view = raw.view(np.dtype((np.void, raw.shape[1]))).ravel()
        _, first, inverse = np.unique(view, return_index=True, return_inverse=True)
        s_idx, b_idx = np.divmod(first, nb)
        sel = keys[s_idx, b_idx]
        self.rows = np.where(sel, instance[None, :], background[b_idx])
        self.inverse = inverse.reshape(k, nb)
        self.weights = weights / weights.sum()

    def payouts(self, preds: np.ndarray) -> np.ndarray:
        return preds[self.inverse] @ self.weights


def _evaluate(oracle: Oracle, plans: Sequence[_PayoutPlan], chunk_rows: int = 250_000) -> list[np.ndarray]:
    out: list[np.ndarray] = []
    batch: list[_PayoutPlan] = []
    size = 0

    def flush():
        nonlocal batch, size
        if not batch:
            return
        preds = np.asarray(oracle(np.vstack([p.rows for p in batch])), dtype=np.float64)
        start = 0
        for p in batch:
            out.append(p.payouts(preds[start:start + len(p.rows)]))
            start += len(p.rows)
        batch, size = [], 0

    for p in plans:
        batch.append(p)
        size += len(p.rows)
        if size >= chunk_rows:
            flush()
    flush()
    return out


def _players(m: int, features: Sequence[int] | None) -> np.ndarray:
    return np.arange(m) if features is None else np.asarray(sorted(set(int(f) for f in features)), dtype=int)


def _subset_matrix(m: int, players: np.ndarray) -> np.ndarray:
    q = len(players)
    masks = np.arange(2 ** q)
    bits = ((masks[:, None] >> np.arange(q)[None, :]) & 1).astype(bool)
    out = np.zeros((2 ** q, m), dtype=bool)
    out[:, players] = bits
    return out


def _shapley_from_lattice(val: np.ndarray, q: int) -> np.ndarray:
    masks = np.arange(2 ** q)
    sizes = np.array([bin(s).count("1") for s in masks])
    weight = np.array([math.factorial(s) * math.factorial(q - s - 1) / math.factorial(q) if s < q else 0.0
                       for s in range(q + 1)])
    psi = np.zeros(q)
    for i in range(q):
        bit = 1 << i
        without = masks[(masks & bit) == 0]
        psi[i] = np.sum(weight[sizes[without]] * (val[without | bit] - val[without]))
    return psi


def _exact_plan(instance, cfg, players):
    m = len(instance)
    bg, w = _unique_rows(cfg.background)
    return _PayoutPlan(instance, bg, w, _subset_matrix(m, players))


def _exact_finish(val, instance, players, provenance):
    q = len(players)
    values = np.zeros(len(instance))
    values[players] = _shapley_from_lattice(val, q)
    return ShapleyVector(values, float(val[0]), float(val[-1]), provenance)


def exact_shapley(oracle: Oracle, instance, cfg: PayoutConfig, exact_threshold: int = EXACT_THRESHOLD,
                  features: Sequence[int] | None = None, provenance=None) -> ShapleyVector:
    """Shapley values by enumerating every coalition.

    ``features`` restricts the players to a subset of columns; the others
    are always taken from the background rows, which is exact when the
    oracle ignores them.
    """
    instance = np.asarray(instance, dtype=np.float64)
    players = _players(len(instance), features)
    if len(players) > exact_threshold:
        raise ShapleyRefusal(f"{len(players)} features exceed the exact threshold of {exact_threshold}; "
                             "use sampled_shapley")
    plan = _exact_plan(instance, cfg, players)
    (val,) = _evaluate(oracle, [plan])
    return _exact_finish(val, instance, players, provenance)


def _permutations(q: int, n_permutations: int, seed: int) -> np.ndarray:
    if math.factorial(q) <= n_permutations:
        return np.array(list(itertools.permutations(range(q))), dtype=int).reshape(-1, q)
    rng = np.random.default_rng(seed)
    return np.array([rng.permutation(q) for _ in range(n_permutations)], dtype=int)


def _sampled_plan(instance, cfg, players, perms):
    m = len(instance)
    p, q = perms.shape
    chain = np.zeros((p, q + 1, m), dtype=bool)
    for j in range(q):
        chain[np.arange(p), j + 1:, players[perms[:, j]]] = True
    flat = chain.reshape(p * (q + 1), m)
    uniq, inverse = np.unique(np.packbits(flat, axis=1), axis=0, return_inverse=True)
    coalitions = np.unpackbits(uniq, axis=1, count=m).astype(bool)
    bg, w = _unique_rows(cfg.background)
    return _PayoutPlan(instance, bg, w, coalitions), inverse.reshape(p, q + 1)


def _sampled_finish(val_unique, chain_index, perms, instance, players, provenance):
    vals = val_unique[chain_index]
    marg = np.diff(vals, axis=1)
    p, q = perms.shape
    psi = np.zeros(q)
    np.add.at(psi, perms.ravel(), marg.ravel())
    psi /= p
    base = float(vals[0, 0])
    pred = float(vals[0, -1])
    residual = pred - base - psi.sum()
    mag = np.abs(psi)
    if mag.sum() > 0:
        psi = psi + residual * mag / mag.sum()
    elif q:
        psi = psi + residual / q
    values = np.zeros(len(instance))
    values[players] = psi
    return ShapleyVector(values, base, pred, provenance)


def sampled_shapley(oracle: Oracle, instance, cfg: PayoutConfig, n_permutations: int = 200, seed: int = 0,
                    features: Sequence[int] | None = None, provenance=None) -> ShapleyVector:
    """Monte Carlo Shapley values over random feature orderings.

    When every ordering fits in the budget they are all enumerated and the
    result is exact. The tiny efficiency residual left by averaging is
    spread over the features in proportion to ``|psi|``.
    """
    if n_permutations < 1:
        raise ValueError("n_permutations must be >= 1")
    instance = np.asarray(instance, dtype=np.float64)
    players = _players(len(instance), features)
    perms = _permutations(len(players), n_permutations, seed)
    plan, chain_index = _sampled_plan(instance, cfg, players, perms)
    (val,) = _evaluate(oracle, [plan])
    return _sampled_finish(val, chain_index, perms, instance, players, provenance)


def explain_rows(oracle: Oracle, rows: np.ndarray, cfg: PayoutConfig, provenance: Sequence | None = None,
                 features: Sequence[int] | None = None, exact_threshold: int = EXACT_THRESHOLD,
                 n_permutations: int = 200, seed: int = 0) -> list[ShapleyVector]:
    """Explain many rows, batching oracle calls and reusing results for identical rows.

    Exact enumeration is used when the number of players is within
    ``exact_threshold``, permutation sampling otherwise.
    """
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    m = rows.shape[1]
    players = _players(m, features)
    exact = len(players) <= exact_threshold
    perms = None if exact else _permutations(len(players), n_permutations, seed)

    distinct: dict[bytes, int] = {}
    order = []
    for r in rows:
        key = r.tobytes()
        if key not in distinct:
            distinct[key] = len(order)
            order.append(r)
    mapping = [distinct[r.tobytes()] for r in rows]

    results: list[ShapleyVector] = []
    block = 256
    for start in range(0, len(order), block):
        chunk = order[start:start + block]
        if exact:
            plans = [_exact_plan(x, cfg, players) for x in chunk]
            vals = _evaluate(oracle, plans)
            results += [_exact_finish(v, x, players, None) for v, x in zip(vals, chunk)]
        else:
            built = [_sampled_plan(x, cfg, players, perms) for x in chunk]
            vals = _evaluate(oracle, [b[0] for b in built])
            results += [_sampled_finish(v, b[1], perms, x, players, None)
                        for v, b, x in zip(vals, built, chunk)]
    out = []
    for i, j in enumerate(mapping):
        v = results[j]
        prov = provenance[i] if provenance is not None else None
        out.append(ShapleyVector(v.values.copy(), v.base_value, v.prediction, prov, v.scale))
    return out


def rescale_boolean(vector: ShapleyVector) -> ShapleyVector:
    """Map a probability explanation onto [-1, +1] via p -> 2p - 1."""
    if vector.scale != "probability":
        raise ValueError("only probability-scale explanations can be rescaled")
    return replace(vector, values=2.0 * vector.values, base_value=2.0 * vector.base_value - 1.0,
                   prediction=2.0 * vector.prediction - 1.0, scale="signed_probability")


def fit_discretizer(values, labels, max_buckets: int = 8, min_samples_leaf: int = 1) -> np.ndarray:
    """Bucket boundaries for one numeric feature from a regression tree on the KPI.

    The tree has depth ``ceil(log2(max_buckets))`` and at most
    ``max_buckets`` leaves, splitting the leaf with the largest squared-error
    reduction first. Thresholds are midpoints between adjacent observed
    values. Non-finite values are ignored.
    """
    x = np.asarray(values, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if len(x) == 0 or max_buckets < 2:
        return np.empty(0)
    order = np.argsort(x, kind="stable")
    x, y = x[order], y[order]
    csum = np.concatenate([[0.0], np.cumsum(y)])
    total_ss = float(np.sum((y - y.mean()) ** 2))
    tol = 1e-12 * max(total_ss, 1e-300)
    max_depth = max(1, math.ceil(math.log2(max_buckets)))

    def best_split(lo, hi):
        n = hi - lo
        if n < 2 * min_samples_leaf:
            return None
        cut = np.arange(lo + min_samples_leaf, hi - min_samples_leaf + 1)
        cut = cut[x[cut - 1] < x[cut]]
        if len(cut) == 0:
            return None
        sl = csum[cut] - csum[lo]
        sr = csum[hi] - csum[cut]
        nl = cut - lo
        nr = hi - cut
        s = csum[hi] - csum[lo]
        gain = sl * sl / nl + sr * sr / nr - s * s / n
        i = int(np.argmax(gain))
        if gain[i] <= tol:
            return None
        c = int(cut[i])
        thr = 0.5 * (x[c - 1] + x[c])
        if not x[c - 1] < thr <= x[c]:
            thr = x[c]
        return float(gain[i]), c, thr

    heap = []
    counter = itertools.count()

    def push(lo, hi, depth):
        if depth >= max_depth:
            return
        found = best_split(lo, hi)
        if found is not None:
            gain, c, thr = found
            heapq.heappush(heap, (-gain, next(counter), lo, hi, depth, c, thr))

    push(0, len(x), 0)
    leaves = 1
    bounds = []
    while heap and leaves < max_buckets:
        _, _, lo, hi, depth, c, thr = heapq.heappop(heap)
        bounds.append(thr)
        leaves += 1
        push(lo, c, depth + 1)
        push(c, hi, depth + 1)
    return np.array(sorted(set(bounds)))


def bucket_index(boundaries: np.ndarray, value: float) -> int:
    """Bucket of ``value``; a value equal to a boundary belongs to the bucket above it."""
    return int(np.searchsorted(boundaries, value, side="right"))


def _fmt(v: float) -> str:
    return f"{v:.4g}"


def bucket_label(name: str, boundaries: np.ndarray, value: float) -> str:
    if len(boundaries) == 0:
        return f"{name}=any"
    i = bucket_index(boundaries, value)
    if i == 0:
        return f"{name}<{_fmt(boundaries[0])}"
    if i == len(boundaries):
        return f"{name}>={_fmt(boundaries[-1])}"
    return f"{_fmt(boundaries[i - 1])}<={name}<{_fmt(boundaries[i])}"


def fit_discretizers(rows: np.ndarray, labels: np.ndarray, descriptors: Sequence[FeatureDescriptor],
                     max_buckets: int = 4, min_samples_leaf: int = 1) -> dict[int, np.ndarray]:
    """Boundaries for every numeric column (presence flags excluded)."""
    out = {}
    for j, d in enumerate(descriptors):
        if d.is_categorical or d.position == PRESENCE:
            continue
        col = rows[:, j]
        if d.offset:
            flag = _presence_column(descriptors, d.offset)
            if flag is not None:
                col = np.where(rows[:, flag] > 0, col, np.nan)
        out[j] = fit_discretizer(col, labels, max_buckets, min_samples_leaf)
    return out


def _presence_column(descriptors: Sequence[FeatureDescriptor], offset: int) -> int | None:
    for j, d in enumerate(descriptors):
        if d.position == PRESENCE and d.offset == offset:
            return j
    return None


def label_explanations(vector: ShapleyVector, row: np.ndarray, descriptors: Sequence[FeatureDescriptor],
                       discretizers: dict[int, np.ndarray]) -> list[Explanation]:
    """Turn per-column Shapley values into ``attr=value`` / bucket explanations."""
    out = []
    for j, d in enumerate(descriptors):
        v = row[j]
        if d.is_categorical:
            label = f"{d.name}={d.decode(v)}"
        elif d.position == PRESENCE:
            label = f"{d.name}={'present' if v > 0 else 'absent'}"
        else:
            padded = False
            if d.offset:
                flag = _presence_column(descriptors, d.offset)
                padded = flag is not None and row[flag] <= 0
            if padded or np.isnan(v):
                label = f"{d.name}=missing"
            elif d.position == AGGREGATE and j not in discretizers:
                label = f"{d.name}={_fmt(v)}"
            else:
                label = bucket_label(d.name, discretizers.get(j, np.empty(0)), v)
        out.append(Explanation(label, float(vector.values[j]), j, d.engineered))
    return out


def aggregate_global(explanations: Iterable[Sequence[Explanation]], sort_key: str = "mean") -> list[GlobalExplanation]:
    """Average signed influence of each label over the instances carrying it."""
    if sort_key not in ("mean", "median"):
        raise ValueError("sort_key must be 'mean' or 'median'")
    groups: dict[str, list[float]] = defaultdict(list)
    derived: dict[str, bool] = {}
    for inst in explanations:
        for e in inst:
            groups[e.label].append(e.shapley_value)
            derived[e.label] = e.derived
    if not groups:
        raise ValueError("no explanations to aggregate")
    out = []
    for label, vals in groups.items():
        arr = np.array(vals)
        out.append(GlobalExplanation(label, float(arr.mean()), len(arr), float(np.median(arr)), derived[label]))
    key = (lambda g: g.mean_influence) if sort_key == "mean" else (lambda g: g.median_influence)
    out.sort(key=lambda g: (-abs(key(g)), g.label))
    return out
