"""Gradient-boosted regression trees.

Squared-error boosting for numeric KPIs and logistic boosting for boolean
ones. Trees are grown level by level with an exact greedy split search:
numeric features are scanned over their sorted distinct values (threshold
at the midpoint, ``x < threshold`` goes left, NaN always goes right, and
"present vs missing" is a candidate split too) and categorical features are
ordered by their gradient ratio and scanned as if numeric, the left child
receiving a subset of category codes. Equal gains
are resolved in favour of the lowest feature index, then the lowest
threshold. There is no row or column subsampling, so training is fully
deterministic.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from numba import njit

from .encoding import EncodedDataset, EncoderConfig, FeatureDescriptor

FORMAT = "xppa-gbdt"
FORMAT_VERSION = 1
# threshold of a split that sends every present value left and missing values right
MISSING_SPLIT = float(np.finfo(np.float64).max)


@dataclass(frozen=True)
class TrainConfig:
    n_trees: int = 300
    max_depth: int = 6
    learning_rate: float = 0.1
    min_samples_leaf: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.n_trees < 1:
            raise ValueError("n_trees must be >= 1")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.min_samples_leaf < 1:
            raise ValueError("min_samples_leaf must be >= 1")

    def to_dict(self) -> dict:
        return {"n_trees": self.n_trees, "max_depth": self.max_depth, "learning_rate": self.learning_rate,
                "min_samples_leaf": self.min_samples_leaf, "seed": self.seed}


@dataclass
class Tree:
    """One regression tree in array form; node 0 is the root.

    ``feature[i] == -1`` marks a leaf. For categorical splits
    ``categories[i]`` holds the sorted codes sent left, otherwise
    ``threshold[i]`` applies.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    categories: dict[int, np.ndarray] = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    @property
    def used_features(self) -> set[int]:
        return {int(f) for f in self.feature if f >= 0}

    def to_dict(self) -> dict:
        return {
            "feature": self.feature.tolist(),
            "threshold": self.threshold.tolist(),
            "left": self.left.tolist(),
            "right": self.right.tolist(),
            "value": self.value.tolist(),
            "categories": {str(k): v.tolist() for k, v in sorted(self.categories.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Tree":
        return cls(
            np.array(d["feature"], dtype=np.int64),
            np.array(d["threshold"], dtype=np.float64),
            np.array(d["left"], dtype=np.int64),
            np.array(d["right"], dtype=np.int64),
            np.array(d["value"], dtype=np.float64),
            {int(k): np.array(v, dtype=np.int64) for k, v in d["categories"].items()},
        )


class ContractError(ValueError):
    pass


@njit(cache=True)
def _grow_tree(X, is_cat, ncat, order, g, h, max_depth, min_leaf, min_gain_rel):
    n, p = X.shape
    max_nodes = 2 ** (max_depth + 1) - 1
    width = 1
    for f in range(p):
        if ncat[f] > width:
            width = ncat[f]
    feature = np.full(max_nodes, -1, np.int64)
    threshold = np.zeros(max_nodes)
    left = np.full(max_nodes, -1, np.int64)
    right = np.full(max_nodes, -1, np.int64)
    cat_left = np.zeros((max_nodes, width), np.bool_)
    G = np.zeros(max_nodes)
    H = np.zeros(max_nodes)
    N = np.zeros(max_nodes, np.int64)
    S2 = np.zeros(max_nodes)
    node_of = np.zeros(n, np.int64)
    for r in range(n):
        G[0] += g[r]
        H[0] += h[r]
        S2[0] += g[r] * g[r]
    N[0] = n
    n_nodes = 1
    current = np.zeros(1, np.int64)
    slot_of = np.full(max_nodes, -1, np.int64)

    for depth in range(max_depth):
        nl = current.shape[0]
        for s in range(nl):
            slot_of[current[s]] = s
        best_gain = np.empty(nl)
        best_feat = np.full(nl, -1, np.int64)
        best_thr = np.zeros(nl)
        best_mask = np.zeros((nl, width), np.bool_)
        for s in range(nl):
            best_gain[s] = min_gain_rel * S2[current[s]]
        splittable = np.zeros(nl, np.bool_)
        any_split = False
        for s in range(nl):
            if N[current[s]] >= 2 * min_leaf:
                splittable[s] = True
                any_split = True
        if not any_split:
            break

        for f in range(p):
            if not is_cat[f]:
                GL = np.zeros(nl)
                HL = np.zeros(nl)
                NL = np.zeros(nl, np.int64)
                lastv = np.zeros(nl)
                for idx in range(n):
                    r = order[f, idx]
                    v = X[r, f]
                    if np.isnan(v):
                        break
                    nd = node_of[r]
                    s = slot_of[nd]
                    if s < 0 or not splittable[s]:
                        continue
                    if NL[s] > 0 and v > lastv[s]:
                        nr = N[nd] - NL[s]
                        if NL[s] >= min_leaf and nr >= min_leaf:
                            gr = G[nd] - GL[s]
                            hr = H[nd] - HL[s]
                            if HL[s] > 0.0 and hr > 0.0:
                                gain = GL[s] * GL[s] / HL[s] + gr * gr / hr - G[nd] * G[nd] / H[nd]
                                if gain > best_gain[s]:
                                    best_gain[s] = gain
                                    best_feat[s] = f
                                    thr = 0.5 * (lastv[s] + v)
                                    if thr <= lastv[s] or thr > v:
                                        thr = v
                                    best_thr[s] = thr
                    GL[s] += g[r]
                    HL[s] += h[r]
                    NL[s] += 1
                    lastv[s] = v
                # present values left, missing ones right
                for s in range(nl):
                    nd = current[s]
                    nr = N[nd] - NL[s]
                    if not splittable[s] or NL[s] < min_leaf or nr < min_leaf or nr == 0:
                        continue
                    gr = G[nd] - GL[s]
                    hr = H[nd] - HL[s]
                    if HL[s] > 0.0 and hr > 0.0:
                        gain = GL[s] * GL[s] / HL[s] + gr * gr / hr - G[nd] * G[nd] / H[nd]
                        if gain > best_gain[s]:
                            best_gain[s] = gain
                            best_feat[s] = f
                            best_thr[s] = MISSING_SPLIT
            else:
                C = ncat[f]
                GC = np.zeros((nl, C))
                HC = np.zeros((nl, C))
                NC = np.zeros((nl, C), np.int64)
                for r in range(n):
                    s = slot_of[node_of[r]]
                    if s < 0 or not splittable[s]:
                        continue
                    c = int(X[r, f])
                    GC[s, c] += g[r]
                    HC[s, c] += h[r]
                    NC[s, c] += 1
                for s in range(nl):
                    if not splittable[s]:
                        continue
                    nd = current[s]
                    m = 0
                    for c in range(C):
                        if NC[s, c] > 0:
                            m += 1
                    if m < 2:
                        continue
                    codes = np.empty(m, np.int64)
                    ratio = np.empty(m)
                    j = 0
                    for c in range(C):
                        if NC[s, c] > 0:
                            codes[j] = c
                            ratio[j] = GC[s, c] / HC[s, c] if HC[s, c] > 0.0 else 0.0
                            j += 1
                    perm = np.argsort(ratio, kind="mergesort")
                    gl = 0.0
                    hl = 0.0
                    nleft = 0
                    for j in range(m - 1):
                        c = codes[perm[j]]
                        gl += GC[s, c]
                        hl += HC[s, c]
                        nleft += NC[s, c]
                        nr = N[nd] - nleft
                        if nleft < min_leaf or nr < min_leaf:
                            continue
                        gr = G[nd] - gl
                        hr = H[nd] - hl
                        if hl <= 0.0 or hr <= 0.0:
                            continue
                        gain = gl * gl / hl + gr * gr / hr - G[nd] * G[nd] / H[nd]
                        if gain > best_gain[s]:
                            best_gain[s] = gain
                            best_feat[s] = f
                            best_mask[s, :] = False
                            for q in range(j + 1):
                                best_mask[s, codes[perm[q]]] = True

        n_children = 0
        for s in range(nl):
            if best_feat[s] >= 0:
                n_children += 2
        if n_children == 0:
            break
        nxt = np.empty(n_children, np.int64)
        k = 0
        for s in range(nl):
            f = best_feat[s]
            if f < 0:
                continue
            nd = current[s]
            feature[nd] = f
            if is_cat[f]:
                cat_left[nd, :] = best_mask[s, :]
            else:
                threshold[nd] = best_thr[s]
            left[nd] = n_nodes
            right[nd] = n_nodes + 1
            nxt[k] = n_nodes
            nxt[k + 1] = n_nodes + 1
            k += 2
            n_nodes += 2
        for r in range(n):
            nd = node_of[r]
            s = slot_of[nd]
            if s < 0 or feature[nd] < 0:
                continue
            f = feature[nd]
            v = X[r, f]
            if is_cat[f]:
                go_left = cat_left[nd, int(v)]
            else:
                go_left = v < threshold[nd]
            child = left[nd] if go_left else right[nd]
            node_of[r] = child
            G[child] += g[r]
            H[child] += h[r]
            N[child] += 1
            S2[child] += g[r] * g[r]
        for s in range(nl):
            slot_of[current[s]] = -1
        current = nxt

    value = np.zeros(n_nodes)
    for nd in range(n_nodes):
        if H[nd] > 1e-150:
            value[nd] = -G[nd] / H[nd]
    return (feature[:n_nodes], threshold[:n_nodes], left[:n_nodes], right[:n_nodes],
            value, cat_left[:n_nodes], node_of)


@njit(cache=True)
def _predict_packed(X, feature, threshold, left, right, value, cat_ptr, cat_codes, roots, n_use):
    n = X.shape[0]
    out = np.zeros(n)
    for t in range(n_use):
        root = roots[t]
        for r in range(n):
            nd = root
            while feature[nd] >= 0:
                v = X[r, feature[nd]]
                lo = cat_ptr[nd]
                hi = cat_ptr[nd + 1]
                if hi > lo:
                    # categorical split: binary search in the sorted left-code set
                    go_left = False
                    if not np.isnan(v):
                        c = int(v)
                        a = lo
                        b = hi
                        while a < b:
                            mid = (a + b) // 2
                            if cat_codes[mid] < c:
                                a = mid + 1
                            else:
                                b = mid
                        go_left = a < hi and cat_codes[a] == c
                else:
                    go_left = v < threshold[nd]
                nd = left[nd] if go_left else right[nd]
            out[r] += value[nd]
    return out


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class GbdtModel:
    base_score: float
    trees: list[Tree]
    learning_rate: float
    objective: str
    descriptors: tuple[FeatureDescriptor, ...] = ()
    encoder_config: EncoderConfig | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def width(self) -> int:
        return len(self.descriptors)

    @property
    def used_features(self) -> list[int]:
        used: set[int] = set()
        for t in self.trees:
            used |= t.used_features
        return sorted(used)

    @cached_property
    def _packed(self):
        offsets = np.cumsum([0] + [t.n_nodes for t in self.trees])
        total = int(offsets[-1])
        feature = np.full(max(total, 1), -1, np.int64)
        threshold = np.zeros(max(total, 1))
        left = np.full(max(total, 1), -1, np.int64)
        right = np.full(max(total, 1), -1, np.int64)
        value = np.zeros(max(total, 1))
        cat_ptr = np.zeros(max(total, 1) + 1, np.int64)
        chunks = []
        for t, off in zip(self.trees, offsets[:-1]):
            sl = slice(off, off + t.n_nodes)
            feature[sl] = t.feature
            threshold[sl] = t.threshold
            internal = t.left >= 0
            left[sl] = np.where(internal, t.left + off, -1)
            right[sl] = np.where(internal, t.right + off, -1)
            value[sl] = t.value
        sizes = np.zeros(max(total, 1), np.int64)
        for t, off in zip(self.trees, offsets[:-1]):
            for nd, codes in t.categories.items():
                sizes[off + nd] = len(codes)
        cat_ptr[1:] = np.cumsum(sizes)
        for t, off in zip(self.trees, offsets[:-1]):
            for nd in sorted(t.categories):
                chunks.append((off + nd, np.sort(t.categories[nd])))
        cat_codes = np.zeros(max(int(cat_ptr[-1]), 1), np.int64)
        for nd, codes in chunks:
            cat_codes[cat_ptr[nd]:cat_ptr[nd] + len(codes)] = codes
        roots = np.asarray(offsets[:-1], dtype=np.int64)
        return feature, threshold, left, right, value, cat_ptr, cat_codes, roots

    def tree_sum(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        n_use = len(self.trees) if n_trees is None else min(n_trees, len(self.trees))
        if n_use == 0:
            return np.zeros(len(X))
        return _predict_packed(X, *self._packed, n_use)

    def raw_predict(self, X: np.ndarray, n_trees: int | None = None) -> np.ndarray:
        X = self._check(X)
        return self.base_score + self.learning_rate * self.tree_sum(X, n_trees)

    def predict(self, X, n_trees: int | None = None):
        """KPI estimate per row; probabilities for the logistic objective.

        ``n_trees`` limits the ensemble to its first trees (staged prediction).
        A single 1-D row gives a scalar.
        """
        single = np.ndim(X) == 1
        X2 = np.atleast_2d(np.asarray(X, dtype=np.float64))
        z = self.raw_predict(X2, n_trees)
        out = _sigmoid(z) if self.objective == "logistic" else z
        return float(out[0]) if single else out

    __call__ = predict

    def _check(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        if X.ndim != 2:
            raise ContractError("expected a 2-D array of rows")
        if self.descriptors and X.shape[1] != self.width:
            raise ContractError(f"row width {X.shape[1]} does not match model width {self.width}")
        return X

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "objective": self.objective,
            "base_score": self.base_score,
            "learning_rate": self.learning_rate,
            "descriptors": [d.to_dict() for d in self.descriptors],
            "encoder_config": self.encoder_config.to_dict() if self.encoder_config else None,
            "metadata": self.metadata,
            "trees": [t.to_dict() for t in self.trees],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GbdtModel":
        if d.get("format") != FORMAT:
            raise ValueError("not a serialized GBDT model")
        if d.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported model version {d.get('version')}")
        enc = d.get("encoder_config")
        return cls(
            float(d["base_score"]),
            [Tree.from_dict(t) for t in d["trees"]],
            float(d["learning_rate"]),
            d["objective"],
            tuple(FeatureDescriptor.from_dict(x) for x in d["descriptors"]),
            EncoderConfig.from_dict(enc) if enc else None,
            d.get("metadata", {}),
        )

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "GbdtModel":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _base_score(y: np.ndarray, objective: str) -> float:
    if objective == "logistic":
        p = float(np.clip(y.mean(), 1e-15, 1 - 1e-15))
        return float(np.log(p / (1 - p)))
    return float(y.mean())


def fit(X: np.ndarray, y: np.ndarray, categorical: Sequence[bool] | None, cfg: TrainConfig,
        objective: str = "squared_error", min_gain_rel: float = 1e-12) -> GbdtModel:
    """Boost ``cfg.n_trees`` trees on a raw matrix.

    Categorical columns must hold non-negative integer codes. Boosting stops
    early once the root of a new tree cannot be split, so constant labels give
    a model with no trees.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] == 0:
        raise ContractError("dataset has no feature columns")
    if len(X) == 0:
        raise ContractError("dataset has no rows")
    if objective not in ("squared_error", "logistic"):
        raise ValueError(f"unknown objective {objective!r}")
    p = X.shape[1]
    is_cat = np.zeros(p, np.bool_) if categorical is None else np.asarray(categorical, dtype=np.bool_)
    ncat = np.zeros(p, np.int64)
    for f in np.flatnonzero(is_cat):
        col = X[:, f]
        if np.isnan(col).any() or (col < 0).any():
            raise ContractError(f"categorical column {f} must hold non-negative codes")
        ncat[f] = int(col.max()) + 1
    order = np.empty((p, len(X)), np.int64)
    for f in range(p):
        order[f] = np.arange(len(X)) if is_cat[f] else np.argsort(X[:, f], kind="stable")

    base = _base_score(y, objective)
    raw = np.full(len(y), base)
    trees: list[Tree] = []
    for _ in range(cfg.n_trees):
        if objective == "logistic":
            prob = _sigmoid(raw)
            g, h = prob - y, prob * (1 - prob)
        else:
            g, h = raw - y, np.ones_like(y)
        feature, threshold, left, right, value, cat_left, node_of = _grow_tree(
            X, is_cat, ncat, order, g, h, cfg.max_depth, cfg.min_samples_leaf, min_gain_rel)
        if feature[0] < 0:
            break
        cats = {int(nd): np.flatnonzero(cat_left[nd]).astype(np.int64)
                for nd in np.flatnonzero(feature >= 0) if is_cat[feature[nd]]}
        trees.append(Tree(feature.copy(), threshold.copy(), left.copy(), right.copy(), value.copy(), cats))
        raw += cfg.learning_rate * value[node_of]
    return GbdtModel(base, trees, cfg.learning_rate, objective)


def train(dataset: EncodedDataset, cfg: TrainConfig, encoder_config: EncoderConfig | None = None,
          metadata: dict | None = None) -> GbdtModel:
    """Fit a model on an encoded dataset; the objective follows the label kind."""
    if dataset.width == 0:
        raise ContractError("dataset has no feature columns")
    objective = "logistic" if dataset.label_kind == "boolean" else "squared_error"
    model = fit(dataset.rows, dataset.labels, dataset.categorical_mask, cfg, objective)
    model.descriptors = tuple(dataset.descriptors)
    model.encoder_config = encoder_config
    model.metadata = dict(metadata or {})
    return model


def predict(model: GbdtModel, row) -> float:
    return model.predict(row)
