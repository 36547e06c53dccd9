"""Ordering score, directed F1, re-scaled l2 and the counterfactual protocol."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import ArgumentError
from .scm import Dag, DoNode, FixedPointScm, Permutation, counterfactual, solve_fixed_point


def tos(p_hat: Permutation, g: Dag) -> float:
    """1 - (#nodes with a child ranked before them) / (d - 1).

    Matrix form: with G in parent-row layout (``adj.T``), reorder it as
    ``P Gᵀ Pᵀ`` (= ``adj`` permuted), keep the strictly-lower part and count
    rows holding at least one edge. d = 1 scores 1.0 by convention.
    """
    if p_hat.d != g.d:
        raise ArgumentError(f"ordering has {p_hat.d} nodes, graph has {g.d}")
    d = g.d
    if d == 1:
        return 1.0
    P = p_hat.matrix()
    Gp = P @ g.adj.astype(float) @ P.T
    M = np.tril(np.ones((d, d)), k=-1)
    ell = (M * Gp) @ np.ones(d)
    return 1.0 - float(np.sum(ell >= 1)) / (d - 1)


def tos_bruteforce(p_hat: Permutation, g: Dag) -> float:
    """Reference implementation by direct counting of mis-ranked nodes."""
    d = g.d
    if d == 1:
        return 1.0
    pos = p_hat.position
    bad = sum(1 for u in range(d) if any(pos[v] < pos[u] for v in g.children(u)))
    return 1.0 - bad / (d - 1)


def f1_directed(g_hat: Dag, g_true: Dag) -> float:
    if g_hat.d != g_true.d:
        raise ArgumentError("graphs differ in size")
    pred, true = g_hat.adj, g_true.adj
    n_pred, n_true = int(pred.sum()), int(true.sum())
    if n_pred == 0 and n_true == 0:
        return 1.0
    tp = int((pred & true).sum())
    if tp == 0:
        return 0.0
    precision, recall = tp / n_pred, tp / n_true
    return 2 * precision * recall / (precision + recall)


def rescaled_l2(x, x_hat, sigmas) -> np.ndarray:
    """sqrt(mean_i ((x_i - x̂_i) / σ_i)^2), row-wise for batched input."""
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if np.any(~(sigmas > 0)):
        raise ArgumentError("all sigmas must be positive")
    r = (np.asarray(x, dtype=np.float64) - np.asarray(x_hat, dtype=np.float64)) / sigmas
    return np.sqrt(np.mean(r * r, axis=-1))


def ks_distance(a, b) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup |F_a - F_b|."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == 0 or b.size == 0:
        raise ArgumentError("KS distance needs two non-empty samples")
    grid = np.concatenate([a, b])
    fa = np.searchsorted(a, grid, side="right") / a.size
    fb = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(fa - fb)))


# ------------------------------------------------------------------ report


@dataclass
class ScoreReport:
    name: str
    rows: list = field(default_factory=list)  # dicts with at least "id" and "score"
    provenance: dict = field(default_factory=dict)

    def add(self, id_, score, **extra):
        self.rows.append({"id": id_, "score": float(score), **extra})

    @property
    def scores(self) -> np.ndarray:
        return np.array([r["score"] for r in self.rows], dtype=np.float64)

    def aggregate(self) -> dict:
        s = self.scores
        if s.size == 0:
            return {"median": None, "mean": None, "std": None, "count": 0}
        return {"median": float(np.median(s)), "mean": float(np.mean(s)), "std": float(np.std(s)), "count": int(s.size)}

    def summary(self) -> str:
        a = self.aggregate()
        if not a["count"]:
            return f"{self.name}: no rows"
        return f"{self.name}: {a['median']:.3f}/{a['mean']:.3f} ({a['std']:.3f})"

    def to_json(self) -> str:
        return json.dumps({"name": self.name, "rows": self.rows, "aggregate": self.aggregate(), "provenance": self.provenance}, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        keys = sorted({k for r in self.rows for k in r}, key=lambda k: (k not in ("id", "score"), k))
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=keys or ["id", "score"])
        w.writeheader()
        for r in self.rows:
            w.writerow(r)
        return buf.getvalue()

    @classmethod
    def from_json(cls, text: str) -> "ScoreReport":
        obj = json.loads(text)
        return cls(obj["name"], obj["rows"], obj.get("provenance", {}))


# ---------------------------------------------------- counterfactual eval

# predictor(x_factual (m, d), node, value) -> counterfactuals (m, d); all in the
# SCM's original coordinates and units
Predictor = Callable[[np.ndarray, int, float], np.ndarray]


def ground_truth_predictor(scm: FixedPointScm) -> Predictor:
    def predict(x, node, value):
        return counterfactual(scm, DoNode(int(scm.perm.position[node]), value), x)

    return predict


def identity_predictor(x, node, value):
    return np.array(x, copy=True)


def cf_eval(
    scm_true: FixedPointScm,
    predictor: Predictor,
    n_interventions: Optional[int] = None,
    per_iv: int = 100,
    seed: int = 0,
    reference: Optional[np.ndarray] = None,
    name: str = "counterfactual",
) -> ScoreReport:
    """Score a predictor against exact counterfactuals of ``scm_true``.

    Each intervention picks a node k, a value uniform on [min X_k, max X_k]
    of the reference sample, and ``per_iv`` fresh factual samples. The
    σ_i of the re-scaled l2 are the reference sample's standard deviations.
    """
    rng = np.random.default_rng(seed)
    d = scm_true.d
    if reference is None:
        reference = solve_fixed_point(scm_true, scm_true.noise.sample(10_000, rng))
    sigmas = reference.std(axis=0)
    lo, hi = reference.min(axis=0), reference.max(axis=0)
    n_interventions = d if n_interventions is None else n_interventions
    report = ScoreReport(name, provenance={"seed": seed, "per_intervention": per_iv, "d": d})
    for k in range(n_interventions):
        node = int(rng.integers(d))
        value = float(rng.uniform(lo[node], hi[node]))
        x_f = solve_fixed_point(scm_true, scm_true.noise.sample(per_iv, rng))
        truth = counterfactual(scm_true, DoNode(int(scm_true.perm.position[node]), value), x_f)
        pred = predictor(x_f, node, value)
        report.add(k, float(np.mean(rescaled_l2(truth, pred, sigmas))), node=node, value=value)
    return report
