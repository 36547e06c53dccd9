"""Small oracles shared by several test modules."""

import itertools
from functools import lru_cache

import numpy as np

from fipscm.autograd import Tensor
from fipscm.scm import Dag


@lru_cache(maxsize=None)
def all_dags(d: int) -> tuple:
    """Every labelled DAG on d nodes (1, 3, 25, 543, 29281 for d = 1..5)."""
    pairs = [(i, j) for i in range(d) for j in range(i + 1, d)]
    seen = {}
    for bits in range(1 << len(pairs)):
        upper = np.zeros((d, d), dtype=bool)
        for k, (i, j) in enumerate(pairs):
            if bits >> k & 1:
                upper[i, j] = True
        for p in itertools.permutations(range(d)):
            p = np.array(p)
            adj = upper[np.ix_(p, p)]
            seen.setdefault(adj.tobytes(), adj)
    return tuple(Dag(a) for a in seen.values())


def id_columns(d: int, n: int = 3) -> np.ndarray:
    """Dataset whose first row spells out the original node of each column."""
    return np.tile(np.arange(d, dtype=np.float64), (n, 1))


def leaf_oracle(graphs, sign: float = 1.0, big: float = 40.0):
    """Logits +big on the true leaves of the remaining sub-graph, -big elsewhere.

    Works on id_columns data: row 0 tells which original nodes are left.
    """

    def model(xs):
        xs = np.asarray(xs)
        out = []
        for k in range(xs.shape[0]):
            ids = xs[k, 0].astype(int)
            sub = graphs[k].adj[np.ix_(ids, ids)]
            out.append(np.where(sub.any(axis=1), -big, big) * sign)
        return Tensor(np.array(out))

    return model
