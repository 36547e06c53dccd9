"""DAGs, permutations, standard and fixed-point SCMs.

Ordering convention used everywhere in the package: a :class:`Permutation`
stores ``map`` with ``map[i]`` = original node sitting at ordered position
``i``. ``P @ x`` is therefore ``x[map]`` and parents always come before
their children in ordered space.

All arrays are batched on leading axes: a function of ``(x, n)`` takes
arrays of shape ``(..., d)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ArgumentError, CapabilityError, NumericError, OrderingError, StructureError

# ------------------------------------------------------------------ graphs


@dataclass(frozen=True, eq=False)
class Dag:
    """Boolean adjacency, ``adj[i, j]`` means edge i -> j."""

    adj: np.ndarray

    def __post_init__(self):
        adj = np.asarray(self.adj, dtype=bool)
        if adj.ndim != 2 or adj.shape[0] != adj.shape[1] or adj.shape[0] < 1:
            raise ArgumentError(f"adjacency must be square and non-empty, got {adj.shape}")
        if np.any(np.diag(adj)):
            raise StructureError("self loop in adjacency")
        adj = adj.copy()
        adj.setflags(write=False)
        object.__setattr__(self, "adj", adj)
        if kahn_order(adj) is None:
            raise StructureError("adjacency contains a directed cycle")

    @property
    def d(self) -> int:
        return self.adj.shape[0]

    @classmethod
    def empty(cls, d: int) -> "Dag":
        return cls(np.zeros((d, d), dtype=bool))

    @classmethod
    def from_edges(cls, d: int, edges) -> "Dag":
        adj = np.zeros((d, d), dtype=bool)
        for i, j in edges:
            adj[i, j] = True
        return cls(adj)

    def parents(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[:, i])

    def children(self, i: int) -> np.ndarray:
        return np.flatnonzero(self.adj[i])

    def edges(self) -> list[tuple[int, int]]:
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(self.adj))]

    @property
    def n_edges(self) -> int:
        return int(self.adj.sum())

    def leaves(self) -> np.ndarray:
        return ~self.adj.any(axis=1)

    def topological_order(self) -> "Permutation":
        return Permutation(kahn_order(self.adj))

    def is_valid_order(self, perm: "Permutation") -> bool:
        return first_violation(self, perm) is None

    def __eq__(self, other):
        return isinstance(other, Dag) and np.array_equal(self.adj, other.adj)

    def __hash__(self):
        return hash(self.adj.tobytes())

    def __repr__(self):
        return f"Dag(d={self.d}, edges={self.edges()})"


def kahn_order(adj: np.ndarray) -> Optional[np.ndarray]:
    """Kahn peeling; smallest available index first. None if cyclic."""
    adj = np.asarray(adj, dtype=bool)
    d = adj.shape[0]
    indeg = adj.sum(axis=0).astype(int)
    ready = sorted(np.flatnonzero(indeg == 0).tolist())
    order = []
    while ready:
        u = ready.pop(0)
        order.append(u)
        for v in np.flatnonzero(adj[u]):
            indeg[v] -= 1
            if indeg[v] == 0:
                ready.append(int(v))
        ready.sort()
    if len(order) != d:
        return None
    return np.array(order, dtype=int)


@dataclass(frozen=True, eq=False)
class Permutation:
    map: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.map, dtype=int).reshape(-1)
        if not np.array_equal(np.sort(m), np.arange(m.size)):
            raise ArgumentError(f"not a permutation of 0..{m.size - 1}: {m.tolist()}")
        m = m.copy()
        m.setflags(write=False)
        object.__setattr__(self, "map", m)

    @property
    def d(self) -> int:
        return self.map.size

    @classmethod
    def identity(cls, d: int) -> "Permutation":
        return cls(np.arange(d))

    @property
    def position(self) -> np.ndarray:
        """``position[node]`` = ordered index of original ``node``."""
        pos = np.empty_like(self.map)
        pos[self.map] = np.arange(self.d)
        return pos

    def matrix(self) -> np.ndarray:
        P = np.zeros((self.d, self.d))
        P[np.arange(self.d), self.map] = 1.0
        return P

    def to_ordered(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., self.map]

    def to_original(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z)[..., self.position]

    def __eq__(self, other):
        return isinstance(other, Permutation) and np.array_equal(self.map, other.map)

    def __hash__(self):
        return hash(self.map.tobytes())

    def __repr__(self):
        return f"Permutation({self.map.tolist()})"


def first_violation(dag: Dag, perm: Permutation) -> Optional[tuple[int, int]]:
    if dag.d != perm.d:
        raise ArgumentError(f"graph has {dag.d} nodes, permutation has {perm.d}")
    pos = perm.position
    for i, j in dag.edges():
        if pos[i] >= pos[j]:
            return (i, j)
    return None


# ------------------------------------------------------------------- noise


@dataclass(frozen=True)
class Gaussian:
    mu: float = 0.0
    sigma: float = 1.0

    def __post_init__(self):
        if not self.sigma > 0:
            raise ArgumentError("Gaussian sigma must be positive")

    def sample(self, rng, size):
        return rng.normal(self.mu, self.sigma, size)


@dataclass(frozen=True)
class Laplace:
    mu: float = 0.0
    b: float = 1.0

    def __post_init__(self):
        if not self.b > 0:
            raise ArgumentError("Laplace scale must be positive")

    def sample(self, rng, size):
        return rng.laplace(self.mu, self.b, size)


@dataclass(frozen=True, eq=False)
class EmpiricalQuantile:
    """Quantile function of an empirical law, linear between order statistics.

    ``q(u)`` evaluates the piecewise-linear interpolant through
    ``(k / (m - 1), s_k)`` for the ``m`` sorted samples ``s``. So ``q(0)`` is
    the minimum, ``q(1)`` the maximum and ``q(0.5)`` the lower-midpoint
    median for odd ``m``.
    """

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if s.size == 0:
            raise ArgumentError("empirical quantile needs at least one sample")
        if np.any(np.diff(s) < 0):
            raise ArgumentError("empirical quantile samples must be sorted ascending")
        s = s.copy()
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)

    def __call__(self, u):
        s = self.samples
        if s.size == 1:
            return np.full(np.shape(u), s[0])
        grid = np.linspace(0.0, 1.0, s.size)
        return np.interp(np.clip(u, 0.0, 1.0), grid, s)

    def sample(self, rng, size):
        return self(rng.uniform(0.0, 1.0, size))


NoiseDist = Union[Gaussian, Laplace, EmpiricalQuantile]


@dataclass(frozen=True)
class NoiseModel:
    """Product of independent per-node marginals, indexed by original node."""

    marginals: tuple
    scale_fn: Optional[Callable] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "marginals", tuple(self.marginals))
        if not self.marginals:
            raise ArgumentError("noise model needs at least one node")

    @property
    def d(self) -> int:
        return len(self.marginals)

    @classmethod
    def gaussian(cls, d: int, sigma: float = 1.0) -> "NoiseModel":
        return cls(tuple(Gaussian(0.0, sigma) for _ in range(d)))

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        # column by column so that each node draws from its own stream position
        return np.stack([m.sample(rng, n) for m in self.marginals], axis=1)


# ------------------------------------------------------ structured functions


def fd_jacobians(fn: Callable, x: np.ndarray, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of ``fn(x, n)`` w.r.t. x and n.

    Inputs have shape (m, d); outputs have shape (m, d, d) with
    ``J[b, i, j] = d fn_i / d arg_j``. Step is ``1e-5 * (1 + |arg_j|)``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = np.atleast_2d(np.asarray(n, dtype=np.float64))
    m, d = x.shape
    jacs = []
    for which in (0, 1):
        base = (x, n)[which]
        J = np.empty((m, d, d))
        for j in range(d):
            h = 1e-5 * (1.0 + np.abs(base[:, j]))
            plus, minus = base.copy(), base.copy()
            plus[:, j] += h
            minus[:, j] -= h
            if which == 0:
                fp, fm = fn(plus, n), fn(minus, n)
            else:
                fp, fm = fn(x, plus), fn(x, minus)
            J[:, :, j] = (fp - fm) / (2 * h)[:, None]
        jacs.append(J)
    return jacs[0], jacs[1]


@dataclass(frozen=True)
class StructuredFn:
    """A map H(x, n) on ordered space meant to live in F_d.

    ``jac1`` (optional) returns the analytic Jacobian w.r.t. x, batched.
    ``abduct`` (optional) maps an ordered observation back to its noise.
    ``additive`` marks H(x, n) = H(x, 0) + n, which makes abduction free.
    """

    d: int
    fn: Callable[[np.ndarray, np.ndarray], np.ndarray]
    jac1: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None
    abduct: Optional[Callable[[np.ndarray], np.ndarray]] = None
    additive: bool = False

    def __call__(self, x, n):
        return self.fn(x, n)

    def jacobians(self, x, n, analytic: bool = True):
        J1, J2 = fd_jacobians(self.fn, x, n)
        if analytic and self.jac1 is not None:
            J1 = self.jac1(np.atleast_2d(x), np.atleast_2d(n))
        return J1, J2

    def noise_of(self, z: np.ndarray) -> np.ndarray:
        if self.abduct is not None:
            return self.abduct(z)
        if self.additive:
            return z - self.fn(z, np.zeros_like(z))
        raise CapabilityError("this structured function does not support noise abduction")


def condition1_violation(h: StructuredFn, x: np.ndarray, n: np.ndarray, jac2_rule: str = "diagonal") -> tuple[float, float]:
    """Largest forbidden Jacobian entries (x-part, n-part) over the probes.

    x-part: entries on or above the diagonal. n-part: off-diagonal entries
    (``jac2_rule="diagonal"``) or strictly-upper entries (``"lower"``).
    """
    J1, J2 = h.jacobians(x, n)
    d = h.d
    upper_incl = np.triu(np.ones((d, d), dtype=bool))
    if jac2_rule == "diagonal":
        forbid2 = ~np.eye(d, dtype=bool)
    else:
        forbid2 = np.triu(np.ones((d, d), dtype=bool), k=1)
    v1 = float(np.max(np.abs(J1[:, upper_incl]), initial=0.0))
    v2 = float(np.max(np.abs(J2[:, forbid2]), initial=0.0))
    return v1, v2


def _probe_points(d: int, count: int = 8, seed: int = 12345):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(count, d)), rng.normal(size=(count, d))


def check_condition1(h: StructuredFn, tol: Optional[float] = None, probes=None, jac2_rule: str = "diagonal"):
    if probes is None:
        probes = _probe_points(h.d)
    x, n = probes
    if tol is None:
        tol = 1e-6 if h.jac1 is not None else 1e-4
    v1, v2 = condition1_violation(h, x, n, jac2_rule)
    # n-part is always finite differences
    tol2 = max(tol, 1e-4)
    if v1 > tol or v2 > tol2:
        raise StructureError(f"map violates the triangular structure: |Jac_x| forbidden max {v1:.3g}, |Jac_n| forbidden max {v2:.3g}")


# ------------------------------------------------------------------- SCMs


@dataclass(frozen=True, eq=False)
class FixedPointScm:
    perm: Permutation
    h: StructuredFn
    noise: NoiseModel
    check: bool = True
    jac2_rule: str = "diagonal"

    def __post_init__(self):
        if not (self.perm.d == self.h.d == self.noise.d):
            raise ArgumentError(f"dimension mismatch: perm {self.perm.d}, h {self.h.d}, noise {self.noise.d}")
        if self.check:
            check_condition1(self.h, jac2_rule=self.jac2_rule)

    @property
    def d(self) -> int:
        return self.perm.d

    def original_map(self, x: np.ndarray, n: np.ndarray) -> np.ndarray:
        """Pᵀ H(P x, P n) in original coordinates."""
        return self.perm.to_original(self.h(self.perm.to_ordered(x), self.perm.to_ordered(n)))


def solve_ordered(h: Callable, n_ord: np.ndarray, d: int, start: Optional[np.ndarray] = None) -> np.ndarray:
    """Apply z -> h(z, n) exactly d times starting from ``start`` (default 0)."""
    z = np.zeros_like(n_ord) if start is None else np.array(start, dtype=np.float64)
    for it in range(d):
        z = h(z, n_ord)
        if np.isnan(z).any():
            raise NumericError(f"NaN in fixed-point iteration {it}", step=it)
    return z


def solve_fixed_point(scm: FixedPointScm, n: np.ndarray) -> np.ndarray:
    n = np.asarray(n, dtype=np.float64)
    if n.shape[-1] != scm.d:
        raise ArgumentError(f"noise has length {n.shape[-1]}, SCM has d={scm.d}")
    z = solve_ordered(scm.h, scm.perm.to_ordered(n), scm.d)
    return scm.perm.to_original(z)


def sample_observational(scm: FixedPointScm, n_samples: int, seed: int):
    from .dataset import Dataset

    if n_samples < 1:
        raise ArgumentError("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    noise = scm.noise.sample(n_samples, rng)
    try:
        x = solve_fixed_point(scm, noise)
    except NumericError as err:
        z = scm.perm.to_ordered(noise) * 0.0
        nz = scm.perm.to_ordered(noise)
        with np.errstate(all="ignore"):
            for _ in range(scm.d):
                z = scm.h(z, nz)
        rows = np.flatnonzero(np.isnan(z).any(axis=1)).tolist()
        raise NumericError(f"{err} (rows {rows[:5]})", step=err.step) from err
    return Dataset(x=x, noise=noise, perm=scm.perm, meta={"seed": seed, "source": "fixed_point_scm"})


# --- mechanisms of standard SCMs


@dataclass(frozen=True, eq=False)
class LinearMechanism:
    """x_i = sum_k w_k pa_k + n_i."""

    weights: np.ndarray

    def __call__(self, pa, n):
        w = np.asarray(self.weights)
        return (pa @ w if w.size else 0.0) + n

    def grad(self, pa, n):
        return np.broadcast_to(np.asarray(self.weights), pa.shape)

    def noise_inverse(self, pa, x):
        w = np.asarray(self.weights)
        return x - (pa @ w if w.size else 0.0)


@dataclass(frozen=True, eq=False)
class FunctionMechanism:
    """Wraps an arbitrary callable f(pa, n) (no analytic gradient)."""

    f: Callable
    inverse: Optional[Callable] = None

    def __call__(self, pa, n):
        return self.f(pa, n)

    def noise_inverse(self, pa, x):
        if self.inverse is None:
            raise CapabilityError("mechanism has no noise inverse")
        return self.inverse(pa, x)


@dataclass(frozen=True, eq=False)
class StandardScm:
    dag: Dag
    mechanisms: tuple
    noise: NoiseModel

    def __post_init__(self):
        object.__setattr__(self, "mechanisms", tuple(self.mechanisms))
        if len(self.mechanisms) != self.dag.d or self.noise.d != self.dag.d:
            raise ArgumentError("one mechanism and one noise marginal per node required")
        for i, m in enumerate(self.mechanisms):
            w = getattr(m, "weights", None)
            if w is not None and np.size(w) != self.dag.parents(i).size:
                raise ArgumentError(f"mechanism {i} has {np.size(w)} weights for {self.dag.parents(i).size} parents")

    @property
    def d(self) -> int:
        return self.dag.d

    def solve(self, noise: np.ndarray) -> np.ndarray:
        """Ancestral evaluation for given noise, batched over rows."""
        noise = np.asarray(noise, dtype=np.float64)
        x = np.zeros_like(noise)
        for i in self.dag.topological_order().map:
            pa = self.dag.parents(i)
            x[..., i] = self.mechanisms[i](x[..., pa], noise[..., i])
        return x

    def sample(self, n_samples: int, rng: np.random.Generator):
        noise = self.noise.sample(n_samples, rng)
        return self.solve(noise), noise


def reparameterize_standard(std: StandardScm, perm: Permutation, check: bool = True) -> FixedPointScm:
    bad = first_violation(std.dag, perm)
    if bad is not None:
        raise OrderingError(f"permutation is not a topological order: edge {bad[0]}->{bad[1]} has the child first", edge=bad)
    d = std.d
    order = perm.map
    pos = perm.position
    parents = [std.dag.parents(int(order[i])) for i in range(d)]
    mechs = [std.mechanisms[int(order[i])] for i in range(d)]

    def fn(z, m):
        z = np.asarray(z, dtype=np.float64)
        x = z[..., pos]  # Pᵀ z
        out = np.empty(np.broadcast_shapes(z.shape, np.shape(m)))
        for i in range(d):
            out[..., i] = mechs[i](x[..., parents[i]], np.asarray(m)[..., i])
        return out

    jac1 = None
    if all(hasattr(mk, "grad") for mk in mechs):

        def jac1(z, m):
            x = z[..., pos]
            J = np.zeros(z.shape + (d,))
            for i in range(d):
                if parents[i].size:
                    J[..., i, pos[parents[i]]] = mechs[i].grad(x[..., parents[i]], m[..., i])
            return J

    abduct = None
    if all(hasattr(mk, "noise_inverse") for mk in mechs):

        def abduct(z):
            x = z[..., pos]
            out = np.empty_like(z)
            for i in range(d):
                out[..., i] = mechs[i].noise_inverse(x[..., parents[i]], z[..., i])
            return out

    additive = all(isinstance(mk, LinearMechanism) or getattr(mk, "additive", False) for mk in mechs)
    h = StructuredFn(d, fn, jac1=jac1, abduct=abduct, additive=additive)
    return FixedPointScm(perm, h, std.noise, check=check)


def linear_fixed_point_scm(A: np.ndarray, perm: Optional[Permutation] = None, noise: Optional[NoiseModel] = None) -> FixedPointScm:
    """H(z, n) = A z + n on ordered space with A strictly lower triangular."""
    A = np.asarray(A, dtype=np.float64)
    d = A.shape[0]
    perm = perm or Permutation.identity(d)
    noise = noise or NoiseModel.gaussian(d)
    h = StructuredFn(
        d,
        lambda z, n: z @ A.T + n,
        jac1=lambda z, n: np.broadcast_to(A, np.shape(z) + (d,)).copy(),
        additive=True,
    )
    return FixedPointScm(perm, h, noise)


def causal_graph_of(scm: FixedPointScm, probes=None, tol: float = 1e-3, n_probes: int = 32, seed: int = 0) -> Dag:
    """Edge j -> i iff max over probes |d [Pᵀ H(Px, Pn)]_i / d x_j| > tol."""
    if probes is None:
        rng = np.random.default_rng(seed)
        n = scm.noise.sample(n_probes, rng)
        x = solve_fixed_point(scm, n)
    else:
        x, n = (np.atleast_2d(np.asarray(a, dtype=np.float64)) for a in probes)
    if x.shape[0] < 1:
        raise ArgumentError("need at least one probe point")
    J1, _ = scm.h.jacobians(scm.perm.to_ordered(x), scm.perm.to_ordered(n))
    strength = np.max(np.abs(J1), axis=0)  # ordered (child, parent)
    pos = scm.perm.position
    orig = strength[np.ix_(pos, pos)]  # orig[i, j] = |d x_i / d x_j|
    return Dag(orig.T > tol)


# ----------------------------------------------------------- interventions


@dataclass(frozen=True)
class DoNode:
    """do([P X]_index = value), index in ordered space."""

    index: int
    value: float


@dataclass(frozen=True, eq=False)
class LowerTriangular:
    fn: Callable[[np.ndarray], np.ndarray]
    is_identity: bool = False


IDENTITY = LowerTriangular(lambda y: y, is_identity=True)

InterventionMap = Union[DoNode, LowerTriangular]


def _check_lower_triangular(t: LowerTriangular, d: int, tol: float = 1e-6):
    x, _ = _probe_points(d, 4, seed=777)
    for k in range(d):
        h = 1e-5 * (1 + np.abs(x[:, k]))
        xp, xm = x.copy(), x.copy()
        xp[:, k] += h
        xm[:, k] -= h
        col = (t.fn(xp) - t.fn(xm)) / (2 * h)[:, None]
        if np.max(np.abs(col[:, :k]), initial=0.0) > tol:
            raise StructureError(f"intervention map is not lower triangular (output rows < {k} depend on input {k})")


def intervened_fn(h: StructuredFn, t: InterventionMap) -> StructuredFn:
    d = h.d
    if isinstance(t, DoNode):
        i = int(t.index)
        if not 0 <= i < d:
            raise ArgumentError(f"intervention index {i} out of range for d={d}")
        a = float(t.value)

        def fn(z, n):
            out = np.array(h(z, n), dtype=np.float64)
            out[..., i] = a
            return out

        jac1 = None
        if h.jac1 is not None:

            def jac1(z, n):
                J = np.array(h.jac1(z, n))
                J[..., i, :] = 0.0
                return J

        return StructuredFn(d, fn, jac1=jac1)
    if isinstance(t, LowerTriangular):
        if t.is_identity:
            return h
        _check_lower_triangular(t, d)
        return StructuredFn(d, lambda z, n: t.fn(h(z, n)))
    raise ArgumentError(f"unknown intervention {t!r}")


def intervene(scm: FixedPointScm, t: InterventionMap) -> FixedPointScm:
    # a general lower-triangular T mixes noise coordinates downward, so the
    # n-Jacobian of T∘H is only lower triangular; do-interventions keep it diagonal
    rule = "diagonal" if isinstance(t, DoNode) or getattr(t, "is_identity", False) else "lower"
    return FixedPointScm(scm.perm, intervened_fn(scm.h, t), scm.noise, jac2_rule=rule)


def counterfactual(scm: FixedPointScm, t: InterventionMap, x_factual: np.ndarray) -> np.ndarray:
    """Abduct the noise of ``x_factual`` then re-solve under T∘H."""
    x = np.asarray(x_factual, dtype=np.float64)
    if x.shape[-1] != scm.d:
        raise ArgumentError(f"factual has length {x.shape[-1]}, SCM has d={scm.d}")
    z = scm.perm.to_ordered(x)
    n_hat = scm.h.noise_of(z)
    h_t = intervened_fn(scm.h, t)
    return scm.perm.to_original(solve_ordered(h_t, n_hat, scm.d))


# ------------------------------------------------------------ ANM oracle


def ols_anm_oracle(x: np.ndarray, perm: Permutation) -> np.ndarray:
    """Per-node least squares on the preceding ordered nodes.

    Returns ``W`` in original coordinates with ``W[j, i]`` the coefficient
    of parent candidate j in the regression of node i (with intercept).
    Under a linear ANM with a valid order this is the conditional
    expectation, which is the unique additive mechanism.
    """
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    W = np.zeros((d, d))
    for k in range(1, d):
        target = int(perm.map[k])
        preds = perm.map[:k]
        design = np.column_stack([x[:, preds], np.ones(n)])
        coef, *_ = np.linalg.lstsq(design, x[:, target], rcond=None)
        W[preds, target] = coef[:-1]
    return W
