"""Random SCM and dataset factory (in- and out-of-distribution families)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Union

import networkx as nx
import numpy as np

from .dataset import Dataset
from .errors import ConfigError
from .scm import (
    Dag,
    FunctionMechanism,
    Gaussian,
    Laplace,
    LinearMechanism,
    NoiseModel,
    Permutation,
    StandardScm,
)

# --------------------------------------------------------------- graphs


@dataclass(frozen=True)
class ErdosRenyi:
    p: Optional[float] = None
    expected_edges_per_node: Optional[float] = 2.0
    min_edges: int = 0
    tag: str = "er"


@dataclass(frozen=True)
class ScaleFree:
    m: int = 2
    tag: str = "sf"


@dataclass(frozen=True)
class WattsStrogatz:
    k: int = 2
    rewire: float = 0.3
    tag: str = "ws"


@dataclass(frozen=True)
class StochasticBlock:
    blocks: int = 2
    p_in: float = 0.6
    p_out: float = 0.1
    tag: str = "sbm"


@dataclass(frozen=True)
class Chain:
    tag: str = "chain"


GraphFamily = Union[ErdosRenyi, ScaleFree, WattsStrogatz, StochasticBlock, Chain]


def _undirected_edges(family: GraphFamily, d: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    nx_seed = int(rng.integers(2**31 - 1))
    if isinstance(family, ErdosRenyi):
        p = family.p
        if p is None:
            if family.expected_edges_per_node is None:
                raise ConfigError("ErdosRenyi needs p or expected_edges_per_node")
            p = min(1.0, 2.0 * family.expected_edges_per_node / max(d - 1, 1))
        if not 0.0 <= p <= 1.0:
            raise ConfigError(f"ErdosRenyi edge probability {p} outside [0, 1]")
        if p == 0.0 and family.min_edges > 0:
            raise ConfigError("ErdosRenyi with p=0 cannot produce the required minimum edges")
        iu = np.triu_indices(d, k=1)
        keep = rng.uniform(size=iu[0].size) < p
        return list(zip(iu[0][keep].tolist(), iu[1][keep].tolist()))
    if isinstance(family, ScaleFree):
        if not 1 <= family.m < d:
            raise ConfigError(f"scale-free attachment m={family.m} needs 1 <= m < d={d}")
        g = nx.barabasi_albert_graph(d, family.m, seed=nx_seed)
    elif isinstance(family, WattsStrogatz):
        if not 0 <= family.k < d:
            raise ConfigError(f"Watts-Strogatz k={family.k} needs 0 <= k < d={d}")
        g = nx.watts_strogatz_graph(d, family.k, family.rewire, seed=nx_seed)
    elif isinstance(family, StochasticBlock):
        b = max(1, min(family.blocks, d))
        sizes = [d // b + (1 if i < d % b else 0) for i in range(b)]
        probs = [[family.p_in if i == j else family.p_out for j in range(b)] for i in range(b)]
        g = nx.stochastic_block_model(sizes, probs, seed=nx_seed)
    elif isinstance(family, Chain):
        return [(i, i + 1) for i in range(d - 1)]
    else:
        raise ConfigError(f"unknown graph family {family!r}")
    return [(min(u, v), max(u, v)) for u, v in g.edges()]


def sample_graph(family: GraphFamily, d: int, rng: np.random.Generator) -> tuple[Dag, Permutation]:
    """Sample undirected structure, relabel nodes at random, orient low -> high."""
    edges = _undirected_edges(family, d, rng)
    label = rng.permutation(d)  # structural vertex v becomes node label[v]
    adj = np.zeros((d, d), dtype=bool)
    for u, v in edges:
        adj[label[u], label[v]] = True
    # orientation follows structural index, so label[0..d-1] is a valid order
    return Dag(adj), Permutation(label)


# ----------------------------------------------------------- mechanisms


@dataclass(frozen=True)
class Linear:
    w_lo: float = 0.5
    w_hi: float = 2.0
    flip_prob: float = 0.5
    tag: str = "linear"

    def __post_init__(self):
        if not 0 < self.w_lo <= self.w_hi:
            raise ConfigError("linear weight range needs 0 < lo <= hi")


@dataclass(frozen=True)
class Rff:
    n_features: int = 64
    ls_lo: float = 1.0
    ls_hi: float = 2.0
    out_lo: float = 1.0
    out_hi: float = 2.0
    tag: str = "rff"

    def __post_init__(self):
        if self.n_features < 1:
            raise ConfigError("RFF needs at least one feature")


MechanismFamily = Union[Linear, Rff]


@dataclass(frozen=True)
class GaussianNoise:
    sigma_lo: float = 1.0
    sigma_hi: float = 1.0
    tag: str = "gaussian"


@dataclass(frozen=True)
class HeteroLaplaceNoise:
    """Unit Laplace noise scaled by clip(softplus(0.5 + v·pa), lo, hi)."""

    clip_lo: float = 0.2
    clip_hi: float = 3.0
    v_scale: float = 0.5
    tag: str = "laplace-hetero"


NoiseFamily = Union[GaussianNoise, HeteroLaplaceNoise]


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    return np.exp(-np.logaddexp(0.0, -z))


@dataclass(frozen=True, eq=False)
class RffMechanism:
    """f(pa) = sum_k a_k cos(<omega_k, pa> + b_k), plus (scaled) noise."""

    omega: np.ndarray  # (K, k_pa)
    phase: np.ndarray  # (K,)
    amp: np.ndarray  # (K,)
    hetero: Optional[np.ndarray] = None  # v for the noise scale, (k_pa,)
    clip: tuple = (0.2, 3.0)

    @property
    def additive(self):
        return self.hetero is None

    def mean(self, pa):
        if self.omega.shape[1] == 0:
            return np.zeros(pa.shape[:-1])
        return np.cos(pa @ self.omega.T + self.phase) @ self.amp

    def mean_grad(self, pa):
        if self.omega.shape[1] == 0:
            return np.zeros(pa.shape)
        return (-np.sin(pa @ self.omega.T + self.phase) * self.amp) @ self.omega

    def __call__(self, pa, n):
        return self.mean(pa) + _scale(self.hetero, self.clip, pa) * n

    def grad(self, pa, n):
        return self.mean_grad(pa) + _scale_grad(self.hetero, self.clip, pa) * np.asarray(n)[..., None]

    def noise_inverse(self, pa, x):
        return (x - self.mean(pa)) / _scale(self.hetero, self.clip, pa)

    def to_json(self):
        return {
            "kind": "rff",
            "omega": self.omega.tolist(),
            "phase": self.phase.tolist(),
            "amp": self.amp.tolist(),
            "hetero": None if self.hetero is None else self.hetero.tolist(),
            "clip": list(self.clip),
        }


@dataclass(frozen=True, eq=False)
class HeteroLinearMechanism:
    weights: np.ndarray
    hetero: np.ndarray
    clip: tuple = (0.2, 3.0)
    additive = False

    def __call__(self, pa, n):
        return (pa @ self.weights if self.weights.size else 0.0) + _scale(self.hetero, self.clip, pa) * n

    def grad(self, pa, n):
        return np.broadcast_to(self.weights, pa.shape) + _scale_grad(self.hetero, self.clip, pa) * np.asarray(n)[..., None]

    def noise_inverse(self, pa, x):
        return (x - (pa @ self.weights if self.weights.size else 0.0)) / _scale(self.hetero, self.clip, pa)

    def to_json(self):
        return {"kind": "linear", "weights": self.weights.tolist(), "hetero": self.hetero.tolist(), "clip": list(self.clip)}


def _scale(v, clip, pa):
    if v is None:
        return 1.0
    z = 0.5 + (pa @ v if v.size else np.zeros(pa.shape[:-1]))
    return np.clip(_softplus(z), *clip)


def _scale_grad(v, clip, pa):
    if v is None or v.size == 0:
        return np.zeros(pa.shape)
    z = 0.5 + pa @ v
    s = _softplus(z)
    inside = (s > clip[0]) & (s < clip[1])
    return (inside * _sigmoid(z))[..., None] * v


def _linear_to_json(m: LinearMechanism):
    return {"kind": "linear", "weights": np.asarray(m.weights).tolist(), "hetero": None}


def mechanism_to_json(m) -> dict:
    if isinstance(m, LinearMechanism):
        return _linear_to_json(m)
    return m.to_json()


def mechanism_from_json(obj: dict):
    hetero = None if obj.get("hetero") is None else np.asarray(obj["hetero"], dtype=np.float64)
    clip = tuple(obj.get("clip", (0.2, 3.0)))
    if obj["kind"] == "linear":
        w = np.asarray(obj["weights"], dtype=np.float64)
        return LinearMechanism(w) if hetero is None else HeteroLinearMechanism(w, hetero, clip)
    if obj["kind"] == "rff":
        om = np.asarray(obj["omega"], dtype=np.float64)
        if om.ndim == 1:
            om = om.reshape(len(obj["phase"]), 0)
        return RffMechanism(om, np.asarray(obj["phase"], dtype=np.float64), np.asarray(obj["amp"], dtype=np.float64), hetero, clip)
    raise ConfigError(f"unknown mechanism kind {obj['kind']!r}")


# --------------------------------------------------------- distributions


@dataclass(frozen=True)
class ScmDistributionSpec:
    graphs: tuple
    mech: MechanismFamily
    noise: NoiseFamily
    d: int
    name: str = "custom"

    def with_graph(self, g: GraphFamily) -> "ScmDistributionSpec":
        return ScmDistributionSpec((g,), self.mech, self.noise, self.d, self.name)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "d": self.d,
            "graphs": [asdict(g) for g in self.graphs],
            "mech": asdict(self.mech),
            "noise": asdict(self.noise),
        }


# Parameter ranges are declared defaults, IN and OUT deliberately disjoint.
IN_GRAPHS = (ErdosRenyi(expected_edges_per_node=2.0), ScaleFree(m=2))
OUT_GRAPHS = (WattsStrogatz(k=2, rewire=0.3), StochasticBlock(blocks=2, p_in=0.6, p_out=0.1))
LIN_IN = Linear(0.5, 2.0)
LIN_OUT = Linear(2.0, 4.0)
RFF_IN = Rff(64, ls_lo=1.0, ls_hi=2.0, out_lo=1.0, out_hi=2.0)
RFF_OUT = Rff(64, ls_lo=0.5, ls_hi=1.0, out_lo=2.0, out_hi=3.0)

PRESETS = {
    "LIN-IN": (IN_GRAPHS, LIN_IN, GaussianNoise()),
    "RFF-IN": (IN_GRAPHS, RFF_IN, GaussianNoise()),
    "LIN-OUT": (OUT_GRAPHS, LIN_OUT, HeteroLaplaceNoise()),
    "RFF-OUT": (OUT_GRAPHS, RFF_OUT, HeteroLaplaceNoise()),
    # dense ER and chains for ordering-model training; best kept unstandardized
    "LIN-TO": ((ErdosRenyi(p=0.5), Chain()), LIN_IN, GaussianNoise()),
}


def preset(name: str, d: int) -> ScmDistributionSpec:
    try:
        graphs, mech, noise = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return ScmDistributionSpec(graphs, mech, noise, d, name)


@dataclass(frozen=True, eq=False)
class SampledScm:
    scm: StandardScm
    dag: Dag
    perm: Permutation
    info: dict = field(default_factory=dict)


def _sample_mechanism(mech: MechanismFamily, noise: NoiseFamily, k: int, rng: np.random.Generator):
    hetero = None
    if isinstance(noise, HeteroLaplaceNoise):
        hetero = rng.normal(0.0, noise.v_scale, k)
    clip = (getattr(noise, "clip_lo", 0.2), getattr(noise, "clip_hi", 3.0))
    if isinstance(mech, Linear):
        w = rng.uniform(mech.w_lo, mech.w_hi, k) * np.where(rng.uniform(size=k) < mech.flip_prob, -1.0, 1.0)
        return LinearMechanism(w) if hetero is None else HeteroLinearMechanism(w, hetero, clip)
    if isinstance(mech, Rff):
        K = mech.n_features
        ls = rng.uniform(mech.ls_lo, mech.ls_hi)
        c = rng.uniform(mech.out_lo, mech.out_hi)
        omega = rng.normal(0.0, 1.0 / ls, (K, k))
        phase = rng.uniform(0.0, 2 * np.pi, K)
        amp = rng.normal(0.0, 1.0, K) * c * np.sqrt(2.0 / K)
        return RffMechanism(omega, phase, amp, hetero, clip)
    raise ConfigError(f"unknown mechanism family {mech!r}")


def _noise_model(noise: NoiseFamily, d: int, rng) -> NoiseModel:
    if isinstance(noise, GaussianNoise):
        return NoiseModel(tuple(Gaussian(0.0, rng.uniform(noise.sigma_lo, noise.sigma_hi)) for _ in range(d)))
    if isinstance(noise, HeteroLaplaceNoise):
        return NoiseModel(tuple(Laplace(0.0, 1.0) for _ in range(d)))
    raise ConfigError(f"unknown noise family {noise!r}")


def noise_model_to_json(nm: NoiseModel) -> list:
    out = []
    for m in nm.marginals:
        if isinstance(m, Gaussian):
            out.append({"kind": "gaussian", "mu": m.mu, "sigma": m.sigma})
        elif isinstance(m, Laplace):
            out.append({"kind": "laplace", "mu": m.mu, "b": m.b})
        else:
            out.append({"kind": "empirical", "samples": np.asarray(m.samples).tolist()})
    return out


def noise_model_from_json(obj: list) -> NoiseModel:
    from .scm import EmpiricalQuantile

    out = []
    for m in obj:
        if m["kind"] == "gaussian":
            out.append(Gaussian(m["mu"], m["sigma"]))
        elif m["kind"] == "laplace":
            out.append(Laplace(m["mu"], m["b"]))
        else:
            out.append(EmpiricalQuantile(np.asarray(m["samples"])))
    return NoiseModel(tuple(out))


def sample_scm(spec: ScmDistributionSpec, seed) -> SampledScm:
    if spec.d < 2:
        raise ConfigError("SCM sampling needs d >= 2")
    rng = np.random.default_rng(seed)
    family = spec.graphs[int(rng.integers(len(spec.graphs)))] if len(spec.graphs) > 1 else spec.graphs[0]
    dag, perm = sample_graph(family, spec.d, rng)
    mechs = tuple(_sample_mechanism(spec.mech, spec.noise, dag.parents(i).size, rng) for i in range(spec.d))
    noise = _noise_model(spec.noise, spec.d, rng)
    info = {
        "preset": spec.name,
        "graph": family.tag,
        "mechanism": spec.mech.tag,
        "noise": spec.noise.tag,
        "mechanisms": [mechanism_to_json(m) for m in mechs],
        "noise_model": noise_model_to_json(noise),
    }
    return SampledScm(StandardScm(dag, mechs, noise), dag, perm, info)


def scm_from_info(dag: Dag, info: dict) -> StandardScm:
    """Rebuild the simulator recorded in a dataset's metadata."""
    if "mechanisms" not in info or "noise_model" not in info:
        raise ConfigError("dataset metadata carries no mechanism record")
    mechs = tuple(mechanism_from_json(m) for m in info["mechanisms"])
    return StandardScm(dag, mechs, noise_model_from_json(info["noise_model"]))


def generate(spec: ScmDistributionSpec, n_samples: int, seed, standardize: bool = True) -> tuple[Dataset, SampledScm]:
    ss = np.random.SeedSequence(seed)
    scm_seed, data_seed = ss.spawn(2)
    sampled = sample_scm(spec, scm_seed)
    rng = np.random.default_rng(data_seed)
    x, noise = sampled.scm.sample(n_samples, rng)
    meta = dict(sampled.info)
    meta["seed"] = seed if isinstance(seed, int) else None
    ds = Dataset(x=x, noise=noise, dag=sampled.dag, perm=sampled.perm, meta=meta)
    if standardize:
        ds = ds.standardized()
    return ds, sampled


def generate_dataset(spec: ScmDistributionSpec, n_samples: int, seed, standardize: bool = True) -> Dataset:
    return generate(spec, n_samples, seed, standardize)[0]


def make_metadataset(preset_name: str, dims, count: int, seed: int, n_samples: int = 1000, standardize: bool = True):
    """Datasets for every (dim, graph family, replicate); returns (datasets, manifest entries)."""
    dims = list(dims)
    if not dims:
        raise ConfigError("dims must be non-empty")
    root = np.random.SeedSequence(seed)
    datasets, entries = [], []
    for d in dims:
        base = preset(preset_name, d)
        for g in base.graphs:
            spec = base.with_graph(g)
            for r in range(count):
                child = int(root.spawn(1)[0].generate_state(1)[0])
                ds = generate_dataset(spec, n_samples, child, standardize)
                name = f"{preset_name}_d{d}_{g.tag}_{r:03d}"
                datasets.append(ds)
                entries.append({"name": name, "preset": preset_name, "d": d, "graph": g.tag, "replicate": r, "seed": child, "n": n_samples})
    return datasets, entries
