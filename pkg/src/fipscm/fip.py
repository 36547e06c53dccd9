"""Causal-attention transformer for fixed-point SCMs (additive-noise head).

All model computations run on standardized data in ordered space
(parents first). :class:`FipModel` carries the permutation and the
standardization record so callers can work in original coordinates.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_container, save_container
from .dataset import Dataset, Standardization
from .errors import ArgumentError, NumericError
from .scm import (
    Dag,
    DoNode,
    EmpiricalQuantile,
    FixedPointScm,
    InterventionMap,
    LowerTriangular,
    NoiseModel,
    Permutation,
    StructuredFn,
    intervened_fn,
    solve_ordered,
)

log = logging.getLogger(__name__)

MAGIC = b"FIPCKPT1"


@dataclass
class FipConfig:
    d: int
    D: int = 128
    L: int = 2
    heads: int = 8
    d_head: int = 32
    hidden: int = 128
    tau: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 5e-9
    epochs: int = 100
    batch_size: Optional[int] = None  # None -> min(1024, 0.8 n)
    patience: Optional[int] = None
    init_std: float = 1.0
    lr_final: Optional[float] = None  # cosine decay to this lr when set

    def __post_init__(self):
        for name in ("d", "D", "L", "heads", "d_head", "hidden", "epochs"):
            if getattr(self, name) < (0 if name == "epochs" else 1):
                raise ArgumentError(f"FipConfig.{name} must be positive")


# ---------------------------------------------------------------- params


def param_names(cfg: FipConfig) -> list[str]:
    names = ["theta1", "theta2", "pos"]
    for l in range(cfg.L):
        names += [f"l{l}.{k}" for k in ("wq", "wk", "wv", "wo", "ln1_g", "ln1_b", "w1", "b1", "w2", "b2", "ln2_g", "ln2_b")]
    names.append("dec")
    return names


def init_params(cfg: FipConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    d, D, HD, Hd = cfg.d, cfg.D, cfg.heads * cfg.d_head, cfg.hidden

    def normal(shape, std):
        return Tensor(rng.normal(0.0, std, shape), requires_grad=True)

    p = {
        "theta1": normal((d, D), cfg.init_std),
        "theta2": normal((d, D), cfg.init_std),
        "pos": normal((d, D), cfg.init_std),
    }
    for l in range(cfg.L):
        p[f"l{l}.wq"] = normal((D, HD), 1.0 / np.sqrt(D))
        p[f"l{l}.wk"] = normal((D, HD), 1.0 / np.sqrt(D))
        p[f"l{l}.wv"] = normal((D, HD), 1.0 / np.sqrt(D))
        p[f"l{l}.wo"] = normal((HD, D), 1.0 / np.sqrt(HD))
        p[f"l{l}.ln1_g"] = Tensor(np.ones(D), requires_grad=True)
        p[f"l{l}.ln1_b"] = Tensor(np.zeros(D), requires_grad=True)
        p[f"l{l}.w1"] = normal((D, Hd), np.sqrt(2.0 / D))
        p[f"l{l}.b1"] = Tensor(np.zeros(Hd), requires_grad=True)
        p[f"l{l}.w2"] = normal((Hd, D), 1.0 / np.sqrt(Hd))
        p[f"l{l}.b2"] = Tensor(np.zeros(D), requires_grad=True)
        p[f"l{l}.ln2_g"] = Tensor(np.ones(D), requires_grad=True)
        p[f"l{l}.ln2_b"] = Tensor(np.zeros(D), requires_grad=True)
    p["dec"] = normal((d, D), 1.0 / np.sqrt(D))
    return p


# ------------------------------------------------------------- attention


def causal_mask(d: int) -> np.ndarray:
    """M[i, j] = 0 if i > j else +inf (diagonal masked)."""
    M = np.full((d, d), np.inf)
    M[np.tril_indices(d, k=-1)] = 0.0
    return M


def causal_attention_scores(S: Tensor, scale: float, mask: Optional[np.ndarray] = None) -> Tensor:
    """exp((S - M)/scale) divided row-wise by max(row sum, 1).

    Computed with a per-row max shift, so large logits do not overflow:
    with m the row max, A = exp(L - m) / max(sum exp(L - m), exp(-m)).
    """
    S = ag._lift(S)
    d = S.shape[-1]
    allowed = (causal_mask(d) if mask is None else np.asarray(mask)) == 0
    L = np.where(allowed, S.data / scale, -np.inf)
    with np.errstate(over="ignore", invalid="ignore"):
        m = L.max(axis=-1, keepdims=True)
        empty = ~np.isfinite(m)
        m_safe = np.where(empty, 0.0, m)
        E = np.where(allowed, np.exp(L - m_safe), 0.0)
        s = E.sum(axis=-1, keepdims=True)
        floor = np.exp(-m_safe)
        normalized = s >= floor  # unnormalized row sum >= 1
        den = np.where(normalized, s, floor)
        A = np.where(empty, 0.0, E / den)

    def rule(g):
        dL = np.where(normalized, A * (g - (g * A).sum(axis=-1, keepdims=True)), g * A)
        return ((S, dL / scale),)

    return ag._make(A, (S,), "causal_attention", rule)


def causal_attention(Q, K, mask: Optional[np.ndarray] = None, scale: Optional[float] = None) -> Tensor:
    """CA_M(Q, K) for Q, K of shape (..., d, d_head); scale defaults to sqrt(d_head)."""
    Q, K = ag._lift(Q), ag._lift(K)
    if scale is None:
        scale = float(np.sqrt(Q.shape[-1]))
    return causal_attention_scores(Q @ ag.transpose(K), scale, mask)


# ----------------------------------------------------------------- layers


def causal_embed(w: Tensor, theta: Tensor, pos: Tensor) -> Tensor:
    """Rows E[b, j] = w[b, j] * theta[j] + pos[j]; w has shape (B, d)."""
    w = ag._lift(w)
    B, d = w.shape
    return w.reshape(B, d, 1) * theta + pos


def _split_heads(t: Tensor, B: int, d: int, H: int, dh: int) -> Tensor:
    return ag.transpose(t.reshape(B, d, H, dh), (0, 2, 1, 3))


def encoder_layer(x_emb: Tensor, n_emb: Tensor, p: dict, l: int, cfg: FipConfig) -> Tensor:
    B, d, D = n_emb.shape
    H, dh = cfg.heads, cfg.d_head
    q = _split_heads(n_emb @ p[f"l{l}.wq"], B, d, H, dh)
    k = _split_heads(x_emb @ p[f"l{l}.wk"], B, d, H, dh)
    v = _split_heads(x_emb @ p[f"l{l}.wv"], B, d, H, dh)
    A = causal_attention_scores(q @ ag.transpose(k), float(np.sqrt(cfg.D)))
    o = ag.transpose(A @ v, (0, 2, 1, 3)).reshape(B, d, H * dh) @ p[f"l{l}.wo"]
    y = ag.layer_norm(o + n_emb, p[f"l{l}.ln1_g"], p[f"l{l}.ln1_b"])
    y = y + ag.mlp(y, p[f"l{l}.w1"], p[f"l{l}.b1"], p[f"l{l}.w2"], p[f"l{l}.b2"])
    return ag.layer_norm(y, p[f"l{l}.ln2_g"], p[f"l{l}.ln2_b"])


def decode(z: Tensor, dec: Tensor) -> Tensor:
    return (z * dec).sum(axis=-1)


def t_forward(x: Tensor, n: Tensor, p: dict, cfg: FipConfig) -> Tensor:
    """T(x, n) on ordered, standardized inputs of shape (B, d)."""
    x, n = ag._lift(x), ag._lift(n)
    if x.shape[-1] != cfg.d or n.shape[-1] != cfg.d:
        raise ArgumentError(f"inputs must have d={cfg.d} columns, got {x.shape} and {n.shape}")
    x_emb = causal_embed(x, p["theta1"], p["pos"])
    z = causal_embed(n, p["theta2"], p["pos"])
    for l in range(cfg.L):
        z = encoder_layer(x_emb, z, p, l, cfg)
    return decode(z, p["dec"])


def t_anm(x: Tensor, p: dict, cfg: FipConfig) -> Tensor:
    x = ag._lift(x)
    return t_forward(x, Tensor(np.zeros(x.shape)), p, cfg)


def _frozen(p: dict) -> dict:
    return {k: Tensor(v.data) for k, v in p.items()}


def _chunks(n: int, size: int):
    for s in range(0, n, size):
        yield slice(s, min(n, s + size))


# ----------------------------------------------------------------- model


@dataclass
class FipModel:
    config: FipConfig
    params: dict
    perm: Permutation
    standardization: Standardization
    history: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.config.d

    # numeric wrappers ---------------------------------------------------
    def anm_mean(self, z: np.ndarray, chunk: int = 4096) -> np.ndarray:
        """t_anm on ordered standardized rows, no tape."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        frozen = _frozen(self.params)
        out = np.empty_like(z)
        for sl in _chunks(z.shape[0], chunk):
            out[sl] = t_anm(Tensor(z[sl]), frozen, self.config).data
        return out

    def forward(self, z: np.ndarray, n: np.ndarray) -> np.ndarray:
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        n = np.atleast_2d(np.asarray(n, dtype=np.float64))
        return t_forward(Tensor(z), Tensor(n), _frozen(self.params), self.config).data

    def structured_fn(self) -> StructuredFn:
        """H_anm(z, n) = t_anm(z) + n as an ordered-space map."""

        def fn(z, n):
            z = np.asarray(z, dtype=np.float64)
            flat = z.reshape(-1, self.d)
            return self.anm_mean(flat).reshape(z.shape) + n

        return StructuredFn(self.d, fn, jac1=lambda z, n: self.jacobian(z), additive=True)

    def as_scm(self, noise: Optional[NoiseModel] = None, check: bool = True) -> FixedPointScm:
        noise = noise or NoiseModel.gaussian(self.d)
        return FixedPointScm(self.perm, self.structured_fn(), noise, check=check)

    def jacobian(self, z: np.ndarray, chunk: int = 2048) -> np.ndarray:
        """d t_anm(z)_i / d z_j in ordered space, shape (m, d, d), via backprop."""
        z = np.atleast_2d(np.asarray(z, dtype=np.float64))
        frozen = _frozen(self.params)
        J = np.zeros(z.shape + (self.d,))
        for sl in _chunks(z.shape[0], chunk):
            for i in range(1, self.d):  # row 0 has no admissible inputs
                xt = Tensor(z[sl], requires_grad=True)
                out = t_anm(xt, frozen, self.config)
                out[:, i].sum().backward()
                J[sl, i, :] = xt.grad
        return J

    def residuals(self, x_std: np.ndarray) -> np.ndarray:
        """Predicted noise X - Pᵀ t_anm(P X) in standardized original coords."""
        z = self.perm.to_ordered(x_std)
        return self.perm.to_original(z - self.anm_mean(z))

    # persistence --------------------------------------------------------
    def save(self, path):
        header = {
            "config": asdict(self.config),
            "perm": self.perm.map.tolist(),
            "standardization": self.standardization.to_json(),
            "history": self.history,
        }
        arrays = {k: self.params[k].data for k in param_names(self.config)}
        return save_container(path, MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "FipModel":
        header, arrays = load_container(path, MAGIC)
        cfg = FipConfig(**header["config"])
        params = {k: Tensor(arrays[k], requires_grad=True) for k in param_names(cfg)}
        return cls(cfg, params, Permutation(header["perm"]), Standardization.from_json(header["standardization"]), header.get("history", {}))


def mse_loss(z: np.ndarray, p: dict, cfg: FipConfig) -> Tensor:
    """Mean over rows of ||z - t_anm(z)||^2 for ordered standardized rows z."""
    pred = t_anm(Tensor(z), p, cfg)
    r = Tensor(z) - pred
    return ag.square(r).sum(axis=-1).mean()


def train_mse(dataset: Dataset, perm: Permutation, config: FipConfig, seed: int = 0, init: Optional[dict] = None) -> FipModel:
    """Fit t_anm by minimising the reconstruction MSE with Adam.

    Data are (re-)standardized here and split 0.8/0.1/0.1. The returned
    parameters are those of the epoch with the lowest validation loss.
    """
    if perm.d != dataset.d or config.d != dataset.d:
        raise ArgumentError(f"dimension mismatch: data d={dataset.d}, perm d={perm.d}, config d={config.d}")
    ds = dataset.standardized()
    train, val, test = ds.split((0.8, 0.1, 0.1), seed=seed)
    zt = perm.to_ordered(train.x)
    zv = perm.to_ordered(val.x)
    rng = np.random.default_rng(seed)
    params = init if init is not None else init_params(config, seed)
    plist = [params[k] for k in param_names(config)]
    opt = ag.AdamState(lr=config.lr, weight_decay=config.weight_decay)
    bs = config.batch_size or max(1, min(1024, int(0.8 * ds.n)))

    def val_loss(pp):
        return float(np.mean(np.sum((zv - _anm_np(zv, pp, config)) ** 2, axis=-1))) if zv.shape[0] else float("nan")

    best = val_loss(params)
    best_params = {k: v.data.copy() for k, v in params.items()}
    hist = {"train": [], "val": [best], "best": [best], "best_epoch": 0}
    step = 0
    stale = 0
    n_batches = -(-zt.shape[0] // bs)
    total = max(1, config.epochs * n_batches)
    for epoch in range(config.epochs):
        order = rng.permutation(zt.shape[0])
        losses = []
        for sl in _chunks(zt.shape[0], bs):
            batch = zt[order[sl]]
            for t in plist:
                t.grad = None
            loss = mse_loss(batch, params, config)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite training loss at step {step}", step=step)
            loss.backward()
            if config.lr_final is not None:
                frac = step / total
                opt.lr = config.lr_final + 0.5 * (config.lr - config.lr_final) * (1 + np.cos(np.pi * frac))
            ag.adam_step(plist, opt)
            losses.append(loss.item())
            step += 1
        v = val_loss(params)
        hist["train"].append(float(np.mean(losses)))
        hist["val"].append(v)
        if v < best:
            best, stale = v, 0
            best_params = {k: t.data.copy() for k, t in params.items()}
            hist["best_epoch"] = epoch + 1
        else:
            stale += 1
        hist["best"].append(best)
        log.debug("epoch %d train %.5f val %.5f", epoch, hist["train"][-1], v)
        if config.patience is not None and stale >= config.patience:
            break
    final = {k: Tensor(best_params[k], requires_grad=True) for k in param_names(config)}
    zte = perm.to_ordered(test.x)
    hist["test"] = float(np.mean(np.sum((zte - _anm_np(zte, final, config)) ** 2, axis=-1))) if zte.shape[0] else None
    hist["steps"] = step
    return FipModel(config, final, perm, ds.standardization, hist)


def _anm_np(z, p, cfg):
    frozen = _frozen(p)
    out = np.empty_like(z)
    for sl in _chunks(z.shape[0], 4096):
        out[sl] = t_anm(Tensor(z[sl]), frozen, cfg).data
    return out


# ------------------------------------------------------ downstream tasks


def extract_graph(model: FipModel, x_std: np.ndarray, tau: Optional[float] = None) -> tuple[Dag, np.ndarray]:
    """Threshold the mean absolute Jacobian; returns (Dag, scores[parent, child])."""
    tau = model.config.tau if tau is None else tau
    z = model.perm.to_ordered(np.atleast_2d(x_std))
    J = np.abs(model.jacobian(z)).mean(axis=0)  # ordered (child, parent)
    pos = model.perm.position
    scores = J[np.ix_(pos, pos)].T  # scores[j, i]: j -> i
    return Dag(scores > tau), scores


def estimate_noise_quantiles(model: FipModel, x_std: np.ndarray) -> NoiseModel:
    x_std = np.atleast_2d(x_std)
    if x_std.shape[0] == 0:
        raise ArgumentError("no rows to estimate residual quantiles from")
    res = model.residuals(x_std)
    return NoiseModel(tuple(EmpiricalQuantile(np.sort(res[:, k])) for k in range(model.d)))


def generate(model: FipModel, noise: NoiseModel, n_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Uniform -> per-node quantile -> fixed point of the learned map.

    Returns (X, N) in standardized original coordinates.
    """
    rng = np.random.default_rng(seed)
    U = rng.uniform(0.0, 1.0, (n_samples, model.d))
    N = np.column_stack([noise.marginals[k](U[:, k]) for k in range(model.d)])
    n_ord = model.perm.to_ordered(N)
    z = solve_ordered(lambda zz, nn: model.anm_mean(zz) + nn, n_ord, model.d)
    return model.perm.to_original(z), N


def predict_counterfactual(model: FipModel, x_factual: np.ndarray, t: InterventionMap) -> np.ndarray:
    """SN then NS under T∘H on standardized ordered space.

    ``x_factual`` is in standardized original coordinates; ``DoNode``
    indices refer to the model's ordered space.
    """
    x = np.atleast_2d(np.asarray(x_factual, dtype=np.float64))
    z = model.perm.to_ordered(x)
    n_hat = z - model.anm_mean(z)
    h = model.structured_fn()
    h_t = intervened_fn(h, t)
    out = model.perm.to_original(solve_ordered(h_t, n_hat, model.d))
    return out.reshape(np.shape(x_factual))


def counterfactual_in_units(model: FipModel, x_factual: np.ndarray, node: int, value: float) -> np.ndarray:
    """do(X_node = value) counterfactual with inputs/outputs in original units."""
    st = model.standardization
    xs = st.apply(x_factual)
    a = (value - st.mean[node]) / st.std[node]
    cf = predict_counterfactual(model, xs, DoNode(int(model.perm.position[node]), float(a)))
    return st.invert(cf)
