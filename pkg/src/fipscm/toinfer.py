"""Zero-shot topological-ordering inference by sequential leaf prediction.

The leaf classifier is ``f(En(D))``: an axial-attention dataset encoder
(attention across nodes within each sample, then across samples within
each node), mean-pooled over samples, followed by one attention layer over
the pooled node summaries and a linear logit head. No positional
information is used on either axis, so logits are equivariant to column
permutations and invariant to row permutations.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import load_container, save_container
from .errors import ArgumentError, DataError, NumericError, StructureError
from .scm import Dag, Permutation

log = logging.getLogger(__name__)

MAGIC = b"TOCKPT1"


# ------------------------------------------------------------ graph ops


def leaves(g: Dag) -> np.ndarray:
    """Binary vector, 1 for nodes without outgoing edges."""
    return (~g.adj.any(axis=1)).astype(np.int64)


def reduce_dataset(x: np.ndarray, q: int) -> np.ndarray:
    return np.delete(np.asarray(x), q, axis=-1)


def reduce_graph(g: Dag, q: int) -> Dag:
    keep = np.delete(np.arange(g.d), q)
    return Dag(g.adj[np.ix_(keep, keep)])


def pick_target(y: np.ndarray, q_hat: int, rng: np.random.Generator) -> int:
    """q_hat if it is a true leaf, otherwise a uniformly drawn true leaf."""
    y = np.asarray(y)
    if y[q_hat] == 1:
        return int(q_hat)
    ones = np.flatnonzero(y == 1)
    if ones.size == 0:
        raise StructureError("leaf vector is all zero; the graph is not a DAG")
    return int(rng.choice(ones))


def bn_loss(logits: Tensor, y) -> Tensor:
    """-sum_k y_k log σ(p_k) + (1 - y_k) log σ(-p_k), summed over the last axis."""
    logits = ag._lift(logits)
    y = np.asarray(y, dtype=np.float64)
    if y.shape != logits.shape:
        raise ArgumentError(f"logit shape {logits.shape} != label shape {y.shape}")
    pos = ag.log_sigmoid(logits)
    neg = ag.log_sigmoid(-logits)
    return -(pos * y + neg * (1.0 - y)).sum(axis=-1)


# ---------------------------------------------------------------- model


@dataclass
class ToConfig:
    D: int = 32
    heads: int = 4
    blocks: int = 2
    hidden: int = 64


def _names(cfg: ToConfig) -> list[str]:
    names = ["w_in", "b_in"]
    att = ("ln_g", "ln_b", "wq", "wk", "wv", "wo")
    for b in range(cfg.blocks):
        names += [f"b{b}.node.{k}" for k in att]
        names += [f"b{b}.samp.{k}" for k in att]
        names += [f"b{b}.ff.{k}" for k in ("ln_g", "ln_b", "w1", "b1", "w2", "b2")]
    names += [f"pool.{k}" for k in att]
    names += ["out.ln_g", "out.ln_b", "w_f", "b_f"]
    return names


def init_to_params(cfg: ToConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    D, Hd = cfg.D, cfg.hidden
    p = {}

    def put(name, arr):
        p[name] = Tensor(arr, requires_grad=True)

    put("w_in", rng.normal(0, 1.0, D))
    put("b_in", rng.normal(0, 1.0, D))

    def att(prefix):
        put(f"{prefix}.ln_g", np.ones(D))
        put(f"{prefix}.ln_b", np.zeros(D))
        for k in ("wq", "wk", "wv", "wo"):
            put(f"{prefix}.{k}", rng.normal(0, 1.0 / np.sqrt(D), (D, D)))

    for b in range(cfg.blocks):
        att(f"b{b}.node")
        att(f"b{b}.samp")
        put(f"b{b}.ff.ln_g", np.ones(D))
        put(f"b{b}.ff.ln_b", np.zeros(D))
        put(f"b{b}.ff.w1", rng.normal(0, np.sqrt(2.0 / D), (D, Hd)))
        put(f"b{b}.ff.b1", np.zeros(Hd))
        put(f"b{b}.ff.w2", rng.normal(0, 1.0 / np.sqrt(Hd), (Hd, D)))
        put(f"b{b}.ff.b2", np.zeros(D))
    att("pool")
    put("out.ln_g", np.ones(D))
    put("out.ln_b", np.zeros(D))
    put("w_f", rng.normal(0, 1.0 / np.sqrt(D), (D, 1)))
    put("b_f", np.zeros(1))
    return {k: p[k] for k in _names(cfg)}


def _self_attention(h: Tensor, p: dict, prefix: str, heads: int) -> Tensor:
    """Pre-LN multi-head self-attention over axis -2 of h (..., T, D)."""
    lead, T, D = h.shape[:-2], h.shape[-2], h.shape[-1]
    dh = D // heads
    a = ag.layer_norm(h, p[f"{prefix}.ln_g"], p[f"{prefix}.ln_b"])
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(t):
        return ag.transpose(t.reshape(*lead, T, heads, dh), perm)

    q = split(a @ p[f"{prefix}.wq"])
    k = split(a @ p[f"{prefix}.wk"])
    v = split(a @ p[f"{prefix}.wv"])
    att = ag.softmax((q @ ag.transpose(k)) * (1.0 / np.sqrt(dh)), axis=-1)
    o = ag.transpose(att @ v, perm).reshape(*lead, T, D)
    return h + o @ p[f"{prefix}.wo"]


def encode(x: np.ndarray, p: dict, cfg: ToConfig) -> Tensor:
    """Node embeddings (K, d, D) for a batch of datasets x of shape (K, n, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    K, n, d = x.shape
    h = Tensor(x.reshape(K, n, d, 1)) * p["w_in"] + p["b_in"]  # (K, n, d, D)
    for b in range(cfg.blocks):
        h = _self_attention(h, p, f"b{b}.node", cfg.heads)  # across nodes
        h = ag.transpose(h, (0, 2, 1, 3))  # (K, d, n, D)
        h = _self_attention(h, p, f"b{b}.samp", cfg.heads)  # across samples
        h = ag.transpose(h, (0, 2, 1, 3))
        a = ag.layer_norm(h, p[f"b{b}.ff.ln_g"], p[f"b{b}.ff.ln_b"])
        h = h + ag.mlp(a, p[f"b{b}.ff.w1"], p[f"b{b}.ff.b1"], p[f"b{b}.ff.w2"], p[f"b{b}.ff.b2"])
    pooled = h.mean(axis=1)  # (K, d, D)
    pooled = _self_attention(pooled, p, "pool", cfg.heads)
    return ag.layer_norm(pooled, p["out.ln_g"], p["out.ln_b"])


@dataclass
class ToModel:
    config: ToConfig
    params: dict
    step: int = 0
    history: dict = field(default_factory=dict)
    adam: Optional[ag.AdamState] = None

    def logits(self, x: np.ndarray, grad: bool = True) -> Tensor:
        """Leaf logits (K, d) for datasets (K, n, d) (or (1, d) for one (n, d))."""
        p = self.params if grad else {k: Tensor(v.data) for k, v in self.params.items()}
        z = encode(x, p, self.config)
        K, d, _ = z.shape
        return (z @ p["w_f"]).reshape(K, d) + p["b_f"]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x, grad=False).data

    def param_list(self):
        return [self.params[k] for k in _names(self.config)]

    def save(self, path):
        arrays = {k: self.params[k].data for k in _names(self.config)}
        header = {"config": asdict(self.config), "step": self.step, "history": self.history}
        if self.adam is not None and self.adam.m:
            header["adam"] = {k: getattr(self.adam, k) for k in ("lr", "beta1", "beta2", "eps", "weight_decay", "step")}
            for name, m, v in zip(_names(self.config), self.adam.m, self.adam.v):
                arrays[f"adam.m.{name}"] = m
                arrays[f"adam.v.{name}"] = v
        return save_container(path, MAGIC, header, arrays)

    @classmethod
    def load(cls, path) -> "ToModel":
        header, arrays = load_container(path, MAGIC)
        cfg = ToConfig(**header["config"])
        names = _names(cfg)
        params = {k: Tensor(arrays[k], requires_grad=True) for k in names}
        adam = None
        if "adam" in header:
            adam = ag.AdamState(**header["adam"])
            adam.m = [arrays[f"adam.m.{k}"] for k in names]
            adam.v = [arrays[f"adam.v.{k}"] for k in names]
        return cls(cfg, params, header.get("step", 0), header.get("history", {}), adam)


def new_model(cfg: Optional[ToConfig] = None, seed: int = 0) -> ToModel:
    cfg = cfg or ToConfig()
    return ToModel(cfg, init_to_params(cfg, seed))


# ----------------------------------------------------------------- d-TOE

# A leaf model maps a (K, n, d) batch to logits; ``grad`` asks for a taped Tensor.
LeafModel = Callable[..., Tensor]


def _model_logits(model, x, grad: bool) -> Tensor:
    if isinstance(model, ToModel):
        return model.logits(x, grad=grad)
    out = model(x)
    return out if isinstance(out, Tensor) else Tensor(out)


def d_toe(model, xs: np.ndarray, graphs: Sequence[Dag], d_max: Optional[int] = None, seed=0) -> Tensor:
    """Sequential leaf-peeling loss, summed over a batch of same-size datasets.

    ``xs`` has shape (K, n, d) (or (n, d) with a single graph). At step q the
    BN term is added only for datasets whose sub-sampled index set holds q.
    The peeled node is the predicted argmax if it is a true leaf, otherwise a
    random true leaf; neither choice carries gradient.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if xs.ndim == 2:
        xs = xs[None]
    graphs = list(graphs)
    K, _, d = xs.shape
    if len(graphs) != K or any(g.d != d for g in graphs):
        raise ArgumentError("one graph with matching size per dataset required")
    d_max = d if d_max is None else d_max
    if not 1 <= d_max <= d:
        raise ArgumentError(f"d_max={d_max} must lie in [1, {d}]")
    rng = np.random.default_rng(seed)
    chosen = np.zeros((K, d), dtype=bool)
    for k in range(K):
        chosen[k, rng.choice(d, d_max, replace=False)] = True
    total = Tensor(0.0)
    for q in range(d):
        active = chosen[:, q]
        p = _model_logits(model, xs, grad=bool(active.any()))
        y = np.stack([leaves(g) for g in graphs])
        if active.any():
            terms = bn_loss(p, y)
            total = total + (terms * active.astype(np.float64)).sum()
        pd = p.data
        new_x, new_g = [], []
        for k in range(K):
            q_hat = int(np.argmax(pd[k]))
            ell = pick_target(y[k], q_hat, rng)
            new_x.append(reduce_dataset(xs[k], ell))
            if q < d - 1:
                new_g.append(reduce_graph(graphs[k], ell))
        if q < d - 1:
            xs = np.stack(new_x)
            graphs = new_g
    return total


# ------------------------------------------------------------- inference


def _argmax_logits(model, xs) -> np.ndarray:
    return _model_logits(model, xs, grad=False).data


def infer_to(model, x: np.ndarray) -> Permutation:
    """Peel predicted leaves one by one; returns a parents-first permutation."""
    x = np.asarray(x, dtype=np.float64)
    d = x.shape[1]
    remaining = list(range(d))
    peeled = []
    cur = x
    while len(remaining) > 1:
        p = _argmax_logits(model, cur[None])[0]
        j = int(np.argmax(p))
        peeled.append(remaining.pop(j))
        cur = reduce_dataset(cur, j)
    peeled.extend(remaining)
    return Permutation(peeled[::-1])


def vote(choices: Sequence[int]) -> int:
    """Most frequent index; ties go to the smallest index."""
    counts = np.bincount(np.asarray(choices, dtype=int))
    return int(np.argmax(counts))


def infer_to_voting(model, x: np.ndarray, n_train: int) -> Permutation:
    """Split rows into n_test // n_train chunks and majority-vote each leaf."""
    x = np.asarray(x, dtype=np.float64)
    n, d = x.shape
    if n < n_train:
        raise ArgumentError(f"need at least n_train={n_train} rows, got {n}")
    B = n // n_train
    chunks = x[: B * n_train].reshape(B, n_train, d)
    remaining = list(range(d))
    peeled = []
    while len(remaining) > 1:
        p = _argmax_logits(model, chunks)
        j = vote(np.argmax(p, axis=1))
        peeled.append(remaining.pop(j))
        chunks = reduce_dataset(chunks, j)
    peeled.extend(remaining)
    return Permutation(peeled[::-1])


# -------------------------------------------------------------- training


@dataclass
class ToTrainConfig:
    d_max: Optional[int] = None  # None -> max(1, d // 2)
    batch: int = 8
    epochs: int = 10
    lr: float = 1e-4
    weight_decay: float = 5e-9
    seed: int = 0
    lr_final: Optional[float] = None
    rows: Optional[int] = None  # random row subset per batch; None -> all rows


def train_to(model: ToModel, data: Sequence[tuple[np.ndarray, Dag]], cfg: ToTrainConfig, eval_fn: Optional[Callable] = None) -> ToModel:
    """Minimise the summed d-TOE over the training pairs with Adam.

    Batches group datasets of equal dimension. Model parameters are updated
    in place; ``model.step`` keeps counting across calls so training can be
    resumed from a checkpoint.
    """
    for i, (x, g) in enumerate(data):
        if g is None:
            raise DataError(f"training dataset {i} has no ground-truth graph")
    rng = np.random.default_rng(cfg.seed)
    plist = model.param_list()
    if model.adam is None:
        model.adam = ag.AdamState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    opt = model.adam
    by_d: dict[int, list[int]] = {}
    for i, (x, g) in enumerate(data):
        by_d.setdefault(g.d, []).append(i)
    hist = model.history.setdefault("epochs", [])
    total_steps = cfg.epochs * sum(-(-len(v) // cfg.batch) for v in by_d.values())
    local = 0
    for epoch in range(cfg.epochs):
        batches = []
        for d, idx in by_d.items():
            idx = list(rng.permutation(idx))
            batches += [idx[s : s + cfg.batch] for s in range(0, len(idx), cfg.batch)]
        order = rng.permutation(len(batches))
        losses = []
        for bi in order:
            ids = batches[bi]
            d = data[ids[0]][1].d
            n_min = min(data[i][0].shape[0] for i in ids)
            xs = np.stack([data[i][0][:n_min] for i in ids])
            if cfg.rows is not None and cfg.rows < n_min:
                xs = xs[:, rng.choice(n_min, cfg.rows, replace=False)]
            gs = [data[i][1] for i in ids]
            d_max = cfg.d_max if cfg.d_max is not None else max(1, d // 2)
            d_max = min(d_max, d)
            for t in plist:
                t.grad = None
            loss = d_toe(model, xs, gs, d_max, seed=int(rng.integers(2**31 - 1))) * (1.0 / len(ids))
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite d-TOE on datasets {ids}", step=model.step)
            loss.backward()
            if cfg.lr_final is not None:
                opt.lr = cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1 + np.cos(np.pi * local / max(1, total_steps)))
            ag.adam_step(plist, opt)
            model.step += 1
            local += 1
            losses.append(loss.item())
        rec = {"epoch": len(hist) + 1, "loss": float(np.mean(losses)) if losses else None}
        if eval_fn is not None:
            rec.update(eval_fn(model))
        prev = [h["loss"] for h in hist if h.get("loss") is not None]
        rec["best_loss"] = min(prev + [rec["loss"]]) if rec["loss"] is not None else None
        hist.append(rec)
        log.info("TO epoch %d loss %s", rec["epoch"], rec["loss"])
    return model
