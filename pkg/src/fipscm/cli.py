"""Command-line front end: gen-data, train-to, train-fip, eval.

Settings come from an INI file (``--config``) with one section per record,
overridden by flags. Every command writes the resolved settings as
``config.ini`` next to its outputs. Exit codes: 0 ok, 2 usage, 3 data or
format problems (including I/O), 4 numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import json
import logging
import sys
import typing
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import fip as fipmod
from . import synth, toinfer
from .dataset import Dataset, bundle_digest, load_bundle, read_manifest, save_bundle, write_manifest
from .errors import ArgumentError, ConfigError, DataError, FipError, FormatError, NumericError
from .metrics import ScoreReport, cf_eval, f1_directed, ks_distance, tos
from .scm import FixedPointScm, Permutation, reparameterize_standard

log = logging.getLogger("fipscm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


# ----------------------------------------------------------------- config


@dataclass
class GenDataConfig:
    preset: str = "LIN-IN"
    dims: str = "5"
    count: int = 10
    n_samples: int = 1000
    standardize: bool = True
    seed: int = 0


@dataclass
class TrainToConfig:
    seed: int = 0
    epochs: int = 10
    batch: int = 8
    d_max: Optional[int] = None
    lr: float = 1e-3
    lr_final: Optional[float] = None
    weight_decay: float = 5e-9
    rows: Optional[int] = 64
    D: int = 16
    heads: int = 4
    blocks: int = 2
    hidden: int = 32


@dataclass
class TrainFipConfig:
    seed: int = 0
    to_source: str = "true"


@dataclass
class EvalConfig:
    seed: int = 0
    tasks: str = "graph"
    tau: Optional[float] = None
    n_interventions: Optional[int] = None
    per_intervention: int = 100
    n_generate: int = 100_000


# section name -> record type; "fip" holds FipConfig overrides except d
SECTIONS = {
    "gen-data": GenDataConfig,
    "train-to": TrainToConfig,
    "train-fip": TrainFipConfig,
    "eval": EvalConfig,
    "fip": fipmod.FipConfig,
}


def _coerce(tp, raw: str, key: str):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.strip().lower() in ("none", ""):
            return None
        tp = args[0]
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from None


def _hints(cls):
    return typing.get_type_hints(cls)


def read_config(path: Optional[str]) -> dict[str, dict]:
    """Parse an INI file into {section: {key: typed value}}; unknown keys fail."""
    out: dict[str, dict] = {s: {} for s in SECTIONS}
    if path is None:
        return out
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    try:
        with open(path) as fh:
            cp.read_file(fh)
    except FileNotFoundError as err:
        raise ConfigError(f"config file not found: {path}") from err
    except configparser.Error as err:
        raise ConfigError(f"{path}: {err}") from err
    for section in cp.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        hints = _hints(SECTIONS[section])
        for key, raw in cp.items(section):
            if key not in hints or (section == "fip" and key == "d"):
                raise ConfigError(f"{path}: unknown key {key!r} in [{section}]")
            out[section][key] = _coerce(hints[key], raw, f"[{section}] {key}")
    return out


def write_config(path: Path, records: dict[str, object]) -> Path:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for section, rec in records.items():
        vals = asdict(rec)
        if section == "fip":
            vals.pop("d", None)
        cp[section] = {k: "none" if v is None else str(v) for k, v in vals.items()}
    with open(path, "w") as fh:
        cp.write(fh)
    return path


def _resolve(cls, file_values: dict, flags: dict):
    values = dict(file_values)
    values.update({k: v for k, v in flags.items() if v is not None})
    return cls(**values)


def _parse_dims(text: str) -> list[int]:
    try:
        dims = [int(t) for t in str(text).replace(" ", "").split(",") if t]
    except ValueError:
        raise ArgumentError(f"--dims must be comma-separated integers, got {text!r}") from None
    if not dims or any(d < 2 for d in dims):
        raise ArgumentError(f"--dims needs integers >= 2, got {text!r}")
    return dims


def _parse_tasks(text: str) -> list[str]:
    tasks = [t for t in str(text).replace(" ", "").split(",") if t]
    if not tasks:
        raise ArgumentError("--tasks is empty; choose from graph, counterfactual, generation")
    bad = [t for t in tasks if t not in ("graph", "counterfactual", "generation")]
    if bad:
        raise ArgumentError(f"unknown task(s) {bad}; choose from graph, counterfactual, generation")
    return tasks


def _fip_config(d: int, overrides: dict) -> fipmod.FipConfig:
    return fipmod.FipConfig(d=d, **overrides)


def _out_dir(path: str) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create output directory {out}: {err}") from err
    return out


def _dump(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=1, sort_keys=True, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------- helpers


def true_scm(ds: Dataset) -> FixedPointScm:
    """Simulator of a generated bundle, in raw (unstandardized) units."""
    missing = [k for k in ("mechanisms", "noise_model") if k not in ds.meta]
    if ds.dag is None:
        missing.append("adjacency")
    if ds.perm is None:
        missing.append("to")
    if missing:
        raise DataError(f"counterfactual task needs simulator fields missing from the bundle: {', '.join(missing)}")
    std = synth.scm_from_info(ds.dag, ds.meta)
    return reparameterize_standard(std, ds.perm)


def load_ordering(source: str, ds: Dataset, seed: int = 0) -> tuple[Permutation, str]:
    """``true`` | permutation JSON file | ordering-model checkpoint."""
    if source == "true":
        if ds.perm is None:
            raise DataError("--to-source true needs a bundle with field 'to'")
        return ds.perm, "true"
    path = Path(source)
    try:
        head = path.read_bytes()[: len(toinfer.MAGIC) + 1]
    except OSError as err:
        raise DataError(f"cannot read ordering source {path}: {err}") from err
    if head == toinfer.MAGIC + b"\n":
        model = toinfer.ToModel.load(path)
        x = ds.original_units()
        n_train = int(model.history.get("n_train", 0) or 0)
        if n_train and ds.n >= 2 * n_train:
            perm = toinfer.infer_to_voting(model, x, n_train)
        else:
            perm = toinfer.infer_to(model, x)
        return perm, "ckpt"
    try:
        obj = json.loads(path.read_text())
    except (json.JSONDecodeError, UnicodeDecodeError) as err:
        raise FormatError(f"{path}: neither an ordering checkpoint nor a JSON permutation") from err
    order = obj["to"] if isinstance(obj, dict) else obj
    perm = Permutation(order)
    if perm.d != ds.d:
        raise ArgumentError(f"permutation in {path} has {perm.d} nodes, dataset has {ds.d}")
    return perm, "file-perm"


# --------------------------------------------------------------- commands


def cmd_gen_data(args, cfgfile) -> int:
    cfg = _resolve(GenDataConfig, cfgfile["gen-data"], {"preset": args.preset, "dims": args.dims, "count": args.count, "n_samples": args.n_samples, "seed": args.seed})
    if cfg.preset not in synth.PRESETS:
        raise ArgumentError(f"unknown preset {cfg.preset!r}; choose from {sorted(synth.PRESETS)}")
    dims = _parse_dims(cfg.dims)
    if cfg.count < 1:
        raise ArgumentError("--count must be positive")
    out = _out_dir(args.out)
    datasets, entries = synth.make_metadataset(cfg.preset, dims, cfg.count, cfg.seed, cfg.n_samples, cfg.standardize)
    for ds, entry in zip(datasets, entries):
        bundle = save_bundle(ds, out / entry["name"])
        entry["path"] = entry["name"]
        entry["sha256"] = bundle_digest(bundle)
    write_manifest(entries, out / "manifest.json")
    write_config(out / "config.ini", {"gen-data": cfg})
    print(f"wrote {len(entries)} bundles to {out}")
    return EXIT_OK


def _manifest_datasets(manifest: str) -> list[Dataset]:
    root = Path(manifest).parent
    return [load_bundle(root / e["path"]) for e in read_manifest(manifest)]


def cmd_train_to(args, cfgfile) -> int:
    cfg = _resolve(TrainToConfig, cfgfile["train-to"], {"seed": args.seed, "d_max": args.d_max, "epochs": args.epochs})
    data = []
    for i, ds in enumerate(_manifest_datasets(args.manifest)):
        if ds.dag is None:
            raise DataError(f"bundle {i} of {args.manifest} carries no ground-truth graph (field 'adjacency')")
        data.append((ds.original_units(), ds.dag))
    if not data:
        raise DataError(f"{args.manifest} lists no bundles")
    if args.resume:
        model = toinfer.ToModel.load(args.resume)
    else:
        model = toinfer.new_model(toinfer.ToConfig(D=cfg.D, heads=cfg.heads, blocks=cfg.blocks, hidden=cfg.hidden), seed=cfg.seed)
    tcfg = toinfer.ToTrainConfig(
        d_max=cfg.d_max, batch=cfg.batch, epochs=cfg.epochs, lr=cfg.lr, weight_decay=cfg.weight_decay, seed=cfg.seed, lr_final=cfg.lr_final, rows=cfg.rows
    )
    toinfer.train_to(model, data, tcfg)
    model.history["n_train"] = cfg.rows or min(x.shape[0] for x, _ in data)
    ckpt = Path(args.out)
    _out_dir(str(ckpt.parent))
    model.save(ckpt)
    train_tos = [tos(toinfer.infer_to(model, x), g) for x, g in data]
    metrics = {"step": model.step, "epochs": model.history["epochs"], "train_tos_mean": float(np.mean(train_tos))}
    _dump(ckpt.with_name(ckpt.name + ".metrics.json"), metrics)
    write_config(ckpt.with_name(ckpt.name + ".config.ini"), {"train-to": cfg})
    print(f"step {model.step}, train TOS {metrics['train_tos_mean']:.3f}; checkpoint {ckpt}")
    return EXIT_OK


def cmd_train_fip(args, cfgfile) -> int:
    cfg = _resolve(TrainFipConfig, cfgfile["train-fip"], {"seed": args.seed, "to_source": args.to_source})
    ds = load_bundle(args.dataset)
    perm, kind = load_ordering(cfg.to_source, ds, cfg.seed)
    fcfg = _fip_config(ds.d, cfgfile["fip"])
    if args.tau is not None:
        fcfg = replace(fcfg, tau=args.tau)
    out = _out_dir(args.out)
    model = fipmod.train_mse(ds, perm, fcfg, seed=cfg.seed)
    model.history["seed"] = cfg.seed
    model.save(out / "fip.ckpt")
    report = {"to_source": kind, "perm": perm.map.tolist(), "loss": {k: model.history[k] for k in ("train", "val", "best", "best_epoch", "test", "steps")}}
    if ds.dag is not None:
        x_std = model.standardization.apply(ds.original_units())
        g_hat, _ = fipmod.extract_graph(model, x_std)
        report["f1"] = f1_directed(g_hat, ds.dag)
        report["tos"] = tos(perm, ds.dag)
        report["graph"] = g_hat.edges()
    _dump(out / "report.json", report)
    write_config(out / "config.ini", {"train-fip": cfg, "fip": fcfg})
    msg = f"trained FiP (d={ds.d}, ordering from {kind}); best val {model.history['best'][-1]:.4f}"
    if "f1" in report:
        msg += f", F1 {report['f1']:.3f}, TOS {report['tos']:.3f}"
    print(msg)
    return EXIT_OK


def _graph_task(model, ds, cfg) -> ScoreReport:
    if ds.dag is None:
        raise DataError("graph task needs the ground-truth field 'adjacency'")
    x_std = model.standardization.apply(ds.original_units())
    g_hat, _ = fipmod.extract_graph(model, x_std, cfg.tau)
    rep = ScoreReport("graph", provenance={"tau": cfg.tau if cfg.tau is not None else model.config.tau})
    rep.add("f1", f1_directed(g_hat, ds.dag), metric="f1")
    rep.add("tos", tos(model.perm, ds.dag), metric="tos")
    return rep


def _cf_task(model, ds, cfg) -> ScoreReport:
    scm = true_scm(ds)

    def predict(x, node, value):
        return fipmod.counterfactual_in_units(model, x, node, value)

    return cf_eval(scm, predict, cfg.n_interventions, cfg.per_intervention, cfg.seed, reference=ds.original_units())


def _generation_task(model, ds, cfg) -> ScoreReport:
    seed = int(model.history.get("seed", 0))
    std = Dataset(model.standardization.apply(ds.original_units()))
    train, _, test = std.split((0.8, 0.1, 0.1), seed=seed)
    if test.n == 0:
        raise DataError("generation task needs held-out rows; dataset is too small")
    noise = fipmod.estimate_noise_quantiles(model, train.x)
    x_gen, n_gen = fipmod.generate(model, noise, cfg.n_generate, cfg.seed)
    res_test = model.residuals(test.x)
    rep = ScoreReport("generation", provenance={"n_generate": cfg.n_generate, "held_out": test.n})
    for k in range(model.d):
        rep.add(f"noise_ks_{k}", ks_distance(n_gen[:, k], res_test[:, k]), node=k, metric="noise_ks")
    for k in range(model.d):
        rep.add(f"x_ks_{k}", ks_distance(x_gen[:, k], test.x[:, k]), node=k, metric="x_ks")
    return rep


TASKS = {"graph": _graph_task, "counterfactual": _cf_task, "generation": _generation_task}


def cmd_eval(args, cfgfile) -> int:
    cfg = _resolve(EvalConfig, cfgfile["eval"], {"seed": args.seed, "tasks": args.tasks, "tau": args.tau})
    tasks = _parse_tasks(cfg.tasks)
    model = fipmod.FipModel.load(args.ckpt)
    ds = load_bundle(args.dataset)
    if ds.d != model.d:
        raise ArgumentError(f"checkpoint has d={model.d}, dataset has d={ds.d}")
    out = _out_dir(args.out)
    for task in tasks:
        rep = TASKS[task](model, ds, cfg)
        (out / f"{task}.json").write_text(rep.to_json())
        (out / f"{task}.csv").write_text(rep.to_csv())
        print(rep.summary())
    write_config(out / "config.ini", {"eval": cfg})
    return EXIT_OK


# ------------------------------------------------------------------- main


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fipscm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", help="INI file with per-command sections")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", required=True)

    g = sub.add_parser("gen-data", help="sample a synthetic metadataset into bundles")
    common(g)
    g.add_argument("--preset")
    g.add_argument("--dims", help="comma-separated, e.g. 5,10")
    g.add_argument("--count", type=int)
    g.add_argument("--n-samples", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-to", help="train the ordering model on a manifest")
    common(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--d-max", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", help="continue from an ordering checkpoint")
    t.set_defaults(func=cmd_train_to)

    f = sub.add_parser("train-fip", help="fit the fixed-point model on one bundle")
    common(f)
    f.add_argument("--dataset", required=True)
    f.add_argument("--to-source", help="'true', a JSON permutation file, or an ordering checkpoint")
    f.add_argument("--tau", type=float)
    f.set_defaults(func=cmd_train_fip)

    e = sub.add_parser("eval", help="score a fixed-point checkpoint on a bundle")
    common(e)
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--tasks", help="subset of graph,counterfactual,generation")
    e.add_argument("--tau", type=float)
    e.set_defaults(func=cmd_eval)
    return p


def exit_code(err: BaseException) -> int:
    if isinstance(err, NumericError):
        return EXIT_NUMERIC
    if isinstance(err, (ArgumentError, ConfigError)):
        return EXIT_USAGE
    if isinstance(err, (FipError, OSError)):
        return EXIT_DATA
    raise err


def main(argv: Optional[list[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        cfgfile = read_config(args.config)
        return args.func(args, cfgfile)
    except (FipError, OSError) as err:
        code = exit_code(err)
        print(f"fipscm: error: {err}", file=sys.stderr)
        return code
    except KeyError as err:
        # malformed bundles and manifests surface as missing keys
        print(f"fipscm: error: malformed input ({err!r})", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
