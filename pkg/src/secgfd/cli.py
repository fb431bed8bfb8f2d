"""Command-line entry point: ``secgfd <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 training diverged.
Settings resolve as defaults < ``--config`` TOML file < command-line flags,
and the effective settings are echoed into every JSON artifact.
"""
from __future__ import annotations

import argparse
import io
import json
import os
import sys
import tempfile
import zipfile
from dataclasses import fields
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .data import (
    Dataset,
    SyntheticConfig,
    anomaly_side_heterophily,
    dataset_files,
    dumps_report,
    generate_synthetic,
    load_dataset,
    load_graph_labels,
    make_split,
)
from .errors import Diverged, EmptyDenominator, InvalidInput, SchemaError, SecGfdError
from .experiments import (
    ClipExperimentConfig,
    default_workers,
    rows_to_csv,
    run_ablation,
    run_clip_experiment,
    run_order_sweep,
    summarize,
)
from .graph import (
    DEFAULT_SPECTRUM_CAP,
    UNKNOWN,
    LaplacianKind,
    class_heterophily,
    graph_heterophily,
    rayleigh_quotient,
    spectral_energy_profile,
)
from .model import ModelConfig
from .train import TrainConfig, TrainedModel, evaluate, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

SECTIONS = {
    "model": {f.name for f in fields(ModelConfig)},
    "train": {f.name for f in fields(TrainConfig)} - {"seed"},
    "synthetic": {f.name for f in fields(SyntheticConfig)} - {"seed"},
    "data": {"synthetic", "edges", "features", "labels", "split"},
    "experiment": {"seeds", "ratios", "variants", "mode", "C_values"},
}
EXPERIMENT_DEFAULTS = {
    "seeds": [0, 1, 2, 3, 4],
    "ratios": [0.0, 0.25, 0.5, 0.75, 1.0],
    "variants": ["lowpass", "highpass", "bandpass"],
    "mode": "full",
    "C_values": [1, 2, 3, 4, 5, 6],
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ------------------------------------------------------------------- outputs


class OutputSet:
    """Output files declared up front and published together.

    Parents are checked at declaration so a bad path fails before any work.
    ``commit`` stages every file as a temp sibling, then renames them all;
    on failure nothing partial is left behind.
    """

    def __init__(self, *paths):
        self.paths = [Path(p) for p in paths if p is not None]
        for p in self.paths:
            if not p.parent.is_dir():
                raise SchemaError(f"{p}: parent directory does not exist")
        self._content: dict[Path, bytes] = {}

    def put(self, path, data) -> None:
        path = Path(path)
        if path not in self.paths:
            raise InvalidInput(f"{path}: output was not declared")
        self._content[path] = data.encode("utf-8") if isinstance(data, str) else data

    def commit(self) -> None:
        staged, done = [], []
        try:
            for path, blob in self._content.items():
                fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
                staged.append((tmp, path))
                with os.fdopen(fd, "wb") as fh:
                    fh.write(blob)
            for tmp, path in staged:
                os.replace(tmp, path)
                done.append(path)
        except BaseException:
            for tmp, _ in staged:
                if os.path.exists(tmp):
                    os.unlink(tmp)
            for path in done:
                path.unlink(missing_ok=True)
            raise


def _npz_bytes(arrays: dict) -> bytes:
    """``np.savez`` layout with fixed zip timestamps, so output bytes depend only on content."""
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            member = io.BytesIO()
            np.lib.format.write_array(member, np.asarray(arr), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0)), member.getvalue())
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


# -------------------------------------------------------------------- config


def _load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"{path}: cannot read config ({exc.strerror})") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    for key, val in raw.items():
        if key == "seed":
            continue
        if key not in SECTIONS or not isinstance(val, dict):
            raise UsageError(f"{path}: unknown config key {key!r}")
        unknown = set(val) - SECTIONS[key]
        if unknown:
            raise UsageError(f"{path}: unknown keys in [{key}]: {sorted(unknown)}")
    return raw


def resolve(ns) -> dict:
    """Merge defaults, the TOML file and flags into one plain dict."""
    raw = _load_toml(ns.config) if getattr(ns, "config", None) else {}
    cfg = {sec: dict(raw.get(sec, {})) for sec in SECTIONS}
    cfg["seed"] = raw.get("seed", 0)
    for dest, val in vars(ns).items():
        if val is None:
            continue
        if "." in dest:
            sec, key = dest.split(".", 1)
            cfg[sec][key] = val
    if ns.seed is not None:
        cfg["seed"] = ns.seed
    if not isinstance(cfg["seed"], int) or cfg["seed"] < 0:
        raise UsageError("seed must be a non-negative integer")
    for key, val in EXPERIMENT_DEFAULTS.items():
        cfg["experiment"].setdefault(key, val)
    cfg["data"].setdefault("split", [0.4, 0.2, 0.4])
    return cfg


def _configs(cfg):
    try:
        model = ModelConfig.from_dict(cfg["model"])
        tr = TrainConfig.from_dict({**cfg["train"], "seed": cfg["seed"]})
        syn = SyntheticConfig(**cfg["synthetic"], seed=cfg["seed"])
        if cfg["data"].get("synthetic"):
            syn.validate()
    except (InvalidInput, TypeError) as exc:
        raise UsageError(str(exc)) from None
    return model, tr, syn


def _echo(command, cfg, model=None, tr=None, syn=None, ds=None) -> dict:
    out = {"command": command, "seed": cfg["seed"], "data": {k: v for k, v in cfg["data"].items()}}
    if ds is not None:
        out["dataset"] = ds.name
    if syn is not None and cfg["data"].get("synthetic"):
        out["synthetic"] = {k: v for k, v in vars(syn).items()}
    if model is not None:
        out["model"] = model.to_dict()
    if tr is not None:
        out["train"] = tr.to_dict()
    return out


def _load_data(cfg, syn, need_features=True) -> Dataset:
    data = cfg["data"]
    files = [data.get(k) for k in ("edges", "features", "labels")]
    if data.get("synthetic"):
        if any(files):
            raise UsageError("give either --synthetic or dataset files, not both")
        return generate_synthetic(syn)
    if not data.get("edges") or not data.get("labels"):
        raise UsageError("no dataset: use --synthetic default or --edges/--features/--labels")
    if data.get("features"):
        return load_dataset(data["edges"], data["features"], data["labels"])
    if need_features:
        raise UsageError("--features is required for this command")
    g, y = load_graph_labels(data["edges"], data["labels"])
    return Dataset(g, np.zeros((g.num_nodes, 0)), y, name=Path(data["edges"]).stem)


def _split(cfg, ds):
    try:
        return make_split(ds.labels, tuple(cfg["data"]["split"]), seed=cfg["seed"])
    except TypeError:
        raise UsageError("split must be three fractions") from None


# ------------------------------------------------------------------ commands


def cmd_train(ns, cfg):
    model_cfg, tr, syn = _configs(cfg)
    out = OutputSet(ns.out, ns.save_model)
    ds = _load_data(cfg, syn)
    splits = _split(cfg, ds)
    model, report = train(ds, splits, model_cfg, tr)
    report.config = _echo("train", cfg, model_cfg, tr, syn, ds)
    out.put(ns.out, dumps_report(report))
    if ns.save_model:
        state = model.state()
        state["model_config"] = np.array(json.dumps(model_cfg.to_dict(), sort_keys=True))
        out.put(ns.save_model, _npz_bytes(state))
    out.commit()
    print(f"test f1_macro={report.f1_macro:.4f} auc={report.auc:.4f}")


def _read_model(path) -> TrainedModel:
    try:
        with np.load(path, allow_pickle=False) as z:
            state = {k: z[k] for k in z.files}
        cfg = ModelConfig.from_dict(json.loads(str(state.pop("model_config"))))
        return TrainedModel.from_state(cfg, state)
    except FileNotFoundError:
        raise SchemaError(f"{path}: no such model file") from None
    except (OSError, ValueError, KeyError, zipfile.BadZipFile) as exc:
        raise SchemaError(f"{path}: not a saved model ({exc})") from None


def cmd_evaluate(ns, cfg):
    _, _, syn = _configs(cfg)
    out = OutputSet(ns.out)
    model = _read_model(ns.model)
    ds = _load_data(cfg, syn)
    if ns.subset == "all":
        mask = ds.labelled
    else:
        mask = getattr(_split(cfg, ds), ns.subset)
    report = evaluate(model, ds, mask, ns.threshold, seed=cfg["seed"])
    report.config = {**_echo("evaluate", cfg, model.cfg, syn=syn, ds=ds),
                     "model_file": str(ns.model), "subset": ns.subset, "threshold": ns.threshold}
    if ns.out:
        out.put(ns.out, dumps_report(report))
        out.commit()
    print(f"{ns.subset} f1_macro={report.f1_macro:.4f} auc={report.auc:.4f}")


def _optional(fn, *args):
    try:
        return fn(*args)
    except (EmptyDenominator, InvalidInput):
        return None


def diagnose(ds: Dataset) -> dict:
    y = ds.labels
    known = y != UNKNOWN
    if not known.any():
        raise InvalidInput("dataset has no labelled nodes")
    x = np.where(known, y - y[known].mean(), 0.0)
    return {
        "dataset": ds.name,
        "num_nodes": ds.num_nodes,
        "num_edges": ds.graph.num_edges,
        "class_counts": {"normal": int(np.sum(y == 0)), "anomaly": int(np.sum(y == 1)),
                         "unknown": int(np.sum(~known))},
        "heterophily": _optional(graph_heterophily, ds.graph, y),
        "anomaly_heterophily": _optional(class_heterophily, ds.graph, y, 1),
        "rayleigh_quotient": {kind.value: _optional(rayleigh_quotient, ds.graph, x, kind)
                              for kind in LaplacianKind},
    }


def cmd_diagnose(ns, cfg):
    _, _, syn = _configs(cfg)
    out = OutputSet(ns.out, ns.profile)
    ds = _load_data(cfg, syn, need_features=False)
    result = diagnose(ds)
    result["config"] = _echo("diagnose", cfg, syn=syn)
    if ns.profile:
        y = ds.labels
        known = y != UNKNOWN
        x = np.where(known, y - y[known].mean(), 0.0)
        if not np.any(x):
            raise InvalidInput("label signal is constant; no energy profile")
        lam, eta = spectral_energy_profile(ds.graph, x, ns.kind, cap=ns.cap)
        lines = ["lambda,cumulative_energy"] + [f"{a!r},{b!r}" for a, b in zip(lam.tolist(), eta.tolist())]
        out.put(ns.profile, "\n".join(lines) + "\n")
        result["profile_kind"] = LaplacianKind(ns.kind).value
    text = _json(result)
    if ns.out:
        out.put(ns.out, text)
    out.commit()
    sys.stdout.write(text)


def cmd_synth_gen(ns, cfg):
    cfg["data"] = {"synthetic": "default"}
    _, _, syn = _configs(cfg)
    directory = Path(ns.out_dir)
    created = not directory.exists()
    directory.mkdir(parents=True, exist_ok=True)
    try:
        ds = generate_synthetic(syn)
        files = dataset_files(ds, binary=not ns.csv)
        meta = directory / "synthetic.json"
        out = OutputSet(*(directory / name for name, _ in files.values()), meta)
        for name, blob in files.values():
            out.put(directory / name, blob)
        summary = {"config": _echo("synth-gen", cfg, syn=syn),
                   "anomalies": int(np.sum(ds.labels == 1)), "num_edges": ds.graph.num_edges,
                   "anomaly_heterophily": anomaly_side_heterophily(ds)}
        out.put(meta, _json(summary))
        out.commit()
    except BaseException:
        if created and not any(directory.iterdir()):
            directory.rmdir()
        raise
    print(f"wrote {ds.num_nodes} nodes, {ds.graph.num_edges} edges to {directory}")


def _summary_json(rows, by) -> str:
    auc = summarize(rows, by, "auc")
    f1 = summarize(rows, by, "f1_macro")
    groups = [{**dict(zip(by, key)), "auc": auc[key], "f1_macro": f1[key]} for key in auc]
    return _json(groups)


def _experiment(ns, cfg, runner, by):
    model_cfg, tr, syn = _configs(cfg)
    out = OutputSet(ns.out, ns.summary)
    ds = _load_data(cfg, syn)
    rows = runner(ds, model_cfg, tr, default_workers())
    out.put(ns.out, rows_to_csv(rows))
    if ns.summary:
        out.put(ns.summary, _summary_json(rows, by))
    out.commit()
    print(f"{len(rows)} rows written to {ns.out}")


def cmd_clip(ns, cfg):
    ex = cfg["experiment"]
    try:
        clip_cfg = ClipExperimentConfig(mode=ex["mode"], ratios=tuple(float(r) for r in ex["ratios"]),
                                        variants=tuple(ex["variants"]), seeds=tuple(ex["seeds"]))
    except InvalidInput as exc:
        raise UsageError(str(exc)) from None
    _experiment(ns, cfg, lambda ds, m, t, w: run_clip_experiment(ds, clip_cfg, t, w, m),
                ("variant", "ratio"))


def cmd_sweep(ns, cfg):
    ex = cfg["experiment"]
    _experiment(ns, cfg, lambda ds, m, t, w: run_order_sweep(ds, ex["C_values"], ex["seeds"], m, t, w),
                ("C",))


def cmd_ablate(ns, cfg):
    ex = cfg["experiment"]
    _experiment(ns, cfg, lambda ds, m, t, w: run_ablation(ds, ex["seeds"], m, t, w), ("variant",))


# -------------------------------------------------------------------- parser


def _int_list(text):
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text):
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _str_list(text):
    return [v.strip() for v in text.split(",") if v.strip()]


def _add_common(p):
    p.add_argument("--config", help="TOML file with [model], [train], [data], [synthetic], [experiment]")
    p.add_argument("--seed", type=int, help="seeds the synthetic data, the split and the initialisation")


def _add_data(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--synthetic", dest="data.synthetic", choices=["default"])
    g.add_argument("--edges", dest="data.edges")
    g.add_argument("--features", dest="data.features")
    g.add_argument("--labels", dest="data.labels")
    g.add_argument("--split", dest="data.split", type=_float_list, help="train,val,test fractions")
    _add_synthetic(p)


def _add_synthetic(p):
    g = p.add_argument_group("synthetic generator")
    g.add_argument("--n", dest="synthetic.n", type=int)
    g.add_argument("--anomaly-rate", dest="synthetic.anomaly_rate", type=float)
    g.add_argument("--feature-dim", dest="synthetic.feature_dim", type=int)
    g.add_argument("--mu", dest="synthetic.mu", type=float)
    g.add_argument("--mean-degree", dest="synthetic.mean_degree", type=float)
    g.add_argument("--anomaly-heterophily", dest="synthetic.anomaly_heterophily", type=float)


def _add_model(p):
    g = p.add_argument_group("model")
    g.add_argument("--C", dest="model.C", type=int, help="filter order")
    g.add_argument("--epsilon", dest="model.epsilon", type=float)
    g.add_argument("--hidden-dim", dest="model.hidden_dim", type=int)
    g.add_argument("--agg", dest="model.agg", choices=["concat", "sum"])
    g.add_argument("--alpha", dest="model.alpha", type=float)
    g.add_argument("--knn-k", dest="model.knn_k", type=int)
    g.add_argument("--sgc-hops", dest="model.sgc_hops", type=int)
    g.add_argument("--delta-mode", dest="model.delta_mode", choices=["inverse_frequency", "paper_literal"])
    g.add_argument("--variant", dest="model.variant", choices=["hybrid", "lowpass", "highpass"])
    g.add_argument("--no-band", dest="model.use_band", action="store_const", const=False)
    g.add_argument("--no-high", dest="model.use_high", action="store_const", const=False)
    g.add_argument("--no-env", dest="model.use_env", action="store_const", const=False)
    g = p.add_argument_group("training")
    g.add_argument("--epochs", dest="train.epochs", type=int)
    g.add_argument("--lr", dest="train.lr", type=float)
    g.add_argument("--weight-decay", dest="train.weight_decay", type=float)
    g.add_argument("--patience", dest="train.patience", type=int)
    g.add_argument("--threshold", dest="train.threshold", type=float)
    g.add_argument("--timing", dest="train.record_timing", action="store_const", const=True,
                   help="record wall time (makes outputs run-dependent)")


def _add_experiment(p, *keys):
    flags = {
        "seeds": ("--seeds", _int_list),
        "ratios": ("--ratios", _float_list),
        "variants": ("--variants", _str_list),
        "C_values": ("--C-values", _int_list),
    }
    for key in keys:
        flag, typ = flags[key]
        p.add_argument(flag, dest=f"experiment.{key}", type=typ)
    p.add_argument("--out", required=True, help="CSV with one row per cell")
    p.add_argument("--summary", help="optional JSON with mean/sd/median per group")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="secgfd", description="Spectral graph fraud detection toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train on a dataset and write a metrics report")
    _add_common(p), _add_data(p), _add_model(p)
    p.add_argument("--out", required=True, help="JSON metrics report")
    p.add_argument("--save-model", help="write parameters and scaling to this .npz")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a saved model on a dataset")
    _add_common(p), _add_data(p)
    p.add_argument("--model", required=True, help=".npz written by train --save-model")
    p.add_argument("--subset", choices=["train", "val", "test", "all"], default="test")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--out", help="JSON metrics report")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("diagnose", help="heterophily and spectral statistics of the labels")
    _add_common(p), _add_data(p)
    p.add_argument("--out", help="also write the JSON diagnostics here")
    p.add_argument("--profile", help="CSV of the spectral energy profile of the label signal")
    p.add_argument("--kind", choices=[k.value for k in LaplacianKind], default="sym_normalized")
    p.add_argument("--cap", type=int, default=DEFAULT_SPECTRUM_CAP, help="largest n for the dense spectrum")
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("synth-gen", help="write a planted-anomaly dataset")
    _add_common(p), _add_synthetic(p)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--csv", action="store_true", help="CSV features instead of binary")
    p.set_defaults(func=cmd_synth_gen)

    p = sub.add_parser("clip-experiment", help="heterophilous-edge clipping study")
    _add_common(p), _add_data(p), _add_model(p)
    p.add_argument("--mode", dest="experiment.mode", choices=["full", "train"])
    _add_experiment(p, "seeds", "ratios", "variants")
    p.set_defaults(func=cmd_clip)

    p = sub.add_parser("sweep-order", help="performance against filter order C")
    _add_common(p), _add_data(p), _add_model(p)
    _add_experiment(p, "seeds", "C_values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="full model against each component removed")
    _add_common(p), _add_data(p), _add_model(p)
    _add_experiment(p, "seeds")
    p.set_defaults(func=cmd_ablate)
    return parser


def run_command(argv) -> int:
    try:
        ns = build_parser().parse_args(argv)
        cfg = resolve(ns)
        ns.func(ns, cfg)
    except UsageError as exc:
        return _fail(EXIT_USAGE, exc)
    except Diverged as exc:
        return _fail(EXIT_DIVERGED, exc)
    except (SecGfdError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    return EXIT_OK


def _fail(code, exc) -> int:
    msg = " ".join(str(exc).split()) or type(exc).__name__
    print(f"secgfd: error: {msg}", file=sys.stderr)
    return code


def main(argv=None) -> None:
    sys.exit(run_command(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
