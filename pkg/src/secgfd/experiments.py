"""Experiment harnesses: heterophily-edge clipping, order-C sweep, ablations.

Every harness expands into independent cells keyed by
(experiment, variant, ratio, C, flags, seed). A cell's output depends only on
the dataset, its config and its seed, so cells may run in any order or in
parallel and the assembled table is identical.
"""
from __future__ import annotations

import csv
import io
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from multiprocessing import get_context

import numpy as np

from .data import Dataset, make_split
from .errors import InvalidInput
from .graph import UNKNOWN, SparseGraph, remove_edges
from .model import ModelConfig
from .train import TrainConfig, train

CSV_FIELDS = ("experiment", "variant", "ratio", "C", "flags", "seed", "f1_macro", "auc", "wall_ms")

# single-filter models for the clipping study, as overrides of a base config
FILTER_VARIANTS = {
    "lowpass": {"variant": "lowpass", "use_env": False},
    "highpass": {"variant": "highpass", "use_env": False},
    "bandpass": {"variant": "hybrid", "C": 2, "use_band": True, "use_high": False, "use_env": False},
}

ABLATIONS = {
    "full": {},
    "w/o high-pass": {"use_high": False},
    "w/o band-pass": {"use_band": False},
    "w/o env": {"use_env": False},
}


def default_workers() -> int:
    env = os.environ.get("SEC_GFD_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise InvalidInput(f"SEC_GFD_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def flags_of(cfg: ModelConfig) -> str:
    if cfg.variant != "hybrid":
        return cfg.variant
    on = [name for name, flag in (("band", cfg.use_band), ("high", cfg.use_high),
                                  ("env", cfg.use_env)) if flag]
    return "+".join(on)


# ------------------------------------------------------------------ clipping


def clip_edges(g: SparseGraph, y, mode: str = "full", ratio: float = 1.0, seed: int = 0,
               train_mask=None) -> SparseGraph:
    """Remove ``floor(ratio * #candidates)`` heterophilous edges chosen uniformly.

    Candidates are edges whose endpoint labels differ. In ``"train"`` mode
    both endpoints must also lie in ``train_mask``.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidInput("ratio must lie in [0, 1]")
    if mode not in ("full", "train"):
        raise InvalidInput("mode must be 'full' or 'train'")
    y = np.asarray(y)
    edges = g.edge_array()
    ys, yd = y[edges[:, 0]], y[edges[:, 1]]
    cand = (ys != UNKNOWN) & (yd != UNKNOWN) & (ys != yd)
    if mode == "train":
        if train_mask is None:
            raise InvalidInput("train mode needs the training mask")
        tm = np.asarray(train_mask, dtype=bool)
        cand &= tm[edges[:, 0]] & tm[edges[:, 1]]
    idx = np.flatnonzero(cand)
    n_drop = int(np.floor(ratio * len(idx)))
    if n_drop == 0:
        return g
    rng = np.random.default_rng(seed)
    drop = rng.permutation(idx)[:n_drop]
    return remove_edges(g, edges[drop])


# --------------------------------------------------------------------- cells


@dataclass(frozen=True)
class Cell:
    experiment: str
    variant: str
    model_cfg: ModelConfig
    seed: int
    ratio: float | None = None
    clip_mode: str | None = None
    fractions: tuple = (0.4, 0.2, 0.4)
    train_overrides: dict = field(default_factory=dict, hash=False)

    def key(self):
        return (self.experiment, self.variant, -1.0 if self.ratio is None else self.ratio,
                self.model_cfg.C, flags_of(self.model_cfg), self.seed)


def run_cell(ds: Dataset, cell: Cell, train_cfg: TrainConfig) -> dict:
    t0 = time.perf_counter()
    splits = make_split(ds.labels, cell.fractions, seed=cell.seed)
    if cell.ratio is not None:
        g = clip_edges(ds.graph, ds.labels, cell.clip_mode, cell.ratio,
                       seed=cell.seed, train_mask=splits.train)
        ds = Dataset(g, ds.features, ds.labels, ds.name)
    tc = replace(train_cfg, seed=cell.seed, **cell.train_overrides)
    _, report = train(ds, splits, cell.model_cfg, tc)
    wall = (time.perf_counter() - t0) * 1000 if train_cfg.record_timing else 0.0
    return {
        "experiment": cell.experiment,
        "variant": cell.variant,
        "ratio": cell.ratio,
        "C": cell.model_cfg.C,
        "flags": flags_of(cell.model_cfg),
        "seed": cell.seed,
        "f1_macro": report.f1_macro,
        "auc": report.auc,
        "wall_ms": round(wall, 3),
    }


def _run_one(args):
    return run_cell(*args)


def run_cells(ds: Dataset, cells, train_cfg: TrainConfig, workers: int = 1) -> list[dict]:
    cells = sorted(cells, key=Cell.key)
    if workers <= 1 or len(cells) <= 1:
        rows = [run_cell(ds, c, train_cfg) for c in cells]
    else:
        # spawn avoids forking a process that may hold BLAS threads
        with ProcessPoolExecutor(min(workers, len(cells)), mp_context=get_context("spawn")) as pool:
            rows = list(pool.map(_run_one, [(ds, c, train_cfg) for c in cells]))
    return rows


# ---------------------------------------------------------------- harnesses


@dataclass(frozen=True)
class ClipExperimentConfig:
    mode: str = "full"
    ratios: tuple = (0.0, 0.25, 0.5, 0.75, 1.0)
    variants: tuple = ("lowpass", "highpass", "bandpass")
    seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if list(self.ratios) != sorted(self.ratios):
            raise InvalidInput("ratios must be sorted ascending")
        if any(not 0.0 <= r <= 1.0 for r in self.ratios):
            raise InvalidInput("ratios must lie in [0, 1]")
        unknown = set(self.variants) - set(FILTER_VARIANTS)
        if unknown:
            raise InvalidInput(f"unknown filter variants {sorted(unknown)}")
        if self.mode not in ("full", "train"):
            raise InvalidInput("mode must be 'full' or 'train'")


def variant_config(name: str, base: ModelConfig = ModelConfig()) -> ModelConfig:
    return replace(base, **FILTER_VARIANTS[name])


def run_clip_experiment(ds: Dataset, cfg: ClipExperimentConfig = ClipExperimentConfig(),
                        train_cfg: TrainConfig = TrainConfig(), workers: int = 1,
                        model_cfg: ModelConfig = ModelConfig()) -> list[dict]:
    cells = [Cell("clip", v, variant_config(v, model_cfg), s, ratio=float(r), clip_mode=cfg.mode)
             for v in cfg.variants for r in cfg.ratios for s in cfg.seeds]
    return run_cells(ds, cells, train_cfg, workers)


def run_order_sweep(ds: Dataset, C_values=(1, 2, 3, 4, 5, 6), seeds=(0, 1, 2, 3, 4),
                    model_cfg: ModelConfig = ModelConfig(), train_cfg: TrainConfig = TrainConfig(),
                    workers: int = 1) -> list[dict]:
    cells = [Cell("order", "full", replace(model_cfg, C=int(C)), s) for C in C_values for s in seeds]
    return run_cells(ds, cells, train_cfg, workers)


def run_ablation(ds: Dataset, seeds=(0, 1, 2, 3, 4), model_cfg: ModelConfig = ModelConfig(),
                 train_cfg: TrainConfig = TrainConfig(), workers: int = 1) -> list[dict]:
    cells = [Cell("ablation", name, replace(model_cfg, **flags), s)
             for name, flags in ABLATIONS.items() for s in seeds]
    rows = run_cells(ds, cells, train_cfg, workers)
    order = list(ABLATIONS)
    return sorted(rows, key=lambda r: (order.index(r["variant"]), r["seed"]))


# ------------------------------------------------------------------ outputs


def summarize(rows, by=("variant",), metric="auc"):
    """Group rows and report mean, sample sd and median of ``metric``."""
    groups: dict = {}
    for r in rows:
        groups.setdefault(tuple(r[k] for k in by), []).append(r[metric])
    out = {}
    for key, vals in groups.items():
        v = np.asarray(vals, dtype=np.float64)
        out[key] = {
            "mean": float(v.mean()),
            "sd": float(v.std(ddof=1)) if len(v) > 1 else 0.0,
            "median": float(np.median(v)),
            "n": len(v),
        }
    return out


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for r in rows:
        w.writerow([_fmt(r.get(k)) for k in CSV_FIELDS])
    return buf.getvalue()


def read_csv_rows(text: str) -> list[dict]:
    rows = []
    for r in csv.DictReader(io.StringIO(text)):
        rows.append({
            **r,
            "ratio": float(r["ratio"]) if r["ratio"] else None,
            "C": int(r["C"]),
            "seed": int(r["seed"]),
            "f1_macro": float(r["f1_macro"]),
            "auc": float(r["auc"]),
            "wall_ms": float(r["wall_ms"]),
        })
    return rows
