"""Full-batch training and evaluation of the detector."""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass, fields

import numpy as np

from .data import Dataset, MetricsReport, SplitMasks, standardize
from .errors import Diverged, InvalidInput
from .graph import UNKNOWN
from .metrics import auc, f1_macro
from .model import GraphContext, ModelConfig, SecGfdParams, class_weight, forward, init_params, objective
from .nn import Adam


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    lr: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0
    patience: int | None = None
    threshold: float = 0.5
    record_timing: bool = False

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInput("epochs must be >= 1")
        if self.lr <= 0:
            raise InvalidInput("learning rate must be positive")
        if self.patience is not None and self.patience < 1:
            raise InvalidInput("patience must be >= 1")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise InvalidInput(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


class TrainedModel:
    """Parameters plus the graph context and feature scaling they were fit with."""

    def __init__(self, cfg: ModelConfig, params: SecGfdParams, mean, std, ctx=None):
        self.cfg = cfg
        self.params = params
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)
        self._ctx = ctx

    def scale(self, X):
        return (np.asarray(X, dtype=np.float64) - self.mean) / self.std

    def context(self, ds: Dataset) -> GraphContext:
        if self._ctx is None or self._ctx.graph is not ds.graph and self._ctx.graph != ds.graph:
            self._ctx = GraphContext(ds.graph, self.scale(ds.features), self.cfg)
        return self._ctx

    def predict_proba(self, ds: Dataset) -> np.ndarray:
        return forward(self.params, self.context(ds), self.scale(ds.features)).probs

    def state(self):
        st = {f"param_{k}": v for k, v in self.params.state().items()}
        st["feature_mean"] = self.mean
        st["feature_std"] = self.std
        return st

    @classmethod
    def from_state(cls, cfg: ModelConfig, state):
        params = SecGfdParams.from_state({k[6:]: v for k, v in state.items() if k.startswith("param_")})
        return cls(cfg, params, state["feature_mean"], state["feature_std"])


def _metrics(probs, labels, mask, threshold):
    mask = np.asarray(mask, dtype=bool) & (labels != UNKNOWN)
    p, y = probs[mask], labels[mask]
    return f1_macro(p >= threshold, y), auc(p, y)


def evaluate(model: TrainedModel, ds: Dataset, mask, threshold: float = 0.5,
             seed: int = 0) -> MetricsReport:
    """F1-macro at a fixed threshold and AUC on the masked labelled nodes."""
    probs = model.predict_proba(ds)
    f1, a = _metrics(probs, ds.labels, mask, threshold)
    return MetricsReport(f1_macro=f1, auc=a, seed=seed, config={"model": model.cfg.to_dict()},
                         extra={"n_eval": int(np.sum(np.asarray(mask, bool) & (ds.labels != UNKNOWN)))})


def _all_finite(params):
    return all(np.all(np.isfinite(p.value)) for p in params)


def train(ds: Dataset, splits: SplitMasks, model_cfg: ModelConfig = ModelConfig(),
          train_cfg: TrainConfig = TrainConfig()) -> tuple[TrainedModel, MetricsReport]:
    """Adam on the combined objective, full batch, for ``train_cfg.epochs`` epochs.

    Feature scaling uses training-set statistics. The filter operators and
    the KNN view are built once before the loop. With ``patience`` set, the
    parameters with the best validation AUC are kept and training stops after
    ``patience`` epochs without improvement.
    """
    t0 = time.perf_counter()
    y = ds.labels
    train_mask = np.asarray(splits.train, dtype=bool)
    delta = class_weight(y, train_mask, model_cfg.delta_mode)
    X, mean, std = standardize(ds.features, train_mask)
    ctx = GraphContext(ds.graph, X, model_cfg)
    rng = np.random.default_rng(train_cfg.seed)
    params = init_params(model_cfg, X.shape[1], rng)
    plist = params.as_list()
    opt = Adam(plist, lr=train_cfg.lr, weight_decay=train_cfg.weight_decay)
    model = TrainedModel(model_cfg, params, mean, std, ctx)

    history = {"loss": [], "hybrid": [], "env": []}
    if train_cfg.patience is not None:
        history["val_auc"] = []
    best = (-np.inf, None, 0)
    for epoch in range(1, train_cfg.epochs + 1):
        opt.zero_grad()
        fw, parts = objective(params, ctx, X, y, train_mask, delta)
        loss = float(parts.total.value)
        if not np.isfinite(loss):
            raise Diverged(epoch)
        fw.tape.backward(parts.total)
        opt.step()
        if not _all_finite(plist):
            raise Diverged(epoch, "non-finite parameter")
        history["loss"].append(loss)
        history["hybrid"].append(parts.hybrid)
        history["env"].append(parts.env if np.isfinite(parts.env) else 0.0)
        if train_cfg.patience is not None:
            _, va = _metrics(model.predict_proba(ds), y, splits.val, train_cfg.threshold)
            history["val_auc"].append(va)
            if va > best[0]:
                best = (va, params.state(), epoch)
            elif epoch - best[2] >= train_cfg.patience:
                break
    if train_cfg.patience is not None and best[1] is not None:
        for p in plist:
            p.value[...] = best[1][p.name]

    if not model_cfg.env_active:
        history.pop("env")
    probs = model.predict_proba(ds)
    f1, a = _metrics(probs, y, splits.test, train_cfg.threshold)
    vf1, va = _metrics(probs, y, splits.val, train_cfg.threshold) if np.any(splits.val) else (None, None)
    report = MetricsReport(
        f1_macro=f1,
        auc=a,
        seed=train_cfg.seed,
        config={"model": model_cfg.to_dict(), "train": train_cfg.to_dict(), "dataset": ds.name},
        history=history,
        extra={"val_f1_macro": vf1, "val_auc": va, "delta": delta,
               "epochs_run": len(history["loss"])},
        wall_time=time.perf_counter() - t0 if train_cfg.record_timing else None,
    )
    return model, report


