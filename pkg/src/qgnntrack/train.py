"""Loss, Adam, k-fold cross-validation and confusion-matrix metrics.

One event graph is one optimizer step. Per-epoch metrics are recorded for the
training and validation splits of every fold; the training record of an epoch
is measured with the parameters reached at the end of that epoch, so it can be
reproduced later from the saved checkpoint.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .events import Event, subsample_pileup
from .graphs import CutConfig, EventGraph, graph_from_event
from .model import FEATURE_SCALE, GNNParams, get_variant, gnn_forward, init_params, predict

LOSS_CLAMP = 1e-12
METRIC_NAMES = ("accuracy", "precision", "recall", "specificity")
CSV_COLUMNS = ("fold", "epoch", "split", "loss") + METRIC_NAMES


class TrainingDiverged(RuntimeError):
    """The loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    variant: str = "upgraded_cgnn"
    learning_rate: float = 0.01
    epochs: int = 50
    k_folds: int = 5
    train_set_size: int = 45
    threshold: float = 0.5
    seed: int = 0
    n_iter: int = 3
    folds: tuple[int, ...] | None = None  # subset of folds to run; None runs all
    feature_scale: tuple[float, float, float] = FEATURE_SCALE
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.k_folds < 2:
            raise ValueError("k_folds must be at least 2")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be non-negative")
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        get_variant(self.variant)
        object.__setattr__(self, "feature_scale", tuple(float(v) for v in self.feature_scale))
        if len(self.feature_scale) != 3 or not all(v > 0 for v in self.feature_scale):
            raise ValueError("feature_scale must be three positive numbers")
        if self.folds is not None:
            object.__setattr__(self, "folds", tuple(int(f) for f in self.folds))
            bad = [f for f in self.folds if not 0 <= f < self.k_folds]
            if bad:
                raise ValueError(f"fold indices {bad} outside [0, {self.k_folds})")


@dataclass(frozen=True)
class MetricsRecord:
    epoch: int
    split: str
    loss: float
    accuracy: float
    precision: float
    recall: float
    specificity: float
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0
    undefined: tuple[str, ...] = ()

    def metrics(self) -> dict[str, float]:
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass
class FoldResult:
    fold: int
    train_ids: list[int]
    val_ids: list[int]
    history: list[MetricsRecord] = field(default_factory=list)
    params: GNNParams | None = None
    checkpoint: str | None = None

    @property
    def final(self) -> MetricsRecord:
        return [r for r in self.history if r.split == "val"][-1]

    def curve(self, split: str, metric: str) -> np.ndarray:
        return np.array([getattr(r, metric) for r in self.history if r.split == split])


# --- loss and metrics ------------------------------------------------------

def bce_loss(scores: ad.Tensor, y) -> ad.Tensor:
    """Mean binary cross-entropy with scores clamped to ``[1e-12, 1 - 1e-12]``."""
    y = np.asarray(y, dtype=float).reshape(-1)
    s = scores.value.reshape(-1)
    if s.shape != y.shape:
        raise ValueError(f"{s.size} scores for {y.size} labels")
    n = max(y.size, 1)
    c = np.clip(s, LOSS_CLAMP, 1.0 - LOSS_CLAMP)
    loss = -np.sum(y * np.log(c) + (1.0 - y) * np.log1p(-c)) / n
    inside = (s > LOSS_CLAMP) & (s < 1.0 - LOSS_CLAMP)

    def vjp(g):
        d = np.where(inside, (c - y) / (c * (1.0 - c)), 0.0) / n
        return ((g * d).reshape(scores.shape),)

    return ad.make_node(loss, (scores,), vjp)


def confusion_counts(scores, y, threshold: float = 0.5) -> tuple[int, int, int, int]:
    pred = np.asarray(scores, dtype=float).reshape(-1) >= threshold
    truth = np.asarray(y).reshape(-1) > 0.5
    tp = int(np.sum(pred & truth))
    tn = int(np.sum(~pred & ~truth))
    fp = int(np.sum(pred & ~truth))
    fn = int(np.sum(~pred & truth))
    return tp, tn, fp, fn


def metrics_from_counts(tp: int, tn: int, fp: int, fn: int) -> tuple[dict[str, float], tuple[str, ...]]:
    """The four ratios; an empty denominator yields 1 and names the metric in the flag tuple."""
    ratios = {
        "accuracy": (tp + tn, tp + tn + fp + fn),
        "precision": (tp, tp + fp),
        "recall": (tp, tp + fn),
        "specificity": (tn, tn + fp),
    }
    out, undefined = {}, []
    for name, (num, den) in ratios.items():
        if den == 0:
            out[name] = 1.0
            undefined.append(name)
        else:
            out[name] = num / den
    return out, tuple(undefined)


def confusion_metrics(scores, y, threshold: float = 0.5) -> tuple[float, float, float, float]:
    m, _ = metrics_from_counts(*confusion_counts(scores, y, threshold))
    return tuple(m[k] for k in METRIC_NAMES)


# --- optimizer -------------------------------------------------------------

@dataclass
class Adam:
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        if set(params) != set(grads):
            raise ValueError("gradients do not match parameters")
        self.step_count += 1
        t = self.step_count
        for k in sorted(params):
            g = grads[k]
            m = self.m.get(k, 0.0) * self.beta1 + (1 - self.beta1) * g
            v = self.v.get(k, 0.0) * self.beta2 + (1 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            m_hat = m / (1 - self.beta1 ** t)
            v_hat = v / (1 - self.beta2 ** t)
            params[k] -= self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


# --- cross-validation ------------------------------------------------------

def kfold_split(n: int, k: int, seed: int = 0) -> list[tuple[np.ndarray, np.ndarray]]:
    """Shuffled partition of ``range(n)`` into ``k`` near-equal validation folds."""
    if k < 2:
        raise ValueError("k must be at least 2")
    if k > n:
        raise ValueError(f"cannot split {n} items into {k} folds")
    perm = np.random.default_rng(seed).permutation(n)
    folds = np.array_split(perm, k)
    out = []
    for i, val in enumerate(folds):
        train = np.concatenate([f for j, f in enumerate(folds) if j != i])
        out.append((train, val))
    return out


def evaluate(graphs: Sequence[EventGraph], params: GNNParams, threshold: float = 0.5,
             epoch: int = 0, split: str = "val") -> MetricsRecord:
    """Edge-weighted loss and pooled confusion metrics over a set of graphs."""
    total_loss, total_edges = 0.0, 0
    counts = np.zeros(4, dtype=np.int64)
    for g in graphs:
        if g.n_edges == 0:
            continue
        s = predict(g, params)
        total_loss += float(bce_loss(ad.Tensor(s), g.y).value) * g.n_edges
        total_edges += g.n_edges
        counts += confusion_counts(s, g.y, threshold)
    tp, tn, fp, fn = (int(c) for c in counts)
    m, undefined = metrics_from_counts(tp, tn, fp, fn)
    loss = total_loss / total_edges if total_edges else 0.0
    return MetricsRecord(epoch, split, loss, tp=tp, tn=tn, fp=fp, fn=fn, undefined=undefined, **m)


def train_step(graph: EventGraph, params: GNNParams, opt: Adam) -> float:
    params.zero_grad()
    try:
        loss = bce_loss(gnn_forward(graph, params), graph.y)
        value = float(loss.value)
        if not math.isfinite(value):
            raise TrainingDiverged(f"loss is {value} on event {graph.event_id}")
        ad.backward(loss)
    except ad.NonFiniteError as exc:
        raise TrainingDiverged(f"{exc} on event {graph.event_id}") from None
    arrays = params.arrays()
    opt.step(arrays, params.grads())
    return value


def train_fold(train_graphs: Sequence[EventGraph], val_graphs: Sequence[EventGraph], config: TrainConfig,
               fold: int = 0, on_record: Callable[[int, MetricsRecord], None] | None = None
               ) -> tuple[GNNParams, list[MetricsRecord]]:
    """Train one fold from a seeded initialization; epoch 0 is the untrained model."""
    variant = get_variant(config.variant).with_iterations(config.n_iter)
    params = init_params(variant, np.random.default_rng([config.seed, fold, 0]), feature_scale=config.feature_scale)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.eps)
    order_rng = np.random.default_rng([config.seed, fold, 1])
    usable = [g for g in train_graphs if g.n_edges > 0]
    history: list[MetricsRecord] = []

    def record(epoch):
        for split, graphs in (("train", train_graphs), ("val", val_graphs)):
            try:
                rec = evaluate(graphs, params, config.threshold, epoch, split)
            except ad.NonFiniteError as exc:
                raise TrainingDiverged(f"fold {fold}: {exc} on {split} split at epoch {epoch}") from None
            if not math.isfinite(rec.loss):
                raise TrainingDiverged(f"fold {fold}: {split} loss is {rec.loss} at epoch {epoch}")
            history.append(rec)
            if on_record is not None:
                on_record(fold, rec)

    record(0)
    for epoch in range(1, config.epochs + 1):
        for i in order_rng.permutation(len(usable)):
            try:
                train_step(usable[i], params, opt)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"fold {fold}, epoch {epoch}: {exc}") from None
        record(epoch)
    return params, history


def _run_fold(args):
    graphs, train_idx, val_idx, config, fold = args
    params, history = train_fold([graphs[i] for i in train_idx], [graphs[i] for i in val_idx], config, fold)
    return params.arrays(), history


def train_model(graphs: Sequence[EventGraph], config: TrainConfig, threads: int = 1,
                on_record: Callable[[int, MetricsRecord], None] | None = None) -> list[FoldResult]:
    """k-fold cross-validation over the first ``train_set_size`` graphs.

    With ``threads > 1`` folds run in worker processes; results are returned in
    fold order either way, and ``on_record`` is then called after each fold ends.
    """
    graphs = list(graphs)[: config.train_set_size]
    splits = kfold_split(len(graphs), config.k_folds, config.seed)
    folds = config.folds if config.folds is not None else tuple(range(config.k_folds))
    ids = [g.event_id for g in graphs]
    variant = get_variant(config.variant).with_iterations(config.n_iter)
    results = []
    if threads > 1 and len(folds) > 1:
        jobs = [(graphs, splits[f][0], splits[f][1], config, f) for f in folds]
        with ProcessPoolExecutor(max_workers=min(threads, len(folds))) as pool:
            outputs = list(pool.map(_run_fold, jobs))
        for f, (arrays, history) in zip(folds, outputs):
            if on_record is not None:
                for rec in history:
                    on_record(f, rec)
            results.append(FoldResult(f, [ids[i] for i in splits[f][0]], [ids[i] for i in splits[f][1]],
                                      history, GNNParams.from_arrays(variant, arrays, config.feature_scale)))
        return results
    for f in folds:
        train_idx, val_idx = splits[f]
        params, history = train_fold([graphs[i] for i in train_idx], [graphs[i] for i in val_idx],
                                     config, f, on_record)
        results.append(FoldResult(f, [ids[i] for i in train_idx], [ids[i] for i in val_idx], history, params))
    return results


def pileup_graphs(events: Sequence[Event], mu: int, cuts: CutConfig = CutConfig(), seed: int = 0) -> list[EventGraph]:
    """Graphs of ``events`` thinned to ``mu`` vertices each.

    Each event has its own generator seeded by ``(seed, event_id)``, so the
    retained vertex sets are nested across ``mu``.
    """
    return [graph_from_event(subsample_pileup(ev, mu, np.random.default_rng([seed, ev.event_id])), cuts)
            for ev in events]


def pileup_sweep(events: Sequence[Event], mus: Sequence[int], config: TrainConfig, cuts: CutConfig = CutConfig(),
                 threads: int = 1) -> dict[int, list[FoldResult]]:
    return {int(mu): train_model(pileup_graphs(events, int(mu), cuts, config.seed), config, threads)
            for mu in sorted(mus)}


# --- outputs ---------------------------------------------------------------

def metrics_rows(fold: int, records: Sequence[MetricsRecord]) -> list[dict]:
    return [{"fold": fold, "epoch": r.epoch, "split": r.split, "loss": r.loss,
             **{k: getattr(r, k) for k in METRIC_NAMES}} for r in records]


def write_metrics_csv(path, results: Sequence[FoldResult]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        for res in results:
            writer.writerows(metrics_rows(res.fold, res.history))


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["fold"], row["epoch"] = int(row["fold"]), int(row["epoch"])
        for k in ("loss",) + METRIC_NAMES:
            row[k] = float(row[k])
    return rows


def summarize(results: Sequence[FoldResult], config: TrainConfig | None = None) -> dict:
    """k-fold means and standard deviations of the final validation record."""
    finals = [r.final for r in results]
    out = {"n_folds": len(finals), "folds": [r.fold for r in results]}
    for k in ("loss",) + METRIC_NAMES:
        vals = np.array([getattr(f, k) for f in finals])
        out[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    out["undefined"] = sorted({u for f in finals for u in f.undefined})
    if config is not None:
        out["config"] = {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()}
    return out


def write_summary(path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, indent=2, sort_keys=True))
