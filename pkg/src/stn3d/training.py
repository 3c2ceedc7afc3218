"""Optimization loop, evaluation, and the ablation drivers.

Batches are plain loops over shapes with gradient accumulation (shapes may
have different point counts), so one Adam step sees the average gradient of a
batch.  Everything downstream of the three seeds (dataset, init, shuffle) is
deterministic: shapes are visited in a seeded shuffle order and gradients
accumulate in that fixed order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autograd import Tensor, backward, no_grad, scale, softmax_cross_entropy
from .metrics import accuracy, miou
from .network import (
    Network,
    NetworkConfig,
    clone_params,
    freeze_transforms,
    init_params,
)
from .shapes import PARTS_PER_KIND, Dataset


class TrainingError(RuntimeError):
    """Non-finite gradient or other unrecoverable optimization failure."""


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    seed: int = 0
    freeze_transforms: bool = False

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.lr <= 0 or self.eps <= 0:
            raise ValueError("hyperparameters must be positive")
        if not (0 < self.betas[0] < 1 and 0 < self.betas[1] < 1):
            raise ValueError("betas must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "batch_size": self.batch_size, "lr": self.lr,
                "betas": list(self.betas), "eps": self.eps, "seed": self.seed,
                "freeze_transforms": self.freeze_transforms}


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(params: dict[str, Tensor]) -> AdamState:
    return AdamState(step=0,
                     m={n: np.zeros_like(p.data) for n, p in params.items()},
                     v={n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: dict[str, Tensor], state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update; consumes and clears the gradients."""
    state.step += 1
    b1, b2 = cfg.betas
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        if not p.requires_grad:
            p.grad = None
            continue
        grad = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient in parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * grad
        v *= b2
        v += (1.0 - b2) * grad * grad
        m_hat = m / correction1
        v_hat = v / correction2
        p.data -= cfg.lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        p.grad = None


# ---------------------------------------------------------------------------
# training and evaluation


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_loss: float
    val_metric: float


@dataclass
class RunReport:
    """Everything a finished run reports; serialized as JSON."""

    epochs: list[EpochStats]
    best_epoch: int
    metric_name: str
    test_metrics: dict
    wall_time_s: float
    network_config: dict
    train_config: dict
    dataset_config: dict
    diverged_at: int | None = None

    def to_dict(self) -> dict:
        return {
            "epochs": [vars(e) for e in self.epochs],
            "best_epoch": self.best_epoch,
            "metric_name": self.metric_name,
            "test_metrics": self.test_metrics,
            "wall_time_s": self.wall_time_s,
            "network_config": self.network_config,
            "train_config": self.train_config,
            "dataset_config": self.dataset_config,
            "diverged_at": self.diverged_at,
        }

    def metrics_dict(self) -> dict:
        """The deterministic part of the report (excludes wall time)."""
        d = self.to_dict()
        d.pop("wall_time_s")
        return d


@dataclass
class TrainResult:
    net_cfg: NetworkConfig
    params: dict[str, Tensor]
    report: RunReport


def _class_index(dataset: Dataset):
    return {kind: i for i, kind in enumerate(dataset.config.kinds)}


def _shape_loss(net: Network, dataset: Dataset, index: int, class_of: dict):
    cloud = dataset.shapes[index]
    if net.cfg.head == "segmentation":
        return softmax_cross_entropy(net.seg_logits(cloud), cloud.part_labels)
    target = np.array([class_of[dataset.kinds[index]]])
    return softmax_cross_entropy(net.cls_logits(cloud), target)


def evaluate(net_cfg: NetworkConfig, params: dict[str, Tensor], dataset: Dataset,
             split: str) -> dict:
    """mIoU (segmentation) or accuracy (classification) over a split.

    Never mutates parameters; metrics come per category and averaged.
    """
    net = Network(net_cfg, params)
    class_of = _class_index(dataset)
    indices = dataset.split_indices(split)
    if not indices:
        raise ValueError(f"split {split!r} is empty")
    per_kind: dict[str, list[float]] = {}
    losses = []
    with no_grad():
        for i in indices:
            cloud = dataset.shapes[i]
            kind = dataset.kinds[i]
            if net_cfg.head == "segmentation":
                logits = net.seg_logits(cloud)
                loss = softmax_cross_entropy(logits, cloud.part_labels)
                parts = PARTS_PER_KIND[kind]
                # predictions are taken within the category's own parts
                pred = np.argmax(logits.data[:parts], axis=0)
                value = miou(pred, cloud.part_labels, parts)
            else:
                target = np.array([class_of[kind]])
                logits = net.cls_logits(cloud)
                loss = softmax_cross_entropy(logits, target)
                value = accuracy(np.argmax(logits.data, axis=0), target)
            per_kind.setdefault(kind, []).append(value)
            losses.append(float(loss.data))
    metric_name = "miou" if net_cfg.head == "segmentation" else "accuracy"
    per_category = {k: float(np.mean(v)) for k, v in sorted(per_kind.items())}
    return {
        metric_name: float(np.mean([v for vals in per_kind.values() for v in vals])),
        "loss": float(np.mean(losses)),
        "per_category": per_category,
        "n_shapes": len(indices),
    }


def train(dataset: Dataset, net_cfg: NetworkConfig, train_cfg: TrainConfig) -> TrainResult:
    """Train end to end; the returned parameters are the best-validation snapshot."""
    t0 = time.perf_counter()
    params = init_params(net_cfg, seed=net_cfg.seed)
    if train_cfg.freeze_transforms:
        freeze_transforms(params)
    net = Network(net_cfg, params)
    state = adam_init(params)
    class_of = _class_index(dataset)
    metric_name = "miou" if net_cfg.head == "segmentation" else "accuracy"

    train_idx = dataset.split_indices("train")
    if not train_idx:
        raise ValueError("dataset has no training shapes")
    shuffle_rng = np.random.default_rng(np.random.SeedSequence((train_cfg.seed, 0x5EED)))

    epochs_log: list[EpochStats] = []
    best_metric, best_params, best_epoch = -np.inf, clone_params(params), -1
    diverged_at = None

    for epoch in range(train_cfg.epochs):
        order = shuffle_rng.permutation(len(train_idx))
        epoch_losses = []
        for start in range(0, len(order), train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            for j in batch:
                loss = _shape_loss(net, dataset, train_idx[int(j)], class_of)
                value = float(loss.data)
                if not np.isfinite(value):
                    diverged_at = epoch
                    break
                epoch_losses.append(value)
                backward(scale(loss, 1.0 / len(batch)))
            if diverged_at is not None:
                break
            adam_step(params, state, train_cfg)
        if diverged_at is not None:
            break

        val = evaluate(net_cfg, params, dataset, "val")
        epochs_log.append(EpochStats(epoch=epoch, train_loss=float(np.mean(epoch_losses)),
                                     val_loss=val["loss"], val_metric=val[metric_name]))
        if val[metric_name] > best_metric:
            best_metric, best_params, best_epoch = val[metric_name], clone_params(params), epoch

    test = evaluate(net_cfg, best_params, dataset, "test")
    report = RunReport(
        epochs=epochs_log,
        best_epoch=best_epoch,
        metric_name=metric_name,
        test_metrics=test,
        wall_time_s=time.perf_counter() - t0,
        network_config=net_cfg.to_dict(),
        train_config=train_cfg.to_dict(),
        dataset_config=dataset.config.to_dict(),
        diverged_at=diverged_at,
    )
    return TrainResult(net_cfg=net_cfg, params=best_params, report=report)


# ---------------------------------------------------------------------------
# ablation drivers


def _uniform_cfg(base: NetworkConfig, family: str, n_transformers: int,
                 feature_width: int) -> NetworkConfig:
    """base with every block's transformers replaced by a uniform set."""
    d = base.to_dict()
    for block in d["blocks"]:
        hidden = block["transformers"][0]["hidden"]
        block["transformers"] = [
            {"family": family, "feature_width": feature_width, "hidden": hidden}
            for _ in range(n_transformers)
        ]
    return NetworkConfig.from_dict(d)


def ablation_graphs(dataset: Dataset, base_cfg: NetworkConfig,
                    train_cfg: TrainConfig) -> list[dict]:
    """Sweep the transformer count per layer under two regimes.

    Regime one holds the sub-feature width at 32 while the number of graphs
    grows; regime two holds graphs x width at 64.  A fixed-graph baseline row
    anchors both regimes.
    """
    metric_name = "miou" if base_cfg.head == "segmentation" else "accuracy"

    def run(family, k, f):
        cfg = _uniform_cfg(base_cfg, family, k, f)
        result = train(dataset, cfg, train_cfg)
        return result.report.test_metrics[metric_name]

    rows = []
    fixed_score = {}
    for regime, pairs in (("f=32", [(1, 32), (2, 32), (4, 32)]),
                          ("k*f=64", [(1, 64), (2, 32), (4, 16)])):
        baseline_width = pairs[0][1]
        if baseline_width not in fixed_score:
            fixed_score[baseline_width] = run("fixed", 1, baseline_width)
        rows.append({"regime": regime, "graphs": "fixed", "feature_width": baseline_width,
                     metric_name: fixed_score[baseline_width]})
        for k, f in pairs:
            rows.append({"regime": regime, "graphs": k, "feature_width": f,
                         metric_name: run("deformable", k, f)})
    return rows


def ablation_layers(dataset: Dataset, base_cfg: NetworkConfig,
                    train_cfg: TrainConfig) -> list[dict]:
    """All transformers on, then one layer at a time demoted to fixed graphs."""
    metric_name = "miou" if base_cfg.head == "segmentation" else "accuracy"
    rows = []

    def run(cfg, label):
        result = train(dataset, cfg, train_cfg)
        rows.append({"removed_layer": label, metric_name: result.report.test_metrics[metric_name]})

    run(base_cfg, "none")
    for t in range(len(base_cfg.blocks)):
        d = base_cfg.to_dict()
        for tr in d["blocks"][t]["transformers"]:
            tr["family"] = "fixed"
        run(NetworkConfig.from_dict(d), f"layer{t + 1}")
    return rows


# ---------------------------------------------------------------------------
# run artifacts


def config_hash(*dicts: dict) -> str:
    payload = json.dumps(dicts, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(payload).hexdigest()[:8]


def run_dir_name(net_cfg: NetworkConfig, train_cfg: TrainConfig,
                 dataset_cfg_dict: dict) -> str:
    digest = config_hash(net_cfg.to_dict(), train_cfg.to_dict(), dataset_cfg_dict)
    return f"run-{digest}-s{train_cfg.seed}"


def write_report(report: RunReport, path) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def read_report(path) -> dict:
    return json.loads(Path(path).read_text())


def rows_to_csv(rows: list[dict], path) -> None:
    if not rows:
        raise ValueError("no rows to write")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
