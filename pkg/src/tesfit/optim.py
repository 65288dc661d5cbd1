"""SGD with momentum, cosine decay, the training loop, and grid search.

The cosine schedule is indexed by global step.  Per-step learning rates
and effective gradient norms are recorded for every parameter group so
the bound verifiers can replay a run's budget.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import FeatureDataset, TextProxySet
from .errors import FormatError, ParameterError, ShapeError, TrainingError
from .losses import LOSS_KINDS, PROXY_LOSSES, Hyperparams, TextContext, evaluate_objective
from .metrics import evaluate
from .model import ModelSnapshot, TesModel
from .rng import SHUFFLE_STREAM, SplitMix64

LR_GRID = tuple(10.0 ** (-4.0 + 0.5 * k) for k in range(7))
WD_GRID = tuple(10.0 ** (-6.0 + 0.5 * k) for k in range(7))
LAMBDA_T_GRID = (0.1, 0.3, 0.5, 0.7, 0.9, 1.1, 1.3, 1.5)


@dataclass
class TrainConfig:
    """Loop hyperparameters; learning rates are per parameter group."""

    eta0_classifier: float = 0.01
    eta0_backbone: float = 0.001
    eta0_head: float = 0.01
    epochs: int = 100
    batch_size: int = 256
    momentum: float = 0.9
    weight_decay: float | None = None
    weight_decay_groups: tuple[str, ...] | None = None  # None = every group
    seed: int = 0
    loss_kind: str = "CE"
    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    snapshot_every: int | None = None

    def __post_init__(self):
        if self.epochs < 1:
            raise ParameterError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ParameterError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.momentum < 1.0:
            raise ParameterError(f"momentum must be in [0,1), got {self.momentum}")
        for name in ("eta0_classifier", "eta0_backbone", "eta0_head"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if self.weight_decay is not None and self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.loss_kind not in LOSS_KINDS:
            raise ParameterError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")

    def eta0_for(self, group: str) -> float:
        return {
            "adapter": self.eta0_backbone,
            "classifier": self.eta0_classifier,
            "head": self.eta0_head,
        }[group]


@dataclass
class TrainingTrace:
    """Everything the bound verifiers need to replay a run's budget."""

    groups: list[str]
    momentum: float
    eta0: dict[str, float]
    seed: int
    loss_kind: str
    lrs: dict[str, list[float]] = field(default_factory=dict)
    grad_norms: dict[str, list[float]] = field(default_factory=dict)
    epoch_train_loss: list[float] = field(default_factory=list)
    epoch_val_top1: list[float] = field(default_factory=list)
    initial: ModelSnapshot | None = None
    final: ModelSnapshot | None = None
    periodic: list[tuple[int, ModelSnapshot]] = field(default_factory=list)

    @property
    def steps(self) -> int:
        return len(self.lrs[self.groups[0]]) if self.groups else 0

    def lr_sum(self, group: str) -> float:
        return float(np.sum(self.lrs[group]))

    def max_grad_norm(self, group: str) -> float:
        return float(np.max(self.grad_norms[group])) if self.grad_norms[group] else 0.0

    def save(self, path, snapshot_dir=None) -> None:
        """Write trace JSON plus companion snapshot files."""
        path = Path(path)
        directory = Path(snapshot_dir) if snapshot_dir else path.parent
        init_name = path.stem + "_initial.tesm"
        final_name = path.stem + "_final.tesm"
        self.initial.save(directory / init_name)
        self.final.save(directory / final_name)
        doc = {
            "version": 1,
            "groups": self.groups,
            "momentum": self.momentum,
            "eta0": self.eta0,
            "seed": self.seed,
            "loss_kind": self.loss_kind,
            "lrs": self.lrs,
            "grad_norms": self.grad_norms,
            "epoch_train_loss": self.epoch_train_loss,
            "epoch_val_top1": self.epoch_val_top1,
            "initial_snapshot": init_name,
            "final_snapshot": final_name,
        }
        path.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "TrainingTrace":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FormatError(f"trace file {path} is not valid JSON: {exc}") from exc
        required = {"groups", "momentum", "eta0", "lrs", "grad_norms",
                    "initial_snapshot", "final_snapshot"}
        missing = required - doc.keys()
        if missing:
            raise FormatError(f"trace file {path} lacks keys {sorted(missing)}")
        trace = cls(
            groups=list(doc["groups"]),
            momentum=float(doc["momentum"]),
            eta0={k: float(v) for k, v in doc["eta0"].items()},
            seed=int(doc.get("seed", 0)),
            loss_kind=str(doc.get("loss_kind", "CE")),
            lrs={k: [float(x) for x in v] for k, v in doc["lrs"].items()},
            grad_norms={k: [float(x) for x in v] for k, v in doc["grad_norms"].items()},
            epoch_train_loss=[float(x) for x in doc.get("epoch_train_loss", [])],
            epoch_val_top1=[float(x) for x in doc.get("epoch_val_top1", [])],
        )
        trace.initial = ModelSnapshot.load(path.parent / doc["initial_snapshot"])
        trace.final = ModelSnapshot.load(path.parent / doc["final_snapshot"])
        return trace


def cosine_lr(t: int, total: int, eta0: float) -> float:
    """eta0 * 0.5 * (1 + cos(pi t / T)); t may run from 0 to T inclusive."""
    if total < 1:
        raise ParameterError(f"total steps must be >= 1, got {total}")
    if t < 0 or t > total:
        raise ParameterError(f"step {t} outside [0, {total}]")
    return eta0 * 0.5 * (1.0 + math.cos(math.pi * t / total))


def sgd_step(
    params: np.ndarray,
    grads: np.ndarray,
    lr: float,
    momentum: float,
    weight_decay: float,
    velocity: np.ndarray,
):
    """One SGD update on flat vectors; returns (params, velocity, step_norm).

    step_norm is the Frobenius norm of the effective gradient
    (grad + wd * param) before the momentum mix, which is what the
    displacement bounds consume on momentum-free runs.
    """
    if params.shape != grads.shape or params.shape != velocity.shape:
        raise ShapeError("params, grads, and velocity must share a shape")
    if not np.all(np.isfinite(grads)):
        raise TrainingError("non-finite gradient")
    effective = grads + weight_decay * params if weight_decay else grads
    velocity = momentum * velocity + effective
    params = params - lr * velocity
    return params, velocity, float(np.linalg.norm(effective))


def train(
    config: TrainConfig,
    train_ds: FeatureDataset,
    val_ds: FeatureDataset | None,
    model: TesModel,
    proxies: TextProxySet | None = None,
) -> tuple[TesModel, TrainingTrace]:
    """Mini-batch SGD over the configured objective.

    Shuffles per epoch with a seeded stream, keeps the last partial batch,
    indexes the cosine schedule by global step, and applies a separate
    initial learning rate per parameter group.  Validation accuracy is
    computed on the inference path only (the projection head is dropped).
    """
    if train_ds.n == 0:
        raise ParameterError("training dataset is empty")
    needs_proxies = config.loss_kind in PROXY_LOSSES
    if needs_proxies and proxies is None:
        raise ParameterError(f"loss {config.loss_kind} requires text proxies")
    if not needs_proxies and proxies is not None:
        raise ParameterError(f"loss {config.loss_kind} does not take text proxies")
    if train_ds.features.shape[1] != (
        model.adapter.a.shape[0] if model.adapter is not None else model.classifier.dim
    ):
        raise ShapeError("training features do not match the model input dim")

    hp = config.hyperparams
    text = TextContext.build(proxies.z, hp) if needs_proxies else None
    groups = list(model.groups().keys())
    wd_groups = set(groups if config.weight_decay_groups is None else config.weight_decay_groups)
    wd = config.weight_decay or 0.0

    n = train_ds.n
    steps_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * steps_per_epoch

    trace = TrainingTrace(
        groups=groups,
        momentum=config.momentum,
        eta0={g: config.eta0_for(g) for g in groups},
        seed=config.seed,
        loss_kind=config.loss_kind,
        lrs={g: [] for g in groups},
        grad_norms={g: [] for g in groups},
    )
    trace.initial = model.snapshot("initial")

    rng = SplitMix64.stream(config.seed, SHUFFLE_STREAM)
    velocity = {g: np.zeros_like(model.get_flat(g)) for g in groups}
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for b in range(steps_per_epoch):
            batch = order[b * config.batch_size : (b + 1) * config.batch_size]
            out = evaluate_objective(
                config.loss_kind, model, train_ds.features[batch], train_ds.labels[batch], hp, text
            )
            if not np.isfinite(out.value):
                raise TrainingError(
                    f"non-finite loss {out.value} at step {step} (epoch {epoch})"
                )
            epoch_loss += out.value * batch.size
            for g in groups:
                lr = cosine_lr(step, total_steps, config.eta0_for(g))
                group_wd = wd if g in wd_groups else 0.0
                try:
                    params, velocity[g], norm = sgd_step(
                        model.get_flat(g), out.grads[g], lr, config.momentum,
                        group_wd, velocity[g],
                    )
                except TrainingError as exc:
                    raise TrainingError(f"{exc} in group {g!r} at step {step}") from exc
                model.set_flat(g, params)
                trace.lrs[g].append(lr)
                trace.grad_norms[g].append(norm)
            step += 1
            if config.snapshot_every and step % config.snapshot_every == 0:
                trace.periodic.append((step, model.snapshot(f"step{step}")))
        trace.epoch_train_loss.append(epoch_loss / n)
        if val_ds is not None and val_ds.n:
            preds = model.predict(val_ds.features)
            trace.epoch_val_top1.append(evaluate(preds, val_ds.labels, val_ds.n_classes).top1)
    trace.final = model.snapshot("final")
    return model, trace


# --- grid search ------------------------------------------------------------


def grid_search(
    config: TrainConfig,
    train_ds: FeatureDataset,
    val_ds: FeatureDataset,
    model_factory,
    proxies: TextProxySet | None = None,
    search_weight_decay: bool = False,
    search_lambda_t: bool = False,
    lr_grid=LR_GRID,
):
    """Exhaustive search over the protocol grids.

    The learning-rate value is applied to all three groups.  Weight decay
    adds the seven log-spaced values plus "off"; the lambda_t grid is the
    eight-point sweep.  Each cell trains a fresh model with a derived seed
    (base seed + cell index); ties in validation accuracy prefer the
    smaller learning rate.
    """
    if val_ds is None or val_ds.n == 0:
        raise ParameterError("grid search needs a nonempty validation set")
    wd_options = ((None,) + WD_GRID) if search_weight_decay else (config.weight_decay,)
    lt_options = LAMBDA_T_GRID if search_lambda_t else (config.hyperparams.lambda_t,)
    rows = []
    best = None
    for cell, (lr, wd_opt, lt) in enumerate(itertools.product(lr_grid, wd_options, lt_options)):
        hp = replace(config.hyperparams, lambda_t=lt)
        cell_config = replace(
            config,
            eta0_classifier=lr,
            eta0_backbone=lr,
            eta0_head=lr,
            weight_decay=wd_opt,
            hyperparams=hp,
            seed=config.seed + cell,
        )
        model = model_factory(cell_config)
        _, trace = train(cell_config, train_ds, val_ds, model, proxies)
        row = {
            "cell": cell,
            "lr": lr,
            "weight_decay": "" if wd_opt is None else wd_opt,
            "lambda_t": lt,
            "epochs": cell_config.epochs,
            "batch_size": cell_config.batch_size,
            "momentum": cell_config.momentum,
            "loss_kind": cell_config.loss_kind,
            "seed": cell_config.seed,
            "final_train_loss": trace.epoch_train_loss[-1],
            "val_top1": trace.epoch_val_top1[-1],
        }
        rows.append(row)
        key = (-row["val_top1"], lr, wd_opt if wd_opt is not None else -1.0, lt)
        if best is None or key < best[0]:
            best = (key, cell_config)
    return best[1], rows


GRID_CSV_COLUMNS = [
    "cell", "lr", "weight_decay", "lambda_t", "epochs", "batch_size",
    "momentum", "loss_kind", "seed", "final_train_loss", "val_top1",
]


def write_grid_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GRID_CSV_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)
