"""Outer minimization: optimizers, the epoch loop, evaluation and selection."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from flaggnn import augment
from flaggnn.augment import OpCounter, StrategyConfig, Streams
from flaggnn.data import GraphDataset, NodeDataset, load_node_dataset
from flaggnn.errors import ConfigError, DatasetError, DivergenceError
from flaggnn.nn import Model, build_gcn, build_graph_classifier, build_mlp, forward

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adam"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.name not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be sgd or adam, got {self.name!r}")
        if not self.lr > 0:
            raise ValueError(f"learning rate must be positive, got {self.lr}")


@dataclass(frozen=True)
class ModelSpec:
    arch: str = "gcn"            # gcn | mlp | graph-gcn
    hidden: tuple = (16,)
    dropout: float = 0.5
    emb_dim: int = 16            # graph-gcn only
    readout: str = "mean"        # graph-gcn only


@dataclass(frozen=True)
class DataSpec:
    graph: str | None = None
    features: str | None = None
    labels: str | None = None
    split: str | None = None
    noise_sigma: float = 0.0


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    seed: int = 0
    free_budget: bool = False
    eval_every: int = 1
    strategy: StrategyConfig = field(default_factory=lambda: StrategyConfig(kind="clean"))
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    model: ModelSpec = field(default_factory=ModelSpec)
    data: DataSpec = field(default_factory=DataSpec)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")

    @property
    def effective_epochs(self) -> int:
        if self.free_budget:
            return math.ceil(self.epochs / self.strategy.M)
        return self.epochs


# --------------------------------------------------------------------------- optimizers

@dataclass
class OptimizerState:
    step: int = 0
    m: list | None = None
    v: list | None = None


def optimizer_update(params: list, grads: list, state: OptimizerState, cfg: OptimizerConfig):
    """Return (new_params, new_state); inputs are left untouched."""
    if len(params) != len(grads) or any(p.shape != g.shape for p, g in zip(params, grads)):
        raise ValueError("parameter/gradient shape mismatch")
    if cfg.weight_decay:
        grads = [g + cfg.weight_decay * p for p, g in zip(params, grads)]
    if cfg.name == "sgd":
        return [p - cfg.lr * g for p, g in zip(params, grads)], OptimizerState(state.step + 1)
    t = state.step + 1
    m = state.m or [np.zeros_like(p) for p in params]
    v = state.v or [np.zeros_like(p) for p in params]
    m = [cfg.beta1 * mi + (1 - cfg.beta1) * g for mi, g in zip(m, grads)]
    v = [cfg.beta2 * vi + (1 - cfg.beta2) * g * g for vi, g in zip(v, grads)]
    c1 = 1 - cfg.beta1 ** t
    c2 = 1 - cfg.beta2 ** t
    new = [p - cfg.lr * (mi / c1) / (np.sqrt(vi / c2) + cfg.eps_hat) for p, mi, vi in zip(params, m, v)]
    return new, OptimizerState(t, m, v)


# --------------------------------------------------------------------------- history

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    test_acc: float


@dataclass
class RunHistory:
    records: list = field(default_factory=list)
    counters: OpCounter = field(default_factory=OpCounter)
    epochs_run: int = 0
    model: Model | None = field(default=None, repr=False)

    @property
    def selected(self) -> EpochRecord:
        return select_best(self.records)


def select_best(records: list) -> EpochRecord:
    """Highest val_acc; ties go to the earliest epoch."""
    if not records:
        raise ValueError("empty history")
    best = records[0]
    for r in records[1:]:
        if r.val_acc > best.val_acc:
            best = r
    return best


def evaluate(model: Model, X, graph, labels, mask=None) -> float:
    """Accuracy of eval-mode argmax predictions (ties -> lowest class id)."""
    logits, _ = forward(model, X, graph, "eval")
    return accuracy(logits, labels, mask)


def accuracy(logits, labels, mask=None) -> float:
    rows = np.arange(len(logits)) if mask is None else np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("no examples to evaluate")
    return float(np.mean(np.argmax(logits[rows], axis=1) == np.asarray(labels)[rows]))


# --------------------------------------------------------------------------- training

def seed_streams(seed: int):
    """(init rng, strategy Streams, noise rng) from one integer seed."""
    init, drop, pert, noise = np.random.SeedSequence(seed).spawn(4)
    return (np.random.default_rng(init),
            Streams(np.random.default_rng(drop), np.random.default_rng(pert)),
            np.random.default_rng(noise))


def add_feature_noise(X: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    if sigma < 0:
        raise ValueError("noise sigma must be non-negative")
    if sigma == 0:
        return X
    return X + rng.normal(0.0, sigma, size=X.shape)


def build_model(spec: ModelSpec, in_dim: int, num_classes: int, rng) -> Model:
    hidden = list(spec.hidden)
    if spec.arch == "gcn":
        return build_gcn(in_dim, hidden, num_classes, spec.dropout, rng)
    if spec.arch == "mlp":
        return build_mlp(in_dim, hidden, num_classes, spec.dropout, rng)
    if spec.arch == "graph-gcn":
        return build_graph_classifier(in_dim, spec.emb_dim, hidden, num_classes, spec.dropout, rng,
                                      readout=spec.readout)
    raise ConfigError(f"model.arch: unknown architecture {spec.arch!r}")


class _Problem:
    """Uniform view of node- and graph-level datasets for the epoch loop."""

    def __init__(self, data, cfg: TrainConfig, noise_rng):
        self.data = data
        graph_arch = cfg.model.arch == "graph-gcn"
        if isinstance(data, (NodeDataset, GraphDataset)) and graph_arch != isinstance(data, GraphDataset):
            raise ConfigError(f"model.arch={cfg.model.arch} does not fit a {type(data).__name__}; "
                              "use graph-gcn for graph datasets and gcn/mlp for node datasets")
        if isinstance(data, NodeDataset):
            self.X = add_feature_noise(data.features, cfg.data.noise_sigma, noise_rng)
            if not np.all(np.isfinite(self.X)):
                raise DatasetError("NaN or inf in node features")
            self.in_dim = self.X.shape[1]
            self.train = (self.X, data.labels, data.adjacency, data.split)
        elif isinstance(data, GraphDataset):
            if cfg.data.noise_sigma:
                raise ConfigError("data.noise_sigma is only supported for node datasets")
            self.in_dim = data.vocab
            b = data.train
            self.train = (b.features, b.labels, b, None)
        else:
            raise TypeError(f"unsupported dataset type {type(data).__name__}")
        self.num_classes = data.num_classes

    def evaluate(self, model: Model) -> list[float]:
        """Train/val/test accuracy on clean inputs; NaN for an empty split."""
        d = self.data
        if isinstance(d, NodeDataset):
            logits, _ = forward(model, self.X, d.adjacency, "eval", check_input=False)
            return [accuracy(logits, d.labels, m) if m.any() else math.nan
                    for m in (d.split.train_mask, d.split.val_mask, d.split.test_mask)]
        return [evaluate(model, b.features, b, b.labels) for b in (d.train, d.val, d.test)]


def train(cfg: TrainConfig, data: NodeDataset | GraphDataset | None = None,
          on_epoch=None) -> RunHistory:
    """Train one model; deterministic given ``cfg.seed``.

    ``on_epoch(epoch, model)`` is called after each epoch's parameter update.
    """
    if data is None:
        data = load_node_dataset(cfg.data)
    init_rng, streams, noise_rng = seed_streams(cfg.seed)
    problem = _Problem(data, cfg, noise_rng)
    model = build_model(cfg.model, problem.in_dim, problem.num_classes, init_rng)
    X, y, graph, split = problem.train
    strat = cfg.strategy
    history = RunHistory(model=model)
    counter = history.counters
    opt_state = OptimizerState()
    free_state = None

    def apply(grads):
        nonlocal opt_state
        params, opt_state = optimizer_update(model.parameters(), grads, opt_state, cfg.optimizer)
        model.set_parameters(params)
        counter.param_updates += 1

    epochs = cfg.effective_epochs
    # overflow surfaces as a non-finite loss, which _check_finite reports with context
    with np.errstate(over="ignore", invalid="ignore"):
        for epoch in range(1, epochs + 1):
            if strat.kind == "free":
                losses = []
                for _ in range(strat.M):
                    grads, loss, free_state = augment.free_step(model, X, y, graph, split, strat,
                                                                free_state, streams, counter)
                    _check_finite(loss, epoch, strat)
                    apply(grads)
                    losses.append(loss)
                loss = float(np.mean(losses))
            else:
                if strat.kind == "clean":
                    grads, loss = augment.clean_step(model, X, y, graph, split, streams, counter)
                elif strat.kind in ("flag", "freelb"):
                    grads, loss, _ = augment.flag_step(model, X, y, graph, split, strat, streams, counter)
                elif strat.kind == "pgd":
                    grads, loss, _ = augment.pgd_step(model, X, y, graph, split, strat, streams, counter)
                else:
                    grads, loss, _ = augment.fgsm_step(model, X, y, graph, split, strat, streams, counter)
                _check_finite(loss, epoch, strat)
                apply(grads)
            history.epochs_run = epoch
            if on_epoch is not None:
                on_epoch(epoch, model)
            if epoch % cfg.eval_every == 0 or epoch == epochs:
                accs = problem.evaluate(model)
                history.records.append(EpochRecord(epoch, float(loss), *accs))
                log.debug("epoch %d loss %.4f train %.4f val %.4f test %.4f", epoch, loss, *accs)
    return history


def _check_finite(loss, epoch, strat):
    if not np.isfinite(loss):
        raise DivergenceError(
            f"loss became {loss} at epoch {epoch} (strategy={strat.kind}, M={strat.M}, "
            f"alpha_l={strat.alpha_l}, alpha_u={strat.alpha_u})")
