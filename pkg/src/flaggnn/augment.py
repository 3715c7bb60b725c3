"""Adversarial feature augmentation strategies.

All strategies perturb the model's input surface (raw node features, or the
embedding output for embedding models) and return parameter gradients for
the optimizer to apply. Nothing here touches the model parameters.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from flaggnn.graph import NodeSplit
from flaggnn.nn import Model, backward, forward, softmax_cross_entropy

KINDS = ("clean", "fgsm", "pgd", "free", "freelb", "flag")
NORM_MODES = ("sign", "l2")


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "flag"
    M: int = 3
    alpha_l: float = 1e-3
    alpha_u: float | None = None  # None: same as alpha_l
    epsilon: float | None = None
    norm_mode: str = "sign"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown strategy {self.kind!r}; expected one of {', '.join(KINDS)}")
        if self.norm_mode not in NORM_MODES:
            raise ValueError(f"norm must be sign or l2, got {self.norm_mode!r}")
        if self.M < 1:
            raise ValueError(f"M must be >= 1, got {self.M}")
        if self.alpha_u is None:
            object.__setattr__(self, "alpha_u", self.alpha_l)
        if self.alpha_l < 0 or self.alpha_u < 0:
            raise ValueError("step sizes must be non-negative")
        if self.epsilon is not None:
            if self.kind in ("flag", "freelb"):
                raise ValueError(f"{self.kind} is unbounded and takes no epsilon")
            if self.epsilon < 0:
                raise ValueError("epsilon must be non-negative")
        if self.kind == "pgd" and self.epsilon is None:
            raise ValueError("pgd needs an epsilon budget")


@dataclass(frozen=True, eq=False)
class PerturbState:
    delta: np.ndarray
    step_idx: int
    alpha_l: float
    alpha_u: float
    norm_mode: str = "sign"
    epsilon: float | None = None


@dataclass
class OpCounter:
    forwards: int = 0
    backwards: int = 0
    param_updates: int = 0


@dataclass
class Streams:
    """Independent random streams so strategies can share dropout draws."""

    dropout: np.random.Generator
    perturb: np.random.Generator

    @classmethod
    def from_seed(cls, seed) -> "Streams":
        a, b = np.random.SeedSequence(seed).spawn(2)
        return cls(np.random.default_rng(a), np.random.default_rng(b))


@dataclass
class AscentTrace:
    losses: list = field(default_factory=list)
    deltas: list = field(default_factory=list)  # delta_0 .. delta_M
    masks: list = field(default_factory=list)   # dropout masks of each ascent forward


def row_step_sizes(n_rows: int, alpha_l: float, alpha_u: float, labeled_mask=None) -> np.ndarray:
    """Column vector of per-row step sizes; rows without a mask count as labeled."""
    if labeled_mask is None:
        return np.full((n_rows, 1), float(alpha_l))
    return np.where(np.asarray(labeled_mask), alpha_l, alpha_u).astype(np.float64)[:, None]


def init_perturbation(shape, cfg: StrategyConfig, labeled_mask, rng: np.random.Generator) -> PerturbState:
    if cfg.alpha_l < 0 or cfg.alpha_u < 0:
        raise ValueError("step sizes must be non-negative")
    alpha = row_step_sizes(shape[0], cfg.alpha_l, cfg.alpha_u, labeled_mask)
    delta = rng.uniform(-1.0, 1.0, size=shape) * alpha
    return PerturbState(delta, 0, cfg.alpha_l, cfg.alpha_u, cfg.norm_mode, cfg.epsilon)


def zero_perturbation(shape, cfg: StrategyConfig) -> PerturbState:
    return PerturbState(np.zeros(shape), 0, cfg.alpha_l, cfg.alpha_u, cfg.norm_mode, cfg.epsilon)


def normalize_gradient(g: np.ndarray, norm_mode: str) -> np.ndarray:
    # a finite sum rules out NaN; only a non-finite sum needs the full scan
    if not np.isfinite(g.sum()) and np.any(np.isnan(g)):
        raise ValueError("NaN in perturbation gradient")
    if norm_mode == "sign":
        return np.sign(g)
    if norm_mode == "l2":
        norm = np.linalg.norm(g)
        return g / norm if norm > 0 else np.zeros_like(g)
    raise ValueError(f"norm must be sign or l2, got {norm_mode!r}")


def ascent_step(state: PerturbState, g: np.ndarray, labeled_mask=None) -> PerturbState:
    if g.shape != state.delta.shape:
        raise ValueError(f"gradient shape {g.shape} does not match perturbation {state.delta.shape}")
    alpha = row_step_sizes(g.shape[0], state.alpha_l, state.alpha_u, labeled_mask)
    step = normalize_gradient(g, state.norm_mode)
    if step is g:
        step = step.copy()
    step *= alpha
    step += state.delta
    return replace(state, delta=step, step_idx=state.step_idx + 1)


def project_linf(state: PerturbState, epsilon: float) -> PerturbState:
    if epsilon < 0:
        raise ValueError("epsilon must be non-negative")
    return replace(state, delta=np.clip(state.delta, -epsilon, epsilon))


# --------------------------------------------------------------------------- strategies

def _surface_shape(model: Model, X) -> tuple:
    if model.embedding is not None:
        return (len(X), model.embedding.out_dim)
    return X.shape


def _masks(split: NodeSplit | None):
    """(loss mask, labeled mask); whole-graph batches train on every row."""
    if split is None:
        return None, None
    return split.train_mask, split.labeled_mask


def _loss_grad(model, X, y, graph, loss_mask, rng, delta, need_input, counter, masks=None):
    logits, tape = forward(model, X, graph, "train", rng, delta=delta, masks=masks)
    loss, d_logits = softmax_cross_entropy(logits, y, loss_mask)
    if not np.isfinite(loss):
        # caller turns this into a divergence error with context
        return loss, None, tape.masks
    grads = backward(model, tape, d_logits, need_input=need_input)
    if counter is not None:
        counter.forwards += 1
        counter.backwards += 1
    return loss, grads, tape.masks


def clean_step(model, X, y, graph, split, rng: Streams, counter=None):
    loss_mask, _ = _masks(split)
    loss, grads, _ = _loss_grad(model, X, y, graph, loss_mask, rng.dropout, None, False, counter)
    return (grads.d_theta if grads else None), loss


def flag_step(model, X, y, graph, split, cfg: StrategyConfig, rng: Streams, counter=None):
    """M ascent iterations with (1/M)-averaged parameter gradients.

    Returns (accumulated d_theta, mean loss, AscentTrace). The accumulated
    gradient is not applied here.
    """
    loss_mask, labeled = _masks(split)
    state = init_perturbation(_surface_shape(model, X), cfg, labeled, rng.perturb)
    trace = AscentTrace(deltas=[state.delta])
    acc = [np.zeros_like(p) for p in model.parameters()]
    for _ in range(cfg.M):
        loss, grads, masks = _loss_grad(model, X, y, graph, loss_mask, rng.dropout,
                                        state.delta, True, counter)
        trace.losses.append(loss)
        trace.masks.append(masks)
        if grads is None:
            return None, loss, trace
        acc = [a + g / cfg.M for a, g in zip(acc, grads.d_theta)]
        state = ascent_step(state, grads.d_input, labeled)
        trace.deltas.append(state.delta)
    return acc, float(np.mean(trace.losses)), trace


def freelb_step(model, X, y, graph, split, cfg: StrategyConfig, rng: Streams, counter=None):
    """Same accumulation loop as FLAG; differs only through its configuration."""
    return flag_step(model, X, y, graph, split, cfg, rng, counter)


def pgd_step(model, X, y, graph, split, cfg: StrategyConfig, rng: Streams, counter=None,
             init: PerturbState | None = None):
    """M projected ascent steps from zero, then one gradient at X + delta_M.

    Returns (d_theta, loss at the final perturbation, delta_M).
    """
    loss_mask, labeled = _masks(split)
    state = init or zero_perturbation(_surface_shape(model, X), cfg)
    for t in range(cfg.M):
        # X + 0 equals X, so a zero start skips the add
        delta = None if t == 0 and init is None else state.delta
        loss, grads, _ = _loss_grad(model, X, y, graph, loss_mask, rng.dropout, delta, True, counter)
        if grads is None:
            return None, loss, state.delta
        state = project_linf(ascent_step(state, grads.d_input, labeled), cfg.epsilon)
    loss, grads, _ = _loss_grad(model, X, y, graph, loss_mask, rng.dropout, state.delta, False, counter)
    return (grads.d_theta if grads else None), loss, state.delta


def fgsm_step(model, X, y, graph, split, cfg: StrategyConfig, rng: Streams, counter=None):
    """One sign step of size alpha from zero; returns (d_theta, loss, delta_1)."""
    loss_mask, labeled = _masks(split)
    state = replace(zero_perturbation(_surface_shape(model, X), cfg), norm_mode="sign")
    loss, grads, _ = _loss_grad(model, X, y, graph, loss_mask, rng.dropout, None, True, counter)
    if grads is None:
        return None, loss, state.delta
    state = ascent_step(state, grads.d_input, labeled)
    loss, grads, _ = _loss_grad(model, X, y, graph, loss_mask, rng.dropout, state.delta, False, counter)
    return (grads.d_theta if grads else None), loss, state.delta


def free_step(model, X, y, graph, split, cfg: StrategyConfig, state: PerturbState | None,
              rng: Streams, counter=None):
    """One replay of free training: a single forward/backward feeds both updates.

    The caller applies the returned parameter gradient immediately and calls
    again with the returned state; the perturbation persists across replays
    and epochs. Returns (d_theta, loss, state).
    """
    loss_mask, labeled = _masks(split)
    fresh = state is None
    if fresh:
        state = zero_perturbation(_surface_shape(model, X), cfg)
    loss, grads, _ = _loss_grad(model, X, y, graph, loss_mask, rng.dropout, None if fresh else state.delta,
                                True, counter)
    if grads is None:
        return None, loss, state
    state = ascent_step(state, grads.d_input, labeled)
    if cfg.epsilon is not None:
        state = project_linf(state, cfg.epsilon)
    return grads.d_theta, loss, state
