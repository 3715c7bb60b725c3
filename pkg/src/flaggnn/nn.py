"""Hand-differentiated GCN / MLP / graph-classifier models.

Every layer caches what it needs during ``forward`` and produces parameter
and input gradients in ``backward``. The input gradient of the whole model is
the gradient with respect to the perturbation surface, which is what the
adversarial strategies ascend on.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from flaggnn.graph import GraphBatch, NormalizedAdjacency, spmm

Graph = Union[NormalizedAdjacency, GraphBatch]


def glorot(fan_in: int, fan_out: int, rng: np.random.Generator) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class _Context:
    adjacency: NormalizedAdjacency | None
    graph_id: np.ndarray | None
    num_graphs: int


def _weight_grad(h, dz):
    # (dz^T h)^T streams the wide input row-major; h^T dz is ~2x slower
    return np.ascontiguousarray((dz.T @ h).T)


@dataclass
class GcnLayer:
    """Z = S (H W) + b."""

    weight: np.ndarray
    bias: np.ndarray

    param_names = ("weight", "bias")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def forward(self, h, ctx, cache):
        cache["h"] = h
        return spmm(ctx.adjacency, h @ self.weight) + self.bias

    def backward(self, dz, ctx, cache, need_input=True):
        # S is symmetric, so S^T dz = S dz
        sdz = spmm(ctx.adjacency, dz)
        grads = [_weight_grad(cache["h"], sdz), dz.sum(axis=0)]
        return (sdz @ self.weight.T if need_input else None), grads


@dataclass
class DenseLayer:
    """Z = H W + b, no propagation."""

    weight: np.ndarray
    bias: np.ndarray

    param_names = ("weight", "bias")

    @property
    def in_dim(self):
        return self.weight.shape[0]

    @property
    def out_dim(self):
        return self.weight.shape[1]

    def forward(self, h, ctx, cache):
        cache["h"] = h
        return h @ self.weight + self.bias

    def backward(self, dz, ctx, cache, need_input=True):
        grads = [_weight_grad(cache["h"], dz), dz.sum(axis=0)]
        return (dz @ self.weight.T if need_input else None), grads


@dataclass
class ReLU:
    param_names = ()

    def forward(self, h, ctx, cache):
        cache["pre"] = h
        return np.maximum(h, 0.0)

    def backward(self, dz, ctx, cache, need_input=True):
        # subgradient at exactly 0 is 0
        return (dz * (cache["pre"] > 0) if need_input else None), []


@dataclass
class Dropout:
    p: float

    param_names = ()

    def __post_init__(self):
        if not 0.0 <= self.p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {self.p}")

    def forward(self, h, ctx, cache):
        mask = cache.get("mask")
        if mask is None:
            return h
        return _masked_scale(h, mask, self.p)

    def backward(self, dz, ctx, cache, need_input=True):
        if not need_input:
            return None, []
        if cache.get("mask") is None:
            return dz, []
        return _masked_scale(dz, cache["mask"], self.p), []


def _masked_scale(h, mask, p):
    # (h * mask) * s equals h * (mask * s) bitwise for a 0/1 mask, without the scale array
    out = h * mask
    out *= 1.0 / (1.0 - p)
    return out


@dataclass
class Readout:
    """Permutation-invariant pooling of node rows into graph rows."""

    mode: str = "mean"

    param_names = ()

    def __post_init__(self):
        if self.mode not in ("mean", "sum"):
            raise ValueError(f"readout mode must be mean or sum, got {self.mode!r}")

    def _counts(self, ctx):
        return np.bincount(ctx.graph_id, minlength=ctx.num_graphs).astype(np.float64)

    def forward(self, h, ctx, cache):
        out = np.zeros((ctx.num_graphs, h.shape[1]), dtype=h.dtype)
        np.add.at(out, ctx.graph_id, h)
        if self.mode == "mean":
            out /= np.maximum(self._counts(ctx), 1.0)[:, None]
        return out

    def backward(self, dz, ctx, cache, need_input=True):
        dh = dz[ctx.graph_id]
        if self.mode == "mean":
            dh = dh / np.maximum(self._counts(ctx), 1.0)[ctx.graph_id, None]
        return dh, []


@dataclass
class Embedding:
    """Lookup table for discrete node attributes (token ids, -1 = padding)."""

    table: np.ndarray

    param_names = ("table",)

    @property
    def out_dim(self):
        return self.table.shape[1]


Layer = Union[GcnLayer, DenseLayer, ReLU, Dropout, Readout]


def embed_discrete(tokens: np.ndarray, table: np.ndarray) -> np.ndarray:
    """Row-wise lookup, summing over multiple token ids per node."""
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[:, None]
    if not np.issubdtype(tokens.dtype, np.integer):
        raise TypeError("token ids must be integers")
    if np.any(tokens >= len(table)) or np.any(tokens < -1):
        raise IndexError(f"token id out of vocabulary (size {len(table)})")
    valid = tokens >= 0
    rows = table[np.where(valid, tokens, 0)] * valid[..., None]
    return rows.sum(axis=1)


def _embed_backward(tokens: np.ndarray, d_out: np.ndarray, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim == 1:
        tokens = tokens[:, None]
    d_table = np.zeros((vocab, d_out.shape[1]))
    for k in range(tokens.shape[1]):
        col = tokens[:, k]
        keep = col >= 0
        np.add.at(d_table, col[keep], d_out[keep])
    return d_table


@dataclass
class Model:
    layers: list
    task: str = "node"
    embedding: Embedding | None = None

    def __post_init__(self):
        if self.task not in ("node", "graph"):
            raise ValueError(f"task must be 'node' or 'graph', got {self.task!r}")
        readouts = [i for i, l in enumerate(self.layers) if isinstance(l, Readout)]
        if self.task == "graph":
            if len(readouts) != 1:
                raise ValueError("graph task needs exactly one Readout layer")
            if any(isinstance(l, GcnLayer) for l in self.layers[readouts[0]:]):
                raise ValueError("Readout must follow the last graph layer")
        elif readouts:
            raise ValueError("Readout is only valid for the graph task")
        dim = self.embedding.out_dim if self.embedding is not None else None
        for layer in self.layers:
            if isinstance(layer, (GcnLayer, DenseLayer)):
                if dim is not None and layer.in_dim != dim:
                    raise ValueError(f"layer dims do not chain: expected input {dim}, got {layer.in_dim}")
                if layer.bias.shape != (layer.out_dim,):
                    raise ValueError("bias shape must match layer output dim")
                dim = layer.out_dim

    @property
    def input_dim(self) -> int | None:
        """Feature width of the first weight layer; None for parameter-free stacks."""
        for layer in self.layers:
            if isinstance(layer, (GcnLayer, DenseLayer)):
                return layer.in_dim
        return None

    @property
    def num_classes(self) -> int:
        return [l for l in self.layers if isinstance(l, (GcnLayer, DenseLayer))][-1].out_dim

    def _param_owners(self):
        owners = [self.embedding] if self.embedding is not None else []
        return owners + [l for l in self.layers if l.param_names]

    def parameters(self) -> list[np.ndarray]:
        return [getattr(o, n) for o in self._param_owners() for n in o.param_names]

    def parameter_names(self) -> list[str]:
        names = []
        for i, o in enumerate(self._param_owners()):
            names += [f"{i}.{type(o).__name__}.{n}" for n in o.param_names]
        return names

    def set_parameters(self, params: list[np.ndarray]) -> None:
        it = iter(params)
        for o in self._param_owners():
            for n in o.param_names:
                new = next(it)
                if new.shape != getattr(o, n).shape:
                    raise ValueError(f"shape mismatch for {type(o).__name__}.{n}")
                setattr(o, n, new)

    def copy(self) -> "Model":
        import copy
        return copy.deepcopy(self)


@dataclass
class ForwardTape:
    activations: list          # H^(0) .. H^(K); H^(0) is the perturbed surface
    caches: list               # per-layer caches (pre-activations, dropout masks)
    tokens: np.ndarray | None  # raw token ids when the model embeds
    context: _Context = field(repr=False)
    layers: list = field(repr=False)

    @property
    def masks(self) -> list:
        """Dropout masks in layer order (None where no mask was drawn)."""
        return [c.get("mask") for c, l in zip(self.caches, self.layers) if isinstance(l, Dropout)]


@dataclass
class Gradients:
    d_theta: list[np.ndarray]
    d_input: np.ndarray | None


def _context(graph: Graph | None) -> _Context:
    if isinstance(graph, GraphBatch):
        return _Context(graph.adjacency, graph.graph_id, graph.num_graphs)
    return _Context(graph, None, 0)


def dropout_apply(h, p, rng, mode="train", mask=None):
    """Inverted dropout. Returns (output, keep-mask); mask is None in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval":
        return h, None
    if mask is None:
        mask = _keep_mask(rng, h.shape, p)
    return _masked_scale(h, mask, p), mask


def _keep_mask(rng, shape, p):
    # 16-bit draws are ~2x cheaper than float32 on wide feature matrices;
    # the drop probability is p rounded to a multiple of 2^-16
    return rng.integers(0, 1 << 16, size=shape, dtype=np.uint16) >= np.uint16(round(p * (1 << 16)))


def perturbation_surface(model: Model, X: np.ndarray) -> np.ndarray:
    """Raw features for node models, embedding output for embedding models."""
    if model.embedding is not None:
        return embed_discrete(X, model.embedding.table)
    return X


def forward(model: Model, X, graph: Graph | None, mode: str = "eval", rng=None,
            delta: np.ndarray | None = None, masks: list | None = None, check_input: bool = True):
    """Run the model; returns (logits, tape).

    ``masks`` replays previously drawn dropout masks (one entry per Dropout
    layer) instead of sampling new ones. ``check_input=False`` skips the
    NaN/inf scan for callers that validated X already.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, got {mode!r}")
    ctx = _context(graph)
    tokens = None
    if model.embedding is not None:
        tokens = np.asarray(X)
        h = embed_discrete(tokens, model.embedding.table)
    else:
        h = np.asarray(X)
        if not np.issubdtype(h.dtype, np.floating):
            h = h.astype(np.float64)
        if h.ndim != 2 or model.input_dim not in (None, h.shape[1]):
            raise ValueError(f"dimension mismatch: model expects {model.input_dim} input features, got {h.shape}")
        # a finite sum rules out NaN/inf cheaply; overflow falls back to the full scan
        if check_input and not np.isfinite(h.sum()) and not np.all(np.isfinite(h)):
            raise ValueError("NaN or inf in input features")
    if delta is not None:
        if delta.shape != h.shape:
            raise ValueError(f"perturbation shape {delta.shape} does not match surface {h.shape}")
        h = h + delta
    if any(isinstance(l, GcnLayer) for l in model.layers) and ctx.adjacency is None:
        raise ValueError("GCN layers need a normalized adjacency")
    if ctx.adjacency is not None and ctx.adjacency.num_nodes != h.shape[0]:
        raise ValueError(f"dimension mismatch: graph has {ctx.adjacency.num_nodes} nodes, input has {h.shape[0]} rows")

    activations = [h]
    caches = []
    replay = iter(masks) if masks is not None else None
    for layer in model.layers:
        cache = {}
        if isinstance(layer, Dropout):
            if replay is not None:
                cache["mask"] = next(replay)
            elif mode == "train" and layer.p > 0:
                cache["mask"] = _keep_mask(rng, h.shape, layer.p)
        h = layer.forward(h, ctx, cache)
        caches.append(cache)
        activations.append(h)
    return h, ForwardTape(activations, caches, tokens, ctx, model.layers)


def backward(model: Model, tape: ForwardTape, d_logits: np.ndarray, need_input: bool = True) -> Gradients:
    """Analytic gradients of a scalar loss given dL/dlogits."""
    if len(tape.caches) != len(model.layers) or tape.layers is not model.layers:
        raise ValueError("tape was not produced by this model")
    if d_logits.shape != tape.activations[-1].shape:
        raise ValueError("d_logits shape does not match logits")
    want_surface = need_input or model.embedding is not None
    owners = [i for i, l in enumerate(model.layers) if l.param_names]
    first_param = owners[0] if owners else len(model.layers)
    d = d_logits
    per_layer = []
    for i in range(len(model.layers) - 1, -1, -1):
        # below the first weight layer the gradient only feeds the input surface
        need = want_surface or i > first_param
        d, grads = model.layers[i].backward(d, tape.context, tape.caches[i], need_input=need)
        per_layer.append(grads)
        if d is None:
            break
    d_theta = []
    if model.embedding is not None:
        d_theta.append(_embed_backward(tape.tokens, d, len(model.embedding.table)))
    for grads in reversed(per_layer):
        d_theta.extend(grads)
    return Gradients(d_theta, d if need_input else None)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray | None = None):
    """Mean negative log-likelihood over the masked rows and its gradient."""
    n, c = logits.shape
    rows = np.arange(n) if mask is None else np.flatnonzero(mask)
    if len(rows) == 0:
        raise ValueError("no labeled examples")
    y = np.asarray(labels)[rows]
    if np.any(y < 0) or np.any(y >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    z = logits[rows]
    z = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1))
    log_p = z - log_norm[:, None]
    loss = -log_p[np.arange(len(rows)), y].mean()
    d = np.exp(log_p)
    d[np.arange(len(rows)), y] -= 1.0
    d_logits = np.zeros_like(logits)
    d_logits[rows] = d / len(rows)
    return loss, d_logits


def grad_check(model: Model, X, graph: Graph | None, labels, mask=None, h: float = 1e-6,
               mode: str = "eval", rng=None) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Covers every parameter entry and every entry of the perturbation surface.
    In train mode the dropout masks from the first forward are frozen for all
    difference evaluations. The analytic side runs in float64; the difference
    quotients are evaluated in extended precision so that rounding in the loss
    (about 1e-16 / h) does not swamp small gradient entries.
    """
    logits, tape = forward(model, X, graph, mode, rng)
    masks = tape.masks
    _, d_logits = softmax_cross_entropy(logits, labels, mask)
    grads = backward(model, tape, d_logits)
    surface = tape.activations[0]

    ext = np.longdouble
    saved = model.parameters()
    work = [p.astype(ext) for p in saved]
    x_ext = X if model.embedding is not None else np.asarray(X).astype(ext)

    def loss_at(delta=None):
        out, _ = forward(model, x_ext, graph, mode, rng, delta=delta, masks=masks)
        return softmax_cross_entropy(out, labels, mask)[0]

    def rel(a, b):
        a, b = float(a), float(b)
        return abs(a - b) / max(abs(a), abs(b), 1e-8)

    worst = 0.0
    model.set_parameters(work)
    try:
        for p, g in zip(work, grads.d_theta):
            for idx in np.ndindex(p.shape):
                orig = p[idx]
                p[idx] = orig + h
                up = loss_at()
                p[idx] = orig - h
                down = loss_at()
                p[idx] = orig
                worst = max(worst, rel(g[idx], (up - down) / (2 * ext(h))))
        delta = np.zeros(surface.shape, dtype=ext)
        for idx in np.ndindex(surface.shape):
            delta[idx] = h
            up = loss_at(delta)
            delta[idx] = -h
            down = loss_at(delta)
            delta[idx] = 0.0
            worst = max(worst, rel(grads.d_input[idx], (up - down) / (2 * ext(h))))
    finally:
        model.set_parameters(saved)
    return worst


# --------------------------------------------------------------------------- builders

def build_gcn(in_dim: int, hidden: list[int], num_classes: int, dropout: float,
              rng: np.random.Generator) -> Model:
    """Dropout -> GCN -> ReLU blocks, final GCN layer emits logits."""
    return _stack(GcnLayer, in_dim, hidden, num_classes, dropout, rng, task="node")


def build_mlp(in_dim: int, hidden: list[int], num_classes: int, dropout: float,
              rng: np.random.Generator) -> Model:
    return _stack(DenseLayer, in_dim, hidden, num_classes, dropout, rng, task="node")


def build_graph_classifier(vocab: int, emb_dim: int, hidden: list[int], num_classes: int,
                           dropout: float, rng: np.random.Generator, readout: str = "mean") -> Model:
    """Embedding -> GCN blocks -> Readout -> linear head."""
    emb = Embedding(glorot(vocab, emb_dim, rng))
    layers = []
    dim = emb_dim
    for width in hidden:
        if dropout > 0:
            layers.append(Dropout(dropout))
        layers += [GcnLayer(glorot(dim, width, rng), np.zeros(width)), ReLU()]
        dim = width
    layers.append(Readout(readout))
    if dropout > 0:
        layers.append(Dropout(dropout))
    layers.append(DenseLayer(glorot(dim, num_classes, rng), np.zeros(num_classes)))
    return Model(layers, task="graph", embedding=emb)


def _stack(kind, in_dim, hidden, num_classes, dropout, rng, task):
    dims = [in_dim, *hidden, num_classes]
    layers = []
    for k, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        if dropout > 0:
            layers.append(Dropout(dropout))
        layers.append(kind(glorot(a, b, rng), np.zeros(b)))
        if k < len(dims) - 2:
            layers.append(ReLU())
    return Model(layers, task=task)


# --------------------------------------------------------------------------- checkpoints
#
# Layout (little-endian):
#   magic    8 bytes  b"FLAGCKPT"
#   version  uint32   currently 1
#   count    uint32   number of arrays
#   per array:
#     name_len uint16, name bytes (utf-8, e.g. "2.GcnLayer.weight")
#     ndim     uint32, dims uint64 * ndim
#     data     float64 * prod(dims), row-major

CHECKPOINT_MAGIC = b"FLAGCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model: Model) -> None:
    params = model.parameters()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, p in zip(model.parameter_names(), params):
            raw = name.encode()
            f.write(struct.pack("<H", len(raw)) + raw)
            f.write(struct.pack("<I", p.ndim))
            f.write(struct.pack(f"<{p.ndim}Q", *p.shape))
            f.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def load_checkpoint(path, model: Model) -> None:
    """Load weights into a model with the same architecture."""
    with open(path, "rb") as f:
        if f.read(8) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        names = model.parameter_names()
        if count != len(names):
            raise ValueError(f"{path}: {count} arrays, model has {len(names)}")
        params = []
        for expected in names:
            (n,) = struct.unpack("<H", f.read(2))
            name = f.read(n).decode()
            if name != expected:
                raise ValueError(f"{path}: array {name!r} where {expected!r} was expected")
            (ndim,) = struct.unpack("<I", f.read(4))
            shape = struct.unpack(f"<{ndim}Q", f.read(8 * ndim))
            size = int(np.prod(shape)) if ndim else 1
            params.append(np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape).astype(np.float64))
    model.set_parameters(params)
