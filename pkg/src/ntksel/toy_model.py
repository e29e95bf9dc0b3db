"""Desk-scale feed-forward network with low-rank adapters.

Stands in for a large model during verification: it supplies embeddings,
summed-output gradients, exact Jacobians restricted to the adapter
subspace, and a two-phase pretrain/adapt training loop. Everything is plain
numpy with hand-written backprop so gradients are cheap, exact, and easy to
cross-check against finite differences.

Adapter convention: each layer's effective weight is ``W + A @ B`` with
``A`` of shape (h_out, r) initialized to zero and ``B`` of shape (r, h_in)
random, so the adapted function starts identical to the base function.

Canonical adapter-gradient flattening (the order every projected feature
uses): layer-major, factor A before factor B, row-major within each factor.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import feature_store
from .domain import SampleId
from .errors import (
    DimMismatch,
    DivergenceError,
    NoHiddenLayer,
    NonFiniteGradient,
    SizeCapExceeded,
)
from .feature_store import EmbeddingRecord, FeatureFileHeader, FeatureRecord
from .projection import ProjectionSpec, project_batch

__all__ = [
    "ToyNetwork",
    "AdapterGradient",
    "ToyDataset",
    "TrainResult",
    "forward",
    "summed_output_gradient",
    "jacobian",
    "embed",
    "pretrain_then_adapt",
    "batch_forward",
    "batch_summed_gradients",
    "batch_embed",
    "gradient_feature_records",
    "embedding_records",
    "save_network",
    "load_network",
]

DEFAULT_LAYER_DIMS = (8, 192, 192, 3)
DEFAULT_RANK = 4
JACOBIAN_ENTRY_CAP = 10**7

_ACTIVATIONS: dict[str, tuple[Callable, Callable]] = {
    "tanh": (np.tanh, lambda z: 1.0 - np.tanh(z) ** 2),
    "relu": (lambda z: np.maximum(z, 0.0), lambda z: (z > 0).astype(np.float64)),
    "identity": (lambda z: z, lambda z: np.ones_like(z)),
}


@dataclass
class ToyNetwork:
    """Frozen base network plus trainable low-rank adapter factors."""

    layer_dims: tuple[int, ...]
    base_weights: list[np.ndarray]
    base_biases: list[np.ndarray]
    adapters: list[tuple[np.ndarray, np.ndarray]]
    activation: str = "tanh"
    rank: int = DEFAULT_RANK
    embed_block_dim: int | None = None

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.base_weights) != len(self.layer_dims) - 1:
            raise DimMismatch("one weight matrix per layer required")

    @classmethod
    def random(
        cls,
        layer_dims: Sequence[int] = DEFAULT_LAYER_DIMS,
        rank: int = DEFAULT_RANK,
        activation: str = "tanh",
        seed: int = 0,
        base_scale: float = 1.0,
        embed_block_dim: int | None = None,
    ) -> "ToyNetwork":
        """Scaled-Gaussian base weights, zero biases, A=0 / B random adapters."""
        rng = np.random.default_rng(seed)
        dims = tuple(int(d) for d in layer_dims)
        weights, biases, adapters = [], [], []
        for h_in, h_out in zip(dims[:-1], dims[1:]):
            weights.append(rng.normal(0.0, base_scale / np.sqrt(h_in), (h_out, h_in)))
            biases.append(np.zeros(h_out))
            a = np.zeros((h_out, rank))
            b = rng.normal(0.0, 1.0 / np.sqrt(h_in), (rank, h_in))
            adapters.append((a, b))
        return cls(dims, weights, biases, adapters, activation, rank, embed_block_dim)

    @property
    def depth(self) -> int:
        return len(self.base_weights)

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    @property
    def adapter_param_count(self) -> int:
        return sum(a.size + b.size for a, b in self.adapters)

    @property
    def base_param_count(self) -> int:
        return sum(w.size for w in self.base_weights)

    def effective_weight(self, layer: int) -> np.ndarray:
        a, b = self.adapters[layer]
        return self.base_weights[layer] + a @ b

    def copy_adapters(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(a.copy(), b.copy()) for a, b in self.adapters]

    def clone(self) -> "ToyNetwork":
        return ToyNetwork(
            self.layer_dims,
            [w.copy() for w in self.base_weights],
            [b.copy() for b in self.base_biases],
            self.copy_adapters(),
            self.activation,
            self.rank,
            self.embed_block_dim,
        )


@dataclass
class AdapterGradient:
    """Flat adapter-subspace gradient in the canonical layer/factor order."""

    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if not np.isfinite(self.flat).all():
            raise NonFiniteGradient("adapter gradient has non-finite entries")


@dataclass
class ToyDataset:
    """Input/target pairs for toy training tasks."""

    X: np.ndarray
    Y: np.ndarray
    ids: list[SampleId] | None = None

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=np.float64)
        self.Y = np.asarray(self.Y, dtype=np.float64)
        if self.X.shape[0] != self.Y.shape[0]:
            raise DimMismatch("X and Y row counts differ")

    def __len__(self) -> int:
        return self.X.shape[0]


# -- forward / backward ------------------------------------------------------


def _forward_cache(net: ToyNetwork, x: np.ndarray):
    """Forward pass caching activations and pre-activations per layer."""
    act, _ = _ACTIVATIONS[net.activation]
    a = np.asarray(x, dtype=np.float64)
    if a.shape != (net.input_dim,):
        raise DimMismatch(f"expected input of length {net.input_dim}, got {a.shape}")
    acts = [a]
    zs = []
    for l in range(net.depth):
        w_eff = net.effective_weight(l)
        z = w_eff @ acts[-1] + net.base_biases[l]
        zs.append(z)
        acts.append(act(z) if l < net.depth - 1 else z)
    return acts, zs


def forward(net: ToyNetwork, x: np.ndarray) -> np.ndarray:
    """Network output; final layer is linear, hidden layers use the activation."""
    acts, _ = _forward_cache(net, x)
    return acts[-1]


def _backward_rows(net: ToyNetwork, acts, zs, seed_rows: np.ndarray) -> np.ndarray:
    """Adapter-subspace gradients for several output seed vectors at once.

    ``seed_rows`` has shape (m, D); row s yields the gradient of
    ``seed_rows[s] . f(x)``. Returns (m, P_lora) in canonical flat order.
    The summed-output gradient and the Jacobian both come through here, so
    a D=1 network produces bitwise-identical vectors for both.
    """
    _, dact = _ACTIVATIONS[net.activation]
    m = seed_rows.shape[0]
    delta = np.asarray(seed_rows, dtype=np.float64)
    blocks: list[np.ndarray | None] = [None] * net.depth
    for l in range(net.depth - 1, -1, -1):
        a_prev = acts[l]
        a_fac, b_fac = net.adapters[l]
        bx = b_fac @ a_prev
        g_a = delta[:, :, None] * bx[None, None, :]
        g_b = (delta @ a_fac)[:, :, None] * a_prev[None, None, :]
        blocks[l] = np.concatenate(
            [g_a.reshape(m, -1), g_b.reshape(m, -1)], axis=1
        )
        if l > 0:
            delta = (delta @ net.effective_weight(l)) * dact(zs[l - 1])[None, :]
    return np.concatenate(blocks, axis=1)


def summed_output_gradient(net: ToyNetwork, x: np.ndarray) -> AdapterGradient:
    """Gradient of the sum of all output coordinates w.r.t. adapter params.

    One backward pass regardless of output dimension.
    """
    acts, zs = _forward_cache(net, x)
    rows = _backward_rows(net, acts, zs, np.ones((1, net.output_dim)))
    return AdapterGradient(rows[0])


def jacobian(net: ToyNetwork, x: np.ndarray, entry_cap: int = JACOBIAN_ENTRY_CAP) -> np.ndarray:
    """Exact D x P_lora Jacobian of the outputs w.r.t. adapter params."""
    d_out = net.output_dim
    if d_out * net.adapter_param_count > entry_cap:
        raise SizeCapExceeded(
            f"jacobian would hold {d_out * net.adapter_param_count} entries "
            f"(cap {entry_cap})"
        )
    acts, zs = _forward_cache(net, x)
    j = _backward_rows(net, acts, zs, np.eye(d_out))
    if not np.isfinite(j).all():
        raise NonFiniteGradient("jacobian has non-finite entries")
    return j


def embed(net: ToyNetwork, x: np.ndarray) -> np.ndarray:
    """Mean of the final hidden layer's activation over configured blocks.

    With block dimension m, the final hidden activation of width h is viewed
    as h/m blocks ("tokens") of size m and averaged across blocks; the
    default block dimension is the full hidden width (a single block).
    """
    if net.depth < 2:
        raise NoHiddenLayer("network has no hidden layer to embed from")
    acts, _ = _forward_cache(net, x)
    hidden = acts[-2]
    block = net.embed_block_dim or hidden.shape[0]
    if hidden.shape[0] % block != 0:
        raise DimMismatch(
            f"hidden width {hidden.shape[0]} not divisible by block dim {block}"
        )
    return hidden.reshape(-1, block).mean(axis=0)


# -- batched inference (pipeline-scale paths) --------------------------------


def _batch_forward_cache(net: ToyNetwork, X: np.ndarray):
    act, _ = _ACTIVATIONS[net.activation]
    A = np.asarray(X, dtype=np.float64)
    if A.ndim != 2 or A.shape[1] != net.input_dim:
        raise DimMismatch(f"expected (n, {net.input_dim}) inputs, got {A.shape}")
    acts = [A]
    zs = []
    for l in range(net.depth):
        w_eff = net.effective_weight(l)
        z = acts[-1] @ w_eff.T + net.base_biases[l][None, :]
        zs.append(z)
        acts.append(act(z) if l < net.depth - 1 else z)
    return acts, zs


def batch_forward(net: ToyNetwork, X: np.ndarray) -> np.ndarray:
    acts, _ = _batch_forward_cache(net, X)
    return acts[-1]


def batch_embed(net: ToyNetwork, X: np.ndarray) -> np.ndarray:
    if net.depth < 2:
        raise NoHiddenLayer("network has no hidden layer to embed from")
    acts, _ = _batch_forward_cache(net, X)
    hidden = acts[-2]
    block = net.embed_block_dim or hidden.shape[1]
    if hidden.shape[1] % block != 0:
        raise DimMismatch(
            f"hidden width {hidden.shape[1]} not divisible by block dim {block}"
        )
    n = hidden.shape[0]
    return hidden.reshape(n, -1, block).mean(axis=1)


def batch_summed_gradients(net: ToyNetwork, X: np.ndarray) -> np.ndarray:
    """Summed-output adapter gradients for every row of X: (n, P_lora)."""
    _, dact = _ACTIVATIONS[net.activation]
    acts, zs = _batch_forward_cache(net, X)
    n = acts[0].shape[0]
    delta = np.ones((n, net.output_dim))
    blocks: list[np.ndarray | None] = [None] * net.depth
    for l in range(net.depth - 1, -1, -1):
        a_prev = acts[l]
        a_fac, b_fac = net.adapters[l]
        bx = a_prev @ b_fac.T
        g_a = delta[:, :, None] * bx[:, None, :]
        g_b = (delta @ a_fac)[:, :, None] * a_prev[:, None, :]
        blocks[l] = np.concatenate([g_a.reshape(n, -1), g_b.reshape(n, -1)], axis=1)
        if l > 0:
            delta = (delta @ net.effective_weight(l)) * dact(zs[l - 1])
    out = np.concatenate(blocks, axis=1)
    if not np.isfinite(out).all():
        raise NonFiniteGradient("batched gradients have non-finite entries")
    return out


# -- training ----------------------------------------------------------------


@dataclass
class AdapterSnapshot:
    step: int
    adapters: list[tuple[np.ndarray, np.ndarray]]


@dataclass
class TrainResult:
    net: ToyNetwork
    checkpoints: list[AdapterSnapshot]
    pretrain_losses: list[float]
    adapt_losses: list[float]


def _mse_loss_and_delta(F: np.ndarray, Y: np.ndarray) -> tuple[float, np.ndarray]:
    # L = (1/2n) sum ||f_i - y_i||^2, so dL/dF = (F - Y)/n
    n = F.shape[0]
    diff = F - Y
    with np.errstate(over="ignore", invalid="ignore"):  # divergence shows as inf loss
        return float(0.5 * np.sum(diff**2) / n), diff / n


def _loss_adapter_grads(net: ToyNetwork, X, Y):
    _, dact = _ACTIVATIONS[net.activation]
    acts, zs = _batch_forward_cache(net, X)
    loss, delta = _mse_loss_and_delta(acts[-1], Y)
    grads = [None] * net.depth
    for l in range(net.depth - 1, -1, -1):
        a_prev = acts[l]
        a_fac, b_fac = net.adapters[l]
        g_a = delta.T @ (a_prev @ b_fac.T)
        g_b = a_fac.T @ delta.T @ a_prev
        grads[l] = (g_a, g_b)
        if l > 0:
            delta = (delta @ net.effective_weight(l)) * dact(zs[l - 1])
    return loss, grads


def _loss_base_grads(net: ToyNetwork, X, Y):
    _, dact = _ACTIVATIONS[net.activation]
    acts, zs = _batch_forward_cache(net, X)
    loss, delta = _mse_loss_and_delta(acts[-1], Y)
    grads = [None] * net.depth
    for l in range(net.depth - 1, -1, -1):
        g_w = delta.T @ acts[l]
        g_b = delta.sum(axis=0)
        grads[l] = (g_w, g_b)
        if l > 0:
            delta = (delta @ net.effective_weight(l)) * dact(zs[l - 1])
    return loss, grads


def train_adapters(
    net: ToyNetwork,
    task: ToyDataset,
    steps: int,
    lr: float,
    on_step: Callable[[int], None] | None = None,
) -> list[float]:
    """Full-batch gradient descent on the adapter factors only.

    Explicit-Euler steps; ``on_step(t)`` fires after parameters reach step t
    (including t=0 before any update), which is the checkpoint hook used by
    the dynamics probe.
    """
    losses = []
    if on_step is not None:
        on_step(0)
    for t in range(1, steps + 1):
        loss, grads = _loss_adapter_grads(net, task.X, task.Y)
        if not np.isfinite(loss):
            raise DivergenceError(f"adapter loss became non-finite at step {t}")
        losses.append(loss)
        for l, (g_a, g_b) in enumerate(grads):
            a_fac, b_fac = net.adapters[l]
            net.adapters[l] = (a_fac - lr * g_a, b_fac - lr * g_b)
        if on_step is not None:
            on_step(t)
    return losses


def pretrain_then_adapt(
    net: ToyNetwork,
    general_task: ToyDataset,
    domain_task: ToyDataset,
    steps: int,
    lr: float,
    checkpoint_every: int = 1,
) -> TrainResult:
    """Train base weights on the general task, freeze them, then train adapters.

    ``steps`` applies to each phase. Adapter-phase snapshots are taken every
    ``checkpoint_every`` steps (after the corresponding update) and are the
    input to kernel-trace replay.
    """
    if len(general_task) == 0 or len(domain_task) == 0:
        raise ValueError("training tasks must be non-empty")
    if lr <= 0 and steps > 0:
        raise ValueError("lr must be positive")
    pretrain_losses = []
    for t in range(steps):
        loss, grads = _loss_base_grads(net, general_task.X, general_task.Y)
        if not np.isfinite(loss):
            raise DivergenceError(f"pretraining loss became non-finite at step {t}")
        pretrain_losses.append(loss)
        for l, (g_w, g_b) in enumerate(grads):
            net.base_weights[l] = net.base_weights[l] - lr * g_w
            net.base_biases[l] = net.base_biases[l] - lr * g_b

    checkpoints: list[AdapterSnapshot] = []

    def snap(t: int):
        if t > 0 and t % checkpoint_every == 0:
            checkpoints.append(AdapterSnapshot(t, net.copy_adapters()))

    adapt_losses = train_adapters(net, domain_task, steps, lr, on_step=snap)
    return TrainResult(net, checkpoints, pretrain_losses, adapt_losses)


# -- feature plumbing --------------------------------------------------------


def gradient_feature_records(
    net: ToyNetwork,
    X: np.ndarray,
    ids: Sequence[SampleId],
    proj: ProjectionSpec | None,
    grad_scale: float = 1e-5,
    seq_lens: Sequence[int] | None = None,
    normalize_by_seq_len: bool = True,
    batch: int = 2048,
) -> list[FeatureRecord]:
    """Projected, normalized, scaled gradient features for a batch of inputs.

    ``proj=None`` stores the raw (unprojected) adapter gradient, which is the
    small-instance oracle mode.
    """
    X = np.asarray(X, dtype=np.float64)
    if len(ids) != X.shape[0]:
        raise DimMismatch("ids and X row counts differ")
    if seq_lens is None:
        seq_lens = [1] * len(ids)
    records = []
    for lo in range(0, X.shape[0], batch):
        hi = min(lo + batch, X.shape[0])
        grads = batch_summed_gradients(net, X[lo:hi])
        feats = project_batch(proj, grads) if proj is not None else grads
        for row, i in enumerate(range(lo, hi)):
            vec = feats[row]
            if normalize_by_seq_len:
                vec = vec / seq_lens[i]
            vec = vec * grad_scale
            records.append(FeatureRecord(ids[i], seq_lens[i], vec))
    return records


def embedding_records(
    net: ToyNetwork, X: np.ndarray, ids: Sequence[SampleId]
) -> list[EmbeddingRecord]:
    emb = batch_embed(net, np.asarray(X, dtype=np.float64))
    return [EmbeddingRecord(sid, emb[i]) for i, sid in enumerate(ids)]


def feature_header(
    net: ToyNetwork, proj: ProjectionSpec | None, count: int
) -> FeatureFileHeader:
    """Header for a gradient feature file produced by this network."""
    return FeatureFileHeader(
        kind="gradient",
        dim=proj.target_dim if proj is not None else net.adapter_param_count,
        count=count,
        proj_seed=proj.seed if proj is not None else 0,
        source_param_dim=net.adapter_param_count,
        seq_len_normalized=True,
        grad_scaled=True,
    )


# -- snapshot serialization ---------------------------------------------------


def _flatten_params(net: ToyNetwork) -> np.ndarray:
    parts = []
    for l in range(net.depth):
        parts.append(net.base_weights[l].ravel())
        parts.append(net.base_biases[l].ravel())
        a_fac, b_fac = net.adapters[l]
        parts.append(a_fac.ravel())
        parts.append(b_fac.ravel())
    return np.concatenate(parts)


def save_network(path, net: ToyNetwork) -> str:
    """Serialize a network snapshot into the binary container (kind "toynet").

    Parameters are stored at float32 container precision; metadata rides in
    the header extension as JSON.
    """
    meta = {
        "layer_dims": list(net.layer_dims),
        "rank": net.rank,
        "activation": net.activation,
        "embed_block_dim": net.embed_block_dim,
    }
    ext = json.dumps(meta, sort_keys=True).encode("utf-8")
    flat = _flatten_params(net)
    header = FeatureFileHeader(
        kind="toynet",
        dim=flat.shape[0],
        count=1,
        extension=struct.pack("<I", len(ext)) + ext,
    )
    rec = FeatureRecord(SampleId("toynet", 0), 1, flat)
    return feature_store.write_features(path, header, [rec])


def load_network(path) -> ToyNetwork:
    header, records = feature_store.read_all(path)
    if header.kind != "toynet":
        raise DimMismatch(f"expected toynet container, got {header.kind}")
    (ext_len,) = struct.unpack("<I", header.extension[:4])
    meta = json.loads(header.extension[4 : 4 + ext_len].decode("utf-8"))
    dims = tuple(meta["layer_dims"])
    rank = meta["rank"]
    flat = np.asarray(records[0].vector, dtype=np.float64)
    weights, biases, adapters = [], [], []
    pos = 0

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        out = flat[pos : pos + size].reshape(shape)
        pos += size
        return out

    for h_in, h_out in zip(dims[:-1], dims[1:]):
        weights.append(take((h_out, h_in)))
        biases.append(take((h_out,)))
        adapters.append((take((h_out, rank)), take((rank, h_in))))
    if pos != flat.shape[0]:
        raise DimMismatch("snapshot parameter count does not match metadata")
    return ToyNetwork(
        dims, weights, biases, adapters, meta["activation"], rank,
        meta.get("embed_block_dim"),
    )
