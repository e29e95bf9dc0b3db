"""Low-rank adapter wrapping for causal LM linear layers.

Convention matches the engine's toy model: the effective weight is
``W + (alpha/r) * A @ B`` with A (out, r) zero-initialized and B (r, in)
Gaussian, so wrapping changes nothing until training starts. Adapter
parameters enumerate in model traversal order, factor A before B, row-major
within each factor; that order defines the flat gradient layout recorded in
export manifests.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn

DEFAULT_TARGET_MODULES = (
    "q_proj", "k_proj", "v_proj", "o_proj", "gate_proj", "up_proj", "down_proj",
)


class LoraLinear(nn.Module):
    """nn.Linear plus a trainable low-rank residual."""

    def __init__(self, base: nn.Linear, rank: int, alpha: float, init_seed: int):
        super().__init__()
        self.base = base
        for p in self.base.parameters():
            p.requires_grad_(False)
        self.rank = rank
        self.scale = alpha / rank
        gen = torch.Generator().manual_seed(init_seed)
        out_f, in_f = base.out_features, base.in_features
        self.lora_a = nn.Parameter(torch.zeros(out_f, rank, dtype=base.weight.dtype))
        self.lora_b = nn.Parameter(
            torch.randn(rank, in_f, generator=gen, dtype=base.weight.dtype)
            / in_f**0.5
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + self.scale * ((x @ self.lora_b.T) @ self.lora_a.T)


@dataclass
class AdapterSet:
    """All wrapped modules of one model, in canonical order."""

    modules: list[tuple[str, LoraLinear]]
    rank: int
    alpha: float

    @property
    def param_count(self) -> int:
        return sum(m.lora_a.numel() + m.lora_b.numel() for _, m in self.modules)

    def parameters(self) -> list[nn.Parameter]:
        out = []
        for _, m in self.modules:
            out.extend([m.lora_a, m.lora_b])
        return out

    def layout(self) -> list[dict]:
        """Flat-gradient layout: per-factor name, offset, and shape."""
        rows = []
        offset = 0
        for name, m in self.modules:
            for fac, tensor in (("A", m.lora_a), ("B", m.lora_b)):
                rows.append(
                    {"module": name, "factor": fac, "offset": offset,
                     "shape": list(tensor.shape)}
                )
                offset += tensor.numel()
        return rows

    def state_dict(self) -> dict[str, torch.Tensor]:
        out = {}
        for name, m in self.modules:
            out[f"{name}.lora_a"] = m.lora_a.detach().clone()
            out[f"{name}.lora_b"] = m.lora_b.detach().clone()
        return out

    def load_state_dict(self, state: dict[str, torch.Tensor]) -> None:
        with torch.no_grad():
            for name, m in self.modules:
                m.lora_a.copy_(state[f"{name}.lora_a"])
                m.lora_b.copy_(state[f"{name}.lora_b"])


def attach_adapters(
    model: nn.Module,
    rank: int = 16,
    alpha: float | None = None,
    target_modules: tuple[str, ...] = DEFAULT_TARGET_MODULES,
    init_seed: int = 0,
) -> AdapterSet:
    """Wrap every targeted nn.Linear in-place; returns the adapter set.

    Targets are matched by the final path component of the module name.
    B-factor initialization is seeded per module index so wrapping is
    deterministic.
    """
    alpha = float(rank if alpha is None else alpha)
    for p in model.parameters():
        p.requires_grad_(False)
    wrapped: list[tuple[str, LoraLinear]] = []
    targets = []
    for name, module in model.named_modules():
        if isinstance(module, nn.Linear) and name.split(".")[-1] in target_modules:
            targets.append(name)
    for i, name in enumerate(targets):
        parent_name, _, leaf = name.rpartition(".")
        parent = model.get_submodule(parent_name) if parent_name else model
        lora = LoraLinear(getattr(parent, leaf), rank, alpha, init_seed + i)
        setattr(parent, leaf, lora)
        wrapped.append((name, lora))
    if not wrapped:
        raise ValueError(f"no modules matched targets {target_modules}")
    return AdapterSet(wrapped, rank, alpha)
