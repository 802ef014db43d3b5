"""Small neural building blocks shared by the autoencoder and the bridge networks.

Gradients come from torch autograd and updates from ``torch.optim.Adam``; this
module only adds the layers the models need plus a finite-difference gradient check.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn


def sinusoidal_embed(value, width: int, vector: bool = False) -> torch.Tensor:
    """Interleaved ``[sin(v w_0), cos(v w_0), sin(v w_1), ...]`` with ``w_i = 10000^(-2i/w_c)``.

    Scalars (any shape ``(...)``) use ``w_c = width``.  With ``vector=True`` the last
    axis holds d components, each embedded into ``w_c = width // d`` channels and
    concatenated in component order.  Output shape ``(..., width)``.
    """
    v = torch.as_tensor(value)
    if not torch.is_floating_point(v):
        v = v.to(torch.get_default_dtype())
    comps = v if vector else v[..., None]
    d = comps.shape[-1]
    if width % 2 or width % (2 * d):
        raise ValueError(f"width {width} must be even and divisible by 2 x {d} components")
    per = width // d
    i = torch.arange(per // 2, dtype=v.dtype)
    freqs = torch.pow(torch.tensor(10000.0, dtype=v.dtype), -2.0 * i / per)
    ang = comps[..., None] * freqs  # (..., d, per/2)
    emb = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1)
    return emb.reshape(*comps.shape[:-1], width)


class ConcatSquashLinear(nn.Module):
    """``y = (W x) * sigmoid(W_g c + b_g) + W_b c``."""

    def __init__(self, dim_in: int, dim_out: int, dim_ctx: int):
        super().__init__()
        self.layer = nn.Linear(dim_in, dim_out, bias=False)
        self.hyper_gate = nn.Linear(dim_ctx, dim_out)
        self.hyper_bias = nn.Linear(dim_ctx, dim_out, bias=False)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.layer.in_features or ctx.shape[-1] != self.hyper_gate.in_features:
            raise ValueError("concatsquash input or context width mismatch")
        gate = torch.sigmoid(self.hyper_gate(ctx))
        return self.layer(x) * gate + self.hyper_bias(ctx)


@dataclass
class MlpSpec:
    widths: tuple[int, ...]  # input, hidden..., output
    ctx_dim: int
    activation: str = "softplus"

    def __post_init__(self):
        if len(self.widths) < 2 or min(self.widths) <= 0 or self.ctx_dim <= 0:
            raise ValueError("MLP needs >= 1 layer with positive widths")


_ACTIVATIONS = {"softplus": nn.Softplus, "relu": nn.ReLU, "silu": nn.SiLU, "tanh": nn.Tanh}


class ConcatSquashMLP(nn.Module):
    def __init__(self, spec: MlpSpec):
        super().__init__()
        self.spec = spec
        w = spec.widths
        self.layers = nn.ModuleList(ConcatSquashLinear(a, b, spec.ctx_dim) for a, b in zip(w[:-1], w[1:]))
        self.act = _ACTIVATIONS[spec.activation]()

    def forward(self, x: torch.Tensor, ctx: torch.Tensor) -> torch.Tensor:
        for n, layer in enumerate(self.layers):
            x = layer(x, ctx)
            if n < len(self.layers) - 1:
                x = self.act(x)
        return x


def make_adam(params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=lr, betas=betas, eps=eps)


@contextlib.contextmanager
def flush_denormals():
    """Flush subnormals to zero inside a training loop, restoring IEEE behaviour after.

    Adam second moments of near-zero gradients drift into subnormals, which slow CPU
    kernels by orders of magnitude; flushing is deterministic.
    """
    torch.set_flush_denormal(True)
    try:
        yield
    finally:
        torch.set_flush_denormal(False)


def seed_everything(seed: int):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)


def finite_difference_check(
    module: nn.Module,
    loss_fn,
    h: float = 1e-5,
    max_per_param: int = 8,
    generator: np.random.Generator | None = None,
) -> float:
    """Max relative error between autograd and central differences over sampled parameter entries.

    ``loss_fn(module)`` must return a scalar tensor.  Run on a float64 module.
    Relative error per entry is ``|g - g_fd| / max(|g|, |g_fd|, floor)`` where
    ``floor = 1e-6 * max(|L|, 0.01)`` sits a few times above the round-off level
    ``eps |L| / h`` of the central difference, so vanishing entries are compared absolutely.
    """
    gen = generator or np.random.default_rng(0)
    module.zero_grad()
    loss = loss_fn(module)
    loss.backward()
    floor = 1e-6 * max(abs(loss.item()), 0.01)
    worst = 0.0
    with torch.no_grad():
        for p in module.parameters():
            if p.grad is None:
                continue
            flat = p.view(-1)
            gflat = p.grad.view(-1)
            picks = gen.choice(flat.numel(), size=min(max_per_param, flat.numel()), replace=False)
            for idx in picks:
                old = flat[idx].item()
                flat[idx] = old + h
                up = loss_fn(module).item()
                flat[idx] = old - h
                down = loss_fn(module).item()
                flat[idx] = old
                fd = (up - down) / (2 * h)
                g = gflat[idx].item()
                denom = max(abs(g), abs(fd), floor)
                worst = max(worst, abs(g - fd) / denom)
    return worst


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def timestep_context(i, n_steps: int, width: int = 32) -> torch.Tensor:
    """Context vector for step ``i`` of ``n_steps``: sinusoidal embedding of ``i / N``."""
    t = torch.as_tensor(i, dtype=torch.get_default_dtype()) / float(n_steps)
    return sinusoidal_embed(t, width)


__all__ = [
    "ConcatSquashLinear",
    "ConcatSquashMLP",
    "MlpSpec",
    "count_parameters",
    "finite_difference_check",
    "make_adam",
    "seed_everything",
    "sinusoidal_embed",
    "timestep_context",
]
