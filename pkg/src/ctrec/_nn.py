"""Small torch building blocks shared by the tokenizer, backbone and denoiser."""

from __future__ import annotations

import torch
from torch import nn
from torch.nn import functional as F

ACTIVATIONS = {"silu": nn.SiLU, "tanh": nn.Tanh, "gelu": nn.GELU}


def mlp(d_in: int, d_hidden: int, d_out: int, activation: str = "silu", n_layers: int = 3) -> nn.Sequential:
    """``n_layers`` affine maps with ``activation`` between them (none after the last)."""
    act = ACTIVATIONS[activation]
    dims = [d_in] + [d_hidden] * (n_layers - 1) + [d_out]
    layers = []
    for i in range(n_layers):
        layers.append(nn.Linear(dims[i], dims[i + 1]))
        if i < n_layers - 1:
            layers.append(act())
    return nn.Sequential(*layers)


class SelfAttentionBlock(nn.Module):
    """Pre-norm transformer encoder layer; ``causal=True`` masks future positions."""

    def __init__(self, d_model: int, n_heads: int = 2, d_ff: int | None = None, causal: bool = False):
        super().__init__()
        if d_model % n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        self.n_heads = n_heads
        self.causal = causal
        self.norm1 = nn.LayerNorm(d_model)
        self.qkv = nn.Linear(d_model, 3 * d_model)
        self.out = nn.Linear(d_model, d_model)
        self.norm2 = nn.LayerNorm(d_model)
        self.ff = nn.Sequential(nn.Linear(d_model, d_ff or 4 * d_model), nn.GELU(),
                                nn.Linear(d_ff or 4 * d_model, d_model))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        B, L, Dm = x.shape
        hd = Dm // self.n_heads
        q, k, v = self.qkv(self.norm1(x)).split(Dm, dim=-1)
        q, k, v = (t.view(B, L, self.n_heads, hd).transpose(1, 2) for t in (q, k, v))
        y = F.scaled_dot_product_attention(q, k, v, is_causal=self.causal)
        x = x + self.out(y.transpose(1, 2).reshape(B, L, Dm))
        return x + self.ff(self.norm2(x))


def make_generator(seed) -> torch.Generator:
    if isinstance(seed, torch.Generator):
        return seed
    g = torch.Generator()
    g.manual_seed(int(seed) if seed is not None else 0)
    return g


def state_fingerprint(module: nn.Module) -> list[tuple[str, torch.Tensor]]:
    return [(k, v.detach().clone()) for k, v in module.state_dict().items()]
