"""Conditional DDPM head over target-item embeddings.

Noise schedule, closed-form forward corruption, an ε-predicting denoiser
that exposes its fusion-layer representation ``h``, the ε-regression and
dispersive losses, and classifier-free-guided ancestral sampling over an
evenly respaced subset of the training steps.

Steps are 1-based throughout: ``t`` ranges over ``1..T``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from ._nn import SelfAttentionBlock, make_generator, mlp
from .exceptions import NumericError


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray  # index t-1 holds beta_t
    inference_steps: tuple[int, ...]

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bars(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    def alpha_bar(self, t):
        """``alpha_bar_t`` for 1-based ``t`` (scalar or array)."""
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"step out of range 1..{self.T}: {t}")
        return self.alpha_bars[t - 1]

    def respaced(self):
        """``(steps, betas', posterior variances)`` for the inference sub-schedule.

        With ``alpha_bar'_i = alpha_bar_{tau_i}`` and ``alpha_bar'_0 = 1``,
        ``beta'_i = 1 - alpha_bar'_i / alpha_bar'_{i-1}``; the reverse variance
        is the fixed posterior ``beta'_i (1 - alpha_bar'_{i-1}) / (1 - alpha_bar'_i)``.
        """
        steps = np.asarray(self.inference_steps)
        ab = self.alpha_bars[steps - 1]
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        betas = 1.0 - ab / ab_prev
        post_var = betas * (1.0 - ab_prev) / (1.0 - ab)
        return steps, betas, post_var


def build_schedule(T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02,
                   inference_steps: int = 100) -> NoiseSchedule:
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0.0 < beta_start < 1.0 or not 0.0 < beta_end < 1.0:
        raise ValueError("betas must lie strictly inside (0, 1)")
    if T > 1 and not beta_start < beta_end:
        raise ValueError(f"beta schedule must increase: beta_start={beta_start} >= beta_end={beta_end}")
    if not 1 <= inference_steps <= T:
        raise ValueError(f"inference_steps must lie in 1..{T}")
    betas = np.linspace(beta_start, beta_end, T)
    if T > 1 and not np.all(np.diff(betas) > 0):
        raise ValueError("beta schedule is not strictly increasing")
    steps = np.rint(np.linspace(1, T, inference_steps)).astype(int) if inference_steps > 1 else np.array([T])
    return NoiseSchedule(T, betas, tuple(int(s) for s in steps))


def forward_noise(y0, t, eps, sched: NoiseSchedule):
    """``sqrt(ab_t) * y0 + sqrt(1 - ab_t) * eps``; ``t`` is a step or a per-row vector of steps."""
    y0 = torch.as_tensor(y0)
    eps = torch.as_tensor(eps, dtype=y0.dtype)
    ab = torch.as_tensor(sched.alpha_bar(np.asarray(t.cpu() if torch.is_tensor(t) else t)), dtype=y0.dtype)
    if ab.dim() == 1 and y0.dim() > 1:
        ab = ab[:, None]
    return ab.sqrt() * y0 + (1.0 - ab).sqrt() * eps


def _sinusoid(T, dim):
    pos = torch.arange(1, T + 1, dtype=torch.float64)[:, None]
    freq = torch.exp(-math.log(10_000.0) * torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    table = torch.zeros(T, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(pos * freq)
    table[:, 1::2] = torch.cos(pos * freq)[:, : dim // 2]
    return table.float()


class Denoiser(nn.Module):
    """ε-prediction network.

    The condition and the step embedding are encoded by one self-attention
    layer, fused with the projected noisy input by a feed-forward block whose
    output is ``h``, and ``h`` is projected back to the target width.
    """

    def __init__(self, target_dim, cond_dim, hidden=128, T=1000, n_heads=2, ff_hidden=None,
                 zero_init_output=False, seed=0):
        super().__init__()
        self.target_dim = target_dim
        self.cond_dim = cond_dim
        self.T = T
        self.cond_proj = nn.Linear(cond_dim, hidden)
        self.time_embed = nn.Embedding(T, hidden)
        with torch.no_grad():
            self.time_embed.weight.copy_(_sinusoid(T, hidden))
        self.cond_encoder = SelfAttentionBlock(hidden, n_heads)
        self.in_proj = nn.Linear(target_dim, hidden)
        self.fusion = mlp(2 * hidden, ff_hidden or 2 * hidden, hidden, "silu")
        self.out_proj = nn.Linear(hidden, target_dim)
        if zero_init_output:
            nn.init.zeros_(self.out_proj.weight)
            nn.init.zeros_(self.out_proj.bias)
        g = make_generator(seed)
        # persistent null condition used for unconditional training and guidance
        self.register_buffer("null_cond", torch.randn(cond_dim, generator=g))

    def forward(self, y_t, c, t):
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 0:
            t = t.expand(y_t.shape[0])
        ctx = torch.stack([self.cond_proj(c), self.time_embed(t - 1)], dim=1)
        ctx = self.cond_encoder(ctx).mean(dim=1)
        h = self.fusion(torch.cat([self.in_proj(y_t), ctx], dim=-1))
        eps = self.out_proj(h)
        for name, val in (("cond_encoder", ctx), ("fusion", h), ("out_proj", eps)):
            if not torch.isfinite(val).all():
                raise NumericError(f"non-finite activation in denoiser layer {name}")
        return eps, h


def predict_noise(y_t, c, t, denoiser: Denoiser):
    """Returns ``(eps_hat, h)``."""
    return denoiser(y_t, c, t)


def drop_conditions(c, null_cond, zeta, generator=None):
    """Replace each row of ``c`` by ``null_cond`` with probability ``zeta``."""
    if zeta <= 0:
        return c, torch.zeros(c.shape[0], dtype=torch.bool)
    drop = torch.rand(c.shape[0], generator=generator) < zeta
    return torch.where(drop[:, None], null_cond.to(c.dtype).expand_as(c), c), drop


def diffusion_loss(y0, c, denoiser: Denoiser, sched: NoiseSchedule, zeta=0.1, generator=None,
                   t=None, eps=None, drop=None):
    """Mean over the batch of ``||eps - eps_hat(y_t, c, t)||^2``.

    ``t``/``eps``/``drop`` are sampled from ``generator`` unless supplied.
    Returns ``(loss, h)`` where ``h`` is the fusion-layer output.
    """
    g = make_generator(generator)
    B = y0.shape[0]
    if t is None:
        t = torch.randint(1, sched.T + 1, (B,), generator=g)
    if eps is None:
        eps = torch.randn(y0.shape, generator=g, dtype=y0.dtype)
    if drop is None:
        c, _ = drop_conditions(c, denoiser.null_cond, zeta, g)
    else:
        c = torch.where(torch.as_tensor(drop)[:, None], denoiser.null_cond.to(c.dtype).expand_as(c), c)
    y_t = forward_noise(y0, t, eps, sched)
    eps_hat, h = denoiser(y_t, c, t)
    return ((eps - eps_hat) ** 2).sum(dim=-1).mean(), h


def dispersive_loss(h, iota: float = 0.5):
    """``log mean_{i,b} exp(-||h_i - h_b||^2 / iota)`` over all ordered pairs, self-pairs included."""
    B = h.shape[0]
    if B < 2:
        warnings.warn("dispersive loss needs a batch of >= 2 rows; returning 0", RuntimeWarning, stacklevel=2)
        return h.sum() * 0.0
    d2 = ((h[:, None, :] - h[None, :, :]) ** 2).sum(-1)
    return torch.logsumexp((-d2 / iota).flatten(), dim=0) - math.log(B * B)


def guided_noise(eps_cond, eps_uncond, omega):
    """``(1 + w) e_c - w e_u`` written as ``e_c + w (e_c - e_u)`` so equal inputs return ``e_c`` exactly."""
    return eps_cond + omega * (eps_cond - eps_uncond)


def row_generators(seed, keys):
    """One independent torch generator per key (e.g. user index) derived from ``seed``."""
    gens = []
    for k in keys:
        g = torch.Generator()
        g.manual_seed(int(np.random.SeedSequence([int(seed), int(k)]).generate_state(1, np.uint64)[0] >> 1))
        gens.append(g)
    return gens


@torch.no_grad()
def cfg_sample(c, denoiser: Denoiser, sched: NoiseSchedule, omega: float = 2.0, generators=None,
               null_cond=None):
    """Classifier-free-guided ancestral sampling over the respaced schedule.

    ``c`` is ``(B, D_c)``; ``generators`` is one torch generator per row (or a
    single generator shared by all rows). Returns ``y_0`` of shape ``(B, d)``.
    """
    if omega < 0:
        raise ValueError("omega must be >= 0")
    B = c.shape[0]
    d = denoiser.target_dim
    if generators is None or isinstance(generators, torch.Generator):
        g = make_generator(generators)
        generators = [g] * B

    def noise():
        return torch.stack([torch.randn(d, generator=g, dtype=c.dtype) for g in generators])

    phi = (denoiser.null_cond if null_cond is None else null_cond).to(c.dtype).expand_as(c)
    steps, betas, post_var = sched.respaced()
    ab = sched.alpha_bars[steps - 1]
    y = noise()
    for i in range(len(steps) - 1, -1, -1):
        t = torch.full((B,), int(steps[i]), dtype=torch.long)
        both = denoiser(torch.cat([y, y]), torch.cat([c, phi]), torch.cat([t, t]))[0]
        eps = guided_noise(both[:B], both[B:], omega)
        y = (y - betas[i] / math.sqrt(1.0 - ab[i]) * eps) / math.sqrt(1.0 - betas[i])
        if i > 0:
            y = y + math.sqrt(post_var[i]) * noise()
    return y
