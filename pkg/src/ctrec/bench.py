"""Reconstruction benchmark: σ-VAE against VAE, VQ-VAE, RQ-VAE and a diffusion round trip.

Every method gets the same number of optimizer steps, batch size and
learning rate. Encoders with a latent bottleneck share its width
(``K * token_dim`` for the σ-VAE equals ``latent_dim`` for the others).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from ._nn import make_generator
from .diffusion import Denoiser, build_schedule, diffusion_loss
from .quantized import RQVAE, VQVAE, PlainVAE
from .tokenizer import SigmaVAETokenizer

METHODS = ("sigma-vae", "vae", "vq-vae", "rq-vae", "diffusion")


@dataclass
class BenchResult:
    method: str
    curve: list  # training objective per step
    final_mse: float  # mean per-sample squared error of the round trip
    seconds: float
    extra: dict = field(default_factory=dict)


class DiffusionReconstructor:
    """Unconditional ε-prediction DDPM used as a reconstructor.

    ``reconstruct`` noises the input to step ``t_star`` in closed form and
    runs the reverse chain back to step 0 over ``n_steps`` evenly spaced steps.
    """

    def __init__(self, hidden=128, T=1000, inference_steps=100, lr=1e-3, batch_size=64, max_steps=1000,
                 random_state=0):
        self.hidden = hidden
        self.T = T
        self.inference_steps = inference_steps
        self.lr = lr
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.random_state = random_state

    def fit(self, X):
        X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
        self.schedule_ = build_schedule(self.T, inference_steps=self.inference_steps)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.random_state)
            self.model_ = Denoiser(X.shape[1], 1, self.hidden, self.T, seed=self.random_state)
        opt = torch.optim.AdamW(self.model_.parameters(), lr=self.lr)
        g = make_generator(self.random_state + 1)
        rng = np.random.default_rng(self.random_state)
        zero = torch.zeros(self.batch_size, 1)
        self.loss_curve_ = []
        for _ in range(self.max_steps):
            idx = torch.as_tensor(rng.choice(len(X), self.batch_size, replace=len(X) < self.batch_size))
            loss, _ = diffusion_loss(X[idx], zero[:len(idx)], self.model_, self.schedule_, zeta=0.0, generator=g)
            opt.zero_grad()
            loss.backward()
            opt.step()
            self.loss_curve_.append(float(loss.detach()))
        self.model_.eval()
        return self

    @torch.no_grad()
    def reconstruct(self, X, t_star=None, seed=0):
        X = torch.as_tensor(np.asarray(X), dtype=torch.float32)
        t_star = self.T // 2 if t_star is None else int(t_star)
        n = max(1, round(self.inference_steps * t_star / self.T))
        steps = np.unique(np.rint(np.linspace(1, t_star, n)).astype(int))
        ab_all = self.schedule_.alpha_bars
        ab = ab_all[steps - 1]
        ab_prev = np.concatenate([[1.0], ab[:-1]])
        betas = 1.0 - ab / ab_prev
        post_var = betas * (1.0 - ab_prev) / (1.0 - ab)
        g = make_generator(seed)
        c = torch.zeros(len(X), 1)
        y = math.sqrt(ab[-1]) * X + math.sqrt(1.0 - ab[-1]) * torch.randn(X.shape, generator=g)
        for i in range(len(steps) - 1, -1, -1):
            eps, _ = self.model_(y, c, torch.full((len(X),), int(steps[i])))
            y = (y - betas[i] / math.sqrt(1.0 - ab[i]) * eps) / math.sqrt(1.0 - betas[i])
            if i > 0:
                y = y + math.sqrt(post_var[i]) * torch.randn(X.shape, generator=g)
        return y.double().numpy()

    def reconstruction_error(self, X, t_star=None, seed=0) -> float:
        X = np.asarray(X, dtype=np.float64)
        return float(np.mean(np.sum((self.reconstruct(X, t_star, seed) - X) ** 2, axis=1)))


def _autoencoder(method, steps, lr, batch_size, latent, hidden, seed):
    common = dict(lr=lr, batch_size=batch_size, max_steps=steps, random_state=seed)
    if method == "sigma-vae":
        K = 3
        return SigmaVAETokenizer(K=K, token_dim=latent // K, hidden=hidden, **common)
    if method == "vae":
        return PlainVAE(latent_dim=latent, hidden=hidden, **common)
    if method == "vq-vae":
        return VQVAE(latent_dim=latent, hidden=hidden, **common)
    if method == "rq-vae":
        return RQVAE(latent_dim=latent, hidden=hidden, **common)
    raise ValueError(f"unknown method {method!r}")


def reconstruct_bench(X, steps=1000, lr=1e-3, batch_size=64, latent=48, hidden=128, seed=0,
                      methods=METHODS, t_star=None):
    """Train each method for ``steps`` steps on ``X``; returns ``{method: BenchResult}``."""
    out = {}
    for method in methods:
        t0 = time.perf_counter()
        if method == "diffusion":
            est = DiffusionReconstructor(hidden=hidden, lr=lr, batch_size=batch_size, max_steps=steps,
                                         random_state=seed).fit(X)
            err = est.reconstruction_error(X, t_star, seed)
            extra = {"t_star": est.T // 2 if t_star is None else t_star}
        else:
            est = _autoencoder(method, steps, lr, batch_size, latent, hidden, seed).fit(X)
            err = est.reconstruction_error(X)
            extra = {}
        out[method] = BenchResult(method, list(est.loss_curve_), err, time.perf_counter() - t0, extra)
    return out


def curve_records(results):
    """Rows ``(method, step, loss)`` for plotting."""
    return [(r.method, i, v) for r in results.values() for i, v in enumerate(r.curve)]
