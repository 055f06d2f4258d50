"""σ-VAE tokenizer: one base embedding in, K continuous tokens out.

Each of the K sub-encoders sees a Bernoulli-masked copy of the input and
produces a token mean ``mu_k``. During training every token is perturbed by
``sigma_k * eps`` where ``sigma_k ~ N(0, Gamma)`` is a scalar per sample and
channel and ``Gamma`` is the standard deviation of the first training batch.
Fixing the perturbation scale keeps the token channels from collapsing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._base import AutoencoderEstimator
from ._nn import make_generator, mlp
from .exceptions import CalibrationError, NumericError, ShapeError


@dataclass
class ContinuousTokenSet:
    """Tokens ``z``, means ``mu`` (both ``(..., K, D_z)``) and scalars ``sigma`` ``(..., K)``."""

    tokens: torch.Tensor
    means: torch.Tensor
    sigmas: torch.Tensor

    @property
    def K(self) -> int:
        return self.tokens.shape[-2]


def bernoulli_mask(x, rho: float, generator=None):
    """Zero each coordinate independently with probability ``rho``."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    x = torch.as_tensor(x)
    if rho == 0.0:
        return x
    keep = torch.rand(x.shape, generator=make_generator(generator), dtype=torch.float64) >= rho
    return x * keep.to(x.dtype)


def calibrate_gamma(first_batch, gamma_floor: float = 1e-3) -> float:
    """Population std over every entry of the batch, floored at ``gamma_floor``."""
    batch = np.asarray(first_batch.detach().cpu() if torch.is_tensor(first_batch) else first_batch,
                       dtype=np.float64)
    if batch.size == 0:
        raise CalibrationError("calibration batch is empty")
    if not np.all(np.isfinite(batch)):
        raise CalibrationError("calibration batch contains non-finite entries")
    return max(float(np.std(batch)), float(gamma_floor))


def vae_loss(x, x_hat, means, beta: float, K: int | None = None):
    """Squared reconstruction error plus ``beta/K * sum_k ||mu_k||^2``, batch-averaged.

    ``x``/``x_hat`` are ``(D,)`` or ``(B, D)``; ``means`` is ``(K, D_z)`` or ``(B, K, D_z)``.
    """
    x, x_hat, means = torch.as_tensor(x), torch.as_tensor(x_hat), torch.as_tensor(means)
    if x.dim() == 1:
        x, x_hat, means = x[None], x_hat[None], means[None]
    K = means.shape[1] if K is None else K
    recon = ((x_hat - x) ** 2).sum(dim=1)
    prior = (means ** 2).sum(dim=(1, 2))
    return (recon + beta / K * prior).mean()


class SigmaVAE(nn.Module):
    def __init__(self, n_features, K=3, token_dim=16, hidden=128, activation="silu"):
        super().__init__()
        self.K = K
        self.token_dim = token_dim
        self.encoders = nn.ModuleList(mlp(n_features, hidden, token_dim, activation) for _ in range(K))
        self.decoder = mlp(K * token_dim, hidden, n_features, activation)
        # calibrated once from the first training batch, then frozen
        self.register_buffer("gamma", torch.tensor(-1.0))

    def encode(self, x, rho=0.0, generator=None):
        means = []
        for k, enc in enumerate(self.encoders):
            mu = enc(bernoulli_mask(x, rho, generator) if rho > 0 else x)
            if not torch.isfinite(mu).all():
                raise NumericError(f"non-finite token mean in channel {k}")
            means.append(mu)
        return torch.stack(means, dim=-2)

    def tokenize(self, x, rho=0.0, training=False, generator=None, sigma=True) -> ContinuousTokenSet:
        if not training:
            means = self.encode(x)
            return ContinuousTokenSet(means, means, torch.zeros(means.shape[:-1], dtype=means.dtype))
        if self.gamma.item() < 0:
            raise CalibrationError("Gamma has not been calibrated")
        means = self.encode(x, rho, generator)
        shape = means.shape[:-1]
        if sigma:
            sigmas = torch.randn(shape, generator=generator, dtype=means.dtype) * self.gamma
            eps = torch.randn(means.shape, generator=generator, dtype=means.dtype)
            tokens = means + sigmas[..., None] * eps
        else:
            sigmas = torch.zeros(shape, dtype=means.dtype)
            tokens = means
        return ContinuousTokenSet(tokens, means, sigmas)

    def decode(self, tokens):
        if tokens.shape[-2:] != (self.K, self.token_dim):
            raise ShapeError(f"decoder expects (..., {self.K}, {self.token_dim}) tokens, "
                             f"got {tuple(tokens.shape)}")
        return self.decoder(tokens.flatten(-2))


class SigmaVAETokenizer(AutoencoderEstimator):
    """Continuous tokenizer estimator.

    ``transform`` returns the deterministic token means flattened to
    ``(n, K * token_dim)``; ``inverse_transform`` decodes them. ``sigma=False``
    drops the fixed-variance perturbation (ablation switch).
    """

    variant = "sigma-vae"

    def __init__(self, K=3, rho=0.2, beta=0.25, token_dim=16, hidden=128, activation="silu",
                 gamma_floor=1e-3, sigma=True, lr=1e-4, weight_decay=1e-3, batch_size=24,
                 epochs=50, max_steps=None, dtype="float32", random_state=0):
        self.K = K
        self.rho = rho
        self.beta = beta
        self.token_dim = token_dim
        self.hidden = hidden
        self.activation = activation
        self.gamma_floor = gamma_floor
        self.sigma = sigma
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.dtype = dtype
        self.random_state = random_state

    def _build_module(self, n_features):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        return SigmaVAE(n_features, self.K, self.token_dim, self.hidden, self.activation)

    def _init_from_batch(self, xb):
        self.module_.gamma.fill_(calibrate_gamma(xb, self.gamma_floor))

    def _loss(self, module, xb, gen):
        ts = module.tokenize(xb, self.rho, training=True, generator=gen, sigma=self.sigma)
        x_hat = module.decode(ts.tokens)
        loss = vae_loss(xb, x_hat, ts.means, self.beta, self.K)
        return loss, ((x_hat - xb) ** 2).sum(dim=1).mean().detach()

    @property
    def gamma_(self) -> float:
        check_is_fitted(self, "module_")
        return float(self.module_.gamma)

    def tokenize(self, X, training=False, generator=None) -> ContinuousTokenSet:
        check_is_fitted(self, "module_")
        x = torch.as_tensor(np.asarray(X, dtype=np.float64), dtype=self._torch_dtype())
        with torch.no_grad():
            return self.module_.tokenize(x, self.rho, training=training,
                                         generator=make_generator(generator), sigma=self.sigma)

    def decode(self, tokens) -> np.ndarray:
        check_is_fitted(self, "module_")
        if isinstance(tokens, ContinuousTokenSet):
            tokens = tokens.tokens
        with torch.no_grad():
            return self.module_.decode(torch.as_tensor(tokens, dtype=self._torch_dtype())).double().numpy()

    def transform(self, X):
        Xt = self._check_X(X, reset=False)
        with torch.no_grad():
            means = self.module_.encode(Xt)
        return means.flatten(-2).double().numpy()

    def token_means(self, X) -> np.ndarray:
        """Deterministic tokens shaped ``(n, K, token_dim)``."""
        return self.transform(X).reshape(-1, self.K, self.token_dim)

    def inverse_transform(self, Z):
        Z = np.asarray(Z, dtype=np.float64).reshape(-1, self.K, self.token_dim)
        return self.decode(Z)
