"""Quantized reconstruction baselines (VQ-VAE, RQ-VAE) and a plain Gaussian VAE.

These exist for the reconstruction benchmark and tokenizer ablations; the
recommender itself only consumes σ-VAE tokens.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import kmeans_plusplus
from sklearn.utils.validation import check_is_fitted
from torch import nn

from ._base import AutoencoderEstimator
from ._nn import mlp

logger = logging.getLogger(__name__)


@dataclass
class Codebook:
    entries: torch.Tensor  # (S, D_c)
    usage: torch.Tensor = field(default=None)

    def __post_init__(self):
        self.entries = torch.as_tensor(self.entries)
        if self.usage is None:
            self.usage = torch.zeros(len(self.entries), dtype=torch.long)

    @property
    def size(self) -> int:
        return self.entries.shape[0]


@dataclass
class ResidualStack:
    levels: list

    @property
    def depth(self) -> int:
        return len(self.levels)


def _entries(cb):
    return cb.entries if isinstance(cb, Codebook) else torch.as_tensor(cb)


def vq_quantize(mu, codebook):
    """Nearest codeword under squared Euclidean distance; ties go to the lowest index.

    ``mu`` is ``(D_c,)`` or ``(B, D_c)``. Returns ``(index, codeword)`` with
    matching leading shape.
    """
    C = _entries(codebook)
    if C.numel() == 0 or C.shape[0] == 0:
        raise ValueError("cannot quantize against an empty codebook")
    mu = torch.as_tensor(mu, dtype=C.dtype)
    single = mu.dim() == 1
    m = mu[None] if single else mu
    if m.shape[-1] != C.shape[-1]:
        raise ValueError(f"width mismatch: vector {m.shape[-1]} vs codebook {C.shape[-1]}")
    # explicit differences keep exact ties exact; argmin returns the first minimum
    dist = ((m[:, None, :] - C[None, :, :]) ** 2).sum(-1)
    idx = dist.argmin(dim=1)
    code = C[idx]
    return (int(idx[0]), code[0]) if single else (idx, code)


def rq_quantize(mu, stack):
    """Residual quantization: level r codes what the previous levels left over.

    Returns ``(indices, approximation, residuals)`` where ``residuals[r]`` is
    the residual *after* level ``r`` (``residuals[r] = residuals[r-1] - c_r``).
    """
    levels = stack.levels if isinstance(stack, ResidualStack) else list(stack)
    if not levels:
        raise ValueError("residual stack needs depth >= 1")
    residual = torch.as_tensor(mu, dtype=_entries(levels[0]).dtype)
    approx = torch.zeros_like(residual)
    indices, residuals = [], []
    for cb in levels:
        idx, code = vq_quantize(residual, cb)
        indices.append(idx)
        approx = approx + code
        residual = residual - code
        residuals.append(residual)
    if residual.dim() > 1:
        indices = torch.stack(indices, dim=-1)
    return indices, approx, residuals


def kmeans_pp_codebook(encodings: np.ndarray, S: int, seed: int) -> np.ndarray:
    """k-means++ seeding; when there are fewer encodings than codewords the rest are jittered copies."""
    rng = np.random.default_rng(seed)
    X = np.asarray(encodings, dtype=np.float64)
    n_seed = min(S, len(X))
    centers, _ = kmeans_plusplus(X, n_seed, random_state=seed)
    if n_seed < S:
        extra = X[rng.integers(0, len(X), S - n_seed)]
        extra = extra + 1e-2 * X.std() * rng.standard_normal(extra.shape)
        centers = np.vstack([centers, extra])
    return centers


class VQAutoencoder(nn.Module):
    """Encoder -> residual stack of ``depth`` codebooks -> decoder (depth 1 is plain VQ-VAE)."""

    def __init__(self, n_features, latent_dim=48, hidden=128, codebook_size=256, depth=1, activation="silu"):
        super().__init__()
        self.encoder = mlp(n_features, hidden, latent_dim, activation)
        self.decoder = mlp(latent_dim, hidden, n_features, activation)
        self.codebooks = nn.ParameterList(
            nn.Parameter(torch.randn(codebook_size, latent_dim) * 0.1) for _ in range(depth))
        self.register_buffer("usage", torch.zeros(depth, codebook_size, dtype=torch.long))

    def quantize(self, mu):
        """Returns ``(z_q with straight-through gradient, codebook+commit pieces, indices)``."""
        residual = mu
        approx = torch.zeros_like(mu)
        cb_terms, commit_terms, indices = [], [], []
        for C in self.codebooks:
            idx, _ = vq_quantize(residual.detach(), C.detach())
            code = C[idx]
            cb_terms.append(((residual.detach() - code) ** 2).sum(-1))
            commit_terms.append(((residual - code.detach()) ** 2).sum(-1))
            approx = approx + code
            residual = residual - code
            indices.append(idx)
        z_q = mu + (approx - mu).detach()
        return z_q, sum(cb_terms), sum(commit_terms), torch.stack(indices, dim=-1)

    def forward(self, x, quantize=True):
        mu = self.encoder(x)
        if not quantize:
            z = mu + (mu - mu).detach()
            zero = torch.zeros(x.shape[0], dtype=x.dtype)
            return self.decoder(z), zero, zero, None
        z_q, cb, commit, idx = self.quantize(mu)
        return self.decoder(z_q), cb, commit, idx


def vq_loss(x, x_hat, codebook_term, commit_term, commitment=0.25):
    """``||x_hat - x||^2 + ||sg(mu) - c||^2 + commitment * ||mu - sg(c)||^2``, batch mean."""
    return (((x_hat - x) ** 2).sum(-1) + codebook_term + commitment * commit_term).mean()


class _QuantizedEstimator(AutoencoderEstimator):
    depth = 1

    def _build_module(self, n_features):
        if self.codebook_size < 2:
            raise ValueError("codebook_size must be >= 2")
        return VQAutoencoder(n_features, self.latent_dim, self.hidden, self.codebook_size,
                             self._depth(), self.activation)

    def _init_rows(self):
        return max(self.batch_size, self.init_rows)

    def _init_from_batch(self, xb):
        with torch.no_grad():
            residual = self.module_.encoder(xb).double().numpy()
            for r, C in enumerate(self.module_.codebooks):
                centers = kmeans_pp_codebook(residual, self.codebook_size, int(self.random_state or 0) + r)
                C.copy_(torch.as_tensor(centers, dtype=C.dtype))
                idx, code = vq_quantize(torch.as_tensor(residual, dtype=C.dtype), C)
                residual = residual - code.double().numpy()
        self.n_reseeded_ = 0
        self._steps_per_epoch = None

    def _loss(self, module, xb, gen):
        x_hat, cb, commit, idx = module(xb)
        with torch.no_grad():
            for r in range(idx.shape[1]):
                module.usage[r] += torch.bincount(idx[:, r], minlength=self.codebook_size)
        loss = vq_loss(xb, x_hat, cb, commit, self.commitment)
        return loss, ((x_hat - xb) ** 2).sum(-1).mean().detach()

    def _after_step(self, xb, step):
        # a codeword unused for a whole epoch is moved onto a random current encoding
        if self._steps_per_epoch is None:
            self._steps_per_epoch = max(1, int(np.ceil(self.n_train_ / self.batch_size)))
        if (step + 1) % self._steps_per_epoch:
            return
        with torch.no_grad():
            residual = self.module_.encoder(xb)
            for r, C in enumerate(self.module_.codebooks):
                dead = torch.nonzero(self.module_.usage[r] == 0).ravel()
                if len(dead):
                    pick = torch.randint(0, len(xb), (len(dead),), generator=self.generator_)
                    C[dead] = residual[pick]
                    self.n_reseeded_ += len(dead)
                    logger.info("%s level %d: reseeded %d dead codeword(s) at step %d",
                                type(self).__name__, r, len(dead), step)
                idx, code = vq_quantize(residual, C)
                residual = residual - code
            self.module_.usage.zero_()

    def fit(self, X, y=None):
        self.n_train_ = len(X)
        return super().fit(X, y)

    def transform(self, X):
        """Quantized latent (sum of selected codewords), ``(n, latent_dim)``."""
        check_is_fitted(self, "module_")
        Xt = self._check_X(X, reset=False)
        with torch.no_grad():
            z_q, _, _, _ = self.module_.quantize(self.module_.encoder(Xt))
        return z_q.double().numpy()

    def codes(self, X) -> np.ndarray:
        check_is_fitted(self, "module_")
        Xt = self._check_X(X, reset=False)
        with torch.no_grad():
            _, _, _, idx = self.module_.quantize(self.module_.encoder(Xt))
        return idx.numpy()

    def inverse_transform(self, Z):
        with torch.no_grad():
            return self.module_.decoder(torch.as_tensor(np.asarray(Z), dtype=self._torch_dtype())).double().numpy()

    def codebooks(self):
        check_is_fitted(self, "module_")
        return ResidualStack([Codebook(C.detach().clone(), self.module_.usage[r].clone())
                              for r, C in enumerate(self.module_.codebooks)])


class VQVAE(_QuantizedEstimator):
    """Single-codebook VQ-VAE with straight-through gradients and commitment loss."""

    variant = "vq-vae"

    def __init__(self, latent_dim=48, hidden=128, codebook_size=256, commitment=0.25, init_rows=1024,
                 activation="silu", lr=1e-4, weight_decay=1e-3, batch_size=24, epochs=50,
                 max_steps=None, dtype="float32", random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.codebook_size = codebook_size
        self.commitment = commitment
        self.init_rows = init_rows
        self.activation = activation
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.dtype = dtype
        self.random_state = random_state

    def _depth(self):
        return 1


class RQVAE(_QuantizedEstimator):
    """Residual-quantized VAE: ``depth`` codebooks applied to successive residuals."""

    variant = "rq-vae"

    def __init__(self, latent_dim=48, hidden=128, codebook_size=256, depth=3, commitment=0.25,
                 init_rows=1024, activation="silu", lr=1e-4, weight_decay=1e-3, batch_size=24,
                 epochs=50, max_steps=None, dtype="float32", random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.codebook_size = codebook_size
        self.depth = depth
        self.commitment = commitment
        self.init_rows = init_rows
        self.activation = activation
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.dtype = dtype
        self.random_state = random_state

    def _depth(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        return self.depth


class GaussianVAE(nn.Module):
    def __init__(self, n_features, latent_dim=48, hidden=128, activation="silu"):
        super().__init__()
        self.encoder = mlp(n_features, hidden, 2 * latent_dim, activation)
        self.decoder = mlp(latent_dim, hidden, n_features, activation)

    def forward(self, x, generator=None):
        mean, logvar = self.encoder(x).chunk(2, dim=-1)
        eps = torch.randn(mean.shape, generator=generator, dtype=mean.dtype)
        z = mean + torch.exp(0.5 * logvar) * eps
        kl = 0.5 * (mean ** 2 + logvar.exp() - 1.0 - logvar).sum(-1)
        return self.decoder(z), kl


class PlainVAE(AutoencoderEstimator):
    """Standard VAE with a learned diagonal posterior and a KL prior term."""

    variant = "vae"

    def __init__(self, latent_dim=48, hidden=128, kl_weight=1.0, activation="silu", lr=1e-4,
                 weight_decay=1e-3, batch_size=24, epochs=50, max_steps=None, dtype="float32",
                 random_state=0):
        self.latent_dim = latent_dim
        self.hidden = hidden
        self.kl_weight = kl_weight
        self.activation = activation
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.dtype = dtype
        self.random_state = random_state

    def _build_module(self, n_features):
        return GaussianVAE(n_features, self.latent_dim, self.hidden, self.activation)

    def _loss(self, module, xb, gen):
        x_hat, kl = module(xb, gen)
        recon = ((x_hat - xb) ** 2).sum(-1)
        return (recon + self.kl_weight * kl).mean(), recon.mean().detach()

    def transform(self, X):
        check_is_fitted(self, "module_")
        Xt = self._check_X(X, reset=False)
        with torch.no_grad():
            return self.module_.encoder(Xt).chunk(2, dim=-1)[0].double().numpy()

    def inverse_transform(self, Z):
        with torch.no_grad():
            return self.module_.decoder(torch.as_tensor(np.asarray(Z), dtype=self._torch_dtype())).double().numpy()
