"""Shared fit loop for the reconstruction models (σ-VAE and baselines)."""

from __future__ import annotations

import copy
import logging

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .checkpoint import load_checkpoint, save_checkpoint
from .exceptions import NumericError

logger = logging.getLogger(__name__)

DTYPES = {"float32": torch.float32, "float64": torch.float64}


class AutoencoderEstimator(TransformerMixin, BaseEstimator):
    """fit/transform/inverse_transform around a torch reconstruction model.

    Subclasses provide ``_build_module(n_features)``, ``_loss(module, xb, gen)``
    returning ``(objective, batch reconstruction MSE)`` and optionally
    ``_init_from_batch(xb)``, which sees the first shuffled batch before any
    update. Training runs ``max_steps`` optimizer steps when given, otherwise
    ``epochs`` passes.
    """

    variant = "autoencoder"

    def _torch_dtype(self):
        return DTYPES[self.dtype]

    def _check_X(self, X, reset):
        X = check_array(X, dtype=np.float64)
        if reset:
            self.n_features_in_ = X.shape[1]
        elif X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return torch.as_tensor(X, dtype=self._torch_dtype())

    def _init_from_batch(self, xb):
        pass

    def _init_rows(self):
        return self.batch_size

    def _after_step(self, xb, step):
        pass

    def _n_steps(self, n):
        if self.max_steps is not None:
            return int(self.max_steps)
        return int(self.epochs) * int(np.ceil(n / self.batch_size))

    def fit(self, X, y=None):
        X = self._check_X(X, reset=True)
        n = X.shape[0]
        rng = np.random.default_rng(self.random_state)
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state or 0))
            self.module_ = self._build_module(X.shape[1]).to(self._torch_dtype())
        self.generator_ = torch.Generator()
        self.generator_.manual_seed(int(self.random_state or 0) + 1)
        opt = torch.optim.AdamW(self.module_.parameters(), lr=self.lr, weight_decay=self.weight_decay)

        order = rng.permutation(n)
        self.loss_curve_ = []
        self.recon_curve_ = []
        total = self._n_steps(n)
        pos = 0
        self._init_from_batch(X[torch.as_tensor(order[:self._init_rows()])])
        last_good = copy.deepcopy(self.module_.state_dict())
        for step in range(total):
            if pos + self.batch_size > n and pos > 0:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos:pos + self.batch_size]
            pos += self.batch_size
            xb = X[torch.as_tensor(idx)]
            self.module_.train()
            loss, recon = self._loss(self.module_, xb, self.generator_)
            if not torch.isfinite(loss):
                self.module_.load_state_dict(last_good)
                raise NumericError(f"{type(self).__name__}: non-finite loss at step {step}; "
                                   "parameters restored to the last finite step")
            opt.zero_grad()
            loss.backward()
            opt.step()
            self._after_step(xb, step)
            last_good = {k: v.detach().clone() for k, v in self.module_.state_dict().items()}
            self.loss_curve_.append(float(loss.detach()))
            self.recon_curve_.append(float(recon))
        self.n_steps_ = total
        self.module_.eval()
        return self

    def reconstruction_error(self, X) -> float:
        """Mean per-sample squared error of the deterministic round trip."""
        check_is_fitted(self, "module_")
        Xt = self._check_X(X, reset=False)
        Xhat = self.inverse_transform(self.transform(X))
        return float(np.mean(np.sum((Xhat - Xt.double().numpy()) ** 2, axis=1)))

    # -- persistence -------------------------------------------------------
    def _extra_state(self):
        return {}

    def _load_extra_state(self, extra):
        pass

    def save(self, path):
        check_is_fitted(self, "module_")
        extra = {"n_features_in": self.n_features_in_, "loss_curve": list(self.loss_curve_),
                 "recon_curve": list(self.recon_curve_),
                 "n_steps": self.n_steps_, **self._extra_state()}
        return save_checkpoint(path, self.variant, self.get_params(), self.module_.state_dict(), extra)

    @classmethod
    def load(cls, path):
        record = load_checkpoint(path, variant=cls.variant)
        est = cls(**record["config"])
        extra = record["extra"]
        est.n_features_in_ = extra["n_features_in"]
        est.module_ = est._build_module(est.n_features_in_).to(est._torch_dtype())
        est.module_.load_state_dict(record["tensors"])
        est.module_.eval()
        est.loss_curve_ = list(extra["loss_curve"])
        est.recon_curve_ = list(extra["recon_curve"])
        est.n_steps_ = extra["n_steps"]
        est.generator_ = torch.Generator()
        est.generator_.manual_seed(int(est.random_state or 0) + 1)
        est._load_extra_state(extra)
        return est
