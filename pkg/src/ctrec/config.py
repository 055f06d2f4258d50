"""Run configuration and its flat ``key = value`` file format.

One setting per line, ``#`` starts a comment, blank lines are ignored::

    interactions = data/interactions.tsv
    seed = 3
    gamma2 = 0.5

Values are coerced to the type of the matching :class:`RunConfig` field.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .exceptions import ConfigError

GAMMA_GRID = (0.0, 0.5, 1.0, 1.5, 2.0)
MAX_EPOCHS = 200


@dataclass
class RunConfig:
    # data
    interactions: str = ""
    catalog: str = ""
    embeddings: str = ""
    embedding_mode: str = "replace"
    out_dir: str = "runs"
    q1: float = 0.9
    q2: float = 0.95
    max_len: int = 20
    seed: int = 0
    # dimensions
    D: int = 64
    token_dim: int = 16
    cond_dim: int = 64
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 2
    denoiser_hidden: int = 128
    # tokenizer
    K: int = 3
    rho: float = 0.2
    beta: float = 0.25
    gamma_floor: float = 1e-3
    tok_hidden: int = 128
    tok_lr: float = 1e-4
    tok_weight_decay: float = 1e-3
    tok_batch_size: int = 24
    tok_epochs: int = 50
    # diffusion
    T: int = 1000
    inference_steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    zeta: float = 0.1
    iota: float = 0.5
    omega: float = 2.0
    omega_grid: str = ""  # comma-separated; picks omega on valid HR@10 when non-empty
    # joint objective and retrieval
    gamma1: float = 1.0
    gamma2: float = 0.5
    pi_val: float = 0.05
    pi_match: str = "category"
    head: str = "diffusion"
    lr: float = 1e-5
    weight_decay: float = 1e-4
    batch_size: int = 24
    epochs: int = 10
    n_eval_seeds: int = 5
    # reconstruction benchmark
    bench_steps: int = 1000
    bench_lr: float = 1e-3

    def validate(self) -> "RunConfig":
        for name in ("gamma1", "gamma2"):
            if getattr(self, name) not in GAMMA_GRID:
                raise ConfigError(f"{name}={getattr(self, name)} is outside the grid {GAMMA_GRID}")
        if not 0 <= self.epochs <= MAX_EPOCHS:
            raise ConfigError(f"epochs must lie in 0..{MAX_EPOCHS}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError("rho must lie in [0, 1)")
        if self.omega < 0 or any(w < 0 for w in self.omega_values()):
            raise ConfigError("omega must be non-negative")
        if self.embedding_mode not in ("replace", "concat"):
            raise ConfigError("embedding_mode is 'replace' or 'concat'")
        if self.head not in ("diffusion", "projection"):
            raise ConfigError("head is 'diffusion' or 'projection'")
        if self.pi_match not in ("category", "category+brand", "none"):
            raise ConfigError("pi_match is 'category', 'category+brand' or 'none'")
        return self

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides).validate()

    def omega_values(self) -> tuple:
        try:
            return tuple(float(v) for v in self.omega_grid.split(",") if v.strip())
        except ValueError:
            raise ConfigError(f"omega_grid expects comma-separated numbers, got {self.omega_grid!r}") from None

    def tokenizer_params(self) -> dict:
        return dict(K=self.K, rho=self.rho, beta=self.beta, token_dim=self.token_dim, hidden=self.tok_hidden,
                    gamma_floor=self.gamma_floor, lr=self.tok_lr, weight_decay=self.tok_weight_decay,
                    batch_size=self.tok_batch_size, epochs=self.tok_epochs, random_state=self.seed)

    def recommender_params(self) -> dict:
        keys = ("d_model", "n_layers", "n_heads", "cond_dim", "denoiser_hidden", "T", "inference_steps",
                "beta_start", "beta_end", "zeta", "iota", "omega", "gamma1", "gamma2", "pi_val", "pi_match",
                "head", "lr", "weight_decay", "batch_size", "epochs", "n_eval_seeds", "max_len")
        params = {k: getattr(self, k) for k in keys}
        params["omega_grid"] = self.omega_values() or None
        params["random_state"] = self.seed
        return params


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _coerce(key, raw, where):
    kind = _FIELDS[key].type
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: {key} expects {kind}, got {raw!r}") from None


def parse_assignments(pairs, where="override") -> dict:
    """``["key=value", ...]`` -> typed dict."""
    out = {}
    for i, pair in enumerate(pairs, start=1):
        if "=" not in pair:
            raise ConfigError(f"{where} {i}: expected key=value, got {pair!r}")
        key, raw = (s.strip() for s in pair.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{where} {i}: unknown key {key!r}")
        out[key] = _coerce(key, raw, f"{where} {i}")
    return out


def read_config(path) -> dict:
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    out = {}
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if line:
            out.update(parse_assignments([line], where=f"{path}:{lineno}"))
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    """File values first, then ``key=value`` overrides."""
    values = read_config(path) if path else {}
    values.update(parse_assignments(overrides))
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f.name} = {getattr(cfg, f.name)}\n" for f in fields(cfg))
