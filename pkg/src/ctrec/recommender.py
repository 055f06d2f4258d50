"""End-to-end recommender: frozen tokenizers -> backbone -> diffusion head -> hybrid retrieval."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import time

import numpy as np
import torch
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted
from torch import nn

from .backbone import N_GENERATED, LAYOUT_VERSION, Backbone, IndexedPrompts, LabelVocab, \
    prompt_length, restricted_argmax
from .checkpoint import load_checkpoint, save_checkpoint
from .data import EmbeddingBase, SplitDataset
from .diffusion import Denoiser, build_schedule, cfg_sample, diffusion_loss, dispersive_loss, \
    row_generators
from .exceptions import NumericError
from .retrieval import DEFAULT_KS, MetricReport, aggregate_reports, compute_metrics, hybrid_scores, \
    rank_topk
from .tokenizer import SigmaVAETokenizer

logger = logging.getLogger(__name__)


def config_hash(params: dict) -> str:
    blob = json.dumps(params, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def train_tokenizers(base: EmbeddingBase, **params):
    """Phase one: independent σ-VAE tokenizers for users and items."""
    item_tok = SigmaVAETokenizer(**params).fit(base.item_vectors)
    user_params = dict(params, random_state=int(params.get("random_state", 0)) + 7919)
    user_tok = SigmaVAETokenizer(**user_params).fit(base.user_vectors)
    return user_tok, item_tok


class ContinuousTokenRecommender(BaseEstimator):
    """Phase-two model trained on ``L_llm + gamma1 * (L_diff + gamma2 * L_disp)``.

    ``head="diffusion"`` is the full model; ``head="projection"`` replaces the
    diffusion head with a linear map from the condition to the target
    embedding trained by squared error (ablation). ``pi_match`` selects the
    labels that must agree for the retrieval bonus: ``"category"``,
    ``"category+brand"`` or ``"none"``.

    With ``omega_grid`` set, the guidance strength used at inference
    (``omega_``) is the grid value with the best validation HR@10 after
    training; otherwise it is ``omega``.
    """

    def __init__(self, d_model=64, n_layers=2, n_heads=2, cond_dim=64, denoiser_hidden=128,
                 T=1000, inference_steps=100, beta_start=1e-4, beta_end=0.02, zeta=0.1, iota=0.5,
                 omega=2.0, omega_grid=None, gamma1=1.0, gamma2=0.5, pi_val=0.05, pi_match="category", head="diffusion",
                 lr=1e-5, weight_decay=1e-4, batch_size=24, epochs=10, max_steps=None,
                 select_on_valid=True, n_eval_seeds=5, max_len=20, random_state=0):
        self.d_model = d_model
        self.n_layers = n_layers
        self.n_heads = n_heads
        self.cond_dim = cond_dim
        self.denoiser_hidden = denoiser_hidden
        self.T = T
        self.inference_steps = inference_steps
        self.beta_start = beta_start
        self.beta_end = beta_end
        self.zeta = zeta
        self.iota = iota
        self.omega = omega
        self.omega_grid = omega_grid
        self.gamma1 = gamma1
        self.gamma2 = gamma2
        self.pi_val = pi_val
        self.pi_match = pi_match
        self.head = head
        self.lr = lr
        self.weight_decay = weight_decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.max_steps = max_steps
        self.select_on_valid = select_on_valid
        self.n_eval_seeds = n_eval_seeds
        self.max_len = max_len
        self.random_state = random_state

    # -- setup -------------------------------------------------------------
    def _prepare(self, split: SplitDataset, base: EmbeddingBase, user_tok, item_tok):
        self.item_ids_ = tuple(base.item_ids)
        self.user_ids_ = tuple(base.user_ids)
        self._item_index = {it: j for j, it in enumerate(self.item_ids_)}
        self._user_index = {u: i for i, u in enumerate(self.user_ids_)}
        cats = [split.catalog[i].category for i in self.item_ids_]
        brands = [split.catalog[i].brand for i in self.item_ids_]
        self.vocab_ = LabelVocab(cats, brands)
        self.item_cat_ = np.array([self.vocab_.category_id(c) for c in cats])
        self.item_brand_ = np.array([self.vocab_.brand_id(b) for b in brands])

        Q = np.asarray(base.item_vectors, dtype=np.float64)
        norms = np.linalg.norm(Q, axis=1, keepdims=True)
        self.item_vectors_ = Q
        # diffusion targets: unit-direction embeddings rescaled to unit per-coordinate variance
        self.targets_ = np.divide(Q, norms, out=np.zeros_like(Q), where=norms > 0) * np.sqrt(Q.shape[1])
        user_tokens = user_tok.token_means(base.user_vectors)
        item_tokens = item_tok.token_means(Q)
        self.K_, self.token_dim_ = item_tokens.shape[1:]
        self.token_table_ = torch.as_tensor(
            np.concatenate([user_tokens, item_tokens]).reshape(-1, self.token_dim_), dtype=torch.float32)
        train_counts = np.zeros(len(self.item_ids_))
        for seq in split.train_sequences.values():
            for it in seq:
                train_counts[self._item_index[it]] += 1
        self.train_counts_ = train_counts

    def _build_modules(self):
        self.prompts_ = IndexedPrompts(self.K_, len(self.user_ids_), self.item_cat_, self.item_brand_)
        max_pos = prompt_length(self.max_len, self.K_) + N_GENERATED
        self.schedule_ = build_schedule(self.T, self.beta_start, self.beta_end, self.inference_steps)
        d = self.targets_.shape[1]
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(int(self.random_state))
            self.backbone_ = Backbone(len(self.vocab_), self.token_dim_, self.d_model, self.n_layers,
                                      self.n_heads, max_pos, self.cond_dim)
            if self.head == "diffusion":
                self.head_ = Denoiser(d, self.cond_dim, self.denoiser_hidden, self.T, self.n_heads,
                                      seed=int(self.random_state) + 104729)
            elif self.head == "projection":
                self.head_ = nn.Linear(self.cond_dim, d)
            else:
                raise ValueError(f"unknown head {self.head!r}")

    def _examples(self, examples):
        users = np.array([self._user_index[e.user_id] for e in examples], dtype=np.int64)
        hists = [np.array([self._item_index[i] for i in e.history[-self.max_len:]], dtype=np.int64)
                 for e in examples]
        targets = np.array([self._item_index[e.target] for e in examples], dtype=np.int64)
        return users, hists, targets

    # -- forward pieces -----------------------------------------------------
    def _encode(self, users, hists, gen_labels):
        ids, cidx, is_cont, p0 = self.prompts_.encode(users, hists, gen_labels)
        cont = self.token_table_[cidx.clamp(min=0)]
        return ids, cont, is_cont, p0

    def _backbone_pass(self, users, hists, gen_labels):
        """Teacher-forced pass: label logits at the two generating positions and the condition."""
        ids, cont, is_cont, p0 = self._encode(users, hists, gen_labels)
        logits, hidden = self.backbone_(ids, cont, is_cont)
        rows = torch.arange(len(users))[:, None]
        pos = p0[:, None] + torch.arange(N_GENERATED + 1)
        gen_logits = logits[rows, pos[:, :N_GENERATED]]
        c = self.backbone_.condition_net(hidden[rows, pos].mean(dim=1))
        return gen_logits, c

    def _losses(self, users, hists, targets, generator):
        labels = np.stack([self.item_cat_[targets], self.item_brand_[targets]], axis=1)
        gen_logits, c = self._backbone_pass(users, hists, labels)
        l_llm = nn.functional.cross_entropy(gen_logits.reshape(-1, gen_logits.shape[-1]),
                                            torch.as_tensor(labels).reshape(-1))
        y0 = torch.as_tensor(self.targets_[targets], dtype=torch.float32)
        if self.head == "diffusion":
            l_diff, h = diffusion_loss(y0, c, self.head_, self.schedule_, self.zeta, generator)
            l_disp = dispersive_loss(h, self.iota) if len(users) > 1 else h.sum() * 0.0
        else:
            l_diff = ((self.head_(c) - y0) ** 2).sum(-1).mean()
            l_disp = torch.zeros((), dtype=l_diff.dtype)
        total = l_llm.double() + self.gamma1 * (l_diff.double() + self.gamma2 * l_disp.double())
        return total, l_llm, l_diff, l_disp

    def parameters_groups(self):
        return [{"params": list(self.backbone_.parameters()) + list(self.head_.parameters()),
                 "lr": self.lr, "weight_decay": self.weight_decay}]

    # -- training -----------------------------------------------------------
    def fit(self, split: SplitDataset, base: EmbeddingBase, user_tokenizer, item_tokenizer):
        self._prepare(split, base, user_tokenizer, item_tokenizer)
        self._build_modules()
        self.config_hash_ = config_hash(self.get_params())
        users, hists, targets = self._examples(split.train)
        n = len(users)
        rng = np.random.default_rng(self.random_state)
        gen = torch.Generator()
        gen.manual_seed(int(self.random_state) + 1)
        opt = torch.optim.AdamW(self.parameters_groups())
        steps_per_epoch = int(np.ceil(n / self.batch_size))
        total_steps = int(self.max_steps) if self.max_steps is not None else self.epochs * steps_per_epoch

        self.train_log_ = []
        self.valid_curve_ = []
        best = (-np.inf, None)
        order = rng.permutation(n)
        pos = 0
        t0 = time.perf_counter()
        for step in range(total_steps):
            if pos >= n:
                order = rng.permutation(n)
                pos = 0
            idx = order[pos:pos + self.batch_size]
            pos += self.batch_size
            self.backbone_.train()
            self.head_.train()
            total, l_llm, l_diff, l_disp = self._losses(users[idx], [hists[i] for i in idx], targets[idx], gen)
            if not torch.isfinite(total):
                if best[1] is not None:
                    self._load_state(best[1])
                raise NumericError(f"non-finite training loss at step {step}")
            opt.zero_grad()
            total.backward()
            opt.step()
            self.train_log_.append({
                "phase": "recommender", "step": step, "L_llm": float(l_llm.detach()),
                "L_diff": float(l_diff.detach()), "L_disp": float(l_disp.detach()), "total": float(total.detach()), "wall": time.perf_counter() - t0,
                "config": self.config_hash_})
            end_of_epoch = (step + 1) % steps_per_epoch == 0 or step + 1 == total_steps
            if self.select_on_valid and split.valid and end_of_epoch:
                hr = self._evaluate_examples(split.valid, seeds=[int(self.random_state)])["HR@10"]
                self.valid_curve_.append((step + 1, hr))
                logger.info("step %d: valid HR@10 %.4f", step + 1, hr)
                if hr > best[0]:
                    best = (hr, self._state())
        if best[1] is not None:
            self._load_state(best[1])
            self.best_valid_hr_ = best[0]
        self.backbone_.eval()
        self.head_.eval()
        self.omega_ = float(self.omega)
        if self.omega_grid and self.head == "diffusion" and split.valid:
            self.omega_ = self._select_omega(split.valid)
        return self

    def _select_omega(self, examples):
        scores = {}
        for w in self.omega_grid:
            self.omega_ = float(w)
            scores[float(w)] = self._evaluate_examples(examples, seeds=[int(self.random_state)])["HR@10"]
            logger.info("omega %g: valid HR@10 %.4f", w, scores[float(w)])
        self.omega_scores_ = scores
        # first grid value wins ties
        return max(scores, key=lambda w: (scores[w], -list(scores).index(w)))

    def _state(self):
        return (copy.deepcopy(self.backbone_.state_dict()), copy.deepcopy(self.head_.state_dict()))

    def _load_state(self, state):
        self.backbone_.load_state_dict(state[0])
        self.head_.load_state_dict(state[1])

    # -- inference -----------------------------------------------------------
    @torch.no_grad()
    def _conditions(self, users, hists, chunk=256):
        """Greedy label decoding and the resulting conditions for a batch of prompts."""
        self.backbone_.eval()
        cats, brands, conds = [], [], []
        for s in range(0, len(users), chunk):
            u, h = users[s:s + chunk], hists[s:s + chunk]
            B = len(u)
            ids, cont, is_cont, p0 = self._encode(u, h, None)
            logits, _ = self.backbone_(ids, cont, is_cont)
            cat = restricted_argmax(logits[torch.arange(B), p0], self.vocab_.category_ids)
            gen = np.stack([cat.numpy(), np.full(B, self.vocab_.brand_ids[0])], axis=1)
            ids, cont, is_cont, p0 = self._encode(u, h, gen)
            logits, _ = self.backbone_(ids, cont, is_cont)
            brand = restricted_argmax(logits[torch.arange(B), p0 + 1], self.vocab_.brand_ids)
            gen[:, 1] = brand.numpy()
            _, c = self._backbone_pass(u, h, gen)
            cats.append(cat.numpy())
            brands.append(brand.numpy())
            conds.append(c)
        return np.concatenate(cats), np.concatenate(brands), torch.cat(conds)

    @torch.no_grad()
    def _generate(self, c, users, seed):
        if self.head == "projection":
            return self.head_(c).double().numpy()
        self.head_.eval()
        gens = row_generators(seed, users)
        return cfg_sample(c, self.head_, self.schedule_, getattr(self, "omega_", self.omega), gens).double().numpy()

    def _match(self, cats, brands):
        if self.pi_match == "none":
            return None
        match = self.item_cat_[None, :] == cats[:, None]
        if self.pi_match == "category+brand":
            match &= self.item_brand_[None, :] == brands[:, None]
        elif self.pi_match != "category":
            raise ValueError(f"unknown pi_match {self.pi_match!r}")
        return match

    def _rank(self, users, hists, seed, K):
        cats, brands, c = self._conditions(users, hists)
        y_hat = self._generate(c, users, seed)
        scores = hybrid_scores(y_hat, self.item_vectors_, self._match(cats, brands), self.pi_val)
        return [rank_topk(scores[b], K, exclude=np.unique(hists[b])) for b in range(len(users))], scores

    def _evaluate_examples(self, examples, seeds, Ks=DEFAULT_KS) -> MetricReport:
        users, hists, targets = self._examples(examples)
        reports = []
        for seed in seeds:
            ranked, _ = self._rank(users, hists, seed, max(Ks))
            reports.append(compute_metrics(ranked, list(targets), Ks))
        return aggregate_reports(reports)

    def evaluate(self, split: SplitDataset, which="test", seeds=None, Ks=DEFAULT_KS) -> MetricReport:
        """Mean (and std across inference seeds) of HR@K / NDCG@K on ``which``."""
        check_is_fitted(self, "backbone_")
        if seeds is None:
            seeds = [int(self.random_state) + 1000 + r for r in range(self.n_eval_seeds)]
        return self._evaluate_examples(split.examples(which), list(seeds), Ks)

    def predict(self, examples, K=10, seed=None):
        """Top-``K`` item ids per example."""
        check_is_fitted(self, "backbone_")
        users, hists, _ = self._examples_no_target(examples)
        ranked, _ = self._rank(users, hists, int(self.random_state) + 1000 if seed is None else seed, K)
        return [[self.item_ids_[j] for j in r] for r in ranked]

    def rankings(self, examples, K=20, seed=None):
        """``(user_id, item_id, rank, score)`` rows for dumping."""
        users, hists, _ = self._examples_no_target(examples)
        ranked, scores = self._rank(users, hists, int(self.random_state) + 1000 if seed is None else seed, K)
        rows = []
        for b, r in enumerate(ranked):
            for pos, j in enumerate(r, start=1):
                rows.append((examples[b].user_id, self.item_ids_[j], pos, float(scores[b, j])))
        return rows

    def _examples_no_target(self, examples):
        users = np.array([self._user_index[e.user_id] for e in examples], dtype=np.int64)
        hists = [np.array([self._item_index[i] for i in e.history[-self.max_len:]], dtype=np.int64)
                 for e in examples]
        return users, hists, None

    # -- persistence -----------------------------------------------------------
    def save(self, path):
        check_is_fitted(self, "backbone_")
        tensors = {f"backbone.{k}": v for k, v in self.backbone_.state_dict().items()}
        tensors.update({f"head.{k}": v for k, v in self.head_.state_dict().items()})
        tensors["token_table"] = self.token_table_
        extra = {
            "layout_version": LAYOUT_VERSION, "vocab": self.vocab_.to_dict(),
            "item_ids": list(self.item_ids_), "user_ids": list(self.user_ids_),
            "item_cat": self.item_cat_, "item_brand": self.item_brand_,
            "item_vectors": self.item_vectors_, "targets": self.targets_, "train_counts": self.train_counts_,
            "K": int(self.K_), "token_dim": int(self.token_dim_), "train_log": self.train_log_,
            "valid_curve": self.valid_curve_, "config_hash": self.config_hash_,
            "omega": getattr(self, "omega_", float(self.omega)),
            "schedule": {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                         "inference_steps": self.inference_steps},
        }
        return save_checkpoint(path, "recommender", self.get_params(), tensors, extra)

    @classmethod
    def load(cls, path):
        record = load_checkpoint(path, variant="recommender")
        extra = record["extra"]
        if extra["layout_version"] != LAYOUT_VERSION:
            raise ValueError(f"prompt layout version {extra['layout_version']} is not supported")
        est = cls(**record["config"])
        est.vocab_ = LabelVocab.from_dict(extra["vocab"])
        est.item_ids_ = tuple(extra["item_ids"])
        est.user_ids_ = tuple(extra["user_ids"])
        est._item_index = {it: j for j, it in enumerate(est.item_ids_)}
        est._user_index = {u: i for i, u in enumerate(est.user_ids_)}
        est.item_cat_ = extra["item_cat"]
        est.item_brand_ = extra["item_brand"]
        est.item_vectors_ = extra["item_vectors"]
        est.targets_ = extra["targets"]
        est.train_counts_ = extra["train_counts"]
        est.K_, est.token_dim_ = extra["K"], extra["token_dim"]
        est.train_log_ = extra["train_log"]
        est.valid_curve_ = extra["valid_curve"]
        est.config_hash_ = extra["config_hash"]
        est.omega_ = extra.get("omega", float(est.omega))
        tensors = record["tensors"]
        est.token_table_ = tensors["token_table"]
        est._build_modules()
        est.backbone_.load_state_dict({k[9:]: v for k, v in tensors.items() if k.startswith("backbone.")})
        est.head_.load_state_dict({k[5:]: v for k, v in tensors.items() if k.startswith("head.")})
        est.backbone_.eval()
        est.head_.eval()
        return est
