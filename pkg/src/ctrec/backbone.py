"""Small causal sequence model standing in for the language-model backbone.

Input is a hybrid sequence mixing discrete tokens (boundary markers and
semantic labels) with continuous tokens from the tokenizer. Layout::

    <zs> u_1 .. u_K <ze>  [cat_j brand_j <zs> z_j1 .. z_jK <ze>] per history item

The model then generates the target item's category and brand labels; the
hidden states at the generating positions are pooled into the conditioning
vector for the diffusion head.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from ._nn import SelfAttentionBlock
from .exceptions import ShapeError

logger = logging.getLogger(__name__)

LAYOUT_VERSION = 1
PAD, Z_START, Z_END = 0, 1, 2
N_GENERATED = 2  # category, then brand


class LabelVocab:
    """Discrete vocabulary: padding, the two boundary markers, then category and brand labels."""

    def __init__(self, categories, brands):
        self.categories = tuple(sorted(set(categories)))
        self.brands = tuple(sorted(set(brands)))
        self.tokens = ("<pad>", "<z_start>", "<z_end>") + tuple(f"cat:{c}" for c in self.categories) \
            + tuple(f"brand:{b}" for b in self.brands)
        self._index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def category_id(self, category) -> int:
        try:
            return self._index[f"cat:{category}"]
        except KeyError:
            raise KeyError(f"unknown category label {category!r}") from None

    def brand_id(self, brand) -> int:
        try:
            return self._index[f"brand:{brand}"]
        except KeyError:
            raise KeyError(f"unknown brand label {brand!r}") from None

    @property
    def category_ids(self) -> np.ndarray:
        return np.arange(3, 3 + len(self.categories))

    @property
    def brand_ids(self) -> np.ndarray:
        return np.arange(3 + len(self.categories), len(self.tokens))

    def decode(self, token_id) -> str:
        tok = self.tokens[int(token_id)]
        return tok.split(":", 1)[1] if ":" in tok else tok

    def to_dict(self):
        return {"categories": list(self.categories), "brands": list(self.brands)}

    @classmethod
    def from_dict(cls, d):
        return cls(d["categories"], d["brands"])


@dataclass
class HybridSequence:
    """One prompt. ``token_ids`` holds PAD where ``is_cont`` is set and ``cont`` holds the vector."""

    token_ids: torch.Tensor  # (L,)
    cont: torch.Tensor  # (L, D_z)
    is_cont: torch.Tensor  # (L,) bool
    kinds: tuple[str, ...]

    def __len__(self):
        return len(self.kinds)

    @property
    def n_continuous(self) -> int:
        return int(self.is_cont.sum())


def prompt_length(n_history: int, K: int) -> int:
    return (K + 2) + n_history * (K + 4)


def build_sequence(user_tokens, history_item_tokens, history_labels, vocab: LabelVocab | None = None,
                   max_len: int = 20) -> HybridSequence:
    """Assemble the canonical prompt.

    ``user_tokens`` is ``(K, D_z)``; ``history_item_tokens`` a chronological
    list of ``(K, D_z)`` arrays; ``history_labels`` matching
    ``(category, brand)`` pairs, given as label strings (with ``vocab``) or
    token ids.
    """
    user_tokens = torch.as_tensor(np.asarray(user_tokens))
    K, Dz = user_tokens.shape
    if len(history_item_tokens) != len(history_labels):
        raise ValueError("history tokens and labels differ in length")
    if len(history_item_tokens) > max_len:
        raise ValueError(f"history longer than {max_len}")
    ids, conts, flags, kinds = [], [], [], []

    def disc(tok, kind):
        ids.append(tok)
        conts.append(torch.zeros(Dz, dtype=user_tokens.dtype))
        flags.append(False)
        kinds.append(kind)

    def block(tokens, kind):
        tokens = torch.as_tensor(np.asarray(tokens), dtype=user_tokens.dtype)
        if tokens.shape != (K, Dz):
            raise ShapeError(f"expected a ({K}, {Dz}) token block, got {tuple(tokens.shape)}")
        disc(Z_START, "z_start")
        for z in tokens:
            ids.append(PAD)
            conts.append(z)
            flags.append(True)
            kinds.append(kind)
        disc(Z_END, "z_end")

    block(user_tokens, "user")
    for tokens, (cat, brand) in zip(history_item_tokens, history_labels):
        if vocab is not None and isinstance(cat, str):
            cat, brand = vocab.category_id(cat), vocab.brand_id(brand)
        elif vocab is not None and not (0 <= int(cat) < len(vocab) and 0 <= int(brand) < len(vocab)):
            raise KeyError(f"unknown label id in ({cat}, {brand})")
        disc(int(cat), "category")
        disc(int(brand), "brand")
        block(tokens, "item")
    return HybridSequence(torch.tensor(ids, dtype=torch.long), torch.stack(conts),
                          torch.tensor(flags), tuple(kinds))


class IndexedPrompts:
    """Vectorised prompt builder over precomputed token tables.

    Continuous slots hold row indices into ``concat(user_table, item_table)``
    (each ``(n, K, D_z)`` flattened to ``(n*K, D_z)``), so a batch is gathered
    with one index operation. Produces exactly the layout of :func:`build_sequence`.
    """

    def __init__(self, K, n_users, item_category_ids, item_brand_ids):
        self.K = K
        self.n_users = n_users
        self.item_cat = np.asarray(item_category_ids)
        self.item_brand = np.asarray(item_brand_ids)

    def encode(self, user_idx, histories, gen_labels=None):
        """Pad a batch. ``gen_labels`` (B, <=2) appends teacher-forced generated labels.

        Returns ``(token_ids, cont_index, is_cont, last_prompt_pos)`` with
        ``cont_index = -1`` at discrete slots.
        """
        K = self.K
        B = len(histories)
        n_gen = 0 if gen_labels is None else np.asarray(gen_labels).shape[1]
        lengths = np.array([prompt_length(len(h), K) for h in histories]) + n_gen
        L = int(lengths.max())
        ids = np.full((B, L), PAD, dtype=np.int64)
        cidx = np.full((B, L), -1, dtype=np.int64)
        for b, (u, hist) in enumerate(zip(user_idx, histories)):
            ids[b, 0] = Z_START
            cidx[b, 1:K + 1] = u * K + np.arange(K)
            ids[b, K + 1] = Z_END
            p = K + 2
            for j in hist:
                ids[b, p] = self.item_cat[j]
                ids[b, p + 1] = self.item_brand[j]
                ids[b, p + 2] = Z_START
                cidx[b, p + 3:p + 3 + K] = (self.n_users + j) * K + np.arange(K)
                ids[b, p + 3 + K] = Z_END
                p += K + 4
            if n_gen:
                ids[b, p:p + n_gen] = gen_labels[b]
        is_cont = cidx >= 0
        last_prompt = lengths - n_gen - 1
        return torch.from_numpy(ids), torch.from_numpy(cidx), torch.from_numpy(is_cont), torch.from_numpy(last_prompt)


class Backbone(nn.Module):
    def __init__(self, vocab_size, token_dim, d_model=64, n_layers=2, n_heads=2, max_positions=256,
                 cond_dim=64):
        super().__init__()
        if n_layers > 4:
            raise ValueError("backbone is limited to 4 layers")
        self.max_positions = max_positions
        self.embed = nn.Embedding(vocab_size, d_model)
        self.cont_proj = nn.Linear(token_dim, d_model)
        self.pos = nn.Embedding(max_positions, d_model)
        self.blocks = nn.ModuleList(SelfAttentionBlock(d_model, n_heads, causal=True) for _ in range(n_layers))
        self.norm = nn.LayerNorm(d_model)
        self.head = nn.Linear(d_model, vocab_size)
        self.condition_net = nn.Sequential(nn.LayerNorm(d_model), nn.Linear(d_model, cond_dim))

    def forward(self, token_ids, cont, is_cont):
        """``(logits (B, L, V), hidden (B, L, d_model))``."""
        if token_ids.dim() == 1:
            token_ids, cont, is_cont = token_ids[None], cont[None], is_cont[None]
        L = token_ids.shape[1]
        if L > self.max_positions:
            raise ShapeError(f"sequence length {L} exceeds {self.max_positions} positions")
        cont = cont.to(self.cont_proj.weight.dtype)
        x = torch.where(is_cont[..., None], self.cont_proj(cont), self.embed(token_ids))
        x = x + self.pos(torch.arange(L))
        for blk in self.blocks:
            x = blk(x)
        hidden = self.norm(x)
        return self.head(hidden), hidden


def backbone_forward(seq: HybridSequence, model: Backbone):
    """Forward one prompt, dropping the oldest history items if it exceeds the position cap."""
    if len(seq) > model.max_positions:
        seq = truncate_sequence(seq, model.max_positions)
    return model(seq.token_ids, seq.cont, seq.is_cont)


def truncate_sequence(seq: HybridSequence, max_positions: int) -> HybridSequence:
    kinds = list(seq.kinds)
    K = kinds.index("z_end") - 1
    head = K + 2
    per_item = K + 4
    n_items = (len(kinds) - head) // per_item
    keep = max(0, (max_positions - head) // per_item)
    drop = n_items - keep
    logger.info("prompt of %d positions truncated: dropped %d oldest item(s)", len(kinds), drop)
    idx = torch.cat([torch.arange(head), torch.arange(head + drop * per_item, len(kinds))])
    return HybridSequence(seq.token_ids[idx], seq.cont[idx], seq.is_cont[idx], tuple(kinds[i] for i in idx))


def llm_loss(logits, targets):
    """Mean negative log-likelihood of ``targets`` (..., ) under ``logits`` (..., V)."""
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), torch.as_tensor(targets).reshape(-1))


def pool_generated(hidden):
    """Mean over generated positions; ``hidden`` is ``(..., G, d_model)`` with ``G >= 1``."""
    if hidden.shape[-2] < 1:
        raise ValueError("need at least one generated position to aggregate")
    return hidden.mean(dim=-2)


def aggregate_condition(hidden, model: Backbone):
    """``condition_net(LayerNorm(mean of generated-position hidden states))``."""
    return model.condition_net(pool_generated(hidden))


def restricted_argmax(logits, allowed_ids):
    """Greedy pick among ``allowed_ids`` (sorted ascending), lowest id winning ties."""
    allowed = torch.as_tensor(allowed_ids)
    return allowed[logits[..., allowed].argmax(dim=-1)]


def predict_semantics(seq: HybridSequence, model: Backbone, vocab: LabelVocab):
    """Greedy (temperature 0) decoding of ``(category, brand)`` labels for one prompt."""
    with torch.no_grad():
        logits, _ = backbone_forward(seq, model)
        cat = restricted_argmax(logits[0, -1], vocab.category_ids)
        ext = HybridSequence(torch.cat([seq.token_ids, cat[None]]),
                             torch.cat([seq.cont, torch.zeros_like(seq.cont[:1])]),
                             torch.cat([seq.is_cont, torch.tensor([False])]), seq.kinds + ("category",))
        logits, _ = backbone_forward(ext, model)
        brand = restricted_argmax(logits[0, -1], vocab.brand_ids)
    return vocab.decode(cat), vocab.decode(brand)
