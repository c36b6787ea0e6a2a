"""Shared/private vocabulary split and cross-attention word embeddings.

The vocabulary of the two domains is partitioned into shared,
source-private, and target-private cells. Shared words own plain embedding
columns; each private word's effective embedding is its stored column plus
a softmax-weighted combination of shared columns (the softmax normalizes
over the shared axis, so the correction is a convex combination). During
pretraining the source-private branch is live, during finetuning the
target-private branch; shared columns pass through unchanged in both
modes.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffcore import ParameterStore

logger = logging.getLogger(__name__)

UNK_TOKEN = "<unk>"

PRETRAIN = "pretrain"
FINETUNE = "finetune"


class UnknownTokenError(KeyError):
    def __init__(self, token: str, domain: str):
        super().__init__(f"unknown token {token!r} for domain {domain!r}")
        self.token = token
        self.domain = domain


@dataclass
class VocabPartition:
    shared: list[str]
    source_private: list[str]
    target_private: list[str]
    lookup: dict[str, tuple[str, int]] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self.lookup:
            for cell, tokens in (("shared", self.shared),
                                 ("source_private", self.source_private),
                                 ("target_private", self.target_private)):
                for i, tok in enumerate(tokens):
                    self.lookup[tok] = (cell, i)

    def cell_of(self, token: str) -> tuple[str, int] | None:
        return self.lookup.get(token)

    def domain_tokens(self, domain: str) -> list[str]:
        private = self.source_private if domain == "source" else self.target_private
        return self.shared + private


def partition_vocab(source_tokens: set[str], target_tokens: set[str]) -> VocabPartition:
    """Exact set algebra; alphabetical ordering for determinism."""
    if not source_tokens or not target_tokens:
        raise ValueError("both token sets must be nonempty")
    shared = sorted(source_tokens & target_tokens)
    if not shared:
        logger.warning("empty shared vocabulary: cross-attention branches will be no-ops")
    return VocabPartition(
        shared=shared,
        source_private=sorted(source_tokens - target_tokens),
        target_private=sorted(target_tokens - source_tokens),
    )


@dataclass
class CrossAttentionEmbedding:
    """Embedding matrices plus the attention bridges between cells.

    Matrices are (d, n) with one column per word. ``attention_enabled``
    False is the plain-table ablation: private columns are used as stored,
    exactly the limit of attention logits frozen at -inf.
    """

    partition: VocabPartition
    d: int
    shared: torch.Tensor          # (d, n_shared)
    src_private: torch.Tensor     # (d, n_source_private)
    tgt_private: torch.Tensor     # (d, n_target_private)
    attn_src: torch.Tensor        # (n_shared, n_source_private)
    attn_tgt: torch.Tensor        # (n_shared, n_target_private)
    mode: str = PRETRAIN
    attention_enabled: bool = True

    def set_mode(self, mode: str) -> None:
        if mode not in (PRETRAIN, FINETUNE):
            raise ValueError(f"mode must be {PRETRAIN!r} or {FINETUNE!r}")
        self.mode = mode

    def active_domain(self) -> str:
        return "source" if self.mode == PRETRAIN else "target"


def init_embedding(store: ParameterStore, partition: VocabPartition, d: int,
                   rng: np.random.Generator, prefix: str = "vocab",
                   attention_enabled: bool = True) -> CrossAttentionEmbedding:
    """Register embedding parameters: N(0, 1/sqrt(d)) tables, zero attention."""
    scale = 1.0 / np.sqrt(d)

    def table(n):
        return rng.normal(0.0, scale, size=(d, n))

    shared = store.register(f"{prefix}.shared", table(len(partition.shared)))
    src_priv = store.register(f"{prefix}.src_private", table(len(partition.source_private)))
    tgt_priv = store.register(f"{prefix}.tgt_private", table(len(partition.target_private)))
    attn_src = store.register(f"{prefix}.attn_src",
                              np.zeros((len(partition.shared), len(partition.source_private))))
    attn_tgt = store.register(f"{prefix}.attn_tgt",
                              np.zeros((len(partition.shared), len(partition.target_private))))
    return CrossAttentionEmbedding(partition=partition, d=d, shared=shared,
                                   src_private=src_priv, tgt_private=tgt_priv,
                                   attn_src=attn_src, attn_tgt=attn_tgt,
                                   attention_enabled=attention_enabled)


def effective_private(emb: CrossAttentionEmbedding, domain: str) -> torch.Tensor:
    """Private-cell embeddings for ``domain`` under the current mode.

    The attention correction is applied only to the branch the mode
    activates (pretrain -> source, finetune -> target); the other cell and
    the disabled-attention ablation pass through stored columns.
    """
    stored = emb.src_private if domain == "source" else emb.tgt_private
    if not emb.attention_enabled or len(emb.partition.shared) == 0:
        return stored
    if domain != emb.active_domain():
        return stored
    attn = emb.attn_src if domain == "source" else emb.attn_tgt
    if attn.shape[1] == 0:
        return stored
    return stored + emb.shared @ torch.softmax(attn, dim=0)


def effective_embeddings(emb: CrossAttentionEmbedding) -> tuple[torch.Tensor, torch.Tensor]:
    """(shared, active-domain private) effective matrices.

    The shared matrix is returned as-is: shared columns are identical in
    both modes by construction.
    """
    return emb.shared, effective_private(emb, emb.active_domain())


def domain_table(emb: CrossAttentionEmbedding, domain: str) -> torch.Tensor:
    """Full effective lookup table for one domain: [shared | private] columns."""
    return torch.cat([emb.shared, effective_private(emb, domain)], dim=1)


def token_index(emb: CrossAttentionEmbedding, token: str, domain: str,
                unk_token: str | None = None) -> int:
    """Column index of ``token`` in :func:`domain_table` for ``domain``."""
    hit = emb.partition.cell_of(token)
    private_cell = "source_private" if domain == "source" else "target_private"
    if hit is None or (hit[0] != "shared" and hit[0] != private_cell):
        if unk_token is not None:
            hit = emb.partition.cell_of(unk_token)
            if hit is None or hit[0] != "shared":
                raise UnknownTokenError(token, domain)
        else:
            raise UnknownTokenError(token, domain)
    cell, idx = hit
    return idx if cell == "shared" else len(emb.partition.shared) + idx


def embed(tokens: list[str], emb: CrossAttentionEmbedding, active_domain: str,
          unk_token: str | None = None) -> torch.Tensor:
    """Embed a token sequence; returns (T, d) rows in token order."""
    table = domain_table(emb, active_domain)
    if not tokens:
        return table.new_zeros((0, emb.d))
    idx = torch.tensor([token_index(emb, t, active_domain, unk_token) for t in tokens],
                       dtype=torch.long)
    return table.index_select(1, idx).T
