"""Cluster- and query-aware graph attentive convolution."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

MASK_LOGIT = -1e9


def neighborhoods(adj: Tensor, mask: Tensor) -> Tensor:
    """(B, L, L) bool: j in N_i, i.e. an edge or j == i, valid nodes only."""
    eye = torch.eye(adj.shape[-1], dtype=torch.bool, device=adj.device)
    valid = mask[:, :, None] & mask[:, None, :]
    return ((adj > 0) | eye) & valid


def cluster_embedding(h: Tensor, adj: Tensor, mask: Tensor, k: int = 1, *, nb: Tensor | None = None) -> Tensor:
    """Mean embedding over the k-hop neighbourhood of each node (self included).

    ``nb`` optionally passes a precomputed ``neighborhoods(adj, mask)``.
    """
    if k < 1:
        raise ValueError("hop count must be >= 1")
    step = (neighborhoods(adj, mask) if nb is None else nb).to(h.dtype)
    reach = step
    for _ in range(k - 1):
        reach = ((reach @ step) > 0).to(h.dtype)
    count = reach.sum(-1, keepdim=True).clamp_min(1.0)
    return (reach @ h) / count


class AttentionScore(nn.Module):
    """score = MLP(W x ‖ y ‖ W x ⊙ y), a two-layer LeakyReLU network."""

    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.proj = nn.Linear(dim, dim, bias=False)
        self.mlp = nn.Sequential(nn.Linear(3 * dim, hidden), nn.LeakyReLU(), nn.Linear(hidden, 1))

    def forward(self, x: Tensor, y: Tensor) -> Tensor:
        wx = self.proj(x)
        return self.mlp(torch.cat([wx, y, wx * y], dim=-1)).squeeze(-1)


def cluster_score(h: Tensor, h_c: Tensor, att: AttentionScore) -> Tensor:
    return att(h, h_c)


def query_score(h: Tensor, target: Tensor, att: AttentionScore) -> Tensor:
    """``target`` is the (B, d) target-item embedding, broadcast over nodes."""
    return att(h, target[:, None, :].expand_as(h))


def attention_coefficients(alpha: Tensor, beta: Tensor, adj: Tensor, mask: Tensor, *, nb: Tensor | None = None) -> Tensor:
    """E_ij = softmax over j in N_i of (alpha_i + beta_j); zero outside N_i and on padded rows.

    ``alpha``/``beta`` are (B, L) or (B, phi, L); the output gains the same
    leading head axis.
    """
    if nb is None:
        nb = neighborhoods(adj, mask)
    if alpha.dim() == 3:
        nb = nb[:, None]
    logits = alpha[..., :, None] + beta[..., None, :]
    logits = logits.masked_fill(~nb, MASK_LOGIT)
    # softmax subtracts the row max internally
    return torch.softmax(logits, dim=-1) * nb.to(logits.dtype)


def fuse(h: Tensor, coef: Tensor, w_a: Tensor, mask: Tensor, activation=F.leaky_relu) -> Tensor:
    """Per head: act(W_a^k · sum_j E_ij h_j + h_i); heads concatenated.

    ``w_a`` is (phi, d, d); ``coef`` is (B, L, L) shared by all heads or
    (B, phi, L, L).
    """
    if coef.dim() == 3:
        agg = (coef @ h)[:, None]  # (B, 1, L, d)
    else:
        agg = coef @ h[:, None]  # (B, phi, L, d)
    z = torch.einsum("bkld,ked->bkle", agg, w_a) + h[:, None]
    z = activation(z) * mask[:, None, :, None].to(h.dtype)
    B, phi, L, d = z.shape
    return z.permute(0, 2, 1, 3).reshape(B, L, phi * d)


def node_scores(beta: Tensor, mask: Tensor) -> Tensor:
    """Softmax of the query scores over valid nodes; 0 on padding."""
    logits = beta.masked_fill(~mask, MASK_LOGIT)
    return torch.softmax(logits, dim=-1) * mask.to(beta.dtype)


@dataclass
class NodeState:
    h: Tensor  # (B, L, phi*d) fused embeddings
    gamma: Tensor  # (B, L)
    alpha: Tensor | None
    beta: Tensor | None
    coef: Tensor | None


class QueryScorer(nn.Module):
    """Node importance from the query score alone; used when graph convolution is disabled."""

    def __init__(self, dim: int, hidden: int, enabled: bool = True):
        super().__init__()
        self.att = AttentionScore(dim, hidden) if enabled else None

    def forward(self, h: Tensor, target: Tensor, mask: Tensor) -> tuple[Tensor, Tensor]:
        if self.att is None:
            beta = torch.zeros(h.shape[:2], dtype=h.dtype, device=h.device)
        else:
            beta = query_score(h, target, self.att)
        return beta, node_scores(beta, mask)


class FusionLayer(nn.Module):
    def __init__(
        self,
        dim: int,
        num_heads: int = 1,
        att_hidden: int | None = None,
        k_hop: int = 1,
        cluster_aware: bool = True,
        query_aware: bool = True,
        per_head_scores: bool = False,
    ):
        super().__init__()
        hidden = att_hidden or dim
        self.dim = dim
        self.num_heads = num_heads
        self.k_hop = k_hop
        self.per_head_scores = per_head_scores
        n_score = num_heads if per_head_scores else 1
        self.cluster_att = nn.ModuleList(AttentionScore(dim, hidden) for _ in range(n_score)) if cluster_aware else None
        self.query_att = nn.ModuleList(AttentionScore(dim, hidden) for _ in range(n_score)) if query_aware else None
        self.w_a = nn.Parameter(torch.empty(num_heads, dim, dim))
        for k in range(num_heads):
            nn.init.xavier_uniform_(self.w_a.data[k])

    @property
    def out_dim(self) -> int:
        return self.num_heads * self.dim

    def scores(self, h: Tensor, target: Tensor, adj: Tensor, mask: Tensor, nb: Tensor | None = None) -> tuple[Tensor, Tensor]:
        zeros = torch.zeros(h.shape[:2], dtype=h.dtype, device=h.device)
        if self.cluster_att is not None:
            h_c = cluster_embedding(h, adj, mask, self.k_hop, nb=nb)
            alpha = torch.stack([cluster_score(h, h_c, att) for att in self.cluster_att], dim=1)
        else:
            alpha = zeros[:, None]
        if self.query_att is not None:
            beta = torch.stack([query_score(h, target, att) for att in self.query_att], dim=1)
        else:
            beta = zeros[:, None]
        if not self.per_head_scores:
            return alpha[:, 0], beta[:, 0]
        return alpha.expand(-1, self.num_heads, -1), beta.expand(-1, self.num_heads, -1)

    def forward(self, h: Tensor, target: Tensor, adj: Tensor, mask: Tensor, nb: Tensor | None = None) -> NodeState:
        if nb is None:
            nb = neighborhoods(adj, mask)
        alpha, beta = self.scores(h, target, adj, mask, nb)
        coef = attention_coefficients(alpha, beta, adj, mask, nb=nb)
        fused = fuse(h, coef, self.w_a, mask)
        # per-head variant: node importance from the head-averaged query score
        gamma = node_scores(beta if beta.dim() == 2 else beta.mean(1), mask)
        return NodeState(fused, gamma, alpha, beta, coef)
