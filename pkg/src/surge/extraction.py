"""Soft-assignment graph pooling with assignment regularizers and weighted readout.

``S`` is (B, L, m): row i is node i's distribution over the m clusters,
zero for padded nodes.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import Tensor, nn

from .fusion import neighborhoods


def _safe_sqrt(x: Tensor) -> Tensor:
    # sqrt has an infinite slope at 0
    return x.clamp_min(torch.finfo(x.dtype).tiny).sqrt()


@dataclass
class PooledGraph:
    assign: Tensor  # S, (B, L, m)
    h: Tensor  # (B, m, D)
    gamma: Tensor  # (B, m)
    adj: Tensor  # (B, m, m)


@dataclass
class RegularizerTerms:
    """Per-instance values, shape (B,)."""

    same_mapping: Tensor
    single_affiliation: Tensor
    relative_position: Tensor

    def weighted(self, w_m: float, w_a: float, w_p: float) -> Tensor:
        return (w_m * self.same_mapping + w_a * self.single_affiliation + w_p * self.relative_position).mean()


def assignment(h: Tensor, adj: Tensor, mask: Tensor, w_p: nn.Linear, *, nb: Tensor | None = None) -> Tensor:
    """S_i = softmax(W_p · sum_{j in N_i} A_ij h_j), where N_i includes i with unit weight."""
    agg = (neighborhoods(adj, mask) if nb is None else nb).to(h.dtype) @ h
    return torch.softmax(w_p(agg), dim=-1) * mask[..., None].to(h.dtype)


def pool(assign: Tensor, h: Tensor, gamma: Tensor, adj: Tensor) -> PooledGraph:
    """h* = S^T h, gamma* = S^T gamma, A* = S^T A S for a symmetric A."""
    st = assign.transpose(1, 2)
    adj_p = st @ adj @ assign
    # the two matmuls round differently above and below the diagonal
    adj_p = 0.5 * (adj_p + adj_p.transpose(1, 2))
    return PooledGraph(assign, st @ h, (st @ gamma[..., None]).squeeze(-1), adj_p)


def reg_same_mapping(adj: Tensor, assign: Tensor) -> Tensor:
    """||A - S S^T||_F per instance (padded rows of both are zero)."""
    diff = adj - assign @ assign.transpose(1, 2)
    return _safe_sqrt(diff.pow(2).sum(dim=(1, 2)))


def reg_single_affiliation(assign: Tensor, mask: Tensor) -> Tensor:
    """Mean row entropy of S over valid nodes (natural log, 0 log 0 = 0)."""
    # clamp keeps d/dS finite on exact zeros (padded rows)
    ent = -(assign * assign.clamp_min(torch.finfo(assign.dtype).tiny).log()).sum(-1)
    n = mask.sum(-1).clamp_min(1).to(assign.dtype)
    return (ent * mask.to(assign.dtype)).sum(-1) / n


def positions(mask: Tensor, dtype) -> Tensor:
    """1..n over the valid slots, 0 on padding."""
    return torch.cumsum(mask.to(dtype), dim=-1) * mask.to(dtype)


def reg_relative_position(assign: Tensor, mask: Tensor) -> Tensor:
    """||P_n S - P_m||_2 with P_n = (1..n) on valid nodes and P_m = (1..m)."""
    p_n = positions(mask, assign.dtype)
    p_m = torch.arange(1, assign.shape[-1] + 1, dtype=assign.dtype, device=assign.device)
    diff = (p_n[:, None, :] @ assign).squeeze(1) - p_m
    return _safe_sqrt(diff.pow(2).sum(-1))


def readout(h: Tensor, gamma: Tensor, mask: Tensor) -> Tensor:
    """Score-weighted sum of node embeddings."""
    return ((gamma * mask.to(h.dtype))[..., None] * h).sum(1)


def row_entropy(assign: Tensor, mask: Tensor) -> Tensor:
    """Mean entropy of S rows across a batch; a diagnostic, same as the L_A term."""
    return reg_single_affiliation(assign, mask).mean()


class ExtractionLayer(nn.Module):
    def __init__(self, in_dim: int, num_clusters: int):
        super().__init__()
        if num_clusters < 1:
            raise ValueError("num_clusters must be >= 1")
        self.num_clusters = num_clusters
        self.w_p = nn.Linear(in_dim, num_clusters, bias=False)
        nn.init.xavier_uniform_(self.w_p.weight)

    def forward(self, h: Tensor, gamma: Tensor, adj: Tensor, mask: Tensor,
                nb: Tensor | None = None) -> tuple[PooledGraph, RegularizerTerms]:
        s = assignment(h, adj, mask, self.w_p, nb=nb)
        pooled = pool(s, h, gamma, adj)
        regs = RegularizerTerms(
            reg_same_mapping(adj, s),
            reg_single_affiliation(s, mask),
            reg_relative_position(s, mask),
        )
        return pooled, regs
