"""Interest-graph construction from a padded behaviour sequence.

All functions take batched tensors: embeddings ``(B, L, d)`` and a boolean
validity mask ``(B, L)``. Padded nodes never carry similarity or edges.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor, nn

NORM_FLOOR = 1e-12


class MetricHeads(nn.Module):
    """phi trainable weight vectors for the multi-head weighted cosine."""

    def __init__(self, num_heads: int, dim: int):
        super().__init__()
        if num_heads < 1:
            raise ValueError("need at least one metric head")
        self.weight = nn.Parameter(torch.empty(num_heads, dim))
        nn.init.xavier_uniform_(self.weight)

    @property
    def num_heads(self) -> int:
        return self.weight.shape[0]


def pair_mask(mask: Tensor) -> Tensor:
    """(B, L, L) bool: both endpoints valid and i != j."""
    m = mask[:, :, None] & mask[:, None, :]
    eye = torch.eye(mask.shape[1], dtype=torch.bool, device=mask.device)
    return m & ~eye


def similarity_matrix(h: Tensor, heads: Tensor, mask: Tensor) -> Tensor:
    """Mean over heads of cos(w ⊙ h_i, w ⊙ h_j).

    ``heads`` is the ``(phi, d)`` weight tensor. Zero-norm weighted vectors
    give cosine 0. Diagonal and padded rows/columns are zero.
    """
    weighted = h[:, None, :, :] * heads[None, :, None, :]  # (B, phi, L, d)
    norm = weighted.norm(dim=-1, keepdim=True).clamp_min(NORM_FLOOR)
    unit = weighted / norm
    cos = unit @ unit.transpose(-1, -2)  # (B, phi, L, L)
    sim = cos.mean(dim=1)
    sim = 0.5 * (sim + sim.transpose(1, 2))  # exact symmetry for the global ranking
    return sim * pair_mask(mask).to(sim.dtype)


def edge_budget(eps: float, n: int) -> int:
    # round before ceil so eps*n^2 = 3.0000000000000004 still means 3
    return math.ceil(round(eps * n * n, 9))


def sparsify(sim: Tensor, eps: float, mask: Tensor) -> Tensor:
    """0/1 adjacency keeping entries >= the ceil(eps*n^2)-th largest off-diagonal value.

    The rank is taken over the whole graph of each sequence (both (i, j) and
    (j, i) counted), not per node: a per-node top-k would force every node
    to the same degree, and an absolute cut-off drifts as embeddings train.
    Ties at the threshold are all kept. If the budget exceeds n(n-1) the
    graph is complete on the valid nodes.
    """
    if not 0 < eps <= 1:
        raise ValueError(f"eps must lie in (0, 1], got {eps}")
    B, L, _ = sim.shape
    valid = pair_mask(mask)
    with torch.no_grad():
        # M is exactly symmetric, so the r-th largest of the n(n-1) ordered
        # pairs is the ceil(r/2)-th largest of the upper triangle
        iu, ju = torch.triu_indices(L, L, offset=1)
        upper = sim.detach().masked_fill(~valid, -math.inf)[:, iu, ju].cpu().numpy()
        ranks = [min(edge_budget(eps, k), k * (k - 1)) for k in mask.sum(dim=1).tolist()]
        thresh = np.full(B, np.inf, dtype=upper.dtype)
        by_rank: dict[int, list[int]] = {}
        for b, r in enumerate(ranks):
            by_rank.setdefault(r, []).append(b)
        for r, rows in by_rank.items():
            if r == 0:
                continue  # fewer than two valid nodes: no edges
            kth = upper.shape[1] - (r + 1) // 2
            thresh[rows] = np.partition(upper[rows], kth, axis=1)[:, kth]
        thresh = torch.from_numpy(thresh).to(sim.device)
        adj = (sim.detach() >= thresh[:, None, None]) & valid
    return adj.to(sim.dtype)


@dataclass
class InterestGraph:
    sim: Tensor  # (B, L, L)
    adj: Tensor  # (B, L, L), 0/1
    mask: Tensor  # (B, L) bool
    eps: float

    @property
    def n(self) -> Tensor:
        return self.mask.sum(dim=1)


def build_graph(h: Tensor, heads: MetricHeads, mask: Tensor, eps: float) -> InterestGraph:
    # the 0/1 adjacency is a constant of the forward pass, so no gradient can
    # reach the similarity matrix from downstream
    with torch.no_grad():
        sim = similarity_matrix(h, heads.weight, mask)
    return InterestGraph(sim, sparsify(sim, eps, mask), mask, eps)


def dump_edges(graph: InterestGraph, b: int = 0) -> str:
    """Edge list ``i j M_ij`` (one line per directed edge) for instance ``b``."""
    adj = graph.adj[b]
    sim = graph.sim[b]
    lines = [
        f"{i} {j} {sim[i, j].item():.6f}"
        for i, j in torch.nonzero(adj).tolist()
    ]
    return "\n".join(lines) + ("\n" if lines else "")
