"""End-to-end model: graph -> fusion -> pooling -> evolution -> prediction."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import torch
from torch import Tensor, nn

from .data import PAD
from .evolution import EvolutionLayer, PredictionHead, loss, prediction_input
from .extraction import ExtractionLayer, PooledGraph, RegularizerTerms, readout
from .fusion import FusionLayer, NodeState, QueryScorer, neighborhoods
from .graph import InterestGraph, MetricHeads, build_graph


@dataclass
class ModelConfig:
    num_items: int
    max_len: int = 50
    dim: int = 40
    heads: int = 2
    pooled_len: int = 10
    eps: float = 0.2
    k_hop: int = 1
    att_hidden: int | None = None
    hidden: int | None = None  # evolution state size; defaults to dim
    head_hidden: tuple[int, ...] = (100, 64)
    per_head_scores: bool = False
    fusion: bool = True
    cluster_aware: bool = True
    query_aware: bool = True
    extraction: bool = True
    readout: bool = True
    evolution: str = "augru"

    def __post_init__(self):
        self.head_hidden = tuple(self.head_hidden)
        if self.extraction and not 1 <= self.pooled_len <= self.max_len:
            raise ValueError(f"pooled_len must lie in [1, max_len={self.max_len}]")
        if not 0 < self.eps <= 1:
            raise ValueError("eps must lie in (0, 1]")

    @property
    def node_dim(self) -> int:
        return self.dim * self.heads if self.fusion else self.dim

    @property
    def state_size(self) -> int:
        return self.hidden or self.dim

    @property
    def uses_graph(self) -> bool:
        return self.fusion or self.extraction

    @property
    def uses_readout(self) -> bool:
        return self.extraction and self.readout

    def to_dict(self) -> dict:
        d = asdict(self)
        d["head_hidden"] = list(self.head_hidden)
        return d


def gru4rec_config(**kw) -> ModelConfig:
    """Embeddings + plain GRU + prediction head."""
    kw.update(fusion=False, extraction=False, query_aware=False, cluster_aware=False, evolution="gru")
    return ModelConfig(**kw)


@dataclass
class ForwardOutput:
    prob: Tensor
    logit: Tensor
    regs: RegularizerTerms | None
    graph: InterestGraph | None
    nodes: NodeState
    pooled: PooledGraph | None
    evolution_steps: int


class Surge(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embedding = nn.Embedding(cfg.num_items + 1, cfg.dim, padding_idx=PAD)
        nn.init.xavier_uniform_(self.embedding.weight)
        with torch.no_grad():
            self.embedding.weight[PAD].zero_()
        self.metric = MetricHeads(cfg.heads, cfg.dim) if cfg.uses_graph else None
        if cfg.fusion:
            self.fusion = FusionLayer(
                cfg.dim, cfg.heads, cfg.att_hidden, cfg.k_hop,
                cfg.cluster_aware, cfg.query_aware, cfg.per_head_scores,
            )
            self.scorer = None
        else:
            self.fusion = None
            needs_scores = cfg.evolution == "augru" or cfg.uses_readout
            self.scorer = QueryScorer(cfg.dim, cfg.att_hidden or cfg.dim, cfg.query_aware and needs_scores)
        self.extraction = ExtractionLayer(cfg.node_dim, cfg.pooled_len) if cfg.extraction else None
        self.evolution = EvolutionLayer(cfg.node_dim, cfg.state_size, cfg.evolution)
        target_dim = cfg.node_dim if cfg.uses_readout else cfg.dim
        in_dim = cfg.state_size + (3 * target_dim if cfg.uses_readout else target_dim)
        self.head = PredictionHead(in_dim, cfg.head_hidden)

    def tile_target(self, h_t: Tensor) -> Tensor:
        # the readout lives in phi*d; repeat the target once per head to match
        reps = self.cfg.node_dim // self.cfg.dim
        return h_t.repeat(1, reps) if reps > 1 else h_t

    def forward(self, item_seq: Tensor, target: Tensor) -> ForwardOutput:
        cfg = self.cfg
        mask = item_seq != PAD
        h = self.embedding(item_seq)
        h_t = self.embedding(target)

        graph = build_graph(h, self.metric, mask, cfg.eps) if cfg.uses_graph else None
        nb = neighborhoods(graph.adj, mask) if graph is not None else None
        if self.fusion is not None:
            nodes = self.fusion(h, h_t, graph.adj, mask, nb)
        else:
            beta, gamma = self.scorer(h, h_t, mask)
            nodes = NodeState(h * mask[..., None].to(h.dtype), gamma, None, beta, None)

        pooled = regs = None
        h_g = None
        if self.extraction is not None:
            pooled, regs = self.extraction(nodes.h, nodes.gamma, graph.adj, mask, nb)
            h_s = self.evolution(pooled.h, pooled.gamma)
            if cfg.readout:
                h_g = readout(nodes.h, nodes.gamma, mask)
        else:
            h_s = self.evolution(nodes.h, nodes.gamma, mask)

        target_in = self.tile_target(h_t) if h_g is not None else h_t
        logit = self.head(prediction_input(h_s, h_g, target_in))
        return ForwardOutput(torch.sigmoid(logit), logit, regs, graph, nodes, pooled, self.evolution.last_steps)

    def objective(self, out: ForwardOutput, label: Tensor, l2: float, reg_weights: tuple[float, float, float]) -> Tensor:
        # the metric heads only shape the 0/1 adjacency and get no task gradient;
        # an L2 pull alone would drive them to zero under Adam
        return loss(out.prob, label, self, l2, out.regs, reg_weights, l2_exclude=("metric.",))


def parameter_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def parameter_groups(model: Surge) -> dict[str, int]:
    """Parameter count per top-level component."""
    groups: dict[str, int] = {}
    for name, p in model.named_parameters():
        key = name.split(".")[0]
        groups[key] = groups.get(key, 0) + p.numel()
    return groups
