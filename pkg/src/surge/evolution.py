"""Interest evolution (attention-gated GRU), prediction head and training loss."""
from __future__ import annotations

import torch
from torch import Tensor, nn

PROB_CLIP = 1e-7


class AUGRUCell(nn.Module):
    """GRU cell whose update gate is scaled by a per-step attention score.

    Gate layout in the stacked weights is (reset, update, candidate). The
    update gate ``u`` weights the candidate: ``h = (1 - a*u) h_prev + a*u h_cand``,
    so ``a = 0`` leaves the state untouched and ``a = 1`` is a plain GRU step.
    The reset gate acts on the projected state, ``tanh(W x + b + r*(U h + c))``.
    """

    def __init__(self, input_size: int, hidden_size: int):
        super().__init__()
        self.input_size = input_size
        self.hidden_size = hidden_size
        self.x2h = nn.Linear(input_size, 3 * hidden_size)
        self.h2h = nn.Linear(hidden_size, 3 * hidden_size)
        for lin in (self.x2h, self.h2h):
            for block in lin.weight.data.chunk(3, dim=0):
                nn.init.xavier_uniform_(block)
            nn.init.zeros_(lin.bias)

    def forward(self, x: Tensor, h: Tensor, att: Tensor) -> Tensor:
        xr, xu, xc = self.x2h(x).chunk(3, dim=-1)
        hr, hu, hc = self.h2h(h).chunk(3, dim=-1)
        reset = torch.sigmoid(xr + hr)
        update = torch.sigmoid(xu + hu) * att[:, None]
        cand = torch.tanh(xc + reset * hc)
        return (1 - update) * h + update * cand


class EvolutionLayer(nn.Module):
    """Runs an AUGRU (``kind='augru'``) or plain GRU (``kind='gru'``) over a sequence.

    For the plain GRU the attention is replaced by the step mask, so padded
    steps still leave the state unchanged.
    """

    def __init__(self, input_size: int, hidden_size: int, kind: str = "augru"):
        super().__init__()
        if kind not in ("augru", "gru"):
            raise ValueError(f"unknown evolution layer {kind!r}")
        self.kind = kind
        self.cell = AUGRUCell(input_size, hidden_size)
        self.last_steps = 0

    @property
    def hidden_size(self) -> int:
        return self.cell.hidden_size

    def forward(self, seq: Tensor, scores: Tensor, step_mask: Tensor | None = None) -> Tensor:
        B, T, _ = seq.shape
        if step_mask is None:
            step_mask = torch.ones(B, T, dtype=torch.bool, device=seq.device)
        if self.kind == "augru":
            att = scores.clamp(0.0, 1.0) * step_mask.to(seq.dtype)
        else:
            att = step_mask.to(seq.dtype)
        h = seq.new_zeros(B, self.hidden_size)
        for t in range(T):
            h = self.cell(seq[:, t], h, att[:, t])
        self.last_steps = T
        return h


def augru_forward(seq: Tensor, scores: Tensor, cell: AUGRUCell) -> Tensor:
    """Final hidden state of an attention-gated rollout starting from zeros."""
    h = seq.new_zeros(seq.shape[0], cell.hidden_size)
    att = scores.clamp(0.0, 1.0)
    for t in range(seq.shape[1]):
        h = cell(seq[:, t], h, att[:, t])
    return h


class PredictionHead(nn.Module):
    def __init__(self, in_dim: int, hidden: tuple[int, ...] = (100, 64)):
        super().__init__()
        layers: list[nn.Module] = []
        prev = in_dim
        for width in hidden:
            layers += [nn.Linear(prev, width), nn.ReLU()]
            prev = width
        layers.append(nn.Linear(prev, 1))
        self.net = nn.Sequential(*layers)
        for mod in self.net:
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                nn.init.zeros_(mod.bias)

    def forward(self, x: Tensor) -> Tensor:
        return self.net(x).squeeze(-1)


def prediction_input(h_s: Tensor, h_g: Tensor | None, h_t: Tensor) -> Tensor:
    """h_s ‖ h_g ‖ h_t ‖ h_g ⊙ h_t, or h_s ‖ h_t without a graph readout."""
    if h_g is None:
        return torch.cat([h_s, h_t], dim=-1)
    return torch.cat([h_s, h_g, h_t, h_g * h_t], dim=-1)


def predict(h_s: Tensor, h_g: Tensor | None, h_t: Tensor, head: PredictionHead) -> Tensor:
    return torch.sigmoid(head(prediction_input(h_s, h_g, h_t)))


def nll(prob: Tensor, label: Tensor) -> Tensor:
    p = prob.clamp(PROB_CLIP, 1 - PROB_CLIP)
    y = label.to(p.dtype)
    return -(y * p.log() + (1 - y) * (1 - p).log()).mean()


def l2_penalty(module: nn.Module, exclude: tuple[str, ...] = ()) -> Tensor:
    """Squared L2 norm of every trainable non-bias tensor not under an ``exclude`` prefix."""
    terms = [p.pow(2).sum() for name, p in module.named_parameters()
             if p.requires_grad and not name.endswith("bias") and not name.startswith(exclude)]
    return torch.stack(terms).sum()


def loss(
    prob: Tensor,
    label: Tensor,
    module: nn.Module | None = None,
    l2: float = 0.0,
    regs=None,
    reg_weights: tuple[float, float, float] = (0.0, 0.0, 0.0),
    l2_exclude: tuple[str, ...] = (),
) -> Tensor:
    """Mean NLL + l2 * ||Theta||^2 + weighted assignment regularizers."""
    total = nll(prob, label)
    if l2 and module is not None:
        total = total + l2 * l2_penalty(module, l2_exclude)
    if regs is not None and any(reg_weights):
        total = total + regs.weighted(*reg_weights)
    return total
